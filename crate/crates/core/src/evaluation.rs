//! Objective metrics: DTW alignment, mel-cepstral distortion, pitch RMSE and
//! correlation, and a pitch estimate read back from synthetic mels.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::MelLayout;
use crate::error::{Error, Result};
use crate::synthesis::MelFeature;
use crate::Matrix;

/// Monotone warping path from `(0, 0)` to `(len_a - 1, len_b - 1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
}

impl AlignmentPath {
    pub fn is_diagonal(&self) -> bool {
        self.pairs.iter().enumerate().all(|(k, &(i, j))| i == k && j == k)
    }
}

/// Dynamic time warping over `len_a × len_b` with pairwise `cost(i, j)`.
///
/// Ties during backtracking prefer the diagonal step, then a step in `a`,
/// then a step in `b`.
pub fn dtw_with(
    len_a: usize,
    len_b: usize,
    mut cost: impl FnMut(usize, usize) -> f64,
) -> Result<(AlignmentPath, f64)> {
    if len_a == 0 || len_b == 0 {
        return Err(Error::invalid("DTW needs two non-empty sequences"));
    }
    let mut acc = vec![f64::INFINITY; len_a * len_b];
    let at = |i: usize, j: usize| i * len_b + j;
    for i in 0..len_a {
        for j in 0..len_b {
            let c = cost(i, j);
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = c + best;
        }
    }
    let total = acc[at(len_a - 1, len_b - 1)];
    let (mut i, mut j) = (len_a - 1, len_b - 1);
    let mut pairs = vec![(i, j)];
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((AlignmentPath { pairs }, total))
}

fn euclidean(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DTW between the rows of two matrices under Euclidean frame distance.
pub fn dtw_align(a: &Matrix, b: &Matrix) -> Result<(AlignmentPath, f64)> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape("DTW inputs differ in width"));
    }
    dtw_with(a.nrows(), b.nrows(), |i, j| euclidean(a.row(i), b.row(j)))
}

/// DTW between scalar sequences under absolute difference.
pub fn dtw_align_1d(a: &[f64], b: &[f64]) -> Result<(AlignmentPath, f64)> {
    dtw_with(a.len(), b.len(), |i, j| (a[i] - b[j]).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CepstrumMode {
    /// Use mel bins as cepstral stand-ins.
    #[default]
    Direct,
    /// DCT-II of each frame first, as for log-mel spectra of real audio.
    Dct,
}

/// Per-frame DCT-II.
pub fn dct_frames(m: &Matrix) -> Matrix {
    let n = m.ncols();
    let mut basis = Matrix::zeros((n, n));
    for src in 0..n {
        for k in 0..n {
            basis[[src, k]] = (std::f64::consts::PI * k as f64 * (src as f64 + 0.5) / n as f64).cos();
        }
    }
    m.dot(&basis)
}

const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Mel-cepstral distortion in dB after DTW alignment, excluding coefficient 0.
pub fn mcd_with(a: &MelFeature, b: &MelFeature, mode: CepstrumMode) -> Result<f64> {
    if a.num_bins() != b.num_bins() {
        return Err(Error::shape(format!(
            "mel bin counts differ: {} vs {}",
            a.num_bins(),
            b.num_bins()
        )));
    }
    if a.num_bins() < 2 {
        return Err(Error::shape("MCD needs at least two coefficients"));
    }
    let (ca, cb) = match mode {
        CepstrumMode::Direct => (a.data.clone(), b.data.clone()),
        CepstrumMode::Dct => (dct_frames(&a.data), dct_frames(&b.data)),
    };
    let ca = ca.slice(ndarray::s![.., 1..]).to_owned();
    let cb = cb.slice(ndarray::s![.., 1..]).to_owned();
    let (path, _) = dtw_align(&ca, &cb)?;
    let total: f64 = path
        .pairs
        .iter()
        .map(|&(i, j)| MCD_SCALE * (2.0 * euclidean(ca.row(i), cb.row(j)).powi(2)).sqrt())
        .sum();
    Ok(total / path.pairs.len() as f64)
}

pub fn mcd(a: &MelFeature, b: &MelFeature) -> Result<f64> {
    mcd_with(a, b, CepstrumMode::Direct)
}

/// Pearson correlation; undefined when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("correlation needs two equal non-empty sequences"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let denom = (saa * sbb).sqrt();
    if denom <= 1e-12 * n {
        return Err(Error::UndefinedMetric("correlation of a constant sequence".into()));
    }
    Ok((sab / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PitchMetrics {
    pub rmse_hz: f64,
    /// `None` when correlation is undefined.
    pub corr: Option<f64>,
}

/// RMSE and correlation over the given aligned index pairs.
pub fn pitch_metrics_on_path(a: &[f64], b: &[f64], path: &AlignmentPath) -> Result<PitchMetrics> {
    if path.pairs.is_empty() {
        return Err(Error::UndefinedMetric("empty alignment".into()));
    }
    let xa: Vec<f64> = path.pairs.iter().map(|&(i, _)| a[i]).collect();
    let xb: Vec<f64> = path.pairs.iter().map(|&(_, j)| b[j]).collect();
    let mse = xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / xa.len() as f64;
    let corr = match pearson(&xa, &xb) {
        Ok(c) => Some(c),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(PitchMetrics {
        rmse_hz: mse.sqrt(),
        corr,
    })
}

/// DTW-aligned pitch RMSE and correlation over voiced frames.
pub fn pitch_metrics(f0_a: &[f64], f0_b: &[f64]) -> Result<PitchMetrics> {
    if f0_a.is_empty() || f0_b.is_empty() {
        return Err(Error::UndefinedMetric("no voiced frames to compare".into()));
    }
    if f0_a.iter().chain(f0_b).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("pitch values must be positive and finite"));
    }
    let (path, _) = dtw_align_1d(f0_a, f0_b)?;
    pitch_metrics_on_path(f0_a, f0_b, &path)
}

/// Minimum peak energy for a frame to count as voiced.
pub const VOICED_THRESHOLD: f64 = 0.2;

/// Half-width, in bins, of the window around the peak used for the centroid.
const CENTROID_RADIUS: usize = 2;

/// Per-frame pitch read from the energy bump in the pitch bins; `None` marks
/// unvoiced frames.
pub fn pitch_proxy(mel: &MelFeature, layout: &MelLayout) -> Result<Vec<Option<f64>>> {
    if mel.num_frames() == 0 {
        return Err(Error::invalid("pitch proxy of an empty mel"));
    }
    if mel.num_bins() != layout.num_bins() {
        return Err(Error::shape(format!(
            "mel has {} bins, layout expects {}",
            mel.num_bins(),
            layout.num_bins()
        )));
    }
    Ok(mel
        .data
        .rows()
        .into_iter()
        .map(|row| {
            let pitch = &row.as_slice().expect("row-major mel")[..layout.pitch_bins];
            let (peak, &peak_val) = pitch
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("non-empty");
            if peak_val < VOICED_THRESHOLD {
                return None;
            }
            let lo = peak.saturating_sub(CENTROID_RADIUS);
            let hi = (peak + CENTROID_RADIUS + 1).min(pitch.len());
            let (mut mass, mut moment) = (0.0, 0.0);
            for (b, &v) in pitch.iter().enumerate().take(hi).skip(lo) {
                let w = v.max(0.0);
                mass += w;
                moment += w * b as f64;
            }
            Some(layout.bin_to_hz(moment / mass))
        })
        .collect())
}

/// Voiced values only.
pub fn voiced(track: &[Option<f64>]) -> Vec<f64> {
    track.iter().flatten().copied().collect()
}

/// One line of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub utterance_id: String,
    pub mcd_db: Option<f64>,
    pub f0_rmse_hz: Option<f64>,
    pub f0_corr: Option<f64>,
}

/// Score one converted mel against its reference.
pub fn score_pair(id: &str, reference: &MelFeature, converted: &MelFeature, layout: &MelLayout) -> Result<MetricsRecord> {
    let mcd_db = mcd(reference, converted)?;
    let f0_ref = voiced(&pitch_proxy(reference, layout)?);
    let f0_out = voiced(&pitch_proxy(converted, layout)?);
    let pitch = match pitch_metrics(&f0_ref, &f0_out) {
        Ok(p) => Some(p),
        Err(Error::UndefinedMetric(reason)) => {
            log::warn!("{id}: pitch metrics undefined ({reason})");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(MetricsRecord {
        utterance_id: id.to_string(),
        mcd_db: Some(mcd_db),
        f0_rmse_hz: pitch.map(|p| p.rmse_hz),
        f0_corr: pitch.and_then(|p| p.corr),
    })
}

pub fn write_report(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn dtw_examples() {
        let (p, c) = dtw_align_1d(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(p.is_diagonal());
        assert_eq!(c, 0.0);
        let (p, c) = dtw_align_1d(&[0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.pairs, vec![(0, 0), (0, 1), (0, 2)]);
        assert_eq!(c, 0.0);
        let (_, c) = dtw_align_1d(&[0.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(c, 1.0);
        assert!(dtw_align_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn dtw_prefers_diagonal_on_ties() {
        let (p, _) = dtw_align_1d(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(p.is_diagonal());
    }

    #[test]
    fn mcd_examples() {
        let a = MelFeature::new(array![[0.0, 1.0, 2.0], [1.0, 0.5, 0.0]], 10.0).unwrap();
        assert_eq!(mcd(&a, &a).unwrap(), 0.0);
        let x = MelFeature::new(Array2::zeros((5, 4)), 10.0).unwrap();
        let mut yd = Array2::zeros((5, 4));
        yd.column_mut(2).fill(1.0);
        let y = MelFeature::new(yd, 10.0).unwrap();
        let v = mcd(&x, &y).unwrap();
        assert!((v - 6.1421).abs() < 1e-3, "{v}");
        let z = MelFeature::new(Array2::zeros((5, 3)), 10.0).unwrap();
        assert!(mcd(&x, &z).is_err());
    }

    #[test]
    fn mcd_ignores_energy_coefficient() {
        let x = MelFeature::new(Array2::zeros((4, 3)), 10.0).unwrap();
        let mut yd = Array2::zeros((4, 3));
        yd.column_mut(0).fill(5.0);
        let y = MelFeature::new(yd, 10.0).unwrap();
        assert_eq!(mcd(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn dct_mode_is_zero_on_identical_input() {
        let a = MelFeature::new(array![[0.0, 1.0, 2.0], [1.0, 0.5, 0.0]], 10.0).unwrap();
        assert_eq!(mcd_with(&a, &a, CepstrumMode::Dct).unwrap(), 0.0);
    }

    #[test]
    fn pitch_examples() {
        let f = [100.0, 150.0, 130.0, 180.0];
        let m = pitch_metrics(&f, &f).unwrap();
        assert_eq!(m.rmse_hz, 0.0);
        assert!((m.corr.unwrap() - 1.0).abs() < 1e-12);
        let mirrored: Vec<f64> = f.iter().map(|v| 400.0 - v).collect();
        let diag = AlignmentPath {
            pairs: (0..4).map(|i| (i, i)).collect(),
        };
        let m = pitch_metrics_on_path(&f, &mirrored, &diag).unwrap();
        assert!((m.corr.unwrap() + 1.0).abs() < 1e-12);
        let path = AlignmentPath {
            pairs: vec![(0, 0), (1, 1)],
        };
        let m = pitch_metrics_on_path(&[100.0, 200.0], &[110.0, 190.0], &path).unwrap();
        assert!((m.rmse_hz - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_pitch_has_undefined_correlation() {
        let m = pitch_metrics(&[120.0; 5], &[120.0; 5]).unwrap();
        assert_eq!(m.corr, None);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn zero_mel_is_unvoiced() {
        let layout = MelLayout::default();
        let mel = MelFeature::new(Array2::zeros((3, layout.num_bins())), 10.0).unwrap();
        let track = pitch_proxy(&mel, &layout).unwrap();
        assert!(voiced(&track).is_empty());
        assert!(pitch_metrics(&voiced(&track), &[100.0]).is_err());
    }

    #[test]
    fn report_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let recs = vec![MetricsRecord {
            utterance_id: "u1".into(),
            mcd_db: Some(3.5),
            f0_rmse_hz: None,
            f0_corr: Some(0.5),
        }];
        write_report(&path, &recs).unwrap();
        assert_eq!(read_report(&path).unwrap(), recs);
        assert!(fs::read_to_string(&path).unwrap().contains("\"f0_rmse_hz\":null"));
    }
}
