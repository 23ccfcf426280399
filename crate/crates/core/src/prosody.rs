//! Phoneme-level prosody: a WaveNet posterior over mel frames pooled per
//! unit, a content-and-style prior, and the KL between them.

use gradtape::{ParamStore, Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, Saln, WaveNet};
use crate::style::StyleVector;
use crate::synthesis::{gaussian_kl, gaussian_kl_values, GaussianVars, MelFeature};
use crate::Matrix;

/// Per-unit diagonal Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyDistribution {
    pub mu: Matrix,
    pub log_sigma: Matrix,
}

impl ProsodyDistribution {
    pub fn num_units(&self) -> usize {
        self.mu.nrows()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProsodyEncoderConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub kernel: usize,
    pub channels: usize,
    pub prosody_dim: usize,
}

impl Default for ProsodyEncoderConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            layers_per_block: 2,
            kernel: 3,
            channels: 32,
            prosody_dim: 4,
        }
    }
}

impl ProsodyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.layers_per_block == 0
            || self.channels == 0
            || self.prosody_dim == 0
        {
            return Err(Error::Config("prosody encoder sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("prosody kernel must be odd".into()));
        }
        Ok(())
    }
}

/// `[num_units × num_frames]` matrix whose product with frame features
/// averages each duration span.
pub fn segment_mean_matrix(durations: &[usize]) -> Matrix {
    let frames: usize = durations.iter().sum();
    let mut m = Array2::zeros((durations.len(), frames));
    let mut start = 0;
    for (i, &d) in durations.iter().enumerate() {
        for t in start..start + d {
            m[[i, t]] = 1.0 / d as f64;
        }
        start += d;
    }
    m
}

pub fn check_durations(durations: &[usize], num_frames: usize) -> Result<()> {
    if durations.is_empty() {
        return Err(Error::invalid("no units"));
    }
    if durations.contains(&0) {
        return Err(Error::invalid("durations must be positive"));
    }
    let total: usize = durations.iter().sum();
    if total != num_frames {
        return Err(Error::shape(format!(
            "durations sum to {total} but mel has {num_frames} frames"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ProsodyEncoder {
    pre: Linear,
    wavenet: WaveNet,
    head: Linear,
    prosody_dim: usize,
}

impl ProsodyEncoder {
    pub fn new(b: &mut Builder, cfg: &ProsodyEncoderConfig, num_bins: usize) -> Self {
        let mut b = b.sub("prosody_encoder");
        Self {
            pre: Linear::new(&mut b, "pre", num_bins, cfg.channels),
            wavenet: WaveNet::new(
                &mut b,
                "wn",
                cfg.channels,
                cfg.kernel,
                cfg.num_blocks,
                cfg.layers_per_block,
            ),
            head: Linear::new(&mut b, "head", cfg.channels, 2 * cfg.prosody_dim),
            prosody_dim: cfg.prosody_dim,
        }
    }

    /// Frame-level WaveNet output, `[T × channels]`.
    pub fn frame_level(&self, t: &Tape, s: &ParamStore, mel: Var) -> Var {
        let x = self.pre.forward(t, s, mel);
        self.wavenet.forward(t, s, x)
    }

    /// Unit-level features before the head, then the Gaussian.
    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        mel: Var,
        durations: &[usize],
    ) -> (Var, GaussianVars) {
        let frames = self.frame_level(t, s, mel);
        let pool = t.constant(segment_mean_matrix(durations));
        let units = t.matmul(pool, frames);
        let out = self.head.forward(t, s, units);
        (units, GaussianVars::from_head(t, out, self.prosody_dim))
    }

    pub fn encode_prosody(
        &self,
        s: &ParamStore,
        mel: &MelFeature,
        durations: &[usize],
    ) -> Result<ProsodyDistribution> {
        check_durations(durations, mel.num_frames())?;
        let t = Tape::new();
        let m = t.constant(mel.data.clone());
        let (_, g) = self.forward(&t, s, m, durations);
        let dist = ProsodyDistribution {
            mu: t.value(g.mu).clone(),
            log_sigma: t.value(g.log_sigma).clone(),
        };
        Ok(dist)
    }
}

/// Position-wise prior network: SALN on the content, an MLP, then a
/// zero-initialized Gaussian head.
#[derive(Debug, Clone)]
pub struct ProsodyPredictor {
    norm: Saln,
    hidden: Linear,
    pub head: Linear,
    prosody_dim: usize,
    model_dim: usize,
    style_dim: usize,
}

impl ProsodyPredictor {
    pub fn new(b: &mut Builder, model_dim: usize, style_dim: usize, prosody_dim: usize) -> Self {
        let mut b = b.sub("prosody_predictor");
        Self {
            norm: Saln::new(&mut b, "saln", style_dim, model_dim),
            hidden: Linear::new(&mut b, "hidden", model_dim, model_dim),
            head: Linear::zeros(&mut b, "head", model_dim, 2 * prosody_dim),
            prosody_dim,
            model_dim,
            style_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, content: Var, style: Var) -> GaussianVars {
        let h = self.norm.forward(t, s, content, style);
        let h = self.hidden.forward(t, s, h);
        let h = t.relu(h);
        let out = self.head.forward(t, s, h);
        GaussianVars::from_head(t, out, self.prosody_dim)
    }

    pub fn predict_prosody(
        &self,
        s: &ParamStore,
        content_hidden: &Matrix,
        style: &StyleVector,
    ) -> Result<ProsodyDistribution> {
        if content_hidden.ncols() != self.model_dim || style.dim() != self.style_dim {
            return Err(Error::shape(format!(
                "predictor expects [N × {}] content and {}-d style",
                self.model_dim, self.style_dim
            )));
        }
        if content_hidden.nrows() == 0 {
            return Err(Error::invalid("no units"));
        }
        let t = Tape::new();
        let c = t.constant(content_hidden.clone());
        let st = t.constant(style.as_row());
        let g = self.forward(&t, s, c, st);
        let dist = ProsodyDistribution {
            mu: t.value(g.mu).clone(),
            log_sigma: t.value(g.log_sigma).clone(),
        };
        Ok(dist)
    }
}

/// Tape form of the prosody loss: KL(posterior ‖ prior) summed over
/// dimensions and averaged over units.
pub fn prosody_kl_var(t: &Tape, posterior: GaussianVars, prior: GaussianVars) -> Var {
    gaussian_kl(t, posterior, prior)
}

pub fn prosody_kl(posterior: &ProsodyDistribution, prior: &ProsodyDistribution) -> Result<f64> {
    gaussian_kl_values(
        &posterior.mu,
        &posterior.log_sigma,
        &prior.mu,
        &prior.log_sigma,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn models() -> (ParamStore, ProsodyEncoder, ProsodyPredictor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let enc = ProsodyEncoder::new(&mut b, &ProsodyEncoderConfig::default(), 6);
        let pred = ProsodyPredictor::new(&mut b, 32, 16, 4);
        (store, enc, pred)
    }

    fn mel(rows: usize) -> MelFeature {
        MelFeature::new(
            Array2::from_shape_fn((rows, 6), |(i, j)| ((i * 5 + j * 3) % 11) as f64 / 11.0),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn segments_follow_cumulative_durations() {
        let m = segment_mean_matrix(&[2, 3]);
        assert_eq!(m.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0, 0.0]);
        let third = 1.0 / 3.0;
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0, third, third, third]);
    }

    #[test]
    fn single_unit_is_mean_of_all_frames() {
        let (store, enc, _) = models();
        let m = mel(9);
        let t = Tape::new();
        let x = t.constant(m.data.clone());
        let frames = t.value(enc.frame_level(&t, &store, x)).clone();
        let (units, _) = enc.forward(&t, &store, x, &[9]);
        let pooled = t.value(units).clone();
        let mean = frames.mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in pooled.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_frames_pool_to_the_constant() {
        let frames = Array2::from_elem((7, 3), 0.25);
        let pooled = segment_mean_matrix(&[1, 4, 2]).dot(&frames);
        assert!(pooled.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn output_rows_equal_unit_count() {
        let (store, enc, _) = models();
        let dist = enc.encode_prosody(&store, &mel(10), &[3, 1, 4, 2]).unwrap();
        assert_eq!(dist.num_units(), 4);
        assert_eq!(dist.mu.ncols(), 4);
        assert!(dist.log_sigma.iter().all(|&v| (-7.0..=5.0).contains(&v)));
    }

    #[test]
    fn duration_mismatch_is_an_error() {
        let (store, enc, _) = models();
        assert!(enc.encode_prosody(&store, &mel(10), &[3, 3]).is_err());
        assert!(enc.encode_prosody(&store, &mel(3), &[3, 0]).is_err());
    }

    #[test]
    fn zero_head_prior_is_standard_normal() {
        let (store, _, pred) = models();
        let content = Array2::from_shape_fn((5, 32), |(i, j)| (i as f64 - j as f64) / 10.0);
        let d = pred
            .predict_prosody(&store, &content, &StyleVector(vec![0.3; 16]))
            .unwrap();
        assert!(d.mu.iter().all(|&v| v == 0.0));
        assert!(d.log_sigma.iter().all(|&v| v == 0.0));
    }

    fn randomize_head(store: &mut ParamStore, pred: &ProsodyPredictor) {
        let w = store.value_mut(pred.head.weight);
        let (r, c) = w.dim();
        for i in 0..r {
            for j in 0..c {
                w[[i, j]] = ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5;
            }
        }
    }

    #[test]
    fn prior_is_position_wise() {
        let (mut store, _, pred) = models();
        randomize_head(&mut store, &pred);
        let style = StyleVector(vec![0.2; 16]);
        let content = Array2::from_shape_fn((4, 32), |(i, j)| ((i * 3 + j) % 5) as f64 - 2.0);
        let d = pred.predict_prosody(&store, &content, &style).unwrap();

        // identical rows give identical priors
        let same = Array2::from_shape_fn((3, 32), |(_, j)| (j % 5) as f64 - 2.0);
        let ds = pred.predict_prosody(&store, &same, &style).unwrap();
        assert_eq!(ds.mu.row(0), ds.mu.row(2));

        // permutation of units permutes the output rows
        let perm = [2usize, 0, 3, 1];
        let mut permuted = content.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.row_mut(dst).assign(&content.row(src));
        }
        let dp = pred.predict_prosody(&store, &permuted, &style).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(dp.mu.slice(s![dst, ..]), d.mu.slice(s![src, ..]));
            assert_eq!(dp.log_sigma.slice(s![dst, ..]), d.log_sigma.slice(s![src, ..]));
        }
    }

    #[test]
    fn kl_examples() {
        let same = ProsodyDistribution {
            mu: array![[0.3, -1.0]],
            log_sigma: array![[0.2, -0.4]],
        };
        assert_eq!(prosody_kl(&same, &same).unwrap(), 0.0);

        let std = ProsodyDistribution {
            mu: array![[0.0]],
            log_sigma: array![[0.0]],
        };
        let shifted = ProsodyDistribution {
            mu: array![[1.0]],
            log_sigma: array![[0.0]],
        };
        assert!((prosody_kl(&shifted, &std).unwrap() - 0.5).abs() < 1e-12);

        let wide = ProsodyDistribution {
            mu: array![[0.0]],
            log_sigma: array![[1.0]],
        };
        let expect = 0.5 * (1f64.exp().powi(2) - 1.0 - 2.0);
        assert!((prosody_kl(&wide, &std).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 2.1945).abs() < 1e-4);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = ProsodyDistribution {
            mu: array![[0.0, 0.0]],
            log_sigma: array![[0.0, 0.0]],
        };
        let b = ProsodyDistribution {
            mu: array![[0.0]],
            log_sigma: array![[0.0]],
        };
        assert!(prosody_kl(&a, &b).is_err());
    }
}
