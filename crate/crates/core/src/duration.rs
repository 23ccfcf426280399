//! Style-conditioned duration prediction and differentiable Gaussian
//! upsampling from unit level to frame level.

use gradtape::{ParamStore, Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Builder, Linear};
use crate::style::StyleVector;
use crate::synthesis::StyledBlock;
use crate::Matrix;

/// Lower bound on the upsampling width, in frames.
pub const SIGMA_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct DurationPrediction {
    pub log_durations: Vec<f64>,
    /// Per-unit upsampling widths, already floored.
    pub sigmas: Vec<f64>,
}

impl DurationPrediction {
    pub fn durations(&self) -> Vec<f64> {
        self.log_durations.iter().map(|d| d.exp()).collect()
    }
}

/// Row-stochastic `[num_frames × num_units]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsamplingMatrix {
    pub w: Matrix,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DurationConfig {
    pub kernel: usize,
    pub blocks: usize,
}

impl Default for DurationConfig {
    fn default() -> Self {
        Self {
            kernel: 3,
            blocks: 2,
        }
    }
}

impl DurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.blocks == 0 {
            return Err(Error::Config(
                "duration kernel must be odd and blocks positive".into(),
            ));
        }
        Ok(())
    }
}

/// Frame count for a set of real durations: round half away from zero,
/// never below one.
pub fn frame_count(durations: &[f64]) -> usize {
    let total: f64 = durations.iter().sum();
    (total.round() as usize).max(1)
}

/// Unit-level hidden sequence plus duration and width heads.
#[derive(Debug, Clone)]
pub struct DurationPredictor {
    prosody_in: Linear,
    blocks: Vec<StyledBlock>,
    pub head: Linear,
    model_dim: usize,
    prosody_dim: usize,
    style_dim: usize,
}

/// Tape handles produced by [`DurationPredictor::forward`].
#[derive(Debug, Clone, Copy)]
pub struct DurationVars {
    /// `[N × 1]`
    pub log_durations: Var,
    /// `[N × 1]`, at least [`SIGMA_FLOOR`].
    pub sigma: Var,
}

impl DurationPredictor {
    pub fn new(
        b: &mut Builder,
        cfg: &DurationConfig,
        model_dim: usize,
        prosody_dim: usize,
        style_dim: usize,
    ) -> Self {
        let mut b = b.sub("duration");
        Self {
            prosody_in: Linear::new(&mut b, "prosody_in", prosody_dim, model_dim),
            blocks: (0..cfg.blocks)
                .map(|i| {
                    StyledBlock::new(&mut b, &format!("block{i}"), model_dim, style_dim, cfg.kernel)
                })
                .collect(),
            head: Linear::zeros(&mut b, "head", model_dim, 2),
            model_dim,
            prosody_dim,
            style_dim,
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        content: Var,
        prosody: Var,
        style: Var,
    ) -> DurationVars {
        let p = self.prosody_in.forward(t, s, prosody);
        let mut x = t.add(content, p);
        for block in &self.blocks {
            x = block.forward(t, s, x, style);
        }
        let out = self.head.forward(t, s, x);
        let log_durations = t.slice_cols(out, 0, 1);
        let raw = t.slice_cols(out, 1, 1);
        let sigma = t.softplus(raw);
        let sigma = t.add_scalar(sigma, SIGMA_FLOOR);
        DurationVars {
            log_durations,
            sigma,
        }
    }

    pub fn predict_durations(
        &self,
        s: &ParamStore,
        content_hidden: &Matrix,
        prosody: &Matrix,
        style: &StyleVector,
    ) -> Result<DurationPrediction> {
        let n = content_hidden.nrows();
        if n == 0 {
            return Err(Error::invalid("duration predictor needs at least one unit"));
        }
        if content_hidden.ncols() != self.model_dim
            || prosody.dim() != (n, self.prosody_dim)
            || style.dim() != self.style_dim
        {
            return Err(Error::shape("duration predictor inputs are inconsistent"));
        }
        let t = Tape::new();
        let c = t.constant(content_hidden.clone());
        let p = t.constant(prosody.clone());
        let st = t.constant(style.as_row());
        let out = self.forward(&t, s, c, p, st);
        let log_durations: Vec<f64> = t.value(out.log_durations).iter().cloned().collect();
        let sigmas: Vec<f64> = t.value(out.sigma).iter().cloned().collect();
        if log_durations.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numeric("non-finite predicted duration".into()));
        }
        Ok(DurationPrediction {
            log_durations,
            sigmas,
        })
    }
}

/// Tape form of Gaussian upsampling. `durations` and `sigma` are `[1 × N]`
/// rows; the frame count is fixed by the caller.
pub fn gaussian_upsample_var(
    t: &Tape,
    hidden: Var,
    durations: Var,
    sigma: Var,
    num_frames: usize,
) -> (Var, Var) {
    let n = t.shape(durations).1;
    let cumsum = Array2::from_shape_fn((n, n), |(j, i)| if j <= i { 1.0 } else { 0.0 });
    let cumsum = t.constant(cumsum);
    let ends = t.matmul(durations, cumsum);
    let half = t.scale(durations, 0.5);
    let centers = t.sub(ends, half);
    let positions = Array2::from_shape_fn((num_frames, 1), |(f, _)| f as f64 + 0.5);
    let positions = t.constant(positions);
    let diff = t.sub(positions, centers);
    let sq = t.square(diff);
    let var2 = t.scale(t.square(sigma), 2.0);
    let logits = t.div(sq, var2);
    let logits = t.neg(logits);
    let w = t.softmax_rows(logits);
    (t.matmul(w, hidden), w)
}

/// Expand `[N × D]` unit features to `[max(1, round(Σd)) × D]` frames.
pub fn gaussian_upsample(
    hidden: &Matrix,
    durations: &[f64],
    sigma: &[f64],
) -> Result<(Matrix, UpsamplingMatrix)> {
    let n = hidden.nrows();
    if n == 0 || durations.len() != n || sigma.len() != n {
        return Err(Error::shape(format!(
            "{} units, {} durations, {} widths",
            n,
            durations.len(),
            sigma.len()
        )));
    }
    if durations.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("durations must be positive"));
    }
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("upsampling widths must be positive"));
    }
    let frames = frame_count(durations);
    let t = Tape::new();
    let h = t.constant(hidden.clone());
    let d = t.constant(Array2::from_shape_vec((1, n), durations.to_vec()).expect("row"));
    let s = t.constant(Array2::from_shape_vec((1, n), sigma.to_vec()).expect("row"));
    let (out, w) = gaussian_upsample_var(&t, h, d, s, frames);
    let result = (
        t.value(out).clone(),
        UpsamplingMatrix {
            w: t.value(w).clone(),
        },
    );
    Ok(result)
}

/// Tape form: mean squared error between predicted and target
/// log-durations. `pred` is `[N × 1]`.
pub fn duration_loss_var(t: &Tape, pred: Var, targets: &[usize]) -> Var {
    let target = Array2::from_shape_fn((targets.len(), 1), |(i, _)| (targets[i] as f64).ln());
    let target = t.constant(target);
    let d = t.sub(pred, target);
    let sq = t.square(d);
    t.mean(sq)
}

pub fn duration_loss(pred: &DurationPrediction, targets: &[f64]) -> Result<f64> {
    if pred.log_durations.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            pred.log_durations.len(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::invalid("no durations"));
    }
    if targets.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::invalid("target durations must be positive"));
    }
    let sum: f64 = pred
        .log_durations
        .iter()
        .zip(targets)
        .map(|(p, d)| (p - d.ln()).powi(2))
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Plain-value softplus plus floor, matching the width head.
pub fn width_from_raw(raw: f64) -> f64 {
    nn::softplus(raw) + SIGMA_FLOOR
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frame_count_rounds_half_away() {
        assert_eq!(frame_count(&[1.25, 1.25]), 3);
        assert_eq!(frame_count(&[1.2, 1.2]), 2);
        assert_eq!(frame_count(&[0.1]), 1);
    }

    #[test]
    fn single_unit_repeats_exactly() {
        let h = array![[1.0, -2.0, 3.5]];
        let (frames, w) = gaussian_upsample(&h, &[3.0], &[0.7]).unwrap();
        assert_eq!(w.w, Array2::<f64>::ones((3, 1)));
        for r in frames.rows() {
            assert_eq!(r, h.row(0));
        }
    }

    #[test]
    fn nearer_unit_gets_more_weight() {
        let h = array![[1.0], [0.0]];
        let (_, w) = gaussian_upsample(&h, &[2.0, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(w.w.nrows(), 4);
        assert!(w.w[[0, 0]] > w.w[[0, 1]]);
        assert!(w.w[[3, 1]] > w.w[[3, 0]]);
        assert!((w.w[[0, 0]] - w.w[[3, 1]]).abs() < 1e-12);
    }

    #[test]
    fn rows_sum_to_one() {
        let h = Array2::from_shape_fn((5, 2), |(i, j)| (i + j) as f64);
        let (_, w) =
            gaussian_upsample(&h, &[1.3, 0.4, 2.9, 5.0, 0.7], &[0.1, 2.0, 0.5, 1.1, 0.3]).unwrap();
        for row in w.w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rejects_nonpositive_inputs() {
        let h = array![[1.0], [2.0]];
        assert!(gaussian_upsample(&h, &[1.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(gaussian_upsample(&h, &[1.0, 1.0], &[1.0, -1.0]).is_err());
        assert!(gaussian_upsample(&h, &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn loss_examples() {
        let p = |v: Vec<f64>| DurationPrediction {
            sigmas: vec![1.0; v.len()],
            log_durations: v,
        };
        let targets = [2.0, 5.0, 1.0];
        let exact = p(targets.iter().map(|d: &f64| d.ln()).collect());
        assert!(duration_loss(&exact, &targets).unwrap().abs() < 1e-15);
        assert_eq!(duration_loss(&p(vec![0.0]), &[1.0]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((duration_loss(&p(vec![0.0]), &[e]).unwrap() - 1.0).abs() < 1e-12);
        assert!(duration_loss(&p(vec![0.0]), &[1.0, 2.0]).is_err());
    }

    fn predictor(kernel: usize) -> (ParamStore, DurationPredictor) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = DurationConfig { kernel, blocks: 2 };
        let p = DurationPredictor::new(&mut Builder::new(&mut store, &mut rng, ""), &cfg, 8, 2, 4);
        (store, p)
    }

    #[test]
    fn zero_head_predicts_one_frame_each() {
        let (store, p) = predictor(3);
        let pred = p
            .predict_durations(
                &store,
                &Array2::from_elem((5, 8), 0.3),
                &Array2::zeros((5, 2)),
                &StyleVector(vec![0.1; 4]),
            )
            .unwrap();
        assert!(pred.log_durations.iter().all(|&d| d == 0.0));
        assert!(pred.durations().iter().all(|&d| d == 1.0));
        assert!(pred.sigmas.iter().all(|&s| s >= SIGMA_FLOOR));
    }

    #[test]
    fn position_independent_net_gives_equal_durations() {
        let (mut store, p) = predictor(1);
        store.value_mut(p.head.weight).fill(0.05);
        let row: Vec<f64> = (0..8).map(|j| j as f64 / 8.0).collect();
        let content = Array2::from_shape_fn((4, 8), |(_, j)| row[j]);
        let pred = p
            .predict_durations(&store, &content, &Array2::zeros((4, 2)), &StyleVector(vec![0.2; 4]))
            .unwrap();
        assert!(pred.log_durations.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn style_reaches_durations() {
        let (mut store, p) = predictor(3);
        store.value_mut(p.head.weight).fill(0.05);
        let t = Tape::new();
        let c = t.constant(Array2::from_shape_fn((4, 8), |(i, j)| ((i + j) % 3) as f64));
        let z = t.constant(Array2::zeros((4, 2)));
        let style = t.leaf(Array2::from_elem((1, 4), 0.3));
        let out = p.forward(&t, &store, c, z, style);
        let total = t.sum(out.log_durations);
        let g = t.backward(total).get_or_zeros(style, (1, 4));
        assert!(g.iter().any(|v| v.abs() > 1e-8));
    }
}
