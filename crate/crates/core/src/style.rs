//! Global style extraction and style-adaptive layer normalization.

use gradtape::{ParamStore, Tape, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv1d, Linear, MultiHeadAttention, Saln};
use crate::synthesis::MelFeature;
use crate::Matrix;

/// Fixed-size global style embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector(pub Vec<f64>);

impl StyleVector {
    pub fn from_row(m: &Matrix) -> Result<Self> {
        if m.nrows() != 1 {
            return Err(Error::shape("style vector must be a single row"));
        }
        let v: Vec<f64> = m.iter().cloned().collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite style vector".into()));
        }
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_row(&self) -> Matrix {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StyleEncoderConfig {
    pub num_heads: usize,
    pub model_dim: usize,
    pub style_dim: usize,
    pub conv_kernel: usize,
}

impl Default for StyleEncoderConfig {
    fn default() -> Self {
        Self {
            num_heads: 2,
            model_dim: 32,
            style_dim: 16,
            conv_kernel: 5,
        }
    }
}

impl StyleEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.style_dim == 0 {
            return Err(Error::Config("style encoder sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("style conv kernel must be odd".into()));
        }
        Ok(())
    }
}

/// Spectral MLP, gated temporal convolution, self-attention, then an
/// unweighted mean over frames projected to `style_dim`.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    spectral1: Linear,
    spectral2: Linear,
    temporal: Conv1d,
    attention: MultiHeadAttention,
    pub projection: Linear,
    model_dim: usize,
    num_bins: usize,
}

impl StyleEncoder {
    pub fn new(b: &mut Builder, cfg: &StyleEncoderConfig, num_bins: usize) -> Self {
        let mut b = b.sub("style");
        let h = cfg.model_dim;
        Self {
            spectral1: Linear::new(&mut b, "spectral1", num_bins, h),
            spectral2: Linear::new(&mut b, "spectral2", h, h),
            temporal: Conv1d::new(&mut b, "temporal", h, 2 * h, cfg.conv_kernel, 1),
            attention: MultiHeadAttention::new(&mut b, "attention", h, h, h, cfg.num_heads),
            projection: Linear::new(&mut b, "projection", h, cfg.style_dim),
            model_dim: h,
            num_bins,
        }
    }

    /// Frame-level self-attention output, `[T × model_dim]`.
    pub fn frame_features(&self, t: &Tape, s: &ParamStore, mel: Var) -> Var {
        let h = self.spectral1.forward(t, s, mel);
        let h = t.relu(h);
        let h = self.spectral2.forward(t, s, h);
        let h = t.relu(h);
        let c = self.temporal.forward(t, s, h);
        let a = t.slice_cols(c, 0, self.model_dim);
        let g = t.slice_cols(c, self.model_dim, self.model_dim);
        let g = t.sigmoid(g);
        let glu = t.mul(a, g);
        let h = t.add(h, glu);
        let (att, _) = self.attention.forward(t, s, h, h);
        t.add(h, att)
    }

    /// Style vector as a `[1 × style_dim]` node.
    pub fn forward(&self, t: &Tape, s: &ParamStore, mel: Var) -> Var {
        let frames = self.frame_features(t, s, mel);
        let pooled = t.mean_rows(frames);
        self.projection.forward(t, s, pooled)
    }

    pub fn encode_style(&self, s: &ParamStore, mel: &MelFeature) -> Result<StyleVector> {
        if mel.num_frames() == 0 {
            return Err(Error::invalid("cannot encode style of an empty mel"));
        }
        if mel.num_bins() != self.num_bins {
            return Err(Error::shape(format!(
                "mel has {} bins, style encoder expects {}",
                mel.num_bins(),
                self.num_bins
            )));
        }
        let t = Tape::new();
        let m = t.constant(mel.data.clone());
        let v = self.forward(&t, s, m);
        let row = t.value(v).clone();
        StyleVector::from_row(&row)
    }
}

/// Apply style-adaptive layer normalization to `hidden` on plain values.
pub fn saln(
    layer: &Saln,
    s: &ParamStore,
    hidden: &Matrix,
    style: &StyleVector,
) -> Result<Matrix> {
    let gain_in = s.value(layer.gain.weight).nrows();
    let width = s.value(layer.gain.weight).ncols();
    if style.dim() != gain_in {
        return Err(Error::shape(format!(
            "style has dim {}, SALN expects {gain_in}",
            style.dim()
        )));
    }
    if hidden.ncols() != width {
        return Err(Error::shape(format!(
            "hidden has width {}, SALN expects {width}",
            hidden.ncols()
        )));
    }
    let t = Tape::new();
    let h = t.constant(hidden.clone());
    let st = t.constant(style.as_row());
    let out = layer.forward(&t, s, h, st);
    let v = t.value(out).clone();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer_norm_values;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64) -> (ParamStore, StyleEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = StyleEncoder::new(
            &mut Builder::new(&mut store, &mut rng, ""),
            &StyleEncoderConfig::default(),
            6,
        );
        (store, enc)
    }

    fn mel(rows: usize, seed: u64) -> MelFeature {
        let mut x = seed;
        let data = Array2::from_shape_fn((rows, 6), |_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 40) as f64 / (1u64 << 24) as f64
        });
        MelFeature::new(data, 10.0).unwrap()
    }

    #[test]
    fn output_has_style_dim_for_any_length() {
        let (store, enc) = encoder(1);
        for len in [1, 2, 17, 60] {
            assert_eq!(enc.encode_style(&store, &mel(len, len as u64)).unwrap().dim(), 16);
        }
    }

    #[test]
    fn single_frame_equals_projection_path() {
        let (store, enc) = encoder(2);
        let m = mel(1, 5);
        let v = enc.encode_style(&store, &m).unwrap();
        // Attention over one position returns its own value vector.
        let t = Tape::new();
        let x = t.constant(m.data.clone());
        let frames = enc.frame_features(&t, &store, x);
        let p = enc.projection.forward(&t, &store, frames);
        let direct: Vec<f64> = t.value(p).iter().cloned().collect();
        for (a, b) in v.0.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_for_identical_input() {
        let (store, enc) = encoder(3);
        let m = mel(30, 9);
        assert_eq!(
            enc.encode_style(&store, &m).unwrap(),
            enc.encode_style(&store, &m.clone()).unwrap()
        );
    }

    #[test]
    fn zero_projection_gives_zero_vector() {
        let (mut store, enc) = encoder(4);
        store.value_mut(enc.projection.weight).fill(0.0);
        store.value_mut(enc.projection.bias).fill(0.0);
        let zeros = MelFeature::new(Array2::zeros((12, 6)), 10.0).unwrap();
        let v = enc.encode_style(&store, &zeros).unwrap();
        assert!(v.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_mel_is_rejected() {
        let (store, enc) = encoder(5);
        let empty = MelFeature {
            data: Array2::zeros((0, 6)),
            hop_ms: 10.0,
        };
        assert!(enc.encode_style(&store, &empty).is_err());
    }

    fn saln_layer(style_dim: usize, hidden: usize) -> (ParamStore, Saln) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = Saln::new(
            &mut Builder::new(&mut store, &mut rng, ""),
            "saln",
            style_dim,
            hidden,
        );
        (store, layer)
    }

    #[test]
    fn identity_saln_is_layer_norm() {
        let (mut store, layer) = saln_layer(3, 4);
        store.value_mut(layer.gain.weight).fill(0.0);
        store.value_mut(layer.gain.bias).fill(1.0);
        store.value_mut(layer.bias.weight).fill(0.0);
        store.value_mut(layer.bias.bias).fill(0.0);
        let h = array![[1.0, -2.0, 0.5, 3.0], [0.1, 0.2, 0.3, 0.4]];
        let out = saln(&layer, &store, &h, &StyleVector(vec![0.3, -1.0, 2.0])).unwrap();
        let ln = layer_norm_values(&h);
        for (a, b) in out.iter().zip(ln.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_row_yields_style_bias() {
        let (store, layer) = saln_layer(3, 4);
        let style = StyleVector(vec![0.3, -1.0, 2.0]);
        let out = saln(&layer, &store, &array![[2.0, 2.0, 2.0, 2.0]], &style).unwrap();
        let w = store.value(layer.bias.weight);
        let b = store.value(layer.bias.bias);
        let expect = style.as_row().dot(w) + b;
        for (a, e) in out.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn different_styles_give_different_outputs() {
        let (store, layer) = saln_layer(3, 4);
        let h = array![[1.0, -2.0, 0.5, 3.0]];
        let a = saln(&layer, &store, &h, &StyleVector(vec![1.0, 0.0, 0.0])).unwrap();
        let b = saln(&layer, &store, &h, &StyleVector(vec![0.0, 1.0, 0.0])).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn saln_dimension_mismatch() {
        let (store, layer) = saln_layer(3, 4);
        assert!(saln(&layer, &store, &array![[1.0, 2.0]], &StyleVector(vec![0.0; 3])).is_err());
        assert!(saln(&layer, &store, &array![[1.0, 2.0, 3.0, 4.0]], &StyleVector(vec![0.0; 2])).is_err());
    }
}
