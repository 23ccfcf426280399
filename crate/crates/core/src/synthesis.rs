//! Conditional VAE core: posterior encoder, content encoder, frame-level
//! prior, style-conditioned decoder and the ELBO terms.

use std::path::Path;

use gradtape::{ParamStore, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio;
use crate::nn::{self, Builder, Conv1d, LayerNorm, Linear, MultiHeadAttention, Saln, WaveNet};
use crate::style::StyleVector;
use crate::units::UnitSequence;
use crate::Matrix;

/// Clamp range applied to every predicted log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

/// Frame-by-bin spectral feature.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeature {
    pub data: Matrix,
    pub hop_ms: f64,
}

impl MelFeature {
    pub fn new(data: Matrix, hop_ms: f64) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("mel contains non-finite values".into()));
        }
        if !(hop_ms > 0.0) {
            return Err(Error::invalid("mel hop must be positive"));
        }
        Ok(Self { data, hop_ms })
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = featio::read_matrix(path)?;
        Self::new(raw.data, raw.frame_hop_ms)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        featio::write_matrix(path, &self.data, self.hop_ms)
    }
}

/// Frame-level diagonal Gaussian plus one draw from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLatent {
    pub mu: Matrix,
    pub log_sigma: Matrix,
    pub sample: Matrix,
}

impl FrameLatent {
    pub fn num_frames(&self) -> usize {
        self.mu.nrows()
    }
}

/// Tape handles for a diagonal Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_sigma: Var,
}

impl GaussianVars {
    /// Split a `[n × 2d]` head output into clamped `(mu, log_sigma)`.
    pub fn from_head(t: &Tape, head: Var, dim: usize) -> Self {
        let mu = t.slice_cols(head, 0, dim);
        let ls = t.slice_cols(head, dim, dim);
        let log_sigma = t.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        Self { mu, log_sigma }
    }

    /// `mu + scale * sigma * eps` with a constant noise matrix.
    pub fn reparameterize(&self, t: &Tape, eps: Matrix) -> Var {
        let e = t.constant(eps);
        let sigma = t.exp(self.log_sigma);
        let noise = t.mul(sigma, e);
        t.add(self.mu, noise)
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians, summed over the
/// feature axis and averaged over rows.
pub fn gaussian_kl(t: &Tape, q: GaussianVars, p: GaussianVars) -> Var {
    let rows = t.shape(q.mu).0 as f64;
    let log_ratio = t.sub(p.log_sigma, q.log_sigma);
    let var_q = t.exp(t.scale(q.log_sigma, 2.0));
    let diff = t.sub(q.mu, p.mu);
    let diff2 = t.square(diff);
    let num = t.add(var_q, diff2);
    let inv_var_p = t.exp(t.scale(p.log_sigma, -2.0));
    let quad = t.mul(num, inv_var_p);
    let quad = t.scale(quad, 0.5);
    let terms = t.add(log_ratio, quad);
    let terms = t.add_scalar(terms, -0.5);
    let total = t.sum(terms);
    t.scale(total, 1.0 / rows)
}

/// The same closed form on plain values.
pub fn gaussian_kl_values(
    mu_q: &Matrix,
    ls_q: &Matrix,
    mu_p: &Matrix,
    ls_p: &Matrix,
) -> Result<f64> {
    let dim = mu_q.dim();
    if ls_q.dim() != dim || mu_p.dim() != dim || ls_p.dim() != dim {
        return Err(Error::shape("KL arguments differ in shape"));
    }
    if dim.0 == 0 {
        return Err(Error::invalid("KL over zero rows"));
    }
    let mut total = 0.0;
    for i in 0..mu_q.len() {
        let (r, c) = (i / dim.1, i % dim.1);
        let (mq, lq, mp, lp) = (mu_q[[r, c]], ls_q[[r, c]], mu_p[[r, c]], ls_p[[r, c]]);
        total += lp - lq + ((2.0 * lq).exp() + (mq - mp).powi(2)) / (2.0 * (2.0 * lp).exp()) - 0.5;
    }
    Ok(total / dim.0 as f64)
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub model_dim: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub posterior_layers: usize,
    pub content_layers: usize,
    pub content_heads: usize,
    pub prior_blocks: usize,
    pub decoder_blocks: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            latent_dim: 8,
            kernel: 3,
            posterior_layers: 3,
            content_layers: 2,
            content_heads: 2,
            prior_blocks: 2,
            decoder_blocks: 3,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.model_dim,
            self.latent_dim,
            self.kernel,
            self.posterior_layers,
            self.content_heads,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("synthesis sizes must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("synthesis kernel must be odd".into()));
        }
        if !self.model_dim.is_multiple_of(self.content_heads) {
            return Err(Error::Config("model_dim must divide into content_heads".into()));
        }
        Ok(())
    }
}

/// Non-causal WaveNet stack from mel frames to a frame-level Gaussian.
#[derive(Debug, Clone)]
pub struct PosteriorEncoder {
    pre: Linear,
    wavenet: WaveNet,
    pub head: Linear,
    latent_dim: usize,
}

impl PosteriorEncoder {
    pub fn new(b: &mut Builder, cfg: &SynthesisConfig, num_bins: usize) -> Self {
        let mut b = b.sub("posterior");
        let h = cfg.model_dim;
        Self {
            pre: Linear::new(&mut b, "pre", num_bins, h),
            wavenet: WaveNet::new(&mut b, "wn", h, cfg.kernel, 1, cfg.posterior_layers),
            head: Linear::zeros(&mut b, "head", h, 2 * cfg.latent_dim),
            latent_dim: cfg.latent_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, mel: Var) -> GaussianVars {
        let x = self.pre.forward(t, s, mel);
        let h = self.wavenet.forward(t, s, x);
        let out = self.head.forward(t, s, h);
        GaussianVars::from_head(t, out, self.latent_dim)
    }

    pub fn posterior_encode(
        &self,
        s: &ParamStore,
        mel: &MelFeature,
        rng: &mut impl Rng,
    ) -> Result<FrameLatent> {
        if mel.num_frames() == 0 {
            return Err(Error::invalid("posterior encoder needs at least one frame"));
        }
        let t = Tape::new();
        let m = t.constant(mel.data.clone());
        let g = self.forward(&t, s, m);
        let eps = standard_normal(rng, mel.num_frames(), self.latent_dim);
        let z = g.reparameterize(&t, eps);
        let latent = FrameLatent {
            mu: t.value(g.mu).clone(),
            log_sigma: t.value(g.log_sigma).clone(),
            sample: t.value(z).clone(),
        };
        Ok(latent)
    }
}

/// Transformer encoder over center embeddings.
#[derive(Debug, Clone)]
pub struct ContentEncoder {
    input: Linear,
    layers: Vec<(MultiHeadAttention, LayerNorm, Conv1d, Conv1d, LayerNorm)>,
    model_dim: usize,
    feature_dim: usize,
}

impl ContentEncoder {
    pub fn new(b: &mut Builder, cfg: &SynthesisConfig, feature_dim: usize) -> Self {
        let mut b = b.sub("content");
        let h = cfg.model_dim;
        let input = Linear::new(&mut b, "input", feature_dim, h);
        let layers = (0..cfg.content_layers)
            .map(|i| {
                let mut lb = b.sub(&format!("layer{i}"));
                (
                    MultiHeadAttention::new(&mut lb, "attn", h, h, h, cfg.content_heads),
                    LayerNorm::new(&mut lb, "norm1", h),
                    Conv1d::new(&mut lb, "ffn1", h, 2 * h, cfg.kernel, 1),
                    Conv1d::new(&mut lb, "ffn2", 2 * h, h, cfg.kernel, 1),
                    LayerNorm::new(&mut lb, "norm2", h),
                )
            })
            .collect();
        Self {
            input,
            layers,
            model_dim: h,
            feature_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, units: Var) -> Var {
        let n = t.shape(units).0;
        let positions: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let pe = t.constant(nn::sinusoidal(&positions, self.model_dim));
        let x = self.input.forward(t, s, units);
        let mut x = t.add(x, pe);
        for (attn, norm1, ffn1, ffn2, norm2) in &self.layers {
            let (a, _) = attn.forward(t, s, x, x);
            x = norm1.forward(t, s, t.add(x, a));
            let f = ffn1.forward(t, s, x);
            let f = t.relu(f);
            let f = ffn2.forward(t, s, f);
            x = norm2.forward(t, s, t.add(x, f));
        }
        x
    }

    pub fn content_encode(&self, s: &ParamStore, units: &UnitSequence) -> Result<Matrix> {
        if units.is_empty() {
            return Err(Error::invalid("content encoder needs at least one unit"));
        }
        if units.embeddings.ncols() != self.feature_dim {
            return Err(Error::shape(format!(
                "unit embeddings have dim {}, expected {}",
                units.embeddings.ncols(),
                self.feature_dim
            )));
        }
        let t = Tape::new();
        let u = t.constant(units.embeddings.clone());
        let out = self.forward(&t, s, u);
        let v = t.value(out).clone();
        Ok(v)
    }
}

/// Convolution, ReLU, SALN, added back to the input.
#[derive(Debug, Clone)]
pub struct StyledBlock {
    conv: Conv1d,
    norm: Saln,
}

impl StyledBlock {
    pub fn new(b: &mut Builder, name: &str, hidden: usize, style_dim: usize, kernel: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            conv: Conv1d::new(&mut b, "conv", hidden, hidden, kernel, 1),
            norm: Saln::new(&mut b, "saln", style_dim, hidden),
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, x: Var, style: Var) -> Var {
        let h = self.conv.forward(t, s, x);
        let h = t.relu(h);
        let h = self.norm.forward(t, s, h, style);
        t.add(x, h)
    }
}

/// Frame-level prior from upsampled content, prosody and style.
#[derive(Debug, Clone)]
pub struct FramePrior {
    prosody_in: Linear,
    blocks: Vec<StyledBlock>,
    pub head: Linear,
    latent_dim: usize,
    model_dim: usize,
    prosody_dim: usize,
}

impl FramePrior {
    pub fn new(
        b: &mut Builder,
        cfg: &SynthesisConfig,
        prosody_dim: usize,
        style_dim: usize,
    ) -> Self {
        let mut b = b.sub("prior");
        let h = cfg.model_dim;
        Self {
            prosody_in: Linear::new(&mut b, "prosody_in", prosody_dim, h),
            blocks: (0..cfg.prior_blocks)
                .map(|i| StyledBlock::new(&mut b, &format!("block{i}"), h, style_dim, cfg.kernel))
                .collect(),
            head: Linear::zeros(&mut b, "head", h, 2 * cfg.latent_dim),
            latent_dim: cfg.latent_dim,
            model_dim: h,
            prosody_dim,
        }
    }

    pub fn forward(
        &self,
        t: &Tape,
        s: &ParamStore,
        frame_hidden: Var,
        frame_prosody: Var,
        style: Var,
    ) -> GaussianVars {
        let p = self.prosody_in.forward(t, s, frame_prosody);
        let mut x = t.add(frame_hidden, p);
        for block in &self.blocks {
            x = block.forward(t, s, x, style);
        }
        let out = self.head.forward(t, s, x);
        GaussianVars::from_head(t, out, self.latent_dim)
    }

    /// Prior over frames; `sample = mu + noise_scale * sigma * eps`.
    pub fn prior_from_content(
        &self,
        s: &ParamStore,
        frame_hidden: &Matrix,
        frame_prosody: &Matrix,
        style: &StyleVector,
        noise_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<FrameLatent> {
        if frame_hidden.ncols() != self.model_dim
            || frame_prosody.ncols() != self.prosody_dim
            || frame_hidden.nrows() != frame_prosody.nrows()
        {
            return Err(Error::shape("frame prior inputs are inconsistent"));
        }
        let t = Tape::new();
        let h = t.constant(frame_hidden.clone());
        let p = t.constant(frame_prosody.clone());
        let st = t.constant(style.as_row());
        let g = self.forward(&t, s, h, p, st);
        let eps = standard_normal(rng, frame_hidden.nrows(), self.latent_dim) * noise_scale;
        let z = g.reparameterize(&t, eps);
        let latent = FrameLatent {
            mu: t.value(g.mu).clone(),
            log_sigma: t.value(g.log_sigma).clone(),
            sample: t.value(z).clone(),
        };
        Ok(latent)
    }
}

/// Style-conditioned convolutional decoder from latents to mel frames.
#[derive(Debug, Clone)]
pub struct Decoder {
    input: Linear,
    blocks: Vec<StyledBlock>,
    output: Linear,
    latent_dim: usize,
    style_dim: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &SynthesisConfig, style_dim: usize, num_bins: usize) -> Self {
        let mut b = b.sub("decoder");
        let h = cfg.model_dim;
        Self {
            input: Linear::new(&mut b, "input", cfg.latent_dim, h),
            blocks: (0..cfg.decoder_blocks)
                .map(|i| StyledBlock::new(&mut b, &format!("block{i}"), h, style_dim, cfg.kernel))
                .collect(),
            output: Linear::new(&mut b, "output", h, num_bins),
            latent_dim: cfg.latent_dim,
            style_dim,
        }
    }

    pub fn forward(&self, t: &Tape, s: &ParamStore, latent: Var, style: Var) -> Var {
        let mut x = self.input.forward(t, s, latent);
        for block in &self.blocks {
            x = block.forward(t, s, x, style);
        }
        self.output.forward(t, s, x)
    }

    pub fn decode(
        &self,
        s: &ParamStore,
        latent: &Matrix,
        style: &StyleVector,
        hop_ms: f64,
    ) -> Result<MelFeature> {
        if latent.ncols() != self.latent_dim || latent.nrows() == 0 {
            return Err(Error::shape(format!(
                "latent has shape {:?}, decoder expects [T × {}]",
                latent.dim(),
                self.latent_dim
            )));
        }
        if style.dim() != self.style_dim {
            return Err(Error::shape("style dimension mismatch in decoder"));
        }
        let t = Tape::new();
        let z = t.constant(latent.clone());
        let st = t.constant(style.as_row());
        let out = self.forward(&t, s, z, st);
        let v = t.value(out).clone();
        MelFeature::new(v, hop_ms)
    }
}

/// Mean absolute error over mel entries.
pub fn l1_loss(t: &Tape, target: Var, prediction: Var) -> Var {
    let d = t.sub(prediction, target);
    let a = t.abs(d);
    t.mean(a)
}

/// `(recon, latent_kl)` on plain values.
pub fn elbo_losses(
    mel: &MelFeature,
    mel_hat: &MelFeature,
    posterior: &FrameLatent,
    prior: &FrameLatent,
) -> Result<(f64, f64)> {
    if mel.data.dim() != mel_hat.data.dim() {
        return Err(Error::shape(format!(
            "mel {:?} vs reconstruction {:?}",
            mel.data.dim(),
            mel_hat.data.dim()
        )));
    }
    if posterior.num_frames() != mel.num_frames() || prior.num_frames() != mel.num_frames() {
        return Err(Error::shape("latent frame count differs from mel"));
    }
    let recon = (&mel.data - &mel_hat.data).mapv(f64::abs).mean().unwrap_or(0.0);
    let kl = gaussian_kl_values(
        &posterior.mu,
        &posterior.log_sigma,
        &prior.mu,
        &prior.log_sigma,
    )?;
    Ok((recon, kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Parts {
        store: ParamStore,
        posterior: PosteriorEncoder,
        content: ContentEncoder,
        prior: FramePrior,
        decoder: Decoder,
    }

    fn parts() -> Parts {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = SynthesisConfig::default();
        let mut b = Builder::new(&mut store, &mut rng, "");
        let posterior = PosteriorEncoder::new(&mut b, &cfg, 10);
        let content = ContentEncoder::new(&mut b, &cfg, 5);
        let prior = FramePrior::new(&mut b, &cfg, 4, 16);
        let decoder = Decoder::new(&mut b, &cfg, 16, 10);
        Parts {
            store,
            posterior,
            content,
            prior,
            decoder,
        }
    }

    fn mel(rows: usize) -> MelFeature {
        MelFeature::new(
            Array2::from_shape_fn((rows, 10), |(i, j)| ((i * 3 + j) % 7) as f64 / 7.0),
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_posterior_is_standard_normal() {
        let p = parts();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lat = p.posterior.posterior_encode(&p.store, &mel(9), &mut rng).unwrap();
        assert_eq!(lat.num_frames(), 9);
        assert!(lat.mu.iter().all(|&v| v == 0.0));
        assert!(lat.log_sigma.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_sampling_is_seeded() {
        let p = parts();
        let a = p
            .posterior
            .posterior_encode(&p.store, &mel(7), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = p
            .posterior
            .posterior_encode(&p.store, &mel(7), &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn posterior_rejects_empty() {
        let p = parts();
        let empty = MelFeature {
            data: Array2::zeros((0, 10)),
            hop_ms: 10.0,
        };
        assert!(p
            .posterior
            .posterior_encode(&p.store, &empty, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    fn units(n: usize) -> UnitSequence {
        UnitSequence {
            unit_ids: (0..n).collect(),
            durations: vec![1; n],
            embeddings: Array2::from_shape_fn((n, 5), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0),
        }
    }

    #[test]
    fn content_encoder_preserves_unit_count() {
        let p = parts();
        for n in [1, 2, 13, 64] {
            let out = p.content.content_encode(&p.store, &units(n)).unwrap();
            assert_eq!(out.dim(), (n, 32));
        }
        let u = units(6);
        assert_eq!(
            p.content.content_encode(&p.store, &u).unwrap(),
            p.content.content_encode(&p.store, &u).unwrap()
        );
    }

    #[test]
    fn zero_head_prior_is_standard_normal() {
        let p = parts();
        let hidden = Array2::from_elem((6, 32), 0.3);
        let pros = Array2::from_elem((6, 4), -0.2);
        let style = StyleVector(vec![0.1; 16]);
        let lat = p
            .prior
            .prior_from_content(&p.store, &hidden, &pros, &style, 1.0, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(lat.num_frames(), 6);
        assert!(lat.mu.iter().all(|&v| v == 0.0));
        assert!(lat.log_sigma.iter().all(|&v| v == 0.0));
        let kl = gaussian_kl_values(&lat.mu, &lat.log_sigma, &lat.mu, &lat.log_sigma).unwrap();
        assert_eq!(kl, 0.0);
    }

    #[test]
    fn decoder_preserves_frames_and_depends_on_style() {
        let p = parts();
        let z = Array2::from_shape_fn((11, 8), |(i, j)| ((i + j) % 3) as f64 - 1.0);
        let a = p.decoder.decode(&p.store, &z, &StyleVector(vec![0.5; 16]), 10.0).unwrap();
        let b = p.decoder.decode(&p.store, &z, &StyleVector(vec![-0.5; 16]), 10.0).unwrap();
        assert_eq!(a.num_frames(), 11);
        assert_ne!(a, b);
        assert_eq!(a, p.decoder.decode(&p.store, &z, &StyleVector(vec![0.5; 16]), 10.0).unwrap());
    }

    #[test]
    fn decoder_jacobian_wrt_style_is_nonzero() {
        let p = parts();
        let t = Tape::new();
        let z = t.constant(Array2::from_elem((4, 8), 0.2));
        let style = t.leaf(Array2::from_elem((1, 16), 0.1));
        let out = p.decoder.forward(&t, &p.store, z, style);
        let loss = t.sum(out);
        let g = t.backward(loss).get_or_zeros(style, (1, 16));
        assert!(g.iter().any(|v| v.abs() > 1e-8));
    }

    #[test]
    fn elbo_examples() {
        let m = mel(3);
        let lat = FrameLatent {
            mu: Array2::zeros((3, 2)),
            log_sigma: Array2::zeros((3, 2)),
            sample: Array2::zeros((3, 2)),
        };
        assert_eq!(elbo_losses(&m, &m, &lat, &lat).unwrap(), (0.0, 0.0));

        let q = (array![[1.0]], array![[0.0]]);
        let p = (array![[0.0]], array![[0.0]]);
        let kl = gaussian_kl_values(&q.0, &q.1, &p.0, &p.1).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn elbo_rejects_misaligned() {
        let lat = FrameLatent {
            mu: Array2::zeros((3, 2)),
            log_sigma: Array2::zeros((3, 2)),
            sample: Array2::zeros((3, 2)),
        };
        assert!(elbo_losses(&mel(3), &mel(4), &lat, &lat).is_err());
    }
}
