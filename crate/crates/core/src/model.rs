//! The full conversion model: style encoder, content encoder, prosody
//! encoder and predictor, duration predictor, posterior, prior, decoder.

use gradtape::{Matrix as TapeMatrix, ParamStore, Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::duration::{
    duration_loss_var, frame_count, gaussian_upsample, gaussian_upsample_var, DurationConfig,
    DurationPredictor,
};
use crate::error::{Error, Result};
use crate::nn::Builder;
use crate::prosody::{prosody_kl_var, ProsodyEncoder, ProsodyEncoderConfig, ProsodyPredictor};
use crate::style::{StyleEncoder, StyleEncoderConfig, StyleVector};
use crate::synthesis::{
    gaussian_kl, l1_loss, standard_normal, ContentEncoder, Decoder, FramePrior, MelFeature,
    PosteriorEncoder, SynthesisConfig,
};
use crate::units::UnitSequence;
use crate::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VcConfig {
    pub style: StyleEncoderConfig,
    pub synthesis: SynthesisConfig,
    pub prosody: ProsodyEncoderConfig,
    pub duration: DurationConfig,
    /// Scale on the prior noise when sampling frame latents at inference.
    pub noise_scale: f64,
    /// Upper bound on predicted frames per unit.
    pub max_unit_frames: f64,
}

impl Default for VcConfig {
    fn default() -> Self {
        Self {
            style: StyleEncoderConfig::default(),
            synthesis: SynthesisConfig::default(),
            prosody: ProsodyEncoderConfig::default(),
            duration: DurationConfig::default(),
            noise_scale: 0.667,
            max_unit_frames: 50.0,
        }
    }
}

impl VcConfig {
    pub fn validate(&self) -> Result<()> {
        self.style.validate()?;
        self.synthesis.validate()?;
        self.prosody.validate()?;
        self.duration.validate()?;
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if !(self.max_unit_frames >= 1.0) {
            return Err(Error::Config("max_unit_frames must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub prosody: f64,
    pub duration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kl: 1.0,
            prosody: 1.0,
            duration: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.recon, self.kl, self.prosody, self.duration];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One utterance ready for training: target mel plus its unit sequence.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub mel: MelFeature,
    pub units: UnitSequence,
}

impl TrainingExample {
    pub fn new(mel: MelFeature, units: UnitSequence) -> Result<Self> {
        if units.num_frames() != mel.num_frames() {
            return Err(Error::Data(format!(
                "units cover {} frames but the mel has {}",
                units.num_frames(),
                mel.num_frames()
            )));
        }
        Ok(Self { mel, units })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    pub prosody: f64,
    pub duration: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, other: &LossBreakdown, scale: f64) {
        self.total += other.total * scale;
        self.recon += other.recon * scale;
        self.kl += other.kl * scale;
        self.prosody += other.prosody * scale;
        self.duration += other.duration * scale;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.recon, self.kl, self.prosody, self.duration]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Output of the inference path.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub mel: MelFeature,
    /// Predicted frames per unit.
    pub durations: Vec<f64>,
}

#[derive(Debug)]
pub struct VcModel {
    pub config: VcConfig,
    pub store: ParamStore,
    pub style: StyleEncoder,
    pub content: ContentEncoder,
    pub prosody_encoder: ProsodyEncoder,
    pub prosody_predictor: ProsodyPredictor,
    pub duration: DurationPredictor,
    pub posterior: PosteriorEncoder,
    pub prior: FramePrior,
    pub decoder: Decoder,
    pub num_bins: usize,
    pub feature_dim: usize,
}

impl VcModel {
    pub fn new(config: VcConfig, num_bins: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let h = config.synthesis.model_dim;
        let sd = config.style.style_dim;
        let pd = config.prosody.prosody_dim;
        let style = StyleEncoder::new(&mut b, &config.style, num_bins);
        let content = ContentEncoder::new(&mut b, &config.synthesis, feature_dim);
        let prosody_encoder = ProsodyEncoder::new(&mut b, &config.prosody, num_bins);
        let prosody_predictor = ProsodyPredictor::new(&mut b, h, sd, pd);
        let duration = DurationPredictor::new(&mut b, &config.duration, h, pd, sd);
        let posterior = PosteriorEncoder::new(&mut b, &config.synthesis, num_bins);
        let prior = FramePrior::new(&mut b, &config.synthesis, pd, sd);
        let decoder = Decoder::new(&mut b, &config.synthesis, sd, num_bins);
        Ok(Self {
            config,
            store,
            style,
            content,
            prosody_encoder,
            prosody_predictor,
            duration,
            posterior,
            prior,
            decoder,
            num_bins,
            feature_dim,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.config.style.style_dim
    }

    fn check_example(&self, ex: &TrainingExample) -> Result<()> {
        if ex.mel.num_bins() != self.num_bins {
            return Err(Error::shape(format!(
                "mel has {} bins, model expects {}",
                ex.mel.num_bins(),
                self.num_bins
            )));
        }
        if ex.units.embeddings.ncols() != self.feature_dim {
            return Err(Error::shape("unit embedding width differs from the model"));
        }
        if ex.units.is_empty() {
            return Err(Error::invalid("utterance has no units"));
        }
        Ok(())
    }

    /// Training graph for one utterance; returns weighted total and its parts.
    pub fn loss_graph(
        &self,
        t: &Tape,
        ex: &TrainingExample,
        weights: &LossWeights,
        rng: &mut impl Rng,
    ) -> Result<(Var, [Var; 4])> {
        self.check_example(ex)?;
        let s = &self.store;
        let frames = ex.mel.num_frames();
        let n = ex.units.len();
        let mel = t.constant(ex.mel.data.clone());
        let style = self.style.forward(t, s, mel);
        let units = t.constant(ex.units.embeddings.clone());
        let content = self.content.forward(t, s, units);

        let (_, q_pro) = self.prosody_encoder.forward(t, s, mel, &ex.units.durations);
        let p_pro = self.prosody_predictor.forward(t, s, content, style);
        let prosody_loss = prosody_kl_var(t, q_pro, p_pro);
        let z_pro = q_pro.reparameterize(t, standard_normal(rng, n, self.config.prosody.prosody_dim));

        let dur = self.duration.forward(t, s, content, z_pro, style);
        let duration_loss = duration_loss_var(t, dur.log_durations, &ex.units.durations);
        let gt = Array2::from_shape_fn((1, n), |(_, i)| ex.units.durations[i] as f64);
        let gt = t.constant(gt);
        let sigma = t.transpose(dur.sigma);
        let (frame_hidden, w) = gaussian_upsample_var(t, content, gt, sigma, frames);
        let frame_prosody = t.matmul(w, z_pro);

        let q_z = self.posterior.forward(t, s, mel);
        let p_z = self.prior.forward(t, s, frame_hidden, frame_prosody, style);
        let kl = gaussian_kl(t, q_z, p_z);
        let z = q_z.reparameterize(t, standard_normal(rng, frames, self.config.synthesis.latent_dim));
        let mel_hat = self.decoder.forward(t, s, z, style);
        let recon = l1_loss(t, mel, mel_hat);

        let total = t.add(
            t.add(t.scale(recon, weights.recon), t.scale(kl, weights.kl)),
            t.add(
                t.scale(prosody_loss, weights.prosody),
                t.scale(duration_loss, weights.duration),
            ),
        );
        Ok((total, [recon, kl, prosody_loss, duration_loss]))
    }

    /// Mean loss and mean parameter gradients over a batch.
    pub fn batch_gradients(
        &self,
        batch: &[&TrainingExample],
        weights: &LossWeights,
        rng: &mut impl Rng,
    ) -> Result<(LossBreakdown, Vec<Option<TapeMatrix>>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut mean = LossBreakdown::default();
        let mut grads: Vec<Option<TapeMatrix>> = vec![None; self.store.len()];
        for ex in batch {
            let t = Tape::new();
            let (total, parts) = self.loss_graph(&t, ex, weights, rng)?;
            let item = LossBreakdown {
                total: t.scalar(total),
                recon: t.scalar(parts[0]),
                kl: t.scalar(parts[1]),
                prosody: t.scalar(parts[2]),
                duration: t.scalar(parts[3]),
            };
            if !item.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss terms {item:?}")));
            }
            mean.add_scaled(&item, scale);
            let g = t.backward(total).param_grads(&self.store);
            for (acc, gi) in grads.iter_mut().zip(g) {
                if let Some(gi) = gi {
                    match acc {
                        Some(a) => a.scaled_add(scale, &gi),
                        None => *acc = Some(gi * scale),
                    }
                }
            }
        }
        Ok((mean, grads))
    }

    /// Loss terms without gradients.
    pub fn evaluate(&self, ex: &TrainingExample, weights: &LossWeights, rng: &mut impl Rng) -> Result<LossBreakdown> {
        let t = Tape::new();
        let (total, parts) = self.loss_graph(&t, ex, weights, rng)?;
        Ok(LossBreakdown {
            total: t.scalar(total),
            recon: t.scalar(parts[0]),
            kl: t.scalar(parts[1]),
            prosody: t.scalar(parts[2]),
            duration: t.scalar(parts[3]),
        })
    }

    pub fn encode_style(&self, mel: &MelFeature) -> Result<StyleVector> {
        self.style.encode_style(&self.store, mel)
    }

    /// Inference path from units and a style vector to a mel.
    pub fn synthesize(
        &self,
        units: &UnitSequence,
        style: &StyleVector,
        hop_ms: f64,
        rng: &mut impl Rng,
    ) -> Result<Synthesis> {
        if units.is_empty() {
            return Err(Error::invalid("source has no units"));
        }
        if style.dim() != self.style_dim() {
            return Err(Error::shape(format!(
                "style vector has dim {}, model expects {}",
                style.dim(),
                self.style_dim()
            )));
        }
        let s = &self.store;
        let content = self.content.content_encode(s, units)?;
        let prosody = self.prosody_predictor.predict_prosody(s, &content, style)?;
        let pred = self.duration.predict_durations(s, &content, &prosody.mu, style)?;
        let max = self.config.max_unit_frames;
        let durations: Vec<f64> = pred.durations().iter().map(|d| d.clamp(1e-3, max)).collect();
        let frames = frame_count(&durations);
        let (frame_hidden, w) = gaussian_upsample(&content, &durations, &pred.sigmas)?;
        debug_assert_eq!(frame_hidden.nrows(), frames);
        let frame_prosody: Matrix = w.w.dot(&prosody.mu);
        let latent = self.prior.prior_from_content(
            s,
            &frame_hidden,
            &frame_prosody,
            style,
            self.config.noise_scale,
            rng,
        )?;
        let mel = self.decoder.decode(s, &latent.sample, style, hop_ms)?;
        if mel.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite output".into()));
        }
        Ok(Synthesis { mel, durations })
    }
}
