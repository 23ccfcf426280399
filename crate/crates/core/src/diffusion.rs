//! Latent diffusion over style vectors, conditioned on prompt token
//! embeddings through cross-attention.
//!
//! Noise levels are counted from 1: a [`DiffusionState`] at level `l ≥ 1`
//! holds `x` distributed as `q_sample(x0, l - 1, ·)`, and level 0 is clean
//! data. Schedule tables and the network's timestep input use the 0-based
//! index `l - 1`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use gradtape::{Adam, ParamStore, Tape, Var, WeightAverage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio;
use crate::nn::{self, Builder, LayerNorm, Linear};
use crate::synthesis::standard_normal;
use crate::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid("every beta must lie in (0, 1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("betas must be non-decreasing"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Signal retention at a noise level; level 0 is clean data.
    pub fn alpha_bar_at_level(&self, level: usize) -> f64 {
        if level == 0 {
            1.0
        } else {
            self.alpha_bars[level - 1]
        }
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("schedule length must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit retention `ab`.
pub fn q_sample_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Forward corruption at schedule index `t`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if t >= schedule.len() {
        return Err(Error::invalid(format!(
            "timestep {t} outside schedule of length {}",
            schedule.len()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape("x0 and eps differ in length"));
    }
    Ok(q_sample_with_alpha_bar(x0, eps, schedule.alpha_bars[t]))
}

/// Batched forward corruption; row `r` uses schedule index `steps[r]`.
pub fn q_sample_batch(x0: &Matrix, steps: &[usize], eps: &Matrix, schedule: &NoiseSchedule) -> Matrix {
    let mut out = x0.clone();
    for (r, &t) in steps.iter().enumerate() {
        let ab = schedule.alpha_bars[t];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        for c in 0..x0.ncols() {
            out[[r, c]] = a * x0[[r, c]] + b * eps[[r, c]];
        }
    }
    out
}

/// Token-level text representation for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Matrix,
}

impl PromptEmbedding {
    pub fn new(tokens: Matrix) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::invalid("prompt embedding needs at least one token"));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prompt embedding has non-finite values"));
        }
        Ok(Self { tokens })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.nrows()
    }
}

/// Stacked prompt tokens for a batch, with one `(start, len)` segment per
/// batch row.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub tokens: Var,
    pub segments: Vec<(usize, usize)>,
}

impl PromptBatch {
    pub fn constant(t: &Tape, prompts: &[&PromptEmbedding]) -> Self {
        let views: Vec<_> = prompts.iter().map(|p| p.tokens.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("same text dim");
        Self {
            tokens: t.constant(stacked),
            segments: segments_of(prompts.iter().map(|p| p.num_tokens())),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.segments.len()
    }

    /// `[total_tokens × batch]` indicator of which row owns each token.
    fn expansion(&self) -> Matrix {
        let total: usize = self.segments.iter().map(|s| s.1).sum();
        let mut e = Array2::zeros((total, self.segments.len()));
        for (b, &(start, len)) in self.segments.iter().enumerate() {
            for r in start..start + len {
                e[[r, b]] = 1.0;
            }
        }
        e
    }
}

fn segments_of(lengths: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut start = 0;
    lengths
        .map(|len| {
            let seg = (start, len);
            start += len;
            seg
        })
        .collect()
}

/// Lowercased words split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

pub const UNK: &str = "<unk>";

/// Closed vocabulary; index 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list = vec![UNK.to_string()];
        for w in words {
            let w = w.into().to_lowercase();
            if !list.contains(&w) {
                list.push(w);
            }
        }
        Self::from_list(list)
    }

    /// Rebuild from a stored word list whose first entry is the UNK token.
    pub fn from_word_list(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK) {
            return Err(Error::invalid("vocabulary list must start with the UNK token"));
        }
        Ok(Self::from_list(words))
    }

    fn from_list(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Token ids for `text`; unknown words map to the UNK id with a warning.
    pub fn ids(&self, text: &str) -> Result<Vec<usize>> {
        let words = tokenize(text);
        if words.is_empty() {
            return Err(Error::invalid("prompt text is empty"));
        }
        Ok(words
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&i) => i,
                None => {
                    log::warn!("prompt word {w:?} is outside the vocabulary, using {UNK}");
                    0
                }
            })
            .collect())
    }
}

/// Trainable closed-vocabulary embedder.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub vocab: Vocabulary,
    table: gradtape::ParamId,
}

impl PromptEncoder {
    pub fn new(b: &mut Builder, vocab: Vocabulary, text_dim: usize) -> Self {
        let table = b.normal("prompt.embedding", vocab.len(), text_dim, 1.0);
        Self { vocab, table }
    }

    pub fn embed_ids(&self, t: &Tape, s: &ParamStore, ids: &[usize]) -> Var {
        let table = t.param(s, self.table);
        t.gather_rows(table, ids)
    }

    /// Embeddings for many prompts on one tape.
    pub fn batch(&self, t: &Tape, s: &ParamStore, prompts: &[&[usize]]) -> PromptBatch {
        let flat: Vec<usize> = prompts.iter().flat_map(|p| p.iter().cloned()).collect();
        PromptBatch {
            tokens: self.embed_ids(t, s, &flat),
            segments: segments_of(prompts.iter().map(|p| p.len())),
        }
    }

    pub fn encode_prompt(&self, s: &ParamStore, text: &str) -> Result<PromptEmbedding> {
        let ids = self.vocab.ids(text)?;
        let table = s.value(self.table);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&table.row(i));
        }
        PromptEmbedding::new(out)
    }
}

/// Precomputed prompt embeddings produced by an external text model.
///
/// The matrix is stored in the raw feature format; `<path>.index` lists one
/// prompt per line as `start<TAB>end<TAB>prompt id`, rows `start..end`.
#[derive(Debug, Clone)]
pub struct PromptEmbeddingFile {
    matrix: Matrix,
    ranges: HashMap<String, (usize, usize)>,
}

impl PromptEmbeddingFile {
    pub fn index_path(path: &Path) -> std::path::PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".index");
        s.into()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let matrix = featio::read_matrix(path)?.data;
        let index_path = Self::index_path(path);
        let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let bad = |reason: String| Error::Format {
            path: index_path.clone(),
            reason,
        };
        let mut ranges = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (Some(a), Some(b), Some(id)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(format!("line {}: expected start, end, id", n + 1)));
            };
            let start: usize = a.parse().map_err(|_| bad(format!("line {}: bad start", n + 1)))?;
            let end: usize = b.parse().map_err(|_| bad(format!("line {}: bad end", n + 1)))?;
            if start >= end || end > matrix.nrows() {
                return Err(bad(format!("line {}: invalid row range {start}..{end}", n + 1)));
            }
            ranges.insert(id.to_string(), (start, end));
        }
        Ok(Self { matrix, ranges })
    }

    pub fn save(path: &Path, entries: &[(String, PromptEmbedding)]) -> Result<()> {
        let views: Vec<_> = entries.iter().map(|(_, e)| e.tokens.view()).collect();
        let matrix = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|_| Error::shape("prompt embeddings differ in width"))?;
        featio::write_matrix(path, &matrix, 1.0)?;
        let mut index = String::new();
        let mut start = 0;
        for (id, e) in entries {
            index.push_str(&format!("{start}\t{}\t{id}\n", start + e.num_tokens()));
            start += e.num_tokens();
        }
        let index_path = Self::index_path(path);
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
    }

    pub fn text_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn get(&self, prompt_id: &str) -> Result<PromptEmbedding> {
        let &(start, end) = self
            .ranges
            .get(prompt_id)
            .ok_or_else(|| Error::Data(format!("no precomputed embedding for {prompt_id:?}")))?;
        PromptEmbedding::new(self.matrix.slice(ndarray::s![start..end, ..]).to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::invalid(format!("unknown sampler {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden_dim: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            hidden_dim: 64,
            time_dim: 32,
            text_dim: 32,
            blocks: 2,
            heads: 2,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.hidden_dim == 0 || self.time_dim < 2 || self.text_dim == 0 || self.heads == 0 {
            return Err(Error::Config("diffusion sizes must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("hidden_dim must divide into heads".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

/// Anything that predicts the injected noise from `(x_t, prompt, t)`.
pub trait EpsModel {
    /// `x_t` is `[B × dim]`; `steps` holds one schedule index per row.
    fn predict(&self, t: &Tape, x_t: Var, steps: &[usize], cond: &PromptBatch) -> Var;
}

/// Cross-attention from one hidden row per sample to its prompt tokens.
#[derive(Debug, Clone)]
struct CrossAttention {
    norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

impl CrossAttention {
    fn new(b: &mut Builder, name: &str, dim: usize, text_dim: usize, heads: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            norm: LayerNorm::new(&mut b, "norm", dim),
            query: Linear::new(&mut b, "query", dim, dim),
            key: Linear::new(&mut b, "key", text_dim, dim),
            value: Linear::new(&mut b, "value", text_dim, dim),
            out: Linear::new(&mut b, "out", dim, dim),
            heads,
            dim,
        }
    }

    /// Returns the attention output and per-head `[tokens × 1]` weights.
    fn forward(&self, t: &Tape, s: &ParamStore, h: Var, cond: &PromptBatch) -> (Var, Vec<Var>) {
        let x = self.norm.forward(t, s, h);
        let q = self.query.forward(t, s, x);
        let k = self.key.forward(t, s, cond.tokens);
        let v = self.value.forward(t, s, cond.tokens);
        let expand = cond.expansion();
        let gather = t.constant(expand.t().to_owned());
        let expand = t.constant(expand);
        let q_tok = t.matmul(expand, q);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = t.slice_cols(q_tok, head * dh, dh);
            let kh = t.slice_cols(k, head * dh, dh);
            let vh = t.slice_cols(v, head * dh, dh);
            let scores = t.sum_cols(t.mul(qh, kh));
            let scores = t.scale(scores, scale);
            let w = t.segment_softmax(scores, &cond.segments);
            let weighted = t.mul(vh, w);
            outs.push(t.matmul(gather, weighted));
            weights.push(w);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            t.concat_cols(&outs)
        };
        (self.out.forward(t, s, joined), weights)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    time: Linear,
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    cross: CrossAttention,
}

/// Residual MLP noise predictor with sinusoidal timestep embedding and
/// prompt cross-attention in every block.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    input: Linear,
    time1: Linear,
    time2: Linear,
    blocks: Vec<ResidualBlock>,
    out_norm: LayerNorm,
    output: Linear,
    time_dim: usize,
    style_dim: usize,
}

impl NoisePredictor {
    pub fn new(b: &mut Builder, cfg: &DiffusionConfig, style_dim: usize) -> Self {
        let mut b = b.sub("eps");
        let d = cfg.hidden_dim;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let mut bb = b.sub(&format!("block{i}"));
                ResidualBlock {
                    time: Linear::new(&mut bb, "time", d, d),
                    norm: LayerNorm::new(&mut bb, "norm", d),
                    fc1: Linear::new(&mut bb, "fc1", d, 2 * d),
                    fc2: Linear::new(&mut bb, "fc2", 2 * d, d),
                    cross: CrossAttention::new(&mut bb, "cross", d, cfg.text_dim, cfg.heads),
                }
            })
            .collect();
        Self {
            input: Linear::new(&mut b, "input", style_dim, d),
            time1: Linear::new(&mut b, "time1", cfg.time_dim, d),
            time2: Linear::new(&mut b, "time2", d, d),
            blocks,
            out_norm: LayerNorm::new(&mut b, "out_norm", d),
            output: Linear::new(&mut b, "output", d, style_dim),
            time_dim: cfg.time_dim,
            style_dim,
        }
    }

    pub fn style_dim(&self) -> usize {
        self.style_dim
    }

    /// Forward pass that also returns every cross-attention weight column.
    pub fn forward_with_attention(
        &self,
        t: &Tape,
        s: &ParamStore,
        x_t: Var,
        steps: &[usize],
        cond: &PromptBatch,
    ) -> (Var, Vec<Var>) {
        assert_eq!(steps.len(), cond.batch_size(), "one prompt per batch row");
        let positions: Vec<f64> = steps.iter().map(|&v| v as f64).collect();
        let temb = t.constant(nn::sinusoidal(&positions, self.time_dim));
        let temb = self.time1.forward(t, s, temb);
        let temb = t.relu(temb);
        let temb = self.time2.forward(t, s, temb);
        let mut h = self.input.forward(t, s, x_t);
        h = t.add(h, temb);
        let mut attention = Vec::new();
        for block in &self.blocks {
            let tb = block.time.forward(t, s, temb);
            let x = block.norm.forward(t, s, t.add(h, tb));
            let x = block.fc1.forward(t, s, x);
            let x = t.relu(x);
            let x = block.fc2.forward(t, s, x);
            h = t.add(h, x);
            let (c, w) = block.cross.forward(t, s, h, cond);
            h = t.add(h, c);
            attention.extend(w);
        }
        let h = self.out_norm.forward(t, s, h);
        (self.output.forward(t, s, h), attention)
    }
}

/// A predictor bound to its parameters.
pub struct BoundPredictor<'a> {
    pub net: &'a NoisePredictor,
    pub store: &'a ParamStore,
}

impl EpsModel for BoundPredictor<'_> {
    fn predict(&self, t: &Tape, x_t: Var, steps: &[usize], cond: &PromptBatch) -> Var {
        self.net.forward_with_attention(t, self.store, x_t, steps, cond).0
    }
}

/// Noise-space MSE, averaged over dimensions and batch rows.
pub fn denoise_loss_var(
    t: &Tape,
    model: &dyn EpsModel,
    x0: &Matrix,
    cond: &PromptBatch,
    steps: &[usize],
    eps: &Matrix,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    if x0.dim() != eps.dim() || steps.len() != x0.nrows() || cond.batch_size() != x0.nrows() {
        return Err(Error::shape("denoise loss inputs disagree in batch shape"));
    }
    if let Some(&bad) = steps.iter().find(|&&s| s >= schedule.len()) {
        return Err(Error::invalid(format!("timestep {bad} outside schedule")));
    }
    let x_t = t.constant(q_sample_batch(x0, steps, eps, schedule));
    let pred = model.predict(t, x_t, steps, cond);
    if t.shape(pred) != eps.dim() {
        return Err(Error::shape("predicted noise has the wrong shape"));
    }
    let target = t.constant(eps.clone());
    let d = t.sub(pred, target);
    let sq = t.square(d);
    Ok(t.mean(sq))
}

/// Single-sample loss on plain values.
pub fn denoise_loss(
    model: &dyn EpsModel,
    x0: &[f64],
    c: &PromptEmbedding,
    step: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if x0.len() != eps.len() {
        return Err(Error::shape("x0 and eps differ in length"));
    }
    let t = Tape::new();
    let cond = PromptBatch::constant(&t, &[c]);
    let x0 = Array2::from_shape_vec((1, x0.len()), x0.to_vec()).expect("row");
    let eps = Array2::from_shape_vec((1, eps.len()), eps.to_vec()).expect("row");
    let loss = denoise_loss_var(&t, model, &x0, &cond, &[step], &eps, schedule)?;
    Ok(t.scalar(loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    /// `[B × dim]` noisy samples.
    pub x: Matrix,
    /// Noise level, 0 = clean.
    pub t: usize,
}

fn predict_eps(model: &dyn EpsModel, x: &Matrix, level: usize, prompts: &[&PromptEmbedding]) -> Matrix {
    let t = Tape::new();
    let cond = PromptBatch::constant(&t, prompts);
    let xv = t.constant(x.clone());
    let steps = vec![level - 1; x.nrows()];
    let out = model.predict(&t, xv, &steps, &cond);
    let v = t.value(out).clone();
    v
}

/// DDIM update from level `from` to level `to < from` given predicted noise.
pub fn ddim_update(
    x: &Matrix,
    eps_hat: &Matrix,
    schedule: &NoiseSchedule,
    from: usize,
    to: usize,
    eta: f64,
    noise: Option<&Matrix>,
) -> Matrix {
    let ab_t = schedule.alpha_bar_at_level(from);
    let ab_prev = schedule.alpha_bar_at_level(to);
    let x0_pred = (x - &(eps_hat * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = x0_pred * ab_prev.sqrt() + eps_hat * dir;
    if let (Some(z), true) = (noise, sigma > 0.0) {
        out = out + z * sigma;
    }
    out
}

/// Ancestral DDPM update from level `from` to `from - 1`.
pub fn ddpm_update(
    x: &Matrix,
    eps_hat: &Matrix,
    schedule: &NoiseSchedule,
    from: usize,
    noise: &Matrix,
) -> Matrix {
    let i = from - 1;
    let beta = schedule.betas[i];
    let ab = schedule.alpha_bars[i];
    let mean = (x - &(eps_hat * (beta / (1.0 - ab).sqrt()))) / schedule.alphas[i].sqrt();
    if from == 1 {
        return mean;
    }
    let var = beta * (1.0 - schedule.alpha_bars[i - 1]) / (1.0 - ab);
    mean + noise * var.sqrt()
}

/// One reverse step from `state.t` to `state.t - 1`.
pub fn denoise_step(
    model: &dyn EpsModel,
    state: &DiffusionState,
    prompts: &[&PromptEmbedding],
    schedule: &NoiseSchedule,
    sampler: SamplerKind,
    rng: &mut impl Rng,
) -> Result<DiffusionState> {
    if state.t == 0 {
        return Err(Error::invalid("cannot denoise past level 0"));
    }
    if state.t > schedule.len() {
        return Err(Error::invalid("state level exceeds the schedule"));
    }
    if prompts.len() != state.x.nrows() {
        return Err(Error::shape("one prompt per sample is required"));
    }
    let eps_hat = predict_eps(model, &state.x, state.t, prompts);
    let x = match sampler {
        SamplerKind::Ddim => ddim_update(&state.x, &eps_hat, schedule, state.t, state.t - 1, 0.0, None),
        SamplerKind::Ddpm => {
            let noise = standard_normal(rng, state.x.nrows(), state.x.ncols());
            ddpm_update(&state.x, &eps_hat, schedule, state.t, &noise)
        }
    };
    Ok(DiffusionState { x, t: state.t - 1 })
}

/// Noise levels visited by a strided DDIM run, highest first, ending at 0.
pub fn ddim_levels(total: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, total);
    let mut levels: Vec<usize> = (1..=steps)
        .rev()
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect();
    levels.dedup();
    levels.push(0);
    levels
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    pub sampler: SamplerKind,
    /// DDIM step count; DDPM always walks every level.
    pub steps: usize,
    pub eta: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            sampler: SamplerKind::Ddim,
            steps: 50,
            eta: 0.0,
        }
    }
}

/// Draw one sample per prompt, starting from `x_T` when given or from
/// standard normal noise.
pub fn sample(
    model: &dyn EpsModel,
    prompts: &[&PromptEmbedding],
    dim: usize,
    schedule: &NoiseSchedule,
    opts: &SampleOptions,
    start: Option<Matrix>,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts to sample for"));
    }
    let x = match start {
        Some(x) => x,
        None => standard_normal(rng, prompts.len(), dim),
    };
    let mut state = DiffusionState {
        x,
        t: schedule.len(),
    };
    match opts.sampler {
        SamplerKind::Ddpm => {
            while state.t > 0 {
                state = denoise_step(model, &state, prompts, schedule, SamplerKind::Ddpm, rng)?;
            }
        }
        SamplerKind::Ddim => {
            let levels = ddim_levels(schedule.len(), opts.steps);
            for pair in levels.windows(2) {
                let eps_hat = predict_eps(model, &state.x, pair[0], prompts);
                let noise = (opts.eta > 0.0)
                    .then(|| standard_normal(rng, state.x.nrows(), state.x.ncols()));
                state = DiffusionState {
                    x: ddim_update(&state.x, &eps_hat, schedule, pair[0], pair[1], opts.eta, noise.as_ref()),
                    t: pair[1],
                };
            }
        }
    }
    if state.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("diffusion sample diverged".into()));
    }
    Ok(state.x)
}

/// Per-dimension standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &Matrix) -> Result<Self> {
        if rows.nrows() < 2 {
            return Err(Error::invalid("need at least two vectors to standardize"));
        }
        let mean = rows.mean_axis(ndarray::Axis(0)).expect("rows").to_vec();
        let std = rows
            .std_axis(ndarray::Axis(0), 0.0)
            .iter()
            .map(|s| s.max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, rows: &Matrix) -> Matrix {
        let mut out = rows.clone();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }

    pub fn invert(&self, rows: &Matrix) -> Matrix {
        let mut out = rows.clone();
        for mut r in out.rows_mut() {
            for (j, v) in r.iter_mut().enumerate() {
                *v = *v * self.std[j] + self.mean[j];
            }
        }
        out
    }
}

/// Conditioning source for training and sampling.
#[derive(Debug, Clone)]
pub enum PromptSource {
    /// Token ids for the built-in embedder.
    Builtin(Vec<usize>),
    /// A fixed externally computed embedding.
    External(PromptEmbedding),
}

/// Complete prompt-to-style generator.
#[derive(Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub store: ParamStore,
    pub encoder: PromptEncoder,
    pub net: NoisePredictor,
    pub schedule: NoiseSchedule,
    pub standardizer: Option<Standardizer>,
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight averaging decay; the averaged weights replace the trained
    /// ones at the end. Zero disables averaging.
    pub ema_decay: f64,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, vocab: Vocabulary, style_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng, "");
        let encoder = PromptEncoder::new(&mut b, vocab, config.text_dim);
        let net = NoisePredictor::new(&mut b, &config, style_dim);
        let schedule = config.schedule()?;
        Ok(Self {
            config,
            store,
            encoder,
            net,
            schedule,
            standardizer: None,
        })
    }

    pub fn style_dim(&self) -> usize {
        self.net.style_dim()
    }

    pub fn bound(&self) -> BoundPredictor<'_> {
        BoundPredictor {
            net: &self.net,
            store: &self.store,
        }
    }

    fn batch_cond(&self, t: &Tape, prompts: &[&PromptSource]) -> Result<PromptBatch> {
        match prompts.first() {
            Some(PromptSource::Builtin(_)) => {
                let ids: Vec<&[usize]> = prompts
                    .iter()
                    .map(|p| match p {
                        PromptSource::Builtin(ids) => Ok(ids.as_slice()),
                        PromptSource::External(_) => {
                            Err(Error::invalid("cannot mix prompt sources in one batch"))
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(self.encoder.batch(t, &self.store, &ids))
            }
            Some(PromptSource::External(_)) => {
                let embs: Vec<&PromptEmbedding> = prompts
                    .iter()
                    .map(|p| match p {
                        PromptSource::External(e) => Ok(e),
                        PromptSource::Builtin(_) => {
                            Err(Error::invalid("cannot mix prompt sources in one batch"))
                        }
                    })
                    .collect::<Result<_>>()?;
                if embs.iter().any(|e| e.tokens.ncols() != self.config.text_dim) {
                    return Err(Error::shape("external prompt width differs from text_dim"));
                }
                Ok(PromptBatch::constant(t, &embs))
            }
            None => Err(Error::invalid("empty batch")),
        }
    }

    /// One optimizer step on a batch of standardized vectors.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        x0: &Matrix,
        prompts: &[&PromptSource],
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let b = x0.nrows();
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.schedule.len())).collect();
        let eps = standard_normal(rng, b, x0.ncols());
        let t = Tape::new();
        let cond = self.batch_cond(&t, prompts)?;
        let model = self.bound();
        let loss = denoise_loss_var(&t, &model, x0, &cond, &steps, &eps, &self.schedule)?;
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("diffusion loss became {value}")));
        }
        let grads = t.backward(loss).param_grads(&self.store);
        opt.step(&mut self.store, &grads);
        Ok(value)
    }

    /// Fit on `(standardized vector, prompt)` pairs; returns per-step losses.
    pub fn fit(
        &mut self,
        data: &Matrix,
        prompts: &[PromptSource],
        opts: &DiffusionTrainOptions,
    ) -> Result<Vec<f64>> {
        if data.nrows() != prompts.len() || data.nrows() == 0 {
            return Err(Error::shape("need one prompt per training vector"));
        }
        let mut opt = Adam::new(&self.store, opts.lr).with_clip_norm(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut avg = (opts.ema_decay > 0.0).then(|| WeightAverage::new(&self.store, opts.ema_decay));
        let mut losses = Vec::with_capacity(opts.steps);
        for _ in 0..opts.steps {
            let idx: Vec<usize> = (0..opts.batch_size)
                .map(|_| rng.random_range(0..data.nrows()))
                .collect();
            let x0 = data.select(ndarray::Axis(0), &idx);
            let batch: Vec<&PromptSource> = idx.iter().map(|&i| &prompts[i]).collect();
            losses.push(self.train_step(&mut opt, &x0, &batch, &mut rng)?);
            if let Some(a) = avg.as_mut() {
                a.update(&self.store);
            }
        }
        if let Some(mut a) = avg {
            a.swap(&mut self.store);
        }
        Ok(losses)
    }

    /// Mean denoising loss over fixed `(t, eps)` draws, without updating.
    pub fn evaluate(&self, data: &Matrix, prompts: &[PromptSource], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = data.nrows();
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.schedule.len())).collect();
        let eps = standard_normal(&mut rng, b, data.ncols());
        let t = Tape::new();
        let refs: Vec<&PromptSource> = prompts.iter().collect();
        let cond = self.batch_cond(&t, &refs)?;
        let loss = denoise_loss_var(&t, &self.bound(), data, &cond, &steps, &eps, &self.schedule)?;
        Ok(t.scalar(loss))
    }

    pub fn prompt_embedding(&self, prompt: &PromptSource) -> Result<PromptEmbedding> {
        match prompt {
            PromptSource::Builtin(ids) => {
                let t = Tape::new();
                let v = self.encoder.embed_ids(&t, &self.store, ids);
                let m = t.value(v).clone();
                PromptEmbedding::new(m)
            }
            PromptSource::External(e) => Ok(e.clone()),
        }
    }

    /// Sample in standardized space, `count` draws for one prompt.
    pub fn sample_standardized(
        &self,
        prompt: &PromptSource,
        count: usize,
        opts: &SampleOptions,
        rng: &mut impl Rng,
    ) -> Result<Matrix> {
        let emb = self.prompt_embedding(prompt)?;
        let prompts = vec![&emb; count];
        sample(&self.bound(), &prompts, self.style_dim(), &self.schedule, opts, None, rng)
    }

    /// Sample and map back through the stored standardization.
    pub fn sample_styles(
        &self,
        prompt: &PromptSource,
        count: usize,
        opts: &SampleOptions,
        rng: &mut impl Rng,
    ) -> Result<Matrix> {
        let z = self.sample_standardized(prompt, count, opts, rng)?;
        Ok(match &self.standardizer {
            Some(s) => s.invert(&z),
            None => z,
        })
    }
}
