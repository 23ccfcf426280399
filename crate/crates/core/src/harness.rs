//! Stage orchestration: data preparation, VC training, diffusion training,
//! conversion and evaluation, all driven by one [`RunConfig`].

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use gradtape::{Adam, WeightAverage};
use ndarray::{Array2, Axis};
use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{derive_rng, generate_corpus, prompt_vocabulary, Manifest, Split, UtteranceRecord};
use crate::diffusion::{
    DiffusionConfig, DiffusionModel, PromptEmbeddingFile, PromptSource, SampleOptions, Standardizer, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsRecord};
use crate::model::{LossBreakdown, Synthesis, TrainingExample, VcConfig, VcModel};
use crate::style::StyleVector;
use crate::synthesis::MelFeature;
use crate::units::{extract_units, fit_kmeans_with, Codebook, FrameFeatures, KMeansOptions};
use crate::Matrix;

pub const CODEBOOK_FILE: &str = "codebook.bin";
pub const VC_CHECKPOINT: &str = "vc.ckpt";
pub const DIFFUSION_CHECKPOINT: &str = "diffusion.ckpt";
pub const VC_METRICS: &str = "vc_metrics.jsonl";
pub const DIFFUSION_METRICS: &str = "diffusion_metrics.jsonl";
const LOCK_FILE: &str = ".lock";

// Stream identifiers for seed derivation.
const STREAM_KMEANS: u64 = 0x6b6d;
const STREAM_VC_INIT: u64 = 0x7663;
const STREAM_VC_STEP: u64 = 0x7673_0000;
const STREAM_DIFF_INIT: u64 = 0x6466;
const STREAM_DIFF_TRAIN: u64 = 0x6474;
const STREAM_DIFF_EVAL: u64 = 0x6465;
const STREAM_CONVERT: u64 = 0x6376_0000;

/// Exclusive ownership of a run directory while training.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Data(format!(
                "{} is locked by another training process (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    let path = cfg.manifest_path();
    if !path.exists() {
        return Err(Error::Data(format!(
            "no corpus manifest at {}; run prepare-data first",
            path.display()
        )));
    }
    Manifest::load(&path)
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Manifest> {
    let manifest = generate_corpus(&cfg.corpus_config(), &cfg.data_root)?;
    log::info!(
        "wrote {} utterances to {}",
        manifest.records.len(),
        cfg.data_root.display()
    );
    Ok(manifest)
}

/// Fit the unit codebook on a seeded subsample of training frames.
pub fn fit_codebook(cfg: &RunConfig, features: &[FrameFeatures]) -> Result<Codebook> {
    let views: Vec<_> = features.iter().map(|f| f.data.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|_| Error::shape("feature widths differ"))?;
    let take = cfg.units.sample_frames.min(all.nrows());
    let mut rng = derive_rng(cfg.seed, STREAM_KMEANS);
    let mut idx = sample_indices(&mut rng, all.nrows(), take).into_vec();
    idx.sort_unstable();
    let subset = FrameFeatures {
        data: all.select(Axis(0), &idx),
        frame_hop_ms: features[0].frame_hop_ms,
    };
    let opts = KMeansOptions {
        k: cfg.units.k,
        seed: cfg.seed,
        max_iters: cfg.units.max_iters,
        restarts: cfg.units.restarts,
    };
    let fit = fit_kmeans_with(&[subset], &opts)?;
    if !fit.converged {
        log::warn!("k-means stopped after {} iterations without converging", opts.max_iters);
    }
    Ok(fit.codebook)
}

fn load_examples(manifest: &Manifest, records: &[&UtteranceRecord], codebook: &Codebook) -> Result<Vec<TrainingExample>> {
    records
        .iter()
        .map(|r| {
            let mel = manifest.load_mel(r)?;
            let units = extract_units(&manifest.load_features(r)?, codebook)?;
            TrainingExample::new(mel, units)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainVcOptions {
    pub resume: bool,
    /// Stop after this global step even if the configured total is larger.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct VcMetric {
    step: usize,
    #[serde(flatten)]
    loss: LossBreakdown,
    grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Global index of the first step run in this call, counted from 1.
    pub first_step: usize,
    pub losses: Vec<LossBreakdown>,
}

fn vc_meta(model: &VcModel, step: usize, hop_ms: f64) -> serde_json::Value {
    serde_json::json!({
        "step": step,
        "config": model.config,
        "num_bins": model.num_bins,
        "feature_dim": model.feature_dim,
        "hop_ms": hop_ms,
    })
}

fn save_vc(path: &Path, model: &VcModel, opt: &Adam, step: usize, hop_ms: f64) -> Result<()> {
    let mut ck = Checkpoint::new("vc", vc_meta(model, step, hop_ms));
    ck.insert_store("param/", &model.store);
    ck.insert_adam("adam/", &model.store, opt);
    ck.save(path)
}

/// Train the conversion model, optionally continuing from the run's
/// checkpoint.
pub fn train_vc(cfg: &RunConfig, opts: TrainVcOptions) -> Result<TrainReport> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let run_dir = &cfg.run_dir;
    let _lock = RunLock::acquire(run_dir)?;
    let records: Vec<&UtteranceRecord> = manifest.split(Split::Train).collect();
    if records.is_empty() {
        return Err(Error::Data("manifest has no training utterances".into()));
    }
    let codebook_path = run_dir.join(CODEBOOK_FILE);
    let ckpt_path = run_dir.join(VC_CHECKPOINT);
    let metrics_path = run_dir.join(VC_METRICS);
    if !opts.resume {
        let features = records
            .iter()
            .map(|r| manifest.load_features(r))
            .collect::<Result<Vec<_>>>()?;
        let codebook = fit_codebook(cfg, &features)?;
        codebook.save(&codebook_path)?;
        let _ = fs::remove_file(&metrics_path);
    }
    // Reload so training always sees the stored precision.
    let codebook = Codebook::load(&codebook_path)?;
    let examples = load_examples(&manifest, &records, &codebook)?;
    let hop_ms = examples[0].mel.hop_ms;
    let num_bins = examples[0].mel.num_bins();
    let mut model = VcModel::new(
        cfg.model.clone(),
        num_bins,
        codebook.feature_dim(),
        derive_rng_seed(cfg.seed, STREAM_VC_INIT),
    )?;
    let mut opt = Adam::new(&model.store, cfg.train_vc.lr).with_clip_norm(cfg.train_vc.clip_norm);
    let mut start = 0;
    if opts.resume {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.kind != "vc" {
            return Err(Error::Data(format!("{} is not a VC checkpoint", ckpt_path.display())));
        }
        let saved: VcConfig = ck.meta_as("config")?;
        if saved != cfg.model {
            return Err(Error::Config("model settings differ from the checkpoint being resumed".into()));
        }
        start = ck.meta_as("step")?;
        ck.restore_store("param/", &mut model.store)?;
        ck.restore_adam("adam/", &model.store, &mut opt, start as u64)?;
        log::info!("resuming VC training at step {}", start + 1);
    }
    let end = opts.stop_after.map_or(cfg.train_vc.steps, |s| s.min(cfg.train_vc.steps));
    let batch_size = cfg.train_vc.batch_size.min(examples.len());
    let mut losses = Vec::new();
    for step in start..end {
        let mut rng = derive_rng(cfg.seed, STREAM_VC_STEP + step as u64);
        let idx = sample_indices(&mut rng, examples.len(), batch_size);
        let batch: Vec<&TrainingExample> = idx.iter().map(|i| &examples[i]).collect();
        let (loss, grads) = model.batch_gradients(&batch, &cfg.loss, &mut rng).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("VC training aborted at step {}: {msg}", step + 1)),
            other => other,
        })?;
        let grad_norm = opt.step(&mut model.store, &grads);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "VC training aborted at step {}: gradient norm {grad_norm} (loss {loss:?})",
                step + 1
            )));
        }
        append_jsonl(
            &metrics_path,
            &VcMetric {
                step: step + 1,
                loss,
                grad_norm,
            },
        )?;
        if (step + 1) % 100 == 0 {
            log::info!("vc step {}: loss {:.4}", step + 1, loss.total);
        }
        losses.push(loss);
        if (step + 1) % cfg.train_vc.checkpoint_every == 0 || step + 1 == end {
            save_vc(&ckpt_path, &model, &opt, step + 1, hop_ms)?;
        }
    }
    Ok(TrainReport {
        first_step: start + 1,
        losses,
    })
}

fn derive_rng_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    derive_rng(seed, stream).next_u64()
}

/// A trained VC model with its codebook.
#[derive(Debug)]
pub struct LoadedVc {
    pub model: VcModel,
    pub codebook: Codebook,
    pub hop_ms: f64,
    pub step: usize,
}

pub fn load_vc(run_dir: &Path) -> Result<LoadedVc> {
    let path = run_dir.join(VC_CHECKPOINT);
    if !path.exists() {
        return Err(Error::Data(format!("no VC checkpoint at {}; run train-vc first", path.display())));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.kind != "vc" {
        return Err(Error::Data(format!("{} is not a VC checkpoint", path.display())));
    }
    let mut model = VcModel::new(ck.meta_as("config")?, ck.meta_as("num_bins")?, ck.meta_as("feature_dim")?, 0)?;
    ck.restore_store("param/", &mut model.store)?;
    Ok(LoadedVc {
        model,
        codebook: Codebook::load(&run_dir.join(CODEBOOK_FILE))?,
        hop_ms: ck.meta_as("hop_ms")?,
        step: ck.meta_as("step")?,
    })
}

/// Style vectors for a set of utterances from the frozen style encoder.
pub fn extract_styles(vc: &VcModel, manifest: &Manifest, records: &[&UtteranceRecord]) -> Result<Matrix> {
    let mut out = Array2::zeros((records.len(), vc.style_dim()));
    for (i, r) in records.iter().enumerate() {
        let v = vc.encode_style(&manifest.load_mel(r)?)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&v.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
struct DiffusionMetric {
    step: usize,
    train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct DiffusionReport {
    pub train_losses: Vec<f64>,
    /// `(step, loss)` on held-out pairs with fixed noise draws.
    pub heldout_losses: Vec<(usize, f64)>,
}

enum PromptTable {
    Builtin(Vocabulary),
    External(PromptEmbeddingFile, PathBuf),
}

impl PromptTable {
    fn source(&self, text: &str) -> Result<PromptSource> {
        match self {
            PromptTable::Builtin(v) => Ok(PromptSource::Builtin(v.ids(text)?)),
            PromptTable::External(f, _) => Ok(PromptSource::External(f.get(text)?)),
        }
    }
}

fn prompt_sources(table: &PromptTable, records: &[&UtteranceRecord]) -> Result<Vec<PromptSource>> {
    records
        .iter()
        .map(|r| {
            if r.prompt.trim().is_empty() {
                return Err(Error::Data(format!("utterance {} has no prompt annotation", r.id)));
            }
            table.source(&r.prompt)
        })
        .collect()
}

/// Train the prompt-to-style diffusion model on the frozen VC model's
/// style vectors.
pub fn train_diffusion(cfg: &RunConfig) -> Result<DiffusionReport> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let vc = load_vc(&cfg.run_dir)?;
    let _lock = RunLock::acquire(&cfg.run_dir)?;
    let train: Vec<&UtteranceRecord> = manifest.split(Split::Train).collect();
    let heldout: Vec<&UtteranceRecord> = manifest.split(Split::Heldout).collect();
    let mut dcfg = cfg.diffusion.clone();
    let table = match &cfg.train_diffusion.prompt_embeddings {
        Some(path) => {
            let file = PromptEmbeddingFile::load(path)?;
            dcfg.text_dim = file.text_dim();
            PromptTable::External(file, path.clone())
        }
        None => PromptTable::Builtin(Vocabulary::new(prompt_vocabulary())),
    };
    let train_prompts = prompt_sources(&table, &train)?;
    let heldout_prompts = prompt_sources(&table, &heldout)?;
    let raw = extract_styles(&vc.model, &manifest, &train)?;
    let standardizer = Standardizer::fit(&raw)?;
    let data = standardizer.apply(&raw);
    let heldout_data = standardizer.apply(&extract_styles(&vc.model, &manifest, &heldout)?);

    let vocab = match &table {
        PromptTable::Builtin(v) => v.clone(),
        PromptTable::External(..) => Vocabulary::new(Vec::<String>::new()),
    };
    let mut model = DiffusionModel::new(dcfg, vocab, vc.model.style_dim(), derive_rng_seed(cfg.seed, STREAM_DIFF_INIT))?;
    model.standardizer = Some(standardizer);
    let tc = &cfg.train_diffusion;
    let mut opt = Adam::new(&model.store, tc.lr).with_clip_norm(1.0);
    let mut avg = (tc.ema_decay > 0.0).then(|| WeightAverage::new(&model.store, tc.ema_decay));
    let mut rng = derive_rng(cfg.seed, STREAM_DIFF_TRAIN);
    let metrics_path = cfg.run_dir.join(DIFFUSION_METRICS);
    let _ = fs::remove_file(&metrics_path);
    let mut report = DiffusionReport {
        train_losses: Vec::with_capacity(tc.steps),
        heldout_losses: Vec::new(),
    };
    let eval_seed = derive_rng_seed(cfg.seed, STREAM_DIFF_EVAL);
    for step in 0..tc.steps {
        let idx: Vec<usize> = (0..tc.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..data.nrows()))
            .collect();
        let x0 = data.select(Axis(0), &idx);
        let batch: Vec<&PromptSource> = idx.iter().map(|&i| &train_prompts[i]).collect();
        let loss = model.train_step(&mut opt, &x0, &batch, &mut rng).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("diffusion training aborted at step {}: {msg}", step + 1)),
            other => other,
        })?;
        report.train_losses.push(loss);
        if let Some(a) = avg.as_mut() {
            a.update(&model.store);
        }
        let heldout_loss = if ((step + 1) % tc.eval_every == 0 || step + 1 == tc.steps) && !heldout.is_empty() {
            let l = with_averaged(&mut model, avg.as_mut(), |m| m.evaluate(&heldout_data, &heldout_prompts, eval_seed))?;
            report.heldout_losses.push((step + 1, l));
            log::info!("diffusion step {}: train {:.4} held-out {:.4}", step + 1, loss, l);
            Some(l)
        } else {
            None
        };
        append_jsonl(
            &metrics_path,
            &DiffusionMetric {
                step: step + 1,
                train_loss: loss,
                heldout_loss,
            },
        )?;
    }
    if let Some(a) = avg.as_mut() {
        a.swap(&mut model.store);
    }
    save_diffusion(&cfg.run_dir.join(DIFFUSION_CHECKPOINT), &model, &table)?;
    Ok(report)
}

/// Run `f` with the averaged weights swapped in, restoring the trained ones.
fn with_averaged<T>(
    model: &mut DiffusionModel,
    avg: Option<&mut WeightAverage>,
    f: impl FnOnce(&DiffusionModel) -> Result<T>,
) -> Result<T> {
    match avg {
        Some(a) => {
            a.swap(&mut model.store);
            let out = f(model);
            a.swap(&mut model.store);
            out
        }
        None => f(model),
    }
}

fn save_diffusion(path: &Path, model: &DiffusionModel, table: &PromptTable) -> Result<()> {
    let std = model.standardizer.as_ref().expect("standardizer fitted before saving");
    let prompt_file = match table {
        PromptTable::Builtin(_) => None,
        PromptTable::External(_, p) => Some(p.clone()),
    };
    let meta = serde_json::json!({
        "config": model.config,
        "vocabulary": model.encoder.vocab.words(),
        "style_dim": model.style_dim(),
        "standardize_mean": std.mean,
        "standardize_std": std.std,
        "prompt_embeddings": prompt_file,
    });
    let mut ck = Checkpoint::new("diffusion", meta);
    ck.insert_store("param/", &model.store);
    ck.save(path)
}

/// A trained diffusion model and how to turn prompt text into conditioning.
pub struct LoadedDiffusion {
    pub model: DiffusionModel,
    prompts: PromptTable,
}

impl std::fmt::Debug for LoadedDiffusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoadedDiffusion").field("model", &self.model).finish_non_exhaustive()
    }
}

impl LoadedDiffusion {
    pub fn prompt_source(&self, text: &str) -> Result<PromptSource> {
        self.prompts.source(text)
    }
}

/// Load the diffusion checkpoint; `prompt_embeddings` overrides the stored
/// path of an external embedding table.
pub fn load_diffusion(run_dir: &Path, prompt_embeddings: Option<&Path>) -> Result<LoadedDiffusion> {
    let path = run_dir.join(DIFFUSION_CHECKPOINT);
    if !path.exists() {
        return Err(Error::Data(format!(
            "no diffusion checkpoint at {}; run train-diffusion first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.kind != "diffusion" {
        return Err(Error::Data(format!("{} is not a diffusion checkpoint", path.display())));
    }
    let config: DiffusionConfig = ck.meta_as("config")?;
    let vocab = Vocabulary::from_word_list(ck.meta_as("vocabulary")?)?;
    let mut model = DiffusionModel::new(config, vocab.clone(), ck.meta_as("style_dim")?, 0)?;
    ck.restore_store("param/", &mut model.store)?;
    model.standardizer = Some(Standardizer {
        mean: ck.meta_as("standardize_mean")?,
        std: ck.meta_as("standardize_std")?,
    });
    let stored: Option<PathBuf> = ck.meta_as("prompt_embeddings")?;
    let prompts = match prompt_embeddings.map(Path::to_path_buf).or(stored) {
        Some(p) => PromptTable::External(PromptEmbeddingFile::load(&p)?, p),
        None => PromptTable::Builtin(vocab),
    };
    Ok(LoadedDiffusion { model, prompts })
}

/// Where the target style comes from.
#[derive(Debug, Clone)]
pub enum StyleSource {
    Prompt(String),
    Reference(PathBuf),
    Vector(StyleVector),
}

#[derive(Debug, Clone)]
pub struct ConversionRequest {
    pub source: PathBuf,
    pub style: StyleSource,
    pub output: PathBuf,
    pub sampling: SampleOptions,
    pub seed: u64,
}

/// Loaded models for the conversion path.
#[derive(Debug)]
pub struct Converter {
    pub vc: LoadedVc,
    pub diffusion: Option<LoadedDiffusion>,
}

impl Converter {
    pub fn load(run_dir: &Path, with_diffusion: bool, prompt_embeddings: Option<&Path>) -> Result<Self> {
        let vc = load_vc(run_dir)?;
        let diffusion = if with_diffusion {
            Some(load_diffusion(run_dir, prompt_embeddings)?)
        } else {
            None
        };
        Ok(Self { vc, diffusion })
    }

    /// Resolve the target style vector.
    pub fn style_vector(&self, style: &StyleSource, sampling: &SampleOptions, rng: &mut ChaCha8Rng) -> Result<StyleVector> {
        match style {
            StyleSource::Vector(v) => Ok(v.clone()),
            StyleSource::Reference(path) => self.vc.model.encode_style(&MelFeature::load(path)?),
            StyleSource::Prompt(text) => {
                let d = self
                    .diffusion
                    .as_ref()
                    .ok_or_else(|| Error::invalid("prompt conversion needs the diffusion checkpoint"))?;
                let prompt = d.prompt_source(text)?;
                let sample = d.model.sample_styles(&prompt, 1, sampling, rng)?;
                StyleVector::from_row(&sample)
            }
        }
    }

    /// Units to mel under a given style; shared by every style source.
    pub fn convert_features(&self, source: &FrameFeatures, style: &StyleVector, rng: &mut ChaCha8Rng) -> Result<Synthesis> {
        if source.num_frames() == 0 {
            return Err(Error::invalid("source utterance is empty"));
        }
        let units = extract_units(source, &self.vc.codebook)?;
        self.vc.model.synthesize(&units, style, self.vc.hop_ms, rng)
    }

    pub fn convert(&self, source: &FrameFeatures, style: &StyleSource, sampling: &SampleOptions, seed: u64) -> Result<Synthesis> {
        let mut rng = derive_rng(seed, STREAM_CONVERT);
        let v = self.style_vector(style, sampling, &mut rng)?;
        self.convert_features(source, &v, &mut rng)
    }

    pub fn run(&self, request: &ConversionRequest) -> Result<Synthesis> {
        let source = FrameFeatures::load(&request.source)?;
        let out = self.convert(&source, &request.style, &request.sampling, request.seed)?;
        if let Some(parent) = request.output.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        out.mel.save(&request.output)?;
        Ok(out)
    }
}

/// Convert every utterance of a split into `out_dir/<id>.bin`.
pub fn convert_split(
    cfg: &RunConfig,
    converter: &Converter,
    split: Split,
    style: &StyleSource,
    sampling: &SampleOptions,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let manifest = load_manifest(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    manifest
        .split(split)
        .enumerate()
        .map(|(i, r)| {
            let req = ConversionRequest {
                source: manifest.resolve(&r.feature_path),
                style: style.clone(),
                output: out_dir.join(format!("{}.bin", r.id)),
                sampling: *sampling,
                seed: seed.wrapping_add(i as u64),
            };
            converter.run(&req)?;
            Ok(req.output)
        })
        .collect()
}

/// Score converted mels in `converted_dir` against the corpus mels with the
/// same utterance id and write the report.
pub fn evaluate(cfg: &RunConfig, converted_dir: &Path, report: &Path) -> Result<Vec<MetricsRecord>> {
    let manifest = load_manifest(cfg)?;
    let mut records = Vec::new();
    for r in &manifest.records {
        let path = converted_dir.join(format!("{}.bin", r.id));
        if !path.exists() {
            continue;
        }
        let converted = MelFeature::load(&path)?;
        let reference = manifest.load_mel(r)?;
        let m = evaluation::score_pair(&r.id, &reference, &converted, &cfg.corpus.layout)?;
        let m = MetricsRecord {
            mcd_db: Some(evaluation::mcd_with(&reference, &converted, cfg.evaluation.cepstrum)?),
            ..m
        };
        records.push(m);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "no converted files in {} match corpus utterance ids",
            converted_dir.display()
        )));
    }
    evaluation::write_report(report, &records)?;
    Ok(records)
}
