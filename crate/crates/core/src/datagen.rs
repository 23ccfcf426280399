//! Synthetic corpus with known ground truth: phoneme-like prototype
//! sequences rendered under discrete speaking styles, with prompt text.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio;
use crate::synthesis::MelFeature;
use crate::units::FrameFeatures;
use crate::Matrix;

/// Layout of the synthetic mel: pitch bins carrying an energy bump at the
/// f0 bin, followed by content-dependent envelope bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelLayout {
    pub pitch_bins: usize,
    pub envelope_bins: usize,
    pub hz_min: f64,
    pub hz_per_bin: f64,
}

impl Default for MelLayout {
    fn default() -> Self {
        Self {
            pitch_bins: 20,
            envelope_bins: 12,
            hz_min: 60.0,
            hz_per_bin: 20.0,
        }
    }
}

impl MelLayout {
    pub fn num_bins(&self) -> usize {
        self.pitch_bins + self.envelope_bins
    }

    /// Fractional pitch bin of a frequency.
    pub fn hz_to_bin(&self, hz: f64) -> f64 {
        (hz - self.hz_min) / self.hz_per_bin
    }

    pub fn bin_to_hz(&self, bin: f64) -> f64 {
        self.hz_min + bin * self.hz_per_bin
    }

    pub fn max_hz(&self) -> f64 {
        self.bin_to_hz((self.pitch_bins - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch_bins < 2 || self.envelope_bins < 2 || self.hz_per_bin <= 0.0 || self.hz_min < 0.0 {
            return Err(Error::Config("invalid mel layout".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub name: String,
    pub f0_base: f64,
    pub f0_range: f64,
    /// Duration multiplier: 2.0 doubles every segment.
    pub rate: f64,
    /// Linear slope added across the envelope bins.
    pub tilt: f64,
}

impl StyleSpec {
    pub fn validate(&self, layout: &MelLayout) -> Result<()> {
        if !(self.f0_base > 0.0) {
            return Err(Error::invalid(format!("style {}: f0_base must be positive", self.name)));
        }
        if !(0.5..=2.0).contains(&self.rate) {
            return Err(Error::invalid(format!("style {}: rate must lie in [0.5, 2]", self.name)));
        }
        if !(self.f0_range >= 0.0) || !self.tilt.is_finite() {
            return Err(Error::invalid(format!("style {}: bad f0_range or tilt", self.name)));
        }
        if self.f0_base - self.f0_range < layout.hz_min || self.f0_base + self.f0_range > layout.max_hz() {
            return Err(Error::invalid(format!(
                "style {}: f0 span leaves the pitch bins ({}..{} Hz)",
                self.name,
                layout.hz_min,
                layout.max_hz()
            )));
        }
        Ok(())
    }
}

/// The four desk styles: low/high pitch crossed with slow/fast delivery.
pub fn default_styles() -> Vec<StyleSpec> {
    let s = |name: &str, f0_base, rate, tilt| StyleSpec {
        name: name.into(),
        f0_base,
        f0_range: 20.0,
        rate,
        tilt,
    };
    vec![
        s("low_slow", 140.0, 1.6, -0.3),
        s("low_fast", 140.0, 0.8, -0.1),
        s("high_slow", 300.0, 1.6, 0.1),
        s("high_fast", 300.0, 0.8, 0.3),
    ]
}

pub const LOW_PITCH: &[&str] = &["low", "deep"];
pub const HIGH_PITCH: &[&str] = &["high", "bright"];
pub const FAST_RATE: &[&str] = &["fast", "quick"];
pub const SLOW_RATE: &[&str] = &["slow", "leisurely"];

const PITCH_SPLIT_HZ: f64 = 200.0;

const TEMPLATES: &[&str] = &[
    "{p} {r}",
    "a {p} {r} voice",
    "{p} and {r} voice",
    "speak in a {p} {r} tone",
    "{r} speech with a {p} pitch",
];

fn pitch_words(style: &StyleSpec) -> &'static [&'static str] {
    if style.f0_base < PITCH_SPLIT_HZ {
        LOW_PITCH
    } else {
        HIGH_PITCH
    }
}

/// Rate is a duration multiplier, so values below 1 read as fast.
fn rate_words(style: &StyleSpec) -> &'static [&'static str] {
    if style.rate < 1.0 {
        FAST_RATE
    } else {
        SLOW_RATE
    }
}

/// A paraphrased description of `style`.
pub fn prompt_grammar(style: &StyleSpec, rng: &mut impl Rng) -> String {
    let template = TEMPLATES.choose(rng).expect("templates");
    let p = pitch_words(style).choose(rng).expect("pitch words");
    let r = rate_words(style).choose(rng).expect("rate words");
    template.replace("{p}", p).replace("{r}", r)
}

/// Every word the grammar can emit.
pub fn prompt_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| !w.starts_with('{'))
        .map(String::from)
        .collect();
    for set in [LOW_PITCH, HIGH_PITCH, FAST_RATE, SLOW_RATE] {
        words.extend(set.iter().map(|w| w.to_string()));
    }
    words.sort();
    words.dedup();
    words
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_utterances: usize,
    /// Trailing utterances kept out of training.
    pub held_out: usize,
    /// Set from the run seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
    pub num_phonemes: usize,
    pub feature_dim: usize,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_segment_frames: usize,
    pub max_segment_frames: usize,
    pub feature_noise: f64,
    pub mel_noise: f64,
    pub hop_ms: f64,
    pub layout: MelLayout,
    pub styles: Vec<StyleSpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_utterances: 2050,
            held_out: 50,
            seed: 7,
            num_phonemes: 64,
            feature_dim: 16,
            min_segments: 10,
            max_segments: 16,
            min_segment_frames: 3,
            max_segment_frames: 6,
            feature_noise: 0.05,
            mel_noise: 0.02,
            hop_ms: 10.0,
            layout: MelLayout::default(),
            styles: default_styles(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        if self.styles.len() < 2 {
            return Err(Error::Config("need at least two styles".into()));
        }
        for s in &self.styles {
            s.validate(&self.layout).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.num_utterances == 0 || self.held_out >= self.num_utterances {
            return Err(Error::Config("need at least one training utterance".into()));
        }
        if self.num_phonemes < 2 || self.feature_dim == 0 {
            return Err(Error::Config("need at least two phonemes and a feature dim".into()));
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return Err(Error::Config("bad segment count range".into()));
        }
        if self.min_segment_frames == 0 || self.min_segment_frames > self.max_segment_frames {
            return Err(Error::Config("bad segment length range".into()));
        }
        if self.feature_noise < 0.0 || self.mel_noise < 0.0 || self.hop_ms <= 0.0 {
            return Err(Error::Config("noise levels and hop must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.num_utterances - self.held_out
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, stream)`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream)))
}

/// Corpus-wide fixed tables: phoneme prototypes and envelope projection.
#[derive(Debug, Clone)]
pub struct Inventory {
    pub prototypes: Matrix,
    envelope: Matrix,
}

impl Inventory {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = derive_rng(cfg.seed, u64::MAX);
        let mut normal = |r, c| Array2::from_shape_fn((r, c), |_| StandardNormal.sample(&mut rng));
        let prototypes = normal(cfg.num_phonemes, cfg.feature_dim);
        let envelope = normal(cfg.feature_dim, cfg.layout.envelope_bins);
        Self { prototypes, envelope }
    }

    /// Envelope bins for a phoneme before style tilt.
    pub fn envelope_of(&self, phoneme: usize) -> Vec<f64> {
        let scale = 1.0 / (self.prototypes.ncols() as f64).sqrt();
        self.prototypes
            .row(phoneme)
            .dot(&self.envelope)
            .iter()
            .map(|v| 0.5 + 0.3 * (v * scale).tanh())
            .collect()
    }
}

/// Frames for one segment of `base` frames under a duration multiplier.
pub fn segment_frames(base: usize, rate: f64) -> usize {
    ((base as f64 * rate).round() as usize).max(1)
}

/// One rendered utterance held in memory.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub style: usize,
    pub prompt: String,
    pub phonemes: Vec<usize>,
    /// Frames per phoneme segment.
    pub durations: Vec<usize>,
    pub features: FrameFeatures,
    pub mel: MelFeature,
    pub f0: Vec<f64>,
}

impl Utterance {
    pub fn num_frames(&self) -> usize {
        self.f0.len()
    }
}

/// Render a phoneme sequence with base segment lengths under `style`.
pub fn render(
    cfg: &CorpusConfig,
    inventory: &Inventory,
    style: &StyleSpec,
    phonemes: &[usize],
    base_frames: &[usize],
    rng: &mut impl Rng,
) -> (Vec<usize>, FrameFeatures, MelFeature, Vec<f64>) {
    let durations: Vec<usize> = base_frames.iter().map(|&b| segment_frames(b, style.rate)).collect();
    let total: usize = durations.iter().sum();
    let layout = &cfg.layout;
    let cycles: f64 = rng.random_range(0.5..1.5);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut features = Matrix::zeros((total, cfg.feature_dim));
    let mut mel = Matrix::zeros((total, layout.num_bins()));
    let mut f0 = Vec::with_capacity(total);
    let mut frame = 0;
    for (&ph, &d) in phonemes.iter().zip(&durations) {
        let env = inventory.envelope_of(ph);
        for _ in 0..d {
            let pos = frame as f64 / total as f64;
            let hz = style.f0_base + style.f0_range * (std::f64::consts::TAU * cycles * pos + phase).sin();
            f0.push(hz);
            for c in 0..cfg.feature_dim {
                let n: f64 = StandardNormal.sample(rng);
                features[[frame, c]] = inventory.prototypes[[ph, c]] + cfg.feature_noise * n;
            }
            let center = layout.hz_to_bin(hz);
            for b in 0..layout.pitch_bins {
                let n: f64 = StandardNormal.sample(rng);
                let d = b as f64 - center;
                mel[[frame, b]] = (-0.5 * d * d).exp() + cfg.mel_noise * n;
            }
            let e_bins = layout.envelope_bins;
            for (e, base) in env.iter().enumerate() {
                let n: f64 = StandardNormal.sample(rng);
                let slope = style.tilt * (e as f64 / (e_bins - 1) as f64 - 0.5);
                mel[[frame, layout.pitch_bins + e]] = base + slope + cfg.mel_noise * n;
            }
            frame += 1;
        }
    }
    (
        durations,
        FrameFeatures {
            data: features,
            frame_hop_ms: cfg.hop_ms,
        },
        MelFeature {
            data: mel,
            hop_ms: cfg.hop_ms,
        },
        f0,
    )
}

/// Random phoneme sequence (no immediate repeats) and base segment lengths.
pub fn random_script(cfg: &CorpusConfig, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let mut phonemes: Vec<usize> = Vec::with_capacity(n);
    while phonemes.len() < n {
        let p = rng.random_range(0..cfg.num_phonemes);
        if phonemes.last() != Some(&p) {
            phonemes.push(p);
        }
    }
    let base = (0..n)
        .map(|_| rng.random_range(cfg.min_segment_frames..=cfg.max_segment_frames))
        .collect();
    (phonemes, base)
}

pub fn utterance_id(index: usize) -> String {
    format!("utt{index:05}")
}

/// Deterministic utterance `index`; styles cycle through the list.
pub fn generate_utterance(cfg: &CorpusConfig, inventory: &Inventory, index: usize) -> Utterance {
    let mut rng = derive_rng(cfg.seed, index as u64);
    let style_idx = index % cfg.styles.len();
    let style = &cfg.styles[style_idx];
    let (phonemes, base) = random_script(cfg, &mut rng);
    let prompt = prompt_grammar(style, &mut rng);
    let (durations, features, mel, f0) = render(cfg, inventory, style, &phonemes, &base, &mut rng);
    Utterance {
        id: utterance_id(index),
        style: style_idx,
        prompt,
        phonemes,
        durations,
        features,
        mel,
        f0,
    }
}

pub fn generate_in_memory(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let inventory = Inventory::new(cfg);
    Ok((0..cfg.num_utterances)
        .map(|i| generate_utterance(cfg, &inventory, i))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub mel_path: PathBuf,
    pub feature_path: PathBuf,
    pub f0_path: PathBuf,
    pub style: String,
    pub prompt: String,
    pub split: Split,
    pub num_frames: usize,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn path_in(root: &Path) -> PathBuf {
        root.join(MANIFEST_FILE)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("line {}: {e}", n + 1),
                })
            })
            .collect::<Result<Vec<UtteranceRecord>>>()?;
        if records.is_empty() {
            return Err(Error::Data(format!("{} lists no utterances", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, records })
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = Self::path_in(&self.root);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load_mel(&self, r: &UtteranceRecord) -> Result<MelFeature> {
        MelFeature::load(&self.resolve(&r.mel_path))
    }

    pub fn load_features(&self, r: &UtteranceRecord) -> Result<FrameFeatures> {
        FrameFeatures::load(&self.resolve(&r.feature_path))
    }

    pub fn load_f0(&self, r: &UtteranceRecord) -> Result<Vec<f64>> {
        Ok(featio::read_matrix(&self.resolve(&r.f0_path))?.data.iter().copied().collect())
    }
}

/// Write the corpus under `root` and return its manifest.
pub fn generate_corpus(cfg: &CorpusConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let inventory = Inventory::new(cfg);
    for sub in ["mel", "feat", "f0"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::with_capacity(cfg.num_utterances);
    for i in 0..cfg.num_utterances {
        let u = generate_utterance(cfg, &inventory, i);
        let rec = UtteranceRecord {
            mel_path: PathBuf::from("mel").join(format!("{}.bin", u.id)),
            feature_path: PathBuf::from("feat").join(format!("{}.bin", u.id)),
            f0_path: PathBuf::from("f0").join(format!("{}.bin", u.id)),
            style: cfg.styles[u.style].name.clone(),
            prompt: u.prompt.clone(),
            split: if i < cfg.num_train() { Split::Train } else { Split::Heldout },
            num_frames: u.num_frames(),
            id: u.id,
        };
        u.mel.save(&root.join(&rec.mel_path))?;
        u.features.save(&root.join(&rec.feature_path))?;
        let f0 = Array2::from_shape_vec((u.f0.len(), 1), u.f0).expect("column");
        featio::write_matrix(&root.join(&rec.f0_path), &f0, cfg.hop_ms)?;
        records.push(rec);
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.save()?;
    Ok(manifest)
}
