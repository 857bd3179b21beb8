//! Stage orchestration shared by the command line tool and the end-to-end
//! tests: one configuration for the whole pipeline, a fixed on-disk layout,
//! a function per stage and the three ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autoenc::{NetConfig, TokenizerCheckpoint};
use crate::data::{ingest, toy_dataset, write_image_folder, DataStore, Dataset, IngestReport, DEFAULT_VAL_FRACTION};
use crate::error::{Error, Result};
use crate::eval::{dataset_moments, export_curves, decode_sequences, proxy_gfid, proxy_is, proxy_rfid, ResultRecord};
use crate::losses::{tap_variants, PerceptualSpec, ProxyCheckpoint, ProxyNet};
use crate::manifest::fingerprint;
use crate::quantizer::{codebook_usage, CodebookVariant};
use crate::rng;
use crate::training::{
    train_proxy, KMeansReinit, MetricsLog, ProxyTrainConfig, TokenizerTrainConfig, TokenizerTrainer,
    TransformerTrainConfig, TransformerTrainer,
};
use crate::transformers::{
    cached_corpus, sample, tokenize_dataset, ModelKind, SampleBatch, SamplerConfig, TokenCorpus,
    TransformerCheckpoint, TransformerConfig,
};
use crate::viz::{self, top1_accuracy, ComparisonReport};

mod stages;

pub use stages::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image folder to ingest; a procedural toy set is generated when absent.
    pub folder: Option<PathBuf>,
    /// `file,label` manifest; defaults to `labels.csv` inside the folder.
    pub labels: Option<PathBuf>,
    pub toy_images: usize,
    pub image_size: usize,
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            folder: None,
            labels: None,
            toy_images: 4000,
            image_size: 32,
            val_fraction: DEFAULT_VAL_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    /// Sequences drawn per transformer.
    pub count: usize,
    pub ar: SamplerConfig,
    pub nar: SamplerConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            count: crate::eval::DEFAULT_GFID_SAMPLES,
            ar: SamplerConfig::ar(0),
            nar: SamplerConfig::nar(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Also train AR and NAR transformers per row and report generation FID.
    pub generation: bool,
    /// Transformer iterations per row; the main `ar`/`nar` budgets when 0.
    pub transformer_iterations: u64,
    /// Samples per row for generation FID.
    pub samples: usize,
    pub alphas: Vec<f64>,
    /// Codebook projection width of the factorized, normalised variant.
    pub fn_proj_dim: usize,
    pub kmeans: KMeansReinit,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            generation: true,
            transformer_iterations: 0,
            samples: 512,
            alphas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            fn_proj_dim: 8,
            kmeans: KMeansReinit {
                every: 500,
                until: 5000,
                sample_images: 1024,
            },
        }
    }
}

/// Everything one pipeline run needs.
///
/// Stage seeds follow the top-level `seed`; each stage then draws from its
/// own labelled streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub net: NetConfig,
    pub proxy: ProxyTrainConfig,
    pub phase1: TokenizerTrainConfig,
    pub phase2: TokenizerTrainConfig,
    pub ar: TransformerTrainConfig,
    pub nar: TransformerTrainConfig,
    pub sample: SampleConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Named starting points for a configuration file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Quick,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "quick" => Ok(Preset::Quick),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk, quick)"))),
        }
    }
}

impl PipelineConfig {
    /// 32px toy set, 10k phase-1 iterations.
    pub fn desk() -> Self {
        // full scale: phase 1 for 500k iterations at batch 256, phase 2 for 100k
        let mut phase1 = TokenizerTrainConfig::phase1();
        phase1.run.iterations = 10_000;
        Self {
            seed: 0,
            data: DataConfig::default(),
            net: NetConfig::default(),
            proxy: ProxyTrainConfig::default(),
            phase1,
            phase2: TokenizerTrainConfig::phase2(),
            ar: TransformerTrainConfig::ar(),
            nar: TransformerTrainConfig::nar(),
            sample: SampleConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    /// 16px images and short runs; minutes rather than hours on one core.
    pub fn quick() -> Self {
        let mut c = Self::desk();
        c.data.toy_images = 2000;
        c.data.image_size = 16;
        c.net = NetConfig::quick();
        c.proxy.run.iterations = 300;
        c.phase1.run.iterations = 300;
        c.phase1.run.batch_size = 32;
        c.phase1.usage_every = 50;
        c.phase2.run.iterations = 150;
        c.phase2.run.batch_size = 32;
        c.phase2.usage_every = 50;
        let model = TransformerConfig {
            blocks: 2,
            heads: 4,
            dim: 64,
            hidden: 256,
            ..TransformerConfig::default()
        };
        for t in [&mut c.ar, &mut c.nar] {
            t.model = model.clone();
            t.run.iterations = 600;
            t.run.batch_size = 32;
        }
        c.ar.run.optim.schedule = crate::training::Schedule::Exponential {
            end_lr: 1.5e-5,
            start_iter: 100,
        };
        c.nar.run.optim.schedule = crate::training::Schedule::Linear {
            end_lr: 0.0,
            start_iter: 60,
        };
        c.sample.count = 256;
        c.ablation.samples = 256;
        c.ablation.kmeans = KMeansReinit {
            every: 50,
            until: 200,
            sample_images: 256,
        };
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Quick => Self::quick(),
        }
    }

    /// Copies the top-level seed into every stage.
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        for r in [
            &mut self.proxy.run,
            &mut self.phase1.run,
            &mut self.phase2.run,
            &mut self.ar.run,
            &mut self.nar.run,
        ] {
            r.seed = s;
        }
        self.sample.ar.seed = s;
        self.sample.nar.seed = s;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.proxy.net.validate()?;
        self.proxy.run.validate()?;
        self.phase1.validate()?;
        self.phase2.validate()?;
        self.ar.validate()?;
        self.nar.validate()?;
        if self.ar.kind != ModelKind::Ar || self.nar.kind != ModelKind::Nar {
            return Err(Error::Config("`ar` and `nar` sections must keep their kinds".into()));
        }
        if self.sample.ar.kind != ModelKind::Ar || self.sample.nar.kind != ModelKind::Nar {
            return Err(Error::Config("`sample.ar` and `sample.nar` must keep their kinds".into()));
        }
        let n = self.net.tokens_per_image();
        self.sample.ar.validate(n)?;
        self.sample.nar.validate(n)?;
        if self.sample.count == 0 {
            return Err(Error::Config("sample.count must be positive".into()));
        }
        if self.data.folder.is_none() && self.data.toy_images < 20 {
            return Err(Error::Config("the toy set needs at least 20 images".into()));
        }
        if self.data.image_size != self.net.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from net.image_size {}",
                self.data.image_size, self.net.image_size
            )));
        }
        if self.ablation.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("ablation alphas must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Parses a configuration file. Keys absent from the file keep the
    /// value of the preset named by a top-level `preset` key (default
    /// `desk`); unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let preset = match doc.remove("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Preset::Desk,
        };
        let mut base = to_table(&Self::preset(preset))?;
        merge(&mut base, doc);
        from_table(base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `dotted.key=value`; the value is read as a TOML literal and
    /// falls back to a plain string.
    pub fn apply_override(&self, spec: &str) -> Result<Self> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut table = to_table(self)?;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let mut cur = &mut table;
        for p in &parts[..parts.len() - 1] {
            let entry = cur
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
        }
        cur.insert(parts[parts.len() - 1].to_string(), value);
        from_table(table).map_err(|e| Error::Config(format!("override `{spec}`: {e}")))
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }
}

fn to_table(c: &PipelineConfig) -> Result<toml::Table> {
    toml::Table::try_from(c).map_err(|e| Error::Serde(e.to_string()))
}

fn from_table(t: toml::Table) -> Result<PipelineConfig> {
    toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Where each stage reads and writes under an output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn toy_images(&self) -> PathBuf {
        self.root.join("toy_images")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn proxy(&self) -> PathBuf {
        self.root.join("proxy")
    }

    pub fn phase1(&self) -> PathBuf {
        self.root.join("tokenizer").join("phase1")
    }

    pub fn phase2(&self) -> PathBuf {
        self.root.join("tokenizer").join("phase2")
    }

    pub fn corpus(&self, split: &str) -> PathBuf {
        self.root.join("tokens").join(format!("{split}.json"))
    }

    pub fn transformer(&self, kind: ModelKind) -> PathBuf {
        self.root.join("transformer").join(kind.to_string())
    }

    pub fn samples(&self, kind: ModelKind) -> PathBuf {
        self.root.join("samples").join(format!("{kind}.json"))
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("eval").join("results.jsonl")
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(format!("{name}.jsonl"))
    }

    pub fn ablation(&self, grid: &str) -> PathBuf {
        self.root.join("ablation").join(grid)
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
}

/// Ingests `cfg.data.folder`, or generates the toy set into the output root
/// and ingests that.
pub fn prepare_data(cfg: &PipelineConfig, layout: &Layout) -> Result<IngestReport> {
    let d = &cfg.data;
    let folder = match &d.folder {
        Some(f) => f.clone(),
        None => {
            let dir = layout.toy_images();
            let toy = toy_dataset(d.toy_images, d.image_size, rng::derive_seed(cfg.seed, "toy"))?;
            write_image_folder(&toy, &dir)?;
            dir
        }
    };
    let report = ingest(&folder, d.labels.as_deref(), d.image_size, d.val_fraction, cfg.seed, &layout.data())?;
    for (p, why) in &report.skipped {
        log::warn!("skipped {}: {why}", p.display());
    }
    Ok(report)
}

pub fn load_splits(layout: &Layout) -> Result<(Dataset, Dataset)> {
    Ok(DataStore::load(&layout.data())?.splits())
}

/// Proxy settings with the image size and class count taken from the data.
pub fn proxy_config_for(cfg: &PipelineConfig, data: &Dataset) -> ProxyTrainConfig {
    let mut p = cfg.proxy.clone();
    p.net.image_size = data.size();
    p.net.classes = data.classes();
    p
}

pub fn run_proxy(cfg: &PipelineConfig, train: &Dataset, val: &Dataset, log: &mut MetricsLog) -> Result<ProxyCheckpoint> {
    train_proxy(train, val, &proxy_config_for(cfg, train), log)
}

/// Phase-1 tokenizer training from a fresh initialisation.
pub fn run_phase1(
    net: &NetConfig,
    tcfg: &TokenizerTrainConfig,
    proxy: &ProxyNet,
    train: &Dataset,
    log: &mut MetricsLog,
) -> Result<TokenizerCheckpoint> {
    let ck = TokenizerCheckpoint::init(net, rng::derive_seed(tcfg.run.seed, "tokenizer-init"))?;
    let mut t = TokenizerTrainer::new(ck, proxy.clone(), train, tcfg.clone())?;
    t.run(log)?;
    Ok(t.into_checkpoint())
}

/// Phase-2 decoder finetuning of a phase-1 checkpoint.
pub fn run_phase2(
    parent: &TokenizerCheckpoint,
    tcfg: &TokenizerTrainConfig,
    proxy: &ProxyNet,
    train: &Dataset,
    log: &mut MetricsLog,
) -> Result<TokenizerCheckpoint> {
    let ck = parent.begin_phase2(rng::derive_seed(tcfg.run.seed, "attention-init"))?;
    let mut t = TokenizerTrainer::new(ck, proxy.clone(), train, tcfg.clone())?;
    t.run(log)?;
    let ck = t.into_checkpoint();
    ck.verify_freeze()?;
    Ok(ck)
}

/// Fraction of codes used over a split.
pub fn split_usage(ck: &mut TokenizerCheckpoint, data: &Dataset) -> Result<f64> {
    let corpus = tokenize_dataset(&ck.tokenizer()?, "", data)?;
    codebook_usage((0..corpus.len()).map(|i| corpus.sequence(i)), ck.config.codebook_size)
}

/// Token corpora of both splits, cached under the layout when given.
pub fn tokenize_splits(
    ck: &mut TokenizerCheckpoint,
    train: &Dataset,
    val: &Dataset,
    layout: Option<&Layout>,
) -> Result<(TokenCorpus, TokenCorpus)> {
    let tok = ck.tokenizer()?;
    let digest = ck.token_digest()?;
    match layout {
        Some(l) => Ok((
            cached_corpus(&l.corpus("train"), &tok, &digest, train)?,
            cached_corpus(&l.corpus("val"), &tok, &digest, val)?,
        )),
        None => Ok((tokenize_dataset(&tok, &digest, train)?, tokenize_dataset(&tok, &digest, val)?)),
    }
}

pub fn run_transformer(
    tcfg: &TransformerTrainConfig,
    train: &TokenCorpus,
    val: &TokenCorpus,
    log: &mut MetricsLog,
) -> Result<TransformerCheckpoint> {
    let mut t = TransformerTrainer::init(train, val, tcfg.clone())?;
    t.run(log)?;
    Ok(t.into_checkpoint())
}

/// Condition labels for `count` samples: classes in turn, or none for
/// unconditional models.
pub fn sample_labels(ck: &TransformerCheckpoint, count: usize) -> Option<Vec<u32>> {
    let c = ck.config.classes;
    (c > 0).then(|| (0..count).map(|i| (i % c) as u32).collect())
}

pub fn draw_samples(ck: &mut TransformerCheckpoint, sampler: &SamplerConfig, count: usize) -> Result<SampleBatch> {
    if sampler.kind != ck.kind {
        return Err(Error::Config(format!("{} sampler for a {} transformer", sampler.kind, ck.kind)));
    }
    let model = ck.model()?;
    let labels = sample_labels(ck, count);
    let seqs = sample(&model, count, labels.as_deref(), sampler)?;
    SampleBatch::new(seqs, labels, sampler, ck)
}

/// Teacher-forced top-1 accuracy of an AR model over a whole corpus.
pub fn corpus_top1(ck: &mut TransformerCheckpoint, corpus: &TokenCorpus, conditional: bool) -> Result<f64> {
    let model = ck.model()?;
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let (s, pred) = viz::predict_corpus(ck, &model, corpus, &idx, conditional)?;
    top1_accuracy(&s, &pred)
}

/// Renders the fixed comparison batch of the validation split.
pub fn visualize(
    tok_ck: &mut TokenizerCheckpoint,
    ar: &mut TransformerCheckpoint,
    val: &Dataset,
    conditional: bool,
    seed: u64,
    path: &Path,
) -> Result<ComparisonReport> {
    let idx = viz::comparison_indices(val.len(), seed);
    let x = val.batch(&idx, None, DType::F32)?;
    let labels: Vec<u32> = idx.iter().map(|&i| val.labels()[i]).collect();
    let tok = tok_ck.tokenizer()?;
    let model = ar.model()?;
    let digest = tok_ck.token_digest()?;
    let (rep, _) = viz::render_comparison(&x, conditional.then_some(&labels[..]), &tok, &digest, ar, &model, path)?;
    Ok(rep)
}

/// Metric values keyed by name, with the fingerprints of their inputs.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub values: Vec<(String, f64)>,
    pub fingerprints: BTreeMap<String, String>,
}

impl Evaluation {
    pub fn push(&mut self, name: impl Into<String>, v: f64) {
        self.values.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn records(&self, run_id: &str) -> Vec<ResultRecord> {
        self.values
            .iter()
            .map(|(m, v)| ResultRecord {
                run_id: run_id.to_string(),
                metric: m.clone(),
                value: *v,
                fingerprints: self.fingerprints.clone(),
            })
            .collect()
    }
}

/// Reconstruction FID and usage of each tokenizer on `val`, then
/// generation FID and IS of every sample batch decoded by every tokenizer.
pub fn evaluate(
    proxy: &ProxyNet,
    tokenizers: &mut [(&str, &mut TokenizerCheckpoint)],
    samples: &[(&str, &SampleBatch)],
    val: &Dataset,
) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    let real = dataset_moments(proxy, val)?;
    for (name, ck) in tokenizers.iter_mut() {
        let tok = ck.tokenizer()?;
        ev.fingerprints.insert(format!("tokenizer_{name}"), ck.decoder_digest()?);
        ev.push(format!("rfid_{name}"), proxy_rfid(proxy, &tok, val)?);
        ev.push(format!("usage_{name}"), split_usage(ck, val)?);
        let digest = ck.token_digest()?;
        for (sname, batch) in samples {
            if batch.tokenizer_digest != digest {
                return Err(Error::DigestMismatch {
                    what: format!("{sname} samples"),
                    expected: digest.clone(),
                    found: batch.tokenizer_digest.clone(),
                });
            }
            ev.fingerprints.insert(format!("samples_{sname}"), batch.transformer_digest.clone());
            let flat = batch.flat();
            ev.push(format!("gfid_{sname}_{name}"), proxy_gfid(proxy, &tok, &real, &flat)?);
            ev.push(format!("is_{sname}_{name}"), proxy_is(proxy, &decode_sequences(&tok, &flat)?)?);
        }
    }
    Ok(ev)
}

/// Which ablation grid to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Codebook regularisers against a plain baseline.
    Usage,
    /// Perceptual tap subsets.
    Semloss,
    /// Semantic ratio sweep.
    Alpha,
}

impl std::str::FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "usage" => Ok(Grid::Usage),
            "semloss" => Ok(Grid::Semloss),
            "alpha" => Ok(Grid::Alpha),
            other => Err(Error::Config(format!("unknown ablation `{other}` (usage, semloss, alpha)"))),
        }
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Grid::Usage => "usage",
            Grid::Semloss => "semloss",
            Grid::Alpha => "alpha",
        })
    }
}

/// One tokenizer variant of a grid.
#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub net: NetConfig,
    pub train: TokenizerTrainConfig,
}

/// Tokenizer variants of `grid`, each trained for the phase-1 budget.
///
/// The usage grid starts from a plain codebook without entropy term and a
/// shallow-tap perceptual loss, then adds one regulariser per row.
pub fn grid_variants(grid: Grid, cfg: &PipelineConfig) -> Vec<Variant> {
    let base = |name: &str| Variant {
        name: name.to_string(),
        net: cfg.net.clone(),
        train: cfg.phase1.clone(),
    };
    match grid {
        Grid::Usage => {
            let mut plain = base("baseline");
            plain.net.codebook = CodebookVariant::Plain;
            plain.train.loss.perceptual = PerceptualSpec::Ratio { alpha: 0.0 };
            plain.train.loss.gamma = 0.0;
            plain.train.kmeans = None;
            let mut fnorm = plain.clone();
            fnorm.name = "+fn".into();
            fnorm.net.codebook = CodebookVariant::FactorizedNormed {
                proj_dim: cfg.ablation.fn_proj_dim,
            };
            let mut km = plain.clone();
            km.name = "+kmeans".into();
            km.train.kmeans = Some(cfg.ablation.kmeans);
            let mut ent = plain.clone();
            ent.name = "+entropy".into();
            ent.train.loss.gamma = cfg.phase1.loss.gamma.max(crate::quantizer::DEFAULT_GAMMA);
            vec![plain, fnorm, km, ent]
        }
        Grid::Semloss => tap_variants()
            .into_iter()
            .map(|(name, taps)| {
                let mut v = base(name);
                v.train.loss.perceptual = PerceptualSpec::Taps { taps };
                v
            })
            .collect(),
        Grid::Alpha => cfg
            .ablation
            .alphas
            .iter()
            .map(|&a| {
                let mut v = base(&format!("alpha={a}"));
                v.train.loss.perceptual = PerceptualSpec::Ratio { alpha: a };
                v
            })
            .collect(),
    }
}

/// Metrics of one ablation row.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub usage: f64,
    pub rfid: f64,
    pub ar_val_loss: Option<f64>,
    pub ar_top1: Option<f64>,
    pub ar_gfid: Option<f64>,
    pub nar_gfid: Option<f64>,
    pub tokenizer_digest: String,
}

/// Trains one variant and measures it on the validation split.
pub fn run_variant(
    v: &Variant,
    cfg: &PipelineConfig,
    proxy: &ProxyNet,
    train: &Dataset,
    val: &Dataset,
    log: &mut MetricsLog,
) -> Result<AblationRow> {
    let mut ck = run_phase1(&v.net, &v.train, proxy, train, log)?;
    let tok = ck.tokenizer()?;
    let mut row = AblationRow {
        name: v.name.clone(),
        usage: split_usage(&mut ck, val)?,
        rfid: proxy_rfid(proxy, &tok, val)?,
        ar_val_loss: None,
        ar_top1: None,
        ar_gfid: None,
        nar_gfid: None,
        tokenizer_digest: ck.token_digest()?,
    };
    log.record(json!({"kind": "ablation_tokenizer", "variant": v.name, "usage": row.usage, "rfid": row.rfid}))?;
    if !cfg.ablation.generation {
        return Ok(row);
    }
    let (tc, vc) = tokenize_splits(&mut ck, train, val, None)?;
    let real = dataset_moments(proxy, val)?;
    for (tcfg, sampler) in [(&cfg.ar, &cfg.sample.ar), (&cfg.nar, &cfg.sample.nar)] {
        let mut tcfg = tcfg.clone();
        if cfg.ablation.transformer_iterations > 0 {
            tcfg.run.iterations = cfg.ablation.transformer_iterations;
        }
        let mut tlog = MetricsLog::memory();
        let mut t = TransformerTrainer::init(&tc, &vc, tcfg.clone())?;
        t.run(&mut tlog)?;
        let val_loss = t.validation_loss()?;
        let mut tck = t.into_checkpoint();
        for r in tlog.records() {
            let mut r = r.clone();
            r["variant"] = json!(v.name);
            log.record(r)?;
        }
        let batch = draw_samples(&mut tck, sampler, cfg.ablation.samples)?;
        let gfid = proxy_gfid(proxy, &tok, &real, &batch.flat())?;
        match tcfg.kind {
            ModelKind::Ar => {
                row.ar_val_loss = Some(val_loss);
                row.ar_top1 = Some(corpus_top1(&mut tck, &vc, tcfg.conditional)?);
                row.ar_gfid = Some(gfid);
            }
            ModelKind::Nar => row.nar_gfid = Some(gfid),
        }
    }
    Ok(row)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// Comma-separated table, one row per variant.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,usage,rfid,ar_val_loss,ar_top1,ar_gfid,nar_gfid\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.4},{:.4},{},{},{},{}",
            r.name,
            r.usage,
            r.rfid,
            cell(r.ar_val_loss),
            cell(r.ar_top1),
            cell(r.ar_gfid),
            cell(r.nar_gfid)
        );
    }
    s
}

/// Fixed-width text rendering of [`ablation_csv`].
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let csv = ablation_csv(rows);
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for l in &lines {
        let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(s, "{}", cells.join("  "));
    }
    s
}

/// Runs every variant of `grid` and writes `rows.csv` and `table.txt`
/// under the grid's directory.
pub fn run_ablation(
    grid: Grid,
    cfg: &PipelineConfig,
    proxy: &ProxyNet,
    train: &Dataset,
    val: &Dataset,
    layout: &Layout,
) -> Result<Vec<AblationRow>> {
    let dir = layout.ablation(&grid.to_string());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut log = MetricsLog::to_file(&layout.metrics(&format!("ablate-{grid}")))?;
    let mut rows = Vec::new();
    for v in grid_variants(grid, cfg) {
        log::info!("ablation {grid}: variant {}", v.name);
        rows.push(run_variant(&v, cfg, proxy, train, val, &mut log)?);
    }
    let csv = dir.join("rows.csv");
    std::fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let curves: Vec<(String, String)> = rows
        .iter()
        .map(|r| {
            let text: String = log
                .of_kind("val_loss")
                .filter(|v| v["model"] == "ar" && v["variant"] == r.name.as_str())
                .map(|v| format!("{v}\n"))
                .collect();
            (r.name.clone(), text)
        })
        .collect();
    let curve_path = dir.join("ar_val_curves.csv");
    std::fs::write(&curve_path, export_curves(&curves).to_csv()).map_err(|e| Error::io(&curve_path, e))?;
    let txt = dir.join("table.txt");
    std::fs::write(&txt, ablation_table(&rows)).map_err(|e| Error::io(&txt, e))?;
    Ok(rows)
}
