//! On-disk stages: each reads its inputs from a [`Layout`], writes its
//! outputs there and reports both for the run manifest.

use std::path::{Path, PathBuf};

use candle_core::Tensor;

use super::*;
use crate::autoenc::Phase;
use crate::data::save_png;
use crate::eval::{append_result, export_curves};
use crate::manifest::{file_digest, sha256_hex, Manifest};
use crate::viz::compose_grid;

/// What one stage consumed and produced.
#[derive(Debug, Clone, Default)]
pub struct StageRun {
    pub name: String,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub summary: Vec<(String, String)>,
}

impl StageRun {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            ..Self::default()
        }
    }

    fn input(&mut self, k: &str, p: PathBuf) -> &mut Self {
        self.inputs.push((k.to_string(), p));
        self
    }

    fn output(&mut self, k: &str, p: PathBuf) -> &mut Self {
        self.outputs.push((k.to_string(), p));
        self
    }

    fn note(&mut self, k: &str, v: impl ToString) -> &mut Self {
        self.summary.push((k.to_string(), v.to_string()));
        self
    }
}

/// SHA-256 of a file, or of the sorted `(relative path, digest)` list of a
/// directory tree.
pub fn path_digest(p: &Path) -> Result<String> {
    if p.is_file() {
        return file_digest(p);
    }
    if !p.is_dir() {
        return Err(Error::Missing(p.to_path_buf()));
    }
    let mut files = Vec::new();
    collect_files(p, p, &mut files)?;
    files.sort();
    let mut text = String::new();
    for rel in files {
        let d = file_digest(&p.join(&rel))?;
        text.push_str(&format!("{}  {d}\n", rel.display()));
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap().to_path_buf());
        }
    }
    Ok(())
}

/// Writes `runs/<stage>.txt` (inputs and outputs with digests) and the
/// resolved configuration next to it.
pub fn write_run_manifest(layout: &Layout, cfg: &PipelineConfig, run: &StageRun) -> Result<PathBuf> {
    let dir = layout.runs();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join(format!("{}.config.toml", run.name));
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    let mut m = Manifest::new();
    m.set("stage", &run.name)
        .set("seed", cfg.seed)
        .set("config", cfg_path.display())
        .set("config_fingerprint", cfg.fingerprint()?)
        .set("version", env!("CARGO_PKG_VERSION"));
    for (k, p) in &run.inputs {
        m.set(&format!("input.{k}"), format!("{} {}", path_digest(p)?, p.display()));
    }
    for (k, p) in &run.outputs {
        m.set(&format!("output.{k}"), format!("{} {}", path_digest(p)?, p.display()));
    }
    for (k, v) in &run.summary {
        m.set(&format!("summary.{k}"), v);
    }
    let path = dir.join(format!("{}.txt", run.name));
    m.write(&path)?;
    Ok(path)
}

/// Fresh metrics file for a stage; earlier runs of the same stage are
/// replaced.
fn stage_log(layout: &Layout, name: &str) -> Result<MetricsLog> {
    let p = layout.metrics(name);
    if p.exists() {
        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    MetricsLog::to_file(&p)
}

fn load_proxy(layout: &Layout) -> Result<ProxyNet> {
    ProxyCheckpoint::load(&layout.proxy())?.frozen_network()
}

/// The finetuned tokenizer when present, the phase-1 one otherwise.
pub fn final_tokenizer(layout: &Layout) -> Result<(PathBuf, TokenizerCheckpoint)> {
    let p2 = layout.phase2();
    if p2.join("manifest.txt").exists() {
        return Ok((p2.clone(), TokenizerCheckpoint::load(&p2)?));
    }
    let p1 = layout.phase1();
    Ok((p1.clone(), TokenizerCheckpoint::load(&p1)?))
}

pub fn stage_ingest(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRun> {
    let mut run = StageRun::new("ingest");
    if let Some(f) = &cfg.data.folder {
        run.input("folder", f.clone());
    }
    let rep = prepare_data(cfg, layout)?;
    if cfg.data.folder.is_none() {
        run.output("toy_images", layout.toy_images());
    }
    run.output("data", layout.data())
        .note("images", rep.images)
        .note("skipped", rep.skipped.len())
        .note("train", rep.train)
        .note("val", rep.val)
        .note("train_digest", rep.train_digest)
        .note("val_digest", rep.val_digest);
    Ok(run)
}

pub fn stage_proxy(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRun> {
    let mut run = StageRun::new("train-proxy");
    let (train, val) = load_splits(layout)?;
    let mut log = stage_log(layout, "proxy")?;
    let ck = run_proxy(cfg, &train, &val, &mut log)?;
    ck.save(&layout.proxy())?;
    run.input("data", layout.data())
        .output("proxy", layout.proxy())
        .output("metrics", layout.metrics("proxy"))
        .note("accuracy", format!("{:.4}", ck.accuracy))
        .note("frozen", ck.frozen);
    Ok(run)
}

pub fn stage_phase1(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRun> {
    let mut run = StageRun::new("train-tokenizer");
    let (train, val) = load_splits(layout)?;
    let proxy = load_proxy(layout)?;
    let mut log = stage_log(layout, "phase1")?;
    let mut ck = run_phase1(&cfg.net, &cfg.phase1, &proxy, &train, &mut log)?;
    ck.save(&layout.phase1())?;
    let usage = split_usage(&mut ck, &val)?;
    run.input("data", layout.data())
        .input("proxy", layout.proxy())
        .output("tokenizer", layout.phase1())
        .output("metrics", layout.metrics("phase1"))
        .note("val_usage", format!("{usage:.4}"))
        .note("token_digest", ck.token_digest()?);
    Ok(run)
}

pub fn stage_phase2(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRun> {
    let mut run = StageRun::new("finetune-decoder");
    let (train, _) = load_splits(layout)?;
    let proxy = load_proxy(layout)?;
    let parent = TokenizerCheckpoint::load(&layout.phase1())?;
    if parent.phase != Phase::Phase1 {
        return Err(Error::Contract(format!("{} is not a phase-1 tokenizer", layout.phase1().display())));
    }
    let mut log = stage_log(layout, "phase2")?;
    let ck = run_phase2(&parent, &cfg.phase2, &proxy, &train, &mut log)?;
    ck.save(&layout.phase2())?;
    run.input("data", layout.data())
        .input("proxy", layout.proxy())
        .input("parent", layout.phase1())
        .output("tokenizer", layout.phase2())
        .output("metrics", layout.metrics("phase2"))
        .note("encoder_digest", ck.encoder_digest()?)
        .note("codebook_digest", ck.codebook_digest()?);
    Ok(run)
}

fn transformer_cfg(cfg: &PipelineConfig, kind: ModelKind) -> &TransformerTrainConfig {
    match kind {
        ModelKind::Ar => &cfg.ar,
        ModelKind::Nar => &cfg.nar,
    }
}

fn sampler_cfg(cfg: &PipelineConfig, kind: ModelKind) -> &SamplerConfig {
    match kind {
        ModelKind::Ar => &cfg.sample.ar,
        ModelKind::Nar => &cfg.sample.nar,
    }
}

pub fn stage_transformer(cfg: &PipelineConfig, layout: &Layout, kind: ModelKind) -> Result<StageRun> {
    let mut run = StageRun::new(&format!("train-transformer-{kind}"));
    let (train, val) = load_splits(layout)?;
    let mut tok = TokenizerCheckpoint::load(&layout.phase1())?;
    let (tc, vc) = tokenize_splits(&mut tok, &train, &val, Some(layout))?;
    let name = format!("{kind}");
    let mut log = stage_log(layout, &name)?;
    let ck = run_transformer(transformer_cfg(cfg, kind), &tc, &vc, &mut log)?;
    ck.save(&layout.transformer(kind))?;
    let last = log.of_kind("val_loss").last().and_then(|v| v["val_loss"].as_f64());
    run.input("tokenizer", layout.phase1())
        .input("tokens_train", layout.corpus("train"))
        .input("tokens_val", layout.corpus("val"))
        .output("transformer", layout.transformer(kind))
        .output("metrics", layout.metrics(&name))
        .note("final_val_loss", last.map_or("-".into(), |v| format!("{v:.4}")));
    Ok(run)
}

/// Decodes the first `rows * cols` sequences into a grid image.
fn sample_sheet(tok: &crate::autoenc::Tokenizer, batch: &SampleBatch, path: &Path) -> Result<()> {
    let rows = 8.min(batch.sequences.len());
    let cols = (batch.sequences.len() / rows).min(8);
    let flat: Vec<u32> = batch.sequences[..rows * cols].iter().flatten().copied().collect();
    let images = decode_sequences(tok, &flat)?;
    let columns: Vec<Tensor> = (0..cols)
        .map(|c| images.narrow(0, c * rows, rows))
        .collect::<candle_core::Result<_>>()?;
    let grid = compose_grid(&columns)?;
    save_png(&grid.pixels, grid.width, grid.height, path)
}

pub fn stage_sample(cfg: &PipelineConfig, layout: &Layout, kind: ModelKind) -> Result<StageRun> {
    let mut run = StageRun::new(&format!("sample-{kind}"));
    let mut ck = TransformerCheckpoint::load(&layout.transformer(kind))?;
    let batch = draw_samples(&mut ck, sampler_cfg(cfg, kind), cfg.sample.count)?;
    let path = layout.samples(kind);
    batch.save(&path)?;
    let (tok_dir, mut tok_ck) = final_tokenizer(layout)?;
    ck.check_tokenizer(&tok_ck.token_digest()?, tok_ck.config.codebook_size)?;
    let sheet = path.with_extension("png");
    sample_sheet(&tok_ck.tokenizer()?, &batch, &sheet)?;
    run.input("transformer", layout.transformer(kind))
        .input("tokenizer", tok_dir)
        .output("samples", path)
        .output("sheet", sheet)
        .note("count", batch.sequences.len());
    Ok(run)
}

pub fn stage_visualize(cfg: &PipelineConfig, layout: &Layout) -> Result<StageRun> {
    let mut run = StageRun::new("visualize");
    let (_, val) = load_splits(layout)?;
    let (tok_dir, mut tok) = final_tokenizer(layout)?;
    let mut ar = TransformerCheckpoint::load(&layout.transformer(ModelKind::Ar))?;
    let path = layout.viz().join("comparison.png");
    let rep = visualize(&mut tok, &mut ar, &val, cfg.ar.conditional, cfg.seed, &path)?;
    run.input("data", layout.data())
        .input("tokenizer", tok_dir)
        .input("transformer", layout.transformer(ModelKind::Ar))
        .output("grid", path.clone())
        .output("report", path.with_extension("json"))
        .note("mean_top1", format!("{:.4}", rep.mean_accuracy));
    Ok(run)
}

/// Metrics of every tokenizer and sample batch present, appended to the
/// results ledger, plus the validation-loss curves of both transformers.
pub fn stage_evaluate(cfg: &PipelineConfig, layout: &Layout) -> Result<(StageRun, Evaluation)> {
    let mut run = StageRun::new("evaluate");
    let (_, val) = load_splits(layout)?;
    let proxy = load_proxy(layout)?;
    run.input("data", layout.data()).input("proxy", layout.proxy());
    let mut p1 = TokenizerCheckpoint::load(&layout.phase1())?;
    run.input("phase1", layout.phase1());
    let mut p2 = if layout.phase2().join("manifest.txt").exists() {
        run.input("phase2", layout.phase2());
        Some(TokenizerCheckpoint::load(&layout.phase2())?)
    } else {
        None
    };
    let mut batches = Vec::new();
    for kind in [ModelKind::Ar, ModelKind::Nar] {
        let p = layout.samples(kind);
        if p.exists() {
            run.input(&format!("samples_{kind}"), p.clone());
            batches.push((kind.to_string(), SampleBatch::load(&p)?));
        }
    }
    let refs: Vec<(&str, &SampleBatch)> = batches.iter().map(|(n, b)| (n.as_str(), b)).collect();
    let mut toks: Vec<(&str, &mut TokenizerCheckpoint)> = vec![("phase1", &mut p1)];
    if let Some(p) = p2.as_mut() {
        toks.push(("phase2", p));
    }
    let mut ev = evaluate(&proxy, &mut toks, &refs, &val)?;
    ev.fingerprints.insert("config".into(), cfg.fingerprint()?);
    let results = layout.results();
    for r in ev.records(&format!("seed{}", cfg.seed)) {
        append_result(&results, &r)?;
    }
    let mut logs = Vec::new();
    for kind in [ModelKind::Ar, ModelKind::Nar] {
        let p = layout.metrics(&kind.to_string());
        if p.exists() {
            logs.push((kind.to_string(), std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?));
        }
    }
    let curves = layout.root.join("eval").join("val_loss_curves.csv");
    std::fs::write(&curves, export_curves(&logs).to_csv()).map_err(|e| Error::io(&curves, e))?;
    run.output("results", results).output("curves", curves);
    for (k, v) in &ev.values {
        run.note(k, format!("{v:.4}"));
    }
    Ok((run, ev))
}

pub fn stage_ablate(cfg: &PipelineConfig, layout: &Layout, grid: Grid) -> Result<(StageRun, Vec<AblationRow>)> {
    let mut run = StageRun::new(&format!("ablate-{grid}"));
    let (train, val) = load_splits(layout)?;
    let proxy = load_proxy(layout)?;
    let rows = run_ablation(grid, cfg, &proxy, &train, &val, layout)?;
    run.input("data", layout.data())
        .input("proxy", layout.proxy())
        .output("table", layout.ablation(&grid.to_string()))
        .output("metrics", layout.metrics(&format!("ablate-{grid}")));
    Ok((run, rows))
}

/// Every stage in order, writing a run manifest after each.
pub fn run_all(cfg: &PipelineConfig, layout: &Layout) -> Result<Vec<StageRun>> {
    let mut runs = Vec::new();
    let mut record = |r: StageRun| -> Result<()> {
        log::info!("stage {} done", r.name);
        write_run_manifest(layout, cfg, &r)?;
        runs.push(r);
        Ok(())
    };
    record(stage_ingest(cfg, layout)?)?;
    record(stage_proxy(cfg, layout)?)?;
    record(stage_phase1(cfg, layout)?)?;
    record(stage_phase2(cfg, layout)?)?;
    for kind in [ModelKind::Ar, ModelKind::Nar] {
        record(stage_transformer(cfg, layout, kind)?)?;
    }
    for kind in [ModelKind::Ar, ModelKind::Nar] {
        record(stage_sample(cfg, layout, kind)?)?;
    }
    record(stage_visualize(cfg, layout)?)?;
    record(stage_evaluate(cfg, layout)?.0)?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/x.txt"), "1").unwrap();
        std::fs::write(dir.path().join("y.txt"), "2").unwrap();
        let d1 = path_digest(dir.path()).unwrap();
        assert_eq!(d1, path_digest(dir.path()).unwrap());
        std::fs::write(dir.path().join("a/x.txt"), "3").unwrap();
        assert_ne!(d1, path_digest(dir.path()).unwrap());
        assert!(path_digest(&dir.path().join("nope")).is_err());
    }

    #[test]
    fn stages_refuse_missing_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = PipelineConfig::quick();
        assert!(matches!(stage_proxy(&cfg, &layout), Err(Error::Missing(_))));
    }
}
