//! Teacher-forced AR diagnostics: one-pass top-1 prediction of every token
//! of a ground-truth sequence, and side-by-side renders of
//! `[input | reconstruction | decoded prediction]`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoenc::Tokenizer;
use crate::data::save_png;
use crate::error::{Error, Result};
use crate::rng;
use crate::transformers::{TokenCorpus, Transformer, TransformerCheckpoint};

/// Images per comparison render.
pub const COMPARISON_BATCH: usize = 8;
/// Pixels between grid cells.
pub const GRID_PAD: usize = 2;

/// Fraction of positions where `a` and `b` agree.
pub fn top1_accuracy(a: &[u32], b: &[u32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("sequences of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("accuracy of empty sequences".into()));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64)
}

/// Top-1 predictions for every position of `batch` ground-truth sequences,
/// from a single causal forward pass.
pub fn teacher_forced_predict(model: &Transformer, seqs: &[u32], labels: Option<&[u32]>) -> Result<Vec<u32>> {
    let n = model.config.seq_len;
    if seqs.is_empty() || seqs.len() % n != 0 {
        return Err(Error::Shape(format!("{} tokens are not whole {n}-token sequences", seqs.len())));
    }
    let batch = seqs.len() / n;
    let cond = model.conditions(batch, labels)?;
    let logits = model.ar_teacher_forced(seqs, batch, &cond, None)?;
    Ok(logits.argmax(2)?.flatten_all()?.to_vec1::<u32>()?)
}

/// [`teacher_forced_predict`] on corpus rows, after checking the
/// transformer was trained on this corpus's tokenizer.
pub fn predict_corpus(
    ck: &TransformerCheckpoint,
    model: &Transformer,
    corpus: &TokenCorpus,
    idx: &[usize],
    conditional: bool,
) -> Result<(Vec<u32>, Vec<u32>)> {
    ck.check_tokenizer(&corpus.tokenizer_digest, corpus.vocab)?;
    let (seqs, labels) = corpus.gather(idx);
    let mut pred = Vec::with_capacity(seqs.len());
    let n = corpus.seq_len;
    for (chunk, lab) in seqs.chunks(64 * n).zip(labels.chunks(64)) {
        pred.extend(teacher_forced_predict(model, chunk, conditional.then_some(lab))?);
    }
    Ok((seqs, pred))
}

/// Seeded choice of the validation images shown in every render, so grids
/// of different tokenizers line up row by row.
pub fn comparison_indices(n_val: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n_val).collect();
    idx.shuffle(&mut rng::stream(seed, "comparison"));
    idx.truncate(COMPARISON_BATCH.min(n_val));
    idx
}

/// Channel-first RGB canvas in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub pixels: Vec<f32>,
    pub width: usize,
    pub height: usize,
}

impl Grid {
    /// Pixel `(c, y, x)`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }
}

/// Lays out `columns` (each `(rows, 3, s, s)`) side by side with white
/// padding between cells and around the border.
pub fn compose_grid(columns: &[Tensor]) -> Result<Grid> {
    let first = columns.first().ok_or_else(|| Error::Contract("grid without columns".into()))?;
    let (rows, c, s, s2) = first.dims4()?;
    if c != 3 || s != s2 {
        return Err(Error::Shape(format!("grid cells must be square RGB, got {:?}", first.dims())));
    }
    let cols: Vec<Vec<f32>> = columns
        .iter()
        .map(|t| {
            if t.dims() != first.dims() {
                return Err(Error::Shape(format!("column {:?} vs {:?}", t.dims(), first.dims())));
            }
            Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
        })
        .collect::<Result<_>>()?;
    let width = columns.len() * s + (columns.len() + 1) * GRID_PAD;
    let height = rows * s + (rows + 1) * GRID_PAD;
    let mut pixels = vec![1.0f32; 3 * width * height];
    for (j, col) in cols.iter().enumerate() {
        let x0 = GRID_PAD + j * (s + GRID_PAD);
        for r in 0..rows {
            let y0 = GRID_PAD + r * (s + GRID_PAD);
            for ch in 0..3 {
                for y in 0..s {
                    let src = ((r * 3 + ch) * s + y) * s;
                    let dst = (ch * height + y0 + y) * width + x0;
                    pixels[dst..dst + s].copy_from_slice(&col[src..src + s]);
                }
            }
        }
    }
    Ok(Grid { pixels, width, height })
}

/// Top-left corner of cell `(row, column)` for images of side `size`.
pub fn cell_origin(row: usize, column: usize, size: usize) -> (usize, usize) {
    (GRID_PAD + row * (size + GRID_PAD), GRID_PAD + column * (size + GRID_PAD))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub image: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Teacher-forced top-1 token accuracy of each row.
    pub accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub transformer_digest: String,
    pub tokenizer_digest: String,
}

/// Renders `[x | decode(s) | decode(s')]` for a batch and writes the PNG
/// plus a JSON sidecar with per-row accuracies.
#[allow(clippy::too_many_arguments)]
pub fn render_comparison(
    x: &Tensor,
    labels: Option<&[u32]>,
    tok: &Tokenizer,
    tokenizer_digest: &str,
    ck: &TransformerCheckpoint,
    model: &Transformer,
    path: &Path,
) -> Result<(ComparisonReport, Grid)> {
    ck.check_tokenizer(tokenizer_digest, tok.config.codebook_size)?;
    let q = tok.tokens(x)?;
    let s = q.indices().to_vec();
    let s_pred = teacher_forced_predict(model, &s, labels)?;
    let recon = tok.decode(&q)?;
    let pred = tok.decode_tokens(&s_pred)?;
    let grid = compose_grid(&[x.clone(), recon, pred])?;
    let n = model.config.seq_len;
    let accuracy = s
        .chunks(n)
        .zip(s_pred.chunks(n))
        .map(|(a, b)| top1_accuracy(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mean_accuracy = top1_accuracy(&s, &s_pred)?;
    save_png(&grid.pixels, grid.width, grid.height, path)?;
    let report = ComparisonReport {
        image: path.to_path_buf(),
        width: grid.width,
        height: grid.height,
        accuracy,
        mean_accuracy,
        transformer_digest: ck.digest()?,
        tokenizer_digest: tokenizer_digest.to_string(),
    };
    let side = path.with_extension("json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok((report, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoenc::{NetConfig, TokenizerCheckpoint};
    use crate::data::toy_dataset;
    use crate::transformers::{ModelKind, TransformerConfig};

    #[test]
    fn accuracy_cases() {
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 4]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&[1, 2, 3, 4], &[1, 2, 0, 0]).unwrap(), 0.5);
        assert!(top1_accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn comparison_indices_are_seeded() {
        assert_eq!(comparison_indices(100, 3), comparison_indices(100, 3));
        assert_ne!(comparison_indices(100, 3), comparison_indices(100, 4));
        assert_eq!(comparison_indices(5, 3).len(), 5);
    }

    #[test]
    fn render_layout_and_middle_column() {
        let cfg = NetConfig::quick();
        let mut tck = TokenizerCheckpoint::init(&cfg, 1).unwrap();
        let tok = tck.tokenizer().unwrap();
        let digest = tck.token_digest().unwrap();
        let tcfg = TransformerConfig {
            blocks: 1,
            heads: 2,
            dim: 16,
            hidden: 16,
            vocab: cfg.codebook_size,
            seq_len: cfg.tokens_per_image(),
            ..TransformerConfig::default()
        };
        let mut ck = TransformerCheckpoint::init(&tcfg, ModelKind::Ar, &digest, 2).unwrap();
        let model = ck.model().unwrap();
        let data = toy_dataset(3, cfg.image_size, 1).unwrap();
        let x = data.all(DType::F32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let (rep, grid) = render_comparison(&x, None, &tok, &digest, &ck, &model, &path).unwrap();
        let s = cfg.image_size;
        assert_eq!(rep.width, 3 * s + 4 * GRID_PAD);
        assert_eq!(rep.height, 3 * s + 4 * GRID_PAD);
        assert!(path.exists() && path.with_extension("json").exists());
        let img = image::open(&path).unwrap();
        assert_eq!((img.width() as usize, img.height() as usize), (rep.width, rep.height));
        let recon = tok.decode(&tok.tokens(&x).unwrap()).unwrap();
        for r in 0..3 {
            let (y0, x0) = cell_origin(r, 1, s);
            let cell = recon.get(r).unwrap().to_vec3::<f32>().unwrap();
            for c in 0..3 {
                for y in 0..s {
                    for xx in 0..s {
                        assert_eq!(grid.at(c, y0 + y, x0 + xx), cell[c][y][xx]);
                    }
                }
            }
        }
        let s_tok = tok.tokens(&x).unwrap().indices().to_vec();
        let pred = teacher_forced_predict(&model, &s_tok, None).unwrap();
        assert!(pred.iter().all(|&t| (t as usize) < cfg.codebook_size));
        assert!((rep.mean_accuracy - top1_accuracy(&s_tok, &pred).unwrap()).abs() < 1e-12);
        assert!(render_comparison(&x, None, &tok, "other", &ck, &model, &path).is_err());
    }
}
