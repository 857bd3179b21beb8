//! Image datasets: a procedural labelled toy set, folder ingestion into a
//! split store, and seeded batching.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::manifest::{file_digest, sha256_hex, Manifest};
use crate::rng;

/// Number of shape classes produced by [`toy_dataset`].
pub const TOY_CLASSES: usize = 10;
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// Images stored channel-first in `[-1, 1]`, one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<u32>,
    size: usize,
    classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<u32>, size: usize, classes: usize) -> Result<Self> {
        let per = 3 * size * size;
        if size == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} pixel values for {} images of size {size}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Contract(format!("label {l} outside {classes} classes")));
        }
        Ok(Self {
            pixels,
            labels,
            size,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = 3 * self.size * self.size;
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut pixels = Vec::with_capacity(indices.len() * 3 * self.size * self.size);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        Self {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            size: self.size,
            classes: self.classes,
        }
    }

    /// The first `n` images (or all when fewer).
    pub fn head(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// `(B, 3, S, S)` batch; `flip[i]` mirrors image `i` horizontally.
    pub fn batch(&self, indices: &[usize], flip: Option<&[bool]>, dtype: DType) -> Result<Tensor> {
        let s = self.size;
        let mut data = Vec::with_capacity(indices.len() * 3 * s * s);
        for (k, &i) in indices.iter().enumerate() {
            let img = self.image(i);
            if flip.is_some_and(|f| f[k]) {
                for c in 0..3 {
                    for y in 0..s {
                        let row = &img[(c * s + y) * s..(c * s + y + 1) * s];
                        data.extend(row.iter().rev());
                    }
                }
            } else {
                data.extend_from_slice(img);
            }
        }
        Ok(Tensor::from_vec(data, (indices.len(), 3, s, s), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn all(&self, dtype: DType) -> Result<Tensor> {
        self.batch(&(0..self.len()).collect::<Vec<_>>(), None, dtype)
    }

    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.pixels.len() * 4 + self.labels.len() * 4 + 16);
        bytes.extend((self.size as u64).to_le_bytes());
        bytes.extend((self.classes as u64).to_le_bytes());
        for p in &self.pixels {
            bytes.extend(p.to_le_bytes());
        }
        for l in &self.labels {
            bytes.extend(l.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

/// Indices of the batch used at `step`: each epoch walks a fresh seeded
/// permutation, so the order depends only on `(seed, step)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    assert!(n > 0 && batch > 0, "empty dataset or batch");
    let per_epoch = (n / batch).max(1) as u64;
    let epoch = step / per_epoch;
    let offset = ((step % per_epoch) as usize) * batch;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream_n(seed, "epoch", epoch));
    (0..batch).map(|k| perm[(offset + k) % n]).collect()
}

/// Horizontal-flip flags for the batch at `step`.
pub fn flip_flags(batch: usize, seed: u64, step: u64) -> Vec<bool> {
    let mut r = rng::stream_n(seed, "flip", step);
    (0..batch).map(|_| r.random::<bool>()).collect()
}

fn coverage(edge: f32, x: f32) -> f32 {
    // anti-aliased edge one pixel wide
    (0.5 - x / edge).clamp(0.0, 1.0)
}

/// Procedural labelled image set: ten shape classes drawn with random
/// colours, placement and scale over a noisy background.
pub fn toy_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::Config(format!("toy images need at least 8 pixels, got {size}")));
    }
    let mut pixels = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    let px = 1.0 / size as f32;
    for i in 0..n {
        let mut r = rng::stream_n(seed, "toy", i as u64);
        let class = (i % TOY_CLASSES) as u32;
        let fg: [f32; 3] = std::array::from_fn(|_| 0.55 + 0.45 * r.random::<f32>());
        let bg: [f32; 3] = std::array::from_fn(|_| 0.35 * r.random::<f32>());
        let (cx, cy) = (0.5 + 0.16 * (r.random::<f32>() - 0.5), 0.5 + 0.16 * (r.random::<f32>() - 0.5));
        let scale = 0.28 + 0.1 * r.random::<f32>();
        let period = 0.2 + 0.1 * r.random::<f32>();
        let noise: f32 = 0.06 + 0.06 * r.random::<f32>();
        let mut img = vec![0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5) * px;
                let v = (y as f32 + 0.5) * px;
                let (dx, dy) = (u - cx, v - cy);
                let d = (dx * dx + dy * dy).sqrt();
                // signed distance style coverage in [0, 1]
                let cover = match class {
                    0 => coverage(px, d - scale),
                    1 => coverage(px, dx.abs().max(dy.abs()) - scale * 0.85),
                    2 => {
                        let t = dy + scale * 0.6;
                        let inside = t >= 0.0 && dx.abs() <= t * 0.6 && dy <= scale * 0.6;
                        inside as u8 as f32
                    }
                    3 => {
                        let arm = scale * 0.3;
                        let a = dx.abs() <= arm && dy.abs() <= scale;
                        let b = dy.abs() <= arm && dx.abs() <= scale;
                        (a || b) as u8 as f32
                    }
                    4 => coverage(px, (d - scale * 0.8).abs() - scale * 0.25),
                    5 => ((v / period).fract() < 0.5) as u8 as f32,
                    6 => ((u / period).fract() < 0.5) as u8 as f32,
                    7 => {
                        let w = scale * 0.28;
                        ((dx - dy).abs() < w || (dx + dy).abs() < w) as u8 as f32 * (d < scale * 1.3) as u8 as f32
                    }
                    8 => {
                        let a = (u / period).floor() as i64 + (v / period).floor() as i64;
                        (a.rem_euclid(2) == 0) as u8 as f32
                    }
                    _ => {
                        let off = scale * 0.6;
                        let d1 = ((dx - off).powi(2) + dy.powi(2)).sqrt();
                        let d2 = ((dx + off).powi(2) + dy.powi(2)).sqrt();
                        coverage(px, d1.min(d2) - scale * 0.45)
                    }
                };
                for c in 0..3 {
                    let base = bg[c] + cover * (fg[c] - bg[c]);
                    let val = base + noise * rng::normal(&mut r) as f32;
                    img[(c * size + y) * size + x] = (val * 2.0 - 1.0).clamp(-1.0, 1.0);
                }
            }
        }
        pixels.extend(img);
        labels.push(class);
    }
    Dataset::new(pixels, labels, size, TOY_CLASSES)
}

fn to_u8(v: f32) -> u8 {
    (((v + 1.0) * 0.5) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes images as `(B, 3, S, S)` tensors in `[-1, 1]` into a PNG.
pub fn save_png(pixels: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    for y in 0..height {
        for x in 0..width {
            let p = std::array::from_fn(|c| to_u8(pixels[(c * height + y) * width + x]));
            img.put_pixel(x as u32, y as u32, image::Rgb(p));
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Exports a dataset as an image folder with a `labels.csv` manifest.
pub fn write_image_folder(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("file,label\n");
    for i in 0..ds.len() {
        let name = format!("img_{i:05}.png");
        save_png(ds.image(i), ds.size, ds.size, &dir.join(&name))?;
        csv.push_str(&format!("{name},{}\n", ds.labels[i]));
    }
    let p = dir.join("labels.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

/// Outcome of [`ingest`].
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub images: usize,
    pub skipped: Vec<(PathBuf, String)>,
    pub train: usize,
    pub val: usize,
    pub train_digest: String,
    pub val_digest: String,
}

fn read_labels(path: &Path) -> Result<BTreeMap<String, u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("file")) {
            continue;
        }
        let (f, l) = line
            .split_once(',')
            .ok_or_else(|| Error::Serde(format!("{}:{}: expected `file,label`", path.display(), n + 1)))?;
        let l = l
            .trim()
            .parse()
            .map_err(|_| Error::Serde(format!("{}:{}: bad label `{l}`", path.display(), n + 1)))?;
        out.insert(f.trim().to_string(), l);
    }
    Ok(out)
}

fn load_image(path: &Path, size: usize) -> std::result::Result<Vec<f32>, String> {
    let img = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let img = if img.width() as usize != size || img.height() as usize != size {
        image::imageops::resize(&img, size as u32, size as u32, image::imageops::FilterType::Triangle)
    } else {
        img
    };
    let mut out = vec![0f32; 3 * size * size];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c * size + y as usize) * size + x as usize] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(out)
}

/// Reads every PNG in `folder` (labels from `labels`, or class 0 without a
/// manifest), resizes to `size`, splits with `seed` and writes the store.
pub fn ingest(
    folder: &Path,
    labels: Option<&Path>,
    size: usize,
    val_fraction: f64,
    seed: u64,
    out: &Path,
) -> Result<IngestReport> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let label_map = match labels {
        Some(p) => Some(read_labels(p)?),
        None => {
            let default = folder.join("labels.csv");
            if default.exists() {
                Some(read_labels(&default)?)
            } else {
                None
            }
        }
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(folder)
        .map_err(|e| Error::io(folder, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut pixels = Vec::new();
    let mut labels_out = Vec::new();
    let mut skipped = Vec::new();
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        let label = match &label_map {
            Some(m) => match m.get(&name) {
                Some(&l) => l,
                None => {
                    skipped.push((f.clone(), "no label".to_string()));
                    continue;
                }
            },
            None => 0,
        };
        match load_image(f, size) {
            Ok(p) => {
                pixels.extend(p);
                labels_out.push(label);
            }
            Err(e) => skipped.push((f.clone(), e)),
        }
    }
    if labels_out.is_empty() {
        return Err(Error::Contract(format!("no readable images in {}", folder.display())));
    }
    let classes = *labels_out.iter().max().unwrap() as usize + 1;
    let all = Dataset::new(pixels, labels_out, size, classes)?;
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let n_val = ((all.len() as f64) * val_fraction).round() as usize;
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort();
    train_idx.sort();
    let store = DataStore {
        all,
        train: train_idx,
        val: val_idx,
    };
    store.save(out)?;
    let (train, val) = store.splits();
    Ok(IngestReport {
        images: store.all.len(),
        skipped,
        train: train.len(),
        val: val.len(),
        train_digest: train.digest(),
        val_digest: val.digest(),
    })
}

/// Ingested images plus their train/val index lists.
#[derive(Debug, Clone)]
pub struct DataStore {
    pub all: Dataset,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

const IMAGES_FILE: &str = "images.safetensors";

impl DataStore {
    pub fn splits(&self) -> (Dataset, Dataset) {
        (self.all.subset(&self.train), self.all.subset(&self.val))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = self.all.size;
        let mut map = std::collections::HashMap::new();
        map.insert(
            "images".to_string(),
            Tensor::from_vec(self.all.pixels.clone(), (self.all.len(), 3, s, s), &Device::Cpu)?,
        );
        map.insert(
            "labels".to_string(),
            Tensor::from_vec(self.all.labels.clone(), self.all.len(), &Device::Cpu)?,
        );
        let img_path = dir.join(IMAGES_FILE);
        candle_core::safetensors::save(&map, &img_path)?;
        for (name, idx) in [("train.txt", &self.train), ("val.txt", &self.val)] {
            let text: String = idx.iter().map(|i| format!("{i}\n")).collect();
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        let (train, val) = self.splits();
        let mut m = Manifest::new();
        m.set("format", "vqtok-data/1")
            .set("images", self.all.len())
            .set("image_size", s)
            .set("classes", self.all.classes)
            .set("images_digest", file_digest(&img_path)?)
            .set("train", train.len())
            .set("val", val.len())
            .set("train_digest", train.digest())
            .set("val_digest", val.digest());
        m.write(&dir.join("manifest.txt"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("manifest.txt"))?;
        let img_path = dir.join(IMAGES_FILE);
        let found = file_digest(&img_path)?;
        let expected = m.require("images_digest")?;
        if found != expected {
            return Err(Error::DigestMismatch {
                what: "dataset images".into(),
                expected: expected.into(),
                found,
            });
        }
        let map = candle_core::safetensors::load(&img_path, &Device::Cpu)?;
        let get = |k: &str| map.get(k).ok_or_else(|| Error::Contract(format!("data store lacks `{k}`")));
        let images = get("images")?;
        let size = images.dim(2)?;
        let pixels = images.flatten_all()?.to_vec1::<f32>()?;
        let labels = get("labels")?.to_vec1::<u32>()?;
        let classes: usize = m
            .require("classes")?
            .parse()
            .map_err(|_| Error::Serde("bad class count".into()))?;
        let all = Dataset::new(pixels, labels, size, classes)?;
        let read_idx = |name: &str| -> Result<Vec<usize>> {
            let p = dir.join(name);
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&i| i < all.len())
                        .ok_or_else(|| Error::Serde(format!("{name}: bad index `{l}`")))
                })
                .collect()
        };
        let store = Self {
            train: read_idx("train.txt")?,
            val: read_idx("val.txt")?,
            all,
        };
        let (train, val) = store.splits();
        for (what, d) in [("train_digest", train.digest()), ("val_digest", val.digest())] {
            let expected = m.require(what)?;
            if d != expected {
                return Err(Error::DigestMismatch {
                    what: what.into(),
                    expected: expected.into(),
                    found: d,
                });
            }
        }
        Ok(store)
    }
}
