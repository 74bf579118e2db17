//! Manifest parsing, image decoding, preprocessing, augmentation and batching.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{self, FeaturePyramid};
use crate::tensor::{Real, Tensor};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Path relative to the data root.
    pub image_path: PathBuf,
    /// Ground-truth score in `[1, 5]`.
    pub score: f64,
}

/// Parses `filename,score` lines (no header, `.` decimal separator).
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (name, score) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("expected `filename,score`, got {line:?}"),
        })?;
        let name = name.trim();
        if name.is_empty() {
            return Err(Error::Validation {
                line: lineno,
                message: "empty image path".into(),
            });
        }
        let score: f64 = score.trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            message: format!("score {:?} is not a number", score.trim()),
        })?;
        if !(1.0..=5.0).contains(&score) {
            return Err(Error::Validation {
                line: lineno,
                message: format!("score {score} outside [1, 5]"),
            });
        }
        out.push(ManifestRecord {
            image_path: PathBuf::from(name),
            score,
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("{},{}\n", r.image_path.display(), r.score));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(RgbImage { width, height, pixels })
    }

    /// Channel-major values in `[0, 1]`.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 3 * plane];
        for (p, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Binary PPM (P6, maxval 255).
    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

fn ppm_tokens(bytes: &[u8], count: usize) -> Result<(Vec<usize>, usize)> {
    let bad = |m: &str| Error::Format(format!("malformed PPM header: {m}"));
    let mut pos = 2;
    let mut values = Vec::with_capacity(count);
    while values.len() < count {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("expected a number"));
        }
        let v = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("number out of range"))?;
        values.push(v);
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((values, pos + 1)),
        _ => Err(bad("missing separator before raster")),
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    match bytes.get(..2) {
        Some(b"P6") => {}
        Some([b'P', b'1'..=b'5']) => {
            return Err(Error::Format("only RGB (P6) portable pixmaps are supported".into()))
        }
        _ => return Err(Error::Format("missing P6 magic".into())),
    }
    let (hdr, offset) = ppm_tokens(bytes, 3)?;
    let (width, height, maxval) = (hdr[0], hdr[1], hdr[2]);
    if width == 0 || height == 0 {
        return Err(Error::Format("PPM with zero size".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported (8-bit only)")));
    }
    let need = width * height * 3;
    let raster = &bytes[offset..];
    if raster.len() < need {
        return Err(Error::Format(format!(
            "PPM raster truncated: {} of {need} bytes",
            raster.len()
        )));
    }
    let mut pixels = raster[..need].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8;
        }
    }
    RgbImage::new(width, height, pixels)
}

fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load(Cursor::new(bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("PNG decode failed: {e}")))?;
    match img {
        image::DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            RgbImage::new(w as usize, h as usize, buf.into_raw())
        }
        other => Err(Error::Format(format!("PNG is {:?}, expected 8-bit RGB", other.color()))),
    }
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Decodes P6 PPM or 8-bit RGB PNG, chosen by content.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tag = |e: Error| match e {
        Error::Format(m) => Error::Decode {
            path: path.to_path_buf(),
            message: m,
        },
        other => other,
    };
    if bytes.starts_with(PNG_MAGIC) {
        decode_png(&bytes).map_err(|e| match e {
            Error::Format(m) if m.contains("expected 8-bit RGB") => Error::Format(m),
            other => tag(other),
        })
    } else if bytes.starts_with(b"P") && bytes.len() > 1 && bytes[1].is_ascii_digit() {
        decode_ppm(&bytes).map_err(|e| match e {
            Error::Format(m) if m.contains("only RGB") => Error::Format(m),
            other => tag(other),
        })
    } else {
        Err(Error::Decode {
            path: path.to_path_buf(),
            message: "unrecognized image format".into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub flip_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_size: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            flip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("target_size must be positive".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Bilinear resize of a channel-major image with half-pixel centers and
/// edge clamping. Same-size input is returned unchanged.
pub fn resize_bilinear(src: &[f64], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let axis = |o: usize, n_in: usize, n_out: usize| {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

pub fn normalize(v: f64, channel: usize, cfg: &PreprocessConfig) -> f64 {
    (v - cfg.mean[channel]) / cfg.std[channel]
}

pub fn denormalize(v: f64, channel: usize, cfg: &PreprocessConfig) -> f64 {
    v * cfg.std[channel] + cfg.mean[channel]
}

/// Resized, normalized channel-major `3 × S × S` values.
pub fn preprocess(img: &RgbImage, cfg: &PreprocessConfig) -> Vec<f32> {
    let s = cfg.target_size;
    let resized = resize_bilinear(&img.to_chw(), 3, img.height, img.width, s, s);
    let plane = s * s;
    resized
        .iter()
        .enumerate()
        .map(|(i, &v)| normalize(v, i / plane, cfg) as f32)
        .collect()
}

pub fn load_and_preprocess(root: &Path, record: &ManifestRecord, cfg: &PreprocessConfig) -> Result<Vec<f32>> {
    let img = decode_image(&root.join(&record.image_path))?;
    Ok(preprocess(&img, cfg))
}

/// Reverses the columns of every row of a `channels × h × w` buffer.
pub fn flip_horizontal<V: Copy>(data: &mut [V], w: usize) {
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Flips with probability `p`; returns whether it flipped.
pub fn augment_flip<V: Copy>(data: &mut [V], w: usize, p: f64, rng: &mut impl Rng) -> bool {
    let flip = rng.random_bool(p);
    if flip {
        flip_horizontal(data, w);
    }
    flip
}

fn epoch_rng(seed: u64, epoch: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) << 1 | purpose);
    rng
}

/// Visit order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_permutation(n: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut epoch_rng(seed, epoch, 0));
    }
    order
}

#[derive(Debug)]
pub struct Batch<T: Real> {
    /// `[b, 3, S, S]`
    pub images: Tensor<T>,
    /// `[b]`
    pub scores: Tensor<T>,
    /// Record indices in batch order.
    pub indices: Vec<usize>,
    /// Externally computed feature pyramids, when the dataset has them.
    pub pyramids: Option<Vec<FeaturePyramid<T>>>,
}

/// A manifest bound to a data root, optionally holding preprocessed images
/// (and imported feature pyramids) in memory.
pub struct Dataset {
    root: PathBuf,
    records: Vec<ManifestRecord>,
    cfg: PreprocessConfig,
    features_dir: Option<PathBuf>,
    cache: Option<Vec<Arc<Vec<f32>>>>,
}

/// Images are kept in memory when the preprocessed set stays under this size.
const CACHE_LIMIT_BYTES: usize = 1 << 30;

impl Dataset {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>, cfg: PreprocessConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Dataset {
            root: root.into(),
            records,
            cfg,
            features_dir: None,
            cache: None,
        })
    }

    pub fn open(root: impl Into<PathBuf>, manifest: &Path, cfg: PreprocessConfig) -> Result<Self> {
        Self::new(root, load_manifest(manifest)?, cfg)
    }

    /// Reads `<dir>/<image stem>.fpyr` next to each image.
    pub fn with_features_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.features_dir = dir;
        self
    }

    /// Decodes every image once (in parallel) if the set fits the cache budget.
    pub fn preload(mut self) -> Result<Self> {
        let s = self.cfg.target_size;
        if self.records.len() * 3 * s * s * 4 > CACHE_LIMIT_BYTES {
            return Ok(self);
        }
        let cache = self
            .records
            .par_iter()
            .map(|r| load_and_preprocess(&self.root, r, &self.cfg).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        self.cache = Some(cache);
        Ok(self)
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    fn image(&self, idx: usize) -> Result<Vec<f32>> {
        match &self.cache {
            Some(c) => Ok(c[idx].as_ref().clone()),
            None => load_and_preprocess(&self.root, &self.records[idx], &self.cfg),
        }
    }

    fn pyramid(&self, idx: usize) -> Result<Option<FeaturePyramid<f32>>> {
        let Some(dir) = &self.features_dir else {
            return Ok(None);
        };
        let stem = self.records[idx]
            .image_path
            .file_stem()
            .ok_or_else(|| Error::Config("image path without file name".into()))?;
        let path = dir.join(Path::new(stem).with_extension("fpyr"));
        prior::import_features(&path).map(Some)
    }

    /// Batches for one epoch. Every record appears exactly once; the final
    /// batch may be short. With `train` set, each image is flipped by an
    /// independent draw from a stream seeded by `(seed, epoch)`.
    pub fn batches<T: Real>(
        &self,
        batch_size: usize,
        shuffle: bool,
        train: bool,
        seed: u64,
        epoch: usize,
    ) -> Result<BatchIter<'_, T>> {
        if batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        let order = epoch_permutation(self.len(), shuffle, seed, epoch);
        let flips = if train && self.cfg.flip_probability > 0.0 {
            let mut rng = epoch_rng(seed, epoch, 1);
            order.iter().map(|_| rng.random_bool(self.cfg.flip_probability)).collect()
        } else {
            vec![false; order.len()]
        };
        Ok(BatchIter {
            data: self,
            order,
            flips,
            batch_size,
            pos: 0,
            _marker: std::marker::PhantomData,
        })
    }
}

pub struct BatchIter<'a, T: Real> {
    data: &'a Dataset,
    order: Vec<usize>,
    flips: Vec<bool>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> BatchIter<'_, T> {
    fn assemble(&self, range: std::ops::Range<usize>) -> Result<Batch<T>> {
        let s = self.data.cfg.target_size;
        let indices: Vec<usize> = self.order[range.clone()].to_vec();
        let flips = &self.flips[range];
        // Decoding may run on several workers; order follows `indices`.
        let loaded: Vec<(Vec<f32>, Option<FeaturePyramid<f32>>)> = indices
            .par_iter()
            .zip(flips.par_iter())
            .map(|(&idx, &flip)| {
                let mut img = self.data.image(idx)?;
                let mut pyr = self.data.pyramid(idx)?;
                if flip {
                    flip_horizontal(&mut img, s);
                    if let Some(p) = pyr.as_mut() {
                        p.flip_horizontal();
                    }
                }
                Ok((img, pyr))
            })
            .collect::<Result<_>>()?;
        let b = indices.len();
        let mut pixels = Vec::with_capacity(b * 3 * s * s);
        let mut pyramids = Vec::new();
        for (img, pyr) in loaded {
            pixels.extend(img.into_iter().map(|v| T::lit(v as f64)));
            if let Some(p) = pyr {
                pyramids.push(p.cast());
            }
        }
        let scores: Vec<T> = indices.iter().map(|&i| T::lit(self.data.records[i].score)).collect();
        Ok(Batch {
            images: Tensor::new(pixels, &[b, 3, s, s])?,
            scores: Tensor::new(scores, &[b])?,
            indices,
            pyramids: (!pyramids.is_empty()).then_some(pyramids),
        })
    }
}

impl<T: Real> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let range = self.pos..end;
        self.pos = end;
        Some(self.assemble(range))
    }
}
