//! Seeded procedural images whose score depends on two injected factors:
//! global left-right symmetry `s` and local texture amplitude `t`, both in
//! `[0, 1]`, with `score = 1 + 2s + 2t`.
//!
//! The base image is a sum of soft colour blobs, split into its mirror
//! symmetric and antisymmetric parts. The antisymmetric part is rescaled to
//! an RMS of `(1 - s)·0.15`. Each pixel then gets a random-sign perturbation
//! of size `0.3·t`, with signs mirrored so the noise itself is symmetric.
//! Horizontal flips leave both factors unchanged.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_manifest, ManifestRecord, RgbImage};
use crate::error::{Error, Result};

const BLOBS: usize = 6;
const TEXTURE_AMPLITUDE: f64 = 0.3;
/// RMS of the antisymmetric component at `s = 0`.
const ASYMMETRY_RMS: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 64,
            size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub image: RgbImage,
    pub symmetry: f64,
    pub texture: f64,
    pub score: f64,
}

pub fn score_of(symmetry: f64, texture: f64) -> f64 {
    1.0 + 2.0 * symmetry + 2.0 * texture
}

/// Sample `index` of the set seeded by `seed`; independent of other indices.
pub fn generate_sample(seed: u64, index: usize, size: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let symmetry: f64 = rng.random();
    let texture: f64 = rng.random();
    let blobs: Vec<([f64; 2], f64, [f64; 3])> = (0..BLOBS)
        .map(|_| {
            let centre = [rng.random::<f64>(), rng.random::<f64>()];
            let radius = 0.1 + 0.25 * rng.random::<f64>();
            let colour = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            (centre, radius, colour)
        })
        .collect();
    let field = |x: f64, y: f64, c: usize| -> f64 {
        let mut v = 0.2;
        for (centre, r, colour) in &blobs {
            let d2 = (x - centre[0]).powi(2) + (y - centre[1]).powi(2);
            v += 0.6 * colour[c] * (-d2 / (2.0 * r * r)).exp();
        }
        v
    };
    // split the blob field into mirror-symmetric and antisymmetric parts
    let mut sym = vec![0.0; size * size * 3];
    let mut anti = vec![0.0; size * size * 3];
    for py in 0..size {
        let y = (py as f64 + 0.5) / size as f64;
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64;
            for c in 0..3 {
                let (f, m) = (field(x, y, c), field(1.0 - x, y, c));
                sym[(py * size + px) * 3 + c] = 0.5 * (f + m);
                anti[(py * size + px) * 3 + c] = 0.5 * (f - m);
            }
        }
    }
    let rms = (anti.iter().map(|v| v * v).sum::<f64>() / anti.len() as f64).sqrt().max(1e-12);
    let asym_gain = (1.0 - symmetry) * ASYMMETRY_RMS / rms;
    // mirrored noise signs keep the texture term out of the symmetry measure
    let half = size.div_ceil(2);
    let signs: Vec<f64> = (0..size * half * 3)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut pixels = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let col = px.min(size - 1 - px);
            for c in 0..3 {
                let i = (py * size + px) * 3 + c;
                let sign = signs[(py * half + col) * 3 + c];
                let v = sym[i] + asym_gain * anti[i] + sign * texture * TEXTURE_AMPLITUDE;
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    SynthSample {
        image: RgbImage::new(size, size, pixels).expect("pixel count matches size"),
        symmetry,
        texture,
        score: score_of(symmetry, texture),
    }
}

pub fn image_name(index: usize) -> PathBuf {
    PathBuf::from(format!("synth_{index:05}.ppm"))
}

/// Writes `n` PPM images and `manifest.csv` into `dir`; returns the records.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig) -> Result<Vec<ManifestRecord>> {
    if cfg.size == 0 {
        return Err(Error::Config("synthetic image size must be positive".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let s = generate_sample(cfg.seed, i, cfg.size);
        let name = image_name(i);
        let path = dir.join(&name);
        fs::write(&path, s.image.encode_ppm()).map_err(|e| Error::io(&path, e))?;
        records.push(ManifestRecord {
            image_path: name,
            score: s.score,
        });
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}
