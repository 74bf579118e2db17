//! Frozen multi-scale prior stream.
//!
//! The surrogate encoder has four stages; each one folds non-overlapping 2×2
//! patches into the channel axis, applies a fixed seeded channel mix, then
//! silu. Its weights never enter the autodiff graph. Externally computed
//! pyramids (e.g. from a real diffusion encoder) enter through the FPYR
//! container and are consumed the same way.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{gemm, Real, Tensor};

pub const NUM_SCALES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorEncoderConfig {
    pub stage_channels: Vec<usize>,
    pub seed: u64,
    /// Side of the pooled token grid per scale (7 gives 4·49 = 196 tokens).
    pub token_grid: usize,
}

impl Default for PriorEncoderConfig {
    fn default() -> Self {
        PriorEncoderConfig {
            stage_channels: vec![32, 64, 128, 256],
            seed: 0,
            token_grid: 7,
        }
    }
}

impl PriorEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_SCALES {
            return Err(Error::Config(format!(
                "prior encoder needs exactly {NUM_SCALES} stages, got {}",
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.contains(&0) || self.token_grid == 0 {
            return Err(Error::Config("prior channels and token grid must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        NUM_SCALES * self.token_grid * self.token_grid
    }
}

/// One `C × H × W` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels * height * width == 0 || data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "feature map {channels}x{height}x{width} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Adaptive average pooling onto a `grid × grid` lattice; returns
    /// `grid²` rows of `channels` values, cells in row-major order.
    pub fn pool_to_grid(&self, grid: usize) -> Result<Vec<T>> {
        if self.height < grid || self.width < grid {
            return Err(Error::dim(format!(
                "scale {}x{} smaller than the {grid}x{grid} token grid",
                self.height, self.width
            )));
        }
        let bins = |n: usize| -> Vec<(usize, usize)> {
            (0..grid).map(|i| (i * n / grid, ((i + 1) * n).div_ceil(grid))).collect()
        };
        let (rows, cols) = (bins(self.height), bins(self.width));
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(grid * grid * self.channels);
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let count = T::lit(((y1 - y0) * (x1 - x0)) as f64);
                for c in 0..self.channels {
                    let base = c * plane;
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += self.data[base + y * self.width + x];
                        }
                    }
                    out.push(acc / count);
                }
            }
        }
        Ok(out)
    }
}

/// Four multi-scale feature maps for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub scales: Vec<FeatureMap<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(scales: Vec<FeatureMap<T>>) -> Result<Self> {
        if scales.len() != NUM_SCALES {
            return Err(Error::dim(format!(
                "feature pyramid needs {NUM_SCALES} scales, got {}",
                scales.len()
            )));
        }
        Ok(FeaturePyramid { scales })
    }

    pub fn channels(&self) -> Vec<usize> {
        self.scales.iter().map(|s| s.channels).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.scales.iter().all(|s| s.data.iter().all(|v| v.is_finite()))
    }

    pub fn flip_horizontal(&mut self) {
        for s in &mut self.scales {
            crate::data::flip_horizontal(&mut s.data, s.width);
        }
    }

    pub fn cast<U: Real>(&self) -> FeaturePyramid<U> {
        FeaturePyramid {
            scales: self
                .scales
                .iter()
                .map(|s| FeatureMap {
                    channels: s.channels,
                    height: s.height,
                    width: s.width,
                    data: s.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Frozen surrogate encoder; immutable after construction.
pub struct FrozenEncoder<T: Real> {
    cfg: PriorEncoderConfig,
    /// Stage `i` maps `4·C_{i-1}` patch features to `C_i` channels.
    stages: Vec<Tensor<T>>,
}

impl<T: Real> FrozenEncoder<T> {
    pub fn new(cfg: &PriorEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(NUM_SCALES);
        for &c_out in &cfg.stage_channels {
            let fan_in = 4 * c_in;
            // constants: requires_grad stays false
            stages.push(Tensor::randn(&[fan_in, c_out], 1.0 / (fan_in as f64).sqrt(), &mut rng));
            c_in = c_out;
        }
        Ok(FrozenEncoder {
            cfg: cfg.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &PriorEncoderConfig {
        &self.cfg
    }

    pub fn frozen_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.stages
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("prior.encoder.stage{i}"), w.clone()))
            .collect()
    }

    fn run_stage(&self, stage: usize, input: &FeatureMap<T>) -> FeatureMap<T> {
        let (c, h, w) = (input.channels, input.height, input.width);
        let (oh, ow) = (h / 2, w / 2);
        let weight = self.stages[stage].data();
        let c_out = weight.len() / (4 * c);
        // patch rows ordered (channel, dy, dx)
        let mut patches = Vec::with_capacity(oh * ow * 4 * c);
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let base = ch * h * w;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            patches.push(input.data[base + (2 * y + dy) * w + 2 * x + dx]);
                        }
                    }
                }
            }
        }
        let mixed = gemm(&patches, &weight, oh * ow, 4 * c, c_out);
        let mut data = vec![T::zero(); c_out * oh * ow];
        for p in 0..oh * ow {
            for co in 0..c_out {
                let v = mixed[p * c_out + co];
                data[co * oh * ow + p] = v / (T::one() + (-v).exp());
            }
        }
        FeatureMap {
            channels: c_out,
            height: oh,
            width: ow,
            data,
        }
    }

    /// Pyramid for one `3 × H × W` image.
    pub fn extract_one(&self, image: &[T], height: usize, width: usize) -> Result<FeaturePyramid<T>> {
        let div = 1 << NUM_SCALES;
        if height % div != 0 || width % div != 0 {
            return Err(Error::dim(format!(
                "prior encoder input {height}x{width} not divisible by {div}"
            )));
        }
        let mut current = FeatureMap::new(3, height, width, image.to_vec())?;
        let mut scales = Vec::with_capacity(NUM_SCALES);
        for stage in 0..NUM_SCALES {
            current = self.run_stage(stage, &current);
            scales.push(current.clone());
        }
        FeaturePyramid::new(scales)
    }

    /// Pyramids for a `[b, 3, H, W]` batch. No graph is recorded.
    pub fn extract_features(&self, images: &Tensor<T>) -> Result<Vec<FeaturePyramid<T>>> {
        if images.rank() != 4 || images.dim(1) != 3 {
            return Err(Error::dim(format!(
                "prior encoder expects [b, 3, H, W], got {:?}",
                images.shape()
            )));
        }
        let (h, w) = (images.dim(2), images.dim(3));
        let data = images.data();
        data.par_chunks(3 * h * w)
            .map(|img| self.extract_one(img, h, w))
            .collect()
    }
}

/// Trainable per-scale projections from pooled channels to the model width.
#[derive(Debug, Clone)]
pub struct PriorProjection<T: Real> {
    pub scales: Vec<Linear<T>>,
    pub grid: usize,
}

impl<T: Real> PriorProjection<T> {
    pub fn new(channels: &[usize], d_model: usize, grid: usize, rng: &mut impl rand::Rng) -> Self {
        PriorProjection {
            scales: channels.iter().map(|&c| Linear::new(c, d_model, true, rng)).collect(),
            grid,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.scales
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named_params(&format!("{prefix}.{i}")))
            .collect()
    }

    /// `[b, 4·grid², d_model]` tokens, scales concatenated in order.
    pub fn tokens(&self, pyramids: &[FeaturePyramid<T>]) -> Result<Tensor<T>> {
        let b = pyramids.len();
        if b == 0 {
            return Err(Error::Contract("no pyramids to tokenize".into()));
        }
        let cells = self.grid * self.grid;
        let mut per_scale = Vec::with_capacity(NUM_SCALES);
        for (i, proj) in self.scales.iter().enumerate() {
            let c = proj.in_features();
            let mut pooled = Vec::with_capacity(b * cells * c);
            for p in pyramids {
                let map = &p.scales[i];
                if map.channels != c {
                    return Err(Error::Mismatch(format!(
                        "scale {i} has {} channels, projection expects {c}",
                        map.channels
                    )));
                }
                pooled.extend(map.pool_to_grid(self.grid)?);
            }
            let x = Tensor::new(pooled, &[b, cells, c])?;
            per_scale.push(proj.forward(&x)?);
        }
        Tensor::concat(&per_scale, 1)
    }
}

const FPYR_MAGIC: &[u8; 4] = b"FPYR";
const FPYR_VERSION: u32 = 1;

pub fn encode_fpyr(p: &FeaturePyramid<f32>) -> Vec<u8> {
    let payload: usize = p.scales.iter().map(|s| s.data.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + NUM_SCALES * 12 + payload);
    out.extend_from_slice(FPYR_MAGIC);
    out.extend_from_slice(&FPYR_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.scales.len() as u32).to_le_bytes());
    for s in &p.scales {
        for d in [s.channels, s.height, s.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for s in &p.scales {
        for v in &s.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_fpyr(bytes: &[u8]) -> Result<FeaturePyramid<f32>> {
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Corruption("FPYR header truncated".into()))
    };
    if bytes.len() < 4 {
        return Err(Error::Corruption("FPYR file truncated".into()));
    }
    if &bytes[..4] != FPYR_MAGIC {
        return Err(Error::Format("not an FPYR file (bad magic)".into()));
    }
    let version = u32_at(4)?;
    if version != FPYR_VERSION {
        return Err(Error::Format(format!("unsupported FPYR version {version}")));
    }
    let n = u32_at(8)? as usize;
    if n != NUM_SCALES {
        return Err(Error::Format(format!("FPYR declares {n} scales, expected {NUM_SCALES}")));
    }
    let mut dims = Vec::with_capacity(n);
    for i in 0..n {
        let base = 12 + i * 12;
        let d = (u32_at(base)? as usize, u32_at(base + 4)? as usize, u32_at(base + 8)? as usize);
        if d.0 == 0 || d.1 == 0 || d.2 == 0 {
            return Err(Error::Corruption(format!("FPYR scale {i} has a zero dimension")));
        }
        dims.push(d);
    }
    let mut off = 12 + n * 12;
    let expected: usize = dims.iter().map(|(c, h, w)| c * h * w * 4).sum();
    if bytes.len() != off + expected {
        return Err(Error::Corruption(format!(
            "FPYR payload is {} bytes, header declares {expected}",
            bytes.len().saturating_sub(off)
        )));
    }
    let mut scales = Vec::with_capacity(n);
    for (c, h, w) in dims {
        let len = c * h * w;
        let data = bytes[off..off + 4 * len]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        off += 4 * len;
        scales.push(FeatureMap::new(c, h, w, data)?);
    }
    FeaturePyramid::new(scales)
}

pub fn export_features(p: &FeaturePyramid<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_fpyr(p)).map_err(|e| Error::io(path, e))
}

pub fn import_features(path: &Path) -> Result<FeaturePyramid<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fpyr(&bytes)
}
