//! Wall-clock scaling of the selective scan against a quadratic softmax
//! attention reference over the same sequence lengths.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::{selective_scan_forward, ScanDims, ScanInputs, ScanStrategy};
use crate::tensor::{gemm, gemm_nt, Tensor};

pub const MIN_REPETITIONS: usize = 5;
pub const CSV_HEADER: &str = "L,scan_seconds,attention_seconds";
/// Query rows scored per block in the attention reference.
const ATTENTION_ROWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    /// Independent sequences per timed scan call.
    pub batch: usize,
    pub d_inner: usize,
    pub d_state: usize,
    /// Head width of the attention reference.
    pub d_attn: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lengths: vec![1024, 2048, 4096, 8192],
            repetitions: 7,
            batch: 2,
            d_inner: 128,
            d_state: 16,
            d_attn: 16,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.lengths.contains(&0) {
            return Err(Error::Config("bench lengths must be non-empty and positive".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bench lengths must be strictly ascending".into()));
        }
        if self.repetitions < MIN_REPETITIONS {
            return Err(Error::Config(format!("at least {MIN_REPETITIONS} repetitions are required")));
        }
        if self.batch == 0 || self.d_inner == 0 || self.d_state == 0 || self.d_attn == 0 {
            return Err(Error::Config("bench widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub len: usize,
    pub scan_seconds: f64,
    pub attention_seconds: f64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6}", self.len, self.scan_seconds, self.attention_seconds)
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Ratios of consecutive rows as `(from_len, to_len, scan_ratio, attention_ratio)`.
pub fn doubling_ratios(rows: &[BenchRow]) -> Vec<(usize, usize, f64, f64)> {
    rows.windows(2)
        .map(|w| {
            (
                w[0].len,
                w[1].len,
                w[1].scan_seconds / w[0].scan_seconds,
                w[1].attention_seconds / w[0].attention_seconds,
            )
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64())
}

fn random(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    Tensor::<f32>::randn(&[n], scale, rng).to_vec()
}

/// Softmax attention of `l` queries over `l` keys, `O(l²·d)` time and
/// `O(l)` extra memory.
pub fn attention_reference(q: &[f32], k: &[f32], v: &[f32], l: usize, d: usize) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0f32; l * d];
    for start in (0..l).step_by(ATTENTION_ROWS) {
        let rows = ATTENTION_ROWS.min(l - start);
        let mut scores = gemm_nt(&q[start * d..(start + rows) * d], k, rows, d, l);
        for row in scores.chunks_mut(l) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s * scale));
            let mut total = 0.0;
            for s in row.iter_mut() {
                *s = (*s * scale - max).exp();
                total += *s;
            }
            row.iter_mut().for_each(|s| *s /= total);
        }
        out[start * d..(start + rows) * d].copy_from_slice(&gemm(&scores, v, rows, l, d));
    }
    out
}

/// Random inputs for one sequence length.
struct Workload {
    len: usize,
    dims: ScanDims,
    scan: [Vec<f32>; 6],
    qkv: [Vec<f32>; 3],
}

impl Workload {
    fn new(cfg: &BenchConfig, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ len as u64);
        let (nb, di, ds) = (cfg.batch, cfg.d_inner, cfg.d_state);
        let x = random(nb * len * di, 1.0, &mut rng);
        let delta = random(nb * len * di, 1.0, &mut rng).iter().map(|v| 0.01 + 0.05 * v.abs()).collect();
        let a = random(di * ds, 1.0, &mut rng).iter().map(|v| -0.5 - v.abs()).collect();
        let b = random(nb * len * ds, 1.0, &mut rng);
        let c = random(nb * len * ds, 1.0, &mut rng);
        let d = random(di, 1.0, &mut rng);
        let n = len * cfg.d_attn;
        Workload {
            len,
            dims: ScanDims {
                batch: nb,
                len,
                d_inner: di,
                d_state: ds,
            },
            scan: [x, delta, a, b, c, d],
            qkv: [random(n, 1.0, &mut rng), random(n, 1.0, &mut rng), random(n, 1.0, &mut rng)],
        }
    }

    fn scan(&self) -> Result<()> {
        let [x, delta, a, b, c, d] = &self.scan;
        let inputs = ScanInputs {
            x,
            delta,
            a,
            b,
            c,
            d,
        };
        std::hint::black_box(selective_scan_forward(&inputs, self.dims, ScanStrategy::default())?);
        Ok(())
    }

    fn attention(&self, d_attn: usize) {
        let [q, k, v] = &self.qkv;
        std::hint::black_box(attention_reference(q, k, v, self.len, d_attn));
    }
}

/// Times both kernels on a single worker thread. Repetitions are
/// interleaved across lengths so slow drift in machine load affects every
/// length alike; one untimed warm-up round precedes them.
pub fn bench_scan(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Config(format!("cannot build benchmark thread pool: {e}")))?;
    pool.install(|| {
        let loads: Vec<Workload> = cfg.lengths.iter().map(|&l| Workload::new(cfg, l)).collect();
        let mut scan_t = vec![Vec::with_capacity(cfg.repetitions); loads.len()];
        let mut attn_t = vec![Vec::with_capacity(cfg.repetitions); loads.len()];
        for rep in 0..=cfg.repetitions {
            for (i, w) in loads.iter().enumerate() {
                let s = timed(|| w.scan())?;
                let a = timed(|| {
                    w.attention(cfg.d_attn);
                    Ok(())
                })?;
                if rep > 0 {
                    scan_t[i].push(s);
                    attn_t[i].push(a);
                }
            }
        }
        Ok(loads
            .iter()
            .zip(scan_t.into_iter().zip(attn_t))
            .map(|(w, (s, a))| BenchRow {
                len: w.len,
                scan_seconds: median(s),
                attention_seconds: median(a),
            })
            .collect())
    })
}
