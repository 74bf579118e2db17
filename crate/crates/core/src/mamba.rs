//! Vision stream: patch embedding followed by bidirectional selective-scan
//! blocks and a global pooling step.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scan::{selective_scan_op, ScanStrategy};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VimConfig {
    pub patch_size: usize,
    pub d_model: usize,
    pub depth: usize,
    pub d_state: usize,
    pub expand: usize,
    pub pool: Pool,
}

impl Default for VimConfig {
    fn default() -> Self {
        VimConfig {
            patch_size: 16,
            d_model: 192,
            depth: 4,
            d_state: 16,
            expand: 2,
            pool: Pool::Mean,
        }
    }
}

impl VimConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if [self.patch_size, self.d_model, self.depth, self.d_state, self.expand].contains(&0) {
            return Err(Error::Config("vim dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Token count for an `h × w` input.
    pub fn tokens(&self, h: usize, w: usize) -> Result<usize> {
        if h % self.patch_size != 0 || w % self.patch_size != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "image {h}x{w} not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((h / self.patch_size) * (w / self.patch_size))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Selective-SSM parameters for one scan direction.
#[derive(Debug, Clone)]
pub struct SsmParams<T: Real> {
    pub w_delta: Linear<T>,
    pub w_b: Linear<T>,
    pub w_c: Linear<T>,
    /// `[d_inner, d_state]`; the state matrix is `-exp(a_log)`.
    pub a_log: Tensor<T>,
    pub d: Tensor<T>,
}

/// Inverse of softplus, for placing the initial step size.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Real> SsmParams<T> {
    pub fn new(d_inner: usize, d_state: usize, rng: &mut impl Rng) -> Self {
        let w_delta = Linear::new(d_inner, d_inner, true, rng);
        let w_b = Linear::new(d_inner, d_state, false, rng);
        let w_c = Linear::new(d_inner, d_state, false, rng);
        let a_row: Vec<f64> = (0..d_state)
            .map(|j| {
                let v = if d_state == 1 {
                    1.0
                } else {
                    1.0 + (d_state - 1) as f64 * j as f64 / (d_state - 1) as f64
                };
                v.ln()
            })
            .collect();
        let a_log: Vec<f64> = (0..d_inner).flat_map(|_| a_row.iter().copied()).collect();
        let a_log = Tensor::from_f64(&a_log, &[d_inner, d_state]).unwrap().into_param();
        let d = Tensor::full(&[d_inner], T::one()).into_param();
        // log-uniform step size in [1e-3, 1e-1]
        let log_dt = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).unwrap();
        let bias: Vec<f64> = (0..d_inner).map(|_| inv_softplus(log_dt.sample(rng).exp())).collect();
        if let Some(b) = &w_delta.bias {
            b.set_data(bias.iter().map(|&v| T::lit(v)).collect()).unwrap();
        }
        SsmParams {
            w_delta,
            w_b,
            w_c,
            a_log,
            d,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.w_delta.named_params(&format!("{prefix}.w_delta"));
        out.extend(self.w_b.named_params(&format!("{prefix}.w_b")));
        out.extend(self.w_c.named_params(&format!("{prefix}.w_c")));
        out.push((format!("{prefix}.a_log"), self.a_log.clone()));
        out.push((format!("{prefix}.d"), self.d.clone()));
        out
    }
}

/// Scan over `x: [b, L, d_inner]`. The backward direction runs the same
/// machinery on the time-reversed sequence and reverses the result.
pub fn selective_scan<T: Real>(
    x: &Tensor<T>,
    p: &SsmParams<T>,
    direction: Direction,
    strategy: ScanStrategy,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::dim(format!("selective scan expects [b, L, d_inner], got {:?}", x.shape())));
    }
    let x = match direction {
        Direction::Forward => x.clone(),
        Direction::Backward => x.flip(1)?,
    };
    let delta = p.w_delta.forward(&x)?.softplus();
    let b = p.w_b.forward(&x)?;
    let c = p.w_c.forward(&x)?;
    let a = p.a_log.exp().neg();
    let y = selective_scan_op(&x, &delta, &a, &b, &c, &p.d, strategy)?;
    match direction {
        Direction::Forward => Ok(y),
        Direction::Backward => y.flip(1),
    }
}

#[derive(Debug, Clone)]
pub struct MambaBlockParams<T: Real> {
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
    /// `d_model -> 2·d_inner`, value half first, gate half second.
    pub in_proj: Linear<T>,
    pub forward_ssm: SsmParams<T>,
    pub backward_ssm: SsmParams<T>,
    pub out_proj: Linear<T>,
}

impl<T: Real> MambaBlockParams<T> {
    pub fn new(cfg: &VimConfig, rng: &mut impl Rng) -> Self {
        let (d, di) = (cfg.d_model, cfg.d_inner());
        MambaBlockParams {
            norm_gain: Tensor::full(&[d], T::one()).into_param(),
            norm_bias: Tensor::zeros(&[d]).into_param(),
            in_proj: Linear::new(d, 2 * di, false, rng),
            forward_ssm: SsmParams::new(di, cfg.d_state, rng),
            backward_ssm: SsmParams::new(di, cfg.d_state, rng),
            out_proj: Linear::new(di, d, false, rng),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            (format!("{prefix}.norm.gain"), self.norm_gain.clone()),
            (format!("{prefix}.norm.bias"), self.norm_bias.clone()),
        ];
        out.extend(self.in_proj.named_params(&format!("{prefix}.in_proj")));
        out.extend(self.forward_ssm.named_params(&format!("{prefix}.ssm_fwd")));
        out.extend(self.backward_ssm.named_params(&format!("{prefix}.ssm_bwd")));
        out.extend(self.out_proj.named_params(&format!("{prefix}.out_proj")));
        out
    }
}

/// Residual gated bidirectional block on `x: [b, L, d_model]`.
pub fn mamba_block<T: Real>(x: &Tensor<T>, p: &MambaBlockParams<T>, strategy: ScanStrategy) -> Result<Tensor<T>> {
    let u = x.layer_norm(&p.norm_gain, &p.norm_bias, LAYER_NORM_EPS)?;
    let vz = p.in_proj.forward(&u)?;
    let di = p.out_proj.in_features();
    let v = vz.narrow(2, 0, di)?;
    let z = vz.narrow(2, di, di)?;
    let y_f = selective_scan(&v, &p.forward_ssm, Direction::Forward, strategy)?;
    let y_b = selective_scan(&v, &p.backward_ssm, Direction::Backward, strategy)?;
    let y = y_f.add(&y_b)?.mul(&z.silu())?;
    x.add(&p.out_proj.forward(&y)?)
}

/// Flattens non-overlapping `p × p` patches of `[b, 3, H, W]` into rows of
/// `3·p²` values ordered (channel, row, column); patches in row-major order.
pub fn extract_patches<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    if images.rank() != 4 {
        return Err(Error::dim(format!("expected [b, C, H, W], got {:?}", images.shape())));
    }
    let (b, ch, h, w) = (images.dim(0), images.dim(1), images.dim(2), images.dim(3));
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::dim(format!("image {h}x{w} not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = ch * patch * patch;
    let src = images.data();
    let mut out = Vec::with_capacity(src.len());
    for n in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..ch {
                    let base = (n * ch + c) * h * w;
                    for dy in 0..patch {
                        let start = base + (py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[start..start + patch]);
                    }
                }
            }
        }
    }
    drop(src);
    Tensor::new(out, &[b, gh * gw, row])
}

#[derive(Debug, Clone)]
pub struct PatchEmbed<T: Real> {
    pub proj: Linear<T>,
    /// `[tokens, d_model]`.
    pub pos: Tensor<T>,
    pub patch_size: usize,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(patch_size: usize, tokens: usize, d_model: usize, rng: &mut impl Rng) -> Self {
        PatchEmbed {
            proj: Linear::new(3 * patch_size * patch_size, d_model, true, rng),
            pos: Tensor::randn(&[tokens, d_model], 0.02, rng).into_param(),
            patch_size,
        }
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let patches = extract_patches(images, self.patch_size)?;
        let (n, d) = (self.pos.dim(0), self.pos.dim(1));
        if patches.dim(1) != n {
            return Err(Error::dim(format!(
                "{} patches but positional embedding has {n} rows",
                patches.dim(1)
            )));
        }
        self.proj.forward(&patches)?.add(&self.pos.reshape(&[1, n, d])?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.proj.named_params(&format!("{prefix}.proj"));
        out.push((format!("{prefix}.pos"), self.pos.clone()));
        out
    }
}

/// `[b, L, d] -> [b, d]`.
pub fn global_pool<T: Real>(tokens: &Tensor<T>, pool: Pool) -> Result<Tensor<T>> {
    if tokens.rank() != 3 || tokens.dim(1) == 0 {
        return Err(Error::dim(format!("global pool expects [b, L>=1, d], got {:?}", tokens.shape())));
    }
    match pool {
        Pool::Mean => tokens.mean_axis(1),
        Pool::Last => {
            let (b, l, d) = (tokens.dim(0), tokens.dim(1), tokens.dim(2));
            tokens.narrow(1, l - 1, 1)?.reshape(&[b, d])
        }
    }
}

/// Full vision stream producing the global structure vector `[b, d_model]`.
#[derive(Debug, Clone)]
pub struct VimStream<T: Real> {
    pub cfg: VimConfig,
    pub embed: PatchEmbed<T>,
    pub blocks: Vec<MambaBlockParams<T>>,
    pub strategy: ScanStrategy,
}

impl<T: Real> VimStream<T> {
    pub fn new(cfg: &VimConfig, tokens: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(cfg.patch_size, tokens, cfg.d_model, rng);
        let blocks = (0..cfg.depth).map(|_| MambaBlockParams::new(cfg, rng)).collect();
        Ok(VimStream {
            cfg: cfg.clone(),
            embed,
            blocks,
            strategy: ScanStrategy::default(),
        })
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.embed.forward(images)?;
        for block in &self.blocks {
            x = mamba_block(&x, block, self.strategy)?;
        }
        global_pool(&x, self.cfg.pool)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.embed.named_params(&format!("{prefix}.embed"));
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("{prefix}.blocks.{i}")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> VimConfig {
        VimConfig {
            patch_size: 4,
            d_model: 6,
            depth: 1,
            d_state: 3,
            expand: 2,
            pool: Pool::Mean,
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn a_log_init_and_negative_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = SsmParams::<f64>::new(4, 5, &mut rng);
        let a = p.a_log.exp().neg().to_vec();
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[4] + 5.0).abs() < 1e-12);
        assert!(a.iter().all(|&v| v < 0.0));
        let dt: Vec<f64> = p.w_delta.bias.as_ref().unwrap().to_vec().iter().map(|&b| (1.0 + b.exp()).ln()).collect();
        assert!(dt.iter().all(|&v| (1e-3 - 1e-12..=1e-1 + 1e-12).contains(&v)));
    }

    #[test]
    fn zero_readout_is_pure_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = SsmParams::<f64>::new(4, 3, &mut rng);
        p.w_c.weight.set_data(vec![0.0; 12]).unwrap();
        p.d.set_data(vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let x = random(&[2, 5, 4], &mut rng);
        for dir in [Direction::Forward, Direction::Backward] {
            let y = selective_scan(&x, &p, dir, ScanStrategy::default()).unwrap().to_vec();
            let xv = x.to_vec();
            for (i, (&yi, &xi)) in y.iter().zip(&xv).enumerate() {
                let d = [0.5, -1.0, 2.0, 3.0][i % 4];
                assert!((yi - d * xi).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_direction_is_reversed_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = SsmParams::<f64>::new(4, 3, &mut rng);
        let x = random(&[1, 7, 4], &mut rng);
        let back = selective_scan(&x, &p, Direction::Backward, ScanStrategy::default()).unwrap();
        let manual = selective_scan(&x.flip(1).unwrap(), &p, Direction::Forward, ScanStrategy::default())
            .unwrap()
            .flip(1)
            .unwrap();
        assert_eq!(back.to_vec(), manual.to_vec());
    }

    #[test]
    fn zero_out_proj_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = toy_cfg();
        let p = MambaBlockParams::<f64>::new(&cfg, &mut rng);
        p.out_proj.weight.set_data(vec![0.0; p.out_proj.weight.numel()]).unwrap();
        let x = random(&[2, 8, 6], &mut rng);
        let y = mamba_block(&x, &p, ScanStrategy::default()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn closed_gate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = toy_cfg();
        let p = MambaBlockParams::<f64>::new(&cfg, &mut rng);
        // zero gate weights give z = 0 and silu(0) = 0
        let (d, di) = (cfg.d_model, cfg.d_inner());
        let mut w = p.in_proj.weight.to_vec();
        for r in 0..d {
            w[r * 2 * di + di..(r + 1) * 2 * di].fill(0.0);
        }
        p.in_proj.weight.set_data(w).unwrap();
        let x = random(&[1, 8, 6], &mut rng);
        let y = mamba_block(&x, &p, ScanStrategy::default()).unwrap();
        for (a, b) in y.to_vec().iter().zip(x.to_vec()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn patch_embedding_counts_and_positional() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = VimConfig::default();
        assert_eq!(cfg.tokens(224, 224).unwrap(), 196);
        assert!(cfg.tokens(224, 200).is_err());
        let pe = PatchEmbed::<f64>::new(4, 4, 5, &mut rng);
        let zero = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        assert_eq!(pe.forward(&zero).unwrap().to_vec(), pe.pos.to_vec());
    }

    #[test]
    fn swapping_patches_swaps_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random(&[1, 3, 4, 8], &mut rng);
        let mut swapped = img.to_vec();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    swapped.swap(c * 32 + y * 8 + x, c * 32 + y * 8 + x + 4);
                }
            }
        }
        let swapped = Tensor::new(swapped, &[1, 3, 4, 8]).unwrap();
        let lin = Linear::<f64>::new(48, 3, true, &mut rng);
        let a = lin.forward(&extract_patches(&img, 4).unwrap()).unwrap().to_vec();
        let b = lin.forward(&extract_patches(&swapped, 4).unwrap()).unwrap().to_vec();
        assert_eq!(a[..3], b[3..]);
        assert_eq!(a[3..], b[..3]);
    }

    #[test]
    fn pooling_examples() {
        let t = Tensor::<f64>::new(vec![1.0, 2.0, 3.0, 6.0], &[1, 2, 2]).unwrap();
        assert_eq!(global_pool(&t, Pool::Mean).unwrap().to_vec(), vec![2.0, 4.0]);
        assert_eq!(global_pool(&t, Pool::Last).unwrap().to_vec(), vec![3.0, 6.0]);
        let swapped = Tensor::<f64>::new(vec![3.0, 6.0, 1.0, 2.0], &[1, 2, 2]).unwrap();
        assert_eq!(global_pool(&swapped, Pool::Mean).unwrap().to_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn stream_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = toy_cfg();
        let s = VimStream::<f32>::new(&cfg, 8, &mut rng).unwrap();
        let img = Tensor::<f32>::randn(&[3, 3, 8, 16], 1.0, &mut rng);
        let g = s.forward(&img).unwrap();
        assert_eq!(g.shape(), &[3, 6]);
        assert!(g.all_finite());
    }
}
