//! Finite-difference gradient suites over every differentiable operation,
//! the model's building blocks, and the end-to-end regressor.
//!
//! All checks run in 64-bit. Each case reduces its output to a scalar by a
//! fixed random weighting so that no gradient is trivially uniform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{concat_fuse, CrossAttention, FusionMode, MlpHead};
use crate::mamba::{mamba_block, selective_scan, Direction, MambaBlockParams, PatchEmbed, Pool, SsmParams, VimConfig};
use crate::model::{MdNet, ModelConfig};
use crate::nn::Linear;
use crate::optim::{smooth_l1, SmoothL1Config};
use crate::prior::{FeatureMap, FeaturePyramid, PriorEncoderConfig, PriorProjection};
use crate::scan::{selective_scan_op, ScanStrategy};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tensor};

pub const OPS_TOL: f64 = 1e-6;
pub const HEAD_TOL: f64 = 1e-5;
pub const BLOCK_TOL: f64 = 1e-4;
pub const FULL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    Ops,
    Block,
    Full,
}

impl std::str::FromStr for GradScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(GradScope::Ops),
            "block" => Ok(GradScope::Block),
            "full" => Ok(GradScope::Full),
            _ => Err(Error::Config(format!("unknown gradcheck scope '{s}' (ops, block, full)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCase {
    pub scope: GradScope,
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.passed
    }

    pub fn summary(&self) -> String {
        format!(
            "{} {:<28} max_rel_err={:.3e} tol={:.0e} worst=(input {}, element {})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.report.max_rel_err,
            self.report.tol,
            self.report.worst.0,
            self.report.worst.1
        )
    }
}

/// Case with the largest error relative to its tolerance.
pub fn worst_case(cases: &[GradCase]) -> Option<&GradCase> {
    cases
        .iter()
        .max_by(|a, b| (a.report.max_rel_err / a.report.tol).total_cmp(&(b.report.max_rel_err / b.report.tol)))
}

type T64 = Tensor<f64>;

/// `sum(y ⊙ w)` with `w` drawn from a fixed stream keyed by the output size.
fn reduce(y: &T64) -> Result<T64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ y.numel() as u64);
    let w = Tensor::randn(y.shape(), 1.0, &mut rng);
    Ok(y.mul(&w)?.sum())
}

fn leaf(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    Tensor::randn(shape, 1.0, rng).into_param()
}

fn leaf_from(values: Vec<f64>, shape: &[usize]) -> T64 {
    Tensor::param(values, shape).expect("shape matches values")
}

fn check(
    scope: GradScope,
    name: &str,
    tol: f64,
    inputs: &[T64],
    f: impl Fn(&[T64]) -> Result<T64>,
) -> Result<GradCase> {
    check_sampled(scope, name, tol, None, inputs, f)
}

fn check_sampled(
    scope: GradScope,
    name: &str,
    tol: f64,
    max_elements_per_input: Option<usize>,
    inputs: &[T64],
    f: impl Fn(&[T64]) -> Result<T64>,
) -> Result<GradCase> {
    let opts = GradCheckOptions {
        tol,
        max_elements_per_input,
        ..GradCheckOptions::default()
    };
    let report = grad_check(f, inputs, opts)?;
    Ok(GradCase {
        scope,
        name: name.to_string(),
        report,
    })
}

/// Nudges every parameter off its structured initial value (zeros, ones,
/// identical rows) so the check exercises generic points.
fn jitter(params: &[(String, T64)], rng: &mut ChaCha8Rng, scale: f64) {
    for (_, p) in params {
        let noise = Tensor::<f64>::randn(p.shape(), scale, rng).to_vec();
        let v: Vec<f64> = p.to_vec().iter().zip(noise).map(|(a, b)| a + b).collect();
        p.set_data(v).expect("same length");
    }
}

fn tensors(params: &[(String, T64)]) -> Vec<T64> {
    params.iter().map(|(_, t)| t.clone()).collect()
}

pub fn ops_cases(seed: u64) -> Result<Vec<GradCase>> {
    use GradScope::Ops;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let unary = |name: &str, x: T64, f: fn(&T64) -> T64| check(Ops, name, OPS_TOL, &[x], move |i| reduce(&f(&i[0])));

    out.push(check(Ops, "add (broadcast rows)", OPS_TOL, &[leaf(&[3, 4], &mut r), leaf(&[1, 4], &mut r)], |i| {
        reduce(&i[0].add(&i[1])?)
    })?);
    out.push(check(Ops, "sub (broadcast cols)", OPS_TOL, &[leaf(&[3, 4], &mut r), leaf(&[3, 1], &mut r)], |i| {
        reduce(&i[0].sub(&i[1])?)
    })?);
    out.push(check(Ops, "mul", OPS_TOL, &[leaf(&[2, 3], &mut r), leaf(&[2, 3], &mut r)], |i| {
        reduce(&i[0].mul(&i[1])?)
    })?);
    let denom: Vec<f64> = Tensor::<f64>::randn(&[2, 3], 0.3, &mut r).to_vec().iter().map(|v| 2.0 + v).collect();
    out.push(check(Ops, "div", OPS_TOL, &[leaf(&[2, 3], &mut r), leaf_from(denom, &[2, 3])], |i| {
        reduce(&i[0].div(&i[1])?)
    })?);
    out.push(unary("exp", leaf(&[2, 5], &mut r), |x| x.exp())?);
    out.push(unary("neg", leaf(&[2, 5], &mut r), |x| x.neg())?);
    out.push(unary("softplus", leaf(&[2, 5], &mut r), |x| x.softplus())?);
    out.push(unary("silu", leaf(&[2, 5], &mut r), |x| x.silu())?);
    let away: Vec<f64> = Tensor::<f64>::randn(&[2, 5], 1.0, &mut r)
        .to_vec()
        .iter()
        .map(|v| v.signum() * (1.0 + v.abs()))
        .collect();
    out.push(unary("reciprocal", leaf_from(away, &[2, 5]), |x| x.reciprocal())?);
    out.push(unary("mul_scalar", leaf(&[4], &mut r), |x| x.mul_scalar(-2.5))?);
    out.push(unary("add_scalar", leaf(&[4], &mut r), |x| x.add_scalar(0.75))?);
    out.push(check(Ops, "matmul 2x2", OPS_TOL, &[leaf(&[3, 4], &mut r), leaf(&[4, 2], &mut r)], |i| {
        reduce(&i[0].matmul(&i[1])?)
    })?);
    out.push(check(Ops, "matmul batched", OPS_TOL, &[leaf(&[2, 3, 4], &mut r), leaf(&[2, 4, 5], &mut r)], |i| {
        reduce(&i[0].matmul(&i[1])?)
    })?);
    out.push(check(Ops, "matmul rank3 x rank2", OPS_TOL, &[leaf(&[2, 3, 4], &mut r), leaf(&[4, 5], &mut r)], |i| {
        reduce(&i[0].matmul(&i[1])?)
    })?);
    out.push(check(Ops, "softmax axis 1", OPS_TOL, &[leaf(&[3, 5], &mut r)], |i| reduce(&i[0].softmax(1)?))?);
    out.push(check(Ops, "softmax axis 0", OPS_TOL, &[leaf(&[3, 5], &mut r)], |i| reduce(&i[0].softmax(0)?))?);
    out.push(check(
        Ops,
        "layer_norm",
        OPS_TOL,
        &[leaf(&[2, 8], &mut r), leaf(&[8], &mut r), leaf(&[8], &mut r)],
        |i| reduce(&i[0].layer_norm(&i[1], &i[2], 1e-5)?),
    )?);
    out.push(check(Ops, "sum", OPS_TOL, &[leaf(&[3, 4], &mut r)], |i| Ok(i[0].sum()))?);
    out.push(check(Ops, "mean", OPS_TOL, &[leaf(&[3, 4], &mut r)], |i| Ok(i[0].mean()))?);
    out.push(check(Ops, "sum_axis", OPS_TOL, &[leaf(&[3, 4], &mut r)], |i| reduce(&i[0].sum_axis(0)?))?);
    out.push(check(Ops, "mean_axis", OPS_TOL, &[leaf(&[2, 3, 4], &mut r)], |i| reduce(&i[0].mean_axis(1)?))?);
    out.push(check(Ops, "reshape", OPS_TOL, &[leaf(&[2, 6], &mut r)], |i| reduce(&i[0].reshape(&[3, 4])?.exp()))?);
    out.push(check(Ops, "permute", OPS_TOL, &[leaf(&[2, 3, 4], &mut r)], |i| {
        reduce(&i[0].permute(&[2, 0, 1])?.silu())
    })?);
    out.push(check(Ops, "transpose_last", OPS_TOL, &[leaf(&[2, 3, 4], &mut r)], |i| {
        reduce(&i[0].transpose_last()?.silu())
    })?);
    out.push(check(Ops, "narrow", OPS_TOL, &[leaf(&[2, 5, 3], &mut r)], |i| reduce(&i[0].narrow(1, 1, 3)?))?);
    out.push(check(Ops, "concat", OPS_TOL, &[leaf(&[2, 3], &mut r), leaf(&[2, 2], &mut r)], |i| {
        reduce(&Tensor::concat(&[i[0].clone(), i[1].clone()], 1)?.silu())
    })?);
    out.push(check(Ops, "flip", OPS_TOL, &[leaf(&[2, 4, 3], &mut r)], |i| reduce(&i[0].flip(1)?.silu()))?);

    // differences sit clear of the |d| = beta transition
    let target = Tensor::<f64>::new(vec![3.0, 2.0, 4.0, 1.5, 2.5, 3.5], &[6])?;
    let offsets = [0.3, -0.4, 2.0, -1.7, 0.05, 1.4];
    let pred = leaf_from(target.to_vec().iter().zip(offsets).map(|(t, d)| t + d).collect(), &[6]);
    out.push(check(Ops, "smooth_l1 (both branches)", OPS_TOL, &[pred], |i| {
        smooth_l1(&target, &i[0], SmoothL1Config::default())
    })?);

    let delta: Vec<f64> = Tensor::<f64>::randn(&[2, 6, 3], 1.0, &mut r)
        .to_vec()
        .iter()
        .map(|v| 0.05 + 0.2 * v.abs())
        .collect();
    let a: Vec<f64> = Tensor::<f64>::randn(&[3, 2], 1.0, &mut r).to_vec().iter().map(|v| -0.5 - v.abs()).collect();
    let scan_inputs = [
        leaf(&[2, 6, 3], &mut r),
        leaf_from(delta, &[2, 6, 3]),
        leaf_from(a, &[3, 2]),
        leaf(&[2, 6, 2], &mut r),
        leaf(&[2, 6, 2], &mut r),
        leaf(&[3], &mut r),
    ];
    for (name, strategy) in [
        ("selective_scan (sequential)", ScanStrategy::Sequential),
        ("selective_scan (blocked)", ScanStrategy::Blocked { block: 4 }),
    ] {
        out.push(check(Ops, name, OPS_TOL, &scan_inputs, move |i| {
            reduce(&selective_scan_op(&i[0], &i[1], &i[2], &i[3], &i[4], &i[5], strategy)?)
        })?);
    }

    let lin = Linear::<f64>::new(4, 3, true, &mut r);
    jitter(&lin.named_params("l"), &mut r, 0.3);
    let x = leaf(&[2, 5, 4], &mut r);
    let lin_inputs = vec![x, lin.weight.clone(), lin.bias.clone().unwrap()];
    out.push(check(Ops, "linear", OPS_TOL, &lin_inputs, move |i| reduce(&lin.forward(&i[0])?))?);
    Ok(out)
}

fn toy_vim() -> VimConfig {
    VimConfig {
        patch_size: 16,
        d_model: 16,
        depth: 1,
        d_state: 4,
        expand: 2,
        pool: Pool::Mean,
    }
}

pub fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    use GradScope::Block;
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_vim();
    let mut out = Vec::new();

    let ssm = SsmParams::<f64>::new(cfg.d_inner(), cfg.d_state, &mut r);
    let ssm_params = ssm.named_params("ssm");
    jitter(&ssm_params, &mut r, 0.1);
    for (name, dir) in [("ssm scan forward", Direction::Forward), ("ssm scan backward", Direction::Backward)] {
        let mut inputs = vec![leaf(&[1, 8, cfg.d_inner()], &mut r)];
        inputs.extend(tensors(&ssm_params));
        let p = ssm.clone();
        out.push(check(Block, name, BLOCK_TOL, &inputs, move |i| {
            reduce(&selective_scan(&i[0], &p, dir, ScanStrategy::default())?)
        })?);
    }

    let block = MambaBlockParams::<f64>::new(&cfg, &mut r);
    let block_params = block.named_params("block");
    jitter(&block_params, &mut r, 0.1);
    let mut inputs = vec![leaf(&[1, 8, cfg.d_model], &mut r)];
    inputs.extend(tensors(&block_params));
    out.push(check(Block, "mamba block (8 tokens)", BLOCK_TOL, &inputs, move |i| {
        reduce(&mamba_block(&i[0], &block, ScanStrategy::default())?)
    })?);

    let embed = PatchEmbed::<f64>::new(4, 8, 6, &mut r);
    let embed_params = embed.named_params("embed");
    let images = Tensor::<f64>::randn(&[2, 3, 8, 16], 1.0, &mut r);
    out.push(check(Block, "patch embedding", BLOCK_TOL, &tensors(&embed_params), move |_| {
        reduce(&embed.forward(&images)?)
    })?);

    let att = CrossAttention::<f64>::new(8, 8, 4, &mut r)?;
    let att_params = att.named_params("attn");
    jitter(&att_params, &mut r, 0.3);
    let mut inputs = vec![leaf(&[2, 8], &mut r), leaf(&[2, 5, 8], &mut r)];
    inputs.extend(tensors(&att_params));
    out.push(check(Block, "cross-attention fusion", BLOCK_TOL, &inputs, move |i| {
        reduce(&att.fuse(&i[0], &i[1])?)
    })?);

    let proj = Linear::<f64>::new(16, 16, true, &mut r);
    jitter(&proj.named_params("p"), &mut r, 0.3);
    let inputs = vec![
        leaf(&[2, 8], &mut r),
        leaf(&[2, 5, 8], &mut r),
        proj.weight.clone(),
        proj.bias.clone().unwrap(),
    ];
    out.push(check(Block, "concat fusion", BLOCK_TOL, &inputs, move |i| {
        reduce(&concat_fuse(&i[0], &i[1], &proj)?)
    })?);

    let head = MlpHead::<f64>::new(16, 8, 3.0, &mut r);
    let head_params = head.named_params("head");
    jitter(&head_params, &mut r, 0.3);
    let mut inputs = vec![leaf(&[3, 16], &mut r)];
    inputs.extend(tensors(&head_params));
    out.push(check(Block, "mlp head", HEAD_TOL, &inputs, move |i| reduce(&head.forward(&i[0])?))?);

    let channels = [3, 4, 5, 6];
    let proj = PriorProjection::<f64>::new(&channels, 8, 2, &mut r);
    let proj_params = proj.named_params("prior");
    jitter(&proj_params, &mut r, 0.3);
    let pyramids: Vec<FeaturePyramid<f64>> = (0..2)
        .map(|_| {
            let scales = channels
                .iter()
                .zip([8usize, 4, 2, 2])
                .map(|(&c, s)| FeatureMap::new(c, s, s, Tensor::<f64>::randn(&[c * s * s], 1.0, &mut r).to_vec()))
                .collect::<Result<Vec<_>>>()?;
            FeaturePyramid::new(scales)
        })
        .collect::<Result<_>>()?;
    out.push(check(Block, "prior token projection", BLOCK_TOL, &tensors(&proj_params), move |_| {
        reduce(&proj.tokens(&pyramids)?)
    })?);
    Ok(out)
}

/// Toy model: `d_model = 16`, one block, a 32×64 input giving 8 tokens.
pub fn toy_model_config(mode: FusionMode, seed: u64) -> ModelConfig {
    ModelConfig {
        image_height: 32,
        image_width: 64,
        fusion_mode: mode,
        vim: toy_vim(),
        prior: PriorEncoderConfig {
            stage_channels: vec![4, 4, 8, 8],
            seed,
            token_grid: 2,
        },
        num_heads: 4,
        d_hidden: 16,
        head_init_bias: 3.0,
        clamp_inference: false,
        seed,
    }
}

/// Elements probed per tensor for the ablation variants; the full model is
/// checked exhaustively.
pub const VARIANT_SAMPLE: usize = 256;

pub fn full_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for mode in FusionMode::ALL {
        let cfg = toy_model_config(mode, seed);
        let model = MdNet::<f64>::new(&cfg)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
        let params = model.trainable_parameters();
        jitter(&params, &mut r, 0.05);
        let images = Tensor::<f64>::randn(&[2, 3, cfg.image_height, cfg.image_width], 1.0, &mut r);
        let base = model.predict(&images, None)?;
        // targets at a fixed offset keep the loss inside one branch
        let target = Tensor::<f64>::new(base.iter().enumerate().map(|(k, v)| v + 0.3 + 0.2 * k as f64).collect(), &[2])?;
        let name = format!("mdnet forward ({})", mode.name());
        let sample = (mode != FusionMode::CrossAttention).then_some(VARIANT_SAMPLE);
        out.push(check_sampled(GradScope::Full, &name, FULL_TOL, sample, &tensors(&params), move |_| {
            smooth_l1(&target, &model.forward(&images, None)?, SmoothL1Config::default())
        })?);
    }
    Ok(out)
}

pub fn run_gradsuite(scope: GradScope, seed: u64) -> Result<Vec<GradCase>> {
    match scope {
        GradScope::Ops => ops_cases(seed),
        GradScope::Block => block_cases(seed),
        GradScope::Full => full_cases(seed),
    }
}
