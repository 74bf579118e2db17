//! Stream fusion and the regression head.
//!
//! The global vector attends over the prior tokens with a single query per
//! head. The fused representation is `[g ; W_o · context]`, so its width is
//! `2·d_model`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    CrossAttention,
    Concat,
    PriorOnly,
    MambaOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::CrossAttention,
        FusionMode::PriorOnly,
        FusionMode::MambaOnly,
        FusionMode::Concat,
    ];

    pub fn uses_prior(self) -> bool {
        self != FusionMode::MambaOnly
    }

    pub fn uses_mamba(self) -> bool {
        self != FusionMode::PriorOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Concat => "concat",
            FusionMode::PriorOnly => "prior_only",
            FusionMode::MambaOnly => "mamba_only",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention<T: Real> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_o: Linear<T>,
    pub num_heads: usize,
}

impl<T: Real> CrossAttention<T> {
    pub fn new(d_model: usize, d_attn: usize, num_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if num_heads == 0 || d_attn % num_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d_attn} not divisible by {num_heads} heads"
            )));
        }
        let w_q = Linear::new(d_model, d_attn, false, rng);
        // zero query: attention starts as uniform pooling over the tokens
        w_q.weight.set_data(vec![T::zero(); d_model * d_attn])?;
        Ok(CrossAttention {
            w_q,
            w_k: Linear::new(d_model, d_attn, false, rng),
            w_v: Linear::new(d_model, d_attn, false, rng),
            w_o: Linear::new(d_attn, d_model, false, rng),
            num_heads,
        })
    }

    fn d_head(&self) -> usize {
        self.w_q.out_features() / self.num_heads
    }

    /// Splits `[b, n, d_attn]` into `[b·heads, n, d_head]`.
    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, n) = (x.dim(0), x.dim(1));
        let (h, dh) = (self.num_heads, self.d_head());
        x.reshape(&[b, n, h, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[b * h, n, dh])
    }

    /// Attention weights `[b·heads, 1, n]` and the head-merged context `[b, d_attn]`.
    pub fn attend(&self, g: &Tensor<T>, tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        check_inputs(g, tokens)?;
        let b = g.dim(0);
        let q = self.split_heads(&self.w_q.forward(g)?.reshape(&[b, 1, self.w_q.out_features()])?)?;
        let k = self.split_heads(&self.w_k.forward(tokens)?)?;
        let v = self.split_heads(&self.w_v.forward(tokens)?)?;
        let logits = q.matmul(&k.transpose_last()?)?.mul_scalar(1.0 / (self.d_head() as f64).sqrt());
        let alpha = logits.softmax(2)?;
        let ctx = alpha
            .matmul(&v)?
            .reshape(&[b, self.num_heads * self.d_head()])?;
        Ok((alpha, ctx))
    }

    /// `[b, d]`, `[b, n, d]` -> `[b, 2·d]`.
    pub fn fuse(&self, g: &Tensor<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, ctx) = self.attend(g, tokens)?;
        Tensor::concat(&[g.clone(), self.w_o.forward(&ctx)?], 1)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.w_q.named_params(&format!("{prefix}.w_q"));
        out.extend(self.w_k.named_params(&format!("{prefix}.w_k")));
        out.extend(self.w_v.named_params(&format!("{prefix}.w_v")));
        out.extend(self.w_o.named_params(&format!("{prefix}.w_o")));
        out
    }
}

fn check_inputs<T: Real>(g: &Tensor<T>, tokens: &Tensor<T>) -> Result<()> {
    if tokens.rank() != 3 || g.rank() != 2 || tokens.dim(0) != g.dim(0) || tokens.dim(2) != g.dim(1) {
        return Err(Error::dim(format!(
            "fusion expects g [b, d] and tokens [b, n, d], got {:?} and {:?}",
            g.shape(),
            tokens.shape()
        )));
    }
    if tokens.dim(1) == 0 {
        return Err(Error::Contract("fusion needs at least one prior token".into()));
    }
    Ok(())
}

/// Token mean `[b, n, d] -> [b, d]`.
pub fn mean_tokens<T: Real>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    if tokens.rank() != 3 {
        return Err(Error::dim(format!("expected [b, n, d], got {:?}", tokens.shape())));
    }
    if tokens.dim(1) == 0 {
        return Err(Error::Contract("fusion needs at least one prior token".into()));
    }
    tokens.mean_axis(1)
}

/// Attention-free variant: `proj([g ; mean(tokens)])`.
pub fn concat_fuse<T: Real>(g: &Tensor<T>, tokens: &Tensor<T>, proj: &Linear<T>) -> Result<Tensor<T>> {
    check_inputs(g, tokens)?;
    proj.forward(&Tensor::concat(&[g.clone(), mean_tokens(tokens)?], 1)?)
}

#[derive(Debug, Clone)]
pub struct MlpHead<T: Real> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> MlpHead<T> {
    pub fn new(d_in: usize, d_hidden: usize, init_bias: f64, rng: &mut impl Rng) -> Self {
        let out = Linear::new(d_hidden, 1, true, rng);
        if let Some(b) = &out.bias {
            b.set_data(vec![T::lit(init_bias)]).unwrap();
        }
        MlpHead {
            hidden: Linear::new(d_in, d_hidden, true, rng),
            out,
        }
    }

    /// `[b, d_in] -> [b]`.
    pub fn forward(&self, fused: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.out.forward(&self.hidden.forward(fused)?.silu())?;
        y.reshape(&[fused.dim(0)])
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = self.hidden.named_params(&format!("{prefix}.hidden"));
        out.extend(self.out.named_params(&format!("{prefix}.out")));
        out
    }
}
