//! The dual-stream regressor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{concat_fuse, mean_tokens, CrossAttention, FusionMode, MlpHead};
use crate::mamba::{VimConfig, VimStream};
use crate::nn::Linear;
use crate::prior::{FeaturePyramid, FrozenEncoder, PriorEncoderConfig, PriorProjection};
use crate::tensor::{no_grad, Real, Tensor};

pub const SCORE_RANGE: (f64, f64) = (1.0, 5.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub fusion_mode: FusionMode,
    pub vim: VimConfig,
    pub prior: PriorEncoderConfig,
    pub num_heads: usize,
    pub d_hidden: usize,
    /// Initial output bias of the head; the middle of the score range.
    pub head_init_bias: f64,
    /// Clamp predictions to the score range at inference time only.
    pub clamp_inference: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 224,
            image_width: 224,
            fusion_mode: FusionMode::CrossAttention,
            vim: VimConfig::default(),
            prior: PriorEncoderConfig::default(),
            num_heads: 4,
            d_hidden: 256,
            head_init_bias: 3.0,
            clamp_inference: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vim.validate()?;
        self.prior.validate()?;
        self.vim.tokens(self.image_height, self.image_width)?;
        if self.d_hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        if self.num_heads == 0 || self.vim.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} attention heads",
                self.vim.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    /// Width entering the regression head.
    pub fn fused_width(&self) -> usize {
        match self.fusion_mode {
            FusionMode::CrossAttention | FusionMode::Concat => 2 * self.vim.d_model,
            FusionMode::PriorOnly | FusionMode::MambaOnly => self.vim.d_model,
        }
    }
}

pub struct MdNet<T: Real> {
    cfg: ModelConfig,
    pub encoder: FrozenEncoder<T>,
    pub prior_proj: PriorProjection<T>,
    pub vim: VimStream<T>,
    pub attention: Option<CrossAttention<T>>,
    pub concat_proj: Option<Linear<T>>,
    pub head: MlpHead<T>,
}

impl<T: Real> MdNet<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.vim.d_model;
        let encoder = FrozenEncoder::new(&cfg.prior)?;
        let prior_proj = PriorProjection::new(&cfg.prior.stage_channels, d, cfg.prior.token_grid, &mut rng);
        let tokens = cfg.vim.tokens(cfg.image_height, cfg.image_width)?;
        let vim = VimStream::new(&cfg.vim, tokens, &mut rng)?;
        let attention = match cfg.fusion_mode {
            FusionMode::CrossAttention => Some(CrossAttention::new(d, d, cfg.num_heads, &mut rng)?),
            _ => None,
        };
        let concat_proj = match cfg.fusion_mode {
            FusionMode::Concat => Some(Linear::new(2 * d, 2 * d, true, &mut rng)),
            _ => None,
        };
        let head = MlpHead::new(cfg.fused_width(), cfg.d_hidden, cfg.head_init_bias, &mut rng);
        Ok(MdNet {
            cfg: cfg.clone(),
            encoder,
            prior_proj,
            vim,
            attention,
            concat_proj,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> FusionMode {
        self.cfg.fusion_mode
    }

    /// Every trainable tensor the model owns, in a stable order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.prior_proj.named_params("prior.proj");
        out.extend(self.vim.named_params("vim"));
        if let Some(a) = &self.attention {
            out.extend(a.named_params("fusion.attn"));
        }
        if let Some(p) = &self.concat_proj {
            out.extend(p.named_params("fusion.concat"));
        }
        out.extend(self.head.named_params("head"));
        out
    }

    /// Parameters on the active mode's computation path; what the optimizer sees.
    pub fn trainable_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mode = self.mode();
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| {
                (mode.uses_prior() || !name.starts_with("prior.")) && (mode.uses_mamba() || !name.starts_with("vim."))
            })
            .collect()
    }

    /// Parameters of the stream the active mode leaves out.
    pub fn excluded_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let keep: Vec<u64> = self.trainable_parameters().iter().map(|(_, t)| t.id()).collect();
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| !keep.contains(&t.id()))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn frozen_parameters(&self) -> Vec<(String, Tensor<T>)> {
        self.encoder.frozen_parameters()
    }

    /// Predicted scores `[b]` for `images: [b, 3, H, W]`. Precomputed
    /// pyramids replace the surrogate encoder when supplied.
    pub fn forward(&self, images: &Tensor<T>, pyramids: Option<&[FeaturePyramid<T>]>) -> Result<Tensor<T>> {
        if images.rank() != 4
            || images.dim(1) != 3
            || images.dim(2) != self.cfg.image_height
            || images.dim(3) != self.cfg.image_width
        {
            return Err(Error::dim(format!(
                "model expects [b, 3, {}, {}], got {:?}",
                self.cfg.image_height,
                self.cfg.image_width,
                images.shape()
            )));
        }
        let mode = self.mode();
        let tokens = if mode.uses_prior() {
            Some(self.prior_tokens(images, pyramids)?)
        } else {
            None
        };
        let g = if mode.uses_mamba() {
            Some(self.vim.forward(images)?)
        } else {
            None
        };
        let fused = match (mode, g, tokens) {
            (FusionMode::CrossAttention, Some(g), Some(t)) => self
                .attention
                .as_ref()
                .ok_or_else(|| Error::Config("cross-attention parameters missing".into()))?
                .fuse(&g, &t)?,
            (FusionMode::Concat, Some(g), Some(t)) => {
                let proj = self
                    .concat_proj
                    .as_ref()
                    .ok_or_else(|| Error::Config("concatenation projection missing".into()))?;
                concat_fuse(&g, &t, proj)?
            }
            (FusionMode::PriorOnly, _, Some(t)) => mean_tokens(&t)?,
            (FusionMode::MambaOnly, Some(g), _) => g,
            _ => unreachable!("stream selection follows the mode"),
        };
        self.head.forward(&fused)
    }

    fn prior_tokens(&self, images: &Tensor<T>, pyramids: Option<&[FeaturePyramid<T>]>) -> Result<Tensor<T>> {
        match pyramids {
            Some(p) => {
                if p.len() != images.dim(0) {
                    return Err(Error::dim(format!(
                        "{} pyramids for a batch of {}",
                        p.len(),
                        images.dim(0)
                    )));
                }
                self.prior_proj.tokens(p)
            }
            None => {
                let p = self.encoder.extract_features(images)?;
                self.prior_proj.tokens(&p)
            }
        }
    }

    /// Graph-free inference, clamped when the config asks for it.
    pub fn predict(&self, images: &Tensor<T>, pyramids: Option<&[FeaturePyramid<T>]>) -> Result<Vec<f64>> {
        let y = no_grad(|| self.forward(images, pyramids))?;
        let mut out = y.to_f64_vec();
        if self.cfg.clamp_inference {
            for v in &mut out {
                *v = v.clamp(SCORE_RANGE.0, SCORE_RANGE.1);
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite prediction".into()));
        }
        Ok(out)
    }
}
