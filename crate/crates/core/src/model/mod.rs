//! Time-conditioned encoder, projector and linear head, with EMA mirrors.

mod encoder;
mod optim;

pub use encoder::{classify, encode, input_scale, project, time_features, TIME_FLOOR};
pub use optim::{AdamW, AdamWConfig};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Patch tokens, class token, pre-norm transformer blocks.
    Vit,
    /// Flattened pixels with concatenated time features and three hidden layers.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    /// Hidden size of the transformer MLP, or of the MLP encoder layers.
    pub mlp_hidden: usize,
    /// Number of sinusoidal time features (even).
    pub time_features: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Vit,
            input_shape: [1, 8, 8],
            patch_size: 4,
            depth: 4,
            width: 128,
            heads: 4,
            mlp_hidden: 256,
            time_features: 32,
            projector_hidden: 256,
            projector_out: 64,
            num_classes: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape;
        let positive = [
            c,
            h,
            w,
            self.patch_size,
            self.width,
            self.heads,
            self.mlp_hidden,
            self.time_features,
            self.projector_hidden,
            self.projector_out,
            self.num_classes,
        ];
        if positive.contains(&0) {
            return Err(invalid!("encoder sizes must be positive: {self:?}"));
        }
        if self.time_features % 2 != 0 {
            return Err(invalid!("time_features must be even, got {}", self.time_features));
        }
        if self.kind == EncoderKind::Vit {
            if h % self.patch_size != 0 || w % self.patch_size != 0 {
                return Err(invalid!(
                    "image {h}x{w} is not divisible into {p}x{p} patches",
                    p = self.patch_size
                ));
            }
            if self.width % self.heads != 0 {
                return Err(invalid!("width {} not divisible by {} heads", self.width, self.heads));
            }
        }
        Ok(())
    }

    /// Flattened pixel count `C * H * W`.
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub(crate) fn patches(&self) -> usize {
        let [_, h, w] = self.input_shape;
        (h / self.patch_size) * (w / self.patch_size)
    }

    /// Tokens per image including the class token.
    pub(crate) fn tokens(&self) -> usize {
        self.patches() + 1
    }
}

/// Ordered named tensors. Forward passes consume entries in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every tensor to `g` as a trainable leaf or as a constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(shape_err!(
                "parameter sets hold {} and {} tensors",
                self.entries.len(),
                other.entries.len()
            ));
        }
        for ((na, a), (nb, b)) in self.entries.iter().zip(&other.entries) {
            if na != nb || a.shape() != b.shape() {
                return Err(shape_err!("{na}{:?} vs {nb}{:?}", a.shape(), b.shape()));
            }
        }
        Ok(())
    }
}

/// `target <- mu * target + (1 - mu) * online`, elementwise.
pub fn ema_update(target: &mut ParamSet, online: &ParamSet, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(invalid!("EMA rate must lie in [0, 1], got {mu}"));
    }
    target.check_same_layout(online)?;
    for (t, o) in target.tensors_mut().zip(online.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(o.data()) {
            *a = mu * *a + (1.0 - mu) * b;
        }
    }
    Ok(())
}

/// Encoder `theta`, head `omega`, projector `nu`, and the EMA targets used
/// by the contrastive term (`theta_ema`, `nu_ema`). `theta_consistency_ema`
/// exists only when the consistency target runs with a positive EMA rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub theta: ParamSet,
    pub omega: ParamSet,
    pub nu: ParamSet,
    pub theta_ema: ParamSet,
    pub nu_ema: ParamSet,
    pub theta_consistency_ema: Option<ParamSet>,
}

impl ModelParams {
    /// Random initialization; both EMA targets start as copies of the online
    /// parameters.
    pub fn init(config: &EncoderConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let theta = encoder::init_encoder(config, rng);
        let nu = encoder::init_projector(config, rng);
        let omega = encoder::init_head(config, rng);
        Ok(Self {
            config: config.clone(),
            theta_ema: theta.clone(),
            nu_ema: nu.clone(),
            theta,
            omega,
            nu,
            theta_consistency_ema: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let mut scratch = SeededRng::new(0);
        let reference = Self::init(&self.config, &mut scratch)?;
        self.theta.check_same_layout(&reference.theta)?;
        self.theta_ema.check_same_layout(&reference.theta)?;
        self.omega.check_same_layout(&reference.omega)?;
        self.nu.check_same_layout(&reference.nu)?;
        self.nu_ema.check_same_layout(&reference.nu)?;
        if let Some(c) = &self.theta_consistency_ema {
            c.check_same_layout(&reference.theta)?;
        }
        Ok(())
    }

    /// Parameter count of the deployed model (encoder, head and projector).
    pub fn parameter_count(&self) -> usize {
        self.theta.numel() + self.omega.numel() + self.nu.numel()
    }

    /// Gradient-free representations for a batch `x` at per-row times `t`.
    pub fn represent(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let theta = self.theta.bind(&mut g, false);
        let rep = encode(&mut g, &self.config, &theta, x, t)?;
        Ok(g.value(rep).clone())
    }

    /// Gradient-free logits `h(g(x, t))`.
    pub fn logits(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let theta = self.theta.bind(&mut g, false);
        let omega = self.omega.bind(&mut g, false);
        let rep = encode(&mut g, &self.config, &theta, x, t)?;
        let logits = classify(&mut g, &self.config, &omega, rep)?;
        Ok(g.value(logits).clone())
    }
}
