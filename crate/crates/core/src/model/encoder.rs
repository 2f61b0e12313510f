use super::{EncoderConfig, EncoderKind, ParamSet};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::{Graph, SeededRng, Tensor, Var};

/// Times below this are clamped before the log-time embedding.
pub const TIME_FLOOR: f64 = 0.002;

const SIGMA_DATA: f64 = 0.5;
const MAX_FREQUENCY: f64 = 100.0;

/// Input scaling `1 / sqrt(sigma_data^2 + t^2)` with `sigma_data = 0.5`.
pub fn input_scale(t: f64) -> f64 {
    1.0 / (SIGMA_DATA * SIGMA_DATA + t * t).sqrt()
}

/// Sinusoidal features of `ln(t) / 4` with frequencies log-spaced in
/// `[1, 100]`: cosines first, then sines.
pub fn time_features(t: f64, count: usize) -> Vec<f64> {
    let u = t.max(TIME_FLOOR).ln() / 4.0;
    let half = count / 2;
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            MAX_FREQUENCY.powf(k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(count);
    out.extend((0..half).map(|k| (u * freq(k)).cos()));
    out.extend((0..half).map(|k| (u * freq(k)).sin()));
    out
}

/// Sequential reader over bound parameters, in initialization order.
struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    fn next(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.pos)
            .copied()
            .ok_or_else(|| shape_err!("parameter set exhausted after {} tensors", self.pos))?;
        self.pos += 1;
        Ok(v)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.vars.len() {
            return Err(shape_err!(
                "parameter set has {} tensors, forward pass used {}",
                self.vars.len(),
                self.pos
            ));
        }
        Ok(())
    }
}

fn linear(g: &mut Graph, x: Var, c: &mut Cursor) -> Result<Var> {
    let w = c.next()?;
    let b = c.next()?;
    let y = g.matmul(x, w, false)?;
    g.add_row(y, b)
}

fn affine_norm(g: &mut Graph, x: Var, c: &mut Cursor) -> Result<Var> {
    let gain = c.next()?;
    let bias = c.next()?;
    let y = g.layer_norm(x)?;
    let y = g.mul_row(y, gain)?;
    g.add_row(y, bias)
}

/// Scaled pixels of `x` as a `[B, C*H*W]` matrix; checks shapes and times.
fn scaled_input(config: &EncoderConfig, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
    let per = config.input_len();
    if t.is_empty() || x.shape()[0] != t.len() || x.len() != t.len() * per {
        return Err(shape_err!(
            "encoder expects {} rows of {per} values, got shape {:?}",
            t.len(),
            x.shape()
        ));
    }
    if let Some(bad) = t.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid!("encoder time must be finite and nonnegative, got {bad}"));
    }
    let mut data = x.data().to_vec();
    for (row, &ti) in data.chunks_mut(per).zip(t) {
        let s = input_scale(ti);
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(data)
}

/// Representation `g_theta(x, t)` for each row of `x`; shape `[B, width]`.
pub fn encode(
    g: &mut Graph,
    config: &EncoderConfig,
    theta: &[Var],
    x: &Tensor,
    t: &[f64],
) -> Result<Var> {
    let pixels = scaled_input(config, x, t)?;
    let mut c = Cursor::new(theta);
    let out = match config.kind {
        EncoderKind::Vit => vit_forward(g, config, &mut c, &pixels, t)?,
        EncoderKind::Mlp => mlp_forward(g, config, &mut c, &pixels, t)?,
    };
    c.finish()?;
    Ok(out)
}

fn mlp_forward(
    g: &mut Graph,
    config: &EncoderConfig,
    c: &mut Cursor,
    pixels: &[f64],
    t: &[f64],
) -> Result<Var> {
    let per = config.input_len();
    let f = config.time_features;
    let mut input = Vec::with_capacity(t.len() * (per + f));
    for (row, &ti) in pixels.chunks(per).zip(t) {
        input.extend_from_slice(row);
        input.extend(time_features(ti, f));
    }
    let mut h = g.constant(Tensor::new(vec![t.len(), per + f], input)?);
    for _ in 0..3 {
        h = linear(g, h, c)?;
        h = g.gelu(h)?;
    }
    linear(g, h, c)
}

/// Rearranges images into `[B * patches, C * p * p]`, patches in row-major
/// grid order, each patch channel-major then row-major.
fn patchify(config: &EncoderConfig, pixels: &[f64]) -> Vec<f64> {
    let [channels, height, width] = config.input_shape;
    let p = config.patch_size;
    let (gh, gw) = (height / p, width / p);
    let mut out = Vec::with_capacity(pixels.len());
    for img in pixels.chunks(channels * height * width) {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..channels {
                    for dy in 0..p {
                        let row = (ch * height + py * p + dy) * width + px * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    out
}

fn vit_forward(
    g: &mut Graph,
    config: &EncoderConfig,
    c: &mut Cursor,
    pixels: &[f64],
    t: &[f64],
) -> Result<Var> {
    let b = t.len();
    let p = config.patch_size;
    let patches = config.patches();
    let tokens = patches + 1;
    let d = config.width;
    let patch_len = config.input_shape[0] * p * p;

    let patch_data = patchify(config, pixels);
    let patch_in = g.constant(Tensor::new(vec![b * patches, patch_len], patch_data)?);
    let emb = linear(g, patch_in, c)?;
    let emb = g.reshape(emb, &[b, patches, d])?;

    let cls = c.next()?;
    let cls = g.select_rows(cls, &vec![0; b])?;
    let cls = g.reshape(cls, &[b, 1, d])?;
    let x = g.concat(&[cls, emb], 1)?;
    let x = g.reshape(x, &[b, tokens * d])?;
    let pos = c.next()?;
    let pos = g.select_rows(pos, &vec![0; b])?;
    let x = g.add(x, pos)?;
    let x = g.reshape(x, &[b * tokens, d])?;

    let f = config.time_features;
    let mut feats = Vec::with_capacity(b * tokens * f);
    for &ti in t {
        let row = time_features(ti, f);
        for _ in 0..tokens {
            feats.extend_from_slice(&row);
        }
    }
    let feats = g.constant(Tensor::new(vec![b * tokens, f], feats)?);
    let temb = linear(g, feats, c)?;
    let mut x = g.add(x, temb)?;

    let heads = config.heads;
    let dh = d / heads;
    let attn_scale = 1.0 / (dh as f64).sqrt();
    for _ in 0..config.depth {
        let h = affine_norm(g, x, c)?;
        let split = |g: &mut Graph, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, tokens, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            g.reshape(v, &[b * heads, tokens, dh])
        };
        let q = linear(g, h, c)?;
        let q = split(g, q)?;
        let k = linear(g, h, c)?;
        let k = split(g, k)?;
        let v = linear(g, h, c)?;
        let v = split(g, v)?;
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, attn_scale)?;
        let attn = g.softmax(scores)?;
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, heads, tokens, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * tokens, d])?;
        let out = linear(g, ctx, c)?;
        x = g.add(x, out)?;

        let h = affine_norm(g, x, c)?;
        let h = linear(g, h, c)?;
        let h = g.gelu(h)?;
        let h = linear(g, h, c)?;
        x = g.add(x, h)?;
    }
    let x = affine_norm(g, x, c)?;
    let cls_rows: Vec<usize> = (0..b).map(|i| i * tokens).collect();
    g.select_rows(x, &cls_rows)
}

fn check_rep(g: &Graph, rep: Var, config: &EncoderConfig) -> Result<()> {
    let s = g.value(rep).shape();
    if s.len() != 2 || s[1] != config.width {
        return Err(shape_err!("representation shape {s:?}, expected [B, {}]", config.width));
    }
    Ok(())
}

/// Projector `p_nu`: three affine layers with GELU between them.
pub fn project(g: &mut Graph, config: &EncoderConfig, nu: &[Var], rep: Var) -> Result<Var> {
    check_rep(g, rep, config)?;
    let mut c = Cursor::new(nu);
    let h = linear(g, rep, &mut c)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, &mut c)?;
    let h = g.gelu(h)?;
    let out = linear(g, h, &mut c)?;
    c.finish()?;
    Ok(out)
}

/// Linear head `h_omega`.
pub fn classify(g: &mut Graph, config: &EncoderConfig, omega: &[Var], rep: Var) -> Result<Var> {
    check_rep(g, rep, config)?;
    let mut c = Cursor::new(omega);
    let out = linear(g, rep, &mut c)?;
    c.finish()?;
    Ok(out)
}

fn lecun(rng: &mut SeededRng, fan_in: usize, fan_out: usize) -> Tensor {
    let mut data = vec![0.0; fan_in * fan_out];
    rng.fill_gaussian(&mut data);
    let s = 1.0 / (fan_in as f64).sqrt();
    data.iter_mut().for_each(|v| *v *= s);
    Tensor::new(vec![fan_in, fan_out], data).expect("positive dims")
}

fn small_normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    rng.fill_gaussian(t.data_mut());
    t.map(|v| 0.02 * v)
}

fn push_linear(set: &mut ParamSet, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize) {
    set.push(format!("{name}_w"), lecun(rng, fan_in, fan_out));
    set.push(format!("{name}_b"), Tensor::zeros(&[fan_out]));
}

/// Transformer-block linear layer with N(0, 0.02^2) weights.
fn push_block_linear(set: &mut ParamSet, rng: &mut SeededRng, name: &str, fan_in: usize, fan_out: usize) {
    set.push(format!("{name}_w"), small_normal(rng, &[fan_in, fan_out]));
    set.push(format!("{name}_b"), Tensor::zeros(&[fan_out]));
}

fn push_norm(set: &mut ParamSet, name: &str, d: usize) {
    set.push(format!("{name}_gain"), Tensor::full(&[d], 1.0));
    set.push(format!("{name}_bias"), Tensor::zeros(&[d]));
}

pub(super) fn init_encoder(config: &EncoderConfig, rng: &mut SeededRng) -> ParamSet {
    let mut set = ParamSet::new();
    let d = config.width;
    match config.kind {
        EncoderKind::Mlp => {
            let h = config.mlp_hidden;
            push_linear(&mut set, rng, "hidden0", config.input_len() + config.time_features, h);
            push_linear(&mut set, rng, "hidden1", h, h);
            push_linear(&mut set, rng, "hidden2", h, h);
            push_linear(&mut set, rng, "out", h, d);
        }
        EncoderKind::Vit => {
            let p = config.patch_size;
            push_linear(&mut set, rng, "patch", config.input_shape[0] * p * p, d);
            set.push("cls", small_normal(rng, &[1, d]));
            set.push("pos", small_normal(rng, &[1, config.tokens() * d]));
            push_linear(&mut set, rng, "time", config.time_features, d);
            for l in 0..config.depth {
                push_norm(&mut set, &format!("block{l}_norm1"), d);
                for which in ["q", "k", "v", "o"] {
                    push_block_linear(&mut set, rng, &format!("block{l}_{which}"), d, d);
                }
                push_norm(&mut set, &format!("block{l}_norm2"), d);
                push_block_linear(&mut set, rng, &format!("block{l}_fc1"), d, config.mlp_hidden);
                push_block_linear(&mut set, rng, &format!("block{l}_fc2"), config.mlp_hidden, d);
            }
            push_norm(&mut set, "final_norm", d);
        }
    }
    set
}

pub(super) fn init_projector(config: &EncoderConfig, rng: &mut SeededRng) -> ParamSet {
    let mut set = ParamSet::new();
    let h = config.projector_hidden;
    push_linear(&mut set, rng, "proj0", config.width, h);
    push_linear(&mut set, rng, "proj1", h, h);
    push_linear(&mut set, rng, "proj2", h, config.projector_out);
    set
}

pub(super) fn init_head(config: &EncoderConfig, rng: &mut SeededRng) -> ParamSet {
    let mut set = ParamSet::new();
    push_linear(&mut set, rng, "head", config.width, config.num_classes);
    set
}
