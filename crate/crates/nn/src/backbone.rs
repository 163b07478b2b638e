//! U-Net and DiT denoisers that expose intermediate feature taps.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repap_core::{Error, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::graph::Var;
use crate::params::{Ctx, SpecBuilder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Unet,
    Dit,
}

/// Where a feature tensor is read from. Stages are numbered from 1 in
/// forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapPosition {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
    Block(usize),
    /// The denoiser output itself, decoded by the identity.
    Output,
}

impl fmt::Display for TapPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapPosition::Encoder(k) => write!(f, "encoder_{k}"),
            TapPosition::Bottleneck => write!(f, "bottleneck"),
            TapPosition::Decoder(k) => write!(f, "decoder_{k}"),
            TapPosition::Block(k) => write!(f, "block_{k}"),
            TapPosition::Output => write!(f, "output"),
        }
    }
}

impl FromStr for TapPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("unknown tap position '{s}'"));
        match s {
            "bottleneck" => return Ok(TapPosition::Bottleneck),
            "output" => return Ok(TapPosition::Output),
            _ => {}
        }
        let (kind, idx) = s.rsplit_once('_').ok_or_else(bad)?;
        let k: usize = idx.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match kind {
            "encoder" => Ok(TapPosition::Encoder(k)),
            "decoder" => Ok(TapPosition::Decoder(k)),
            "block" => Ok(TapPosition::Block(k)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for TapPosition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TapPosition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub num_res_blocks: usize,
    pub dropout: f64,
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk_unet(2, 2, 32, 32)
    }
}

impl BackboneConfig {
    pub fn desk_unet(in_channels: usize, out_channels: usize, height: usize, width: usize) -> Self {
        Self {
            kind: BackboneKind::Unet,
            in_channels,
            out_channels,
            height,
            width,
            base_channels: 8,
            channel_mult: vec![1, 2, 4],
            attention_resolutions: vec![],
            num_res_blocks: 2,
            dropout: 0.0,
            depth: 4,
            hidden: 64,
            heads: 4,
            patch: 4,
            mlp_ratio: 4,
        }
    }

    pub fn desk_dit(in_channels: usize, out_channels: usize, height: usize, width: usize) -> Self {
        Self {
            kind: BackboneKind::Dit,
            ..Self::desk_unet(in_channels, out_channels, height, width)
        }
    }

    pub fn full_unet_darcy() -> Self {
        Self {
            base_channels: 32,
            channel_mult: vec![1, 2, 4, 8],
            attention_resolutions: vec![8, 16],
            ..Self::desk_unet(2, 2, 64, 64)
        }
    }

    pub fn full_unet_topology() -> Self {
        Self {
            base_channels: 128,
            dropout: 0.1,
            ..Self {
                in_channels: 4,
                out_channels: 1,
                ..Self::full_unet_darcy()
            }
        }
    }

    pub fn full_unet_charge() -> Self {
        Self {
            channel_mult: vec![1, 2, 4],
            attention_resolutions: vec![16],
            ..Self {
                in_channels: 2,
                out_channels: 1,
                ..Self::full_unet_darcy()
            }
        }
    }

    pub fn full_dit(in_channels: usize, out_channels: usize, height: usize, width: usize) -> Self {
        Self {
            kind: BackboneKind::Dit,
            depth: 8,
            hidden: 256,
            heads: 8,
            patch: 4,
            mlp_ratio: 4,
            ..Self::desk_unet(in_channels, out_channels, height, width)
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BackboneKind::Unet => {
                if self.channel_mult.is_empty() || self.base_channels == 0 || self.num_res_blocks == 0 {
                    return Err(Error::Argument("U-Net needs levels, width and res blocks".into()));
                }
                let f = 1usize << (self.levels() - 1);
                if self.height % f != 0 || self.width % f != 0 {
                    return Err(Error::Argument(format!(
                        "resolution {}x{} not divisible by 2^{}",
                        self.height,
                        self.width,
                        self.levels() - 1
                    )));
                }
            }
            BackboneKind::Dit => {
                if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
                    return Err(Error::Argument(format!(
                        "resolution {}x{} not divisible by patch {}",
                        self.height, self.width, self.patch
                    )));
                }
                if self.heads == 0 || self.hidden % self.heads != 0 || self.hidden % 2 != 0 {
                    return Err(Error::Argument("DiT width must be even and divisible by heads".into()));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Every tap the forward pass emits, in forward order.
    pub fn tap_positions(&self) -> Vec<TapPosition> {
        match self.kind {
            BackboneKind::Unet => {
                let l = self.levels();
                let mut v: Vec<_> = (1..=l).map(TapPosition::Encoder).collect();
                v.push(TapPosition::Bottleneck);
                v.extend((1..=l).map(TapPosition::Decoder));
                v
            }
            BackboneKind::Dit => (1..=self.depth).map(TapPosition::Block).collect(),
        }
    }

    /// `(channels, height, width)` of the tensor at a tap.
    pub fn tap_shape(&self, pos: TapPosition) -> Option<(usize, usize, usize)> {
        match (self.kind, pos) {
            (_, TapPosition::Output) => Some((self.out_channels, self.height, self.width)),
            (BackboneKind::Unet, TapPosition::Encoder(k)) if k >= 1 && k <= self.levels() => {
                let f = 1 << (k - 1);
                Some((self.base_channels * self.channel_mult[k - 1], self.height / f, self.width / f))
            }
            (BackboneKind::Unet, TapPosition::Bottleneck) => {
                let l = self.levels();
                let f = 1 << (l - 1);
                Some((self.base_channels * self.channel_mult[l - 1], self.height / f, self.width / f))
            }
            (BackboneKind::Unet, TapPosition::Decoder(k)) if k >= 1 && k <= self.levels() => {
                let lvl = self.levels() - k;
                let f = 1 << lvl;
                Some((self.base_channels * self.channel_mult[lvl], self.height / f, self.width / f))
            }
            (BackboneKind::Dit, TapPosition::Block(k)) if k >= 1 && k <= self.depth => {
                Some((self.hidden, self.height / self.patch, self.width / self.patch))
            }
            _ => None,
        }
    }

    pub fn param_specs(&self) -> SpecBuilder {
        let mut b = SpecBuilder::default();
        match self.kind {
            BackboneKind::Unet => unet_specs(self, &mut b),
            BackboneKind::Dit => dit_specs(self, &mut b),
        }
        b
    }
}

/// Exact trainable-parameter count.
pub fn count_parameters(cfg: &BackboneConfig) -> usize {
    cfg.param_specs().count()
}

pub const BACKBONE_NS: &str = "backbone.";

fn groups_for(c: usize) -> usize {
    (1..=8).rev().find(|g| c % g == 0).unwrap_or(1)
}

fn unet_attn_at(cfg: &BackboneConfig, level: usize) -> bool {
    cfg.attention_resolutions.contains(&(cfg.height >> level))
}

fn res_specs(b: &mut SpecBuilder, name: &str, ci: usize, co: usize, temb: usize) {
    b.norm(&format!("{name}.n1"), ci);
    b.conv(&format!("{name}.c1"), ci, co, 3);
    b.linear(&format!("{name}.emb"), temb, co);
    b.norm(&format!("{name}.n2"), co);
    b.conv(&format!("{name}.c2"), co, co, 3);
    if ci != co {
        b.conv(&format!("{name}.skip"), ci, co, 1);
    }
}

fn attn_specs(b: &mut SpecBuilder, name: &str, c: usize) {
    b.norm(&format!("{name}.n"), c);
    b.linear(&format!("{name}.qkv"), c, 3 * c);
    b.linear(&format!("{name}.proj"), c, c);
}

fn unet_specs(cfg: &BackboneConfig, b: &mut SpecBuilder) {
    let base = cfg.base_channels;
    let p = BACKBONE_NS;
    b.linear(&format!("{p}temb.l1"), base, base);
    b.linear(&format!("{p}temb.l2"), base, base);
    b.conv(&format!("{p}in"), cfg.in_channels, base, 3);
    let mut ch = base;
    let mut skips = Vec::new();
    for (l, &m) in cfg.channel_mult.iter().enumerate() {
        for r in 0..cfg.num_res_blocks {
            res_specs(b, &format!("{p}enc{l}.res{r}"), ch, base * m, base);
            ch = base * m;
            if unet_attn_at(cfg, l) {
                attn_specs(b, &format!("{p}enc{l}.attn{r}"), ch);
            }
        }
        skips.push(ch);
    }
    res_specs(b, &format!("{p}mid"), ch, ch, base);
    for (l, &m) in cfg.channel_mult.iter().enumerate().rev() {
        let s = skips.pop().unwrap();
        for r in 0..cfg.num_res_blocks {
            let ci = if r == 0 { ch + s } else { ch };
            res_specs(b, &format!("{p}dec{l}.res{r}"), ci, base * m, base);
            ch = base * m;
            if unet_attn_at(cfg, l) {
                attn_specs(b, &format!("{p}dec{l}.attn{r}"), ch);
            }
        }
    }
    b.norm(&format!("{p}out.n"), ch);
    b.conv(&format!("{p}out.c"), ch, cfg.out_channels, 3);
}

fn dit_specs(cfg: &BackboneConfig, b: &mut SpecBuilder) {
    let d = cfg.hidden;
    let p = BACKBONE_NS;
    let pp = cfg.patch * cfg.patch;
    b.linear(&format!("{p}patch"), cfg.in_channels * pp, d);
    b.linear(&format!("{p}temb.l1"), d, d);
    b.linear(&format!("{p}temb.l2"), d, d);
    for k in 0..cfg.depth {
        let n = format!("{p}blk{k}");
        b.linear(&format!("{n}.ada"), d, 6 * d);
        b.linear(&format!("{n}.qkv"), d, 3 * d);
        b.linear(&format!("{n}.proj"), d, d);
        b.linear(&format!("{n}.fc1"), d, cfg.mlp_ratio * d);
        b.linear(&format!("{n}.fc2"), cfg.mlp_ratio * d, d);
    }
    b.linear(&format!("{p}final.ada"), d, 2 * d);
    b.linear(&format!("{p}final.lin"), d, pp * cfg.out_channels);
}

/// Sinusoidal embedding of integer timesteps, `[B, dim]`.
pub fn timestep_embedding<T: Scalar>(ts: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); ts.len() * dim];
    for (b, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[b * dim + k] = T::lit(a.sin());
            out[b * dim + half + k] = T::lit(a.cos());
        }
    }
    out
}

/// Fixed 2D sine-cosine position table, `[gh * gw, dim]`.
pub fn pos_embedding_2d<T: Scalar>(gh: usize, gw: usize, dim: usize) -> Vec<T> {
    let quarter = dim / 4;
    let mut out = vec![T::zero(); gh * gw * dim];
    for y in 0..gh {
        for x in 0..gw {
            let row = &mut out[(y * gw + x) * dim..(y * gw + x + 1) * dim];
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter.max(1) as f64);
                row[k] = T::lit((y as f64 * omega).sin());
                row[quarter + k] = T::lit((y as f64 * omega).cos());
                row[2 * quarter + k] = T::lit((x as f64 * omega).sin());
                row[3 * quarter + k] = T::lit((x as f64 * omega).cos());
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    /// Enables dropout with masks drawn from this seed.
    pub dropout_seed: Option<u64>,
    /// Replace the tensor at a tap before the rest of the network sees it.
    pub overrides: Vec<(TapPosition, Var)>,
}

pub struct ForwardOut {
    pub x0_hat: Var,
    pub taps: Vec<(TapPosition, Var)>,
}

impl ForwardOut {
    pub fn tap(&self, pos: TapPosition) -> Option<Var> {
        if pos == TapPosition::Output {
            return Some(self.x0_hat);
        }
        self.taps.iter().find(|(p, _)| *p == pos).map(|(_, v)| *v)
    }
}

struct Run<'o> {
    opts: &'o ForwardOpts,
    taps: Vec<(TapPosition, Var)>,
    rng: Option<ChaCha8Rng>,
}

impl Run<'_> {
    fn tap(&mut self, pos: TapPosition, v: Var) -> Var {
        let v = self
            .opts
            .overrides
            .iter()
            .find(|(p, _)| *p == pos)
            .map(|(_, o)| *o)
            .unwrap_or(v);
        self.taps.push((pos, v));
        v
    }
}

/// Denoiser forward pass. `x_t: [B, C_data, H, W]`, `cond: [B, C_cond, H, W]`.
pub fn forward<T: Scalar>(
    ctx: &mut Ctx<T>,
    cfg: &BackboneConfig,
    x_t: Var,
    ts: &[usize],
    cond: Option<Var>,
    opts: &ForwardOpts,
) -> Result<ForwardOut> {
    cfg.validate()?;
    let input = match cond {
        Some(c) => ctx.g.concat(x_t, c),
        None => x_t,
    };
    let s = ctx.g.shape(input).to_vec();
    if s[1] != cfg.in_channels || s[2] != cfg.height || s[3] != cfg.width {
        return Err(Error::Shape(format!(
            "backbone expects [B, {}, {}, {}], got {:?}",
            cfg.in_channels, cfg.height, cfg.width, s
        )));
    }
    if ts.len() != s[0] {
        return Err(Error::Shape(format!("{} timesteps for batch {}", ts.len(), s[0])));
    }
    let mut run = Run {
        opts,
        taps: Vec::new(),
        rng: opts.dropout_seed.map(ChaCha8Rng::seed_from_u64),
    };
    let x0_hat = match cfg.kind {
        BackboneKind::Unet => unet_forward(ctx, cfg, input, ts, &mut run),
        BackboneKind::Dit => dit_forward(ctx, cfg, input, ts, &mut run),
    };
    Ok(ForwardOut { x0_hat, taps: run.taps })
}

fn dropout<T: Scalar>(ctx: &mut Ctx<T>, x: Var, rate: f64, run: &mut Run) -> Var {
    let Some(rng) = run.rng.as_mut() else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let n = ctx.g.value(x).len();
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let shape = ctx.g.shape(x).to_vec();
    let m = ctx.g.input(mask, &shape);
    ctx.g.mul(x, m)
}

fn res_block<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var, temb: Var, cfg: &BackboneConfig, run: &mut Run) -> Var {
    let ci = ctx.g.shape(x)[1];
    let h = ctx.group_norm(&format!("{name}.n1"), x, groups_for(ci));
    let h = ctx.g.silu(h);
    let h = ctx.conv(&format!("{name}.c1"), h, 1, 1);
    let co = ctx.g.shape(h)[1];
    let e = ctx.linear(&format!("{name}.emb"), temb);
    let h = ctx.g.add_channel(h, e);
    let h = ctx.group_norm(&format!("{name}.n2"), h, groups_for(co));
    let h = ctx.g.silu(h);
    let h = dropout(ctx, h, cfg.dropout, run);
    let h = ctx.conv(&format!("{name}.c2"), h, 1, 1);
    let skip = if ci != co {
        ctx.conv(&format!("{name}.skip"), x, 1, 0)
    } else {
        x
    };
    ctx.g.add(h, skip)
}

fn attn_block<T: Scalar>(ctx: &mut Ctx<T>, name: &str, x: Var) -> Var {
    let s = ctx.g.shape(x).to_vec();
    let h = ctx.group_norm(&format!("{name}.n"), x, groups_for(s[1]));
    let tok = ctx.g.to_tokens(h);
    let qkv = ctx.linear(&format!("{name}.qkv"), tok);
    let a = ctx.g.attention(qkv, 1);
    let a = ctx.linear(&format!("{name}.proj"), a);
    let a = ctx.g.from_tokens(a, s[2], s[3]);
    ctx.g.add(x, a)
}

fn time_mlp<T: Scalar>(ctx: &mut Ctx<T>, ts: &[usize], dim: usize) -> Var {
    let e = timestep_embedding::<T>(ts, dim);
    let e = ctx.g.input(e, &[ts.len(), dim]);
    let h = ctx.linear("backbone.temb.l1", e);
    let h = ctx.g.silu(h);
    ctx.linear("backbone.temb.l2", h)
}

fn unet_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &BackboneConfig, x: Var, ts: &[usize], run: &mut Run) -> Var {
    let temb = time_mlp(ctx, ts, cfg.base_channels);
    let temb = ctx.g.silu(temb);
    let mut h = ctx.conv("backbone.in", x, 1, 1);
    let levels = cfg.levels();
    let mut skips = Vec::new();
    for l in 0..levels {
        if l > 0 {
            h = ctx.g.avg_pool2(h);
        }
        for r in 0..cfg.num_res_blocks {
            h = res_block(ctx, &format!("backbone.enc{l}.res{r}"), h, temb, cfg, run);
            if unet_attn_at(cfg, l) {
                h = attn_block(ctx, &format!("backbone.enc{l}.attn{r}"), h);
            }
        }
        h = run.tap(TapPosition::Encoder(l + 1), h);
        skips.push(h);
    }
    h = res_block(ctx, "backbone.mid", h, temb, cfg, run);
    h = run.tap(TapPosition::Bottleneck, h);
    for (k, l) in (0..levels).rev().enumerate() {
        if l + 1 < levels {
            h = ctx.g.upsample2(h);
        }
        let s = skips.pop().unwrap();
        h = ctx.g.concat(h, s);
        for r in 0..cfg.num_res_blocks {
            h = res_block(ctx, &format!("backbone.dec{l}.res{r}"), h, temb, cfg, run);
            if unet_attn_at(cfg, l) {
                h = attn_block(ctx, &format!("backbone.dec{l}.attn{r}"), h);
            }
        }
        h = run.tap(TapPosition::Decoder(k + 1), h);
    }
    let c = ctx.g.shape(h)[1];
    let h = ctx.group_norm("backbone.out.n", h, groups_for(c));
    let h = ctx.g.silu(h);
    ctx.conv("backbone.out.c", h, 1, 1)
}

fn dit_forward<T: Scalar>(ctx: &mut Ctx<T>, cfg: &BackboneConfig, x: Var, ts: &[usize], run: &mut Run) -> Var {
    let d = cfg.hidden;
    let (gh, gw) = (cfg.height / cfg.patch, cfg.width / cfg.patch);
    let tok = ctx.g.patchify(x, cfg.patch);
    let mut h = ctx.linear("backbone.patch", tok);
    let pos = ctx.g.input(pos_embedding_2d(gh, gw, d), &[gh * gw, d]);
    h = ctx.g.add_broadcast(h, pos);
    let c = time_mlp(ctx, ts, d);
    let c = ctx.g.silu(c);
    for k in 0..cfg.depth {
        let n = format!("backbone.blk{k}");
        let m = ctx.linear(&format!("{n}.ada"), c);
        let chunk: Vec<Var> = (0..6).map(|i| ctx.g.slice_last(m, i * d, d)).collect();
        let a = ctx.g.layer_norm(h);
        let a = ctx.g.modulate(a, chunk[0], chunk[1]);
        let qkv = ctx.linear(&format!("{n}.qkv"), a);
        let a = ctx.g.attention(qkv, cfg.heads);
        let a = ctx.linear(&format!("{n}.proj"), a);
        h = ctx.g.gated_add(h, a, chunk[2]);
        let b = ctx.g.layer_norm(h);
        let b = ctx.g.modulate(b, chunk[3], chunk[4]);
        let b = ctx.linear(&format!("{n}.fc1"), b);
        let b = ctx.g.gelu(b);
        let b = dropout(ctx, b, cfg.dropout, run);
        let b = ctx.linear(&format!("{n}.fc2"), b);
        h = ctx.g.gated_add(h, b, chunk[5]);
        let spatial = ctx.g.from_tokens(h, gh, gw);
        let tapped = run.tap(TapPosition::Block(k + 1), spatial);
        if tapped != spatial {
            h = ctx.g.to_tokens(tapped);
        }
    }
    let m = ctx.linear("backbone.final.ada", c);
    let sh = ctx.g.slice_last(m, 0, d);
    let sc = ctx.g.slice_last(m, d, d);
    let h = ctx.g.layer_norm(h);
    let h = ctx.g.modulate(h, sh, sc);
    let h = ctx.linear("backbone.final.lin", h);
    ctx.g.unpatchify(h, cfg.patch, cfg.height, cfg.width)
}
