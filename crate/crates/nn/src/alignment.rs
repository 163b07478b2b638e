//! Projection heads, the mid-layer physics objective and the joint loss.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use repap_core::{Error, NoiseSchedule, Result, Scalar, Task};
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, BackboneConfig, ForwardOpts, ForwardOut, TapPosition};
use crate::graph::{Graph, Var};
use crate::params::{Ctx, ParamStore, SpecBuilder, HEADS_NS};
use crate::physics::{physics_loss_node, Level, Normalizer, TaskContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub positions: Vec<TapPosition>,
    pub c_mid: f64,
    pub c_out: f64,
    pub head_hidden: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            positions: vec![TapPosition::Bottleneck],
            c_mid: 0.1,
            c_out: 0.0,
            head_hidden: 128,
        }
    }
}

impl AlignmentConfig {
    /// Tuned mid-layer weight per task.
    pub fn task_default(task: Task) -> Self {
        let c_mid = match task {
            Task::Darcy => 0.1,
            Task::Topology => 0.005,
            Task::Charge | Task::Turbulence => 0.01,
        };
        Self {
            c_mid,
            ..Self::default()
        }
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        if !(self.c_mid >= 0.0) || !(self.c_out >= 0.0) {
            return Err(Error::Argument(format!(
                "loss weights must be non-negative (c_mid {}, c_out {})",
                self.c_mid, self.c_out
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Argument("head hidden width must be positive".into()));
        }
        for p in &self.positions {
            if backbone.tap_shape(*p).is_none() {
                return Err(Error::Argument(format!("position {p} does not exist in this backbone")));
            }
        }
        Ok(())
    }

    fn headed(&self) -> impl Iterator<Item = TapPosition> + '_ {
        self.positions.iter().copied().filter(|p| *p != TapPosition::Output)
    }
}

pub fn head_prefix(pos: TapPosition) -> String {
    format!("{HEADS_NS}{pos}")
}

/// Two 1x1 maps `C_ℓ → hidden → C` with a ReLU between.
pub fn head_specs(b: &mut SpecBuilder, pos: TapPosition, c_in: usize, hidden: usize, c_out: usize) {
    let n = head_prefix(pos);
    b.conv(&format!("{n}.l1"), c_in, hidden, 1);
    b.conv(&format!("{n}.l2"), hidden, c_out, 1);
}

/// `z_ℓ = resize(ψ_ℓ(h_ℓ))` at `(h, w)`.
pub fn project_features<T: Scalar>(ctx: &mut Ctx<T>, pos: TapPosition, tap: Var, h: usize, w: usize) -> Result<Var> {
    let n = head_prefix(pos);
    let w1 = ctx
        .store
        .get_spec(&format!("{n}.l1.w"))
        .ok_or_else(|| Error::Argument(format!("no projection head for {pos}")))?;
    let c_tap = ctx.g.shape(tap)[1];
    if w1.shape[1] != c_tap {
        return Err(Error::Argument(format!(
            "head for {pos} expects {} channels, tap has {c_tap}",
            w1.shape[1]
        )));
    }
    let z = ctx.conv(&format!("{n}.l1"), tap, 1, 0);
    let z = ctx.g.relu(z);
    let z = ctx.conv(&format!("{n}.l2"), z, 1, 0);
    let s = ctx.g.shape(z).to_vec();
    Ok(if s[2] == h && s[3] == w { z } else { ctx.g.bilinear(z, h, w) })
}

/// Backbone plus heads, with the data-channel count the heads decode to.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub backbone: BackboneConfig,
    pub align: AlignmentConfig,
    pub data_channels: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(backbone: BackboneConfig, align: AlignmentConfig, data_channels: usize, seed: u64) -> Result<Self> {
        backbone.validate()?;
        align.validate(&backbone)?;
        if backbone.out_channels != data_channels {
            return Err(Error::Argument(format!(
                "backbone predicts {} channels, task has {data_channels}",
                backbone.out_channels
            )));
        }
        let mut specs = backbone.param_specs();
        for p in align.headed() {
            let (c, _, _) = backbone.tap_shape(p).unwrap();
            head_specs(&mut specs, p, c, align.head_hidden, data_channels);
        }
        let params = ParamStore::from_specs(specs.specs, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            backbone,
            align,
            data_channels,
            params,
        })
    }

    pub fn backbone_parameter_count(&self) -> usize {
        self.params.count() - self.params.count_prefix(HEADS_NS)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            backbone: self.backbone.clone(),
            align: self.align.clone(),
            data_channels: self.data_channels,
            params: self.params.cast(),
        }
    }
}

/// Drop every head parameter; the backbone is untouched.
pub fn discard_heads<T: Scalar>(model: &Model<T>) -> Model<T> {
    Model {
        params: model.params.without_prefix(HEADS_NS),
        ..model.clone()
    }
}

/// `Σ_i w_i (a_i - target_i)^2` as a scalar node.
pub fn weighted_sq_err<T: Scalar>(g: &mut Graph<T>, a: Var, target: &[T], weights: &[T]) -> Var {
    let av = g.value(a);
    assert_eq!(av.len(), target.len());
    assert_eq!(av.len(), weights.len());
    let diff: Vec<T> = av.iter().zip(target).map(|(&x, &y)| x - y).collect();
    let total: T = diff.iter().zip(weights).map(|(&d, &w)| w * d * d).sum();
    let grad: Vec<T> = diff.iter().zip(weights).map(|(&d, &w)| T::lit(2.0) * w * d).collect();
    g.custom(
        &[a],
        vec![total],
        &[1],
        Box::new(move |_, gout| vec![grad.iter().map(|&v| v * gout[0]).collect()]),
    )
}

/// `(1/B) Σ_b λ_t ||x0 - x̂0||²`.
pub fn data_loss_node<T: Scalar>(g: &mut Graph<T>, x0_hat: Var, x0: &[T], ts: &[usize], sched: &NoiseSchedule) -> Var {
    let b = ts.len();
    let per = x0.len() / b;
    let w: Vec<T> = (0..x0.len())
        .map(|i| T::lit(sched.lambda(ts[i / per]) / b as f64))
        .collect();
    weighted_sq_err(g, x0_hat, x0, &w)
}

/// Per-sample `σ²(t)`; shared by the output and mid-layer terms.
pub fn sigma2_batch(ts: &[usize], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    ts.iter().map(|&t| repap_core::diffusion::posterior_sigma2(t, sched)).collect()
}

pub fn output_physics_loss<T: Scalar>(
    g: &mut Graph<T>,
    x0_hat: Var,
    sigma2: &[f64],
    tctx: &TaskContext,
    norm: &Normalizer,
) -> Result<Var> {
    physics_loss_node(g, x0_hat, tctx, norm, sigma2, Level::Output)
}

/// Average over positions of the decoded physics loss. `None` when `𝒫` is empty.
pub fn midlayer_physics_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    out: &ForwardOut,
    positions: &[TapPosition],
    sigma2: &[f64],
    tctx: &TaskContext,
    norm: &Normalizer,
) -> Result<Option<Var>> {
    if positions.is_empty() {
        warn!("mid-layer physics loss requested with no alignment positions");
        return Ok(None);
    }
    let grid = tctx.grid();
    let mut terms = Vec::with_capacity(positions.len());
    for &p in positions {
        let z = match p {
            TapPosition::Output => out.x0_hat,
            _ => {
                let tap = out
                    .tap(p)
                    .ok_or_else(|| Error::Argument(format!("backbone produced no tap at {p}")))?;
                project_features(ctx, p, tap, grid.n_y, grid.n_x)?
            }
        };
        let l = physics_loss_node(ctx.g, z, tctx, norm, sigma2, Level::Mid)?;
        terms.push((l, T::lit(1.0 / positions.len() as f64)));
    }
    Ok(Some(ctx.g.weighted_sum(&terms)))
}

/// One training example batch in model units.
pub struct Batch<'a, T> {
    /// `[B, C_data, H, W]`.
    pub x0: &'a [T],
    pub x_t: &'a [T],
    /// `[B, C_cond, H, W]`.
    pub cond: Option<&'a [T]>,
    pub ts: &'a [usize],
    pub tctx: &'a TaskContext,
    /// Observed-entry weights `[B, C_data, H, W]` for reconstruction training.
    pub observed: Option<&'a [T]>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data: f64,
    pub phys_out: f64,
    pub mid: f64,
    pub observed: f64,
    pub total: f64,
}

pub struct LossGraph {
    pub root: Var,
    pub parts: LossBreakdown,
    pub out: ForwardOut,
}

/// `L_data + c_out L_out + c_mid L_mid` (plus observed-entry supervision).
///
/// The output and mid terms are only built when their weight is positive.
pub fn total_loss<T: Scalar>(
    ctx: &mut Ctx<T>,
    model: &Model<T>,
    batch: &Batch<T>,
    sched: &NoiseSchedule,
    norm: &Normalizer,
    opts: &ForwardOpts,
) -> Result<LossGraph> {
    let cfg = &model.backbone;
    let b = batch.ts.len();
    let dc = model.data_channels;
    let plane = cfg.height * cfg.width;
    let x_t = ctx.g.input(batch.x_t.to_vec(), &[b, dc, cfg.height, cfg.width]);
    let cond = batch.cond.map(|c| {
        let cc = c.len() / (b * plane);
        ctx.g.input(c.to_vec(), &[b, cc, cfg.height, cfg.width])
    });
    let out = forward(ctx, cfg, x_t, batch.ts, cond, opts)?;
    let data = data_loss_node(ctx.g, out.x0_hat, batch.x0, batch.ts, sched);
    let mut parts = LossBreakdown {
        data: ctx.g.scalar(data).to_f64_lossy(),
        ..Default::default()
    };
    let mut terms = vec![(data, T::one())];
    let sigma2 = sigma2_batch(batch.ts, sched)?;
    if model.align.c_out > 0.0 {
        let l = output_physics_loss(ctx.g, out.x0_hat, &sigma2, batch.tctx, norm)?;
        parts.phys_out = ctx.g.scalar(l).to_f64_lossy();
        terms.push((l, T::lit(model.align.c_out)));
    }
    if model.align.c_mid > 0.0 {
        if let Some(l) = midlayer_physics_loss(ctx, &out, &model.align.positions, &sigma2, batch.tctx, norm)? {
            parts.mid = ctx.g.scalar(l).to_f64_lossy();
            terms.push((l, T::lit(model.align.c_mid)));
        }
    }
    if let Some(w) = batch.observed {
        let scaled: Vec<T> = w.iter().map(|&v| v / T::lit(b as f64)).collect();
        let l = weighted_sq_err(ctx.g, out.x0_hat, batch.x0, &scaled);
        parts.observed = ctx.g.scalar(l).to_f64_lossy();
        terms.push((l, T::one()));
    }
    let root = ctx.g.weighted_sum(&terms);
    parts.total = ctx.g.scalar(root).to_f64_lossy();
    Ok(LossGraph { root, parts, out })
}
