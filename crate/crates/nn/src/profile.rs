//! Layer-wise residual profiles, linear probes and representation diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use repap_core::diffusion::forward_diffuse_slice;
use repap_core::linalg::SpdBand;
use repap_core::metrics::{effective_rank, linear_cka};
use repap_core::{Error, NoiseSchedule, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::alignment::{head_prefix, project_features, Model};
use crate::backbone::{forward, ForwardOpts, TapPosition};
use crate::graph::Graph;
use crate::params::Ctx;
use crate::physics::{Normalizer, TaskContext};
use crate::tasks::residual_maes;
use crate::train::TrainData;

/// Noisy inputs drawn from a dataset at fixed timesteps.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    pub rows: Vec<usize>,
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub cond: Option<Vec<f64>>,
    pub ts: Vec<usize>,
    pub tctx: TaskContext,
}

impl EvalBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `n` draws of `(x0, t, ε)` from `data`, deterministic in `seed`.
pub fn make_eval_batch<T: Scalar>(data: &TrainData<T>, sched: &NoiseSchedule, n: usize, seed: u64) -> Result<EvalBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..n).map(|i| i % data.n).collect();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps)).collect();
    let per = data.sample_len();
    let mut x0 = Vec::with_capacity(n * per);
    let mut x_t = Vec::with_capacity(n * per);
    for (k, &r) in rows.iter().enumerate() {
        let s: Vec<f64> = data.x0[r * per..(r + 1) * per].iter().map(|v| v.to_f64_lossy()).collect();
        let eps: Vec<f64> = (0..per).map(|_| StandardNormal.sample(&mut rng)).collect();
        x_t.extend(forward_diffuse_slice(&s, &eps, ts[k], sched)?);
        x0.extend(s);
    }
    let cond = data
        .cond_rows(&rows)
        .map(|c| c.iter().map(|v| v.to_f64_lossy()).collect());
    Ok(EvalBatch {
        tctx: data.tctx.select(&rows),
        rows,
        x0,
        x_t,
        cond,
        ts,
    })
}

const CHUNK: usize = 16;

/// Tap tensors at `positions` for the whole batch, `[N, C, H, W]` each.
pub fn collect_features(model: &Model<f64>, batch: &EvalBatch, positions: &[TapPosition]) -> Result<Vec<(Vec<f64>, [usize; 4])>> {
    let cfg = &model.backbone;
    let dc = model.data_channels;
    let plane = cfg.height * cfg.width;
    let cc = cfg.in_channels - dc;
    let mut out: Vec<(Vec<f64>, [usize; 4])> = positions.iter().map(|_| (Vec::new(), [0; 4])).collect();
    let n = batch.len();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let m = end - start;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params);
        let xi = ctx.g.input(batch.x_t[start * dc * plane..end * dc * plane].to_vec(), &[m, dc, cfg.height, cfg.width]);
        let ci = batch
            .cond
            .as_ref()
            .map(|c| ctx.g.input(c[start * cc * plane..end * cc * plane].to_vec(), &[m, cc, cfg.height, cfg.width]));
        let fo = forward(&mut ctx, cfg, xi, &batch.ts[start..end], ci, &ForwardOpts::default())?;
        for (k, &p) in positions.iter().enumerate() {
            let v = fo.tap(p).ok_or_else(|| Error::Argument(format!("no tap at {p}")))?;
            let s = g.shape(v);
            out[k].1 = [n, s[1], s[2], s[3]];
            out[k].0.extend_from_slice(g.value(v));
        }
    }
    Ok(out)
}

/// Per-pixel affine map from tap channels to physical channels, applied after
/// resizing the tap to the data grid. The map and the resize commute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub c_in: usize,
    pub c_out: usize,
    /// `[c_out, c_in + 1]`, last column is the bias.
    pub weights: Vec<f64>,
}

fn resize(feat: &[f64], shape: [usize; 4], h: usize, w: usize) -> Vec<f64> {
    if shape[2] == h && shape[3] == w {
        return feat.to_vec();
    }
    let mut g = Graph::<f64>::new();
    let x = g.input(feat.to_vec(), &shape);
    let y = g.bilinear(x, h, w);
    g.value(y).to_vec()
}

impl LinearProbe {
    /// Least-squares fit to `targets` `[N, c_out, H, W]` with a small ridge.
    pub fn fit(feat: &[f64], shape: [usize; 4], targets: &[f64], c_out: usize, h: usize, w: usize) -> Result<Self> {
        let up = resize(feat, shape, h, w);
        let (n, c_in) = (shape[0], shape[1]);
        let plane = h * w;
        let d = c_in + 1;
        let mut ata = vec![0.0; d * d];
        let mut atb = vec![0.0; d * c_out];
        let mut row = vec![0.0; d];
        for s in 0..n {
            for p in 0..plane {
                for c in 0..c_in {
                    row[c] = up[(s * c_in + c) * plane + p];
                }
                row[c_in] = 1.0;
                for i in 0..d {
                    for j in 0..d {
                        ata[i * d + j] += row[i] * row[j];
                    }
                    for o in 0..c_out {
                        atb[i * c_out + o] += row[i] * targets[(s * c_out + o) * plane + p];
                    }
                }
            }
        }
        let trace = (0..d).map(|i| ata[i * d + i]).sum::<f64>() / d as f64;
        let mut m = SpdBand::new(d, d - 1);
        for i in 0..d {
            for j in 0..=i {
                m.add_sym(i, j, ata[i * d + j] + if i == j { 1e-8 * trace.max(1e-12) } else { 0.0 });
            }
        }
        let chol = m.cholesky()?;
        let mut weights = vec![0.0; c_out * d];
        for o in 0..c_out {
            let mut b: Vec<f64> = (0..d).map(|i| atb[i * c_out + o]).collect();
            chol.solve(&mut b);
            weights[o * d..(o + 1) * d].copy_from_slice(&b);
        }
        Ok(Self { c_in, c_out, weights })
    }

    pub fn decode(&self, feat: &[f64], shape: [usize; 4], h: usize, w: usize) -> Vec<f64> {
        let up = resize(feat, shape, h, w);
        let n = shape[0];
        let plane = h * w;
        let d = self.c_in + 1;
        let mut out = vec![0.0; n * self.c_out * plane];
        for s in 0..n {
            for o in 0..self.c_out {
                let wrow = &self.weights[o * d..(o + 1) * d];
                for p in 0..plane {
                    let mut acc = wrow[self.c_in];
                    for c in 0..self.c_in {
                        acc += wrow[c] * up[(s * self.c_in + c) * plane + p];
                    }
                    out[(s * self.c_out + o) * plane + p] = acc;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub position: TapPosition,
    /// `"head"` for a trained alignment head, `"probe"` for a fitted linear probe.
    pub decoder: String,
    pub raw: f64,
    pub normalized: f64,
}

fn decode_head(model: &Model<f64>, pos: TapPosition, feat: &[f64], shape: [usize; 4], h: usize, w: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(shape[0] * model.data_channels * h * w);
    let per = shape[1] * shape[2] * shape[3];
    for start in (0..shape[0]).step_by(CHUNK) {
        let end = (start + CHUNK).min(shape[0]);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params);
        let t = ctx.g.input(feat[start * per..end * per].to_vec(), &[end - start, shape[1], shape[2], shape[3]]);
        let z = project_features(&mut ctx, pos, t, h, w)?;
        out.extend_from_slice(g.value(z));
    }
    Ok(out)
}

/// Mean residual MAE of fields decoded at every tap.
///
/// Positions with a trained head use it; the rest use linear probes fitted on
/// `fit` (regressing the clean sample from frozen features).
pub fn layer_residual_profile(model: &Model<f64>, fit: &EvalBatch, eval: &EvalBatch, norm: &Normalizer, use_heads: bool) -> Result<Vec<ProfileEntry>> {
    let cfg = &model.backbone;
    let (h, w) = (cfg.height, cfg.width);
    let plane = h * w;
    let positions = cfg.tap_positions();
    let fit_feats = collect_features(model, fit, &positions)?;
    let eval_feats = collect_features(model, eval, &positions)?;
    let mut entries = Vec::with_capacity(positions.len());
    for (k, &p) in positions.iter().enumerate() {
        let has_head = use_heads && model.params.id(&format!("{}.l1.w", head_prefix(p))).is_some();
        let (ef, es) = (&eval_feats[k].0, eval_feats[k].1);
        let z = if has_head {
            decode_head(model, p, ef, es, h, w)?
        } else {
            let probe = LinearProbe::fit(&fit_feats[k].0, fit_feats[k].1, &fit.x0, model.data_channels, h, w)?;
            probe.decode(ef, es, h, w)
        };
        let phys = norm.to_physical(&z, plane);
        let maes = residual_maes(&eval.tctx, &phys)?;
        entries.push(ProfileEntry {
            position: p,
            decoder: if has_head { "head" } else { "probe" }.into(),
            raw: maes.iter().sum::<f64>() / maes.len() as f64,
            normalized: 0.0,
        });
    }
    let max = entries.iter().map(|e| e.raw).fold(0.0, f64::max);
    for e in entries.iter_mut() {
        e.normalized = if max > 0.0 { e.raw / max } else { 1.0 };
    }
    Ok(entries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub position: TapPosition,
    pub effective_rank_a: f64,
    pub effective_rank_b: f64,
    pub cka: f64,
}

/// Effective rank of each model's features and their linear CKA, per tap.
pub fn compare_representations(a: &Model<f64>, b: &Model<f64>, batch: &EvalBatch) -> Result<Vec<LayerDiagnostics>> {
    if a.backbone != b.backbone {
        return Err(Error::Argument("models differ in architecture".into()));
    }
    let positions = a.backbone.tap_positions();
    let fa = collect_features(a, batch, &positions)?;
    let fb = collect_features(b, batch, &positions)?;
    let n = batch.len();
    positions
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            Ok(LayerDiagnostics {
                position: p,
                effective_rank_a: effective_rank(&fa[k].0, n)?,
                effective_rank_b: effective_rank(&fb[k].0, n)?,
                cka: linear_cka(&fa[k].0, &fb[k].0, n)?,
            })
        })
        .collect()
}
