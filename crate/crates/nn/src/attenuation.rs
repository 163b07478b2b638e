//! Gradient-attenuation bounds for output-level versus mid-layer physics losses.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repap_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::alignment::{project_features, Model};
use crate::backbone::{forward, ForwardOpts, TapPosition};
use crate::graph::Graph;
use crate::params::Ctx;
use crate::physics::{physics_loss_node, Level, Normalizer, TaskContext};

pub const POWER_ITERS: usize = 20;
pub const POWER_RTOL: f64 = 1e-3;
pub const DEFAULT_SLACK: f64 = 0.05;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral norm of an operator given by its products `J v` and `Jᵀ u`.
///
/// Returns the estimate and whether the last step changed it by less than
/// [`POWER_RTOL`].
pub fn power_spectral_norm(
    jvp: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    vjp: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    dim: usize,
    iters: usize,
    seed: u64,
) -> (f64, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut sigma = 0.0;
    let mut converged = false;
    for _ in 0..iters {
        let jv = jvp(&v);
        let s = norm(&jv);
        converged = sigma > 0.0 && (s - sigma).abs() <= POWER_RTOL * s;
        sigma = s;
        let mut w = vjp(&jv);
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, true);
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
    }
    (sigma, converged)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttenuationRow {
    pub position: String,
    pub lhs_out: f64,
    pub bound_out: f64,
    pub lhs_mid: f64,
    pub bound_mid: f64,
    /// Product of downstream Jacobian norms.
    pub chain_norm: f64,
    pub head_norm: f64,
    pub slack: f64,
}

impl AttenuationRow {
    pub fn holds(&self) -> bool {
        self.lhs_out <= self.bound_out * (1.0 + self.slack) && self.lhs_mid <= self.bound_mid * (1.0 + self.slack)
    }
}

/// Dense layer `y = W x + b`, `W` row-major `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub din: usize,
    pub dout: usize,
}

impl Dense {
    pub fn random(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = 1.5 / (din as f64).sqrt();
        Self {
            w: (0..din * dout).map(|_| rng.random_range(-s..s)).collect(),
            b: (0..dout).map(|_| rng.random_range(-0.1..0.1)).collect(),
            din,
            dout,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dout)
            .map(|o| self.b[o] + (0..self.din).map(|i| self.w[o * self.din + i] * x[i]).sum::<f64>())
            .collect()
    }

    pub fn mv(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dout)
            .map(|o| (0..self.din).map(|i| self.w[o * self.din + i] * x[i]).sum())
            .collect()
    }

    pub fn mtv(&self, u: &[f64]) -> Vec<f64> {
        (0..self.din)
            .map(|i| (0..self.dout).map(|o| self.w[o * self.din + i] * u[o]).sum())
            .collect()
    }

    pub fn rescale(&mut self, s: f64) {
        self.w.iter_mut().for_each(|v| *v *= s);
    }
}

/// `x → h1 = act(W1 x) → h2 = act(W2 h1) → x̂ = W3 h2`, head `z = V2 act(V1 h1)`,
/// residual `R(y) = D y - f` with `D` the 1D second-difference matrix.
#[derive(Clone, Debug)]
pub struct ToyNet {
    pub layers: [Dense; 3],
    pub head: [Dense; 2],
    pub f: Vec<f64>,
    pub linear: bool,
}

impl ToyNet {
    pub fn new(din: usize, hidden: usize, dout: usize, linear: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            layers: [
                Dense::random(din, hidden, &mut rng),
                Dense::random(hidden, hidden, &mut rng),
                Dense::random(hidden, dout, &mut rng),
            ],
            head: [Dense::random(hidden, hidden, &mut rng), Dense::random(hidden, dout, &mut rng)],
            f: (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect(),
            linear,
        }
    }

    fn act(&self, v: Vec<f64>) -> Vec<f64> {
        if self.linear {
            v
        } else {
            v.into_iter().map(f64::tanh).collect()
        }
    }

    /// Elementwise activation derivative given its output.
    fn dact(&self, y: &[f64]) -> Vec<f64> {
        if self.linear {
            vec![1.0; y.len()]
        } else {
            y.iter().map(|v| 1.0 - v * v).collect()
        }
    }

    pub fn residual(&self, y: &[f64]) -> Vec<f64> {
        let dy = second_difference(y);
        dy.iter().zip(&self.f).map(|(a, b)| a - b).collect()
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h1 = self.act(self.layers[0].apply(x));
        let h2 = self.act(self.layers[1].apply(&h1));
        let y = self.layers[2].apply(&h2);
        (h1, h2, y)
    }

    pub fn head_forward(&self, h1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let a = self.act(self.head[0].apply(h1));
        let z = self.head[1].apply(&a);
        (a, z)
    }

    /// `(lhs_out, bound_out, lhs_mid, bound_mid)` at the tap after layer 1.
    pub fn check(&self, x: &[f64], sigma2: f64, seed: u64) -> AttenuationRow {
        let (h1, h2, y) = self.forward(x);
        let r = self.residual(&y);
        let jr_t_r = second_difference(&r);
        let d2 = self.dact(&h2);
        // Exact backprop through layers 3 and 2.
        let u2: Vec<f64> = self.layers[2].mtv(&jr_t_r);
        let u1 = self.layers[1].mtv(&u2.iter().zip(&d2).map(|(a, b)| a * b).collect::<Vec<_>>());
        let lhs_out = norm(&u1) / sigma2;

        let mut jvp2 = |v: &[f64]| self.layers[1].mv(v).iter().zip(&d2).map(|(a, b)| a * b).collect();
        let mut vjp2 = |u: &[f64]| self.layers[1].mtv(&u.iter().zip(&d2).map(|(a, b)| a * b).collect::<Vec<_>>());
        let (l2, c2) = power_spectral_norm(&mut jvp2, &mut vjp2, h1.len(), POWER_ITERS, seed);
        let mut jvp3 = |v: &[f64]| self.layers[2].mv(v);
        let mut vjp3 = |u: &[f64]| self.layers[2].mtv(u);
        let (l3, c3) = power_spectral_norm(&mut jvp3, &mut vjp3, h2.len(), POWER_ITERS, seed + 1);
        let chain = l2 * l3;
        let bound_out = chain * norm(&jr_t_r) / sigma2;

        let (a, z) = self.head_forward(&h1);
        let rz = self.residual(&z);
        let jrz = second_difference(&rz);
        let da = self.dact(&a);
        let g_a: Vec<f64> = self.head[1].mtv(&jrz).iter().zip(&da).map(|(p, q)| p * q).collect();
        let lhs_mid = norm(&self.head[0].mtv(&g_a)) / sigma2;
        let mut jvph = |v: &[f64]| {
            let t: Vec<f64> = self.head[0].mv(v).iter().zip(&da).map(|(p, q)| p * q).collect();
            self.head[1].mv(&t)
        };
        let mut vjph = |u: &[f64]| {
            let t: Vec<f64> = self.head[1].mtv(u).iter().zip(&da).map(|(p, q)| p * q).collect();
            self.head[0].mtv(&t)
        };
        let (lh, ch) = power_spectral_norm(&mut jvph, &mut vjph, h1.len(), POWER_ITERS, seed + 2);
        let bound_mid = lh * norm(&jrz) / sigma2;
        let mut slack = DEFAULT_SLACK;
        if !(c2 && c3 && ch) {
            warn!("power iteration did not converge in {POWER_ITERS} steps; widening slack");
            slack *= 2.0;
        }
        AttenuationRow {
            position: "layer_1".into(),
            lhs_out,
            bound_out,
            lhs_mid,
            bound_mid,
            chain_norm: chain,
            head_norm: lh,
            slack,
        }
    }
}

/// `(D y)_i = y_{i-1} - 2 y_i + y_{i+1}` with zero padding; `D` is symmetric.
pub fn second_difference(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let l = if i > 0 { y[i - 1] } else { 0.0 };
            let r = if i + 1 < n { y[i + 1] } else { 0.0 };
            l - 2.0 * y[i] + r
        })
        .collect()
}

/// Attenuation row for a trained model at one tapped position.
///
/// The downstream map `h_ℓ → x̂0` is treated as a single factor whose norm is
/// estimated with finite-difference JVPs and autograd VJPs. The mid-layer
/// terms need a head at the position.
#[allow(clippy::too_many_arguments)]
pub fn model_attenuation_check(
    model: &Model<f64>,
    pos: TapPosition,
    x_t: &[f64],
    cond: Option<&[f64]>,
    t: usize,
    sigma2: f64,
    tctx: &TaskContext,
    norm_: &Normalizer,
    seed: u64,
) -> Result<AttenuationRow> {
    let cfg = &model.backbone;
    let dc = model.data_channels;
    let n = x_t.len() / (dc * cfg.height * cfg.width);
    let shape = [n, dc, cfg.height, cfg.width];
    let cshape = [n, cfg.in_channels - dc, cfg.height, cfg.width];
    let s2 = vec![sigma2; n];
    let ts = vec![t; n];
    let base_tap = {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params);
        let xi = ctx.g.input(x_t.to_vec(), &shape);
        let ci = cond.map(|c| ctx.g.input(c.to_vec(), &cshape));
        let out = forward(&mut ctx, cfg, xi, &ts, ci, &ForwardOpts::default())?;
        let tap = out.tap(pos).ok_or_else(|| Error::Argument(format!("no tap at {pos}")))?;
        (g.value(tap).to_vec(), g.shape(tap).to_vec())
    };
    let (h, hshape) = base_tap;
    // Runs the downstream network from an overridden tap; returns (x̂0, Jᵀ seed, loss grad wrt h).
    let downstream = |hv: &[f64], seed_out: Option<&[f64]>| -> Result<(Vec<f64>, Vec<f64>, f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &model.params);
        let xi = ctx.g.input(x_t.to_vec(), &shape);
        let ci = cond.map(|c| ctx.g.input(c.to_vec(), &cshape));
        let hi = ctx.g.input(hv.to_vec(), &hshape);
        let opts = ForwardOpts {
            dropout_seed: None,
            overrides: vec![(pos, hi)],
        };
        let out = forward(&mut ctx, cfg, xi, &ts, ci, &opts)?;
        let y = ctx.g.value(out.x0_hat).to_vec();
        let vjp = match seed_out {
            Some(s) => ctx.g.backward_with(out.x0_hat, Some(s.to_vec())).wrt(hi).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; hv.len()]),
            None => vec![],
        };
        let l = physics_loss_node(ctx.g, out.x0_hat, tctx, norm_, &s2, Level::Output)?;
        let lv = g.scalar(l);
        let gh = g.backward(l).wrt(hi).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; hv.len()]);
        Ok((y, vjp, lv, gh))
    };
    let (y0, _, _, g_out) = downstream(&h, None)?;
    let lhs_out = norm(&g_out);
    // ‖J_Rᵀ R‖ / σ² in model units: gradient of the loss with respect to x̂0.
    let jr_t_r = {
        let mut g = Graph::new();
        let yv = g.input(y0.clone(), &shape);
        let l = physics_loss_node(&mut g, yv, tctx, norm_, &s2, Level::Output)?;
        norm(g.backward(l).wrt(yv).unwrap())
    };
    let eps = 1e-5 * norm(&h).max(1.0) / (h.len() as f64).sqrt();
    let mut jvp = |v: &[f64]| {
        let hp: Vec<f64> = h.iter().zip(v).map(|(a, b)| a + eps * b).collect();
        let hm: Vec<f64> = h.iter().zip(v).map(|(a, b)| a - eps * b).collect();
        let yp = downstream(&hp, None).map(|r| r.0).unwrap_or_default();
        let ym = downstream(&hm, None).map(|r| r.0).unwrap_or_default();
        yp.iter().zip(&ym).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
    };
    let mut vjp = |u: &[f64]| downstream(&h, Some(u)).map(|r| r.1).unwrap_or_default();
    let (chain, conv) = power_spectral_norm(&mut jvp, &mut vjp, h.len(), POWER_ITERS, seed);
    let bound_out = chain * jr_t_r;

    let (mut lhs_mid, mut bound_mid, mut head_norm) = (f64::NAN, f64::NAN, f64::NAN);
    let mut conv_h = true;
    if model.params.id(&format!("{}.l1.w", crate::alignment::head_prefix(pos))).is_some() {
        let grid = tctx.grid();
        let head = |hv: &[f64], seed_out: Option<&[f64]>| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &model.params);
            let hi = ctx.g.input(hv.to_vec(), &hshape);
            let z = project_features(&mut ctx, pos, hi, grid.n_y, grid.n_x)?;
            let zv = ctx.g.value(z).to_vec();
            let vjp = match seed_out {
                Some(s) => ctx.g.backward_with(z, Some(s.to_vec())).wrt(hi).unwrap().to_vec(),
                None => vec![],
            };
            let l = physics_loss_node(ctx.g, z, tctx, norm_, &s2, Level::Mid)?;
            let gr = g.backward(l);
            let gz = norm(gr.wrt(z).unwrap());
            Ok((zv, vjp, gr.wrt(hi).unwrap().to_vec(), gz))
        };
        let (_, _, gh, jrz) = head(&h, None)?;
        lhs_mid = norm(&gh);
        let mut jvp = |v: &[f64]| {
            let hp: Vec<f64> = h.iter().zip(v).map(|(a, b)| a + eps * b).collect();
            let hm: Vec<f64> = h.iter().zip(v).map(|(a, b)| a - eps * b).collect();
            let zp = head(&hp, None).map(|r| r.0).unwrap_or_default();
            let zm = head(&hm, None).map(|r| r.0).unwrap_or_default();
            zp.iter().zip(&zm).map(|(a, b)| (a - b) / (2.0 * eps)).collect()
        };
        let mut vjp = |u: &[f64]| head(&h, Some(u)).map(|r| r.1).unwrap_or_default();
        let (hn, c) = power_spectral_norm(&mut jvp, &mut vjp, h.len(), POWER_ITERS, seed + 1);
        head_norm = hn;
        conv_h = c;
        bound_mid = hn * jrz;
    }
    let mut slack = DEFAULT_SLACK;
    if !(conv && conv_h) {
        warn!("power iteration at {pos} did not converge in {POWER_ITERS} steps; widening slack");
        slack *= 2.0;
    }
    Ok(AttenuationRow {
        position: pos.to_string(),
        lhs_out,
        bound_out,
        lhs_mid,
        bound_mid,
        chain_norm: chain,
        head_norm,
        slack,
    })
}
