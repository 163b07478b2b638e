//! Per-task residual routing and physics-loss nodes on the autograd tape.

use repap_core::datagen::TopologyCase;
use repap_core::fem::{assemble_stiffness, equilibrium_gradient, topology_residuals, vol_bound_gradients};
use repap_core::residual::{
    darcy_residual_raw, darcy_residual_vjp_raw, poisson_residual_raw, poisson_residual_vjp_raw,
    turbulence_residual_raw, turbulence_residual_vjp_raw, TurbulenceWeights,
};
use repap_core::{Error, Grid2D, Result, Scalar, Task};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};

/// Per-channel affine map between model space and physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics over samples laid out `[N, C, plane]`.
    pub fn fit(values: &[f64], channels: usize, plane: usize) -> Self {
        let n = values.len() / (channels * plane);
        let mut mean = vec![0.0; channels];
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            let it = || (0..n).flat_map(move |s| values[(s * channels + c) * plane..(s * channels + c + 1) * plane].iter());
            let m = it().sum::<f64>() / (n * plane) as f64;
            let v = it().map(|x| (x - m) * (x - m)).sum::<f64>() / (n * plane) as f64;
            mean[c] = m;
            std[c] = if v > 0.0 { v.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn to_physical<T: Scalar>(&self, z: &[T], plane: usize) -> Vec<T> {
        let c = self.channels();
        z.iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / plane) % c;
                v * T::lit(self.std[k]) + T::lit(self.mean[k])
            })
            .collect()
    }

    pub fn to_model<T: Scalar>(&self, x: &[T], plane: usize) -> Vec<T> {
        let c = self.channels();
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let k = (i / plane) % c;
                (v - T::lit(self.mean[k])) / T::lit(self.std[k])
            })
            .collect()
    }
}

/// Conditioning the residual needs, one entry per batch sample.
#[derive(Clone, Debug)]
pub enum TaskContext {
    Darcy { grid: Grid2D, f_s: Vec<Vec<f64>> },
    Charge { grid: Grid2D, rho: Vec<Vec<f64>> },
    Topology {
        grid: Grid2D,
        cases: Vec<TopologyCase>,
        /// Reference displacements used for `r_eq` at the output level.
        u_ref: Vec<Option<Vec<f64>>>,
    },
    Turbulence { grid: Grid2D, batch: usize, weights: TurbulenceWeights },
}

/// Which residual terms apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Level {
    Output,
    Mid,
}

impl TaskContext {
    pub fn task(&self) -> Task {
        match self {
            TaskContext::Darcy { .. } => Task::Darcy,
            TaskContext::Charge { .. } => Task::Charge,
            TaskContext::Topology { .. } => Task::Topology,
            TaskContext::Turbulence { .. } => Task::Turbulence,
        }
    }

    pub fn grid(&self) -> Grid2D {
        match self {
            TaskContext::Darcy { grid, .. }
            | TaskContext::Charge { grid, .. }
            | TaskContext::Topology { grid, .. }
            | TaskContext::Turbulence { grid, .. } => *grid,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            TaskContext::Darcy { f_s, .. } => f_s.len(),
            TaskContext::Charge { rho, .. } => rho.len(),
            TaskContext::Topology { cases, .. } => cases.len(),
            TaskContext::Turbulence { batch, .. } => *batch,
        }
    }

    /// Restrict to a subset of batch rows.
    pub fn select(&self, rows: &[usize]) -> Self {
        match self {
            TaskContext::Darcy { grid, f_s } => TaskContext::Darcy {
                grid: *grid,
                f_s: rows.iter().map(|&r| f_s[r].clone()).collect(),
            },
            TaskContext::Charge { grid, rho } => TaskContext::Charge {
                grid: *grid,
                rho: rows.iter().map(|&r| rho[r].clone()).collect(),
            },
            TaskContext::Topology { grid, cases, u_ref } => TaskContext::Topology {
                grid: *grid,
                cases: rows.iter().map(|&r| cases[r].clone()).collect(),
                u_ref: rows.iter().map(|&r| u_ref[r].clone()).collect(),
            },
            TaskContext::Turbulence { grid, weights, .. } => TaskContext::Turbulence {
                grid: *grid,
                batch: rows.len(),
                weights: *weights,
            },
        }
    }

    /// Residual vector of sample `b` in physical units.
    pub fn residual(&self, b: usize, x: &[f64], level: Level) -> Result<Vec<f64>> {
        let g = self.grid();
        let (nx, ny, h) = (g.n_x, g.n_y, g.h);
        let plane = g.len();
        match self {
            TaskContext::Darcy { f_s, .. } => {
                let (i, bd, _) = darcy_residual_raw(nx, ny, h, &x[..plane], &x[plane..2 * plane], &f_s[b]);
                Ok([i, bd].concat())
            }
            TaskContext::Charge { rho, .. } => {
                let (i, bd) = poisson_residual_raw(nx, ny, h, &x[..plane], &rho[b]);
                Ok([i, bd].concat())
            }
            TaskContext::Turbulence { weights, .. } => {
                let (i, bd) = turbulence_residual_raw(nx, ny, h, &x[..plane], *weights);
                Ok([i, bd].concat())
            }
            TaskContext::Topology { cases, u_ref, .. } => {
                let rho = &x[..plane];
                let case = &cases[b];
                let mut r = Vec::with_capacity(3);
                if level == Level::Output {
                    let sys = assemble_stiffness(case.mesh, rho, case.f.clone(), case.fixed.clone())?;
                    let u = match &u_ref[b] {
                        Some(u) => u.clone(),
                        None => sys.solve()?,
                    };
                    r.push(topology_residuals(rho, &u, &sys, case.v_target)?.r_eq);
                }
                r.push(repap_core::fem::volume_residual(rho, case.v_target));
                r.push(repap_core::fem::bound_residual(rho));
                Ok(r)
            }
        }
    }

    /// `0.5 ||R||^2` and its gradient with respect to the physical fields.
    pub fn half_sq_and_grad(&self, b: usize, x: &[f64], level: Level) -> Result<(f64, Vec<f64>)> {
        let g = self.grid();
        let (nx, ny, h) = (g.n_x, g.n_y, g.h);
        let plane = g.len();
        let half_sq = |r: &[f64]| 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        match self {
            TaskContext::Darcy { f_s, .. } => {
                let (k, p) = (&x[..plane], &x[plane..2 * plane]);
                let (ri, rb, _) = darcy_residual_raw(nx, ny, h, k, p, &f_s[b]);
                let (dk, dp) = darcy_residual_vjp_raw(nx, ny, h, k, p, &ri, &rb);
                Ok((half_sq(&ri) + half_sq(&rb), [dk, dp].concat()))
            }
            TaskContext::Charge { rho, .. } => {
                let (ri, rb) = poisson_residual_raw(nx, ny, h, &x[..plane], &rho[b]);
                let du = poisson_residual_vjp_raw(nx, ny, h, &ri, &rb);
                Ok((half_sq(&ri) + half_sq(&rb), du))
            }
            TaskContext::Turbulence { weights, .. } => {
                let (ri, rb) = turbulence_residual_raw(nx, ny, h, &x[..plane], *weights);
                let du = turbulence_residual_vjp_raw(nx, ny, h, &ri, &rb, *weights);
                Ok((half_sq(&ri) + half_sq(&rb), du))
            }
            TaskContext::Topology { cases, u_ref, .. } => {
                let rho = &x[..plane];
                let case = &cases[b];
                let r_vol = repap_core::fem::volume_residual(rho, case.v_target);
                let r_bound = repap_core::fem::bound_residual(rho);
                let (gv, gb) = vol_bound_gradients(rho, case.v_target);
                let mut loss = 0.5 * (r_vol * r_vol + r_bound * r_bound);
                let mut grad: Vec<f64> = gv.iter().zip(&gb).map(|(a, c)| r_vol * a + r_bound * c).collect();
                if level == Level::Output {
                    let sys = assemble_stiffness(case.mesh, rho, case.f.clone(), case.fixed.clone())?;
                    // With a solved displacement the total derivative of r_eq vanishes
                    // by the adjoint identity, so only a stored field contributes.
                    if let Some(u) = &u_ref[b] {
                        let r_eq = topology_residuals(rho, u, &sys, case.v_target)?.r_eq;
                        loss += 0.5 * r_eq * r_eq;
                        for (gi, e) in grad.iter_mut().zip(equilibrium_gradient(rho, u, &sys)) {
                            *gi += r_eq * e;
                        }
                    } else {
                        let u = sys.solve()?;
                        let r_eq = topology_residuals(rho, &u, &sys, case.v_target)?.r_eq;
                        loss += 0.5 * r_eq * r_eq;
                    }
                }
                Ok((loss, grad))
            }
        }
    }

    /// Mean absolute residual of sample `b`.
    pub fn residual_mae(&self, b: usize, x: &[f64]) -> Result<f64> {
        let r = self.residual(b, x, Level::Output)?;
        Ok(r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
    }
}

/// `(1/B) Σ_b 0.5 ||R(denorm(z_b))||² / σ²_b` as a scalar tape node.
///
/// `z: [B, C, H, W]` in model units; the first `C` channels of `norm` apply.
pub fn physics_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    z: Var,
    tctx: &TaskContext,
    norm: &Normalizer,
    sigma2: &[f64],
    level: Level,
) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let grid = tctx.grid();
    let (b, c) = (shape[0], shape[1]);
    if shape[2] != grid.n_y || shape[3] != grid.n_x || c != norm.channels() {
        return Err(Error::Shape(format!(
            "physics input {:?} does not match grid {}x{} with {} channels",
            shape,
            grid.n_y,
            grid.n_x,
            norm.channels()
        )));
    }
    if b != tctx.batch() || b != sigma2.len() {
        return Err(Error::Shape(format!(
            "batch {b} vs context {} and {} noise levels",
            tctx.batch(),
            sigma2.len()
        )));
    }
    let plane = grid.len();
    let per = c * plane;
    let zv: Vec<f64> = g.value(z).iter().map(|v| v.to_f64_lossy()).collect();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); zv.len()];
    for s in 0..b {
        let x = norm.to_physical(&zv[s * per..(s + 1) * per], plane);
        let (l, gx) = tctx.half_sq_and_grad(s, &x, level)?;
        let w = 1.0 / (sigma2[s] * b as f64);
        total += l * w;
        for (i, gi) in gx.iter().enumerate() {
            grad[s * per + i] = T::lit(gi * w * norm.std[i / plane]);
        }
    }
    Ok(g.custom(
        &[z],
        vec![T::lit(total)],
        &[1],
        Box::new(move |_, gout| {
            let go = gout[0];
            vec![grad.iter().map(|&v| v * go).collect()]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use repap_core::datagen::{generate_darcy_dataset, solve_poisson_dst, DarcyParams, DarcySourceSpec};
    use repap_core::Field;

    fn darcy_batch() -> (Vec<f64>, TaskContext) {
        let params = DarcyParams {
            n: 16,
            ..Default::default()
        };
        let ds = generate_darcy_dataset(2, 4, &params).unwrap();
        let mut x = Vec::new();
        let mut f_s = Vec::new();
        for i in 0..2 {
            x.extend(ds.sample::<f64>(i).values);
            let c = ds.aux("source_balance", i).unwrap()[0];
            f_s.push(DarcySourceSpec::default().field::<f64>(ds.grid(), c).values);
        }
        (x, TaskContext::Darcy { grid: ds.grid(), f_s })
    }

    #[test]
    fn ground_truth_has_small_loss() {
        let (x, tctx) = darcy_batch();
        let plane = tctx.grid().len();
        for b in 0..2 {
            let (l, _) = tctx.half_sq_and_grad(b, &x[b * 2 * plane..(b + 1) * 2 * plane], Level::Output).unwrap();
            // f32 storage of (K, p) bounds how small the stencil residual can be.
            assert!(l < 1e-6, "{l}");
        }
    }

    #[test]
    fn normalizer_round_trips() {
        let vals: Vec<f64> = (0..2 * 2 * 9).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect();
        let n = Normalizer::fit(&vals, 2, 9);
        let z = n.to_model(&vals, 9);
        let back = n.to_physical(&z, 9);
        for (a, b) in vals.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let zc: Vec<f64> = z.iter().skip(9).take(9).copied().collect();
        assert!(zc.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn node_scales_inversely_with_sigma2_and_is_shift_invariant_in_p() {
        let (x, tctx) = darcy_batch();
        let norm = Normalizer::identity(2);
        let eval = |x: &[f64], s: f64| {
            let mut g = Graph::<f64>::new();
            let z = g.input(x.to_vec(), &[2, 2, 16, 16]);
            let l = physics_loss_node(&mut g, z, &tctx, &norm, &[s, s], Level::Output).unwrap();
            g.scalar(l)
        };
        let mut noisy = x.clone();
        for (i, v) in noisy.iter_mut().enumerate() {
            *v += 0.01 * ((i * 7919) % 13) as f64;
        }
        let a = eval(&noisy, 1.0);
        let b = eval(&noisy, 2.0);
        assert!((a - 2.0 * b).abs() < 1e-9 * a);
        let mut shifted = noisy.clone();
        for s in 0..2 {
            for v in shifted[s * 512 + 256..(s + 1) * 512].iter_mut() {
                *v += 3.5;
            }
        }
        assert!((eval(&shifted, 1.0) - a).abs() < 1e-9 * a);
    }

    #[test]
    fn charge_exact_solution_near_zero() {
        let grid = Grid2D::unit_square(16).unwrap();
        let rho = Field::<f64>::from_fn(grid, |x, y| ((x - 0.5).powi(2) + (y - 0.4).powi(2) < 0.02) as u8 as f64);
        let u = solve_poisson_dst(&rho).unwrap();
        let t = TaskContext::Charge { grid, rho: vec![rho.values] };
        let (l, _) = t.half_sq_and_grad(0, &u.values, Level::Mid).unwrap();
        assert!(l < 1e-20);
    }
}
