//! Central finite-difference verification of every physics loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repap_core::datagen::{generate_darcy_dataset, DarcyParams, DarcySourceSpec, TopologyCase};
use repap_core::fem::{compliance_and_gradient, FemMesh};
use repap_core::residual::TurbulenceWeights;
use repap_core::{make_cosine_schedule, Grid2D, Result};
use serde::{Deserialize, Serialize};

use crate::alignment::{project_features, total_loss, AlignmentConfig, Batch, Model};
use crate::backbone::{BackboneConfig, ForwardOpts, TapPosition};
use crate::graph::Graph;
use crate::params::{Ctx, ParamStore, SpecBuilder};
use crate::physics::{physics_loss_node, Level, Normalizer, TaskContext};
use crate::alignment::head_specs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub loss: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }
}

/// Worst relative error between `analytic` and central differences of `f`
/// over the coordinates in `idx`.
///
/// Each error is normalized by `max(|a_i|, |n_i|, 1e-3 max_j |a_j|)` so that
/// near-zero entries of a large gradient do not dominate.
pub fn fd_max_rel_err(x: &[f64], analytic: &[f64], idx: &[usize], f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let scale = idx.iter().map(|&i| analytic[i].abs()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &i in idx {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        let num = (fp - fm) / (2.0 * h);
        let den = analytic[i].abs().max(num.abs()).max(1e-3 * scale).max(1e-300);
        worst = worst.max((analytic[i] - num).abs() / den);
    }
    worst
}

fn pick(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Physics loss of a raw `[B, C, H, W]` tensor and its gradient.
fn node_loss(x: &[f64], shape: &[usize], tctx: &TaskContext, sigma2: &[f64], level: Level) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    let z = g.input(x.to_vec(), shape);
    let norm = Normalizer::identity(shape[1]);
    let l = physics_loss_node(&mut g, z, tctx, &norm, sigma2, level)?;
    let gr = g.backward(l);
    Ok((g.scalar(l), gr.wrt(z).unwrap().to_vec()))
}

fn check_node(
    name: &str,
    x: Vec<f64>,
    shape: &[usize],
    tctx: &TaskContext,
    level: Level,
    tol: f64,
    corrupt: bool,
    rng: &mut ChaCha8Rng,
) -> Result<GradcheckEntry> {
    let sigma2 = vec![0.37; shape[0]];
    let (_, mut grad) = node_loss(&x, shape, tctx, &sigma2, level)?;
    if corrupt {
        for v in grad.iter_mut() {
            *v *= 1.01;
        }
    }
    let idx = pick(x.len(), 48, rng);
    let mut f = |xp: &[f64]| node_loss(xp, shape, tctx, &sigma2, level).unwrap().0;
    let err = fd_max_rel_err(&x, &grad, &idx, &mut f);
    Ok(GradcheckEntry {
        loss: name.into(),
        checked: idx.len(),
        max_rel_err: err,
        pass: err < tol,
    })
}

fn smooth_field(grid: Grid2D, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    let (a, b, c): (f64, f64, f64) = (rng.random_range(1.0..3.0), rng.random_range(1.0..3.0), rng.random());
    (0..grid.len())
        .map(|k| {
            let (i, j) = (k % grid.n_x, k / grid.n_x);
            let s = 0.5 + 0.5 * (a * grid.x(i) + c).sin() * (b * grid.y(j)).cos();
            lo + (hi - lo) * s + 0.01 * rng.random::<f64>()
        })
        .collect()
}

fn topology_setup(rng: &mut ChaCha8Rng) -> Result<(TaskContext, Vec<f64>)> {
    let mesh = FemMesh::new(6, 4)?;
    let grid = Grid2D::new(6, 4, 1.0 / 6.0)?;
    let case = TopologyCase::random(mesh, rng);
    let rho: Vec<f64> = (0..mesh.n_elems()).map(|_| rng.random_range(0.55..0.9)).collect();
    // A displacement that does not solve the system keeps r_eq away from zero.
    let u: Vec<f64> = (0..mesh.n_dofs()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut rho_oob = rho.clone();
    rho_oob[3] = 1.2;
    rho_oob[7] = 1.1;
    Ok((
        TaskContext::Topology {
            grid,
            cases: vec![case],
            u_ref: vec![Some(u)],
        },
        rho_oob,
    ))
}

/// Every loss's analytic gradient against central differences in f64.
///
/// `corrupt` scales each analytic gradient by 1.01 as a negative control.
pub fn gradcheck_all_losses(tol: f64, seed: u64, corrupt: bool) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    let ds = generate_darcy_dataset(2, seed, &DarcyParams { n: 8, ..Default::default() })?;
    let grid = ds.grid();
    let src = DarcySourceSpec::default();
    let f_s: Vec<Vec<f64>> = (0..2)
        .map(|i| src.field::<f64>(grid, ds.aux("source_balance", i).unwrap()[0]).values)
        .collect();
    let darcy = TaskContext::Darcy { grid, f_s };
    let mut x = Vec::new();
    for _ in 0..2 {
        x.extend(smooth_field(grid, &mut rng, 0.5, 3.0));
        x.extend(smooth_field(grid, &mut rng, -0.1, 0.1));
    }
    entries.push(check_node("darcy_output", x.clone(), &[2, 2, 8, 8], &darcy, Level::Output, tol, corrupt, &mut rng)?);

    let rho: Vec<Vec<f64>> = (0..2).map(|_| smooth_field(grid, &mut rng, -1.0, 1.0)).collect();
    let charge = TaskContext::Charge { grid, rho };
    let u: Vec<f64> = (0..2).flat_map(|_| smooth_field(grid, &mut rng, -0.2, 0.2)).collect();
    entries.push(check_node("poisson_output", u, &[2, 1, 8, 8], &charge, Level::Output, tol, corrupt, &mut rng)?);

    let turb = TaskContext::Turbulence {
        grid,
        batch: 2,
        weights: TurbulenceWeights { smooth: 0.7, boundary: 1.3 },
    };
    let u: Vec<f64> = (0..2).flat_map(|_| smooth_field(grid, &mut rng, -1.0, 1.0)).collect();
    entries.push(check_node("turbulence_output", u, &[2, 1, 8, 8], &turb, Level::Output, tol, corrupt, &mut rng)?);

    let (topo, rho) = topology_setup(&mut rng)?;
    entries.push(check_node("topology_vol_bound", rho.clone(), &[1, 1, 4, 6], &topo, Level::Mid, tol, corrupt, &mut rng)?);
    entries.push(check_node("topology_equilibrium", rho.clone(), &[1, 1, 4, 6], &topo, Level::Output, tol, corrupt, &mut rng)?);

    // Adjoint compliance gradient through the displacement solve.
    if let TaskContext::Topology { cases, .. } = &topo {
        let case = &cases[0];
        let rho_in: Vec<f64> = rho.iter().map(|v| v.min(0.95)).collect();
        let (_, mut gc) = compliance_and_gradient(case.mesh, &rho_in, &case.f, &case.fixed)?;
        if corrupt {
            gc.iter_mut().for_each(|v| *v *= 1.01);
        }
        let idx = pick(rho_in.len(), 24, &mut rng);
        let mut f = |r: &[f64]| compliance_and_gradient(case.mesh, r, &case.f, &case.fixed).unwrap().0;
        let err = fd_max_rel_err(&rho_in, &gc, &idx, &mut f);
        entries.push(GradcheckEntry {
            loss: "topology_adjoint_compliance".into(),
            checked: idx.len(),
            max_rel_err: err,
            pass: err < tol,
        });
    }

    entries.extend(check_mid_layer(&darcy, tol, corrupt, &mut rng)?);
    entries.push(check_total(tol, corrupt, &mut rng)?);
    Ok(GradcheckReport { tolerance: tol, entries })
}

/// Mid-layer loss through a head on a 4-channel toy tap: head parameters and tap values.
fn check_mid_layer(darcy: &TaskContext, tol: f64, corrupt: bool, rng: &mut ChaCha8Rng) -> Result<Vec<GradcheckEntry>> {
    let pos = TapPosition::Bottleneck;
    let mut b = SpecBuilder::default();
    head_specs(&mut b, pos, 4, 6, 2);
    let store: ParamStore<f64> = ParamStore::from_specs(b.specs, rng);
    let tap: Vec<f64> = (0..2 * 4 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sigma2 = [0.5, 0.8];
    let norm = Normalizer {
        mean: vec![1.5, 0.0],
        std: vec![0.5, 0.05],
    };
    let eval = |store: &ParamStore<f64>, tap: &[f64]| -> Result<(f64, Vec<f64>, Vec<(usize, Vec<f64>)>)> {
        let mut g = Graph::new();
        let t = g.input(tap.to_vec(), &[2, 4, 4, 4]);
        let (l, _) = {
            let mut ctx = Ctx::new(&mut g, store);
            let z = project_features(&mut ctx, pos, t, 8, 8)?;
            (physics_loss_node(ctx.g, z, darcy, &norm, &sigma2, Level::Mid)?, ())
        };
        let gr = g.backward(l);
        Ok((g.scalar(l), gr.wrt(t).unwrap().to_vec(), gr.params()))
    };
    let (_, mut gtap, gparams) = eval(&store, &tap)?;
    if corrupt {
        gtap.iter_mut().for_each(|v| *v *= 1.01);
    }
    let idx = pick(tap.len(), 40, rng);
    let mut f = |tp: &[f64]| eval(&store, tp).unwrap().0;
    let tap_err = fd_max_rel_err(&tap, &gtap, &idx, &mut f);

    let mut head_err: f64 = 0.0;
    let mut checked = 0;
    for (id, mut gp) in gparams {
        if corrupt {
            gp.iter_mut().for_each(|v| *v *= 1.01);
        }
        let x = store.values[id].clone();
        let idx = pick(x.len(), 12, rng);
        checked += idx.len();
        let mut f = |xp: &[f64]| {
            let mut s = store.clone();
            s.values[id] = xp.to_vec();
            eval(&s, &tap).unwrap().0
        };
        head_err = head_err.max(fd_max_rel_err(&x, &gp, &idx, &mut f));
    }
    Ok(vec![
        GradcheckEntry {
            loss: "mid_layer_tap".into(),
            checked: idx.len(),
            max_rel_err: tap_err,
            pass: tap_err < tol,
        },
        GradcheckEntry {
            loss: "mid_layer_head_params".into(),
            checked,
            max_rel_err: head_err,
            pass: head_err < tol,
        },
    ])
}

/// The full objective through a tiny U-Net, with respect to sampled backbone and head parameters.
fn check_total(tol: f64, corrupt: bool, rng: &mut ChaCha8Rng) -> Result<GradcheckEntry> {
    let cfg = BackboneConfig {
        base_channels: 4,
        channel_mult: vec![1, 2],
        num_res_blocks: 1,
        ..BackboneConfig::desk_unet(1, 1, 8, 8)
    };
    let align = AlignmentConfig {
        positions: vec![TapPosition::Bottleneck, TapPosition::Decoder(1)],
        c_mid: 0.3,
        c_out: 0.2,
        head_hidden: 4,
    };
    let model = Model::<f64>::new(cfg, align, 1, rng.random())?;
    let grid = Grid2D::unit_square(8)?;
    let tctx = TaskContext::Charge {
        grid,
        rho: (0..2).map(|_| smooth_field(grid, rng, -1.0, 1.0)).collect(),
    };
    let sched = make_cosine_schedule(20)?;
    let x0: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let xt: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = Normalizer {
        mean: vec![0.1],
        std: vec![0.3],
    };
    let ts = [4, 13];
    let eval = |params: &ParamStore<f64>| -> Result<(f64, Vec<(usize, Vec<f64>)>)> {
        let mut g = Graph::new();
        let m = Model {
            params: params.clone(),
            ..model.clone()
        };
        let root = {
            let mut ctx = Ctx::new(&mut g, &m.params);
            let batch = Batch {
                x0: &x0,
                x_t: &xt,
                cond: None,
                ts: &ts,
                tctx: &tctx,
                observed: None,
            };
            total_loss(&mut ctx, &m, &batch, &sched, &norm, &ForwardOpts::default())?.root
        };
        Ok((g.scalar(root), g.backward(root).params()))
    };
    let (_, grads) = eval(&model.params)?;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names = ["backbone.in.w", "backbone.mid.c2.w", "backbone.out.c.w", "heads.bottleneck.l1.w", "heads.decoder_1.l2.w"];
    for name in names {
        let id = model.params.id(name).expect("known parameter");
        let mut ga = grads.iter().find(|(i, _)| *i == id).map(|(_, g)| g.clone()).unwrap_or_default();
        if corrupt {
            ga.iter_mut().for_each(|v| *v *= 1.01);
        }
        let x = model.params.values[id].clone();
        let idx = pick(x.len(), 6, rng);
        checked += idx.len();
        let mut f = |xp: &[f64]| {
            let mut s = model.params.clone();
            s.values[id] = xp.to_vec();
            eval(&s).unwrap().0
        };
        worst = worst.max(fd_max_rel_err(&x, &ga, &idx, &mut f));
    }
    Ok(GradcheckEntry {
        loss: "total_objective".into(),
        checked,
        max_rel_err: worst,
        pass: worst < tol,
    })
}
