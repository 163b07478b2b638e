//! Small SIMP optimality-criteria optimizer producing topology fixtures.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::darcy::sample_rng;
use crate::dataset::{ChannelRole, DatasetContainer, Provenance};
use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, FemMesh, RHO_MIN, SIMP_P};
use crate::field::{Field, Grid2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportKind {
    Cantilever,
    Mbb,
    Bridge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopologyCase {
    pub mesh: FemMesh,
    pub support: SupportKind,
    pub f: Vec<f64>,
    pub fixed: Vec<usize>,
    pub v_target: f64,
}

impl TopologyCase {
    /// Random supports, a unit boundary load and `V_target ~ U(0.3, 0.6)`.
    pub fn random<R: Rng>(mesh: FemMesh, rng: &mut R) -> Self {
        let support = match rng.random_range(0..3) {
            0 => SupportKind::Cantilever,
            1 => SupportKind::Mbb,
            _ => SupportKind::Bridge,
        };
        let mut fixed = Vec::new();
        let (nx, ny) = (mesh.nelx, mesh.nely);
        let load_node = match support {
            SupportKind::Cantilever => {
                for iy in 0..=ny {
                    let n = mesh.node(0, iy);
                    fixed.extend([2 * n, 2 * n + 1]);
                }
                mesh.node(nx, rng.random_range(0..=ny))
            }
            SupportKind::Mbb => {
                for iy in 0..=ny {
                    fixed.push(2 * mesh.node(0, iy));
                }
                fixed.push(2 * mesh.node(nx, 0) + 1);
                mesh.node(rng.random_range(0..=nx / 2), ny)
            }
            SupportKind::Bridge => {
                for n in [mesh.node(0, 0), mesh.node(nx, 0)] {
                    fixed.extend([2 * n, 2 * n + 1]);
                }
                mesh.node(rng.random_range(1..nx), ny)
            }
        };
        let theta = rng.random_range(-0.75 * std::f64::consts::PI..-0.25 * std::f64::consts::PI);
        let mut f = vec![0.0; mesh.n_dofs()];
        f[2 * load_node] = theta.cos();
        f[2 * load_node + 1] = theta.sin();
        let v_target = rng.random_range(0.3..0.6);
        Self {
            mesh,
            support,
            f,
            fixed,
            v_target,
        }
    }

    /// `[load_x, load_y, bc_mask]` rasterized on the element grid.
    pub fn condition_channels(&self) -> Result<Field<f64>> {
        let m = self.mesh;
        let grid = Grid2D::new(m.nelx, m.nely, 1.0 / m.nelx as f64)?;
        let mut fixed = vec![false; m.n_dofs()];
        for &d in &self.fixed {
            fixed[d] = true;
        }
        let mut out = Field::zeros(grid, 3);
        for ey in 0..m.nely {
            for ex in 0..m.nelx {
                let d = m.elem_dofs(ex, ey);
                let (mut fx, mut fy, mut bc) = (0.0, 0.0, 0.0);
                for a in 0..4 {
                    fx += self.f[d[2 * a]] / 4.0;
                    fy += self.f[d[2 * a + 1]] / 4.0;
                    if fixed[d[2 * a]] || fixed[d[2 * a + 1]] {
                        bc = 1.0;
                    }
                }
                *out.at_mut(0, ex, ey) = fx;
                *out.at_mut(1, ex, ey) = fy;
                *out.at_mut(2, ex, ey) = bc;
            }
        }
        Ok(out)
    }

    pub fn fixed_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.mesh.n_dofs()];
        for &d in &self.fixed {
            m[d] = 1.0;
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpParams {
    pub filter_radius: f64,
    pub max_iter: usize,
    pub move_limit: f64,
    pub tol: f64,
}

impl Default for SimpParams {
    fn default() -> Self {
        Self {
            filter_radius: 1.5,
            max_iter: 100,
            move_limit: 0.2,
            tol: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimpResult {
    pub rho: Vec<f64>,
    pub compliance_history: Vec<f64>,
    pub iterations: usize,
}

/// Optimality-criteria SIMP loop with a sensitivity filter and bisection on the multiplier.
pub fn simp_optimize(case: &TopologyCase, params: &SimpParams) -> Result<SimpResult> {
    let m = case.mesh;
    let ne = m.n_elems();
    let vf = case.v_target;
    let mut x = vec![vf; ne];
    let r = params.filter_radius;
    let reach = r.ceil() as isize;
    // filter weights H_ef = max(0, r - dist)
    let mut neigh: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ne];
    for ey in 0..m.nely as isize {
        for ex in 0..m.nelx as isize {
            let e = (ey as usize) * m.nelx + ex as usize;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (fx, fy) = (ex + dx, ey + dy);
                    if fx < 0 || fy < 0 || fx >= m.nelx as isize || fy >= m.nely as isize {
                        continue;
                    }
                    let w = r - ((dx * dx + dy * dy) as f64).sqrt();
                    if w > 0.0 {
                        neigh[e].push(((fy as usize) * m.nelx + fx as usize, w));
                    }
                }
            }
        }
    }
    let evaluate = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let sys = assemble_stiffness(m, x, case.f.clone(), case.fixed.clone())?;
        let u = sys.solve()?;
        let en = sys.element_energies(&u);
        let c = sys.moduli.iter().zip(&en).map(|(e, w)| e * w).sum();
        Ok((c, en))
    };
    let (mut c, mut en) = evaluate(&x)?;
    let mut history = vec![c];
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let dc: Vec<f64> = x
            .iter()
            .zip(&en)
            .map(|(&xe, &w)| -(SIMP_P as f64) * xe.powi(SIMP_P - 1) * w)
            .collect();
        let dcf: Vec<f64> = (0..ne)
            .map(|e| {
                let (mut num, mut den) = (0.0, 0.0);
                for &(f, w) in &neigh[e] {
                    num += w * x[f] * dc[f];
                    den += w;
                }
                num / (x[e].max(RHO_MIN) * den)
            })
            .collect();
        let (mut l1, mut l2) = (0.0f64, 1e9f64);
        let mut xnew = x.clone();
        while (l2 - l1) / (l1 + l2) > 1e-4 {
            let lmid = 0.5 * (l1 + l2);
            for e in 0..ne {
                let be = (-dcf[e] / lmid).max(0.0).sqrt();
                xnew[e] = (x[e] * be)
                    .min(x[e] + params.move_limit)
                    .min(1.0)
                    .max(x[e] - params.move_limit)
                    .max(RHO_MIN);
            }
            if xnew.iter().sum::<f64>() > vf * ne as f64 {
                l1 = lmid;
            } else {
                l2 = lmid;
            }
        }
        // backtrack toward x until compliance does not increase
        let mut accepted = None;
        for _ in 0..8 {
            let (cn, enn) = evaluate(&xnew)?;
            if cn <= c {
                accepted = Some((cn, enn));
                break;
            }
            for (xn, xo) in xnew.iter_mut().zip(&x) {
                *xn = 0.5 * (*xn + xo);
            }
        }
        let Some((cn, enn)) = accepted else { break };
        let change = x.iter().zip(&xnew).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        x = xnew;
        c = cn;
        en = enn;
        history.push(c);
        if change < params.tol {
            break;
        }
    }
    Ok(SimpResult {
        rho: x,
        compliance_history: history,
        iterations,
    })
}

/// Optimized density (rounded to storage precision), displacements and compliance.
pub struct TopologyFixture {
    pub case: TopologyCase,
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub compliance: f64,
    pub history: Vec<f64>,
}

pub fn make_fixture(case: TopologyCase, params: &SimpParams) -> Result<TopologyFixture> {
    let res = simp_optimize(&case, params)?;
    // displacements are recomputed from the stored single-precision density
    let rho: Vec<f64> = res.rho.iter().map(|&v| v as f32 as f64).collect();
    let sys = assemble_stiffness(case.mesh, &rho, case.f.clone(), case.fixed.clone())?;
    let u = sys.solve()?;
    let compliance = sys.compliance(&u);
    Ok(TopologyFixture {
        case,
        rho,
        u,
        compliance,
        history: res.compliance_history,
    })
}

/// Layout `[rho (data), load_x, load_y, bc_mask (conditions)]` on the element grid.
///
/// Aux arrays: `u`, `f`, `fixed_mask` (all `2 * nodes`) and `scalars = [V_target, C_opt]`.
pub fn generate_topology_fixtures(nelx: usize, nely: usize, n_cases: usize, seed: u64) -> Result<DatasetContainer> {
    if nelx > 32 || nely > 32 {
        return Err(Error::Argument("topology fixtures are limited to 32x32 elements".into()));
    }
    let mesh = FemMesh::new(nelx, nely)?;
    let grid = Grid2D::new(nelx, nely, 1.0 / nelx as f64)?;
    let params = SimpParams::default();
    let mut prov = Provenance {
        generator: "simp-oc".into(),
        seed,
        params: Default::default(),
    };
    prov.params.insert("simp".into(), serde_json::to_value(params).unwrap());
    prov.params.insert("mesh".into(), serde_json::to_value(mesh).unwrap());
    let mut ds = DatasetContainer::new(
        "topology",
        grid,
        vec![
            ChannelRole::data("rho"),
            ChannelRole::condition("load_x"),
            ChannelRole::condition("load_y"),
            ChannelRole::condition("bc_mask"),
        ],
        prov,
    );
    let nd = mesh.n_dofs();
    ds.declare_aux("u", nd);
    ds.declare_aux("f", nd);
    ds.declare_aux("fixed_mask", nd);
    ds.declare_aux("scalars", 2);
    let mut attempt = 0u64;
    while ds.n < n_cases {
        let mut rng = sample_rng(seed, attempt);
        attempt += 1;
        if attempt > 10 * n_cases as u64 + 10 {
            return Err(Error::Numeric("too many rejected topology cases".into()));
        }
        let case = TopologyCase::random(mesh, &mut rng);
        let fx = match make_fixture(case, &params) {
            Ok(fx) => fx,
            Err(e) => {
                warn!("rejected topology case {}: {e}", attempt - 1);
                continue;
            }
        };
        let rho = Field::from_vec(grid, 1, fx.rho.clone())?;
        let cond = fx.case.condition_channels()?;
        ds.push_sample(&Field::stack(&[&rho, &cond])?)?;
        ds.push_aux("u", &fx.u)?;
        ds.push_aux("f", &fx.case.f)?;
        ds.push_aux("fixed_mask", &fx.case.fixed_mask())?;
        ds.push_aux("scalars", &[fx.case.v_target, fx.compliance])?;
    }
    Ok(ds)
}

/// Rebuild the case stored at `index` of a fixture container.
pub fn case_from_dataset(ds: &DatasetContainer, index: usize) -> Result<TopologyCase> {
    let mesh = FemMesh::new(ds.width, ds.height)?;
    let missing = |n: &str| Error::Format(format!("topology container lacks aux array {n}"));
    let f = ds.aux("f", index).ok_or_else(|| missing("f"))?.to_vec();
    let mask = ds.aux("fixed_mask", index).ok_or_else(|| missing("fixed_mask"))?;
    let scalars = ds.aux("scalars", index).ok_or_else(|| missing("scalars"))?;
    let fixed = mask
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(TopologyCase {
        mesh,
        support: SupportKind::Cantilever,
        f,
        fixed,
        v_target: scalars[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::topology_residuals;

    fn cantilever_case(n: usize) -> TopologyCase {
        let mesh = FemMesh::new(2 * n, n).unwrap();
        let mut fixed = Vec::new();
        for iy in 0..=n {
            let k = mesh.node(0, iy);
            fixed.extend([2 * k, 2 * k + 1]);
        }
        let mut f = vec![0.0; mesh.n_dofs()];
        f[2 * mesh.node(2 * n, n / 2) + 1] = -1.0;
        TopologyCase {
            mesh,
            support: SupportKind::Cantilever,
            f,
            fixed,
            v_target: 0.4,
        }
    }

    #[test]
    fn cantilever_fixture_is_self_consistent() {
        let case = cantilever_case(8);
        let fx = make_fixture(case.clone(), &SimpParams::default()).unwrap();
        let sys = assemble_stiffness(case.mesh, &fx.rho, case.f.clone(), case.fixed.clone()).unwrap();
        let r = topology_residuals(&fx.rho, &fx.u, &sys, case.v_target).unwrap();
        assert!(r.r_eq < 1e-6, "r_eq {}", r.r_eq);
        let mean = fx.rho.iter().sum::<f64>() / fx.rho.len() as f64;
        assert!(mean <= case.v_target + 0.01);
        assert!(fx.history.first().unwrap() > fx.history.last().unwrap());
        assert!(fx.history.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn container_round_trips_cases() {
        let ds = generate_topology_fixtures(8, 8, 2, 3).unwrap();
        assert_eq!(ds.n, 2);
        for i in 0..2 {
            let case = case_from_dataset(&ds, i).unwrap();
            let s = ds.sample::<f64>(i);
            let rho = s.channel(0).to_vec();
            let sys = assemble_stiffness(case.mesh, &rho, case.f.clone(), case.fixed.clone()).unwrap();
            let u = ds.aux("u", i).unwrap();
            assert!(topology_residuals(&rho, u, &sys, case.v_target).unwrap().r_eq < 1e-6);
        }
    }
}
