//! Plane-stress bilinear finite elements with SIMP penalization.
//!
//! Nodes are numbered `iy * (nelx + 1) + ix` with `y` pointing up; node `n`
//! owns degrees of freedom `2n` (x) and `2n + 1` (y). Element `(ex, ey)` is
//! stored at `ey * nelx + ex` and visits its corners counter-clockwise from
//! the lower left.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdBand;

pub const SIMP_P: i32 = 3;
pub const RHO_MIN: f64 = 1e-3;
pub const POISSON_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FemMesh {
    pub nelx: usize,
    pub nely: usize,
}

impl FemMesh {
    pub fn new(nelx: usize, nely: usize) -> Result<Self> {
        if nelx == 0 || nely == 0 {
            return Err(Error::Argument("mesh needs at least one element per side".into()));
        }
        Ok(Self { nelx, nely })
    }

    pub fn n_elems(&self) -> usize {
        self.nelx * self.nely
    }

    pub fn n_nodes(&self) -> usize {
        (self.nelx + 1) * (self.nely + 1)
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn node(&self, ix: usize, iy: usize) -> usize {
        iy * (self.nelx + 1) + ix
    }

    pub fn elem_dofs(&self, ex: usize, ey: usize) -> [usize; 8] {
        let n = [
            self.node(ex, ey),
            self.node(ex + 1, ey),
            self.node(ex + 1, ey + 1),
            self.node(ex, ey + 1),
        ];
        [
            2 * n[0],
            2 * n[0] + 1,
            2 * n[1],
            2 * n[1] + 1,
            2 * n[2],
            2 * n[2] + 1,
            2 * n[3],
            2 * n[3] + 1,
        ]
    }

    /// Half-bandwidth of the assembled matrix in DOFs.
    pub fn bandwidth(&self) -> usize {
        2 * (self.nelx + 1) + 3
    }
}

/// Unit-modulus element stiffness for a unit square element, closed form.
pub fn element_stiffness(nu: f64) -> [[f64; 8]; 8] {
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    let idx = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    let s = 1.0 / (1.0 - nu * nu);
    let mut ke = [[0.0; 8]; 8];
    for r in 0..8 {
        for c in 0..8 {
            ke[r][c] = s * k[idx[r][c]];
        }
    }
    ke
}

/// SIMP modulus `max(clamp(ρ, 0, 1), ρ_min)^3` and its derivative.
pub fn simp_modulus(rho: f64) -> (f64, f64) {
    let r = rho.clamp(0.0, 1.0);
    if r <= RHO_MIN {
        (RHO_MIN.powi(SIMP_P), 0.0)
    } else {
        let d = if rho >= 1.0 { 0.0 } else { 3.0 * r * r };
        (r.powi(SIMP_P), d)
    }
}

#[derive(Clone, Debug)]
pub struct StiffnessSystem {
    pub mesh: FemMesh,
    /// Assembled matrix before support elimination.
    pub k: SpdBand<f64>,
    pub f: Vec<f64>,
    pub fixed: Vec<usize>,
    pub moduli: Vec<f64>,
}

pub fn assemble_stiffness(mesh: FemMesh, rho: &[f64], f: Vec<f64>, mut fixed: Vec<usize>) -> Result<StiffnessSystem> {
    if rho.len() != mesh.n_elems() {
        return Err(Error::Shape(format!(
            "density has {} entries, mesh has {} elements",
            rho.len(),
            mesh.n_elems()
        )));
    }
    if f.len() != mesh.n_dofs() {
        return Err(Error::Shape("load vector length must equal DOF count".into()));
    }
    fixed.sort_unstable();
    fixed.dedup();
    if fixed.len() < 3 {
        return Err(Error::Singular(format!(
            "{} fixed DOFs cannot remove rigid-body modes",
            fixed.len()
        )));
    }
    if fixed.iter().any(|&d| d >= mesh.n_dofs()) {
        return Err(Error::Argument("fixed DOF index out of range".into()));
    }
    let out_of_range = rho.iter().filter(|&&r| !(0.0..=1.0).contains(&r)).count();
    if out_of_range > 0 {
        warn!("assemble_stiffness: clamped {out_of_range} densities into [0,1]");
    }
    let ke = element_stiffness(POISSON_RATIO);
    let mut k = SpdBand::new(mesh.n_dofs(), mesh.bandwidth());
    let mut moduli = Vec::with_capacity(mesh.n_elems());
    for ey in 0..mesh.nely {
        for ex in 0..mesh.nelx {
            let e = simp_modulus(rho[ey * mesh.nelx + ex]).0;
            moduli.push(e);
            let d = mesh.elem_dofs(ex, ey);
            for a in 0..8 {
                for b in 0..=a {
                    k.add_sym(d[a], d[b], e * ke[a][b]);
                }
            }
        }
    }
    Ok(StiffnessSystem {
        mesh,
        k,
        f,
        fixed,
        moduli,
    })
}

impl StiffnessSystem {
    fn is_fixed(&self) -> Vec<bool> {
        let mut m = vec![false; self.mesh.n_dofs()];
        for &d in &self.fixed {
            m[d] = true;
        }
        m
    }

    /// Matrix with supports eliminated (identity rows/columns).
    pub fn constrained(&self) -> SpdBand<f64> {
        let mut k = self.k.clone();
        for &d in &self.fixed {
            k.fix_dof(d);
        }
        k
    }

    /// Displacements with `u = 0` on fixed DOFs.
    pub fn solve(&self) -> Result<Vec<f64>> {
        let ch = self.constrained().cholesky()?;
        let mask = self.is_fixed();
        let mut u: Vec<f64> = self
            .f
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { 0.0 } else { v })
            .collect();
        ch.solve(&mut u);
        Ok(u)
    }

    /// `K̃ u - f̃` for the support-eliminated system.
    pub fn equilibrium_residual(&self, u: &[f64]) -> Vec<f64> {
        let ku = self.constrained().matvec(u);
        let mask = self.is_fixed();
        ku.iter()
            .zip(&self.f)
            .zip(&mask)
            .map(|((a, b), &m)| if m { *a } else { a - b })
            .collect()
    }

    pub fn compliance(&self, u: &[f64]) -> f64 {
        self.f.iter().zip(u).map(|(a, b)| a * b).sum()
    }

    /// `u_e^T k_e^0 u_e` per element.
    pub fn element_energies(&self, u: &[f64]) -> Vec<f64> {
        let ke = element_stiffness(POISSON_RATIO);
        let m = self.mesh;
        let mut out = Vec::with_capacity(m.n_elems());
        for ey in 0..m.nely {
            for ex in 0..m.nelx {
                let d = m.elem_dofs(ex, ey);
                let mut s = 0.0;
                for a in 0..8 {
                    for b in 0..8 {
                        s += u[d[a]] * ke[a][b] * u[d[b]];
                    }
                }
                out.push(s);
            }
        }
        out
    }
}

/// Compliance `fᵀu(ρ)` and its adjoint sensitivity `-E'(ρ_e) u_eᵀ k_e^0 u_e`.
pub fn compliance_and_gradient(mesh: FemMesh, rho: &[f64], f: &[f64], fixed: &[usize]) -> Result<(f64, Vec<f64>)> {
    let sys = assemble_stiffness(mesh, rho, f.to_vec(), fixed.to_vec())?;
    let u = sys.solve()?;
    let c = sys.compliance(&u);
    let en = sys.element_energies(&u);
    let g = rho
        .iter()
        .zip(&en)
        .map(|(&r, &e)| -simp_modulus(r).1 * e)
        .collect();
    Ok((c, g))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyResiduals {
    pub r_eq: f64,
    pub r_vol: f64,
    pub r_bound: f64,
    pub lambda_vol: f64,
    pub lambda_bound: f64,
}

impl TopologyResiduals {
    /// `r_eq + λ_vol r_vol + λ_bound r_bound`.
    pub fn r_mae(&self) -> f64 {
        self.r_eq + self.lambda_vol * self.r_vol + self.lambda_bound * self.r_bound
    }

    /// Entries of the residual vector used by the quadratic physics loss.
    pub fn as_vector(&self) -> [f64; 3] {
        [
            self.r_eq,
            self.lambda_vol * self.r_vol,
            self.lambda_bound * self.r_bound,
        ]
    }
}

pub fn volume_residual(rho: &[f64], v_target: f64) -> f64 {
    (rho.iter().sum::<f64>() / rho.len() as f64 - v_target).max(0.0)
}

pub fn bound_residual(rho: &[f64]) -> f64 {
    let lo: f64 = rho.iter().map(|&r| (-r).max(0.0).powi(2)).sum::<f64>().sqrt();
    let hi: f64 = rho.iter().map(|&r| (r - 1.0).max(0.0).powi(2)).sum::<f64>().sqrt();
    lo + hi
}

/// Gradients of `r_vol` and `r_bound` with respect to `ρ`.
pub fn vol_bound_gradients(rho: &[f64], v_target: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rho.len() as f64;
    let active = volume_residual(rho, v_target) > 0.0;
    let gv = vec![if active { 1.0 / n } else { 0.0 }; rho.len()];
    let lo: f64 = rho.iter().map(|&r| (-r).max(0.0).powi(2)).sum::<f64>().sqrt();
    let hi: f64 = rho.iter().map(|&r| (r - 1.0).max(0.0).powi(2)).sum::<f64>().sqrt();
    let gb = rho
        .iter()
        .map(|&r| {
            if r < 0.0 && lo > 0.0 {
                r / lo
            } else if r > 1.0 && hi > 0.0 {
                (r - 1.0) / hi
            } else {
                0.0
            }
        })
        .collect();
    (gv, gb)
}

pub fn topology_residuals(rho: &[f64], u: &[f64], sys: &StiffnessSystem, v_target: f64) -> Result<TopologyResiduals> {
    if u.len() != sys.mesh.n_dofs() {
        return Err(Error::Shape(format!(
            "displacement has {} entries, system has {} DOFs",
            u.len(),
            sys.mesh.n_dofs()
        )));
    }
    let r = sys.equilibrium_residual(u);
    Ok(TopologyResiduals {
        r_eq: r.iter().map(|v| v * v).sum::<f64>().sqrt(),
        r_vol: volume_residual(rho, v_target),
        r_bound: bound_residual(rho),
        lambda_vol: 1.0,
        lambda_bound: 1.0,
    })
}

/// Gradient of `r_eq = ||K̃(ρ)u - f̃||` with respect to `ρ` at fixed `u`.
pub fn equilibrium_gradient(rho: &[f64], u: &[f64], sys: &StiffnessSystem) -> Vec<f64> {
    let r = sys.equilibrium_residual(u);
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let m = sys.mesh;
    let mut g = vec![0.0; m.n_elems()];
    if norm == 0.0 {
        return g;
    }
    let mut fixed = vec![false; m.n_dofs()];
    for &d in &sys.fixed {
        fixed[d] = true;
    }
    let ke = element_stiffness(POISSON_RATIO);
    for ey in 0..m.nely {
        for ex in 0..m.nelx {
            let e = ey * m.nelx + ex;
            let de = simp_modulus(rho[e]).1;
            if de == 0.0 {
                continue;
            }
            let d = m.elem_dofs(ex, ey);
            let mut s = 0.0;
            for a in 0..8 {
                if fixed[d[a]] {
                    continue;
                }
                let mut kv = 0.0;
                for b in 0..8 {
                    if !fixed[d[b]] {
                        kv += ke[a][b] * u[d[b]];
                    }
                }
                s += r[d[a]] * kv;
            }
            g[e] = de * s / norm;
        }
    }
    g
}
