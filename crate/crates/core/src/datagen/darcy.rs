//! Darcy flow: compatible sources, the finite-difference solve and dataset assembly.
//!
//! Homogeneous Neumann conditions are imposed by eliminating edge unknowns
//! (each edge value equals its inward neighbour, corners copy the diagonal
//! interior point). What remains is a singular system `B q = f` on the
//! interior. Its left null vector `w` defines discrete compatibility: the
//! system is solvable exactly when `w·f = 0`.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grf::{make_permeability, MaternSampler};
use crate::dataset::{ChannelRole, DatasetContainer, Provenance};
use crate::error::{Error, Result};
use crate::field::{Field, Grid2D};
use crate::linalg::BandMatrix;
use crate::residual::center_slice;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcySourceSpec {
    pub amplitude: f64,
    pub width: f64,
    pub positive: (f64, f64),
    pub negative: (f64, f64),
}

impl Default for DarcySourceSpec {
    fn default() -> Self {
        Self {
            amplitude: 1.0,
            width: 0.05,
            positive: (0.25, 0.25),
            negative: (0.75, 0.75),
        }
    }
}

impl DarcySourceSpec {
    fn bump(&self, grid: Grid2D, c: (f64, f64)) -> Vec<f64> {
        let s2 = 2.0 * self.width * self.width;
        let mut out = Vec::with_capacity(grid.len());
        for j in 0..grid.n_y {
            for i in 0..grid.n_x {
                let (dx, dy) = (grid.x(i) - c.0, grid.y(j) - c.1);
                out.push((-(dx * dx + dy * dy) / s2).exp());
            }
        }
        out
    }

    /// `A * (g+ - balance * g-)` on the full grid.
    pub fn field<T: Scalar>(&self, grid: Grid2D, balance: f64) -> Field<T> {
        let gp = self.bump(grid, self.positive);
        let gm = self.bump(grid, self.negative);
        Field {
            grid,
            channels: 1,
            values: gp
                .iter()
                .zip(&gm)
                .map(|(a, b)| T::lit(self.amplitude * (a - balance * b)))
                .collect(),
        }
    }

    /// Balance factor making the source compatible with permeability `k`.
    pub fn balance<T: Scalar>(&self, k: &Field<T>) -> Result<f64> {
        let w = compatibility_weights(k)?;
        let grid = k.grid;
        let gp = interior(grid, &self.bump(grid, self.positive));
        let gm = interior(grid, &self.bump(grid, self.negative));
        let wp: f64 = w.iter().zip(&gp).map(|(a, b)| a * b).sum();
        let wm: f64 = w.iter().zip(&gm).map(|(a, b)| a * b).sum();
        if !(wm.abs() > 0.0) || !wp.is_finite() {
            return Err(Error::Numeric("degenerate source balance".into()));
        }
        Ok(wp / wm)
    }

    /// Balance for a possibly invalid permeability; falls back to 1.
    pub fn balance_or_default<T: Scalar>(&self, k: &Field<T>) -> f64 {
        if k.min() <= T::zero() || !k.all_finite() {
            warn!("source balance: permeability not positive, using balance 1");
            return 1.0;
        }
        match self.balance(k) {
            Ok(c) if c.is_finite() && c > 0.0 => c,
            _ => {
                warn!("source balance: compatibility solve failed, using balance 1");
                1.0
            }
        }
    }
}

fn interior(grid: Grid2D, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity((grid.n_x - 2) * (grid.n_y - 2));
    for j in 1..grid.n_y - 1 {
        for i in 1..grid.n_x - 1 {
            out.push(v[grid.idx(i, j)]);
        }
    }
    out
}

/// The interior operator `B` after Neumann elimination, in band form.
fn interior_operator<T: Scalar>(k: &Field<T>) -> BandMatrix<f64> {
    let g = k.grid;
    let (nx, ny) = (g.n_x, g.n_y);
    let mi = nx - 2;
    let m = mi * (ny - 2);
    let ih2 = 1.0 / (g.h * g.h);
    let kv = |i: usize, j: usize| k.values[g.idx(i, j)].to_f64_lossy();
    let unk = |i: usize, j: usize| {
        let ii = i.clamp(1, nx - 2);
        let jj = j.clamp(1, ny - 2);
        (jj - 1) * mi + (ii - 1)
    };
    let mut b = BandMatrix::new(m, mi, mi);
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let r = unk(i, j);
            let kc = kv(i, j) * ih2;
            let dxk = (kv(i + 1, j) - kv(i - 1, j)) * ih2 / 4.0;
            let dyk = (kv(i, j + 1) - kv(i, j - 1)) * ih2 / 4.0;
            b.add(r, r, 4.0 * kc);
            b.add(r, unk(i + 1, j), -(kc + dxk));
            b.add(r, unk(i - 1, j), -(kc - dxk));
            b.add(r, unk(i, j + 1), -(kc + dyk));
            b.add(r, unk(i, j - 1), -(kc - dyk));
        }
    }
    b
}

/// `B` with its first row and column removed.
fn reduced(b: &BandMatrix<f64>, bw: usize) -> BandMatrix<f64> {
    let m = b.n();
    let mut out = BandMatrix::new(m - 1, bw, bw);
    for r in 1..m {
        for c in r.saturating_sub(bw).max(1)..=(r + bw).min(m - 1) {
            let v = b.get(r, c);
            if v != 0.0 {
                out.add(r - 1, c - 1, v);
            }
        }
    }
    out
}

/// Left null vector of the interior operator, scaled to mean 1.
pub fn compatibility_weights<T: Scalar>(k: &Field<T>) -> Result<Vec<f64>> {
    let g = k.grid;
    let bw = g.n_x - 2;
    let b = interior_operator(k);
    let m = b.n();
    let red = reduced(&b, bw).transpose().factor()?;
    let mut rhs: Vec<f64> = (1..m).map(|c| -b.get(0, c)).collect();
    red.solve(&mut rhs);
    let mut w = Vec::with_capacity(m);
    w.push(1.0);
    w.extend(rhs);
    let mean = w.iter().sum::<f64>() / m as f64;
    if !(mean.abs() > 0.0 && mean.is_finite()) {
        return Err(Error::Numeric("compatibility weights degenerate".into()));
    }
    Ok(w.into_iter().map(|v| v / mean).collect())
}

/// Weighted source integral `w·f` relative to `Σ|w f|`.
pub fn compatibility_error<T: Scalar>(k: &Field<T>, f_s: &Field<T>) -> Result<f64> {
    let w = compatibility_weights(k)?;
    let f: Vec<f64> = interior(f_s.grid, &f_s.values.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>());
    let num: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
    let den: f64 = w.iter().zip(&f).map(|(a, b)| (a * b).abs()).sum();
    Ok(if den == 0.0 { 0.0 } else { num.abs() / den })
}

/// Zero-mean pressure solving the Darcy system with Neumann boundaries.
pub fn solve_darcy<T: Scalar>(k: &Field<T>, f_s: &Field<T>) -> Result<Field<T>> {
    if k.grid != f_s.grid || k.channels != 1 || f_s.channels != 1 {
        return Err(Error::Shape("solve_darcy expects single-channel K and f_s on one grid".into()));
    }
    if k.min() <= T::zero() || !k.all_finite() {
        return Err(Error::Argument("solve_darcy requires K > 0".into()));
    }
    let g = k.grid;
    let (nx, ny) = (g.n_x, g.n_y);
    let bw = nx - 2;
    let b = interior_operator(k);
    let m = b.n();
    let fv: Vec<f64> = f_s.values.iter().map(|v| v.to_f64_lossy()).collect();
    let f = interior(g, &fv);
    // compatibility: w·f = 0
    let red_t = reduced(&b, bw).transpose().factor()?;
    let mut w: Vec<f64> = (1..m).map(|c| -b.get(0, c)).collect();
    red_t.solve(&mut w);
    w.insert(0, 1.0);
    let num: f64 = w.iter().zip(&f).map(|(a, c)| a * c).sum();
    let den: f64 = w.iter().zip(&f).map(|(a, c)| (a * c).abs()).sum();
    if den > 0.0 && num.abs() > 1e-10 * den {
        return Err(Error::Argument(format!(
            "incompatible Darcy source: weighted integral {:.3e} relative to {:.3e}",
            num, den
        )));
    }
    let lu = reduced(&b, bw).factor()?;
    let mut q: Vec<f64> = f[1..].to_vec();
    lu.solve(&mut q);
    q.insert(0, 0.0);
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Darcy solve produced non-finite pressure".into()));
    }
    let mut p = vec![0.0; g.len()];
    for j in 0..ny {
        for i in 0..nx {
            let ii = i.clamp(1, nx - 2);
            let jj = j.clamp(1, ny - 2);
            p[g.idx(i, j)] = q[(jj - 1) * bw + (ii - 1)];
        }
    }
    let p = center_slice(&p);
    Ok(Field {
        grid: g,
        channels: 1,
        values: p.into_iter().map(T::lit).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarcyParams {
    pub n: usize,
    pub nu: f64,
    pub length_scale: f64,
    pub source: DarcySourceSpec,
}

impl Default for DarcyParams {
    fn default() -> Self {
        Self {
            n: 64,
            nu: 2.5,
            length_scale: 0.1,
            source: DarcySourceSpec::default(),
        }
    }
}

/// Per-sample generator stream: `(seed, index)` selects a ChaCha stream.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One `(K, p)` pair in f64 plus its source balance.
pub fn darcy_sample(params: &DarcyParams, sampler: &MaternSampler, rng: &mut ChaCha8Rng) -> Result<(Field<f64>, Field<f64>, f64)> {
    let grid = Grid2D::unit_square(params.n)?;
    let grf: Field<f64> = sampler.sample(rng);
    // solve with the permeability as it will be stored
    let k = make_permeability(&grf).map(|v| v as f32 as f64);
    let c = params.source.balance(&k)?;
    let f = params.source.field::<f64>(grid, c);
    let p = solve_darcy(&k, &f)?;
    Ok((k, p, c))
}

/// `N` samples with layout `[K, p]` and aux `source_balance`.
pub fn generate_darcy_dataset(n_samples: usize, seed: u64, params: &DarcyParams) -> Result<DatasetContainer> {
    if n_samples == 0 {
        return Err(Error::Argument("dataset needs at least one sample".into()));
    }
    let grid = Grid2D::unit_square(params.n)?;
    let mut prov = Provenance {
        generator: "darcy-fd".into(),
        seed,
        params: Default::default(),
    };
    prov.params.insert("params".into(), serde_json::to_value(params).unwrap());
    let mut ds = DatasetContainer::new(
        "darcy",
        grid,
        vec![ChannelRole::data("K"), ChannelRole::data("p")],
        prov,
    );
    ds.declare_aux("source_balance", 1);
    let sampler = MaternSampler::new(grid, params.nu, params.length_scale)?;
    for idx in 0..n_samples {
        let mut rng = sample_rng(seed, idx as u64);
        let (k, p, c) = darcy_sample(params, &sampler, &mut rng)?;
        ds.push_sample(&Field::stack(&[&k, &p])?)?;
        ds.push_aux("source_balance", &[c])?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::darcy_residual;

    #[test]
    fn unit_permeability_weights_are_uniform() {
        let g = Grid2D::unit_square(9).unwrap();
        let k = Field::<f64>::constant(g, 1, 1.0);
        let w = compatibility_weights(&k).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn zero_source_gives_zero_pressure() {
        let g = Grid2D::unit_square(10).unwrap();
        let k = Field::<f64>::constant(g, 1, 1.0);
        let p = solve_darcy(&k, &Field::zeros(g, 1)).unwrap();
        assert!(p.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn manufactured_solution_is_recovered() {
        // p* satisfies the eliminated Neumann conditions by construction
        let n = 17;
        let g = Grid2D::unit_square(n).unwrap();
        let k = Field::<f64>::constant(g, 1, 1.0);
        let mut pstar = Field::<f64>::zeros(g, 1);
        for j in 0..n {
            for i in 0..n {
                let (ii, jj) = (i.clamp(1, n - 2), j.clamp(1, n - 2));
                let (x, y) = (g.x(ii), g.y(jj));
                *pstar.at_mut(0, i, j) = (3.0 * x).sin() * (2.0 * y).cos() + x * y;
            }
        }
        let pstar = crate::residual::center_pressure(&pstar);
        // f = -Δ_h p* on the interior
        let mut f = Field::<f64>::zeros(g, 1);
        let ih2 = 1.0 / (g.h * g.h);
        for j in 1..n - 1 {
            for i in 1..n - 1 {
                let c = pstar.at(0, i, j);
                let lap = pstar.at(0, i + 1, j) + pstar.at(0, i - 1, j) + pstar.at(0, i, j + 1)
                    + pstar.at(0, i, j - 1)
                    - 4.0 * c;
                *f.at_mut(0, i, j) = -lap * ih2;
            }
        }
        let p = solve_darcy(&k, &f).unwrap();
        let err = p.values.iter().zip(&pstar.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-8, "max error {err}");
    }

    #[test]
    fn incompatible_source_is_rejected() {
        let g = Grid2D::unit_square(8).unwrap();
        let k = Field::<f64>::constant(g, 1, 1.0);
        let f = Field::<f64>::constant(g, 1, 1.0);
        assert!(matches!(solve_darcy(&k, &f), Err(Error::Argument(_))));
    }

    #[test]
    fn random_sample_satisfies_residual_in_f64() {
        let params = DarcyParams {
            n: 32,
            ..Default::default()
        };
        let grid = Grid2D::unit_square(32).unwrap();
        let sampler = MaternSampler::new(grid, 2.5, 0.1).unwrap();
        let mut rng = sample_rng(5, 0);
        let (k, p, c) = darcy_sample(&params, &sampler, &mut rng).unwrap();
        let f = params.source.field::<f64>(grid, c);
        let r = darcy_residual(&k, &p, &f).unwrap();
        assert!(r.mean_abs() < 1e-8, "r_mae {}", r.mean_abs());
        assert!(p.mean().abs() < 1e-15);
        assert!(compatibility_error(&k, &f).unwrap() < 1e-10);
    }

    #[test]
    fn dataset_seed_separation() {
        let params = DarcyParams {
            n: 12,
            ..Default::default()
        };
        let a = generate_darcy_dataset(1, 3, &params).unwrap();
        let b = generate_darcy_dataset(1, 4, &params).unwrap();
        assert_ne!(a.sample::<f32>(0).channel(0), b.sample::<f32>(0).channel(0));
        let again = generate_darcy_dataset(1, 3, &params).unwrap();
        assert_eq!(a, again);
    }
}
