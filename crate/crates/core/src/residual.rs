//! Finite-difference residual operators and their vector-Jacobian products.
//!
//! Every operator has a slice-level form (`*_raw`) used by the autograd tape
//! and a [`Field`]-level wrapper returning a [`ResidualBundle`].

use log::warn;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::scalar::Scalar;
use crate::task::Task;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBundle<T> {
    pub task: Task,
    pub interior: Vec<T>,
    pub boundary: Vec<T>,
    /// Number of grid points where a positivity precondition was violated.
    pub domain_violations: usize,
}

impl<T: Scalar> ResidualBundle<T> {
    pub fn new(task: Task, interior: Vec<T>, boundary: Vec<T>) -> Self {
        Self {
            task,
            interior,
            boundary,
            domain_violations: 0,
        }
    }

    pub fn d_r(&self) -> usize {
        self.interior.len() + self.boundary.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.interior.iter().chain(self.boundary.iter())
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.iter().copied().collect()
    }

    pub fn l1(&self) -> T {
        self.iter().map(|v| v.abs()).sum()
    }

    pub fn sq_norm(&self) -> T {
        self.iter().map(|v| *v * *v).sum()
    }

    /// `||R||_1 / d_r`.
    pub fn mean_abs(&self) -> T {
        self.l1() / T::from_usize(self.d_r()).unwrap()
    }

    pub fn interior_mean_abs(&self) -> T {
        let n = T::from_usize(self.interior.len().max(1)).unwrap();
        self.interior.iter().map(|v| v.abs()).sum::<T>() / n
    }
}

fn check_same_grid<T: Scalar>(a: &Field<T>, b: &Field<T>, what: &str) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::Shape(format!("{what}: fields live on different grids")));
    }
    Ok(())
}

fn check_single<T: Scalar>(f: &Field<T>, what: &str) -> Result<()> {
    if f.channels != 1 {
        return Err(Error::Shape(format!(
            "{what} must be single-channel, got {} channels",
            f.channels
        )));
    }
    Ok(())
}

pub fn mean_of<T: Scalar>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap()
}

pub fn center_slice<T: Scalar>(p: &[T]) -> Vec<T> {
    let m = mean_of(p);
    p.iter().map(|&v| v - m).collect()
}

/// `p - mean(p)` over all grid points.
pub fn center_pressure<T: Scalar>(p: &Field<T>) -> Field<T> {
    Field {
        grid: p.grid,
        channels: p.channels,
        values: center_slice(&p.values),
    }
}

/// Darcy residual length for an `n_x x n_y` grid.
pub fn darcy_dr(nx: usize, ny: usize) -> usize {
    (nx - 2) * (ny - 2) + 2 * nx + 2 * ny
}

/// Interior product-rule residual and Neumann boundary differences.
///
/// Interior entries are row-major over `1 <= j <= ny-2`, `1 <= i <= nx-2`.
/// Boundary entries: top (`j = 0`, all `i`), bottom (`j = ny-1`), left
/// (`i = 0`, all `j`), right (`i = nx-1`).
pub fn darcy_residual_raw<T: Scalar>(
    nx: usize,
    ny: usize,
    h: T,
    k: &[T],
    p_raw: &[T],
    f: &[T],
) -> (Vec<T>, Vec<T>, usize) {
    let n = nx * ny;
    assert!(k.len() == n && p_raw.len() == n && f.len() == n);
    let p = center_slice(p_raw);
    let violations = k.iter().filter(|&&v| !(v > T::zero())).count();
    let ih2 = T::one() / (h * h);
    let iq = ih2 / T::lit(4.0);
    let id = |i: usize, j: usize| j * nx + i;
    let mut interior = Vec::with_capacity((nx - 2) * (ny - 2));
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let c = id(i, j);
            let (e, w, nn, s) = (id(i + 1, j), id(i - 1, j), id(i, j + 1), id(i, j - 1));
            let lap = (p[e] - T::lit(2.0) * p[c] + p[w]) + (p[nn] - T::lit(2.0) * p[c] + p[s]);
            let r = -k[c] * lap * ih2
                - (k[e] - k[w]) * (p[e] - p[w]) * iq
                - (k[nn] - k[s]) * (p[nn] - p[s]) * iq
                - f[c];
            interior.push(r);
        }
    }
    let ih = T::one() / h;
    let mut boundary = Vec::with_capacity(2 * nx + 2 * ny);
    for i in 0..nx {
        boundary.push((p[id(i, 0)] - p[id(i, 1)]) * ih);
    }
    for i in 0..nx {
        boundary.push((p[id(i, ny - 1)] - p[id(i, ny - 2)]) * ih);
    }
    for j in 0..ny {
        boundary.push((p[id(0, j)] - p[id(1, j)]) * ih);
    }
    for j in 0..ny {
        boundary.push((p[id(nx - 1, j)] - p[id(nx - 2, j)]) * ih);
    }
    (interior, boundary, violations)
}

/// Pull back `(g_int, g_bnd)` through [`darcy_residual_raw`] to `(dK, dp_raw)`.
#[allow(clippy::too_many_arguments)]
pub fn darcy_residual_vjp_raw<T: Scalar>(
    nx: usize,
    ny: usize,
    h: T,
    k: &[T],
    p_raw: &[T],
    g_int: &[T],
    g_bnd: &[T],
) -> (Vec<T>, Vec<T>) {
    let n = nx * ny;
    assert_eq!(g_int.len(), (nx - 2) * (ny - 2));
    assert_eq!(g_bnd.len(), 2 * nx + 2 * ny);
    let p = center_slice(p_raw);
    let ih2 = T::one() / (h * h);
    let iq = ih2 / T::lit(4.0);
    let id = |i: usize, j: usize| j * nx + i;
    let mut dk = vec![T::zero(); n];
    let mut dp = vec![T::zero(); n];
    let mut r = 0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let g = g_int[r];
            r += 1;
            if g == T::zero() {
                continue;
            }
            let c = id(i, j);
            let (e, w, nn, s) = (id(i + 1, j), id(i - 1, j), id(i, j + 1), id(i, j - 1));
            let lap = (p[e] - T::lit(2.0) * p[c] + p[w]) + (p[nn] - T::lit(2.0) * p[c] + p[s]);
            let dxp = p[e] - p[w];
            let dyp = p[nn] - p[s];
            let dxk = k[e] - k[w];
            let dyk = k[nn] - k[s];
            dk[c] -= g * lap * ih2;
            dk[e] -= g * dxp * iq;
            dk[w] += g * dxp * iq;
            dk[nn] -= g * dyp * iq;
            dk[s] += g * dyp * iq;
            let kc = k[c] * ih2;
            dp[c] += g * T::lit(4.0) * kc;
            dp[e] -= g * (kc + dxk * iq);
            dp[w] -= g * (kc - dxk * iq);
            dp[nn] -= g * (kc + dyk * iq);
            dp[s] -= g * (kc - dyk * iq);
        }
    }
    let ih = T::one() / h;
    let mut b = 0;
    let pair = |dp: &mut Vec<T>, a: usize, c: usize, g: T| {
        dp[a] += g * ih;
        dp[c] -= g * ih;
    };
    for i in 0..nx {
        pair(&mut dp, id(i, 0), id(i, 1), g_bnd[b]);
        b += 1;
    }
    for i in 0..nx {
        pair(&mut dp, id(i, ny - 1), id(i, ny - 2), g_bnd[b]);
        b += 1;
    }
    for j in 0..ny {
        pair(&mut dp, id(0, j), id(1, j), g_bnd[b]);
        b += 1;
    }
    for j in 0..ny {
        pair(&mut dp, id(nx - 1, j), id(nx - 2, j), g_bnd[b]);
        b += 1;
    }
    // adjoint of centering
    let m = mean_of(&dp);
    for v in dp.iter_mut() {
        *v -= m;
    }
    (dk, dp)
}

/// Darcy residual of `(K, p)` against source `f_s`; `p` is centered first.
pub fn darcy_residual<T: Scalar>(k: &Field<T>, p: &Field<T>, f_s: &Field<T>) -> Result<ResidualBundle<T>> {
    check_single(k, "K")?;
    check_single(p, "p")?;
    check_single(f_s, "f_s")?;
    check_same_grid(k, p, "darcy_residual")?;
    check_same_grid(k, f_s, "darcy_residual")?;
    let g = k.grid;
    let (interior, boundary, violations) =
        darcy_residual_raw(g.n_x, g.n_y, T::lit(g.h), &k.values, &p.values, &f_s.values);
    if violations > 0 {
        warn!("darcy_residual: K <= 0 at {violations} grid points");
    }
    Ok(ResidualBundle {
        task: Task::Darcy,
        interior,
        boundary,
        domain_violations: violations,
    })
}

/// `(-Δ_h U) - ρ` on the interior, `U` on the boundary ring.
///
/// Boundary order: top row (`j = 0`), bottom row, then left and right columns
/// without their corner points. Total length is `n_x * n_y`.
pub fn poisson_residual_raw<T: Scalar>(nx: usize, ny: usize, h: T, u: &[T], rho: &[T]) -> (Vec<T>, Vec<T>) {
    let ih2 = T::one() / (h * h);
    let id = |i: usize, j: usize| j * nx + i;
    let mut interior = Vec::with_capacity((nx - 2) * (ny - 2));
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let c = id(i, j);
            let nb = u[id(i + 1, j)] + u[id(i - 1, j)] + u[id(i, j + 1)] + u[id(i, j - 1)];
            interior.push((T::lit(4.0) * u[c] - nb) * ih2 - rho[c]);
        }
    }
    let boundary = poisson_ring(nx, ny).into_iter().map(|k| u[k]).collect();
    (interior, boundary)
}

fn poisson_ring(nx: usize, ny: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(2 * nx + 2 * (ny - 2));
    for i in 0..nx {
        out.push(i);
    }
    for i in 0..nx {
        out.push((ny - 1) * nx + i);
    }
    for j in 1..ny - 1 {
        out.push(j * nx);
    }
    for j in 1..ny - 1 {
        out.push(j * nx + nx - 1);
    }
    out
}

pub fn poisson_residual_vjp_raw<T: Scalar>(nx: usize, ny: usize, h: T, g_int: &[T], g_bnd: &[T]) -> Vec<T> {
    let ih2 = T::one() / (h * h);
    let id = |i: usize, j: usize| j * nx + i;
    let mut du = vec![T::zero(); nx * ny];
    let mut r = 0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let g = g_int[r] * ih2;
            r += 1;
            du[id(i, j)] += T::lit(4.0) * g;
            du[id(i + 1, j)] -= g;
            du[id(i - 1, j)] -= g;
            du[id(i, j + 1)] -= g;
            du[id(i, j - 1)] -= g;
        }
    }
    for (k, g) in poisson_ring(nx, ny).into_iter().zip(g_bnd) {
        du[k] += *g;
    }
    du
}

pub fn poisson_residual<T: Scalar>(u: &Field<T>, rho: &Field<T>) -> Result<ResidualBundle<T>> {
    check_single(u, "U")?;
    check_single(rho, "rho")?;
    check_same_grid(u, rho, "poisson_residual")?;
    let g = u.grid;
    let (interior, boundary) = poisson_residual_raw(g.n_x, g.n_y, T::lit(g.h), &u.values, &rho.values);
    Ok(ResidualBundle::new(Task::Charge, interior, boundary))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TurbulenceWeights {
    pub smooth: f64,
    pub boundary: f64,
}

impl Default for TurbulenceWeights {
    fn default() -> Self {
        Self {
            smooth: 1.0,
            boundary: 1.0,
        }
    }
}

/// Weighted interior Laplacian and bottom-wall (`j = 0`) values.
pub fn turbulence_residual_raw<T: Scalar>(
    nx: usize,
    ny: usize,
    h: T,
    u: &[T],
    w: TurbulenceWeights,
) -> (Vec<T>, Vec<T>) {
    let ih2 = T::one() / (h * h);
    let ws = T::lit(w.smooth);
    let wb = T::lit(w.boundary);
    let id = |i: usize, j: usize| j * nx + i;
    let mut interior = Vec::with_capacity((nx - 2) * (ny - 2));
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let nb = u[id(i + 1, j)] + u[id(i - 1, j)] + u[id(i, j + 1)] + u[id(i, j - 1)];
            interior.push(ws * (nb - T::lit(4.0) * u[id(i, j)]) * ih2);
        }
    }
    let boundary = (0..nx).map(|i| wb * u[id(i, 0)]).collect();
    (interior, boundary)
}

pub fn turbulence_residual_vjp_raw<T: Scalar>(
    nx: usize,
    ny: usize,
    h: T,
    g_int: &[T],
    g_bnd: &[T],
    w: TurbulenceWeights,
) -> Vec<T> {
    let ih2 = T::one() / (h * h);
    let ws = T::lit(w.smooth);
    let wb = T::lit(w.boundary);
    let id = |i: usize, j: usize| j * nx + i;
    let mut du = vec![T::zero(); nx * ny];
    let mut r = 0;
    for j in 1..ny - 1 {
        for i in 1..nx - 1 {
            let g = ws * g_int[r] * ih2;
            r += 1;
            du[id(i, j)] -= T::lit(4.0) * g;
            du[id(i + 1, j)] += g;
            du[id(i - 1, j)] += g;
            du[id(i, j + 1)] += g;
            du[id(i, j - 1)] += g;
        }
    }
    for i in 0..nx {
        du[id(i, 0)] += wb * g_bnd[i];
    }
    du
}

pub fn turbulence_residual<T: Scalar>(u: &Field<T>, w: TurbulenceWeights) -> Result<ResidualBundle<T>> {
    check_single(u, "u'")?;
    let g = u.grid;
    let (interior, boundary) = turbulence_residual_raw(g.n_x, g.n_y, T::lit(g.h), &u.values, w);
    Ok(ResidualBundle::new(Task::Turbulence, interior, boundary))
}

/// `0.5 * ||R||^2 / sigma2`.
pub fn residual_quadratic_loss<T: Scalar>(bundle: &ResidualBundle<T>, sigma2: T) -> Result<T> {
    if !(sigma2 > T::zero()) {
        return Err(Error::Argument(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(T::lit(0.5) * bundle.sq_norm() / sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Grid2D;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Grid2D {
        Grid2D::unit_square(n).unwrap()
    }

    fn random_field(g: Grid2D, seed: u64, lo: f64, hi: f64) -> Field<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..g.len()).map(|_| rng.random_range(lo..hi)).collect();
        Field::from_vec(g, 1, v).unwrap()
    }

    #[test]
    fn centering_examples() {
        let g = grid(5);
        let c = Field::<f64>::constant(g, 1, 3.25);
        assert!(center_pressure(&c).values.iter().all(|&v| v == 0.0));
        let p = random_field(g, 1, -1.0, 1.0);
        let pc = center_pressure(&p);
        assert!(pc.mean().abs() < 1e-15);
        let again = center_pressure(&pc);
        for (a, b) in again.values.iter().zip(&pc.values) {
            assert!((a - b).abs() < 1e-15);
        }
        let shifted = p.map(|v| v + 5.0);
        for (a, b) in center_pressure(&shifted).values.iter().zip(&pc.values) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn darcy_trivial_zero() {
        let g = grid(8);
        let one = Field::<f64>::constant(g, 1, 1.0);
        let zero = Field::<f64>::zeros(g, 1);
        let r = darcy_residual(&one, &zero, &zero).unwrap();
        assert_eq!(r.d_r(), 36 + 32);
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn darcy_quadratic_is_exact() {
        let g = grid(9);
        let k = Field::<f64>::constant(g, 1, 1.0);
        let p = Field::<f64>::from_fn(g, |x, _| x * x);
        let f = Field::<f64>::constant(g, 1, -2.0);
        let r = darcy_residual(&k, &p, &f).unwrap();
        // -Δp = -2, minus f_s = -(-2): exactly zero
        assert!(r.interior.iter().all(|v| v.abs() < 1e-10), "{:?}", r.interior);
        let n = g.n_x;
        let left = &r.boundary[2 * n..3 * n];
        let right = &r.boundary[3 * n..4 * n];
        assert!(left.iter().all(|v| v.abs() > 0.0));
        assert!(right.iter().all(|v| v.abs() > 0.0));
        // top/bottom differences are along y where p is constant
        assert!(r.boundary[..2 * n].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn darcy_flags_nonpositive_permeability() {
        let g = grid(5);
        let mut k = Field::<f64>::constant(g, 1, 1.0);
        *k.at_mut(0, 2, 2) = -0.5;
        let z = Field::<f64>::zeros(g, 1);
        let r = darcy_residual(&k, &z, &z).unwrap();
        assert_eq!(r.domain_violations, 1);
    }

    #[test]
    fn darcy_second_order_convergence() {
        // manufactured: K = exp(0.5 sin(2x) cos(y)), p = cos(πx) cos(πy)
        let kf = |x: f64, y: f64| (0.5 * (2.0 * x).sin() * y.cos()).exp();
        let pi = std::f64::consts::PI;
        let src = |x: f64, y: f64| {
            let k = kf(x, y);
            let kx = k * (0.5 * 2.0 * (2.0 * x).cos() * y.cos());
            let ky = k * (-0.5 * (2.0 * x).sin() * y.sin());
            let px = -pi * (pi * x).sin() * (pi * y).cos();
            let py = -pi * (pi * x).cos() * (pi * y).sin();
            let lap = -2.0 * pi * pi * (pi * x).cos() * (pi * y).cos();
            -(k * lap + kx * px + ky * py)
        };
        let mut errs = Vec::new();
        for n in [16usize, 32, 64] {
            let g = grid(n);
            let k = Field::<f64>::from_fn(g, kf);
            let p = Field::<f64>::from_fn(g, |x, y| (pi * x).cos() * (pi * y).cos());
            let f = Field::<f64>::from_fn(g, src);
            let r = darcy_residual(&k, &p, &f).unwrap();
            errs.push(r.interior.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        let o1 = (errs[0] / errs[1]).ln() / (31.0f64 / 15.0).ln();
        let o2 = (errs[1] / errs[2]).ln() / (63.0f64 / 31.0).ln();
        assert!(o1 >= 1.8 && o2 >= 1.8, "orders {o1} {o2} from {errs:?}");
    }

    fn fd_check(
        n: usize,
        f: &dyn Fn(&[f64]) -> f64,
        x: &[f64],
        grad: &[f64],
        seed: u64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gmax = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for _ in 0..n {
            let c = rng.random_range(0..x.len());
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[c] += 1e-5;
            xm[c] -= 1e-5;
            let num = (f(&xp) - f(&xm)) / 2e-5;
            let a = grad[c];
            let den = a.abs().max(num.abs()).max(1e-3 * gmax);
            worst = worst.max((a - num).abs() / den);
        }
        worst
    }

    #[test]
    fn darcy_vjp_matches_finite_differences() {
        let g = grid(10);
        let h = g.h;
        let k = random_field(g, 2, 0.5, 2.0);
        let p = random_field(g, 3, -0.01, 0.01);
        let f = random_field(g, 4, -1.0, 1.0);
        let sigma2 = 0.3;
        let loss = |kv: &[f64], pv: &[f64]| {
            let (a, b, _) = darcy_residual_raw(10, 10, h, kv, pv, &f.values);
            0.5 * (a.iter().chain(&b).map(|v| v * v).sum::<f64>()) / sigma2
        };
        let (ri, rb, _) = darcy_residual_raw(10, 10, h, &k.values, &p.values, &f.values);
        let gi: Vec<f64> = ri.iter().map(|v| v / sigma2).collect();
        let gb: Vec<f64> = rb.iter().map(|v| v / sigma2).collect();
        let (dk, dp) = darcy_residual_vjp_raw(10, 10, h, &k.values, &p.values, &gi, &gb);
        let ek = fd_check(100, &|x| loss(x, &p.values), &k.values, &dk, 5);
        let ep = fd_check(100, &|x| loss(&k.values, x), &p.values, &dp, 6);
        assert!(ek < 1e-4 && ep < 1e-4, "{ek} {ep}");
    }

    #[test]
    fn poisson_examples() {
        let g = grid(7);
        let z = Field::<f64>::zeros(g, 1);
        let r = poisson_residual(&z, &z).unwrap();
        assert_eq!(r.d_r(), 49);
        assert!(r.iter().all(|&v| v == 0.0));
        let mut rho = z.clone();
        let q = 0.8 / (g.h * g.h);
        *rho.at_mut(0, 3, 2) = q;
        let r = poisson_residual(&z, &rho).unwrap();
        let nz: Vec<_> = r.interior.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(*nz[0].1, -q);
        assert_eq!(nz[0].0, (2 - 1) * 5 + (3 - 1));
        assert!(r.boundary.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn poisson_and_turbulence_vjp() {
        let g = Grid2D::new(9, 7, 0.125).unwrap();
        let u = random_field(g, 9, -1.0, 1.0);
        let rho = random_field(g, 10, -1.0, 1.0);
        let loss_p = |x: &[f64]| {
            let (a, b) = poisson_residual_raw(9, 7, 0.125, x, &rho.values);
            0.5 * a.iter().chain(&b).map(|v| v * v).sum::<f64>()
        };
        let (a, b) = poisson_residual_raw(9, 7, 0.125, &u.values, &rho.values);
        let du = poisson_residual_vjp_raw(9, 7, 0.125, &a, &b);
        assert!(fd_check(100, &loss_p, &u.values, &du, 11) < 1e-4);

        let w = TurbulenceWeights {
            smooth: 0.7,
            boundary: 2.0,
        };
        let loss_t = |x: &[f64]| {
            let (a, b) = turbulence_residual_raw(9, 7, 0.125, x, w);
            0.5 * a.iter().chain(&b).map(|v| v * v).sum::<f64>()
        };
        let (a, b) = turbulence_residual_raw(9, 7, 0.125, &u.values, w);
        let du = turbulence_residual_vjp_raw(9, 7, 0.125, &a, &b, w);
        assert!(fd_check(100, &loss_t, &u.values, &du, 12) < 1e-4);
    }

    #[test]
    fn turbulence_examples() {
        let g = Grid2D::new(12, 6, 0.2).unwrap();
        let w = TurbulenceWeights::default();
        let z = Field::<f64>::zeros(g, 1);
        assert!(turbulence_residual(&z, w).unwrap().iter().all(|&v| v == 0.0));
        let lin = Field::<f64>::from_fn(g, |_, y| 3.0 * y);
        let r = turbulence_residual(&lin, w).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
        let mut c = z.clone();
        for i in 0..12 {
            *c.at_mut(0, i, 0) = 0.25;
        }
        let r = turbulence_residual(&c, w).unwrap();
        assert_eq!(r.boundary, vec![0.25; 12]);
    }

    #[test]
    fn quadratic_loss_examples() {
        let b = ResidualBundle::new(Task::Darcy, vec![1.0f64; 2], vec![1.0; 2]);
        assert_eq!(residual_quadratic_loss(&b, 2.0).unwrap(), 1.0);
        assert_eq!(residual_quadratic_loss(&b, 1.0).unwrap(), 2.0);
        let z = ResidualBundle::new(Task::Darcy, vec![0.0f64; 3], vec![]);
        assert_eq!(residual_quadratic_loss(&z, 0.1).unwrap(), 0.0);
        assert!(residual_quadratic_loss(&b, 0.0).is_err());
        assert!(residual_quadratic_loss(&b, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn darcy_dr_bookkeeping(n in 3usize..40) {
            let g = grid(n);
            let one = Field::<f64>::constant(g, 1, 1.0);
            let r = darcy_residual(&one, &one, &one).unwrap();
            prop_assert_eq!(r.d_r(), (n - 2) * (n - 2) + 4 * n);
            prop_assert_eq!(darcy_dr(n, n), (n - 2) * (n - 2) + 4 * n);
        }

        #[test]
        fn darcy_shift_invariance_is_bitwise(
            logn in 2u32..6,
            seed in any::<u64>(),
            c in -64i32..64,
        ) {
            // dyadic values on a power-of-two point count keep every sum exact
            let n = 1usize << logn;
            let g = Grid2D::new(n, n, 0.125).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dy = |lo: i32, hi: i32| rng.random_range(lo..hi) as f64 / 1024.0;
            let k = Field::from_vec(g, 1, (0..g.len()).map(|_| 1.0 + dy(0, 1024)).collect()).unwrap();
            let p = Field::from_vec(g, 1, (0..g.len()).map(|_| dy(-1024, 1024)).collect()).unwrap();
            let f = Field::from_vec(g, 1, (0..g.len()).map(|_| dy(-1024, 1024)).collect()).unwrap();
            let shifted = p.map(|v| v + c as f64);
            let a = darcy_residual(&k, &p, &f).unwrap();
            let b = darcy_residual(&k, &shifted, &f).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn darcy_shift_invariance_general(seed in any::<u64>(), c in -100.0f64..100.0) {
            let g = grid(12);
            let k = random_field(g, seed, 0.5, 2.0);
            let p = random_field(g, seed ^ 1, -1.0, 1.0);
            let f = random_field(g, seed ^ 2, -1.0, 1.0);
            let a = darcy_residual(&k, &p, &f).unwrap();
            let b = darcy_residual(&k, &p.map(|v| v + c), &f).unwrap();
            let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale * (1.0 + c.abs()));
            }
        }

        #[test]
        fn poisson_linear_in_source(seed in any::<u64>()) {
            let g = grid(9);
            let u = random_field(g, seed, -1.0, 1.0);
            let r1 = random_field(g, seed ^ 3, -5.0, 5.0);
            let r2 = random_field(g, seed ^ 4, -5.0, 5.0);
            let sum = Field::from_vec(g, 1, r1.values.iter().zip(&r2.values).map(|(a, b)| a + b).collect()).unwrap();
            let z = Field::<f64>::zeros(g, 1);
            let lhs = poisson_residual(&u, &sum).unwrap();
            let a = poisson_residual(&u, &r1).unwrap();
            let b = poisson_residual(&z, &r2).unwrap();
            for ((l, x), y) in lhs.interior.iter().zip(&a.interior).zip(&b.interior) {
                prop_assert!((l - (x + y)).abs() <= 1e-9 * (1.0 + l.abs()));
            }
        }
    }
}
