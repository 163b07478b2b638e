//! Electrostatic potentials of random point charges, solved with a type-I sine transform.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::darcy::sample_rng;
use crate::dataset::{ChannelRole, DatasetContainer, Provenance};
use crate::error::{Error, Result};
use crate::field::{Field, Grid2D};
use crate::residual::poisson_residual_raw;
use crate::scalar::Scalar;

/// Two charges with `|q| ~ U(0.5, 1.5)` and random sign, deposited as `±q/h²`.
pub fn sample_point_charges<T: Scalar, R: Rng>(grid: Grid2D, rng: &mut R) -> Field<T> {
    let mut rho = vec![0.0f64; grid.len()];
    let ih2 = 1.0 / (grid.h * grid.h);
    for _ in 0..2 {
        let i = rng.random_range(1..grid.n_x - 1);
        let j = rng.random_range(1..grid.n_y - 1);
        let q: f64 = rng.random_range(0.5..1.5);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        rho[grid.idx(i, j)] += sign * q * ih2;
    }
    Field {
        grid,
        channels: 1,
        values: rho.into_iter().map(T::lit).collect(),
    }
}

/// Unnormalized DST-I, `y_k = Σ_{m=1..n} x_m sin(π k m / (n+1))`, via the odd extension.
pub struct Dst1 {
    n: usize,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Dst1 {
    pub fn new(n: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(2 * (n + 1));
        Self { n, fft }
    }

    pub fn apply(&self, x: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        let n = self.n;
        let len = 2 * (n + 1);
        buf.clear();
        buf.resize(len, Complex::new(0.0, 0.0));
        for m in 0..n {
            buf[m + 1] = Complex::new(x[m], 0.0);
            buf[len - 1 - m] = Complex::new(-x[m], 0.0);
        }
        self.fft.process(buf);
        for k in 0..n {
            x[k] = -buf[k + 1].im / 2.0;
        }
    }
}

/// Solve `(-Δ_h) U = ρ` on the interior with `U = 0` on the boundary.
pub fn solve_poisson_dst<T: Scalar>(rho: &Field<T>) -> Result<Field<T>> {
    if rho.channels != 1 {
        return Err(Error::Shape("rho must be single-channel".into()));
    }
    let g = rho.grid;
    let (nx, ny) = (g.n_x - 2, g.n_y - 2);
    let mut a = vec![0.0f64; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            a[j * nx + i] = rho.at(0, i + 1, j + 1).to_f64_lossy();
        }
    }
    let sx = Dst1::new(nx);
    let sy = Dst1::new(ny);
    let mut buf = Vec::new();
    let transform = |a: &mut [f64], buf: &mut Vec<Complex<f64>>| {
        for row in a.chunks_exact_mut(nx) {
            sx.apply(row, buf);
        }
        let mut col = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                col[j] = a[j * nx + i];
            }
            sy.apply(&mut col, buf);
            for j in 0..ny {
                a[j * nx + i] = col[j];
            }
        }
    };
    transform(&mut a, &mut buf);
    let ih2 = 1.0 / (g.h * g.h);
    let pi = std::f64::consts::PI;
    for l in 0..ny {
        let sl = (pi * (l + 1) as f64 / (2.0 * (ny + 1) as f64)).sin();
        for k in 0..nx {
            let sk = (pi * (k + 1) as f64 / (2.0 * (nx + 1) as f64)).sin();
            a[l * nx + k] /= 4.0 * ih2 * (sk * sk + sl * sl);
        }
    }
    transform(&mut a, &mut buf);
    let norm = 4.0 / ((nx + 1) as f64 * (ny + 1) as f64);
    let mut u = Field::zeros(g, 1);
    for j in 0..ny {
        for i in 0..nx {
            *u.at_mut(0, i + 1, j + 1) = T::lit(a[j * nx + i] * norm);
        }
    }
    Ok(u)
}

/// `-Δ_h u` on the interior, `rho` on the boundary ring.
fn storage_consistent_charge(u: &Field<f64>, rho: &Field<f64>) -> Field<f64> {
    let g = u.grid;
    let zero = vec![0.0; g.len()];
    let (lap, _) = poisson_residual_raw(g.n_x, g.n_y, g.h, &u.values, &zero);
    let mut out = rho.clone();
    let mut it = lap.into_iter();
    for j in 1..g.n_y - 1 {
        for i in 1..g.n_x - 1 {
            *out.at_mut(0, i, j) = it.next().expect("interior length");
        }
    }
    out
}

/// `N` samples with layout `[rho (condition), U (data)]`.
///
/// `U` is rounded to single precision first and `rho` is then taken as its
/// discrete Laplacian, so the stored pair is consistent at storage precision.
/// The change to `rho` is about `1e-7` relative to the charge magnitude.
pub fn generate_charge_dataset(n_samples: usize, p: usize, seed: u64) -> Result<DatasetContainer> {
    if n_samples == 0 {
        return Err(Error::Argument("dataset needs at least one sample".into()));
    }
    let grid = Grid2D::unit_square(p)?;
    let mut prov = Provenance {
        generator: "charge-dst".into(),
        seed,
        params: Default::default(),
    };
    prov.params.insert("P".into(), p.into());
    prov.params.insert("charges".into(), 2.into());
    let mut ds = DatasetContainer::new(
        "charge",
        grid,
        vec![ChannelRole::condition("rho"), ChannelRole::data("U")],
        prov,
    );
    for idx in 0..n_samples {
        let mut rng = sample_rng(seed, idx as u64);
        let rho: Field<f64> = sample_point_charges(grid, &mut rng);
        let u = solve_poisson_dst(&rho)?.map(|v| v as f32 as f64);
        let rho = storage_consistent_charge(&u, &rho);
        ds.push_sample(&Field::stack(&[&rho, &u])?)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::poisson_residual;

    #[test]
    fn dst_matches_definition() {
        let n = 7;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos() + 0.1 * i as f64).collect();
        let mut y = x.clone();
        Dst1::new(n).apply(&mut y, &mut Vec::new());
        for k in 0..n {
            let want: f64 = (0..n)
                .map(|m| x[m] * (std::f64::consts::PI * ((k + 1) * (m + 1)) as f64 / (n + 1) as f64).sin())
                .sum();
            assert!((y[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn charges_have_expected_support() {
        let g = Grid2D::unit_square(64).unwrap();
        for s in 0..50 {
            let mut rng = sample_rng(s, 0);
            let rho: Field<f64> = sample_point_charges(g, &mut rng);
            let nz: Vec<f64> = rho.values.iter().copied().filter(|v| *v != 0.0).collect();
            assert!(nz.len() == 1 || nz.len() == 2);
            if nz.len() == 2 {
                for v in nz {
                    assert!(v.abs() >= 0.5 * 63.0 * 63.0 - 1e-9 && v.abs() <= 5953.5 + 1e-9);
                }
            }
            for i in 0..64 {
                assert_eq!(rho.at(0, i, 0), 0.0);
                assert_eq!(rho.at(0, 0, i), 0.0);
            }
        }
    }

    #[test]
    fn zero_source_and_symmetry() {
        let g = Grid2D::unit_square(17).unwrap();
        let z = Field::<f64>::zeros(g, 1);
        assert!(solve_poisson_dst(&z).unwrap().values.iter().all(|&v| v == 0.0));
        let mut rho = z.clone();
        *rho.at_mut(0, 8, 8) = 1.0;
        let u = solve_poisson_dst(&rho).unwrap();
        for j in 0..17 {
            for i in 0..17 {
                assert!((u.at(0, i, j) - u.at(0, 16 - i, j)).abs() < 1e-14);
                assert!((u.at(0, i, j) - u.at(0, i, 16 - j)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dst_solution_has_tiny_residual() {
        let g = Grid2D::unit_square(64).unwrap();
        let mut rng = sample_rng(9, 0);
        let rho: Field<f64> = sample_point_charges(g, &mut rng);
        let u = solve_poisson_dst(&rho).unwrap();
        let r = poisson_residual(&u, &rho).unwrap();
        assert!(r.mean_abs() < 1e-10, "{}", r.mean_abs());
        assert!(r.boundary.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stored_samples_are_consistent_after_single_precision_round_trip() {
        let ds = generate_charge_dataset(8, 32, 4).unwrap();
        for s in 0..ds.n {
            let f = ds.sample::<f64>(s);
            let r = poisson_residual(&f.channel_field(1), &f.channel_field(0)).unwrap();
            assert!(r.mean_abs() < 1e-6, "sample {s}: {}", r.mean_abs());
            let raw: Field<f64> = sample_point_charges(ds.grid(), &mut sample_rng(4, s as u64));
            let dev = raw.values.iter().zip(&f.channel(0).to_vec()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dev < 1e-6 * 1024.0, "{dev}");
        }
    }

    #[test]
    fn deterministic_dataset() {
        let a = generate_charge_dataset(2, 16, 1).unwrap();
        let b = generate_charge_dataset(2, 16, 1).unwrap();
        assert_eq!(a, b);
    }
}
