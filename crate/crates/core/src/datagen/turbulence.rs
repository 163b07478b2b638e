//! Band-limited synthetic streamwise fluctuations vanishing at the bottom wall.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::field::{Field, Grid2D};
use crate::scalar::Scalar;

pub const MAX_WAVENUMBER: usize = 16;

pub struct TurbulenceFixture<T> {
    pub field: Field<T>,
    /// Upper bound on `|Δ_h u'|` at interior points, from the mode coefficients.
    pub laplacian_bound: f64,
}

/// `Σ (a cos(2πk x/L) + b sin(2πk x/L)) sin(π m y / Y)` with `k < 16`, `1 <= m <= 16`.
///
/// `L = n_x h` is the periodic length and `Y = (n_y - 1) h` the channel height.
pub fn turbulence_fixture<T: Scalar>(grid: Grid2D, seed: u64) -> Result<TurbulenceFixture<T>> {
    if grid.n_y < 3 || grid.n_x < 3 {
        return Err(Error::Argument("turbulence grid too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (nx, ny) = (grid.n_x, grid.n_y);
    let pi = std::f64::consts::PI;
    let ih2 = 1.0 / (grid.h * grid.h);
    let mut values = vec![0.0f64; grid.len()];
    let mut bound = 0.0;
    for k in 0..MAX_WAVENUMBER {
        for m in 1..=MAX_WAVENUMBER {
            let damp = 1.0 / (1.0 + (k * k + m * m) as f64 / 16.0);
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let (a, b) = (a * damp, if k == 0 { 0.0 } else { b * damp });
            let lam_x = 4.0 * ih2 * (pi * k as f64 / nx as f64).sin().powi(2);
            let lam_y = 4.0 * ih2 * (pi * m as f64 / (2.0 * (ny - 1) as f64)).sin().powi(2);
            bound += (a.abs() + b.abs()) * (lam_x + lam_y);
            for j in 0..ny {
                let sy = (pi * (m * j) as f64 / (ny - 1) as f64).sin();
                for i in 0..nx {
                    let ph = 2.0 * pi * (k * i) as f64 / nx as f64;
                    values[j * nx + i] += (a * ph.cos() + b * ph.sin()) * sy;
                }
            }
        }
    }
    for v in values.iter_mut().take(nx) {
        *v = 0.0;
    }
    Ok(TurbulenceFixture {
        field: Field {
            grid,
            channels: 1,
            values: values.into_iter().map(T::lit).collect(),
        },
        laplacian_bound: bound,
    })
}

pub fn generate_turbulence_fixture<T: Scalar>(grid: Grid2D, seed: u64) -> Result<Field<T>> {
    Ok(turbulence_fixture(grid, seed)?.field)
}

/// The default `128 x 48` channel slice with unit wall-normal height.
pub fn channel_grid() -> Grid2D {
    Grid2D::new(128, 48, 1.0 / 47.0).expect("static grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::residual::{turbulence_residual, TurbulenceWeights};

    #[test]
    fn wall_row_vanishes_and_laplacian_is_bounded() {
        let g = channel_grid();
        for seed in 0..3 {
            let fx = turbulence_fixture::<f64>(g, seed).unwrap();
            assert!(fx.field.values[..128].iter().all(|&v| v == 0.0));
            let r = turbulence_residual(&fx.field, TurbulenceWeights::default()).unwrap();
            assert!(r.boundary.iter().all(|&v| v == 0.0));
            let worst = r.interior.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst <= fx.laplacian_bound * (1.0 + 1e-9), "{worst} > {}", fx.laplacian_bound);
            assert!(worst > 0.0);
        }
    }
}
