//! Evaluation metrics and representation statistics.

use log::warn;

use crate::datagen::topology::TopologyCase;
use crate::error::{Error, Result};
use crate::fem::assemble_stiffness;
use crate::field::{BinaryMask, Field};
use crate::linalg::singular_values;
use crate::residual::{poisson_residual, ResidualBundle};
use crate::scalar::Scalar;

/// Mean over samples of `||R||_1 / d_r`.
pub fn r_mae<T: Scalar>(bundles: &[ResidualBundle<T>]) -> Result<T> {
    if bundles.is_empty() {
        return Err(Error::Argument("r_mae needs at least one sample".into()));
    }
    let s: T = bundles.iter().map(|b| b.mean_abs()).sum();
    Ok(s / T::lit(bundles.len() as f64))
}

/// Per-sample summed squared error, averaged over samples.
pub fn data_mse<T: Scalar>(generated: &[Field<T>], reference: &[Field<T>]) -> Result<T> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::Shape(format!(
            "data_mse: {} generated vs {} reference samples",
            generated.len(),
            reference.len()
        )));
    }
    let mut total = T::zero();
    for (g, r) in generated.iter().zip(reference) {
        if !g.shape_matches(r) {
            return Err(Error::Shape("data_mse: sample shapes differ".into()));
        }
        total += g.values.iter().zip(&r.values).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
    }
    Ok(total / T::lit(generated.len() as f64))
}

pub fn psnr_from_mse(peak: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / mse).log10()
}

/// `10 log10(max(p_ref)^2 / MSE)` with MSE averaged over entries.
pub fn psnr<T: Scalar>(p_hat: &[T], p_ref: &[T]) -> Result<f64> {
    if p_hat.len() != p_ref.len() || p_ref.is_empty() {
        return Err(Error::Shape("psnr: length mismatch".into()));
    }
    let peak = p_ref.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
    if peak == 0.0 {
        return Err(Error::Argument("psnr: reference peak is zero".into()));
    }
    let mse = p_hat
        .iter()
        .zip(p_ref)
        .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum::<f64>()
        / p_ref.len() as f64;
    Ok(psnr_from_mse(peak, mse))
}

/// `||(1 - M) * (p - p_hat)||_2 / count(1 - M)`.
pub fn masked_l2<T: Scalar>(p_hat: &[T], p_ref: &[T], mask: &BinaryMask) -> Result<f64> {
    if p_hat.len() != p_ref.len() || p_ref.len() != mask.values.len() {
        return Err(Error::Shape("masked_l2: length mismatch".into()));
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    for ((a, b), &m) in p_hat.iter().zip(p_ref).zip(&mask.values) {
        if m == 0 {
            sq += (a.to_f64_lossy() - b.to_f64_lossy()).powi(2);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Undefined("masked_l2: every entry is observed".into()));
    }
    Ok(sq.sqrt() / count as f64)
}

/// `|C(rho_hat) - C_opt| / C_opt * 100`.
pub fn compliance_error(rho_hat: &[f64], case: &TopologyCase, c_opt: f64) -> Result<f64> {
    if rho_hat.len() != case.mesh.n_elems() {
        return Err(Error::Shape(format!(
            "compliance_error: {} densities for {} elements",
            rho_hat.len(),
            case.mesh.n_elems()
        )));
    }
    let sys = assemble_stiffness(case.mesh, rho_hat, case.f.clone(), case.fixed.clone())?;
    let u = sys.solve()?;
    let c = sys.compliance(&u);
    Ok((c - c_opt).abs() / c_opt * 100.0)
}

/// Mean compliance error over a batch; singular samples are skipped.
pub fn compliance_error_batch(items: &[(&[f64], &TopologyCase, f64)]) -> Option<f64> {
    let mut vals = Vec::new();
    for (k, (rho, case, c_opt)) in items.iter().enumerate() {
        match compliance_error(rho, case, *c_opt) {
            Ok(v) => vals.push(v),
            Err(e) => warn!("compliance_error: sample {k} excluded: {e}"),
        }
    }
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// `|mean(rho_hat) - V_target| * 100`.
pub fn volume_fraction_error(rho_hat: &[f64], v_target: f64) -> f64 {
    let mean = rho_hat.iter().sum::<f64>() / rho_hat.len() as f64;
    (mean - v_target).abs() * 100.0
}

/// Mean absolute Poisson residual per sample, averaged over the batch.
pub fn charge_phys_loss<T: Scalar>(u_hat: &[Field<T>], rho: &[Field<T>]) -> Result<T> {
    if u_hat.len() != rho.len() || u_hat.is_empty() {
        return Err(Error::Shape("charge_phys_loss: batch sizes differ".into()));
    }
    let mut s = T::zero();
    for (u, r) in u_hat.iter().zip(rho) {
        s += poisson_residual(u, r)?.mean_abs();
    }
    Ok(s / T::lit(u_hat.len() as f64))
}

fn centered(x: &[f64], n: usize) -> Result<(Vec<f64>, usize)> {
    if n == 0 || x.len() % n != 0 {
        return Err(Error::Shape(format!("{} values do not form {n} rows", x.len())));
    }
    let p = x.len() / n;
    let mut out = x.to_vec();
    for j in 0..p {
        let m = (0..n).map(|i| x[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= m;
        }
    }
    Ok((out, p))
}

/// `Z Z^T` for a row-major `n x p` matrix.
fn gram(z: &[f64], p: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    f64::gemm(n, p, n, 1.0, z, false, z, true, 0.0, &mut out);
    out
}

/// `Z^T Y` for row-major `n x p` and `n x q`, as a `p x q` matrix.
fn cross(z: &[f64], p: usize, y: &[f64], q: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * q];
    f64::gemm(p, n, q, 1.0, z, true, y, false, 0.0, &mut out);
    out
}

fn frob_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Linear CKA between two `n`-row feature matrices (row-major).
pub fn linear_cka(a: &[f64], b: &[f64], n: usize) -> Result<f64> {
    let (a, p) = centered(a, n)?;
    let (b, q) = centered(b, n)?;
    // feature-space products for narrow inputs, sample-space Gram matrices for wide ones
    let (xx, yy, xy) = if p.max(q) <= n {
        let (aa, bb, ab) = (cross(&a, p, &a, p, n), cross(&b, q, &b, q, n), cross(&a, p, &b, q, n));
        (frob_dot(&aa, &aa), frob_dot(&bb, &bb), frob_dot(&ab, &ab))
    } else {
        let (k, l) = (gram(&a, p, n), gram(&b, q, n));
        (frob_dot(&k, &k), frob_dot(&l, &l), frob_dot(&k, &l))
    };
    let (xx, yy) = (xx.sqrt(), yy.sqrt());
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::Undefined("linear_cka: zero-variance features".into()));
    }
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// `exp(H(s / sum(s)))` of the centered feature matrix.
pub fn effective_rank(x: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Argument("effective_rank needs at least 2 samples".into()));
    }
    let (c, p) = centered(x, n)?;
    let s = singular_values(&c, n, p);
    let total: f64 = s.iter().sum();
    if total == 0.0 {
        return Err(Error::Undefined("effective_rank: zero matrix".into()));
    }
    let h: f64 = s
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let q = v / total;
            -q * q.ln()
        })
        .sum();
    Ok(h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::topology::{make_fixture, SimpParams};
    use crate::fem::FemMesh;
    use crate::field::{make_observation_mask, Grid2D};
    use crate::task::Task;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn r_mae_cases() {
        let ones = ResidualBundle::new(Task::Darcy, vec![1.0f64; 9], vec![-1.0; 20]);
        assert_eq!(r_mae(&[ones.clone()]).unwrap(), 1.0);
        let half = ResidualBundle::new(Task::Darcy, vec![0.5f64; 9], vec![0.0; 20]);
        let a = r_mae(&[ones.clone(), half.clone()]).unwrap();
        let b = r_mae(&[half, ones]).unwrap();
        assert_eq!(a, b);
        assert!(r_mae::<f64>(&[]).is_err());
    }

    #[test]
    fn data_mse_cases() {
        let g = Grid2D::unit_square(4).unwrap();
        let a = Field::<f64>::from_fn(g, |x, y| x + y);
        let mut b = a.clone();
        assert_eq!(data_mse(&[a.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap(), 0.0);
        b.values[3] += 1.0;
        assert_eq!(data_mse(&[a.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap(), 0.5);
        assert_eq!(
            data_mse(&[a.clone(), b.clone()], &[b.clone(), a.clone()]).unwrap(),
            data_mse(&[b.clone(), a.clone()], &[a.clone(), b.clone()]).unwrap()
        );
        assert!(data_mse(&[a.clone()], &[a.clone(), b]).is_err());
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr_from_mse(2.0, 4.0), 0.0);
        assert!((psnr_from_mse(2.0, 0.4) - 10.0).abs() < 1e-12);
        assert!((psnr_from_mse(2.0, 0.2) - psnr_from_mse(2.0, 0.4) - 3.010299956639812).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 0.0), f64::INFINITY);
        let r = [0.0f64, 1.0, 2.0, -1.0];
        let h = [0.0f64, 1.0, 2.0, 1.0];
        let mse = 4.0 / 4.0;
        assert_eq!(psnr(&h, &r).unwrap(), psnr_from_mse(2.0, mse));
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        assert!(psnr(&r, &[0.0f64; 4]).is_err());
    }

    #[test]
    fn masked_l2_cases() {
        let g = Grid2D::unit_square(5).unwrap();
        let m = make_observation_mask(g, 0.3, 1).unwrap();
        let p = vec![1.0f64; 25];
        assert_eq!(masked_l2(&p, &p, &m).unwrap(), 0.0);
        let shifted_obs: Vec<f64> = (0..25).map(|k| if m.values[k] == 1 { 5.0 } else { 1.0 }).collect();
        assert_eq!(masked_l2(&shifted_obs, &p, &m).unwrap(), 0.0);
        let u = 25 - m.count_ones();
        let all_off: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        let got = masked_l2(&all_off, &p, &m).unwrap();
        assert!((got - (u as f64).sqrt() / u as f64).abs() < 1e-15);
        assert!(matches!(masked_l2(&p, &p, &BinaryMask::all(g, true)), Err(Error::Undefined(_))));
    }

    #[test]
    fn volume_fraction_error_cases() {
        let rho = vec![0.4; 10];
        assert!(volume_fraction_error(&rho, 0.4) < 1e-12);
        let up: Vec<f64> = rho.iter().map(|v| v + 0.0338).collect();
        assert!((volume_fraction_error(&up, 0.4) - 3.38).abs() < 1e-10);
        let down: Vec<f64> = rho.iter().map(|v| v - 0.0338).collect();
        assert!((volume_fraction_error(&down, 0.4) - 3.38).abs() < 1e-10);
    }

    #[test]
    fn compliance_error_cases() {
        let mesh = FemMesh::new(8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let case = TopologyCase::random(mesh, &mut rng);
        let fx = make_fixture(case.clone(), &SimpParams::default()).unwrap();
        assert_eq!(compliance_error(&fx.rho, &case, fx.compliance).unwrap(), 0.0);
        assert!((compliance_error(&fx.rho, &case, fx.compliance / 2.0).unwrap() - 100.0).abs() < 1e-9);
        let bad = TopologyCase {
            fixed: vec![0],
            ..case.clone()
        };
        assert!(compliance_error(&fx.rho, &bad, 1.0).is_err());
        let batch = [(fx.rho.as_slice(), &bad, 1.0), (fx.rho.as_slice(), &case, fx.compliance)];
        assert_eq!(compliance_error_batch(&batch), Some(0.0));
    }

    #[test]
    fn charge_phys_loss_cases() {
        let g = Grid2D::unit_square(8).unwrap();
        let z = Field::<f64>::zeros(g, 1);
        assert_eq!(charge_phys_loss(&[z.clone()], &[z.clone()]).unwrap(), 0.0);
        let mut rho = z.clone();
        *rho.at_mut(0, 3, 3) = 2.0;
        let a = charge_phys_loss(&[z.clone()], &[rho.clone()]).unwrap();
        let rho2 = rho.map(|v| 3.0 * v);
        let b = charge_phys_loss(&[z.clone()], &[rho2]).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-15);
        assert!((a - 2.0 / 64.0).abs() < 1e-15);
    }

    /// Kernel-form HSIC with explicit centering matrices.
    fn cka_oracle(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
        let x = DMatrix::from_row_slice(n, p, a);
        let y = DMatrix::from_row_slice(n, q, b);
        let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
        let k = &h * (&x * x.transpose()) * &h;
        let l = &h * (&y * y.transpose()) * &h;
        let hsic = |u: &DMatrix<f64>, v: &DMatrix<f64>| u.component_mul(v).sum();
        hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
    }

    #[test]
    fn cka_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let a = gauss(&mut rng, n * 6);
        let b = gauss(&mut rng, n * 3);
        assert!((linear_cka(&a, &a, n).unwrap() - 1.0).abs() < 1e-12);
        let want = cka_oracle(&a, 6, &b, 3, n);
        assert!((linear_cka(&a, &b, n).unwrap() - want).abs() < 1e-12);
        let scaled: Vec<f64> = a.iter().map(|v| 7.5 * v).collect();
        assert!((linear_cka(&scaled, &b, n).unwrap() - want).abs() < 1e-12);
        assert!(linear_cka(&vec![1.0; n * 2], &b, n).is_err());

        // features living in orthogonal subspaces of R^n (after centering)
        let basis = DMatrix::from_fn(n, n, |i, j| {
            if j == 0 {
                1.0
            } else {
                (std::f64::consts::PI * j as f64 * (i as f64 + 0.5) / n as f64).cos()
            }
        });
        let d = 4;
        let fa = DMatrix::from_fn(n, d, |i, j| basis[(i, 1 + j)]);
        let fb = DMatrix::from_fn(n, d, |i, j| basis[(i, 1 + d + j)]);
        let ra: Vec<f64> = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| fa[(i, j)]).collect();
        let rb: Vec<f64> = (0..n).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| fb[(i, j)]).collect();
        assert!(linear_cka(&ra, &rb, n).unwrap() < 1e-20);
    }

    #[test]
    fn cka_wide_features_use_gram_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 6;
        let a = gauss(&mut rng, n * 50);
        let b = gauss(&mut rng, n * 70);
        let want = cka_oracle(&a, 50, &b, 70, n);
        assert!((linear_cka(&a, &b, n).unwrap() - want).abs() < 1e-12);
        assert!((linear_cka(&a, &a, n).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn effective_rank_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rank1: Vec<f64> = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        assert!((effective_rank(&rank1, 30).unwrap() - 1.0).abs() < 1e-9);

        // rows +-e_k: centered matrix has k equal singular values
        let k = 5;
        let mut eq = vec![0.0; 2 * k * k];
        for i in 0..k {
            eq[(2 * i) * k + i] = 1.0;
            eq[(2 * i + 1) * k + i] = -1.0;
        }
        assert!((effective_rank(&eq, 2 * k).unwrap() - k as f64).abs() < 1e-12);

        let g = gauss(&mut rng, 100 * 50);
        let er = effective_rank(&g, 100).unwrap();
        let (c, _) = centered(&g, 100).unwrap();
        let s = DMatrix::from_row_slice(100, 50, &c).svd(false, false).singular_values;
        let tot: f64 = s.iter().sum();
        let want = (-s.iter().map(|v| v / tot).map(|q| q * q.ln()).sum::<f64>()).exp();
        assert!((er - want).abs() < 1e-9);
        assert!((40.0..=50.0).contains(&er), "{er}");

        assert!(effective_rank(&vec![0.0; 20], 10).is_err());
        assert!(effective_rank(&[1.0, 2.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn r_mae_strictly_increases_with_offset(vals in prop::collection::vec(-3.0f64..3.0, 13), c in 0.01f64..2.0) {
            let b = ResidualBundle::new(Task::Darcy, vals[..9].to_vec(), vals[9..].to_vec());
            let shifted = ResidualBundle::new(
                Task::Darcy,
                b.interior.iter().map(|v| v.abs() + c).collect(),
                b.boundary.iter().map(|v| v.abs() + c).collect(),
            );
            prop_assert!(r_mae(&[shifted]).unwrap() > r_mae(&[b]).unwrap());
        }

        #[test]
        fn psnr_consistent_with_data_mse(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid2D::unit_square(6).unwrap();
            let a = Field::<f64>::from_vec(g, 1, gauss(&mut rng, 36)).unwrap();
            let b = Field::<f64>::from_vec(g, 1, gauss(&mut rng, 36)).unwrap();
            let mse = data_mse(&[a.clone()], &[b.clone()]).unwrap() / 36.0;
            let peak = b.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(psnr(&a.values, &b.values).unwrap(), psnr_from_mse(peak, mse));
        }
    }
}
