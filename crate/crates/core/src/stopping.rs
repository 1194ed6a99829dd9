//! Detectors for the engine's stopping times and the locally invertible
//! domain estimate.
//!
//! All detectors work on stored knot series and report the first knot at or
//! after a crossing; there is no sub-step root refinement. Invertibility uses
//! the scale-relative criterion |det J| < 1e-12 |J|_F^d, augmented in low
//! dimension by sign-change detection of det J between consecutive knots
//! (a flip means the continuous path crossed a singularity inside the step).
//! Only the first failure is reported; later recovery windows are ignored.

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::linalg::Mat;

/// Scale-relative singularity threshold.
pub fn det_threshold(j: &Mat) -> f64 {
    1e-12 * j.frobenius().powi(j.dim() as i32)
}

/// Inverse by direct solve, declared failed near singularity.
pub fn jacobian_inverse(j: &Mat) -> Option<Mat> {
    if j.det().abs() < det_threshold(j) {
        return None;
    }
    j.inverse()
}

fn sup_inverse_norm_exceeds(jacs: &mut dyn Iterator<Item = Mat>, m: f64) -> bool {
    for j in jacs {
        match jacobian_inverse(&j) {
            Some(inv) => {
                if inv.frobenius() > m {
                    return true;
                }
            }
            None => return true,
        }
    }
    false
}

/// First knot where sup over the grid of |J^{-1}|_F exceeds m.
pub fn detect_theta(field: &FlowField, m: f64) -> Option<usize> {
    let n_grid = field.grid().n_points();
    (0..field.n_knots()).find(|&knot| {
        sup_inverse_norm_exceeds(&mut (0..n_grid).map(|g| *field.jac(knot, g)), m)
    })
}

/// Same detector over explicit per-grid-point series (synthetic inputs).
pub fn detect_theta_series(series: &[Vec<Mat>], m: f64) -> Option<usize> {
    let n_knots = series.first().map_or(0, |s| s.len());
    (0..n_knots).find(|&knot| {
        sup_inverse_norm_exceeds(&mut series.iter().map(|s| s[knot]), m)
    })
}

/// First knot where the truncation monitor
/// sup_grid max{|Phi|, |dPhi|, |grad2 Phi|, |grad3 Phi|} exceeds n,
/// with the higher spatial derivatives estimated by central differences of
/// the stored physical map across the grid.
pub fn detect_tau_n(field: &FlowField, n: f64) -> Result<Option<usize>> {
    if field.dim() != 1 {
        return Err(Error::Capability(
            "the truncation monitor is implemented for 1-d grids".into(),
        ));
    }
    let g_pts = field.grid().n_points();
    if g_pts < 9 {
        return Err(Error::GridTooCoarse {
            points: g_pts,
            required: 9,
        });
    }
    let h = field.grid().spacing(0);
    for knot in 0..field.n_knots() {
        let phi = |g: usize| field.phi(knot, g).x();
        let mut monitor: f64 = 0.0;
        for g in 0..g_pts {
            monitor = monitor.max(phi(g).abs());
            monitor = monitor.max(field.jac(knot, g).frobenius());
        }
        for g in 1..g_pts - 1 {
            let d2 = (phi(g + 1) - 2.0 * phi(g) + phi(g - 1)) / (h * h);
            monitor = monitor.max(d2.abs());
        }
        for g in 2..g_pts - 2 {
            let d3 =
                (phi(g + 2) - 2.0 * phi(g + 1) + 2.0 * phi(g - 1) - phi(g - 2)) / (2.0 * h * h * h);
            monitor = monitor.max(d3.abs());
        }
        if monitor > n {
            return Ok(Some(knot));
        }
    }
    Ok(None)
}

/// First knot where the Jacobian series loses invertibility, merged with the
/// inverse-Jacobian explosion knot; whichever is earlier.
pub fn detect_rho(jac_series: &[Mat], v_explosion_knot: Option<usize>) -> Option<usize> {
    let mut det_knot = None;
    let mut prev_neg: Option<bool> = None;
    for (i, j) in jac_series.iter().enumerate() {
        let det = j.det();
        if det == 0.0 || det.abs() < det_threshold(j) {
            det_knot = Some(i);
            break;
        }
        let neg = det < 0.0;
        if let Some(p) = prev_neg {
            if p != neg {
                det_knot = Some(i);
                break;
            }
        }
        prev_neg = Some(neg);
    }
    match (det_knot, v_explosion_knot) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (Some(a), None) => Some(a),
        (None, b) => b,
    }
}

/// Grid mask of the locally invertible domain at one knot, with the image
/// points of the masked set under the stored physical map.
#[derive(Clone, Debug)]
pub struct DomainMask {
    pub knot: usize,
    pub mask: Vec<bool>,
    pub image: Vec<Option<crate::linalg::Vect>>,
}

impl DomainMask {
    pub fn cardinality(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &DomainMask) -> bool {
        self.mask
            .iter()
            .zip(&other.mask)
            .all(|(&a, &b)| !a || b)
    }
}

/// D_{s,t} = {x : tau(s, x) > t} as a grid mask; `taus[g]` is the per-point
/// composite stopping knot (None = never fails on the horizon).
pub fn estimate_domain(field: &FlowField, taus: &[Option<usize>], knot: usize) -> DomainMask {
    let mask: Vec<bool> = taus.iter().map(|t| t.map_or(true, |k| k > knot)).collect();
    let image = mask
        .iter()
        .enumerate()
        .map(|(g, &inside)| inside.then(|| *field.phi(knot, g)))
        .collect();
    DomainMask { knot, mask, image }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families;
    use crate::flow::{simulate, SimSettings};
    use crate::grid::SpatialGrid;
    use crate::linalg::Vect;
    use crate::paths::{BrownianPaths, CounterRng, TimeGrid};

    fn zero_field() -> FlowField {
        let cset = families::zero(1, 1);
        let grid = SpatialGrid::line(-2.0, 2.0, 11).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let paths = BrownianPaths::sample(tg, 8, 1, 3).unwrap();
        let settings = SimSettings {
            n_replicas: 8,
            n_threads: 1,
            ..SimSettings::default()
        };
        simulate(&cset, &grid, &paths, &settings).unwrap().field
    }

    #[test]
    fn theta_not_hit_for_identity() {
        let field = zero_field();
        assert_eq!(detect_theta(&field, 1.0), None); // m >= sqrt(d)
        assert_eq!(detect_theta(&field, 5.0), None);
        assert_eq!(detect_theta(&field, 0.5), Some(0)); // |I^{-1}|_F = 1 > 0.5
    }

    #[test]
    fn theta_scalar_reciprocal_threshold() {
        // J_t series with minimum 0.2 at knot 3: 1/J exceeds m exactly when
        // m < 5, first at the first knot with J < 1/m.
        let js = [1.0, 0.6, 0.3, 0.2, 0.4];
        let series = vec![js.iter().map(|&v| Mat::scalar(v)).collect::<Vec<_>>()];
        assert_eq!(detect_theta_series(&series, 5.0), None);
        assert_eq!(detect_theta_series(&series, 4.9), Some(3));
        assert_eq!(detect_theta_series(&series, 3.0), Some(2));
        assert_eq!(detect_theta_series(&series, 1.5), Some(1));
    }

    #[test]
    fn theta_monotone_in_threshold() {
        let rng = CounterRng::new(31);
        for trial in 0..25u64 {
            let series: Vec<Vec<Mat>> = (0..3)
                .map(|g| {
                    (0..30)
                        .map(|i| Mat::scalar(0.05 + rng.uniform(trial * 100 + g, i) * 2.0))
                        .collect()
                })
                .collect();
            let ladder = [1.0, 2.0, 5.0, 10.0];
            let hits: Vec<_> = ladder.iter().map(|&m| detect_theta_series(&series, m)).collect();
            for w in hits.windows(2) {
                let a = w[0].unwrap_or(usize::MAX);
                let b = w[1].unwrap_or(usize::MAX);
                assert!(a <= b, "larger threshold fired earlier: {hits:?}");
            }
        }
    }

    #[test]
    fn tau_n_zero_coefficients() {
        let field = zero_field();
        // Identity map on [-2, 2]: monitor = max(|x|, |J|) = 2 everywhere.
        assert_eq!(detect_tau_n(&field, 1.5).unwrap(), Some(0));
        assert_eq!(detect_tau_n(&field, 2.5).unwrap(), None);
    }

    #[test]
    fn tau_n_affine_map_has_flat_high_derivatives() {
        let grid = SpatialGrid::line(-1.0, 1.0, 21).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let field = FlowField::from_closures(
            grid,
            tg,
            0,
            1,
            |_k, x| Vect::scalar(0.3 + 0.5 * x.x()),
            |_k, _x| Mat::scalar(0.5),
        );
        // Affine: |Phi| <= 0.8, |dPhi| = 0.5, grad2 = grad3 = 0 to rounding.
        assert_eq!(detect_tau_n(&field, 0.85).unwrap(), None);
        assert_eq!(detect_tau_n(&field, 0.7).unwrap(), Some(0));
    }

    #[test]
    fn tau_n_grid_guard() {
        let grid = SpatialGrid::line(-1.0, 1.0, 7).unwrap();
        let tg = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let field = FlowField::from_closures(grid, tg, 0, 1, |_k, x| *x, |_k, _x| Mat::scalar(1.0));
        match detect_tau_n(&field, 1.0) {
            Err(Error::GridTooCoarse { points: 7, required: 9 }) => {}
            other => panic!("expected GridTooCoarse, got {other:?}"),
        }
    }

    #[test]
    fn rho_identity_never() {
        let series = vec![Mat::identity(2); 50];
        assert_eq!(detect_rho(&series, None), None);
    }

    #[test]
    fn rho_sign_change_reports_following_knot() {
        let mut vals = vec![1.0; 45];
        vals.extend([0.8, 0.5, -0.3, -0.9]); // crossing between knots 46 and 47
        let series: Vec<Mat> = vals.iter().map(|&v| Mat::scalar(v)).collect();
        assert_eq!(detect_rho(&series, None), Some(47));
    }

    #[test]
    fn rho_prefers_earlier_v_explosion() {
        let series: Vec<Mat> = (0..50).map(|_| Mat::scalar(1.0)).collect();
        assert_eq!(detect_rho(&series, Some(12)), Some(12));
        let mut vals = vec![1.0; 10];
        vals.push(-1.0);
        let flipped: Vec<Mat> = vals.iter().map(|&v| Mat::scalar(v)).collect();
        assert_eq!(detect_rho(&flipped, Some(30)), Some(10));
    }

    #[test]
    fn rho_no_false_positive_on_well_conditioned_series() {
        let rng = CounterRng::new(8);
        for trial in 0..40u64 {
            let series: Vec<Mat> = (0..200)
                .map(|i| Mat::scalar(0.2 + rng.uniform(trial, i).abs() * 3.0))
                .collect();
            assert_eq!(detect_rho(&series, None), None);
        }
    }

    #[test]
    fn domain_mask_monotone_and_full_at_start() {
        let field = zero_field();
        let taus: Vec<Option<usize>> = (0..field.grid().n_points())
            .map(|g| if g % 3 == 0 { Some(5 + g) } else { None })
            .collect();
        let d0 = estimate_domain(&field, &taus, 0);
        assert_eq!(d0.cardinality(), field.grid().n_points()); // all tau > s
        let d5 = estimate_domain(&field, &taus, 5);
        let d9 = estimate_domain(&field, &taus, 9);
        assert!(d9.is_subset_of(&d5));
        assert!(d5.is_subset_of(&d0));
    }

    #[test]
    fn zero_coefficients_domain_full_at_every_knot() {
        let field = zero_field();
        let taus = vec![None; field.grid().n_points()];
        for knot in [0, 7, field.n_knots() - 1] {
            let d = estimate_domain(&field, &taus, knot);
            assert_eq!(d.cardinality(), field.grid().n_points());
        }
    }
}
