//! Post-processing of eigenvalue curves: the Legendre transform giving
//! the entropy-production rate function, fluctuation-symmetry checks, the
//! mean rate from the slope at zero tilt, and the rescaled-kink detector
//! used for singular (critical-manifold) problems.

use crate::error::{CoreError, Result};

/// How an eigenvalue curve was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CurveProvenance {
    Ipm,
    LimitFormula,
    Riccati,
}

/// Eigenvalues tabulated over a strictly increasing tilt grid.
#[derive(Debug, Clone)]
pub struct EigenvalueCurve {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub epsilon: f64,
    pub provenance: CurveProvenance,
}

impl EigenvalueCurve {
    pub fn new(
        alphas: Vec<f64>,
        lambdas: Vec<f64>,
        epsilon: f64,
        provenance: CurveProvenance,
    ) -> Result<Self> {
        if alphas.len() != lambdas.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} tilts vs {} eigenvalues",
                alphas.len(),
                lambdas.len()
            )));
        }
        if alphas.len() < 2 {
            return Err(CoreError::EmptyInput(
                "need at least two curve points".into(),
            ));
        }
        if alphas.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CoreError::InvalidConfig(
                "tilt grid must be strictly increasing".into(),
            ));
        }
        if alphas.iter().chain(&lambdas).any(|v| !v.is_finite()) {
            return Err(CoreError::Domain("curve contains non-finite values".into()));
        }
        if !(epsilon > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "curve epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self {
            alphas,
            lambdas,
            epsilon,
            provenance,
        })
    }

    /// Linear interpolation of the curve at `alpha`; `None` outside the
    /// grid hull.
    pub fn interpolate(&self, alpha: f64) -> Option<f64> {
        let a = &self.alphas;
        if alpha < a[0] || alpha > a[a.len() - 1] {
            return None;
        }
        let j = match a.binary_search_by(|v| v.total_cmp(&alpha)) {
            Ok(j) => return Some(self.lambdas[j]),
            Err(j) => j - 1,
        };
        let t = (alpha - a[j]) / (a[j + 1] - a[j]);
        Some(self.lambdas[j] + t * (self.lambdas[j + 1] - self.lambdas[j]))
    }

    /// Largest magnitude of the discrete slopes of the curve.
    fn max_abs_slope(&self) -> f64 {
        self.alphas
            .windows(2)
            .zip(self.lambdas.windows(2))
            .map(|(a, l)| ((l[1] - l[0]) / (a[1] - a[0])).abs())
            .fold(0.0, f64::max)
    }
}

/// Legendre transform of an eigenvalue curve, tabulated over `s`.
#[derive(Debug, Clone)]
pub struct RateFunctionTable {
    pub s: Vec<f64>,
    pub rate: Vec<f64>,
    /// The tilt achieving the maximum at each `s` (smallest on ties).
    pub argmax_alpha: Vec<f64>,
    /// Whether the maximizer sat at an end of the tilt grid, where the
    /// transform is only a lower bound.
    pub boundary: Vec<bool>,
}

pub const DEFAULT_RATE_GRID_POINTS: usize = 201;

/// Symmetric default grid for the transform: the attainable slopes of the
/// discrete curve span the useful range, padded by 10%.
pub fn default_s_grid(curve: &EigenvalueCurve) -> Vec<f64> {
    let s_max = 1.1 * curve.max_abs_slope().max(1e-6);
    let n = DEFAULT_RATE_GRID_POINTS;
    (0..n)
        .map(|i| -s_max + 2.0 * s_max * i as f64 / (n - 1) as f64)
        .collect()
}

/// Discrete Legendre transform  I(s) = max_j ( -alpha_j s - lambda_j ),
/// ties resolved toward the smallest tilt.
pub fn legendre_transform(curve: &EigenvalueCurve, s_grid: &[f64]) -> Result<RateFunctionTable> {
    if s_grid.is_empty() {
        return Err(CoreError::EmptyInput("empty s grid".into()));
    }
    if s_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CoreError::InvalidConfig(
            "s grid must be strictly increasing".into(),
        ));
    }
    let n_alpha = curve.alphas.len();
    let mut rate = Vec::with_capacity(s_grid.len());
    let mut argmax_alpha = Vec::with_capacity(s_grid.len());
    let mut boundary = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        for j in 0..n_alpha {
            let v = -curve.alphas[j] * s - curve.lambdas[j];
            if v > best {
                best = v;
                best_j = j;
            }
        }
        rate.push(best);
        argmax_alpha.push(curve.alphas[best_j]);
        boundary.push(best_j == 0 || best_j == n_alpha - 1);
    }
    Ok(RateFunctionTable {
        s: s_grid.to_vec(),
        rate,
        argmax_alpha,
        boundary,
    })
}

/// Transform over the default grid.
pub fn legendre_transform_default(curve: &EigenvalueCurve) -> Result<RateFunctionTable> {
    legendre_transform(curve, &default_s_grid(curve))
}

/// Mean entropy-production rate with the grid spacing it was computed at.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MeanEpRate {
    pub rate: f64,
    pub grid_spacing: f64,
}

/// Mean entropy-production rate, read off as minus the slope of the
/// eigenvalue curve at zero tilt: central difference when zero is an
/// interior grid point, the bracketing secant when it falls between
/// points, one-sided at an end of the grid.
pub fn mean_ep_rate(curve: &EigenvalueCurve) -> Result<MeanEpRate> {
    let a = &curve.alphas;
    let l = &curve.lambdas;
    let n = a.len();
    let at_zero = (0..n).find(|&j| a[j].abs() <= 1e-12);
    let (slope, spacing) = if let Some(j) = at_zero {
        if j == 0 {
            ((l[1] - l[0]) / (a[1] - a[0]), a[1] - a[0])
        } else if j == n - 1 {
            (
                (l[n - 1] - l[n - 2]) / (a[n - 1] - a[n - 2]),
                a[n - 1] - a[n - 2],
            )
        } else {
            (
                (l[j + 1] - l[j - 1]) / (a[j + 1] - a[j - 1]),
                0.5 * (a[j + 1] - a[j - 1]),
            )
        }
    } else if let Some(j) = (0..n - 1).find(|&j| a[j] < 0.0 && a[j + 1] > 0.0) {
        ((l[j + 1] - l[j]) / (a[j + 1] - a[j]), a[j + 1] - a[j])
    } else {
        return Err(CoreError::Domain(format!(
            "zero tilt lies outside the grid [{}, {}]",
            a[0],
            a[n - 1]
        )));
    };
    Ok(MeanEpRate {
        rate: -slope,
        grid_spacing: spacing,
    })
}

/// Location of the minimum of a rate table: the midpoint of the argmin
/// set (the minimum of a piecewise-linear transform can be a flat
/// segment).
pub fn rate_zero(table: &RateFunctionTable) -> Result<f64> {
    if table.s.is_empty() {
        return Err(CoreError::EmptyInput("empty rate table".into()));
    }
    let min = table.rate.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * (1.0 + min.abs());
    let first = table.rate.iter().position(|&r| r <= min + tol).unwrap();
    let last = table.rate.iter().rposition(|&r| r <= min + tol).unwrap();
    Ok(0.5 * (table.s[first] + table.s[last]))
}

/// Fluctuation-symmetry deviations |lambda(alpha) - lambda(1 - alpha)|
/// over grid points whose mirror lies inside the grid hull (linearly
/// interpolated when off-grid).
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct GcSymmetryReport {
    pub max_deviation: f64,
    pub mean_deviation: f64,
    pub pairs: usize,
}

pub fn gc_symmetry_report(curve: &EigenvalueCurve) -> Result<GcSymmetryReport> {
    let mut max_deviation = 0.0f64;
    let mut sum = 0.0;
    let mut pairs = 0;
    for (j, &aj) in curve.alphas.iter().enumerate() {
        // count each unordered pair once
        if aj < 0.5 - 1e-12 {
            continue;
        }
        if let Some(mirror) = curve.interpolate(1.0 - aj) {
            let dev = (curve.lambdas[j] - mirror).abs();
            max_deviation = max_deviation.max(dev);
            sum += dev;
            pairs += 1;
        }
    }
    if pairs < 3 {
        return Err(CoreError::Domain(format!(
            "only {pairs} mirrored tilt pairs available; need at least 3"
        )));
    }
    Ok(GcSymmetryReport {
        max_deviation,
        mean_deviation: sum / pairs as f64,
        pairs,
    })
}

/// Fluctuation-symmetry deviation of a rate table: the largest
/// |I(-s) - I(s) - s| over grid points whose mirror -s is on the grid.
pub fn gc_rate_deviation(table: &RateFunctionTable) -> Result<f64> {
    let mut max_dev = 0.0f64;
    let mut pairs = 0;
    let spacing = if table.s.len() > 1 {
        table.s[1] - table.s[0]
    } else {
        1.0
    };
    for (j, &s) in table.s.iter().enumerate() {
        if let Some(k) = table
            .s
            .iter()
            .position(|&sk| (sk + s).abs() <= 1e-9 * spacing.max(1.0))
        {
            pairs += 1;
            max_dev = max_dev.max((table.rate[k] - table.rate[j] - s).abs());
        }
    }
    if pairs == 0 {
        return Err(CoreError::Domain(
            "rate grid has no mirror pairs around zero".into(),
        ));
    }
    Ok(max_dev)
}

/// Rescale a curve and its rate table for a singular limit, where the
/// eigenvalue diverges as the noise vanishes: the curve becomes
/// (alpha, eps lambda) and the table J(s) = eps I(s / eps), realized by
/// scaling both of its axes by eps.
pub fn rescale_for_singular_limit(
    curve: &EigenvalueCurve,
    table: &RateFunctionTable,
) -> Result<(EigenvalueCurve, RateFunctionTable)> {
    let epsilon = curve.epsilon;
    let scaled_curve = EigenvalueCurve::new(
        curve.alphas.clone(),
        curve.lambdas.iter().map(|v| v * epsilon).collect(),
        epsilon,
        curve.provenance,
    )?;
    let scaled_table = RateFunctionTable {
        s: table.s.iter().map(|v| v * epsilon).collect(),
        rate: table.rate.iter().map(|v| v * epsilon).collect(),
        argmax_alpha: table.argmax_alpha.clone(),
        boundary: table.boundary.clone(),
    };
    Ok((scaled_curve, scaled_table))
}

/// Thresholds for declaring a symmetry-protected kink at the minimum of a
/// (rescaled) rate table.
#[derive(Debug, Clone, Copy)]
pub struct KinkCriteria {
    /// The arm intersection must sit within this many grid cells of s = 0.
    pub within_cells: usize,
    /// Tolerance on the symmetry relation c_left + c_right = -1.
    pub slope_sum_tol: f64,
    /// Required jump c_right - c_left across the minimum.
    pub min_slope_jump: f64,
}

impl Default for KinkCriteria {
    fn default() -> Self {
        Self {
            within_cells: 1,
            slope_sum_tol: 0.2,
            min_slope_jump: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KinkReport {
    pub fired: bool,
    /// Kink location: intersection of the two outer-arm secants. At
    /// finite noise the raw minimum of the rate sits at (epsilon times)
    /// the mean entropy-production rate, so the arms locate the kink.
    pub kink_s: f64,
    pub argmin_s: f64,
    pub left_slope: f64,
    pub right_slope: f64,
}

/// Detect a symmetry-protected kink at zero: the secant slopes of the
/// two outer arms (from each end of the grid to halfway toward the
/// minimum) sum to -1, jump by a definite amount, and their intersection
/// sits at s = 0 within a few grid cells.
pub fn detect_gc_kink(table: &RateFunctionTable, criteria: &KinkCriteria) -> Result<KinkReport> {
    let n = table.s.len();
    if n < 9 {
        return Err(CoreError::EmptyInput(
            "rate table too short for kink detection".into(),
        ));
    }
    let argmin = table
        .rate
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let spacing = (table.s[n - 1] - table.s[0]) / (n - 1) as f64;
    let left = argmin / 2;
    let right = (argmin + n - 1).div_ceil(2);
    if left == 0 || right == n - 1 {
        return Err(CoreError::Domain(
            "rate minimum sits at the edge of the grid".into(),
        ));
    }
    let left_slope = (table.rate[left] - table.rate[0]) / (table.s[left] - table.s[0]);
    let right_slope = (table.rate[n - 1] - table.rate[right]) / (table.s[n - 1] - table.s[right]);
    let jump = right_slope - left_slope;
    let kink_s = if jump.abs() > 1e-12 {
        // intersection of the two arm lines
        (table.rate[right] - table.rate[left] + left_slope * table.s[left]
            - right_slope * table.s[right])
            / (left_slope - right_slope)
    } else {
        f64::NAN
    };
    let at_zero = kink_s.abs() <= criteria.within_cells as f64 * spacing + 1e-12;
    let symmetric = (left_slope + right_slope + 1.0).abs() <= criteria.slope_sum_tol;
    Ok(KinkReport {
        fired: at_zero && symmetric && jump >= criteria.min_slope_jump,
        kink_s,
        argmin_s: table.s[argmin],
        left_slope,
        right_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn quadratic_curve_has_quadratic_rate() {
        // lambda = alpha^2 gives I(s) = s^2 / 4 where the maximizer is
        // interior; the discrete max is accurate to O(grid^2).
        let alphas = grid(-1.0, 1.0, 401);
        let lambdas = alphas.iter().map(|a| a * a).collect();
        let curve = EigenvalueCurve::new(alphas, lambdas, 1.0, CurveProvenance::Ipm).unwrap();
        let table = legendre_transform(&curve, &grid(-1.5, 1.5, 61)).unwrap();
        for (i, &s) in table.s.iter().enumerate() {
            assert!(
                (table.rate[i] - s * s / 4.0).abs() <= 1e-4,
                "s = {s}: {} vs {}",
                table.rate[i],
                s * s / 4.0
            );
            assert!(!table.boundary[i]);
            assert!((table.argmax_alpha[i] + s / 2.0).abs() <= 0.01);
        }
    }

    #[test]
    fn constant_shift_moves_rate_exactly() {
        let alphas = grid(-0.5, 1.5, 41);
        let lambdas: Vec<f64> = alphas.iter().map(|a| a * a - a).collect();
        let shifted: Vec<f64> = lambdas.iter().map(|l| l + 3.25).collect();
        let c1 = EigenvalueCurve::new(alphas.clone(), lambdas, 1.0, CurveProvenance::Ipm).unwrap();
        let c2 = EigenvalueCurve::new(alphas, shifted, 1.0, CurveProvenance::Ipm).unwrap();
        let s = grid(-2.0, 2.0, 101);
        let t1 = legendre_transform(&c1, &s).unwrap();
        let t2 = legendre_transform(&c2, &s).unwrap();
        for i in 0..s.len() {
            assert_relative_eq!(t2.rate[i], t1.rate[i] - 3.25, epsilon = 1e-12);
            assert_eq!(t2.argmax_alpha[i], t1.argmax_alpha[i]);
        }
    }

    #[test]
    fn boundary_maximizers_are_flagged() {
        let alphas = grid(0.0, 1.0, 11);
        let lambdas = vec![0.0; 11];
        let curve = EigenvalueCurve::new(alphas, lambdas, 1.0, CurveProvenance::Ipm).unwrap();
        let table = legendre_transform(&curve, &[-1.0, 0.0, 1.0]).unwrap();
        // flat curve: maximizer is alpha = 1 for s < 0, alpha = 0 for s >= 0
        assert!(table.boundary.iter().all(|&b| b));
        assert_eq!(table.argmax_alpha, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_rate_from_slope_at_zero() {
        // lambda = -2 alpha + alpha^2: slope -2 at zero, rate 2.
        let alphas = grid(-0.1, 1.1, 32);
        let curve = EigenvalueCurve::new(
            alphas.clone(),
            alphas.iter().map(|a| -2.0 * a + a * a).collect(),
            1.0,
            CurveProvenance::Ipm,
        )
        .unwrap();
        let rate = mean_ep_rate(&curve).unwrap().rate;
        assert!((rate - 2.0).abs() <= 0.05, "rate {rate}");

        // grid containing zero exactly: central difference is exact for a
        // quadratic
        let alphas = grid(-0.2, 0.2, 5);
        let curve = EigenvalueCurve::new(
            alphas.clone(),
            alphas.iter().map(|a| -2.0 * a + a * a).collect(),
            1.0,
            CurveProvenance::Ipm,
        )
        .unwrap();
        let r = mean_ep_rate(&curve).unwrap();
        assert_relative_eq!(r.rate, 2.0, epsilon = 1e-12);
        assert_relative_eq!(r.grid_spacing, 0.1, epsilon = 1e-12);

        // zero outside the grid
        let curve =
            EigenvalueCurve::new(vec![0.5, 1.0], vec![0.0, 0.0], 1.0, CurveProvenance::Ipm)
                .unwrap();
        assert!(mean_ep_rate(&curve).is_err());
    }

    #[test]
    fn rate_zero_takes_flat_segment_midpoint() {
        let table = RateFunctionTable {
            s: grid(-1.0, 3.0, 9),
            rate: vec![3.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0],
            argmax_alpha: vec![0.0; 9],
            boundary: vec![false; 9],
        };
        assert_relative_eq!(rate_zero(&table).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetry_reports() {
        // lambda(alpha) = alpha (1 - alpha) is symmetric about 1/2
        let alphas = grid(0.0, 1.0, 21);
        let curve = EigenvalueCurve::new(
            alphas.clone(),
            alphas.iter().map(|a| a * (1.0 - a)).collect(),
            1.0,
            CurveProvenance::Ipm,
        )
        .unwrap();
        let rep = gc_symmetry_report(&curve).unwrap();
        assert!(rep.pairs >= 10);
        assert!(rep.max_deviation <= 1e-12);
        assert!(rep.mean_deviation <= 1e-12);

        let table = legendre_transform(&curve, &grid(-2.0, 2.0, 41)).unwrap();
        assert!(gc_rate_deviation(&table).unwrap() <= 1e-9);

        // an asymmetric curve shows a definite deviation
        let curve = EigenvalueCurve::new(
            alphas.clone(),
            alphas.iter().map(|a| a * a).collect(),
            1.0,
            CurveProvenance::Ipm,
        )
        .unwrap();
        assert!(gc_symmetry_report(&curve).unwrap().max_deviation > 0.5);
    }

    #[test]
    fn kink_detector_fires_on_v_shape_only() {
        // symmetry-compatible V: slopes -1.1 and +0.1 meeting at zero
        let s = grid(-2.0, 2.0, 201);
        let v: Vec<f64> = s.iter().map(|&x| (0.1 * x).max(-1.1 * x)).collect();
        let table = RateFunctionTable {
            rate: v,
            argmax_alpha: vec![0.0; s.len()],
            boundary: vec![false; s.len()],
            s: s.clone(),
        };
        let rep = detect_gc_kink(&table, &KinkCriteria::default()).unwrap();
        assert!(rep.fired, "{rep:?}");
        assert!(rep.kink_s.abs() <= 0.021);

        // smooth parabola: slope jump too small
        let smooth: Vec<f64> = s.iter().map(|&x| x * x / 4.0).collect();
        let table = RateFunctionTable {
            rate: smooth,
            argmax_alpha: vec![0.0; s.len()],
            boundary: vec![false; s.len()],
            s: s.clone(),
        };
        let rep = detect_gc_kink(&table, &KinkCriteria::default()).unwrap();
        assert!(!rep.fired, "{rep:?}");

        // V at zero but with the wrong slope sum
        let wrong: Vec<f64> = s.iter().map(|&x| x.abs()).collect();
        let table = RateFunctionTable {
            rate: wrong,
            argmax_alpha: vec![0.0; s.len()],
            boundary: vec![false; s.len()],
            s,
        };
        let rep = detect_gc_kink(&table, &KinkCriteria::default()).unwrap();
        assert!(!rep.fired, "{rep:?}");
    }

    #[test]
    fn rescaling_scales_both_axes() {
        let s = grid(-1.0, 1.0, 5);
        let table = RateFunctionTable {
            rate: s.iter().map(|x| x.abs()).collect(),
            argmax_alpha: vec![0.0; 5],
            boundary: vec![false; 5],
            s,
        };
        let curve = EigenvalueCurve::new(
            vec![0.0, 1.0],
            vec![2.0, 3.0],
            0.01,
            CurveProvenance::Ipm,
        )
        .unwrap();
        let (scurve, stable) = rescale_for_singular_limit(&curve, &table).unwrap();
        assert_relative_eq!(stable.s[0], -0.01, epsilon = 1e-15);
        assert_relative_eq!(stable.rate[0], 0.01, epsilon = 1e-15);
        assert_relative_eq!(scurve.lambdas[0], 0.02, epsilon = 1e-15);
        // at epsilon = 1 the rescaling is the identity
        let unit = EigenvalueCurve::new(vec![0.0, 1.0], vec![2.0, 3.0], 1.0, CurveProvenance::Ipm)
            .unwrap();
        let (ucurve, utable) = rescale_for_singular_limit(&unit, &table).unwrap();
        assert_eq!(ucurve.lambdas, unit.lambdas);
        assert_eq!(utable.rate, table.rate);
    }

    proptest! {
        #[test]
        fn transform_is_convex(
            lambdas in proptest::collection::vec(-5.0f64..5.0, 4..20),
        ) {
            let n = lambdas.len();
            let alphas = grid(-0.1, 1.1, n);
            let curve = EigenvalueCurve::new(alphas, lambdas, 1.0, CurveProvenance::Ipm).unwrap();
            let table = legendre_transform_default(&curve).unwrap();
            // max of affine functions: second differences on a uniform grid
            // are nonnegative
            for w in table.rate.windows(3) {
                prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-9);
            }
        }

        #[test]
        fn transform_dominates_young_inequality(
            lambdas in proptest::collection::vec(-5.0f64..5.0, 4..20),
            s in -3.0f64..3.0,
        ) {
            // I(s) + lambda(alpha) >= -alpha s for every grid alpha and any
            // s in the table (evaluated at the nearest tabulated s)
            let n = lambdas.len();
            let alphas = grid(-0.1, 1.1, n);
            let curve = EigenvalueCurve::new(alphas.clone(), lambdas.clone(), 1.0, CurveProvenance::Ipm).unwrap();
            let table = legendre_transform_default(&curve).unwrap();
            let i = table
                .s
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
                .map(|(i, _)| i)
                .unwrap();
            let s_tab = table.s[i];
            for j in 0..n {
                prop_assert!(table.rate[i] + lambdas[j] >= -alphas[j] * s_tab - 1e-9);
            }
        }
    }
}
