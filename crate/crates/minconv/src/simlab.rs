//! Statistical laboratory: how close do cheap operators come to multiplication?
//!
//! Candidate operators are compared against the reference `h = |x*w|` in two
//! ways: the Pearson correlation of their outputs under random operands, and
//! the expected relative error `L = E[ |(H - G)/H| ]` with the points where
//! `H = 0` removed. Everything is estimated by seeded Monte Carlo so results
//! are reproducible bit for bit.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;

/// Default Monte Carlo sample budget.
pub const DEFAULT_SAMPLES: usize = 1_000_000;

/// Default singularity threshold for [`relative_error_l`]: samples with
/// `|H| < epsilon` count as break-points and are discarded.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Default break-point neighborhood for the grid sweeps. The removed
/// interval around the singular axes has a nonzero width; 0.02 (in units of
/// `|x*w|`) reproduces the published curve structure, where the narrow
/// 1e-8 threshold leaves the integrand's 1/max spike in place and drags the
/// minima toward larger parameters.
pub const SWEEP_EPSILON: f64 = 0.02;

/// Parametric operand distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributionSpec {
    /// Normal with the given mean and variance.
    Normal { mean: f64, variance: f64 },
    /// Uniform on the closed interval `[a, b]`.
    Uniform { a: f64, b: f64 },
}

impl DistributionSpec {
    pub fn normal(mean: f64, variance: f64) -> Result<Self> {
        if variance <= 0.0 || !variance.is_finite() {
            return Err(Error::Usage(format!("normal variance must be > 0, got {variance}")));
        }
        Ok(DistributionSpec::Normal { mean, variance })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a < b) {
            return Err(Error::Usage(format!("uniform bounds must satisfy a < b, got [{a}, {b}]")));
        }
        Ok(DistributionSpec::Uniform { a, b })
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match *self {
            DistributionSpec::Normal { mean, variance } => {
                let d = Normal::new(mean, variance.sqrt()).expect("validated at construction");
                for v in out.iter_mut() {
                    *v = d.sample(rng);
                }
            }
            DistributionSpec::Uniform { a, b } => {
                let d = Uniform::new_inclusive(a, b);
                for v in out.iter_mut() {
                    *v = d.sample(rng);
                }
            }
        }
    }
}

impl std::fmt::Display for DistributionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            DistributionSpec::Normal { mean, variance } => write!(f, "N({mean};var={variance})"),
            DistributionSpec::Uniform { a, b } => write!(f, "U({a};{b})"),
        }
    }
}

/// Magnitude operators compared against multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// The reference: `|x * w|`.
    AbsMul,
    /// `min(|x|, |w|)`.
    MinSelector,
    /// `|x| + |w|`.
    Addition,
    /// `max(|x|, |w|)`.
    MaxSelector,
}

impl OperatorKind {
    pub const CANDIDATES: [OperatorKind; 3] =
        [OperatorKind::MinSelector, OperatorKind::Addition, OperatorKind::MaxSelector];

    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::AbsMul => "abs_mul",
            OperatorKind::MinSelector => "min_selector",
            OperatorKind::Addition => "addition",
            OperatorKind::MaxSelector => "max_selector",
        }
    }
}

/// Applies a magnitude operator to one operand pair.
pub fn apply_operator(op: OperatorKind, x: f64, w: f64) -> f64 {
    match op {
        OperatorKind::AbsMul => (x * w).abs(),
        OperatorKind::MinSelector => x.abs().min(w.abs()),
        OperatorKind::Addition => x.abs() + w.abs(),
        OperatorKind::MaxSelector => x.abs().max(w.abs()),
    }
}

/// Pearson correlation of two equal-length sample vectors.
pub fn pearson(h: &[f64], g: &[f64]) -> Result<f64> {
    if h.len() != g.len() || h.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "pearson needs two vectors of equal length >= 2, got {} and {}",
            h.len(),
            g.len()
        )));
    }
    let n = h.len() as f64;
    let mu_h = h.iter().sum::<f64>() / n;
    let mu_g = g.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_h = 0.0;
    let mut var_g = 0.0;
    for (&a, &b) in h.iter().zip(g) {
        let (da, db) = (a - mu_h, b - mu_g);
        cov += da * db;
        var_h += da * da;
        var_g += db * db;
    }
    if var_h == 0.0 || var_g == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok(cov / (var_h * var_g).sqrt())
}

/// Draws `n` operand pairs from `dx` x `dw`. The two operands use separate
/// ChaCha streams of the same seed, so estimates with swapped distributions
/// stay directly comparable.
fn draw_pairs(dx: DistributionSpec, dw: DistributionSpec, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng_x = ChaCha8Rng::seed_from_u64(seed);
    rng_x.set_stream(1);
    let mut rng_w = ChaCha8Rng::seed_from_u64(seed);
    rng_w.set_stream(2);
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    dx.sample_into(&mut rng_x, &mut xs);
    dw.sample_into(&mut rng_w, &mut ws);
    (xs, ws)
}

/// Monte Carlo Pearson correlation between the reference `|x*w|` and the
/// candidate operator, with operands drawn i.i.d. from `dx` x `dw`.
pub fn correlation(
    op: OperatorKind,
    dx: DistributionSpec,
    dw: DistributionSpec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 2 {
        return Err(Error::DegenerateInput(format!(
            "correlation needs at least 2 samples, got {n_samples}"
        )));
    }
    let (xs, ws) = draw_pairs(dx, dw, n_samples, seed);
    let h: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| apply_operator(OperatorKind::AbsMul, x, w)).collect();
    let g: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| apply_operator(op, x, w)).collect();
    pearson(&h, &g)
}

/// L estimate plus the sample mean of `|w|` over all drawn pairs.
fn l_estimate(
    g: OperatorKind,
    dx: DistributionSpec,
    dw: DistributionSpec,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::DegenerateInput("relative error needs at least 1 sample".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Usage(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (xs, ws) = draw_pairs(dx, dw, n_samples, seed);
    let mut sum = 0.0;
    let mut kept = 0usize;
    let mut abs_w_sum = 0.0;
    for (&x, &w) in xs.iter().zip(&ws) {
        abs_w_sum += w.abs();
        let h = apply_operator(OperatorKind::AbsMul, x, w);
        if h < epsilon {
            continue;
        }
        let gval = apply_operator(g, x, w);
        sum += ((h - gval) / h).abs();
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::DegenerateInput(
            "all samples fell inside the break-point neighborhood".into(),
        ));
    }
    Ok((sum / kept as f64, abs_w_sum / n_samples as f64))
}

/// Expected relative error `E[ |(H - G)/H| ]` between the candidate `g` and
/// the reference `H = |x*w|`, estimated by Monte Carlo. Samples with
/// `|H| < epsilon` are treated as break-points: discarded, and the mean is
/// taken over the retained samples.
pub fn relative_error_l(
    g: OperatorKind,
    dx: DistributionSpec,
    dw: DistributionSpec,
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    l_estimate(g, dx, dw, n_samples, epsilon, seed).map(|(l, _)| l)
}

/// One parameter sweep of the relative-error objective.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// `(parameter value, L)` per grid point, in grid order.
    pub points: Vec<(f64, f64)>,
    /// Grid value achieving the smallest L (first minimum on ties).
    pub argmin_param: f64,
    /// The smallest L over the grid.
    pub argmin_objective: f64,
    /// Sample mean of `|w|` at the argmin point, when the sweep tracked it.
    pub mean_abs_w_at_argmin: Option<f64>,
}

impl SweepResult {
    fn from_points(points: Vec<(f64, f64)>, abs_w: Option<&[f64]>) -> Self {
        let mut best = 0usize;
        for (i, p) in points.iter().enumerate() {
            if p.1 < points[best].1 {
                best = i;
            }
        }
        SweepResult {
            argmin_param: points[best].0,
            argmin_objective: points[best].1,
            mean_abs_w_at_argmin: abs_w.map(|m| m[best]),
            points,
        }
    }

    /// CSV with header `param,L`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("param,L\n");
        for &(p, l) in &self.points {
            out.push_str(&format!("{p:.12e},{l:.12e}\n"));
        }
        out
    }

    /// Parses the CSV produced by [`SweepResult::to_csv`].
    pub fn from_csv(text: &str) -> Result<SweepResult> {
        let mut lines = text.lines();
        match lines.next() {
            Some("param,L") => {}
            other => {
                return Err(Error::Format(format!("expected header 'param,L', got {other:?}")))
            }
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let p = fields
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("bad param on line {}", i + 2)))?;
            let l = fields
                .next()
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| Error::Format(format!("bad L on line {}", i + 2)))?;
            points.push((p, l));
        }
        if points.is_empty() {
            return Err(Error::Format("sweep CSV has no data rows".into()));
        }
        Ok(SweepResult::from_points(points, None))
    }
}

/// Evenly spaced grid `[start, end]` with the given step (end included when
/// it lands on the grid).
pub fn grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n).map(|i| start + i as f64 * step).filter(|&v| v <= end + 1e-12).collect()
}

/// Default k grid `[0, 2]` step 0.05.
pub fn default_k_grid() -> Vec<f64> {
    grid(0.0, 2.0, 0.05)
}

/// Default v grid `(0, 3]` step 0.05.
pub fn default_v_grid() -> Vec<f64> {
    grid(0.05, 3.0, 0.05)
}

/// Sweeps L(k) for the min-selector with both operands `~ N(k, v)`.
///
/// Grid points are evaluated in parallel; point `i` derives its random
/// stream from `(seed, i)`, so the result does not depend on scheduling.
pub fn sweep_l_over_k(
    v: f64,
    k_grid: &[f64],
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<SweepResult> {
    if k_grid.is_empty() {
        return Err(Error::DegenerateInput("empty k grid".into()));
    }
    let points: Result<Vec<(f64, f64)>> = k_grid
        .par_iter()
        .enumerate()
        .map(|(i, &k)| {
            let d = DistributionSpec::normal(k, v)?;
            let (l, _) = l_estimate(
                OperatorKind::MinSelector,
                d,
                d,
                n_samples,
                epsilon,
                point_seed(seed, i),
            )?;
            Ok((k, l))
        })
        .collect();
    Ok(SweepResult::from_points(points?, None))
}

/// Sweeps L(v) for the min-selector with `x ~ N(0, 1)` held fixed and
/// `w ~ N(k, v)`. Also records the sample mean of `|w|` at each point.
pub fn sweep_l_over_v(
    k: f64,
    v_grid: &[f64],
    n_samples: usize,
    epsilon: f64,
    seed: u64,
) -> Result<SweepResult> {
    if v_grid.is_empty() {
        return Err(Error::DegenerateInput("empty v grid".into()));
    }
    let dx = DistributionSpec::normal(0.0, 1.0)?;
    let evaluated: Result<Vec<(f64, f64, f64)>> = v_grid
        .par_iter()
        .enumerate()
        .map(|(i, &v)| {
            let dw = DistributionSpec::normal(k, v)?;
            let (l, abs_w) = l_estimate(
                OperatorKind::MinSelector,
                dx,
                dw,
                n_samples,
                epsilon,
                point_seed(seed, i),
            )?;
            Ok((v, l, abs_w))
        })
        .collect();
    let evaluated = evaluated?;
    let points: Vec<(f64, f64)> = evaluated.iter().map(|&(v, l, _)| (v, l)).collect();
    let abs_w: Vec<f64> = evaluated.iter().map(|&(_, _, m)| m).collect();
    Ok(SweepResult::from_points(points, Some(&abs_w)))
}

fn point_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 step keeps per-point streams well separated
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const N: DistributionSpec = DistributionSpec::Normal { mean: 0.0, variance: 1.0 };

    #[test]
    fn apply_operator_cases() {
        assert_eq!(apply_operator(OperatorKind::MinSelector, 3.0, -2.0), 2.0);
        assert_eq!(apply_operator(OperatorKind::Addition, -1.0, -1.0), 2.0);
        assert_eq!(apply_operator(OperatorKind::AbsMul, 0.0, 5.0), 0.0);
        assert_eq!(apply_operator(OperatorKind::MaxSelector, 3.0, -2.0), 3.0);
    }

    #[test]
    fn correlation_of_reference_with_itself_is_one() {
        let rho = correlation(OperatorKind::AbsMul, N, N, 10_000, 9).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_deterministic_and_bounded() {
        let a = correlation(OperatorKind::MinSelector, N, N, 50_000, 42).unwrap();
        let b = correlation(OperatorKind::MinSelector, N, N, 50_000, 42).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.abs() <= 1.0);
    }

    #[test]
    fn correlation_rejects_tiny_sample_counts() {
        assert!(correlation(OperatorKind::MinSelector, N, N, 1, 0).is_err());
    }

    #[test]
    fn min_beats_max_on_standard_normals() {
        let rho_min = correlation(OperatorKind::MinSelector, N, N, 200_000, 7).unwrap();
        let rho_max = correlation(OperatorKind::MaxSelector, N, N, 200_000, 7).unwrap();
        assert!(rho_min > rho_max);
    }

    #[test]
    fn relative_error_zero_for_reference() {
        let l = relative_error_l(OperatorKind::AbsMul, N, N, 10_000, 1e-8, 3).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn relative_error_smaller_near_one() {
        // Operands concentrated near 1 approximate multiplication much better
        // than standard normals.
        let near_one = DistributionSpec::normal(1.0, 0.25).unwrap();
        let l_near = relative_error_l(OperatorKind::MinSelector, near_one, near_one, 1_000_000, 1e-8, 5).unwrap();
        let l_std = relative_error_l(OperatorKind::MinSelector, N, N, 1_000_000, 1e-8, 5).unwrap();
        assert!(l_near.is_finite() && l_std.is_finite());
        assert!(l_near < l_std, "near-1 L={l_near}, std L={l_std}");
    }

    #[test]
    fn single_point_grids() {
        let r = sweep_l_over_k(0.5, &[0.7], 10_000, SWEEP_EPSILON, 1).unwrap();
        assert_eq!(r.argmin_param, 0.7);
        assert_eq!(r.points.len(), 1);
        let r = sweep_l_over_v(0.0, &[1.1], 10_000, SWEEP_EPSILON, 1).unwrap();
        assert_eq!(r.argmin_param, 1.1);
        assert!(r.mean_abs_w_at_argmin.is_some());
    }

    #[test]
    fn sweep_argmin_is_grid_minimum() {
        let r = sweep_l_over_k(0.5, &default_k_grid(), 20_000, SWEEP_EPSILON, 11).unwrap();
        let min = r.points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        assert_eq!(r.argmin_objective, min);
    }

    #[test]
    fn sweep_csv_round_trip() {
        let r = sweep_l_over_v(0.0, &[0.5, 1.0, 1.5], 5_000, SWEEP_EPSILON, 2).unwrap();
        let parsed = SweepResult::from_csv(&r.to_csv()).unwrap();
        assert_eq!(parsed.points.len(), r.points.len());
        assert_eq!(parsed.argmin_param, r.argmin_param);
        for (a, b) in parsed.points.iter().zip(&r.points) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn default_grids_have_documented_extents() {
        let k = default_k_grid();
        assert_eq!(k.first().copied(), Some(0.0));
        assert_eq!(k.last().copied(), Some(2.0));
        assert_eq!(k.len(), 41);
        let v = default_v_grid();
        assert!(v.first().copied().unwrap() > 0.0);
        assert_eq!(v.last().copied(), Some(3.0));
        assert_eq!(v.len(), 60);
    }

    proptest! {
        // rho(h, a*g + b) == rho(h, g) for a > 0: correlation only measures
        // the quality of a linear fit.
        #[test]
        fn pearson_invariant_under_positive_affine(
            seed in 0u64..1000,
            a in 0.01f64..50.0,
            b in -100.0f64..100.0,
        ) {
            let (xs, ws) = super::draw_pairs(N, N, 500, seed);
            let h: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| apply_operator(OperatorKind::AbsMul, x, w)).collect();
            let g: Vec<f64> = xs.iter().zip(&ws).map(|(&x, &w)| apply_operator(OperatorKind::MinSelector, x, w)).collect();
            let g_affine: Vec<f64> = g.iter().map(|&v| a * v + b).collect();
            let r1 = pearson(&h, &g).unwrap();
            let r2 = pearson(&h, &g_affine).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-9);
        }

        #[test]
        fn relative_error_is_nonnegative(seed in 0u64..200) {
            let l = relative_error_l(OperatorKind::MinSelector, N, N, 2_000, 1e-8, seed).unwrap();
            prop_assert!(l >= 0.0);
        }
    }
}
