//! The smoothed squared-max potential and its constrained minimizer.
//!
//! `sqmax_mu(x) = mu^2 * ln(sum_j exp(x_j^2 / mu^2))` upper-bounds
//! `||x||_inf^2` and is never below `mu^2 ln d`. The solver needs
//! `min_{||p||_2 <= theta} sqmax_mu(gamma - p)` to additive accuracy `delta`;
//! that minimization is done by a binary search over a Lagrange multiplier
//! `zeta`, solving a per-coordinate fixed point for each multiplier value.
//! The multiplier grid is never materialized — at tight accuracies it has
//! far more points than fit in memory — only bisected, which is valid
//! because the rounded-down profile norm is monotone in `zeta`.
//!
//! All fixed-point comparisons are done in log form: the raw terms
//! `exp(x^2/mu^2)` overflow f64 at the scales the step oracle runs at.

use crate::error::{Error, Result};
use crate::vecops::l2_norm;

/// Smoothing scale and target accuracy for potential evaluations.
#[derive(Debug, Clone, Copy)]
pub struct SqmaxParams {
    /// Smoothing scale; the step oracles use `1/sqrt(C s ln d)`.
    pub mu: f64,
    /// Additive accuracy target for constrained minimization.
    pub accuracy: f64,
}

impl SqmaxParams {
    pub fn new(mu: f64, accuracy: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(Error::arg(format!("mu must be > 0, got {mu}")));
        }
        if !(accuracy > 0.0) {
            return Err(Error::arg(format!("accuracy must be > 0, got {accuracy}")));
        }
        Ok(SqmaxParams { mu, accuracy })
    }
}

/// `mu^2 * ln(sum_j exp(x_j^2/mu^2))`, evaluated by factoring out the largest
/// squared entry so the exponentials never overflow.
pub fn sqmax(x: &[f64], mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::arg(format!("mu must be > 0, got {mu}")));
    }
    if x.is_empty() {
        return Err(Error::arg("sqmax of an empty vector"));
    }
    let inv_mu2 = 1.0 / (mu * mu);
    let m = x.iter().fold(0.0f64, |m, v| m.max(v * v * inv_mu2));
    let sum: f64 = x.iter().map(|v| (v * v * inv_mu2 - m).exp()).sum();
    Ok(mu * mu * (m + sum.ln()))
}

/// Gradient of `sqmax` at `x`: `2 x_j q_j` with `q` the softmax weights of
/// `x_j^2/mu^2`. Used for cheap convexity-based lower bounds.
pub fn sqmax_gradient(x: &[f64], mu: f64) -> Result<Vec<f64>> {
    if !(mu > 0.0) {
        return Err(Error::arg(format!("mu must be > 0, got {mu}")));
    }
    let inv_mu2 = 1.0 / (mu * mu);
    let m = x.iter().fold(0.0f64, |m, v| m.max(v * v * inv_mu2));
    let weights: Vec<f64> = x.iter().map(|v| (v * v * inv_mu2 - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(x.iter()
        .zip(&weights)
        .map(|(v, q)| 2.0 * v * q / total)
        .collect())
}

/// Result of a constrained minimization: the feasible shift `p` and the value
/// `sqmax(gamma - p)` it attains.
#[derive(Debug, Clone)]
pub struct BallMin {
    pub shift: Vec<f64>,
    pub value: f64,
}

/// Approximately solves `min_{||p||_2 <= theta} sqmax_mu(gamma - p)` to
/// additive accuracy `delta`. The returned `p` is always feasible; rounding
/// in the search is toward the interior of the ball.
pub fn min_sqmax_over_ball(gamma: &[f64], theta: f64, mu: f64, delta: f64) -> Result<BallMin> {
    min_sqmax_over_ball_hinted(gamma, theta, mu, delta, None).map(|(ball, _)| ball)
}

/// [`min_sqmax_over_ball`] with a warm-start hint for the multiplier search
/// from a nearby previous solve; returns the multiplier actually used (when
/// the general search ran) for the next hint.
pub(crate) fn min_sqmax_over_ball_hinted(
    gamma: &[f64],
    theta: f64,
    mu: f64,
    delta: f64,
    hint: Option<f64>,
) -> Result<(BallMin, Option<f64>)> {
    if !(mu > 0.0) {
        return Err(Error::arg(format!("mu must be > 0, got {mu}")));
    }
    if !(delta > 0.0) {
        return Err(Error::arg(format!("delta must be > 0, got {delta}")));
    }
    if !(theta >= 0.0) {
        return Err(Error::arg(format!("theta must be >= 0, got {theta}")));
    }
    let d = gamma.len();
    if d == 0 {
        return Err(Error::arg("empty gamma"));
    }
    let g2 = l2_norm(gamma);
    let floor = mu * mu * (d as f64).ln();
    if g2 == 0.0 {
        return Ok((BallMin { shift: vec![0.0; d], value: floor }, None));
    }

    // (i) the ball is too small to matter at this accuracy
    if theta <= delta / (2.0 * g2) {
        return Ok((BallMin { shift: vec![0.0; d], value: sqmax(gamma, mu)? }, None));
    }

    // (ii) the ball absorbs gamma up to per-entry residual sqrt(delta)
    if g2 <= theta + delta.sqrt() {
        let scale = (theta / g2).min(1.0);
        let shift: Vec<f64> = gamma.iter().map(|&g| scale * g).collect();
        let residual: Vec<f64> = gamma.iter().zip(&shift).map(|(g, p)| g - p).collect();
        let value = sqmax(&residual, mu)?;
        return Ok((BallMin { shift, value }, None));
    }

    // (iii) Lagrange-multiplier search. The optimum has the same signs as
    // gamma with |p_j| <= |gamma_j|, so work on magnitudes.
    let problem = ClipProblem::new(gamma, mu, g2, delta);
    let alpha = delta * delta / (192.0 * g2.powi(4));
    let zeta_hi = (g2 / delta.sqrt()).ln();
    let paper_lo = -(g2 * g2) / (mu * mu) - (2.0 * g2 * g2 / delta).ln();
    // Below the activation point of the largest coordinate the rounded
    // profile is identically zero, so the bracket can start there.
    let zeta_lo = paper_lo.max(problem.activation_zeta() - 1.0).min(zeta_hi - alpha);

    let (shift_abs, zeta_used) = problem.search(zeta_lo, zeta_hi, alpha, theta, hint);

    // Restore signs, clamp into the ball.
    let mut shift: Vec<f64> = vec![0.0; d];
    for (j, p) in shift_abs {
        shift[j] = gamma[j].signum() * p;
    }
    let norm = l2_norm(&shift);
    if norm > theta && norm > 0.0 {
        let scale = theta / norm;
        for p in shift.iter_mut() {
            *p *= scale;
        }
    }
    let residual: Vec<f64> = gamma.iter().zip(&shift).map(|(g, p)| g - p).collect();
    let value = sqmax(&residual, mu)?;
    Ok((BallMin { shift, value }, Some(zeta_used)))
}

/// `min_{||p||_2 <= L ||w||_1} sqmax_mu(gamma_w - p) + ||w||_1 / (4 C L s)`,
/// the short-flat tracking potential driven by the step oracles.
pub fn phi_sqmax(
    wbar_l1: f64,
    gamma_wbar: &[f64],
    l: f64,
    c: f64,
    s: usize,
    mu: f64,
    delta: f64,
) -> Result<f64> {
    if !(wbar_l1 >= 0.0) {
        return Err(Error::arg("||w||_1 must be >= 0"));
    }
    if !(l > 0.0) || !(c > 0.0) || s == 0 {
        return Err(Error::arg("phi_sqmax constants must be positive"));
    }
    let ball = min_sqmax_over_ball(gamma_wbar, l * wbar_l1, mu, delta)?;
    Ok(ball.value + wbar_l1 / (4.0 * c * l * s as f64))
}

/// State for the per-multiplier fixed-point solves of case (iii).
pub(crate) struct ClipProblem {
    /// (original index, |gamma_j|) sorted by decreasing magnitude, zeros dropped.
    abs_desc: Vec<(usize, f64)>,
    inv_mu2: f64,
    /// Relative grid step: each coordinate's grid is multiples of `c * |gamma_j|`.
    c: f64,
    ln_c_ratio: f64,
    one_minus_c: f64,
    k_max: u64,
}

enum ProfileMode {
    /// Stop accumulating once the squared norm exceeds the threshold.
    Predicate(f64),
    Full,
}

/// Largest `k` in `[lo, hi]` with `test(k)` true, assuming `test(lo)` holds
/// and `test` is monotone decreasing in `k`.
fn grid_bisect(mut lo: u64, mut hi: u64, test: &impl Fn(u64) -> bool) -> u64 {
    if test(hi) {
        return hi;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if test(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

impl ClipProblem {
    pub(crate) fn new(gamma: &[f64], mu: f64, g2: f64, delta: f64) -> Self {
        let beta = (delta * delta / (192.0 * g2.powi(3))).min(delta / (4.0 * g2));
        // In case (iii) delta < g2^2, so c < 1/4; the clamp is a safeguard.
        let c = (beta / g2).min(0.25);
        let mut abs_desc: Vec<(usize, f64)> = gamma
            .iter()
            .enumerate()
            .filter(|(_, g)| **g != 0.0)
            .map(|(j, g)| (j, g.abs()))
            .collect();
        abs_desc.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("non-finite gamma").then(a.0.cmp(&b.0)));
        ClipProblem {
            abs_desc,
            inv_mu2: 1.0 / (mu * mu),
            c,
            ln_c_ratio: (c / (1.0 - c)).ln(),
            one_minus_c: 1.0 - c,
            k_max: (1.0 / c).floor() as u64,
        }
    }

    /// The multiplier below which every rounded coordinate is zero.
    fn activation_zeta(&self) -> f64 {
        let a_max = self.abs_desc[0].1;
        self.ln_c_ratio - (self.one_minus_c * a_max).powi(2) * self.inv_mu2
    }

    /// Fixed point of `p = e^zeta (a - p) exp((a-p)^2/mu^2)` rounded down to
    /// the coordinate grid. The comparison `rhs >= lhs` at grid point `k` is
    /// `zeta + ln(1-kc) - ln(kc) + a^2 (1-kc)^2/mu^2 >= 0` — log form, since
    /// the raw exponential overflows. A safeguarded Newton iteration brackets
    /// the continuous root and the exact grid cell is pinned with the same
    /// predicate a plain grid bisection would use, so the result is
    /// identical at a fraction of the evaluations.
    #[inline]
    fn grid_steps(&self, a: f64, zeta: f64) -> u64 {
        let a2 = a * a * self.inv_mu2;
        let c = self.c;
        let test = |k: u64| -> bool {
            let kc = k as f64 * c;
            if kc >= 1.0 {
                return false;
            }
            let r = 1.0 - kc;
            zeta + r.ln() - kc.ln() + a2 * r * r >= 0.0
        };
        if !test(1) {
            return 0;
        }
        if test(self.k_max) {
            return self.k_max;
        }
        // f(t) = zeta + ln(1-t) - ln(t) + a2 (1-t)^2 is strictly decreasing
        // with f(c) >= 0 > f(k_max c); its root t* gives k = floor(t*/c).
        let f = |t: f64| zeta + (1.0 - t).ln() - t.ln() + a2 * (1.0 - t) * (1.0 - t);
        let mut lo = c;
        let mut hi = self.k_max as f64 * c;
        let mut t = 0.5 * (lo + hi);
        let mut prev_width = hi - lo;
        let mut slow_rounds = 0u32;
        for _ in 0..90 {
            if hi - lo <= c {
                break;
            }
            let ft = f(t);
            if ft >= 0.0 {
                lo = t;
            } else {
                hi = t;
            }
            let width = hi - lo;
            if width > 0.5 * prev_width {
                slow_rounds += 1;
            } else {
                slow_rounds = 0;
            }
            prev_width = width;
            let derivative = -1.0 / (1.0 - t) - 1.0 / t - 2.0 * a2 * (1.0 - t);
            let newton = t - ft / derivative;
            let margin = 0.02 * width;
            // fall back to pure bisection whenever Newton stops shrinking
            // the bracket geometrically
            t = if slow_rounds < 2 && newton > lo + margin && newton < hi - margin {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        let mut k = ((lo / c).floor() as u64).clamp(1, self.k_max);
        // The bracket is one grid cell wide, so the boundary is adjacent;
        // if it somehow is not, finish with a plain grid bisection.
        let mut guard = 0;
        if test(k) {
            while k < self.k_max && test(k + 1) {
                k += 1;
                guard += 1;
                if guard > 8 {
                    return grid_bisect(k, self.k_max, &test);
                }
            }
            k
        } else {
            while k > 1 && !test(k) {
                k -= 1;
                guard += 1;
                if guard > 8 {
                    return grid_bisect(1, k, &test);
                }
            }
            if test(k) {
                k
            } else {
                0
            }
        }
    }

    fn profile(&self, zeta: f64, mode: ProfileMode) -> (f64, Vec<(usize, f64)>) {
        // Coordinates with magnitude below the activation threshold round to
        // zero; since the grid step is proportional to the magnitude, the
        // active set is exactly a prefix of the sorted order.
        let thresh_sq = {
            let t = (self.ln_c_ratio - zeta) * (1.0 / self.inv_mu2)
                / (self.one_minus_c * self.one_minus_c);
            t.max(0.0)
        };
        let mut norm_sq = 0.0;
        let mut entries = Vec::new();
        for &(j, a) in &self.abs_desc {
            if a * a < thresh_sq {
                break;
            }
            let k = self.grid_steps(a, zeta);
            if k == 0 {
                continue;
            }
            let p = a * (k as f64 * self.c);
            norm_sq += p * p;
            entries.push((j, p));
            if let ProfileMode::Predicate(limit) = mode {
                if norm_sq >= limit {
                    break;
                }
            }
        }
        (norm_sq, entries)
    }

    /// Bisects the multiplier bracket down to width `alpha` and returns the
    /// endpoint profile whose norm is closest to `theta` (ties toward the
    /// interior), together with the multiplier it chose. A hint from a
    /// nearby previous solve seeds a small bracket that is expanded
    /// geometrically until it straddles the crossing, which costs a few
    /// predicate evaluations instead of a search over the full range.
    fn search(
        &self,
        lo0: f64,
        hi0: f64,
        alpha: f64,
        theta: f64,
        hint: Option<f64>,
    ) -> (Vec<(usize, f64)>, f64) {
        let target_sq = theta * theta;
        let below = |z: f64| -> bool {
            self.profile(z, ProfileMode::Predicate(target_sq)).0 < target_sq
        };

        let (mut lo, mut hi);
        match hint {
            Some(z) if z > lo0 && z < hi0 => {
                let mut radius = 1.0f64.max(8.0 * alpha);
                lo = (z - radius).max(lo0);
                hi = (z + radius).min(hi0);
                let mut guard = 0;
                while !below(lo) && lo > lo0 && guard < 60 {
                    radius *= 4.0;
                    lo = (z - radius).max(lo0);
                    guard += 1;
                }
                let mut guard = 0;
                while below(hi) && hi < hi0 && guard < 60 {
                    radius *= 4.0;
                    hi = (z + radius).min(hi0);
                    guard += 1;
                }
            }
            _ => {
                lo = lo0;
                hi = hi0;
            }
        }

        if !below(lo) {
            let (_, profile) = self.profile(lo, ProfileMode::Full);
            return (profile, lo);
        }
        if below(hi) {
            // Even the largest multiplier under-shoots; rounding keeps us
            // inside the ball, and this is the closest profile it reaches.
            let (_, profile) = self.profile(hi, ProfileMode::Full);
            return (profile, hi);
        }
        let mut iterations = 0;
        while hi - lo > alpha && iterations < 400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break; // f64 resolution floor
            }
            if below(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
            iterations += 1;
        }
        let (lo_norm_sq, lo_profile) = self.profile(lo, ProfileMode::Full);
        let (hi_norm_sq, hi_profile) = self.profile(hi, ProfileMode::Full);
        let lo_gap = (lo_norm_sq.sqrt() - theta).abs();
        let hi_gap = (hi_norm_sq.sqrt() - theta).abs();
        if lo_gap <= hi_gap {
            (lo_profile, lo)
        } else {
            (hi_profile, hi)
        }
    }

    /// Rounded profile norm for a given multiplier — exposed for the
    /// monotonicity tests that justify the bisection.
    #[cfg(test)]
    pub(crate) fn profile_norm(&self, zeta: f64) -> f64 {
        self.profile(zeta, ProfileMode::Full).0.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::substream;
    use rand::Rng;

    #[test]
    fn sqmax_at_zero_is_floor() {
        for d in [1usize, 2, 17, 400] {
            let x = vec![0.0; d];
            let mu = 0.37;
            let v = sqmax(&x, mu).unwrap();
            assert!((v - mu * mu * (d as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn sqmax_direct_formula() {
        let v = sqmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((v - (1.0f64.exp() + 1.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn sqmax_dominates_linf_squared() {
        let mut rng = substream(11, 0);
        for _ in 0..100 {
            let d = rng.random_range(1..8);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mu = rng.random_range(0.05..2.0);
            let v = sqmax(&x, mu).unwrap();
            let linf2 = x.iter().fold(0.0f64, |m, t| m.max(t * t));
            assert!(v >= linf2 - 1e-12);
            assert!(v >= mu * mu * (d as f64).ln() - 1e-12);
        }
    }

    #[test]
    fn sqmax_survives_extreme_scales() {
        let v = sqmax(&[1000.0, 1.0], 0.01).unwrap();
        assert!(v.is_finite());
        assert!((v - 1_000_000.0).abs() / 1_000_000.0 < 1e-12);
        assert!(sqmax(&[1.0], 0.0).is_err());
        assert!(sqmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn sqmax_gradient_matches_finite_differences() {
        let x = [0.8, -0.3, 0.1];
        let mu = 0.5;
        let g = sqmax_gradient(&x, mu).unwrap();
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let fd = (sqmax(&xp, mu).unwrap() - sqmax(&xm, mu).unwrap()) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-6, "coord {j}: {} vs {}", g[j], fd);
        }
    }

    #[test]
    fn ball_min_degenerate_cases() {
        let mu = 0.3;
        let d = 4;
        let zero = vec![0.0; d];
        let r = min_sqmax_over_ball(&zero, 1.0, mu, 1e-3).unwrap();
        assert_eq!(r.shift, zero);
        assert!((r.value - mu * mu * (d as f64).ln()).abs() < 1e-14);

        let gamma = [1.0, -0.5, 0.25, 0.0];
        let r = min_sqmax_over_ball(&gamma, 0.0, mu, 1e-3).unwrap();
        assert_eq!(r.shift, zero);
        assert!((r.value - sqmax(&gamma, mu).unwrap()).abs() < 1e-14);

        assert!(min_sqmax_over_ball(&gamma, 1.0, 0.0, 1e-3).is_err());
        assert!(min_sqmax_over_ball(&gamma, 1.0, mu, 0.0).is_err());
    }

    #[test]
    fn ball_min_matches_hand_computed_case() {
        // min over ||p|| <= 0.5 of ln(exp((1-p1)^2) + exp(p2^2)) is attained
        // at p = (0.5, 0) with value ln(e^{0.25} + 1).
        let delta = 1e-3;
        let r = min_sqmax_over_ball(&[1.0, 0.0], 0.5, 1.0, delta).unwrap();
        let expected = (0.25f64.exp() + 1.0).ln();
        assert!(r.value >= expected - 1e-12, "returned value below true min");
        assert!(r.value <= expected + delta, "value {} vs {}", r.value, expected);
        assert!((r.shift[0] - 0.5).abs() < 0.05);
        assert!(r.shift[1].abs() < 0.05);
    }

    #[test]
    fn ball_min_shift_always_feasible() {
        let mut rng = substream(12, 0);
        for _ in 0..200 {
            let d = rng.random_range(1..6);
            let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let theta = rng.random_range(0.0..2.5);
            let mu = rng.random_range(0.05..1.5);
            let r = min_sqmax_over_ball(&gamma, theta, mu, 1e-4).unwrap();
            assert!(
                l2_norm(&r.shift) <= theta * (1.0 + 1e-12) + 1e-300,
                "infeasible shift"
            );
            assert!(r.value.is_finite());
            // the reported value is attained by the returned shift
            let resid: Vec<f64> = gamma.iter().zip(&r.shift).map(|(g, p)| g - p).collect();
            assert!((sqmax(&resid, mu).unwrap() - r.value).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_norm_monotone_in_multiplier() {
        let mut rng = substream(13, 0);
        for _ in 0..25 {
            let d = rng.random_range(2..6);
            let gamma: Vec<f64> = (0..d).map(|_| rng.random_range(0.1..2.0)).collect();
            let g2 = l2_norm(&gamma);
            let mu = rng.random_range(0.1..1.0);
            let problem = ClipProblem::new(&gamma, mu, g2, 1e-3);
            let lo = problem.activation_zeta() - 1.0;
            let hi = (g2 / 1e-3f64.sqrt()).ln();
            let mut last = -1.0;
            for i in 0..=40 {
                let zeta = lo + (hi - lo) * i as f64 / 40.0;
                let norm = problem.profile_norm(zeta);
                assert!(
                    norm >= last - 1e-15,
                    "profile norm decreased: {norm} after {last}"
                );
                last = norm;
            }
        }
    }

    #[test]
    fn phi_sqmax_zero_weights_hits_floor() {
        let d = 8;
        let mu = 0.2;
        let v = phi_sqmax(0.0, &vec![0.0; d], 3.0, 200.0, 5, mu, 1e-4).unwrap();
        assert!((v - mu * mu * (d as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn phi_sqmax_absorbed_regime_bound() {
        // once the ball covers gamma the value is within delta of the floor
        // plus the l1 penalty
        let gamma = [0.3, -0.2, 0.05];
        let (l, c, s, mu, delta) = (3.0, 200.0, 5usize, 0.25, 1e-4);
        let l1 = 2.0 * l2_norm(&gamma) / l; // ball radius double the norm
        let v = phi_sqmax(l1, &gamma, l, c, s, mu, delta).unwrap();
        let floor = mu * mu * 3.0f64.ln() + l1 / (4.0 * c * l * s as f64);
        assert!(v >= floor - 1e-12);
        assert!(v <= floor + delta + 1e-12);
    }
}
