//! Vector primitives: truncation, top-k norms, hard thresholding, numerical
//! sparsity, shelling, l1-ball projection, and short-flat certificates.
//!
//! Everything here is a pure function; ties between equal magnitudes are
//! always broken toward the lowest index so that the same coordinate wins in
//! every operation.

use crate::error::{Error, Result};

/// An `s`-sparse vector stored as (support, values) with strictly increasing
/// indices and nonzero finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSignal {
    dim: usize,
    support: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSignal {
    pub fn new(dim: usize, support: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::dim(format!(
                "support has {} indices but {} values",
                support.len(),
                values.len()
            )));
        }
        if !support.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::arg("support indices must be strictly increasing"));
        }
        if let Some(&last) = support.last() {
            if last >= dim {
                return Err(Error::arg(format!("support index {last} out of range {dim}")));
            }
        }
        if !values.iter().all(|v| v.is_finite() && *v != 0.0) {
            return Err(Error::arg("signal values must be finite and nonzero"));
        }
        Ok(SparseSignal { dim, support, values })
    }

    /// Collects the nonzero entries of a dense vector.
    pub fn from_dense(v: &[f64]) -> Result<Self> {
        let mut support = Vec::new();
        let mut values = Vec::new();
        for (i, &x) in v.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite("signal entries"));
            }
            if x != 0.0 {
                support.push(i);
                values.push(x);
            }
        }
        Ok(SparseSignal { dim: v.len(), support, values })
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.support.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A certified split `v = short + flat` with `||short||_2 <= l2_bound` and
/// `||flat||_inf <= linf_bound`.
#[derive(Debug, Clone)]
pub struct ShortFlatDecomposition {
    pub short: Vec<f64>,
    pub flat: Vec<f64>,
    pub l2_bound: f64,
    pub linf_bound: f64,
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Shrinks every coordinate toward zero by `c`, clamping at zero:
/// `out_i = sign(v_i) * max(|v_i| - c, 0)`.
pub fn trunc(v: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c >= 0.0) {
        return Err(Error::arg(format!("trunc level must be >= 0, got {c}")));
    }
    Ok(v.iter()
        .map(|&x| x.signum() * (x.abs() - c).max(0.0))
        .collect())
}

/// Indices of `v` ordered by decreasing magnitude, lowest index first on ties.
fn magnitude_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| {
        v[b].abs()
            .partial_cmp(&v[a].abs())
            .expect("non-finite entry in magnitude sort")
            .then(a.cmp(&b))
    });
    idx
}

/// l2 norm of the `k` largest-magnitude entries.
pub fn top_k_norm(v: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > v.len() {
        return Err(Error::arg(format!(
            "top_k_norm: k must satisfy 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    sq.sort_by(|a, b| b.partial_cmp(a).expect("non-finite entry"));
    Ok(sq[..k].iter().sum::<f64>().sqrt())
}

/// Keeps the `s` largest-magnitude entries (lowest index wins ties), zeroing
/// the rest. Among all `s`-sparse vectors this minimizes the l2 distance to
/// `v`.
pub fn hard_threshold(v: &[f64], s: usize) -> Result<Vec<f64>> {
    if s == 0 || s > v.len() {
        return Err(Error::arg(format!(
            "hard_threshold: s must satisfy 1 <= s <= {}, got {s}",
            v.len()
        )));
    }
    let order = magnitude_order(v);
    let mut out = vec![0.0; v.len()];
    for &i in &order[..s] {
        out[i] = v[i];
    }
    Ok(out)
}

/// `||v||_1^2 / ||v||_2^2`, a continuous sparsity proxy in `[1, d]` that never
/// exceeds `||v||_0`.
pub fn numerical_sparsity(v: &[f64]) -> Result<f64> {
    let n2 = l2_norm(v);
    if n2 == 0.0 {
        return Err(Error::arg("numerical sparsity of the zero vector is undefined"));
    }
    let n1 = l1_norm(v);
    Ok((n1 / n2) * (n1 / n2))
}

/// Greedy decomposition of `v` into disjoint `s`-sparse blocks of decreasing
/// magnitude. Blocks sum exactly to `v`; the tail blocks satisfy
/// `sum_{l>=2} ||v^(l)||_2 <= sqrt(NS(v)/s) * ||v||_2`.
pub fn shelling(v: &[f64], s: usize) -> Result<Vec<Vec<f64>>> {
    if s == 0 {
        return Err(Error::arg("shelling block size must be >= 1"));
    }
    if l2_norm(v) == 0.0 {
        return Err(Error::arg("cannot shell the zero vector"));
    }
    let order: Vec<usize> = magnitude_order(v)
        .into_iter()
        .filter(|&i| v[i] != 0.0)
        .collect();
    let mut blocks = Vec::new();
    for chunk in order.chunks(s) {
        let mut block = vec![0.0; v.len()];
        for &i in chunk {
            block[i] = v[i];
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Euclidean projection of `y` onto `{x : ||x - center||_1 <= radius}`.
///
/// Sort-then-shift threshold method: find the smallest shrinkage `tau` whose
/// soft-thresholded shift lands on the ball, O(d log d) total.
pub fn project_l1_ball(y: &[f64], center: &[f64], radius: f64) -> Result<Vec<f64>> {
    if y.len() != center.len() {
        return Err(Error::dim(format!(
            "project_l1_ball: point has length {}, center {}",
            y.len(),
            center.len()
        )));
    }
    if !(radius >= 0.0) {
        return Err(Error::arg(format!("radius must be >= 0, got {radius}")));
    }
    let z: Vec<f64> = y.iter().zip(center).map(|(a, b)| a - b).collect();
    if l1_norm(&z) <= radius {
        return Ok(y.to_vec());
    }
    if radius == 0.0 {
        return Ok(center.to_vec());
    }
    let mut mags: Vec<f64> = z.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).expect("non-finite entry"));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cum += u;
        let candidate = (cum - radius) / (j + 1) as f64;
        if u > candidate {
            tau = candidate;
        } else {
            break;
        }
    }
    let shifted = trunc(&z, tau)?;
    Ok(shifted.iter().zip(center).map(|(a, b)| a + b).collect())
}

/// Certifies a `(c2, cinf)` short-flat decomposition of `v` when one exists.
///
/// Sets `short = trunc(v, cinf)` and `flat = v - short`; the split exists iff
/// `||trunc(v, cinf)||_2 <= c2`, in which case that split witnesses it.
pub fn short_flat_certificate(
    v: &[f64],
    c2: f64,
    cinf: f64,
) -> Result<Option<ShortFlatDecomposition>> {
    if !(c2 >= 0.0) || !(cinf >= 0.0) {
        return Err(Error::arg("short-flat bounds must be >= 0"));
    }
    let short = trunc(v, cinf)?;
    if l2_norm(&short) > c2 {
        return Ok(None);
    }
    let flat: Vec<f64> = v.iter().zip(&short).map(|(a, b)| a - b).collect();
    Ok(Some(ShortFlatDecomposition {
        short,
        flat,
        l2_bound: c2,
        linf_bound: cinf,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_examples() {
        assert_eq!(trunc(&[3.0, -0.5, 1.0], 1.0).unwrap(), vec![2.0, 0.0, 0.0]);
        let v = [0.3, -2.5, 0.0, 7.0];
        assert_eq!(trunc(&v, 0.0).unwrap(), v.to_vec());
        assert_eq!(trunc(&[2.0, -2.0], 2.0).unwrap(), vec![0.0, 0.0]);
        assert!(trunc(&v, -1.0).is_err());
    }

    #[test]
    fn top_k_norm_examples() {
        let v = [3.0, -4.0, 1.0];
        assert_eq!(top_k_norm(&v, 1).unwrap(), 4.0);
        assert_eq!(top_k_norm(&v, 2).unwrap(), 5.0);
        assert!((top_k_norm(&v, 3).unwrap() - 26.0f64.sqrt()).abs() < 1e-15);
        assert!(top_k_norm(&v, 0).is_err());
        assert!(top_k_norm(&v, 4).is_err());
    }

    #[test]
    fn hard_threshold_examples() {
        assert_eq!(hard_threshold(&[3.0, -4.0, 1.0], 1).unwrap(), vec![0.0, -4.0, 0.0]);
        // lexicographic tie-break keeps the earlier coordinate
        assert_eq!(hard_threshold(&[1.0, 1.0], 1).unwrap(), vec![1.0, 0.0]);
        let v = [0.5, -0.25, 4.0];
        assert_eq!(hard_threshold(&v, 3).unwrap(), v.to_vec());
        assert!(hard_threshold(&v, 0).is_err());
    }

    #[test]
    fn numerical_sparsity_examples() {
        let e1 = [1.0, 0.0, 0.0, 0.0];
        assert!((numerical_sparsity(&e1).unwrap() - 1.0).abs() < 1e-15);
        let ones = [1.0; 4];
        assert!((numerical_sparsity(&ones).unwrap() - 4.0).abs() < 1e-15);
        assert!((numerical_sparsity(&[1.0, 1.0, 0.0, 0.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(numerical_sparsity(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn shelling_examples() {
        let v = [4.0, 3.0, 2.0, 1.0];
        let blocks = shelling(&v, 2).unwrap();
        assert_eq!(blocks, vec![vec![4.0, 3.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 1.0]]);

        // tail bound for that input: the single tail block has norm sqrt(5)
        let tail: f64 = blocks[1..].iter().map(|b| l2_norm(b)).sum();
        let ns = numerical_sparsity(&v).unwrap();
        let bound = (ns / 2.0).sqrt() * l2_norm(&v);
        assert!((tail - 5.0f64.sqrt()).abs() < 1e-12);
        assert!(tail <= bound);

        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(shelling(&e1, 2).unwrap(), vec![vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn shelling_blocks_partition_v() {
        let v = [0.1, -5.0, 2.0, 0.0, 2.0, -0.3, 4.5];
        let blocks = shelling(&v, 3).unwrap();
        let mut sum = vec![0.0; v.len()];
        let mut seen = vec![false; v.len()];
        for b in &blocks {
            for (i, &x) in b.iter().enumerate() {
                if x != 0.0 {
                    assert!(!seen[i], "supports overlap at {i}");
                    seen[i] = true;
                    sum[i] += x;
                }
            }
        }
        assert_eq!(sum, v.to_vec());
    }

    #[test]
    fn projection_examples() {
        let p = project_l1_ball(&[2.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);

        let p = project_l1_ball(&[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let inside = [0.25, -0.25];
        let p = project_l1_ball(&inside, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(p, inside.to_vec());

        assert!(project_l1_ball(&inside, &[0.0, 0.0], -0.5).is_err());
    }

    #[test]
    fn short_flat_examples() {
        let d = short_flat_certificate(&[2.0, 0.1], 1.5, 0.5).unwrap().unwrap();
        assert_eq!(d.short, vec![1.5, 0.0]);
        assert_eq!(d.flat, vec![0.5, 0.1]);

        let z = [0.0, 0.0, 0.0];
        assert!(short_flat_certificate(&z, 0.0, 0.0).unwrap().is_some());

        assert!(short_flat_certificate(&[10.0, 10.0], 1.0, 1.0).unwrap().is_none());
        assert!(short_flat_certificate(&[1.0], -1.0, 0.0).is_err());
    }

    #[test]
    fn sparse_signal_round_trip() {
        let v = [0.0, 2.0, 0.0, -1.0];
        let s = SparseSignal::from_dense(&v).unwrap();
        assert_eq!(s.nnz(), 2);
        assert_eq!(s.support(), &[1, 3]);
        assert_eq!(s.to_dense(), v.to_vec());
        assert!(SparseSignal::new(3, vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(SparseSignal::new(3, vec![1], vec![0.0]).is_err());
        assert!(SparseSignal::new(3, vec![5], vec![1.0]).is_err());
    }
}
