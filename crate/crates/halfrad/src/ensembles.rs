//! Instance generation: Gaussian ensembles, semi-random adversaries, the
//! explicit instances that break greedy baselines, and RIP spot checks.
//!
//! Every generator takes an explicit seed and records it in the instance
//! metadata, so any instance can be regenerated bit-identically. Adversarial
//! augmentation keeps the planted Gaussian block intact — the adversary only
//! appends rows that are consistent with the planted signal (and, in the
//! noisy variants, concentrates the noise on the planted rows, the worst
//! placement for any method that trusts them).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::stream::substream;
use crate::vecops::{l2_norm, top_k_norm, SparseSignal};

/// Ground truth attached to generated instances.
#[derive(Debug, Clone)]
pub struct InstanceTruth {
    pub x_star: SparseSignal,
    pub xi_star: Vec<f64>,
    /// Post-shuffle positions of the planted (trustworthy) rows.
    pub planted_rows: Vec<usize>,
    /// Number of planted rows.
    pub m: usize,
}

/// Generator provenance; serialized as the metadata half of the instance
/// file pair.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InstanceMeta {
    pub generator: String,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub planted_rows: Vec<usize>,
    /// Row permutation applied after stacking: row `i` of the instance is
    /// pre-shuffle row `permutation[i]`.
    pub permutation: Vec<usize>,
    pub has_truth: bool,
    pub noise_scale: f64,
    /// Generator-specific annotations (e.g. the planted column index).
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// A measurement matrix, responses, and (for generated instances) the truth.
#[derive(Debug, Clone)]
pub struct MeasurementInstance {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub truth: Option<InstanceTruth>,
    pub meta: InstanceMeta,
}

impl MeasurementInstance {
    /// Checks `b = A x* + xi*` to `1e-10` when the truth is present.
    pub fn verify_consistency(&self) -> Result<()> {
        if let Some(truth) = &self.truth {
            let ax = self.a.mul_vec(&truth.x_star.to_dense())?;
            for (i, ((axi, xi), bi)) in ax.iter().zip(&truth.xi_star).zip(&self.b).enumerate() {
                if (axi + xi - bi).abs() > 1e-10 {
                    return Err(Error::Format(format!(
                        "row {i}: b - A x* - xi* = {}",
                        bi - axi - xi
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(1/sqrt(m)) * ||xi*||_{2,(m)}`, the best achievable error scale.
    pub fn noise_floor(&self) -> Option<f64> {
        let truth = self.truth.as_ref()?;
        if truth.xi_star.iter().all(|x| *x == 0.0) {
            return Some(0.0);
        }
        let m = truth.m.min(truth.xi_star.len()).max(1);
        Some(top_k_norm(&truth.xi_star, m).ok()? / (m as f64).sqrt())
    }
}

/// How the adversary augments the planted block.
#[derive(Debug, Clone)]
pub enum AdversaryKind {
    /// No augmentation: the instance is the planted block itself.
    None,
    /// One planted row, duplicated until `n_total` rows exist.
    DuplicateRow,
    /// Fresh Gaussian rows (the "helpful" regime), with one off-support
    /// column on the extra rows overwritten to match `b`.
    CopyColumn,
    /// Fresh Gaussian rows only.
    RandomExtra,
    /// Caller-supplied rows.
    CustomRows(Vec<Vec<f64>>),
}

impl AdversaryKind {
    fn name(&self) -> &'static str {
        match self {
            AdversaryKind::None => "none",
            AdversaryKind::DuplicateRow => "duplicate_row",
            AdversaryKind::CopyColumn => "copy_column",
            AdversaryKind::RandomExtra => "random_extra",
            AdversaryKind::CustomRows(_) => "custom_rows",
        }
    }
}

/// Augmentation plan: the kind plus the total row count after augmentation.
#[derive(Debug, Clone)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub n_total: usize,
}

/// Adversarial noise: equal-magnitude entries with random signs on every
/// planted row, so the largest noise entries sit exactly where a method
/// would want to trust the measurements. The noise floor equals `scale`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub scale: f64,
}

/// An `m x d` matrix of i.i.d. standard normal entries from the stream.
pub fn gaussian_matrix(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<DenseMatrix> {
    if m == 0 || d == 0 {
        return Err(Error::arg("gaussian_matrix needs positive dimensions"));
    }
    let data: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    DenseMatrix::from_rows_vec(m, d, data)
}

fn random_sparse_signal(
    d: usize,
    s: usize,
    norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SparseSignal> {
    let mut indices: Vec<usize> = (0..d).collect();
    indices.shuffle(rng);
    let mut support: Vec<usize> = indices[..s].to_vec();
    support.sort_unstable();
    let mut values: Vec<f64> = (0..s).map(|_| rng.sample(StandardNormal)).collect();
    let scale = norm / l2_norm(&values);
    for v in values.iter_mut() {
        *v *= scale;
        if *v == 0.0 {
            *v = norm * 1e-12; // keep the signal support exact
        }
    }
    SparseSignal::new(d, support, values)
}

/// Generates a planted instance: a Gaussian block `G`, a random `s`-sparse
/// unit-norm signal, adversarial extra rows per `spec`, a recorded row
/// shuffle, and responses `b = A x* (+ xi*)`.
pub fn make_instance(
    spec: &AdversarySpec,
    m: usize,
    d: usize,
    s: usize,
    noise: Option<NoiseSpec>,
    x_norm: f64,
    seed: u64,
) -> Result<MeasurementInstance> {
    if spec.n_total < m {
        return Err(Error::Config(format!(
            "n_total ({}) must be at least m ({m})",
            spec.n_total
        )));
    }
    if s == 0 || s > d {
        return Err(Error::Config(format!("s ({s}) must satisfy 1 <= s <= d ({d})")));
    }
    if matches!(spec.kind, AdversaryKind::None) && spec.n_total != m {
        return Err(Error::Config(format!(
            "kind 'none' requires n_total ({}) == m ({m})",
            spec.n_total
        )));
    }
    let n = spec.n_total;
    let extra_count = n - m;

    let mut rng = substream(seed, 0);
    let g = gaussian_matrix(m, d, &mut rng)?;
    let x_star = random_sparse_signal(d, s, x_norm, &mut rng)?;
    let x_dense = x_star.to_dense();

    let mut extra = BTreeMap::new();
    let mut rows: Vec<Vec<f64>> = (0..m).map(|i| g.row(i).to_vec()).collect();
    match &spec.kind {
        AdversaryKind::None => {}
        AdversaryKind::DuplicateRow => {
            let source = rng.random_range(0..m);
            extra.insert("duplicated_row".to_string(), source.to_string());
            let row = g.row(source).to_vec();
            rows.extend(std::iter::repeat(row).take(extra_count));
        }
        AdversaryKind::RandomExtra | AdversaryKind::CopyColumn => {
            for _ in 0..extra_count {
                rows.push((0..d).map(|_| rng.sample(StandardNormal)).collect());
            }
        }
        AdversaryKind::CustomRows(custom) => {
            if custom.len() != extra_count {
                return Err(Error::Config(format!(
                    "custom_rows supplies {} rows but n_total - m = {extra_count}",
                    custom.len()
                )));
            }
            for row in custom {
                if row.len() != d || !row.iter().all(|x| x.is_finite()) {
                    return Err(Error::Config("custom_rows entries must be finite length-d".into()));
                }
                rows.push(row.clone());
            }
        }
    }

    let mut permutation: Vec<usize> = (0..n).collect();
    permutation.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &src in &permutation {
        data.extend_from_slice(&rows[src]);
    }
    let mut a = DenseMatrix::from_rows_vec(n, d, data)?;
    let planted_rows: Vec<usize> = (0..n).filter(|&i| permutation[i] < m).collect();

    // Column overwrite for the copy_column adversary: responses first (they
    // are unaffected because the column is off-support), then the overwrite
    // on the adversarial rows.
    let b_clean = a.mul_vec(&x_dense)?;
    if matches!(spec.kind, AdversaryKind::CopyColumn) {
        let off_support: Vec<usize> =
            (0..d).filter(|j| !x_star.support().contains(j)).collect();
        if off_support.is_empty() {
            return Err(Error::Config("copy_column needs an off-support column".into()));
        }
        let j = off_support[rng.random_range(0..off_support.len())];
        extra.insert("planted_column".to_string(), j.to_string());
        for i in 0..n {
            if permutation[i] >= m {
                a.set_entry(i, j, b_clean[i]);
            }
        }
    }

    let mut xi = vec![0.0; n];
    let noise_scale = noise.map(|ns| ns.scale).unwrap_or(0.0);
    if noise_scale > 0.0 {
        for &i in &planted_rows {
            let sign: bool = rng.random();
            xi[i] = if sign { noise_scale } else { -noise_scale };
        }
    }
    let b: Vec<f64> = b_clean.iter().zip(&xi).map(|(bi, xii)| bi + xii).collect();

    let meta = InstanceMeta {
        generator: spec.kind.name().to_string(),
        seed,
        n,
        d,
        s,
        m,
        planted_rows: planted_rows.clone(),
        permutation,
        has_truth: true,
        noise_scale,
        extra,
    };
    Ok(MeasurementInstance {
        a,
        b,
        truth: Some(InstanceTruth { x_star, xi_star: xi, planted_rows, m }),
        meta,
    })
}

/// The duplicated-direction instance that stalls iterative hard
/// thresholding: `m` Gaussian rows followed by `(c_mult - 1) m` copies of a
/// Gaussian row `v` with `v_1 = 1`, signal `x* = e_1`, `s = 1`.
pub fn iht_breaker(m: usize, d: usize, c_mult: usize, seed: u64) -> Result<MeasurementInstance> {
    if c_mult < 2 {
        return Err(Error::Config(format!("c_mult ({c_mult}) must be >= 2")));
    }
    if d < 2 || m == 0 {
        return Err(Error::Config("iht_breaker needs m >= 1 and d >= 2".into()));
    }
    let n = c_mult * m;
    let mut rng = substream(seed, 0);
    let g = gaussian_matrix(m, d, &mut rng)?;
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    v[0] = 1.0;

    let mut data = Vec::with_capacity(n * d);
    for i in 0..m {
        data.extend_from_slice(g.row(i));
    }
    for _ in m..n {
        data.extend_from_slice(&v);
    }
    let a = DenseMatrix::from_rows_vec(n, d, data)?;
    let x_star = SparseSignal::new(d, vec![0], vec![1.0])?;
    let b = a.mul_vec(&x_star.to_dense())?;
    let planted_rows: Vec<usize> = (0..m).collect();
    let meta = InstanceMeta {
        generator: "iht_breaker".to_string(),
        seed,
        n,
        d,
        s: 1,
        m,
        planted_rows: planted_rows.clone(),
        permutation: (0..n).collect(),
        has_truth: true,
        noise_scale: 0.0,
        extra: BTreeMap::new(),
    };
    Ok(MeasurementInstance {
        a,
        b,
        truth: Some(InstanceTruth { x_star, xi_star: vec![0.0; n], planted_rows, m }),
        meta,
    })
}

/// The copied-column instance that derails orthogonal matching pursuit:
/// `3m` Gaussian rows, `x*` flat on the first `s` coordinates, and one
/// off-support column whose last `2m` entries are overwritten to equal `b`.
pub fn omp_breaker(m: usize, d: usize, s: usize, seed: u64) -> Result<MeasurementInstance> {
    if s < 10 {
        return Err(Error::Config(format!("omp_breaker needs s >= 10, got {s}")));
    }
    if d <= s || m == 0 {
        return Err(Error::Config("omp_breaker needs d > s and m >= 1".into()));
    }
    let n = 3 * m;
    let mut rng = substream(seed, 0);
    let mut a = gaussian_matrix(n, d, &mut rng)?;
    let value = 1.0 / (s as f64).sqrt();
    let x_star = SparseSignal::new(d, (0..s).collect(), vec![value; s])?;
    let b = a.mul_vec(&x_star.to_dense())?;

    let j = s + rng.random_range(0..d - s);
    for i in m..n {
        a.set_entry(i, j, b[i]);
    }

    let planted_rows: Vec<usize> = (0..m).collect();
    let mut extra = BTreeMap::new();
    extra.insert("planted_column".to_string(), j.to_string());
    let meta = InstanceMeta {
        generator: "omp_breaker".to_string(),
        seed,
        n,
        d,
        s,
        m,
        planted_rows: planted_rows.clone(),
        permutation: (0..n).collect(),
        has_truth: true,
        noise_scale: 0.0,
        extra,
    };
    Ok(MeasurementInstance {
        a,
        b,
        truth: Some(InstanceTruth { x_star, xi_star: vec![0.0; n], planted_rows, m }),
        meta,
    })
}

/// Which strategy a spot check used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RipCheckMode {
    /// Every `s`-support enumerated; a pass is a certificate.
    Exhaustive,
    /// Random `s`-sparse directions; a pass means "no violation found".
    Randomized,
}

/// Spot-check report. Only the exhaustive mode certifies; the randomized
/// mode is a falsifier.
#[derive(Debug, Clone, Serialize)]
pub struct RipReport {
    pub mode: RipCheckMode,
    pub passed: bool,
    pub trials: usize,
    /// A violating unit `s`-sparse direction, when one was found.
    pub witness: Option<Vec<f64>>,
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k.min(n));
    let mut acc = 1.0f64;
    for i in 0..k {
        acc *= (n - i) as f64 / (i + 1) as f64;
        if acc > 1e18 {
            return acc;
        }
    }
    acc
}

/// Checks the `(s, c)`-restricted isometry bounds `(1/c)||v||^2 <=
/// ||A v||^2 <= c||v||^2`. Exhausts all supports when there are at most
/// `10^5` of them; otherwise samples `trials` random unit `s`-sparse
/// directions.
pub fn rip_spot_check(
    a: &DenseMatrix,
    s: usize,
    c: f64,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RipReport> {
    let d = a.ncols();
    if s == 0 || s > d {
        return Err(Error::arg(format!("rip_spot_check: s ({s}) out of range")));
    }
    if !(c >= 1.0) {
        return Err(Error::arg(format!("rip constant c must be >= 1, got {c}")));
    }

    if binomial(d, s) <= 1e5 {
        let mut support = vec![0usize; s];
        let mut report = RipReport {
            mode: RipCheckMode::Exhaustive,
            passed: true,
            trials: 0,
            witness: None,
        };
        enumerate_supports(d, s, 0, 0, &mut support, &mut |sup| {
            report.trials += 1;
            if report.witness.is_some() {
                return;
            }
            if let Some(w) = support_violation(a, sup, c) {
                report.passed = false;
                report.witness = Some(w);
            }
        });
        return Ok(report);
    }

    let mut report = RipReport {
        mode: RipCheckMode::Randomized,
        passed: true,
        trials,
        witness: None,
    };
    for _ in 0..trials {
        let mut indices: Vec<usize> = (0..d).collect();
        indices.shuffle(rng);
        let mut v = vec![0.0; d];
        let mut norm_sq = 0.0;
        for &j in &indices[..s] {
            let x: f64 = rng.sample(StandardNormal);
            v[j] = x;
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        for x in v.iter_mut() {
            *x /= norm;
        }
        let image_sq: f64 = a.mul_vec(&v)?.iter().map(|y| y * y).sum();
        if image_sq < 1.0 / c - 1e-12 || image_sq > c + 1e-12 {
            report.passed = false;
            report.witness = Some(v);
            break;
        }
    }
    Ok(report)
}

fn enumerate_supports(
    d: usize,
    s: usize,
    depth: usize,
    start: usize,
    support: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if depth == s {
        visit(support);
        return;
    }
    for j in start..=d - (s - depth) {
        support[depth] = j;
        enumerate_supports(d, s, depth + 1, j + 1, support, visit);
    }
}

fn support_violation(a: &DenseMatrix, support: &[usize], c: f64) -> Option<Vec<f64>> {
    let s = support.len();
    // Gram matrix of the column submatrix.
    let mut gram = vec![0.0; s * s];
    for i in 0..a.nrows() {
        let row = a.row(i);
        for (p, &jp) in support.iter().enumerate() {
            for (q, &jq) in support.iter().enumerate().skip(p) {
                gram[p * s + q] += row[jp] * row[jq];
                if p != q {
                    gram[q * s + p] = gram[p * s + q];
                }
            }
        }
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen(&gram, s);
    let mut lo = (f64::INFINITY, 0);
    let mut hi = (f64::NEG_INFINITY, 0);
    for (k, &lam) in eigenvalues.iter().enumerate() {
        if lam < lo.0 {
            lo = (lam, k);
        }
        if lam > hi.0 {
            hi = (lam, k);
        }
    }
    let offender = if lo.0 < 1.0 / c - 1e-9 {
        Some(lo.1)
    } else if hi.0 > c + 1e-9 {
        Some(hi.1)
    } else {
        None
    }?;
    let mut witness = vec![0.0; a.ncols()];
    for (p, &jp) in support.iter().enumerate() {
        witness[jp] = eigenvectors[p * s + offender];
    }
    Some(witness)
}

/// Cyclic Jacobi eigensolver for small symmetric matrices; returns
/// (eigenvalues, column-major eigenvectors).
fn jacobi_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cos * akp - sin * akq;
                    a[k * n + q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cos * apk - sin * aqk;
                    a[q * n + k] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cos * vkp - sin * vkq;
                    v[k * n + q] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a[i * n + i]).collect();
    (eigenvalues, v)
}

/// Writes the two-file instance format: `<stem>.toml` metadata plus a
/// flat little-endian f64 payload `<stem>.bin` laid out as `A` row-major,
/// then `b`, then (when the truth is present) dense `x*` and `xi*`.
pub fn save_instance(instance: &MeasurementInstance, stem: &Path) -> Result<()> {
    let meta_text = toml::to_string_pretty(&instance.meta)
        .map_err(|e| Error::Format(format!("metadata serialization: {e}")))?;
    fs::write(stem.with_extension("toml"), meta_text)?;

    let meta = &instance.meta;
    let mut payload: Vec<u8> =
        Vec::with_capacity(8 * (meta.n * meta.d + meta.n + if meta.has_truth { meta.d + meta.n } else { 0 }));
    for value in instance.a.data() {
        payload.extend_from_slice(&value.to_le_bytes());
    }
    for value in &instance.b {
        payload.extend_from_slice(&value.to_le_bytes());
    }
    if meta.has_truth {
        let truth = instance.truth.as_ref().ok_or_else(|| {
            Error::Format("metadata declares truth but the instance has none".into())
        })?;
        for value in truth.x_star.to_dense() {
            payload.extend_from_slice(&value.to_le_bytes());
        }
        for value in &truth.xi_star {
            payload.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(stem.with_extension("bin"), payload)?;
    Ok(())
}

/// Reads an instance written by [`save_instance`]; the payload round-trips
/// bit-exactly.
pub fn load_instance(stem: &Path) -> Result<MeasurementInstance> {
    let meta_text = fs::read_to_string(stem.with_extension("toml"))?;
    let meta: InstanceMeta = toml::from_str(&meta_text)
        .map_err(|e| Error::Format(format!("metadata parse: {e}")))?;
    let payload = fs::read(stem.with_extension("bin"))?;
    let expected = meta.n * meta.d + meta.n + if meta.has_truth { meta.d + meta.n } else { 0 };
    if payload.len() != 8 * expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {}",
            payload.len(),
            8 * expected
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let a_data: Vec<f64> = values.by_ref().take(meta.n * meta.d).collect();
    let a = DenseMatrix::from_rows_vec(meta.n, meta.d, a_data)?;
    let b: Vec<f64> = values.by_ref().take(meta.n).collect();
    let truth = if meta.has_truth {
        let x_dense: Vec<f64> = values.by_ref().take(meta.d).collect();
        let xi: Vec<f64> = values.by_ref().take(meta.n).collect();
        Some(InstanceTruth {
            x_star: SparseSignal::from_dense(&x_dense)?,
            xi_star: xi,
            planted_rows: meta.planted_rows.clone(),
            m: meta.m,
        })
    } else {
        None
    };
    Ok(MeasurementInstance { a, b, truth, meta })
}
