//! Distributional scores between image sets: Jensen–Shannon divergence on
//! intensity histograms, RBF-kernel MMD on pooled image vectors, and
//! Fréchet distance over pluggable feature statistics.
//!
//! The Fréchet extractor is deliberately replaceable: scores from the
//! built-in one are only comparable to themselves, not to numbers computed
//! with pretrained feature networks. Relative orderings are meaningful;
//! absolute values are not.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::projection::RangeImage;
use crate::{Error, Result};

/// Counts over uniform bins spanning [0,1]; bins are half-open with the
/// last closed, so 1.0 lands in the top bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Param(format!(
                "a histogram needs at least 2 bins, got {}",
                counts.len()
            )));
        }
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::EmptyInput("histogram counts"));
        }
        Ok(Histogram { counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Frequencies, summing to 1.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// Pool the intensities of every nonzero pixel across all images. Zero
/// marks "no return" and carries no intensity information.
pub fn intensity_histogram(images: &[RangeImage], bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Param(format!("need at least 2 bins, got {bins}")));
    }
    let mut counts = vec![0u64; bins];
    let mut seen = 0u64;
    for img in images {
        for &v in img.data.iter() {
            if v == 0.0 {
                continue;
            }
            let idx = ((v as f64 * bins as f64) as usize).min(bins - 1);
            counts[idx] += 1;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::EmptyInput("no nonzero pixels"));
    }
    Ok(Histogram { counts })
}

/// Jensen–Shannon divergence in nats: ½KL(p‖m) + ½KL(q‖m) with
/// m = ½(p+q). Bounded by ln 2; zero-probability bins contribute zero.
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bins() != q.bins() {
        return Err(Error::Shape(format!(
            "histogram sizes differ: {} vs {}",
            p.bins(),
            q.bins()
        )));
    }
    let pn = p.normalized();
    let qn = q.normalized();
    let mut acc = 0.0;
    for (&pi, &qi) in pn.iter().zip(&qn) {
        let mi = 0.5 * (pi + qi);
        if pi > 0.0 {
            acc += 0.5 * pi * (pi / mi).ln();
        }
        if qi > 0.0 {
            acc += 0.5 * qi * (qi / mi).ln();
        }
    }
    Ok(acc)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_mmd_inputs(x: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> Result<()> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::Param(format!("bandwidth must be positive, got {sigma}")));
    }
    Ok(())
}

/// Unbiased squared-MMD estimate with k(a,b) = exp(−‖a−b‖²/(2σ²)); rows
/// are samples.
///
/// Equal-size inputs use the paired U-statistic that also excludes the
/// diagonal cross terms, which makes mmd(X, X) exactly zero; unequal sizes
/// use the standard three-term unbiased form.
pub fn mmd_rbf(x: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> Result<f64> {
    check_mmd_inputs(x, y, sigma)?;
    let (m, n) = (x.nrows(), y.nrows());
    if m < 2 || n < 2 {
        return Err(Error::InsufficientSamples { have: m.min(n), need: 2 });
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| (-gamma * sq_dist(a, b)).exp();

    if m == n {
        let mut acc = 0.0;
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    continue;
                }
                acc += k(x.row(i), x.row(j)) + k(y.row(i), y.row(j))
                    - k(x.row(i), y.row(j))
                    - k(y.row(i), x.row(j));
            }
        }
        return Ok(acc / (m * (m - 1)) as f64);
    }

    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                xx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                yy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += k(x.row(i), y.row(j));
        }
    }
    Ok(xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64)
}

/// Biased squared-MMD (V-statistic, diagonals included). Defined down to
/// singleton sets; never negative.
pub fn mmd_rbf_biased(x: &Array2<f64>, y: &Array2<f64>, sigma: f64) -> Result<f64> {
    check_mmd_inputs(x, y, sigma)?;
    let (m, n) = (x.nrows(), y.nrows());
    if m == 0 || n == 0 {
        return Err(Error::EmptyInput("mmd sample set"));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| (-gamma * sq_dist(a, b)).exp();
    let mut xx = 0.0;
    for i in 0..m {
        for j in 0..m {
            xx += k(x.row(i), x.row(j));
        }
    }
    let mut yy = 0.0;
    for i in 0..n {
        for j in 0..n {
            yy += k(y.row(i), y.row(j));
        }
    }
    let mut xy = 0.0;
    for i in 0..m {
        for j in 0..n {
            xy += k(x.row(i), y.row(j));
        }
    }
    Ok(xx / (m * m) as f64 + yy / (n * n) as f64 - 2.0 * xy / (m * n) as f64)
}

/// Median pairwise Euclidean distance of the pooled sample — the usual
/// automatic bandwidth. Falls back to 1.0 when every point coincides
/// (any bandwidth scores identical sets as zero anyway).
pub fn median_heuristic_bandwidth(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "sample dimensions differ: {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let total = x.nrows() + y.nrows();
    if total < 2 {
        return Err(Error::InsufficientSamples { have: total, need: 2 });
    }
    let row = |i: usize| if i < x.nrows() { x.row(i) } else { y.row(i - x.nrows()) };
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in (i + 1)..total {
            dists.push(sq_dist(row(i), row(j)).sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// First and second moments of a feature sample: mean vector and the
/// (n−1)-normalized covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl FeatureStats {
    /// Rows are feature vectors; needs at least two for a covariance.
    pub fn from_rows(rows: &Array2<f64>) -> Result<Self> {
        let n = rows.nrows();
        if n < 2 {
            return Err(Error::InsufficientSamples { have: n, need: 2 });
        }
        let f = rows.ncols();
        let mean = rows.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let mut cov = Array2::<f64>::zeros((f, f));
        for row in rows.rows() {
            let d: Vec<f64> = row.iter().zip(mean.iter()).map(|(r, m)| r - m).collect();
            for i in 0..f {
                for j in i..f {
                    cov[[i, j]] += d[i] * d[j];
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..f {
            for j in i..f {
                cov[[i, j]] /= denom;
                cov[[j, i]] = cov[[i, j]];
            }
        }
        Ok(FeatureStats { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

const EIG_TOLERANCE: f64 = 1e-6;

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Eigendecomposition-based PSD square root. Eigenvalues below −tolerance
/// fail; small negatives inside it clamp to zero.
fn psd_sqrt(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sym = SymmetricEigen::new(m.clone());
    let mut vals = sym.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -EIG_TOLERANCE {
            return Err(Error::Numerical {
                step: 0,
                what: format!("{context} has eigenvalue {v}, beyond the PSD tolerance"),
            });
        }
        *v = v.max(0.0).sqrt();
    }
    let u = &sym.eigenvectors;
    Ok(u * DMatrix::from_diagonal(&vals) * u.transpose())
}

/// ‖μ_a−μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2}) — the
/// distance between Gaussians with these moments.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.dim() != (a.dim(), a.dim()) || b.cov.dim() != (b.dim(), b.dim())
    {
        return Err(Error::Shape(format!(
            "feature stats disagree: {} vs {} dims",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();

    let sa = psd_sqrt(&to_dmatrix(&a.cov), "first covariance")?;
    let sb = to_dmatrix(&b.cov);
    let mut inner = &sa * sb * &sa;
    // symmetrize before the second decomposition; the product picks up
    // asymmetry at rounding level
    let innert = inner.transpose();
    inner = (inner + innert) * 0.5;
    let sym = SymmetricEigen::new(inner);
    let mut cross_trace = 0.0;
    for &v in sym.eigenvalues.iter() {
        if v < -EIG_TOLERANCE {
            return Err(Error::Numerical {
                step: 0,
                what: format!("covariance product has eigenvalue {v}, beyond the PSD tolerance"),
            });
        }
        cross_trace += v.max(0.0).sqrt();
    }
    let tr_a: f64 = (0..a.dim()).map(|i| a.cov[[i, i]]).sum();
    let tr_b: f64 = (0..b.dim()).map(|i| b.cov[[i, i]]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * cross_trace).max(0.0))
}

/// Maps one image to a fixed-length feature vector for Fréchet scoring.
pub trait FeatureExtractor {
    /// Stable identifier recorded in reports.
    fn id(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn features(&self, img: &RangeImage) -> Vec<f64>;
}

/// Built-in deterministic extractor: per-patch mean and variance on 1×1,
/// 2×2, and 4×4 grids (42 values) plus an 8-bin gradient-magnitude
/// histogram (gradients of [0,1] images cannot exceed √2), 50 dims total.
pub struct PatchStatsExtractor;

const GRAD_BINS: usize = 8;

impl FeatureExtractor for PatchStatsExtractor {
    fn id(&self) -> &'static str {
        "patch-stats-v1"
    }

    fn dim(&self) -> usize {
        (1 + 4 + 16) * 2 + GRAD_BINS
    }

    fn features(&self, img: &RangeImage) -> Vec<f64> {
        let (h, w) = img.data.dim();
        let mut out = Vec::with_capacity(self.dim());
        for level in [1usize, 2, 4] {
            for pi in 0..level {
                for pj in 0..level {
                    let r0 = pi * h / level;
                    let r1 = ((pi + 1) * h / level).max(r0 + 1).min(h);
                    let c0 = pj * w / level;
                    let c1 = ((pj + 1) * w / level).max(c0 + 1).min(w);
                    let mut sum = 0.0;
                    let mut sum2 = 0.0;
                    let mut n = 0.0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            let v = img.data[[r, c]] as f64;
                            sum += v;
                            sum2 += v * v;
                            n += 1.0;
                        }
                    }
                    let mean = if n > 0.0 { sum / n } else { 0.0 };
                    let var = if n > 0.0 { (sum2 / n - mean * mean).max(0.0) } else { 0.0 };
                    out.push(mean);
                    out.push(var);
                }
            }
        }
        let mut hist = [0u64; GRAD_BINS];
        let mut total = 0u64;
        let max_mag = std::f64::consts::SQRT_2;
        for r in 0..h.saturating_sub(1) {
            for c in 0..w.saturating_sub(1) {
                let v = img.data[[r, c]] as f64;
                let gx = img.data[[r, c + 1]] as f64 - v;
                let gy = img.data[[r + 1, c]] as f64 - v;
                let mag = (gx * gx + gy * gy).sqrt();
                let idx = ((mag / max_mag * GRAD_BINS as f64) as usize).min(GRAD_BINS - 1);
                hist[idx] += 1;
                total += 1;
            }
        }
        for c in hist {
            out.push(if total > 0 { c as f64 / total as f64 } else { 0.0 });
        }
        out
    }
}

/// Average-pool an image down to at most `target`×`target` and flatten.
/// Blocks split as evenly as integer arithmetic allows.
pub fn pool_to_vector(img: &RangeImage, target: usize) -> Vec<f64> {
    let (h, w) = img.data.dim();
    let oh = h.min(target).max(1);
    let ow = w.min(target).max(1);
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let r0 = i * h / oh;
        let r1 = ((i + 1) * h / oh).max(r0 + 1);
        for j in 0..ow {
            let c0 = j * w / ow;
            let c1 = ((j + 1) * w / ow).max(c0 + 1);
            let mut sum = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    sum += img.data[[r, c]] as f64;
                }
            }
            out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub bins: usize,
    /// Images are average-pooled to at most pool×pool before MMD.
    pub pool: usize,
    /// Fixed RBF bandwidth; None selects the median heuristic.
    pub bandwidth: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { bins: 256, pool: 64, bandwidth: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub jsd: f64,
    pub mmd: f64,
    pub frechet: f64,
    pub n_generated: usize,
    pub n_reference: usize,
    pub extractor_id: String,
    pub config: MetricConfig,
}

/// Score a generated set against a reference set: JSD on intensity
/// histograms, MMD on pooled image vectors, Fréchet on extractor features.
pub fn evaluate(
    generated: &[RangeImage],
    reference: &[RangeImage],
    extractor: &dyn FeatureExtractor,
    cfg: &MetricConfig,
) -> Result<MetricReport> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("generated images"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference images"));
    }
    let hg = intensity_histogram(generated, cfg.bins)?;
    let hr = intensity_histogram(reference, cfg.bins)?;
    let jsd_val = jsd(&hg, &hr)?;

    let rows = |imgs: &[RangeImage]| -> Result<Array2<f64>> {
        let vecs: Vec<Vec<f64>> = imgs.iter().map(|im| pool_to_vector(im, cfg.pool)).collect();
        let d = vecs[0].len();
        if vecs.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("images pool to different lengths".into()));
        }
        let flat: Vec<f64> = vecs.into_iter().flatten().collect();
        Ok(Array2::from_shape_vec((imgs.len(), d), flat).expect("len checked"))
    };
    let gx = rows(generated)?;
    let rx = rows(reference)?;
    let sigma = match cfg.bandwidth {
        Some(s) => s,
        None => median_heuristic_bandwidth(&gx, &rx)?,
    };
    let mmd_val = mmd_rbf(&gx, &rx, sigma)?;

    let feats = |imgs: &[RangeImage]| -> Result<Array2<f64>> {
        let d = extractor.dim();
        let mut rows = Array2::zeros((imgs.len(), d));
        for (i, im) in imgs.iter().enumerate() {
            let f = extractor.features(im);
            if f.len() != d {
                return Err(Error::Shape(format!(
                    "extractor {} returned {} values, reports dim {d}",
                    extractor.id(),
                    f.len()
                )));
            }
            for (j, v) in f.into_iter().enumerate() {
                rows[[i, j]] = v;
            }
        }
        Ok(rows)
    };
    let fg = FeatureStats::from_rows(&feats(generated)?)?;
    let fr = FeatureStats::from_rows(&feats(reference)?)?;
    let frechet_val = frechet_distance(&fg, &fr)?;

    Ok(MetricReport {
        jsd: jsd_val,
        mmd: mmd_val,
        frechet: frechet_val,
        n_generated: generated.len(),
        n_reference: reference.len(),
        extractor_id: extractor.id().to_string(),
        config: *cfg,
    })
}
