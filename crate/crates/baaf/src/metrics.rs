//! Segmentation evaluation: pixel-overlap metrics, boundary-distance
//! metrics, threshold-sweep curves with AUC, and Welch's t-test.
//!
//! Conventions (stated once, used everywhere):
//! - Binarization threshold 0.5, ties (= 0.5) count as foreground.
//! - A 0/0 area ratio is 1 when both masks are empty of the relevant
//!   class and 0 otherwise.
//! - Boundary pixels are foreground pixels 4-adjacent to background or to
//!   the image edge. Boundary metrics on an empty set are undefined and
//!   carry a reason tag; aggregates exclude them and report the count.
//! - Reported std is the sample standard deviation (n−1), 0 when n ≤ 1.

use crate::datagen::SegSample;
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::tensor::{Elem, Tensor};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// Pixelwise counts over two binary masks of equal shape.
pub fn confusion<T: Elem>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape_mismatch("confusion", pred.shape(), gt.shape()));
    }
    let mut counts = ConfusionCounts {
        true_pos: 0,
        false_pos: 0,
        true_neg: 0,
        false_neg: 0,
    };
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let pb = binary_value(p, "prediction")?;
        let gb = binary_value(g, "ground truth")?;
        match (pb, gb) {
            (true, true) => counts.true_pos += 1,
            (true, false) => counts.false_pos += 1,
            (false, false) => counts.true_neg += 1,
            (false, true) => counts.false_neg += 1,
        }
    }
    Ok(counts)
}

fn binary_value<T: Elem>(v: T, what: &str) -> Result<bool> {
    if v == T::zero() {
        Ok(false)
    } else if v == T::one() {
        Ok(true)
    } else {
        Err(Error::invalid(format!("{what} mask is not binary (saw {v})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
}

/// Overlap ratios with the 0/0 convention documented above.
pub fn area_metrics(c: &ConfusionCounts) -> AreaMetrics {
    let (tp, fp, tn, fnn) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.true_neg as f64,
        c.false_neg as f64,
    );
    let ratio = |num: f64, den: f64, both_empty: bool| {
        if den > 0.0 {
            num / den
        } else if both_empty {
            1.0
        } else {
            0.0
        }
    };
    AreaMetrics {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fnn, true),
        jaccard: ratio(tp, tp + fp + fnn, true),
        // denominator 0 means the prediction is empty; 1 only if the
        // reference is empty too
        precision: ratio(tp, tp + fp, fnn == 0.0),
        recall: ratio(tp, tp + fnn, fp == 0.0),
        specificity: ratio(tn, tn + fp, fnn == 0.0),
    }
}

/// Foreground pixels 4-adjacent to background or to the image edge,
/// in row-major order.
pub fn extract_boundary<T: Elem>(mask: &Tensor<T>) -> Result<Vec<(usize, usize)>> {
    let s = mask.shape();
    let (h, w) = match s.len() {
        3 if s[0] == 1 => (s[1], s[2]),
        2 => (s[0], s[1]),
        _ => {
            return Err(Error::invalid(format!(
                "extract_boundary expects 1×H×W or H×W, got {s:?}"
            )))
        }
    };
    let at = |y: usize, x: usize| mask.data()[y * w + x] != T::zero();
    let mut boundary = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !binary_value(mask.data()[y * w + x], "mask")? {
                continue;
            }
            let on_edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let touches_bg = (y > 0 && !at(y - 1, x))
                || (y + 1 < h && !at(y + 1, x))
                || (x > 0 && !at(y, x - 1))
                || (x + 1 < w && !at(y, x + 1));
            if on_edge || touches_bg {
                boundary.push((y, x));
            }
        }
    }
    Ok(boundary)
}

/// Why a boundary metric could not be computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Undefined {
    FirstEmpty,
    SecondEmpty,
    BothEmpty,
}

fn check_nonempty(a: &[(usize, usize)], b: &[(usize, usize)]) -> std::result::Result<(), Undefined> {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Err(Undefined::BothEmpty),
        (true, false) => Err(Undefined::FirstEmpty),
        (false, true) => Err(Undefined::SecondEmpty),
        (false, false) => Ok(()),
    }
}

fn min_dist(p: (usize, usize), set: &[(usize, usize)]) -> f64 {
    let mut best = f64::INFINITY;
    for &(y, x) in set {
        let dy = p.0 as f64 - y as f64;
        let dx = p.1 as f64 - x as f64;
        let d2 = dy * dy + dx * dx;
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// Symmetric Hausdorff distance in pixels.
pub fn hausdorff(
    a: &[(usize, usize)],
    b: &[(usize, usize)],
) -> std::result::Result<f64, Undefined> {
    check_nonempty(a, b)?;
    let d_ab = a.iter().map(|&p| min_dist(p, b)).fold(0.0, f64::max);
    let d_ba = b.iter().map(|&q| min_dist(q, a)).fold(0.0, f64::max);
    Ok(d_ab.max(d_ba))
}

/// Average symmetric surface distance: pooled mean of all directed
/// nearest distances.
pub fn assd(a: &[(usize, usize)], b: &[(usize, usize)]) -> std::result::Result<f64, Undefined> {
    check_nonempty(a, b)?;
    let sum_ab: f64 = a.iter().map(|&p| min_dist(p, b)).sum();
    let sum_ba: f64 = b.iter().map(|&q| min_dist(q, a)).sum();
    Ok((sum_ab + sum_ba) / (a.len() + b.len()) as f64)
}

/// Average boundary distance: mean of the two directed average
/// distances. Coincides with ASSD only when |a| = |b|.
pub fn abd(a: &[(usize, usize)], b: &[(usize, usize)]) -> std::result::Result<f64, Undefined> {
    check_nonempty(a, b)?;
    let mean_ab: f64 = a.iter().map(|&p| min_dist(p, b)).sum::<f64>() / a.len() as f64;
    let mean_ba: f64 = b.iter().map(|&q| min_dist(q, a)).sum::<f64>() / b.len() as f64;
    Ok(0.5 * (mean_ab + mean_ba))
}

pub const CURVE_THRESHOLDS: usize = 256;

#[derive(Debug, Clone)]
pub struct Curves {
    pub thresholds: Vec<f64>,
    /// (recall, precision) per threshold.
    pub pr_points: Vec<(f64, f64)>,
    /// (fpr, tpr) per threshold, endpoints (0,0) and (1,1) appended.
    pub roc_points: Vec<(f64, f64)>,
    pub auc_roc: f64,
    pub auc_pr: f64,
}

/// Pool every pixel of the dataset and sweep 256 evenly spaced
/// thresholds in [0,1]. A pixel counts as predicted foreground when
/// p ≥ threshold. For the PR curve an empty prediction takes the limit
/// convention precision = 1.
pub fn curves<T: Elem>(preds: &[Tensor<T>], gts: &[Tensor<T>]) -> Result<Curves> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "curves need matching nonempty lists, got {} predictions and {} masks",
            preds.len(),
            gts.len()
        )));
    }
    let n_thresh = CURVE_THRESHOLDS;
    // bin pixels by the largest threshold index at or below their score:
    // p ≥ i/(n−1) ⟺ i ≤ floor(p·(n−1))
    let mut pos_bins = vec![0u64; n_thresh];
    let mut neg_bins = vec![0u64; n_thresh];
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() {
            return Err(Error::shape_mismatch("curves", p.shape(), g.shape()));
        }
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            let score = pv.to_f64().unwrap().clamp(0.0, 1.0);
            let bin = ((score * (n_thresh - 1) as f64).floor() as usize).min(n_thresh - 1);
            if binary_value(gv, "curve ground truth")? {
                pos_bins[bin] += 1;
            } else {
                neg_bins[bin] += 1;
            }
        }
    }
    let total_pos: u64 = pos_bins.iter().sum();
    let total_neg: u64 = neg_bins.iter().sum();
    if total_pos == 0 || total_neg == 0 {
        return Err(Error::invalid(
            "curves need both foreground and background pixels in the pooled dataset",
        ));
    }

    let mut thresholds = Vec::with_capacity(n_thresh);
    let mut pr_points = Vec::with_capacity(n_thresh);
    let mut roc_points = Vec::with_capacity(n_thresh + 2);
    let mut tp = 0u64;
    let mut fp = 0u64;
    // accumulate suffix sums from the highest threshold down
    let mut per_threshold = Vec::with_capacity(n_thresh);
    for i in (0..n_thresh).rev() {
        tp += pos_bins[i];
        fp += neg_bins[i];
        per_threshold.push((i, tp, fp));
    }
    per_threshold.reverse();
    for (i, tp, fp) in per_threshold {
        let t = i as f64 / (n_thresh - 1) as f64;
        let recall = tp as f64 / total_pos as f64;
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            1.0
        };
        let fpr = fp as f64 / total_neg as f64;
        thresholds.push(t);
        pr_points.push((recall, precision));
        roc_points.push((fpr, recall));
    }
    roc_points.push((0.0, 0.0));
    roc_points.push((1.0, 1.0));
    let mut roc_sorted = roc_points.clone();
    roc_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let auc_roc = trapezoid(&roc_sorted);

    let mut pr_sorted = pr_points.clone();
    pr_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let auc_pr = trapezoid(&pr_sorted);

    Ok(Curves {
        thresholds,
        pr_points,
        roc_points,
        auc_roc,
        auc_pr,
    })
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
}

/// Welch's unequal-variance t-test. Degenerate zero-variance pairs take
/// the convention p = 1 for equal means and p = 0 otherwise.
pub fn welch_ttest(x: &[f64], y: &[f64]) -> Result<WelchResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::invalid(format!(
            "welch_ttest needs ≥ 2 samples per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], mu: f64| v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0);
    let (mx, my) = (mean(x), mean(y));
    let (vx, vy) = (var(x, mx), var(y, my));
    if vx == 0.0 && vy == 0.0 {
        return Ok(if mx == my {
            WelchResult {
                t: 0.0,
                dof: f64::NAN,
                p: 1.0,
            }
        } else {
            WelchResult {
                t: if mx > my { f64::INFINITY } else { f64::NEG_INFINITY },
                dof: f64::NAN,
                p: 0.0,
            }
        });
    }
    let se2 = vx / n + vy / m;
    let t = (mx - my) / se2.sqrt();
    let dof = se2 * se2 / ((vx / n).powi(2) / (n - 1.0) + (vy / m).powi(2) / (m - 1.0));
    // two-sided p from the regularized incomplete beta function
    let p = incomplete_beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    Ok(WelchResult { t, dof, p })
}

/// ln Γ(x) by the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.99999999999980993;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + i as f64 + 1.0);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
fn incomplete_beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - incomplete_beta_reg(b, a, 1.0 - x)
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone)]
pub struct ImageMetrics {
    pub id: String,
    pub area: AreaMetrics,
    pub hd: std::result::Result<f64, Undefined>,
    pub assd: std::result::Result<f64, Undefined>,
    pub abd: std::result::Result<f64, Undefined>,
}

impl ImageMetrics {
    pub fn boundary_defined(&self) -> bool {
        self.hd.is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub fold: String,
    pub per_image: Vec<ImageMetrics>,
    /// metric → (mean, sample std).
    pub summary: BTreeMap<String, (f64, f64)>,
    /// Images whose boundary metrics were undefined and excluded.
    pub boundary_exclusions: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var =
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() as f64 - 1.0);
    (mean, var.sqrt())
}

/// Score one predicted mask against its reference.
pub fn score_pair<T: Elem>(id: &str, pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ImageMetrics> {
    let counts = confusion(pred, gt)?;
    let area = area_metrics(&counts);
    let pred_boundary = extract_boundary(pred)?;
    let gt_boundary = extract_boundary(gt)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        area,
        hd: hausdorff(&pred_boundary, &gt_boundary),
        assd: assd(&pred_boundary, &gt_boundary),
        abd: abd(&pred_boundary, &gt_boundary),
    })
}

/// Aggregate per-image rows into mean ± std per metric; undefined
/// boundary rows are excluded from the boundary aggregates.
pub fn summarize(fold: &str, per_image: Vec<ImageMetrics>) -> MetricReport {
    let mut summary = BTreeMap::new();
    let collect = |f: &dyn Fn(&ImageMetrics) -> f64| -> Vec<f64> {
        per_image.iter().map(f).collect()
    };
    summary.insert("dice".into(), mean_std(&collect(&|m| m.area.dice)));
    summary.insert("jaccard".into(), mean_std(&collect(&|m| m.area.jaccard)));
    summary.insert(
        "precision".into(),
        mean_std(&collect(&|m| m.area.precision)),
    );
    summary.insert("recall".into(), mean_std(&collect(&|m| m.area.recall)));
    summary.insert(
        "specificity".into(),
        mean_std(&collect(&|m| m.area.specificity)),
    );
    let defined: Vec<&ImageMetrics> = per_image.iter().filter(|m| m.boundary_defined()).collect();
    let boundary_exclusions = per_image.len() - defined.len();
    if !defined.is_empty() {
        let hd: Vec<f64> = defined.iter().map(|m| m.hd.unwrap()).collect();
        let as_: Vec<f64> = defined.iter().map(|m| m.assd.unwrap()).collect();
        let ab: Vec<f64> = defined.iter().map(|m| m.abd.unwrap()).collect();
        summary.insert("hd".into(), mean_std(&hd));
        summary.insert("assd".into(), mean_std(&as_));
        summary.insert("abd".into(), mean_std(&ab));
    }
    MetricReport {
        fold: fold.to_string(),
        per_image,
        summary,
        boundary_exclusions,
    }
}

/// Run the model over the samples (eval mode), binarize at `threshold`
/// (≥ goes to foreground) and aggregate.
pub fn evaluate<T: Elem>(
    model: &mut Model<T>,
    samples: &[SegSample<T>],
    threshold: f64,
    batch: usize,
    fold: &str,
) -> Result<MetricReport> {
    let probs = predict_probs(model, samples, batch)?;
    let thr = crate::tensor::c::<T>(threshold);
    let mut per_image = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&probs) {
        let pred = p.map(|v| if v >= thr { T::one() } else { T::zero() });
        per_image.push(score_pair(&s.id, &pred, &s.mask)?);
    }
    Ok(summarize(fold, per_image))
}

/// Probability maps for each sample, batched eval-mode forwards.
pub fn predict_probs<T: Elem>(
    model: &mut Model<T>,
    samples: &[SegSample<T>],
    batch: usize,
) -> Result<Vec<Tensor<T>>> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    let batch = batch.max(1);
    let (h, w) = model.spec.input_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch) {
        let mut data = Vec::with_capacity(chunk.len() * h * w);
        for s in chunk {
            if s.image.shape() != [1, h, w] {
                return Err(Error::shape_mismatch(
                    &format!("sample {}", s.id),
                    s.image.shape(),
                    &[1, h, w],
                ));
            }
            data.extend_from_slice(s.image.data());
        }
        let xb = Tensor::from_vec(vec![chunk.len(), 1, h, w], data)?;
        let yb = model.forward(&xb, Mode::Eval)?;
        for (i, _) in chunk.iter().enumerate() {
            let plane = &yb.data()[i * h * w..(i + 1) * h * w];
            out.push(Tensor::from_vec(vec![1, h, w], plane.to_vec())?);
        }
    }
    Ok(out)
}

fn fmt_opt(v: &std::result::Result<f64, Undefined>) -> String {
    match v {
        Ok(x) => format!("{x:.6}"),
        Err(_) => String::new(),
    }
}

/// One row per image plus `__mean__`/`__std__` summary rows.
pub fn write_report_csv(report: &MetricReport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "id,dice,jaccard,precision,recall,specificity,hd,assd,abd,boundary_defined"
    )?;
    for m in &report.per_image {
        writeln!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            m.id,
            m.area.dice,
            m.area.jaccard,
            m.area.precision,
            m.area.recall,
            m.area.specificity,
            fmt_opt(&m.hd),
            fmt_opt(&m.assd),
            fmt_opt(&m.abd),
            m.boundary_defined()
        )?;
    }
    for (label, pick) in [("__mean__", 0usize), ("__std__", 1usize)] {
        let get = |k: &str| -> String {
            report
                .summary
                .get(k)
                .map(|ms| format!("{:.6}", if pick == 0 { ms.0 } else { ms.1 }))
                .unwrap_or_default()
        };
        writeln!(
            f,
            "{label},{},{},{},{},{},{},{},{},",
            get("dice"),
            get("jaccard"),
            get("precision"),
            get("recall"),
            get("specificity"),
            get("hd"),
            get("assd"),
            get("abd"),
        )?;
    }
    Ok(())
}

pub fn write_curves_csv(curves: &Curves, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "threshold,precision,recall,tpr,fpr")?;
    for (i, &t) in curves.thresholds.iter().enumerate() {
        let (recall, precision) = curves.pr_points[i];
        let (fpr, tpr) = curves.roc_points[i];
        writeln!(f, "{t:.6},{precision:.6},{recall:.6},{tpr:.6},{fpr:.6}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask<T: Elem>(h: usize, w: usize, fg: &[(usize, usize)]) -> Tensor<T> {
        let mut t = Tensor::zeros(&[h, w]);
        for &(y, x) in fg {
            t.data_mut()[y * w + x] = T::one();
        }
        t
    }

    #[test]
    fn confusion_identity_and_complement() {
        let gt: Tensor<f64> = mask(10, 10, &(0..10).map(|i| (0, i)).collect::<Vec<_>>());
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.true_pos, c.true_neg, c.false_pos, c.false_neg), (10, 90, 0, 0));

        let inv = gt.map(|v| 1.0 - v);
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.true_pos, c.true_neg), (0, 0));
    }

    #[test]
    fn confusion_all_foreground_prediction() {
        let gt: Tensor<f64> = mask(4, 4, &[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let pred = Tensor::full(&[4, 4], 1.0);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(
            (c.true_pos, c.false_pos, c.false_neg, c.true_neg),
            (4, 12, 0, 0)
        );
    }

    #[test]
    fn confusion_rejects_non_binary() {
        let a = Tensor::<f64>::full(&[2, 2], 0.5);
        let b = Tensor::<f64>::zeros(&[2, 2]);
        assert!(confusion(&a, &b).is_err());
    }

    #[test]
    fn area_metric_arithmetic() {
        let c = ConfusionCounts {
            true_pos: 2,
            false_pos: 2,
            true_neg: 0,
            false_neg: 2,
        };
        let m = area_metrics(&c);
        assert!((m.dice - 0.5).abs() < 1e-12);
        assert!((m.jaccard - 1.0 / 3.0).abs() < 1e-12);

        // identical nonempty masks
        let c = ConfusionCounts {
            true_pos: 5,
            false_pos: 0,
            true_neg: 11,
            false_neg: 0,
        };
        let m = area_metrics(&c);
        for v in [m.dice, m.jaccard, m.precision, m.recall, m.specificity] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_mask_conventions() {
        // both empty of foreground
        let c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            true_neg: 9,
            false_neg: 0,
        };
        let m = area_metrics(&c);
        assert_eq!((m.dice, m.jaccard, m.precision, m.recall), (1.0, 1.0, 1.0, 1.0));

        // prediction empty, reference not
        let c = ConfusionCounts {
            true_pos: 0,
            false_pos: 0,
            true_neg: 5,
            false_neg: 4,
        };
        let m = area_metrics(&c);
        assert_eq!(m.dice, 0.0);
        assert_eq!(m.precision, 0.0);
    }

    #[test]
    fn boundary_of_solid_square() {
        // 5×5 solid square inside a 9×9 image has a 16-pixel perimeter
        let fg: Vec<(usize, usize)> = (2..7)
            .flat_map(|y| (2..7).map(move |x| (y, x)))
            .collect();
        let m: Tensor<f64> = mask(9, 9, &fg);
        let b = extract_boundary(&m).unwrap();
        assert_eq!(b.len(), 16);
    }

    #[test]
    fn boundary_edge_and_degenerate_cases() {
        // full-image foreground: boundary is the border ring
        let full = Tensor::<f64>::full(&[4, 4], 1.0);
        let b = extract_boundary(&full).unwrap();
        assert_eq!(b.len(), 12);

        let single: Tensor<f64> = mask(5, 5, &[(2, 3)]);
        assert_eq!(extract_boundary(&single).unwrap(), vec![(2, 3)]);

        let empty = Tensor::<f64>::zeros(&[5, 5]);
        assert!(extract_boundary(&empty).unwrap().is_empty());
    }

    #[test]
    fn distances_on_singletons() {
        let a = vec![(0usize, 0usize)];
        let b = vec![(3usize, 4usize)];
        assert_eq!(hausdorff(&a, &b).unwrap(), 5.0);
        assert_eq!(assd(&a, &b).unwrap(), 5.0);
        assert_eq!(abd(&a, &b).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(assd(&b, &b).unwrap(), 0.0);
        assert_eq!(abd(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn distance_undefined_tags() {
        let a = vec![(0usize, 0usize)];
        let empty: Vec<(usize, usize)> = vec![];
        assert_eq!(hausdorff(&empty, &a), Err(Undefined::FirstEmpty));
        assert_eq!(assd(&a, &empty), Err(Undefined::SecondEmpty));
        assert_eq!(abd(&empty, &empty), Err(Undefined::BothEmpty));
    }

    #[test]
    fn abd_equals_assd_at_equal_sizes() {
        let a = vec![(0, 0), (0, 3), (5, 1)];
        let b = vec![(1, 1), (2, 2), (4, 4)];
        let d1 = assd(&a, &b).unwrap();
        let d2 = abd(&a, &b).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_unit_auc() {
        let pred = Tensor::<f64>::from_vec(
            vec![1, 2, 2],
            vec![0.9, 0.8, 0.1, 0.2],
        )
        .unwrap();
        let gt = Tensor::<f64>::from_vec(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let c = curves(&[pred], &[gt]).unwrap();
        assert!((c.auc_roc - 1.0).abs() < 1e-9, "auc {}", c.auc_roc);
    }

    #[test]
    fn welch_identical_samples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = welch_ttest(&x, &x).unwrap();
        assert_eq!(r.t, 0.0);
        assert!((r.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_signs_and_symmetry() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [3.0, 4.0, 5.0, 6.0, 7.0];
        let a = welch_ttest(&x, &y).unwrap();
        let b = welch_ttest(&y, &x).unwrap();
        assert!((a.t + b.t).abs() < 1e-12);
        assert!((a.p - b.p).abs() < 1e-12);
        assert!(a.t < 0.0);
    }

    #[test]
    fn welch_zero_variance_conventions() {
        let x = [2.0, 2.0, 2.0];
        let y = [2.0, 2.0];
        assert_eq!(welch_ttest(&x, &y).unwrap().p, 1.0);
        let z = [3.0, 3.0];
        assert_eq!(welch_ttest(&x, &z).unwrap().p, 0.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-10);
    }

    #[test]
    fn summary_means_match_recomputation() {
        let rows = vec![
            ImageMetrics {
                id: "a".into(),
                area: AreaMetrics {
                    dice: 0.8,
                    jaccard: 0.7,
                    precision: 0.9,
                    recall: 0.75,
                    specificity: 0.99,
                },
                hd: Ok(3.0),
                assd: Ok(1.0),
                abd: Ok(1.5),
            },
            ImageMetrics {
                id: "b".into(),
                area: AreaMetrics {
                    dice: 0.6,
                    jaccard: 0.5,
                    precision: 0.7,
                    recall: 0.55,
                    specificity: 0.97,
                },
                hd: Err(Undefined::FirstEmpty),
                assd: Err(Undefined::FirstEmpty),
                abd: Err(Undefined::FirstEmpty),
            },
        ];
        let report = summarize("fold0", rows);
        assert!((report.summary["dice"].0 - 0.7).abs() < 1e-12);
        assert_eq!(report.boundary_exclusions, 1);
        // boundary aggregates use only the defined row
        assert_eq!(report.summary["hd"].0, 3.0);
        assert_eq!(report.summary["hd"].1, 0.0);
    }
}
