use serde::Serialize;

use super::MetricError;

pub const DEFAULT_BINS: usize = 10;

fn check(confs: &[f64], outcomes: &[bool]) -> Result<(), MetricError> {
    if confs.len() != outcomes.len() {
        return Err(MetricError::LengthMismatch(confs.len(), outcomes.len()));
    }
    if confs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn hit(o: bool) -> f64 {
    if o {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub bin_center: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

fn equal_width_bin(conf: f64, n_bins: usize) -> usize {
    ((conf * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Occupied equal-width bins, for reliability diagrams.
pub fn reliability_curve(confs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<Vec<ReliabilityBin>, MetricError> {
    check(confs, outcomes)?;
    if n_bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    let mut sums = vec![(0.0, 0.0, 0usize); n_bins];
    for (&c, &o) in confs.iter().zip(outcomes) {
        let b = &mut sums[equal_width_bin(c, n_bins)];
        b.0 += c;
        b.1 += hit(o);
        b.2 += 1;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .filter(|(_, s)| s.2 > 0)
        .map(|(i, (conf, acc, n))| ReliabilityBin {
            bin_center: (i as f64 + 0.5) / n_bins as f64,
            mean_confidence: conf / n as f64,
            accuracy: acc / n as f64,
            count: n,
        })
        .collect())
}

/// Expected calibration error over `n_bins` equal-width bins on [0, 1].
pub fn ece(confs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<f64, MetricError> {
    let n = confs.len() as f64;
    Ok(reliability_curve(confs, outcomes, n_bins)?
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
        .sum())
}

/// Adaptive calibration error: like [`ece`] but over equal-mass bins of the
/// confidence-sorted sample (stable sort; the first `n % n_bins` bins take
/// one extra item). A boundary that would split a run of equal confidences
/// moves to the end of the run, so tied items always share a bin.
pub fn ace(confs: &[f64], outcomes: &[bool], n_bins: usize) -> Result<f64, MetricError> {
    check(confs, outcomes)?;
    if n_bins == 0 {
        return Err(MetricError::ZeroBins);
    }
    let mut order: Vec<usize> = (0..confs.len()).collect();
    order.sort_by(|&a, &b| confs[a].total_cmp(&confs[b]));
    let n = confs.len();
    let (base, extra) = (n / n_bins, n % n_bins);
    let mut start = 0;
    let mut nominal = 0;
    let mut total = 0.0;
    for b in 0..n_bins {
        nominal += base + usize::from(b < extra);
        let mut end = nominal.max(start);
        while end > 0 && end < n && confs[order[end]] == confs[order[end - 1]] {
            end += 1;
        }
        if end == start {
            continue;
        }
        let bin = &order[start..end];
        let size = bin.len() as f64;
        let conf = bin.iter().map(|&i| confs[i]).sum::<f64>() / size;
        let acc = bin.iter().map(|&i| hit(outcomes[i])).sum::<f64>() / size;
        total += size / n as f64 * (acc - conf).abs();
        start = end;
    }
    Ok(total)
}

/// Mean squared difference between confidence and outcome.
pub fn brier(confs: &[f64], outcomes: &[bool]) -> Result<f64, MetricError> {
    check(confs, outcomes)?;
    Ok(confs
        .iter()
        .zip(outcomes)
        .map(|(&c, &o)| (c - hit(o)).powi(2))
        .sum::<f64>()
        / confs.len() as f64)
}

/// Monotone recalibration map: piecewise-linear through the fitted points,
/// constant beyond the first and last breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationMap {
    pub breakpoints: Vec<f64>,
    pub fitted: Vec<f64>,
}

impl CalibrationMap {
    pub fn apply(&self, conf: f64) -> f64 {
        let xs = &self.breakpoints;
        let ys = &self.fitted;
        if conf <= xs[0] {
            return ys[0];
        }
        if conf >= xs[xs.len() - 1] {
            return ys[ys.len() - 1];
        }
        let hi = xs.partition_point(|&x| x <= conf);
        let lo = hi - 1;
        let t = (conf - xs[lo]) / (xs[hi] - xs[lo]);
        ys[lo] + t * (ys[hi] - ys[lo])
    }

    pub fn apply_all(&self, confs: &[f64]) -> Vec<f64> {
        confs.iter().map(|&c| self.apply(c)).collect()
    }
}

/// Pool-adjacent-violators fit of outcome against confidence.
///
/// Equal confidences are merged into one weighted point first, so the map is
/// a function. Panics on empty input.
pub fn isotonic_fit(confs: &[f64], outcomes: &[bool]) -> CalibrationMap {
    assert!(
        !confs.is_empty() && confs.len() == outcomes.len(),
        "isotonic_fit needs paired, non-empty input"
    );
    let mut order: Vec<usize> = (0..confs.len()).collect();
    order.sort_by(|&a, &b| confs[a].total_cmp(&confs[b]));

    // (x, weighted sum of y, weight)
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        match points.last_mut() {
            Some(last) if last.0 == confs[i] => {
                last.1 += hit(outcomes[i]);
                last.2 += 1.0;
            }
            _ => points.push((confs[i], hit(outcomes[i]), 1.0)),
        }
    }

    // Blocks of (sum, weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(points.len());
    for &(_, sum, weight) in &points {
        blocks.push((sum, weight, 1));
        while blocks.len() > 1 {
            let (s2, w2, n2) = blocks[blocks.len() - 1];
            let (s1, w1, n1) = blocks[blocks.len() - 2];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.pop();
            *blocks.last_mut().unwrap() = (s1 + s2, w1 + w2, n1 + n2);
        }
    }
    let fitted = blocks
        .iter()
        .flat_map(|&(s, w, n)| std::iter::repeat_n(s / w, n))
        .collect();
    CalibrationMap {
        breakpoints: points.iter().map(|p| p.0).collect(),
        fitted,
    }
}
