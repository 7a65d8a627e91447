//! Identification metrics: mean correlation coefficient under optimal
//! channel assignment, linear-recovery R^2, and structural Hamming
//! distance between transition supports.

use std::io::Write;
use std::path::Path;

use crate::assignment::max_assignment;
use crate::error::{CoreError, Result};
use crate::linalg;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mcc: f64,
    pub r2: f64,
    pub shd: usize,
    /// Pearson correlations, estimated channels by true channels.
    pub correlation: Tensor,
    /// Estimated channel matched to each true channel.
    pub assignment: Vec<usize>,
}

fn column_stats(m: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (m.rows(), m.cols());
    let mut means = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            means[j] += m.at(i, j);
        }
    }
    for v in &mut means {
        *v /= n as f64;
    }
    let mut vars = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            let c = m.at(i, j) - means[j];
            vars[j] += c * c;
        }
    }
    for v in &mut vars {
        *v /= n as f64;
    }
    (means, vars)
}

/// Pearson correlation matrix, estimated channels (rows) by true
/// channels (columns). Zero-variance columns yield zero correlations.
pub fn correlation_matrix(est: &Tensor, truth: &Tensor) -> Result<Tensor> {
    if est.rows() != truth.rows() {
        return Err(CoreError::shape(format!(
            "correlation: {} vs {} samples",
            est.rows(),
            truth.rows()
        )));
    }
    let n = est.rows();
    let (de, dt) = (est.cols(), truth.cols());
    let (me, ve) = column_stats(est);
    let (mt, vt) = column_stats(truth);
    let flat: Vec<usize> = (0..de).filter(|&j| ve[j] == 0.0).collect();
    if !flat.is_empty() {
        eprintln!(
            "warning: estimated channels {:?} have zero variance; correlations set to 0",
            flat
        );
    }
    let flat_t: Vec<usize> = (0..dt).filter(|&j| vt[j] == 0.0).collect();
    if !flat_t.is_empty() {
        eprintln!(
            "warning: true channels {:?} have zero variance; correlations set to 0",
            flat_t
        );
    }
    let mut c = vec![0.0; de * dt];
    for i in 0..de {
        if ve[i] == 0.0 {
            continue;
        }
        for j in 0..dt {
            if vt[j] == 0.0 {
                continue;
            }
            let mut cov = 0.0;
            for t in 0..n {
                cov += (est.at(t, i) - me[i]) * (truth.at(t, j) - mt[j]);
            }
            cov /= n as f64;
            c[i * dt + j] = (cov / (ve[i].sqrt() * vt[j].sqrt())).clamp(-1.0, 1.0);
        }
    }
    Tensor::new(vec![de, dt], c)
}

pub struct MccOutcome {
    pub score: f64,
    /// `assignment[j]` is the estimated channel matched to true channel j.
    pub assignment: Vec<usize>,
    pub correlation: Tensor,
}

/// Mean |correlation| under the max-weight channel matching. Estimated
/// width may exceed the true width; surplus channels go unmatched.
pub fn mcc(est: &Tensor, truth: &Tensor) -> Result<MccOutcome> {
    if est.rows() < 3 {
        return Err(CoreError::shape(format!(
            "mcc needs at least 3 samples, got {}",
            est.rows()
        )));
    }
    let (de, dt) = (est.cols(), truth.cols());
    if de < dt {
        return Err(CoreError::shape(format!(
            "mcc: estimated width {} below true width {}",
            de, dt
        )));
    }
    let corr = correlation_matrix(est, truth)?;
    // pad |C| with zero columns so the assignment problem is square;
    // phantom columns absorb surplus estimated channels
    let mut w = vec![0.0; de * de];
    for i in 0..de {
        for j in 0..dt {
            w[i * de + j] = corr.at(i, j).abs();
        }
    }
    let (perm, _) = max_assignment(&Tensor::new(vec![de, de], w)?)?;
    let mut assignment = vec![usize::MAX; dt];
    for (i, &j) in perm.iter().enumerate() {
        if j < dt {
            assignment[j] = i;
        }
    }
    let score = assignment
        .iter()
        .enumerate()
        .map(|(j, &i)| corr.at(i, j).abs())
        .sum::<f64>()
        / dt as f64;
    Ok(MccOutcome {
        score,
        assignment,
        correlation: corr,
    })
}

pub struct R2Outcome {
    pub mean: f64,
    pub per_channel: Vec<f64>,
    /// True when the normal equations needed a ridge fallback.
    pub ridge_fallback: bool,
}

/// Mean coefficient of determination from regressing each true channel
/// on all estimated channels with an intercept.
pub fn r_squared(est: &Tensor, truth: &Tensor) -> Result<R2Outcome> {
    let n = est.rows();
    if truth.rows() != n {
        return Err(CoreError::shape(format!(
            "r_squared: {} vs {} samples",
            n,
            truth.rows()
        )));
    }
    let de = est.cols();
    if n <= de + 1 {
        return Err(CoreError::shape(format!(
            "r_squared needs more than {} samples, got {}",
            de + 1,
            n
        )));
    }
    // design matrix [est | 1]
    let p = de + 1;
    let mut xtx = vec![0.0; p * p];
    let x_at = |t: usize, a: usize| if a < de { est.at(t, a) } else { 1.0 };
    for a in 0..p {
        for b in a..p {
            let mut s = 0.0;
            for t in 0..n {
                s += x_at(t, a) * x_at(t, b);
            }
            xtx[a * p + b] = s;
            xtx[b * p + a] = s;
        }
    }
    let dt = truth.cols();
    let mut xty = vec![0.0; p * dt];
    for a in 0..p {
        for j in 0..dt {
            let mut s = 0.0;
            for t in 0..n {
                s += x_at(t, a) * truth.at(t, j);
            }
            xty[a * dt + j] = s;
        }
    }
    let xtx_t = Tensor::new(vec![p, p], xtx.clone())?;
    let xty_t = Tensor::new(vec![p, dt], xty)?;
    let (coef, ridge_fallback) = match linalg::solve(&xtx_t, &xty_t) {
        Ok(c) => (c, false),
        Err(_) => {
            for a in 0..p {
                xtx[a * p + a] += 1e-8;
            }
            let ridged = Tensor::new(vec![p, p], xtx)?;
            (linalg::solve(&ridged, &xty_t)?, true)
        }
    };
    if ridge_fallback {
        eprintln!("warning: rank-deficient regression design, used ridge fallback");
    }
    let (tmeans, _) = column_stats(truth);
    let mut per_channel = Vec::with_capacity(dt);
    for j in 0..dt {
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for t in 0..n {
            let mut pred = 0.0;
            for a in 0..p {
                pred += x_at(t, a) * coef.at(a, j);
            }
            let y = truth.at(t, j);
            ss_res += (y - pred) * (y - pred);
            ss_tot += (y - tmeans[j]) * (y - tmeans[j]);
        }
        per_channel.push(if ss_tot == 0.0 {
            if ss_res <= 1e-18 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - ss_res / ss_tot
        });
    }
    let mean = per_channel.iter().sum::<f64>() / dt as f64;
    Ok(R2Outcome {
        mean,
        per_channel,
        ridge_fallback,
    })
}

/// Per-true-channel regression slopes of the matched estimated channel:
/// the scale part of the scaled-permutation indeterminacy.
pub fn channel_scales(est: &Tensor, truth: &Tensor, assignment: &[usize]) -> Result<Vec<f64>> {
    let n = est.rows();
    let (tmeans, tvars) = column_stats(truth);
    let (emeans, _) = column_stats(est);
    let mut scales = Vec::with_capacity(assignment.len());
    for (j, &i) in assignment.iter().enumerate() {
        if tvars[j] == 0.0 {
            return Err(CoreError::numerical(format!(
                "channel_scales: true channel {} has zero variance",
                j
            )));
        }
        let mut cov = 0.0;
        for t in 0..n {
            cov += (est.at(t, i) - emeans[i]) * (truth.at(t, j) - tmeans[j]);
        }
        cov /= n as f64;
        let s = cov / tvars[j];
        if s.abs() < 1e-12 {
            return Err(CoreError::numerical(format!(
                "channel_scales: matched channel pair ({}, {}) has near-zero slope",
                i, j
            )));
        }
        scales.push(s);
    }
    Ok(scales)
}

/// Structural Hamming distance between thresholded transition supports,
/// after mapping the estimates into the true channel basis through the
/// scaled permutation.
pub fn shd(
    est_mats: &[Tensor],
    true_mats: &[Tensor],
    assignment: &[usize],
    scales: &[f64],
    threshold: f64,
) -> Result<usize> {
    if est_mats.len() != true_mats.len() {
        return Err(CoreError::shape(format!(
            "shd: {} estimated lags vs {} true lags",
            est_mats.len(),
            true_mats.len()
        )));
    }
    if threshold <= 0.0 {
        return Err(CoreError::config(format!(
            "shd threshold must be > 0, got {}",
            threshold
        )));
    }
    let d = true_mats[0].rows();
    if assignment.len() != d || scales.len() != d {
        return Err(CoreError::shape(format!(
            "shd: assignment/scale lengths {}/{} for d={}",
            assignment.len(),
            scales.len(),
            d
        )));
    }
    let mut count = 0;
    for (est, tru) in est_mats.iter().zip(true_mats) {
        for a in 0..d {
            for b in 0..d {
                // estimated channels restricted to the matched set, then
                // conjugated by the scale diagonal
                let mapped = est.at(assignment[a], assignment[b]) * scales[b] / scales[a];
                let e_edge = mapped.abs() > threshold;
                let t_edge = tru.at(a, b).abs() > threshold;
                if e_edge != t_edge {
                    count += 1;
                }
            }
        }
    }
    Ok(count)
}

/// Correlation matrix and assignment as CSV: one header row, one row per
/// estimated channel, then an assignment row listing the estimated
/// channel matched to each true channel.
pub fn export_correlation(report: &MetricsReport, path: &Path) -> Result<()> {
    let (de, dt) = (report.correlation.rows(), report.correlation.cols());
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..dt).map(|j| format!("true_{}", j)).collect();
    writeln!(f, "channel,{}", header.join(","))?;
    for i in 0..de {
        let row: Vec<String> = (0..dt)
            .map(|j| format!("{}", report.correlation.at(i, j)))
            .collect();
        writeln!(f, "est_{},{}", i, row.join(","))?;
    }
    let asg: Vec<String> = report.assignment.iter().map(|a| a.to_string()).collect();
    writeln!(f, "assignment,{}", asg.join(","))?;
    f.flush()?;
    Ok(())
}
