//! Evaluation protocols: average precision, linear-probe state
//! classification, region-of-interaction AP with boundary slack, and
//! mask-averaged grasp scoring.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub chance: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
}

/// AP over a ranked list; equal scores form one threshold block whose
/// precision is taken at the block end.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Degenerate("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_pos = 0usize;
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            block_pos += labels[order[j]] as usize;
            j += 1;
        }
        tp += block_pos;
        seen += j - i;
        ap += (block_pos as f64 / positives as f64) * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(ap)
}

/// `(recall, precision)` at the end of every threshold block, best first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    average_precision(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut i) = (0usize, 0usize);
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            i += 1;
        }
        out.push((tp as f64 / positives, tp as f64 / i as f64));
    }
    Ok(out)
}

/// One binary state task; `None` labels mark samples the task ignores.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTask {
    pub name: String,
    pub labels: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub name: String,
    pub ap: f64,
    pub prevalence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub map: f64,
    pub chance: f64,
    pub tasks: Vec<TaskScore>,
    /// Tasks without positives and negatives in both splits.
    pub excluded: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            l2: 1e-4,
            max_iter: 50,
            tol: 1e-9,
        }
    }
}

/// L2-regularized logistic regression by damped Newton iterations.
///
/// `x` already carries a bias column as its last column, which is not
/// regularized. Minimizes mean log-loss plus `l2 / 2 · |w|²`.
pub fn fit_logistic(x: &DMatrix<f64>, y: &[bool], cfg: &ProbeConfig) -> Result<DVector<f64>> {
    let (n, d) = x.shape();
    if n != y.len() || n == 0 {
        return Err(Error::invalid("logistic regression needs one label per row"));
    }
    let yv = DVector::from_iterator(n, y.iter().map(|&b| b as u8 as f64));
    let mut reg = DVector::from_element(d, cfg.l2);
    reg[d - 1] = 0.0;
    let objective = |w: &DVector<f64>| {
        let z = x * w;
        let mut loss = 0.0;
        for i in 0..n {
            // log(1 + e^z) - y z
            let zi = z[i];
            loss += zi.max(0.0) + (-zi.abs()).exp().ln_1p() - yv[i] * zi;
        }
        loss / n as f64 + 0.5 * w.iter().zip(reg.iter()).map(|(a, r)| r * a * a).sum::<f64>()
    };
    let mut w = DVector::zeros(d);
    let mut f = objective(&w);
    for _ in 0..cfg.max_iter {
        let z = x * &w;
        let p = z.map(|v| 1.0 / (1.0 + (-v).exp()));
        let grad = x.transpose() * (&p - &yv) / n as f64 + reg.component_mul(&w);
        let s = p.map(|v| (v * (1.0 - v)).max(1e-12));
        let mut xs = x.clone();
        for (i, mut row) in xs.row_iter_mut().enumerate() {
            row *= s[i] / n as f64;
        }
        let mut hess = x.transpose() * xs;
        for j in 0..d {
            hess[(j, j)] += reg[j].max(1e-10);
        }
        let chol = hess
            .cholesky()
            .ok_or_else(|| Error::Numeric("logistic Hessian not positive definite".into()))?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-8 {
            let cand = &w - &step * t;
            let fc = objective(&cand);
            if fc <= f - 1e-4 * t * grad.dot(&step) {
                let done = f - fc < cfg.tol;
                w = cand;
                f = fc;
                accepted = true;
                if done {
                    return Ok(w);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("logistic regression diverged".into()));
    }
    Ok(w)
}

/// Trains one linear classifier per task on the rows flagged `train` and
/// reports mean AP over tasks on the remaining rows.
///
/// Features are standardized with train-split statistics.
pub fn linear_probe(features: &DMatrix<f64>, tasks: &[ProbeTask], train: &[bool], cfg: &ProbeConfig) -> Result<ProbeReport> {
    let (n, d) = features.shape();
    if train.len() != n {
        return Err(Error::invalid("split length differs from feature rows"));
    }
    let mut tasks_out = Vec::new();
    let mut excluded = Vec::new();
    for task in tasks {
        if task.labels.len() != n {
            return Err(Error::invalid(format!("task {} has {} labels for {n} rows", task.name, task.labels.len())));
        }
        let rows = |want_train: bool| -> Vec<(usize, bool)> {
            (0..n)
                .filter(|&i| train[i] == want_train)
                .filter_map(|i| task.labels[i].map(|l| (i, l)))
                .collect()
        };
        let (tr, te) = (rows(true), rows(false));
        let both = |r: &[(usize, bool)]| r.iter().any(|x| x.1) && r.iter().any(|x| !x.1);
        if !both(&tr) || !both(&te) {
            excluded.push(task.name.clone());
            continue;
        }
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for &(i, _) in &tr {
            for j in 0..d {
                mean[j] += features[(i, j)];
            }
        }
        mean.iter_mut().for_each(|m| *m /= tr.len() as f64);
        for &(i, _) in &tr {
            for j in 0..d {
                sd[j] += (features[(i, j)] - mean[j]).powi(2);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / tr.len() as f64).sqrt().max(1e-8));
        let design = |r: &[(usize, bool)]| {
            DMatrix::from_fn(r.len(), d + 1, |k, j| if j == d { 1.0 } else { (features[(r[k].0, j)] - mean[j]) / sd[j] })
        };
        let ytr: Vec<bool> = tr.iter().map(|x| x.1).collect();
        let w = fit_logistic(&design(&tr), &ytr, cfg)?;
        let scores = design(&te) * w;
        let yte: Vec<bool> = te.iter().map(|x| x.1).collect();
        let ap = average_precision(scores.as_slice(), &yte)?;
        let prevalence = yte.iter().filter(|&&l| l).count() as f64 / yte.len() as f64;
        tasks_out.push(TaskScore {
            name: task.name.clone(),
            ap,
            prevalence,
        });
    }
    if tasks_out.is_empty() {
        return Err(Error::Degenerate("no probe task has both labels in both splits".into()));
    }
    let k = tasks_out.len() as f64;
    Ok(ProbeReport {
        map: tasks_out.iter().map(|t| t.ap).sum::<f64>() / k,
        chance: tasks_out.iter().map(|t| t.prevalence).sum::<f64>() / k,
        tasks: tasks_out,
        excluded,
    })
}

/// Which side of the region boundary the slack band covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackSide {
    #[default]
    Both,
    Inside,
    Outside,
}

/// Squared Euclidean distance from each pixel to the nearest `true` pixel
/// (exact, separable lower-envelope transform). `f64::INFINITY` when the
/// set is empty.
pub fn squared_distance_transform(set: &[bool], w: usize, h: usize) -> Vec<f64> {
    let inf = f64::INFINITY;
    let mut grid: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { inf }).collect();
    let mut buf = vec![0.0; w.max(h)];
    let mut out = vec![0.0; w.max(h)];
    for x in 0..w {
        for y in 0..h {
            buf[y] = grid[y * w + x];
        }
        dt_1d(&buf[..h], &mut out[..h]);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        buf[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&buf[..w], &mut out[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        d.fill(f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    for &q in &finite {
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= z[z.len() - 1] {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *dq = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Pixels ignored by slack evaluation: those within `slack_px` of a pixel
/// of the opposite class, restricted to `side`.
pub fn slack_band(mask: &[bool], w: usize, h: usize, slack_px: f64, side: SlackSide) -> Vec<bool> {
    if slack_px <= 0.0 {
        return vec![false; mask.len()];
    }
    let s2 = slack_px * slack_px;
    let neg: Vec<bool> = mask.iter().map(|&m| !m).collect();
    let to_pos = squared_distance_transform(mask, w, h);
    let to_neg = squared_distance_transform(&neg, w, h);
    (0..mask.len())
        .map(|i| {
            if mask[i] {
                side != SlackSide::Outside && to_neg[i] <= s2
            } else {
                side != SlackSide::Inside && to_pos[i] <= s2
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiScore {
    pub ap: f64,
    pub chance: f64,
    pub evaluated: usize,
}

/// Pixel AP of `heatmap` against `mask`, ignoring the slack band.
pub fn roi_ap(heatmap: &[f32], mask: &[bool], w: usize, h: usize, slack_px: f64, side: SlackSide) -> Result<RoiScore> {
    if heatmap.len() != w * h || mask.len() != w * h {
        return Err(Error::Shape {
            expected: vec![h, w],
            got: vec![heatmap.len(), mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate("ground-truth region is empty".into()));
    }
    let band = slack_band(mask, w, h, slack_px, side);
    let mut scores = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for i in 0..w * h {
        if !band[i] {
            scores.push(heatmap[i] as f64);
            labels.push(mask[i]);
        }
    }
    let ap = average_precision(&scores, &labels)?;
    Ok(RoiScore {
        ap,
        chance: labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64,
        evaluated: labels.len(),
    })
}

/// Slack in pixels for a fraction of the image width.
pub fn slack_for_width(width: usize, fraction: f64) -> f64 {
    (fraction * width as f64).round()
}

/// Mean of each grasp heatmap over the object mask. `heatmaps` holds `G`
/// planes of `mask.len()` values each.
pub fn gao_scores(heatmaps: &[f32], mask: &[bool]) -> Result<Vec<f64>> {
    let hw = mask.len();
    if hw == 0 || heatmaps.len() % hw != 0 {
        return Err(Error::invalid("heatmap planes do not match mask size"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("empty object mask".into()));
    }
    Ok(heatmaps
        .chunks(hw)
        .map(|plane| {
            plane
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v as f64)
                .sum::<f64>()
                / count as f64
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraspScore {
    pub grasp: usize,
    pub ap: f64,
    pub chance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaoReport {
    pub map: f64,
    pub chance: f64,
    pub grasps: Vec<GraspScore>,
}

/// Per-grasp AP across objects, averaged over grasps with at least one
/// positive object. `scores[i]` and `labels[i]` describe object `i`.
pub fn gao_map(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<GaoReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::invalid("need matching, non-empty score and label lists"));
    }
    let g = scores[0].len();
    if scores.iter().any(|s| s.len() != g) || labels.iter().any(|l| l.len() != g) {
        return Err(Error::invalid("inconsistent grasp count"));
    }
    let mut grasps = Vec::new();
    for k in 0..g {
        let s: Vec<f64> = scores.iter().map(|v| v[k]).collect();
        let l: Vec<bool> = labels.iter().map(|v| v[k]).collect();
        let pos = l.iter().filter(|&&b| b).count();
        if pos == 0 {
            continue;
        }
        grasps.push(GraspScore {
            grasp: k,
            ap: average_precision(&s, &l)?,
            chance: pos as f64 / l.len() as f64,
        });
    }
    if grasps.is_empty() {
        return Err(Error::Degenerate("no grasp has a positive object".into()));
    }
    let k = grasps.len() as f64;
    Ok(GaoReport {
        map: grasps.iter().map(|g| g.ap).sum::<f64>() / k,
        chance: grasps.iter().map(|g| g.chance).sum::<f64>() / k,
        grasps,
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    /// AP by walking every distinct threshold of the PR curve.
    pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let total = labels.iter().filter(|&&l| l).count() as f64;
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for t in thresholds {
            let tp = scores.iter().zip(labels).filter(|(&s, &l)| s >= t && l).count() as f64;
            let n = scores.iter().filter(|&&s| s >= t).count() as f64;
            let recall = tp / total;
            ap += (recall - prev_recall) * tp / n;
            prev_recall = recall;
        }
        ap
    }

    /// Band by scanning every pixel pair.
    pub fn slack_band(mask: &[bool], w: usize, h: usize, slack: f64) -> Vec<bool> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                slack > 0.0
                    && (0..w * h).any(|j| {
                        let (u, v) = ((j % w) as f64, (j / w) as f64);
                        mask[j] != mask[i] && ((x - u).powi(2) + (y - v).powi(2)).sqrt() <= slack
                    })
            })
            .collect()
    }
}
