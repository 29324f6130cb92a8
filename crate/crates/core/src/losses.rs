//! Contrastive objectives over scaled cosine similarities.
//!
//! Both the temporal loss and the object-hand loss share one shape: for a
//! cross-similarity matrix `A` (rows anchor view, columns other view) and the
//! two within-view similarity matrices `B` and `C`,
//!
//! ```text
//! L = -Σ_i log( e^{A_ii} / (Σ_{j≠i} e^{B_ij} + Σ_k e^{A_ik}) )
//!     -Σ_i log( e^{A_ii} / (Σ_{j≠i} e^{C_ij} + Σ_k e^{A_ki}) )
//! ```
//!
//! The temporal loss uses `A = s(o, o')`, `B = s(o, o)`, `C = s(o', o')`; the
//! object-hand loss uses `A = s(f_h(o), g_h(h))`, `B = s(f_o(o), f_o(o))`,
//! `C = s(g_h(h), g_h(h))`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_h: f64,
    pub tcn_margin: f64,
    /// Divide summed losses by the batch size.
    pub mean_reduction: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            lambda_h: 1.0,
            tcn_margin: 2.0,
            mean_reduction: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        if !(self.lambda_h >= 0.0) {
            return Err(Error::invalid("lambda_h must be non-negative"));
        }
        if !(self.tcn_margin > 0.0) {
            return Err(Error::invalid("tcn_margin must be positive"));
        }
        Ok(())
    }
}

/// Batch rows of an `[N, D]` tensor as an `N × D` double matrix.
pub fn tensor_to_matrix(t: &Tensor) -> DMatrix<f64> {
    let n = t.batch();
    let d = t.item_len();
    DMatrix::from_fn(n, d, |i, j| t.data()[i * d + j] as f64)
}

pub fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (n, d) = m.shape();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            data.push(m[(i, j)] as f32);
        }
    }
    Tensor::from_vec(&[n, d], data).expect("sizes agree")
}

/// Row-normalised copy of `m`, plus the row norms.
fn normalize_rows(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Degenerate(format!("embedding row {i} has norm {norm}")));
        }
        out.row_mut(i).scale_mut(1.0 / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Back-propagates through row normalisation.
fn normalize_backward(unit: &DMatrix<f64>, norms: &[f64], grad_unit: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = grad_unit.clone();
    for i in 0..unit.nrows() {
        let dot = unit.row(i).dot(&grad_unit.row(i));
        let mut row = g.row_mut(i);
        row -= unit.row(i) * dot;
        row.scale_mut(1.0 / norms[i]);
    }
    g
}

/// `S_ij = cos(U_i, V_j) / τ`.
pub fn similarity_matrix(u: &DMatrix<f64>, v: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    if u.ncols() != v.ncols() {
        return Err(Error::Shape {
            expected: vec![u.ncols()],
            got: vec![v.ncols()],
        });
    }
    let (un, _) = normalize_rows(u)?;
    let (vn, _) = normalize_rows(v)?;
    Ok((&un * vn.transpose()) / tau)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Value and gradients (w.r.t. `a`, `b`, `c`) of the two-sided objective.
fn two_sided(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> (f64, [DMatrix<f64>; 3]) {
    let n = a.nrows();
    let mut da = DMatrix::zeros(n, n);
    let mut db = DMatrix::zeros(n, n);
    let mut dc = DMatrix::zeros(n, n);
    let mut loss = 0.0;
    for i in 0..n {
        // anchor-view term: within-view row i of B, cross row i of A
        let within = (0..n).filter(|&j| j != i).map(|j| b[(i, j)]);
        let cross = (0..n).map(|k| a[(i, k)]);
        let lse = log_sum_exp(within.clone().chain(cross.clone()));
        loss += lse - a[(i, i)];
        for j in (0..n).filter(|&j| j != i) {
            db[(i, j)] += (b[(i, j)] - lse).exp();
        }
        for k in 0..n {
            da[(i, k)] += (a[(i, k)] - lse).exp();
        }
        da[(i, i)] -= 1.0;

        // other-view term: within-view row i of C, cross column i of A
        let within = (0..n).filter(|&j| j != i).map(|j| c[(i, j)]);
        let cross = (0..n).map(|k| a[(k, i)]);
        let lse = log_sum_exp(within.chain(cross));
        loss += lse - a[(i, i)];
        for j in (0..n).filter(|&j| j != i) {
            dc[(i, j)] += (c[(i, j)] - lse).exp();
        }
        for k in 0..n {
            da[(k, i)] += (a[(k, i)] - lse).exp();
        }
        da[(i, i)] -= 1.0;
    }
    (loss, [da, db, dc])
}

/// Two-sided loss on raw embeddings: `cross` pairs `left` with `right`,
/// `left_self` supplies the anchor-view negatives and `right` its own.
/// Returns the loss and gradients w.r.t. (`left_cross`, `right`, `left_self`).
fn two_sided_embeddings(
    left_cross: &DMatrix<f64>,
    right: &DMatrix<f64>,
    left_self: &DMatrix<f64>,
    tau: f64,
) -> Result<(f64, [DMatrix<f64>; 3])> {
    let n = left_cross.nrows();
    if n == 0 {
        return Err(Error::invalid("loss needs at least one quadruple"));
    }
    if right.nrows() != n || left_self.nrows() != n {
        return Err(Error::Shape {
            expected: vec![n],
            got: vec![right.nrows(), left_self.nrows()],
        });
    }
    let (ln, lnorm) = normalize_rows(left_cross)?;
    let (rn, rnorm) = normalize_rows(right)?;
    let (sn, snorm) = normalize_rows(left_self)?;
    let a = (&ln * rn.transpose()) / tau;
    let b = (&sn * sn.transpose()) / tau;
    let c = (&rn * rn.transpose()) / tau;
    let (loss, [da, db, dc]) = two_sided(&a, &b, &c);

    let g_ln = (&da * &rn) / tau;
    let mut g_rn = (da.transpose() * &ln) / tau;
    g_rn += ((&dc + dc.transpose()) * &rn) / tau;
    let g_sn = ((&db + db.transpose()) * &sn) / tau;

    Ok((
        loss,
        [
            normalize_backward(&ln, &lnorm, &g_ln),
            normalize_backward(&rn, &rnorm, &g_rn),
            normalize_backward(&sn, &snorm, &g_sn),
        ],
    ))
}

#[derive(Clone, Debug)]
pub struct TemporalGrad {
    pub loss: f64,
    pub d_o: DMatrix<f64>,
    pub d_op: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct HandGrad {
    pub loss: f64,
    pub d_oh: DMatrix<f64>,
    pub d_h: DMatrix<f64>,
    pub d_oo: DMatrix<f64>,
}

/// Temporal loss and its gradients w.r.t. `f_o(o)` and `f_o(o')`.
pub fn loss_temporal_grad(z_o: &DMatrix<f64>, z_op: &DMatrix<f64>, tau: f64) -> Result<TemporalGrad> {
    let (loss, [g_cross, d_op, g_self]) = two_sided_embeddings(z_o, z_op, z_o, tau)?;
    Ok(TemporalGrad {
        loss,
        d_o: g_cross + g_self,
        d_op,
    })
}

pub fn loss_temporal(z_o: &DMatrix<f64>, z_op: &DMatrix<f64>, tau: f64) -> Result<f64> {
    Ok(loss_temporal_grad(z_o, z_op, tau)?.loss)
}

/// Object-hand loss and its gradients w.r.t. `f_h(o)`, `g_h(h)`, `f_o(o)`.
pub fn loss_hand_grad(
    z_oh: &DMatrix<f64>,
    z_h: &DMatrix<f64>,
    z_oo: &DMatrix<f64>,
    tau: f64,
) -> Result<HandGrad> {
    let (loss, [d_oh, d_h, d_oo]) = two_sided_embeddings(z_oh, z_h, z_oo, tau)?;
    Ok(HandGrad {
        loss,
        d_oh,
        d_h,
        d_oo,
    })
}

pub fn loss_hand(z_oh: &DMatrix<f64>, z_h: &DMatrix<f64>, z_oo: &DMatrix<f64>, tau: f64) -> Result<f64> {
    Ok(loss_hand_grad(z_oh, z_h, z_oo, tau)?.loss)
}

/// Head outputs of one joint step. The hand batch is sampled independently
/// of the temporal batch and may be absent when `λ = 0`.
#[derive(Clone, Debug)]
pub struct JointOutputs {
    pub z_o: DMatrix<f64>,
    pub z_op: DMatrix<f64>,
    pub hand: Option<HandOutputs>,
}

#[derive(Clone, Debug)]
pub struct HandOutputs {
    pub z_oh: DMatrix<f64>,
    pub z_h: DMatrix<f64>,
    pub z_oo: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct JointGrad {
    pub loss: f64,
    pub loss_temporal: f64,
    pub loss_hand: Option<f64>,
    pub temporal: TemporalGrad,
    pub hand: Option<HandGrad>,
}

fn reduce(loss: f64, n: usize, cfg: &LossConfig) -> f64 {
    if cfg.mean_reduction {
        loss / n as f64
    } else {
        loss
    }
}

/// `L_t + λ·L_h`, with gradients already scaled by `λ` and the reduction.
pub fn loss_joint_grad(out: &JointOutputs, cfg: &LossConfig) -> Result<JointGrad> {
    cfg.validate()?;
    let mut temporal = loss_temporal_grad(&out.z_o, &out.z_op, cfg.tau)?;
    let n_t = out.z_o.nrows();
    if cfg.mean_reduction {
        let s = 1.0 / n_t as f64;
        temporal.loss *= s;
        temporal.d_o *= s;
        temporal.d_op *= s;
    }
    let lt = temporal.loss;
    if cfg.lambda_h == 0.0 {
        return Ok(JointGrad {
            loss: lt,
            loss_temporal: lt,
            loss_hand: None,
            temporal,
            hand: None,
        });
    }
    let h = out
        .hand
        .as_ref()
        .ok_or_else(|| Error::invalid("λ > 0 requires hand outputs"))?;
    let mut hand = loss_hand_grad(&h.z_oh, &h.z_h, &h.z_oo, cfg.tau)?;
    let lh = reduce(hand.loss, h.z_oh.nrows(), cfg);
    let scale = cfg.lambda_h * if cfg.mean_reduction { 1.0 / h.z_oh.nrows() as f64 } else { 1.0 };
    hand.d_oh *= scale;
    hand.d_h *= scale;
    hand.d_oo *= scale;
    hand.loss = lh;
    Ok(JointGrad {
        loss: lt + cfg.lambda_h * lh,
        loss_temporal: lt,
        loss_hand: Some(lh),
        temporal,
        hand: Some(hand),
    })
}

pub fn loss_joint(out: &JointOutputs, cfg: &LossConfig) -> Result<f64> {
    Ok(loss_joint_grad(out, cfg)?.loss)
}

/// Temporal loss with additional shared negatives (e.g. far frames of the
/// same track) added to both denominators.
pub fn loss_temporal_extra_negatives_grad(
    z_o: &DMatrix<f64>,
    z_op: &DMatrix<f64>,
    z_neg: &DMatrix<f64>,
    tau: f64,
) -> Result<(f64, [DMatrix<f64>; 3])> {
    let n = z_o.nrows();
    if n == 0 || z_op.nrows() != n {
        return Err(Error::invalid("mismatched or empty temporal batch"));
    }
    let m = z_neg.nrows();
    let (on, onorm) = normalize_rows(z_o)?;
    let (pn, pnorm) = normalize_rows(z_op)?;
    let (nn, nnorm) = normalize_rows(z_neg)?;
    let a = (&on * pn.transpose()) / tau;
    let b = (&on * on.transpose()) / tau;
    let c = (&pn * pn.transpose()) / tau;
    let e1 = (&on * nn.transpose()) / tau;
    let e2 = (&pn * nn.transpose()) / tau;
    let mut da = DMatrix::zeros(n, n);
    let mut db = DMatrix::zeros(n, n);
    let mut dc = DMatrix::zeros(n, n);
    let mut de1 = DMatrix::zeros(n, m);
    let mut de2 = DMatrix::zeros(n, m);
    let mut loss = 0.0;
    for i in 0..n {
        let vals = (0..n)
            .filter(|&j| j != i)
            .map(|j| b[(i, j)])
            .chain((0..n).map(|k| a[(i, k)]))
            .chain((0..m).map(|k| e1[(i, k)]));
        let lse = log_sum_exp(vals);
        loss += lse - a[(i, i)];
        for j in (0..n).filter(|&j| j != i) {
            db[(i, j)] += (b[(i, j)] - lse).exp();
        }
        for k in 0..n {
            da[(i, k)] += (a[(i, k)] - lse).exp();
        }
        for k in 0..m {
            de1[(i, k)] += (e1[(i, k)] - lse).exp();
        }
        da[(i, i)] -= 1.0;

        let vals = (0..n)
            .filter(|&j| j != i)
            .map(|j| c[(i, j)])
            .chain((0..n).map(|k| a[(k, i)]))
            .chain((0..m).map(|k| e2[(i, k)]));
        let lse = log_sum_exp(vals);
        loss += lse - a[(i, i)];
        for j in (0..n).filter(|&j| j != i) {
            dc[(i, j)] += (c[(i, j)] - lse).exp();
        }
        for k in 0..n {
            da[(k, i)] += (a[(k, i)] - lse).exp();
        }
        for k in 0..m {
            de2[(i, k)] += (e2[(i, k)] - lse).exp();
        }
        da[(i, i)] -= 1.0;
    }
    let g_on = (&da * &pn + (&db + db.transpose()) * &on + &de1 * &nn) / tau;
    let g_pn = (da.transpose() * &on + (&dc + dc.transpose()) * &pn + &de2 * &nn) / tau;
    let g_nn = (de1.transpose() * &on + de2.transpose() * &pn) / tau;
    Ok((
        loss,
        [
            normalize_backward(&on, &onorm, &g_on),
            normalize_backward(&pn, &pnorm, &g_pn),
            normalize_backward(&nn, &nnorm, &g_nn),
        ],
    ))
}

/// Triplet margin loss `max(0, ‖a−p‖² + α − ‖a−n‖²)` averaged over rows,
/// with gradients w.r.t. anchor, positive and negative.
pub fn loss_tcn_grad(
    anchor: &DMatrix<f64>,
    positive: &DMatrix<f64>,
    negative: &DMatrix<f64>,
    margin: f64,
) -> Result<(f64, [DMatrix<f64>; 3])> {
    let (n, d) = anchor.shape();
    if positive.shape() != (n, d) || negative.shape() != (n, d) {
        return Err(Error::Shape {
            expected: vec![n, d],
            got: vec![positive.nrows(), negative.nrows()],
        });
    }
    if n == 0 {
        return Err(Error::invalid("empty triplet batch"));
    }
    let mut ga = DMatrix::zeros(n, d);
    let mut gp = DMatrix::zeros(n, d);
    let mut gn = DMatrix::zeros(n, d);
    let mut loss = 0.0;
    let inv = 1.0 / n as f64;
    for i in 0..n {
        let ap = anchor.row(i) - positive.row(i);
        let an = anchor.row(i) - negative.row(i);
        let v = ap.norm_squared() + margin - an.norm_squared();
        if v > 0.0 {
            loss += v;
            ga.row_mut(i).copy_from(&((&ap - &an) * (2.0 * inv)));
            gp.row_mut(i).copy_from(&(&ap * (-2.0 * inv)));
            gn.row_mut(i).copy_from(&(&an * (2.0 * inv)));
        }
    }
    Ok((loss * inv, [ga, gp, gn]))
}

pub fn loss_tcn(anchor: &DMatrix<f64>, positive: &DMatrix<f64>, negative: &DMatrix<f64>, margin: f64) -> Result<f64> {
    Ok(loss_tcn_grad(anchor, positive, negative, margin)?.0)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Scalar double loops written directly from the loss definitions.

    use nalgebra::DMatrix;

    pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..a.len() {
            dot += a[k] * b[k];
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        dot / (na.sqrt() * nb.sqrt())
    }

    fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
        m.row(i).iter().copied().collect()
    }

    fn s(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize, tau: f64) -> f64 {
        cosine(&row(a, i), &row(b, j)) / tau
    }

    pub fn two_sided(x: &DMatrix<f64>, y: &DMatrix<f64>, self_x: &DMatrix<f64>, tau: f64) -> f64 {
        let n = x.nrows();
        let mut total = 0.0;
        for i in 0..n {
            let pos = s(x, i, y, i, tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += s(self_x, i, self_x, j, tau).exp();
                }
            }
            for k in 0..n {
                den += s(x, i, y, k, tau).exp();
            }
            total -= (pos / den).ln();
        }
        for i in 0..n {
            let pos = s(x, i, y, i, tau).exp();
            let mut den = 0.0;
            for j in 0..n {
                if j != i {
                    den += s(y, i, y, j, tau).exp();
                }
            }
            for k in 0..n {
                den += s(x, k, y, i, tau).exp();
            }
            total -= (pos / den).ln();
        }
        total
    }

    pub fn temporal(z_o: &DMatrix<f64>, z_op: &DMatrix<f64>, tau: f64) -> f64 {
        two_sided(z_o, z_op, z_o, tau)
    }

    pub fn hand(z_oh: &DMatrix<f64>, z_h: &DMatrix<f64>, z_oo: &DMatrix<f64>, tau: f64) -> f64 {
        two_sided(z_oh, z_h, z_oo, tau)
    }
}
