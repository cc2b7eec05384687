//! Euclidean distances and triplet losses with exact embedding gradients.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Added under the square root so that the distance gradient stays finite
/// at zero distance.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum MarginMode {
    /// `[m + x]_+`
    Hinge(f64),
    /// `ln(1 + exp(x))`
    #[default]
    Softplus,
}

impl MarginMode {
    /// Loss for `x = D(a, p) - D(a, n)`.
    pub fn value(self, x: f64) -> f64 {
        match self {
            MarginMode::Hinge(m) => (m + x).max(0.0),
            MarginMode::Softplus => stable_softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            MarginMode::Hinge(m) => {
                if m + x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            MarginMode::Softplus => sigmoid(x),
        }
    }

    fn is_active(self, x: f64) -> bool {
        match self {
            MarginMode::Hinge(m) => m + x > 0.0,
            MarginMode::Softplus => true,
        }
    }
}

/// How per-anchor terms are combined in the batch-hard losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub loss: f64,
    /// Gradient of `loss` with respect to the embeddings.
    pub grad: Array2<f64>,
    pub num_active: usize,
    /// Selected triplet per anchor (batch-hard variants only).
    pub triplets: Vec<Triplet>,
}

/// `ln(1 + e^x)` without overflow.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `D[i, j] = sqrt(max(|a_i|^2 + |b_j|^2 - 2 <a_i, b_j>, 0) + DISTANCE_EPS)`.
pub fn pairwise_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.ncols(), "embedding widths differ");
    let sq_a = a.map_axis(Axis(1), |r| r.dot(&r));
    let sq_b = b.map_axis(Axis(1), |r| r.dot(&r));
    let mut d = a.dot(&b.t());
    for ((i, j), v) in d.indexed_iter_mut() {
        let q = sq_a[i] + sq_b[j] - 2.0 * *v;
        *v = (q.max(0.0) + DISTANCE_EPS).sqrt();
    }
    d
}

/// Adds `coeff * dD(i, j) / dE` to `grad`, where both rows live in `e`.
fn add_distance_grad(
    grad: &mut Array2<f64>,
    e: ArrayView2<'_, f64>,
    i: usize,
    j: usize,
    dist: f64,
    coeff: f64,
) {
    if i == j || coeff == 0.0 {
        return;
    }
    let s = coeff / dist;
    for c in 0..e.ncols() {
        let diff = s * (e[[i, c]] - e[[j, c]]);
        grad[[i, c]] += diff;
        grad[[j, c]] -= diff;
    }
}

fn check_finite(e: ArrayView2<'_, f64>) -> Result<()> {
    if e.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("embeddings"))
    }
}

/// Sum of the margin loss over every `(a, p, n)` with `y_a = y_p != y_n`, `p != a`.
pub fn full_triplet_loss(
    e: ArrayView2<'_, f64>,
    labels: &[u64],
    mode: MarginMode,
) -> Result<LossResult> {
    check_finite(e)?;
    let n = e.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let d = pairwise_distances(e, e);
    let mut grad = Array2::zeros(e.raw_dim());
    let mut loss = 0.0;
    let mut num_active = 0;
    let mut count = 0;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                count += 1;
                let x = d[[a, p]] - d[[a, q]];
                loss += mode.value(x);
                if mode.is_active(x) {
                    num_active += 1;
                }
                let g = mode.derivative(x);
                add_distance_grad(&mut grad, e, a, p, d[[a, p]], g);
                add_distance_grad(&mut grad, e, a, q, d[[a, q]], -g);
            }
        }
    }
    if count == 0 {
        return Err(Error::NoTriplet(
            "need two classes and at least one class with two members".into(),
        ));
    }
    Ok(LossResult {
        loss,
        grad,
        num_active,
        triplets: Vec::new(),
    })
}

/// Checks the P x K multiplicity and returns `(P, K)`.
pub fn check_pk_layout(labels: &[u64]) -> Result<(usize, usize)> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let p = counts.len();
    let k = counts.values().next().copied().unwrap_or(0);
    if counts.values().any(|&c| c != k) {
        return Err(Error::Shape(
            "every class must appear exactly K times".into(),
        ));
    }
    if p < 2 || k < 2 {
        return Err(Error::NoTriplet(format!(
            "batch-hard needs P >= 2 and K >= 2, got P={p}, K={k}"
        )));
    }
    Ok((p, k))
}

struct HardSelection {
    anchors: Vec<usize>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

/// Shared tail of both batch-hard variants: evaluates the selected
/// triplets and back-propagates through the chosen distances.
fn reduce_hard(
    e: ArrayView2<'_, f64>,
    d: &Array2<f64>,
    sel: HardSelection,
    mode: MarginMode,
    reduction: Reduction,
) -> LossResult {
    let scale = match reduction {
        Reduction::Mean => 1.0 / sel.anchors.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Array2::zeros(e.raw_dim());
    let mut loss = 0.0;
    let mut num_active = 0;
    let mut triplets = Vec::with_capacity(sel.anchors.len());
    for ((&a, &p), &q) in sel.anchors.iter().zip(&sel.positives).zip(&sel.negatives) {
        let x = d[[a, p]] - d[[a, q]];
        loss += mode.value(x);
        if mode.is_active(x) {
            num_active += 1;
        }
        let g = scale * mode.derivative(x);
        add_distance_grad(&mut grad, e, a, p, d[[a, p]], g);
        add_distance_grad(&mut grad, e, a, q, d[[a, q]], -g);
        triplets.push(Triplet {
            anchor: a,
            positive: p,
            negative: q,
        });
    }
    LossResult {
        loss: loss * scale,
        grad,
        num_active,
        triplets,
    }
}

/// Farthest positive and closest negative for `anchor`; ties go to the
/// lowest index.
fn hardest(
    d: &Array2<f64>,
    anchor: usize,
    positives: impl Iterator<Item = usize>,
    negatives: impl Iterator<Item = usize>,
) -> (usize, usize) {
    let mut best_p = (usize::MAX, f64::NEG_INFINITY);
    for p in positives {
        if p != anchor && d[[anchor, p]] > best_p.1 {
            best_p = (p, d[[anchor, p]]);
        }
    }
    let mut best_n = (usize::MAX, f64::INFINITY);
    for q in negatives {
        if d[[anchor, q]] < best_n.1 {
            best_n = (q, d[[anchor, q]]);
        }
    }
    (best_p.0, best_n.0)
}

/// Batch Hard loss over a P x K batch, averaged over anchors.
pub fn batch_hard_loss(
    e: ArrayView2<'_, f64>,
    labels: &[u64],
    mode: MarginMode,
) -> Result<LossResult> {
    batch_hard_loss_with(e, labels, mode, Reduction::Mean)
}

pub fn batch_hard_loss_with(
    e: ArrayView2<'_, f64>,
    labels: &[u64],
    mode: MarginMode,
    reduction: Reduction,
) -> Result<LossResult> {
    check_finite(e)?;
    let n = e.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    check_pk_layout(labels)?;
    let d = pairwise_distances(e, e);
    let mut sel = HardSelection {
        anchors: (0..n).collect(),
        positives: Vec::with_capacity(n),
        negatives: Vec::with_capacity(n),
    };
    for a in 0..n {
        let (p, q) = hardest(
            &d,
            a,
            (0..n).filter(|&j| labels[j] == labels[a]),
            (0..n).filter(|&j| labels[j] != labels[a]),
        );
        sel.positives.push(p);
        sel.negatives.push(q);
    }
    Ok(reduce_hard(e, &d, sel, mode, reduction))
}

/// Batch Hard restricted to the first `k` rows, which are mutually positive;
/// every later row is a negative for them.
pub fn modified_batch_hard_loss(
    e: ArrayView2<'_, f64>,
    k: usize,
    mode: MarginMode,
) -> Result<LossResult> {
    modified_batch_hard_loss_with(e, k, mode, Reduction::Mean)
}

pub fn modified_batch_hard_loss_with(
    e: ArrayView2<'_, f64>,
    k: usize,
    mode: MarginMode,
    reduction: Reduction,
) -> Result<LossResult> {
    check_finite(e)?;
    let n = e.nrows();
    if k < 2 {
        return Err(Error::NoTriplet(format!(
            "positive group needs K >= 2, got {k}"
        )));
    }
    if !n.is_multiple_of(k) || n / k < 2 {
        return Err(Error::Shape(format!(
            "{n} rows is not P x K with P >= 2 for K={k}"
        )));
    }
    let d = pairwise_distances(e, e);
    let mut sel = HardSelection {
        anchors: (0..k).collect(),
        positives: Vec::with_capacity(k),
        negatives: Vec::with_capacity(k),
    };
    for a in 0..k {
        let (p, q) = hardest(&d, a, 0..k, k..n);
        sel.positives.push(p);
        sel.negatives.push(q);
    }
    Ok(reduce_hard(e, &d, sel, mode, reduction))
}
