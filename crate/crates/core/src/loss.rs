//! Supervised contrastive loss over labelled embedding batches.
//!
//! For anchor `i` with positives `P(i) = {p != i : y_p = y_i}` and candidates
//! `A(i) = {a != i}`, the anchor term is
//!
//! ```text
//! l_i = -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p / t) / sum_{a in A(i)} exp(z_i.z_a / t) )
//! ```
//!
//! Anchors without positives are skipped and counted. The SimCLR / NT-Xent objective
//! is the special case where every source contributes exactly two rows sharing a label.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Tolerance on `| ||z_i|| - 1 |` accepted by [`EmbeddingBatch::new`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over anchors that have at least one positive.
    #[default]
    Mean,
    /// Plain sum over anchors.
    Sum,
}

/// `B x D` unit-norm embeddings with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch<T> {
    embeddings: Array2<T>,
    labels: Vec<usize>,
    temperature: T,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(embeddings: Array2<T>, labels: Vec<usize>, temperature: T) -> Result<Self> {
        let (b, d) = embeddings.dim();
        if b < 2 || d < 1 {
            return Err(Error::Data(format!("embedding batch must be at least 2x1, got {b}x{d}")));
        }
        if labels.len() != b {
            return Err(Error::Data(format!("{} labels for {b} embeddings", labels.len())));
        }
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
                return Err(Error::Data(format!("embedding row {i} has norm {norm}, expected 1")));
            }
        }
        Ok(Self {
            embeddings,
            labels,
            temperature,
        })
    }

    pub fn embeddings(&self) -> ArrayView2<'_, T> {
        self.embeddings.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Temperature-scaled similarity matrix `Z Z^T / t`.
    pub fn logits(&self) -> Array2<T> {
        self.embeddings.dot(&self.embeddings.t()) / self.temperature
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossResult<T> {
    pub value: T,
    pub num_anchors_used: usize,
    pub num_anchors_skipped: usize,
}

/// Loss and `dL/dlogits` for a `B x B` logit matrix (diagonal ignored).
///
/// Every other entry point reduces to this kernel.
pub fn supcon_from_logits<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(LossResult<T>, Array2<T>)> {
    let b = labels.len();
    if logits.dim() != (b, b) {
        return Err(Error::Data(format!("logit matrix {:?} does not match {b} labels", logits.dim())));
    }
    let mut grad = Array2::<T>::zeros((b, b));
    let mut total = T::zero();
    let mut used = 0usize;
    let mut softmax = vec![T::zero(); b];

    for i in 0..b {
        let positives = (0..b).filter(|&p| p != i && labels[p] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        used += 1;
        let row = logits.row(i);
        let max = (0..b)
            .filter(|&a| a != i)
            .map(|a| row[a])
            .fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for a in 0..b {
            softmax[a] = if a == i { T::zero() } else { (row[a] - max).exp() };
            denom += softmax[a];
        }
        let lse = max + denom.ln();
        let inv_p = T::one() / T::from_usize_lossy(positives);
        let mut pos_sum = T::zero();
        for a in 0..b {
            if a == i {
                continue;
            }
            let q = softmax[a] / denom;
            let target = if labels[a] == labels[i] {
                pos_sum += row[a];
                inv_p
            } else {
                T::zero()
            };
            grad[[i, a]] = q - target;
        }
        total += lse - pos_sum * inv_p;
    }

    if used == 0 {
        return Err(Error::DegenerateBatch(format!(
            "no anchor in the batch of {b} has a positive; use two views per source, a larger batch or fewer partitions"
        )));
    }
    let scale = match reduction {
        Reduction::Mean => T::one() / T::from_usize_lossy(used),
        Reduction::Sum => T::one(),
    };
    grad.mapv_inplace(|g| g * scale);
    Ok((
        LossResult {
            value: total * scale,
            num_anchors_used: used,
            num_anchors_skipped: b - used,
        },
        grad,
    ))
}

/// Mean supervised contrastive loss over anchors with positives.
pub fn supcon_loss<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<LossResult<T>> {
    supcon_loss_with(batch, Reduction::Mean)
}

pub fn supcon_loss_with<T: Scalar>(batch: &EmbeddingBatch<T>, reduction: Reduction) -> Result<LossResult<T>> {
    supcon_from_logits(batch.logits().view(), &batch.labels, reduction).map(|(r, _)| r)
}

/// Loss together with its gradient with respect to the embedding rows.
pub fn supcon_value_and_gradient<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    reduction: Reduction,
) -> Result<(LossResult<T>, Array2<T>)> {
    let (res, dlogits) = supcon_from_logits(batch.logits().view(), &batch.labels, reduction)?;
    // logits = Z Z^T / t  =>  dL/dZ = (G + G^T) Z / t
    let sym = &dlogits + &dlogits.t();
    let grad = sym.dot(&batch.embeddings) / batch.temperature;
    Ok((res, grad))
}

/// `dL/dZ` for the mean-reduced loss, rows treated as free variables.
pub fn supcon_gradient<T: Scalar>(batch: &EmbeddingBatch<T>) -> Result<Array2<T>> {
    supcon_value_and_gradient(batch, Reduction::Mean).map(|(_, g)| g)
}

/// Labels `[0, 0, 1, 1, ...]` for `rows` stacked as consecutive view pairs.
pub fn instance_labels(rows: usize) -> Result<Vec<usize>> {
    if !rows.is_multiple_of(2) {
        return Err(Error::Data(format!("view-pair embeddings need an even row count, got {rows}")));
    }
    Ok((0..rows).map(|r| r / 2).collect())
}

/// SimCLR objective: rows `2j` and `2j + 1` are the two views of source `j`.
pub fn simclr_loss<T: Scalar>(pairs: Array2<T>, temperature: T) -> Result<LossResult<T>> {
    let labels = instance_labels(pairs.nrows())?;
    supcon_loss(&EmbeddingBatch::new(pairs, labels, temperature)?)
}

/// Scale every row to unit Euclidean norm.
///
/// Rows with norm below `1e-12` get that epsilon added to the norm; the
/// returned count says how many rows hit the guard.
pub fn l2_normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Vec<T>, usize) {
    let eps = T::lit(1e-12);
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    let mut guarded = 0;
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mut n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n < eps {
            n += eps;
            guarded += 1;
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    (out, norms, guarded)
}

/// Back-propagate through [`l2_normalize_rows`]: `dx = (g - y (y.g)) / ||x||`.
pub fn l2_normalize_backward<T: Scalar>(normalized: &Array2<T>, norms: &[T], grad: &Array2<T>) -> Array2<T> {
    let mut out = grad.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let y = normalized.row(i);
        let dot = y.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum::<T>();
        for (g, &yy) in row.iter_mut().zip(y.iter()) {
            *g = (*g - yy * dot) / norms[i];
        }
    }
    out
}
