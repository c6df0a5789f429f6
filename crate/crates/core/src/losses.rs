//! Training losses and the class-transition machinery behind the
//! discriminative loss.
//!
//! Tape functions build differentiable graphs from logits or probability
//! matrices. The `*_value` functions compute the same quantities on plain
//! tensors for diagnostics.

use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Tensor, Var};

/// Added to each row mass before normalizing Λ into a transition matrix.
pub const TRANSITION_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at row {row} is outside 0..{classes}")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("{which} score {value} at row {row} is outside (0, 1)")]
    ScoreOutOfRange {
        which: &'static str,
        row: usize,
        value: f64,
    },
    #[error("correlation entry ({i}, {j}) = {value} is negative")]
    NegativeCorrelation { i: usize, j: usize, value: f64 },
    #[error("{op}: {rows} rows but {labels} labels")]
    LengthMismatch {
        op: &'static str,
        rows: usize,
        labels: usize,
    },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), LossError> {
    t.dims2().ok_or_else(|| {
        LossError::Autograd(AutogradError::BadRank {
            op,
            expected: "a matrix",
            shape: t.shape().to_vec(),
        })
    })
}

/// `B × C` constant with `weight` at `(i, targets[i])` for every present target.
fn selector(rows: usize, cols: usize, targets: impl Iterator<Item = Option<usize>>, weight: f64) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    for (i, t) in targets.enumerate() {
        if let Some(j) = t {
            data[i * cols + j] = weight;
        }
    }
    Tensor::matrix(rows, cols, data).expect("dimensions match")
}

/// Mean cross-entropy of `logits` (`B × C`) against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, LossError> {
    let (b, c) = matrix_dims("cross_entropy", tape.value(logits))?;
    if labels.len() != b {
        return Err(LossError::LengthMismatch {
            op: "cross_entropy",
            rows: b,
            labels: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= c) {
        return Err(LossError::LabelOutOfRange { row, label, classes: c });
    }
    let logp = tape.log_softmax(logits)?;
    let sel = tape.constant(selector(b, c, labels.iter().map(|&l| Some(l)), -1.0 / b as f64));
    let picked = tape.mul(logp, sel)?;
    Ok(tape.sum(picked))
}

/// Masked cross-entropy of strong-view logits against pseudo labels, divided
/// by the full batch size. Abstaining rows contribute nothing.
pub fn consistency_loss(tape: &mut Tape, strong_logits: Var, pseudo: &[Option<usize>]) -> Result<Var, LossError> {
    let (b, c) = matrix_dims("consistency_loss", tape.value(strong_logits))?;
    if pseudo.len() != b {
        return Err(LossError::LengthMismatch {
            op: "consistency_loss",
            rows: b,
            labels: pseudo.len(),
        });
    }
    if let Some((row, label)) = pseudo
        .iter()
        .enumerate()
        .find_map(|(i, p)| p.filter(|&l| l >= c).map(|l| (i, l)))
    {
        return Err(LossError::LabelOutOfRange { row, label, classes: c });
    }
    let logp = tape.log_softmax(strong_logits)?;
    let sel = tape.constant(selector(b, c, pseudo.iter().copied(), -1.0 / b as f64));
    let picked = tape.mul(logp, sel)?;
    Ok(tape.sum(picked))
}

/// `mean log σ(z_src) + mean log(1 − σ(z_tgt))` from discriminator logits.
pub fn adversarial_loss_from_logits(tape: &mut Tape, src_logits: Var, tgt_logits: Var) -> Var {
    let ls = tape.log_sigmoid(src_logits);
    let src = tape.mean(ls);
    let nt = tape.neg(tgt_logits);
    let lt = tape.log_sigmoid(nt);
    let tgt = tape.mean(lt);
    tape.add(src, tgt).expect("both terms are scalars")
}

/// `mean log s + mean log(1 − t)` from discriminator probabilities.
pub fn adversarial_loss(tape: &mut Tape, src_scores: Var, tgt_scores: Var) -> Result<Var, LossError> {
    for (which, v) in [("source", src_scores), ("target", tgt_scores)] {
        if let Some((row, &value)) = tape
            .value(v)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &s)| !(s > 0.0 && s < 1.0))
        {
            return Err(LossError::ScoreOutOfRange { which, row, value });
        }
    }
    let ls = tape.log(src_scores);
    let src = tape.mean(ls);
    let nt = tape.neg(tgt_scores);
    let one_minus = tape.add_scalar(nt, 1.0);
    let lt = tape.log(one_minus);
    let tgt = tape.mean(lt);
    Ok(tape.add(src, tgt)?)
}

/// Λ = P_weakᵀ · P_strong, unnormalized by the batch size.
pub fn correlation_matrix(tape: &mut Tape, p_weak: Var, p_strong: Var) -> Result<Var, LossError> {
    Ok(tape.col_dot(p_weak, p_strong)?)
}

fn row_normalize(tape: &mut Tape, m: Var) -> Result<Var, LossError> {
    let mass = tape.row_sum(m)?;
    let mass = tape.add_scalar(mass, TRANSITION_EPS);
    Ok(tape.div_rows(m, mass)?)
}

/// Weak→strong and strong→weak transition matrices from Λ.
pub fn transition_matrices(tape: &mut Tape, lambda: Var) -> Result<(Var, Var), LossError> {
    let t = tape.value(lambda);
    let (_, c) = matrix_dims("transition_matrices", t)?;
    if let Some((k, &value)) = t.data().iter().enumerate().find(|(_, &v)| v < 0.0 || v.is_nan()) {
        return Err(LossError::NegativeCorrelation {
            i: k / c,
            j: k % c,
            value,
        });
    }
    let forward = row_normalize(tape, lambda)?;
    let lt = tape.transpose(lambda)?;
    let backward = row_normalize(tape, lt)?;
    Ok((forward, backward))
}

/// Off-diagonal mass minus diagonal mass, averaged over both directions.
pub fn transition_loss(tape: &mut Tape, t1: Var, t2: Var) -> Result<Var, LossError> {
    let (r, c) = matrix_dims("transition_loss", tape.value(t1))?;
    if r != c || tape.value(t2).shape() != [r, c] {
        return Err(LossError::Autograd(AutogradError::ShapeMismatch {
            op: "transition_loss",
            lhs: tape.value(t1).shape().to_vec(),
            rhs: tape.value(t2).shape().to_vec(),
        }));
    }
    let mut eye = vec![0.0; c * c];
    for i in 0..c {
        eye[i * c + i] = 1.0;
    }
    let eye = tape.constant(Tensor::matrix(c, c, eye).expect("square"));
    let mut half = |t: Var| -> Result<Var, LossError> {
        let total = tape.sum(t);
        let diag = tape.mul(t, eye)?;
        let tr = tape.sum(diag);
        let tr2 = tape.scale(tr, 2.0);
        let d = tape.sub(total, tr2)?;
        Ok(tape.scale(d, 0.5))
    };
    let a = half(t1)?;
    let b = half(t2)?;
    Ok(tape.add(a, b)?)
}

/// L_d from the weak and strong prediction matrices, end to end.
pub fn discriminative_loss(tape: &mut Tape, p_weak: Var, p_strong: Var) -> Result<Var, LossError> {
    let lambda = correlation_matrix(tape, p_weak, p_strong)?;
    let (t1, t2) = transition_matrices(tape, lambda)?;
    transition_loss(tape, t1, t2)
}

fn with_tape(f: impl FnOnce(&mut Tape) -> Result<Var, LossError>) -> Result<Tensor, LossError> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).clone())
}

/// Mean `−ln pred[i, y_i]` over a probability matrix.
pub fn source_classification_loss_value(pred: &Tensor, labels: &[usize]) -> Result<f64, LossError> {
    let (b, c) = matrix_dims("source_classification_loss", pred)?;
    if labels.len() != b {
        return Err(LossError::LengthMismatch {
            op: "source_classification_loss",
            rows: b,
            labels: labels.len(),
        });
    }
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(LossError::LabelOutOfRange {
                row: i,
                label: y,
                classes: c,
            });
        }
        acc -= pred.row(i)[y].ln();
    }
    Ok(acc / b as f64)
}

pub fn adversarial_loss_value(src_scores: &Tensor, tgt_scores: &Tensor) -> Result<f64, LossError> {
    with_tape(|t| {
        let s = t.constant(src_scores.clone());
        let g = t.constant(tgt_scores.clone());
        adversarial_loss(t, s, g)
    })
    .map(|v| v.item())
}

/// `(1/B) Σ −ln strong_pred[i, ŷ_i]` over rows with a pseudo label.
pub fn consistency_loss_value(strong_pred: &Tensor, pseudo: &[Option<usize>]) -> Result<f64, LossError> {
    let (b, c) = matrix_dims("consistency_loss", strong_pred)?;
    if pseudo.len() != b {
        return Err(LossError::LengthMismatch {
            op: "consistency_loss",
            rows: b,
            labels: pseudo.len(),
        });
    }
    let mut acc = 0.0;
    for (i, p) in pseudo.iter().enumerate() {
        if let Some(y) = *p {
            if y >= c {
                return Err(LossError::LabelOutOfRange {
                    row: i,
                    label: y,
                    classes: c,
                });
            }
            acc -= strong_pred.row(i)[y].ln();
        }
    }
    Ok(acc / b as f64)
}

pub fn correlation_matrix_value(p_weak: &Tensor, p_strong: &Tensor) -> Result<Tensor, LossError> {
    with_tape(|t| {
        let a = t.constant(p_weak.clone());
        let b = t.constant(p_strong.clone());
        correlation_matrix(t, a, b)
    })
}

pub fn transition_matrices_value(lambda: &Tensor) -> Result<(Tensor, Tensor), LossError> {
    let mut tape = Tape::new();
    let l = tape.constant(lambda.clone());
    let (a, b) = transition_matrices(&mut tape, l)?;
    Ok((tape.value(a).clone(), tape.value(b).clone()))
}

pub fn transition_loss_value(t1: &Tensor, t2: &Tensor) -> Result<f64, LossError> {
    with_tape(|t| {
        let a = t.constant(t1.clone());
        let b = t.constant(t2.clone());
        transition_loss(t, a, b)
    })
    .map(|v| v.item())
}

pub fn discriminative_loss_value(p_weak: &Tensor, p_strong: &Tensor) -> Result<f64, LossError> {
    with_tape(|t| {
        let a = t.constant(p_weak.clone());
        let b = t.constant(p_strong.clone());
        discriminative_loss(t, a, b)
    })
    .map(|v| v.item())
}
