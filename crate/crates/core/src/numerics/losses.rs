//! Correspondence losses over single descriptors, each returning the loss and
//! its gradient with respect to every input vector.

use serde::{Deserialize, Serialize};

use super::features::check_unit;
use crate::error::{Error, Result};
use crate::scalar::{dot, log_sum_exp, softmax, Scalar};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.3;
pub const DEFAULT_TRIPLET_MARGIN: f64 = 3.0;

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "descriptor lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// φ(p, q) = f_p · f_q / τ
pub fn similarity<T: Scalar>(f_p: &[T], f_q: &[T], tau: T) -> Result<T> {
    same_len(f_p, f_q)?;
    Ok(dot(f_p, f_q) / tau)
}

/// −log softmax(φ)[0] where `phi[0]` is the positive.
pub fn nce_from_similarities<T: Scalar>(phi: &[T]) -> T {
    log_sum_exp(phi) - phi[0]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NceOutput<T> {
    pub loss: T,
    pub grad_p: Vec<T>,
    pub grad_p_plus: Vec<T>,
    pub grad_negatives: Vec<Vec<T>>,
}

/// Contrastive loss of the positive against `negatives`, without the unit
/// norm precondition. Use [`nce_loss`] on real descriptors.
pub fn nce_loss_unchecked<T: Scalar>(
    f_p: &[T],
    f_p_plus: &[T],
    negatives: &[&[T]],
    tau: T,
) -> Result<NceOutput<T>> {
    if negatives.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    if !(tau > T::zero()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    same_len(f_p, f_p_plus)?;
    let mut phi = Vec::with_capacity(negatives.len() + 1);
    phi.push(dot(f_p, f_p_plus) / tau);
    for n in negatives {
        same_len(f_p, n)?;
        phi.push(dot(f_p, n) / tau);
    }
    let loss = nce_from_similarities(&phi);
    let q = softmax(&phi);

    // dL/dφ0 = q0 − 1, dL/dφi = qi
    let d0 = (q[0] - T::one()) / tau;
    let mut grad_p: Vec<T> = f_p_plus.iter().map(|&v| d0 * v).collect();
    let grad_p_plus: Vec<T> = f_p.iter().map(|&v| d0 * v).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for (n, &qi) in negatives.iter().zip(&q[1..]) {
        let di = qi / tau;
        for (g, &v) in grad_p.iter_mut().zip(n.iter()) {
            *g += di * v;
        }
        grad_negatives.push(f_p.iter().map(|&v| di * v).collect());
    }
    Ok(NceOutput {
        loss,
        grad_p,
        grad_p_plus,
        grad_negatives,
    })
}

/// Contrastive loss over unit-norm descriptors.
pub fn nce_loss<T: Scalar>(
    f_p: &[T],
    f_p_plus: &[T],
    negatives: &[&[T]],
    tau: T,
) -> Result<NceOutput<T>> {
    check_unit(f_p)?;
    check_unit(f_p_plus)?;
    for n in negatives {
        check_unit(n)?;
    }
    nce_loss_unchecked(f_p, f_p_plus, negatives, tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairOutput<T> {
    pub loss: T,
    pub grad_p: Vec<T>,
    pub grad_p_plus: Vec<T>,
}

/// ‖f_p − f_p⁺‖²
pub fn mse_loss<T: Scalar>(f_p: &[T], f_p_plus: &[T]) -> Result<PairOutput<T>> {
    same_len(f_p, f_p_plus)?;
    let diff: Vec<T> = f_p.iter().zip(f_p_plus).map(|(&a, &b)| a - b).collect();
    let two = T::lit(2.0);
    Ok(PairOutput {
        loss: dot(&diff, &diff),
        grad_p: diff.iter().map(|&d| two * d).collect(),
        grad_p_plus: diff.iter().map(|&d| -two * d).collect(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletForm {
    /// max(0, ‖p − p⁺‖² − ‖p − p⁻‖² + m)
    #[default]
    Standard,
    /// max(0, ‖p − p⁻‖² − ‖p − p⁺‖² + m), with the distance terms swapped.
    AsPrinted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletOutput<T> {
    pub loss: T,
    pub grad_p: Vec<T>,
    pub grad_p_plus: Vec<T>,
    pub grad_p_minus: Vec<T>,
}

/// Hinge on squared distances. The subgradient at the hinge is zero.
pub fn triplet_loss<T: Scalar>(
    f_p: &[T],
    f_p_plus: &[T],
    f_p_minus: &[T],
    margin: T,
    form: TripletForm,
) -> Result<TripletOutput<T>> {
    same_len(f_p, f_p_plus)?;
    same_len(f_p, f_p_minus)?;
    if margin < T::zero() {
        return Err(Error::invalid("triplet margin must be non-negative"));
    }
    let d_pos: Vec<T> = f_p.iter().zip(f_p_plus).map(|(&a, &b)| a - b).collect();
    let d_neg: Vec<T> = f_p.iter().zip(f_p_minus).map(|(&a, &b)| a - b).collect();
    let (dp, dn) = (dot(&d_pos, &d_pos), dot(&d_neg, &d_neg));
    // sign = +1 on the positive distance for the standard form
    let sign = match form {
        TripletForm::Standard => T::one(),
        TripletForm::AsPrinted => -T::one(),
    };
    let raw = sign * (dp - dn) + margin;
    let n = f_p.len();
    if raw <= T::zero() {
        return Ok(TripletOutput {
            loss: T::zero(),
            grad_p: vec![T::zero(); n],
            grad_p_plus: vec![T::zero(); n],
            grad_p_minus: vec![T::zero(); n],
        });
    }
    let two = T::lit(2.0) * sign;
    Ok(TripletOutput {
        loss: raw,
        grad_p: d_pos.iter().zip(&d_neg).map(|(&a, &b)| two * (a - b)).collect(),
        grad_p_plus: d_pos.iter().map(|&a| -two * a).collect(),
        grad_p_minus: d_neg.iter().map(|&b| two * b).collect(),
    })
}

/// Σ classification losses + λ · mean of the 3D losses (zero when there are
/// none, as for pseudo-pairs).
pub fn total_loss<T: Scalar>(cls_losses: &[T], pair_losses: &[T], lambda: T) -> T {
    let cls: T = cls_losses.iter().copied().sum();
    if pair_losses.is_empty() {
        return cls;
    }
    let mean = pair_losses.iter().copied().sum::<T>() / T::from_usize_lossy(pair_losses.len());
    cls + lambda * mean
}
