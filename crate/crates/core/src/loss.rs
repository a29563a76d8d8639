//! Focal loss for slot classification and MSE for count regression.
//!
//! Both return the mean loss and its gradient w.r.t. the model outputs.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::{Error, Result, Scalar};

pub struct LossOutput<G> {
    pub value: f64,
    pub grad: G,
}

/// Mean over batch and slots of `−(1−p_t)^γ · log p_t`, where `p_t` is the
/// softmax probability of the target class. `logits` and one-hot `targets`
/// are `N×U×K`.
pub fn focal_loss<T: Scalar>(
    logits: ArrayView3<'_, T>,
    targets: ArrayView3<'_, T>,
    gamma: f64,
) -> Result<LossOutput<Array3<T>>> {
    if logits.dim() != targets.dim() {
        return Err(Error::Contract(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.dim(),
            targets.dim()
        )));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Contract(format!("focal gamma {gamma} must be non-negative")));
    }
    let bad = logits.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Contract(format!("{bad} non-finite logits")));
    }
    let (n, u, k) = logits.dim();
    let rows = (n * u) as f64;
    let z_rows = logits.as_standard_layout().into_owned().into_shape_with_order((n * u, k)).expect("N·U×K");
    let y_rows = targets.as_standard_layout().into_owned().into_shape_with_order((n * u, k)).expect("N·U×K");
    let mut grad = Array2::zeros((n * u, k));
    let mut total = 0.0;
    for ((z, y), mut g) in z_rows.outer_iter().zip(y_rows.outer_iter()).zip(grad.outer_iter_mut()) {
        let z: Vec<f64> = z.iter().map(|v| v.to_f64_lossy()).collect();
        let t = y
            .iter()
            .position(|&v| v == T::one())
            .ok_or_else(|| Error::Contract("target row is not one-hot".into()))?;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let log_pt = z[t] - lse;
        let pt = log_pt.exp();
        let q = (1.0 - pt).max(0.0);
        total += -q.powf(gamma) * log_pt;
        // d/dz_j = [γ(1−p)^(γ−1)·p·log p − (1−p)^γ]·(δ_jt − p_j)
        let focus = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * pt * log_pt
        };
        let coef = focus - q.powf(gamma);
        for j in 0..k {
            let pj = (z[j] - lse).exp();
            let delta = if j == t { 1.0 } else { 0.0 };
            g[j] = T::lit(coef * (delta - pj) / rows);
        }
    }
    Ok(LossOutput {
        value: total / rows,
        grad: grad.into_shape_with_order((n, u, k)).expect("N×U×K"),
    })
}

/// Mean squared error over batch and the 9 count cells.
pub fn count_loss<T: Scalar>(predicted: ArrayView2<'_, T>, target: ArrayView2<'_, T>) -> Result<LossOutput<Array2<T>>> {
    if predicted.dim() != target.dim() {
        return Err(Error::Contract(format!(
            "predicted {:?} and target {:?} differ in shape",
            predicted.dim(),
            target.dim()
        )));
    }
    if let Some(v) = predicted.iter().find(|&&v| !(v >= T::zero())) {
        return Err(Error::Contract(format!("predicted count {v:?} is negative or not finite")));
    }
    let cells = predicted.len() as f64;
    let diff = &predicted - &target;
    let value = diff.iter().map(|d| d.to_f64_lossy().powi(2)).sum::<f64>() / cells;
    let grad = diff.mapv(|d| d * T::lit(2.0 / cells));
    Ok(LossOutput { value, grad })
}
