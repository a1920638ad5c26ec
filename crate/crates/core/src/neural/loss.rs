use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::layer::L2_EPS;
use crate::error::{Error, Result};

/// Negative cosine similarity and its gradient with respect to `pred`.
///
/// ```
/// use ndarray::arr1;
/// let (loss, _) = coldrec::neural::cosine_loss(arr1(&[1.0, 0.0]).view(), arr1(&[1.0, 1.0]).view()).unwrap();
/// assert!((loss + 1.0 / 2f64.sqrt()).abs() < 1e-12);
/// ```
pub fn cosine_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction has {} dims, target {}",
            pred.len(),
            target.len()
        )));
    }
    let tn = target.dot(&target).sqrt();
    if tn == 0.0 {
        return Err(Error::Degenerate("cosine loss against a zero target".into()));
    }
    let raw = pred.dot(&pred).sqrt();
    let pn = raw.max(L2_EPS);
    let dot = pred.dot(&target);
    let loss = -dot / (pn * tn);
    let grad = if raw > L2_EPS {
        (&pred * (dot / (pn * pn * pn * tn))) - &(&target / (pn * tn))
    } else {
        -&target / (pn * tn)
    };
    Ok((loss, grad))
}

/// Mean cosine loss over rows; the gradient includes the `1/batch` factor.
pub fn batch_cosine_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.nrows();
    if n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grad = Array2::zeros(pred.dim());
    let mut total = 0.0;
    for (i, (p, t)) in pred.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))).enumerate() {
        let (l, g) = cosine_loss(p, t)?;
        total += l;
        grad.row_mut(i).assign(&(g / n as f64));
    }
    Ok((total / n as f64, grad))
}
