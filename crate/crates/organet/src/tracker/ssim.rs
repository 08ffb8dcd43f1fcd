//! Single-window structural similarity between two equally sized patches.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Global SSIM over the whole patch:
/// `(2 mu_a mu_b + c1)(2 cov + c2) / ((mu_a^2 + mu_b^2 + c1)(var_a + var_b + c2))`.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>, c1: f64, c2: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Argument(format!(
            "ssim patches disagree: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let n = a.len() as f64;
    if a.is_empty() {
        return Err(Error::Argument("ssim on empty patches".into()));
    }
    let mu_a = a.iter().sum::<f64>() / n;
    let mu_b = b.iter().sum::<f64>() / n;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&va, &vb) in a.iter().zip(b.iter()) {
        let da = va - mu_a;
        let db = vb - mu_b;
        var_a += da * da;
        var_b += db * db;
        cov += da * db;
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
}
