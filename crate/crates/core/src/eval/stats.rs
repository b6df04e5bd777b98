use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-tailed.
    pub p: f64,
}

/// Paired two-tailed Student t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!("a paired t-test needs at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 || !var.is_finite() {
        return Err(Error::DegeneratePairs);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    Ok(TTest { t, df, p: two_tailed_p(t, df as f64) })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom, via
/// `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn two_tailed_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}
