use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean with a two-sided Student-t confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub n: usize,
    pub mean: f64,
    /// `None` below two samples.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// `None` for an empty sample.
pub fn mean_ci(values: &[f64], level: f64) -> Option<MeanCi> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Some(MeanCi {
            n,
            mean,
            ci_low: None,
            ci_high: None,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom positive")
        .inverse_cdf(0.5 + level / 2.0);
    Some(MeanCi {
        n,
        mean,
        ci_low: Some(mean - t * se),
        ci_high: Some(mean + t * se),
    })
}
