use super::MetricKind;
use serde::{Deserialize, Serialize};

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn mae(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let s: NeumaierSum = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).collect();
    s.value() / pred.len().max(1) as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    assert_eq!(pred.len(), truth.len());
    let s: NeumaierSum = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).collect();
    (s.value() / pred.len().max(1) as f64).sqrt()
}

/// Median of a non-empty slice (mean of the two middle values for even
/// length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and population standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let m = values.iter().copied().collect::<NeumaierSum>().value() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).collect::<NeumaierSum>().value() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

impl Metrics {
    pub fn new(pred: &[f64], truth: &[f64]) -> Self {
        let m = Self {
            mae: mae(pred, truth),
            rmse: rmse(pred, truth),
            count: pred.len(),
        };
        debug_assert!(m.rmse + 1e-12 * m.rmse.max(1.0) >= m.mae || m.rmse.is_nan());
        m
    }

    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Mae => self.mae,
            MetricKind::Rmse => self.rmse,
        }
    }
}
