//! Uncertainty metrics over member outputs of shape `[M, B, K]`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Reduction, Tensor};

/// Default floor on the predictive variance used by [`regression_nll`].
pub const MIN_VAR: f64 = 1e-6;
const PROB_TOL: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn dims3(t: &Tensor, what: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [m, b, k] if m > 0 => Ok((m, b, k)),
        _ => Err(Error::dim(what, t.shape(), &[0, 0, 0])),
    }
}

fn check_probs(p: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, b, k) = dims3(p, "member probabilities")?;
    for (r, row) in p.data().chunks(k.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
            return Err(Error::Value(format!(
                "member {} sample {} is not a probability vector (sum {sum})",
                r / b.max(1),
                r % b.max(1)
            )));
        }
    }
    Ok((m, b, k))
}

/// Entropy in nats of the member-averaged distribution, per sample.
pub fn predictive_entropy(probs: &Tensor) -> Result<Tensor> {
    check_probs(probs)?;
    let mean = probs.reduce(&[0], Reduction::Mean)?;
    let b = mean.dim(0);
    let h = (0..b)
        .map(|i| {
            -mean
                .row(i)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .collect();
    Ok(Tensor::vector(h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disagreement {
    /// `[B, K]`: largest pairwise gap per class.
    pub per_class: Tensor,
    /// `[B]`: largest entry of `per_class` per sample.
    pub per_sample: Tensor,
}

/// Running maximum of `|p_m - p_m'|` over all unordered member pairs.
pub fn max_disagreement(probs: &Tensor) -> Result<Disagreement> {
    let (m, b, k) = check_probs(probs)?;
    let mut per_class = Tensor::zeros(&[b, k]);
    let block = b * k;
    let d = probs.data();
    for i in 0..m {
        for j in i + 1..m {
            for (e, md) in per_class.data_mut().iter_mut().enumerate() {
                *md = md.max((d[i * block + e] - d[j * block + e]).abs());
            }
        }
    }
    let per_sample = (0..b)
        .map(|s| per_class.row(s).iter().copied().fold(0.0, f64::max))
        .collect();
    Ok(Disagreement {
        per_class,
        per_sample: Tensor::vector(per_sample),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spread {
    /// `[B, K]` unbiased variance across members.
    pub variance: Tensor,
    /// Set when `M = 1`; the variance is then all zeros.
    pub degenerate: bool,
}

pub fn ensemble_variance(samples: &Tensor) -> Result<Spread> {
    let (m, b, k) = dims3(samples, "member outputs")?;
    if m == 1 {
        return Ok(Spread {
            variance: Tensor::zeros(&[b, k]),
            degenerate: true,
        });
    }
    let mean = samples.reduce(&[0], Reduction::Mean)?;
    let block = b * k;
    let d = samples.data();
    let mut var = Tensor::zeros(&[b, k]);
    for (e, v) in var.data_mut().iter_mut().enumerate() {
        let mu = mean.data()[e];
        let ss: f64 = (0..m).map(|i| (d[i * block + e] - mu).powi(2)).sum();
        *v = ss / (m - 1) as f64;
    }
    Ok(Spread {
        variance: var,
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllResult {
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

/// Gaussian NLL of standardized targets under the ensemble mean and floored
/// unbiased variance, shifted by `ln(y_std)` so it refers to original units.
pub fn regression_nll(
    samples: &Tensor,
    targets: &Tensor,
    min_var: f64,
    y_std: f64,
) -> Result<NllResult> {
    let (m, b, k) = dims3(samples, "member outputs")?;
    if k != 1 || targets.shape() != [b, 1] {
        return Err(Error::dim(
            "regression_nll targets",
            targets.shape(),
            &[b, 1],
        ));
    }
    if m < 2 {
        return Err(Error::Degenerate("NLL needs at least two members".into()));
    }
    if !(y_std > 0.0) {
        return Err(Error::Value("target scale must be positive".into()));
    }
    let mean = samples.reduce(&[0], Reduction::Mean)?;
    let var = ensemble_variance(samples)?.variance;
    let per_sample: Vec<f64> = (0..b)
        .map(|i| {
            let s2 = var.data()[i].max(min_var);
            let r = targets.data()[i] - mean.data()[i];
            0.5 * (LN_2PI + s2.ln()) + r * r / (2.0 * s2) + y_std.ln()
        })
        .collect();
    let mean = per_sample.iter().sum::<f64>() / b.max(1) as f64;
    Ok(NllResult { per_sample, mean })
}

/// Per-sample uncertainty summary.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyReport {
    /// `[B, K]`
    pub mean_prediction: Tensor,
    /// `[B]`, classification only.
    pub entropy: Option<Tensor>,
    /// `[B]`, classification only.
    pub max_disagreement: Option<Tensor>,
    /// `[B, K]`
    pub variance: Tensor,
    pub nll: Option<Vec<f64>>,
}

impl UncertaintyReport {
    pub fn classification(probs: &Tensor) -> Result<Self> {
        Ok(UncertaintyReport {
            mean_prediction: probs.reduce(&[0], Reduction::Mean)?,
            entropy: Some(predictive_entropy(probs)?),
            max_disagreement: Some(max_disagreement(probs)?.per_sample),
            variance: ensemble_variance(probs)?.variance,
            nll: None,
        })
    }

    /// `targets` and `samples` in standardized units; NLL needs `M >= 2`.
    pub fn regression(
        samples: &Tensor,
        targets: Option<&Tensor>,
        min_var: f64,
        y_std: f64,
    ) -> Result<Self> {
        let nll = match targets {
            Some(t) if samples.dim(0) >= 2 => {
                Some(regression_nll(samples, t, min_var, y_std)?.per_sample)
            }
            _ => None,
        };
        Ok(UncertaintyReport {
            mean_prediction: samples.reduce(&[0], Reduction::Mean)?,
            entropy: None,
            max_disagreement: None,
            variance: ensemble_variance(samples)?.variance,
            nll,
        })
    }

    pub fn len(&self) -> usize {
        self.mean_prediction.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per sample.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let k = self.mean_prediction.dim(1);
        let mut header = vec!["sample".to_string()];
        header.extend((0..k).map(|j| format!("mean_{j}")));
        header.extend((0..k).map(|j| format!("variance_{j}")));
        if self.entropy.is_some() {
            header.push("entropy".into());
        }
        if self.max_disagreement.is_some() {
            header.push("max_disagreement".into());
        }
        if self.nll.is_some() {
            header.push("nll".into());
        }
        let mut out = csv::Writer::from_writer(w);
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        out.write_record(&header).map_err(ser)?;
        for i in 0..self.len() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.mean_prediction.row(i).iter().map(f64::to_string));
            rec.extend(self.variance.row(i).iter().map(f64::to_string));
            if let Some(h) = &self.entropy {
                rec.push(h.data()[i].to_string());
            }
            if let Some(md) = &self.max_disagreement {
                rec.push(md.data()[i].to_string());
            }
            if let Some(nll) = &self.nll {
                rec.push(nll[i].to_string());
            }
            out.write_record(&rec).map_err(ser)?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins on `[lo, hi]`; values outside are clamped to the end
    /// bins, non-finite values are skipped.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::Value("histogram needs bins > 0 and hi > lo".into()));
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &v in values.iter().filter(|v| v.is_finite()) {
            let i = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Histogram { edges, counts })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let ser = |e: csv::Error| Error::Serde(e.to_string());
        out.write_record(["bin_lo", "bin_hi", "count"])
            .map_err(ser)?;
        for (i, c) in self.counts.iter().enumerate() {
            out.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
            ])
            .map_err(ser)?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(m: usize, b: usize, k: usize, rows: &[&[f64]]) -> Tensor {
        Tensor::new(vec![m, b, k], rows.concat()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        let u = Tensor::full(&[3, 2, 10], 0.1);
        for h in predictive_entropy(&u).unwrap().data() {
            assert!((h - 10f64.ln()).abs() < 1e-12);
        }
        let hot = probs(2, 1, 3, &[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
        assert_eq!(predictive_entropy(&hot).unwrap().data(), &[0.0]);
        let split = probs(2, 1, 2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!((predictive_entropy(&split).unwrap().data()[0] - 2f64.ln()).abs() < 1e-15);
        let bad = probs(1, 1, 2, &[&[0.7, 0.7]]);
        assert!(matches!(predictive_entropy(&bad), Err(Error::Value(_))));
    }

    #[test]
    fn disagreement_examples() {
        let p = probs(2, 1, 2, &[&[0.9, 0.1], &[0.5, 0.5]]);
        let md = max_disagreement(&p).unwrap();
        assert!(
            md.per_class
                .max_abs_diff(&Tensor::from_rows(&[[0.4, 0.4]]).unwrap())
                .unwrap()
                < 1e-15
        );
        assert!((md.per_sample.data()[0] - 0.4).abs() < 1e-15);
        let one = probs(1, 1, 2, &[&[0.9, 0.1]]);
        assert_eq!(max_disagreement(&one).unwrap().per_sample.data(), &[0.0]);
    }

    #[test]
    fn variance_examples() {
        let s = Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap();
        let v = ensemble_variance(&s).unwrap();
        assert_eq!(v.variance.data(), &[2.0]);
        assert!(!v.degenerate);
        let one = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert!(ensemble_variance(&one).unwrap().degenerate);
    }

    #[test]
    fn nll_analytic_value() {
        // mean 0, unbiased variance 1 from members at -1/sqrt(2) and +1/sqrt(2)
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let s = Tensor::new(vec![2, 1, 1], vec![-a, a]).unwrap();
        let t = Tensor::zeros(&[1, 1]);
        let r = regression_nll(&s, &t, MIN_VAR, 1.0).unwrap();
        assert!((r.mean - 0.918_938_533_204_672_7).abs() < 1e-12);
        let scaled = regression_nll(&s, &t, MIN_VAR, 3.0).unwrap();
        assert!((scaled.mean - r.mean - 3f64.ln()).abs() < 1e-12);
        let one = Tensor::new(vec![1, 1, 1], vec![0.0]).unwrap();
        assert!(matches!(
            regression_nll(&one, &t, MIN_VAR, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn histogram_counts() {
        let h = Histogram::new(&[0.0, 0.1, 0.5, 0.99, 1.0, 7.0, f64::NAN], 0.0, 1.0, 2).unwrap();
        assert_eq!(h.counts, vec![2, 4]);
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
    }
}
