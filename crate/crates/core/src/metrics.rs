//! Kling-Gupta efficiency, its skill-score form and year-wise distributions.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::data::{water_years, Label, PartitionMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KgeComponents {
    /// Ratio of standard deviations, simulated over observed.
    pub alpha: f64,
    /// Ratio of means.
    pub beta: f64,
    /// Linear correlation.
    pub rho: f64,
    pub kge: f64,
    pub kge_ss: f64,
}

/// `1 - (1 - kge) / sqrt(2)`: zero for the mean-flow predictor.
pub fn kge_skill(kge: f64) -> f64 {
    1.0 - (1.0 - kge) / std::f64::consts::SQRT_2
}

/// KGE terms in the caller's number type; `kge_ss` is what training minimizes against.
#[derive(Debug, Clone, Copy)]
pub struct KgeTerms<R> {
    pub alpha: R,
    pub beta: R,
    pub rho: R,
    pub kge: R,
    pub kge_ss: R,
}

impl<R: Real> KgeTerms<R> {
    pub fn values(&self) -> KgeComponents {
        KgeComponents {
            alpha: self.alpha.value(),
            beta: self.beta.value(),
            rho: self.rho.value(),
            kge: self.kge.value(),
            kge_ss: self.kge_ss.value(),
        }
    }
}

/// Generic KGE over paired samples.
pub fn kge_terms<R: Real>(sim: &[R], obs: &[f64]) -> Result<KgeTerms<R>> {
    if sim.len() != obs.len() {
        return Err(Error::Contract(format!(
            "sim has {} values, obs has {}",
            sim.len(),
            obs.len()
        )));
    }
    if sim.len() < 2 {
        return Err(Error::Contract(format!("KGE needs at least 2 values, got {}", sim.len())));
    }
    let n = obs.len() as f64;
    let mu_o = obs.iter().sum::<f64>() / n;
    let sigma_o = (obs.iter().map(|o| (o - mu_o).powi(2)).sum::<f64>() / n).sqrt();
    if !(sigma_o > 0.0) || mu_o == 0.0 {
        return Err(Error::DegenerateObservation);
    }
    let mu_s = R::sum(sim) / n;
    let dev: Vec<R> = sim.iter().map(|&s| s - mu_s).collect();
    let var_s = R::sum_sq(&dev) / n;
    let sd_s = var_s.value().sqrt();
    let (sigma_s, rho) = if sd_s <= 1e-12 * mu_s.value().abs() || sd_s == 0.0 {
        (R::constant(0.0), R::constant(0.0))
    } else {
        let sigma_s = var_s.sqrt();
        let centred: Vec<f64> = obs.iter().map(|o| (o - mu_o) / n).collect();
        let cov = R::lincomb(sim, &centred);
        (sigma_s, cov / (sigma_s * sigma_o))
    };
    let alpha = sigma_s / sigma_o;
    let beta = mu_s / mu_o;
    let ed2 = (rho - 1.0).powi(2) + (alpha - 1.0).powi(2) + (beta - 1.0).powi(2);
    let ed = if ed2.value() > 0.0 {
        ed2.sqrt()
    } else {
        R::constant(0.0)
    };
    let kge = ed.rsub(1.0);
    let kge_ss = (ed / std::f64::consts::SQRT_2).rsub(1.0);
    Ok(KgeTerms {
        alpha,
        beta,
        rho,
        kge,
        kge_ss,
    })
}

pub fn kge(sim: &[f64], obs: &[f64]) -> Result<KgeComponents> {
    kge_terms(sim, obs).map(|t| t.values())
}

/// Select the timesteps carrying `label`.
pub fn masked<T: Copy>(xs: &[T], mask: &PartitionMask, label: Label) -> Result<Vec<T>> {
    if xs.len() != mask.len() {
        return Err(Error::Contract(format!(
            "mask covers {} steps, series has {}",
            mask.len(),
            xs.len()
        )));
    }
    Ok(mask
        .labels()
        .iter()
        .zip(xs)
        .filter(|(l, _)| **l == Some(label))
        .map(|(_, x)| *x)
        .collect())
}

pub fn kge_masked_terms<R: Real>(sim: &[R], obs: &[f64], mask: &PartitionMask, label: Label) -> Result<KgeTerms<R>> {
    kge_terms(&masked(sim, mask, label)?, &masked(obs, mask, label)?)
}

pub fn kge_masked(sim: &[f64], obs: &[f64], mask: &PartitionMask, label: Label) -> Result<KgeComponents> {
    kge_masked_terms(sim, obs, mask, label).map(|t| t.values())
}

/// Linear interpolation between order statistics (R type 7). `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileSummary {
    pub min: f64,
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

impl PercentileSummary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientData("no values to summarize".into()));
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(PercentileSummary {
            min: v[0],
            p5: percentile(&v, 0.05),
            p25: percentile(&v, 0.25),
            p50: percentile(&v, 0.50),
            p75: percentile(&v, 0.75),
            p95: percentile(&v, 0.95),
        })
    }

    /// `(row label, value)` in table order.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("worst", self.min),
            ("5%", self.p5),
            ("25%", self.p25),
            ("median", self.p50),
            ("75%", self.p75),
            ("95%", self.p95),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearScore {
    pub water_year: i32,
    /// `None` when the year's observations are constant.
    pub metrics: Option<KgeComponents>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualDistribution {
    pub years: Vec<YearScore>,
    pub kge_ss: PercentileSummary,
}

impl AnnualDistribution {
    pub fn scored(&self) -> Vec<f64> {
        self.years
            .iter()
            .filter_map(|y| y.metrics.map(|m| m.kge_ss))
            .collect()
    }

    pub fn excluded_years(&self) -> Vec<i32> {
        self.years.iter().filter(|y| y.excluded).map(|y| y.water_year).collect()
    }
}

/// KGE_ss per complete water year and its percentile summary.
pub fn annual_distribution(
    sim: &[f64],
    obs: &[f64],
    dates: &[NaiveDate],
    wy_start_month: u32,
) -> Result<AnnualDistribution> {
    if sim.len() != obs.len() || obs.len() != dates.len() {
        return Err(Error::Contract("sim, obs and dates differ in length".into()));
    }
    let complete: Vec<_> = water_years(dates, wy_start_month)
        .into_iter()
        .filter(|w| w.complete)
        .collect();
    if complete.is_empty() {
        return Err(Error::InsufficientData("no complete water year".into()));
    }
    let mut years = Vec::with_capacity(complete.len());
    for w in complete {
        let r = w.start..w.end;
        match kge(&sim[r.clone()], &obs[r]) {
            Ok(m) => years.push(YearScore {
                water_year: w.label,
                metrics: Some(m),
                excluded: false,
            }),
            Err(Error::DegenerateObservation) => years.push(YearScore {
                water_year: w.label,
                metrics: None,
                excluded: true,
            }),
            Err(e) => return Err(e),
        }
    }
    let scored: Vec<f64> = years.iter().filter_map(|y| y.metrics.map(|m| m.kge_ss)).collect();
    if scored.is_empty() {
        return Err(Error::InsufficientData("every water year has constant observations".into()));
    }
    Ok(AnnualDistribution {
        kge_ss: PercentileSummary::of(&scored)?,
        years,
    })
}

/// Whole-period, per-subset and year-wise skill of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: KgeComponents,
    pub subsets: BTreeMap<Label, KgeComponents>,
    pub annual: AnnualDistribution,
}

pub fn metric_report(
    sim: &[f64],
    obs: &[f64],
    dates: &[NaiveDate],
    mask: &PartitionMask,
    wy_start_month: u32,
) -> Result<MetricReport> {
    let mut subsets = BTreeMap::new();
    for label in Label::ALL {
        if mask.count(label) >= 2 {
            subsets.insert(label, kge_masked(sim, obs, mask, label)?);
        }
    }
    Ok(MetricReport {
        overall: kge(sim, obs)?,
        subsets,
        annual: annual_distribution(sim, obs, dates, wy_start_month)?,
    })
}
