//! Survival records, risk sets, the Cox negative log partial likelihood and
//! the Breslow baseline survival estimator.
//!
//! Times are in hours. Tied event times follow the Breslow convention: every
//! event in a tie group shares the same risk-set denominator.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub patient_id: String,
    /// Hours from admission to death or censoring, `min(T, C)`.
    pub observed_time: f64,
    /// `true` when death was observed.
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(patient_id: impl Into<String>, observed_time: f64, event: bool) -> Result<Self> {
        if !observed_time.is_finite() || observed_time < 0.0 {
            return Err(Error::Input(format!(
                "observed time must be finite and nonnegative, got {observed_time}"
            )));
        }
        Ok(SurvivalRecord {
            patient_id: patient_id.into(),
            observed_time,
            event,
        })
    }
}

/// Builds a record from raw death and censoring times. Death and censoring
/// are mutually exclusive: the earlier one is observed, and a death exactly
/// at the censoring time counts as observed. An infinite censoring time means
/// the patient was never censored.
pub fn make_record(
    patient_id: impl Into<String>,
    death_time: Option<f64>,
    censor_time: Option<f64>,
) -> Result<SurvivalRecord> {
    for t in death_time.iter().chain(censor_time.iter()) {
        if t.is_nan() || *t < 0.0 {
            return Err(Error::Input(format!("negative or NaN time {t}")));
        }
    }
    match (death_time, censor_time) {
        (None, None) => Err(Error::Input(
            "record needs a death time or a censoring time".into(),
        )),
        (Some(d), Some(c)) if d <= c => SurvivalRecord::new(patient_id, d, true),
        (Some(d), None) => SurvivalRecord::new(patient_id, d, true),
        (_, Some(c)) => SurvivalRecord::new(patient_id, c, false),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    records: Vec<SurvivalRecord>,
}

impl Cohort {
    pub fn new(records: Vec<SurvivalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Input("cohort must contain at least one record".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::Input(format!("duplicate patient id '{}'", r.patient_id)));
            }
        }
        Ok(Cohort { records })
    }

    /// Builds a cohort from parallel time/event slices with generated ids.
    pub fn from_times(times: &[f64], events: &[bool]) -> Result<Self> {
        if times.len() != events.len() {
            return Err(Error::dim("cohort", "times and events differ in length"));
        }
        let records = times
            .iter()
            .zip(events)
            .enumerate()
            .map(|(i, (&t, &e))| SurvivalRecord::new(format!("p{i}"), t, e))
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(records)
    }

    pub fn records(&self) -> &[SurvivalRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.observed_time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn n_events(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    /// Indices still under observation at record `index`'s time.
    pub fn risk_set(&self, index: usize) -> Vec<usize> {
        let t = self.records[index].observed_time;
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.observed_time >= t)
            .map(|(j, _)| j)
            .collect()
    }
}

/// Streaming `log Σ exp(x)` with a running maximum.
#[derive(Clone, Copy, Debug)]
struct LogSumExp {
    max: f64,
    acc: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            acc: 0.0,
        }
    }
}

impl LogSumExp {
    fn push(&mut self, x: f64) {
        if x > self.max {
            self.acc = self.acc * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.acc += (x - self.max).exp();
        }
    }

    fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }

    fn value(&self) -> f64 {
        self.max + self.acc.ln()
    }
}

/// Precomputed ordering for repeated evaluation of the Cox partial
/// likelihood on fixed times and events (one training batch, one cohort).
#[derive(Clone, Debug)]
pub struct CoxLoss {
    /// Tie groups in ascending time; each holds member indices.
    groups: Vec<Vec<usize>>,
    group_times: Vec<f64>,
    /// Number of events in each group.
    deaths: Vec<usize>,
    events: Vec<bool>,
    n_events: usize,
}

impl CoxLoss {
    pub fn new(times: &[f64], events: &[bool]) -> Result<Self> {
        if times.len() != events.len() {
            return Err(Error::dim("cox_nll", "times and events differ in length"));
        }
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut group_times: Vec<f64> = Vec::new();
        for i in order {
            match group_times.last() {
                Some(&t) if t == times[i] => groups.last_mut().expect("group exists").push(i),
                _ => {
                    groups.push(vec![i]);
                    group_times.push(times[i]);
                }
            }
        }
        let deaths: Vec<usize> = groups
            .iter()
            .map(|g| g.iter().filter(|&&i| events[i]).count())
            .collect();
        let n_events = deaths.iter().sum();
        Ok(CoxLoss {
            groups,
            group_times,
            deaths,
            events: events.to_vec(),
            n_events,
        })
    }

    pub fn from_cohort(cohort: &Cohort) -> Result<Self> {
        CoxLoss::new(&cohort.times(), &cohort.events())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    fn check(&self, risks: &[f64]) -> Result<()> {
        if risks.len() != self.events.len() {
            return Err(Error::dim(
                "cox_nll",
                format!("{} risks for {} patients", risks.len(), self.events.len()),
            ));
        }
        if self.n_events == 0 {
            return Err(Error::UndefinedLikelihood("cohort has no observed events".into()));
        }
        Ok(())
    }

    /// `log Σ_{j: t_j ≥ t_g} exp(ψ_j)` for every tie group, ascending.
    fn log_risk_sums(&self, risks: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.groups.len()];
        let mut running = LogSumExp::default();
        for (g, members) in self.groups.iter().enumerate().rev() {
            for &i in members {
                running.push(risks[i]);
            }
            out[g] = running.value();
        }
        out
    }

    fn loss_from(&self, risks: &[f64], log_sums: &[f64]) -> f64 {
        let mut total = 0.0;
        for (g, members) in self.groups.iter().enumerate() {
            if self.deaths[g] == 0 {
                continue;
            }
            let event_risk: f64 = members
                .iter()
                .filter(|&&i| self.events[i])
                .map(|&i| risks[i])
                .sum();
            total += event_risk - self.deaths[g] as f64 * log_sums[g];
        }
        -total / self.n_events as f64
    }

    /// Negative log partial likelihood averaged over events.
    pub fn loss(&self, risks: &[f64]) -> Result<f64> {
        self.check(risks)?;
        let log_sums = self.log_risk_sums(risks);
        Ok(self.loss_from(risks, &log_sums))
    }

    /// Loss together with its gradient with respect to each risk.
    pub fn loss_and_grad(&self, risks: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(risks)?;
        let log_sums = self.log_risk_sums(risks);
        let loss = self.loss_from(risks, &log_sums);
        let scale = 1.0 / self.n_events as f64;
        let mut grad = vec![0.0; self.events.len()];
        // Member j of group h sits in the risk set of every group g ≤ h, so it
        // collects Σ_{g ≤ h} d_g · exp(ψ_j − logS_g).
        let mut acc = LogSumExp::default();
        for (h, members) in self.groups.iter().enumerate() {
            if self.deaths[h] > 0 {
                acc.push((self.deaths[h] as f64).ln() - log_sums[h]);
            }
            for &j in members {
                let expected = if acc.is_empty() {
                    0.0
                } else {
                    (risks[j] + acc.value()).exp()
                };
                let observed = if self.events[j] { 1.0 } else { 0.0 };
                grad[j] = scale * (expected - observed);
            }
        }
        Ok((loss, grad))
    }

    /// Breslow cumulative baseline hazard increments, one per event time.
    fn breslow(&self, risks: &[f64]) -> Result<BaselineSurvival> {
        self.check(risks)?;
        let log_sums = self.log_risk_sums(risks);
        let mut event_times = Vec::new();
        let mut survival_values = Vec::new();
        let mut cumulative = 0.0;
        for g in 0..self.groups.len() {
            if self.deaths[g] == 0 {
                continue;
            }
            cumulative += self.deaths[g] as f64 * (-log_sums[g]).exp();
            event_times.push(self.group_times[g]);
            survival_values.push((-cumulative).exp().max(f64::MIN_POSITIVE));
        }
        BaselineSurvival::new(event_times, survival_values)
    }
}

/// `−(1/E)·Σ_{i:δ_i=1}[ψ_i − log Σ_{j∈R(i)} exp(ψ_j)]`.
pub fn cox_nll(risks: &[f64], cohort: &Cohort) -> Result<f64> {
    CoxLoss::from_cohort(cohort)?.loss(risks)
}

pub fn cox_nll_grad(risks: &[f64], cohort: &Cohort) -> Result<(f64, Vec<f64>)> {
    CoxLoss::from_cohort(cohort)?.loss_and_grad(risks)
}

/// Right-continuous step function `S₀(t)`, equal to 1 before the first
/// event time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSurvival {
    event_times: Vec<f64>,
    survival_values: Vec<f64>,
}

impl BaselineSurvival {
    pub fn new(event_times: Vec<f64>, survival_values: Vec<f64>) -> Result<Self> {
        if event_times.len() != survival_values.len() {
            return Err(Error::dim("baseline", "times and values differ in length"));
        }
        if event_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Input("baseline event times must strictly increase".into()));
        }
        if survival_values.iter().any(|&s| !(s > 0.0 && s <= 1.0)) {
            return Err(Error::Input("baseline survival values must lie in (0, 1]".into()));
        }
        if survival_values.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Input("baseline survival must be nonincreasing".into()));
        }
        Ok(BaselineSurvival {
            event_times,
            survival_values,
        })
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn survival_values(&self) -> &[f64] {
        &self.survival_values
    }

    pub fn at(&self, t: f64) -> f64 {
        let k = self.event_times.partition_point(|&e| e <= t);
        if k == 0 {
            1.0
        } else {
            self.survival_values[k - 1]
        }
    }
}

/// Breslow estimate of the baseline survival for the reference patient
/// with risk 0. Values that would underflow are floored at
/// `f64::MIN_POSITIVE`.
pub fn breslow_baseline(cohort: &Cohort, risks: &[f64]) -> Result<BaselineSurvival> {
    CoxLoss::from_cohort(cohort)?.breslow(risks)
}

/// `S(t | ψ) = S₀(t)^{exp ψ}`.
pub fn survival_prob(baseline: &BaselineSurvival, risk: f64, t: f64) -> f64 {
    let s0 = baseline.at(t);
    if s0 >= 1.0 {
        return 1.0;
    }
    (risk.exp() * s0.ln()).exp()
}
