//! Linear Cox proportional-hazards regression fitted by Newton-Raphson on
//! the Breslow partial likelihood, with Wald inference.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::two_sided_p;
use crate::survival::{breslow_baseline, BaselineSurvival, Cohort};
use crate::tensor::Tensor;

/// 97.5th percentile of the standard normal, used for 95% intervals.
pub const Z_95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for CoxConfig {
    fn default() -> Self {
        CoxConfig {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub baseline: BaselineSurvival,
    pub standard_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Log partial likelihood at `beta` (summed, not averaged).
    pub log_likelihood: f64,
}

impl CoxModel {
    pub fn risk(&self, x: &[f64]) -> f64 {
        x.iter().zip(&self.beta).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.beta.len() {
            return Err(Error::dim(
                "cox_predict",
                format!("{} columns for {} coefficients", x.cols(), self.beta.len()),
            ));
        }
        Ok((0..x.rows()).map(|i| self.risk(x.row(i))).collect())
    }
}

/// Log partial likelihood with its score vector and information matrix.
struct PartialStats {
    log_likelihood: f64,
    score: Vec<f64>,
    information: Vec<f64>,
}

/// Risk-set bookkeeping shared across Newton iterations.
struct Design<'a> {
    x: &'a [f64],
    n: usize,
    d: usize,
    /// Tie groups, descending in time.
    groups: Vec<Vec<usize>>,
    events: Vec<bool>,
}

impl<'a> Design<'a> {
    fn new(x: &'a [f64], n: usize, d: usize, cohort: &Cohort) -> Self {
        let times = cohort.times();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut last = f64::NAN;
        for i in order {
            if times[i] == last {
                groups.last_mut().expect("group exists").push(i);
            } else {
                groups.push(vec![i]);
                last = times[i];
            }
        }
        Design {
            x,
            n,
            d,
            groups,
            events: cohort.events(),
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn log_likelihood(&self, beta: &[f64]) -> f64 {
        self.stats(beta, false).log_likelihood
    }

    fn stats(&self, beta: &[f64], derivatives: bool) -> PartialStats {
        let d = self.d;
        let eta = self.eta(beta);
        let shift = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let mut ll = 0.0;
        let mut score = vec![0.0; d];
        let mut info = vec![0.0; d * d];
        for group in &self.groups {
            for &j in group {
                let w = (eta[j] - shift).exp();
                s0 += w;
                if derivatives {
                    let xj = self.row(j);
                    for a in 0..d {
                        s1[a] += w * xj[a];
                        for b in 0..=a {
                            s2[a * d + b] += w * xj[a] * xj[b];
                        }
                    }
                }
            }
            let deaths = group.iter().filter(|&&i| self.events[i]).count();
            if deaths == 0 {
                continue;
            }
            let dk = deaths as f64;
            ll -= dk * (s0.ln() + shift);
            for &i in group.iter().filter(|&&i| self.events[i]) {
                ll += eta[i];
                if derivatives {
                    for (sc, x) in score.iter_mut().zip(self.row(i)) {
                        *sc += x;
                    }
                }
            }
            if derivatives {
                for a in 0..d {
                    let ma = s1[a] / s0;
                    score[a] -= dk * ma;
                    for b in 0..=a {
                        let v = dk * (s2[a * d + b] / s0 - ma * s1[b] / s0);
                        info[a * d + b] += v;
                    }
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                info[b * d + a] = info[a * d + b];
            }
        }
        PartialStats {
            log_likelihood: ll,
            score,
            information: info,
        }
    }
}

/// Lower Cholesky factor of a symmetric positive-definite `d×d` matrix.
/// Fails with the index of the first column whose pivot vanishes relative to
/// its diagonal entry.
fn cholesky(a: &[f64], d: usize) -> std::result::Result<Vec<f64>, usize> {
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut pivot = a[j * d + j];
        for k in 0..j {
            pivot -= l[j * d + k] * l[j * d + k];
        }
        if !(pivot > 1e-9 * a[j * d + j].abs()) || !pivot.is_finite() {
            return Err(j);
        }
        let root = pivot.sqrt();
        l[j * d + j] = root;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / root;
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..d {
        for k in 0..i {
            y[i] -= l[i * d + k] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    for i in (0..d).rev() {
        for k in i + 1..d {
            y[i] -= l[k * d + i] * y[k];
        }
        y[i] /= l[i * d + i];
    }
    y
}

fn inverse_diagonal(l: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            cholesky_solve(l, d, &e)[j]
        })
        .collect()
}

/// Fits `ψ(x) = x·β` by Newton-Raphson with step halving.
///
/// Iteration stops when the largest coefficient change or the score norm
/// drops below `config.tol`. Running out of iterations yields a model with
/// `converged == false` rather than an error.
pub fn fit_coxph(
    x: &Tensor,
    covariate_names: &[String],
    cohort: &Cohort,
    config: &CoxConfig,
) -> Result<CoxModel> {
    let (n, d) = (x.rows(), x.cols());
    if x.ndim() != 2 || n != cohort.len() {
        return Err(Error::dim(
            "fit_coxph",
            format!("design {:?} for {} patients", x.shape(), cohort.len()),
        ));
    }
    if covariate_names.len() != d {
        return Err(Error::dim(
            "fit_coxph",
            format!("{} names for {d} covariates", covariate_names.len()),
        ));
    }
    if n < d {
        return Err(Error::Input(format!("{n} patients cannot identify {d} coefficients")));
    }
    if cohort.n_events() == 0 {
        return Err(Error::UndefinedLikelihood("cohort has no observed events".into()));
    }

    // Centering leaves β unchanged and keeps exp(η) well scaled.
    let means: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .map(|(i, j)| x.get(i, j) - means[j])
        .collect();
    let design = Design::new(&centered, n, d, cohort);

    let singular = |j: usize| Error::Singular {
        column: covariate_names[j].clone(),
    };

    let mut beta = vec![0.0; d];
    let mut stats = design.stats(&beta, true);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let score_norm = stats.score.iter().map(|s| s * s).sum::<f64>().sqrt();
        if score_norm < config.tol {
            converged = true;
            break;
        }
        let l = cholesky(&stats.information, d).map_err(singular)?;
        let mut step = cholesky_solve(&l, d, &stats.score);
        iterations += 1;
        let mut candidate: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
        let mut halvings = 0;
        while design.log_likelihood(&candidate) < stats.log_likelihood && halvings < 30 {
            step.iter_mut().for_each(|s| *s *= 0.5);
            candidate = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
            halvings += 1;
        }
        if design.log_likelihood(&candidate) < stats.log_likelihood {
            // No ascent direction left at machine precision.
            converged = step.iter().all(|s| s.abs() < config.tol.sqrt());
            break;
        }
        beta = candidate;
        stats = design.stats(&beta, true);
        if step.iter().fold(0.0f64, |m, s| m.max(s.abs())) < config.tol {
            converged = true;
            break;
        }
    }

    let l = cholesky(&stats.information, d).map_err(singular)?;
    let standard_errors: Vec<f64> = inverse_diagonal(&l, d).into_iter().map(f64::sqrt).collect();
    let risks = x.data().chunks(d).map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect::<Vec<f64>>();
    let baseline = breslow_baseline(cohort, &risks)?;
    Ok(CoxModel {
        beta,
        covariate_names: covariate_names.to_vec(),
        baseline,
        standard_errors,
        converged,
        iterations,
        log_likelihood: stats.log_likelihood,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardRow {
    pub covariate: String,
    pub hazard_ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub stars: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazardReport {
    pub rows: Vec<HazardRow>,
}

/// Hazard ratio, 95% interval and two-sided Wald p-value for one
/// coefficient.
pub fn wald_row(covariate: &str, beta: f64, se: f64) -> HazardRow {
    let p_value = two_sided_p(beta / se);
    HazardRow {
        covariate: covariate.to_string(),
        hazard_ratio: beta.exp(),
        ci_low: (beta - Z_95 * se).exp(),
        ci_high: (beta + Z_95 * se).exp(),
        p_value,
        stars: significance_stars(p_value),
    }
}

pub fn hazard_report(model: &CoxModel) -> Result<HazardReport> {
    if !model.converged {
        return Err(Error::State(format!(
            "model did not converge after {} iterations",
            model.iterations
        )));
    }
    let rows = model
        .covariate_names
        .iter()
        .zip(&model.beta)
        .zip(&model.standard_errors)
        .map(|((name, &b), &se)| wald_row(name, b, se))
        .collect();
    Ok(HazardReport { rows })
}

impl HazardReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["covariate", "hazard_ratio", "ci_low", "ci_high", "p_value", "stars"])?;
        for r in &self.rows {
            w.write_record([
                r.covariate.clone(),
                format!("{:.4}", r.hazard_ratio),
                format!("{:.4}", r.ci_low),
                format!("{:.4}", r.ci_high),
                format!("{:.6}", r.p_value),
                r.stars.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }
}

/// `***` below 0.001, `**` up to 0.01, `*` up to 0.05, otherwise the
/// p-value to two decimals.
pub fn significance_stars(p_value: f64) -> String {
    if p_value < 0.001 {
        "***".into()
    } else if p_value <= 0.01 {
        "**".into()
    } else if p_value <= 0.05 {
        "*".into()
    } else {
        format!("{p_value:.2}")
    }
}
