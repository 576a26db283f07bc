//! Synthetic cohorts with known ground truth.
//!
//! Covariates are standard normal. Event times are exponential with hazard
//! `λ₀·exp(ψ(x))` and censoring times independent exponential with rate
//! `censor_rate` (zero disables censoring).
//!
//! The multimodal truth draws latent factors `z_text, z_image ∈ R⁴`, embeds
//! them into 768/1024-dimensional feature vectors through fixed random
//! loadings plus noise, and adds nonlinear within-modality terms to a linear
//! SAPS part:
//!
//! ```text
//! ψ = β·x_saps + w_t·f(z_text) + w_i·f(z_image)
//! f(z) = 0.8·z₁ + 0.6·(|z₂| − 0.8) + 0.6·z₃·z₄
//! ```
//!
//! Labels threshold fixed projections of `z_text`; the last label ("no
//! finding") is set when no other label is.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureBundle, IMAGE_DIM, LABEL_DIM, NORMAL_LABEL, SAPS_DIM, TEXT_DIM};
use crate::error::{Error, Result};
use crate::io::{save_dataset, SaveOptions, SidecarWriter};
use crate::survival::{make_record, Cohort};
use crate::tensor::Tensor;

const LATENT: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truth {
    /// `ψ = β·x` on the 15 SAPS covariates.
    Linear { beta: Vec<f64> },
    /// `ψ = x₁·x₂` on the SAPS covariates.
    Interaction,
    Multimodal {
        saps_beta: Vec<f64>,
        text_weight: f64,
        image_weight: f64,
        /// Standard deviation of the noise added to embedded features.
        noise: f64,
    },
}

impl Truth {
    /// The multimodal truth used by the ordering experiment.
    pub fn multimodal_default() -> Self {
        Truth::Multimodal {
            saps_beta: (0..SAPS_DIM).map(|j| if j < 5 { 0.25 } else { 0.0 }).collect(),
            text_weight: 1.0,
            image_weight: 1.0,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    /// `λ₀`, events per hour for `ψ = 0`.
    pub baseline_hazard: f64,
    /// Censoring events per hour; 0 means no censoring.
    pub censor_rate: f64,
    pub truth: Truth,
    /// Token count of generated report embeddings; none when absent.
    #[serde(default)]
    pub tokens: Option<usize>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("synthetic cohorts need n ≥ 2".into()));
        }
        if !(self.baseline_hazard > 0.0 && self.baseline_hazard.is_finite()) {
            return Err(Error::Config("baseline_hazard must be positive".into()));
        }
        if !(self.censor_rate >= 0.0 && self.censor_rate.is_finite()) {
            return Err(Error::Config("censor_rate must be nonnegative".into()));
        }
        match &self.truth {
            Truth::Linear { beta } | Truth::Multimodal { saps_beta: beta, .. } if beta.len() != SAPS_DIM => {
                Err(Error::Config(format!("beta needs {SAPS_DIM} entries, got {}", beta.len())))
            }
            Truth::Multimodal { noise, .. } if !(*noise >= 0.0) => Err(Error::Config("noise must be nonnegative".into())),
            _ => Ok(()),
        }?;
        if self.tokens == Some(0) {
            return Err(Error::Config("token count must be positive".into()));
        }
        Ok(())
    }
}

/// Per-patient ground truth written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub risks: Vec<f64>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

fn latent_risk(z: &[f64]) -> f64 {
    0.8 * z[0] + 0.6 * (z[1].abs() - 0.8) + 0.6 * z[2] * z[3]
}

fn round_f32(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

/// Draws an event/censor time pair for risk `psi`.
fn survival_time(rng: &mut impl Rng, psi: f64, baseline_hazard: f64, censor_rate: f64) -> Result<(f64, Option<f64>)> {
    let rate = baseline_hazard * psi.exp();
    let death = Exp::new(rate).map_err(|e| Error::Config(e.to_string()))?.sample(rng);
    let censor = if censor_rate > 0.0 {
        Some(Exp::new(censor_rate).map_err(|e| Error::Config(e.to_string()))?.sample(rng))
    } else {
        None
    };
    Ok((death, censor))
}

/// In-memory cohort. Token matrices, when requested, are returned
/// separately in patient order.
pub fn synthesize(config: &SynthConfig) -> Result<(Dataset, GroundTruth, Vec<Tensor>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Fixed loadings come from their own stream so they do not depend on n.
    let mut loading_rng = ChaCha8Rng::seed_from_u64(config.seed);
    loading_rng.set_stream(1);
    let text_loadings = normals(&mut loading_rng, TEXT_DIM * LATENT);
    let image_loadings = normals(&mut loading_rng, IMAGE_DIM * LATENT);
    let label_dirs = normals(&mut loading_rng, (LABEL_DIM - 1) * LATENT);
    let embed = |z: &[f64], loadings: &[f64], dim: usize, noise: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let scale = 1.0 / (LATENT as f64).sqrt();
        (0..dim)
            .map(|j| {
                let signal: f64 = (0..LATENT).map(|k| loadings[j * LATENT + k] * z[k]).sum::<f64>() * scale;
                signal + noise * normal(rng)
            })
            .collect()
    };

    let mut records = Vec::with_capacity(config.n);
    let mut features = Vec::with_capacity(config.n);
    let mut risks = Vec::with_capacity(config.n);
    let mut tokens = Vec::new();
    for i in 0..config.n {
        let saps = normals(&mut rng, SAPS_DIM);
        let mut bundle = FeatureBundle::saps_only(saps.clone());
        let psi = match &config.truth {
            Truth::Linear { beta } => saps.iter().zip(beta).map(|(x, b)| x * b).sum(),
            Truth::Interaction => saps[0] * saps[1],
            Truth::Multimodal {
                saps_beta,
                text_weight,
                image_weight,
                noise,
            } => {
                let zt = normals(&mut rng, LATENT);
                let zi = normals(&mut rng, LATENT);
                bundle.text = Some(round_f32(embed(&zt, &text_loadings, TEXT_DIM, *noise, &mut rng)));
                bundle.image = Some(round_f32(embed(&zi, &image_loadings, IMAGE_DIM, *noise, &mut rng)));
                let mut labels = vec![0.0; LABEL_DIM];
                for (k, label) in labels.iter_mut().take(LABEL_DIM - 1).enumerate() {
                    let proj: f64 = (0..LATENT).map(|q| label_dirs[k * LATENT + q] * zt[q]).sum();
                    *label = f64::from(u8::from(proj > 2.0));
                }
                labels[NORMAL_LABEL] = f64::from(u8::from(labels.iter().all(|&l| l == 0.0)));
                bundle.labels = Some(labels);
                if let Some(m) = config.tokens {
                    let rows: Vec<f64> = (0..m).flat_map(|_| embed(&zt, &text_loadings, TEXT_DIM, *noise, &mut rng)).collect();
                    tokens.push(Tensor::new(vec![m, TEXT_DIM], round_f32(rows))?);
                }
                let lin: f64 = saps.iter().zip(saps_beta).map(|(x, b)| x * b).sum();
                lin + text_weight * latent_risk(&zt) + image_weight * latent_risk(&zi)
            }
        };
        let (death, censor) = survival_time(&mut rng, psi, config.baseline_hazard, config.censor_rate)?;
        records.push(make_record(format!("s{i}"), Some(death), Some(censor.unwrap_or(f64::INFINITY)))?);
        features.push(bundle);
        risks.push(psi);
    }
    let data = Dataset::new(Cohort::new(records)?, features)?;
    Ok((
        data,
        GroundTruth {
            config: config.clone(),
            risks,
        },
        tokens,
    ))
}

/// Writes `path` (dataset), `<stem>.truth.json` and, with sidecars or
/// tokens, `<stem>.f32` / `<stem>.tokens.f32`.
pub fn gen_synthetic(config: &SynthConfig, path: &Path, options: SaveOptions) -> Result<GroundTruth> {
    let (mut data, truth, tokens) = synthesize(config)?;
    if !tokens.is_empty() {
        let token_path = path.with_extension("tokens.f32");
        let mut w = SidecarWriter::create(&token_path)?;
        for (f, t) in data.features_mut().iter_mut().zip(&tokens) {
            f.tokens = Some(w.write(t.rows(), t.cols(), t.data())?);
        }
        w.finish()?;
    }
    save_dataset(&data, path, options)?;
    let truth_path = path.with_extension("truth.json");
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)? + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok(truth)
}

/// Design matrix and cohort for a linear Cox model with `d = beta.len()`
/// covariates, outside the dataset format.
pub fn linear_cohort(n: usize, beta: &[f64], baseline_hazard: f64, censor_rate: f64, seed: u64) -> Result<(Tensor, Cohort)> {
    if !(baseline_hazard > 0.0) || !(censor_rate >= 0.0) {
        return Err(Error::Config("rates must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * beta.len());
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let row = normals(&mut rng, beta.len());
        let psi: f64 = row.iter().zip(beta).map(|(a, b)| a * b).sum();
        let (death, censor) = survival_time(&mut rng, psi, baseline_hazard, censor_rate)?;
        records.push(make_record(format!("s{i}"), Some(death), Some(censor.unwrap_or(f64::INFINITY)))?);
        x.extend(row);
    }
    Ok((Tensor::matrix(n, beta.len(), x)?, Cohort::new(records)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::c_index;
    use crate::io::load_dataset;

    fn linear(beta: f64, n: usize, censor: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n,
            seed,
            baseline_hazard: 0.01,
            censor_rate: censor,
            truth: Truth::Linear { beta: vec![beta; SAPS_DIM] },
            tokens: None,
        }
    }

    #[test]
    fn no_censoring_means_all_events() {
        let (d, _, _) = synthesize(&linear(0.1, 200, 0.0, 1)).unwrap();
        assert_eq!(d.cohort().n_events(), 200);
        let (d, _, _) = synthesize(&linear(0.1, 200, 0.01, 1)).unwrap();
        assert!(d.cohort().n_events() < 200);
    }

    #[test]
    fn null_truth_gives_chance_concordance() {
        let mut total = 0.0;
        for seed in 0..3 {
            let (d, truth, _) = synthesize(&linear(0.0, 2000, 0.005, seed)).unwrap();
            // With β = 0 every true risk is 0, so score with an unrelated covariate.
            assert!(truth.risks.iter().all(|&r| r == 0.0));
            let x: Vec<f64> = d.features().iter().map(|f| f.saps[0]).collect();
            let c = c_index(d.cohort(), &x).unwrap().value;
            assert!((c - 0.5).abs() < 0.03, "{c}");
            total += c;
        }
        assert!((total / 3.0 - 0.5).abs() < 0.03);
    }

    #[test]
    fn files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let config = SynthConfig {
            n: 20,
            tokens: Some(5),
            ..linear(0.0, 0, 0.01, 3)
        };
        let config = SynthConfig {
            truth: Truth::multimodal_default(),
            ..config
        };
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        gen_synthetic(&config, &a, SaveOptions { sidecar: true }).unwrap();
        gen_synthetic(&config, &b, SaveOptions { sidecar: true }).unwrap();
        for ext in ["f32", "tokens.f32", "truth.json"] {
            assert_eq!(std::fs::read(a.with_extension(ext)).unwrap(), std::fs::read(b.with_extension(ext)).unwrap());
        }
        let text_a = std::fs::read_to_string(&a).unwrap().replace("a.", "X.");
        let text_b = std::fs::read_to_string(&b).unwrap().replace("b.", "X.");
        assert_eq!(text_a, text_b);
        let d = load_dataset(&a).unwrap();
        assert_eq!(d.len(), 20);
        assert!(d.features()[0].tokens.is_some());
        let (mem, _, _) = synthesize(&config).unwrap();
        assert_eq!(d.features()[3].image, mem.features()[3].image);
    }

    #[test]
    fn multimodal_truth_is_informative() {
        let config = SynthConfig {
            truth: Truth::multimodal_default(),
            ..linear(0.0, 1000, 0.002, 5)
        };
        let (d, truth, _) = synthesize(&config).unwrap();
        let c = c_index(d.cohort(), &truth.risks).unwrap().value;
        assert!(c > 0.75, "{c}");
        let labels = d.features()[0].labels.as_ref().unwrap();
        assert_eq!(labels[NORMAL_LABEL] == 1.0, labels[..NORMAL_LABEL].iter().all(|&l| l == 0.0));
    }

    #[test]
    fn invalid_configs() {
        assert!(linear(0.0, 1, 0.0, 0).validate().is_err());
        assert!(SynthConfig { baseline_hazard: 0.0, ..linear(0.0, 5, 0.0, 0) }.validate().is_err());
        assert!(SynthConfig { truth: Truth::Linear { beta: vec![1.0] }, ..linear(0.0, 5, 0.0, 0) }.validate().is_err());
    }
}
