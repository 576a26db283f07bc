//! Adam optimizer and inverted dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::TensorMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first_moment: TensorMap,
    second_moment: TensorMap,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: TensorMap::new(),
            second_moment: TensorMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first_moment.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second_moment.get(name)
    }

    /// One bias-corrected Adam update of every parameter that has a
    /// gradient. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Input(format!("gradient for unknown parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("parameter '{name}' is {:?} but its gradient is {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let correction1 = 1.0 - beta1.powi(self.step as i32);
        let correction2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let param = params.get_mut(name).expect("checked above");
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / correction1;
                let v_hat = v[i] / correction2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 − rate)`.
pub fn dropout_mask(shape: Vec<usize>, rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Ok(Tensor::from_parts(shape, data))
}

/// Applies dropout in training mode; identity otherwise.
pub fn dropout(x: &Tensor, rate: f64, seed: u64, training: bool) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(x.shape().to_vec(), rate, &mut rng)?;
    let data = x.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, Tensor)]) -> TensorMap {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params(&[("w", Tensor::vector(vec![1.0, -2.0]).unwrap())]);
        let g = params(&[("w", Tensor::zeros(vec![2]))]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p["w"].data(), &[1.0, -2.0]);
        assert_eq!(adam.first_moment("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(adam.second_moment("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after bias correction, so the step is lr / (1 + ε).
        let mut p = params(&[("w", Tensor::scalar(1.0).unwrap())]);
        let g = params(&[("w", Tensor::scalar(1.0).unwrap())]);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut p, &g).unwrap();
        let want = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] - want).abs() < 1e-15);
        assert!((p["w"].data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn descends_a_quadratic() {
        let loss = |w: f64| (w - 3.0).powi(2);
        let mut p = params(&[("w", Tensor::scalar(0.0).unwrap())]);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut last = loss(0.0);
        for _ in 0..2 {
            let w = p["w"].data()[0];
            let g = params(&[("w", Tensor::scalar(2.0 * (w - 3.0)).unwrap())]);
            adam.step(&mut p, &g).unwrap();
            let now = loss(p["w"].data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = params(&[("w", Tensor::vector(vec![1.0, 2.0]).unwrap())]);
        let g = params(&[("w", Tensor::vector(vec![1.0]).unwrap())]);
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut p, &g), Err(Error::Dimension { .. })));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn dropout_degenerate_cases() {
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(dropout(&x, 0.0, 1, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, 1, false).unwrap(), x);
        assert!(dropout(&x, 1.0, 1, true).is_err());
        assert!(dropout(&x, -0.1, 1, false).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let x = Tensor::full(vec![100_000], 1.0);
        let y = dropout(&x, 0.5, 42, true).unwrap();
        let mean = y.data().iter().sum::<f64>() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(dropout(&x, 0.5, 42, true).unwrap(), y);
    }
}
