//! Early-average multimodal fusion network.
//!
//! Each modality passes through one fully connected layer with ReLU and
//! dropout. Every non-SAPS branch output is averaged element-wise, the
//! average is concatenated in front of the SAPS branch output, and a linear
//! head maps the fused vector to the risk ψ:
//!
//! ```text
//! h_m   = dropout(ReLU(x_m·W_m + b_m))
//! fused = mean(h_text, h_image, …) ⊕ h_saps      (h_saps alone if SAPS-only)
//! ψ     = fused·w_head + b_head
//! ```
//!
//! Training minimises the Cox negative log partial likelihood over
//! mini-batches, with risk sets taken within each batch.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Session, Tape, TensorMap};
use crate::dataset::{Dataset, FeatureBundle, Modality};
use crate::error::{Error, Result};
use crate::optim::{dropout_mask, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shape `fan_in×fan_out`.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub modality: Modality,
    pub in_dim: usize,
    pub out_dim: usize,
    pub dropout_rate: f64,
}

impl BranchSpec {
    /// Published widths: saps 15→15, labels 14→14, text 768→32,
    /// image 1024→32; gcn 224→32.
    pub fn default_for(modality: Modality, dropout_rate: f64) -> Self {
        let out_dim = match modality {
            Modality::Saps => 15,
            Modality::Labels => 14,
            Modality::Text | Modality::Image | Modality::Gcn => 32,
        };
        BranchSpec {
            modality,
            in_dim: modality.dim(),
            out_dim,
            dropout_rate,
        }
    }
}

/// Branch configuration of one network, in canonical modality order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BranchSpec>", into = "Vec<BranchSpec>")]
pub struct ModalitySet {
    branches: Vec<BranchSpec>,
}

impl TryFrom<Vec<BranchSpec>> for ModalitySet {
    type Error = Error;
    fn try_from(v: Vec<BranchSpec>) -> Result<Self> {
        ModalitySet::new(v)
    }
}

impl From<ModalitySet> for Vec<BranchSpec> {
    fn from(m: ModalitySet) -> Self {
        m.branches
    }
}

impl ModalitySet {
    pub fn new(mut branches: Vec<BranchSpec>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Config("modality set is empty".into()));
        }
        branches.sort_by_key(|b| b.modality);
        if branches.windows(2).any(|w| w[0].modality == w[1].modality) {
            return Err(Error::Config("modality listed twice".into()));
        }
        if branches[0].modality != Modality::Saps {
            return Err(Error::Config("the saps branch is required".into()));
        }
        for b in &branches {
            if b.in_dim == 0 || b.out_dim == 0 {
                return Err(Error::Config(format!("{} branch has a zero dimension", b.modality)));
            }
            if !(0.0..1.0).contains(&b.dropout_rate) {
                return Err(Error::Config(format!("{} dropout must lie in [0, 1)", b.modality)));
            }
        }
        let averaged: Vec<&BranchSpec> = branches[1..].iter().collect();
        if let Some(first) = averaged.first() {
            if let Some(bad) = averaged.iter().find(|b| b.out_dim != first.out_dim) {
                return Err(Error::Config(format!(
                    "averaged branches need equal widths: {} has {}, {} has {}",
                    first.modality, first.out_dim, bad.modality, bad.out_dim
                )));
            }
        }
        Ok(ModalitySet { branches })
    }

    /// Default-width branches for the given modalities.
    pub fn with_defaults(modalities: &[Modality], dropout_rate: f64) -> Result<Self> {
        ModalitySet::new(
            modalities
                .iter()
                .map(|&m| BranchSpec::default_for(m, dropout_rate))
                .collect(),
        )
    }

    pub fn branches(&self) -> &[BranchSpec] {
        &self.branches
    }

    pub fn saps(&self) -> &BranchSpec {
        &self.branches[0]
    }

    pub fn contains(&self, modality: Modality) -> bool {
        self.branches.iter().any(|b| b.modality == modality)
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.branches.iter().map(|b| b.modality).collect()
    }

    /// Length of the vector entering the head.
    pub fn fused_dim(&self) -> usize {
        let saps = self.saps().out_dim;
        match self.branches.get(1) {
            Some(b) => b.out_dim + saps,
            None => saps,
        }
    }
}

/// The named experiments of the model comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "saps_scores")]
    SapsScores,
    #[serde(rename = "saps_risk_factors")]
    SapsRiskFactors,
    #[serde(rename = "saps+labels")]
    SapsLabels,
    #[serde(rename = "saps+transformer")]
    SapsTransformer,
    #[serde(rename = "saps+gcn")]
    SapsGcn,
    #[serde(rename = "saps+image")]
    SapsImage,
    #[serde(rename = "multimodal_text_image")]
    MultimodalTextImage,
    #[serde(rename = "multimodal_gcn_image")]
    MultimodalGcnImage,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 8] = [
        ModelVariant::SapsScores,
        ModelVariant::SapsRiskFactors,
        ModelVariant::SapsLabels,
        ModelVariant::SapsTransformer,
        ModelVariant::SapsGcn,
        ModelVariant::SapsImage,
        ModelVariant::MultimodalTextImage,
        ModelVariant::MultimodalGcnImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::SapsScores => "saps_scores",
            ModelVariant::SapsRiskFactors => "saps_risk_factors",
            ModelVariant::SapsLabels => "saps+labels",
            ModelVariant::SapsTransformer => "saps+transformer",
            ModelVariant::SapsGcn => "saps+gcn",
            ModelVariant::SapsImage => "saps+image",
            ModelVariant::MultimodalTextImage => "multimodal_text_image",
            ModelVariant::MultimodalGcnImage => "multimodal_gcn_image",
        }
    }

    /// Modalities fed to the network; `None` for the untrained total-score
    /// baseline.
    pub fn modalities(self) -> Option<&'static [Modality]> {
        use Modality::*;
        Some(match self {
            ModelVariant::SapsScores => return None,
            ModelVariant::SapsRiskFactors => &[Saps],
            ModelVariant::SapsLabels => &[Saps, Labels],
            ModelVariant::SapsTransformer => &[Saps, Text],
            ModelVariant::SapsGcn => &[Saps, Gcn],
            ModelVariant::SapsImage => &[Saps, Image],
            ModelVariant::MultimodalTextImage => &[Saps, Text, Image],
            ModelVariant::MultimodalGcnImage => &[Saps, Gcn, Image],
        })
    }

    pub fn modality_set(self, dropout_rate: f64) -> Option<ModalitySet> {
        self.modalities()
            .map(|m| ModalitySet::with_defaults(m, dropout_rate).expect("variant widths are consistent"))
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        model_variant(s)
    }
}

pub fn model_variant(name: &str) -> Result<ModelVariant> {
    ModelVariant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            let valid: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant '{name}'; valid names: {}", valid.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 72,
            dropout: 0.5,
            learning_rate: 0.001,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and means "no training".
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be positive".into()));
        }
        if self.epochs > 0 && self.early_stop_patience > self.epochs {
            return Err(Error::Config("early_stop_patience exceeds epochs".into()));
        }
        Ok(())
    }
}

/// Element-wise mean of `hidden`, followed by `saps_hidden`.
pub fn fuse(hidden: &[Vec<f64>], saps_hidden: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = hidden.first() else {
        return Ok(saps_hidden.to_vec());
    };
    if let Some(bad) = hidden.iter().find(|h| h.len() != first.len()) {
        return Err(Error::dim(
            "fuse",
            format!("hidden vectors of lengths {} and {}", first.len(), bad.len()),
        ));
    }
    let k = hidden.len() as f64;
    let mut out: Vec<f64> = (0..first.len())
        .map(|j| hidden.iter().map(|h| h[j]).sum::<f64>() / k)
        .collect();
    out.extend_from_slice(saps_hidden);
    Ok(out)
}

fn input_name(m: Modality) -> String {
    format!("x.{m}")
}

fn mask_name(m: Modality) -> String {
    format!("mask.{m}")
}

/// Records the network on a fresh tape. In training mode every branch with
/// a positive dropout rate multiplies by a `mask.<modality>` input. With
/// `with_loss`, the tape also reads `times`/`events` and outputs `loss`.
pub fn build_tape(modalities: &ModalitySet, training: bool, with_loss: bool) -> Tape {
    let mut tape = Tape::new();
    let mut averaged = Vec::new();
    let mut saps_hidden = None;
    for b in modalities.branches() {
        let h = record_branch(&mut tape, b.modality.name(), &input_name(b.modality));
        let h = if training && b.dropout_rate > 0.0 {
            let mask = tape.input(&mask_name(b.modality));
            tape.mul(h, mask)
        } else {
            h
        };
        if b.modality == Modality::Saps {
            saps_hidden = Some(h);
        } else {
            averaged.push(h);
        }
    }
    let saps_hidden = saps_hidden.expect("modality sets always hold saps");
    let fused = match averaged.len() {
        0 => saps_hidden,
        1 => tape.concat(&[averaged[0], saps_hidden]),
        _ => {
            let avg = tape.average(&averaged);
            tape.concat(&[avg, saps_hidden])
        }
    };
    let risk = record_linear(&mut tape, "head", fused);
    finish(&mut tape, risk, with_loss);
    tape
}

fn record_branch(tape: &mut Tape, prefix: &str, input: &str) -> NodeId {
    let x = tape.input(input);
    let pre = record_linear(tape, prefix, x);
    tape.relu(pre)
}

fn record_linear(tape: &mut Tape, prefix: &str, x: NodeId) -> NodeId {
    let w = tape.param(&format!("{prefix}.w"));
    let b = tape.param(&format!("{prefix}.b"));
    let xw = tape.matmul(x, w);
    tape.add(xw, b)
}

fn finish(tape: &mut Tape, risk: NodeId, with_loss: bool) {
    tape.output("risk", risk);
    if with_loss {
        let times = tape.input("times");
        let events = tape.input("events");
        let loss = tape.cox_nll(risk, times, events);
        tape.output("loss", loss);
    }
}

fn survival_inputs(data: &Dataset) -> TensorMap {
    let times = data.cohort().times();
    let events = data.cohort().events().iter().map(|&e| f64::from(u8::from(e))).collect();
    let n = data.len();
    let mut m = TensorMap::new();
    m.insert("times".into(), Tensor::from_parts(vec![n], times));
    m.insert("events".into(), Tensor::from_parts(vec![n], events));
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionNetwork {
    modalities: ModalitySet,
    config: TrainConfig,
    params: TensorMap,
}

impl FusionNetwork {
    /// Glorot weights and zero biases drawn from `config.seed`, branches in
    /// canonical order and then the head.
    pub fn init(modalities: ModalitySet, config: TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = TensorMap::new();
        for b in modalities.branches() {
            params.insert(format!("{}.w", b.modality), glorot(&mut rng, b.in_dim, b.out_dim));
            params.insert(format!("{}.b", b.modality), Tensor::zeros(vec![b.out_dim]));
        }
        params.insert("head.w".into(), glorot(&mut rng, modalities.fused_dim(), 1));
        params.insert("head.b".into(), Tensor::zeros(vec![1]));
        FusionNetwork {
            modalities,
            config,
            params,
        }
    }

    /// Rebuilds a network from stored parameters, checking names and shapes.
    pub fn from_parts(modalities: ModalitySet, config: TrainConfig, params: TensorMap) -> Result<Self> {
        let reference = FusionNetwork::init(modalities, config);
        let expected: Vec<_> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let found: Vec<_> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != found {
            return Err(Error::Input(format!(
                "parameter layout mismatch: expected {expected:?}, found {found:?}"
            )));
        }
        Ok(FusionNetwork { params, ..reference })
    }

    pub fn modalities(&self) -> &ModalitySet {
        &self.modalities
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    fn feature_inputs(&self, bundles: &[&FeatureBundle]) -> Result<TensorMap> {
        if bundles.is_empty() {
            return Err(Error::Input("no patients to score".into()));
        }
        let mut map = TensorMap::new();
        for b in self.modalities.branches() {
            let mut data = Vec::with_capacity(bundles.len() * b.in_dim);
            for (i, f) in bundles.iter().enumerate() {
                let v = f
                    .get(b.modality)
                    .ok_or_else(|| Error::Input(format!("patient {i} is missing the {} modality", b.modality)))?;
                if v.len() != b.in_dim {
                    return Err(Error::dim(
                        "predict_risk",
                        format!("{} expects {} values, patient {i} has {}", b.modality, b.in_dim, v.len()),
                    ));
                }
                data.extend_from_slice(v);
            }
            map.insert(input_name(b.modality), Tensor::new(vec![bundles.len(), b.in_dim], data)?);
        }
        Ok(map)
    }

    pub fn predict_risk(&self, bundle: &FeatureBundle) -> Result<f64> {
        Ok(self.predict_refs(&[bundle])?[0])
    }

    /// Eval-mode risks for many patients.
    pub fn predict_batch(&self, bundles: &[FeatureBundle]) -> Result<Vec<f64>> {
        self.predict_refs(&bundles.iter().collect::<Vec<_>>())
    }

    fn predict_refs(&self, bundles: &[&FeatureBundle]) -> Result<Vec<f64>> {
        let tape = build_tape(&self.modalities, false, false);
        let inputs = self.feature_inputs(bundles)?;
        let out = Session::new(&tape).forward(&(&inputs, &self.params))?;
        Ok(out["risk"].data().to_vec())
    }

    /// Eval-mode loss over a dataset; `None` when it holds no events.
    pub fn loss(&self, data: &Dataset) -> Result<Option<f64>> {
        if data.cohort().n_events() == 0 {
            return Ok(None);
        }
        let tape = build_tape(&self.modalities, false, true);
        let refs: Vec<_> = data.features().iter().collect();
        let mut inputs = self.feature_inputs(&refs)?;
        inputs.extend(survival_inputs(data));
        let out = Session::new(&tape).forward(&(&inputs, &self.params))?;
        Ok(out["loss"].item())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Mini-batches without an event, which carry no partial likelihood.
    pub skipped_batches: usize,
}

/// Trains a fresh network on `train`, early-stopping on the full `val`
/// loss. If `val` has no events, the train loss drives early stopping.
pub fn train(
    train: &Dataset,
    val: &Dataset,
    modalities: &ModalitySet,
    config: &TrainConfig,
) -> Result<(FusionNetwork, TrainingLog)> {
    config.validate()?;
    if train.cohort().n_events() == 0 {
        return Err(Error::UndefinedLikelihood("training set has no events".into()));
    }
    let mut net = FusionNetwork::init(modalities.clone(), config.clone());
    let mut log = TrainingLog::default();
    if config.epochs == 0 {
        return Ok((net, log));
    }
    let refs: Vec<_> = train.features().iter().collect();
    let features = net.feature_inputs(&refs)?;
    let times = train.cohort().times();
    let events = train.cohort().events();
    let tape = build_tape(modalities, true, true);
    let mut adam = AdamState::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, net.params.clone());
    let mut since_best = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if !chunk.iter().any(|&i| events[i]) {
                log.skipped_batches += 1;
                continue;
            }
            let mut inputs: TensorMap = features
                .iter()
                .map(|(k, v)| (k.clone(), v.select_rows(chunk)))
                .collect();
            inputs.insert("times".into(), Tensor::from_parts(vec![chunk.len()], chunk.iter().map(|&i| times[i]).collect()));
            inputs.insert(
                "events".into(),
                Tensor::from_parts(vec![chunk.len()], chunk.iter().map(|&i| f64::from(u8::from(events[i]))).collect()),
            );
            for b in modalities.branches() {
                if b.dropout_rate > 0.0 {
                    inputs.insert(mask_name(b.modality), dropout_mask(vec![chunk.len(), b.out_dim], b.dropout_rate, &mut rng)?);
                }
            }
            let mut session = Session::new(&tape);
            let out = session.forward(&(&inputs, &net.params))?;
            let grads = session.backward("loss")?;
            adam.step(&mut net.params, &grads)?;
            total += out["loss"].item().expect("scalar loss");
            batches += 1;
        }
        let train_loss = if batches > 0 { total / batches as f64 } else { f64::NAN };
        let val_loss = match net.loss(val)? {
            Some(v) => v,
            None => net.loss(train)?.expect("train has events"),
        };
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, net.params.clone());
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    net.params = best.1;
    Ok((net, log))
}

/// Standalone one-hidden-layer MLP risk model on the SAPS vector, built
/// independently of the fusion code path.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpRiskModel {
    params: TensorMap,
}

impl MlpRiskModel {
    /// Same draw order as a SAPS-only fusion network with the same seed.
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorMap::new();
        params.insert("hidden.w".into(), glorot(&mut rng, in_dim, hidden));
        params.insert("hidden.b".into(), Tensor::zeros(vec![hidden]));
        params.insert("out.w".into(), glorot(&mut rng, hidden, 1));
        params.insert("out.b".into(), Tensor::zeros(vec![1]));
        MlpRiskModel { params }
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut TensorMap {
        &mut self.params
    }

    pub fn tape() -> Tape {
        let mut tape = Tape::new();
        let h = record_branch(&mut tape, "hidden", "x");
        let risk = record_linear(&mut tape, "out", h);
        finish(&mut tape, risk, false);
        tape
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let tape = MlpRiskModel::tape();
        let mut inputs = TensorMap::new();
        inputs.insert("x".into(), x.clone());
        let out = Session::new(&tape).forward(&(&inputs, &self.params))?;
        Ok(out["risk"].data().to_vec())
    }
}
