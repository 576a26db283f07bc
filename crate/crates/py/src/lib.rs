//! Python bindings. The module is importable as `mmsurv`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmsurv::checkpoint::{load_checkpoint, save_checkpoint};
use mmsurv::coxph::{self, hazard_report, CoxConfig};
use mmsurv::dataset::{self, Modality};
use mmsurv::eval::{self, bootstrap_run, split, variant_recipe, SplitSpec};
use mmsurv::fusion::{self, model_variant, ModelVariant, TrainConfig};
use mmsurv::gcn::{gcn_features as features_for, GcnParams, GraphSpec};
use mmsurv::io::{load_dataset, SaveOptions};
use mmsurv::saps::{score_total, Category, SapsMeasurements};
use mmsurv::survival::{self, survival_prob, Cohort};
use mmsurv::synth::{gen_synthetic, SynthConfig, Truth};
use mmsurv::tensor::Tensor;

fn py_err(e: mmsurv::Error) -> PyErr {
    match e {
        mmsurv::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn cohort(times: &[f64], events: &[bool]) -> PyResult<Cohort> {
    Cohort::from_times(times, events).map_err(py_err)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn field<'py, T: for<'a> pyo3::FromPyObject<'a, 'py>>(d: &Bound<'py, PyDict>, key: &str) -> PyResult<T> {
    let item = d
        .get_item(key)?
        .ok_or_else(|| PyValueError::new_err(format!("missing measurement '{key}'")))?;
    item.extract().map_err(|_| PyValueError::new_err(format!("bad value for '{key}'")))
}

/// SAPS-II score of one patient. `m` maps the measurement names (`age`,
/// `heart_rate`, ..., `chronic_disease`, `admission_type`) to values;
/// `pao2_fio2` may be `None` for unventilated patients.
/// Returns `(total, {category: points})`.
#[pyfunction]
fn saps_score<'py>(py: Python<'py>, m: &Bound<'py, PyDict>) -> PyResult<(u32, Bound<'py, PyDict>)> {
    let pao2: Option<f64> = match m.get_item("pao2_fio2")? {
        Some(v) if !v.is_none() => Some(v.extract()?),
        _ => None,
    };
    let chronic: String = field(m, "chronic_disease")?;
    let admission: String = field(m, "admission_type")?;
    let meas = SapsMeasurements {
        age: field(m, "age")?,
        heart_rate: field(m, "heart_rate")?,
        systolic_bp: field(m, "systolic_bp")?,
        temperature: field(m, "temperature")?,
        pao2_fio2: pao2,
        bun: field(m, "bun")?,
        urine_output: field(m, "urine_output")?,
        sodium: field(m, "sodium")?,
        potassium: field(m, "potassium")?,
        bicarbonate: field(m, "bicarbonate")?,
        bilirubin: field(m, "bilirubin")?,
        wbc: field(m, "wbc")?,
        gcs: field(m, "gcs")?,
        chronic_disease: chronic.parse().map_err(py_err)?,
        admission_type: admission.parse().map_err(py_err)?,
    };
    let s = score_total(&meas).map_err(py_err)?;
    let out = PyDict::new(py);
    for (c, p) in Category::ALL.iter().zip(s.components) {
        out.set_item(c.name(), p)?;
    }
    Ok((s.total, out))
}

/// Harrell's C-index with pair counts.
#[pyfunction]
fn c_index<'py>(py: Python<'py>, times: Vec<f64>, events: Vec<bool>, risks: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::c_index(&cohort(&times, &events)?, &risks).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("value", r.value)?;
    out.set_item("concordant", r.concordant)?;
    out.set_item("discordant", r.discordant)?;
    out.set_item("tied_risk", r.tied_risk)?;
    out.set_item("comparable_pairs", r.comparable_pairs)?;
    Ok(out)
}

/// Event-averaged negative log partial likelihood (Breslow ties).
#[pyfunction]
fn cox_nll(risks: Vec<f64>, times: Vec<f64>, events: Vec<bool>) -> PyResult<f64> {
    survival::cox_nll(&risks, &cohort(&times, &events)?).map_err(py_err)
}

#[pyclass(name = "CoxModel", frozen)]
struct PyCoxModel(coxph::CoxModel);

#[pymethods]
impl PyCoxModel {
    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.0.beta.clone()
    }

    #[getter]
    fn standard_errors(&self) -> Vec<f64> {
        self.0.standard_errors.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.0.predict(&matrix(&x)?).map_err(py_err)
    }

    fn survival(&self, risk: f64, t: f64) -> f64 {
        survival_prob(&self.0.baseline, risk, t)
    }

    /// One dict per covariate: hazard ratio, 95% interval, p-value, stars.
    fn hazard_report<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let report = hazard_report(&self.0).map_err(py_err)?;
        report
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("covariate", &r.covariate)?;
                d.set_item("hazard_ratio", r.hazard_ratio)?;
                d.set_item("ci_low", r.ci_low)?;
                d.set_item("ci_high", r.ci_high)?;
                d.set_item("p_value", r.p_value)?;
                d.set_item("stars", &r.stars)?;
                Ok(d)
            })
            .collect()
    }
}

/// Newton-Raphson Cox fit on an `n x d` design matrix.
#[pyfunction]
#[pyo3(signature = (x, times, events, names=None))]
fn fit_coxph(x: Vec<Vec<f64>>, times: Vec<f64>, events: Vec<bool>, names: Option<Vec<String>>) -> PyResult<PyCoxModel> {
    let x = matrix(&x)?;
    let names = names.unwrap_or_else(|| (1..=x.cols()).map(|j| format!("x{j}")).collect());
    let model = coxph::fit_coxph(&x, &names, &cohort(&times, &events)?, &CoxConfig::default()).map_err(py_err)?;
    Ok(PyCoxModel(model))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset(dataset::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(&path).map(PyDataset).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.cohort().times()
    }

    #[getter]
    fn events(&self) -> Vec<bool> {
        self.0.cohort().events()
    }

    /// Feature matrix of one modality (`saps`, `labels`, `text`, `image`, `gcn`).
    fn matrix(&self, modality: &str) -> PyResult<Vec<Vec<f64>>> {
        let m: Modality = modality.parse().map_err(py_err)?;
        Ok(rows_of(&self.0.matrix(m).map_err(py_err)?))
    }

    fn subgroup(&self, normal: bool) -> PyResult<Self> {
        self.0.subgroup(normal).map(PyDataset).map_err(py_err)
    }
}

#[pyclass(name = "FusionModel", frozen)]
struct PyFusionModel {
    net: fusion::FusionNetwork,
    variant: Option<ModelVariant>,
}

fn train_config(epochs: Option<usize>, learning_rate: Option<f64>, seed: u64) -> PyResult<TrainConfig> {
    let mut c = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(e) = epochs {
        c.epochs = e;
        c.early_stop_patience = c.early_stop_patience.min(e);
    }
    if let Some(lr) = learning_rate {
        c.learning_rate = lr;
    }
    c.validate().map_err(py_err)?;
    Ok(c)
}

#[pymethods]
impl PyFusionModel {
    /// Trains `variant` on the train/validation parts of the seeded
    /// 70/10/20 split.
    #[staticmethod]
    #[pyo3(signature = (data, variant, *, epochs=None, learning_rate=None, seed=0))]
    fn train(data: &PyDataset, variant: &str, epochs: Option<usize>, learning_rate: Option<f64>, seed: u64) -> PyResult<Self> {
        let v = model_variant(variant).map_err(py_err)?;
        let config = train_config(epochs, learning_rate, seed)?;
        let mods = v
            .modality_set(config.dropout)
            .ok_or_else(|| PyValueError::new_err("saps_scores is not trainable"))?;
        let (tr, va, _) = split(&data.0, &SplitSpec { seed, ..SplitSpec::default() }).map_err(py_err)?;
        let (net, _) = fusion::train(&tr, &va, &mods, &config).map_err(py_err)?;
        Ok(PyFusionModel { net, variant: Some(v) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, variant) = load_checkpoint(&path).map_err(py_err)?;
        Ok(PyFusionModel { net, variant })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.net, self.variant, &path).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> Option<&'static str> {
        self.variant.map(ModelVariant::name)
    }

    fn predict(&self, data: &PyDataset) -> PyResult<Vec<f64>> {
        self.net.predict_batch(data.0.features()).map_err(py_err)
    }
}

/// Bootstrap C-index of a model variant; returns mean, interval and
/// per-replicate values.
#[pyfunction]
#[pyo3(signature = (data, variant, b=200, seed=0, epochs=None))]
fn bootstrap<'py>(
    py: Python<'py>,
    data: &PyDataset,
    variant: &str,
    b: usize,
    seed: u64,
    epochs: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let v = model_variant(variant).map_err(py_err)?;
    let recipe = variant_recipe(v, &train_config(epochs, None, seed)?);
    let s = bootstrap_run(&data.0, recipe.as_ref(), b, seed, &SplitSpec::default()).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mean", s.mean)?;
    out.set_item("ci_low", s.ci_low)?;
    out.set_item("ci_high", s.ci_high)?;
    out.set_item("values", s.replicate_values)?;
    out.set_item("failures", s.failures.len())?;
    Ok(out)
}

/// Writes a synthetic cohort to `path` and returns the true risks.
#[pyfunction]
#[pyo3(signature = (path, n, seed=0, tokens=None, inline=false))]
fn synth(path: PathBuf, n: usize, seed: u64, tokens: Option<usize>, inline: bool) -> PyResult<Vec<f64>> {
    let config = SynthConfig {
        n,
        seed,
        baseline_hazard: 0.01,
        censor_rate: 0.005,
        truth: Truth::multimodal_default(),
        tokens,
    };
    let truth = gen_synthetic(&config, &path, SaveOptions { sidecar: !inline }).map_err(py_err)?;
    Ok(truth.risks)
}

/// GCN features of one report's token embeddings (`tokens x 768`) on the
/// bundled concept graph with seeded parameters.
#[pyfunction]
#[pyo3(signature = (tokens, seed=0))]
fn gcn_features(tokens: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<f64>> {
    let graph = GraphSpec::sample();
    let params = GcnParams::for_graph(&graph, seed);
    features_for(graph.normalized(), &matrix(&tokens)?, &params).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "mmsurv")]
fn py_mmsurv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(saps_score, m)?)?;
    m.add_function(wrap_pyfunction!(c_index, m)?)?;
    m.add_function(wrap_pyfunction!(cox_nll, m)?)?;
    m.add_function(wrap_pyfunction!(fit_coxph, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gcn_features, m)?)?;
    m.add_class::<PyCoxModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFusionModel>()?;
    m.add("VARIANTS", ModelVariant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>())?;
    Ok(())
}
