//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails.
//!
//! ```text
//! cargo test -p mmsurv-cli --test acceptance
//! ```

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmsurv::autodiff::{grad_check, Tape, TensorMap};
use mmsurv::config::RunConfig;
use mmsurv::coxph::{fit_coxph, hazard_report, CoxConfig};
use mmsurv::dataset::{FeatureBundle, Modality};
use mmsurv::eval::{bootstrap_run, c_index, compare_models, variant_recipe, SplitSpec};
use mmsurv::fusion::{build_tape, BranchSpec, FusionNetwork, MlpRiskModel, ModalitySet, ModelVariant, TrainConfig};
use mmsurv::gcn::{record_from_tokens, GcnParams, GraphSpec};
use mmsurv::optim::dropout_mask;
use mmsurv::saps::{score_component, score_total, AdmissionType, Category, ChronicDisease, SapsMeasurements};
use mmsurv::survival::Cohort;
use mmsurv::synth::{linear_cohort, synthesize, SynthConfig, Truth};
use mmsurv::tensor::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn redraw(rng: &mut ChaCha8Rng, t: &Tensor, scale: f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Integer times so that ties occur; at least one event.
fn survival_inputs(rng: &mut ChaCha8Rng, n: usize, inputs: &mut TensorMap) {
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..6) as f64).collect();
    let mut events: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.6) as u8)).collect();
    events[0] = 1.0;
    inputs.insert("times".into(), Tensor::vector(times).unwrap());
    inputs.insert("events".into(), Tensor::vector(events).unwrap());
}

fn fusion_trial(rng: &mut ChaCha8Rng, extra: &[Modality], seed: u64) -> (Tape, TensorMap) {
    let shared_out = rng.random_range(1..4);
    let mut branches = vec![BranchSpec {
        modality: Modality::Saps,
        in_dim: rng.random_range(1..6),
        out_dim: rng.random_range(1..5),
        dropout_rate: 0.5,
    }];
    for &m in extra {
        branches.push(BranchSpec {
            modality: m,
            in_dim: rng.random_range(1..7),
            out_dim: shared_out,
            dropout_rate: rng.random_range(0.0..0.6),
        });
    }
    let mods = ModalitySet::new(branches).unwrap();
    let tape = build_tape(&mods, true, true);
    let net = FusionNetwork::init(mods.clone(), TrainConfig { seed, ..TrainConfig::default() });
    let mut inputs = net.params().clone();
    // Nonzero biases move pre-activations off the ReLU kink at zero inputs.
    for (name, t) in inputs.iter_mut() {
        if name.ends_with(".b") {
            *t = redraw(rng, t, 0.5);
        }
    }
    let n = rng.random_range(3..10);
    for b in mods.branches() {
        inputs.insert(format!("x.{}", b.modality), random_matrix(rng, n, b.in_dim));
        inputs.insert(
            format!("mask.{}", b.modality),
            dropout_mask(vec![n, b.out_dim], b.dropout_rate, rng).unwrap(),
        );
    }
    survival_inputs(rng, n, &mut inputs);
    (tape, inputs)
}

fn gcn_trial(rng: &mut ChaCha8Rng, seed: u64) -> (Tape, TensorMap) {
    let nodes = rng.random_range(1..6);
    let mut a = vec![0.0; nodes * nodes];
    for i in 0..nodes {
        for j in i + 1..nodes {
            if rng.random_bool(0.5) {
                a[i * nodes + j] = 1.0;
                a[j * nodes + i] = 1.0;
            }
        }
    }
    let names = (0..nodes).map(|i| format!("n{i}")).collect();
    let graph = GraphSpec::new(names, Tensor::matrix(nodes, nodes, a).unwrap()).unwrap();
    let k = rng.random_range(1..4);
    let embed = rng.random_range(1..5);
    let hidden = rng.random_range(1..4);
    let classes = rng.random_range(2..4);
    let mut tape = Tape::new();
    let g = record_from_tokens(&mut tape);
    let zw = tape.input("zw");
    let weighted = tape.mul(g.z, zw);
    let s = tape.sum(weighted);
    let sq = tape.square(g.h1);
    let m = tape.mean(sq);
    let loss = tape.add(s, m);
    tape.output("loss", loss);
    let mut params = GcnParams::init(nodes, k, embed, hidden, classes, seed);
    params.b0 = redraw(rng, &params.b0, 0.3);
    params.kernel_bias = redraw(rng, &params.kernel_bias, 0.3);
    let mut inputs = params.to_map();
    inputs.insert("adjacency".into(), graph.normalized().clone());
    let n_tokens = nodes + k - 1 + rng.random_range(0..3);
    inputs.insert("tokens".into(), random_matrix(rng, n_tokens, embed));
    inputs.insert("zw".into(), random_matrix(rng, nodes, classes));
    (tape, inputs)
}

fn cox_trial(rng: &mut ChaCha8Rng) -> (Tape, TensorMap) {
    let n = rng.random_range(2..15);
    let d = rng.random_range(1..5);
    let mut tape = Tape::new();
    let x = tape.input("x");
    let beta = tape.param("beta");
    let times = tape.input("times");
    let events = tape.input("events");
    let risk = tape.matmul(x, beta);
    let loss = tape.cox_nll(risk, times, events);
    tape.output("loss", loss);
    let mut inputs = TensorMap::new();
    inputs.insert("x".into(), random_matrix(rng, n, d));
    inputs.insert("beta".into(), random_matrix(rng, d, 1));
    survival_inputs(rng, n, &mut inputs);
    (tape, inputs)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let (tape, inputs) = match trial % 4 {
            0 => fusion_trial(&mut rng, &[], trial),
            1 => {
                let pool = [Modality::Labels, Modality::Text, Modality::Image, Modality::Gcn];
                let extra: Vec<Modality> = pool.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
                let extra = if extra.is_empty() { vec![Modality::Text, Modality::Image] } else { extra };
                fusion_trial(&mut rng, &extra, trial)
            }
            2 => gcn_trial(&mut rng, trial),
            _ => cox_trial(&mut rng),
        };
        let report = grad_check(&tape, &inputs, "loss", 1e-4).map_err(|e| format!("trial {trial}: {e}"))?;
        if let Some(f) = report.failures().next() {
            return Err(format!("trial {trial}: {} [{}] analytic {} numeric {}", f.param, f.index, f.analytic, f.numeric));
        }
        worst = worst.max(report.max_relative_error());
        checked += report.entries.len();
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("100 trials, {checked} gradients, max rel err {worst:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn pair_oracle(times: &[f64], events: &[bool], risks: &[f64]) -> (u64, u64, u64, u64) {
    let (mut c, mut d, mut t, mut p) = (0, 0, 0, 0);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if i == j || !events[i] || times[i] >= times[j] {
                continue;
            }
            p += 1;
            if risks[i] > risks[j] {
                c += 1;
            } else if risks[i] < risks[j] {
                d += 1;
            } else {
                t += 1;
            }
        }
    }
    (c, d, t, p)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..500 {
        let n = rng.random_range(1..=50);
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..12) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 * 0.25).collect();
        let cohort = Cohort::from_times(&times, &events).unwrap();
        let oracle = pair_oracle(&times, &events, &risks);
        match c_index(&cohort, &risks) {
            Ok(r) => {
                let got = (r.concordant, r.discordant, r.tied_risk, r.comparable_pairs);
                check(got == oracle, format!("cohort {trial}: {got:?} vs oracle {oracle:?}"))?;
                let expect = (oracle.0 as f64 + 0.5 * oracle.2 as f64) / oracle.3 as f64;
                check(r.value == expect, format!("cohort {trial}: value {} vs {expect}", r.value))?;
            }
            Err(_) => check(oracle.3 == 0, format!("cohort {trial}: error with {} comparable pairs", oracle.3))?,
        }
    }
    let times: Vec<f64> = (1..=30).map(f64::from).collect();
    let cohort = Cohort::from_times(&times, &[true; 30]).unwrap();
    let perfect: Vec<f64> = times.iter().map(|t| -t).collect();
    let perfect = c_index(&cohort, &perfect).unwrap().value;
    let constant = c_index(&cohort, &[0.3; 30]).unwrap().value;
    check(perfect == 1.0, format!("perfect ranking gives {perfect}"))?;
    check(constant == 0.5, format!("constant risk gives {constant}"))?;
    Ok("500 cohorts match the pair oracle; perfect 1.0, constant 0.5".into())
}

/// Coverage is counted per covariate: each hazard ratio's interval must
/// contain its true value in at least 18 of the 20 seeds.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let beta = [0.5, -0.5, 0.3, 0.0, 0.2];
    let names: Vec<String> = (1..=5).map(|j| format!("x{j}")).collect();
    let mut covered = [0usize; 5];
    let mut joint = 0;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (x, cohort) = linear_cohort(2000, &beta, 0.01, 0.002, 300 + seed).unwrap();
        let model = fit_coxph(&x, &names, &cohort, &CoxConfig::default()).map_err(|e| format!("seed {seed}: {e}"))?;
        check(model.converged, format!("seed {seed}: not converged"))?;
        for (b, t) in model.beta.iter().zip(beta) {
            worst = worst.max((b - t).abs());
        }
        let report = hazard_report(&model).unwrap();
        let mut all = true;
        for (j, (r, t)) in report.rows.iter().zip(beta).enumerate() {
            if r.ci_low <= t.exp() && t.exp() <= r.ci_high {
                covered[j] += 1;
            } else {
                all = false;
            }
        }
        joint += usize::from(all);
    }
    let elapsed = start.elapsed();
    let pooled: usize = covered.iter().sum();
    let detail = format!(
        "max |beta error| {worst:.4}, per-covariate coverage {covered:?}/20, pooled {pooled}/100, all five at once {joint}/20, {:.1}s",
        elapsed.as_secs_f64()
    );
    check(worst < 0.1, format!("beta error too large: {detail}"))?;
    check(covered.iter().all(|&c| c >= 18), format!("coverage below 18/20: {detail}"))?;
    check(elapsed < Duration::from_secs(30), format!("too slow: {detail}"))?;
    Ok(detail)
}

/// Appendix table: one representative value per bin and the points printed
/// next to it. BUN 28-83 and temperature >= 39 follow the original score.
fn appendix_table() -> Vec<(Category, Vec<(f64, u8)>)> {
    use Category::*;
    vec![
        (Age, vec![(20.0, 0), (39.9, 0), (40.0, 7), (59.0, 7), (60.0, 12), (69.0, 12), (70.0, 15), (74.0, 15), (75.0, 16), (79.0, 16), (80.0, 18), (99.0, 18)]),
        (HeartRate, vec![(20.0, 11), (40.0, 2), (69.0, 2), (70.0, 0), (119.0, 0), (120.0, 4), (159.0, 4), (160.0, 7), (200.0, 7)]),
        (SystolicBp, vec![(50.0, 13), (70.0, 5), (99.0, 5), (100.0, 0), (199.0, 0), (200.0, 2), (250.0, 2)]),
        (Temperature, vec![(36.0, 0), (38.9, 0), (39.0, 3), (41.0, 3)]),
        (Pao2Fio2, vec![(50.0, 11), (99.0, 11), (100.0, 9), (199.0, 9), (200.0, 6), (400.0, 6)]),
        (Bun, vec![(10.0, 0), (27.9, 0), (28.0, 6), (83.0, 6), (84.0, 10), (93.0, 10), (150.0, 10)]),
        (UrineOutput, vec![(100.0, 11), (499.0, 11), (500.0, 4), (999.0, 4), (1000.0, 0), (3000.0, 0)]),
        (Sodium, vec![(110.0, 5), (124.9, 5), (125.0, 0), (144.0, 0), (145.0, 1), (160.0, 1)]),
        (Potassium, vec![(2.5, 3), (2.99, 3), (3.0, 0), (4.9, 0), (5.0, 3), (6.5, 3)]),
        (Bicarbonate, vec![(10.0, 6), (14.9, 6), (15.0, 3), (19.0, 3), (20.0, 0), (30.0, 0)]),
        (Bilirubin, vec![(1.0, 0), (3.9, 0), (4.0, 4), (5.9, 4), (6.0, 9), (10.0, 9)]),
        (Wbc, vec![(0.5, 12), (0.99, 12), (1.0, 0), (19.9, 0), (20.0, 3), (40.0, 3)]),
        (Gcs, vec![(15.0, 0), (14.0, 0), (13.0, 5), (11.0, 5), (10.0, 7), (9.0, 7), (8.0, 13), (6.0, 13), (5.0, 26), (3.0, 26)]),
        (ChronicDisease, vec![(0.0, 0), (1.0, 9), (2.0, 10), (3.0, 17)]),
        (AdmissionType, vec![(0.0, 0), (1.0, 6), (2.0, 8)]),
    ]
}

fn criterion_4() -> Outcome {
    let mut bins = 0;
    let mut max_sum = 0u32;
    for (category, rows) in appendix_table() {
        for &(value, points) in &rows {
            let got = score_component(category, value).map_err(|e| e.to_string())?;
            check(got == points, format!("{category} {value}: {got} points, table says {points}"))?;
            bins += 1;
        }
        max_sum += rows.iter().map(|&(_, p)| p as u32).max().unwrap();
    }
    check(max_sum == 163, format!("sum of per-category maxima {max_sum}"))?;

    let worst = SapsMeasurements {
        age: 85.0,
        heart_rate: 30.0,
        systolic_bp: 60.0,
        temperature: 40.0,
        pao2_fio2: Some(80.0),
        bun: 90.0,
        urine_output: 300.0,
        sodium: 120.0,
        potassium: 2.0,
        bicarbonate: 12.0,
        bilirubin: 7.0,
        wbc: 0.5,
        gcs: 4.0,
        chronic_disease: ChronicDisease::Aids,
        admission_type: AdmissionType::UnscheduledSurgical,
    };
    let top = score_total(&worst).unwrap().total;
    let bottom = score_total(&SapsMeasurements::healthy()).unwrap().total;
    check(top == 163, format!("worst patient scores {top}"))?;
    check(bottom == 0, format!("healthy patient scores {bottom}"))?;
    Ok(format!("{bins} bins match; sum of maxima 163; totals span 0..=163"))
}

fn criterion_5() -> Outcome {
    let mods = ModalitySet::with_defaults(&[Modality::Saps], 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut compared = 0;
    for seed in [0u64, 1, 42, 2024, u64::MAX] {
        let net = FusionNetwork::init(mods.clone(), TrainConfig { seed, ..TrainConfig::default() });
        let mlp = MlpRiskModel::init(15, 15, seed);
        let rows: Vec<Vec<f64>> = (0..64).map(|_| (0..15).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let bundles: Vec<FeatureBundle> = rows.iter().cloned().map(FeatureBundle::saps_only).collect();
        let a = net.predict_batch(&bundles).unwrap();
        let b = mlp.predict(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, (x, y)) in a.iter().zip(&b).enumerate() {
            check(x.to_bits() == y.to_bits(), format!("seed {seed} row {i}: {x} vs {y}"))?;
        }
        compared += a.len();
    }
    Ok(format!("{compared} risks bitwise equal across 5 seeds"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let config = SynthConfig {
        n: 1000,
        seed: 11,
        baseline_hazard: 0.01,
        censor_rate: 0.005,
        truth: Truth::multimodal_default(),
        tokens: None,
    };
    let (data, _, _) = synthesize(&config).unwrap();
    let train = TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    };
    let variants = [
        ModelVariant::SapsRiskFactors,
        ModelVariant::SapsTransformer,
        ModelVariant::SapsImage,
        ModelVariant::MultimodalTextImage,
    ];
    let mut summaries = Vec::new();
    for v in variants {
        let recipe = variant_recipe(v, &train);
        summaries.push(bootstrap_run(&data, recipe.as_ref(), 50, 7, &SplitSpec::default()).map_err(|e| e.to_string())?);
    }
    let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
    let p = compare_models(&summaries[3], &summaries[0]).unwrap().p_value;
    let elapsed = start.elapsed();
    let detail = format!(
        "saps {:.4}, +text {:.4}, +image {:.4}, multimodal {:.4}, p {:.2e}, {:.0}s",
        means[0],
        means[1],
        means[2],
        means[3],
        p,
        elapsed.as_secs_f64()
    );
    check(means[1] > means[0] && means[2] > means[0], format!("single-extra not above saps: {detail}"))?;
    check(means[3] > means[1] && means[3] > means[2], format!("multimodal not above single-extra: {detail}"))?;
    check(p <= 0.05, format!("p too large: {detail}"))?;
    check(elapsed < Duration::from_secs(15 * 60), format!("too slow: {detail}"))?;
    Ok(detail)
}

const PROTOCOL_TOML: &str = "[train]
epochs = 250
batch_size = 72
dropout = 0.5
learning_rate = 0.001
early_stop_patience = 10
seed = 0

[split]
train_frac = 0.7
val_frac = 0.1
test_frac = 0.2
seed = 0

[bootstrap]
replicates = 200
";

fn criterion_7() -> Outcome {
    let c = RunConfig::default();
    check(c.to_toml() == PROTOCOL_TOML, format!("default config differs:\n{}", c.to_toml()))?;
    check(c.bootstrap.replicates == 200, "B")?;
    check((c.split.train_frac, c.split.val_frac, c.split.test_frac) == (0.7, 0.1, 0.2), "split")?;
    check(c.train.epochs == 250 && c.train.batch_size == 72, "epochs/batch")?;
    check(c.train.dropout == 0.5 && c.train.learning_rate == 0.001, "dropout/lr")?;
    let dims: Vec<(Modality, usize, usize)> = ModelVariant::ALL
        .iter()
        .filter_map(|v| v.modality_set(0.5))
        .flat_map(|s| s.branches().to_vec())
        .map(|b| (b.modality, b.in_dim, b.out_dim))
        .collect();
    for (m, i, o) in [
        (Modality::Saps, 15, 15),
        (Modality::Labels, 14, 14),
        (Modality::Text, 768, 32),
        (Modality::Image, 1024, 32),
    ] {
        check(dims.contains(&(m, i, o)), format!("{m} branch is not {i}->{o}"))?;
        check(
            dims.iter().filter(|d| d.0 == m).all(|d| (d.1, d.2) == (i, o)),
            format!("{m} branch dims vary across variants"),
        )?;
    }
    Ok("B=200, 70/10/20, 250 epochs, batch 72, dropout 0.5, lr 0.001, dims 15/14/32/32".into())
}

fn mmsurv(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmsurv"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("mmsurv {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

fn pipeline(dir: &Path) -> Result<(), String> {
    let steps: &[&[&str]] = &[
        &["synth", "--out", "cohort.jsonl", "--n", "240", "--seed", "3", "--tokens", "6"],
        &["gcn-features", "--data", "cohort.jsonl", "--out", "gcn.jsonl", "--params-out", "gcn_params.json", "--seed", "3"],
        &["fit-cox", "--data", "gcn.jsonl", "--out", "cox.json"],
        &["hazard-report", "--model", "cox.json", "--out", "hazard.csv"],
        &["train", "--data", "gcn.jsonl", "--variant", "multimodal_gcn_image", "--epochs", "4", "--seed", "3", "--out", "ckpt.json", "--log", "log.json"],
        &["evaluate", "--data", "gcn.jsonl", "--model", "ckpt.json", "--test-split", "--seed", "3", "--out", "eval.json"],
        &["bootstrap", "--data", "gcn.jsonl", "--variant", "saps+gcn", "--b", "3", "--epochs", "3", "--seed", "5", "--out", "deep.json"],
        &["bootstrap", "--data", "gcn.jsonl", "--model", "coxph", "--b", "3", "--seed", "5", "--out", "cox_boot.json"],
        &["compare", "--a", "deep.json", "--b", "cox_boot.json", "--out", "compare.csv"],
    ];
    for args in steps {
        mmsurv(dir, args)?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path())?;
    pipeline(b.path())?;
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut bytes = 0;
    for name in &names {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).map_err(|e| format!("{name:?}: {e}"))?;
        check(x == y, format!("{name:?} differs between runs"))?;
        bytes += x.len();
    }
    let count_b = std::fs::read_dir(b.path()).unwrap().count();
    check(count_b == names.len(), "runs produced different file sets")?;
    Ok(format!("{} artifacts ({bytes} bytes) identical across two runs", names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient integrity", criterion_1),
        ("c-index oracle equivalence", criterion_2),
        ("coxph recovery", criterion_3),
        ("saps-ii table fidelity", criterion_4),
        ("deepsurv degeneration", criterion_5),
        ("qualitative ordering", criterion_6),
        ("protocol constants", criterion_7),
        ("determinism", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
