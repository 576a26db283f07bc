use mmsurv::checkpoint::{load_checkpoint, save_checkpoint};
use mmsurv::coxph::{fit_coxph, CoxConfig};
use mmsurv::dataset::Modality;
use mmsurv::eval::{c_index, split, SplitSpec};
use mmsurv::fusion::{train, ModelVariant, TrainConfig};
use mmsurv::gcn::{GcnFeaturizer, GcnParams, GraphSpec};
use mmsurv::io::{load_dataset, save_dataset, SaveOptions};
use mmsurv::survival::survival_prob;
use mmsurv::synth::{gen_synthetic, synthesize, SynthConfig, Truth};

fn config(n: usize, seed: u64, tokens: Option<usize>) -> SynthConfig {
    SynthConfig {
        n,
        seed,
        baseline_hazard: 0.01,
        censor_rate: 0.005,
        truth: Truth::multimodal_default(),
        tokens,
    }
}

#[test]
fn train_save_load_predict() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    gen_synthetic(&config(300, 2, None), &path, SaveOptions { sidecar: true }).unwrap();
    let data = load_dataset(&path).unwrap();
    assert_eq!(data.len(), 300);

    let variant = ModelVariant::MultimodalTextImage;
    let train_config = TrainConfig { epochs: 8, early_stop_patience: 8, seed: 1, ..TrainConfig::default() };
    let (tr, va, te) = split(&data, &SplitSpec::default()).unwrap();
    assert_eq!((tr.len(), va.len(), te.len()), (210, 30, 60));
    let (net, log) = train(&tr, &va, &variant.modality_set(0.5).unwrap(), &train_config).unwrap();
    assert!(log.best_epoch.is_some());

    let ckpt = dir.path().join("model.json");
    save_checkpoint(&net, Some(variant), &ckpt).unwrap();
    let (back, v) = load_checkpoint(&ckpt).unwrap();
    assert_eq!(v, Some(variant));
    let a = net.predict_batch(te.features()).unwrap();
    let b = back.predict_batch(te.features()).unwrap();
    assert_eq!(a, b);
    let c = c_index(te.cohort(), &a).unwrap();
    assert!(c.value > 0.5, "{c:?}");
}

#[test]
fn cox_on_saps_features_and_survival_curves() {
    let (data, truth, _) = synthesize(&config(800, 6, None)).unwrap();
    let x = data.matrix(Modality::Saps).unwrap();
    let names: Vec<String> = (0..15).map(|j| format!("f{j}")).collect();
    let model = fit_coxph(&x, &names, data.cohort(), &CoxConfig::default()).unwrap();
    assert!(model.converged);
    let risks = model.predict(&x).unwrap();
    let ours = c_index(data.cohort(), &risks).unwrap().value;
    let ideal = c_index(data.cohort(), &truth.risks).unwrap().value;
    assert!(ours > 0.55 && ours < ideal, "{ours} vs {ideal}");

    // Higher risk means lower survival at every time.
    let times = model.baseline.event_times().to_vec();
    let lo = risks.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut prev = 1.0;
    for &t in &times {
        let s_lo = survival_prob(&model.baseline, lo, t);
        let s_hi = survival_prob(&model.baseline, hi, t);
        assert!(s_hi <= s_lo);
        assert!(s_lo <= prev);
        prev = s_lo;
    }
}

#[test]
fn gcn_features_attach_to_dataset() {
    let (mut data, _, tokens) = synthesize(&config(20, 3, Some(7))).unwrap();
    assert_eq!(tokens.len(), 20);
    let graph = GraphSpec::sample();
    let params = GcnParams::for_graph(&graph, 0);
    let f = GcnFeaturizer::new(graph.normalized(), &params);
    for (bundle, t) in data.features_mut().iter_mut().zip(&tokens) {
        bundle.gcn = Some(f.features(t).unwrap());
    }
    assert!(data.has(Modality::Gcn));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.jsonl");
    save_dataset(&data, &path, SaveOptions { sidecar: false }).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.matrix(Modality::Gcn).unwrap(), data.matrix(Modality::Gcn).unwrap());
}
