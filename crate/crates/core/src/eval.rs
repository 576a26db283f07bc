//! Concordance, data splits, the bootstrap protocol and paired model
//! comparison.
//!
//! Replicate `b` of a run with base seed `s` draws all of its randomness
//! from `replicate_seed(s, b)`, the `(b + 1)`-th output of a SplitMix64
//! sequence started at `s`. Replicates are therefore independent of one
//! another and of execution order.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coxph::{fit_coxph, significance_stars, CoxConfig};
use crate::dataset::{Dataset, Modality};
use crate::error::{Error, Result};
use crate::fusion::{train, ModalitySet, ModelVariant, TrainConfig};
use crate::stats::{mean, percentile};
use crate::survival::Cohort;

pub const DEFAULT_REPLICATES: usize = 200;
pub const PERMUTATION_DRAWS: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CIndexResult {
    pub value: f64,
    pub concordant: u64,
    pub discordant: u64,
    pub tied_risk: u64,
    pub comparable_pairs: u64,
}

/// Fenwick tree over risk ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Harrell's C. A pair is comparable when the earlier time is an event and
/// the times differ; it is concordant when that patient has the higher risk
/// and counts half when the risks tie.
pub fn c_index(cohort: &Cohort, risks: &[f64]) -> Result<CIndexResult> {
    let n = cohort.len();
    if risks.len() != n {
        return Err(Error::dim("c_index", format!("{} risks for {n} patients", risks.len())));
    }
    if let Some(i) = risks.iter().position(|r| !r.is_finite()) {
        return Err(Error::Input(format!("risk {i} is not finite")));
    }
    let records = cohort.records();
    let mut sorted_risks = risks.to_vec();
    sorted_risks.sort_by(f64::total_cmp);
    sorted_risks.dedup();
    let rank = |r: f64| sorted_risks.partition_point(|&x| x < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].observed_time.total_cmp(&records[a].observed_time));
    let mut tree = Fenwick(vec![0; sorted_risks.len() + 1]);
    let (mut conc, mut disc, mut tied, mut inserted) = (0u64, 0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = records[order[start]].observed_time;
        let end = start + order[start..].iter().take_while(|&&i| records[i].observed_time == t).count();
        for &i in &order[start..end] {
            if records[i].event {
                let r = rank(risks[i]);
                let below = tree.prefix(r);
                let at_or_below = tree.prefix(r + 1);
                conc += below;
                tied += at_or_below - below;
                disc += inserted - at_or_below;
            }
        }
        for &i in &order[start..end] {
            tree.add(rank(risks[i]));
            inserted += 1;
        }
        start = end;
    }
    let comparable = conc + disc + tied;
    if comparable == 0 {
        return Err(Error::UndefinedMetric("no comparable pairs".into()));
    }
    Ok(CIndexResult {
        value: (conc as f64 + 0.5 * tied as f64) / comparable as f64,
        concordant: conc,
        discordant: disc,
        tied_risk: tied,
        comparable_pairs: comparable,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fracs:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: validation and test take the floor of
    /// their share, train takes the remainder.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let part = |f: f64| (n as f64 * f + 1e-9).floor() as usize;
        let (val, test) = (part(self.val_frac), part(self.test_frac));
        let train = n - val - test;
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::Input(format!("{n} patients cannot fill a three-way split")));
        }
        Ok((train, val, test))
    }

    /// Seeded shuffle of `0..n` cut into the three parts.
    pub fn split(&self, n: usize) -> Result<SplitIndices> {
        let (train, val, _) = self.sizes(n)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let test = idx.split_off(train + val);
        let val = idx.split_off(train);
        Ok(SplitIndices { train: idx, val, test })
    }
}

pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let s = spec.split(data.len())?;
    Ok((data.select(&s.train)?, data.select(&s.val)?, data.select(&s.test)?))
}

/// A way of producing test-set risks from a train/validation/test split.
pub trait Recipe: Sync {
    fn name(&self) -> String;
    fn fit_predict(&self, train: &Dataset, val: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>>;
}

/// Fusion network trained with the given config; the replicate seed
/// replaces `config.seed`.
pub struct FusionRecipe {
    pub name: String,
    pub modalities: ModalitySet,
    pub config: TrainConfig,
}

impl Recipe for FusionRecipe {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn fit_predict(&self, train_set: &Dataset, val: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>> {
        let config = TrainConfig {
            seed,
            ..self.config.clone()
        };
        let (net, _) = train(train_set, val, &self.modalities, &config)?;
        net.predict_batch(test.features())
    }
}

/// Linear Cox model on one modality's features (validation data unused).
pub struct CoxRecipe {
    pub modality: Modality,
    pub config: CoxConfig,
}

impl Recipe for CoxRecipe {
    fn name(&self) -> String {
        format!("coxph_{}", self.modality)
    }

    fn fit_predict(&self, train_set: &Dataset, _val: &Dataset, test: &Dataset, _seed: u64) -> Result<Vec<f64>> {
        let x = train_set.matrix(self.modality)?;
        let names: Vec<String> = (0..x.cols()).map(|j| format!("{}_{j}", self.modality)).collect();
        let model = fit_coxph(&x, &names, train_set.cohort(), &self.config)?;
        if !model.converged {
            return Err(Error::State("Cox fit did not converge".into()));
        }
        model.predict(&test.matrix(self.modality)?)
    }
}

/// Risk is the sum of the SAPS vector (the total score when it holds
/// per-category points). Nothing is trained.
pub struct SapsScoreRecipe;

impl Recipe for SapsScoreRecipe {
    fn name(&self) -> String {
        ModelVariant::SapsScores.name().into()
    }

    fn fit_predict(&self, _: &Dataset, _: &Dataset, test: &Dataset, _: u64) -> Result<Vec<f64>> {
        Ok(test.features().iter().map(|f| f.saps.iter().sum()).collect())
    }
}

/// Same risk for everyone.
pub struct ConstantRecipe;

impl Recipe for ConstantRecipe {
    fn name(&self) -> String {
        "constant".into()
    }

    fn fit_predict(&self, _: &Dataset, _: &Dataset, test: &Dataset, _: u64) -> Result<Vec<f64>> {
        Ok(vec![0.0; test.len()])
    }
}

/// Recipe for a named variant.
pub fn variant_recipe(variant: ModelVariant, config: &TrainConfig) -> Box<dyn Recipe> {
    match variant.modality_set(config.dropout) {
        None => Box::new(SapsScoreRecipe),
        Some(modalities) => Box::new(FusionRecipe {
            name: variant.name().into(),
            modalities,
            config: config.clone(),
        }),
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn replicate_seed(base_seed: u64, replicate: usize) -> u64 {
    splitmix64(base_seed.wrapping_add((replicate as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub recipe: String,
    pub seed: u64,
    /// Requested replicates.
    pub b: usize,
    /// Index of each successful replicate, parallel to `replicate_values`.
    pub replicate_ids: Vec<usize>,
    pub replicate_values: Vec<f64>,
    pub failures: Vec<ReplicateFailure>,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub replicate: usize,
    pub error: String,
}

/// One replicate: resample `n` with replacement, split, fit, score.
pub fn run_replicate(data: &Dataset, recipe: &dyn Recipe, split_spec: &SplitSpec, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.len();
    let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let resampled = data.select(&sample)?;
    let spec = SplitSpec {
        seed: rng.next_u64(),
        ..*split_spec
    };
    let (tr, va, te) = split(&resampled, &spec)?;
    let risks = recipe.fit_predict(&tr, &va, &te, rng.next_u64())?;
    Ok(c_index(te.cohort(), &risks)?.value)
}

/// `b` bootstrap replicates of `recipe`, run in parallel. Failed
/// replicates are excluded; more than 10% failures is an error.
pub fn bootstrap_run(
    data: &Dataset,
    recipe: &dyn Recipe,
    b: usize,
    base_seed: u64,
    split_spec: &SplitSpec,
) -> Result<BootstrapSummary> {
    if b == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    split_spec.validate()?;
    let results: Vec<Result<f64>> = (0..b)
        .into_par_iter()
        .map(|r| run_replicate(data, recipe, split_spec, replicate_seed(base_seed, r)))
        .collect();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut failures = Vec::new();
    for (replicate, res) in results.into_iter().enumerate() {
        match res {
            Ok(v) => {
                ids.push(replicate);
                values.push(v);
            }
            Err(e) => failures.push(ReplicateFailure {
                replicate,
                error: e.to_string(),
            }),
        }
    }
    if failures.len() * 10 > b || values.is_empty() {
        return Err(Error::Harness(format!(
            "{} of {b} replicates failed; first error: {}",
            failures.len(),
            failures[0].error
        )));
    }
    Ok(BootstrapSummary {
        recipe: recipe.name(),
        seed: base_seed,
        b,
        mean: mean(&values),
        ci_low: percentile(&values, 0.025),
        ci_high: percentile(&values, 0.975),
        replicate_ids: ids,
        replicate_values: values,
        failures,
    })
}

impl BootstrapSummary {
    pub fn write_replicates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "c_index"])?;
        for (id, v) in self.replicate_ids.iter().zip(&self.replicate_values) {
            w.write_record([id.to_string(), format!("{v:.17}")])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, json_path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, text + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save_replicates_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_replicates_csv(file)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    /// Mean of `a − b` over paired replicates.
    pub mean_difference: f64,
    pub pairs: usize,
    pub p_value: f64,
    pub stars: String,
}

/// Two-sided paired sign-flip permutation test on per-replicate
/// differences, `p = (1 + #{|flipped mean| ≥ |observed mean|}) / (1 + M)`
/// with `M` = [`PERMUTATION_DRAWS`] seeded random flips.
pub fn compare_models(a: &BootstrapSummary, b: &BootstrapSummary) -> Result<Comparison> {
    if a.seed != b.seed || a.b != b.b {
        return Err(Error::Contract(format!(
            "summaries are not paired: seeds {} and {}, B {} and {}",
            a.seed, b.seed, a.b, b.b
        )));
    }
    let lookup: std::collections::BTreeMap<usize, f64> =
        b.replicate_ids.iter().copied().zip(b.replicate_values.iter().copied()).collect();
    let diffs: Vec<f64> = a
        .replicate_ids
        .iter()
        .zip(&a.replicate_values)
        .filter_map(|(id, va)| lookup.get(id).map(|vb| va - vb))
        .collect();
    if diffs.is_empty() {
        return Err(Error::Contract("no replicate succeeded in both summaries".into()));
    }
    let p_value = sign_flip_p(&diffs, splitmix64(a.seed ^ 0x5eed));
    Ok(Comparison {
        model_a: a.recipe.clone(),
        model_b: b.recipe.clone(),
        mean_difference: mean(&diffs),
        pairs: diffs.len(),
        p_value,
        stars: significance_stars(p_value),
    })
}

pub fn sign_flip_p(diffs: &[f64], seed: u64) -> f64 {
    let observed: f64 = diffs.iter().sum::<f64>().abs();
    let slack = 1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..PERMUTATION_DRAWS {
        let mut s = 0.0;
        for chunk in diffs.chunks(64) {
            let bits = rng.next_u64();
            for (k, d) in chunk.iter().enumerate() {
                if bits >> k & 1 == 1 {
                    s += d;
                } else {
                    s -= d;
                }
            }
        }
        if s.abs() >= observed - slack {
            count += 1;
        }
    }
    (1 + count) as f64 / (1 + PERMUTATION_DRAWS) as f64
}

pub fn write_comparisons_csv<W: Write>(rows: &[Comparison], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model_a", "model_b", "p_value", "stars"])?;
    for c in rows {
        w.write_record([c.model_a.clone(), c.model_b.clone(), format!("{:.6}", c.p_value), c.stars.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureBundle;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute(times: &[f64], events: &[bool], risks: &[f64]) -> (u64, u64, u64) {
        let (mut c, mut d, mut t) = (0, 0, 0);
        for i in 0..times.len() {
            for j in 0..times.len() {
                if events[i] && times[i] < times[j] {
                    if risks[i] > risks[j] {
                        c += 1;
                    } else if risks[i] < risks[j] {
                        d += 1;
                    } else {
                        t += 1;
                    }
                }
            }
        }
        (c, d, t)
    }

    fn cohort(times: &[f64]) -> Cohort {
        Cohort::from_times(times, &vec![true; times.len()]).unwrap()
    }

    #[test]
    fn reference_values() {
        let c = cohort(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(c_index(&c, &[4.0, 3.0, 2.0, 1.0]).unwrap().value, 1.0);
        assert_eq!(c_index(&c, &[1.0, 2.0, 3.0, 4.0]).unwrap().value, 0.0);
        let flat = c_index(&c, &[7.0; 4]).unwrap();
        assert_eq!(flat.value, 0.5);
        assert_eq!(flat.tied_risk, 6);
    }

    #[test]
    fn undefined_when_all_censored() {
        let c = Cohort::from_times(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(matches!(c_index(&c, &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        assert!(c_index(&c, &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_pair_enumeration(
            rows in prop::collection::vec((0u8..8, any::<bool>(), 0u8..6), 2..50)
        ) {
            let times: Vec<f64> = rows.iter().map(|r| r.0 as f64).collect();
            let events: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let risks: Vec<f64> = rows.iter().map(|r| r.2 as f64 * 0.5 - 1.0).collect();
            let c = Cohort::from_times(&times, &events).unwrap();
            let (bc, bd, bt) = brute(&times, &events, &risks);
            match c_index(&c, &risks) {
                Ok(r) => {
                    prop_assert_eq!((r.concordant, r.discordant, r.tied_risk), (bc, bd, bt));
                    let neg: Vec<f64> = risks.iter().map(|r| -r).collect();
                    let rn = c_index(&c, &neg).unwrap();
                    prop_assert!((r.value + rn.value - 1.0).abs() < 1e-12);
                    let mono: Vec<f64> = risks.iter().map(|r| r.exp() * 3.0 + 1.0).collect();
                    prop_assert_eq!(c_index(&c, &mono).unwrap(), r);
                }
                Err(_) => prop_assert_eq!(bc + bd + bt, 0),
            }
        }
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::default();
        assert_eq!(spec.sizes(10).unwrap(), (7, 1, 2));
        assert_eq!(spec.sizes(9928).unwrap(), (6951, 992, 1985));
        assert!(spec.sizes(9).is_err());
        let s = spec.split(103).unwrap();
        assert_eq!(s, spec.split(103).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert!(SplitSpec { val_frac: 0.2, ..spec }.validate().is_err());
    }

    fn data(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        let feats = times
            .iter()
            .map(|t| FeatureBundle::saps_only((0..15).map(|j| if j == 0 { -t / 30.0 + rng.random_range(-1.0..1.0) } else { rng.random::<f64>() }).collect()))
            .collect();
        Dataset::new(Cohort::from_times(&times, &events).unwrap(), feats).unwrap()
    }

    #[test]
    fn constant_recipe_is_half() {
        let s = bootstrap_run(&data(80), &ConstantRecipe, 20, 3, &SplitSpec::default()).unwrap();
        assert!(s.replicate_values.iter().all(|&v| v == 0.5));
        assert_eq!((s.ci_low, s.ci_high), (0.5, 0.5));
    }

    #[test]
    fn single_replicate_collapses() {
        let s = bootstrap_run(&data(60), &SapsScoreRecipe, 1, 9, &SplitSpec::default()).unwrap();
        assert_eq!(s.replicate_values.len(), 1);
        assert_eq!(s.ci_low, s.mean);
        assert_eq!(s.ci_high, s.mean);
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let d = data(120);
        let recipe = CoxRecipe {
            modality: Modality::Saps,
            config: CoxConfig::default(),
        };
        let a = bootstrap_run(&d, &recipe, 8, 5, &SplitSpec::default()).unwrap();
        let b = bootstrap_run(&d, &recipe, 8, 5, &SplitSpec::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.mean > 0.7, "{}", a.mean);
        let mut buf = Vec::new();
        a.write_replicates_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("replicate,c_index\n0,"));
    }

    #[test]
    fn comparisons() {
        let base = BootstrapSummary {
            recipe: "a".into(),
            seed: 1,
            b: 200,
            replicate_ids: (0..200).collect(),
            replicate_values: (0..200).map(|i| 0.6 + i as f64 * 1e-4).collect(),
            failures: vec![],
            mean: 0.61,
            ci_low: 0.6,
            ci_high: 0.62,
        };
        let same = compare_models(&base, &base).unwrap();
        assert_eq!(same.p_value, 1.0);
        let mut worse = base.clone();
        worse.recipe = "b".into();
        worse.replicate_values.iter_mut().for_each(|v| *v -= 0.01);
        let c = compare_models(&base, &worse).unwrap();
        assert!(c.p_value < 0.001);
        assert_eq!(c.stars, "***");
        let mut other_seed = worse.clone();
        other_seed.seed = 2;
        assert!(matches!(compare_models(&base, &other_seed), Err(Error::Contract(_))));
        let mut buf = Vec::new();
        write_comparisons_csv(&[c], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("model_a,model_b,p_value,stars\na,b,"));
    }

    #[test]
    fn too_many_failures() {
        struct Failing;
        impl Recipe for Failing {
            fn name(&self) -> String {
                "failing".into()
            }
            fn fit_predict(&self, _: &Dataset, _: &Dataset, _: &Dataset, seed: u64) -> Result<Vec<f64>> {
                if seed % 3 == 0 {
                    Err(Error::State("boom".into()))
                } else {
                    Ok(vec![])
                }
            }
        }
        assert!(matches!(
            bootstrap_run(&data(50), &Failing, 30, 0, &SplitSpec::default()),
            Err(Error::Harness(_))
        ));
    }
}
