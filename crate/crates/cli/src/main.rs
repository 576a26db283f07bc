use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmsurv::checkpoint::{load_checkpoint, save_checkpoint};
use mmsurv::config::RunConfig;
use mmsurv::coxph::{fit_coxph, hazard_report, CoxConfig, CoxModel};
use mmsurv::dataset::{Dataset, Modality};
use mmsurv::eval::{
    bootstrap_run, c_index, compare_models, split, variant_recipe, write_comparisons_csv, BootstrapSummary, CoxRecipe,
    Recipe,
};
use mmsurv::fusion::{model_variant, train, ModelVariant};
use mmsurv::gcn::{GcnFeaturizer, GcnParams, GraphSpec};
use mmsurv::io::{load_dataset, read_saps_csv, save_dataset, SaveOptions, SidecarReader};
use mmsurv::saps::{score_total, Category};
use mmsurv::synth::{gen_synthetic, SynthConfig, Truth};

type CliResult<T = ()> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "mmsurv", version, about = "Multimodal ICU survival analysis toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score raw SAPS-II measurements from a CSV file.
    SapsScore {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output CSV; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a linear Cox model on one modality of a dataset.
    FitCox {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "saps")]
        modality: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
    },
    /// Hazard ratios, confidence intervals and p-values of a fitted Cox model.
    HazardReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a fusion network on the train/validation parts of a split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch training log (JSON).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// C-index of a checkpoint on a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Score only the test part of the seeded split.
        #[arg(long)]
        test_split: bool,
        #[arg(long)]
        subgroup: Option<Subgroup>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Bootstrap C-index distribution of one model.
    Bootstrap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "deep")]
        model: ModelKind,
        /// Variant name; defaults to saps_risk_factors for deep models.
        #[arg(long)]
        variant: Option<String>,
        /// Replicates; defaults to the configured value (200).
        #[arg(long)]
        b: Option<usize>,
        #[arg(long)]
        subgroup: Option<Subgroup>,
        /// Summary JSON.
        #[arg(long)]
        out: PathBuf,
        /// Per-replicate CSV; `<out stem>.replicates.csv` when omitted.
        #[arg(long)]
        replicates: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Paired comparison of two bootstrap summaries.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic cohort with known ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "multimodal")]
        truth: TruthKind,
        /// Comma-separated 15 coefficients for the linear truth.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.01)]
        baseline_hazard: f64,
        #[arg(long, default_value_t = 0.005)]
        censor_rate: f64,
        /// Also generate report token embeddings with this many tokens.
        #[arg(long)]
        tokens: Option<usize>,
        /// Write feature vectors inline instead of in a binary sidecar.
        #[arg(long)]
        inline: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute GCN features from token embeddings.
    GcnFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Edge-list graph file; the bundled placeholder graph when omitted.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// GCN parameters (JSON); seeded initialisation when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Where to write the parameters used.
        #[arg(long)]
        params_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        }
        .with_seed(self.seed);
        if let Some(v) = self.epochs {
            c.train.epochs = v;
            if self.patience.is_none() {
                c.train.early_stop_patience = c.train.early_stop_patience.min(v);
            }
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.dropout {
            c.train.dropout = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let Some(v) = self.patience {
            c.train.early_stop_patience = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Subgroup {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Deep,
    Coxph,
}

#[derive(Clone, Copy, ValueEnum)]
enum TruthKind {
    Linear,
    Interaction,
    Multimodal,
}

fn create(path: &Path) -> CliResult<File> {
    File::create(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    create(path)?.write_all(text.as_bytes())?;
    Ok(())
}

fn filter(data: Dataset, subgroup: Option<Subgroup>) -> CliResult<Dataset> {
    Ok(match subgroup {
        None => data,
        Some(Subgroup::Normal) => data.subgroup(true)?,
        Some(Subgroup::Abnormal) => data.subgroup(false)?,
    })
}

fn saps_score(input: &Path, out: Option<&Path>) -> CliResult {
    let rows = read_saps_csv(input)?;
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["patient_id".to_string(), "total".to_string()];
    header.extend(Category::ALL.iter().map(|c| c.name().to_string()));
    w.write_record(&header)?;
    for (id, m) in rows {
        let s = score_total(&m).map_err(|e| format!("patient {id}: {e}"))?;
        let mut rec = vec![id, s.total.to_string()];
        rec.extend(s.components.iter().map(u8::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn fit_cox(data: &Path, modality: &str, out: &Path, max_iter: usize) -> CliResult {
    let d = load_dataset(data)?;
    let m: Modality = modality.parse()?;
    let x = d.matrix(m)?;
    let names: Vec<String> = match m {
        Modality::Saps => Category::ALL.iter().map(|c| c.name().to_string()).collect(),
        _ => (0..x.cols()).map(|j| format!("{m}_{j}")).collect(),
    };
    let model = fit_coxph(
        &x,
        &names,
        d.cohort(),
        &CoxConfig {
            max_iter,
            ..CoxConfig::default()
        },
    )?;
    if !model.converged {
        eprintln!("warning: Newton-Raphson did not converge in {max_iter} iterations");
    }
    write_text(out, &(serde_json::to_string_pretty(&model)? + "\n"))
}

fn report(model: &Path, out: Option<&Path>) -> CliResult {
    let text = std::fs::read_to_string(model).map_err(|e| format!("{}: {e}", model.display()))?;
    let model: CoxModel = serde_json::from_str(&text)?;
    let r = hazard_report(&model)?;
    match out {
        Some(p) => r.save_csv(p)?,
        None => r.write_csv(std::io::stdout())?,
    }
    Ok(())
}

fn variant_of(name: &str) -> CliResult<ModelVariant> {
    Ok(model_variant(name)?)
}

fn run_train(data: &Path, variant: &str, out: &Path, log: Option<&Path>, run: &RunArgs) -> CliResult {
    let v = variant_of(variant)?;
    let config = run.resolve()?;
    let modalities = v
        .modality_set(config.train.dropout)
        .ok_or("saps_scores is not a trainable variant")?;
    let d = load_dataset(data)?;
    let (tr, va, _) = split(&d, &config.split)?;
    let (net, training_log) = train(&tr, &va, &modalities, &config.train)?;
    save_checkpoint(&net, Some(v), out)?;
    if let Some(p) = log {
        write_text(p, &(serde_json::to_string_pretty(&training_log)? + "\n"))?;
    }
    eprintln!(
        "trained {} for {} epochs (best epoch {:?})",
        v,
        training_log.epochs.len(),
        training_log.best_epoch
    );
    Ok(())
}

fn evaluate(
    data: &Path,
    model: &Path,
    test_split: bool,
    subgroup: Option<Subgroup>,
    out: Option<&Path>,
    run: &RunArgs,
) -> CliResult {
    let config = run.resolve()?;
    let (net, _) = load_checkpoint(model)?;
    let mut d = load_dataset(data)?;
    if test_split {
        d = split(&d, &config.split)?.2;
    }
    let d = filter(d, subgroup)?;
    let risks = net.predict_batch(d.features())?;
    let result = c_index(d.cohort(), &risks)?;
    let text = serde_json::to_string_pretty(&result)? + "\n";
    match out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn bootstrap(
    data: &Path,
    model: ModelKind,
    variant: Option<&str>,
    b: Option<usize>,
    subgroup: Option<Subgroup>,
    out: &Path,
    replicates: Option<&Path>,
    run: &RunArgs,
) -> CliResult {
    let config = run.resolve()?;
    let d = filter(load_dataset(data)?, subgroup)?;
    let recipe: Box<dyn Recipe> = match model {
        ModelKind::Deep => variant_recipe(variant_of(variant.unwrap_or("saps_risk_factors"))?, &config.train),
        ModelKind::Coxph => {
            if variant.is_some() {
                return Err("--variant applies to deep models only".into());
            }
            Box::new(CoxRecipe {
                modality: Modality::Saps,
                config: CoxConfig::default(),
            })
        }
    };
    let b = b.unwrap_or(config.bootstrap.replicates);
    let summary = bootstrap_run(&d, recipe.as_ref(), b, run.seed, &config.split)?;
    summary.save(out)?;
    let csv_path = replicates
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("replicates.csv"));
    summary.save_replicates_csv(&csv_path)?;
    eprintln!(
        "{}: mean C-index {:.4} [{:.4}, {:.4}] over {} replicates ({} failed)",
        summary.recipe,
        summary.mean,
        summary.ci_low,
        summary.ci_high,
        summary.replicate_values.len(),
        summary.failures.len()
    );
    Ok(())
}

fn compare(a: &Path, b: &Path, out: Option<&Path>) -> CliResult {
    let c = compare_models(&BootstrapSummary::load(a)?, &BootstrapSummary::load(b)?)?;
    match out {
        Some(p) => write_comparisons_csv(std::slice::from_ref(&c), create(p)?)?,
        None => write_comparisons_csv(std::slice::from_ref(&c), std::io::stdout())?,
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synth(
    out: &Path,
    n: usize,
    truth: TruthKind,
    beta: Option<Vec<f64>>,
    baseline_hazard: f64,
    censor_rate: f64,
    tokens: Option<usize>,
    inline: bool,
    seed: u64,
) -> CliResult {
    let truth = match (truth, beta) {
        (TruthKind::Linear, Some(beta)) => Truth::Linear { beta },
        (TruthKind::Linear, None) => return Err("--truth linear needs --beta".into()),
        (TruthKind::Interaction, None) => Truth::Interaction,
        (TruthKind::Multimodal, None) => Truth::multimodal_default(),
        (_, Some(_)) => return Err("--beta applies to the linear truth only".into()),
    };
    let config = SynthConfig {
        n,
        seed,
        baseline_hazard,
        censor_rate,
        truth,
        tokens,
    };
    gen_synthetic(&config, out, SaveOptions { sidecar: !inline })?;
    Ok(())
}

fn gcn_features(
    data: &Path,
    out: &Path,
    graph: Option<&Path>,
    params: Option<&Path>,
    params_out: Option<&Path>,
    seed: u64,
) -> CliResult {
    let graph = match graph {
        Some(p) => GraphSpec::load(p)?,
        None => GraphSpec::sample(),
    };
    let params: GcnParams = match params {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
        None => GcnParams::for_graph(&graph, seed),
    };
    if params.kernel.rows() != graph.len() {
        return Err(format!("parameters are for {} nodes, graph has {}", params.kernel.rows(), graph.len()).into());
    }
    let mut d = load_dataset(data)?;
    let featurizer = GcnFeaturizer::new(graph.normalized(), &params);
    let mut reader = SidecarReader::default();
    let ids: Vec<String> = d.cohort().records().iter().map(|r| r.patient_id.clone()).collect();
    for (f, id) in d.features_mut().iter_mut().zip(&ids) {
        let r = f.tokens.as_ref().ok_or_else(|| format!("patient {id} has no token embeddings"))?;
        let tokens = reader.read(r)?;
        f.gcn = Some(featurizer.features(&tokens)?);
    }
    let d = Dataset::new(d.cohort().clone(), d.features().to_vec())?;
    save_dataset(&d, out, SaveOptions { sidecar: true })?;
    if let Some(p) = params_out {
        write_text(p, &(serde_json::to_string(&params)? + "\n"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::SapsScore { input, out } => saps_score(&input, out.as_deref()),
        Command::FitCox {
            data,
            modality,
            out,
            max_iter,
        } => fit_cox(&data, &modality, &out, max_iter),
        Command::HazardReport { model, out } => report(&model, out.as_deref()),
        Command::Train {
            data,
            variant,
            out,
            log,
            run,
        } => run_train(&data, &variant, &out, log.as_deref(), &run),
        Command::Evaluate {
            data,
            model,
            test_split,
            subgroup,
            out,
            run,
        } => evaluate(&data, &model, test_split, subgroup, out.as_deref(), &run),
        Command::Bootstrap {
            data,
            model,
            variant,
            b,
            subgroup,
            out,
            replicates,
            run,
        } => bootstrap(
            &data,
            model,
            variant.as_deref(),
            b,
            subgroup,
            &out,
            replicates.as_deref(),
            &run,
        ),
        Command::Compare { a, b, out } => compare(&a, &b, out.as_deref()),
        Command::Synth {
            out,
            n,
            truth,
            beta,
            baseline_hazard,
            censor_rate,
            tokens,
            inline,
            seed,
        } => synth(&out, n, truth, beta, baseline_hazard, censor_rate, tokens, inline, seed),
        Command::GcnFeatures {
            data,
            out,
            graph,
            params,
            params_out,
            seed,
        } => gcn_features(&data, &out, graph.as_deref(), params.as_deref(), params_out.as_deref(), seed),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
