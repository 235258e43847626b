//! `riskfuse` — generate cohorts, train, evaluate, explain, check gradients
//! and serve the HTTP API.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or invalid input
//! file, 3 training / inference / runtime failure.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use riskfuse_core::eval::{self, Ablation, DEFAULT_THRESHOLD};
use riskfuse_core::explain::{explain_record, ExplainMode, ExplainTarget, Explanation};
use riskfuse_core::gradcheck::{grad_check, tiny_case};
use riskfuse_core::synth::{generate_cohort, CohortConfig};
use riskfuse_core::train::{train, TrainConfig};
use riskfuse_core::{checkpoint, cohort, Model};

#[derive(Parser)]
#[command(name = "riskfuse", version, about = "Multimodal chronic-disease risk model: note + labs fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled cohort (line-delimited JSON).
    Gen {
        /// `default`, or a JSON file with any subset of the cohort settings.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides n_patients from the config.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Precision / recall / F1 per disease and horizon.
    Eval {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// fused, text_only, labs_only; repeat or comma-separate. Default: all three.
        #[arg(long, value_delimiter = ',')]
        ablation: Vec<Ablation>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Also write the metrics as CSV to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Print the reports as JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Shapley attributions for one patient.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        patient: String,
        /// diabetes, heart, hypertension or horizon_90 ... horizon_360.
        #[arg(long, default_value = "diabetes")]
        target: ExplainTarget,
        /// exact, sampled or auto.
        #[arg(long, default_value = "auto")]
        mode: ExplainMode,
        /// Permutations for sampled mode.
        #[arg(long)]
        permutations: Option<usize>,
        /// Seed for sampled mode.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        json: bool,
    },
    /// Run the HTTP API.
    Serve {
        /// key = value configuration file.
        #[arg(long)]
        config: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn data(context: impl Display) -> impl FnOnce(riskfuse_core::Error) -> Failure {
    move |e| Failure::Data(format!("{context}: {e}"))
}

fn runtime(context: impl Display) -> impl FnOnce(riskfuse_core::Error) -> Failure {
    move |e| Failure::Runtime(format!("{context}: {e}"))
}

fn load_cohort(path: &Path) -> Result<riskfuse_core::synth::Cohort, Failure> {
    cohort::read_cohort(path).map_err(data(format!("cannot read cohort {}", path.display())))
}

fn load_model(path: &Path) -> Result<(Model, String), Failure> {
    checkpoint::load(path).map_err(data(format!("cannot load checkpoint {}", path.display())))
}

/// Refuses to write over an input file.
fn distinct(out: &Path, input: &Path) -> Outcome {
    let same = match (out.canonicalize(), input.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => out == input,
    };
    if same {
        return Err(Failure::Usage(format!(
            "output {} would overwrite the input file",
            out.display()
        )));
    }
    Ok(())
}

fn gen(config: &str, out: &Path, n: Option<usize>, seed: Option<u64>) -> Outcome {
    let mut cfg = if config == "default" {
        CohortConfig::default()
    } else {
        let text = std::fs::read_to_string(config)
            .map_err(|e| Failure::Data(format!("cannot read cohort config {config}: {e}")))?;
        serde_json::from_str(&text).map_err(|e| Failure::Data(format!("invalid cohort config {config}: {e}")))?
    };
    if let Some(n) = n {
        cfg.n_patients = n;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let cohort = generate_cohort(&cfg).map_err(data("invalid cohort config"))?;
    cohort::write_cohort(&cohort, out).map_err(data(format!("cannot write {}", out.display())))?;
    let positives = |f: fn(&riskfuse_core::DiseaseLabels) -> bool| {
        cohort.records.iter().filter(|r| r.labels.as_ref().is_some_and(f)).count()
    };
    println!(
        "wrote {} patients to {} (diabetes {}, heart disease {}, hypertension {})",
        cohort.records.len(),
        out.display(),
        positives(|l| l.diabetes),
        positives(|l| l.heart_disease),
        positives(|l| l.hypertension),
    );
    Ok(())
}

fn train_cmd(
    cohort_path: &Path,
    out: &Path,
    seed: u64,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
) -> Outcome {
    distinct(out, cohort_path)?;
    let cohort = load_cohort(cohort_path)?;
    let mut config = TrainConfig::default();
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(lr) = lr {
        config.learning_rate = lr;
    }
    if let Some(b) = batch {
        config.batch_size = b;
    }
    let started = Instant::now();
    let output = train(&cohort.records, &config, seed).map_err(runtime("training failed"))?;
    for e in &output.log.epochs {
        match e.val_loss {
            Some(v) => println!("epoch {:>3}  train loss {:.4}  val loss {:.4}", e.epoch, e.train_loss, v),
            None => println!("epoch {:>3}  train loss {:.4}", e.epoch, e.train_loss),
        }
    }
    let digest = checkpoint::save(&output.model, out).map_err(data(format!("cannot write {}", out.display())))?;
    println!(
        "trained {} records in {:.1}s; checkpoint {} sha256 {digest}",
        cohort.records.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval_cmd(
    cohort_path: &Path,
    ckpt: &Path,
    ablations: &[Ablation],
    threshold: f64,
    csv: Option<&Path>,
    json: bool,
) -> Outcome {
    if let Some(c) = csv {
        distinct(c, cohort_path)?;
        distinct(c, ckpt)?;
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::Usage(format!("--threshold {threshold} outside [0, 1]")));
    }
    let cohort = load_cohort(cohort_path)?;
    let (model, version) = load_model(ckpt)?;
    let ablations = if ablations.is_empty() { Ablation::ALL.to_vec() } else { ablations.to_vec() };
    let mut reports = Vec::new();
    for a in ablations {
        let mut r = eval::evaluate(&model, &cohort.records, threshold, a).map_err(runtime("evaluation failed"))?;
        r.model = version.clone();
        r.split = cohort_path.display().to_string();
        reports.push(r);
    }
    if let Some(path) = csv {
        std::fs::write(path, eval::report_csv(&reports))
            .map_err(|e| Failure::Data(format!("cannot write {}: {e}", path.display())))?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&reports).expect("reports serialize"));
    } else {
        print!("{}", eval::report_table(&reports));
    }
    Ok(())
}

fn print_explanation(e: &Explanation) {
    println!(
        "target {}  prediction {:.4}  baseline {:.4}  sum(phi) {:.4}  mode {}{}",
        e.target,
        e.prediction,
        e.baseline_value,
        e.phi_sum(),
        e.mode,
        e.permutations.map(|p| format!(" ({p} permutations)")).unwrap_or_default()
    );
    let width = e.attributions.iter().map(|a| a.group.name.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:<12}  {:>9}  {:>8}", "group", "kind", "phi", "stderr");
    for a in &e.attributions {
        let kind = serde_json::to_value(a.group.kind).expect("kind serializes");
        println!(
            "{:<width$}  {:<12}  {:>+9.4}  {:>8}",
            a.group.name,
            kind.as_str().unwrap_or(""),
            a.phi,
            a.stderr.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into())
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn explain_cmd(
    ckpt: &Path,
    cohort_path: &Path,
    patient: &str,
    target: ExplainTarget,
    mut mode: ExplainMode,
    permutations: Option<usize>,
    seed: Option<u64>,
    json: bool,
) -> Outcome {
    if permutations.is_some() || seed.is_some() {
        match &mut mode {
            ExplainMode::Sampled { permutations: p, seed: s } => {
                *p = permutations.unwrap_or(*p);
                *s = seed.unwrap_or(*s);
            }
            _ => return Err(Failure::Usage("--permutations and --seed apply only to --mode sampled".into())),
        }
    }
    let (model, _) = load_model(ckpt)?;
    let mut reader = cohort::open_cohort(cohort_path).map_err(data(format!("cannot read cohort {}", cohort_path.display())))?;
    let record = loop {
        match reader.next() {
            Some(Ok(r)) if r.patient_id == patient => break r,
            Some(Ok(_)) => {}
            Some(Err(e)) => return Err(data(format!("cannot read cohort {}", cohort_path.display()))(e)),
            None => {
                return Err(Failure::Data(format!(
                    "patient {patient} not found in {}",
                    cohort_path.display()
                )))
            }
        }
    };
    let explanation = explain_record(&model, &record, target, mode).map_err(runtime("explanation failed"))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&explanation).expect("explanation serializes"));
    } else {
        print_explanation(&explanation);
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64, tolerance: f64, json: bool) -> Outcome {
    let started = Instant::now();
    let (params, example, weights) = tiny_case(seed);
    let report = grad_check(&params, &example, &weights, tolerance, seed).map_err(runtime("gradient check failed"))?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for t in &report.tensors {
            println!(
                "{:<14} {:>4} coords  max rel err {:.3e}  {}",
                t.name,
                t.coords_checked,
                t.max_rel_error,
                if t.passed { "ok" } else { "FAIL" }
            );
        }
        println!(
            "max relative error {:.3e} (tolerance {tolerance:e}) in {:.2}s",
            report.max_rel_error,
            started.elapsed().as_secs_f64()
        );
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!(
            "gradient mismatch in {}",
            report.failing().join(", ")
        )))
    }
}

fn serve_cmd(config: &Path) -> Outcome {
    use riskfuse_service::ServiceError;
    let config = riskfuse_service::Config::load(config).map_err(|e| Failure::Data(e.to_string()))?;
    riskfuse_service::run(&config).map_err(|e| match e {
        ServiceError::Config(_) | ServiceError::Store(_) => Failure::Data(e.to_string()),
        ServiceError::Io(_) => Failure::Runtime(e.to_string()),
    })
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen { config, out, n, seed } => gen(&config, &out, n, seed),
        Command::Train {
            cohort,
            out,
            seed,
            epochs,
            lr,
            batch,
        } => train_cmd(&cohort, &out, seed, epochs, lr, batch),
        Command::Eval {
            cohort,
            ckpt,
            ablation,
            threshold,
            csv,
            json,
        } => eval_cmd(&cohort, &ckpt, &ablation, threshold, csv.as_deref(), json),
        Command::Explain {
            ckpt,
            cohort,
            patient,
            target,
            mode,
            permutations,
            seed,
            json,
        } => explain_cmd(&ckpt, &cohort, &patient, target, mode, permutations, seed, json),
        Command::Gradcheck { seed, tolerance, json } => gradcheck_cmd(seed, tolerance, json),
        Command::Serve { config } => serve_cmd(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here too, and are not failures.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            if matches!(f, Failure::Usage(_)) {
                eprintln!("run `riskfuse --help` for usage");
            }
            ExitCode::from(f.code())
        }
    }
}
