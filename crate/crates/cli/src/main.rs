use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use evmamba::data::{DataSource, Dataset};
use evmamba::model::{Model, ModelSpec};
use evmamba::profile::profile;
use evmamba::report::{inspect_model, inspect_scan_plan};
use evmamba::train::{evaluate, train, MetricsLog, TrainConfig};
use evmamba::verify::{equivalence_suite, standard_gradchecks};
use evmamba::Precision;

const CHECKPOINT: &str = "checkpoint.evss";
const METRICS: &str = "metrics.csv";
const SPEC: &str = "spec.json";

#[derive(Parser)]
#[command(name = "evmamba", version, about = "Selective-scan vision backbones at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a toy dataset; writes a checkpoint, the spec and a metrics CSV.
    Train(TrainArgs),
    /// Top-1 accuracy and confusion counts of a checkpoint.
    Eval(EvalArgs),
    /// Stage table of a variant or spec file, or `scan-plan H W p`.
    Inspect {
        target: String,
        args: Vec<usize>,
    },
    /// Run the equivalence suite and gradient checks; exits nonzero on failure.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        skip_gradcheck: bool,
    },
    /// Parameter and MAC counts per module.
    Profile {
        /// Variants or spec files; defaults to T, S and B.
        targets: Vec<String>,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// T, S, B, `toy`, or a JSON spec file.
    #[arg(long, default_value = "toy")]
    spec: String,
    /// `synthetic[:samples=..,classes=..,size=..,seed=..]` or a dataset directory.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value_t = 64, value_parser = parse_precision)]
    precision: u32,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    /// Warmup epochs.
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    /// Random horizontal flips.
    #[arg(long)]
    flip: bool,
    /// Stop once training accuracy reaches this fraction.
    #[arg(long)]
    target_acc: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint file; defaults to `<out>/checkpoint.evss`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory written by `train`; its spec is used when `--spec` is `toy`.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

fn parse_precision(s: &str) -> std::result::Result<u32, String> {
    match s {
        "32" => Ok(32),
        "64" => Ok(64),
        _ => Err(format!("precision must be 32 or 64, got `{s}`")),
    }
}

fn resolve_spec(spec: &str, data: &Dataset) -> Result<ModelSpec> {
    if spec == "toy" {
        let (h, w) = data.resolution();
        if h != w {
            bail!("toy spec needs square images, got {h}x{w}");
        }
        return Ok(ModelSpec::toy(data.num_classes, h));
    }
    Ok(ModelSpec::resolve(spec)?)
}

fn load_data(text: &str) -> Result<Dataset> {
    let source = DataSource::parse(text)?;
    source.load().with_context(|| format!("loading dataset {source}"))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.common.data)?;
    let spec = resolve_spec(&a.common.spec, &data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        warmup: a.warmup,
        seed: a.seed,
        precision: Precision::from_bits(a.common.precision)?,
        weight_decay: a.weight_decay,
        flip: a.flip,
        target_accuracy: a.target_acc,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join(SPEC), spec.to_json()?)?;
    let mut model = Model::new(spec, a.seed)?;
    let mut log = MetricsLog::create(&a.out.join(METRICS))?;
    println!(
        "training {} ({} params) on {} samples for up to {} epochs",
        model.spec().name,
        model.num_params(),
        data.len(),
        cfg.epochs
    );
    let history = train(&mut model, &data, &cfg, |m| {
        log.append(m)?;
        println!("epoch {:>4}  loss {:.6}  acc {:.4}  lr {:.3e}", m.epoch, m.loss, m.acc, m.lr);
        Ok(())
    })?;
    model.save_checkpoint(&a.out.join(CHECKPOINT))?;
    if let Some(last) = history.last() {
        println!("final accuracy {:.4} after {} epochs", last.acc, last.epoch);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let data = load_data(&a.common.data)?;
    let saved = a.out.join(SPEC);
    let spec = if a.common.spec == "toy" && saved.exists() {
        ModelSpec::load(&saved)?
    } else {
        resolve_spec(&a.common.spec, &data)?
    };
    let ckpt = a.checkpoint.unwrap_or_else(|| a.out.join(CHECKPOINT));
    let mut model = Model::new(spec, 0)?;
    model
        .load_checkpoint(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let report = evaluate(&model, &data, Precision::from_bits(a.common.precision)?)?;
    println!(
        "accuracy {} ({}/{}), mean loss {:.6}",
        report.accuracy(),
        report.correct,
        report.total,
        report.mean_loss
    );
    println!("confusion (rows: true, cols: predicted)");
    for (i, row) in report.confusion.iter().enumerate().take(data.num_classes) {
        let cells: Vec<String> = row.iter().take(data.num_classes).map(|c| format!("{c:>4}")).collect();
        println!("{i:>3} |{}", cells.join(""));
    }
    Ok(())
}

fn cmd_inspect(target: &str, args: &[usize]) -> Result<()> {
    if target == "scan-plan" {
        let [h, w, p] = args else {
            bail!("usage: inspect scan-plan H W p");
        };
        println!("{}", inspect_scan_plan(*h, *w, *p)?);
        return Ok(());
    }
    if !args.is_empty() {
        bail!("unexpected arguments after `{target}`");
    }
    println!("{}", inspect_model(&ModelSpec::resolve(target)?));
    Ok(())
}

fn cmd_verify(seed: u64, skip_gradcheck: bool) -> Result<bool> {
    let suite = equivalence_suite(seed);
    println!("equivalence suite: {suite}");
    let mut ok = suite.passed();
    if !skip_gradcheck {
        for (name, report) in standard_gradchecks(seed)? {
            println!("gradcheck {name}: {report}");
            ok &= report.passed();
        }
    }
    println!("{}", if ok { "verify: PASS" } else { "verify: FAIL" });
    Ok(ok)
}

fn cmd_profile(targets: &[String], resolution: Option<usize>) -> Result<()> {
    let names: Vec<String> = if targets.is_empty() {
        ["T", "S", "B"].map(String::from).to_vec()
    } else {
        targets.to_vec()
    };
    for (i, name) in names.iter().enumerate() {
        let spec = ModelSpec::resolve(name)?;
        let r = resolution.unwrap_or(spec.input_resolution);
        if i > 0 {
            println!();
        }
        println!("{}", profile(&spec, r, r));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Inspect { target, args } => cmd_inspect(&target, &args)?,
        Command::Verify { seed, skip_gradcheck } => return cmd_verify(seed, skip_gradcheck),
        Command::Profile { targets, resolution } => cmd_profile(&targets, resolution)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
