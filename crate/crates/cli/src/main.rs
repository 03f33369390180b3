//! `gesa` command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gesa::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use gesa::convert::{convert_record_style, convert_wikihop_query, DEFAULT_MARKER};
use gesa::gradcheck::{grad_check, synthetic_case, GradCheckOptions};
use gesa::synth::gen_dataset;
use gesa::train::{evaluate, prepare, prepare_all, train};
use gesa::{build_vocab, parse_native, write_native, AblationSet, ErrorKind, GesaError, ModelParams, RunConfig};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Gesa(#[from] GesaError),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed: max relative error {error:e} >= {threshold:e}")]
    GradCheck { error: f64, threshold: f64 },
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Gesa(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::GradCheck { .. } => 3,
            CliError::Gesa(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "gesa", version, about = "Graph-enhanced self-attention cloze reader")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cloze dataset in the native format.
    GenSynth(GenSynthArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint and dump predictions.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Export the attention label matrix (and entity graph) of one instance.
    InspectPattern(InspectArgs),
    /// Retrain under attention ablations and print the comparison table.
    Ablate(AblateArgs),
    /// Convert external datasets.
    #[command(subcommand)]
    Convert(ConvertCommand),
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set hidden=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    /// Effective configuration. `threads` is capped by `GESA_THREADS` (default:
    /// number of processors) and defaults to that cap when not given explicitly.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut config = RunConfig::default();
        let mut explicit_threads = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            explicit_threads |= text.lines().any(|l| l.trim().split('=').next().map(str::trim) == Some("threads"));
            config.apply_text(&text)?;
        }
        explicit_threads |= self.overrides.iter().any(|o| o.split('=').next().map(str::trim) == Some("threads"));
        config.apply_overrides(&self.overrides)?;
        let cap = thread_cap()?;
        config.train.threads = if explicit_threads { config.train.threads.min(cap) } else { cap };
        config.validate()?;
        Ok(config)
    }
}

fn thread_cap() -> CliResult<usize> {
    match std::env::var("GESA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!("GESA_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    candidates: usize,
    #[arg(long, default_value_t = 6)]
    sentences: usize,
    #[arg(long, default_value_t = 1)]
    hops: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Directory for per-epoch checkpoints, `model.ckpt` and `train_log.tsv`.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Prediction dump, one `id<TAB>best_surface<TAB>score` line per instance.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the metric report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Label matrix CSV; masked cells are `-1`.
    #[arg(long)]
    out: PathBuf,
    /// Entity graph, one `i j TYPE` edge per line.
    #[arg(long)]
    edges: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    /// Ablation set to compare against the full model, e.g. `LOCAL_E2E` or
    /// `DROP_E2E_SENT,DROP_E2E_MATCH`. Repeat for several rows.
    #[arg(long = "spec", required = true)]
    specs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Subcommand)]
enum ConvertCommand {
    /// ReCoRD-style JSON or JSON lines into the native format.
    Record {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = DEFAULT_MARKER)]
        marker: String,
    },
    /// Print a WikiHop `property subject` query as a cloze question.
    WikihopQuery {
        #[arg(long)]
        property: String,
        #[arg(long)]
        subject: String,
    },
}

/// Provenance lines shared by every artifact (without the `# ` prefix).
fn provenance(command: &str) -> String {
    let args: Vec<String> = std::env::args().skip(1).collect();
    format!("gesa {} {command}\nargs={}\n", env!("CARGO_PKG_VERSION"), args.join(" "))
}

fn comment(lines: &str) -> String {
    lines.lines().map(|l| format!("# {l}\n")).collect()
}

fn config_provenance(command: &str, config: &RunConfig) -> String {
    let mut s = provenance(command);
    let _ = writeln!(s, "config_hash={}", config.hash());
    s.push_str(&config.render());
    s
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn gen_synth(a: &GenSynthArgs) -> CliResult {
    let data = gen_dataset(a.n, a.candidates, a.sentences, a.hops, a.seed)?;
    let mut header = provenance("gen-synth");
    let _ = write!(
        header,
        "n={}\ncandidates={}\nsentences={}\nhops={}\nseed={}\n",
        a.n, a.candidates, a.sentences, a.hops, a.seed
    );
    write_native(&a.out, &data, Some(&header))?;
    println!("wrote {} instances to {}", data.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> CliResult {
    let config = a.config.resolve()?;
    let train_data = parse_native(&a.train)?;
    let dev_data = match &a.dev {
        Some(p) => parse_native(p)?,
        None => Vec::new(),
    };
    let vocab = build_vocab(&train_data);
    let train_ex = prepare_all(&train_data, &vocab, &config.model)?;
    let dev_ex = prepare_all(&dev_data, &vocab, &config.model)?;
    fs::create_dir_all(&a.out_dir)?;

    let header = config_provenance("train", &config);
    let params = ModelParams::init(&config.model, vocab.len(), config.train.seed);
    log::info!("{} parameters, {} train / {} dev instances", params.parameter_count(), train_ex.len(), dev_ex.len());
    let mut log_text = comment(&header);
    log_text.push_str("epoch\ttrain_loss\ttrain_accuracy\tdev_accuracy\tdev_f1\n");

    let mut on_epoch = |e: &gesa::train::EpochLog, p: &ModelParams| -> gesa::Result<()> {
        let (acc, f1) = e.dev.as_ref().map_or((f64::NAN, f64::NAN), |d| (d.accuracy(), d.f1));
        eprintln!(
            "epoch {:>3}  loss {:.5}  train acc {:.4}  dev acc {:.4}  dev f1 {:.4}  ({:.1}s)",
            e.epoch, e.train_loss, e.train_accuracy, acc, f1, e.seconds
        );
        let _ = writeln!(log_text, "{}\t{:.8}\t{:.6}\t{:.6}\t{:.6}", e.epoch, e.train_loss, e.train_accuracy, acc, f1);
        let ck = Checkpoint { config: config.clone(), vocab: vocab.clone(), params: p.clone() };
        save_checkpoint(a.out_dir.join(format!("epoch-{}.ckpt", e.epoch)), &ck, Some(&header))
    };
    let outcome = train(params, &train_ex, &dev_ex, &config.model, &config.train, &mut on_epoch)?;
    write_file(&a.out_dir.join("train_log.tsv"), &log_text)?;
    let ck = Checkpoint { config, vocab, params: outcome.params };
    save_checkpoint(a.out_dir.join("model.ckpt"), &ck, Some(&header))?;
    println!("trained {} steps; wrote {}", outcome.steps, a.out_dir.join("model.ckpt").display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> CliResult {
    let start = Instant::now();
    let ck = load_checkpoint(&a.model)?;
    let mut config = ck.config;
    config.train.threads = thread_cap()?;
    let data = parse_native(&a.data)?;
    let examples = prepare_all(&data, &ck.vocab, &config.model)?;
    let (summary, preds) = evaluate(&ck.params, &examples, &config.model, config.train.threads)?;

    let header = config_provenance("eval", &config);
    if let Some(out) = &a.out {
        let mut text = comment(&header);
        for (ex, p) in examples.iter().zip(&preds) {
            let _ = writeln!(text, "{}\t{}\t{:.8}", ex.id, p.best_surface, p.scores[p.best_index]);
        }
        write_file(out, &text)?;
    }
    let report = format!(
        "dataset={}\nconfig_hash={}\nseed={}\ninstances={}\nexact_match={:.6}\nf1={:.6}\naccuracy={:.6}\nwall_time_s={:.3}\n",
        a.data.display(),
        config.hash(),
        config.train.seed,
        summary.count,
        summary.exact_match,
        summary.f1,
        summary.accuracy(),
        start.elapsed().as_secs_f64()
    );
    print!("{report}");
    if let Some(path) = &a.report {
        write_file(path, &(comment(&header) + &report))?;
    }
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> CliResult {
    let (config, ex, params) = synthetic_case(a.seed)?;
    let opts = GradCheckOptions { eps: a.eps, samples: a.samples, seed: a.seed };
    let report = grad_check(&params, &ex, &config, &opts)?;
    for (family, err) in &report.per_family {
        println!("{family:<24} {err:.3e}");
    }
    println!("checked {} coordinates", report.checked.len());
    println!("max relative error {:.3e}", report.max_rel_error);
    // NaN must fail too
    let passed = report.max_rel_error < a.threshold;
    if !passed {
        return Err(CliError::GradCheck { error: report.max_rel_error, threshold: a.threshold });
    }
    Ok(())
}

fn inspect_pattern(a: &InspectArgs) -> CliResult {
    let config = a.config.resolve()?;
    let data = parse_native(&a.data)?;
    let inst = data
        .get(a.instance)
        .ok_or_else(|| CliError::Usage(format!("instance {} out of range ({} instances)", a.instance, data.len())))?;
    let vocab = build_vocab(&data);
    let ex = prepare(inst, &vocab, &config.model)?;

    let mut header = config_provenance("inspect-pattern", &config);
    let _ = write!(header, "instance={}\nid={}\nwords={}\nentities={}\n", a.instance, inst.id, ex.seq.word_count(), ex.seq.entity_count());
    let mut csv = comment(&header).into_bytes();
    ex.labels.write_csv(&mut csv)?;
    write_file(&a.out, &String::from_utf8_lossy(&csv))?;
    if let Some(path) = &a.edges {
        let mut edges = comment(&header).into_bytes();
        ex.graph.write_edges(&mut edges)?;
        write_file(path, &String::from_utf8_lossy(&edges))?;
    }
    println!("{}x{} label matrix written to {}", ex.labels.size(), ex.labels.size(), a.out.display());
    Ok(())
}

fn ablate(a: &AblateArgs) -> CliResult {
    let config = a.config.resolve()?;
    let specs = a.specs.iter().map(|s| s.parse::<AblationSet>()).collect::<Result<Vec<_>, _>>()?;
    let train_data = parse_native(&a.train)?;
    let dev_data = parse_native(&a.dev)?;
    let table = gesa::ablation::run_ablation(&specs, &config, &train_data, &dev_data, &a.seeds)?;
    let seeds: Vec<String> = a.seeds.iter().map(u64::to_string).collect();
    print!("{table}");
    if let Some(out) = &a.out {
        let mut header = config_provenance("ablate", &config);
        let _ = writeln!(header, "seeds={}", seeds.join(","));
        write_file(out, &(comment(&header) + &table.to_string()))?;
    }
    Ok(())
}

fn convert(c: &ConvertCommand) -> CliResult {
    match c {
        ConvertCommand::Record { input, out, marker } => {
            let (data, report) = convert_record_style(input, marker)?;
            let mut header = provenance("convert record");
            let _ = write!(header, "input={}\nmarker={marker}\n", input.display());
            write_native(out, &data, Some(&header))?;
            println!(
                "converted {} of {} queries ({} skipped, {} spans widened, {} dropped)",
                report.converted,
                report.queries,
                report.skipped(),
                report.widened_spans,
                report.dropped_spans
            );
        }
        ConvertCommand::WikihopQuery { property, subject } => {
            let subject: Vec<&str> = subject.split_whitespace().collect();
            println!("{}", convert_wikihop_query(property, &subject)?.join(" "));
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::InspectPattern(a) => inspect_pattern(a),
        Command::Ablate(a) => ablate(a),
        Command::Convert(c) => convert(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
