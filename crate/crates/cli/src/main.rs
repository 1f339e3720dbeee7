use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use multiconvformer::analysis::{diagonality_report, kernel_importance, param_report};
use multiconvformer::checkpoint;
use multiconvformer::encoder::param_count;
use multiconvformer::gradcheck;
use multiconvformer::harness::{
    self, evaluate, generate, read_manifest, read_split, train, write_dataset, Split,
    SyntheticTaskSpec, TrainConfig,
};
use multiconvformer::model::{Model, ModelLayout};
use multiconvformer::multiconv::validate_kernels;
use multiconvformer::{ConvBlockKind, EncoderConfig, Error, FusionKind, ModelConfig, Real};

#[derive(Parser)]
#[command(
    name = "mcf",
    version,
    about = "Multi-kernel convolution speech encoder toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic token-sequence dataset.
    GenData(GenDataArgs),
    /// Train an encoder with CTC.
    Train(TrainArgs),
    /// Greedy-decode a split and report token error rate.
    Eval(EvalArgs),
    /// Attention and gate analyses of a trained checkpoint.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Print learnable-parameter counts.
    ParamCount(ParamCountArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON task spec; fields not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    dev_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Replace an existing dataset.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct ModelOverrides {
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionKind>,
    /// Comma-separated odd kernel sizes, e.g. 7,15,23,31.
    #[arg(long, value_parser = parse_kernels)]
    kernels: Option<KernelList>,
    #[arg(long, value_parser = parse_conv_block)]
    conv_block: Option<ConvBlockKind>,
}

impl ModelOverrides {
    fn apply(&self, cfg: &mut EncoderConfig) {
        if let Some(f) = self.fusion {
            cfg.fusion = f;
        }
        if let Some(k) = &self.kernels {
            cfg.kernels = k.0.clone();
        }
        if let Some(c) = self.conv_block {
            cfg.conv_block = c;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for config, metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; defaults to the toy encoder.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    model: ModelOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Per-utterance CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-layer attention diagonality.
    Diagonality(AnalyzeArgs),
    /// Mean kernel weights of weighted fusion, per layer.
    GateImportance(AnalyzeArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev", value_parser = parse_split)]
    split: Split,
    /// Analyze at most this many utterances.
    #[arg(long)]
    limit: Option<usize>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamCountArgs {
    /// JSON encoder or training config; defaults to the toy encoder.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOverrides,
    /// Vocabulary size for the output head.
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    /// Compare all fusions and both baselines at this config.
    #[arg(long)]
    compare: bool,
    /// Write the report as JSON instead of a table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Number of randomized draws of every case family.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// JSON report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
struct KernelList(Vec<usize>);

fn parse_kernels(s: &str) -> Result<KernelList, String> {
    let ks = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("'{t}' is not a kernel size"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    validate_kernels(&ks).map_err(|e| e.to_string())?;
    Ok(KernelList(ks))
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_conv_block(s: &str) -> Result<ConvBlockKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Accepts either a training config (with an `encoder` object) or a bare
/// encoder config.
fn load_encoder_config(path: &Path) -> anyhow::Result<EncoderConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let cfg = match value.get("encoder") {
        Some(enc) => serde_json::from_value(enc.clone())?,
        None => serde_json::from_value(value)?,
    };
    Ok(cfg)
}

fn default_encoder() -> EncoderConfig {
    harness::toy_encoder_config(ConvBlockKind::MultiConv, FusionKind::Weighted)
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut spec: SyntheticTaskSpec = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticTaskSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.train_size = a.train_size.unwrap_or(spec.train_size);
    spec.dev_size = a.dev_size.unwrap_or(spec.dev_size);
    spec.test_size = a.test_size.unwrap_or(spec.test_size);
    let ds = generate(&spec)?;
    write_dataset(&ds, &a.out, a.force)?;
    println!(
        "wrote {} train / {} dev / {} test utterances to {}",
        ds.train.len(),
        ds.dev.len(),
        ds.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::new(default_encoder()),
    };
    a.model.apply(&mut cfg.encoder);
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.encoder.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.out_dir = Some(a.out.clone());
    cfg.validate()?;

    let manifest = read_manifest(&a.data)?;
    let (_, train_set) = read_split(&a.data, Split::Train)?;
    let (_, dev_set) = read_split(&a.data, Split::Dev)?;
    let outcome = train::<f32>(&cfg, manifest.spec.vocab_size, &train_set, &dev_set, |r| {
        eprintln!(
            "step {:>5}  train {:.4}  dev {:.4}  ter {:.2}%  ({:.0}s)",
            r.step,
            r.train_loss,
            r.dev_loss,
            100.0 * r.dev_ter,
            r.wall_seconds
        );
    })?;
    if outcome.skipped > 0 {
        eprintln!(
            "warning: skipped {} infeasible training utterances",
            outcome.skipped
        );
    }
    println!(
        "best dev TER {:.2}% at step {} ({} steps run); checkpoints in {}",
        100.0 * outcome.best_dev_ter,
        outcome.best_step,
        outcome.steps_run,
        a.out.display()
    );
    Ok(())
}

enum Loaded {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Loaded> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (_, width) = checkpoint::peek_config(&bytes)?;
    Ok(match width {
        4 => Loaded::F32(checkpoint::decode(&bytes)?),
        8 => Loaded::F64(checkpoint::decode(&bytes)?),
        w => bail!("unsupported element width {w}"),
    })
}

fn load_eval_split(
    dir: &Path,
    split: Split,
    vocab: usize,
) -> anyhow::Result<Vec<harness::Utterance>> {
    let (spec, utts) = read_split(dir, split)?;
    if spec.vocab_size != vocab {
        return Err(Error::Config(format!(
            "dataset vocabulary {} does not match model vocabulary {vocab}",
            spec.vocab_size
        ))
        .into());
    }
    Ok(utts)
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    fn run<F: Real>(m: &Model<F>, a: &EvalArgs) -> anyhow::Result<()> {
        let utts = load_eval_split(&a.data, a.split, m.config().vocab_size)?;
        let report = evaluate(m, &utts)?;
        if let Some(p) = &a.out {
            report.write_csv(fs::File::create(p)?)?;
        }
        println!(
            "{} split: TER {:.2}% ({} errors / {} tokens), mean CTC loss {:.4}",
            a.split.name(),
            100.0 * report.ter,
            report.errors,
            report.reference_tokens,
            report.loss
        );
        Ok(())
    }
    match load_checkpoint(&a.checkpoint)? {
        Loaded::F32(m) => run(&m, &a),
        Loaded::F64(m) => run(&m, &a),
    }
}

fn sink(out: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)
        }
        None => Box::new(io::stdout()),
    })
}

fn analyze_cmd(cmd: AnalyzeCommand) -> anyhow::Result<()> {
    fn run<F: Real>(m: &Model<F>, a: &AnalyzeArgs, gates: bool) -> anyhow::Result<()> {
        let mut utts = load_eval_split(&a.data, a.split, m.config().vocab_size)?;
        if let Some(n) = a.limit {
            utts.truncate(n);
        }
        let feats: Vec<_> = utts
            .iter()
            .map(|u| harness::train::to_real::<F>(&u.features))
            .collect();
        let w = sink(&a.out)?;
        if gates {
            kernel_importance(m, &feats)?.write_csv(w)?;
        } else {
            let r = diagonality_report(m, &feats)?;
            r.write_csv(w)?;
            eprintln!("average diagonality {:.4}", r.average);
        }
        Ok(())
    }
    let (a, gates) = match &cmd {
        AnalyzeCommand::Diagonality(a) => (a, false),
        AnalyzeCommand::GateImportance(a) => (a, true),
    };
    match load_checkpoint(&a.checkpoint)? {
        Loaded::F32(m) => run(&m, a, gates),
        Loaded::F64(m) => run(&m, a, gates),
    }
}

fn param_count_cmd(a: ParamCountArgs) -> anyhow::Result<()> {
    let mut enc = match &a.config {
        Some(p) => load_encoder_config(p)?,
        None => default_encoder(),
    };
    a.model.apply(&mut enc);
    if a.compare {
        let mut variants: Vec<(String, EncoderConfig)> = FusionKind::ALL
            .iter()
            .map(|&f| {
                let mut c = enc.clone();
                c.conv_block = ConvBlockKind::MultiConv;
                c.fusion = f;
                (f.name().to_string(), c)
            })
            .collect();
        for base in [ConvBlockKind::Csgu, ConvBlockKind::Conformer] {
            let mut c = enc.clone();
            c.conv_block = base;
            variants.push((base.name().to_string(), c));
        }
        let rows = param_report(&variants)?;
        if a.out.is_some() {
            serde_json::to_writer_pretty(sink(&a.out)?, &rows)?;
            return Ok(());
        }
        println!(
            "{:<10} {:>12} {:>10} {:>10}",
            "variant", "encoder", "fusion", "delta"
        );
        for r in rows {
            println!(
                "{:<10} {:>12} {:>10} {:>+10}",
                r.label, r.total, r.fusion, r.delta
            );
        }
        return Ok(());
    }
    let layout = ModelLayout::new(&ModelConfig {
        encoder: enc,
        vocab_size: a.vocab,
    })?;
    let count = param_count(layout.builder.specs());
    if a.out.is_some() {
        serde_json::to_writer_pretty(sink(&a.out)?, &count)?;
        return Ok(());
    }
    for (block, n) in &count.blocks {
        println!("{block:<24} {n:>10}");
    }
    println!("{:<24} {:>10}", "total", count.total);
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> anyhow::Result<()> {
    let report = gradcheck::run_suite(a.seed, a.reps)?;
    for c in &report.cases {
        if !c.passed {
            println!("FAIL {:<40} max rel err {:.3e}", c.name, c.max_rel_error);
        }
    }
    if let Some(p) = &a.out {
        serde_json::to_writer_pretty(fs::File::create(p)?, &report)?;
    }
    println!(
        "{} cases, max relative error {:.3e}, {:.1}s",
        report.cases.len(),
        report.max_rel_error(),
        report.seconds
    );
    if !report.passed() {
        bail!("gradient check failed");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(c) => analyze_cmd(c),
        Command::ParamCount(a) => param_count_cmd(a),
        Command::GradCheck(a) => grad_check_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Config(_)) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
