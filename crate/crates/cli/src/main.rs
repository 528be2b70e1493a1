use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use negrec_cli::{emit_report, CliError, CliResult, Run, RunConfig, Step, Variant};
use negrec_core::grpo::RewardScheme;
use negrec_core::targets::Stage;

#[derive(Parser)]
#[command(name = "negrec", version, about = "Negative-feedback generative recommendation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct VariantArg {
    /// Model variant whose artifacts the step reads and writes.
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    variant: Variant,
}

#[derive(Args, Clone)]
struct VariantStep {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    variant: VariantArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(Common),
    /// Train the residual-quantized codec on item features.
    TrainCodec(Common),
    /// Assign a semantic ID to every item.
    AssignSids(Common),
    /// Build the Swing index over training-period negatives.
    BuildSwing(Common),
    /// Build training and held-out samples with their target sets.
    BuildTargets(Common),
    /// Item-level alignment fine-tuning.
    TrainAlign(VariantStep),
    /// Warm-up fine-tuning on future negatives.
    WarmupSft(VariantStep),
    /// Policy optimization, one curriculum stage or all of them.
    Grpo {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variant: VariantArg,
        /// Stage number (1, 2 or 3); every stage of the variant when omitted.
        #[arg(long)]
        stage: Option<usize>,
        /// Reward scheme letter, a to e.
        #[arg(long)]
        reward: Option<String>,
    },
    /// Held-out metrics of the trained policy.
    Eval(VariantStep),
    /// Offline filtering of held-out exposures.
    Filter(VariantStep),
    /// Every step end to end, then the report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also train and report an ablation: no-alignment or no-curriculum.
        #[arg(long, value_parser = parse_variant)]
        ablate: Vec<Variant>,
    },
    /// Regenerate report.txt and report.json from existing artifacts.
    Report(Common),
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    if s == "full" {
        return Ok(Variant::Full);
    }
    Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}; expected full, no-alignment or no-curriculum"))
}

fn load(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run_step(common: &Common, variant: Variant, step: Step) -> CliResult<()> {
    let run = Run::open(load(common)?)?;
    let ran = run.ensure(variant, step)?;
    println!("{} {}", step.name(), if ran { "done" } else { "up to date" });
    Ok(())
}

fn write_report(run: &Run) -> CliResult<()> {
    let report = emit_report(run)?;
    let io = |e: std::io::Error| CliError::step("report", e);
    std::fs::write(run.root.join("report.txt"), &report.text).map_err(io)?;
    std::fs::write(run.root.join("report.json"), &report.json).map_err(io)?;
    print!("{}", report.text);
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenData(c) => run_step(&c, Variant::Full, Step::GenData),
        Command::TrainCodec(c) => run_step(&c, Variant::Full, Step::TrainCodec),
        Command::AssignSids(c) => run_step(&c, Variant::Full, Step::AssignSids),
        Command::BuildSwing(c) => run_step(&c, Variant::Full, Step::BuildSwing),
        Command::BuildTargets(c) => run_step(&c, Variant::Full, Step::BuildTargets),
        Command::TrainAlign(a) => run_step(&a.common, a.variant.variant, Step::TrainAlign),
        Command::WarmupSft(a) => run_step(&a.common, a.variant.variant, Step::WarmupSft),
        Command::Eval(a) => run_step(&a.common, a.variant.variant, Step::Eval),
        Command::Filter(a) => run_step(&a.common, a.variant.variant, Step::Filter),
        Command::Grpo { common, variant, stage, reward } => {
            let mut cfg = load(&common)?;
            if let Some(r) = reward {
                cfg.grpo.reward.scheme = r.parse::<RewardScheme>().map_err(|e| CliError::Usage(e.to_string()))?;
            }
            let stages = match stage {
                Some(n) => vec![Stage::from_number(n).ok_or_else(|| CliError::Usage(format!("no stage {n}")))?],
                None => variant.variant.stages(),
            };
            let run = Run::open(cfg)?;
            for s in stages {
                let step = Step::Grpo(s);
                let ran = run.ensure(variant.variant, step)?;
                println!("{} {}", step.name(), if ran { "done" } else { "up to date" });
            }
            Ok(())
        }
        Command::Run { common, ablate } => {
            let run = Run::open(load(&common)?)?;
            run.run_variant(Variant::Full)?;
            for v in ablate {
                run.run_variant(v)?;
            }
            write_report(&run)
        }
        Command::Report(c) => write_report(&Run::open(load(&c)?)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("negrec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
