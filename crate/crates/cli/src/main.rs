use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use prato_core::pipeline::image_seed;
use prato_core::selfcheck::run_checks;
use prato_core::synth::{generate_scene_with, DEFAULT_SCENE_SIZE};
use prato_core::{run_pipeline, BoxPrompt, ImageTensor, PipelineConfig, SweepSpec, TargetKind, ThresholdPolicy};
use serde_json::json;

#[derive(Parser)]
#[command(name = "prato", version, about = "Prompt-driven adaptive token pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with truth masks and tight boxes.
    Synth(SynthArgs),
    /// Score and prune one image against one box; prints the cost report.
    Prune(PruneArgs),
    /// Run a robustness sweep from a JSON spec.
    Sweep(SweepArgs),
    /// Run the built-in oracle checks.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Ellipse,
    Rectangle,
    Blob,
    /// Cycle through all kinds.
    Mixed,
}

impl KindArg {
    fn pick(self, i: usize) -> TargetKind {
        match self {
            KindArg::Ellipse => TargetKind::Ellipse,
            KindArg::Rectangle => TargetKind::Rectangle,
            KindArg::Blob => TargetKind::Blob,
            KindArg::Mixed => TargetKind::ALL[i % TargetKind::ALL.len()],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TauMode {
    Fixed,
    Percentile,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_SCENE_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, value_enum, default_value = "mixed")]
    kind: KindArg,
    #[arg(long, env = "PRATO_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    /// A `.prti` image, or one CSV plane per channel.
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,
    /// Box as inline JSON or a path to a JSON file.
    #[arg(long = "box")]
    prompt: String,
    /// Pipeline configuration JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    roi_k: Option<usize>,
    #[arg(long, value_enum, requires = "tau_value")]
    tau_mode: Option<TauMode>,
    #[arg(long, requires = "tau_mode")]
    tau_value: Option<f64>,
    #[arg(long, env = "PRATO_SEED")]
    seed: Option<u64>,
    /// Directory for per-stage relevance audits.
    #[arg(long)]
    audit_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "PRATO_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, env = "PRATO_SEED", default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Prune(a) => prune(a),
        Command::Sweep(a) => sweep(a),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut manifest = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let kind = a.kind.pick(i);
        let seed = image_seed(a.seed, i);
        let scene = generate_scene_with(kind, a.size, a.channels, seed)?;
        let stem = format!("scene_{i:04}");
        let paths = scene.save(&a.out, &stem)?;
        manifest.push(json!({
            "stem": stem,
            "kind": kind.name(),
            "seed": seed,
            "image": paths.image,
            "truth": paths.truth,
            "box": paths.prompt,
            "tight_box": scene.tight_box,
            "target_fraction": scene.target_fraction(),
        }));
    }
    let path = a.out.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).with_context(|| format!("writing {}", path.display()))?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(ExitCode::SUCCESS)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_image(paths: &[PathBuf]) -> Result<ImageTensor> {
    let all_csv = paths.iter().all(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")));
    if all_csv {
        return Ok(ImageTensor::load_csv_planes(paths)?);
    }
    match paths {
        [single] => Ok(ImageTensor::load(single)?),
        _ => bail!("several --image paths must all be CSV planes"),
    }
}

fn load_box(arg: &str) -> Result<BoxPrompt> {
    let text = if arg.trim_start().starts_with('{') { arg.to_string() } else { read_text(Path::new(arg))? };
    BoxPrompt::from_json(&text).with_context(|| format!("parsing box from {arg}"))
}

fn prune(a: PruneArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<PipelineConfig>(&read_text(p)?)
            .with_context(|| format!("parsing config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = a.patch_size {
        cfg.patch_size = p;
    }
    if let Some(k) = a.roi_k {
        cfg.prune.k = k;
    }
    match (a.tau_mode, a.tau_value) {
        (Some(TauMode::Fixed), Some(v)) => cfg.prune.policy = ThresholdPolicy::Fixed(v),
        (Some(TauMode::Percentile), Some(v)) => cfg.prune.policy = ThresholdPolicy::Percentile(v),
        _ => {}
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let img = load_image(&a.image)?;
    let prompt = load_box(&a.prompt)?;
    let out = run_pipeline(&img, &prompt, &cfg)?;
    if let Some(dir) = &a.audit_dir {
        for (i, stage) in out.stages.iter().enumerate() {
            stage.bundle.write_audit(dir, &format!("stage{i}_block{}", stage.block))?;
        }
    }
    println!("{}", serde_json::to_string_pretty(&out.cost)?);
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let mut spec = SweepSpec::from_json(&read_text(&a.spec)?).with_context(|| format!("parsing {}", a.spec.display()))?;
    if let Some(s) = a.seed {
        spec.pipeline.seed = s;
    }
    let summary = prato_core::run_sweep(&spec, &a.out)?;
    if summary.failures > 0 {
        eprintln!("{} of {} cells failed; see the status column", summary.failures, summary.cells);
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn check(a: CheckArgs) -> Result<ExitCode> {
    let outcomes = run_checks(a.seed);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    println!("{}/{} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
