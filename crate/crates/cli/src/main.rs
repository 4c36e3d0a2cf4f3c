use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cmr_core::bodymodel::{make_mini_model, MiniBodyModel};
use cmr_core::container::Container;
use cmr_core::gradsuite::{run_suite, Scope};
use cmr_core::regressor::Architecture;
use cmr_core::synth::{generate_dataset, Dataset, GenerateOptions, InputMode, Split, TrainingSample};
use cmr_core::trainer::{Checkpoint, StepLog, TrainConfig};

/// Graph-CNN mesh regression on synthetic renders of a skinned body model.
#[derive(Parser)]
#[command(name = "cmr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural body model.
    GenModel(GenModelArgs),
    /// Render a synthetic dataset from a body model.
    GenData(GenDataArgs),
    /// Train the mesh regressor (stage 1) and/or the parameter MLP (stage 2).
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset.
    Eval(EvalArgs),
    /// Regress a mesh from one rendered sample and write it as OBJ.
    Infer(InferArgs),
    /// Compare analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Train the graph model and a parameter-matched fully connected baseline
    /// on the same data and compare their validation errors.
    Ablate(AblateArgs),
}

#[derive(clap::Args)]
struct GenModelArgs {
    /// Seed of the procedural generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Approximate template vertex count.
    #[arg(long, default_value_t = 600)]
    vertices: usize,
    /// Skeleton joints (4 to 12).
    #[arg(long, default_value_t = 8)]
    joints: usize,
    /// Shape coefficients.
    #[arg(long, default_value_t = 4)]
    betas: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Silhouette,
    Parts,
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Body model file written by gen-model.
    #[arg(long)]
    model: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 640)]
    n: usize,
    /// Dataset seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of samples that keep only 2D keypoints.
    #[arg(long, default_value_t = 0.0)]
    weak_fraction: f64,
    /// Fraction of samples held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Rendered input: one silhouette plane or one plane per body part.
    #[arg(long, value_enum, default_value_t = InputArg::Parts)]
    input: InputArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; `data` is relative to its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stages to run.
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    stage: StageArg,
    /// Output directory for the checkpoint and training logs.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of fresh weights. Stage 2 alone
    /// defaults to the checkpoint already in the output directory.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Config override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Also evaluate the stage-2 parametric mesh (default: when stage 2 was trained).
    #[arg(long)]
    parametric: Option<bool>,
    /// JSON report path (default: metrics_<split>.json next to the checkpoint).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct InferArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample file of a generated dataset.
    #[arg(long)]
    sample: PathBuf,
    /// Output OBJ of the regressed mesh.
    #[arg(long)]
    out_obj: PathBuf,
    /// Also write the stage-2 body-model mesh as `<stem>_param.obj`.
    #[arg(long)]
    parametric: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Ops,
    Model,
    All,
}

#[derive(clap::Args)]
struct GradCheckArgs {
    /// Which checks to run.
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    scope: ScopeArg,
    /// Seed of the random inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct AblateArgs {
    /// Config file of `key = value` lines; `data` is relative to its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds to repeat the comparison with (default: the config seed).
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Directory for the trained checkpoints; nothing is saved without it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override `key=value`; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

const CHECKPOINT_FILE: &str = "checkpoint.cmrk";

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CMR_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CMR_THREADS must be a positive integer, got '{v}'"))?;
        ensure!(n > 0, "CMR_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Config file plus overrides, with `data` resolved against the file's directory.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    let mut base = PathBuf::from(".");
    if let Some(p) = path {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
        config.apply_text(&text)?;
        base = p.parent().map(Path::to_path_buf).unwrap_or_default();
    }
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override '{o}' is not key=value"))?;
        config.set(k, v)?;
    }
    if config.data.is_relative() && path.is_some() && !overrides.iter().any(|o| o.trim_start().starts_with("data")) {
        config.data = base.join(&config.data);
    }
    config.validate()?;
    Ok(config)
}

fn save_atomic(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ckpt.save(&tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn gen_model(a: GenModelArgs) -> Result<()> {
    let model = make_mini_model(a.seed, a.vertices, a.joints, a.betas)?;
    model.save(&a.out)?;
    println!(
        "wrote {} (vertices={} joints={} betas={})",
        a.out.display(),
        model.num_vertices(),
        model.num_joints(),
        model.num_betas()
    );
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let model = MiniBodyModel::load(&a.model).with_context(|| format!("cannot load model {}", a.model.display()))?;
    let opts = GenerateOptions {
        n: a.n,
        seed: a.seed,
        weak_fraction: a.weak_fraction,
        val_fraction: a.val_fraction,
        resolution: a.resolution,
        mode: match a.input {
            InputArg::Silhouette => InputMode::Silhouette,
            InputArg::Parts => InputMode::Parts,
        },
        ..GenerateOptions::default()
    };
    let manifest = generate_dataset(&model, &opts, &a.out)?;
    println!("wrote {} samples to {} (digest={})", manifest.entries.len(), a.out.display(), manifest.digest);
    Ok(())
}

/// Keys that fix parameter shapes; a resumed checkpoint must agree on them.
const ARCHITECTURE_KEYS: &[&str] = &[
    "regressor.architecture",
    "regressor.channels",
    "regressor.blocks",
    "regressor.groups",
    "regressor.fc_hidden",
    "regressor.coarsen_factor",
    "encoder.widths",
    "encoder.group_size",
    "encoder.pooling",
    "encoder.features",
    "mlp.hidden",
];

fn train_stage(
    ckpt: &mut Checkpoint,
    data: &Dataset,
    stage: u8,
    out: &Path,
) -> Result<()> {
    let (done, target) = match stage {
        1 => (ckpt.adam1.step as usize, ckpt.config.stage1_steps),
        _ => (ckpt.adam2.step as usize, ckpt.config.stage2_steps),
    };
    let steps = target.saturating_sub(done);
    let log_path = out.join(format!("stage{stage}.log"));
    let mut log = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(done > 0)
        .truncate(done == 0)
        .open(&log_path)?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let every = ckpt.config.checkpoint_every;
    let mut on_step = |c: &Checkpoint, s: &StepLog| -> cmr_core::Result<()> {
        writeln!(log, "{}", s.line())?;
        if s.step % 100 == 0 || s.step as usize == target {
            eprintln!("stage {stage} {}", s.line());
        }
        if every > 0 && s.step as usize % every == 0 {
            save_atomic(c, &ckpt_path).map_err(|e| cmr_core::Error::Io(std::io::Error::other(e.to_string())))?;
        }
        Ok(())
    };
    match stage {
        1 => ckpt.train_stage1(data, steps, &mut on_step)?,
        _ => ckpt.train_stage2(data, steps, &mut on_step)?,
    }
    save_atomic(ckpt, &ckpt_path)
}

fn train(a: TrainArgs) -> Result<()> {
    let config = load_config(a.config.as_deref(), &a.set)?;
    let data = Dataset::load(&config.data).with_context(|| format!("cannot load dataset {}", config.data.display()))?;
    fs::create_dir_all(&a.out)?;
    let existing = a.out.join(CHECKPOINT_FILE);
    let init = a.init.clone().or_else(|| (a.stage == StageArg::Two).then(|| existing.clone()));
    let mut ckpt = match init {
        Some(p) => {
            let mut c = Checkpoint::load(&p).with_context(|| format!("cannot load checkpoint {}", p.display()))?;
            for k in ARCHITECTURE_KEYS {
                ensure!(c.config.get(k)? == config.get(k)?, "checkpoint disagrees with the config on {k}");
            }
            c.config = config;
            c
        }
        None => Checkpoint::for_dataset(config, &data)?,
    };
    fs::write(a.out.join("config.txt"), ckpt.config.to_text())?;
    if matches!(a.stage, StageArg::One | StageArg::Both) {
        train_stage(&mut ckpt, &data, 1, &a.out)?;
    }
    if matches!(a.stage, StageArg::Two | StageArg::Both) {
        train_stage(&mut ckpt, &data, 2, &a.out)?;
    }
    println!(
        "wrote {} (stage1 steps={} stage2 steps={})",
        a.out.join(CHECKPOINT_FILE).display(),
        ckpt.adam1.step,
        ckpt.adam2.step
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let data = Dataset::load(&a.data).with_context(|| format!("cannot load dataset {}", a.data.display()))?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    };
    let parametric = a.parametric.unwrap_or(ckpt.adam2.step > 0);
    let report = ckpt.evaluate(&data, split, parametric)?;
    print!("{}", report.to_key_values());
    let path = a.report.unwrap_or_else(|| {
        let dir = a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default();
        dir.join(format!("metrics_{}.json", split.as_str()))
    });
    fs::write(&path, report.to_json())?;
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("cannot load checkpoint {}", a.checkpoint.display()))?;
    let sample = TrainingSample::from_container(&Container::load(&a.sample)?)
        .with_context(|| format!("cannot read sample {}", a.sample.display()))?;
    let expected = [ckpt.resolution * ckpt.resolution, ckpt.channels];
    ensure!(
        sample.image.shape() == expected,
        "sample image is {:?}, the checkpoint expects {:?}",
        sample.image.shape(),
        expected
    );
    let pred = ckpt.regressor.predict(&sample.image)?;
    ckpt.topology.template().with_vertices(&pred.mesh)?.save_obj(&a.out_obj)?;
    println!("wrote {}", a.out_obj.display());
    if a.parametric {
        let params = ckpt.mlp.predict(&pred.coarse)?;
        let mesh = ckpt.body.lbs_forward(&params)?;
        let stem = a.out_obj.file_stem().unwrap_or_default().to_string_lossy();
        let path = a.out_obj.with_file_name(format!("{stem}_param.obj"));
        ckpt.body.template().with_vertices(&mesh)?.save_obj(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<bool> {
    let scope = match a.scope {
        ScopeArg::Ops => Scope::Ops,
        ScopeArg::Model => Scope::Model,
        ScopeArg::All => Scope::All,
    };
    let outcomes = run_suite(scope, a.seed);
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} checks, {failed} failed", outcomes.len());
    Ok(failed == 0)
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = load_config(a.config.as_deref(), &a.set)?;
    let data = Dataset::load(&base.data).with_context(|| format!("cannot load dataset {}", base.data.display()))?;
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let mut wins = 0;
    for &seed in &seeds {
        let mut errors = Vec::new();
        for arch in [Architecture::Graph, Architecture::Fc] {
            let mut config = base.clone();
            config.seed = seed;
            config.architecture = arch;
            let mut ckpt = Checkpoint::for_dataset(config, &data)?;
            let steps = ckpt.config.stage1_steps;
            ckpt.train_stage1(&data, steps, &mut |_, s| {
                if s.step % 100 == 0 {
                    eprintln!("seed {seed} {} {}", arch.as_str(), s.line());
                }
                Ok(())
            })?;
            let report = ckpt.evaluate(&data, Split::Val, false)?;
            println!(
                "seed={seed} model={} head_params={} per_vertex_error={} mpjpe={}",
                arch.as_str(),
                ckpt.regressor.head_parameter_count(),
                report.per_vertex_error,
                report.mpjpe
            );
            if let Some(dir) = &a.out {
                fs::create_dir_all(dir)?;
                save_atomic(&ckpt, &dir.join(format!("{}_seed{seed}.cmrk", arch.as_str())))?;
            }
            errors.push(report.per_vertex_error);
        }
        wins += usize::from(errors[0] < errors[1]);
    }
    println!("graph_better={wins}/{}", seeds.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::GenModel(a) => gen_model(a)?,
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Infer(a) => infer(a)?,
        Command::GradCheck(a) => return grad_check(a),
        Command::Ablate(a) => ablate(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        fs::write(&path, "data = ds\nseed = 3\n").unwrap();
        let c = load_config(Some(&path), &["seed=5".into()]).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.data, dir.path().join("ds"));
        assert!(load_config(Some(&path), &["bogus=1".into()]).is_err());
    }

    #[test]
    fn stage_values_parse() {
        let cli = Cli::try_parse_from(["cmr", "train", "--out", "o", "--stage", "2"]).unwrap();
        assert!(matches!(cli.command, Command::Train(TrainArgs { stage: StageArg::Two, .. })));
        assert!(Cli::try_parse_from(["cmr", "train", "--out", "o", "--stage", "3"]).is_err());
    }
}
