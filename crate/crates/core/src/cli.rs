//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::data::{
    manifold_shard, read_shard, sample_mlrh, write_shard, ActivationShard, LabelValues, ManifoldKind, ManifoldSpec,
    MlrhSpec, SHARD_MAGIC,
};
use crate::eval::{ce_score, core_metrics, read_ce_triples, sequential_batches};
use crate::model::{param_count, read_checkpoint, Checkpoint, SmixaeConfig, CHECKPOINT_MAGIC};
use crate::numerics::derive_seed;
use crate::probe::{
    collect_expert_samples, random_sample_export, rank_expert_samples, rank_newline_samples, Hypothesis,
    ProbeTask, RandomSampleOptions, RegressionKind,
};
use crate::train::{tiny_run, train, TrainRunConfig};

#[derive(Debug, Parser)]
#[command(name = "smixae", version, about = "Sparse mixture of bottlenecked expert autoencoders")]
struct Cli {
    /// Worker threads for per-expert parallelism (1 keeps runs bit-reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on activation shards.
    Train(TrainArgs),
    /// Reconstruction and sparsity metrics of a checkpoint on shards.
    Eval(EvalArgs),
    /// Rank experts by how well their bottleneck predicts a label.
    Probe(ProbeArgs),
    /// Rank experts by the periodic-minus-linear R² of a position label.
    NewlineProbe(NewlineArgs),
    /// Export point clouds of randomly chosen active experts.
    RandomSample(RandomSampleArgs),
    /// Generate a synthetic activation shard.
    GenToy(GenToyArgs),
    /// Describe a shard or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Tiny,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Run config (JSON). Either this or --preset is required.
    #[arg(long, required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in run config; the input dimension is taken from the data.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// Activation shard (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output directory for checkpoints, log and the effective config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config token budget.
    #[arg(long)]
    total_tokens: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Optional CSV of per-token loss triples (ce_clean,ce_patched,ce_ablated).
    #[arg(long)]
    ce: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Label column to predict.
    #[arg(long)]
    task: String,
    /// identity, cyclic:N, log1p or log10.
    #[arg(long, default_value = "identity")]
    hypothesis: Hypothesis,
    /// linear, ridge, logistic or multinomial.
    #[arg(long, default_value = "linear")]
    regression: RegressionKind,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path (JSON).
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct NewlineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Label column holding characters since the last newline.
    #[arg(long, default_value = "chars_since_newline")]
    label: String,
    /// Period L of the ring hypothesis; labels must lie in [0, L). For text
    /// wrapped at W characters per line the cycle is W + 1 (the newline).
    #[arg(long)]
    period: f64,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct RandomSampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Label column copied next to each point.
    #[arg(long)]
    label: Option<String>,
    #[arg(long, default_value_t = 1000)]
    max_points: usize,
    #[arg(long, default_value_t = 100)]
    min_activations: usize,
    #[arg(long, default_value_t = 10)]
    sample_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ToyKind {
    Torus,
    Helix,
    Circle,
    Line,
    Cluster,
    /// Sparse sum of embedded manifolds; needs --config.
    Mlrh,
}

#[derive(Debug, Args)]
struct GenToyArgs {
    #[arg(long, value_enum)]
    kind: ToyKind,
    /// Manifold (or mLRH) spec as JSON; overrides the built-in shape parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    count: usize,
    /// Ambient dimension; overrides the config.
    #[arg(long)]
    ambient: Option<usize>,
    /// Intrinsic Gaussian noise; overrides the config.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Shard (.smxa) or checkpoint (.smxc).
    path: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(stderr, "{text}");
                1
            } else {
                let _ = write!(stdout, "{text}");
                0
            };
        }
    };
    if cli.workers == 0 {
        let _ = writeln!(stderr, "error: --workers must be at least 1");
        return 1;
    }
    set_workers(cli.workers);
    match dispatch(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            2
        }
    }
}

#[cfg(feature = "parallel")]
fn set_workers(n: usize) {
    // The global pool can only be built once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

#[cfg(not(feature = "parallel"))]
fn set_workers(_n: usize) {}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Probe(a) => cmd_probe(a, out),
        Command::NewlineProbe(a) => cmd_newline(a, out),
        Command::RandomSample(a) => cmd_random_sample(a, out),
        Command::GenToy(a) => cmd_gen_toy(a, out),
        Command::Inspect(a) => cmd_inspect(a, out),
    }
}

fn load_shards(paths: &[PathBuf]) -> Result<Vec<ActivationShard>> {
    paths
        .iter()
        .map(|p| read_shard(p).with_context(|| format!("reading shard {}", p.display())))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn check_dims(ck: &Checkpoint, shards: &[ActivationShard]) -> Result<()> {
    for s in shards {
        if s.n() != ck.meta.model.n {
            bail!(
                "data dimension {} does not match the checkpoint's input dimension {}",
                s.n(),
                ck.meta.model.n
            );
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn display_paths(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let shards = load_shards(&a.data)?;
    let mut run: TrainRunConfig = match (&a.config, a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing run config {}", path.display()))?
        }
        (None, Some(Preset::Tiny)) => {
            let n = shards[0].n();
            let mut model = SmixaeConfig::full_scale(n);
            (model.j, model.k) = (32, 4);
            let mut run = tiny_run(model, 2000, 256);
            run.checkpoint_every = 1000;
            run
        }
        (None, None) => bail!("either --config or --preset is required"),
    };
    if let Some(seed) = a.seed {
        run.seed = seed;
    }
    if let Some(t) = a.total_tokens {
        run.total_tokens = t;
    }
    let outcome = train(&run, &shards, Some(&a.out))?;
    let last = outcome.log.last().expect("at least one step");
    writeln!(
        out,
        "trained {} steps: mse {:.6e}, aux {:.6e}, fired fraction {:.3}, t {:.6}",
        last.step, last.mse, last.aux, last.frac_experts_fired_window, last.t
    )?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let shards = load_shards(&a.data)?;
    check_dims(&ck, &shards)?;
    let mut report = core_metrics(
        &ck.params,
        &ck.meta.model,
        sequential_batches(&shards, a.batch_size),
        ck.meta.normalization.as_ref(),
    )?;
    if let Some(ce) = &a.ce {
        let triples = read_ce_triples(ce).with_context(|| format!("reading {}", ce.display()))?;
        report.ce_score = Some(ce_score(&triples)?);
    }
    let doc = json!({
        "inputs": { "ckpt": a.ckpt.display().to_string(), "data": display_paths(&a.data),
                    "ce": a.ce.as_ref().map(|p| p.display().to_string()), "batch_size": a.batch_size },
        "metrics": report,
    });
    write_json(&a.out, &doc)?;
    writeln!(
        out,
        "explained variance {:.4}, L0 {:.2} experts / {:.2} coords, frac alive {:.3}",
        report.explained_variance, report.l0_expert, report.l0_flat, report.frac_alive
    )?;
    Ok(())
}

fn stacked(shards: &[ActivationShard]) -> Result<ActivationShard> {
    Ok(ActivationShard::concat(shards)?)
}

fn cmd_probe(a: ProbeArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let shards = load_shards(&a.data)?;
    check_dims(&ck, &shards)?;
    let data = stacked(&shards)?;
    let labels = data
        .label(&a.task)
        .with_context(|| format!("label column {:?} not found in the data", a.task))?;
    let samples = collect_expert_samples(&ck.params, &ck.meta.model, &data.to_tensor(), ck.meta.normalization.as_ref())?;
    let task = ProbeTask {
        label: a.task.clone(),
        hypothesis: a.hypothesis,
        regression: a.regression,
        folds: a.folds,
        seed: a.seed,
    };
    let report = rank_expert_samples(&samples, labels, &task)?;
    let doc = json!({
        "inputs": { "ckpt": a.ckpt.display().to_string(), "data": display_paths(&a.data) },
        "report": report,
    });
    write_json(&a.report, &doc)?;
    writeln!(out, "top-1 {:.4} (expert {}), top-5 mean {:.4}", report.top1, report.top1_expert, report.top5_mean)?;
    Ok(())
}

fn cmd_newline(a: NewlineArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let shards = load_shards(&a.data)?;
    check_dims(&ck, &shards)?;
    let data = stacked(&shards)?;
    let chars = data
        .label(&a.label)
        .with_context(|| format!("label column {:?} not found in the data", a.label))?
        .as_f64();
    let samples = collect_expert_samples(&ck.params, &ck.meta.model, &data.to_tensor(), ck.meta.normalization.as_ref())?;
    let mut report = rank_newline_samples(&samples, &chars, a.period, a.folds, a.seed)?;
    report.task.label = a.label.clone();
    let doc = json!({
        "inputs": { "ckpt": a.ckpt.display().to_string(), "data": display_paths(&a.data), "period": a.period },
        "report": report,
    });
    write_json(&a.report, &doc)?;
    writeln!(out, "top-1 ΔR² {:.4} (expert {}), top-5 mean {:.4}", report.top1, report.top1_expert, report.top5_mean)?;
    Ok(())
}

fn cmd_random_sample(a: RandomSampleArgs, out: &mut dyn Write) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let shards = load_shards(&a.data)?;
    check_dims(&ck, &shards)?;
    let data = stacked(&shards)?;
    let labels = match &a.label {
        Some(name) => Some(
            data.label(name)
                .with_context(|| format!("label column {name:?} not found in the data"))?,
        ),
        None => None,
    };
    let opts = RandomSampleOptions {
        max_points: a.max_points,
        min_activations: a.min_activations,
        sample_size: a.sample_size,
        seed: a.seed,
    };
    let summary = random_sample_export(
        &ck.params,
        &ck.meta.model,
        sequential_batches(std::slice::from_ref(&data), a.batch_size),
        ck.meta.normalization.as_ref(),
        labels,
        &opts,
        &a.out,
    )?;
    if let Some(w) = &summary.warning {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(
        out,
        "exported {} of {} qualifying experts to {}",
        summary.experts.len(),
        summary.qualifying_experts,
        a.out.display()
    )?;
    Ok(())
}

fn default_kind(kind: ToyKind) -> ManifoldKind {
    match kind {
        ToyKind::Torus => ManifoldKind::Torus {
            major_radius: 2.0,
            minor_radius: 0.75,
        },
        ToyKind::Helix => ManifoldKind::Helix {
            radius: 1.0,
            pitch: 1.0,
            turns: 3.0,
        },
        ToyKind::Circle => ManifoldKind::Circle { radius: 1.0 },
        ToyKind::Line => ManifoldKind::Line { length: 2.0 },
        ToyKind::Cluster | ToyKind::Mlrh => ManifoldKind::Cluster {
            centers: 8,
            center_spread: 1.0,
            spread: 0.1,
        },
    }
}

fn cmd_gen_toy(a: GenToyArgs, out: &mut dyn Write) -> Result<()> {
    let read_config = |path: &Path| -> Result<String> {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
    };
    let (shard, effective) = if a.kind == ToyKind::Mlrh {
        let path = a.config.as_ref().context("--kind mlrh needs --config with an mLRH spec")?;
        let mut spec: MlrhSpec = serde_json::from_str(&read_config(path)?).context("parsing mLRH spec")?;
        if let Some(n) = a.ambient {
            spec.n = n;
        }
        if let Some(s) = a.noise {
            spec.features.iter_mut().for_each(|f| f.noise_sigma = s);
        }
        (sample_mlrh(&spec, a.count, a.seed)?, serde_json::to_value(&spec)?)
    } else {
        let mut spec = match &a.config {
            Some(path) => serde_json::from_str::<ManifoldSpec>(&read_config(path)?).context("parsing manifold spec")?,
            None => ManifoldSpec {
                kind: default_kind(a.kind),
                noise_sigma: 0.0,
                ambient_dim: a.ambient.context("--ambient is required without --config")?,
            },
        };
        if let Some(n) = a.ambient {
            spec.ambient_dim = n;
        }
        if let Some(s) = a.noise {
            spec.noise_sigma = s;
        }
        let shard = manifold_shard(&spec, a.count, derive_seed(a.seed, 0), derive_seed(a.seed, 1))?;
        (shard, serde_json::to_value(&spec)?)
    };
    write_shard(&shard, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let echo = json!({ "spec": effective, "count": a.count, "seed": a.seed });
    write_json(&sidecar(&a.out), &echo)?;
    writeln!(out, "wrote {} rows of dimension {} to {}", shard.count(), shard.n(), a.out.display())?;
    Ok(())
}

/// `<out>.json` next to a generated shard, holding the effective spec.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = fs::read(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    if bytes.starts_with(&CHECKPOINT_MAGIC) {
        {
            let ck = Checkpoint::from_bytes(&bytes)?;
            let c = &ck.meta.model;
            writeln!(out, "checkpoint")?;
            writeln!(out, "n={} j={} p={} b={} k={}", c.n, c.j, c.p, c.b, c.k)?;
            writeln!(out, "parameters={}", param_count(c))?;
            writeln!(out, "t={}", ck.params.t)?;
            writeln!(out, "normalized={}", ck.meta.normalization.is_some())?;
            match &ck.optimizer {
                Some(o) => writeln!(out, "optimizer_step={}", o.step)?,
                None => writeln!(out, "optimizer_step=none")?,
            }
        }
    } else if bytes.starts_with(&SHARD_MAGIC) {
        {
            let s = ActivationShard::from_bytes(&bytes)?;
            writeln!(out, "shard")?;
            writeln!(out, "n={}", s.n())?;
            writeln!(out, "count={}", s.count())?;
            for col in s.labels() {
                let kind = match col.values {
                    LabelValues::Int(_) => "int",
                    LabelValues::Real(_) => "real",
                };
                writeln!(out, "label {} ({kind})", col.name)?;
            }
        }
    } else {
        bail!("{} is neither a shard nor a checkpoint", a.path.display());
    }
    Ok(())
}
