//! `diffmesh` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 I/O error,
//! 4 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use diffmesh::data::{hex_sha256, write_atomic, Dataset, SyntheticSpec};
use diffmesh::diffusion::{NoiseSchedule, SamplerConfig};
use diffmesh::geometry::{to_obj, Metrics};
use diffmesh::kv::KeyValues;
use diffmesh::model::Model;
use diffmesh::trainer::{
    ablation_run, evaluate, evaluate_with, init_model, loss_csv_header, loss_csv_row, metrics_csv, metrics_table,
    reconstruct, test_indices, train, TrainConfig,
};
use diffmesh::Error;

const SEED_ENV: &str = "DIFFMESH_SEED";
const LOG_EVERY: u64 = 50;

#[derive(Parser, Debug)]
#[command(name = "diffmesh", version, about = "Diffusion-based mesh reconstruction on synthetic hand-like data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Reconstruct one sample and write it as OBJ.
    Sample(SampleArgs),
    /// Evaluate a model on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate the four ablation variants.
    Ablate(AblateArgs),
    /// Write a ground-truth sample or the rest template as OBJ.
    ExportObj(ExportArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// key=value spec file.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Extra spec entries, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Decode directly from a learned query set.
    NoDiffusion,
    /// Replace the cross-modality decoder with self-attention.
    VanillaDecoder,
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    data: PathBuf,
    /// key=value training config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
    /// Two-phase training with the depth branch.
    #[arg(long)]
    depth: bool,
    /// Continue training a saved model.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Loss CSV path (default: `<out>.loss.csv`).
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    index: usize,
    #[arg(long, default_value_t = diffmesh::diffusion::DEFAULT_INFERENCE_STEPS)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model file; omit with `--oracle`.
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Inference step counts, one table row each.
    #[arg(long, value_delimiter = ',', default_values_t = [diffmesh::diffusion::DEFAULT_INFERENCE_STEPS])]
    steps: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Evaluate only the first N samples of the split.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use ground truth as the prediction.
    #[arg(long, conflicts_with = "model")]
    oracle: bool,
    /// Metric CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Metric CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the first N test samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "template")]
    index: Option<usize>,
    /// Export the rest-pose template instead of a sample.
    #[arg(long, conflicts_with = "index")]
    template: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// An error carrying its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn code_of(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format { .. } => 3,
        Error::NonFinite { .. } | Error::Projection { .. } => 4,
        _ => 2,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: code_of(&e),
            err: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = err
            .chain()
            .find_map(|c| c.downcast_ref::<Error>().map(code_of))
            .or_else(|| err.chain().any(|c| c.is::<std::io::Error>()).then_some(3))
            .unwrap_or(2);
        Self { code, err }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        err: anyhow!(msg.into()),
    }
}

fn io_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        err: anyhow!(msg.into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportObj(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

fn read_kv(path: &Path) -> std::result::Result<KeyValues, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(KeyValues::parse(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn apply_sets(kv: &mut KeyValues, sets: &[String]) -> std::result::Result<(), Failure> {
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(())
}

fn env_seed() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| config_err(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// File values, then the seed environment variable, then flags.
fn layered(
    file: Option<&Path>,
    flags: &[(&str, Option<String>)],
    sets: &[String],
    allowed: &[&str],
) -> std::result::Result<KeyValues, Failure> {
    let mut kv = match file {
        Some(p) => read_kv(p)?,
        None => KeyValues::new(),
    };
    if let Some(seed) = env_seed()? {
        kv.set("seed", seed);
    }
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    apply_sets(&mut kv, sets)?;
    kv.check_keys(allowed)?;
    Ok(kv)
}

fn echo(title: &str, kv: &KeyValues) {
    println!("# effective {title}");
    print!("{}", kv.to_text());
}

fn train_config(flags: &TrainFlags, extra: &[(&str, Option<String>)]) -> std::result::Result<TrainConfig, Failure> {
    let mut pairs = vec![
        ("epochs", flags.epochs.map(|v| v.to_string())),
        ("train_limit", flags.samples.map(|v| v.to_string())),
        ("batch_size", flags.batch_size.map(|v| v.to_string())),
        ("learning_rate", flags.lr.map(|v| format!("{v:?}"))),
        ("seed", flags.seed.map(|v| v.to_string())),
        ("inference_steps", flags.steps.map(|v| v.to_string())),
    ];
    pairs.extend_from_slice(extra);
    let kv = layered(flags.config.as_deref(), &pairs, &flags.set, &TrainConfig::KEYS)?;
    Ok(TrainConfig::from_kv(&kv)?)
}

// ---------------------------------------------------------------------------
// Output safety

fn check_output(path: &Path, force: bool) -> CmdResult {
    if path.exists() && !force {
        return Err(io_err(format!("{} exists; pass --force to overwrite", path.display())));
    }
    Ok(())
}

fn write_output(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(write_atomic(path, bytes)?)
}

fn load_dataset(dir: &Path) -> std::result::Result<Dataset, Failure> {
    Ok(Dataset::read(dir, None).map_err(|e| {
        let code = code_of(&e);
        Failure {
            code,
            err: anyhow!(e).context(format!("reading dataset {}", dir.display())),
        }
    })?)
}

fn load_model(path: &Path) -> std::result::Result<Model, Failure> {
    Model::load(path).map_err(|e| Failure {
        code: code_of(&e),
        err: anyhow!(e).context(format!("loading model {}", path.display())),
    })
}

fn check_compatible(model: &Model, ds: &Dataset) -> CmdResult {
    let (m, s) = (model.config(), &ds.spec);
    if m.vertex_count != s.vertex_count || m.image_size != s.image_size {
        return Err(config_err(format!(
            "model expects N={} H={}, dataset has N={} H={}",
            m.vertex_count, m.image_size, s.vertex_count, s.image_size
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn gen_data(a: GenDataArgs) -> CmdResult {
    let flags = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("sample_count", a.samples.map(|v| v.to_string())),
    ];
    let kv = layered(a.spec.as_deref(), &flags, &a.set, &SyntheticSpec::KEYS)?;
    let spec = SyntheticSpec::from_kv(&kv)?;
    echo("spec", &spec.to_kv());
    if a.out.exists() && !a.force {
        return Err(io_err(format!("{} exists; pass --force to overwrite", a.out.display())));
    }
    let ds = Dataset::generate(&spec)?;
    // Build in a sibling directory, then swap it in.
    let name = a.out.file_name().ok_or_else(|| config_err("--out must name a directory"))?;
    let tmp = a.out.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("removing {}", tmp.display()))?;
    }
    let digest = ds.write(&tmp)?;
    if a.out.exists() {
        fs::remove_dir_all(&a.out).with_context(|| format!("removing {}", a.out.display()))?;
    }
    fs::rename(&tmp, &a.out).with_context(|| format!("renaming to {}", a.out.display()))?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        spec.sample_count,
        spec.train_end(),
        spec.sample_count - spec.train_end(),
        a.out.display()
    );
    println!("records_sha256={digest}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let extra = [
        ("use_diffusion", a.ablation.contains(&Ablation::NoDiffusion).then(|| "false".to_string())),
        ("cross_modality", a.ablation.contains(&Ablation::VanillaDecoder).then(|| "false".to_string())),
        ("depth_condition", a.depth.then(|| "true".to_string())),
    ];
    let cfg = train_config(&a.flags, &extra)?;
    echo("train config", &cfg.to_kv());
    let csv_path = a.loss_csv.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    check_output(&a.out, a.flags.force)?;
    check_output(&csv_path, a.flags.force)?;
    let ds = load_dataset(&a.flags.data)?;
    let mut model = match &a.resume {
        Some(p) => {
            let m = load_model(p)?;
            let want = cfg.model_config(&ds);
            if m.config() != &want {
                return Err(config_err(format!(
                    "resumed model config differs from the requested config:\n{}vs\n{}",
                    m.config().to_kv().to_text(),
                    want.to_kv().to_text()
                )));
            }
            println!("resuming at step {}", m.trained_steps());
            m
        }
        None => init_model(&cfg, &ds)?,
    };
    check_compatible(&model, &ds)?;
    let mut csv = String::from(loss_csv_header());
    let result = train(&mut model, &ds, &cfg, &mut |r| {
        csv.push_str(&loss_csv_row(r));
        if r.step % LOG_EVERY == 0 || r.step == 1 {
            println!(
                "step {:>6}  total {:.6}  vertex {:.6}  joint {:.6}  smooth {:.6}",
                r.step, r.loss.total, r.loss.vertex, r.loss.joint, r.loss.smooth
            );
        }
    });
    if let Err(e) = result {
        return Err(e.into());
    }
    let mut bytes = Vec::new();
    model.write_to(&mut bytes)?;
    write_output(&a.out, &bytes)?;
    write_output(&csv_path, csv.as_bytes())?;
    println!("trained to step {}; wrote {}", model.trained_steps(), a.out.display());
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> CmdResult {
    check_output(&a.out, a.force)?;
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let model = load_model(&a.model)?;
    let ds = load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let sched = NoiseSchedule::cosine(model.config().timesteps)?;
    let sampler = SamplerConfig {
        steps: a.steps,
        ..SamplerConfig::default()
    };
    let verts = reconstruct(&model, &ds, a.index, &sched, &sampler, seed)?;
    write_output(&a.out, to_obj(&verts, &ds.template.topology).as_bytes())?;
    println!("wrote {} ({} vertices, {} faces)", a.out.display(), verts.len(), ds.template.topology.face_count());
    Ok(())
}

fn split_indices(ds: &Dataset, split: Split, limit: Option<usize>) -> Vec<usize> {
    let mut idx = match split {
        Split::Train => (0..ds.spec.train_end()).collect(),
        Split::Test => test_indices(ds),
    };
    if let Some(n) = limit {
        idx.truncate(n);
    }
    idx
}

fn report(rows: &[(String, Metrics)], out: Option<&Path>) -> CmdResult {
    print!("{}", metrics_table(rows));
    if let Some(p) = out {
        write_output(p, metrics_csv(rows).as_bytes())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if let Some(p) = &a.out {
        check_output(p, a.force)?;
    }
    if a.steps.is_empty() {
        return Err(config_err("--steps needs at least one value"));
    }
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    let ds = load_dataset(&a.data)?;
    let idx = split_indices(&ds, a.split, a.limit);
    let mut rows = Vec::new();
    match &a.model {
        None => {
            let m = evaluate_with(&ds, &idx, |i| Ok(ds.samples[i].verts.clone()))?;
            rows.push(("oracle".to_string(), m));
        }
        Some(path) => {
            let model = load_model(path)?;
            check_compatible(&model, &ds)?;
            for &k in &a.steps {
                if k == 0 || k > model.config().timesteps {
                    return Err(config_err(format!("--steps values must be in 1..={}", model.config().timesteps)));
                }
            }
            for &k in &a.steps {
                rows.push((format!("steps={k}"), evaluate(&model, &ds, &idx, k, seed)?));
            }
        }
    }
    report(&rows, a.out.as_deref())
}

fn cmd_ablate(a: AblateArgs) -> CmdResult {
    let cfg = train_config(&a.flags, &[])?;
    echo("train config", &cfg.to_kv());
    check_output(&a.out, a.flags.force)?;
    let ds = load_dataset(&a.flags.data)?;
    let mut idx = test_indices(&ds);
    if let Some(n) = a.limit {
        idx.truncate(n);
    }
    let table = ablation_run(&ds, &cfg, &idx, &mut |v, r| {
        if r.step % LOG_EVERY == 0 {
            println!("{:<28} step {:>6}  total {:.6}", v.name(), r.step, r.loss.total);
        }
    })?;
    let rows: Vec<(String, Metrics)> = table.iter().map(|r| (r.variant.name(), r.metrics)).collect();
    report(&rows, Some(&a.out))
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    check_output(&a.out, a.force)?;
    let ds = load_dataset(&a.data)?;
    let verts = match a.index {
        _ if a.template => ds.template.verts.clone(),
        Some(i) => ds
            .samples
            .get(i)
            .ok_or_else(|| config_err(format!("index {i} out of range for {} samples", ds.samples.len())))?
            .verts
            .clone(),
        None => unreachable!("clap requires --index or --template"),
    };
    let text = to_obj(&verts, &ds.template.topology);
    write_output(&a.out, text.as_bytes())?;
    println!("wrote {} (sha256 {})", a.out.display(), hex_sha256(text.as_bytes()));
    Ok(())
}
