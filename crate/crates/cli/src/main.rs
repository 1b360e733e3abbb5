//! `scenenet`: synthesize datasets, train, predict, evaluate, verify
//! gradients, inspect checkpoints, run the operator ablation and the
//! template-matching baseline.
//!
//! Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical failure,
//! 5 checkpoint invariant violation, 6 verification failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use scenenet::dataset::{load_manifest_dataset, voxel_samples, Dataset, Split};
use scenenet::gradcheck::{run_gradcheck, GradcheckConfig};
use scenenet::grid::{parse_shape, Shape3};
use scenenet::model::{
    forward, inspect, load_checkpoint, rediscretize, save_checkpoint, threshold, SceneNetParams,
    TRAINABLE_NAMES,
};
use scenenet::pointcloud::{devoxelize, load_pointcloud, save_colored_cloud, voxelize, PointFormat};
use scenenet::synth::{
    average_tower_radius_voxels, build_dataset, class_counts, format_ablation_table,
    model_average_precision, run_ablation, template_average_precision, SceneConfig,
    TemplateConfig, CLASS_NAMES, LABEL_TOWER, MANIFEST_FILE,
};
use scenenet::training::metrics::Metrics;
use scenenet::training::{
    evaluate_per_scene, history_csv, init_params, parse_config_text, train_from, EvalLevel,
    TrainConfig,
};
use scenenet::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_CHECKPOINT: u8 = 5;
const EXIT_VERIFY: u8 = 6;

#[derive(Parser, Debug)]
#[command(name = "scenenet", version, about = "Geometric-operator segmentation of power-line towers in point clouds")]
struct Cli {
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic dataset and its manifest
    Synth(SynthArgs),
    /// Train a model on a dataset manifest
    Train(TrainArgs),
    /// Segment one point cloud and export a colored PLY
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's parameters with their geometric meaning
    Inspect(InspectArgs),
    /// Train every operator multiset of the ablation table
    Ablate(AblateArgs),
    /// Cylinder template-matching baseline (average precision)
    Match(MatchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory [default: $GENEO_DATA_DIR or ./data]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scene configuration file (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of scenes
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    /// Base seed; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Towers per scene
    #[arg(long, default_value_t = 1)]
    towers: usize,
    /// Target fraction of tower points (unset: fixed lattice spacing)
    #[arg(long)]
    tower_fraction: Option<f64>,
    /// Fraction of near-tower points relabeled as tower (train/val only)
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    /// Label-noise dilation radius, meters
    #[arg(long, default_value_t = 2.0)]
    noise_radius: f64,
    /// Train/validation/test fractions
    #[arg(long, default_value = "0.2,0.1,0.7")]
    split: String,
}

#[derive(Args, Debug, Clone)]
struct ModelFlags {
    /// Training configuration file (`key = value` lines); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialization and batch order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxel grid Z,Y,X
    #[arg(long, default_value = "64,64,64")]
    grid: String,
    /// Kernel size Z,Y,X
    #[arg(long, default_value = "9,9,9")]
    kernel: String,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Scenes per batch
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// RMSProp learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Extra loss weight on tower voxels
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Loss weight floor
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Negativity penalty on mixing weights
    #[arg(long = "rho-l", default_value_t = 5.0)]
    rho_l: f64,
    /// Negativity penalty on shape parameters
    #[arg(long = "rho-t", default_value_t = 5.0)]
    rho_t: f64,
    /// Add the Tversky term, optionally with its mixing weight [default mix: 1]
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0", value_name = "MIX")]
    tversky: Option<f64>,
    /// Threshold criterion: iou, precision or f<beta> (e.g. f0.5)
    #[arg(long, default_value = "iou")]
    criterion: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest [default: $GENEO_DATA_DIR/manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output checkpoint
    #[arg(long, short, default_value = "scenenet.json")]
    out: PathBuf,
    /// Per-epoch history CSV [default: <out>.history.csv]
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input point cloud (.txt/.xyz text or .gpc binary)
    #[arg(long)]
    input: PathBuf,
    /// Colored PLY output
    #[arg(long, short, default_value = "prediction.ply")]
    out: PathBuf,
    /// Voxel grid Z,Y,X
    #[arg(long, default_value = "64,64,64")]
    grid: String,
    /// Kernel size Z,Y,X [default: the checkpoint's]
    #[arg(long)]
    kernel: Option<String>,
    /// Detection threshold [default: the checkpoint's]
    #[arg(long)]
    tau: Option<f64>,
    /// Label of the target class in the input
    #[arg(long, default_value_t = LABEL_TOWER)]
    target_label: u8,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest [default: $GENEO_DATA_DIR/manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// voxel or point
    #[arg(long, default_value = "voxel")]
    level: String,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "64,64,64")]
    grid: String,
    /// Kernel size Z,Y,X [default: the checkpoint's]
    #[arg(long)]
    kernel: Option<String>,
    /// Detection threshold [default: the checkpoint's]
    #[arg(long)]
    tau: Option<f64>,
    /// Write per-scene and aggregate metrics as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// First seed; configurations use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random configurations
    #[arg(long, default_value_t = 20)]
    configs: usize,
    /// Corrupt the analytic gradient of one parameter (test hook)
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint to inspect
    #[arg(long, required_unless_present = "init")]
    checkpoint: Option<PathBuf>,
    /// Inspect a fresh initialization instead
    #[arg(long)]
    init: bool,
    /// Seed for --init
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kernel size for --init
    #[arg(long, default_value = "9,9,9")]
    kernel: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Dataset manifest [default: $GENEO_DATA_DIR/manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Dataset manifest [default: $GENEO_DATA_DIR/manifest.json]
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Template radius in voxels [default: mean tower radius of the train split]
    #[arg(long)]
    radius: Option<f64>,
    /// Template size Z,Y,X
    #[arg(long, default_value = "9,9,9")]
    template: String,
    #[arg(long, default_value = "64,64,64")]
    grid: String,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report the average precision of this checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. }
            | Error::MalformedText { .. }
            | Error::MalformedBinary { .. }
            | Error::UnknownFormat(_)
            | Error::EmptyCloud
            | Error::Json { .. } => EXIT_IO,
            Error::Numerical(_) | Error::NonFinite { .. } | Error::DegenerateKernel { .. } => {
                EXIT_NUMERICAL
            }
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_CONFIG,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn data_dir() -> PathBuf {
    std::env::var_os("GENEO_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn manifest_path(p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| data_dir().join(MANIFEST_FILE))
}

fn read_config(path: &Path) -> CliResult<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    Ok(parse_config_text(&text)?)
}

fn from_cli(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Defaults, then the config file, then flags given on the command line.
fn train_config(flags: &ModelFlags, m: &ArgMatches) -> CliResult<(TrainConfig, u64)> {
    let mut cfg = TrainConfig::default();
    let mut seed = flags.seed;
    if let Some(path) = &flags.config {
        for (k, v) in read_config(path)? {
            if k == "seed" {
                seed = v
                    .parse()
                    .map_err(|_| Error::config(format!("bad seed `{v}` in config")))?;
            } else {
                cfg.set(&k, &v)?;
            }
        }
    }
    let overrides: [(&str, &str, String); 12] = [
        ("grid", "grid", flags.grid.clone()),
        ("kernel", "kernel", flags.kernel.clone()),
        ("epochs", "epochs", flags.epochs.to_string()),
        ("batch", "batch", flags.batch.to_string()),
        ("lr", "lr", flags.lr.to_string()),
        ("alpha", "alpha", flags.alpha.to_string()),
        ("epsilon", "epsilon", flags.epsilon.to_string()),
        ("rho_l", "rho_l", flags.rho_l.to_string()),
        ("rho_t", "rho_t", flags.rho_t.to_string()),
        ("criterion", "criterion", flags.criterion.clone()),
        ("tversky", "tversky", String::new()),
        ("seed", "seed", String::new()),
    ];
    for (id, key, value) in overrides {
        if !from_cli(m, id) {
            continue;
        }
        match key {
            "seed" => seed = flags.seed,
            "tversky" => {
                cfg.loss.tversky_enabled = true;
                cfg.loss.tversky_mix = flags.tversky.unwrap_or(1.0);
            }
            _ => cfg.set(key, &value)?,
        }
    }
    cfg.validate()?;
    Ok((cfg, seed))
}

fn load_dataset(manifest: &Option<PathBuf>) -> CliResult<Dataset> {
    let path = manifest_path(manifest);
    let (_, ds) = load_manifest_dataset(&path)?;
    Ok(ds)
}

fn shape_or(s: &Option<String>, fallback: Shape3) -> CliResult<Shape3> {
    Ok(match s {
        Some(s) => parse_shape(s)?,
        None => fallback,
    })
}

/// Load a checkpoint and adapt it to the requested kernel and threshold.
fn prepared_checkpoint(path: &Path, kernel: &Option<String>, tau: Option<f64>) -> CliResult<SceneNetParams> {
    let mut params = load_checkpoint(path)?;
    let kernel = shape_or(kernel, params.kernel_shape)?;
    if kernel != params.kernel_shape {
        params = rediscretize(&params, kernel)?;
    }
    if let Some(t) = tau {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::out_of_range("tau", t, "must lie in [0, 1]").into());
        }
        params.tau = t;
    }
    Ok(params)
}

fn format_metrics(m: &Metrics) -> String {
    format!(
        "precision {:.4}  recall {:.4}  iou {:.4}  (tp {} fp {} fn {} tn {})",
        m.precision(),
        m.recall(),
        m.iou(),
        m.tp,
        m.fp,
        m.fn_,
        m.tn
    )
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e).into())
}

fn cmd_synth(a: &SynthArgs, sub: &ArgMatches) -> CliResult {
    let mut cfg = SceneConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in read_config(path)? {
            cfg.set(&k, &v)?;
        }
    }
    if a.config.is_none() || from_cli(sub, "seed") {
        cfg.seed = a.seed;
    }
    if a.config.is_none() || from_cli(sub, "towers") {
        cfg.tower_count = a.towers;
    }
    if a.tower_fraction.is_some() {
        cfg.tower_fraction = a.tower_fraction;
    }
    if a.config.is_none() || from_cli(sub, "noise_rate") {
        cfg.noise_rate = a.noise_rate;
    }
    if a.config.is_none() || from_cli(sub, "noise_radius") {
        cfg.noise_radius = a.noise_radius;
    }
    let fr: Vec<f64> = a
        .split
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("bad --split `{}`", a.split)))?;
    let [t, v, te] = fr[..] else {
        return Err(Error::config("--split needs three fractions").into());
    };
    let out = a.out.clone().unwrap_or_else(data_dir);
    let (manifest, ds) = build_dataset(&cfg, a.scenes, (t, v, te), &out)?;
    let counts = class_counts(&ds);
    let total: usize = counts.iter().sum();
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        manifest.scenes.len(),
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    println!("points: {total}");
    for (name, c) in CLASS_NAMES.iter().zip(counts) {
        let f = if total == 0 { 0.0 } else { c as f64 / total as f64 };
        println!("  {name:<11} {c:>10}  fraction {f:.6}");
    }
    println!("config hash {}", manifest.config_hash);
    Ok(())
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> CliResult {
    let (cfg, seed) = train_config(&a.model, m)?;
    let ds = load_dataset(&a.manifest)?;
    let initial = init_params(seed, 3, cfg.kernel_shape)?;
    let out = train_from(initial, &ds, &cfg, seed)?;
    for r in &out.history {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_iou {:.4}  ({:.1}s)",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_metrics.iou(),
            r.wall_seconds
        );
    }
    save_checkpoint(&out.params, &a.out)?;
    let csv = a
        .csv
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", a.out.display())));
    write_file(&csv, &history_csv(&out.history))?;
    for (name, v) in &out.negative {
        eprintln!("warning: {name} = {v:.6} is negative after training");
    }
    let va = voxel_samples(&ds.val, cfg.grid_shape, ds.target_label)?;
    let val = scenenet::training::evaluate_samples(&out.params, &va)?;
    match out.best_epoch {
        Some(e) => println!("best epoch {e}, tau {:.2}", out.params.tau),
        None => println!("no training epochs; checkpoint is the initialization"),
    }
    println!("validation: {}", format_metrics(&val));
    println!("checkpoint {}  history {}", a.out.display(), csv.display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> CliResult {
    let params = prepared_checkpoint(&a.checkpoint, &a.kernel, a.tau)?;
    let grid = parse_shape(&a.grid)?;
    let format = PointFormat::from_path(&a.input);
    let cloud = load_pointcloud(&a.input, format)?;
    let v = voxelize(&cloud, grid, a.target_label)?;
    let prob = forward(&v.grid, &params)?;
    let mask = threshold(&prob, params.tau);
    let pred = devoxelize(&mask, &v.map, &cloud)?;
    let truth: Vec<u8> = cloud
        .labels
        .iter()
        .map(|&l| u8::from(l == a.target_label))
        .collect();
    save_colored_cloud(&cloud, &pred, &truth, &a.out)?;
    let vox = Metrics::from_occupied(mask.as_slice(), v.labels.as_slice(), v.grid.values.as_slice())?;
    let pts = Metrics::from_masks(&pred, &truth)?;
    let predicted = mask
        .as_slice()
        .iter()
        .zip(v.grid.values.as_slice())
        .filter(|&(&b, &o)| b != 0 && o > 0.0)
        .count();
    println!(
        "grid {:?}  kernel {:?}  tau {:.2}  occupied voxels {}  predicted voxels {}",
        grid,
        params.kernel_shape,
        params.tau,
        v.grid.occupied_count(),
        predicted
    );
    for (what, m) in [("voxels", vox), ("points", pts)] {
        println!("{what:<7} TP {:>8}  FP {:>8}  FN {:>8}  TN {:>8}", m.tp, m.fp, m.fn_, m.tn);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let params = prepared_checkpoint(&a.checkpoint, &a.kernel, a.tau)?;
    let level: EvalLevel = a.level.parse()?;
    let split: Split = a.split.parse()?;
    let grid = parse_shape(&a.grid)?;
    let ds = load_dataset(&a.manifest)?;
    let scenes = ds.split(split);
    if scenes.is_empty() {
        return Err(Error::EmptyDataset("evaluation split").into());
    }
    let per = evaluate_per_scene(&params, scenes, grid, ds.target_label, level)?;
    let total: Metrics = per.iter().copied().sum();
    let mut csv = String::from("scene,tp,fp,fn,tn,precision,recall,iou\n");
    let mut row = |name: &str, m: &Metrics| {
        let _ = writeln!(
            csv,
            "{name},{},{},{},{},{:.6},{:.6},{:.6}",
            m.tp,
            m.fp,
            m.fn_,
            m.tn,
            m.precision(),
            m.recall(),
            m.iou()
        );
    };
    for (s, m) in scenes.iter().zip(&per) {
        println!("{:<12} {}", s.name, format_metrics(m));
        row(&s.name, m);
    }
    row("all", &total);
    println!("{} scenes, {} level, split {split}", scenes.len(), a.level);
    println!("all          {}", format_metrics(&total));
    if let Some(path) = &a.csv {
        write_file(path, &csv)?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let fault = match &a.inject_fault {
        Some(name) => Some(
            TRAINABLE_NAMES
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?,
        ),
        None => None,
    };
    let cfg = GradcheckConfig {
        seeds: (a.seed..a.seed + a.configs as u64).collect(),
        fault,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    let worst = report
        .checks
        .iter()
        .max_by(|x, y| x.rel_err.total_cmp(&y.rel_err))
        .expect("at least one check");
    println!(
        "{} configurations x {} parameters, step {:e}, tolerance {:e} (absolute {:e} below that magnitude)",
        cfg.seeds.len(),
        TRAINABLE_NAMES.len(),
        cfg.step,
        cfg.rel_tol,
        cfg.abs_floor
    );
    if !report.redrawn.is_empty() {
        println!(
            "{} draws redrawn because a +/-step move crossed a non-differentiable point",
            report.redrawn.len()
        );
    }
    println!(
        "worst: seed {} {}  analytic {:.6e}  finite-difference {:.6e}  error {:.3e}",
        worst.seed, worst.name, worst.analytic, worst.numeric, worst.rel_err
    );
    if report.passed() {
        println!("PASS");
        return Ok(());
    }
    let mut names: Vec<&str> = report.failures().map(|c| c.name).collect();
    names.sort_unstable();
    names.dedup();
    Err(Failure {
        code: EXIT_VERIFY,
        msg: format!("gradient mismatch in: {}", names.join(", ")),
    })
}

fn cmd_inspect(a: &InspectArgs) -> CliResult {
    let params = match &a.checkpoint {
        Some(path) if !a.init => load_checkpoint(path)?,
        _ => init_params(a.seed, 3, parse_shape(&a.kernel)?)?,
    };
    print!("{}", inspect(&params));
    Ok(())
}

fn cmd_ablate(a: &AblateArgs, m: &ArgMatches) -> CliResult {
    let (cfg, seed) = train_config(&a.model, m)?;
    let ds = load_dataset(&a.manifest)?;
    let rows = run_ablation(&ds, &cfg, seed)?;
    print!("{}", format_ablation_table(&rows));
    if let Some(path) = &a.csv {
        let mut s = String::from("model,cylinder,arrow,negsphere,precision,recall,iou,tau\n");
        for r in &rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.2}",
                r.name,
                r.counts[0],
                r.counts[1],
                r.counts[2],
                r.metrics.precision(),
                r.metrics.recall(),
                r.metrics.iou(),
                r.tau
            );
        }
        write_file(path, &s)?;
    }
    Ok(())
}

fn cmd_match(a: &MatchArgs) -> CliResult {
    let ds = load_dataset(&a.manifest)?;
    let grid = parse_shape(&a.grid)?;
    let split: Split = a.split.parse()?;
    let radius = match a.radius {
        Some(r) => r,
        None => average_tower_radius_voxels(&ds.train, grid, ds.target_label)?,
    };
    let template = TemplateConfig {
        radius,
        shape: parse_shape(&a.template)?,
    };
    let samples = voxel_samples(ds.split(split), grid, ds.target_label)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("match split").into());
    }
    let ap = template_average_precision(&template, &samples)?;
    println!(
        "template: cylinder shell radius {:.3} voxels, size {:?}, {} scenes ({split})",
        radius,
        template.shape,
        samples.len()
    );
    println!("template AP {ap:.6}");
    if let Some(path) = &a.checkpoint {
        let params = load_checkpoint(path)?;
        let model_ap = model_average_precision(&params.compile()?, &samples)?;
        println!("model AP    {model_ap:.6}");
    }
    Ok(())
}

fn run(cli: &Cli, m: &ArgMatches) -> CliResult {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let sub = |name: &str| m.subcommand_matches(name).expect("subcommand matches");
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, sub("synth")),
        Command::Train(a) => cmd_train(a, sub("train")),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Ablate(a) => cmd_ablate(a, sub("ablate")),
        Command::Match(a) => cmd_match(a),
    }
}

fn main() -> ExitCode {
    let m = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&m) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli, &m) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
