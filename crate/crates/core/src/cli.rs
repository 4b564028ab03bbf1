//! The `protopart` command line.
//!
//! Exit codes: 0 on success, 1 when the library reports an error (the message
//! goes to standard error), 2 when the arguments do not parse. Datasets are
//! `.ppds` files, or directories of per-class `.ppm` folders.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

use crate::baseline::BaselineCnn;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    augment_offline, load_dataset, read_ppm, write_ppds, write_ppm, AugmentOp, Dataset,
    DatasetFormat, Split,
};
use crate::error::{Error, Result};
use crate::explain::{
    crop_patch, ensemble_accuracy, ensemble_logits, explain_with_percentile,
    nearest_patches_to_prototype, nearest_prototypes_to_image, prune_prototypes, render_heatmap,
    DEFAULT_PERCENTILE,
};
use crate::gradcheck::{run_gradcheck, DEFAULT_FLOOR, DEFAULT_STEP};
use crate::model::ProtoPNet;
use crate::projection::project_prototypes;
use crate::synth::{blobs_dataset, shapes_dataset};
use crate::theorem::verify_projection_theorem;
use crate::training::{accuracy, stage3_convex_last_layer, train_full, StageReport};

#[derive(Debug, Parser)]
#[command(
    name = "protopart",
    version,
    about = "Prototypical part networks: train, explain, analyse"
)]
struct Cli {
    /// Worker threads for data-parallel loops. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full training: joint SGD, projection and last-layer fit, cycled.
    Train(TrainArgs),
    /// Projects every prototype onto its nearest training patch.
    Push(PushArgs),
    /// Refits only the last layer.
    LastLayer(LastLayerArgs),
    /// Accuracy on a dataset, or logits of one image.
    Eval(EvalArgs),
    /// Heat maps, patch crops and a points table for one image.
    Explain(ExplainArgs),
    /// Nearest training patches of a prototype, or nearest prototypes of an image.
    Nearest(NearestArgs),
    /// Drops prototypes whose nearest training patches are mostly off-class.
    Prune(PruneArgs),
    /// Checks the logit-stability bound of projection image by image.
    VerifyTheorem(VerifyArgs),
    /// Sums the logits of several models.
    Ensemble(EnsembleArgs),
    /// Offline augmentation of a dataset.
    Augment(AugmentArgs),
    /// Compares tape gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Writes a generated dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key=value` run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the `seed` key of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Also train the plain CNN with the same backbone and report its accuracy
    /// on this dataset alongside the prototype model's.
    #[arg(long)]
    baseline_eval: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PushArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LastLayerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["data", "image"])))]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("query").required(true).args(["prototype", "image"])))]
struct NearestArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, requires = "data")]
    prototype: Option<usize>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Training data searched for `--prototype`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 6)]
    z: usize,
    #[arg(long, default_value_t = 3)]
    tau: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    data: PathBuf,
    /// Print the full report of every image.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("target").required(true).args(["data", "image"])))]
struct EnsembleArgs {
    #[arg(long = "ckpt", required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated list of `flip`, `rotate`, `crop`.
    #[arg(long, value_delimiter = ',', default_value = "flip,rotate,crop")]
    ops: Vec<String>,
    #[arg(long, default_value_t = 1)]
    copies: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SynthKind {
    Shapes,
    Blobs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Shapes)]
    kind: SynthKind,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Output goes to the process's standard streams.
pub fn run_cli(argv: Vec<String>) -> i32 {
    run_cli_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

/// [`run_cli`] writing to the given streams.
pub fn run_cli_with(argv: Vec<String>, out: &mut (dyn Write + Send), err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    if cli.workers == 0 {
        let _ = writeln!(err, "error: --workers must be at least 1");
        return 2;
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command, out)) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_out(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn open_dataset(path: &Path) -> Result<Dataset> {
    let format = if path.is_dir() {
        DatasetFormat::PpmTree
    } else {
        DatasetFormat::Ppds
    };
    load_dataset(path, format)
}

fn run_config(path: Option<&Path>, num_classes: usize, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p, num_classes)?,
        None => RunConfig::defaults(num_classes),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn print_report(out: &mut dyn Write, r: &StageReport) -> Result<()> {
    writeln!(
        out,
        "# cycle={} stage={} seconds={:.3}",
        r.cycle + 1,
        r.kind.name(),
        r.seconds
    )
    .map_err(io_out)?;
    out.write_all(r.to_log().as_bytes()).map_err(io_out)
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:.12e}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => train(a, out),
        Command::Push(a) => push(a, out),
        Command::LastLayer(a) => last_layer(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Explain(a) => explain(a, out),
        Command::Nearest(a) => nearest(a, out),
        Command::Prune(a) => prune(a, out),
        Command::VerifyTheorem(a) => verify(a, out),
        Command::Ensemble(a) => ensemble(a, out),
        Command::Augment(a) => augment(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Synth(a) => synth(a, out),
    }
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let cfg = run_config(a.config.as_deref(), data.num_classes(), a.seed)?;
    let mut model = ProtoPNet::build(cfg.model.clone(), cfg.train.seed)?;
    for r in train_full(&mut model, &data, &cfg.train)? {
        print_report(out, &r)?;
    }
    save_checkpoint(&model, &a.out)?;
    if let Some(path) = a.baseline_eval {
        let test = open_dataset(&path)?;
        let mut base = BaselineCnn::build(cfg.model, cfg.train.seed)?;
        let epochs = cfg.train.stage1_epochs * cfg.train.cycles;
        print_report(out, &base.train(&data, &cfg.train, epochs)?)?;
        writeln!(
            out,
            "protopnet_accuracy={:.6} baseline_accuracy={:.6} n={}",
            accuracy(&model, &test)?,
            base.accuracy(&test)?,
            test.len()
        )
        .map_err(io_out)?;
    }
    Ok(())
}

fn push(a: PushArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = load_checkpoint(&a.ckpt)?;
    let data = open_dataset(&a.data)?;
    for r in project_prototypes(&mut model, &data)? {
        writeln!(
            out,
            "prototype={} class={} image={} row={} col={} move={:.12e}",
            r.prototype, r.class, r.image, r.row, r.col, r.move_distance
        )
        .map_err(io_out)?;
    }
    save_checkpoint(&model, &a.out)
}

fn last_layer(a: LastLayerArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = load_checkpoint(&a.ckpt)?;
    let data = open_dataset(&a.data)?;
    let cfg = run_config(a.config.as_deref(), model.num_classes(), a.seed)?;
    print_report(
        out,
        &stage3_convex_last_layer(&mut model, &data, &cfg.train)?,
    )?;
    save_checkpoint(&model, &a.out)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    if let Some(path) = a.image {
        let o = model.forward(&read_ppm(&path)?)?;
        writeln!(out, "predicted={}", o.predicted()).map_err(io_out)?;
        writeln!(out, "logits={}", join(&o.logits)).map_err(io_out)?;
        return Ok(());
    }
    let data = open_dataset(a.data.as_deref().expect("clap enforces one target"))?;
    writeln!(
        out,
        "accuracy={:.6} n={}",
        accuracy(&model, &data)?,
        data.len()
    )
    .map_err(io_out)
}

fn explain(a: ExplainArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let image = read_ppm(&a.image)?;
    let ex = explain_with_percentile(&model, &image, a.percentile)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    for e in &ex.entries {
        let heat = render_heatmap(&image, &e.activation)?;
        write_ppm(
            &heat,
            a.out_dir
                .join(format!("prototype_{:03}_heatmap.ppm", e.prototype)),
        )?;
        let patch = crop_patch(&image, &e.patch)?;
        write_ppm(
            &patch,
            a.out_dir
                .join(format!("prototype_{:03}_patch.ppm", e.prototype)),
        )?;
    }
    let report = ex.to_report();
    let path = a.out_dir.join("report.txt");
    std::fs::write(&path, &report).map_err(|e| Error::io(&path, e))?;
    out.write_all(report.as_bytes()).map_err(io_out)
}

fn nearest(a: NearestArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    if let Some(path) = a.image {
        for (rank, m) in nearest_prototypes_to_image(&model, &read_ppm(&path)?, a.top)?
            .iter()
            .enumerate()
        {
            let b = &m.patch;
            writeln!(
                out,
                "rank={} prototype={} class={} score={:.12e} box=({},{},{},{})",
                rank + 1,
                m.prototype,
                m.class,
                m.score,
                b.top,
                b.left,
                b.bottom,
                b.right
            )
            .map_err(io_out)?;
        }
        return Ok(());
    }
    let j = a.prototype.expect("clap enforces one query");
    let data = open_dataset(
        a.data
            .as_deref()
            .expect("clap requires --data with --prototype"),
    )?;
    for (rank, m) in nearest_patches_to_prototype(&model, &data, j, a.top)?
        .iter()
        .enumerate()
    {
        writeln!(
            out,
            "rank={} image={} row={} col={} class={} distance={:.12e}",
            rank + 1,
            m.image,
            m.row,
            m.col,
            m.class,
            m.distance
        )
        .map_err(io_out)?;
    }
    Ok(())
}

fn prune(a: PruneArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let data = open_dataset(&a.data)?;
    let (pruned, report) = prune_prototypes(&model, &data, a.z, a.tau)?;
    out.write_all(report.to_text().as_bytes()).map_err(io_out)?;
    save_checkpoint(&pruned, &a.out)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> Result<()> {
    let before = load_checkpoint(&a.before)?;
    let after = load_checkpoint(&a.after)?;
    let data = open_dataset(&a.data)?;
    let (mut met, mut bound_violations, mut prediction_violations) = (0, 0, 0);
    for (i, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let mut r = verify_projection_theorem(&before, &after, x, y, a.delta)?;
        r.image_id = Some(i);
        if r.assumptions_hold() {
            met += 1;
            bound_violations += usize::from(!r.bound_satisfied);
            prediction_violations += usize::from(r.prediction_violation());
        }
        if a.verbose {
            out.write_all(r.to_text().as_bytes()).map_err(io_out)?;
        } else {
            writeln!(
                out,
                "image={} label={} verdict={} max_change={:.6e} delta_max={:.6e}",
                i,
                y,
                r.verdict.as_str(),
                r.logit_change.iter().map(|c| c.abs()).fold(0.0, f64::max),
                r.delta_max
            )
            .map_err(io_out)?;
        }
    }
    writeln!(
        out,
        "images={} assumptions_met={met} bound_violations={bound_violations} prediction_violations={prediction_violations}",
        data.len()
    )
    .map_err(io_out)
}

fn ensemble(a: EnsembleArgs, out: &mut dyn Write) -> Result<()> {
    let models = a
        .ckpts
        .iter()
        .map(load_checkpoint)
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ProtoPNet> = models.iter().collect();
    if let Some(path) = a.image {
        let logits = ensemble_logits(&refs, &read_ppm(&path)?)?;
        writeln!(out, "predicted={}", crate::kernels::argmax(&logits)).map_err(io_out)?;
        return writeln!(out, "logits={}", join(&logits)).map_err(io_out);
    }
    let data = open_dataset(a.data.as_deref().expect("clap enforces one target"))?;
    for (path, m) in a.ckpts.iter().zip(&models) {
        writeln!(
            out,
            "model={} accuracy={:.6}",
            path.display(),
            accuracy(m, &data)?
        )
        .map_err(io_out)?;
    }
    writeln!(
        out,
        "accuracy={:.6} n={}",
        ensemble_accuracy(&refs, &data)?,
        data.len()
    )
    .map_err(io_out)
}

fn augment(a: AugmentArgs, out: &mut dyn Write) -> Result<()> {
    let data = open_dataset(&a.data)?;
    let ops = a
        .ops
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<AugmentOp>>>()?;
    let aug = augment_offline(&data, &ops, a.copies, a.seed)?;
    write_ppds(&aug, &a.out)?;
    writeln!(out, "images_in={} images_out={}", data.len(), aug.len()).map_err(io_out)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let results = run_gradcheck(a.trials, a.seed, a.step, DEFAULT_FLOOR)?;
    let mut worst = 0.0f64;
    for r in &results {
        writeln!(out, "{}", r.log_line()).map_err(io_out)?;
        worst = worst.max(r.max_rel_error);
    }
    writeln!(
        out,
        "max_rel_error={worst:.3e} tolerance={:.1e}",
        a.tolerance
    )
    .map_err(io_out)?;
    if worst < a.tolerance {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient mismatch: relative error {worst:.3e} exceeds {:.1e}",
            a.tolerance
        )))
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let data = match a.kind {
        SynthKind::Shapes => shapes_dataset(a.size, a.per_class, a.seed, split),
        SynthKind::Blobs => blobs_dataset(a.size, a.per_class, a.seed, split),
    };
    write_ppds(&data, &a.out)?;
    writeln!(out, "images={} classes={}", data.len(), data.num_classes()).map_err(io_out)
}
