use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hgseg::app::{self, TrainRequest, TrainSummary};
use hgseg::data::netpbm::{read_ppm, write_ppm};
use hgseg::data::{split_dir, CorruptionSpec, Dataset, SceneSpec, Split};
use hgseg::eval::{evaluate, EvalOptions, EvalReport};
use hgseg::inference::{Mode, ScoreFields};
use hgseg::train::{load_model, RunLayout};
use hgseg::viz::{colorize_labels, render};
use hgseg::{Grouping, Model, ModelConfig, RunConfig, Session};

/// Hierarchical grouping segmentation on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "hgseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Gen(GenArgs),
    /// Train a hierarchical model (or whatever `grouping` the config selects).
    Train(TrainArgs),
    /// Evaluate a checkpoint on clean and corrupted data.
    Eval(EvalArgs),
    /// Render part partitions, whole-level masks and label maps for one image.
    Viz(VizArgs),
    /// Train the flat-grouping comparator with the same harness.
    Baseline(TrainArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 800)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Canvas size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x128", value_parser = parse_hw)]
    hw: (usize, usize),
    /// Class count including the background.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Lattice pitch of shape boundaries in pixels.
    #[arg(long, default_value_t = 8)]
    cell: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset root containing train/ (and optionally val/).
    #[arg(long)]
    data: PathBuf,
    /// Run directory; receives ckpt/, logs/ and preds/.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with [model] and [train] tables overriding defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root; the split is chosen with --split.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// part | whole | ensemble | all
    #[arg(long, default_value = "all")]
    mode: String,
    /// clean | KIND:SEVERITY | grid (all kinds × severities 1-5, plus clean)
    #[arg(long, default_value = "clean")]
    corruption: String,
    /// Also report part-level mIoU after every grouping iteration.
    #[arg(long)]
    per_iter: bool,
    /// Run directory; metrics go to preds/metrics.json. Printed to stdout
    /// when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write colorized clean predictions to preds/.
    #[arg(long)]
    save_preds: bool,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long, required_unless_present = "random_weights")]
    ckpt: Option<PathBuf>,
    /// Use freshly initialized weights instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    random_weights: bool,
    /// Model config for --random-weights.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Input PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or("expected HEIGHTxWIDTH")?;
    Ok((
        h.parse().map_err(|_| "bad height")?,
        w.parse().map_err(|_| "bad width")?,
    ))
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split '{s}'"))
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    Ok(match s {
        "all" => Mode::ALL.to_vec(),
        "part" => vec![Mode::Part],
        "whole" => vec![Mode::Whole],
        "ensemble" => vec![Mode::Ensemble],
        other => bail!("unknown mode '{other}' (expected part, whole, ensemble or all)"),
    })
}

fn parse_conditions(s: &str) -> Result<Vec<Option<CorruptionSpec>>> {
    Ok(match s {
        "clean" => vec![None],
        "grid" => std::iter::once(None)
            .chain(CorruptionSpec::grid().into_iter().map(Some))
            .collect(),
        spec => vec![Some(spec.parse()?)],
    })
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("HGSEG_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HGSEG_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    Ok(())
}

fn run_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.iters {
        cfg.train.iters = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.model.seed = v;
    }
    Ok(cfg)
}

/// Pixel count of the stride-8 grid and part count for the dataset's image
/// size.
fn attention_footprint(cfg: &ModelConfig, h: usize, w: usize) -> (usize, usize) {
    let (kh, kw) = (h.div_ceil(32) * 4, w.div_ceil(32) * 4);
    (kh * kw, kh.div_ceil(cfg.r) * kw.div_ceil(cfg.r))
}

fn cmd_train(args: &TrainArgs, flat: bool) -> Result<()> {
    let mut run = run_config(args)?;
    if flat {
        run.model.grouping = Grouping::Flat;
    }
    println!("# configuration\n{}", run.to_toml()?);
    let train_dir = split_dir(&args.data, Split::Train);
    let manifest = Dataset::load(&train_dir)
        .with_context(|| format!("loading {}", train_dir.display()))?
        .manifest;
    for grouping in [Grouping::Hierarchical, Grouping::Flat] {
        let cfg = ModelConfig {
            grouping,
            ..run.model.clone()
        };
        let (_, store) = Model::new(&cfg)?;
        println!("parameters ({grouping:?}): {}", store.scalar_count());
    }
    let (pixels, parts) = attention_footprint(&run.model, manifest.height, manifest.width);
    println!(
        "cross-attention scores per head: hierarchical {}x{} = {}, flat {}x{} = {}",
        run.model.queries,
        parts,
        run.model.queries * parts,
        run.model.queries,
        pixels,
        run.model.queries * pixels
    );
    let req = TrainRequest {
        data: args.data.clone(),
        out: args.out.clone(),
        run,
        resume: args.resume.clone(),
    };
    let summary = if flat {
        app::train_baseline(&req)?
    } else {
        app::train(&req)?
    };
    report_training(&summary);
    Ok(())
}

fn report_training(s: &TrainSummary) {
    if let Some(r) = &s.last {
        println!("step {} total loss {:.5}", r.step, r.total);
    }
    println!("checkpoint: {}", s.checkpoint.display());
    if let Some(v) = &s.val {
        for e in &v.entries {
            println!("val {} mIoU {:.4}", e.mode.name(), e.miou);
        }
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let opts = EvalOptions {
        modes: parse_modes(&args.mode)?,
        conditions: parse_conditions(&args.corruption)?,
        per_iteration: args.per_iter,
    };
    let (model, store, _) =
        load_model(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let dir = split_dir(&args.data, args.split);
    let data = Dataset::load(&dir).with_context(|| format!("loading {}", dir.display()))?;
    let report = evaluate(&model, &store, &data, &opts)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(out) => {
            let layout = RunLayout::new(out);
            layout.create()?;
            fs::write(layout.preds_dir().join("metrics.json"), &json)?;
            if args.save_preds {
                save_predictions(&model, &store, &data, &layout.preds_dir())?;
            }
            print_table(&report);
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn print_table(report: &EvalReport) {
    for e in &report.entries {
        let it = e
            .iteration
            .map(|i| format!(" iter {i}"))
            .unwrap_or_default();
        println!(
            "{:<20} {:<8}{} mIoU {:.4}",
            e.corruption,
            e.mode.name(),
            it,
            e.miou
        );
    }
}

fn save_predictions(
    model: &Model,
    store: &hgseg::ParamStore,
    data: &Dataset,
    dir: &Path,
) -> Result<()> {
    for (s, p) in data.samples.iter().zip(&data.manifest.paths) {
        let mut sess = Session::new(store, false);
        let out = model.forward(&mut sess, &s.image)?;
        let fields = ScoreFields::from_output(&sess, &out)?;
        let labels = fields.labels(Mode::Ensemble, model.cfg.inference_index())?;
        write_ppm(&dir.join(&p.image), &colorize_labels(&labels))?;
    }
    Ok(())
}

fn cmd_viz(args: &VizArgs) -> Result<()> {
    let image =
        read_ppm(&args.image).with_context(|| format!("reading {}", args.image.display()))?;
    let (model, store) = if args.random_weights {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?.model,
            None => ModelConfig::default(),
        };
        cfg.seed = args.seed;
        Model::new(&cfg)?
    } else {
        let ckpt = args.ckpt.as_ref().expect("clap enforces --ckpt");
        let (m, s, _) = load_model(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        (m, s)
    };
    for p in render(&model, &store, &image, &args.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let spec = SceneSpec {
        height: args.hw.0,
        width: args.hw.1,
        classes: args.classes,
        cell: args.cell,
        ..SceneSpec::default()
    };
    let manifests = app::generate(
        &args.out,
        [args.train, args.val, args.test],
        &spec,
        args.seed,
    )?;
    for m in manifests {
        println!("{}: {} scenes", m.split.name(), m.seeds.len());
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    init_threads()?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a, false),
        Command::Baseline(a) => cmd_train(a, true),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
    }
}
