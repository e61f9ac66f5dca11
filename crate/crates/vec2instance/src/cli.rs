//! The `v2i` command-line tool.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use vec2instance_core::data::{
    centroid_sample, extract_instance_patches, synthetic_dataset_tile, CentroidSample, ImageTile, InstancePatch, Split,
};
use vec2instance_core::evaluation::{compare_decoders, evaluate_tile, EvalReport, NetworkPredictor};
use vec2instance_core::inference::{predict_tile, CentroidCandidate};
use vec2instance_core::models::{DecoderKind, NetConfig, TILE_SIZE};
use vec2instance_core::nn::Network;
use vec2instance_core::training::{
    train_centroid, train_instance, CentroidDataset, EpochEnd, Hooks, InstanceDataset, LossLog, LossRecord, TrainConfig,
};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{self, Dataset};
use crate::plot::{labelmap_image, overlay, write_curves};
use crate::report::{self, loss_series};

/// Environment variable naming the dataset directory when neither the
/// flag nor the config file does.
pub const DATA_DIR_ENV: &str = "V2I_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "v2i", version, about = "Centroid detection and hypernetwork instance segmentation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, splits, initialization and shuffling [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-tile work [default: 1].
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Centroid detection threshold [default: 0.5].
    #[arg(long, global = true)]
    threshold: Option<f32>,
    /// IoU at or above which a lower-scored mask is suppressed [default: 0.5].
    #[arg(long = "nms-iou", global = true)]
    nms_iou: Option<f64>,
    /// Training epochs [default: 100 centroid, 1000 instance].
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Minibatch size [default: 50 centroid, 500 instance].
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001 centroid, 0.0001 instance].
    #[arg(long, global = true)]
    lr: Option<f32>,
    /// Output directory [default: runs/<command>].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory [default: $V2I_DATA_DIR].
    #[arg(long = "data-dir", global = true)]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        /// Number of tiles [default: 300].
        #[arg(long)]
        tiles: Option<usize>,
    },
    /// Ingest a directory of `<id>.png` + `<id>.json` pairs: resample to
    /// 256x256, filter and split.
    Preprocess {
        /// Directory with the raw image/annotation pairs.
        #[arg(long)]
        raw: PathBuf,
    },
    /// Train the centroid network.
    TrainCentroid,
    /// Train the instance network.
    TrainInstance {
        /// `vec2instance` or `tconv:<budget>`.
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Predict label maps and overlays for dataset tiles.
    Predict {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Centroid, instance and end-to-end accuracy on the test split.
    Evaluate {
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Compare the fixed decoder with transpose-convolution decoders.
    Ablate {
        /// Total parameter budgets of the transpose-convolution models.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Plot loss logs (CSV) as curves.
    Plot {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CheckpointArgs {
    #[arg(long = "centroid-ckpt")]
    centroid: Option<PathBuf>,
    #[arg(long = "instance-ckpt")]
    instance: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code: 0 on success, 2 on usage errors, 1 on failures after printing
/// `error[<class>]: <message>` on stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            1
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Preprocess { .. } => "preprocess",
        Command::TrainCentroid => "train-centroid",
        Command::TrainInstance { .. } => "train-instance",
        Command::Predict { .. } => "predict",
        Command::Evaluate { .. } => "evaluate",
        Command::Ablate { .. } => "ablate",
        Command::Plot { .. } => "plot",
    }
}

fn merge(cli: &Cli) -> Result<RunConfig> {
    let g = &cli.global;
    let mut c = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    c.command = command_name(&cli.command).into();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = g.$flag.clone() { c.$field = v.into(); }
        )*};
    }
    set!(seed => seed, workers => workers, threshold => detection_threshold, nms_iou => nms_iou);
    set!(epochs => epochs, batch_size => batch_size, lr => learning_rate, out => out, data_dir => data_dir);
    if c.data_dir.is_none() {
        c.data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    if c.out.is_none() {
        c.out = Some(Path::new("runs").join(&c.command));
    }
    match &cli.command {
        Command::Synth { tiles: Some(t) } => c.tiles = *t,
        Command::TrainInstance { decoder: Some(d) } => c.decoder = parse_decoder(d)?,
        Command::Predict { ckpt, .. } | Command::Evaluate { ckpt } => {
            if ckpt.centroid.is_some() {
                c.centroid_checkpoint = ckpt.centroid.clone();
            }
            if ckpt.instance.is_some() {
                c.instance_checkpoint = ckpt.instance.clone();
            }
        }
        Command::Ablate { budgets: Some(b) } => c.budgets = b.clone(),
        _ => {}
    }
    if c.workers == 0 {
        return Err(Error::config("--workers must be at least 1"));
    }
    Ok(c)
}

fn parse_decoder(s: &str) -> Result<DecoderKind> {
    if s == "vec2instance" {
        return Ok(DecoderKind::Vec2Instance);
    }
    s.strip_prefix("tconv:")
        .and_then(|b| b.parse().ok())
        .map(|budget| DecoderKind::TransposeConv { budget })
        .ok_or_else(|| Error::config(format!("unknown decoder `{s}` (expected vec2instance or tconv:<budget>)")))
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = merge(&cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Synth { .. } => synth(&cfg),
        Command::Preprocess { raw } => preprocess(&cfg, raw),
        Command::TrainCentroid => train_centroid_cmd(&cfg),
        Command::TrainInstance { .. } => train_instance_cmd(&cfg),
        Command::Predict { split, .. } => predict(&cfg, *split),
        Command::Evaluate { .. } => evaluate(&cfg),
        Command::Ablate { .. } => ablate(&cfg),
        Command::Plot { logs } => plot(&cfg, logs),
    })
}

fn out_dir(cfg: &RunConfig) -> &Path {
    cfg.out.as_deref().expect("merge sets an output directory")
}

fn data_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.data_dir
        .as_deref()
        .ok_or_else(|| Error::config(format!("no dataset directory (use --data-dir or {DATA_DIR_ENV})")))
}

/// Synthetic tiles with pixels rounded to PNG levels, so in-memory and
/// on-disk copies agree.
pub fn synthetic_tiles(cfg: &RunConfig) -> Result<Vec<(ImageTile, usize)>> {
    cfg.synth.validate()?;
    (0..cfg.tiles)
        .into_par_iter()
        .map(|i| {
            let mut t = synthetic_dataset_tile(cfg.seed, i, &cfg.synth)?;
            io::quantize(&mut t.tile.pixels);
            Ok((t.tile, t.shortfall))
        })
        .collect()
}

#[derive(Serialize)]
struct SynthStats {
    tiles: usize,
    instances: usize,
    placement_shortfall: usize,
    centroid_collisions: usize,
    retained_tiles: usize,
}

fn synth(cfg: &RunConfig) -> Result<()> {
    let out = out_dir(cfg);
    let tiles = synthetic_tiles(cfg)?;
    let entries = tiles
        .par_iter()
        .map(|(t, _)| io::save_tile(out, t))
        .collect::<Result<Vec<_>>>()?;
    let collisions = tiles
        .par_iter()
        .map(|(t, _)| Ok(vec2instance_core::data::build_centroid_targets(t)?.collisions))
        .collect::<Result<Vec<_>>>()?;
    let manifest = io::build_manifest(entries, cfg.filter, cfg.seed);
    io::write_json(&out.join(io::MANIFEST_FILE), &manifest)?;
    let stats = SynthStats {
        tiles: tiles.len(),
        instances: tiles.iter().map(|(t, _)| t.annotations.len()).sum(),
        placement_shortfall: tiles.iter().map(|(_, s)| s).sum(),
        centroid_collisions: collisions.iter().sum(),
        retained_tiles: manifest.entries.len(),
    };
    io::write_json(&out.join("synth_stats.json"), &stats)?;
    cfg.write_echo(out)?;
    println!(
        "wrote {} tiles ({} retained, {} instances) to {}",
        stats.tiles,
        stats.retained_tiles,
        stats.instances,
        out.display()
    );
    Ok(())
}

fn preprocess(cfg: &RunConfig, raw: &Path) -> Result<()> {
    let out = out_dir(cfg);
    let pairs = io::raw_pairs(raw)?;
    let entries = pairs
        .par_iter()
        .map(|(png, json)| {
            let tile = io::load_tile(png, json)?.resampled(TILE_SIZE);
            io::save_tile(out, &tile)
        })
        .collect::<Result<Vec<_>>>()?;
    let found = entries.len();
    let manifest = io::build_manifest(entries, cfg.filter, cfg.seed);
    io::write_json(&out.join(io::MANIFEST_FILE), &manifest)?;
    cfg.write_echo(out)?;
    println!("{found} tiles found, {} retained, written to {}", manifest.entries.len(), out.display());
    Ok(())
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<ImageTile>> {
    let ds = Dataset::open(data_dir(cfg)?)?;
    let entries: Vec<_> = ds.manifest.split(split).collect();
    entries.par_iter().map(|e| ds.load(e)).collect()
}

fn centroid_dataset(cfg: &RunConfig) -> Result<CentroidDataset> {
    let samples = |split| -> Result<Vec<CentroidSample>> {
        load_split(cfg, split)?
            .iter()
            .map(|t| centroid_sample(t).map_err(Error::from))
            .collect()
    };
    Ok(CentroidDataset {
        train: samples(Split::Train)?,
        test: samples(Split::Test)?,
    })
}

/// Instance patches of every tile, in tile order.
pub fn patches_of(tiles: &[ImageTile]) -> Result<Vec<InstancePatch>> {
    let per_tile = tiles
        .par_iter()
        .map(|t| Ok(extract_instance_patches(t)?.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_tile.into_iter().flatten().collect())
}

fn instance_dataset(cfg: &RunConfig) -> Result<InstanceDataset> {
    Ok(InstanceDataset {
        train: patches_of(&load_split(cfg, Split::Train)?)?,
        test: patches_of(&load_split(cfg, Split::Test)?)?,
    })
}

/// Runs one training job, writing `<prefix>.ckpt`, `<prefix>_best.ckpt`,
/// periodic `<prefix>_epoch_NNNN.ckpt` and `<prefix>_loss.csv` (rewritten
/// after every epoch, so a diverged run keeps its history).
fn train_job<F>(cfg: &RunConfig, tcfg: &TrainConfig, prefix: &str, train: F) -> Result<()>
where
    F: FnOnce(Hooks<'_>) -> vec2instance_core::Result<(Network<f32>, LossLog)>,
{
    let out = out_dir(cfg);
    cfg.write_echo(out)?;
    let net_cfg = NetConfig {
        seed: tcfg.seed,
        ..NetConfig::default()
    };
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let mut log = LossLog::default();
    let mut failure: Option<Error> = None;
    let mut on_epoch = |e: EpochEnd<'_>| {
        log.records.push(*e.record);
        let r = e.record;
        println!(
            "epoch {:>4}  train {:.6}  test {:.6}  {:.1}s",
            r.epoch, r.train_loss, r.test_loss, r.seconds
        );
        let save = |name: String| checkpoint::save(&out.join(name), e.network, net_cfg, r.epoch, cfg.echo());
        let result = report::write_loss_log(&out.join(format!("{prefix}_loss.csv")), &log)
            .and_then(|_| if e.best_test { save(format!("{prefix}_best.ckpt")) } else { Ok(()) })
            .and_then(|_| if e.periodic { save(format!("{prefix}_epoch_{:04}.ckpt", r.epoch)) } else { Ok(()) });
        result.map_err(|err| {
            let msg = err.to_string();
            failure = Some(err);
            vec2instance_core::Error::Config(msg)
        })
    };
    let hooks = Hooks {
        clock: Some(&clock),
        on_epoch: Some(&mut on_epoch),
    };
    let result = train(hooks);
    if let Some(err) = failure {
        return Err(err);
    }
    let (net, final_log) = result?;
    checkpoint::save(&out.join(format!("{prefix}.ckpt")), &net, net_cfg, final_log.len(), cfg.echo())?;
    report::write_loss_log(&out.join(format!("{prefix}_loss.csv")), &final_log)?;
    write_curves(&out.join(format!("{prefix}_curves")), "epoch", &loss_series(prefix, &final_log))?;
    println!("wrote {} to {}", format!("{prefix}.ckpt"), out.display());
    Ok(())
}

fn train_centroid_cmd(cfg: &RunConfig) -> Result<()> {
    let data = centroid_dataset(cfg)?;
    let tcfg = cfg.train_config(TrainConfig::centroid_default());
    println!("centroid training: {} train / {} test tiles", data.train.len(), data.test.len());
    train_job(cfg, &tcfg, "centroid", |hooks| train_centroid(&data, &tcfg, hooks))
}

fn train_instance_cmd(cfg: &RunConfig) -> Result<()> {
    let data = instance_dataset(cfg)?;
    let tcfg = cfg.train_config(TrainConfig::instance_default());
    println!("instance training: {} train / {} test patches", data.train.len(), data.test.len());
    let prefix = cfg.decoder.arch_id();
    train_job(cfg, &tcfg, &prefix, |hooks| train_instance(&data, &tcfg, cfg.decoder, hooks))
}

fn load_checkpoint(path: Option<&Path>, what: &str) -> Result<Network<f32>> {
    let path = path.ok_or_else(|| Error::config(format!("missing {what} checkpoint")))?;
    if !path.exists() {
        return Err(Error::config(format!("{what} checkpoint {} does not exist", path.display())));
    }
    Ok(checkpoint::load(path)?.0)
}

fn networks(cfg: &RunConfig) -> Result<(Network<f32>, Network<f32>)> {
    Ok((
        load_checkpoint(cfg.centroid_checkpoint.as_deref(), "centroid")?,
        load_checkpoint(cfg.instance_checkpoint.as_deref(), "instance")?,
    ))
}

#[derive(Serialize)]
struct PlacedInstance {
    label: u32,
    origin: (isize, isize),
    score: f32,
    pixels: usize,
}

#[derive(Serialize)]
struct PredictionFile<'a> {
    tile_id: &'a str,
    candidates: &'a [CentroidCandidate],
    instances: Vec<PlacedInstance>,
}

fn predict(cfg: &RunConfig, split: SplitArg) -> Result<()> {
    let (cnet, inet) = networks(cfg)?;
    let ds = Dataset::open(data_dir(cfg)?)?;
    let entries: Vec<_> = ds
        .manifest
        .entries
        .iter()
        .filter(|e| match split {
            SplitArg::All => true,
            SplitArg::Train => e.split == Split::Train,
            SplitArg::Test => e.split == Split::Test,
        })
        .collect();
    let out = out_dir(cfg);
    let infer = cfg.inference();
    let counts = entries
        .par_iter()
        .map(|e| {
            let tile = ds.load(e)?;
            let p = predict_tile(&cnet, &inet, &tile, &infer)?;
            let file = PredictionFile {
                tile_id: &p.tile_id,
                candidates: &p.candidates,
                instances: p
                    .instances
                    .iter()
                    .enumerate()
                    .map(|(i, m)| PlacedInstance {
                        label: i as u32 + 1,
                        origin: m.origin,
                        score: m.score,
                        pixels: m.mask.foreground_count(),
                    })
                    .collect(),
            };
            io::write_json(&out.join(format!("{}.json", p.tile_id)), &file)?;
            io::save_png(&out.join(format!("{}_labels.png", p.tile_id)), &labelmap_image(&p.labelmap))?;
            io::save_png(&out.join(format!("{}_overlay.png", p.tile_id)), &overlay(&tile, &p.labelmap))?;
            Ok(p.instances.len())
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.write_echo(out)?;
    println!(
        "predicted {} instances on {} tiles into {}",
        counts.iter().sum::<usize>(),
        counts.len(),
        out.display()
    );
    Ok(())
}

/// Per-tile evaluation over the worker pool, reduced in tile order.
pub fn evaluate_tiles(predictor: &NetworkPredictor<'_>, tiles: &[ImageTile], cfg: &RunConfig) -> Result<EvalReport> {
    if tiles.is_empty() {
        return Err(vec2instance_core::Error::EmptyDataset.into());
    }
    let eval = cfg.eval();
    let reports = tiles
        .par_iter()
        .map(|t| evaluate_tile(predictor, t, &eval).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_tiles(reports, eval))
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let (cnet, inet) = networks(cfg)?;
    let tiles = load_split(cfg, Split::Test)?;
    let predictor = NetworkPredictor::new(Some(&cnet), Some(&inet))?;
    let rep = evaluate_tiles(&predictor, &tiles, cfg)?;
    let out = out_dir(cfg);
    report::write_report(out, &rep, cfg.echo())?;
    cfg.write_echo(out)?;
    print!("{}", report::render_report(&rep));
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let data = instance_dataset(cfg)?;
    let tcfg = cfg.train_config(TrainConfig::instance_default());
    let start = Instant::now();
    let clock = move || start.elapsed().as_secs_f64();
    let mut progress = |k: &DecoderKind, r: &LossRecord| {
        println!("{:<24} epoch {:>4}  test {:.6}", k.arch_id(), r.epoch, r.test_loss);
    };
    let cmp = compare_decoders(&data, &cfg.budgets, &tcfg, Some(&clock), Some(&mut progress))?;
    let out = out_dir(cfg);
    report::write_comparison(out, &cmp, cfg.echo())?;
    cfg.write_echo(out)?;
    print!("{}", report::render_comparison(&cmp));
    Ok(())
}

fn plot(cfg: &RunConfig, logs: &[PathBuf]) -> Result<()> {
    let mut series = Vec::new();
    for path in logs {
        let log = report::read_loss_log(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        series.extend(loss_series(&name, &log));
    }
    let out = out_dir(cfg);
    write_curves(&out.join("loss_curves"), "epoch", &series)?;
    cfg.write_echo(out)?;
    println!("wrote {}", out.join("loss_curves.png").display());
    Ok(())
}
