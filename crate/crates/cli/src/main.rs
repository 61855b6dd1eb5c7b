mod config;
mod manifest;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::ConfigFile;
use manifest::{manifest_path, RunManifest};
use occtip::bench::{run_bench, to_csv, BENCH_SIZES, DEFAULT_RUNS};
use occtip::duomamba::count_params;
use occtip::meshgen::shapes::{toy_objects, LabeledMesh};
use occtip::meshgen::{load_obj, write_obj};
use occtip::store::Container;
use occtip::train::{generate_dataset, probe_eval, zero_shot_eval, Model, TrainState, TripletDataset};
use occtip::Error;
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const METRICS_HELP: &str = "Metrics log: one JSON object per step with fields \
epoch, step, lr, tau, point_image, point_text, image_text, mixed_text, total.";

/// Published parameter count of the full-size encoder.
const PAPER_REFERENCE_PARAMS: u64 = 29_200_000;

const BENCH_HELP: &str = "CSV columns: s_tokens, duomamba_flops (analytic), \
attention_flops (analytic attention-equivalent), latency_s (median forward time).";

#[derive(Parser)]
#[command(name = "occtip", version, about = "Occlusion-aware point cloud pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the procedural toy meshes (8 classes) as OBJ files.
    ToyMeshes(ToyMeshesArgs),
    /// Render every mesh from 12 cameras into a triplet dataset container.
    Gen(GenArgs),
    /// Contrastive pretraining on a dataset container.
    #[command(after_help = METRICS_HELP)]
    Pretrain(PretrainArgs),
    /// Zero-shot classification or few-shot linear probing.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Analytic FLOPs and measured forward latency over token counts.
    #[command(after_help = BENCH_HELP)]
    Bench(BenchArgs),
}

#[derive(Args)]
struct ToyMeshesArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    /// Directory of `<class>_<id>.obj` meshes.
    #[arg(long)]
    meshes: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a `[gen]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// Width of the fixture text/image features.
    #[arg(long)]
    d_clip: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Weights {
    Ema,
    Model,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the manifest and metrics log are written next to it.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with `[encoder]` and `[train]` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder preset: toy, desk or paper.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Training preset: desk or paper.
    #[arg(long, default_value = "desk")]
    train_preset: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// View ids excluded from training.
    #[arg(long, value_delimiter = ',')]
    held_out_views: Vec<usize>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration replaces presets and file.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "ema")]
    weights: Weights,
    /// JSON report path; the manifest is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Top-1/3/5 against the class text features.
    ZeroShot {
        #[command(flatten)]
        common: EvalCommon,
        /// View ids to evaluate (all when omitted).
        #[arg(long, value_delimiter = ',')]
        views: Vec<usize>,
    },
    /// Linear probe on frozen embeddings, one accuracy per shot count.
    Probe {
        #[command(flatten)]
        common: EvalCommon,
        /// View ids used as the test split; the rest train the probe.
        #[arg(long, value_delimiter = ',', default_value = "3,7")]
        test_views: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        shots: Vec<usize>,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Encoder preset: toy, desk or paper.
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    runs: usize,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output; the manifest is written next to it.
    #[arg(long)]
    csv: Option<PathBuf>,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical { .. } | Error::Shape(_) => Failure::Internal(e.to_string()),
            _ => Failure::User(e.to_string()),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Cmd::ToyMeshes(a) => toy_meshes(a),
        Cmd::Gen(a) => gen(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::User(format!("{}: {e}", path.display()))
}

fn read_container(path: &Path) -> std::result::Result<Container, Failure> {
    Container::read_file(path).map_err(|e| match e {
        Error::Io(io) => io_err(path, io),
        other => Failure::User(format!("{}: {other}", path.display())),
    })
}

fn toy_meshes(a: ToyMeshesArgs) -> CmdResult {
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let m = RunManifest::begin(
        "toy-meshes",
        Some(a.seed),
        json!({"per_class": a.per_class}),
        a.out.join("toy-meshes.manifest.json"),
    )?;
    let objects = toy_objects(a.per_class, a.seed);
    for o in &objects {
        let path = a.out.join(format!("{}.obj", o.name));
        std::fs::write(&path, write_obj(&o.mesh)).map_err(|e| io_err(&path, e))?;
    }
    println!("wrote {} meshes to {}", objects.len(), a.out.display());
    m.finish("ok")?;
    Ok(())
}

/// `chair_01.obj` belongs to class `chair`; a stem without `_` is its own class.
fn class_of(stem: &str) -> &str {
    stem.rsplit_once('_').map_or(stem, |(c, _)| c)
}

fn gen(a: GenArgs) -> CmdResult {
    let file = ConfigFile::load(a.config.as_deref())?;
    let mut cfg = file.resolve("gen", &config::gen_defaults())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    if let Some(p) = a.points {
        cfg.points = p;
    }
    if let Some(d) = a.d_clip {
        cfg.fixtures.d_clip = d;
    }
    let m = RunManifest::begin("gen", Some(cfg.seed), serde_json::to_value(&cfg).unwrap_or_default(), manifest_path(&a.out))?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&a.meshes)
        .map_err(|e| io_err(&a.meshes, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::User(format!("{}: no .obj meshes found", a.meshes.display())));
    }
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut classes: Vec<String> = stems.iter().map(|s| class_of(s).to_string()).collect();
    classes.sort();
    classes.dedup();
    let mut meshes = Vec::new();
    let mut unreadable = Vec::new();
    for (path, stem) in paths.iter().zip(&stems) {
        match load_obj(path) {
            Ok(mesh) => meshes.push(LabeledMesh {
                name: stem.clone(),
                class: classes.iter().position(|c| c == class_of(stem)).unwrap_or(0),
                mesh,
            }),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                unreadable.push(stem.clone());
            }
        }
    }
    if meshes.is_empty() {
        return Err(Failure::User("every mesh failed to load".into()));
    }
    let (dataset, report) = generate_dataset(&meshes, &classes, &cfg)?;
    for s in &report.skipped {
        eprintln!("warning: skipped {s}");
    }
    dataset.to_container()?.write_file(&a.out).map_err(|e| match e {
        Error::Io(io) => io_err(&a.out, io),
        other => other.into(),
    })?;
    println!(
        "objects {}  views {}  points {}  mean visible fraction {:.4}  skipped {}",
        report.objects,
        report.views,
        report.points,
        report.mean_visible_fraction,
        report.skipped.len() + unreadable.len()
    );
    m.finish("ok")?;
    Ok(())
}

fn apply_train_flags(cfg: &mut occtip::train::TrainConfig, a: &PretrainArgs) {
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.warmup_epochs = cfg.warmup_epochs.min(e);
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
}

fn pretrain(a: PretrainArgs) -> CmdResult {
    let dataset = TripletDataset::from_container(&read_container(&a.data)?)?;
    let state = match &a.resume {
        Some(path) => {
            let mut s = TrainState::from_container(&read_container(path)?)?;
            if a.seed.is_some_and(|seed| seed != s.config.seed) {
                return Err(Failure::User("seed: cannot change the seed of a resumed run".into()));
            }
            apply_train_flags(&mut s.config, &a);
            s
        }
        None => {
            let file = ConfigFile::load(a.config.as_deref())?;
            let mut enc = config::encoder_preset(&a.preset)?;
            enc.embed_dim = dataset.embed_dim();
            let enc = file.resolve("encoder", &enc)?;
            let mut train = file.resolve("train", &config::train_preset(&a.train_preset)?)?;
            if let Some(s) = a.seed {
                train.seed = s;
            }
            apply_train_flags(&mut train, &a);
            TrainState::new(&enc, &train)?
        }
    };
    let mut state = state;
    state.config.validate()?;
    if state.encoder_config.embed_dim != dataset.embed_dim() {
        return Err(Failure::User(format!(
            "config error: checkpoint embeds into {} dimensions, dataset features have {}",
            state.encoder_config.embed_dim,
            dataset.embed_dim()
        )));
    }
    let train_idx: Vec<usize> = (0..dataset.records.len())
        .filter(|&i| !a.held_out_views.contains(&dataset.records[i].view_id))
        .collect();
    let m = RunManifest::begin(
        "pretrain",
        Some(state.config.seed),
        json!({
            "encoder": state.encoder_config,
            "encoder_params": count_params(&state.encoder_config),
            "train": state.config,
            "data": a.data,
            "held_out_views": a.held_out_views,
            "resume": a.resume,
            "start_step": state.step,
            "start_epoch": state.epoch,
        }),
        manifest_path(&a.out),
    )?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().unwrap_or_default().to_os_string();
        n.push(".metrics.jsonl");
        a.out.with_file_name(n)
    });
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(a.resume.is_some())
            .write(true)
            .truncate(a.resume.is_none())
            .open(&metrics_path)
            .map_err(|e| io_err(&metrics_path, e))?,
    );
    let mut write_err = None;
    let start = std::time::Instant::now();
    let epochs = state.config.epochs;
    let mut last_epoch = usize::MAX;
    let outcome = state.train(&dataset, &train_idx, &mut |s| {
        if let Err(e) = serde_json::to_writer(&mut log, s).map_err(std::io::Error::from).and_then(|_| writeln!(log)) {
            write_err.get_or_insert(e);
        }
        if s.epoch != last_epoch {
            last_epoch = s.epoch;
            eprintln!("epoch {}/{}  step {}  loss {:.4}  tau {:.4}", s.epoch + 1, epochs, s.step, s.loss.total, s.tau);
        }
    });
    log.flush().map_err(|e| io_err(&metrics_path, e))?;
    if let Some(e) = write_err {
        return Err(io_err(&metrics_path, e));
    }
    let metrics = outcome?;
    let mut ckpt = state.to_container()?;
    ckpt.meta["held_out_views"] = json!(a.held_out_views);
    ckpt.write_file(&a.out)?;
    let tail: Vec<f64> = metrics.iter().rev().take(10).map(|s| s.loss.total).collect();
    if !tail.is_empty() {
        println!(
            "steps {}  final loss {:.4} (mean of last {})  time {:.1}s",
            state.step,
            tail.iter().sum::<f64>() / tail.len() as f64,
            tail.len(),
            start.elapsed().as_secs_f64()
        );
    } else {
        println!("steps {}  no updates run", state.step);
    }
    m.finish("ok")?;
    Ok(())
}

fn eval(cmd: EvalCmd) -> CmdResult {
    let (common, label) = match &cmd {
        EvalCmd::ZeroShot { common, .. } => (common, "eval-zero-shot"),
        EvalCmd::Probe { common, .. } => (common, "eval-probe"),
    };
    let state = TrainState::from_container(&read_container(&common.checkpoint)?)?;
    let dataset = TripletDataset::from_container(&read_container(&common.data)?)?;
    let model: &Model = match common.weights {
        Weights::Ema => &state.ema,
        Weights::Model => &state.model,
    };
    let enc = &state.encoder_config;
    let manifest_at = common
        .out
        .as_deref()
        .map(manifest_path)
        .unwrap_or_else(|| PathBuf::from(format!("occtip-{label}.manifest.json")));
    let weights = match common.weights {
        Weights::Ema => "ema",
        Weights::Model => "model",
    };
    let report = match &cmd {
        EvalCmd::ZeroShot { views, .. } => {
            let m = RunManifest::begin(
                label,
                None,
                json!({"checkpoint": common.checkpoint, "data": common.data, "views": views, "weights": weights}),
                manifest_at,
            )?;
            let idx: Vec<usize> = (0..dataset.records.len())
                .filter(|&i| views.is_empty() || views.contains(&dataset.records[i].view_id))
                .collect();
            let top = zero_shot_eval(model, enc, &dataset, &idx)?;
            println!(
                "zero-shot on {} clouds, {} classes: top-1 {:.4}  top-3 {:.4}  top-5 {:.4}",
                idx.len(),
                dataset.classes.len(),
                top.top1,
                top.top3,
                top.top5
            );
            (m, json!({"records": idx.len(), "classes": dataset.classes.len(), "top1": top.top1, "top3": top.top3, "top5": top.top5}))
        }
        EvalCmd::Probe { test_views, shots, .. } => {
            let m = RunManifest::begin(
                label,
                None,
                json!({"checkpoint": common.checkpoint, "data": common.data, "test_views": test_views, "shots": shots, "weights": weights}),
                manifest_at,
            )?;
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.records.len()).partition(|&i| test_views.contains(&dataset.records[i].view_id));
            let accs = probe_eval(model, enc, &dataset, &train, &test, shots)?;
            for (n, acc) in &accs {
                println!("probe {n:>2}-shot: {acc:.4}");
            }
            let rows: Vec<_> = accs.iter().map(|(n, acc)| json!({"shots": n, "accuracy": acc})).collect();
            (m, json!({"train_records": train.len(), "test_records": test.len(), "probe": rows}))
        }
    };
    let (m, value) = report;
    if let Some(out) = &common.out {
        std::fs::write(out, serde_json::to_vec_pretty(&value).map_err(Error::from)?).map_err(|e| io_err(out, e))?;
    }
    m.finish("ok")?;
    Ok(())
}

fn bench(a: BenchArgs) -> CmdResult {
    let file = ConfigFile::load(a.config.as_deref())?;
    let enc = file.resolve("encoder", &config::encoder_preset(&a.preset)?)?;
    let sizes = if a.sizes.is_empty() { BENCH_SIZES.to_vec() } else { a.sizes.clone() };
    let manifest_at = a
        .csv
        .as_deref()
        .map(manifest_path)
        .unwrap_or_else(|| PathBuf::from("occtip-bench.manifest.json"));
    let params = count_params(&enc);
    let mut recorded = json!({"preset": a.preset, "encoder": enc, "encoder_params": params, "sizes": sizes, "runs": a.runs});
    if a.preset == "paper" {
        recorded["reference_params"] = json!(PAPER_REFERENCE_PARAMS);
        recorded["param_deviation"] = json!(params as f64 / PAPER_REFERENCE_PARAMS as f64 - 1.0);
    }
    let m = RunManifest::begin("bench", Some(a.seed), recorded, manifest_at)?;
    println!("encoder parameters {params}");
    let rows = run_bench(&enc, &sizes, a.runs, a.seed)?;
    println!("{:>6} {:>16} {:>16} {:>12}", "S", "duomamba_flops", "attention_flops", "latency_ms");
    for r in &rows {
        println!(
            "{:>6} {:>16} {:>16} {:>12.3}",
            r.s_tokens,
            r.duomamba_flops,
            r.attention_flops,
            r.latency_s * 1e3
        );
    }
    if let Some(csv) = &a.csv {
        std::fs::write(csv, to_csv(&rows)).map_err(|e| io_err(csv, e))?;
    }
    m.finish("ok")?;
    Ok(())
}
