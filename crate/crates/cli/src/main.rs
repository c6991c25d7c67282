use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use usnet::config::RunConfig;
use usnet::data::{load_dataset, read_rgb_png, save_dataset, synth_generate, tile_image, Split};
use usnet::eval::{evaluate, DEFAULT_AP_IOU, EVAL_CONF_THRESHOLD};
use usnet::geometry::generate_anchors;
use usnet::gradcheck::{gradient_report, DEFAULT_EPSILON};
use usnet::inference::{predict_image, write_prediction};
use usnet::network::{load_checkpoint_for, UsNet};
use usnet::run::{load_records, train_run, CONFIG_FILE, MODEL_FILE};
use usnet::training::{run_ablation, TrainMode};
use usnet::Error;

#[derive(Parser, Debug)]
#[command(name = "usnet", version, about = "Joint nuclei detection and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes in the dataset layout.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of scenes.
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Cut a dataset's images into training tiles.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train the network and the refiner into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        mode: Option<String>,
    },
    /// Predict instances for every image of a dataset or a single PNG.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// A single image to run instead of a dataset.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Score a trained model on a dataset (AP and PA).
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Which split to score: train, eval or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Check the loss gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random points per loss term.
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Print the anchor layout as CSV.
    Anchors {
        #[command(flatten)]
        common: Common,
    },
    /// Train joint, detection-only and segmentation-only models and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Config file, or `default`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Override any config key, e.g. `--set loss.gamma=1.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Print metrics as JSON on stdout.
    #[arg(long)]
    json: bool,
    /// Accepted for compatibility; every computation already runs on one
    /// thread in a fixed order.
    #[arg(long)]
    strict_deterministic: bool,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    model: PathBuf,
}

type CmdResult = Result<(), CliError>;

enum CliError {
    Validation(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

impl Common {
    /// Loads the config file and applies `--set` and flag overrides.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig, CliError> {
        let mut cfg = match base {
            Some(c) if self.config == "default" => c,
            _ => RunConfig::load(&self.config)?,
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.dataset {
            cfg.data.dataset = d.to_string_lossy().into_owned();
        }
        if let Some(t) = self.conf_threshold {
            cfg.infer.detect.conf_threshold = t;
        }
        if let Some(t) = self.nms_iou {
            cfg.infer.detect.nms_iou = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or_else(|| invalid("--out is required"))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

/// Resolves `--model` to a checkpoint path and, for run directories or
/// checkpoints inside one, the run's own config.
fn model_paths(model: &Path) -> (PathBuf, Option<PathBuf>) {
    let ckpt = if model.is_dir() {
        model.join(MODEL_FILE)
    } else {
        model.to_path_buf()
    };
    let cfg = ckpt.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    (ckpt, cfg)
}

fn load_model(common: &Common, args: &ModelArgs) -> Result<(RunConfig, UsNet<f32>), CliError> {
    let (ckpt, run_cfg) = model_paths(&args.model);
    let base = match run_cfg {
        Some(p) => Some(RunConfig::parse(&fs::read_to_string(&p).map_err(|e| io_err(&p, e))?)?),
        None => None,
    };
    let cfg = common.resolve(base)?;
    let (model, _) = load_checkpoint_for::<f32>(&ckpt, &cfg.network)?;
    Ok((cfg, model))
}

fn cmd_synth(common: &Common, count: usize) -> CmdResult {
    let cfg = common.resolve(None)?;
    let out = synth_generate(&cfg.synth_params(), count)?;
    for (i, want, got) in &out.shortfalls {
        eprintln!("scene {i}: placed {got} of {want} nuclei");
    }
    save_dataset(common.out()?, &out.scenes)?;
    if common.json {
        print_json(&json!({ "scenes": out.scenes.len(), "shortfalls": out.shortfalls.len() }));
    }
    Ok(())
}

fn cmd_prepare(common: &Common) -> CmdResult {
    let cfg = common.resolve(None)?;
    if cfg.data.dataset.is_empty() {
        return Err(invalid("--dataset is required"));
    }
    let mut tiles = Vec::new();
    for rec in load_dataset(Path::new(&cfg.data.dataset))? {
        for mut t in tile_image(&rec, cfg.data.tile, cfg.data.step)? {
            t.origin.source = format!("{}_x{}_y{}", t.origin.source, t.origin.x, t.origin.y);
            tiles.push(t);
        }
    }
    save_dataset(common.out()?, &tiles)?;
    if common.json {
        print_json(&json!({ "tiles": tiles.len() }));
    } else {
        eprintln!("wrote {} tiles", tiles.len());
    }
    Ok(())
}

fn cmd_train(common: &Common, steps: Option<u64>, mode: Option<&str>) -> CmdResult {
    let mut cfg = common.resolve(None)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(m) = mode {
        cfg.train.mode = m.parse::<TrainMode>()?;
    }
    let summary = train_run(&cfg, common.out()?)?;
    let last = summary.trace.rows.last();
    let report = json!({
        "run": summary.dir,
        "steps": summary.trace.rows.len(),
        "first_total": summary.trace.first_total(),
        "final_total": summary.trace.last_total(),
        "final_ap": last.and_then(|r| r.ap),
        "final_pa": last.and_then(|r| r.pa),
        "refine_pa": summary.refine_pa,
        "wall_clock_secs": summary.trace.wall_clock_secs,
    });
    if common.json {
        print_json(&report);
    } else {
        eprintln!("run written to {}", summary.dir.display());
    }
    Ok(())
}

fn cmd_infer(common: &Common, args: &ModelArgs, image: Option<&Path>) -> CmdResult {
    let (cfg, model) = load_model(common, args)?;
    let anchors = generate_anchors(&cfg.anchors)?;
    let out = common.out()?;
    let inputs: Vec<(String, usnet::data::Image)> = match image {
        Some(p) => {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| invalid(format!("bad image path {}", p.display())))?;
            vec![(stem.to_string(), read_rgb_png(p)?)]
        }
        None if !cfg.data.dataset.is_empty() => load_dataset(Path::new(&cfg.data.dataset))?
            .into_iter()
            .map(|r| (r.origin.source, r.image))
            .collect(),
        None => return Err(invalid("--dataset or --image is required")),
    };
    let mut counts = Vec::new();
    for (stem, img) in &inputs {
        let result = predict_image(&model, &anchors, img, &cfg.infer)?;
        write_prediction(out, stem, img, &result)?;
        counts.push(json!({ "image": stem, "instances": result.instances.len() }));
    }
    if common.json {
        print_json(&json!({ "images": counts }));
    }
    Ok(())
}

fn cmd_eval(common: &Common, args: &ModelArgs, split: &str) -> CmdResult {
    let (mut cfg, model) = load_model(common, args)?;
    if common.conf_threshold.is_none() {
        cfg.infer.detect.conf_threshold = EVAL_CONF_THRESHOLD;
    }
    let anchors = generate_anchors(&cfg.anchors)?;
    let records = load_records(&cfg)?;
    let records: Vec<_> = match split {
        "all" => records,
        "train" => records.into_iter().filter(|r| r.split == Split::Train).collect(),
        "eval" => records.into_iter().filter(|r| r.split == Split::Eval).collect(),
        other => return Err(invalid(format!("unknown split `{other}` (train, eval, all)"))),
    };
    let m = evaluate(
        &model,
        &anchors,
        &records,
        &cfg.infer.detect,
        DEFAULT_AP_IOU,
        cfg.train.batch_size,
    )?;
    let value = serde_json::to_value(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(out) = &common.out {
        write_text(
            &out.join("metrics.json"),
            &(serde_json::to_string_pretty(&value).unwrap() + "\n"),
        )?;
        write_text(&out.join("pr.csv"), &m.pr_csv())?;
    }
    if common.json {
        print_json(&value);
    } else {
        println!(
            "ap {:.4} pa {:.4} images {} gt {} detections {}",
            m.ap, m.pa, m.n_images, m.n_gt, m.n_det
        );
    }
    Ok(())
}

fn cmd_gradcheck(common: &Common, trials: usize) -> CmdResult {
    let cfg = common.resolve(None)?;
    let r = gradient_report(cfg.seed, trials, DEFAULT_EPSILON)?;
    print_json(&json!({ "seg": r.seg, "conf": r.conf, "loc": r.loc, "max": r.max() }));
    if r.max() < 1e-5 {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient error {:.3e} exceeds 1e-5",
            r.max()
        )))
    }
}

fn cmd_anchors(common: &Common) -> CmdResult {
    let cfg = common.resolve(None)?;
    let mut csv = String::from("level,row,col,variant,cx,cy,w,h\n");
    for a in &generate_anchors(&cfg.anchors)? {
        let b = a.bbox;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.level, a.row, a.col, a.variant, b.cx, b.cy, b.w, b.h
        ));
    }
    match &common.out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn cmd_ablate(common: &Common, steps: Option<u64>) -> CmdResult {
    let mut cfg = common.resolve(None)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let anchors = generate_anchors(&cfg.anchors)?;
    let records = load_records(&cfg)?;
    let table = run_ablation(&cfg.network, &anchors, &records, &cfg.train_config())?;
    if let Some(out) = &common.out {
        write_text(&out.join("ablation.csv"), &table.to_csv())?;
        cfg.save(&out.join(CONFIG_FILE))?;
    }
    if common.json {
        print_json(&serde_json::to_value(&table).map_err(|e| CliError::Runtime(e.to_string()))?);
    } else {
        print!("{table}");
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Synth { common, count } => cmd_synth(common, *count),
        Command::Prepare { common } => cmd_prepare(common),
        Command::Train { common, steps, mode } => cmd_train(common, *steps, mode.as_deref()),
        Command::Infer { common, model, image } => cmd_infer(common, model, image.as_deref()),
        Command::Eval { common, model, split } => cmd_eval(common, model, split),
        Command::Gradcheck { common, trials } => cmd_gradcheck(common, *trials),
        Command::Anchors { common } => cmd_anchors(common),
        Command::Ablate { common, steps } => cmd_ablate(common, *steps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    usnet::sys::tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
