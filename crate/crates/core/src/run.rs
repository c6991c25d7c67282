//! Run directories: a training run reads a [`RunConfig`] and leaves
//! behind everything needed to reproduce and use it.
//!
//! ```text
//! run.cfg              the exact configuration
//! trace.jsonl          one row per main training step
//! refine_trace.jsonl   one row per refinement step
//! model.usnt           checkpoint
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{load_dataset, refinement_samples, synth_generate, PatchRecord};
use crate::error::{Error, Result};
use crate::geometry::generate_anchors;
use crate::network::{save_checkpoint, UsNet};
use crate::training::{train, train_refiner, TrainTrace};

pub const CONFIG_FILE: &str = "run.cfg";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const REFINE_TRACE_FILE: &str = "refine_trace.jsonl";
pub const MODEL_FILE: &str = "model.usnt";

/// The configured dataset, or synthetic scenes when none is set.
pub fn load_records(cfg: &RunConfig) -> Result<Vec<PatchRecord>> {
    if cfg.data.dataset.is_empty() {
        Ok(synth_generate(&cfg.synth_params(), cfg.data.synth_count)?.scenes)
    } else {
        load_dataset(Path::new(&cfg.data.dataset))
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub trace: TrainTrace,
    pub refine_pa: Option<f64>,
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Trains the main network and then the refiner (when `refine.steps > 0`)
/// and writes the run directory.
pub fn train_run(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let records = load_records(cfg)?;
    let anchors = generate_anchors(&cfg.anchors)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.save(&dir.join(CONFIG_FILE))?;

    let mut model = UsNet::<f32>::build(&cfg.network, cfg.seed)?;
    let trace_path = dir.join(TRACE_FILE);
    let mut sink = create_file(&trace_path)?;
    let (_, trace) = train(&mut model, &anchors, &records, &cfg.train_config(), Some(&mut sink))?;
    drop(sink);
    log::info!(
        "main network: {} steps in {:.1}s, total loss {:?} -> {:?}",
        trace.rows.len(),
        trace.wall_clock_secs,
        trace.first_total(),
        trace.last_total()
    );

    let mut refine_pa = None;
    let refine = cfg.refine_config();
    let refine_path = dir.join(REFINE_TRACE_FILE);
    let mut rows = String::new();
    if refine.steps > 0 {
        let train_set: Vec<PatchRecord> = records
            .iter()
            .filter(|r| r.split == crate::data::Split::Train)
            .cloned()
            .collect();
        let samples = refinement_samples(&train_set, cfg.infer.refine_scale, cfg.network.refine_size)?;
        let (_, rtrace) = train_refiner(&mut model, &samples, &refine)?;
        for r in &rtrace.rows {
            rows.push_str(&serde_json::to_string(r)?);
            rows.push('\n');
        }
        refine_pa = rtrace.rows.last().map(|r| r.pa);
    }
    fs::write(&refine_path, rows).map_err(|e| Error::io(&refine_path, e))?;
    save_checkpoint(&model, cfg.train.steps, cfg.seed, &dir.join(MODEL_FILE))?;
    Ok(RunSummary {
        dir: dir.to_path_buf(),
        trace,
        refine_pa,
    })
}
