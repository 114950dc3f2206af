//! File-level operations behind the command-line tool. Every output is a
//! pure function of the inputs, so repeated runs produce identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{Config, DataSource};
use crate::diffcore::{Checkpoint, ParamStore};
use crate::error::{Error, Result};
use crate::eval::{ablate, ablation_csv, evaluate, write_text, AblationAxis, Evaluation};
use crate::pipeline::{self, track_sequence, Model, StepRecord, SyntheticSet, TrackResult};

pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// What `train_to_dir` produced.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn checkpoint_of(store: &ParamStore, cfg: &Config) -> Checkpoint {
    Checkpoint::from_store(store, cfg.seed, cfg.to_json())
}

/// Trains on `cfg.data.train` and writes `config.json`, `loss.csv`, the
/// final `checkpoint.bin` and, when `checkpoint_every > 0`, intermediate
/// checkpoints under `checkpoints/`.
pub fn train_to_dir(cfg: &Config, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &(cfg.to_json() + "\n"))?;
    let sequences = pipeline::load_sequences(&cfg.data.train)?;

    let mut store = ParamStore::new();
    let model = Model::init(&cfg.model, &mut store, cfg.seed)?;
    let every = cfg.train.checkpoint_every;
    let curve = pipeline::train_model(&model, &mut store, &sequences, cfg, |record, store| {
        if every > 0 && record.step % every == 0 && record.step < cfg.train.steps {
            let path = out.join(CHECKPOINT_DIR).join(format!("step_{:06}.bin", record.step));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            checkpoint_of(store, cfg).save(&path)?;
        }
        Ok(())
    })?;

    let mut csv = String::from(StepRecord::CSV_HEADER);
    csv.push('\n');
    for r in &curve {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    write_text(&out.join(LOSS_FILE), &csv)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    checkpoint_of(&store, cfg).save(&checkpoint)?;
    Ok(TrainSummary {
        steps: curve.len(),
        final_loss: curve.last().map_or(f64::NAN, |r| r.breakdown.total),
        checkpoint,
    })
}

pub fn load_model(checkpoint: &Path) -> Result<(Config, Model, ParamStore)> {
    Model::from_checkpoint(&Checkpoint::load(checkpoint)?)
}

pub const TRACK_CSV_HEADER: &str = "frame,cx,cy,cz,w,h,l,yaw,flagged";

pub fn track_csv(result: &TrackResult) -> String {
    let mut out = format!("{TRACK_CSV_HEADER}\n");
    for (i, (b, f)) in result.boxes.iter().zip(&result.flagged).enumerate() {
        let [cx, cy, cz] = b.center;
        let [w, h, l] = b.size;
        let _ = writeln!(out, "{i},{cx},{cy},{cz},{w},{h},{l},{},{f}", b.yaw);
    }
    out
}

/// Tracks one sequence directory and writes one box per frame.
pub fn track_to_csv(checkpoint: &Path, sequence: &Path, out: &Path) -> Result<TrackResult> {
    let (cfg, model, store) = load_model(checkpoint)?;
    let seq = pipeline::read_sequence(sequence)?;
    let result = track_sequence(&model, &store, &cfg, &seq)?;
    write_text(out, &track_csv(&result))?;
    Ok(result)
}

/// Evaluates a checkpoint on `data`, or on the checkpoint's own eval source
/// when `data` is `None`. Writes the report JSON and its per-frame CSV.
pub fn eval_to_report(checkpoint: &Path, data: Option<&Path>, report: &Path) -> Result<Evaluation> {
    let (cfg, model, store) = load_model(checkpoint)?;
    let source = match data {
        Some(path) => DataSource::Directory { path: path.to_path_buf() },
        None => cfg.data.eval.clone(),
    };
    let sequences = pipeline::load_sequences(&source)?;
    let evaluation = evaluate(&model, &store, &cfg, &sequences)?;
    evaluation.write(report)?;
    Ok(evaluation)
}

pub fn ablate_to_csv(cfg: &Config, axis: AblationAxis, values: &[String], out: &Path) -> Result<()> {
    let rows = ablate(cfg, axis, values)?;
    write_text(out, &ablation_csv(&rows))
}

/// Generates the synthetic set described by the JSON file at `spec` into
/// `out`, one directory per sequence.
pub fn generate_to_dir(spec: &Path, out: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let set: SyntheticSet =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let sequences = set.generate()?;
    pipeline::write_dataset(out, &sequences)?;
    Ok(sequences.len())
}
