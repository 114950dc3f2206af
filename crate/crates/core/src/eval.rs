//! One-pass evaluation metrics, evaluation runs and ablation sweeps.
//!
//! Both curves are sampled at 201 evenly spaced thresholds (endpoints
//! included) and integrated with the trapezoid rule. Success counts frames
//! whose overlap is strictly above the threshold on `[0, 1]`; precision counts
//! frames whose center error is strictly below the threshold on `[0, 2]`
//! meters. With these conventions a perfect tracker scores 99.75, not 100.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::{box_iou_3d, dist3, Box3D};
use crate::glt::GltMode;
use crate::pipeline::{self, track_sequence, Model, Sequence};

pub const THRESHOLDS: usize = 201;
/// Upper end of the precision threshold range, meters.
pub const PRECISION_RANGE: f64 = 2.0;

fn auc(values: &[f64], passes: impl Fn(f64, f64) -> bool, span: f64, what: &str) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Metric(format!("{what} of an empty frame list")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Metric(format!("{what}: non-finite frame value {v}")));
    }
    let n = values.len() as f64;
    let curve: Vec<f64> = (0..THRESHOLDS)
        .map(|i| {
            let tau = span * i as f64 / (THRESHOLDS - 1) as f64;
            values.iter().filter(|&&v| passes(v, tau)).count() as f64 / n
        })
        .collect();
    let area: f64 = curve.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(100.0 * area / (THRESHOLDS - 1) as f64)
}

/// Area under the success curve, scaled to `[0, 100]`.
pub fn success_auc(overlaps: &[f64]) -> Result<f64> {
    if let Some(o) = overlaps.iter().find(|o| !(0.0..=1.0).contains(*o)) {
        return Err(Error::Metric(format!("overlap {o} outside [0, 1]")));
    }
    auc(overlaps, |o, tau| o > tau, 1.0, "success")
}

/// Area under the precision curve, scaled to `[0, 100]`.
pub fn precision_auc(errors: &[f64]) -> Result<f64> {
    if let Some(e) = errors.iter().find(|e| **e < 0.0) {
        return Err(Error::Metric(format!("negative center error {e}")));
    }
    auc(errors, |e, tau| e < tau, PRECISION_RANGE, "precision")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub sequence: String,
    pub frame: usize,
    /// 3D IoU with the ground truth.
    pub overlap: f64,
    /// Center distance to the ground truth, meters.
    pub error: f64,
    pub flagged: bool,
}

impl FrameResult {
    pub fn new(sequence: &str, frame: usize, predicted: &Box3D, gt: &Box3D, flagged: bool) -> Result<Self> {
        Ok(Self {
            sequence: sequence.to_string(),
            frame,
            overlap: box_iou_3d(predicted, gt)?,
            error: dist3(predicted.center, gt.center),
            flagged,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub success: f64,
    pub precision: f64,
    pub frames: usize,
    pub sequences: usize,
    /// Frames where the search region was empty.
    pub flagged_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: OpeReport,
    pub frames: Vec<FrameResult>,
}

impl Evaluation {
    pub fn frames_csv(&self) -> String {
        let mut out = String::from("sequence,frame,overlap,error,flagged\n");
        for f in &self.frames {
            let _ = writeln!(out, "{},{},{},{},{}", f.sequence, f.frame, f.overlap, f.error, f.flagged);
        }
        out
    }

    pub fn report_json(&self) -> String {
        serde_json::to_string_pretty(&self.report).expect("report serializes") + "\n"
    }

    /// Writes the JSON summary to `path` and the per-frame table next to it
    /// with a `.frames.csv` suffix.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.report_json())?;
        write_text(&path.with_extension("frames.csv"), &self.frames_csv())
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores predicted boxes against ground truth; frame 0 of every sequence
/// is skipped. `flagged` may be empty.
pub fn evaluate_predictions(
    sequences: &[Sequence],
    predictions: &[Vec<Box3D>],
    flagged: &[Vec<bool>],
) -> Result<Evaluation> {
    if predictions.len() != sequences.len() {
        return Err(Error::Metric(format!(
            "{} prediction tracks for {} sequences",
            predictions.len(),
            sequences.len()
        )));
    }
    let mut frames = Vec::new();
    for (s, (seq, pred)) in sequences.iter().zip(predictions).enumerate() {
        let gt = seq.gt_boxes()?;
        if pred.len() != gt.len() {
            return Err(Error::Metric(format!(
                "sequence {}: {} predictions for {} frames",
                seq.name,
                pred.len(),
                gt.len()
            )));
        }
        for t in 1..gt.len() {
            let f = flagged.get(s).and_then(|v| v.get(t)).copied().unwrap_or(false);
            frames.push(FrameResult::new(&seq.name, t, &pred[t], &gt[t], f)?);
        }
    }
    let overlaps: Vec<f64> = frames.iter().map(|f| f.overlap).collect();
    let errors: Vec<f64> = frames.iter().map(|f| f.error).collect();
    Ok(Evaluation {
        report: OpeReport {
            success: success_auc(&overlaps)?,
            precision: precision_auc(&errors)?,
            frames: frames.len(),
            sequences: sequences.len(),
            flagged_frames: frames.iter().filter(|f| f.flagged).count(),
        },
        frames,
    })
}

/// Tracks every sequence with the model and scores the result.
pub fn evaluate(model: &Model, store: &ParamStore, cfg: &Config, sequences: &[Sequence]) -> Result<Evaluation> {
    let mut boxes = Vec::with_capacity(sequences.len());
    let mut flagged = Vec::with_capacity(sequences.len());
    for seq in sequences {
        seq.validate_annotated()?;
        let r = track_sequence(model, store, cfg, seq)?;
        boxes.push(r.boxes);
        flagged.push(r.flagged);
    }
    evaluate_predictions(sequences, &boxes, &flagged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    M,
    N,
    Components,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(Self::M),
            "n" => Ok(Self::N),
            "components" => Ok(Self::Components),
            other => Err(Error::Usage(format!("unknown ablation axis {other:?}; use m, n or components"))),
        }
    }
}

/// Model variants compared on the components axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    /// Transformer blocks are identity pass-throughs, no importance branch.
    NoGlt,
    /// Global block only, no importance branch.
    GtOnly,
    /// Global and local blocks, no importance branch.
    GtLt,
    /// Global and local blocks plus the importance branch.
    GtLtTs,
}

impl Component {
    pub const ALL: [Component; 4] = [Self::NoGlt, Self::GtOnly, Self::GtLt, Self::GtLtTs];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoGlt => "no-glt",
            Self::GtOnly => "gt-only",
            Self::GtLt => "gt+lt",
            Self::GtLtTs => "+ts",
        }
    }

    pub fn apply(self, cfg: &mut Config) {
        let (glt, importance) = match self {
            Self::NoGlt => (GltMode::Identity, false),
            Self::GtOnly => (GltMode::Global, false),
            Self::GtLt => (GltMode::GlobalLocal, false),
            Self::GtLtTs => (GltMode::GlobalLocal, true),
        };
        cfg.model.glt = glt;
        cfg.model.importance_branch = importance;
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown component {s:?}; use no-glt, gt-only, gt+lt or +ts")))
    }
}

pub const M_VALUES: [usize; 4] = [4, 8, 16, 32];
pub const N_VALUES: [usize; 3] = [8, 16, 24];

/// `cfg` with one ablation value applied.
pub fn apply_variant(cfg: &Config, axis: AblationAxis, value: &str) -> Result<Config> {
    let mut out = cfg.clone();
    let number = |allowed: &[usize]| -> Result<usize> {
        let v: usize = value
            .parse()
            .map_err(|_| Error::Usage(format!("ablation value {value:?} is not an integer")))?;
        if !allowed.contains(&v) {
            return Err(Error::Usage(format!("ablation value {v} not in {allowed:?}")));
        }
        Ok(v)
    };
    match axis {
        AblationAxis::M => out.model.m = number(&M_VALUES)?,
        AblationAxis::N => out.model.n = number(&N_VALUES)?,
        AblationAxis::Components => value.parse::<Component>()?.apply(&mut out),
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: String,
    pub success: f64,
    pub precision: f64,
    pub final_loss: f64,
    pub parameters: usize,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("axis,value,success,precision,final_loss,parameters\n");
    for r in rows {
        let axis = match r.axis {
            AblationAxis::M => "m",
            AblationAxis::N => "n",
            AblationAxis::Components => "components",
        };
        let _ = writeln!(
            out,
            "{axis},{},{},{},{},{}",
            r.value, r.success, r.precision, r.final_loss, r.parameters
        );
    }
    out
}

/// Trains and evaluates one variant per value, all on the same data.
pub fn ablate(cfg: &Config, axis: AblationAxis, values: &[String]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(Error::Usage("no ablation values given".into()));
    }
    let variants = values
        .iter()
        .map(|v| apply_variant(cfg, axis, v))
        .collect::<Result<Vec<_>>>()?;
    let train_set = pipeline::load_sequences(&cfg.data.train)?;
    let eval_set = pipeline::load_sequences(&cfg.data.eval)?;
    let mut rows = Vec::with_capacity(values.len());
    for (value, variant) in values.iter().zip(&variants) {
        log::info!("ablation {axis:?} = {value}");
        let trained = pipeline::train(&train_set, variant)?;
        let eval = evaluate(&trained.model, &trained.store, variant, &eval_set)?;
        rows.push(AblationRow {
            axis,
            value: value.clone(),
            success: eval.report.success,
            precision: eval.report.precision,
            final_loss: trained.curve.last().map_or(f64::NAN, |r| r.breakdown.total),
            parameters: trained.store.num_scalars(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent curve integration: explicit threshold list and a plain
    /// loop over trapezoids.
    fn oracle(values: &[f64], success: bool) -> f64 {
        let span = if success { 1.0 } else { 2.0 };
        let taus: Vec<f64> = (0..=200).map(|i| span * f64::from(i) / 200.0).collect();
        let frac = |t: f64| {
            let hits = values
                .iter()
                .filter(|&&v| if success { v > t } else { v < t })
                .count();
            hits as f64 / values.len() as f64
        };
        let mut area = 0.0;
        for w in taus.windows(2) {
            area += (frac(w[0]) + frac(w[1])) / 2.0 * (w[1] - w[0]) / span;
        }
        100.0 * area
    }

    #[test]
    fn constant_inputs() {
        assert!((success_auc(&[1.0; 7]).unwrap() - 99.75).abs() < 1e-9);
        assert_eq!(success_auc(&[0.0; 7]).unwrap(), 0.0);
        assert!((precision_auc(&[0.0; 3]).unwrap() - 99.75).abs() < 1e-9);
        assert_eq!(precision_auc(&[2.5; 3]).unwrap(), 0.0);
        assert!((precision_auc(&[1.0; 3]).unwrap() - 49.75).abs() < 1e-9);
        let half = [0.0, 1.0, 0.0, 1.0];
        assert!((success_auc(&half).unwrap() - 49.875).abs() < 1e-9);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(success_auc(&[]), Err(Error::Metric(_))));
        assert!(matches!(precision_auc(&[]), Err(Error::Metric(_))));
        assert!(matches!(success_auc(&[1.2]), Err(Error::Metric(_))));
        assert!(matches!(precision_auc(&[-0.1]), Err(Error::Metric(_))));
    }

    #[test]
    fn variant_values_are_checked() {
        let cfg = Config::default();
        assert!(apply_variant(&cfg, AblationAxis::M, "12").is_err());
        assert!(apply_variant(&cfg, AblationAxis::N, "x").is_err());
        let v = apply_variant(&cfg, AblationAxis::Components, "no-glt").unwrap();
        assert_eq!(v.model.glt, GltMode::Identity);
        assert!(!v.model.importance_branch);
        assert_eq!(apply_variant(&cfg, AblationAxis::M, "32").unwrap().model.m, 32);
        assert!("z".parse::<AblationAxis>().is_err());
    }

    proptest! {
        #[test]
        fn matches_loop_oracle(v in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            prop_assert!((success_auc(&v).unwrap() - oracle(&v, true)).abs() < 1e-9);
            let e: Vec<f64> = v.iter().map(|x| x * 2.5).collect();
            prop_assert!((precision_auc(&e).unwrap() - oracle(&e, false)).abs() < 1e-9);
        }

        #[test]
        fn monotone_and_order_free(
            v in prop::collection::vec(0.0f64..=1.0, 2..30),
            pick in 0usize..30,
            bump in 0.0f64..1.0,
        ) {
            let i = pick % v.len();
            let mut better = v.clone();
            better[i] = (better[i] + bump).min(1.0);
            prop_assert!(success_auc(&better).unwrap() >= success_auc(&v).unwrap());
            let mut errs: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
            let base = precision_auc(&errs).unwrap();
            errs[i] *= 1.0 - bump;
            prop_assert!(precision_auc(&errs).unwrap() >= base);
            let mut rev = v.clone();
            rev.reverse();
            prop_assert_eq!(success_auc(&rev).unwrap(), success_auc(&v).unwrap());
        }
    }
}
