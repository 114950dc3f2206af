//! The training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::Sequence;
use super::model::{Model, ModelInput};
use super::tracker::{canonical_box, crop_search_region, template_points, to_box_frame};
use crate::config::Config;
use crate::diffcore::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::losses::{loss_total, LossBreakdown, LossParts, TrainingTarget};

/// One (template, search) example in the search frame.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub template: PointCloud,
    pub template_box: Box3D,
    pub search: PointCloud,
    /// Ground truth of the search frame, relative to the reference box.
    pub target_box: Box3D,
}

/// Builds the pair for search frame `t`: template cropped from frame
/// `t - 1`, search region around a jittered copy of the frame `t - 1` box.
/// Returns `None` when either crop comes up empty.
pub fn make_pair<R: Rng>(seq: &Sequence, t: usize, cfg: &Config, rng: &mut R) -> Result<Option<TrainingPair>> {
    if t == 0 || t >= seq.frames.len() {
        return Err(Error::Parameter(format!("pair index {t} outside 1..{}", seq.frames.len())));
    }
    let prev = &seq.frames[t - 1];
    let cur = &seq.frames[t];
    let (prev_box, cur_box) = match (prev.gt_box, cur.gt_box) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Input(format!("sequence {}: frame {t} pair lacks boxes", seq.name))),
    };
    let bb = &cfg.model.backbone;
    let template = match template_points(prev, &prev_box, bb.n_t, rng) {
        Ok(t) => t,
        Err(Error::Input(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let tc = &cfg.train;
    let mut reference = prev_box;
    if tc.center_jitter > 0.0 {
        let n = Normal::new(0.0, tc.center_jitter).map_err(|e| Error::Config(e.to_string()))?;
        reference.center[0] += n.sample(rng);
        reference.center[1] += n.sample(rng);
    }
    if tc.yaw_jitter > 0.0 {
        let n = Normal::new(0.0, tc.yaw_jitter).map_err(|e| Error::Config(e.to_string()))?;
        reference = Box3D::new(reference.center, reference.size, reference.yaw + n.sample(rng))?;
    }
    let region = crop_search_region(cur, &reference, cfg.tracker.search_margin, bb.n_s, rng)?;
    if region.len() < bb.m_s {
        return Ok(None);
    }
    Ok(Some(TrainingPair {
        template,
        template_box: canonical_box(prev_box.size),
        search: to_box_frame(&region.coords, &reference)?,
        target_box: cur_box.relative_to(&reference),
    }))
}

/// One optimizer step's worth of logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Batch-mean of each term; `total` obeys the weighted-sum identity.
    pub breakdown: LossBreakdown,
    pub grad_norm: f64,
    /// Pairs in the batch without any seed inside the target box.
    pub no_positive_seed: usize,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,l_off,l_imp,l_score,l_center_rot,total,grad_norm,no_positive_seed";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step,
            self.breakdown.csv_fields(),
            self.grad_norm,
            self.no_positive_seed
        )
    }
}

/// Loss of one pair, with gradients accumulated into `store`.
pub fn pair_loss(
    model: &Model,
    store: &mut ParamStore,
    pair: &TrainingPair,
    cfg: &Config,
) -> Result<(LossBreakdown, bool)> {
    let mut g = Graph::new();
    let pass = model.forward(
        &mut g,
        store,
        ModelInput {
            template: &pair.template,
            template_box: &pair.template_box,
            search: &pair.search,
        },
    )?;
    let target = TrainingTarget::new(pair.target_box, &pass.seeds.coords)?;
    let built = pass.loss(&mut g, &target, &cfg.loss)?;
    g.backward(built.total, store)?;
    Ok((built.breakdown, built.flags.no_positive_seed))
}

fn sample_pair<R: Rng>(sequences: &[Sequence], cfg: &Config, rng: &mut R) -> Result<TrainingPair> {
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let seq = &sequences[rng.random_range(0..sequences.len())];
        let t = rng.random_range(1..seq.frames.len());
        if let Some(pair) = make_pair(seq, t, cfg, rng)? {
            return Ok(pair);
        }
    }
    Err(Error::Pipeline(format!(
        "no usable training pair in {ATTEMPTS} draws; search regions are too sparse"
    )))
}

/// Trains `model` in place. `on_step` sees every record right after the
/// parameter update.
pub fn train_model(
    model: &Model,
    store: &mut ParamStore,
    sequences: &[Sequence],
    cfg: &Config,
    mut on_step: impl FnMut(&StepRecord, &ParamStore) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    for seq in sequences {
        seq.validate_annotated()?;
    }
    // pair sampling gets its own stream so it does not depend on init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut optimizer = cfg.train.optimizer.build();
    let batch = cfg.train.batch_size;
    let mut curve = Vec::with_capacity(cfg.train.steps);
    for step in 1..=cfg.train.steps {
        store.zero_grad();
        let mut sum = LossParts::default();
        let mut no_positive_seed = 0;
        for _ in 0..batch {
            let pair = sample_pair(sequences, cfg, &mut rng)?;
            let (b, no_pos) = pair_loss(model, store, &pair, cfg).map_err(|e| match e {
                Error::NonFinite { what } => Error::Diverged { step, detail: what },
                other => other,
            })?;
            sum.l_off += b.l_off;
            sum.l_imp += b.l_imp;
            sum.l_score += b.l_score;
            sum.l_center_rot += b.l_center_rot;
            no_positive_seed += usize::from(no_pos);
        }
        let inv = 1.0 / batch as f64;
        let mean = LossParts {
            l_off: sum.l_off * inv,
            l_imp: sum.l_imp * inv,
            l_score: sum.l_score * inv,
            l_center_rot: sum.l_center_rot * inv,
        };
        let breakdown = loss_total(mean, &cfg.loss.weights).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        store.scale_grads(inv);
        let grad_norm = store.grad_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {grad_norm}; losses {breakdown:?}"),
            });
        }
        let clip = cfg.train.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            store.scale_grads(clip / grad_norm);
        }
        optimizer.step_with_lr(store, cfg.train.lr_at(step)).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
        let record = StepRecord {
            step,
            breakdown,
            grad_norm,
            no_positive_seed,
        };
        if step == 1 || step % 50 == 0 || step == cfg.train.steps {
            log::info!(
                "step {step}: total {:.5} (off {:.4}, imp {:.4}, score {:.4}, center/rot {:.4})",
                breakdown.total,
                breakdown.l_off,
                breakdown.l_imp,
                breakdown.l_score,
                breakdown.l_center_rot
            );
        }
        on_step(&record, store)?;
        curve.push(record);
    }
    Ok(curve)
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore,
    pub curve: Vec<StepRecord>,
}

/// Initializes a model from `cfg.seed` and trains it on `sequences`.
pub fn train(sequences: &[Sequence], cfg: &Config) -> Result<Trained> {
    let mut store = ParamStore::new();
    let model = Model::init(&cfg.model, &mut store, cfg.seed)?;
    let curve = train_model(&model, &mut store, sequences, cfg, |_, _| Ok(()))?;
    Ok(Trained { model, store, curve })
}
