//! Frame-by-frame tracking with a fixed first-frame template.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::{Frame, Sequence};
use super::model::{Model, ModelInput};
use crate::config::Config;
use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, Point3, PointCloud};

/// Points of `cloud` inside `reference` grown by `margin` on every side
/// (boundary inclusive), in world coordinates.
pub fn points_near_box(cloud: &PointCloud, reference: &Box3D, margin: f64) -> Vec<Point3> {
    let h = reference.half_extents();
    cloud
        .coords
        .iter()
        .copied()
        .filter(|&p| {
            let q = reference.to_local(p);
            (0..3).all(|k| q[k].abs() <= h[k] + margin)
        })
        .collect()
}

/// Brings `points` to exactly `count` entries: a seeded subset (kept in
/// original order) when there are too many, all points plus draws with
/// replacement when there are too few.
pub fn resample<R: Rng>(points: &[Point3], count: usize, rng: &mut R) -> Vec<Point3> {
    if points.is_empty() || points.len() == count {
        return points.to_vec();
    }
    if points.len() > count {
        let mut keep = index::sample(rng, points.len(), count).into_vec();
        keep.sort_unstable();
        return keep.into_iter().map(|i| points[i]).collect();
    }
    let mut out = points.to_vec();
    while out.len() < count {
        out.push(points[rng.random_range(0..points.len())]);
    }
    out
}

/// The search region around `reference`, resampled to `n_s` points. Empty
/// when no point falls inside.
pub fn crop_search_region<R: Rng>(
    frame: &Frame,
    reference: &Box3D,
    margin: f64,
    n_s: usize,
    rng: &mut R,
) -> Result<PointCloud> {
    if !(margin > 0.0) {
        return Err(Error::Parameter(format!("search margin {margin} must be positive")));
    }
    let near = points_near_box(&frame.cloud, reference, margin);
    PointCloud::new(resample(&near, n_s, rng))
}

/// Expresses world points in the frame of `reference`.
pub fn to_box_frame(points: &[Point3], reference: &Box3D) -> Result<PointCloud> {
    PointCloud::new(points.iter().map(|&p| reference.to_local(p)).collect())
}

/// Template points: the frame's points inside `gt_box`, in the box frame,
/// resampled to `n_t`.
pub fn template_points<R: Rng>(frame: &Frame, gt_box: &Box3D, n_t: usize, rng: &mut R) -> Result<PointCloud> {
    let inside: Vec<Point3> = frame.cloud.coords.iter().copied().filter(|&p| gt_box.contains(p)).collect();
    if inside.is_empty() {
        return Err(Error::Input("no points inside the template box".into()));
    }
    to_box_frame(&resample(&inside, n_t, rng), gt_box)
}

/// Box at the origin of its own frame with the given size.
pub fn canonical_box(size: [f64; 3]) -> Box3D {
    Box3D {
        center: [0.0; 3],
        size,
        yaw: 0.0,
    }
}

/// Result of one tracking step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackStep {
    pub bbox: Box3D,
    /// The search region was empty and the previous box was reused.
    pub flagged: bool,
}

pub struct TrackerState<'a> {
    model: &'a Model,
    store: &'a ParamStore,
    config: &'a Config,
    template: PointCloud,
    template_size: [f64; 3],
    prev_box: Box3D,
    rng: ChaCha8Rng,
}

impl<'a> TrackerState<'a> {
    /// Initializes from the first frame of `seq`.
    pub fn new(model: &'a Model, store: &'a ParamStore, config: &'a Config, seq: &Sequence) -> Result<Self> {
        seq.validate()?;
        let first = seq.template_box()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let template = template_points(&seq.frames[0], &first, config.model.backbone.n_t, &mut rng)?;
        Ok(Self {
            model,
            store,
            config,
            template,
            template_size: first.size,
            prev_box: first,
            rng,
        })
    }

    pub fn previous_box(&self) -> Box3D {
        self.prev_box
    }

    pub fn track_frame(&mut self, frame: &Frame) -> Result<TrackStep> {
        let reference = self.prev_box;
        let region = crop_search_region(
            frame,
            &reference,
            self.config.tracker.search_margin,
            self.config.model.backbone.n_s,
            &mut self.rng,
        )?;
        if region.is_empty() {
            log::debug!("empty search region; keeping the previous box");
            return Ok(TrackStep {
                bbox: reference,
                flagged: true,
            });
        }
        let search = to_box_frame(&region.coords, &reference)?;
        let template_box = canonical_box(self.template_size);
        let local = self.model.predict(
            self.store,
            ModelInput {
                template: &self.template,
                template_box: &template_box,
                search: &search,
            },
        )?;
        let bbox = local.from_relative(&reference);
        self.prev_box = bbox;
        Ok(TrackStep { bbox, flagged: false })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    /// One box per frame; frame 0 holds the given template box.
    pub boxes: Vec<Box3D>,
    pub flagged: Vec<bool>,
}

impl TrackResult {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

pub fn track_sequence(model: &Model, store: &ParamStore, config: &Config, seq: &Sequence) -> Result<TrackResult> {
    let mut state = TrackerState::new(model, store, config, seq)?;
    let mut boxes = vec![state.previous_box()];
    let mut flagged = vec![false];
    for frame in &seq.frames[1..] {
        let step = state.track_frame(frame)?;
        boxes.push(step.bbox);
        flagged.push(step.flagged);
    }
    Ok(TrackResult { boxes, flagged })
}
