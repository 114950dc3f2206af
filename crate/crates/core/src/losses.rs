//! Training objectives.
//!
//! Each term exists twice: a plain function over values, used as the
//! reference and for reporting, and a graph builder used for training. Tests
//! keep the two in agreement.

use serde::{Deserialize, Serialize};

use crate::diffcore::{self, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, add3, dist3, sub3, wrap_angle, Box3D, Point3};
use crate::head::{HeadOutput, HeadVars};

/// Ground truth for one search frame, in the frame the model works in.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTarget {
    pub gt_box: Box3D,
    pub gt_center: Point3,
    /// `o_i`: seed `i` lies inside `gt_box`.
    pub seed_labels: Vec<bool>,
}

impl TrainingTarget {
    pub fn new(gt_box: Box3D, seed_coords: &[Point3]) -> Result<Self> {
        Ok(Self {
            gt_center: gt_box.center,
            seed_labels: geometry::points_in_box(seed_coords, &gt_box)?,
            gt_box,
        })
    }

    pub fn positives(&self) -> usize {
        self.seed_labels.iter().filter(|&&o| o).count()
    }
}

/// `λ1`, `λ2`, `λ3`: weights of the importance, score and center/rotation
/// terms relative to the offset term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub importance: f64,
    pub score: f64,
    pub center_rot: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            importance: 0.5,
            score: 1.0,
            center_rot: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("importance", self.importance),
            ("score", self.score),
            ("center_rot", self.center_rot),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Proposals within this distance of the target center are positives.
    pub r_pos: f64,
    /// Proposals beyond this distance are negatives; between the radii they
    /// are ignored by the score loss.
    pub r_neg: f64,
    pub smooth_l1_delta: f64,
    /// Let the offset loss back-propagate into the importance branch through
    /// its `(1 + I)` weights. Off by default: the branch learns from the
    /// importance loss only.
    pub offset_grad_into_importance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            r_pos: 0.3,
            r_neg: 0.6,
            smooth_l1_delta: 1.0,
            offset_grad_into_importance: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.r_pos > 0.0 && self.r_neg >= self.r_pos && self.r_neg.is_finite()) {
            return Err(Error::Config(format!(
                "score radii must satisfy 0 < r_pos <= r_neg, got {} and {}",
                self.r_pos, self.r_neg
            )));
        }
        if !(self.smooth_l1_delta > 0.0 && self.smooth_l1_delta.is_finite()) {
            return Err(Error::Config(format!("smooth_l1_delta = {}", self.smooth_l1_delta)));
        }
        Ok(())
    }
}

/// A loss value plus whether it fell back to 0 because nothing qualified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub value: f64,
    pub degenerate: bool,
}

impl Term {
    fn zero() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }

    fn of(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub l_off: f64,
    pub l_imp: f64,
    pub l_score: f64,
    pub l_center_rot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_off: f64,
    pub l_imp: f64,
    pub l_score: f64,
    pub l_center_rot: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "l_off,l_imp,l_score,l_center_rot,total";

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.l_off, self.l_imp, self.l_score, self.l_center_rot, self.total
        )
    }
}

/// `total = l_off + λ1·l_imp + λ2·l_score + λ3·l_center_rot`, evaluated left
/// to right.
pub fn loss_total(parts: LossParts, weights: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [
        ("l_off", parts.l_off),
        ("l_imp", parts.l_imp),
        ("l_score", parts.l_score),
        ("l_center_rot", parts.l_center_rot),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss term {name} = {v}"),
            });
        }
    }
    let total = parts.l_off
        + weights.importance * parts.l_imp
        + weights.score * parts.l_score
        + weights.center_rot * parts.l_center_rot;
    Ok(LossBreakdown {
        l_off: parts.l_off,
        l_imp: parts.l_imp,
        l_score: parts.l_score,
        l_center_rot: parts.l_center_rot,
        total,
    })
}

fn label(o: bool) -> f64 {
    if o { 1.0 } else { 0.0 }
}

/// Mean binary cross-entropy between importance and seed labels.
pub fn loss_importance(importance: &[f64], labels: &[bool]) -> Result<f64> {
    if importance.len() != labels.len() || importance.is_empty() {
        return Err(Error::shape(
            "loss_importance",
            format!("{} weights for {} labels", importance.len(), labels.len()),
        ));
    }
    let sum: f64 = importance
        .iter()
        .zip(labels)
        .map(|(&i, &o)| diffcore::bce(i, label(o)))
        .sum();
    Ok(sum / importance.len() as f64)
}

fn smooth_l1_3(a: Point3, b: Point3, delta: f64) -> f64 {
    let d = sub3(a, b);
    d.iter().map(|&v| diffcore::smooth_l1(v, delta)).sum()
}

/// Offset loss over positive seeds, each weighted by `1 + I_i` (or 1 when no
/// importance is given), normalized by the positive count.
pub fn loss_offset(
    vote_coords: &[Point3],
    importance: Option<&[f64]>,
    target: &TrainingTarget,
    delta: f64,
) -> Result<Term> {
    let labels = &target.seed_labels;
    if vote_coords.len() != labels.len() || importance.is_some_and(|i| i.len() != labels.len()) {
        return Err(Error::shape(
            "loss_offset",
            format!("{} votes for {} labels", vote_coords.len(), labels.len()),
        ));
    }
    let positives = target.positives();
    if positives == 0 {
        return Ok(Term::zero());
    }
    let mut sum = 0.0;
    for (i, (&v, &o)) in vote_coords.iter().zip(labels).enumerate() {
        if o {
            let w = 1.0 + importance.map_or(0.0, |imp| imp[i]);
            sum += smooth_l1_3(v, target.gt_center, delta) * w;
        }
    }
    Ok(Term::of(sum / positives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProposalLabel {
    Positive,
    Negative,
    Ignored,
}

fn proposal_labels(centers: &[Point3], target: &TrainingTarget, cfg: &LossConfig) -> Vec<ProposalLabel> {
    centers
        .iter()
        .map(|&c| {
            let d = dist3(c, target.gt_center);
            if d <= cfg.r_pos {
                ProposalLabel::Positive
            } else if d > cfg.r_neg {
                ProposalLabel::Negative
            } else {
                ProposalLabel::Ignored
            }
        })
        .collect()
}

/// Score cross-entropy over proposals outside the dead zone.
pub fn loss_score(
    output: &HeadOutput,
    centers: &[Point3],
    target: &TrainingTarget,
    cfg: &LossConfig,
) -> Result<Term> {
    check_proposals("loss_score", output, centers)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&s, l) in output.scores.iter().zip(proposal_labels(centers, target, cfg)) {
        match l {
            ProposalLabel::Positive => sum += diffcore::bce(s, 1.0),
            ProposalLabel::Negative => sum += diffcore::bce(s, 0.0),
            ProposalLabel::Ignored => continue,
        }
        count += 1;
    }
    if count == 0 {
        return Ok(Term::zero());
    }
    Ok(Term::of(sum / count as f64))
}

/// Refined-center and yaw regression over positive proposals.
pub fn loss_center_rot(
    output: &HeadOutput,
    centers: &[Point3],
    target: &TrainingTarget,
    cfg: &LossConfig,
) -> Result<Term> {
    check_proposals("loss_center_rot", output, centers)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (k, l) in proposal_labels(centers, target, cfg).into_iter().enumerate() {
        if l != ProposalLabel::Positive {
            continue;
        }
        let refined = add3(centers[k], output.refinements[k]);
        let yaw_err = wrap_angle(output.yaws[k] - target.gt_box.yaw);
        sum += smooth_l1_3(refined, target.gt_center, cfg.smooth_l1_delta)
            + diffcore::smooth_l1(yaw_err, cfg.smooth_l1_delta);
        count += 1;
    }
    if count == 0 {
        return Ok(Term::zero());
    }
    Ok(Term::of(sum / count as f64))
}

fn check_proposals(op: &'static str, output: &HeadOutput, centers: &[Point3]) -> Result<()> {
    if output.is_empty() || output.len() != centers.len() {
        return Err(Error::shape(
            op,
            format!("{} proposals with {} centers", output.len(), centers.len()),
        ));
    }
    Ok(())
}

/// Graph-side inputs for the full objective.
pub struct LossInputs<'a> {
    /// `M_s × 3` vote coordinates.
    pub vote_coords: Var,
    /// `M_s × 1` importance, absent when the model has no importance branch.
    pub importance: Option<Var>,
    /// `K × 3` proposal centers.
    pub proposal_centers: Var,
    pub head: &'a HeadVars,
}

/// Which terms fell back to 0 for lack of qualifying seeds or proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossFlags {
    pub no_positive_seed: bool,
    pub no_scored_proposal: bool,
    pub no_positive_proposal: bool,
}

pub struct LossGraph {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub flags: LossFlags,
}

fn constant_zero(g: &mut Graph) -> Var {
    g.input(Matrix::scalar(0.0))
}

fn tiled(p: Point3, rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, 3);
    for r in 0..rows {
        m.row_mut(r).copy_from_slice(&p);
    }
    m
}

/// Builds every term on the graph and combines them with the configured
/// weights. The returned breakdown equals the graph's total bitwise.
pub fn build_loss(
    g: &mut Graph,
    inputs: &LossInputs,
    target: &TrainingTarget,
    cfg: &LossConfig,
) -> Result<LossGraph> {
    let mut flags = LossFlags::default();
    let m = target.seed_labels.len();
    if g.shape(inputs.vote_coords) != (m, 3) {
        return Err(Error::shape(
            "build_loss",
            format!("votes {:?} for {m} seed labels", g.shape(inputs.vote_coords)),
        ));
    }

    let l_imp = match inputs.importance {
        Some(imp) => {
            let labels = target.seed_labels.iter().map(|&o| label(o)).collect();
            let per_seed = g.bce(imp, labels)?;
            g.weighted_row_sum(per_seed, vec![1.0 / m as f64; m])?
        }
        None => constant_zero(g),
    };

    let positives = target.positives();
    let l_off = if positives == 0 {
        flags.no_positive_seed = true;
        constant_zero(g)
    } else {
        let per_seed = g.smooth_l1_rows(inputs.vote_coords, tiled(target.gt_center, m), cfg.smooth_l1_delta)?;
        let norm = 1.0 / positives as f64;
        match inputs.importance {
            Some(imp) if cfg.offset_grad_into_importance => {
                let w = g.add_scalar(imp, 1.0);
                let weighted = g.mul(per_seed, w)?;
                let sel = target.seed_labels.iter().map(|&o| label(o) * norm).collect();
                g.weighted_row_sum(weighted, sel)?
            }
            Some(imp) => {
                let iv = g.value(imp).as_slice().to_vec();
                let sel = target
                    .seed_labels
                    .iter()
                    .zip(&iv)
                    .map(|(&o, &i)| label(o) * (1.0 + i) * norm)
                    .collect();
                g.weighted_row_sum(per_seed, sel)?
            }
            None => {
                let sel = target.seed_labels.iter().map(|&o| label(o) * norm).collect();
                g.weighted_row_sum(per_seed, sel)?
            }
        }
    };

    let centers = crate::voting::matrix_points(g.value(inputs.proposal_centers));
    let k = centers.len();
    if g.shape(inputs.head.score) != (k, 1) || k == 0 {
        return Err(Error::shape(
            "build_loss",
            format!("scores {:?} for {k} proposals", g.shape(inputs.head.score)),
        ));
    }
    let labels = proposal_labels(&centers, target, cfg);

    let scored = labels.iter().filter(|&&l| l != ProposalLabel::Ignored).count();
    let l_score = if scored == 0 {
        flags.no_scored_proposal = true;
        constant_zero(g)
    } else {
        let y = labels
            .iter()
            .map(|&l| label(l == ProposalLabel::Positive))
            .collect();
        let per = g.bce(inputs.head.score, y)?;
        let w = labels
            .iter()
            .map(|&l| if l == ProposalLabel::Ignored { 0.0 } else { 1.0 / scored as f64 })
            .collect();
        g.weighted_row_sum(per, w)?
    };

    let pos = labels.iter().filter(|&&l| l == ProposalLabel::Positive).count();
    let l_center_rot = if pos == 0 {
        flags.no_positive_proposal = true;
        constant_zero(g)
    } else {
        let refined = g.add(inputs.proposal_centers, inputs.head.refinement)?;
        let center = g.smooth_l1_rows(refined, tiled(target.gt_center, k), cfg.smooth_l1_delta)?;
        let gt_yaw = g.input(Matrix::filled(k, 1, target.gt_box.yaw));
        let diff = g.sub(inputs.head.yaw, gt_yaw)?;
        let wrapped = g.wrap_angle(diff);
        let yaw = g.smooth_l1_rows(wrapped, Matrix::zeros(k, 1), cfg.smooth_l1_delta)?;
        let per = g.add(center, yaw)?;
        let w = labels
            .iter()
            .map(|&l| if l == ProposalLabel::Positive { 1.0 / pos as f64 } else { 0.0 })
            .collect();
        g.weighted_row_sum(per, w)?
    };

    let parts = LossParts {
        l_off: g.scalar(l_off),
        l_imp: g.scalar(l_imp),
        l_score: g.scalar(l_score),
        l_center_rot: g.scalar(l_center_rot),
    };
    let breakdown = loss_total(parts, &cfg.weights)?;

    let w = cfg.weights;
    let a = g.scale(l_imp, w.importance);
    let total = g.add(l_off, a)?;
    let b = g.scale(l_score, w.score);
    let total = g.add(total, b)?;
    let c = g.scale(l_center_rot, w.center_rot);
    let total = g.add(total, c)?;
    debug_assert_eq!(g.scalar(total).to_bits(), breakdown.total.to_bits());
    Ok(LossGraph {
        total,
        breakdown,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{LN_2, PI};

    fn unit_target(labels: Vec<bool>) -> TrainingTarget {
        TrainingTarget {
            gt_box: Box3D::new([0.0; 3], [1.0, 1.0, 1.0], 0.0).unwrap(),
            gt_center: [0.0; 3],
            seed_labels: labels,
        }
    }

    #[test]
    fn importance_closed_forms() {
        let labels = [true, false, true, false, false];
        let half = [0.5; 5];
        assert!((loss_importance(&half, &labels).unwrap() - LN_2).abs() < 1e-12);
        let perfect: Vec<f64> = labels.iter().map(|&o| label(o)).collect();
        assert!(loss_importance(&perfect, &labels).unwrap() <= 1e-6);
    }

    #[test]
    fn importance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let imp: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let mut oracle = 0.0;
        for i in 0..n {
            let y = if labels[i] { 1.0 } else { 0.0 };
            oracle -= y * imp[i].ln() + (1.0 - y) * (1.0 - imp[i]).ln();
        }
        oracle /= n as f64;
        assert!((loss_importance(&imp, &labels).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn offset_hand_values() {
        let target = unit_target(vec![true]);
        let votes = [[0.5, 0.0, 0.0]];
        assert_eq!(loss_offset(&votes, Some(&[0.0]), &target, 1.0).unwrap().value, 0.125);
        assert_eq!(loss_offset(&votes, Some(&[1.0]), &target, 1.0).unwrap().value, 0.25);
        assert_eq!(loss_offset(&[[0.0; 3]], Some(&[0.7]), &target, 1.0).unwrap().value, 0.0);
    }

    #[test]
    fn offset_without_positives_is_flagged_zero() {
        let target = unit_target(vec![false, false]);
        let t = loss_offset(&[[3.0; 3], [1.0; 3]], None, &target, 1.0).unwrap();
        assert_eq!(t, Term::zero());
    }

    #[test]
    fn score_closed_forms() {
        let cfg = LossConfig::default();
        let target = unit_target(vec![]);
        let far = HeadOutput {
            scores: vec![0.5],
            yaws: vec![0.0],
            refinements: vec![[0.0; 3]],
        };
        let t = loss_score(&far, &[[1.0, 0.0, 0.0]], &target, &cfg).unwrap();
        assert!((t.value - LN_2).abs() < 1e-12);

        let sure = HeadOutput {
            scores: vec![1.0, 1.0],
            yaws: vec![0.0; 2],
            refinements: vec![[0.0; 3]; 2],
        };
        assert!(loss_score(&sure, &[[0.0; 3]; 2], &target, &cfg).unwrap().value <= 1e-6);

        let dead = loss_score(&far, &[[0.45, 0.0, 0.0]], &target, &cfg).unwrap();
        assert_eq!(dead, Term::zero());
    }

    #[test]
    fn center_rot_wraps_yaw() {
        let cfg = LossConfig::default();
        let mut target = unit_target(vec![]);
        target.gt_box.yaw = PI;
        let out = HeadOutput {
            scores: vec![0.5],
            yaws: vec![-PI],
            refinements: vec![[0.1, 0.0, 0.0]],
        };
        let t = loss_center_rot(&out, &[[-0.1, 0.0, 0.0]], &target, &cfg).unwrap();
        assert!(t.value.abs() < 1e-15, "{t:?}");
    }

    #[test]
    fn total_arithmetic() {
        let w = LossWeights::default();
        let ones = LossParts {
            l_off: 1.0,
            l_imp: 1.0,
            l_score: 1.0,
            l_center_rot: 1.0,
        };
        assert_eq!(loss_total(ones, &w).unwrap().total, 3.5);
        assert_eq!(loss_total(LossParts::default(), &w).unwrap().total, 0.0);
        let none = LossWeights {
            importance: 0.0,
            score: 0.0,
            center_rot: 0.0,
        };
        let parts = LossParts {
            l_off: 0.3,
            l_imp: 9.0,
            l_score: 2.0,
            l_center_rot: 4.0,
        };
        assert_eq!(loss_total(parts, &none).unwrap().total, 0.3);
        let bad = LossParts {
            l_score: f64::NAN,
            ..parts
        };
        match loss_total(bad, &w) {
            Err(Error::NonFinite { what }) => assert!(what.contains("l_score")),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn negative_seeds_do_not_matter(
            votes in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 6),
            imp in prop::collection::vec(0.0f64..1.0, 6),
            noise in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let labels = vec![true, false, true, false, false, true];
            let target = unit_target(labels.clone());
            let base = loss_offset(&votes, Some(&imp), &target, 1.0).unwrap().value;
            let mut v2 = votes.clone();
            let mut i2 = imp.clone();
            for k in 0..6 {
                if !labels[k] {
                    v2[k] = [noise[k], -noise[k], noise[k] * 0.5];
                    i2[k] = (noise[k].abs() / 5.0).min(1.0);
                }
            }
            prop_assert_eq!(base, loss_offset(&v2, Some(&i2), &target, 1.0).unwrap().value);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn offset_is_linear_in_seed_weight(
            votes in prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 4),
            imp in prop::collection::vec(0.0f64..1.0, 4),
            pick in 0usize..4,
        ) {
            let target = unit_target(vec![true; 4]);
            let base = loss_offset(&votes, Some(&imp), &target, 1.0).unwrap().value;
            // doubling (1 + I) at one seed means I' = 1 + 2I
            let mut doubled = imp.clone();
            doubled[pick] = 1.0 + 2.0 * imp[pick];
            let after = loss_offset(&votes, Some(&doubled), &target, 1.0).unwrap().value;
            let share = smooth_l1_3(votes[pick], [0.0; 3], 1.0) * (1.0 + imp[pick]) / 4.0;
            prop_assert!((after - base - share).abs() < 1e-12);
        }
    }

    struct Case {
        g: Graph,
        vote_coords: Var,
        importance: Var,
        proposal_centers: Var,
        head: HeadVars,
        target: TrainingTarget,
        votes: Vec<Point3>,
        imp: Vec<f64>,
        out: HeadOutput,
    }

    fn random_case(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let m = 12;
        let k = 6;
        let votes: Vec<Point3> = (0..m)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)])
            .collect();
        let imp: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
        let centers: Vec<Point3> = (0..k).map(|i| [0.15 * i as f64, 0.0, 0.0]).collect();
        let out = HeadOutput {
            scores: (0..k).map(|_| rng.random_range(0.05..0.95)).collect(),
            yaws: (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            refinements: (0..k)
                .map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.0])
                .collect(),
        };
        let gt_box = Box3D::new([0.05, -0.02, 0.0], [1.0, 0.8, 1.2], 2.9).unwrap();
        let target = TrainingTarget::new(gt_box, &votes).unwrap();
        let vote_coords = g.input(crate::voting::points_matrix(&votes));
        let importance = g.input(Matrix::column(&imp));
        let proposal_centers = g.input(crate::voting::points_matrix(&centers));
        let head = HeadVars {
            score: g.input(Matrix::column(&out.scores)),
            yaw: g.input(Matrix::column(&out.yaws)),
            refinement: g.input(crate::voting::points_matrix(&out.refinements)),
        };
        Case {
            g,
            vote_coords,
            importance,
            proposal_centers,
            head,
            target,
            votes,
            imp,
            out,
        }
    }

    #[test]
    fn graph_terms_match_plain_functions() {
        let cfg = LossConfig::default();
        for seed in 0..5 {
            let Case {
                mut g,
                vote_coords,
                importance,
                proposal_centers,
                head,
                target,
                votes,
                imp,
                out,
            } = random_case(seed);
            let inputs = LossInputs {
                vote_coords,
                importance: Some(importance),
                proposal_centers,
                head: &head,
            };
            let centers = crate::voting::matrix_points(g.value(inputs.proposal_centers));
            let built = build_loss(&mut g, &inputs, &target, &cfg).unwrap();
            let b = built.breakdown;
            let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
            assert!(close(b.l_imp, loss_importance(&imp, &target.seed_labels).unwrap()));
            assert!(close(b.l_off, loss_offset(&votes, Some(&imp), &target, 1.0).unwrap().value));
            assert!(close(b.l_score, loss_score(&out, &centers, &target, &cfg).unwrap().value));
            assert!(close(b.l_center_rot, loss_center_rot(&out, &centers, &target, &cfg).unwrap().value));
            assert_eq!(g.scalar(built.total).to_bits(), b.total.to_bits());
        }
    }

    #[test]
    fn detached_importance_gets_no_offset_gradient() {
        let mut store = crate::diffcore::ParamStore::new();
        let imp = store.insert("imp", Matrix::filled(3, 1, 0.4)).unwrap();
        let run = |store: &mut crate::diffcore::ParamStore, coupled: bool| {
            let mut g = Graph::new();
            let vote_coords = g.input(Matrix::from_rows(&[[0.5, 0.0, 0.0], [0.1, 0.1, 0.0], [2.0, 2.0, 2.0]]).unwrap());
            let importance = g.param(store, imp);
            let proposal_centers = g.input(Matrix::filled(2, 3, 5.0));
            let score = g.input(Matrix::filled(2, 1, 0.5));
            let yaw = g.input(Matrix::zeros(2, 1));
            let refinement = g.input(Matrix::zeros(2, 3));
            let head = HeadVars {
                score,
                yaw,
                refinement,
            };
            let cfg = LossConfig {
                weights: LossWeights {
                    importance: 0.0,
                    score: 0.0,
                    center_rot: 0.0,
                },
                offset_grad_into_importance: coupled,
                ..LossConfig::default()
            };
            let target = unit_target(vec![true, true, false]);
            let inputs = LossInputs {
                vote_coords,
                importance: Some(importance),
                proposal_centers,
                head: &head,
            };
            let built = build_loss(&mut g, &inputs, &target, &cfg).unwrap();
            store.zero_grad();
            g.backward(built.total, store).unwrap();
            store.get(imp).grad.clone()
        };
        let detached = run(&mut store, false);
        assert!(detached.as_slice().iter().all(|&v| v == 0.0));
        let coupled = run(&mut store, true);
        // d/dI_0 of (0.125 (1 + I_0) + ...) / 2
        assert!((coupled.get(0, 0) - 0.0625).abs() < 1e-12);
        assert_eq!(coupled.get(2, 0), 0.0);
    }
}
