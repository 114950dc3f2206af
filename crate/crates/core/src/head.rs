//! Proposal scoring, yaw regression and center refinement.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Mlp, MlpSpec, NormKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{add3, Box3D, Point3};
use crate::voting::ProposalSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Three independent branches for score, yaw and center refinement.
    Decoupled,
    /// One shared MLP emitting all five outputs.
    Coupled,
}

#[derive(Debug, Clone, PartialEq)]
enum Branches {
    Decoupled { score: Mlp, yaw: Mlp, center: Mlp },
    Coupled(Mlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHead {
    d: usize,
    branches: Branches,
}

/// Head outputs on the graph, one row per proposal.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    /// `K × 1` target-ness probability.
    pub score: Var,
    /// `K × 1` yaw relative to the reference frame.
    pub yaw: Var,
    /// `K × 3` center refinement.
    pub refinement: Var,
}

/// Plain values read back from [`HeadVars`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub scores: Vec<f64>,
    pub yaws: Vec<f64>,
    pub refinements: Vec<Point3>,
}

impl HeadOutput {
    pub fn from_graph(g: &Graph, vars: &HeadVars) -> Self {
        Self {
            scores: g.value(vars.score).as_slice().to_vec(),
            yaws: g.value(vars.yaw).as_slice().to_vec(),
            refinements: crate::voting::matrix_points(g.value(vars.refinement)),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

impl PredictionHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        kind: HeadKind,
        norm: NormKind,
        rng: &mut R,
    ) -> Result<Self> {
        let w = d + 3;
        let mut branch = |name: &str, out: usize| {
            Mlp::init(store, &format!("head.{name}"), MlpSpec::new(&[w, w, w, out], norm)?, rng)
        };
        let branches = match kind {
            HeadKind::Decoupled => Branches::Decoupled {
                score: branch("score", 1)?,
                yaw: branch("yaw", 1)?,
                center: branch("center", 3)?,
            },
            HeadKind::Coupled => Branches::Coupled(branch("coupled", 5)?),
        };
        Ok(Self { d, branches })
    }

    pub fn kind(&self) -> HeadKind {
        match self.branches {
            Branches::Decoupled { .. } => HeadKind::Decoupled,
            Branches::Coupled(_) => HeadKind::Coupled,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, proposals: &ProposalSet) -> Result<HeadVars> {
        if g.shape(proposals.features).1 != self.d {
            return Err(Error::shape(
                "head",
                format!("proposal features {:?}, D = {}", g.shape(proposals.features), self.d),
            ));
        }
        let x = g.concat_cols(&[proposals.features, proposals.centers])?;
        match &self.branches {
            Branches::Decoupled { score, yaw, center } => {
                let logit = score.forward(g, store, x)?;
                Ok(HeadVars {
                    score: g.sigmoid(logit),
                    yaw: yaw.forward(g, store, x)?,
                    refinement: center.forward(g, store, x)?,
                })
            }
            Branches::Coupled(mlp) => {
                let out = mlp.forward(g, store, x)?;
                let logit = g.slice_cols(out, 0, 1)?;
                Ok(HeadVars {
                    score: g.sigmoid(logit),
                    yaw: g.slice_cols(out, 1, 2)?,
                    refinement: g.slice_cols(out, 2, 5)?,
                })
            }
        }
    }
}

/// Index of the highest score; ties go to the lowest index.
pub fn best_proposal(scores: &[f64]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::NonFinite {
                what: format!("proposal score {i}"),
            });
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::Pipeline("no proposals to choose from".into()))
}

/// Builds the output box from the best proposal: refined center, predicted
/// yaw and the template's size.
pub fn assemble_box(output: &HeadOutput, centers: &[Point3], template_size: [f64; 3]) -> Result<Box3D> {
    if centers.len() != output.len() {
        return Err(Error::shape(
            "assemble_box",
            format!("{} centers for {} proposals", centers.len(), output.len()),
        ));
    }
    let best = best_proposal(&output.scores)?;
    Box3D::new(
        add3(centers[best], output.refinements[best]),
        template_size,
        output.yaws[best],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn assembles_the_argmax_proposal() {
        let out = HeadOutput {
            scores: vec![0.1, 0.9, 0.3],
            yaws: vec![0.0, 0.2, 0.0],
            refinements: vec![[0.0; 3], [0.1, 0.0, 0.0], [0.0; 3]],
        };
        let centers = [[0.0; 3], [1.0, 1.0, 0.0], [5.0, 5.0, 5.0]];
        let b = assemble_box(&out, &centers, [2.0, 1.5, 4.0]).unwrap();
        assert!((b.center[0] - 1.1).abs() < 1e-12);
        assert_eq!(b.center[1], 1.0);
        assert_eq!(b.center[2], 0.0);
        assert_eq!(b.yaw, 0.2);
        assert_eq!(b.size, [2.0, 1.5, 4.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(best_proposal(&[0.5, 0.7, 0.7, 0.1]).unwrap(), 1);
        assert!(matches!(best_proposal(&[]), Err(Error::Pipeline(_))));
        assert!(matches!(best_proposal(&[0.1, f64::NAN]), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn monotone_rescaling_keeps_the_choice() {
        let scores = [0.2, 0.8, 0.55, 0.8, 0.01];
        let squashed: Vec<f64> = scores.iter().map(|s: &f64| (3.0 * s).tanh() - 7.0).collect();
        assert_eq!(best_proposal(&scores).unwrap(), best_proposal(&squashed).unwrap());
    }

    fn proposals(g: &mut Graph, k: usize, d: usize) -> ProposalSet {
        let features = g.input(Matrix::filled(k, d, 0.3));
        let centers = g.input(Matrix::from_vec(k, 3, (0..k * 3).map(|v| v as f64 * 0.1).collect()).unwrap());
        ProposalSet {
            source_indices: (0..k).collect::<Vec<_>>(),
            centers,
            features,
        }
    }

    #[test]
    fn decoupled_branches_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let head = PredictionHead::init(&mut store, 4, HeadKind::Decoupled, NormKind::Layer, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = proposals(&mut g, 5, 4);
        let vars = head.forward(&mut g, &store, &p).unwrap();
        assert_eq!(g.shape(vars.score), (5, 1));
        assert_eq!(g.shape(vars.yaw), (5, 1));
        assert_eq!(g.shape(vars.refinement), (5, 3));

        // the yaw loss alone must leave score and center branches untouched
        let loss = g.sum(vars.yaw);
        let grads = g.backward(loss, &mut store).unwrap();
        assert!(grads.visited > 0);
        for p in store.iter() {
            let touched = p.grad.as_slice().iter().any(|&v| v != 0.0);
            if p.name.starts_with("head.yaw") && p.name.ends_with(".weight") {
                assert!(touched, "{} got no gradient", p.name);
            }
            if p.name.starts_with("head.score") || p.name.starts_with("head.center") {
                assert!(!touched, "{} should be independent of yaw", p.name);
            }
        }
    }

    #[test]
    fn coupled_head_shares_one_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let head = PredictionHead::init(&mut store, 4, HeadKind::Coupled, NormKind::Layer, &mut rng).unwrap();
        assert_eq!(head.kind(), HeadKind::Coupled);
        assert!(store.iter().all(|p| p.name.starts_with("head.coupled")));
        let mut g = Graph::new();
        let p = proposals(&mut g, 3, 4);
        let vars = head.forward(&mut g, &store, &p).unwrap();
        let out = HeadOutput::from_graph(&g, &vars);
        assert_eq!(out.len(), 3);
        assert!(out.scores.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn head_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let head = PredictionHead::init(&mut store, 4, HeadKind::Decoupled, NormKind::Layer, &mut rng).unwrap();
        let mut g = Graph::new();
        let features = g.input(Matrix::zeros(2, 5));
        let centers = g.input(Matrix::zeros(2, 3));
        let p = ProposalSet {
            source_indices: vec![0, 1],
            centers,
            features,
        };
        assert!(matches!(head.forward(&mut g, &store, &p), Err(Error::Shape { .. })));
    }
}
