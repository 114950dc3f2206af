//! Offset voting and proposal selection.

use std::rc::Rc;

use rand::Rng;

use crate::diffcore::{Graph, Matrix, Mlp, MlpSpec, NormKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, Point3};

/// Votes on the graph: `f^v = f^gl + Δf`, `c^v = c + Δc`.
#[derive(Debug, Clone, Copy)]
pub struct VoteSet {
    /// `M_s × D`.
    pub features: Var,
    /// `M_s × 3`.
    pub coords: Var,
    /// `M_s × 3` raw coordinate offsets `Δc`.
    pub offsets: Var,
}

impl VoteSet {
    pub fn coords_vec(&self, g: &Graph) -> Vec<Point3> {
        matrix_points(g.value(self.coords))
    }
}

pub fn points_matrix(points: &[Point3]) -> Matrix {
    let mut m = Matrix::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        m.row_mut(i).copy_from_slice(p);
    }
    m
}

pub fn matrix_points(m: &Matrix) -> Vec<Point3> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            [row[0], row[1], row[2]]
        })
        .collect()
}

/// The three-layer voting MLP `(D+3) → (D+3) → (D+3) → (D+3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VotingModule {
    pub d: usize,
    pub mlp: Mlp,
}

impl VotingModule {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, norm: NormKind, rng: &mut R) -> Result<Self> {
        let w = d + 3;
        Ok(Self {
            d,
            mlp: Mlp::init(store, "voting", MlpSpec::new(&[w, w, w, w], norm)?, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enhanced: Var,
        coords: &[Point3],
    ) -> Result<VoteSet> {
        let (rows, cols) = g.shape(enhanced);
        if cols != self.d || rows != coords.len() {
            return Err(Error::shape(
                "vote",
                format!("features {:?} with {} coordinates, D = {}", (rows, cols), coords.len(), self.d),
            ));
        }
        let c = g.input(points_matrix(coords));
        let x = g.concat_cols(&[enhanced, c])?;
        let delta = self.mlp.forward(g, store, x)?;
        let df = g.slice_cols(delta, 0, self.d)?;
        let offsets = g.slice_cols(delta, self.d, self.d + 3)?;
        let features = g.add(enhanced, df)?;
        let coords = g.add(c, offsets)?;
        Ok(VoteSet {
            features,
            coords,
            offsets,
        })
    }
}

/// Proposals picked from the votes by farthest-point sampling.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub source_indices: Vec<usize>,
    /// `K × 3` proposal centers (gathered vote coordinates).
    pub centers: Var,
    /// `K × D` features of the source votes.
    pub features: Var,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }

    pub fn centers_vec(&self, g: &Graph) -> Vec<Point3> {
        matrix_points(g.value(self.centers))
    }
}

/// FPS over vote coordinates, starting from vote 0. Requires `K < M_s`.
pub fn select_proposals(g: &mut Graph, votes: &VoteSet, k: usize) -> Result<ProposalSet> {
    let pts = votes.coords_vec(g);
    if k == 0 || k >= pts.len() {
        return Err(Error::Parameter(format!(
            "proposal count {k} must lie in [1, {})",
            pts.len()
        )));
    }
    let source_indices = geometry::farthest_point_sample(&pts, k, 0)?;
    let idx: Rc<[usize]> = source_indices.as_slice().into();
    let centers = g.gather(votes.coords, idx.clone())?;
    let features = g.gather(votes.features, idx)?;
    Ok(ProposalSet {
        source_indices,
        centers,
        features,
    })
}
