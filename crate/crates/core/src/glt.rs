//! Global-local transformer over seed points.
//!
//! Each block gathers a neighbor set per seed (a stride-sampled view of the
//! whole seed cloud for the global block, the nearest seeds for the local
//! block), encodes relative positions, and aggregates neighbor values with
//! vector attention: the attention weight is a per-channel vector, normalized
//! over the neighbor axis. A residual connection and layer normalization
//! close each block.
//!
//! Tensors shaped `M × k × C` are stored as `(M·k) × C` matrices where row
//! `i·k + j` holds neighbor `j` of anchor `i`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Linear, Matrix, Mlp, MlpSpec, Norm, NormKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, sub3, DistanceMatrix, NeighborIndex, Point3};

/// Seed features `f_i` paired with seed coordinates `c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSet {
    pub features: Matrix,
    pub coords: Vec<Point3>,
}

impl SeedSet {
    pub fn new(features: Matrix, coords: Vec<Point3>) -> Result<Self> {
        if features.rows() != coords.len() {
            return Err(Error::Input(format!(
                "{} feature rows for {} seed coordinates",
                features.rows(),
                coords.len()
            )));
        }
        geometry::check_finite(&coords)?;
        if !features.is_finite() {
            return Err(Error::Input("non-finite seed feature".into()));
        }
        Ok(Self { features, coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Reorders seeds so that new row `r` is old row `perm[r]`.
    pub fn permuted(&self, perm: &[usize]) -> SeedSet {
        SeedSet {
            features: self.features.select_rows(perm),
            coords: perm.iter().map(|&i| self.coords[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Seed feature width.
    pub d: usize,
    /// Latent attention width.
    pub c: usize,
    /// Sparse sample count of the global block.
    pub m: usize,
    /// Neighbor count of the local block.
    pub n: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d: 128,
            c: 64,
            m: 16,
            n: 16,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, seeds: usize) -> Result<()> {
        if self.d == 0 || self.c == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::Config(format!("attention widths must be positive: {self:?}")));
        }
        if self.m > seeds || self.n > seeds {
            return Err(Error::Config(format!(
                "m={} and n={} must not exceed the seed count {seeds}",
                self.m, self.n
            )));
        }
        Ok(())
    }
}

/// Per-seed importance in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector(pub Vec<f64>);

/// Which transformer blocks run before voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GltMode {
    /// Both blocks are identity pass-throughs.
    Identity,
    /// Global block only.
    Global,
    /// Global block followed by the local block.
    GlobalLocal,
}

/// Relative offsets `c_i - c_j` for every (anchor, neighbor) pair.
pub fn relative_offsets(coords: &[Point3], neighbors: &NeighborIndex) -> Result<Matrix> {
    if neighbors.rows() != coords.len() {
        return Err(Error::shape(
            "position_encoding",
            format!("{} neighbor rows for {} seeds", neighbors.rows(), coords.len()),
        ));
    }
    let mut rel = Matrix::zeros(coords.len() * neighbors.k, 3);
    for i in 0..coords.len() {
        for (j, &nb) in neighbors.row(i).iter().enumerate() {
            if nb >= coords.len() {
                return Err(Error::shape("position_encoding", format!("neighbor {nb} out of range")));
            }
            rel.row_mut(i * neighbors.k + j)
                .copy_from_slice(&sub3(coords[i], coords[nb]));
        }
    }
    Ok(rel)
}

/// Encodes relative neighbor offsets through a two-layer ReLU MLP (`3 → C → C`).
pub fn position_encoding(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &Mlp,
    coords: &[Point3],
    neighbors: &NeighborIndex,
) -> Result<Var> {
    if encoder.spec().input != 3 {
        return Err(Error::shape("position_encoding", "encoder must take 3 inputs"));
    }
    let rel = g.input(relative_offsets(coords, neighbors)?);
    encoder.forward(g, store, rel)
}

/// Projections and weight MLP of one vector-attention operator.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `C → C → C` ReLU MLP producing per-channel logits.
    pub weight_mlp: Mlp,
}

pub struct AttentionOutput {
    /// `M × C` aggregated values.
    pub output: Var,
    /// `(M·k) × C` attention weights.
    pub weights: Var,
}

impl VectorAttention {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            query: Linear::init(store, &format!("{prefix}.query"), d, c, true, rng)?,
            key: Linear::init(store, &format!("{prefix}.key"), d, c, true, rng)?,
            value: Linear::init(store, &format!("{prefix}.value"), d, c, true, rng)?,
            weight_mlp: Mlp::init(
                store,
                &format!("{prefix}.weight_mlp"),
                MlpSpec::new(&[c, c, c], NormKind::None)?,
                rng,
            )?,
        })
    }

    /// `out_i = Σ_j softmax_j(φ(q_i − k_j + p_ij)) ⊙ (v_j + p_ij)`, the
    /// softmax running over the neighbor axis separately for each channel.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        neighbors: &NeighborIndex,
        pos: Var,
    ) -> Result<AttentionOutput> {
        let (rows, _) = g.shape(features);
        let k = neighbors.k;
        if neighbors.rows() != rows {
            return Err(Error::shape(
                "vector_attention",
                format!("{} neighbor rows for {rows} feature rows", neighbors.rows()),
            ));
        }
        if g.shape(pos).0 != rows * k {
            return Err(Error::shape(
                "vector_attention",
                format!("position encoding {:?} for {rows}x{k} pairs", g.shape(pos)),
            ));
        }
        let idx: Rc<[usize]> = neighbors.indices.as_slice().into();
        let q = self.query.forward(g, store, features)?;
        let kf = self.key.forward(g, store, features)?;
        let vf = self.value.forward(g, store, features)?;
        let q = g.repeat_rows(q, k)?;
        let kf = g.gather(kf, idx.clone())?;
        let vf = g.gather(vf, idx)?;
        let rel = g.sub(q, kf)?;
        let rel = g.add(rel, pos)?;
        let logits = self.weight_mlp.forward(g, store, rel)?;
        let weights = g.group_softmax(logits, k)?;
        let vals = g.add(vf, pos)?;
        let weighted = g.mul(weights, vals)?;
        let output = g.group_sum(weighted, k)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Stride-sampled sorted rows (global view).
    Sparse(usize),
    /// Nearest neighbors (local patch).
    Knn(usize),
}

impl Sampling {
    pub fn neighbors(&self, dist: &DistanceMatrix) -> Result<NeighborIndex> {
        match *self {
            Sampling::Sparse(m) => geometry::sparse_sample(dist, m),
            Sampling::Knn(n) => geometry::knn_sample(dist, n),
        }
    }
}

/// One transformer block: position encoding, vector attention, a `C → D`
/// feed-forward map, residual and layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub sampling: Sampling,
    pub position: Mlp,
    pub attention: VectorAttention,
    pub ffn: Linear,
    pub norm: Norm,
}

impl TransformerBlock {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sampling: Sampling,
        d: usize,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            sampling,
            position: Mlp::init(
                store,
                &format!("{prefix}.position"),
                MlpSpec::new(&[3, c, c], NormKind::None)?,
                rng,
            )?,
            attention: VectorAttention::init(store, &format!("{prefix}.attention"), d, c, rng)?,
            ffn: Linear::init(store, &format!("{prefix}.ffn"), c, d, true, rng)?,
            norm: Norm::init(store, &format!("{prefix}.norm"), NormKind::Layer, d)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        coords: &[Point3],
        dist: &DistanceMatrix,
    ) -> Result<Var> {
        if dist.len() != coords.len() || g.shape(features).0 != coords.len() {
            return Err(Error::shape(
                "transformer_block",
                format!(
                    "{} feature rows, {} coords, {} distance rows",
                    g.shape(features).0,
                    coords.len(),
                    dist.len()
                ),
            ));
        }
        let neighbors = self.sampling.neighbors(dist)?;
        let pos = position_encoding(g, store, &self.position, coords, &neighbors)?;
        let attended = self
            .attention
            .forward(g, store, features, &neighbors, pos)?
            .output;
        let projected = self.ffn.forward(g, store, attended)?;
        let residual = g.add(projected, features)?;
        self.norm.forward(g, store, residual)
    }
}

/// Three-layer MLP `D → D → D/2 → 1` with a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceBranch {
    pub mlp: Mlp,
}

impl ImportanceBranch {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::new(&[d, d, (d / 2).max(1), 1], NormKind::None)?;
        Ok(Self {
            mlp: Mlp::init(store, prefix, spec, rng)?,
        })
    }

    /// `M_s × 1` importance probabilities.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, global: Var) -> Result<Var> {
        let logits = self.mlp.forward(g, store, global)?;
        Ok(g.sigmoid(logits))
    }
}

/// The cascaded global and local blocks plus the importance branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GltModule {
    pub config: AttentionConfig,
    pub global: Option<TransformerBlock>,
    pub local: Option<TransformerBlock>,
    pub importance: Option<ImportanceBranch>,
}

pub struct GltOutput {
    /// `f^g`, the global block output (or the input features in identity mode).
    pub global: Var,
    /// `f^gl`, the features handed to voting.
    pub enhanced: Var,
    /// `M_s × 1` importance, when the branch exists.
    pub importance: Option<Var>,
}

impl GltModule {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        config: AttentionConfig,
        mode: GltMode,
        with_importance: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let AttentionConfig { d, c, m, n } = config;
        if d == 0 || c == 0 || m == 0 || n == 0 {
            return Err(Error::Config(format!("attention widths must be positive: {config:?}")));
        }
        if with_importance && mode == GltMode::Identity {
            return Err(Error::Config(
                "the importance branch sits on the global block; it needs a non-identity GLT".into(),
            ));
        }
        let global = match mode {
            GltMode::Identity => None,
            _ => Some(TransformerBlock::init(store, "glt.global", Sampling::Sparse(m), d, c, rng)?),
        };
        let local = match mode {
            GltMode::GlobalLocal => Some(TransformerBlock::init(
                store,
                "glt.local",
                Sampling::Knn(n),
                d,
                c,
                rng,
            )?),
            _ => None,
        };
        let importance = if with_importance {
            Some(ImportanceBranch::init(store, "glt.importance", d, rng)?)
        } else {
            None
        };
        Ok(Self {
            config,
            global,
            local,
            importance,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        coords: &[Point3],
    ) -> Result<GltOutput> {
        if g.shape(features).1 != self.config.d {
            return Err(Error::shape(
                "glt",
                format!("features {:?}, expected width {}", g.shape(features), self.config.d),
            ));
        }
        if self.global.is_none() && self.local.is_none() {
            return Ok(GltOutput {
                global: features,
                enhanced: features,
                importance: None,
            });
        }
        self.config.validate(coords.len())?;
        // one distance matrix serves both blocks: coordinates do not change
        let dist = geometry::distance_matrix(coords)?;
        let global = match &self.global {
            Some(b) => b.forward(g, store, features, coords, &dist)?,
            None => features,
        };
        let importance = match &self.importance {
            Some(branch) => Some(branch.forward(g, store, global)?),
            None => None,
        };
        let enhanced = match &self.local {
            Some(b) => b.forward(g, store, global, coords, &dist)?,
            None => global,
        };
        Ok(GltOutput {
            global,
            enhanced,
            importance,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_seeds(rng: &mut ChaCha8Rng, m: usize, d: usize) -> SeedSet {
        let feats = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coords = (0..m)
            .map(|_| {
                [
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        SeedSet::new(Matrix::from_vec(m, d, feats).unwrap(), coords).unwrap()
    }

    #[test]
    fn zero_bias_encoder_maps_self_offset_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = Mlp::init(&mut store, "pos", MlpSpec::new(&[3, 8, 8], NormKind::None).unwrap(), &mut rng)
            .unwrap();
        store.zero_values("pos.0.bias");
        store.zero_values("pos.1.bias");
        let seeds = random_seeds(&mut rng, 10, 4);
        let dist = geometry::distance_matrix(&seeds.coords).unwrap();
        let nb = geometry::knn_sample(&dist, 3).unwrap();
        let mut g = Graph::new();
        let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, &nb).unwrap();
        for i in 0..10 {
            // neighbor 0 is the anchor itself
            assert!(g.value(pos).row(i * 3).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn position_encoding_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = Mlp::init(&mut store, "pos", MlpSpec::new(&[3, 8, 8], NormKind::None).unwrap(), &mut rng)
            .unwrap();
        let seeds = random_seeds(&mut rng, 12, 4);
        let dist = geometry::distance_matrix(&seeds.coords).unwrap();
        let nb = geometry::sparse_sample(&dist, 4).unwrap();
        // offsets exactly representable keep the comparison bitwise
        let shifted: Vec<Point3> = seeds.coords.iter().map(|c| [c[0] + 8.0, c[1] - 4.0, c[2] + 2.0]).collect();
        let mut g = Graph::new();
        let a = position_encoding(&mut g, &store, &enc, &seeds.coords, &nb).unwrap();
        let b = position_encoding(&mut g, &store, &enc, &shifted, &nb).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    fn attention_fixture(k: usize) -> (ParamStore, VectorAttention, Mlp, SeedSet, NeighborIndex) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let attn = VectorAttention::init(&mut store, "a", 5, 6, &mut rng).unwrap();
        let enc = Mlp::init(&mut store, "p", MlpSpec::new(&[3, 6, 6], NormKind::None).unwrap(), &mut rng)
            .unwrap();
        let seeds = random_seeds(&mut rng, 9, 5);
        let dist = geometry::distance_matrix(&seeds.coords).unwrap();
        let nb = geometry::knn_sample(&dist, k).unwrap();
        (store, attn, enc, seeds, nb)
    }

    #[test]
    fn singleton_neighbor_returns_value_plus_position() {
        let (store, attn, enc, seeds, nb) = attention_fixture(1);
        let mut g = Graph::new();
        let f = g.input(seeds.features.clone());
        let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, &nb).unwrap();
        let out = attn.forward(&mut g, &store, f, &nb, pos).unwrap();
        let v = attn.value.forward(&mut g, &store, f).unwrap();
        let want = g.add(v, pos).unwrap();
        assert_eq!(g.value(out.output), g.value(want));
    }

    #[test]
    fn attention_weights_sum_to_one_per_channel() {
        let (store, attn, enc, seeds, nb) = attention_fixture(4);
        let mut g = Graph::new();
        let f = g.input(seeds.features.clone());
        let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, &nb).unwrap();
        let out = attn.forward(&mut g, &store, f, &nb, pos).unwrap();
        let w = g.value(out.weights);
        for i in 0..9 {
            for c in 0..6 {
                let s: f64 = (0..4).map(|j| w.get(i * 4 + j, c)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn neighbor_order_does_not_matter() {
        let (store, attn, enc, seeds, nb) = attention_fixture(4);
        let mut reversed = nb.clone();
        for i in 0..nb.rows() {
            reversed.indices[i * 4..(i + 1) * 4].reverse();
        }
        let run = |nb: &NeighborIndex| {
            let mut g = Graph::new();
            let f = g.input(seeds.features.clone());
            let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, nb).unwrap();
            let out = attn.forward(&mut g, &store, f, nb, pos).unwrap();
            g.value(out.output).clone()
        };
        assert!(run(&nb).max_abs_diff(&run(&reversed)) <= 1e-12);
    }

    #[test]
    fn duplicate_neighbors_match_single() {
        let (store, attn, enc, seeds, nb1) = attention_fixture(1);
        let dup = NeighborIndex {
            indices: nb1.indices.iter().flat_map(|&i| [i, i, i]).collect(),
            k: 3,
        };
        let run = |nb: &NeighborIndex| {
            let mut g = Graph::new();
            let f = g.input(seeds.features.clone());
            let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, nb).unwrap();
            let out = attn.forward(&mut g, &store, f, nb, pos).unwrap();
            g.value(out.output).clone()
        };
        assert!(run(&nb1).max_abs_diff(&run(&dup)) <= 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_rows() {
        let (store, attn, enc, seeds, nb) = attention_fixture(2);
        let mut g = Graph::new();
        let f = g.input(seeds.features.select_rows(&[0, 1, 2]));
        let pos = position_encoding(&mut g, &store, &enc, &seeds.coords, &nb).unwrap();
        assert!(matches!(
            attn.forward(&mut g, &store, f, &nb, pos),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn importance_of_zero_branch_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let branch = ImportanceBranch::init(&mut store, "imp", 6, &mut rng).unwrap();
        store.zero_values("imp");
        for m in [1usize, 7, 20] {
            let mut g = Graph::new();
            let f = g.input(Matrix::filled(m, 6, 0.3));
            let i = branch.forward(&mut g, &store, f).unwrap();
            assert_eq!(g.shape(i), (m, 1));
            assert!(g.value(i).as_slice().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn zero_attention_reduces_to_normed_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let block = TransformerBlock::init(&mut store, "b", Sampling::Sparse(4), 6, 4, &mut rng).unwrap();
        store.zero_values("b.ffn");
        let seeds = random_seeds(&mut rng, 16, 6);
        let dist = geometry::distance_matrix(&seeds.coords).unwrap();
        let mut g = Graph::new();
        let f = g.input(seeds.features.clone());
        let out = block.forward(&mut g, &store, f, &seeds.coords, &dist).unwrap();
        let plain = block.norm.forward(&mut g, &store, f).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(plain)) < 1e-12);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { d: 4, c: 4, m: 4, n: 3 };
        let glt = GltModule::init(&mut store, cfg, GltMode::GlobalLocal, true, &mut rng).unwrap();
        let seeds = random_seeds(&mut rng, 12, 4);
        let proj: Vec<f64> = (0..12 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let proj = Matrix::from_vec(12, 4, proj).unwrap();
        let report = check_gradients(
            &mut store,
            Tolerance::PER_OP,
            |g, store| {
                let f = g.input(seeds.features.clone());
                let out = glt.forward(g, store, f, &seeds.coords)?;
                let w = g.input(proj.clone());
                let y = g.mul(out.enhanced, w)?;
                let s = g.sum(y);
                let imp = g.sum(out.importance.unwrap());
                g.add(s, imp)
            },
            |_| true,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", &report.mismatches[..report.mismatches.len().min(5)]);
        assert_eq!(report.checked, store.num_scalars());
    }
}
