//! Seed extraction: a single set-abstraction stage shared by template and
//! search clouds, followed by a box-aware correlation and farthest-point
//! sampling.
//!
//! This is a deliberately small stand-in for a multi-stage point backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::nn::LayerSpec;
use crate::diffcore::{Activation, Graph, Linear, Matrix, Mlp, MlpSpec, NormKind, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, norm3, sub3, Box3D, Point3, PointCloud};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Template points fed to the model.
    pub n_t: usize,
    /// Search points fed to the model.
    pub n_s: usize,
    /// Seeds kept after farthest-point sampling.
    pub m_s: usize,
    /// Seed feature width.
    pub d: usize,
    /// Neighbors grouped around each point by the set-abstraction stage.
    pub group_k: usize,
    /// Widths of the shared point MLP.
    pub point_mlp: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_t: 512,
            n_s: 1024,
            m_s: 128,
            d: 128,
            group_k: 16,
            point_mlp: vec![32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_s == 0 || self.m_s == 0 || self.d == 0 || self.group_k == 0 {
            return Err(Error::Config(format!("backbone sizes must be positive: {self:?}")));
        }
        if self.m_s > self.n_s {
            return Err(Error::Config(format!("M_s = {} exceeds N_s = {}", self.m_s, self.n_s)));
        }
        if self.point_mlp.is_empty() || self.point_mlp.contains(&0) {
            return Err(Error::Config(format!("bad point MLP widths {:?}", self.point_mlp)));
        }
        Ok(())
    }

    fn point_feature_width(&self) -> usize {
        *self.point_mlp.last().expect("validated")
    }
}

/// Width of the box-prior vector appended to every search feature.
pub const BOX_PRIOR_WIDTH: usize = 9;

/// Offset to the box center in the box frame, then the signed distances to
/// the six extent planes (`+x, -x, +y, -y, +z, -z`, positive inside).
pub fn box_prior(p: Point3, bbox: &Box3D) -> [f64; BOX_PRIOR_WIDTH] {
    let q = bbox.to_local(p);
    let h = bbox.half_extents();
    [
        q[0],
        q[1],
        q[2],
        h[0] - q[0],
        h[0] + q[0],
        h[1] - q[1],
        h[1] + q[1],
        h[2] - q[2],
        h[2] + q[2],
    ]
}

/// Index of the point nearest `anchor`; ties broken by lexicographic
/// coordinates so the choice does not depend on point order.
pub fn nearest_point(coords: &[Point3], anchor: Point3) -> Option<usize> {
    let key = |i: usize| (norm3(sub3(coords[i], anchor)), coords[i]);
    (0..coords.len()).min_by(|&a, &b| {
        let (da, pa) = key(a);
        let (db, pb) = key(b);
        da.total_cmp(&db)
            .then_with(|| pa[0].total_cmp(&pb[0]))
            .then_with(|| pa[1].total_cmp(&pb[1]))
            .then_with(|| pa[2].total_cmp(&pb[2]))
    })
}

/// Seeds on the graph.
pub struct SeedVars {
    /// `M_s × D`.
    pub features: Var,
    pub coords: Vec<Point3>,
    /// Index of each seed in the search cloud.
    pub search_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    point_mlp: Mlp,
    projection: Linear,
}

impl Backbone {
    pub fn init<R: Rng>(store: &mut ParamStore, config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        // a shared PointNet-style MLP: ReLU after every layer, max-pooled later
        let spec = MlpSpec {
            input: 3,
            layers: config
                .point_mlp
                .iter()
                .map(|&width| LayerSpec {
                    width,
                    norm: NormKind::None,
                    activation: Activation::Relu,
                })
                .collect(),
        };
        let point_mlp = Mlp::init(store, "backbone.point", spec, rng)?;
        let h = config.point_feature_width();
        let projection = Linear::init(store, "backbone.proj", 2 * h + BOX_PRIOR_WIDTH, config.d, true, rng)?;
        Ok(Self {
            config,
            point_mlp,
            projection,
        })
    }

    /// Max-pooled local features around each query, grouped from `cloud`.
    fn local_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cloud: &[Point3],
        queries: &[Point3],
    ) -> Result<Var> {
        let k = self.config.group_k.min(cloud.len());
        let groups = geometry::knn_query(cloud, queries, k)?;
        let mut rel = Matrix::zeros(queries.len() * k, 3);
        for (i, q) in queries.iter().enumerate() {
            for (j, &nb) in groups.row(i).iter().enumerate() {
                rel.row_mut(i * k + j).copy_from_slice(&sub3(cloud[nb], *q));
            }
        }
        let x = g.input(rel);
        let h = self.point_mlp.forward(g, store, x)?;
        g.group_max(h, k)
    }

    /// Template summary: max over all template points of their local features.
    pub fn template_feature(&self, g: &mut Graph, store: &ParamStore, template: &PointCloud) -> Result<Var> {
        if template.is_empty() {
            return Err(Error::Input("empty template cloud".into()));
        }
        let local = self.local_features(g, store, &template.coords, &template.coords)?;
        g.group_max(local, template.len())
    }

    /// `template_box` must be expressed in the search cloud's frame.
    pub fn extract_seeds(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        template: &PointCloud,
        template_box: &Box3D,
        search: &PointCloud,
    ) -> Result<SeedVars> {
        let m_s = self.config.m_s;
        if search.len() < m_s {
            return Err(Error::Input(format!(
                "search region has {} points, {m_s} seeds requested",
                search.len()
            )));
        }
        let start = nearest_point(&search.coords, template_box.center).expect("non-empty search");
        let search_indices = geometry::farthest_point_sample(&search.coords, m_s, start)?;
        let coords: Vec<Point3> = search_indices.iter().map(|&i| search.coords[i]).collect();

        let local = self.local_features(g, store, &search.coords, &coords)?;
        let global = self.template_feature(g, store, template)?;
        let global = g.repeat_rows(global, m_s)?;
        let mut prior = Matrix::zeros(m_s, BOX_PRIOR_WIDTH);
        for (r, &p) in coords.iter().enumerate() {
            prior.row_mut(r).copy_from_slice(&box_prior(p, template_box));
        }
        let prior = g.input(prior);
        let joined = g.concat_cols(&[local, global, prior])?;
        let features = self.projection.forward(g, store, joined)?;
        Ok(SeedVars {
            features,
            coords,
            search_indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{check_gradients, Tolerance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            n_t: 20,
            n_s: 40,
            m_s: 12,
            d: 6,
            group_k: 4,
            point_mlp: vec![5, 6],
        }
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(-spread..spread),
                        rng.random_range(-spread..spread),
                        rng.random_range(-0.5..0.5),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn setup(seed: u64) -> (ParamStore, Backbone, PointCloud, PointCloud, Box3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bb = Backbone::init(&mut store, small_config(), &mut rng).unwrap();
        let template = cloud(&mut rng, 20, 1.0);
        let search = cloud(&mut rng, 40, 2.0);
        let tbox = Box3D::new([0.0; 3], [1.5, 1.0, 2.0], 0.0).unwrap();
        (store, bb, template, search, tbox)
    }

    #[test]
    fn box_prior_values() {
        let b = Box3D::new([1.0, 0.0, 0.0], [2.0, 1.0, 4.0], 0.0).unwrap();
        // local x spans l = 4, y spans w = 2, z spans h = 1
        let p = box_prior([2.0, 0.5, 0.25], &b);
        assert_eq!(p, [1.0, 0.5, 0.25, 1.0, 3.0, 0.5, 1.5, 0.25, 0.75]);
    }

    #[test]
    fn seeds_are_deterministic_and_finite() {
        let (store, bb, template, search, tbox) = setup(1);
        let run = || {
            let mut g = Graph::new();
            let s = bb.extract_seeds(&mut g, &store, &template, &tbox, &search).unwrap();
            (g.value(s.features).clone(), s.coords)
        };
        let (fa, ca) = run();
        let (fb, cb) = run();
        assert!(fa.is_finite());
        assert_eq!(fa, fb);
        assert_eq!(ca, cb);
        assert_eq!(fa.shape(), (12, 6));
        for c in &ca {
            assert!(search.coords.contains(c));
        }
    }

    #[test]
    fn search_order_does_not_change_the_seed_set() {
        let (store, bb, template, search, tbox) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut perm: Vec<usize> = (0..search.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = PointCloud::new(perm.iter().map(|&i| search.coords[i]).collect()).unwrap();
        let mut g = Graph::new();
        let a = bb.extract_seeds(&mut g, &store, &template, &tbox, &search).unwrap();
        let b = bb.extract_seeds(&mut g, &store, &template, &tbox, &shuffled).unwrap();
        assert_eq!(a.coords, b.coords);
        assert!(g.value(a.features).max_abs_diff(g.value(b.features)) < 1e-12);
    }

    #[test]
    fn template_summary_ignores_point_order() {
        let (store, bb, template, _, _) = setup(3);
        let mut rev = template.coords.clone();
        rev.reverse();
        let rev = PointCloud::new(rev).unwrap();
        let mut g = Graph::new();
        let a = bb.template_feature(&mut g, &store, &template).unwrap();
        let b = bb.template_feature(&mut g, &store, &rev).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn too_few_search_points() {
        let (store, bb, template, _, tbox) = setup(4);
        let tiny = PointCloud::new(vec![[0.0; 3]; 5]).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            bb.extract_seeds(&mut g, &store, &template, &tbox, &tiny),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn backbone_gradients_match_finite_differences() {
        let (mut store, bb, template, search, tbox) = setup(5);
        let report = check_gradients(
            &mut store,
            Tolerance::PER_OP,
            |g, store| {
                let s = bb.extract_seeds(g, store, &template, &tbox, &search)?;
                let sq = g.mul(s.features, s.features)?;
                let total = g.sum(sq);
                Ok(g.scale(total, 0.01))
            },
            |_| true,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.mismatches.first());
    }

    #[test]
    fn nearest_point_ties_use_coordinates() {
        let pts = [[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        assert_eq!(nearest_point(&pts, [0.0; 3]), Some(1));
        let swapped = [pts[2], pts[0], pts[1]];
        assert_eq!(nearest_point(&swapped, [0.0; 3]), Some(2));
        assert_eq!(nearest_point(&[], [0.0; 3]), None);
    }
}
