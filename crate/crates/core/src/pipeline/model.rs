//! The full network: backbone, transformer, voting and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, SeedVars};
use crate::config::{Config, ModelConfig};
use crate::diffcore::{Checkpoint, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::geometry::{Box3D, PointCloud};
use crate::glt::{GltModule, GltOutput};
use crate::head::{assemble_box, HeadOutput, HeadVars, PredictionHead};
use crate::losses::{build_loss, LossGraph, LossInputs, TrainingTarget};
use crate::voting::{select_proposals, ProposalSet, VoteSet, VotingModule};

/// One forward input, all in the search frame.
#[derive(Debug, Clone, Copy)]
pub struct ModelInput<'a> {
    /// Template points in the frame of their own box.
    pub template: &'a PointCloud,
    /// Where the template box would sit in the search frame.
    pub template_box: &'a Box3D,
    pub search: &'a PointCloud,
}

/// Every intermediate of one forward pass.
pub struct ForwardPass {
    pub seeds: SeedVars,
    pub glt: GltOutput,
    pub votes: VoteSet,
    pub proposals: ProposalSet,
    pub head: HeadVars,
}

impl ForwardPass {
    pub fn loss(&self, g: &mut Graph, target: &TrainingTarget, cfg: &crate::losses::LossConfig) -> Result<LossGraph> {
        let inputs = LossInputs {
            vote_coords: self.votes.coords,
            importance: self.glt.importance,
            proposal_centers: self.proposals.centers,
            head: &self.head,
        };
        build_loss(g, &inputs, target, cfg)
    }

    pub fn head_output(&self, g: &Graph) -> HeadOutput {
        HeadOutput::from_graph(g, &self.head)
    }

    pub fn importance(&self, g: &Graph) -> Option<Vec<f64>> {
        self.glt.importance.map(|v| g.value(v).as_slice().to_vec())
    }

    /// The output box, in the search frame.
    pub fn predicted_box(&self, g: &Graph, template_size: [f64; 3]) -> Result<Box3D> {
        assemble_box(&self.head_output(g), &self.proposals.centers_vec(g), template_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub glt: GltModule,
    pub voting: VotingModule,
    pub head: PredictionHead,
}

impl Model {
    /// Builds the model and initializes its parameters from `seed`.
    pub fn init(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(store, config.backbone.clone(), &mut rng)?;
        let glt = GltModule::init(store, config.attention(), config.glt, config.importance_branch, &mut rng)?;
        let d = config.backbone.d;
        let voting = VotingModule::init(store, d, config.norm, &mut rng)?;
        let head = PredictionHead::init(store, d, config.head, config.norm, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            backbone,
            glt,
            voting,
            head,
        })
    }

    /// Rebuilds the model a checkpoint was saved from and loads its values.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Config, Self, ParamStore)> {
        let config = Config::from_json(&ckpt.config_json)
            .map_err(|e| Error::Version(format!("checkpoint config unreadable: {e}")))?;
        let mut store = ParamStore::new();
        let model = Self::init(&config.model, &mut store, config.seed)?;
        ckpt.apply_to(&mut store)?;
        Ok((config, model, store))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: ModelInput) -> Result<ForwardPass> {
        let seeds = self
            .backbone
            .extract_seeds(g, store, input.template, input.template_box, input.search)?;
        let glt = self.glt.forward(g, store, seeds.features, &seeds.coords)?;
        let votes = self.voting.forward(g, store, glt.enhanced, &seeds.coords)?;
        let proposals = select_proposals(g, &votes, self.config.proposals)?;
        let head = self.head.forward(g, store, &proposals)?;
        Ok(ForwardPass {
            seeds,
            glt,
            votes,
            proposals,
            head,
        })
    }

    /// Forward pass without gradients; returns the box in the search frame.
    pub fn predict(&self, store: &ParamStore, input: ModelInput) -> Result<Box3D> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, store, input)?;
        pass.predicted_box(&g, input.template_box.size)
    }
}
