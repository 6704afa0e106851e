//! Grounding network: encoders feeding the fusion stack. The auxiliary
//! (teacher) network reads ground-truth semantic descriptors; the inference
//! (student) network reads point clouds. Both share one architecture.

use crate::encoders::{point_matrix, semantic_descriptors, PointEncoder, SemanticEncoder, TextEmbedder};
use crate::error::{Error, Result};
use crate::fusion::{compute_pairwise_spatial, FusionStack, FusionState};
use crate::params::{Bound, ParamStore};
use crate::scene::{Scene, Vocabulary};
use crate::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Auxiliary,
    Inference,
}

impl Phase {
    pub fn parse(s: &str) -> Option<Phase> {
        match s {
            "aux" | "auxiliary" => Some(Phase::Auxiliary),
            "inf" | "inference" => Some(Phase::Inference),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Auxiliary => "aux",
            Phase::Inference => "inf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub point_hidden: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_model: 64,
            blocks: 3,
            ffn_mult: 4,
            point_hidden: 32,
            vocab_size: Vocabulary::default().len(),
            max_tokens: 24,
        }
    }
}

#[derive(Clone, Debug)]
enum ObjectEncoder {
    Semantic(SemanticEncoder),
    Points(PointEncoder),
}

#[derive(Clone, Debug)]
pub struct GroundingNet {
    pub phase: Phase,
    pub arch: ArchConfig,
    pub store: ParamStore,
    text: TextEmbedder,
    objects: ObjectEncoder,
    pub stack: FusionStack,
}

/// Per-scene tensors that do not depend on the query.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub descriptors: Arc<Tensor>,
    pub points: Arc<Tensor>,
    pub points_per_object: usize,
    /// Pairwise features from ground-truth centroids (teacher view).
    pub pairs_gt: Arc<Tensor>,
    /// Pairwise features from proposal centroids (student view).
    pub pairs_candidate: Arc<Tensor>,
}

impl SceneInputs {
    pub fn new(scene: &Scene) -> Result<Self> {
        let (points, n_p) = point_matrix(&scene.objects, &scene.room_extent)?;
        Ok(SceneInputs {
            descriptors: Arc::new(semantic_descriptors(&scene.objects, &scene.room_extent)?),
            points: Arc::new(points),
            points_per_object: n_p,
            pairs_gt: Arc::new(compute_pairwise_spatial(&scene.centroids())),
            pairs_candidate: Arc::new(compute_pairwise_spatial(&scene.candidate_centroids())),
        })
    }

    pub fn num_objects(&self) -> usize {
        self.descriptors.rows()
    }
}

impl GroundingNet {
    /// Fresh network with parameters drawn from `seed`.
    pub fn new(phase: Phase, arch: ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = arch.d_model;
        let text = TextEmbedder::new(&mut store, &mut rng, arch.vocab_size, arch.max_tokens, d);
        let objects = match phase {
            Phase::Auxiliary => ObjectEncoder::Semantic(SemanticEncoder::new(&mut store, &mut rng, d)),
            Phase::Inference => {
                ObjectEncoder::Points(PointEncoder::new(&mut store, &mut rng, arch.point_hidden, d))
            }
        };
        let stack = FusionStack::new(&mut store, &mut rng, arch.blocks, d, arch.ffn_mult);
        GroundingNet {
            phase,
            arch,
            store,
            text,
            objects,
            stack,
        }
    }

    /// Network with the given named parameters (architecture must match).
    pub fn from_params(phase: Phase, arch: ArchConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        if arch.blocks == 0 || arch.d_model == 0 {
            return Err(Error::Config("architecture needs at least one block and positive width".into()));
        }
        let mut net = GroundingNet::new(phase, arch, 0);
        net.store.load_values(named)?;
        Ok(net)
    }

    /// Object features entering the fusion stack.
    pub fn encode_objects<'t>(&self, tape: &'t Tape, b: &Bound<'t>, inputs: &SceneInputs) -> Result<crate::tensor::Var<'t>> {
        match &self.objects {
            ObjectEncoder::Semantic(enc) => enc.forward(b, tape.constant_shared(inputs.descriptors.clone())),
            ObjectEncoder::Points(enc) => enc.forward(
                b,
                tape.constant_shared(inputs.points.clone()),
                inputs.points_per_object,
            ),
        }
    }

    pub fn pairs<'a>(&self, inputs: &'a SceneInputs) -> &'a Arc<Tensor> {
        match self.phase {
            Phase::Auxiliary => &inputs.pairs_gt,
            Phase::Inference => &inputs.pairs_candidate,
        }
    }

    /// Full pass for one (scene, query).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        inputs: &SceneInputs,
        tokens: &[usize],
    ) -> Result<FusionState<'t>> {
        let x = self.encode_objects(tape, b, inputs)?;
        let f_txt = self.text.forward(b, tokens)?;
        self.stack.forward(b, x, f_txt, self.pairs(inputs))
    }

    /// Final-stage logits without recording gradients.
    pub fn predict_logits(&self, inputs: &SceneInputs, tokens: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = self.store.bind(&tape, false);
        let state = self.forward(&tape, &b, inputs, tokens)?;
        Ok(state.final_logits().value().data().to_vec())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}
