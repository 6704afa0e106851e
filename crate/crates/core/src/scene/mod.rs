//! Procedural multi-object grounding scenes.
//!
//! A scene is a room with axis-aligned, classed and colored objects, each
//! carrying a noisy point sample, plus templated referring queries whose
//! target sets are computed exactly from ground truth.

mod generate;
mod io;
mod query;
pub mod vocab;

pub use generate::{child_seed, generate_dataset, sample_points, GenConfig, SubsetMix};
pub use io::{Dataset, DatasetHeader, HEADER_FILE, SCENES_FILE};
pub use query::{
    classify_subset, render_query, RenderedQuery, Slots, Subset, Template, Unsatisfiable,
    NEAR_RADIUS, RELATION_DEAD_ZONE,
};
pub use vocab::Vocabulary;

use crate::eval::Box3D;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Standard deviation (m) of the proposal jitter applied to candidate boxes.
pub const CANDIDATE_JITTER: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: usize,
    pub class_id: usize,
    pub attribute_id: usize,
    pub centroid: [f64; 3],
    pub size: [f64; 3],
    /// n_p rows of `[x, y, z, r, g, b]`.
    pub points: Vec<[f64; 6]>,
}

impl ObjectRecord {
    pub fn gt_box(&self) -> Box3D {
        Box3D {
            centroid: self.centroid,
            size: self.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub tokens: Vec<usize>,
    pub target_ids: Vec<usize>,
    pub subset: Subset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub room_extent: [f64; 3],
    pub objects: Vec<ObjectRecord>,
    pub queries: Vec<Query>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Scene {
    pub fn centroids(&self) -> Vec<[f64; 3]> {
        self.objects.iter().map(|o| o.centroid).collect()
    }

    /// Proposal boxes: ground-truth boxes with Gaussian jitter on centroid and
    /// extents, seeded from the scene id so they never need to be stored.
    pub fn candidate_boxes(&self) -> Vec<Box3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(fnv1a(&self.scene_id), 0));
        let noise = Normal::new(0.0, CANDIDATE_JITTER).expect("valid sigma");
        self.objects
            .iter()
            .map(|o| {
                let mut b = o.gt_box();
                for k in 0..3 {
                    b.centroid[k] += noise.sample(&mut rng);
                }
                for k in 0..3 {
                    b.size[k] = (b.size[k] + noise.sample(&mut rng)).max(CANDIDATE_JITTER);
                }
                b
            })
            .collect()
    }

    pub fn candidate_centroids(&self) -> Vec<[f64; 3]> {
        self.candidate_boxes().iter().map(|b| b.centroid).collect()
    }
}
