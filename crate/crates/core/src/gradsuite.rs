//! Central-difference verification of every primitive, every loss and the
//! complete inference-phase objective.

use crate::error::Result;
use crate::losses::{
    alignment_loss_attn, alignment_loss_hidden, distinctiveness_loss, grounding_loss, hierarchical_loss,
    pairwise_contrastive, siamese_contrastive, LossConfig, StageTargets,
};
use crate::model::{ArchConfig, GroundingNet, Phase, SceneInputs};
use crate::params::Bound;
use crate::scene::{sample_points, ObjectRecord, Query, Scene, Subset, Vocabulary};
use crate::tensor::{grad_check_many, Tape, Tensor, Var};
use crate::trainer::{sample_objective, TeacherOutputs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Scalar test function over a list of input tensors.
pub type CheckFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync>;
/// Draws one random input set.
pub type SampleFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync>;

/// One named gradient check.
pub struct Check {
    pub name: String,
    pub f: CheckFn,
    pub sample: SampleFn,
    /// Random input draws (each checked on every coordinate unless
    /// `coords` is set).
    pub points: usize,
    pub coords: Option<Vec<(usize, usize)>>,
}

impl Check {
    pub fn new(
        name: &str,
        points: usize,
        sample: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Send + Sync + 'static,
        f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Send + Sync + 'static,
    ) -> Self {
        Check {
            name: name.to_string(),
            f: Box::new(f),
            sample: Box::new(sample),
            points,
            coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub max_rel_error: f64,
    pub points: usize,
    pub coords: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect()
    }

    /// `op,max_rel_error,points,coords,status` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("op,max_rel_error,points,coords,status\n");
        for o in &self.ops {
            s.push_str(&format!(
                "{},{:.3e},{},{},{}\n",
                o.name,
                o.max_rel_error,
                o.points,
                o.coords,
                if o.passed { "pass" } else { "FAIL" }
            ));
        }
        s
    }
}

pub fn run_checks(checks: &[Check], seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut ops = Vec::with_capacity(checks.len());
    for (ci, c) in checks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::scene::child_seed(seed, ci as u64));
        let mut worst = 0.0f64;
        let mut coords = 0;
        for _ in 0..c.points {
            let inputs = (c.sample)(&mut rng);
            let r = grad_check_many(|t, xs| (c.f)(t, xs), &inputs, EPS, c.coords.as_deref())?;
            coords += r.coords_checked;
            worst = if r.max_rel_error.is_nan() { f64::NAN } else { worst.max(r.max_rel_error) };
        }
        ops.push(OpReport {
            name: c.name.clone(),
            max_rel_error: worst,
            points: c.points,
            coords,
            passed: worst.is_finite() && worst < tolerance,
        });
    }
    Ok(SuiteReport { tolerance, ops })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Deterministic non-trivial constant for inputs the op treats as fixed.
fn fixed(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect()).expect("shape")
}

/// Contracts a non-scalar output with fixed weights so every entry of the
/// adjoint is exercised.
fn weigh<'t>(tape: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
    let shape = y.shape();
    let n = y.value().len();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect())?;
    Ok(y.mul(tape.constant(w))?.sum())
}

fn primitive_checks(points: usize) -> Vec<Check> {
    let m = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.5, 1.5);
    vec![
        Check::new("matmul", points, move |r| vec![m(r, &[3, 4]), m(r, &[4, 2])], |t, x| weigh(t, x[0].matmul(x[1])?)),
        Check::new("transpose", points, move |r| vec![m(r, &[3, 4])], |t, x| weigh(t, x[0].transpose())),
        Check::new("add", points, move |r| vec![m(r, &[2, 3]), m(r, &[2, 3])], |t, x| weigh(t, x[0].add(x[1])?)),
        Check::new("sub", points, move |r| vec![m(r, &[2, 3]), m(r, &[2, 3])], |t, x| weigh(t, x[0].sub(x[1])?)),
        Check::new("mul", points, move |r| vec![m(r, &[2, 3]), m(r, &[2, 3])], |t, x| weigh(t, x[0].mul(x[1])?)),
        Check::new("add_bcast", points, move |r| vec![m(r, &[3, 4]), m(r, &[1, 4]), m(r, &[1, 1])], |t, x| {
            weigh(t, x[0].add_bcast(x[1])?.add_bcast(x[2])?)
        }),
        Check::new("mul_bcast", points, move |r| vec![m(r, &[3, 4]), m(r, &[1, 4]), m(r, &[1, 1])], |t, x| {
            weigh(t, x[0].mul_bcast(x[1])?.mul_bcast(x[2])?)
        }),
        Check::new("scale", points, move |r| vec![m(r, &[2, 3])], |t, x| weigh(t, x[0].scale(-1.7))),
        Check::new("add_const", points, move |r| vec![m(r, &[2, 3])], |t, x| weigh(t, x[0].add_const(0.4).square())),
        Check::new("square", points, move |r| vec![m(r, &[2, 3])], |t, x| weigh(t, x[0].square())),
        Check::new("sigmoid", points, move |r| vec![uniform(r, &[2, 3], -6.0, 6.0)], |t, x| weigh(t, x[0].sigmoid())),
        Check::new("relu", points, |r| vec![away_from_zero(r, &[2, 3])], |t, x| weigh(t, x[0].relu())),
        Check::new("exp", points, move |r| vec![m(r, &[2, 3])], |t, x| weigh(t, x[0].exp())),
        Check::new("log", points, |r| vec![uniform(r, &[2, 3], 0.2, 3.0)], |t, x| weigh(t, x[0].log())),
        Check::new("softmax_rows", points, |r| vec![uniform(r, &[3, 4], -3.0, 3.0)], |t, x| {
            weigh(t, x[0].softmax_rows()?)
        }),
        Check::new("sum", points, move |r| vec![m(r, &[2, 3])], |_, x| Ok(x[0].square().sum())),
        Check::new("mean", points, move |r| vec![m(r, &[2, 3])], |_, x| Ok(x[0].square().mean())),
        Check::new("masked_mean", points, move |r| vec![m(r, &[4, 1])], |_, x| {
            x[0].square().masked_mean(&[1.0, 0.0, 1.0, 1.0])
        }),
        Check::new("mean_rows", points, move |r| vec![m(r, &[3, 4])], |t, x| weigh(t, x[0].mean_rows())),
        Check::new("layer_norm", points, move |r| vec![m(r, &[3, 5])], |t, x| weigh(t, x[0].layer_norm())),
        Check::new("concat_cols", points, move |r| vec![m(r, &[2, 3]), m(r, &[2, 1])], |t, x| {
            weigh(t, t.concat_cols(&[x[0], x[1]])?)
        }),
        Check::new("concat_rows", points, move |r| vec![m(r, &[2, 3]), m(r, &[1, 3])], |t, x| {
            weigh(t, t.concat_rows(&[x[0], x[1]])?)
        }),
        Check::new("row_dot_pairs", points, move |r| vec![m(r, &[3, 5])], |t, x| {
            weigh(t, x[0].row_dot_pairs(Arc::new(fixed(&[3, 3, 5])))?)
        }),
        Check::new("pairwise_dist", points, move |r| vec![m(r, &[3, 4]), m(r, &[2, 4])], |t, x| {
            weigh(t, x[0].pairwise_dist(x[1])?)
        }),
        Check::new("norm_rows", points, |r| vec![away_from_zero(r, &[3, 4])], |t, x| weigh(t, x[0].norm_rows())),
        Check::new(
            "segment_max",
            points,
            // Distinct values spaced far beyond the step keep the argmax fixed.
            |r| {
                let mut vals: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
                for i in (1..vals.len()).rev() {
                    vals.swap(i, r.random_range(0..=i));
                }
                vec![Tensor::new(vec![6, 4], vals).expect("shape")]
            },
            |t, x| weigh(t, x[0].segment_max(3)?),
        ),
        Check::new("embedding", points, move |r| vec![m(r, &[5, 3])], |t, x| weigh(t, x[0].embedding(&[4, 0, 4, 2])?)),
        Check::new("bce_with_logits", points, |r| vec![uniform(r, &[4, 1], -4.0, 4.0)], |_, x| {
            x[0].bce_with_logits(&[1.0, 0.0, 1.0, 0.0], &[1.0, 1.0, 0.0, 1.0])
        }),
    ]
}

fn loss_checks(points: usize) -> Vec<Check> {
    let m = |r: &mut ChaCha8Rng, s: &[usize]| uniform(r, s, -1.0, 1.0);
    vec![
        Check::new("loss.hierarchical", points, move |r| vec![m(r, &[4, 1]), m(r, &[4, 1])], |_, x| {
            let targets = StageTargets {
                stages: vec![vec![1.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 0.0]],
            };
            hierarchical_loss(&[x[0], x[1]], &targets, &[1.0; 4], 0.1)
        }),
        Check::new("loss.contrastive_similar", points, move |r| vec![m(r, &[1, 5]), m(r, &[1, 5])], |_, x| {
            pairwise_contrastive(x[0], x[1], true, 1.0)
        }),
        Check::new(
            "loss.contrastive_dissimilar",
            points,
            // Close pairs keep the hinge active.
            move |r| {
                let a = m(r, &[1, 5]);
                let d = uniform(r, &[1, 5], 0.05, 0.3);
                let b = Tensor::new(vec![1, 5], a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect())
                    .expect("shape");
                vec![a, b]
            },
            |_, x| pairwise_contrastive(x[0], x[1], false, 1.0),
        ),
        Check::new("loss.align_attention", points, move |r| vec![m(r, &[3, 3])], |t, x| {
            alignment_loss_attn(&[x[0]], &[t.constant(fixed(&[3, 3]))])
        }),
        Check::new("loss.align_hidden", points, move |r| vec![m(r, &[3, 4]), m(r, &[3, 4])], |_, x| {
            alignment_loss_hidden(&[x[0]], &[x[1]])
        }),
        Check::new(
            "loss.distinctiveness",
            points,
            move |r| vec![uniform(r, &[3, 4], -0.3, 0.3), uniform(r, &[3, 4], -0.3, 0.3)],
            |t, x| distinctiveness_loss(t, x[0], x[1], 1.0),
        ),
        Check::new(
            "loss.siamese",
            points,
            move |r| vec![uniform(r, &[3, 4], -0.3, 0.3), uniform(r, &[3, 4], -0.3, 0.3), m(r, &[3, 3])],
            |t, x| {
                let teacher_a = t.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
                let a = alignment_loss_attn(&[x[2]], &[teacher_a])?;
                let h = alignment_loss_hidden(&[x[0]], &[x[1]])?;
                let d = distinctiveness_loss(t, x[0], x[1], 1.0)?;
                siamese_contrastive(a, h, d, 0.2)
            },
        ),
        Check::new("loss.grounding", points, move |r| vec![uniform(r, &[4, 1], -3.0, 3.0)], |_, x| {
            grounding_loss(x[0], &[1, 3], &[1.0; 4])
        }),
    ]
}

/// A fixed three-object scene with one two-target query.
pub fn three_object_scene(seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = [(0usize, 0usize, [2.0, 2.0, 0.5]), (0, 2, [5.0, 2.5, 0.5]), (1, 1, [3.5, 6.0, 0.5])];
    let objects = specs
        .iter()
        .enumerate()
        .map(|(id, &(class_id, attribute_id, centroid))| {
            let mut o = ObjectRecord {
                id,
                class_id,
                attribute_id,
                centroid,
                size: [0.9, 0.9, 1.0],
                points: Vec::new(),
            };
            o.points = sample_points(&o, 32, 0.02, &mut rng);
            o
        })
        .collect();
    let vocab = Vocabulary::default();
    let text = "the chairs".to_string();
    Ok(Scene {
        scene_id: "gradcheck".into(),
        room_extent: [8.0, 8.0, 3.0],
        objects,
        queries: vec![Query {
            tokens: vocab.encode(&text)?,
            text,
            target_ids: vec![0, 1],
            subset: Subset::Mt,
        }],
    })
}

/// Student objective (ground + hierarchical + Siamese) on a three-object
/// scene, differentiated with respect to `coords_per_tensor` sampled entries
/// of every parameter tensor.
pub fn composite_check(seed: u64, coords_per_tensor: usize) -> Result<Check> {
    let scene = three_object_scene(seed)?;
    let arch = ArchConfig::default();
    let teacher = GroundingNet::new(Phase::Auxiliary, arch.clone(), seed ^ 1);
    let student = GroundingNet::new(Phase::Inference, arch, seed ^ 2);
    let inputs = SceneInputs::new(&scene)?;
    let query = scene.queries[0].clone();
    let cached = TeacherOutputs::compute(&teacher, &inputs, &query.tokens)?;
    let params: Vec<Tensor> = student.store.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (i, p) in params.iter().enumerate() {
        for _ in 0..coords_per_tensor.min(p.len()) {
            coords.push((i, rng.random_range(0..p.len())));
        }
    }
    let centroids = scene.centroids();
    let loss = LossConfig::default();
    let mut check = Check::new(
        "objective.inference_phase",
        1,
        move |_| params.clone(),
        move |tape, xs| {
            let b = Bound::from_vars(xs.to_vec());
            let (obj, _) = sample_objective(
                tape,
                &student,
                &b,
                &inputs,
                &centroids,
                &query.tokens,
                &query.target_ids,
                &loss,
                Some(&cached),
            )?;
            Ok(obj)
        },
    );
    check.coords = Some(coords);
    Ok(check)
}

/// All primitive and loss checks (`points` random draws each) plus the
/// composite objective.
pub fn standard_checks(points: usize, seed: u64) -> Result<Vec<Check>> {
    let mut checks = primitive_checks(points);
    checks.extend(loss_checks(points));
    checks.push(composite_check(seed, 3)?);
    Ok(checks)
}

pub fn run_suite(points: usize, seed: u64) -> Result<SuiteReport> {
    run_checks(&standard_checks(points, seed)?, seed, DEFAULT_TOLERANCE)
}
