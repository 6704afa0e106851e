//! Two-phase optimisation: the auxiliary network learns from ground-truth
//! semantics, then the inference network learns from point clouds while
//! being pulled toward the frozen auxiliary network.

use crate::error::{Error, Result};
use crate::losses::{
    alignment_loss_attn, alignment_loss_hidden, distinctiveness_loss, grounding_loss, hierarchical_loss,
    hierarchical_targets, siamese_contrastive, LossConfig,
};
use crate::model::{ArchConfig, GroundingNet, Phase, SceneInputs};
use crate::params::ParamStore;
use crate::scene::child_seed;
use crate::scene::Dataset;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

pub const CHECKPOINT_FORMAT: &str = "mog-checkpoint-v1";

/// AdamW moments and hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW update. Decoupled decay scales each parameter by `1 - lr * wd`
/// before the bias-corrected adaptive step.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("adamw_step", &[store.len()], &[grads.len()]));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != store.tensor(i).shape() || state.m[i].len() != g.len() {
            return Err(Error::shape("adamw_step", store.tensor(i).shape(), g.shape()));
        }
    }
    state.step += 1;
    let (b1, b2) = state.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let decay = 1.0 - state.lr * state.weight_decay;
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.tensor_mut(i).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub loss: LossConfig,
    pub phase: Phase,
    pub seed: u64,
    pub arch: ArchConfig,
    /// Required when `phase` is inference.
    pub aux_checkpoint: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr: 0.0005,
            weight_decay: 0.01,
            grad_clip: 5.0,
            loss: LossConfig::default(),
            phase: Phase::Auxiliary,
            seed: 7,
            arch: ArchConfig::default(),
            aux_checkpoint: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("lr and weight decay must be nonnegative, clip positive".into()));
        }
        if self.arch.blocks == 0 || self.arch.d_model == 0 {
            return Err(Error::Config("architecture needs at least one block and positive width".into()));
        }
        if self.loss.deltas.len() != self.arch.blocks {
            return Err(Error::Config(format!(
                "{} stage thresholds given for {} fusion blocks",
                self.loss.deltas.len(),
                self.arch.blocks
            )));
        }
        if self.phase == Phase::Inference && self.aux_checkpoint.is_none() {
            return Err(Error::Config("inference phase requires an auxiliary checkpoint".into()));
        }
        Ok(())
    }
}

/// One record of the per-epoch training log. Components are epoch means of
/// their weighted contributions, so `loss_total` is their sum; the
/// alignment terms carry unit weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ground: f64,
    pub loss_hier: f64,
    #[serde(rename = "loss_align_A")]
    pub loss_align_a: f64,
    #[serde(rename = "loss_align_H")]
    pub loss_align_h: f64,
    pub loss_distinct: f64,
    pub wall_time: f64,
}

impl EpochLog {
    pub fn components_sum(&self) -> f64 {
        self.loss_ground + self.loss_hier + self.loss_align_a + self.loss_align_h + self.loss_distinct
    }
}

pub fn log_to_jsonl(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters plus everything needed to rebuild and audit a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub phase: Phase,
    pub arch: ArchConfig,
    pub loss_config: LossConfig,
    pub epoch: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_net(net: &GroundingNet, loss: &LossConfig, epoch: usize, seed: u64, fingerprint: &str) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            phase: net.phase,
            arch: net.arch.clone(),
            loss_config: loss.clone(),
            epoch,
            seed,
            dataset_fingerprint: fingerprint.into(),
            params: net
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.into_data(),
                })
                .collect(),
        }
    }

    pub fn to_net(&self) -> Result<GroundingNet> {
        let named = self
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        GroundingNet::from_params(self.phase, self.arch.clone(), named)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("unsupported checkpoint format {:?}", c.format)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
}

/// Per-sample loss components (weighted) and the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ground: f64,
    pub hier: f64,
    pub align_a: f64,
    pub align_h: f64,
    pub distinct: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ground + self.hier + self.align_a + self.align_h + self.distinct
    }

    fn add(&mut self, o: &LossParts) {
        self.ground += o.ground;
        self.hier += o.hier;
        self.align_a += o.align_a;
        self.align_h += o.align_h;
        self.distinct += o.distinct;
    }
}

/// Frozen auxiliary outputs for one sample.
#[derive(Clone, Debug)]
pub struct TeacherOutputs {
    pub attention: Vec<Arc<Tensor>>,
    pub hidden: Vec<Arc<Tensor>>,
}

impl TeacherOutputs {
    pub fn compute(teacher: &GroundingNet, inputs: &SceneInputs, tokens: &[usize]) -> Result<Self> {
        let tape = Tape::new();
        let b = teacher.store.bind(&tape, false);
        let state = teacher.forward(&tape, &b, inputs, tokens)?;
        Ok(TeacherOutputs {
            attention: state.attention.iter().map(|v| v.value()).collect(),
            hidden: state.hidden.iter().map(|v| v.value()).collect(),
        })
    }
}

/// Builds the full objective for one (scene, query) on `tape` and returns
/// it with its components. `teacher` switches on the Siamese terms.
#[allow(clippy::too_many_arguments)]
pub fn sample_objective<'t>(
    tape: &'t Tape,
    net: &GroundingNet,
    b: &crate::params::Bound<'t>,
    inputs: &SceneInputs,
    centroids: &[[f64; 3]],
    tokens: &[usize],
    target_ids: &[usize],
    loss: &LossConfig,
    teacher: Option<&TeacherOutputs>,
) -> Result<(Var<'t>, LossParts)> {
    let state = net.forward(tape, b, inputs, tokens)?;
    let mask = vec![1.0; inputs.num_objects()];
    let ground = grounding_loss(state.final_logits(), target_ids, &mask)?;
    let targets = hierarchical_targets(centroids, target_ids, &loss.deltas);
    let hier = hierarchical_loss(&state.logits, &targets, &mask, loss.beta)?;
    let mut parts = LossParts {
        ground: ground.item(),
        hier: hier.item(),
        ..LossParts::default()
    };
    let mut total = ground.add(hier)?;
    if let Some(t) = teacher {
        let consts = |v: &[Arc<Tensor>]| v.iter().map(|x| tape.constant_shared(x.clone())).collect::<Vec<_>>();
        let a_aux = consts(&t.attention);
        let h_aux = consts(&t.hidden);
        let align_a = alignment_loss_attn(&state.attention, &a_aux)?;
        let align_h = alignment_loss_hidden(&state.hidden, &h_aux)?;
        let distinct = distinctiveness_loss(tape, state.final_hidden(), *h_aux.last().expect("blocks"), loss.margin)?;
        parts.align_a = align_a.item();
        parts.align_h = align_h.item();
        parts.distinct = loss.alpha * distinct.item();
        total = total.add(siamese_contrastive(align_a, align_h, distinct, loss.alpha)?)?;
    }
    Ok((total, parts))
}

struct Prepared<'a> {
    dataset: &'a Dataset,
    inputs: Vec<SceneInputs>,
    samples: Vec<(usize, usize)>,
}

fn prepare(dataset: &Dataset) -> Result<Prepared<'_>> {
    let inputs = dataset
        .scenes
        .par_iter()
        .map(SceneInputs::new)
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<(usize, usize)> = dataset
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.queries.len()).map(move |qi| (si, qi)))
        .collect();
    if samples.is_empty() {
        return Err(Error::Data("dataset has no queries".into()));
    }
    Ok(Prepared {
        dataset,
        inputs,
        samples,
    })
}

/// Phase 1: ground + hierarchical loss on ground-truth semantics.
pub fn train_auxiliary(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_auxiliary_with(dataset, config, |_| {})
}

pub fn train_auxiliary_with(
    dataset: &Dataset,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    if config.phase != Phase::Auxiliary {
        return Err(Error::Config("train_auxiliary needs phase = auxiliary".into()));
    }
    config.validate()?;
    let prep = prepare(dataset)?;
    let net = GroundingNet::new(Phase::Auxiliary, config.arch.clone(), child_seed(config.seed, 0));
    run(prep, net, None, config, on_epoch)
}

/// Phase 2: the point-cloud network against the frozen auxiliary network.
pub fn train_inference(dataset: &Dataset, aux: &Checkpoint, config: &TrainConfig) -> Result<TrainOutput> {
    train_inference_with(dataset, aux, config, |_| {})
}

pub fn train_inference_with(
    dataset: &Dataset,
    aux: &Checkpoint,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    if config.phase != Phase::Inference {
        return Err(Error::Config("train_inference needs phase = inference".into()));
    }
    let mut checked = config.clone();
    checked.aux_checkpoint.get_or_insert_with(|| "<in memory>".into());
    checked.validate()?;
    if aux.phase != Phase::Auxiliary {
        return Err(Error::Config("checkpoint is not an auxiliary network".into()));
    }
    if aux.arch != config.arch {
        return Err(Error::Config("architecture mismatch between config and auxiliary checkpoint".into()));
    }
    let teacher = aux.to_net()?;
    let prep = prepare(dataset)?;
    let cache = prep
        .samples
        .par_iter()
        .map(|&(si, qi)| TeacherOutputs::compute(&teacher, &prep.inputs[si], &dataset.scenes[si].queries[qi].tokens))
        .collect::<Result<Vec<_>>>()?;
    let net = GroundingNet::new(Phase::Inference, config.arch.clone(), child_seed(config.seed, 0));
    run(prep, net, Some(&cache), config, on_epoch)
}

fn run(
    prep: Prepared<'_>,
    mut net: GroundingNet,
    teacher: Option<&[TeacherOutputs]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutput> {
    let start = Instant::now();
    let mut opt = OptimizerState::new(&net.store, config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..prep.samples.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let n = prep.samples.len() as f64;
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(child_seed(config.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut total_sum = 0.0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = net.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            // Sample `k` of the batch: forward, backward, and hand the bound
            // parameters to `sink` while the tape is alive.
            let step = |k: usize, sink: &mut dyn FnMut(&crate::params::Bound<'_>)| -> Result<(f64, LossParts)> {
                let (si, qi) = prep.samples[k];
                let scene = &prep.dataset.scenes[si];
                let query = &scene.queries[qi];
                let tape = Tape::new();
                let b = net.store.bind(&tape, true);
                let (obj, parts) = sample_objective(
                    &tape,
                    &net,
                    &b,
                    &prep.inputs[si],
                    &scene.centroids(),
                    &query.tokens,
                    &query.target_ids,
                    &config.loss,
                    teacher.map(|t| &t[k]),
                )?;
                let value = obj.item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss {value} at epoch {epoch}, batch {bi}, scene {} query {qi}",
                        scene.scene_id
                    )));
                }
                tape.backward(obj)?;
                sink(&b);
                Ok((value, parts))
            };
            let results = if rayon::current_num_threads() > 1 {
                batch
                    .par_iter()
                    .map(|&k| {
                        let mut g = Vec::new();
                        let r = step(k, &mut |b| g = b.grads())?;
                        Ok((r, Some(g)))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let mut out = Vec::with_capacity(batch.len());
                for &k in batch {
                    let r = step(k, &mut |b| b.accumulate_grads(&mut grads, scale))?;
                    out.push((r, None));
                }
                out
            };
            // Summation runs in batch order on either path, so results do
            // not depend on the thread count.
            for ((value, parts), g) in results {
                total_sum += value;
                sums.add(&parts);
                if let Some(g) = g {
                    for (acc, gi) in grads.iter_mut().zip(&g) {
                        acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, x)| *a += scale * x);
                    }
                }
            }
            let norm = clip_grad_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient norm at epoch {epoch}, batch {bi}")));
            }
            adamw_step(&mut net.store, &grads, &mut opt)?;
        }
        let record = EpochLog {
            epoch,
            loss_total: total_sum / n,
            loss_ground: sums.ground / n,
            loss_hier: sums.hier / n,
            loss_align_a: sums.align_a / n,
            loss_align_h: sums.align_h / n,
            loss_distinct: sums.distinct / n,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }
    let checkpoint = Checkpoint::from_net(
        &net,
        &config.loss,
        config.epochs,
        config.seed,
        &prep.dataset.fingerprint()?,
    );
    Ok(TrainOutput { checkpoint, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_dataset, GenConfig};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn adamw_examples() {
        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.0005, 0.0);
        adamw_step(&mut s, &[Tensor::scalar(1.0)], &mut st).unwrap();
        assert!((s.tensor(0).item() - 0.9995).abs() < 1e-9);

        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(&s, 0.0005, 0.0);
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st).unwrap();
        assert_eq!(s.tensor(0).item(), 1.0);

        let mut s = scalar_store(-2.0);
        let mut st = OptimizerState::new(&s, 0.0005, 0.01);
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st).unwrap();
        assert!(s.tensor(0).item().abs() < 2.0);
        assert_eq!(st.step, 1);

        assert!(adamw_step(&mut s, &[Tensor::zeros(&[2, 1])], &mut st).is_err());
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::row(vec![3.0, 4.0]), Tensor::scalar(12.0)];
        let before = clip_grad_norm(&mut g, 5.0);
        assert!((before - 13.0).abs() < 1e-12);
        let after: f64 = g.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let inf = TrainConfig {
            phase: Phase::Inference,
            ..TrainConfig::default()
        };
        assert!(inf.validate().is_err());
        let mismatch = TrainConfig {
            loss: LossConfig {
                deltas: vec![0.5, 0.0],
                ..LossConfig::default()
            },
            ..TrainConfig::default()
        };
        assert!(mismatch.validate().is_err());
    }

    fn tiny() -> (Dataset, TrainConfig) {
        let data = generate_dataset(
            &GenConfig {
                scenes: 6,
                points_per_object: 8,
                ..GenConfig::default()
            },
            3,
        )
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 4,
            arch: ArchConfig {
                d_model: 16,
                point_hidden: 16,
                ..ArchConfig::default()
            },
            ..TrainConfig::default()
        };
        (data, config)
    }

    #[test]
    fn zero_lr_leaves_parameters_at_initialisation() {
        let (data, mut config) = tiny();
        config.lr = 0.0;
        let out = train_auxiliary(&data, &config).unwrap();
        let init = GroundingNet::new(Phase::Auxiliary, config.arch.clone(), child_seed(config.seed, 0));
        assert_eq!(out.checkpoint.to_net().unwrap().store, init.store);
    }

    #[test]
    fn component_accounting_and_checkpoint_round_trip() {
        let (data, config) = tiny();
        let aux = train_auxiliary(&data, &config).unwrap();
        for r in &aux.log {
            assert!((r.loss_total - r.components_sum()).abs() < 1e-9);
            assert_eq!((r.loss_align_a, r.loss_align_h, r.loss_distinct), (0.0, 0.0, 0.0));
        }
        let json = aux.checkpoint.to_json().unwrap();
        assert_eq!(Checkpoint::from_json(&json).unwrap().to_json().unwrap(), json);

        let inf_config = TrainConfig {
            phase: Phase::Inference,
            ..config.clone()
        };
        let before = aux.checkpoint.clone();
        let student = train_inference(&data, &aux.checkpoint, &inf_config).unwrap();
        assert_eq!(before, aux.checkpoint);
        for r in &student.log {
            assert!((r.loss_total - r.components_sum()).abs() < 1e-9);
            assert!(r.loss_align_a > 0.0 && r.loss_align_h > 0.0);
        }
        assert_eq!(student.checkpoint.phase, Phase::Inference);
    }

    #[test]
    fn zero_weights_zero_the_weighted_terms() {
        let (data, config) = tiny();
        let aux = train_auxiliary(&data, &config).unwrap();
        let cfg = TrainConfig {
            phase: Phase::Inference,
            loss: LossConfig {
                alpha: 0.0,
                beta: 0.0,
                ..LossConfig::default()
            },
            ..config
        };
        let out = train_inference(&data, &aux.checkpoint, &cfg).unwrap();
        for r in &out.log {
            assert_eq!((r.loss_hier, r.loss_distinct), (0.0, 0.0));
            assert!(r.loss_align_h > 0.0);
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let (data, mut config) = tiny();
        config.epochs = 6;
        let log = train_auxiliary(&data, &config).unwrap().log;
        assert!(log[5].loss_total < log[0].loss_total, "{} -> {}", log[0].loss_total, log[5].loss_total);
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let (data, config) = tiny();
        let aux = train_auxiliary(&data, &config).unwrap();
        let cfg = TrainConfig {
            phase: Phase::Inference,
            arch: ArchConfig::default(),
            ..config
        };
        assert!(matches!(train_inference(&data, &aux.checkpoint, &cfg), Err(Error::Config(_))));
    }
}
