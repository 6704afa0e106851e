//! Text, point-cloud and ground-truth semantic encoders.

use crate::error::{Error, Result};
use crate::params::{init_embedding, init_linear, Bound, ParamId, ParamStore};
use crate::scene::vocab::{NUM_ATTRIBUTES, NUM_CLASSES};
use crate::scene::ObjectRecord;
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Width of the ground-truth descriptor: class one-hot, colour one-hot,
/// centroid, size.
pub const DESCRIPTOR_DIM: usize = NUM_CLASSES + NUM_ATTRIBUTES + 6;
pub const POINT_DIM: usize = 6;

/// Token + learned positional embeddings.
#[derive(Clone, Debug)]
pub struct TextEmbedder {
    tokens: ParamId,
    positions: ParamId,
    vocab_size: usize,
    max_len: usize,
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, vocab_size: usize, max_len: usize, d: usize) -> Self {
        TextEmbedder {
            tokens: store.add("text.token_embedding", init_embedding(rng, vocab_size, d)),
            positions: store.add("text.position_embedding", init_embedding(rng, max_len, d)),
            vocab_size,
            max_len,
        }
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() || tokens.len() > self.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                size: self.vocab_size,
            });
        }
        let tok = b.get(self.tokens).embedding(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = b.get(self.positions).embedding(&positions)?;
        tok.add(pos)
    }
}

/// Per-point MLP (6 -> h -> h, layer norm + ReLU), max-pool over each
/// object's points, then a linear map to the model width.
#[derive(Clone, Debug)]
pub struct PointEncoder {
    w1: ParamId,
    b1: ParamId,
    g1: ParamId,
    beta1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g2: ParamId,
    beta2: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, hidden: usize, d: usize) -> Self {
        PointEncoder {
            w1: store.add("points.fc1.weight", init_linear(rng, POINT_DIM, hidden)),
            b1: store.add("points.fc1.bias", Tensor::zeros(&[1, hidden])),
            g1: store.add("points.ln1.gain", Tensor::full(&[1, hidden], 1.0)),
            beta1: store.add("points.ln1.bias", Tensor::zeros(&[1, hidden])),
            w2: store.add("points.fc2.weight", init_linear(rng, hidden, hidden)),
            b2: store.add("points.fc2.bias", Tensor::zeros(&[1, hidden])),
            g2: store.add("points.ln2.gain", Tensor::full(&[1, hidden], 1.0)),
            beta2: store.add("points.ln2.bias", Tensor::zeros(&[1, hidden])),
            w_out: store.add("points.out.weight", init_linear(rng, hidden, d)),
            b_out: store.add("points.out.bias", Tensor::zeros(&[1, d])),
        }
    }

    /// `points` stacks every object's `n_points` rows: shape (n_o * n_points) x 6.
    pub fn forward<'t>(&self, b: &Bound<'t>, points: Var<'t>, n_points: usize) -> Result<Var<'t>> {
        if n_points == 0 || points.value().is_empty() {
            return Err(Error::EmptyPointSet);
        }
        let h = points.matmul(b.get(self.w1))?.add_bcast(b.get(self.b1))?;
        let h = h.layer_norm().mul_bcast(b.get(self.g1))?.add_bcast(b.get(self.beta1))?.relu();
        let h = h.matmul(b.get(self.w2))?.add_bcast(b.get(self.b2))?;
        let h = h.layer_norm().mul_bcast(b.get(self.g2))?.add_bcast(b.get(self.beta2))?.relu();
        let pooled = h.segment_max(n_points)?;
        pooled.matmul(b.get(self.w_out))?.add_bcast(b.get(self.b_out))
    }
}

/// Linear map of the ground-truth descriptor (no bias).
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    weight: ParamId,
}

impl SemanticEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        SemanticEncoder {
            weight: store.add("semantic.weight", init_linear(rng, DESCRIPTOR_DIM, d)),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<'t>(&self, b: &Bound<'t>, descriptors: Var<'t>) -> Result<Var<'t>> {
        descriptors.matmul(b.get(self.weight))
    }
}

/// Maps a room-frame position to `[-1, 1]` per axis so that geometry does not
/// swamp the one-hot and colour channels.
pub fn room_coords(p: &[f64], room: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|k| 2.0 * p[k] / room[k] - 1.0)
}

/// `[one-hot class | one-hot colour | centroid | size]` per object, the
/// centroid in room coordinates and the size in metres.
pub fn semantic_descriptors(objects: &[ObjectRecord], room: &[f64; 3]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(objects.len());
    for o in objects {
        if o.class_id >= NUM_CLASSES || o.attribute_id >= NUM_ATTRIBUTES {
            return Err(Error::IdOutOfRange(format!(
                "object {} has class {} / attribute {}",
                o.id, o.class_id, o.attribute_id
            )));
        }
        let mut r = vec![0.0; DESCRIPTOR_DIM];
        r[o.class_id] = 1.0;
        r[NUM_CLASSES + o.attribute_id] = 1.0;
        r[NUM_CLASSES + NUM_ATTRIBUTES..NUM_CLASSES + NUM_ATTRIBUTES + 3].copy_from_slice(&room_coords(&o.centroid, room));
        r[NUM_CLASSES + NUM_ATTRIBUTES + 3..].copy_from_slice(&o.size);
        rows.push(r);
    }
    Tensor::from_rows(&rows)
}

/// Stacks all objects' points (xyz in room coordinates, rgb as is); returns
/// the matrix and points per object.
pub fn point_matrix(objects: &[ObjectRecord], room: &[f64; 3]) -> Result<(Tensor, usize)> {
    let n_p = objects.first().map_or(0, |o| o.points.len());
    if n_p == 0 {
        return Err(Error::EmptyPointSet);
    }
    let mut data = Vec::with_capacity(objects.len() * n_p * POINT_DIM);
    for o in objects {
        if o.points.len() != n_p {
            return Err(Error::Data(format!("object {} has {} points, expected {n_p}", o.id, o.points.len())));
        }
        for p in &o.points {
            data.extend_from_slice(&room_coords(p, room));
            data.extend_from_slice(&p[3..]);
        }
    }
    Ok((Tensor::new(vec![objects.len() * n_p, POINT_DIM], data)?, n_p))
}

/// Helper binding used by tests and examples: run one encoder on constants.
pub fn encode_text(tape: &Tape, store: &ParamStore, enc: &TextEmbedder, tokens: &[usize]) -> Result<Tensor> {
    let b = store.bind(tape, false);
    Ok((*enc.forward(&b, tokens)?.value()).clone())
}
