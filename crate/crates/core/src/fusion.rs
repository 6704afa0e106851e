//! Fusion blocks: spatially gated self-attention over objects, cross-attention
//! to the text, and a feed-forward sublayer, each followed by residual +
//! layer norm, with a per-block relevance head.

use crate::error::Result;
use crate::params::{init_linear, Bound, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};
use rand::Rng;
use std::sync::Arc;

/// Per-pair geometric feature width: distance, sin/cos bearing, sin/cos elevation.
pub const SPATIAL_DIM: usize = 5;

/// Pairwise features `P[i][j] = [d, sin θh, cos θh, sin θv, cos θv]` from
/// centroid i to centroid j in the room frame; coincident centroids map to
/// `[0, 0, 1, 0, 1]`. Shape n x n x 5.
pub fn compute_pairwise_spatial(centroids: &[[f64; 3]]) -> Tensor {
    let n = centroids.len();
    let mut data = Vec::with_capacity(n * n * SPATIAL_DIM);
    for a in centroids {
        for b in centroids {
            let (dx, dy, dz) = (b[0] - a[0], b[1] - a[1], b[2] - a[2]);
            let horiz = (dx * dx + dy * dy).sqrt();
            let dist = (horiz * horiz + dz * dz).sqrt();
            let th = if horiz > 0.0 { dy.atan2(dx) } else { 0.0 };
            let tv = if dist > 0.0 { dz.atan2(horiz) } else { 0.0 };
            data.extend_from_slice(&[dist, th.sin(), th.cos(), tv.sin(), tv.cos()]);
        }
    }
    Tensor::new(vec![n, n, SPATIAL_DIM], data).expect("shape")
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, d])),
        }
    }

    fn apply<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm().mul_bcast(b.get(self.gain))?.add_bcast(b.get(self.bias))
    }
}

/// One single-head fusion block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    d: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w_spatial: ParamId,
    b_spatial: ParamId,
    norm1: Norm,
    cq: ParamId,
    ck: ParamId,
    cv: ParamId,
    norm2: Norm,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    norm3: Norm,
    head_w: ParamId,
    head_b: ParamId,
}

/// Outputs of the spatially gated self-attention sublayer.
pub struct SpatialAttention<'t> {
    pub gate: Var<'t>,
    pub fused: Var<'t>,
    pub output: Var<'t>,
}

pub struct BlockOutput<'t> {
    pub hidden: Var<'t>,
    pub attention: Var<'t>,
    pub logits: Var<'t>,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d: usize, ffn_mult: usize) -> Self {
        let p = |s: &str| format!("{prefix}.{s}");
        let wq = store.add(p("self.wq"), init_linear(rng, d, d));
        let wk = store.add(p("self.wk"), init_linear(rng, d, d));
        let wv = store.add(p("self.wv"), init_linear(rng, d, d));
        let wo = store.add(p("self.wo"), init_linear(rng, d, d));
        let w_spatial = store.add(p("spatial.weight"), init_linear(rng, d, SPATIAL_DIM));
        let b_spatial = store.add(p("spatial.bias"), Tensor::scalar(0.0));
        let norm1 = Norm::new(store, &p("norm1"), d);
        let cq = store.add(p("cross.wq"), init_linear(rng, d, d));
        let ck = store.add(p("cross.wk"), init_linear(rng, d, d));
        let cv = store.add(p("cross.wv"), init_linear(rng, d, d));
        let norm2 = Norm::new(store, &p("norm2"), d);
        let ff1_w = store.add(p("ffn.fc1.weight"), init_linear(rng, d, ffn_mult * d));
        let ff1_b = store.add(p("ffn.fc1.bias"), Tensor::zeros(&[1, ffn_mult * d]));
        let ff2_w = store.add(p("ffn.fc2.weight"), init_linear(rng, ffn_mult * d, d));
        let ff2_b = store.add(p("ffn.fc2.bias"), Tensor::zeros(&[1, d]));
        let norm3 = Norm::new(store, &p("norm3"), d);
        let head_w = store.add(p("head.weight"), init_linear(rng, d, 1));
        let head_b = store.add(p("head.bias"), Tensor::scalar(0.0));
        FusionBlock {
            d,
            wq,
            wk,
            wv,
            wo,
            w_spatial,
            b_spatial,
            norm1,
            cq,
            ck,
            cv,
            norm2,
            ff1_w,
            ff1_b,
            ff2_w,
            ff2_b,
            norm3,
            head_w,
            head_b,
        }
    }

    pub fn spatial_bias(&self) -> ParamId {
        self.b_spatial
    }

    pub fn spatial_weight(&self) -> ParamId {
        self.w_spatial
    }

    fn scaled_scores<'t>(&self, q: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
        Ok(q.matmul(k.transpose())?.scale(1.0 / (self.d as f64).sqrt()))
    }

    /// Gate `σ(h_i · P_ij + b)` with `h = (X + pooled text) W_s`.
    pub fn spatial_gate<'t>(&self, b: &Bound<'t>, x: Var<'t>, txt_pooled: Var<'t>, pairs: &Arc<Tensor>) -> Result<Var<'t>> {
        let h = x.add_bcast(txt_pooled)?.matmul(b.get(self.w_spatial))?;
        Ok(h.row_dot_pairs(pairs.clone())?.add_bcast(b.get(self.b_spatial))?.sigmoid())
    }

    /// Self-attention over objects with `log(gate)` added to the logits,
    /// then output projection, residual and layer norm.
    pub fn gated_attention<'t>(&self, b: &Bound<'t>, x: Var<'t>, gate: Var<'t>) -> Result<SpatialAttention<'t>> {
        let q = x.matmul(b.get(self.wq))?;
        let k = x.matmul(b.get(self.wk))?;
        let v = x.matmul(b.get(self.wv))?;
        let fused = gate.log().add(self.scaled_scores(q, k)?)?.softmax_rows()?;
        let attended = fused.matmul(v)?.matmul(b.get(self.wo))?;
        let output = self.norm1.apply(b, x.add(attended)?)?;
        Ok(SpatialAttention { gate, fused, output })
    }

    pub fn spatial_attention<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        txt_pooled: Var<'t>,
        pairs: &Arc<Tensor>,
    ) -> Result<SpatialAttention<'t>> {
        let gate = self.spatial_gate(b, x, txt_pooled, pairs)?;
        self.gated_attention(b, x, gate)
    }

    /// Objects query the text tokens.
    pub fn cross_attention<'t>(&self, b: &Bound<'t>, h: Var<'t>, f_txt: Var<'t>) -> Result<Var<'t>> {
        let q = h.matmul(b.get(self.cq))?;
        let k = f_txt.matmul(b.get(self.ck))?;
        let v = f_txt.matmul(b.get(self.cv))?;
        let attn = self.scaled_scores(q, k)?.softmax_rows()?;
        self.norm2.apply(b, h.add(attn.matmul(v)?)?)
    }

    fn feed_forward<'t>(&self, b: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let inner = h.matmul(b.get(self.ff1_w))?.add_bcast(b.get(self.ff1_b))?.relu();
        let out = inner.matmul(b.get(self.ff2_w))?.add_bcast(b.get(self.ff2_b))?;
        self.norm3.apply(b, h.add(out)?)
    }

    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        f_txt: Var<'t>,
        txt_pooled: Var<'t>,
        pairs: &Arc<Tensor>,
    ) -> Result<BlockOutput<'t>> {
        let sa = self.spatial_attention(b, x, txt_pooled, pairs)?;
        let h = self.cross_attention(b, sa.output, f_txt)?;
        let hidden = self.feed_forward(b, h)?;
        let logits = hidden.matmul(b.get(self.head_w))?.add_bcast(b.get(self.head_b))?;
        Ok(BlockOutput {
            hidden,
            attention: sa.fused,
            logits,
        })
    }
}

/// Per-block hidden states, fused attention maps and logits of one pass.
pub struct FusionState<'t> {
    pub hidden: Vec<Var<'t>>,
    pub attention: Vec<Var<'t>>,
    pub logits: Vec<Var<'t>>,
}

impl<'t> FusionState<'t> {
    pub fn final_logits(&self) -> Var<'t> {
        *self.logits.last().expect("at least one block")
    }

    pub fn final_hidden(&self) -> Var<'t> {
        *self.hidden.last().expect("at least one block")
    }

    pub fn stages(&self) -> usize {
        self.logits.len()
    }
}

#[derive(Clone, Debug)]
pub struct FusionStack {
    pub blocks: Vec<FusionBlock>,
}

impl FusionStack {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, blocks: usize, d: usize, ffn_mult: usize) -> Self {
        FusionStack {
            blocks: (0..blocks)
                .map(|i| FusionBlock::new(store, rng, &format!("fusion.{i}"), d, ffn_mult))
                .collect(),
        }
    }

    /// Runs every block in order on object features `x` (n_o x d).
    pub fn forward<'t>(
        &self,
        b: &Bound<'t>,
        x: Var<'t>,
        f_txt: Var<'t>,
        pairs: &Arc<Tensor>,
    ) -> Result<FusionState<'t>> {
        let pooled = f_txt.mean_rows();
        let mut state = FusionState {
            hidden: Vec::new(),
            attention: Vec::new(),
            logits: Vec::new(),
        };
        let mut h = x;
        for block in &self.blocks {
            let out = block.forward(b, h, f_txt, pooled, pairs)?;
            h = out.hidden;
            state.hidden.push(out.hidden);
            state.attention.push(out.attention);
            state.logits.push(out.logits);
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type M = Vec<Vec<f64>>;

    const D: usize = 8;

    /// Block with every parameter (gains, biases included) perturbed so no
    /// term is trivially zero or one.
    fn block(seed: u64) -> (ParamStore, FusionBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let blk = FusionBlock::new(&mut store, &mut rng, "b", D, 4);
        for i in 0..store.len() {
            for v in store.tensor_mut(i).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        (store, blk)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rows(t: &Tensor) -> M {
        (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|r| (0..b[0].len()).map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    fn softmax(r: &[f64]) -> Vec<f64> {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    fn norm(r: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
        let n = r.len() as f64;
        let mu = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        let s = (var + 1e-5).sqrt();
        r.iter().enumerate().map(|(j, x)| (x - mu) / s * gain[j] + bias[j]).collect()
    }

    fn p(store: &ParamStore, id: ParamId) -> M {
        rows(store.get(id))
    }

    fn max_diff(a: &Tensor, b: &M) -> f64 {
        a.data().iter().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    /// Straight-line spatial attention: returns (gate, fused, output), with
    /// the gate optionally ignored (plain transformer layer).
    fn oracle_spatial(store: &ParamStore, blk: &FusionBlock, x: &M, txt: &[f64], pairs: &Tensor, gated: bool) -> (M, M, M) {
        let n = x.len();
        let ws = p(store, blk.w_spatial);
        let bs = store.get(blk.b_spatial).item();
        let xt: M = x.iter().map(|r| r.iter().zip(txt).map(|(a, b)| a + b).collect()).collect();
        let h = mm(&xt, &ws);
        let mut gate = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let pij = &pairs.data()[(i * n + j) * 5..(i * n + j + 1) * 5];
                let z: f64 = h[i].iter().zip(pij).map(|(a, b)| a * b).sum::<f64>() + bs;
                gate[i][j] = 1.0 / (1.0 + (-z).exp());
            }
        }
        let q = mm(x, &p(store, blk.wq));
        let k = mm(x, &p(store, blk.wk));
        let v = mm(x, &p(store, blk.wv));
        let mut fused = Vec::new();
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let s: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / (D as f64).sqrt();
                    if gated {
                        s + gate[i][j].max(1e-9).ln()
                    } else {
                        s
                    }
                })
                .collect();
            fused.push(softmax(&logits));
        }
        let att = mm(&mm(&fused, &v), &p(store, blk.wo));
        let gain = store.get(blk.norm1.gain).data().to_vec();
        let bias = store.get(blk.norm1.bias).data().to_vec();
        let out = (0..n)
            .map(|i| {
                let r: Vec<f64> = x[i].iter().zip(&att[i]).map(|(a, b)| a + b).collect();
                norm(&r, &gain, &bias)
            })
            .collect();
        (gate, fused, out)
    }

    fn oracle_cross(store: &ParamStore, blk: &FusionBlock, h: &M, f: &M) -> M {
        let q = mm(h, &p(store, blk.cq));
        let k = mm(f, &p(store, blk.ck));
        let v = mm(f, &p(store, blk.cv));
        let gain = store.get(blk.norm2.gain).data().to_vec();
        let bias = store.get(blk.norm2.bias).data().to_vec();
        q.iter()
            .zip(h)
            .map(|(qi, hi)| {
                let s: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (D as f64).sqrt())
                    .collect();
                let a = softmax(&s);
                let r: Vec<f64> = (0..D)
                    .map(|c| hi[c] + a.iter().zip(&v).map(|(w, vj)| w * vj[c]).sum::<f64>())
                    .collect();
                norm(&r, &gain, &bias)
            })
            .collect()
    }

    fn centroids(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0), rng.random_range(0.0..1.5)])
            .collect()
    }

    #[test]
    fn spatial_feature_conventions() {
        let p = compute_pairwise_spatial(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let at = |i: usize, j: usize| p.data()[(i * 3 + j) * 5..(i * 3 + j + 1) * 5].to_vec();
        assert_eq!(at(0, 0), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(at(0, 2), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(at(0, 1), vec![1.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(at(1, 0)[0], at(0, 1)[0]);
    }

    #[test]
    fn spatial_distance_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = centroids(&mut rng, 6);
        let p = compute_pairwise_spatial(&c);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(p.data()[(i * 6 + j) * 5], p.data()[(j * 6 + i) * 5]);
            }
        }
    }

    #[test]
    fn spatial_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (store, blk) = block(5);
        let x = random(&mut rng, 2, D);
        let txt = random(&mut rng, 1, D);
        let pairs = Arc::new(compute_pairwise_spatial(&centroids(&mut rng, 2)));
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let sa = blk
            .spatial_attention(&b, tape.constant(x.clone()), tape.constant(txt.clone()), &pairs)
            .unwrap();
        let (gate, fused, out) = oracle_spatial(&store, &blk, &rows(&x), txt.data(), &pairs, true);
        assert!(max_diff(&sa.gate.value(), &gate) < 1e-10);
        assert!(max_diff(&sa.fused.value(), &fused) < 1e-10);
        assert!(max_diff(&sa.output.value(), &out) < 1e-10);
    }

    #[test]
    fn saturated_gate_reduces_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let (mut store, blk) = block(100 + trial);
            store.set(blk.b_spatial, Tensor::scalar(40.0));
            let x = random(&mut rng, 5, D);
            let txt = random(&mut rng, 1, D);
            let pairs = Arc::new(compute_pairwise_spatial(&centroids(&mut rng, 5)));
            let tape = Tape::new();
            let b = store.bind(&tape, false);
            let sa = blk
                .spatial_attention(&b, tape.constant(x.clone()), tape.constant(txt.clone()), &pairs)
                .unwrap();
            let (_, fused, out) = oracle_spatial(&store, &blk, &rows(&x), txt.data(), &pairs, false);
            assert!(max_diff(&sa.fused.value(), &fused) < 1e-6);
            assert!(max_diff(&sa.output.value(), &out) < 1e-6);
        }
    }

    #[test]
    fn tiny_gate_suppresses_its_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (store, blk) = block(6);
        let x = random(&mut rng, 3, D);
        let mut gate = Tensor::full(&[3, 3], 0.5);
        gate.data_mut()[1] = 1e-9;
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let sa = blk.gated_attention(&b, tape.constant(x), tape.constant(gate)).unwrap();
        let a = sa.fused.value();
        let row = a.row_slice(0);
        assert!(row[1] < 1e-6 * row[0].max(row[2]));
    }

    #[test]
    fn cross_attention_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (store, blk) = block(7);
        let h = random(&mut rng, 2, D);
        let f = random(&mut rng, 3, D);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let y = blk.cross_attention(&b, tape.constant(h.clone()), tape.constant(f.clone())).unwrap();
        assert!(max_diff(&y.value(), &oracle_cross(&store, &blk, &rows(&h), &rows(&f))) < 1e-10);
    }

    #[test]
    fn single_token_cross_attention_copies_its_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (store, blk) = block(8);
        let h = random(&mut rng, 4, D);
        let f = random(&mut rng, 1, D);
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let q = tape.constant(h.clone()).matmul(b.get(blk.cq)).unwrap();
        let k = tape.constant(f.clone()).matmul(b.get(blk.ck)).unwrap();
        let w = blk.scaled_scores(q, k).unwrap().softmax_rows().unwrap();
        assert!(w.value().data().iter().all(|&x| x == 1.0));
        let y = blk.cross_attention(&b, tape.constant(h.clone()), tape.constant(f.clone())).unwrap();
        let v = mm(&rows(&f), &p(&store, blk.cv));
        let gain = store.get(blk.norm2.gain).data().to_vec();
        let bias = store.get(blk.norm2.bias).data().to_vec();
        let expect: M = rows(&h)
            .iter()
            .map(|r| norm(&r.iter().zip(&v[0]).map(|(a, b)| a + b).collect::<Vec<_>>(), &gain, &bias))
            .collect();
        assert!(max_diff(&y.value(), &expect) < 1e-12);
    }

    #[test]
    fn duplicated_text_leaves_cross_attention_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let (store, blk) = block(9);
        let h = random(&mut rng, 4, D);
        let f = random(&mut rng, 3, D);
        let doubled: M = rows(&f).into_iter().flat_map(|r| [r.clone(), r]).collect();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let y1 = blk.cross_attention(&b, tape.constant(h.clone()), tape.constant(f)).unwrap();
        let f2 = Tensor::from_rows(&doubled).unwrap();
        let y2 = blk.cross_attention(&b, tape.constant(h), tape.constant(f2)).unwrap();
        assert!(y1.value().max_abs_diff(&y2.value()) < 1e-12);
    }

    fn stack(seed: u64, blocks: usize) -> (ParamStore, FusionStack) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let st = FusionStack::new(&mut store, &mut rng, blocks, D, 4);
        (store, st)
    }

    #[test]
    fn one_block_gives_one_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (store, st) = stack(1, 1);
        let pairs = Arc::new(compute_pairwise_spatial(&centroids(&mut rng, 3)));
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let x = tape.constant(random(&mut rng, 3, D));
        let f = tape.constant(random(&mut rng, 2, D));
        let state = st.forward(&b, x, f, &pairs).unwrap();
        assert_eq!(state.stages(), 1);
        assert_eq!((state.hidden.len(), state.attention.len(), state.logits.len()), (1, 1, 1));
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (store, st) = stack(2, 3);
        let pairs = Arc::new(compute_pairwise_spatial(&centroids(&mut rng, 7)));
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let state = st
            .forward(&b, tape.constant(random(&mut rng, 7, D)), tape.constant(random(&mut rng, 4, D)), &pairs)
            .unwrap();
        for a in &state.attention {
            let a = a.value();
            for i in 0..7 {
                let r = a.row_slice(i);
                assert!(r.iter().all(|&x| x >= 0.0));
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn object_order_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (store, st) = stack(3, 3);
        let n = 6;
        let c = centroids(&mut rng, n);
        let x = random(&mut rng, n, D);
        let f = random(&mut rng, 4, D);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let cp: Vec<[f64; 3]> = perm.iter().map(|&i| c[i]).collect();
        let xp = Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, false);
        let s1 = st
            .forward(&b, tape.constant(x), tape.constant(f.clone()), &Arc::new(compute_pairwise_spatial(&c)))
            .unwrap();
        let s2 = st
            .forward(&b, tape.constant(xp), tape.constant(f), &Arc::new(compute_pairwise_spatial(&cp)))
            .unwrap();
        for s in 0..3 {
            let (h1, h2) = (s1.hidden[s].value(), s2.hidden[s].value());
            let (z1, z2) = (s1.logits[s].value(), s2.logits[s].value());
            let (a1, a2) = (s1.attention[s].value(), s2.attention[s].value());
            for (pi, &i) in perm.iter().enumerate() {
                for c in 0..D {
                    assert!((h1.get(i, c) - h2.get(pi, c)).abs() < 1e-10);
                }
                assert!((z1.data()[i] - z2.data()[pi]).abs() < 1e-10);
                for (pj, &j) in perm.iter().enumerate() {
                    assert!((a1.get(i, j) - a2.get(pi, pj)).abs() < 1e-10);
                }
            }
        }
    }
}
