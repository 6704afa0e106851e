//! Training objectives: stage-wise hierarchical BCE, pairwise contrastive
//! loss, teacher/student alignment and distinctiveness terms, and the final
//! grounding BCE.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// All weighting and thresholding knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the distinctiveness term inside the Siamese loss.
    pub alpha: f64,
    /// Weight of every hierarchical stage loss.
    pub beta: f64,
    /// Margin shared by the contrastive and distinctiveness hinges.
    pub margin: f64,
    /// Stage distance thresholds (m), strictly decreasing, ending at 0.
    pub deltas: Vec<f64>,
    /// Probability cutoff for selecting objects.
    pub predict_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.2,
            beta: 0.1,
            margin: 1.0,
            deltas: vec![1.0, 0.5, 0.0],
            predict_threshold: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.predict_threshold > 0.0 && self.predict_threshold < 1.0) {
            return Err(Error::Config("prediction threshold must lie in (0, 1)".into()));
        }
        if self.deltas.last() != Some(&0.0) {
            return Err(Error::Config("the last stage threshold must be exactly 0".into()));
        }
        if self.deltas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::Config("stage thresholds must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// Binary target vector per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTargets {
    pub stages: Vec<Vec<f64>>,
}

impl StageTargets {
    pub fn members(&self, stage: usize) -> Vec<usize> {
        self.stages[stage]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Stage s selects objects whose distance to the nearest target is at most
/// `deltas[s]`. With no targets every distance is infinite and every stage
/// is empty.
pub fn hierarchical_targets(centroids: &[[f64; 3]], target_ids: &[usize], deltas: &[f64]) -> StageTargets {
    let dist_to_targets: Vec<f64> = centroids
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if target_ids.contains(&i) {
                return 0.0;
            }
            target_ids
                .iter()
                .map(|&j| {
                    let t = centroids[j];
                    ((c[0] - t[0]).powi(2) + (c[1] - t[1]).powi(2) + (c[2] - t[2]).powi(2)).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    StageTargets {
        stages: deltas
            .iter()
            .map(|&delta| {
                dist_to_targets
                    .iter()
                    .map(|&d| if d <= delta { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect(),
    }
}

/// `sum_s beta * masked_mean BCE(z_s, T_s)`.
pub fn hierarchical_loss<'t>(
    stage_logits: &[Var<'t>],
    targets: &StageTargets,
    mask: &[f64],
    beta: f64,
) -> Result<Var<'t>> {
    if stage_logits.len() != targets.stages.len() || stage_logits.is_empty() {
        return Err(Error::shape(
            "hierarchical_loss",
            &[stage_logits.len()],
            &[targets.stages.len()],
        ));
    }
    let mut total: Option<Var<'t>> = None;
    for (z, t) in stage_logits.iter().zip(&targets.stages) {
        let l = z.bce_with_logits(t, mask)?.scale(beta);
        total = Some(match total {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty"))
}

/// `y = 1`: `½‖f1 − f2‖²`; `y = 0`: `½ max(0, m − ‖f1 − f2‖)²`.
pub fn pairwise_contrastive<'t>(f1: Var<'t>, f2: Var<'t>, similar: bool, margin: f64) -> Result<Var<'t>> {
    let diff = f1.sub(f2)?;
    if similar {
        Ok(diff.square().sum().scale(0.5))
    } else {
        let gap = diff.norm_rows().scale(-1.0).add_const(margin).relu();
        Ok(gap.square().sum().scale(0.5))
    }
}

/// Mean over layers and rows of squared L2 row differences. Used for both
/// attention maps and hidden states; pass teacher tensors as constants.
pub fn alignment_loss<'t>(student: &[Var<'t>], teacher: &[Var<'t>]) -> Result<Var<'t>> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::shape("alignment_loss", &[student.len()], &[teacher.len()]));
    }
    let layers = student.len() as f64;
    let mut total: Option<Var<'t>> = None;
    for (s, t) in student.iter().zip(teacher) {
        let rows = s.value().rows() as f64;
        let l = s.sub(*t)?.square().sum().scale(1.0 / (rows * layers));
        total = Some(match total {
            Some(acc) => acc.add(l)?,
            None => l,
        });
    }
    Ok(total.expect("nonempty"))
}

pub fn alignment_loss_attn<'t>(a_inf: &[Var<'t>], a_aux: &[Var<'t>]) -> Result<Var<'t>> {
    alignment_loss(a_inf, a_aux)
}

pub fn alignment_loss_hidden<'t>(h_inf: &[Var<'t>], h_aux: &[Var<'t>]) -> Result<Var<'t>> {
    alignment_loss(h_inf, h_aux)
}

/// `(1/N²) Σ_i Σ_{j≠i} max(0, m − ‖H_inf,i − H_aux,j‖)²`.
pub fn distinctiveness_loss<'t>(tape: &'t Tape, h_inf: Var<'t>, h_aux: Var<'t>, margin: f64) -> Result<Var<'t>> {
    let (ni, na) = (h_inf.value().rows(), h_aux.value().rows());
    if ni != na {
        return Err(Error::shape("distinctiveness_loss", &h_inf.shape(), &h_aux.shape()));
    }
    let n = ni;
    let dist = h_inf.pairwise_dist(h_aux)?;
    let hinge = dist.scale(-1.0).add_const(margin).relu().square();
    let mut off_diag = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off_diag.data_mut()[i * n + i] = 0.0;
    }
    let masked = hinge.mul(tape.constant(off_diag))?;
    Ok(masked.sum().scale(1.0 / (n * n) as f64))
}

/// `alpha * distinct + align_A + align_H`.
pub fn siamese_contrastive<'t>(align_a: Var<'t>, align_h: Var<'t>, distinct: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    distinct.scale(alpha).add(align_a)?.add(align_h)
}

/// Masked-mean BCE of the final logits against the exact target indicator.
pub fn grounding_loss<'t>(z_final: Var<'t>, target_ids: &[usize], mask: &[f64]) -> Result<Var<'t>> {
    let n = z_final.value().len();
    let mut labels = vec![0.0; n];
    for &t in target_ids {
        if t >= n {
            return Err(Error::IdOutOfRange(format!("target {t} with {n} objects")));
        }
        labels[t] = 1.0;
    }
    z_final.bce_with_logits(&labels, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn stage_target_examples() {
        let c = [[0.0, 0.0, 0.0], [0.3, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let t = hierarchical_targets(&c, &[0], &[0.5]);
        assert_eq!(t.members(0), vec![0, 1]);
        let t = hierarchical_targets(&c, &[2], &[1.0, 0.5, 0.0]);
        assert_eq!(t.members(2), vec![2]);
        let t = hierarchical_targets(&c, &[], &[100.0, 0.0]);
        assert!(t.members(0).is_empty() && t.members(1).is_empty());
    }

    #[test]
    fn hierarchical_loss_examples() {
        let tape = Tape::new();
        let z = tape.constant(col(&[0.0, 0.0]));
        let t = StageTargets {
            stages: vec![vec![1.0, 0.0]],
        };
        let l = hierarchical_loss(&[z], &t, &[1.0, 1.0], 0.1).unwrap().item();
        assert!((l - 0.1 * 2f64.ln()).abs() < 1e-12);
        let z = tape.constant(col(&[7.0, -3.0]));
        assert_eq!(hierarchical_loss(&[z], &t, &[1.0, 1.0], 0.0).unwrap().item(), 0.0);
        let z = tape.constant(col(&[40.0, -40.0]));
        assert!(hierarchical_loss(&[z], &t, &[1.0, 1.0], 1.0).unwrap().item() < 1e-14);
        assert!(hierarchical_loss(&[z], &t, &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(pairwise_contrastive(a, a, true, 1.0).unwrap().item(), 0.0);
        let b = tape.constant(Tensor::row(vec![1.0, 4.0]));
        assert_eq!(pairwise_contrastive(a, b, false, 1.0).unwrap().item(), 0.0);
        let c = tape.constant(Tensor::row(vec![1.0, 2.4]));
        let l = pairwise_contrastive(a, c, false, 1.0).unwrap().item();
        assert!((l - 0.18).abs() < 1e-12, "{l}");
    }

    #[test]
    fn alignment_examples() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![0.2, 0.8]));
        let b = tape.constant(Tensor::row(vec![1.2, 0.8]));
        assert_eq!(alignment_loss_attn(&[a], &[a]).unwrap().item(), 0.0);
        assert!((alignment_loss_attn(&[a], &[b]).unwrap().item() - 1.0).abs() < 1e-12);
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        let y = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 2f64.sqrt()]]).unwrap());
        assert!((alignment_loss_hidden(&[x], &[y]).unwrap().item() - 2.0).abs() < 1e-12);
        let bad = tape.constant(Tensor::row(vec![1.0]));
        assert!(alignment_loss_attn(&[a], &[bad]).is_err());
    }

    #[test]
    fn distinctiveness_examples() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::row(vec![0.0, 0.0]));
        assert_eq!(distinctiveness_loss(&tape, one, one, 1.0).unwrap().item(), 0.0);
        let hi = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap());
        let ha = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.0]]).unwrap());
        let l = distinctiveness_loss(&tape, hi, ha, 1.0).unwrap().item();
        assert!((l - 0.125).abs() < 1e-12, "{l}");
        let far = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![5.0, 0.0]]).unwrap());
        assert_eq!(distinctiveness_loss(&tape, far, far, 1.0).unwrap().item(), 0.0);
    }

    #[test]
    fn siamese_and_grounding_examples() {
        let tape = Tape::new();
        let s = |v| tape.constant(Tensor::scalar(v));
        let l = siamese_contrastive(s(0.3), s(0.5), s(0.125), 0.2).unwrap().item();
        assert!((l - 0.825).abs() < 1e-12);
        assert_eq!(siamese_contrastive(s(0.3), s(0.5), s(9.0), 0.0).unwrap().item(), 0.8);
        let z = tape.constant(col(&[0.0]));
        assert!((grounding_loss(z, &[0], &[1.0]).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        let z = tape.constant(col(&[-40.0, -40.0]));
        assert!(grounding_loss(z, &[], &[1.0, 1.0]).unwrap().item() < 1e-14);
        let z = tape.constant(col(&[40.0, -40.0]));
        assert!(grounding_loss(z, &[0], &[1.0, 1.0]).unwrap().item() < 1e-14);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            deltas: vec![0.5, 1.0, 0.0],
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            deltas: vec![1.0, 0.5],
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
