//! α/β grid over the inference phase, all points sharing one auxiliary
//! checkpoint and seed.

use crate::error::{Error, Result};
use crate::eval::{f1_at_threshold, MetricsTable};
use crate::model::Phase;
use crate::scene::{Dataset, Subset};
use crate::trainer::{train_inference_with, Checkpoint, EpochLog, TrainConfig, TrainOutput};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub alpha: f64,
    pub beta: f64,
    pub metrics: MetricsTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `alpha,beta,<five subsets>,all`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,beta");
        for sub in Subset::ALL {
            s.push(',');
            s.push_str(sub.label());
        }
        s.push_str(",all\n");
        for r in &self.rows {
            s.push_str(&format!("{},{}", r.alpha, r.beta));
            for sub in Subset::ALL {
                s.push_str(&format!(",{}", r.metrics.get(sub).f1));
            }
            s.push_str(&format!(",{}\n", r.metrics.all.f1));
        }
        s
    }
}

/// Trains one student for (`alpha`, `beta`) and scores it on `eval`.
pub fn run_point(
    train: &Dataset,
    eval: &Dataset,
    aux: &Checkpoint,
    base: &TrainConfig,
    alpha: f64,
    beta: f64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(TrainOutput, MetricsTable)> {
    let mut config = base.clone();
    config.phase = Phase::Inference;
    config.loss.alpha = alpha;
    config.loss.beta = beta;
    let out = train_inference_with(train, aux, &config, on_epoch)?;
    let metrics = f1_at_threshold(eval, &out.checkpoint, 0.5)?;
    Ok((out, metrics))
}

/// Cartesian grid `alphas x betas`, alpha-major.
pub fn ablation_grid(
    train: &Dataset,
    eval: &Dataset,
    aux: &Checkpoint,
    base: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
) -> Result<AblationTable> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("ablation needs at least one alpha and one beta".into()));
    }
    let mut rows = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let (_, metrics) = run_point(train, eval, aux, base, alpha, beta, |_| {})?;
            rows.push(AblationRow { alpha, beta, metrics });
        }
    }
    Ok(AblationTable { rows })
}
