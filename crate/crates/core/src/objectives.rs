//! Training objectives.
//!
//! The foreground-normalized MSE sums squared errors over every pixel and channel
//! but divides by the foreground area (clamped below by `a_min`) instead of the
//! pixel count, so small objects are not drowned out by a large, easily copied
//! background.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{compensated_sum, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    FnMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub a_min: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::FnMse,
            a_min: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_min > 0.0 && self.a_min.is_finite()) {
            return Err(Error::Validation(vec![format!(
                "a_min must be positive, got {}",
                self.a_min
            )]));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, pred: Var, target: &Tensor, op: &'static str) -> Result<()> {
    tape.shape(pred).expect_eq(&target.shape(), op)
}

pub(crate) fn check_mask_range(mask: &Tensor) -> Result<()> {
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(vec![format!(
            "mask values must lie in [0, 1], found {v}"
        )]));
    }
    Ok(())
}

/// Per-sample `Σ‖pred − target‖² / max(a_min, Σ mask)`, averaged over the batch.
pub fn fn_mse(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    mask: &Tensor,
    a_min: f64,
) -> Result<Var> {
    const OP: &str = "fn_mse";
    check_pair(tape, pred, target, OP)?;
    let ps = tape.shape(pred);
    ps.with_channels(1).expect_eq(&mask.shape(), OP)?;
    check_mask_range(mask)?;
    if !(a_min > 0.0) {
        return Err(Error::argument(
            OP,
            format!("a_min must be positive, got {a_min}"),
        ));
    }

    let per_sample = ps.channels * ps.plane();
    let plane = ps.plane();
    let diff: Vec<f64> = tape
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| p - t)
        .collect();
    let denominators: Vec<f64> = mask
        .data()
        .chunks(plane)
        .map(|m| compensated_sum(m.iter().copied()).max(a_min))
        .collect();
    let batch = ps.batch as f64;
    let loss = compensated_sum(
        diff.chunks(per_sample)
            .zip(&denominators)
            .map(|(d, den)| compensated_sum(d.iter().map(|v| v * v)) / den),
    ) / batch;

    let vjp = move |g: &Tensor| {
        let gv = g.data()[0];
        let mut grad = Tensor::zeros(ps);
        for ((out, d), den) in grad
            .data_mut()
            .chunks_mut(per_sample)
            .zip(diff.chunks(per_sample))
            .zip(&denominators)
        {
            let scale = 2.0 * gv / (batch * den);
            for (o, v) in out.iter_mut().zip(d) {
                *o = scale * v;
            }
        }
        vec![grad]
    };
    Ok(tape.custom(Tensor::scalar(loss), vec![pred], vjp))
}

/// Mean of squared differences over every element.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    check_pair(tape, pred, target, "mse_loss")?;
    let ps = tape.shape(pred);
    let diff: Vec<f64> = tape
        .value(pred)
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| p - t)
        .collect();
    let n = diff.len() as f64;
    let loss = compensated_sum(diff.iter().map(|v| v * v)) / n;
    let vjp = move |g: &Tensor| {
        let scale = 2.0 * g.data()[0] / n;
        let data = diff.iter().map(|v| scale * v).collect();
        vec![Tensor::from_vec(ps, data).expect("shape")]
    };
    Ok(tape.custom(Tensor::scalar(loss), vec![pred], vjp))
}

/// The configured training loss.
pub fn loss(
    tape: &mut Tape,
    config: &LossConfig,
    pred: Var,
    target: &Tensor,
    mask: &Tensor,
) -> Result<Var> {
    match config.kind {
        LossKind::FnMse => fn_mse(tape, pred, target, mask, config.a_min),
        LossKind::Mse => mse_loss(tape, pred, target),
    }
}
