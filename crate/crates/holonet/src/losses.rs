//! Channel-specific training losses: Huber on the depth channel,
//! TV-regularized MSE on the centroid channel.
//!
//! Losses are graph operations so gradients flow to the prediction; targets
//! are constants. All reductions are means, keeping magnitudes independent
//! of image resolution and batch size.

use crate::autodiff::{AutodiffError, Element, Graph, NodeId, Tensor};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// How the total-variation term enters the centroid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMode {
    /// alpha * TV(Y)^2, the printed form of the regularized loss.
    #[default]
    Squared,
    /// alpha * TV(Y), the form common in iterative-inversion practice.
    Linear,
}

/// Parameters of the combined two-channel loss.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Huber threshold on the depth channel (synthetic default 0.002).
    pub delta: f64,
    /// TV blend weight on the centroid channel (~1e-4).
    pub alpha: f64,
    /// Weight of the depth-channel Huber term.
    pub depth_weight: f64,
    /// Weight of the centroid-channel term.
    pub centroid_weight: f64,
    pub tv_mode: TvMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.002,
            alpha: 1e-4,
            depth_weight: 1.0,
            centroid_weight: 1.0,
            tv_mode: TvMode::Squared,
        }
    }
}

impl LossConfig {
    /// Plain-MSE ablation mode: quadratic branch everywhere on the depth
    /// channel (delta = infinity carries Huber's 1/2 factor) and no TV term.
    pub fn mse_only() -> Self {
        Self {
            delta: f64::INFINITY,
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.delta > 0.0) {
            return Err(LossError::InvalidConfig(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(LossError::InvalidConfig(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.depth_weight < 0.0 || self.centroid_weight < 0.0 {
            return Err(LossError::InvalidConfig(
                "channel weights must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Mean elementwise Huber loss; quadratic within `delta`, linear outside,
/// with a continuous first derivative at the threshold.
pub fn huber_loss<T: Element>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    delta: f64,
) -> Result<NodeId, LossError> {
    Ok(g.huber_mean(pred, target, T::from_f64(delta))?)
}

/// Smoothed total variation of single-channel images, summed per image and
/// averaged over the batch.
pub fn total_variation<T: Element>(g: &mut Graph<T>, pred: NodeId) -> Result<NodeId, LossError> {
    Ok(g.tv_mean(pred)?)
}

/// Centroid-channel loss: (1 - alpha) * MSE + alpha * TV^2 (or linear TV).
pub fn centroid_loss<T: Element>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let mse = g.mse_mean(pred, target)?;
    if cfg.alpha == 0.0 {
        return Ok(mse);
    }
    let tv = g.tv_mean(pred)?;
    let tv_term = match cfg.tv_mode {
        TvMode::Squared => g.square(tv),
        TvMode::Linear => tv,
    };
    Ok(g.lincomb(&[
        (mse, T::from_f64(1.0 - cfg.alpha)),
        (tv_term, T::from_f64(cfg.alpha)),
    ])?)
}

/// Combined two-channel loss over predictions of shape [b, 2, h, w]:
/// depth_weight * Huber(channel 0) + centroid_weight * centroid(channel 1).
pub fn combined_loss<T: Element>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let (b, c, h, w) = g.value(pred).dims4();
    if c != 2 || g.value(pred).shape() != target.shape() {
        return Err(LossError::Autodiff(AutodiffError::Shape {
            op: "combined_loss",
            detail: format!(
                "pred {:?} vs target {:?}, 2 channels required",
                g.value(pred).shape(),
                target.shape()
            ),
        }));
    }
    let depth_target = slice_channel(target, b, h, w, 0);
    let centroid_target = slice_channel(target, b, h, w, 1);
    let depth_pred = g.slice_channels(pred, 0, 1)?;
    let centroid_pred = g.slice_channels(pred, 1, 1)?;
    let depth = huber_loss(g, depth_pred, &depth_target, cfg.delta)?;
    let centroid = centroid_loss(g, centroid_pred, &centroid_target, cfg)?;
    Ok(g.lincomb(&[
        (depth, T::from_f64(cfg.depth_weight)),
        (centroid, T::from_f64(cfg.centroid_weight)),
    ])?)
}

fn slice_channel<T: Element>(t: &Tensor<T>, b: usize, h: usize, w: usize, c: usize) -> Tensor<T> {
    let hw = h * w;
    let mut data = Vec::with_capacity(b * hw);
    for item in 0..b {
        let src = (item * 2 + c) * hw;
        data.extend_from_slice(&t.data()[src..src + hw]);
    }
    Tensor::new(&[b, 1, h, w], data).expect("channel slice shape")
}
