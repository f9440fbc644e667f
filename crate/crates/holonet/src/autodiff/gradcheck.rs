//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared against central differences.
    pub checked: usize,
    /// Coordinates skipped as non-smooth (one-sided slopes disagree,
    /// e.g. a max-pool tie).
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// One-sided slopes must agree to this fraction of their scale for a
/// coordinate to count as smooth.
const KINK_TOLERANCE: f64 = 1e-3;

/// Compare every analytic partial of `build`'s output against central finite
/// differences with the given `step`.
///
/// `build` receives one leaf per input tensor and returns the output node.
/// A non-scalar output is reduced through an MSE head against a fixed
/// pseudo-random target so every output coordinate carries a distinct weight.
/// Coordinates where the left/right difference quotients disagree
/// (non-differentiable points such as pooling ties) are skipped and counted.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], step: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
{
    let build_loss = |tensors: &[Tensor<f64>]| -> (Graph<f64>, Vec<NodeId>, NodeId) {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &ids);
        let loss = if g.value(out).len() == 1 {
            out
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
            let target = Tensor::new(
                g.value(out).shape(),
                (0..g.value(out).len())
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            )
            .expect("target shape");
            g.mse_mean(out, &target).expect("reduction head")
        };
        (g, ids, loss)
    };
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let (g, _, loss) = build_loss(tensors);
        g.value(loss).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let (mut g0, ids, loss) = build_loss(&work);
    let f0 = g0.value(loss).item();
    g0.backward(loss).expect("backward");
    let grads: Vec<Tensor<f64>> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            g0.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for ti in 0..inputs.len() {
        for i in 0..inputs[ti].len() {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + step;
            let f_plus = eval(&work);
            work[ti].data_mut()[i] = orig - step;
            let f_minus = eval(&work);
            work[ti].data_mut()[i] = orig;

            let d_plus = (f_plus - f0) / step;
            let d_minus = (f0 - f_minus) / step;
            let scale = d_plus.abs().max(d_minus.abs()).max(1.0);
            if (d_plus - d_minus).abs() > KINK_TOLERANCE * scale {
                report.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = grads[ti].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
