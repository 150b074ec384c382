//! Worst-case L2 input perturbations and the adversarial training objective.

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient norms below this are treated as zero.
pub const ZERO_GRAD_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    /// L2 budget of the perturbation.
    pub epsilon: f64,
    /// Weight-decay factor `λ` in `(λ/2)‖θ‖²`.
    pub reg_lambda: f64,
}

impl PerturbationConfig {
    pub fn new(epsilon: f64, reg_lambda: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !(reg_lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need epsilon > 0 and lambda >= 0, got {epsilon}, {reg_lambda}"
            )));
        }
        Ok(Self { epsilon, reg_lambda })
    }
}

/// `R = -ε g / ‖g‖₂` where `g` is the gradient of the log-likelihood.
pub fn adversarial_perturbation(g: &Tensor, epsilon: f64) -> Result<Tensor> {
    let norm = g.l2_norm();
    if norm < ZERO_GRAD_NORM {
        return Err(Error::ZeroGradient);
    }
    g.scale(-epsilon / norm)
}

/// A differentiable model seen through its per-example loss
/// `-log p(y | input)`.
pub trait LikelihoodModel {
    /// `-log p(target | input; θ)`.
    fn loss(&self, input: &Tensor, target: &Tensor) -> f64;

    /// `∇_input [-log p(target | input; θ)]`.
    fn input_gradient(&self, input: &Tensor, target: &Tensor) -> Tensor;

    /// Flattened parameters `θ`, for the weight-decay term.
    fn parameters(&self) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialObjective {
    pub total: f64,
    pub adversarial: f64,
    pub empirical: f64,
    pub regularizer: f64,
    /// Examples whose input gradient vanished; their perturbation is zero.
    pub zero_gradient_examples: Vec<usize>,
}

/// Adversarial loss on perturbed inputs plus empirical loss plus weight decay.
///
/// The perturbation is computed once per example from the current model and
/// held fixed (no gradient flows through it).
pub fn adversarial_total_loss<M: LikelihoodModel + ?Sized>(
    model: &M,
    batch: &[(Tensor, Tensor)],
    config: &PerturbationConfig,
) -> Result<AdversarialObjective> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut adversarial = 0.0;
    let mut empirical = 0.0;
    let mut zero_gradient_examples = Vec::new();
    for (idx, (input, target)) in batch.iter().enumerate() {
        // g = ∇ log p = -∇ loss
        let g = model.input_gradient(input, target).scale(-1.0)?;
        let perturbed = match adversarial_perturbation(&g, config.epsilon) {
            Ok(r) => input.add(&r)?,
            Err(Error::ZeroGradient) => {
                warn!("example {idx}: zero input gradient, using an unperturbed input");
                zero_gradient_examples.push(idx);
                input.clone()
            }
            Err(e) => return Err(e),
        };
        adversarial += inv_n * model.loss(&perturbed, target);
        empirical += inv_n * model.loss(input, target);
    }
    let theta = model.parameters();
    let regularizer = 0.5 * config.reg_lambda * theta.iter().map(|t| t * t).sum::<f64>();
    Ok(AdversarialObjective {
        total: adversarial + empirical + regularizer,
        adversarial,
        empirical,
        regularizer,
        zero_gradient_examples,
    })
}
