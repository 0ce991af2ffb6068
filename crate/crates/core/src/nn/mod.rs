//! Dense tensors, reverse-mode differentiation and the conditional denoiser.

mod denoiser;
mod graph;
mod tensor;

use thiserror::Error;

pub use denoiser::{
    edm_precondition, noise_embedding, Denoiser, DenoiserConfig, DenoiserInput, EdmParams,
    Preconditioning, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};
pub use graph::{Grads, Graph, Var, GN_EPS};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("model expects a mask channel but none was given")]
    MissingMask,
    #[error("model has no mask channel but a mask was given")]
    UnexpectedMask,
    #[error("weights format: {0}")]
    Format(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Finite-difference verification in 64-bit arithmetic.
pub mod gradcheck {
    use super::*;

    /// Max relative error between analytic and central-difference gradients of
    /// `f` with respect to every element of every parameter.
    pub fn max_rel_error(
        params: &[Tensor<f64>],
        f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
        eps: f64,
    ) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars);
        let grads = g.backward(root);
        let mut worst = 0.0f64;
        for (pi, p) in params.iter().enumerate() {
            let analytic = grads.get(vars[pi]).expect("gradient present");
            for i in 0..p.len() {
                let eval = |delta: f64| {
                    let mut ps = params.to_vec();
                    ps[pi].data[i] += delta;
                    let mut g = Graph::new();
                    let vs: Vec<Var> = ps.into_iter().map(|t| g.param(t)).collect();
                    let r = f(&mut g, &vs);
                    g.value(r).data[0]
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.data[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }
}
