//! Self-contained correctness checks for the full model and loss.

use crate::autodiff::{grad_check, Activation, Fault, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::gat::{init_params, ModelConfig};
use crate::graph::PreparedGraph;
use crate::objective::loss;
use crate::synth::{generate, SynthConfig};

/// Small instance: `6..=max_nodes` nodes, 2 or 3 clusters, a full two-branch,
/// two-layer, two-head architecture with narrow widths.
pub fn gradcheck_instance(seed: u64, max_nodes: usize, activation: Activation) -> Result<(PreparedGraph<f64>, ModelConfig)> {
    let max_nodes = max_nodes.max(4);
    let span = max_nodes.saturating_sub(6) as u64 + 1;
    let nodes = (max_nodes.min(6) as u64 + seed % span) as usize;
    let clusters = 2 + (seed % 2) as usize;
    let mut last_err = None;
    for attempt in 0..16u64 {
        let synth = SynthConfig {
            nodes,
            blocks: 2,
            noise: 0.6,
            dim: 5,
            seed: seed.wrapping_mul(7919).wrapping_add(attempt),
            patch: 1,
        };
        let p = generate::<f64>(&synth)?;
        match PreparedGraph::from_features(&p.features.features, 0.3) {
            Ok(image) => {
                let mcfg = ModelConfig {
                    branches: 2,
                    layers_per_branch: 2,
                    branch_dims: vec![6, 4],
                    agg_dim: 5,
                    clusters,
                    heads: 2,
                    activation,
                    leaky_slope: 0.2,
                    seed,
                };
                return Ok((image, mcfg));
            }
            Err(e @ Error::EmptyGraph { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or(Error::Empty("gradcheck instance")))
}

/// Finite-difference check of the loss gradient through every model parameter.
pub fn model_grad_check(
    image: &PreparedGraph<f64>,
    mcfg: &ModelConfig,
    step: f64,
    tol: f64,
    fault: Option<Fault>,
) -> Result<GradCheckReport> {
    let model = init_params::<f64>(mcfg, image.features.cols())?;
    let mut params: Vec<(String, crate::tensor::Tensor<f64>)> = model
        .parameters()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    grad_check(
        |tape: &mut Tape<f64>, vars| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
            let x = tape.constant(image.features.clone());
            let c = model.forward_on_tape(tape, vars, x, &image.neighborhoods)?;
            loss(tape, &image.modularity, c)
        },
        &mut params,
        step,
        tol,
    )
}
