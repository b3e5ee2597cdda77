//! Nonlinear structural-equation graph autoencoder.
//!
//! Reconstruction is `X̂ = g₂(Aᵀ g₁(X))`: `g₁` and `g₂` act on each node's
//! feature row with parameters shared across nodes, and `Aᵀ` sums every
//! node's encoded parents. The loss is `‖X − X̂‖²_F / (2n)` where `n` is the
//! number of node rows (nodes × samples when a batch is stacked).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GaetsError, Result};
use crate::nn::{Activation, Bound, Mlp, Params};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemAutoencoder {
    pub g1: Mlp,
    pub g2: Mlp,
}

impl SemAutoencoder {
    /// `g₁: d_feat → d_sem → d_sem` and `g₂: d_sem → d_sem → d_feat`, each one
    /// ReLU hidden layer with a linear output.
    pub fn new<R: Rng + ?Sized>(params: &mut Params, d_feat: usize, d_sem: usize, rng: &mut R) -> Self {
        SemAutoencoder {
            g1: Mlp::new(params, "sem/g1", &[d_feat, d_sem, d_sem], Activation::Relu, Activation::Identity, rng),
            g2: Mlp::new(params, "sem/g2", &[d_sem, d_sem, d_feat], Activation::Relu, Activation::Identity, rng),
        }
    }

    /// `x` is `(blocks·n) × d_feat`, `adjacency` is `n × n`.
    pub fn reconstruct(&self, tape: &mut Tape, bound: &Bound, x: Var, adjacency: Var) -> Var {
        let encoded = self.g1.forward(tape, bound, x);
        let at = tape.transpose(adjacency);
        let mixed = tape.graph_mix(at, encoded);
        self.g2.forward(tape, bound, mixed)
    }

    pub fn loss(&self, tape: &mut Tape, bound: &Bound, x: Var, adjacency: Var) -> Var {
        let rows = tape.shape(x).0;
        let recon = self.reconstruct(tape, bound, x, adjacency);
        let residual = tape.sub(x, recon);
        let sq = tape.square(residual);
        let total = tape.sum(sq);
        tape.scale(total, 1.0 / (2.0 * rows as f64))
    }
}

fn check_shapes(x: &Array2<f64>, adjacency: &Array2<f64>) -> Result<()> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(GaetsError::dim("SEM adjacency", format!("{n}x{n}"), format!("{:?}", adjacency.dim())));
    }
    if n == 0 || x.nrows() % n != 0 {
        return Err(GaetsError::dim("SEM input rows", format!("a multiple of {n}"), x.nrows()));
    }
    Ok(())
}

/// `g₂(Aᵀ g₁(X))` for a node-feature matrix `x` (`n × d_feat`, or a stack of
/// such blocks).
pub fn sem_reconstruct(
    sem: &SemAutoencoder,
    params: &Params,
    x: &Array2<f64>,
    adjacency: &Array2<f64>,
) -> Result<Array2<f64>> {
    check_shapes(x, adjacency)?;
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let av = tape.constant(adjacency.clone());
    let out = sem.reconstruct(&mut tape, &bound, xv, av);
    if tape.shape(out) != x.dim() {
        return Err(GaetsError::dim("SEM output", format!("{:?}", x.dim()), format!("{:?}", tape.shape(out))));
    }
    Ok(tape.value(out).clone())
}

/// `‖X − g₂(Aᵀ g₁(X))‖²_F / (2n)`.
pub fn autoencoder_loss(sem: &SemAutoencoder, params: &Params, x: &Array2<f64>, adjacency: &Array2<f64>) -> Result<f64> {
    let recon = sem_reconstruct(sem, params, x, adjacency)?;
    Ok(reconstruction_loss(x, &recon))
}

/// `‖x − recon‖²_F / (2·rows)`.
pub fn reconstruction_loss(x: &Array2<f64>, recon: &Array2<f64>) -> f64 {
    let sq: f64 = x.iter().zip(recon.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * x.nrows() as f64)
}

/// Mean squared reconstruction error of every node, averaged over the stacked
/// blocks of `x`.
pub fn per_node_error(recon: &Array2<f64>, x: &Array2<f64>, n: usize) -> Vec<f64> {
    let blocks = x.nrows() / n;
    let mut err = vec![0.0; n];
    for (r, (xr, rr)) in x.rows().into_iter().zip(recon.rows()).enumerate() {
        let sq: f64 = xr.iter().zip(rr.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        err[r % n] += sq / xr.len() as f64;
    }
    err.iter_mut().for_each(|e| *e /= blocks.max(1) as f64);
    err
}
