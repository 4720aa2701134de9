use rand::Rng;

use crate::activation::Activation;
use crate::conv_layer::{ConvShape, ConvUnpoolLayer, WeightSampling};
use crate::diagnostics::ResidualReport;
use crate::error::Result;
use crate::ff_layer::FeedforwardLayer;
use crate::linalg::Matrix;

/// Shape of one decoder layer, without weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Feedforward { in_dim: usize, out_dim: usize },
    ConvUnpool(ConvShape),
}

impl LayerSpec {
    pub fn in_len(&self) -> usize {
        match self {
            LayerSpec::Feedforward { in_dim, .. } => *in_dim,
            LayerSpec::ConvUnpool(s) => s.in_len(),
        }
    }

    pub fn out_len(&self) -> usize {
        match self {
            LayerSpec::Feedforward { out_dim, .. } => *out_dim,
            LayerSpec::ConvUnpool(s) => s.out_len(),
        }
    }

    /// Unknowns per weight-system right-hand side.
    pub fn weight_unknowns(&self) -> usize {
        match self {
            LayerSpec::Feedforward { in_dim, .. } => in_dim + 1,
            LayerSpec::ConvUnpool(s) => s.patch_len(),
        }
    }

    /// Weight-system equations available from `n` datapoints.
    pub fn weight_equations(&self, n: usize) -> usize {
        match self {
            LayerSpec::Feedforward { .. } => n,
            LayerSpec::ConvUnpool(s) => n * s.patches_per_image(),
        }
    }
}

/// A trained or initialized layer of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Feedforward(FeedforwardLayer),
    ConvUnpool(ConvUnpoolLayer),
}

impl Layer {
    pub(crate) fn random<R: Rng>(
        spec: &LayerSpec,
        orthogonal: bool,
        rank_tol: f64,
        next_rng: impl FnMut(usize) -> R,
    ) -> Result<Self> {
        Ok(match spec {
            LayerSpec::Feedforward { in_dim, out_dim } => Layer::Feedforward(
                FeedforwardLayer::random(*in_dim, *out_dim, orthogonal, rank_tol, next_rng)?,
            ),
            LayerSpec::ConvUnpool(s) => {
                Layer::ConvUnpool(ConvUnpoolLayer::random(*s, rank_tol, next_rng)?)
            }
        })
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Feedforward(l) => LayerSpec::Feedforward {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
            },
            Layer::ConvUnpool(l) => LayerSpec::ConvUnpool(*l.shape()),
        }
    }

    pub fn in_len(&self) -> usize {
        self.spec().in_len()
    }

    pub fn out_len(&self) -> usize {
        self.spec().out_len()
    }

    /// Weight matrix as stored in model files.
    pub fn weights(&self) -> &Matrix {
        match self {
            Layer::Feedforward(l) => l.weights(),
            Layer::ConvUnpool(l) => l.kernels(),
        }
    }

    pub fn forward(&self, act: &Activation, inputs: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Feedforward(l) => l.forward(act, inputs),
            Layer::ConvUnpool(l) => l.forward(act, inputs),
        }
    }

    pub fn solve_latents(
        &self,
        act: &Activation,
        targets: &Matrix,
        rank_tol: f64,
    ) -> Result<(Matrix, ResidualReport)> {
        match self {
            Layer::Feedforward(l) => l.solve_latents(act, targets, rank_tol),
            Layer::ConvUnpool(l) => l.solve_latents(act, targets, rank_tol),
        }
    }

    pub fn linear_residuals(
        &self,
        act: &Activation,
        latents: &Matrix,
        targets: &Matrix,
    ) -> Result<Vec<f64>> {
        match self {
            Layer::Feedforward(l) => l.linear_residuals(act, latents, targets),
            Layer::ConvUnpool(l) => l.linear_residuals(act, latents, targets),
        }
    }

    /// Solves fresh weights of the same shape for the given latents.
    pub(crate) fn solve_weights<R: Rng>(
        &self,
        inputs: &Matrix,
        act: &Activation,
        targets: &Matrix,
        sampling: WeightSampling,
        rng: &mut R,
        rank_tol: f64,
    ) -> Result<Layer> {
        Ok(match self {
            Layer::Feedforward(_) => Layer::Feedforward(
                FeedforwardLayer::solve_weights(inputs, act, targets, rank_tol)?.0,
            ),
            Layer::ConvUnpool(l) => Layer::ConvUnpool(
                ConvUnpoolLayer::solve_weights(
                    *l.shape(),
                    inputs,
                    act,
                    targets,
                    sampling,
                    rng,
                    rank_tol,
                )?
                .0,
            ),
        })
    }
}
