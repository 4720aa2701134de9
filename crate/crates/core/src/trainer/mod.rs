//! Layerwise coordinate-descent training.
//!
//! Training starts at the layer adjacent to the data and walks down to the
//! code. Within a layer, each epoch alternates a latent solve (SL: every
//! datapoint's latents against the current weights) and a weight solve (SW:
//! every weight row or kernel against the current latents). Both are exact
//! least-squares steps, so the total squared linear residual never
//! increases. A layer stops once the epoch-over-epoch relative improvement
//! of that residual drops below the plateau tolerance. The solved latents
//! then become the targets of the layer below.

mod architecture;

use std::fmt;
use std::io::Write;

pub use architecture::{
    conditions, validate_architecture, Architecture, Condition, Violation, ViolationKind,
};

use crate::activation::Activation;
use crate::conv_layer::WeightSampling;
use crate::error::{shape_err, Error, Result};
use crate::layer::{Layer, LayerSpec};
use crate::linalg::{Matrix, DEFAULT_RANK_TOL};
use crate::parallel;
use crate::rng::{gaussian_vec, stream, Stream};

/// Which solve opens each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FirstStep {
    #[default]
    SolveLatents,
    SolveWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Stop when `(prev − cur) / prev` of the summed squared linear residual
    /// falls below this.
    pub plateau_rel_tol: f64,
    /// Conv kernel solves only; feedforward weight solves always use every
    /// datapoint.
    pub sampling: WeightSampling,
    pub seed: u64,
    pub first_step: FirstStep,
    /// Replace the random linear part of feedforward weights by its
    /// orthonormal QR factor.
    pub orthogonal_init: bool,
    pub rank_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            plateau_rel_tol: 1e-3,
            sampling: WeightSampling::default(),
            seed: 0,
            first_step: FirstStep::SolveLatents,
            orthogonal_init: false,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.plateau_rel_tol.is_nan() || self.plateau_rel_tol <= 0.0 {
            return Err(Error::Config("plateau tolerance must be positive".into()));
        }
        if self.sampling.chunks == 0 {
            return Err(Error::Config("chunk count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Squared residuals at or below this fraction of the target energy count as
/// an exact fit.
const EXACT_FIT: f64 = 1e-24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Random weights and random latents, before any solve.
    Init,
    SolveLatents,
    SolveWeights,
    /// Closing latent solve against the final weights.
    Final,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::SolveLatents => "SL",
            Phase::SolveWeights => "SW",
            Phase::Final => "final",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub level: usize,
    pub epoch: usize,
    pub phase: Phase,
    /// `Σ_n ‖linear(h_n) − a⁻¹(t_n)‖²` over the whole dataset.
    pub linear_residual: f64,
    /// Elastic loss of the reconstruction against the data.
    pub elastic_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerHistory {
    pub level: usize,
    pub steps: Vec<StepRecord>,
    /// Epoch at which the plateau rule fired, if it did.
    pub plateau_epoch: Option<usize>,
    pub epochs_run: usize,
}

impl LayerHistory {
    /// Residual at the end of each epoch, indexed from epoch 1.
    pub fn epoch_residuals(&self) -> Vec<f64> {
        (1..=self.epochs_run)
            .filter_map(|e| {
                self.steps
                    .iter()
                    .rev()
                    .find(|s| {
                        s.epoch == e && matches!(s.phase, Phase::SolveLatents | Phase::SolveWeights)
                    })
                    .map(|s| s.linear_residual)
            })
            .collect()
    }

    /// Elastic loss at the end of `epoch`.
    pub fn epoch_loss(&self, epoch: usize) -> Option<f64> {
        self.steps
            .iter()
            .rev()
            .find(|s| s.epoch == epoch && s.phase != Phase::Final)
            .map(|s| s.elastic_loss)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Per layer, in training order (data side first).
    pub layers: Vec<LayerHistory>,
}

impl History {
    pub fn records(&self) -> impl Iterator<Item = &StepRecord> {
        self.layers.iter().flat_map(|l| l.steps.iter())
    }

    pub fn layer(&self, level: usize) -> Option<&LayerHistory> {
        self.layers.iter().find(|l| l.level == level)
    }

    /// CSV with header `epoch,layer,phase,linear_residual,elastic_loss`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,layer,phase,linear_residual,elastic_loss")?;
        for r in self.records() {
            writeln!(
                out,
                "{},{},{},{:e},{:e}",
                r.epoch, r.level, r.phase, r.linear_residual, r.elastic_loss
            )?;
        }
        Ok(())
    }
}

/// Hook invoked after every recorded step.
pub trait TrainObserver {
    /// `reconstruction` is the current decoder output in data space.
    fn on_step(&mut self, step: &StepRecord, layer: &Layer, reconstruction: &Matrix);
}

impl TrainObserver for () {
    fn on_step(&mut self, _: &StepRecord, _: &Layer, _: &Matrix) {}
}

impl<F: FnMut(&StepRecord, &Layer, &Matrix)> TrainObserver for F {
    fn on_step(&mut self, step: &StepRecord, layer: &Layer, reconstruction: &Matrix) {
        self(step, layer, reconstruction)
    }
}

/// Trained decoder weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    activation: Activation,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new(activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_len() != w[1].in_len() {
                return shape_err(format!(
                    "layer {} outputs {} values but layer {} takes {}",
                    i + 2,
                    w[0].out_len(),
                    i + 3,
                    w[1].in_len()
                ));
            }
        }
        Ok(Self { activation, layers })
    }

    pub fn activation(&self) -> &Activation {
        &self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(
            self.layers.iter().map(Layer::spec).collect(),
            self.activation,
        )
    }

    /// Level of the data (`K`).
    pub fn data_level(&self) -> usize {
        self.layers.len() + 1
    }
}

/// Solved latents for levels `1..K−1` of every datapoint.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    levels: Vec<Matrix>,
}

impl LatentTable {
    pub fn new(levels: Vec<Matrix>) -> Result<Self> {
        if let Some(first) = levels.first() {
            if levels.iter().any(|m| m.rows() != first.rows()) {
                return shape_err("latent levels disagree on the number of datapoints");
            }
        }
        Ok(Self { levels })
    }

    /// Latents at `level` (1 = code).
    pub fn level(&self, level: usize) -> Option<&Matrix> {
        level.checked_sub(1).and_then(|i| self.levels.get(i))
    }

    pub fn code(&self) -> Option<&Matrix> {
        self.levels.first()
    }

    pub fn levels(&self) -> &[Matrix] {
        &self.levels
    }

    pub fn rows(&self) -> usize {
        self.levels.first().map_or(0, Matrix::rows)
    }
}

pub struct TrainOutput {
    pub model: Model,
    pub latents: LatentTable,
    pub history: History,
}

pub struct LayerTraining {
    pub layer: Layer,
    /// Latents solved against the final weights.
    pub latents: Matrix,
    pub history: LayerHistory,
}

/// Mean over datapoints of `‖e‖₁ + ‖e‖₂` where `e = x̂ − x`.
pub fn elastic_loss(reconstruction: &Matrix, data: &Matrix) -> Result<f64> {
    if reconstruction.shape() != data.shape() {
        return shape_err(format!(
            "reconstruction {:?} vs data {:?}",
            reconstruction.shape(),
            data.shape()
        ));
    }
    let n = data.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let per_row = parallel::map_range(n, |i| {
        let (mut l1, mut l2) = (0.0, 0.0);
        for (a, b) in reconstruction.row(i).iter().zip(data.row(i)) {
            let e = a - b;
            l1 += e.abs();
            l2 += e * e;
        }
        l1 + l2.sqrt()
    });
    Ok(per_row.iter().sum::<f64>() / n as f64)
}

fn forward_through(layers: &[Layer], act: &Activation, mut h: Matrix) -> Result<Matrix> {
    for layer in layers {
        h = layer.forward(act, &h)?;
    }
    Ok(h)
}

fn total_squared(
    layer: &Layer,
    act: &Activation,
    latents: &Matrix,
    targets: &Matrix,
) -> Result<f64> {
    Ok(layer
        .linear_residuals(act, latents, targets)?
        .iter()
        .map(|r| r * r)
        .sum())
}

struct LayerContext<'a> {
    level: usize,
    act: &'a Activation,
    targets: &'a Matrix,
    /// Already-trained layers between this one and the data.
    upper: &'a [Layer],
    data: &'a Matrix,
    cfg: &'a TrainConfig,
}

impl LayerContext<'_> {
    fn record(
        &self,
        steps: &mut Vec<StepRecord>,
        observer: &mut dyn TrainObserver,
        epoch: usize,
        phase: Phase,
        layer: &Layer,
        latents: &Matrix,
    ) -> Result<f64> {
        let linear_residual = total_squared(layer, self.act, latents, self.targets)?;
        let out = layer.forward(self.act, latents)?;
        let recon = forward_through(self.upper, self.act, out)?;
        let elastic = elastic_loss(&recon, self.data)?;
        let step = StepRecord {
            level: self.level,
            epoch,
            phase,
            linear_residual,
            elastic_loss: elastic,
        };
        observer.on_step(&step, layer, &recon);
        steps.push(step);
        Ok(linear_residual)
    }
}

fn train_layer_in(
    spec: &LayerSpec,
    ctx: &LayerContext<'_>,
    observer: &mut dyn TrainObserver,
) -> Result<LayerTraining> {
    let cfg = ctx.cfg;
    cfg.check()?;
    ctx.act.check_invertible()?;
    let level = ctx.level;
    let n = ctx.targets.rows();
    if ctx.targets.cols() != spec.out_len() {
        return shape_err(format!(
            "layer at level {level} produces {} values, targets have {}",
            spec.out_len(),
            ctx.targets.cols()
        ));
    }

    let mut layer = Layer::random(spec, cfg.orthogonal_init, cfg.rank_tol, |attempt| {
        stream(cfg.seed, Stream::WeightInit { level, attempt })
    })?;
    let mut latents = Matrix::from_raw(
        n,
        spec.in_len(),
        gaussian_vec(
            &mut stream(cfg.seed, Stream::InitialLatents { level }),
            n * spec.in_len(),
            1.0,
        ),
    );

    let mut steps = Vec::new();
    ctx.record(&mut steps, observer, 0, Phase::Init, &layer, &latents)?;

    let energy: f64 = ctx
        .targets
        .as_slice()
        .iter()
        .map(|&t| ctx.act.invert_scalar(t).powi(2))
        .sum();
    let phases = match cfg.first_step {
        FirstStep::SolveLatents => [Phase::SolveLatents, Phase::SolveWeights],
        FirstStep::SolveWeights => [Phase::SolveWeights, Phase::SolveLatents],
    };

    let mut previous: Option<f64> = None;
    let mut plateau_epoch = None;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut current = 0.0;
        for &phase in &phases {
            match phase {
                Phase::SolveLatents => {
                    latents = layer.solve_latents(ctx.act, ctx.targets, cfg.rank_tol)?.0;
                }
                _ => {
                    let mut rng = stream(cfg.seed, Stream::WeightSample { level, epoch });
                    layer = layer.solve_weights(
                        &latents,
                        ctx.act,
                        ctx.targets,
                        cfg.sampling,
                        &mut rng,
                        cfg.rank_tol,
                    )?;
                }
            }
            current = ctx.record(&mut steps, observer, epoch, phase, &layer, &latents)?;
        }
        epochs_run = epoch;
        if let Some(prev) = previous {
            let exact = current <= EXACT_FIT * energy;
            let improvement = if prev > 0.0 {
                (prev - current) / prev
            } else {
                0.0
            };
            if exact || improvement < cfg.plateau_rel_tol {
                plateau_epoch = Some(epoch);
                break;
            }
        }
        previous = Some(current);
    }

    if phases[1] == Phase::SolveWeights {
        latents = layer.solve_latents(ctx.act, ctx.targets, cfg.rank_tol)?.0;
        ctx.record(
            &mut steps,
            observer,
            epochs_run,
            Phase::Final,
            &layer,
            &latents,
        )?;
    }

    Ok(LayerTraining {
        layer,
        latents,
        history: LayerHistory {
            level,
            steps,
            plateau_epoch,
            epochs_run,
        },
    })
}

/// Trains a single layer (at level 2) against `targets`, which also serve as
/// the data for the elastic loss.
pub fn train_layer(
    spec: &LayerSpec,
    act: &Activation,
    targets: &Matrix,
    cfg: &TrainConfig,
) -> Result<LayerTraining> {
    train_layer_with_observer(spec, act, targets, cfg, &mut ())
}

pub fn train_layer_with_observer(
    spec: &LayerSpec,
    act: &Activation,
    targets: &Matrix,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<LayerTraining> {
    let ctx = LayerContext {
        level: 2,
        act,
        targets,
        upper: &[],
        data: targets,
        cfg,
    };
    train_layer_in(spec, &ctx, observer)
}

/// Trains every layer, data side first.
pub fn train(arch: &Architecture, data: &Matrix, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(arch, data, cfg, &mut ())
}

pub fn train_with_observer(
    arch: &Architecture,
    data: &Matrix,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutput> {
    cfg.check()?;
    let violations = validate_architecture(arch, data.rows());
    if !violations.is_empty() {
        return Err(Error::InvalidArchitecture(violations));
    }
    if data.cols() != arch.data_len() {
        return shape_err(format!(
            "architecture produces {} values per datapoint, data has {}",
            arch.data_len(),
            data.cols()
        ));
    }
    let act = *arch.activation();
    let count = arch.layers().len();
    let mut trained: Vec<Layer> = Vec::with_capacity(count);
    let mut latents: Vec<Matrix> = Vec::with_capacity(count);
    let mut history = History::default();
    let mut targets = data.clone();

    for (i, spec) in arch.layers().iter().enumerate().rev() {
        // `trained` holds the layers above this one, nearest first.
        let upper: Vec<Layer> = trained.iter().rev().cloned().collect();
        let ctx = LayerContext {
            level: i + 2,
            act: &act,
            targets: &targets,
            upper: &upper,
            data,
            cfg,
        };
        let out = train_layer_in(spec, &ctx, observer)?;
        history.layers.push(out.history);
        trained.push(out.layer);
        latents.push(out.latents.clone());
        targets = out.latents;
    }

    trained.reverse();
    latents.reverse();
    Ok(TrainOutput {
        model: Model::new(act, trained)?,
        latents: LatentTable::new(latents)?,
        history,
    })
}

/// Latent-only recursion from the data down to the code; weights untouched.
pub fn infer_latents(model: &Model, data: &Matrix) -> Result<LatentTable> {
    infer_latents_with_tol(model, data, DEFAULT_RANK_TOL)
}

pub fn infer_latents_with_tol(model: &Model, data: &Matrix, rank_tol: f64) -> Result<LatentTable> {
    let mut levels = Vec::with_capacity(model.layers.len());
    let mut targets = data.clone();
    for layer in model.layers.iter().rev() {
        let (h, _) = layer.solve_latents(&model.activation, &targets, rank_tol)?;
        levels.push(h.clone());
        targets = h;
    }
    levels.reverse();
    LatentTable::new(levels)
}

/// Forward pass from `level` latents to the data. Data-level input
/// (`level == K`) is returned unchanged.
pub fn reconstruct(model: &Model, level: usize, latents: &Matrix) -> Result<Matrix> {
    let k = model.data_level();
    if level == 0 || level > k {
        return shape_err(format!("level {level} outside 1..={k}"));
    }
    forward_through(
        &model.layers[level - 1..],
        &model.activation,
        latents.clone(),
    )
}
