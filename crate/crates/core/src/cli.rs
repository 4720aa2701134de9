//! Command-line front end.
//!
//! Every run option can come from a flat `key = value` config file
//! (`--config`); flags given on the command line override it. Keys are the
//! long flag names without dashes, e.g. `plateau-tol = 0.01`.
//!
//! Failures print one line to stderr,
//! `error kind=<Kind> message="<text>"`, and exit with a code unique to the
//! kind (see [`exit_code`]).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::activation::{Activation, DEFAULT_SLOPE};
use crate::conv_layer::WeightSampling;
use crate::data_io::{self, ImageBatch};
use crate::diagnostics::{flag_outliers, residual_report, DEFAULT_Z};
use crate::error::{Error, Result};
use crate::layer::Layer;
use crate::linalg::Matrix;
use crate::parallel::with_workers;
use crate::trainer::{self, conditions, Architecture, FirstStep, Model, StepRecord, TrainConfig};

pub const MODEL_FILE: &str = "model.star";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Parser, Debug)]
#[command(
    name = "gradfree",
    version,
    about = "Gradient-free decoder training by layerwise least squares"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a decoder and write the model, metrics and progress grids.
    Train(RunArgs),
    /// Solve latents of every level for a dataset under a trained model.
    Infer(RunArgs),
    /// Render decoder outputs from latents or from raw inputs.
    Reconstruct(RunArgs),
    /// Print the solvability table for an architecture and dataset size.
    Validate(RunArgs),
    /// Per-datapoint residuals and outlier flags for every layer.
    Diagnose(RunArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FirstStepArg {
    Sl,
    Sw,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat key = value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `idx:PATH` or `cifar10:PATH`; a bare path is read as IDX.
    #[arg(long)]
    dataset: Option<String>,
    /// `d1,d2,…,dK` or `conv:CxHxW:k7m4u2[,k..m..u..]`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "plateau-tol")]
    plateau_tol: Option<f64>,
    /// Images sampled per conv kernel solve (all when absent).
    #[arg(long = "sample-size")]
    sample_size: Option<usize>,
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Solver threads.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write a reconstruction grid after every training step.
    #[arg(long = "progress-images")]
    progress_images: bool,
    #[arg(long = "first-step", value_enum)]
    first_step: Option<FirstStepArg>,
    /// Use only the first N datapoints.
    #[arg(long)]
    limit: Option<usize>,
    /// Images per output grid.
    #[arg(long = "num-samples")]
    num_samples: Option<usize>,
    /// Outlier threshold in standard deviations.
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Latent CSV to reconstruct from.
    #[arg(long)]
    latents: Option<PathBuf>,
    /// Level of `--latents` (1 = code).
    #[arg(long)]
    level: Option<usize>,
    /// Image shape `CxHxW` of decoder outputs, when the model cannot tell.
    #[arg(long = "image-shape")]
    image_shape: Option<String>,
}

/// Exit status for each error kind; `0` is success and `2` a usage error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 3,
        Error::ShapeMismatch(_) => 4,
        Error::NonFinite { .. } => 5,
        Error::RankDeficient { .. } => 6,
        Error::InsufficientData { .. } => 7,
        Error::NonInvertibleActivation(_) => 8,
        Error::DeterminednessViolation { .. } => 9,
        Error::InvalidArchitecture(_) => 10,
        Error::BadMagic { .. } => 11,
        Error::VersionMismatch { .. } => 12,
        Error::TruncatedFile(_) => 13,
        Error::Io(_) => 14,
    }
}

fn error_line(kind: &str, message: &str) -> String {
    let message = message
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', " ");
    format!("error kind={kind} message=\"{message}\"")
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("Usage", first));
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&Settings::resolve(a)?),
        Command::Infer(a) => cmd_infer(&Settings::resolve(a)?),
        Command::Reconstruct(a) => cmd_reconstruct(&Settings::resolve(a)?),
        Command::Validate(a) => cmd_validate(&Settings::resolve(a)?),
        Command::Diagnose(a) => cmd_diagnose(&Settings::resolve(a)?),
    }
}

fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            ))
        })?;
        let key = k.trim().replace('_', "-");
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "arch",
    "slope",
    "epochs",
    "plateau-tol",
    "sample-size",
    "chunks",
    "seed",
    "workers",
    "out",
    "progress-images",
    "first-step",
    "limit",
    "num-samples",
    "z",
    "model",
    "latents",
    "level",
    "image-shape",
];

struct ConfigFile(HashMap<String, String>);

impl ConfigFile {
    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("config key {key}: cannot parse {v:?}")))
            })
            .transpose()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DatasetKind {
    Idx,
    Cifar10,
}

/// Fully merged run options.
struct Settings {
    dataset: Option<(DatasetKind, PathBuf)>,
    arch: Option<String>,
    activation: Activation,
    train: TrainConfig,
    workers: Option<usize>,
    out: PathBuf,
    progress_images: bool,
    limit: Option<usize>,
    num_samples: usize,
    z: f64,
    model: Option<PathBuf>,
    latents: Option<PathBuf>,
    level: Option<usize>,
    image_shape: Option<(usize, usize, usize)>,
}

fn parse_dataset(s: &str) -> Result<(DatasetKind, PathBuf)> {
    Ok(match s.split_once(':') {
        Some(("idx", p)) => (DatasetKind::Idx, PathBuf::from(p)),
        Some(("cifar10", p)) => (DatasetKind::Cifar10, PathBuf::from(p)),
        Some((kind, _)) if !kind.contains(['/', '\\', '.']) && kind.len() > 1 => {
            return Err(Error::Config(format!("unknown dataset kind {kind:?}")))
        }
        _ => (DatasetKind::Idx, PathBuf::from(s)),
    })
}

fn parse_triple(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("expected CxHxW, got {s:?}")))?;
    match parts[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Config(format!("expected CxHxW, got {s:?}"))),
    }
}

fn parse_conv_layer(s: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::Config(format!("expected a conv layer like k7m4u2, got {s:?}"));
    let rest = s.trim().strip_prefix('k').ok_or_else(bad)?;
    let (k, rest) = rest.split_once('m').ok_or_else(bad)?;
    let (m, u) = rest.split_once('u').ok_or_else(bad)?;
    let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
    Ok((num(k)?, num(m)?, num(u)?))
}

/// Parses an architecture description.
pub fn parse_architecture(s: &str, activation: Activation) -> Result<Architecture> {
    if let Some(rest) = s.trim().strip_prefix("conv:") {
        let (code, layers) = rest
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("expected conv:CxHxW:layers, got {s:?}")))?;
        let layers = layers
            .split(',')
            .map(parse_conv_layer)
            .collect::<Result<Vec<_>>>()?;
        return Architecture::conv(parse_triple(code)?, &layers, activation)
            .map_err(|e| Error::Config(e.to_string()));
    }
    let dims = s
        .split(',')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("expected comma-separated widths, got {s:?}")))?;
    Architecture::feedforward(&dims, activation).map_err(|e| Error::Config(e.to_string()))
}

impl Settings {
    fn resolve(a: RunArgs) -> Result<Self> {
        let file = match &a.config {
            Some(p) => parse_config_file(p)?,
            None => HashMap::new(),
        };
        if let Some(k) = file.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        let cf = ConfigFile(file);

        let slope = a.slope.or(cf.get("slope")?).unwrap_or(DEFAULT_SLOPE);
        let activation = Activation::new(slope)?;
        let first_step = match a.first_step {
            Some(FirstStepArg::Sl) => Some(FirstStep::SolveLatents),
            Some(FirstStepArg::Sw) => Some(FirstStep::SolveWeights),
            None => match cf.0.get("first-step").map(|s| s.to_ascii_lowercase()) {
                None => None,
                Some(s) if s == "sl" => Some(FirstStep::SolveLatents),
                Some(s) if s == "sw" => Some(FirstStep::SolveWeights),
                Some(s) => {
                    return Err(Error::Config(format!(
                        "first-step must be sl or sw, got {s:?}"
                    )))
                }
            },
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            max_epochs: a
                .epochs
                .or(cf.get("epochs")?)
                .unwrap_or(defaults.max_epochs),
            plateau_rel_tol: a
                .plateau_tol
                .or(cf.get("plateau-tol")?)
                .unwrap_or(defaults.plateau_rel_tol),
            sampling: WeightSampling {
                sample_size: a.sample_size.or(cf.get("sample-size")?),
                chunks: a
                    .chunks
                    .or(cf.get("chunks")?)
                    .unwrap_or(defaults.sampling.chunks),
            },
            seed: a.seed.or(cf.get("seed")?).unwrap_or(defaults.seed),
            first_step: first_step.unwrap_or(defaults.first_step),
            ..defaults
        };
        train.check()?;
        let dataset = a
            .dataset
            .or(cf.get("dataset")?)
            .map(|s: String| parse_dataset(&s))
            .transpose()?;
        let image_shape = a
            .image_shape
            .or(cf.get("image-shape")?)
            .map(|s: String| parse_triple(&s))
            .transpose()?;
        Ok(Self {
            dataset,
            arch: a.arch.or(cf.get("arch")?),
            activation,
            train,
            workers: a.workers.or(cf.get("workers")?),
            out: a
                .out
                .or(cf.get("out")?)
                .unwrap_or_else(|| PathBuf::from(".")),
            progress_images: a.progress_images || cf.get("progress-images")?.unwrap_or(false),
            limit: a.limit.or(cf.get("limit")?),
            num_samples: a.num_samples.or(cf.get("num-samples")?).unwrap_or(64),
            z: a.z.or(cf.get("z")?).unwrap_or(DEFAULT_Z),
            model: a.model.or(cf.get("model")?),
            latents: a.latents.or(cf.get("latents")?),
            level: a.level.or(cf.get("level")?),
            image_shape,
        })
    }

    fn dataset(&self) -> Result<&(DatasetKind, PathBuf)> {
        self.dataset
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset given (--dataset)".into()))
    }

    fn architecture(&self) -> Result<Architecture> {
        let s = self
            .arch
            .as_deref()
            .ok_or_else(|| Error::Config("no architecture given (--arch)".into()))?;
        parse_architecture(s, self.activation)
    }

    fn load_model(&self) -> Result<Model> {
        let p = self
            .model
            .clone()
            .unwrap_or_else(|| self.out.join(MODEL_FILE));
        data_io::load_model(p)
    }

    /// Dataset size and image shape, reading headers only.
    fn dataset_header(&self) -> Result<(usize, (usize, usize, usize))> {
        let (kind, path) = self.dataset()?;
        let (n, shape) = match kind {
            DatasetKind::Idx => {
                let h = data_io::read_idx_header(path)?;
                (h.count, (1, h.height, h.width))
            }
            DatasetKind::Cifar10 => (data_io::read_cifar10_count(path)?, (3, 32, 32)),
        };
        Ok((self.limit.map_or(n, |l| l.min(n)), shape))
    }

    fn load_dataset(&self) -> Result<ImageBatch> {
        let (kind, path) = self.dataset()?;
        let batch = match kind {
            DatasetKind::Idx => data_io::load_idx(path)?,
            DatasetKind::Cifar10 => data_io::load_cifar10(path)?.0,
        };
        Ok(match self.limit {
            Some(l) => batch.truncate(l),
            None => batch,
        })
    }

    fn create_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        Ok(())
    }
}

fn check_data_shape(arch: &Architecture, len: usize) -> Result<()> {
    if arch.data_len() != len {
        return Err(Error::ShapeMismatch(format!(
            "architecture produces {} values per datapoint, dataset has {len}",
            arch.data_len()
        )));
    }
    Ok(())
}

/// Output image shape of a model, from the conv geometry, an explicit
/// override, or a square guess.
fn output_shape(
    model: &Model,
    hint: Option<(usize, usize, usize)>,
) -> Result<(usize, usize, usize)> {
    let len = model.layers().last().map_or(0, Layer::out_len);
    if let Some(s) = hint {
        return if s.0 * s.1 * s.2 == len {
            Ok(s)
        } else {
            Err(Error::Config(format!(
                "image shape {s:?} does not hold {len} values"
            )))
        };
    }
    if let Some(s) = model.architecture().data_image_shape() {
        return Ok(s);
    }
    for c in [1, 3] {
        if len % c == 0 {
            let side = ((len / c) as f64).sqrt().round() as usize;
            if side * side * c == len {
                return Ok((c, side, side));
            }
        }
    }
    Err(Error::Config(format!(
        "cannot infer an image shape for {len} values; pass --image-shape"
    )))
}

fn grid_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn first_rows(m: &Matrix, n: usize) -> Matrix {
    let idx: Vec<usize> = (0..n.min(m.rows())).collect();
    m.select_rows(&idx)
}

fn grid_cols(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).max(1)
}

fn write_grid(m: &Matrix, shape: (usize, usize, usize), n: usize, path: &Path) -> Result<usize> {
    let rows = first_rows(m, n);
    data_io::write_image_grid(
        &rows,
        shape.0,
        shape.1,
        shape.2,
        grid_cols(rows.rows()),
        path,
    )
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn cmd_train(s: &Settings) -> Result<()> {
    let arch = s.architecture()?;
    let (n, shape) = s.dataset_header()?;
    let violations = trainer::validate_architecture(&arch, n);
    if !violations.is_empty() {
        return Err(Error::InvalidArchitecture(violations));
    }
    check_data_shape(&arch, shape.0 * shape.1 * shape.2)?;
    s.create_out_dir()?;
    let data = data_io::flatten(&s.load_dataset()?);

    let mut progress_err = None;
    let mut observer = |step: &StepRecord, _: &Layer, recon: &Matrix| {
        if !s.progress_images || progress_err.is_some() {
            return;
        }
        let name = format!(
            "progress_level{}_epoch{}_{}.{}",
            step.level,
            step.epoch,
            step.phase,
            grid_ext(shape.0)
        );
        if let Err(e) = write_grid(recon, shape, s.num_samples, &s.out.join(name)) {
            progress_err = Some(e);
        }
    };
    let out = with_workers(s.workers, || {
        trainer::train_with_observer(&arch, &data, &s.train, &mut observer)
    })?;
    if let Some(e) = progress_err {
        return Err(e);
    }

    data_io::save_model(&out.model, s.out.join(MODEL_FILE))?;
    write_file(&s.out.join(METRICS_FILE), |w| out.history.write_csv(w))?;
    let code = out
        .latents
        .code()
        .expect("trained model has at least one layer");
    let recon = trainer::reconstruct(&out.model, 1, code)?;
    let clamped = write_grid(
        &recon,
        shape,
        s.num_samples,
        &s.out.join(format!("reconstruction.{}", grid_ext(shape.0))),
    )?;
    write_grid(
        &data,
        shape,
        s.num_samples,
        &s.out.join(format!("data.{}", grid_ext(shape.0))),
    )?;

    for l in &out.history.layers {
        let last = l.steps.last().map_or(0.0, |r| r.linear_residual);
        match l.plateau_epoch {
            Some(e) => println!(
                "level {}: plateau at epoch {e}, linear residual {last:e}",
                l.level
            ),
            None => println!(
                "level {}: {} epochs without plateau, linear residual {last:e}",
                l.level, l.epochs_run
            ),
        }
    }
    println!(
        "elastic loss {:e}, {clamped} clamped pixels in reconstruction grid",
        trainer::elastic_loss(&recon, &data)?
    );
    Ok(())
}

fn cmd_infer(s: &Settings) -> Result<()> {
    let model = s.load_model()?;
    let data = data_io::flatten(&s.load_dataset()?);
    check_data_shape(&model.architecture(), data.cols())?;
    s.create_out_dir()?;
    let table = with_workers(s.workers, || trainer::infer_latents(&model, &data))?;
    for (i, m) in table.levels().iter().enumerate() {
        let path = s.out.join(format!("latents_level{}.csv", i + 1));
        write_file(&path, |w| data_io::write_matrix_csv(m, w))?;
    }
    println!(
        "solved latents for {} datapoints at {} levels",
        table.rows(),
        table.levels().len()
    );
    Ok(())
}

fn cmd_reconstruct(s: &Settings) -> Result<()> {
    let model = s.load_model()?;
    let shape = output_shape(&model, s.image_shape)?;
    let (level, latents) = match &s.latents {
        Some(p) => (
            s.level.unwrap_or(1),
            data_io::read_matrix_csv(File::open(p)?)?,
        ),
        None => {
            let data = data_io::flatten(&s.load_dataset()?);
            check_data_shape(&model.architecture(), data.cols())?;
            let table = with_workers(s.workers, || trainer::infer_latents(&model, &data))?;
            (
                1,
                table.code().cloned().unwrap_or_else(|| Matrix::zeros(0, 0)),
            )
        }
    };
    s.create_out_dir()?;
    let recon = with_workers(s.workers, || trainer::reconstruct(&model, level, &latents))?;
    let path = s.out.join(format!("reconstruction.{}", grid_ext(shape.0)));
    let clamped = write_grid(&recon, shape, s.num_samples, &path)?;
    println!("wrote {} ({clamped} clamped pixels)", path.display());
    Ok(())
}

fn cmd_validate(s: &Settings) -> Result<()> {
    let arch = s.architecture()?;
    let (n, shape) = s.dataset_header()?;
    let len = shape.0 * shape.1 * shape.2;
    println!("{:<6} {:<22} {:<6} detail", "level", "condition", "status");
    for c in conditions(&arch, n) {
        let status = match (c.holds, c.violation) {
            (true, _) => "ok",
            (false, Some(_)) => "FAIL",
            (false, None) => "warn",
        };
        println!("{:<6} {:<22} {:<6} {}", c.level, c.name, status, c.detail);
    }
    let data_ok = arch.data_len() == len;
    println!(
        "{:<6} {:<22} {:<6} decoder output {} vs datapoint {len} (N = {n})",
        arch.levels(),
        "data shape",
        if data_ok { "ok" } else { "FAIL" },
        arch.data_len()
    );
    let violations = trainer::validate_architecture(&arch, n);
    for v in &violations {
        println!("violation {v}");
    }
    if !violations.is_empty() {
        return Err(Error::InvalidArchitecture(violations));
    }
    check_data_shape(&arch, len)
}

fn cmd_diagnose(s: &Settings) -> Result<()> {
    let model = s.load_model()?;
    let data = data_io::flatten(&s.load_dataset()?);
    check_data_shape(&model.architecture(), data.cols())?;
    s.create_out_dir()?;
    let table = with_workers(s.workers, || trainer::infer_latents(&model, &data))?;
    let act = model.activation();
    let k = model.data_level();
    for (i, layer) in model.layers().iter().enumerate() {
        let level = i + 2;
        let targets = if level == k {
            &data
        } else {
            &table.levels()[level - 1]
        };
        let report = residual_report(layer, level, act, &table.levels()[i], targets)?;
        let flagged = flag_outliers(&report, s.z);
        let path = s.out.join(format!("residuals_level{level}.csv"));
        write_file(&path, |w| report.write_csv(&flagged, w))?;
        println!(
            "level {level}: {} datapoints, {} flagged at z = {}",
            report.len(),
            flagged.len(),
            s.z
        );
    }
    Ok(())
}
