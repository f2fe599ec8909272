//! Command-line front end: configuration merging and the subcommands.
//!
//! Settings come from an optional `key = value` file (`--config`) and from
//! flags; a flag always wins over the file. Keys are the flag names, with
//! either `-` or `_` as separator.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{load_dataset, Normalization, MNIST_MEAN, MNIST_STD};
use crate::dct::lowpass_indices;
use crate::error::{Error, Result};
use crate::hcr::{cramer_rao_bounds, per_mode_bounds, Basis, BoundConfig, BoundReport, CramerRaoBound, NoiseModel};
use crate::lsqr::LsqrConfig;
use crate::nn::{init_uniform, load_weights, mlp, save_weights, Model};
use crate::report::{histogram, rademacher_visualize, write_image, Histogram};
use crate::tensor::RngStream;
use crate::train::{evaluate_accuracy, train, Dataset, TrainConfig, INIT_STREAM};

/// Visualization streams sit far above the trial streams.
pub const VIZ_STREAM_BASE: u64 = 1 << 62;

pub const BOUND_ROWS_HEADER: &str = "example,index,bound,trials,s,sigma,basis";

#[derive(Parser, Debug)]
#[command(name = "hcrbounds", version, about = "HCR lower bounds on reconstructing inputs from dithered features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train the MLP on the training split and report test accuracy.
    Train,
    /// Per-mode DCT bounds over a range of test examples.
    Bound,
    /// Cramér-Rao variance bounds for one example.
    Crbound,
    /// Rademacher-perturbed reconstructions of one example.
    Viz,
    /// Undithered and dithered accuracy of a trained model.
    Eval,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Options {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory holding the uncompressed IDX files.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Weight file (read, or written by `train`).
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    /// Standard deviation of the dithering noise.
    #[arg(long, global = true)]
    pub sigma: Option<f64>,
    /// Perturbation size s.
    #[arg(long, global = true)]
    pub size: Option<f64>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Repetitions of the perturbation search.
    #[arg(long, global = true)]
    pub reps: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Example range `A..B` (half-open).
    #[arg(long, global = true)]
    pub range: Option<String>,
    /// Side of the low-frequency DCT block.
    #[arg(long, global = true)]
    pub lowpass: Option<usize>,
    /// Worker threads for per-example work.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Example index for `crbound` and `viz`.
    #[arg(long, global = true)]
    pub index: Option<usize>,
    /// Comma-separated input coordinates for `crbound` (default: all).
    #[arg(long, global = true)]
    pub coords: Option<String>,
    /// IDX file prefix: `t10k` or `train`.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// `mnist` or `signed`.
    #[arg(long, global = true)]
    pub normalization: Option<String>,
    #[arg(long, global = true)]
    pub mean: Option<f64>,
    #[arg(long, global = true)]
    pub std: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub weight_decay: Option<f64>,
    /// Hidden width of the MLP built by `train`.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Histogram bins for `bound`.
    #[arg(long, global = true)]
    pub bins: Option<usize>,
    /// Comma-separated sizes s rendered by `viz`.
    #[arg(long, global = true)]
    pub viz_sizes: Option<String>,
}

const KEYS: &[&str] = &[
    "data", "weights", "sigma", "size", "trials", "reps", "seed", "range", "lowpass", "jobs", "out", "index",
    "coords", "split", "normalization", "mean", "std", "epochs", "batch_size", "learning_rate", "weight_decay",
    "hidden", "bins", "viz_sizes",
];

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub normalization: Normalization,
    pub sigma: f64,
    pub size: f64,
    pub trials: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub range: Option<(usize, usize)>,
    pub lowpass: usize,
    pub jobs: usize,
    pub out: PathBuf,
    pub index: usize,
    pub coords: Option<Vec<usize>>,
    pub split: String,
    pub train: TrainConfig,
    pub hidden: usize,
    pub bins: usize,
    pub viz_sizes: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(&Options::default(), &HashMap::new()).expect("defaults are valid")
    }
}

pub fn parse_config_text(text: &str, path: &Path) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(path, format!("line {}: expected `key = value`", n + 1)));
        };
        let key = k.trim().replace('-', "_");
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::format(path, format!("line {}: unknown key `{key}`", n + 1)));
        }
        map.insert(key, v.trim().to_string());
    }
    Ok(map)
}

pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("range `{s}` is not of the form A..B"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a >= b {
        return Err(Error::invalid(format!("range `{s}` is empty")));
    }
    Ok((a, b))
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::invalid(format!("bad {what} entry `{p}`"))))
        .collect()
}

fn from_file<T: FromStr>(file: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    file.get(key)
        .map(|v| v.parse().map_err(|e| Error::invalid(format!("config key `{key}`: {e}"))))
        .transpose()
}

fn pick<T: FromStr>(flag: Option<T>, file: &HashMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match flag {
        Some(v) => Ok(Some(v)),
        None => from_file(file, key),
    }
}

impl RunConfig {
    pub fn resolve(o: &Options, file: &HashMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        let seed = pick(o.seed, file, "seed")?.unwrap_or(0);
        let normalization = match pick(o.normalization.clone(), file, "normalization")?.as_deref() {
            None | Some("mnist") => Normalization::Mnist {
                mean: pick(o.mean, file, "mean")?.unwrap_or(MNIST_MEAN),
                std: pick(o.std, file, "std")?.unwrap_or(MNIST_STD),
            },
            Some("signed") => Normalization::Signed,
            Some(other) => return Err(Error::invalid(format!("unknown normalization `{other}`"))),
        };
        let cfg = RunConfig {
            data: pick(o.data.clone(), file, "data")?,
            weights: pick(o.weights.clone(), file, "weights")?,
            normalization,
            sigma: pick(o.sigma, file, "sigma")?.unwrap_or(1.0),
            size: pick(o.size, file, "size")?.unwrap_or(1.0 / 200.0),
            trials: pick(o.trials, file, "trials")?.unwrap_or(25),
            repetitions: pick(o.reps, file, "reps")?.unwrap_or(10),
            seed,
            range: pick(o.range.clone(), file, "range")?.map(|s: String| parse_range(&s)).transpose()?,
            lowpass: pick(o.lowpass, file, "lowpass")?.unwrap_or(8),
            jobs: pick(o.jobs, file, "jobs")?.unwrap_or(1),
            out: pick(o.out.clone(), file, "out")?.unwrap_or_else(|| PathBuf::from(".")),
            index: pick(o.index, file, "index")?.unwrap_or(0),
            coords: pick(o.coords.clone(), file, "coords")?
                .map(|s: String| parse_list(&s, "coordinate"))
                .transpose()?,
            split: pick(o.split.clone(), file, "split")?.unwrap_or_else(|| "t10k".into()),
            train: TrainConfig {
                learning_rate: pick(o.learning_rate, file, "learning_rate")?.unwrap_or(d.learning_rate),
                batch_size: pick(o.batch_size, file, "batch_size")?.unwrap_or(d.batch_size),
                epochs: pick(o.epochs, file, "epochs")?.unwrap_or(d.epochs),
                weight_decay: pick(o.weight_decay, file, "weight_decay")?.unwrap_or(d.weight_decay),
                seed,
                ..d
            },
            hidden: pick(o.hidden, file, "hidden")?.unwrap_or(784),
            bins: pick(o.bins, file, "bins")?.unwrap_or(50),
            viz_sizes: match pick(o.viz_sizes.clone(), file, "viz_sizes")? {
                Some(s) => parse_list(&s, "size")?,
                None => vec![1.0 / 200.0, 1.0 / 1000.0],
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_options(o: &Options) -> Result<Self> {
        let file = match &o.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_config_text(&text, path)?
            }
            None => HashMap::new(),
        };
        RunConfig::resolve(o, &file)
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be positive"));
        }
        if !(self.size > 0.0 && self.size.is_finite()) || self.viz_sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("perturbation sizes must be positive"));
        }
        if self.trials == 0 || self.repetitions == 0 || self.jobs == 0 || self.bins == 0 || self.hidden == 0 {
            return Err(Error::invalid("trials, reps, jobs, bins and hidden must be positive"));
        }
        if let Normalization::Mnist { std, .. } = self.normalization {
            if !(std > 0.0) {
                return Err(Error::invalid("normalization std must be positive"));
            }
        }
        self.train.validate()
    }

    fn bound_config(&self, size: f64) -> BoundConfig {
        BoundConfig {
            sigma: self.sigma,
            size,
            trials: self.trials,
            repetitions: self.repetitions,
            lsqr: LsqrConfig::default(),
            basis: Basis::Dct,
        }
    }

    fn data_dir(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::invalid("no data directory given (--data)"))
    }

    /// IDX pair `{split}-images-idx3-ubyte` / `{split}-labels-idx1-ubyte`.
    pub fn load_split(&self, split: &str) -> Result<Dataset> {
        let dir = self.data_dir()?;
        load_dataset(
            dir.join(format!("{split}-images-idx3-ubyte")),
            dir.join(format!("{split}-labels-idx1-ubyte")),
            self.normalization,
        )
    }

    pub fn load_model(&self) -> Result<Model> {
        let path = self.weights.as_deref().ok_or_else(|| Error::invalid("no weight file given (--weights)"))?;
        load_weights(path)
    }

    fn range_within(&self, len: usize) -> Result<(usize, usize)> {
        let (a, b) = self.range.unwrap_or((0, len));
        if b > len {
            return Err(Error::invalid(format!("range {a}..{b} exceeds the {len} available examples")));
        }
        Ok((a, b))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    Ok(&cfg.out)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone)]
pub struct BoundSummary {
    pub range: (usize, usize),
    pub reports: Vec<BoundReport>,
    pub full_histogram: Histogram,
    pub lowpass_histogram: Histogram,
    pub full_median: f64,
    pub lowpass_median: f64,
    pub saturated_trials: usize,
}

/// Per-example bound rows for `reports`, numbered from `first`.
pub fn write_bound_rows(w: &mut impl Write, first: usize, reports: &[BoundReport], keep: Option<&[usize]>) -> Result<()> {
    let io = |e| Error::io("<bound csv>", e);
    writeln!(w, "{BOUND_ROWS_HEADER}").map_err(io)?;
    for (j, r) in reports.iter().enumerate() {
        let example = first + j;
        let data = r.std_lower_bounds.data();
        let mut row = |k: usize| {
            writeln!(
                w,
                "{example},{k},{},{},{},{},{}",
                data[k],
                r.trials,
                r.size,
                r.sigma,
                r.basis.as_str()
            )
        };
        match keep {
            Some(idx) => idx.iter().try_for_each(|&k| row(k)).map_err(io)?,
            None => (0..data.len()).try_for_each(row).map_err(io)?,
        }
    }
    Ok(())
}

/// Bounds for every example in the range, computed in parallel and written as
/// `bounds.csv`, `bounds_lowpass.csv`, `histogram.csv`, `histogram_lowpass.csv`
/// and `summary.csv` under the output directory.
pub fn cmd_bound(cfg: &RunConfig) -> Result<BoundSummary> {
    let data = cfg.load_split(&cfg.split)?;
    let model = cfg.load_model()?;
    let (a, b) = cfg.range_within(data.len())?;
    let keep = lowpass_indices(data.inputs()[0].shape(), cfg.lowpass)?;
    let bc = cfg.bound_config(cfg.size);
    let stack = model.extractor();
    let reports: Vec<BoundReport> = cfg.pool()?.install(|| {
        (a..b)
            .into_par_iter()
            .map(|i| per_mode_bounds(stack, &data.inputs()[i], &bc, cfg.seed, i as u64))
            .collect::<Result<Vec<_>>>()
    })?;

    let dir = out_dir(cfg)?;
    let mut full: Vec<f64> = reports.iter().flat_map(|r| r.std_lower_bounds.data().iter().copied()).collect();
    let mut low: Vec<f64> = reports
        .iter()
        .flat_map(|r| keep.iter().map(move |&k| r.std_lower_bounds.data()[k]))
        .collect();
    let full_histogram = histogram(&full, cfg.bins)?;
    let lowpass_histogram = histogram(&low, cfg.bins)?;

    let mut w = create(&dir.join("bounds.csv"))?;
    write_bound_rows(&mut w, a, &reports, None)?;
    let mut w = create(&dir.join("bounds_lowpass.csv"))?;
    write_bound_rows(&mut w, a, &reports, Some(&keep))?;
    for (name, h) in [("histogram.csv", &full_histogram), ("histogram_lowpass.csv", &lowpass_histogram)] {
        let path = dir.join(name);
        let mut w = create(&path)?;
        h.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
    }
    let path = dir.join("summary.csv");
    let mut w = create(&path)?;
    let mut summary = || -> std::io::Result<()> {
        writeln!(w, "example,saturated_trials,min_gain_ratio,max_gain_ratio")?;
        for (j, r) in reports.iter().enumerate() {
            let lo = r.gain_ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.gain_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            writeln!(w, "{},{},{lo},{hi}", a + j, r.saturated_trials)?;
        }
        w.flush()
    };
    summary().map_err(|e| Error::io(&path, e))?;

    Ok(BoundSummary {
        range: (a, b),
        saturated_trials: reports.iter().map(|r| r.saturated_trials).sum(),
        reports,
        full_histogram,
        lowpass_histogram,
        full_median: median(&mut full),
        lowpass_median: median(&mut low),
    })
}

/// Writes `crbound_{index}.csv`; unbounded coordinates are written as `inf`.
pub fn cmd_crbound(cfg: &RunConfig) -> Result<Vec<(usize, CramerRaoBound)>> {
    let data = cfg.load_split(&cfg.split)?;
    let model = cfg.load_model()?;
    if cfg.index >= data.len() {
        return Err(Error::invalid(format!("index {} out of range 0..{}", cfg.index, data.len())));
    }
    let theta = &data.inputs()[cfg.index];
    let coords = cfg.coords.clone().unwrap_or_else(|| (0..theta.len()).collect());
    let bounds = cramer_rao_bounds(model.extractor(), theta, cfg.sigma, &coords)?;
    let path = out_dir(cfg)?.join(format!("crbound_{}.csv", cfg.index));
    let mut w = create(&path)?;
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "coordinate,variance_bound")?;
        for (&k, b) in coords.iter().zip(&bounds) {
            match b {
                CramerRaoBound::Variance(v) => writeln!(w, "{k},{v}")?,
                CramerRaoBound::Unbounded => writeln!(w, "{k},inf")?,
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(&path, e))?;
    Ok(coords.into_iter().zip(bounds).collect())
}

/// Writes the original and one perturbed reconstruction per size; returns the paths.
pub fn cmd_viz(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let data = cfg.load_split(&cfg.split)?;
    let model = cfg.load_model()?;
    if cfg.index >= data.len() {
        return Err(Error::invalid(format!("index {} out of range 0..{}", cfg.index, data.len())));
    }
    let theta = &data.inputs()[cfg.index];
    let ext = if theta.shape().first() == Some(&3) { "ppm" } else { "pgm" };
    let dir = out_dir(cfg)?;
    let mut paths = Vec::new();

    let original = cfg.normalization.denormalize(theta);
    let clipped = crate::tensor::Tensor::from_data(
        original.shape(),
        original.data().iter().map(|p| p.clamp(0.0, 1.0)).collect(),
    )?;
    let path = dir.join(format!("viz_{}_original.{ext}", cfg.index));
    write_image(&clipped, &path)?;
    paths.push(path);

    for &size in &cfg.viz_sizes {
        let report = per_mode_bounds(model.extractor(), theta, &cfg.bound_config(size), cfg.seed, cfg.index as u64)?;
        let mut rng = RngStream::new(cfg.seed, VIZ_STREAM_BASE + cfg.index as u64);
        let image = rademacher_visualize(theta, &report.std_lower_bounds, &mut rng, cfg.normalization)?;
        let path = dir.join(format!("viz_{}_s{size}.{ext}", cfg.index));
        write_image(&image, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub clean: f64,
    pub dithered: f64,
}

fn accuracies(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<Accuracy> {
    let noise = NoiseModel::gaussian(cfg.sigma)?;
    Ok(Accuracy {
        clean: evaluate_accuracy(model, data, None, cfg.seed)?,
        dithered: evaluate_accuracy(model, data, Some(&noise), cfg.seed)?,
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Accuracy> {
    let data = cfg.load_split(&cfg.split)?;
    let model = cfg.load_model()?;
    let (a, b) = cfg.range_within(data.len())?;
    accuracies(&model, &data.slice(a, b)?, cfg)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PathBuf,
    pub epoch_losses: Vec<f64>,
    pub test: Accuracy,
}

/// Trains the MLP on the `train` split, writes the weight file (to `--weights`
/// or `OUT/weights.hcrw`) and evaluates on the configured test split.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let train_set = cfg.load_split("train")?;
    let test_set = cfg.load_split(&cfg.split)?;
    if train_set.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let input_dim = train_set.inputs()[0].len();
    let classes = train_set.labels().iter().chain(test_set.labels()).max().map_or(1, |m| m + 1);
    let mut model = mlp(input_dim, cfg.hidden, classes.max(2))?;
    init_uniform(&mut model, &mut RngStream::new(cfg.seed, INIT_STREAM));
    let history = train(&mut model, &train_set, &cfg.train)?;

    let weights = match &cfg.weights {
        Some(p) => p.clone(),
        None => out_dir(cfg)?.join("weights.hcrw"),
    };
    save_weights(&model, &weights)?;
    let test = accuracies(&model, &test_set, cfg)?;
    Ok(TrainOutcome { weights, epoch_losses: history.epoch_losses, test })
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::from_options(&cli.options)?;
    match cli.command {
        Command::Train => {
            let o = cmd_train(&cfg)?;
            for (e, l) in o.epoch_losses.iter().enumerate() {
                println!("epoch {}: mean loss {l:.6}", e + 1);
            }
            println!("weights written to {}", o.weights.display());
            println!("test accuracy: {:.4} undithered, {:.4} dithered (sigma {})", o.test.clean, o.test.dithered, cfg.sigma);
        }
        Command::Eval => {
            let a = cmd_eval(&cfg)?;
            println!("accuracy: {:.4} undithered, {:.4} dithered (sigma {})", a.clean, a.dithered, cfg.sigma);
        }
        Command::Bound => {
            let s = cmd_bound(&cfg)?;
            println!(
                "examples {}..{}: median bound {:.6e} (full), {:.6e} ({}x{} low-pass); {} saturated trials",
                s.range.0, s.range.1, s.full_median, s.lowpass_median, cfg.lowpass, cfg.lowpass, s.saturated_trials
            );
        }
        Command::Crbound => {
            let b = cmd_crbound(&cfg)?;
            let unbounded = b.iter().filter(|(_, v)| *v == CramerRaoBound::Unbounded).count();
            println!("{} coordinates written ({unbounded} unbounded)", b.len());
        }
        Command::Viz => {
            for p in cmd_viz(&cfg)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
