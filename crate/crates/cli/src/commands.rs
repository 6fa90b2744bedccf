//! Subcommand definitions and their execution.
//!
//! Every command is run against a [`Session`] that reads inputs through a
//! hashing layer and collects outputs in memory. Writing files and the run
//! manifest happens afterwards in [`crate::run`], so replay can re-execute a
//! command without touching the disk.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmix::algebra::{self, SourceWeights};
use gmix::measurement::{self, ConditionalPoint, KChoice};
use gmix::sampling::sample_gmm;
use gmix::stats::histogram;
use gmix::{
    em_fit, reduce, select_model, BlockIndex, Block, Criterion, CurveSpec, Dataset, EmConfig, FitReport, GmmParams,
    QualityRegion, SeededStream,
};
use nalgebra::{DMatrix, DVector};

use crate::csvio::{parse_points, render_table, Cell};
use crate::document::GmmDocument;
use crate::error::{CliError, CliResult};
use crate::expr::Expr;
use crate::manifest::{sha256_hex, FileDigest};

#[derive(Debug, Parser)]
#[command(name = "gmix", version, about = "Gaussian mixture models as values for uncertain quantities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Write the run manifest here instead of next to the main output.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<String>,

    /// Do not write a run manifest.
    #[arg(long, global = true, conflicts_with = "manifest")]
    pub no_manifest: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean and covariance of a mixture as CSV.
    Moments(Unary),
    /// Moment-matched single Gaussian.
    Fallback(Unary),
    /// Image under x -> A x + b.
    Affine(AffineArgs),
    /// Distribution of X + Y for independent X, Y.
    Convolve(Binary),
    /// Distribution of -X.
    Negate(Unary),
    /// Normalized product of two densities, with the evidence.
    Fuse(FuseArgs),
    /// Weighted pooling of several sources.
    Mix(MixArgs),
    /// Keep a subset of dimensions.
    Marginalize(MarginalizeArgs),
    /// Condition on observed values of some dimensions.
    Condition(ConditionArgs),
    /// Closed-form L2 distance between two densities.
    L2(L2Args),
    /// Approximate by fewer components.
    Reduce(ReduceArgs),
    /// Seeded draws, or their histogram.
    Sample(SampleArgs),
    /// Density and distribution function of a 1-D mixture on a grid.
    Pdf(PdfArgs),
    /// EM fit of a fixed number of components to CSV data.
    Fit(FitArgs),
    /// Fit several component counts and pick one by AIC or BIC.
    SelectK(SelectKArgs),
    /// Simulate (x, y) pairs from a device curve with Gaussian noise.
    DeviceSim(DeviceSimArgs),
    /// Fit the joint (x, y) mixture of a device.
    DeviceFit(DeviceFitArgs),
    /// Posterior of the measurand given an observation.
    Posterior(PosteriorArgs),
    /// Mixture fit to the product of two independent scalar quantities.
    Product(ProductArgs),
    /// Probability of a rectangular quality region.
    Qc(QcArgs),
    /// Re-run a command from its manifest and compare outputs.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct Unary {
    pub input: String,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct Binary {
    pub a: String,
    pub b: String,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct AffineArgs {
    pub input: String,
    /// Rows separated by `;`, entries by `,`, e.g. "1,0;0,2".
    #[arg(long, allow_hyphen_values = true)]
    pub matrix: String,
    /// Defaults to zero.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub offset: Option<Vec<f64>>,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    pub a: String,
    pub b: String,
    #[arg(short, long)]
    pub output: Option<String>,
    /// Also write the evidence as a one-row CSV.
    #[arg(long, value_name = "PATH")]
    pub evidence_out: Option<String>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("share").required(true).args(["weights", "shares"])))]
pub struct MixArgs {
    #[arg(required = true)]
    pub inputs: Vec<String>,
    /// Source weights summing to one.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Raw nonnegative shares, normalized by their total.
    #[arg(long, value_delimiter = ',')]
    pub shares: Option<Vec<f64>>,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct MarginalizeArgs {
    pub input: String,
    /// Dimensions to keep, in output order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub keep: Vec<usize>,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    pub input: String,
    /// Observed dimensions.
    #[arg(long, value_delimiter = ',', required = true)]
    pub given: Vec<usize>,
    /// Observed values, one per entry of `--given`.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub values: Vec<f64>,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct L2Args {
    pub a: String,
    pub b: String,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    pub input: String,
    /// Target number of components.
    #[arg(long)]
    pub k: usize,
    /// Cap on refinement iterations.
    #[arg(long, default_value_t = 2000)]
    pub budget: usize,
    #[arg(short, long)]
    pub output: Option<String>,
    /// Distances and parameter counts as a one-row CSV.
    #[arg(long, value_name = "PATH")]
    pub report: Option<String>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    pub input: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Emit a histogram with this many bins instead of the draws (1-D only).
    #[arg(long, value_name = "BINS")]
    pub hist: Option<usize>,
    /// Histogram range; defaults to the sample minimum and maximum.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    #[arg(short, long, required = true)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct PdfArgs {
    pub input: String,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], required = true, allow_negative_numbers = true)]
    pub range: Vec<f64>,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Additional EM runs from different seedings.
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    /// Log-likelihood change that ends a run (default 1e-8 per data point).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Diagonal loading for degenerate components.
    #[arg(long)]
    pub floor: Option<f64>,
}

impl EmArgs {
    pub fn config(&self, k: usize) -> EmConfig {
        let mut cfg = EmConfig::new(k, self.seed);
        cfg.max_iters = self.max_iters;
        cfg.restarts = self.restarts;
        cfg.loglik_tol = self.tol;
        cfg.covariance_floor = self.floor;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// CSV with a header row; every column is a coordinate.
    pub data: String,
    #[arg(long)]
    pub k: usize,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(short, long, required = true)]
    pub output: Option<String>,
    /// Log-likelihood per iteration.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<String>,
    /// Likelihood, AIC, BIC and iteration counts as a one-row CSV.
    #[arg(long, value_name = "PATH")]
    pub report: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Aic,
    Bic,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Aic => Criterion::Aic,
            CriterionArg::Bic => Criterion::Bic,
        }
    }
}

#[derive(Debug, Args)]
pub struct SelectKArgs {
    pub data: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub candidates: Vec<usize>,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    pub em: EmArgs,
    /// The chosen model.
    #[arg(short, long, required = true)]
    pub output: Option<String>,
    /// One row per candidate.
    #[arg(long, value_name = "PATH")]
    pub table: Option<String>,
}

#[derive(Debug, Args)]
pub struct DeviceSimArgs {
    /// Device curve in `x`, e.g. "x-0.2*x^2".
    #[arg(long, allow_hyphen_values = true)]
    pub curve: String,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], required = true, allow_negative_numbers = true)]
    pub range: Vec<f64>,
    #[arg(long)]
    pub noise_var: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(short, long, required = true)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("count").required(true).args(["k", "candidates"])))]
pub struct DeviceFitArgs {
    /// CSV with two columns, x then y.
    pub data: String,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub candidates: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = CriterionArg::Bic)]
    pub criterion: CriterionArg,
    #[command(flatten)]
    pub em: EmArgs,
    /// The joint (x, y) model.
    #[arg(short, long, required = true)]
    pub output: Option<String>,
    /// Conditional mean and variance of y on an x grid.
    #[arg(long, value_name = "PATH")]
    pub stats: Option<String>,
    /// Grid for `--stats` and `--norms`; defaults to the data's x range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    /// True device curve, for `--norms`.
    #[arg(long, allow_hyphen_values = true, requires_all = ["noise_var", "norms"])]
    pub curve: Option<String>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    /// L2 errors of the conditional mean and variance against the curve.
    #[arg(long, value_name = "PATH", requires = "curve")]
    pub norms: Option<String>,
}

#[derive(Debug, Args)]
pub struct PosteriorArgs {
    /// Joint model over (measurand, observable).
    pub joint: String,
    /// Observed value(s).
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    pub y: Vec<f64>,
    /// Observable dimensions; defaults to the last `len(y)` dimensions.
    #[arg(long, value_delimiter = ',')]
    pub observed: Option<Vec<usize>>,
    #[arg(short, long)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProductArgs {
    pub x: String,
    pub y: String,
    #[arg(long)]
    pub n_mc: usize,
    /// Components of the fit; defaults to the product of the input counts.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    #[arg(short, long, required = true)]
    pub output: Option<String>,
    /// The Monte Carlo products the model was fitted to.
    #[arg(long, value_name = "PATH")]
    pub samples: Option<String>,
}

#[derive(Debug, Args)]
pub struct QcArgs {
    pub input: String,
    /// Lower corner; `-inf` leaves a side open.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub lo: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub hi: Vec<f64>,
    #[arg(long)]
    pub n_mc: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(short, long, required = true)]
    pub output: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: String,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Moments(_) => "moments",
            Command::Fallback(_) => "fallback",
            Command::Affine(_) => "affine",
            Command::Convolve(_) => "convolve",
            Command::Negate(_) => "negate",
            Command::Fuse(_) => "fuse",
            Command::Mix(_) => "mix",
            Command::Marginalize(_) => "marginalize",
            Command::Condition(_) => "condition",
            Command::L2(_) => "l2",
            Command::Reduce(_) => "reduce",
            Command::Sample(_) => "sample",
            Command::Pdf(_) => "pdf",
            Command::Fit(_) => "fit",
            Command::SelectK(_) => "select-k",
            Command::DeviceSim(_) => "device-sim",
            Command::DeviceFit(_) => "device-fit",
            Command::Posterior(_) => "posterior",
            Command::Product(_) => "product",
            Command::Qc(_) => "qc",
            Command::Replay(_) => "replay",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::Sample(a) => Some(a.seed),
            Command::Fit(a) => Some(a.em.seed),
            Command::SelectK(a) => Some(a.em.seed),
            Command::DeviceSim(a) => Some(a.seed),
            Command::DeviceFit(a) => Some(a.em.seed),
            Command::Product(a) => Some(a.seed),
            Command::Qc(a) => Some(a.seed),
            _ => None,
        }
    }
}

/// Inputs read and outputs produced by one command.
#[derive(Debug)]
pub struct Session {
    cwd: PathBuf,
    pub inputs: Vec<FileDigest>,
    /// `(path as given, bytes)`; a `None` path means standard output.
    pub outputs: Vec<(Option<String>, Vec<u8>)>,
    /// Human-readable remarks for standard error.
    pub messages: Vec<String>,
}

impl Session {
    pub fn new(cwd: &Path) -> Self {
        Self {
            cwd: cwd.to_path_buf(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            messages: Vec::new(),
        }
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        self.cwd.join(path)
    }

    fn read(&mut self, path: &str) -> CliResult<Vec<u8>> {
        let bytes = std::fs::read(self.resolve(path)).map_err(|e| CliError::io(format!("{path}: {e}")))?;
        self.inputs.push(FileDigest {
            path: path.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn read_doc(&mut self, path: &str) -> CliResult<GmmDocument> {
        let bytes = self.read(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|_| CliError::parse(format!("{path}: not UTF-8 text")))?;
        GmmDocument::parse(text).map_err(|e| CliError::from(e).context(path))
    }

    fn read_gmm(&mut self, path: &str) -> CliResult<GmmParams> {
        Ok(self.read_doc(path)?.params)
    }

    fn read_data(&mut self, path: &str) -> CliResult<Dataset> {
        let bytes = self.read(path)?;
        parse_points(&bytes).map(|(_, d)| d).map_err(|e| e.context(path))
    }

    fn emit(&mut self, path: Option<&str>, bytes: Vec<u8>) {
        self.outputs.push((path.map(str::to_string), bytes));
    }

    fn emit_gmm(&mut self, path: Option<&str>, g: GmmParams) {
        self.emit(path, GmmDocument::new(g).serialize().into_bytes());
    }

    /// Emits the main result ahead of any auxiliary outputs, so it is the
    /// one the manifest is placed next to.
    fn emit_gmm_primary(&mut self, path: Option<&str>, g: GmmParams) {
        self.outputs
            .insert(0, (path.map(str::to_string), GmmDocument::new(g).serialize().into_bytes()));
    }
}

fn out(o: &Option<String>) -> Option<&str> {
    o.as_deref()
}

/// Runs one (non-replay) command.
pub fn execute(cmd: &Command, session: &mut Session) -> CliResult<()> {
    match cmd {
        Command::Moments(a) => {
            let g = session.read_gmm(&a.input)?;
            let m = g.moments();
            let d = g.dim();
            let mut header = vec!["row".to_string(), "mean".to_string()];
            header.extend((0..d).map(|j| format!("cov_{j}")));
            let rows: Vec<Vec<Cell>> = (0..d)
                .map(|i| {
                    let mut r = vec![Cell::from(i), Cell::from(m.mean[i])];
                    r.extend((0..d).map(|j| Cell::from(m.covariance[(i, j)])));
                    r
                })
                .collect();
            session.emit(out(&a.output), render_table(&header, &rows));
        }
        Command::Fallback(a) => {
            let g = session.read_gmm(&a.input)?;
            session.emit_gmm(out(&a.output), g.gaussian_fallback()?);
        }
        Command::Affine(a) => {
            let g = session.read_gmm(&a.input)?;
            let m = parse_matrix(&a.matrix)?;
            if m.ncols() != g.dim() {
                return Err(CliError::validation(format!(
                    "matrix has {} columns but the mixture has dimension {}",
                    m.ncols(),
                    g.dim()
                )));
            }
            let b = match &a.offset {
                Some(v) => DVector::from_vec(v.clone()),
                None => DVector::zeros(m.nrows()),
            };
            session.emit_gmm(out(&a.output), g.affine(&m, &b)?);
        }
        Command::Convolve(a) => {
            let ga = session.read_gmm(&a.a)?;
            let gb = session.read_gmm(&a.b)?;
            session.emit_gmm(out(&a.output), algebra::convolve(&ga, &gb)?);
        }
        Command::Negate(a) => {
            let g = session.read_gmm(&a.input)?;
            session.emit_gmm(out(&a.output), algebra::negate(&g));
        }
        Command::Fuse(a) => {
            let ga = session.read_gmm(&a.a)?;
            let gb = session.read_gmm(&a.b)?;
            let r = algebra::fuse(&ga, &gb)?;
            session.messages.push(format!("evidence {}", crate::document::format_float(r.evidence)));
            session.emit_gmm_primary(out(&a.output), r.posterior);
            if let Some(p) = &a.evidence_out {
                session.emit(Some(p), render_table(&["evidence"], &[vec![Cell::from(r.evidence)]]));
            }
        }
        Command::Mix(a) => {
            let sources = a
                .inputs
                .iter()
                .map(|p| session.read_gmm(p))
                .collect::<CliResult<Vec<_>>>()?;
            let w = match (&a.weights, &a.shares) {
                (Some(w), _) => SourceWeights::new(w.clone())?,
                (None, Some(s)) => SourceWeights::from_shares(s)?,
                (None, None) => unreachable!("clap requires one of the two"),
            };
            session.emit_gmm(out(&a.output), algebra::mix(&sources, &w)?);
        }
        Command::Marginalize(a) => {
            let g = session.read_gmm(&a.input)?;
            let blocks = BlockIndex::with_x(a.keep.clone(), g.dim())?;
            session.emit_gmm(out(&a.output), algebra::marginalize(&g, &blocks, Block::X)?);
        }
        Command::Condition(a) => {
            let g = session.read_gmm(&a.input)?;
            let free: Vec<usize> = (0..g.dim()).filter(|i| !a.given.contains(i)).collect();
            let blocks = BlockIndex::new(free, a.given.clone(), g.dim())?;
            session.emit_gmm(out(&a.output), algebra::condition(&g, &blocks, &a.values)?);
        }
        Command::L2(a) => {
            let ga = session.read_gmm(&a.a)?;
            let gb = session.read_gmm(&a.b)?;
            let d = algebra::l2_distance(&ga, &gb)?;
            session.emit(out(&a.output), render_table(&["l2_distance"], &[vec![Cell::from(d)]]));
        }
        Command::Reduce(a) => {
            let g = session.read_gmm(&a.input)?;
            let r = reduce(&g, a.k, a.budget)?;
            let d = g.dim();
            if let Some(p) = &a.report {
                let row = vec![
                    Cell::from(g.len()),
                    Cell::from(a.k),
                    Cell::from(gmix::param_count(g.len(), d)),
                    Cell::from(gmix::param_count(r.reduced.len(), d)),
                    Cell::from(r.l2_before_refine),
                    Cell::from(r.l2_final),
                    Cell::from(r.refine_iterations),
                ];
                let header = [
                    "components_before",
                    "components_after",
                    "params_before",
                    "params_after",
                    "l2_greedy",
                    "l2_final",
                    "refine_iterations",
                ];
                session.emit(Some(p), render_table(&header, &[row]));
            }
            session.emit_gmm_primary(out(&a.output), r.reduced);
        }
        Command::Sample(a) => {
            let g = session.read_gmm(&a.input)?;
            if a.n == 0 {
                return Err(CliError::validation("--n must be at least 1"));
            }
            let mut stream = SeededStream::new(a.seed);
            let batch = sample_gmm(&mut stream, &g, a.n);
            let bytes = match a.hist {
                Some(bins) => {
                    if g.dim() != 1 {
                        return Err(CliError::validation("--hist needs a 1-D mixture"));
                    }
                    if bins == 0 {
                        return Err(CliError::validation("--hist needs at least one bin"));
                    }
                    let (lo, hi) = match &a.range {
                        Some(r) => (r[0], r[1]),
                        None => batch.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                            (l.min(v), h.max(v))
                        }),
                    };
                    check_range(lo, hi)?;
                    let rows: Vec<Vec<Cell>> = histogram(&batch.values, lo, hi, bins)
                        .into_iter()
                        .map(|b| vec![b.lo.into(), b.hi.into(), b.count.into(), b.density.into()])
                        .collect();
                    render_table(&["lo", "hi", "count", "density"], &rows)
                }
                None => {
                    let d = g.dim();
                    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
                    header.push("component".into());
                    let labels = batch.labels.as_deref().unwrap_or(&[]);
                    let rows: Vec<Vec<Cell>> = batch
                        .points()
                        .zip(labels)
                        .map(|(p, &l)| {
                            let mut r: Vec<Cell> = p.iter().map(|&v| Cell::from(v)).collect();
                            r.push(Cell::from(l));
                            r
                        })
                        .collect();
                    render_table(&header, &rows)
                }
            };
            session.emit(out(&a.output), bytes);
        }
        Command::Pdf(a) => {
            let g = session.read_gmm(&a.input)?;
            if g.dim() != 1 {
                return Err(CliError::validation("pdf needs a 1-D mixture"));
            }
            check_range(a.range[0], a.range[1])?;
            if a.points < 2 {
                return Err(CliError::validation("--points must be at least 2"));
            }
            let rows = measurement::linspace(a.range[0], a.range[1], a.points)
                .into_iter()
                .map(|x| Ok(vec![Cell::from(x), Cell::from(g.pdf(&[x])?), Cell::from(g.cdf_1d(x)?)]))
                .collect::<CliResult<Vec<_>>>()?;
            session.emit(out(&a.output), render_table(&["x", "pdf", "cdf"], &rows));
        }
        Command::Fit(a) => {
            let data = session.read_data(&a.data)?;
            let r = em_fit(&data, &a.em.config(a.k))?;
            if let Some(p) = &a.trace {
                session.emit(Some(p), trace_table(&r));
            }
            if let Some(p) = &a.report {
                session.emit(Some(p), report_table(&r));
            }
            session.emit_gmm_primary(out(&a.output), r.model);
        }
        Command::SelectK(a) => {
            let data = session.read_data(&a.data)?;
            let sel = select_model(&data, &a.candidates, &a.em.config(1))?;
            let criterion = Criterion::from(a.criterion);
            if let Some(p) = &a.table {
                let rows: Vec<Vec<Cell>> = sel
                    .rows
                    .iter()
                    .map(|row| match &row.outcome {
                        Ok(s) => vec![
                            row.k.into(),
                            row.free_params.into(),
                            s.loglik.into(),
                            s.aic.into(),
                            s.bic.into(),
                            "ok".into(),
                        ],
                        Err(e) => vec![
                            row.k.into(),
                            row.free_params.into(),
                            "".into(),
                            "".into(),
                            "".into(),
                            e.to_string().into(),
                        ],
                    })
                    .collect();
                session.emit(Some(p), render_table(&["k", "free_params", "loglik", "aic", "bic", "status"], &rows));
            }
            let best = sel.best_report(criterion).ok_or_else(|| {
                let first = sel.rows.iter().find_map(|r| r.outcome.as_ref().err().cloned());
                match first {
                    Some(e) => CliError::from(e),
                    None => CliError::validation("no candidate could be fitted"),
                }
            })?;
            session.messages.push(format!("selected k = {}", best.model.len()));
            session.emit_gmm_primary(out(&a.output), best.model.clone());
        }
        Command::DeviceSim(a) => {
            let expr = Expr::parse(&a.curve)?;
            let curve = CurveSpec::new(move |x| expr.eval(x), a.range[0], a.range[1], a.noise_var)?;
            let mut stream = SeededStream::new(a.seed);
            let data = measurement::simulate_device(&curve, a.n, &mut stream)?;
            let rows: Vec<Vec<Cell>> = data.points().map(|p| vec![p[0].into(), p[1].into()]).collect();
            session.emit(out(&a.output), render_table(&["x", "y"], &rows));
        }
        Command::DeviceFit(a) => {
            let data = session.read_data(&a.data)?;
            let choice = match (&a.k, &a.candidates) {
                (Some(k), _) => KChoice::Fixed(*k),
                (None, Some(c)) => KChoice::Select(c.clone(), a.criterion.into()),
                (None, None) => unreachable!("clap requires one of the two"),
            };
            let model = measurement::fit_device(&data, &choice, &a.em.config(1))?;
            let (lo, hi) = match &a.range {
                Some(r) => (r[0], r[1]),
                None => data
                    .points()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[0]), h.max(p[0]))),
            };
            if let Some(p) = &a.stats {
                check_range(lo, hi)?;
                if a.points < 2 {
                    return Err(CliError::validation("--points must be at least 2"));
                }
                let grid = measurement::linspace(lo, hi, a.points);
                let pts = measurement::conditional_stats(&model, &grid)?;
                session.emit(Some(p), stats_table(&pts));
            }
            if let (Some(c), Some(p)) = (&a.curve, &a.norms) {
                let noise_var = a.noise_var.expect("clap enforces --noise-var");
                let expr = Expr::parse(c)?;
                let curve = CurveSpec::new(move |x| expr.eval(x), lo, hi, noise_var)?;
                let n = measurement::validation_norms(&model, &curve)?;
                session.emit(
                    Some(p),
                    render_table(&["mean_error", "variance_error"], &[vec![n.mean_error.into(), n.variance_error.into()]]),
                );
            }
            session.emit_gmm_primary(out(&a.output), model.joint);
        }
        Command::Posterior(a) => {
            let g = session.read_gmm(&a.joint)?;
            let d = g.dim();
            let observed = match &a.observed {
                Some(o) => o.clone(),
                None => {
                    if a.y.len() >= d {
                        return Err(CliError::validation(format!(
                            "{} observed values leave no measurand in a {d}-D model",
                            a.y.len()
                        )));
                    }
                    (d - a.y.len()..d).collect()
                }
            };
            let free: Vec<usize> = (0..d).filter(|i| !observed.contains(i)).collect();
            let blocks = BlockIndex::new(free, observed, d)?;
            session.emit_gmm(out(&a.output), algebra::condition(&g, &blocks, &a.y)?);
        }
        Command::Product(a) => {
            let gx = session.read_gmm(&a.x)?;
            let gy = session.read_gmm(&a.y)?;
            let k = a.k.unwrap_or(gx.len() * gy.len());
            let mut cfg = EmConfig::new(k, 0);
            cfg.restarts = 0;
            cfg.max_iters = a.max_iters;
            let mut stream = SeededStream::new(a.seed);
            let r = measurement::propagate_product_with(&gx, &gy, a.n_mc, cfg, &mut stream)?;
            if let Some(p) = &a.samples {
                let rows: Vec<Vec<Cell>> = r.samples.iter().map(|&v| vec![Cell::from(v)]).collect();
                session.emit(Some(p), render_table(&["z"], &rows));
            }
            session.emit_gmm_primary(out(&a.output), r.fit.model);
        }
        Command::Qc(a) => {
            let g = session.read_gmm(&a.input)?;
            let q = QualityRegion::rectangle(a.lo.clone(), a.hi.clone())?;
            let mut stream = SeededStream::new(a.seed);
            let e = measurement::qc_probability(&g, &q, a.n_mc, &mut stream)?;
            let closed = e.closed_form.map_or(Cell::from(""), Cell::from);
            let row = vec![e.estimate.into(), e.standard_error.into(), e.inside.into(), e.n.into(), closed];
            session.emit(
                out(&a.output),
                render_table(&["estimate", "standard_error", "inside", "n", "closed_form"], &[row]),
            );
        }
        Command::Replay(_) => unreachable!("replay is handled by the caller"),
    }
    Ok(())
}

fn check_range(lo: f64, hi: f64) -> CliResult<()> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(CliError::validation(format!("range [{lo}, {hi}] must be finite with lo < hi")))
    }
}

/// Parses "a,b;c,d" into a row-major matrix.
pub fn parse_matrix(text: &str) -> CliResult<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = text
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| CliError::parse(format!("matrix entry `{}` is not a finite number", t.trim())))
                })
                .collect()
        })
        .collect::<CliResult<_>>()?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(CliError::parse("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

fn trace_table(r: &FitReport) -> Vec<u8> {
    let rows: Vec<Vec<Cell>> = r
        .loglik_trace
        .iter()
        .enumerate()
        .map(|(i, &l)| vec![Cell::from(i), Cell::from(l)])
        .collect();
    render_table(&["iteration", "loglik"], &rows)
}

fn report_table(r: &FitReport) -> Vec<u8> {
    let row = vec![
        Cell::from(r.model.len()),
        r.final_loglik.into(),
        r.aic.into(),
        r.bic.into(),
        r.free_params.into(),
        r.iterations_used.into(),
        r.rescues.into(),
        r.run_index.into(),
    ];
    render_table(
        &["k", "loglik", "aic", "bic", "free_params", "iterations", "rescues", "run_index"],
        &[row],
    )
}

fn stats_table(pts: &[ConditionalPoint]) -> Vec<u8> {
    let rows: Vec<Vec<Cell>> = pts
        .iter()
        .map(|p| vec![p.x.into(), p.mean.into(), p.variance.into(), Cell::from(p.flagged as usize)])
        .collect();
    render_table(&["x", "mean", "variance", "flagged"], &rows)
}
