use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lesionkit::crf::MeanFieldMode;
use lesionkit::deepem::{InferenceMode, SplitSizes};
use lesionkit::metrics::BandMetric;
use lesionkit_cli::commands::{crf, deepem, detect, gradcheck, metrics, mil};
use lesionkit_cli::io::write_text;
use lesionkit_cli::RunReport;

#[derive(Parser)]
#[command(name = "lesionkit", version, about = "Lesion analysis losses, inference and metrics")]
struct Cli {
    /// Seed for every random draw; required by stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Report path; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides the command's default assertion tolerance.
    #[arg(long, global = true)]
    tolerance: Option<f64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic gradients against central finite differences.
    Gradcheck {
        /// Restrict to one module: losses, mil, detection or blocks.
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        /// Perturb every analytic gradient (negative control).
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Mean-field CRF inference; generates a 40x40 instance without inputs.
    Crf {
        /// [L x N] unary potentials (tjson).
        #[arg(long, requires = "image")]
        unary: Option<PathBuf>,
        /// [H x W] intensities (tjson).
        #[arg(long, requires = "unary")]
        image: Option<PathBuf>,
        /// CRF parameters as JSON.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Standard)]
        mode: Mode,
        #[arg(long)]
        iterations: Option<usize>,
        /// Where to write the [H x W] label map (tjson).
        #[arg(long)]
        segmentation: Option<PathBuf>,
    },
    /// MIL loss and gradient for one bag.
    Mil {
        /// Patch scores (tjson).
        #[arg(long, conflicts_with = "values", required_unless_present = "values")]
        scores: Option<PathBuf>,
        /// Patch scores as a comma-separated list.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Bag label, 0 or 1.
        #[arg(long)]
        label: u8,
        #[arg(long, value_enum)]
        scheme: Scheme,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
    },
    /// FROC of oracle, random and learned scorers on generated scans.
    DetectSim {
        /// Scenario JSON; the reference scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        train_scans: usize,
        #[arg(long, default_value_t = 40)]
        test_scans: usize,
        #[arg(long, default_value_t = 10)]
        random_boxes: usize,
    },
    /// Supervised baseline versus EM with weak labels.
    Deepem {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Inference::Map)]
        mode: Inference,
        #[arg(long, default_value_t = 16)]
        epochs: usize,
        #[arg(long, default_value_t = 20)]
        full: usize,
        #[arg(long, default_value_t = 200)]
        weak: usize,
        #[arg(long, default_value_t = 40)]
        val: usize,
        /// Fail unless EM beats the baseline by this much.
        #[arg(long)]
        min_lift: Option<f64>,
    },
    /// Dice, trimap accuracy, HD95 and kappa between two masks.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of dice,trimap,hd95,kappa.
        #[arg(long, value_delimiter = ',')]
        which: Vec<String>,
        #[arg(long, default_value_t = 3)]
        band_width: usize,
        #[arg(long, value_enum, default_value_t = Band::Chebyshev)]
        band_metric: Band,
        /// Voxel size per axis, comma-separated.
        #[arg(long, value_delimiter = ',')]
        spacing: Option<Vec<f64>>,
        /// Expected value as name=value; repeatable.
        #[arg(long, value_parser = parse_expectation)]
        expect: Vec<(String, f64)>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    PaperLiteral,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    MaxPool,
    LabelAssign,
    Sparse,
}

#[derive(Clone, Copy, ValueEnum)]
enum Inference {
    Map,
    Sampling,
}

#[derive(Clone, Copy, ValueEnum)]
enum Band {
    Chebyshev,
    Euclidean,
}

fn parse_expectation(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    let v = v.parse().map_err(|e| format!("{v:?}: {e}"))?;
    Ok((k.to_string(), v))
}

fn require_seed(seed: Option<u64>, command: &str) -> Result<u64> {
    seed.ok_or_else(|| anyhow!("--seed is required for {command}"))
}

fn dispatch(cli: &Cli) -> Result<RunReport> {
    let tol = |default: f64| cli.tolerance.unwrap_or(default);
    match &cli.command {
        Command::Gradcheck {
            module,
            trials,
            corrupt_gradient,
        } => gradcheck::run(&gradcheck::GradcheckArgs {
            module: module.clone(),
            trials: *trials,
            seed: require_seed(cli.seed, "gradcheck")?,
            tolerance: tol(gradcheck::DEFAULT_TOLERANCE),
            corrupt_gradient: *corrupt_gradient,
        }),
        Command::Crf {
            unary,
            image,
            params,
            mode,
            iterations,
            segmentation,
        } => {
            let (report, seg) = crf::run(&crf::CrfArgs {
                unary: unary.clone(),
                image: image.clone(),
                params: params.clone(),
                mode: match mode {
                    Mode::Standard => MeanFieldMode::Standard,
                    Mode::PaperLiteral => MeanFieldMode::PaperLiteral,
                },
                iterations: *iterations,
                seed: cli.seed,
                tolerance: tol(crf::DEFAULT_TOLERANCE),
            })?;
            if let Some(path) = segmentation {
                write_text(path, &seg.to_tjson())?;
            }
            Ok(report)
        }
        Command::Mil {
            scores,
            values,
            label,
            scheme,
            k,
            mu,
        } => mil::run(&mil::MilArgs {
            scores: match (scores, values) {
                (Some(p), _) => mil::ScoreSource::File(p.clone()),
                (None, Some(v)) => mil::ScoreSource::Inline(v.clone()),
                (None, None) => unreachable!("clap requires one of them"),
            },
            label: *label,
            scheme: match scheme {
                Scheme::MaxPool => mil::SchemeName::MaxPool,
                Scheme::LabelAssign => mil::SchemeName::LabelAssign,
                Scheme::Sparse => mil::SchemeName::Sparse,
            },
            k: *k,
            mu: *mu,
            tolerance: tol(mil::DEFAULT_TOLERANCE),
        }),
        Command::DetectSim {
            scenario,
            train_scans,
            test_scans,
            random_boxes,
        } => detect::run(&detect::DetectArgs {
            scenario: scenario.clone(),
            seed: require_seed(cli.seed, "detect-sim")?,
            train_scans: *train_scans,
            test_scans: *test_scans,
            random_boxes: *random_boxes,
            tolerance: tol(detect::DEFAULT_TOLERANCE),
        }),
        Command::Deepem {
            scenario,
            mode,
            epochs,
            full,
            weak,
            val,
            min_lift,
        } => deepem::run(&deepem::DeepEmArgs {
            scenario: scenario.clone(),
            mode: match mode {
                Inference::Map => InferenceMode::Map,
                Inference::Sampling => InferenceMode::Sampling,
            },
            epochs: *epochs,
            seed: require_seed(cli.seed, "deepem")?,
            sizes: SplitSizes {
                full: *full,
                weak: *weak,
                val: *val,
            },
            min_lift: *min_lift,
            tolerance: tol(deepem::DEFAULT_TOLERANCE),
        }),
        Command::Metrics {
            pred,
            gt,
            which,
            band_width,
            band_metric,
            spacing,
            expect,
        } => {
            let mut args = metrics::MetricsArgs::new(pred.clone(), gt.clone());
            args.which = which.clone();
            args.band_width = *band_width;
            args.band_metric = match band_metric {
                Band::Chebyshev => BandMetric::Chebyshev,
                Band::Euclidean => BandMetric::Euclidean,
            };
            args.spacing = spacing.clone();
            args.expect = expect.iter().cloned().collect::<BTreeMap<_, _>>();
            args.tolerance = tol(metrics::DEFAULT_TOLERANCE);
            metrics::run(&args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = dispatch(&cli).and_then(|report| {
        let json = report.to_json();
        match &cli.out {
            Some(path) => write_text(path, &json).context("writing the report")?,
            None => print!("{json}"),
        }
        Ok(report.passed)
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
