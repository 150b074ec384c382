//! Mean-field inference on a user-supplied or generated 2D instance.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use lesionkit::crf::{self, CrfParams, MeanFieldMode, UnaryField};
use lesionkit::metrics::{dice_coefficient, BinaryMask};
use lesionkit::rng::SplitMix64;
use lesionkit::synth::gen_mass_image;
use lesionkit::tensor::{sigmoid_scalar, softmax};
use lesionkit::Tensor;

use crate::io::{read_json, read_tensor};
use crate::report::{Assertion, Relation, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// Side length of the generated instance.
pub const DEMO_SIDE: usize = 40;

const DEMO_NOISE: f64 = 0.2;

/// Slope of the logistic map from intensity to the demo foreground unary.
const DEMO_UNARY_SLOPE: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CrfArgs {
    /// `[L × N]` unary potentials; generated when absent.
    pub unary: Option<PathBuf>,
    /// `[H × W]` intensities with `H·W = N`.
    pub image: Option<PathBuf>,
    /// JSON-encoded parameters; Potts defaults otherwise.
    pub params: Option<PathBuf>,
    pub mode: MeanFieldMode,
    pub iterations: Option<usize>,
    pub seed: Option<u64>,
    pub tolerance: f64,
}

impl Default for CrfArgs {
    fn default() -> Self {
        Self {
            unary: None,
            image: None,
            params: None,
            mode: MeanFieldMode::Standard,
            iterations: None,
            seed: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Parameters used for the generated instance. The appearance kernel couples
/// every pair of similar pixels regardless of distance, so it gets a small
/// weight next to the local spatial kernel.
pub fn demo_params() -> CrfParams {
    CrfParams {
        kernel_weights: vec![0.001, 2.0],
        appearance_bandwidth: 0.1,
        spatial_bandwidth: 1.0,
        ..CrfParams::potts(2)
    }
}

struct Instance {
    psi: UnaryField,
    image: Tensor,
    truth: Option<BinaryMask>,
}

fn demo_instance(seed: u64) -> Result<Instance> {
    let mut rng = SplitMix64::new(seed);
    let (image, truth) = gen_mass_image(DEMO_SIDE, DEMO_SIDE, DEMO_NOISE, &mut rng)?;
    let fg: Vec<f64> = image
        .data()
        .iter()
        .map(|&v| sigmoid_scalar(DEMO_UNARY_SLOPE * (v - 0.5)))
        .collect();
    let probs: Vec<f64> = fg.iter().map(|p| 1.0 - p).chain(fg.iter().copied()).collect();
    let psi = UnaryField::from_probs(&Tensor::new(vec![2, fg.len()], probs)?)?;
    Ok(Instance {
        psi,
        image,
        truth: Some(truth),
    })
}

fn hard_labels(q: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let (labels, n) = (q.shape()[0], q.shape()[1]);
    let data = (0..n)
        .map(|i| {
            (0..labels)
                .max_by(|&a, &b| q.data()[a * n + i].total_cmp(&q.data()[b * n + i]).then(b.cmp(&a)))
                .unwrap_or(0) as f64
        })
        .collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

/// Runs inference and returns the report together with the hard `[H × W]`
/// segmentation.
pub fn run(args: &CrfArgs) -> Result<(RunReport, Tensor)> {
    let instance = match (&args.unary, &args.image) {
        (Some(u), Some(i)) => Instance {
            psi: UnaryField::new(read_tensor(u)?)?,
            image: read_tensor(i)?,
            truth: None,
        },
        (None, None) => {
            let seed = args.seed.context("--seed is required for the generated crf instance")?;
            demo_instance(seed)?
        }
        _ => bail!("--unary and --image must be given together"),
    };
    if instance.image.rank() != 2 {
        bail!("image must be [H x W], got {:?}", instance.image.shape());
    }
    let (h, w) = (instance.image.shape()[0], instance.image.shape()[1]);
    if instance.psi.pixels() != h * w {
        bail!("unaries cover {} pixels, image has {}", instance.psi.pixels(), h * w);
    }
    let params = match &args.params {
        Some(p) => read_json::<CrfParams>(p)?,
        None if args.unary.is_none() => demo_params(),
        None => CrfParams::potts(instance.psi.labels()),
    };
    let iterations = args.iterations.unwrap_or(params.iterations_test);

    let positions = crf::grid_positions(h, w);
    let intensities = instance.image.reshape(&[h * w])?;
    let kernels = crf::gaussian_kernels(&intensities, &positions, &params)?;
    let (q, residuals) = crf::meanfield_infer_traced(&instance.psi, &kernels, &params, iterations, args.mode)?;
    let segmentation = hard_labels(&q, &[h, w])?;

    let mut report = RunReport::new("crf", args.seed);
    report
        .param("mode", args.mode)
        .param("iterations", iterations)
        .param("crf_params", &params)
        .param("generated", args.unary.is_none())
        .param("height", h)
        .param("width", w)
        .result("simplex_residuals", &residuals);
    let worst = residuals.iter().copied().fold(0.0, f64::max);
    report.assert(Assertion::new(
        "simplex_residual",
        worst,
        Relation::Below,
        0.0,
        args.tolerance,
    ));

    if params.kernel_weights.iter().all(|&k| k == 0.0) && args.mode == MeanFieldMode::Standard {
        let init = softmax(&instance.psi.0.scale(-1.0)?, 0)?;
        let dev = q.sub(&init)?.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        report.assert(Assertion::new(
            "zero_kernel_equals_unary_softmax",
            dev,
            Relation::Approx,
            0.0,
            args.tolerance,
        ));
    }
    if let Some(truth) = &instance.truth {
        let unary_only = hard_labels(&softmax(&instance.psi.0.scale(-1.0)?, 0)?, &[h, w])?;
        report
            .result("dice_unary", dice_coefficient(&BinaryMask::new(unary_only)?, truth)?)
            .result(
                "dice_crf",
                dice_coefficient(&BinaryMask::new(segmentation.clone())?, truth)?,
            );
    }
    Ok((report, segmentation))
}
