//! Analytic-versus-finite-difference checks for every differentiable op.

use anyhow::{bail, Result};
use lesionkit::blocks::{
    excite, se_block_forward, se_block_input_grad, squeeze, ChannelMix, FeatureVolume, SeWeights, DEFAULT_LEAKY_SLOPE,
};
use lesionkit::detection::{detection_loss, AnchorLabel, RegTarget, CLS_WEIGHT};
use lesionkit::losses::{self, AnnotationMask, DiceConfig};
use lesionkit::mil::{self, BagLabel, MilScheme, PatchScores};
use lesionkit::rng::SplitMix64;
use lesionkit::tensor::{grad_check, softmax, DEFAULT_FD_STEP};
use lesionkit::Tensor;

use crate::report::{Assertion, Relation, RunReport};

/// Relative error every check must stay below.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub const DEFAULT_TRIALS: usize = 100;

pub const MODULES: [&str; 4] = ["losses", "mil", "detection", "blocks"];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckArgs {
    /// Restricts the run to one module of [`MODULES`].
    pub module: Option<String>,
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Perturbs every analytic gradient; the report must then fail.
    pub corrupt_gradient: bool,
}

impl Default for GradcheckArgs {
    fn default() -> Self {
        Self {
            module: None,
            trials: DEFAULT_TRIALS,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            corrupt_gradient: false,
        }
    }
}

type Case = fn(&mut SplitMix64, bool) -> lesionkit::Result<f64>;

/// Every registered check as `(module, name, case)`. A case draws one random
/// instance and returns the largest relative error.
pub fn registry() -> Vec<(&'static str, &'static str, Case)> {
    vec![
        ("losses", "dice", dice as Case),
        ("losses", "focal", focal),
        ("losses", "hybrid", hybrid),
        ("losses", "masked_dice", masked_dice),
        ("losses", "masked_focal", masked_focal),
        ("losses", "masked_hybrid", masked_hybrid),
        ("losses", "fcn_nll", fcn_nll),
        ("losses", "bce", bce),
        ("losses", "smooth_l1", smooth_l1),
        ("losses", "l2_regularizer", l2_regularizer),
        ("mil", "max_pool", mil_max_pool),
        ("mil", "label_assign", mil_label_assign),
        ("mil", "sparse", mil_sparse),
        ("mil", "patch_scorer", patch_scorer),
        ("detection", "detection_loss", detection),
        ("blocks", "se_block", se_block),
    ]
}

pub fn run(args: &GradcheckArgs) -> Result<RunReport> {
    if let Some(m) = &args.module {
        if !MODULES.contains(&m.as_str()) {
            bail!("unknown module filter {m:?}; expected one of {MODULES:?}");
        }
    }
    let mut report = RunReport::new("gradcheck", Some(args.seed));
    report
        .param("module", &args.module)
        .param("trials", args.trials)
        .param("tolerance", args.tolerance)
        .param("corrupt_gradient", args.corrupt_gradient)
        .param("fd_step", DEFAULT_FD_STEP);
    let mut rng = SplitMix64::new(args.seed);
    for (module, name, case) in registry() {
        if args.module.as_deref().is_some_and(|m| m != module) {
            continue;
        }
        // Each check gets its own stream so filtering does not shift others.
        let mut case_rng = rng.fork();
        if args.trials == 0 {
            continue;
        }
        let mut worst: f64 = 0.0;
        for _ in 0..args.trials {
            worst = worst.max(case(&mut case_rng, args.corrupt_gradient)?);
        }
        let key = format!("{module}.{name}");
        report.result(&format!("{key}.max_rel_err"), worst);
        report.assert(Assertion::new(key, worst, Relation::Below, 0.0, args.tolerance));
    }
    Ok(report)
}

fn check(f: impl Fn(&Tensor) -> f64, analytic: &Tensor, x: &Tensor, corrupt: bool) -> lesionkit::Result<f64> {
    let analytic = if corrupt {
        analytic.map(|g| g + 0.1 * (1.0 + g.abs()))?
    } else {
        analytic.clone()
    };
    Ok(grad_check(f, &analytic, x, DEFAULT_FD_STEP)?.max_rel_err)
}

/// A softmax-normalized `[C × N]` map and a one-hot label map of that shape.
fn prob_instance(rng: &mut SplitMix64) -> (Tensor, Tensor) {
    let (c, n) = (rng.int_range(2, 4), rng.int_range(2, 6));
    let logits = Tensor::new(vec![c, n], (0..c * n).map(|_| rng.normal()).collect()).expect("finite");
    let probs = softmax(&logits, 0).expect("rank 2");
    let mut labels = vec![0.0; c * n];
    for v in 0..n {
        labels[rng.int_range(0, c - 1) * n + v] = 1.0;
    }
    (probs, Tensor::new(vec![c, n], labels).expect("finite"))
}

/// Relative error is meaningless for entries near the finite-difference
/// noise floor, where a near-cancelling gradient meets roundoff in `f`.
/// Exact zeros are fine: the loss then ignores that entry entirely.
const GRAD_NOISE_FLOOR: f64 = 1e-5;

fn well_conditioned(grad: &Tensor) -> bool {
    grad.data().iter().all(|&g| g == 0.0 || g.abs() >= GRAD_NOISE_FLOOR)
}

fn dice_config(rng: &mut SplitMix64) -> DiceConfig {
    DiceConfig {
        alpha: rng.uniform(0.2, 0.8),
        beta: rng.uniform(0.2, 0.8),
        eps: DiceConfig::default().eps,
    }
}

/// A random annotation mask over `c` classes with at least one anatomy class
/// annotated, plus positive class weights.
fn mask_instance(rng: &mut SplitMix64, c: usize) -> (AnnotationMask, Vec<f64>) {
    let mut anatomy: Vec<bool> = (1..c).map(|_| rng.next_f64() < 0.6).collect();
    let pick = rng.int_range(0, anatomy.len() - 1);
    anatomy[pick] = true;
    let weights = (0..c).map(|_| rng.uniform(0.1, 1.0)).collect();
    (AnnotationMask::from_anatomy(&anatomy), weights)
}

fn dice(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let cfg = dice_config(rng);
        let out = losses::dice_loss(&p, &g, &cfg)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::dice_loss(x, &g, &cfg).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn focal(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let out = losses::focal_loss(&p, &g)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::focal_loss(x, &g).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn hybrid(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let cfg = dice_config(rng);
        let lambda = rng.uniform(0.0, 2.0);
        let out = losses::hybrid_loss(&p, &g, lambda, &cfg)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::hybrid_loss(x, &g, lambda, &cfg).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn masked_dice(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let (mask, w) = mask_instance(rng, p.shape()[0]);
        let cfg = dice_config(rng);
        let out = losses::masked_weighted_dice(&p, &g, &mask, &w, &cfg)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::masked_weighted_dice(x, &g, &mask, &w, &cfg).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn masked_focal(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let (mask, w) = mask_instance(rng, p.shape()[0]);
        let out = losses::masked_weighted_focal(&p, &g, &mask, &w)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::masked_weighted_focal(x, &g, &mask, &w).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn masked_hybrid(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let (mask, w) = mask_instance(rng, p.shape()[0]);
        let cfg = dice_config(rng);
        let lambda = rng.uniform(0.0, 2.0);
        let out = losses::masked_hybrid_loss(&p, &g, &mask, &w, lambda, &cfg)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::masked_hybrid_loss(x, &g, &mask, &w, lambda, &cfg).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn fcn_nll(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    loop {
        let (p, g) = prob_instance(rng);
        let out = losses::fcn_nll(&p, &g)?;
        if !well_conditioned(&out.grad) {
            continue;
        }
        return check(
            |x| losses::fcn_nll(x, &g).map_or(f64::NAN, |o| o.value),
            &out.grad,
            &p,
            corrupt,
        );
    }
}

fn bce(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let n = rng.int_range(1, 10);
    let p = Tensor::vector((0..n).map(|_| rng.uniform(0.02, 0.98)).collect())?;
    let y = Tensor::vector((0..n).map(|_| (rng.next_f64() < 0.5) as u8 as f64).collect())?;
    let out = losses::bce(&p, &y)?;
    check(
        |x| losses::bce(x, &y).map_or(f64::NAN, |o| o.value),
        &out.grad,
        &p,
        corrupt,
    )
}

/// Residuals are kept off the kink at `|d| = 1`.
fn smooth_l1(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let n = rng.int_range(1, 10);
    let target = Tensor::vector((0..n).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
    let pred = Tensor::vector(
        target
            .data()
            .iter()
            .map(|&t| loop {
                let d = rng.uniform(-3.0, 3.0);
                if (d.abs() - 1.0).abs() > 1e-3 {
                    break t + d;
                }
            })
            .collect(),
    )?;
    let out = losses::smooth_l1(&pred, &target)?;
    check(
        |x| losses::smooth_l1(x, &target).map_or(f64::NAN, |o| o.value),
        &out.grad,
        &pred,
        corrupt,
    )
}

fn l2_regularizer(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let n = rng.int_range(1, 10);
    let lambda = rng.uniform(0.0, 1.0);
    let theta = Tensor::vector((0..n).map(|_| rng.uniform(-2.0, 2.0)).collect())?;
    let (_, grad) = losses::l2_regularizer(theta.data(), lambda);
    check(
        |x| losses::l2_regularizer(x.data(), lambda).0,
        &Tensor::vector(grad)?,
        &theta,
        corrupt,
    )
}

/// Scores are kept 1e-3 apart so the max and the top-k cut stay put under
/// the finite-difference step.
fn bag(rng: &mut SplitMix64) -> (Tensor, BagLabel) {
    let m = rng.int_range(1, 8);
    let scores = loop {
        let v: Vec<f64> = (0..m).map(|_| rng.uniform(0.02, 0.98)).collect();
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            break v;
        }
    };
    let r = Tensor::vector(scores).expect("finite");
    let y = if rng.next_f64() < 0.5 {
        BagLabel::Positive
    } else {
        BagLabel::Negative
    };
    (r, y)
}

fn mil_case(r: &Tensor, y: BagLabel, scheme: MilScheme, corrupt: bool) -> lesionkit::Result<f64> {
    let out = scheme.loss(&PatchScores::new(r.clone())?, y)?;
    check(
        |x| {
            PatchScores::new(x.clone())
                .and_then(|s| scheme.loss(&s, y))
                .map_or(f64::NAN, |o| o.value)
        },
        &out.grad,
        r,
        corrupt,
    )
}

fn mil_max_pool(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let (r, y) = bag(rng);
    mil_case(&r, y, MilScheme::MaxPool, corrupt)
}

fn mil_label_assign(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let (r, y) = bag(rng);
    let k = rng.int_range(1, r.len());
    mil_case(&r, y, MilScheme::LabelAssign { k }, corrupt)
}

fn mil_sparse(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let (r, y) = bag(rng);
    let mu = rng.uniform(0.0, 0.5);
    mil_case(&r, y, MilScheme::Sparse { mu }, corrupt)
}

/// Chain rule through the shared patch scorer into the max-pool loss, for
/// features, weights and bias.
fn patch_scorer(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let (h, w, c) = (rng.int_range(1, 3), rng.int_range(1, 3), rng.int_range(1, 4));
    let f = Tensor::new(vec![h, w, c], (0..h * w * c).map(|_| rng.normal()).collect())?;
    let a = Tensor::vector((0..c).map(|_| rng.normal()).collect())?;
    let b = rng.normal();
    let y = if rng.next_f64() < 0.5 {
        BagLabel::Positive
    } else {
        BagLabel::Negative
    };
    let objective = |f: &Tensor, a: &Tensor, b: f64| {
        mil::patch_scores(f, a, b)
            .and_then(|s| mil::max_pool_mil_loss(&s.scores, y))
            .map_or(f64::NAN, |o| o.value)
    };
    let scoring = mil::patch_scores(&f, &a, b)?;
    let upstream = mil::max_pool_mil_loss(&scoring.scores, y)?.grad;
    let grads = scoring.backward(&upstream)?;
    let bt = Tensor::vector(vec![b])?;
    let ef = check(|x| objective(x, &a, b), &grads.features, &f, corrupt)?;
    let ea = check(|x| objective(&f, x, b), &grads.weights, &a, corrupt)?;
    let eb = check(
        |x| objective(&f, &a, x.data()[0]),
        &Tensor::vector(vec![grads.bias])?,
        &bt,
        corrupt,
    )?;
    Ok(ef.max(ea).max(eb))
}

/// Logits and deltas packed as rows `[logit, tx, ty, tz, td]`.
fn detection(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let n = rng.int_range(1, 6);
    let mut labels: Vec<AnchorLabel> = (0..n)
        .map(|_| match rng.int_range(0, 2) {
            0 => AnchorLabel::Positive,
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        })
        .collect();
    if labels.iter().all(|l| *l == AnchorLabel::Ignore) {
        labels[0] = AnchorLabel::Positive;
    }
    let targets: Vec<RegTarget> = (0..n)
        .map(|_| RegTarget::from_array([0; 4].map(|_| rng.uniform(-1.0, 1.0))))
        .collect();
    let mut packed = Vec::with_capacity(n * 5);
    for t in &targets {
        packed.push(rng.uniform(-3.0, 3.0));
        for tv in t.to_array() {
            let d = loop {
                let d = rng.uniform(-2.5, 2.5);
                if (d.abs() - 1.0).abs() > 1e-3 {
                    break d;
                }
            };
            packed.push(tv + d);
        }
    }
    let x = Tensor::new(vec![n, 5], packed)?;
    let split = |x: &Tensor| {
        let d = x.data();
        let logits: Vec<f64> = (0..n).map(|i| d[i * 5]).collect();
        let deltas: Vec<RegTarget> = (0..n)
            .map(|i| RegTarget::from_array([d[i * 5 + 1], d[i * 5 + 2], d[i * 5 + 3], d[i * 5 + 4]]))
            .collect();
        (logits, deltas)
    };
    let (logits, deltas) = split(&x);
    let out = detection_loss(&logits, &deltas, &labels, &targets, CLS_WEIGHT)?;
    let mut analytic = vec![0.0; n * 5];
    for i in 0..n {
        analytic[i * 5] = out.grad_logits.data()[i];
        analytic[i * 5 + 1..i * 5 + 5].copy_from_slice(&out.grad_deltas.data()[i * 4..i * 4 + 4]);
    }
    check(
        |t| {
            let (l, d) = split(t);
            detection_loss(&l, &d, &labels, &targets, CLS_WEIGHT).map_or(f64::NAN, |o| o.value)
        },
        &Tensor::new(vec![n, 5], analytic)?,
        &x,
        corrupt,
    )
}

/// Input gradient of `Σ upstream ⊙ SE(x)` with a linear channel-mixing
/// branch. Draws with a LeakyReLU input near its kink are rejected.
fn se_block(rng: &mut SplitMix64, corrupt: bool) -> lesionkit::Result<f64> {
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())
    };
    let (k, r) = (4, 2);
    let (x, mix, w, up) = loop {
        let x = FeatureVolume::new(random(&[k, 2, 2, 2])?)?;
        let mix = ChannelMix {
            matrix: random(&[k, k])?,
        };
        let w = SeWeights::new(random(&[k / r, k])?, random(&[k, k / r])?, r, DEFAULT_LEAKY_SLOPE)?;
        let up = random(&[k, 2, 2, 2])?;
        if min_kink_distance(&x, &mix, &w)? > SE_KINK_MARGIN {
            break (x, mix, w, up);
        }
    };
    let analytic = se_block_input_grad(&x, &mix, &w, &up)?;
    check(
        |t| {
            FeatureVolume::new(t.clone())
                .and_then(|v| se_block_forward(&v, |v| mix.forward(v), &w))
                .and_then(|y| y.tensor().dot(&up))
                .unwrap_or(f64::NAN)
        },
        &analytic,
        x.tensor(),
        corrupt,
    )
}

const SE_KINK_MARGIN: f64 = 1e-3;

/// Smallest `|input|` over the hidden and output LeakyReLUs of the block.
fn min_kink_distance(x: &FeatureVolume, mix: &ChannelMix, w: &SeWeights) -> lesionkit::Result<f64> {
    let xr = mix.forward(x)?;
    let z = squeeze(&xr);
    let k = w.channels();
    let hidden =
        w.w1.data()
            .chunks_exact(k)
            .map(|row| row.iter().zip(z.data()).map(|(a, b)| a * b).sum::<f64>());
    let s = excite(&z, w)?;
    let n = x.spatial_len();
    let outputs = (0..k * n).map(|i| s.data()[i / n] * xr.tensor().data()[i] + x.tensor().data()[i]);
    Ok(hidden.chain(outputs).map(f64::abs).fold(f64::INFINITY, f64::min))
}
