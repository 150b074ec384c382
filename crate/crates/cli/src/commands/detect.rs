//! FROC of oracle, random and learned scorers on generated scans.

use std::path::PathBuf;

use anyhow::Result;
use lesionkit::deepem::{em_train, Detector, EmConfig, HalfGaussianModel, LobeModel, LogisticBlobDetector, ScanData};
use lesionkit::detection::{
    filter_detections, froc, Box3, FrocResult, HitRule, ScanResult, DETECTION_LOGIT_THRESHOLD, FROC_FP_RATES, NMS_IOU,
};
use lesionkit::rng::SplitMix64;
use lesionkit::synth::{gen_volume, Scenario};

use crate::io::read_json;
use crate::report::{Assertion, Relation, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-12;

/// A random scorer must stay below this FROC.
pub const RANDOM_FROC_CEILING: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectArgs {
    pub scenario: Option<PathBuf>,
    pub seed: u64,
    pub train_scans: usize,
    pub test_scans: usize,
    /// Boxes drawn per scan by the random scorer.
    pub random_boxes: usize,
    pub tolerance: f64,
}

impl Default for DetectArgs {
    fn default() -> Self {
        Self {
            scenario: None,
            seed: 0,
            train_scans: 20,
            test_scans: 40,
            random_boxes: 10,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Oracle detections: every ground-truth box with score 1.
pub fn oracle_results(scans: &[ScanData]) -> Vec<ScanResult> {
    scans
        .iter()
        .map(|s| ScanResult {
            dets: s.gts.iter().map(|g| (*g, 1.0)).collect(),
            gts: s.gts.clone(),
        })
        .collect()
}

/// Uniformly placed boxes with diameters from the scenario's nodule range
/// and uniform scores.
pub fn random_results(
    scans: &[ScanData],
    scenario: &Scenario,
    per_scan: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<ScanResult>> {
    scans
        .iter()
        .map(|s| {
            let [ex, ey, ez] = s.extents.as_f64();
            let dets = (0..per_scan)
                .map(|_| {
                    let d = 2.0 * rng.uniform(scenario.radius.lo, scenario.radius.hi);
                    let b = Box3::new(rng.uniform(0.0, ex), rng.uniform(0.0, ey), rng.uniform(0.0, ez), d)?;
                    Ok((b, rng.next_f64()))
                })
                .collect::<lesionkit::Result<_>>()?;
            Ok(ScanResult {
                dets,
                gts: s.gts.clone(),
            })
        })
        .collect()
}

pub fn detector_results<D: Detector + ?Sized>(detector: &D, scans: &[ScanData]) -> Result<Vec<ScanResult>> {
    scans
        .iter()
        .map(|s| {
            let dets = filter_detections(&detector.propose(s)?, DETECTION_LOGIT_THRESHOLD, NMS_IOU)?;
            Ok(ScanResult {
                dets: dets.into_iter().map(|d| (d.bbox, d.score)).collect(),
                gts: s.gts.clone(),
            })
        })
        .collect()
}

pub fn load_scenario(path: Option<&PathBuf>, seed: u64) -> Result<Scenario> {
    let mut scenario = match path {
        Some(p) => read_json::<Scenario>(p)?,
        None => Scenario::default(),
    };
    scenario.seed = seed;
    scenario.validate()?;
    Ok(scenario)
}

fn generate(scenario: &Scenario, n: usize, rng: &mut SplitMix64) -> Result<Vec<ScanData>> {
    (0..n)
        .map(|_| {
            let g = gen_volume(scenario, &mut rng.fork())?;
            Ok(ScanData::from_volume(g.volume, g.nodules, false)?)
        })
        .collect()
}

fn froc_json(r: &FrocResult) -> serde_json::Value {
    serde_json::to_value(r).unwrap_or(serde_json::Value::Null)
}

pub fn run(args: &DetectArgs) -> Result<RunReport> {
    let scenario = load_scenario(args.scenario.as_ref(), args.seed)?;
    let mut rng = scenario.rng();
    let train = generate(&scenario, args.train_scans, &mut rng)?;
    let test = generate(&scenario, args.test_scans, &mut rng)?;
    let rule = HitRule::default();

    let mut report = RunReport::new("detect-sim", Some(args.seed));
    report
        .param("scenario", &scenario)
        .param("train_scans", args.train_scans)
        .param("test_scans", args.test_scans)
        .param("random_boxes", args.random_boxes)
        .param("logit_threshold", DETECTION_LOGIT_THRESHOLD)
        .param("nms_iou", NMS_IOU)
        .param("hit_rule", rule);

    let oracle_scans = oracle_results(&test);
    let oracle = froc(&oracle_scans, rule)?;
    report.result("oracle", froc_json(&oracle));
    report.assert(Assertion::new(
        "oracle_froc",
        oracle.froc,
        Relation::Approx,
        1.0,
        args.tolerance,
    ));
    let standard_points = oracle.fp_rates.as_slice() == FROC_FP_RATES.as_slice();
    report.assert(Assertion::new(
        "standard_operating_points",
        standard_points as u8 as f64,
        Relation::Approx,
        1.0,
        0.0,
    ));
    // Dropping any single true positive must cost sensitivity.
    let mut worst_drop = f64::NEG_INFINITY;
    for (s, scan) in oracle_scans.iter().enumerate() {
        for i in 0..scan.dets.len() {
            let mut pruned = oracle_scans.clone();
            pruned[s].dets.remove(i);
            worst_drop = worst_drop.max(froc(&pruned, rule)?.froc);
        }
    }
    if worst_drop.is_finite() {
        report.assert(Assertion::new(
            "oracle_minus_one_tp_froc",
            worst_drop,
            Relation::Below,
            oracle.froc,
            0.0,
        ));
    }

    let random = froc(
        &random_results(&test, &scenario, args.random_boxes, &mut rng.fork())?,
        rule,
    )?;
    report.result("random", froc_json(&random));
    report.assert(Assertion::new(
        "random_froc",
        random.froc,
        Relation::Below,
        RANDOM_FROC_CEILING,
        0.0,
    ));

    // The learned scorer is the supervised baseline of the EM experiment.
    let mut detector = LogisticBlobDetector::new(&train, Default::default())?;
    let config = EmConfig::default();
    let fit = em_train(
        &mut detector,
        &train,
        &[],
        &test,
        &HalfGaussianModel::new(1.0, lesionkit::deepem::SLICE_TRUNCATION_MU)?,
        &LobeModel::default(),
        &config,
        &mut rng.fork(),
    )?;
    let learned = froc(&detector_results(&detector, &test)?, rule)?;
    report
        .param("learned_updates", config.epochs + 1)
        .result("learned", froc_json(&learned))
        .result(
            "learned_froc_trace",
            fit.epochs.iter().map(|e| e.froc_val).collect::<Vec<_>>(),
        );
    report.assert(Assertion::new(
        "learned_beats_random",
        learned.froc,
        Relation::Above,
        random.froc,
        0.0,
    ));
    Ok(report)
}
