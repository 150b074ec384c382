//! Overlap, boundary and agreement metrics between two binary masks.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Result};
use lesionkit::metrics::{cohen_kappa, dice_coefficient, hausdorff95, trimap_accuracy, BandMetric, BinaryMask};

use crate::io::read_tensor;
use crate::report::{Assertion, Relation, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

pub const METRICS: [&str; 4] = ["dice", "trimap", "hd95", "kappa"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsArgs {
    pub pred: PathBuf,
    pub gt: PathBuf,
    /// Subset of [`METRICS`]; all when empty.
    pub which: Vec<String>,
    pub band_width: usize,
    pub band_metric: BandMetric,
    /// Physical voxel size per axis, for the Hausdorff distance.
    pub spacing: Option<Vec<f64>>,
    /// Expected values; each becomes an assertion.
    pub expect: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl MetricsArgs {
    pub fn new(pred: PathBuf, gt: PathBuf) -> Self {
        Self {
            pred,
            gt,
            which: Vec::new(),
            band_width: 3,
            band_metric: BandMetric::default(),
            spacing: None,
            expect: BTreeMap::new(),
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

pub fn run(args: &MetricsArgs) -> Result<RunReport> {
    let which: Vec<&str> = if args.which.is_empty() {
        METRICS.to_vec()
    } else {
        args.which.iter().map(String::as_str).collect()
    };
    if let Some(bad) = which.iter().find(|w| !METRICS.contains(w)) {
        bail!("unknown metric {bad:?}; expected some of {METRICS:?}");
    }
    if let Some(bad) = args.expect.keys().find(|k| !which.contains(&k.as_str())) {
        bail!("expectation for {bad:?}, which is not computed");
    }
    let pred = BinaryMask::new(read_tensor(&args.pred)?)?;
    let gt = BinaryMask::new(read_tensor(&args.gt)?)?;
    if pred.shape() != gt.shape() {
        bail!(
            "shape mismatch: prediction {:?}, ground truth {:?}",
            pred.shape(),
            gt.shape()
        );
    }

    let mut report = RunReport::new("metrics", None);
    report
        .param("metrics", &which)
        .param("band_width", args.band_width)
        .param("band_metric", format!("{:?}", args.band_metric).to_lowercase())
        .param("spacing", &args.spacing)
        .param("shape", pred.shape());
    let mut values = BTreeMap::new();
    for w in &which {
        let v = match *w {
            "dice" => dice_coefficient(&pred, &gt)?,
            "trimap" => trimap_accuracy(&pred, &gt, args.band_width, args.band_metric)?,
            "hd95" => hausdorff95(&pred, &gt, args.spacing.as_deref())?,
            "kappa" => {
                let labels = |m: &BinaryMask| (0..m.tensor().len()).map(|i| m.get(i)).collect::<Vec<bool>>();
                cohen_kappa(&labels(&pred), &labels(&gt))?
            }
            _ => unreachable!("validated above"),
        };
        values.insert(w.to_string(), v);
        report.result(w, v);
    }
    for (name, &expected) in &args.expect {
        report.assert(Assertion::new(
            name.clone(),
            values[name],
            Relation::Approx,
            expected,
            args.tolerance,
        ));
    }
    Ok(report)
}
