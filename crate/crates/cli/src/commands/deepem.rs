//! Supervised baseline versus EM with weak labels on one synthetic split.

use std::path::PathBuf;

use anyhow::Result;
use lesionkit::deepem::{run_experiment, EmConfig, InferenceMode, LogisticConfig, SplitSizes, SyntheticSplit};

use super::detect::load_scenario;
use crate::report::{Assertion, Relation, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DeepEmArgs {
    pub scenario: Option<PathBuf>,
    pub mode: InferenceMode,
    pub epochs: usize,
    pub seed: u64,
    pub sizes: SplitSizes,
    /// Adds an assertion that EM beats the baseline by at least this much.
    pub min_lift: Option<f64>,
    pub tolerance: f64,
}

impl Default for DeepEmArgs {
    fn default() -> Self {
        Self {
            scenario: None,
            mode: InferenceMode::Map,
            epochs: EmConfig::default().epochs,
            seed: 0,
            sizes: SplitSizes::default(),
            min_lift: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

pub fn run(args: &DeepEmArgs) -> Result<RunReport> {
    let scenario = load_scenario(args.scenario.as_ref(), args.seed)?;
    let split = SyntheticSplit::generate(&scenario, args.sizes)?;
    let config = EmConfig {
        epochs: args.epochs,
        mode: args.mode,
        ..EmConfig::default()
    };
    let detector = LogisticConfig::default();
    let outcome = run_experiment(&split, &scenario, detector, &config, args.seed)?;

    let mut report = RunReport::new("deepem", Some(args.seed));
    report
        .param("scenario", &scenario)
        .param("sizes", args.sizes)
        .param("em_config", &config)
        .param("detector", detector);
    let (base, em) = (&outcome.baseline, &outcome.em);
    report
        .result("baseline_froc", base.final_froc_val())
        .result("em_froc", em.final_froc_val())
        .result("lift", outcome.lift)
        .result("initial_froc", base.initial_froc_val)
        .result(
            "baseline_froc_trace",
            base.epochs.iter().map(|e| e.froc_val).collect::<Vec<_>>(),
        )
        .result("em_epochs", &em.epochs)
        .result("skipped_weak_labels", em.skipped_labels);

    // Both runs start from the same detector, so they must agree before any
    // weak data is seen.
    report.assert(Assertion::new(
        "shared_initialization",
        em.initial_froc_val,
        Relation::Approx,
        base.initial_froc_val,
        args.tolerance,
    ));
    report.assert(Assertion::new(
        "epochs_reported",
        em.epochs.len() as f64,
        Relation::Approx,
        args.epochs as f64,
        0.0,
    ));
    if args.epochs == 0 {
        report.assert(Assertion::new(
            "no_epochs_is_baseline",
            em.final_froc_val(),
            Relation::Approx,
            base.final_froc_val(),
            args.tolerance,
        ));
    }
    if let Some(min) = args.min_lift {
        report.assert(Assertion::new("lift", outcome.lift, Relation::Above, min, 0.0));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: InferenceMode, epochs: usize) -> DeepEmArgs {
        DeepEmArgs {
            mode,
            epochs,
            seed: 2,
            sizes: SplitSizes {
                full: 4,
                weak: 16,
                val: 4,
            },
            ..DeepEmArgs::default()
        }
    }

    #[test]
    fn zero_epochs_is_baseline_only() {
        let r = run(&small(InferenceMode::Map, 0)).unwrap();
        assert!(r.passed, "{}", r.to_json());
        assert_eq!(r.results["lift"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn both_modes_run_and_report() {
        for mode in [InferenceMode::Map, InferenceMode::Sampling] {
            let r = run(&small(mode, 2)).unwrap();
            assert!(r.passed, "{}", r.to_json());
            assert_eq!(r.results["em_epochs"].as_array().unwrap().len(), 2);
        }
    }
}
