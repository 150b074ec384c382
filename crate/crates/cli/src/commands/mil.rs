//! Bag-level MIL losses on a single bag of patch scores.

use std::path::PathBuf;

use anyhow::{bail, Result};
use lesionkit::mil::{k_grid_losses, BagLabel, MilScheme, PatchScores, K_GRID};
use lesionkit::tensor::{grad_check, DEFAULT_FD_STEP};
use lesionkit::Tensor;

use crate::io::read_tensor;
use crate::report::{Assertion, Relation, RunReport};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeName {
    MaxPool,
    LabelAssign,
    Sparse,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreSource {
    File(PathBuf),
    Inline(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MilArgs {
    pub scores: ScoreSource,
    pub label: u8,
    pub scheme: SchemeName,
    pub k: Option<usize>,
    pub mu: Option<f64>,
    pub tolerance: f64,
}

fn resolve_scheme(args: &MilArgs) -> Result<MilScheme> {
    Ok(match (args.scheme, args.k, args.mu) {
        (SchemeName::MaxPool, None, None) => MilScheme::MaxPool,
        (SchemeName::LabelAssign, Some(k), None) => MilScheme::LabelAssign { k },
        (SchemeName::Sparse, None, Some(mu)) => MilScheme::Sparse { mu },
        (SchemeName::LabelAssign, None, _) => bail!("label-assign needs --k"),
        (SchemeName::Sparse, _, None) => bail!("sparse needs --mu"),
        (s, k, mu) => bail!("{s:?} does not take k = {k:?} / mu = {mu:?}"),
    })
}

pub fn run(args: &MilArgs) -> Result<RunReport> {
    let scheme = resolve_scheme(args)?;
    let tensor = match &args.scores {
        ScoreSource::File(p) => read_tensor(p)?,
        ScoreSource::Inline(v) => Tensor::vector(v.clone())?,
    };
    let scores = PatchScores::new(tensor.reshape(&[tensor.len()])?)?;
    let label = BagLabel::from_binary(args.label)?;
    let out = scheme.loss(&scores, label)?;

    let mut report = RunReport::new("mil", None);
    report
        .param(
            "scheme",
            match args.scheme {
                SchemeName::MaxPool => "max-pool",
                SchemeName::LabelAssign => "label-assign",
                SchemeName::Sparse => "sparse",
            },
        )
        .param("k", args.k)
        .param("mu", args.mu)
        .param("label", args.label)
        .param("patches", scores.len())
        .result("loss", out.value)
        .result("gradient", out.grad.data());

    // The max and the top-k cut are kinks when scores tie; finite differences
    // are meaningless there.
    let mut sorted = scores.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[1] - w[0] <= 2.0 * DEFAULT_FD_STEP) {
        report.result("gradient_check", "skipped: tied scores");
    } else {
        let check = grad_check(
            |x| {
                PatchScores::new(x.clone())
                    .and_then(|s| scheme.loss(&s, label))
                    .map_or(f64::NAN, |o| o.value)
            },
            &out.grad,
            scores.tensor(),
            DEFAULT_FD_STEP,
        )?;
        report.assert(Assertion::new(
            "gradient_rel_err",
            check.max_rel_err,
            Relation::Below,
            0.0,
            args.tolerance,
        ));
    }

    let grid = k_grid_losses(&[(scores, label)])?;
    report.result("k_grid", K_GRID).result(
        "k_grid_losses",
        grid.iter()
            .map(|&(k, v)| (k.to_string(), v))
            .collect::<std::collections::BTreeMap<_, _>>(),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(scheme: SchemeName, k: Option<usize>, mu: Option<f64>) -> MilArgs {
        MilArgs {
            scores: ScoreSource::Inline(vec![0.3, 0.8, 0.1]),
            label: 1,
            scheme,
            k,
            mu,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    #[test]
    fn three_schemes() {
        let max = run(&args(SchemeName::MaxPool, None, None)).unwrap();
        assert!((max.results["loss"].as_f64().unwrap() + 0.8f64.ln()).abs() < 1e-12);
        let la = run(&args(SchemeName::LabelAssign, Some(1), None)).unwrap();
        let expected = -(0.8f64.ln() + 0.7f64.ln() + 0.9f64.ln()) / 3.0;
        assert!((la.results["loss"].as_f64().unwrap() - expected).abs() < 1e-12);
        let sparse = run(&args(SchemeName::Sparse, None, Some(0.0))).unwrap();
        assert_eq!(sparse.results["loss"], max.results["loss"]);
        for r in [max, la, sparse] {
            assert!(r.passed);
        }
    }

    #[test]
    fn mismatched_hyper_parameters() {
        assert!(run(&args(SchemeName::MaxPool, Some(2), None)).is_err());
        assert!(run(&args(SchemeName::LabelAssign, None, None)).is_err());
        assert!(run(&args(SchemeName::Sparse, Some(1), Some(0.1))).is_err());
        assert!(run(&args(SchemeName::Sparse, None, None)).is_err());
    }

    #[test]
    fn k_grid_is_limited_by_bag_size() {
        let r = run(&args(SchemeName::MaxPool, None, None)).unwrap();
        let grid = r.results["k_grid_losses"].as_object().unwrap();
        assert_eq!(grid.keys().collect::<Vec<_>>(), ["1", "2"]);
    }
}
