//! Ground-truth rankings from standalone training, and rank correlations
//! between those and the label-free ratings.

mod metrics;
mod oracle;

pub use metrics::{average_ranks, kendall_tau_b, pair_counts, pearson_r, spearman_rho, PairCounts};
pub use oracle::{
    mean_accuracy, oracle_batch, oracle_train, records_from_csv, records_to_csv, OracleConfig,
    OracleRecord,
};

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::evaluator::{rate_architecture_set, EvalSettings, FixedViewSet, RatingTable};
use crate::space::Architecture;
use crate::trainer::SiameseState;

/// Marker written in place of a coefficient that is undefined on constant input.
pub const UNDEFINED: &str = "undefined";

mod coefficient {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::UNDEFINED;

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Marker(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Marker(UNDEFINED.into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Marker(m) if m == UNDEFINED => Ok(None),
            Repr::Marker(m) => Err(serde::de::Error::custom(format!("unexpected marker `{m}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    #[serde(with = "coefficient")]
    pub kendall_tau_b: Option<f64>,
    #[serde(with = "coefficient")]
    pub spearman_rho: Option<f64>,
    #[serde(with = "coefficient")]
    pub pearson_r: Option<f64>,
}

impl CorrelationReport {
    pub fn from_pairs(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() < 3 {
            return Err(Error::Correlation(format!(
                "need at least 3 joined architectures, got {}",
                x.len()
            )));
        }
        Ok(CorrelationReport {
            n: x.len(),
            kendall_tau_b: kendall_tau_b(x, y)?,
            spearman_rho: spearman_rho(x, y)?,
            pearson_r: pearson_r(x, y)?,
        })
    }
}

/// Correlates negated rating totals (lower loss ranks higher) with mean
/// oracle accuracy over architectures present in both inputs.
pub fn correlate(ratings: &RatingTable, oracle: &[OracleRecord]) -> Result<CorrelationReport> {
    let acc = mean_accuracy(oracle);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (arch, &total) in ratings.architectures.iter().zip(&ratings.totals) {
        if let Some((_, a)) = acc.iter().find(|(name, _)| name == arch) {
            x.push(-total);
            y.push(*a);
        }
    }
    CorrelationReport::from_pairs(&x, &y)
}

/// One point of a convergence series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub checkpoint: String,
    pub report: CorrelationReport,
}

/// Rates the oracle architectures under every checkpoint with the same
/// fixed views and correlates each table with the oracle records.
pub fn convergence_track<F>(
    checkpoints: &[String],
    mut load: F,
    architectures: &[Architecture],
    views: &FixedViewSet,
    normalizer: &Normalizer,
    settings: &EvalSettings,
    oracle: &[OracleRecord],
) -> Result<Vec<TrackPoint>>
where
    F: FnMut(&str) -> Result<SiameseState>,
{
    if checkpoints.len() < 2 {
        return Err(Error::Correlation(format!(
            "tracking needs at least 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    checkpoints
        .iter()
        .map(|c| {
            let state = load(c)?;
            let table =
                rate_architecture_set(&state, architectures, views, normalizer, settings, c)?;
            Ok(TrackPoint {
                checkpoint: c.clone(),
                report: correlate(&table, oracle)?,
            })
        })
        .collect()
}
