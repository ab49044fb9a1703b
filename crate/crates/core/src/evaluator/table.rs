use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BlockRatings;
use crate::error::{Error, Result};
use crate::space::{encode_path, Architecture};

/// Prefix policy recorded in every table: blocks after the first are fed
/// through the best path of the preceding blocks.
pub const PREFIX_POLICY: &str = "greedy-best";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingMeta {
    pub checkpoint: String,
    pub view_seed: u64,
    pub prefix_policy: String,
    pub lambda: Vec<f64>,
    pub config_digest: String,
}

/// Per-architecture block ratings and their weighted totals.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingTable {
    pub architectures: Vec<String>,
    pub block_losses: Vec<Vec<f64>>,
    pub totals: Vec<f64>,
    pub meta: RatingMeta,
}

fn weighted_total(lambda: &[f64], losses: &[f64]) -> f64 {
    lambda.iter().zip(losses).map(|(l, v)| l * v).sum()
}

impl RatingTable {
    pub fn new(
        architectures: Vec<String>,
        block_losses: Vec<Vec<f64>>,
        meta: RatingMeta,
    ) -> Result<Self> {
        if architectures.len() != block_losses.len() {
            return Err(Error::shape("rating-table", "row count mismatch"));
        }
        if let Some(bad) = block_losses.iter().find(|r| r.len() != meta.lambda.len()) {
            return Err(Error::shape(
                "rating-table",
                format!(
                    "{} block losses for {} weights",
                    bad.len(),
                    meta.lambda.len()
                ),
            ));
        }
        let totals = block_losses
            .iter()
            .map(|r| weighted_total(&meta.lambda, r))
            .collect();
        Ok(RatingTable {
            architectures,
            block_losses,
            totals,
            meta,
        })
    }

    /// Looks up each architecture's block paths in `blocks`; a path outside
    /// the rated enumeration is rejected.
    pub fn from_block_ratings(
        blocks: &[BlockRatings],
        architectures: &[Architecture],
        meta: RatingMeta,
    ) -> Result<Self> {
        let mut names = Vec::with_capacity(architectures.len());
        let mut rows = Vec::with_capacity(architectures.len());
        for arch in architectures {
            if arch.blocks.len() != blocks.len() {
                return Err(Error::Architecture {
                    position: arch.encode(),
                    reason: format!(
                        "{} blocks, ratings cover {}",
                        arch.blocks.len(),
                        blocks.len()
                    ),
                });
            }
            let row = arch
                .blocks
                .iter()
                .zip(blocks)
                .map(|(path, b)| {
                    b.loss_of(path).ok_or_else(|| Error::UnknownBlockPath {
                        block: b.block + 1,
                        path: encode_path(path),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            names.push(arch.encode());
            rows.push(row);
        }
        Self::new(names, rows, meta)
    }

    pub fn len(&self) -> usize {
        self.architectures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.architectures.is_empty()
    }

    pub fn block_count(&self) -> usize {
        self.meta.lambda.len()
    }

    /// Row indices from best (lowest total) to worst; ties keep row order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.totals[a].total_cmp(&self.totals[b]).then(a.cmp(&b)));
        idx
    }

    pub fn best(&self) -> Option<usize> {
        self.ranking().first().copied()
    }

    /// Same losses under a different weight vector.
    pub fn reweighted(&self, lambda: Vec<f64>) -> Result<Self> {
        let meta = RatingMeta {
            lambda,
            ..self.meta.clone()
        };
        Self::new(self.architectures.clone(), self.block_losses.clone(), meta)
    }

    /// True when every stored total equals the weighted row sum.
    pub fn totals_consistent(&self) -> bool {
        self.block_losses
            .iter()
            .zip(&self.totals)
            .all(|(r, &t)| weighted_total(&self.meta.lambda, r) == t)
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let lambda: Vec<String> = m.lambda.iter().map(|l| format!("{l:?}")).collect();
        let mut s = format!(
            "# checkpoint={} view_seed={} prefix={} lambda={} digest={}\narchitecture",
            m.checkpoint,
            m.view_seed,
            m.prefix_policy,
            lambda.join(";"),
            m.config_digest
        );
        for k in 1..=self.block_count() {
            let _ = write!(s, ",block_{k}");
        }
        s.push_str(",total\n");
        for ((a, row), t) in self
            .architectures
            .iter()
            .zip(&self.block_losses)
            .zip(&self.totals)
        {
            s.push_str(a);
            for v in row {
                let _ = write!(s, ",{v:?}");
            }
            let _ = writeln!(s, ",{t:?}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            path: "ratings".into(),
            reason,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| bad("missing metadata line".into()))?;
        let mut meta = RatingMeta {
            checkpoint: String::new(),
            view_seed: 0,
            prefix_policy: String::new(),
            lambda: Vec::new(),
            config_digest: String::new(),
        };
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed metadata `{field}`")))?;
            match key {
                "checkpoint" => meta.checkpoint = value.to_string(),
                "view_seed" => {
                    meta.view_seed = value
                        .parse()
                        .map_err(|_| bad(format!("view_seed `{value}`")))?
                }
                "prefix" => meta.prefix_policy = value.to_string(),
                "lambda" => {
                    meta.lambda = value
                        .split(';')
                        .map(|v| v.parse::<f64>().map_err(|_| bad(format!("lambda `{v}`"))))
                        .collect::<Result<_>>()?
                }
                "digest" => meta.config_digest = value.to_string(),
                other => return Err(bad(format!("unknown metadata key `{other}`"))),
            }
        }
        let columns = lines
            .next()
            .ok_or_else(|| bad("missing column header".into()))?;
        let width = columns.split(',').count();
        if width != meta.lambda.len() + 2 {
            return Err(bad(format!(
                "{width} columns for {} blocks",
                meta.lambda.len()
            )));
        }
        let mut names = Vec::new();
        let mut rows = Vec::new();
        let mut totals = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != width {
                return Err(bad(format!("row {} has {} cells", i + 1, cells.len())));
            }
            let nums = cells[1..]
                .iter()
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| bad(format!("row {}: `{c}` is not a number", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            names.push(cells[0].to_string());
            totals.push(nums[nums.len() - 1]);
            rows.push(nums[..nums.len() - 1].to_vec());
        }
        Ok(RatingTable {
            architectures: names,
            block_losses: rows,
            totals,
            meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(lambda: Vec<f64>) -> RatingMeta {
        RatingMeta {
            checkpoint: "epoch_003".into(),
            view_seed: 7,
            prefix_policy: PREFIX_POLICY.into(),
            lambda,
            config_digest: "0123456789abcdef".into(),
        }
    }

    fn sample() -> RatingTable {
        RatingTable::new(
            vec!["m0.m1-m2".into(), "m1.m1-m0".into(), "m3.m0-m3".into()],
            vec![
                vec![0.1, 0.7],
                vec![0.30000000000000004, 0.2],
                vec![1.0 / 3.0, 0.25],
            ],
            meta(vec![1.0, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn csv_has_header_plus_one_line_per_row() {
        let t = sample();
        assert_eq!(t.to_csv().lines().count(), 2 + 3);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let t = sample();
        let back = RatingTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back, t);
        assert!(back.totals_consistent());
    }

    #[test]
    fn ranking_orders_by_total() {
        let t = sample();
        assert_eq!(t.ranking(), vec![1, 2, 0]);
        assert_eq!(t.best(), Some(1));
    }

    #[test]
    fn lower_block_loss_lowers_total() {
        let t = sample();
        let mut rows = t.block_losses.clone();
        rows[0][1] = 0.5;
        let t2 = RatingTable::new(t.architectures.clone(), rows, t.meta.clone()).unwrap();
        assert!(t2.totals[0] < t.totals[0]);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut text = sample().to_csv();
        text.push_str("m0.m0-m0,0.1\n");
        assert!(RatingTable::from_csv(&text).is_err());
    }
}
