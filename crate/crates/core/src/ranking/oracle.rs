use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{dense, init_dense};
use crate::data::{DatasetSplit, Normalizer};
use crate::error::{Error, Result};
use crate::space::{validate_architecture, Architecture, SearchSpaceDef, Supernet};
use crate::substrate::{optimizer_step, Graph, OptimizerConfig, ParameterStore, Tensor};
use crate::trainer::{lr_at, pool_features};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Seeds averaged per architecture.
    pub seeds: usize,
    /// Size of the seeded architecture sample that gets oracle-trained.
    pub architectures: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            epochs: 10,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seeds: 3,
            architectures: 24,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| {
            Err(Error::Config {
                path: format!("oracle.{path}"),
                reason: reason.into(),
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.seeds == 0 {
            return bad("seeds", "must be at least 1");
        }
        if self.architectures < 3 {
            return bad("architectures", "correlation needs at least 3");
        }
        OptimizerConfig::sgd(self.lr, self.momentum, self.weight_decay)
            .validate()
            .or_else(|e| bad("lr", &e.to_string()))
    }
}

/// Test accuracy of one standalone training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub architecture: String,
    pub seed: u64,
    pub accuracy: f64,
    pub epochs: usize,
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
}

/// Stem, the architecture's blocks, global pooling and a linear classifier.
struct Standalone {
    net: Supernet,
    classifier: ParameterStore,
    arch: Architecture,
}

impl Standalone {
    fn build(
        space: &SearchSpaceDef,
        arch: &Architecture,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let net = Supernet::build(space, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173);
        let mut classifier = ParameterStore::new();
        init_dense(
            &mut classifier,
            "fc",
            space.block_feature_dim(space.block_count() - 1),
            classes,
            &mut rng,
        );
        Ok(Standalone {
            net,
            classifier,
            arch: arch.clone(),
        })
    }

    fn logits(&self, g: &mut Graph, x: Tensor) -> Result<crate::substrate::Var> {
        let space = &self.net.space;
        let v = g.input(x);
        let feats = self.net.forward(g, &self.arch, v)?;
        let last = *feats.last().expect("at least one block");
        let pooled = pool_features(g, last, space.block_feature_dim(space.block_count() - 1))?;
        dense(g, &self.classifier, "fc", pooled)
    }

    fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        let mut v = self.net.stores_mut();
        v.push(&mut self.classifier);
        v
    }
}

fn normalized(
    split: &DatasetSplit,
    idx: &[usize],
    normalizer: &Normalizer,
) -> (Tensor, Vec<usize>) {
    let (mut x, y) = split.batch(idx);
    normalizer.apply(&mut x);
    (x, y)
}

/// Trains the standalone network for `arch` with labels and reports its
/// top-1 accuracy on `test`. Deterministic given the arguments.
pub fn oracle_train(
    space: &SearchSpaceDef,
    arch: &Architecture,
    train: &DatasetSplit,
    test: &DatasetSplit,
    normalizer: &Normalizer,
    config: &OracleConfig,
    seed: u64,
) -> Result<OracleRecord> {
    validate_architecture(space, arch)?;
    config.validate()?;
    if train.provenance.source == test.provenance.source
        && train.indices.iter().any(|i| test.indices.contains(i))
    {
        return Err(Error::Dataset(
            "oracle train and test splits overlap".into(),
        ));
    }
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Dataset("oracle splits are too small".into()));
    }
    let classes = train.classes.max(test.classes);
    let mut model = Standalone::build(space, arch, classes, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = config.batch_size.min(train.len());
    let spe = (train.len() / batch).max(1);
    let total = spe * config.epochs;
    let opt = OptimizerConfig::sgd(config.lr, config.momentum, config.weight_decay);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks_exact(batch).take(spe) {
            let (x, y) = normalized(train, idx, normalizer);
            let mut g = Graph::recording();
            let logits = model.logits(&mut g, x)?;
            let loss = g.cross_entropy(logits, y)?;
            sum += g.value(loss).item();
            let grads = g.backward(loss)?;
            let updates = g.take_bn_updates();
            let step_cfg = opt.with_lr(lr_at(step, total, 0, config.lr));
            for s in model.stores_mut() {
                grads.apply_to(s)?;
                if s.has_grads() {
                    optimizer_step(s, &step_cfg)?;
                }
                s.commit_bn(&updates)?;
            }
            step += 1;
        }
        final_loss = sum / spe as f64;
    }
    let accuracy = evaluate(&model, test, normalizer, config.batch_size)?;
    Ok(OracleRecord {
        architecture: arch.encode(),
        seed,
        accuracy,
        epochs: config.epochs,
        final_loss,
    })
}

fn evaluate(
    model: &Standalone,
    test: &DatasetSplit,
    normalizer: &Normalizer,
    chunk: usize,
) -> Result<f64> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0usize;
    for part in idx.chunks(chunk.max(1)) {
        let (x, y) = normalized(test, part, normalizer);
        let mut g = Graph::frozen();
        let logits = model.logits(&mut g, x)?;
        let t = g.value(logits);
        let k = t.shape()[1];
        for (row, &label) in t.data().chunks(k).zip(&y) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
            correct += (pred == label) as usize;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Oracle records for every (architecture, seed) pair, trained in parallel and
/// returned in architecture-major order.
pub fn oracle_batch(
    space: &SearchSpaceDef,
    architectures: &[Architecture],
    seeds: &[u64],
    train: &DatasetSplit,
    test: &DatasetSplit,
    normalizer: &Normalizer,
    config: &OracleConfig,
) -> Result<Vec<OracleRecord>> {
    let jobs: Vec<(&Architecture, u64)> = architectures
        .iter()
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    jobs.par_iter()
        .map(|(a, s)| oracle_train(space, a, train, test, normalizer, config, *s))
        .collect()
}

/// Mean accuracy per architecture, in order of first appearance.
pub fn mean_accuracy(records: &[OracleRecord]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in records {
        match out.iter_mut().find(|(a, _, _)| *a == r.architecture) {
            Some(e) => {
                e.1 += r.accuracy;
                e.2 += 1;
            }
            None => out.push((r.architecture.clone(), r.accuracy, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

pub fn records_to_csv(records: &[OracleRecord], digest: &str) -> String {
    let mut s = format!("# digest={digest}\narchitecture,seed,accuracy,epochs,final_loss\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{:?},{},{:?}\n",
            r.architecture, r.seed, r.accuracy, r.epochs, r.final_loss
        ));
    }
    s
}

pub fn records_from_csv(text: &str) -> Result<Vec<OracleRecord>> {
    let bad = |reason: String| Error::Config {
        path: "oracle records".into(),
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .enumerate()
        .skip(1)
    {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 5 {
            return Err(bad(format!("line {} has {} cells", i + 1, c.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("line {}: `{s}`", i + 1)))
        };
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| bad(format!("line {}: `{s}`", i + 1)))
        };
        out.push(OracleRecord {
            architecture: c[0].to_string(),
            seed: int(c[1])?,
            accuracy: num(c[2])?,
            epochs: int(c[3])? as usize,
            final_loss: num(c[4])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(a: &str, seed: u64, acc: f64) -> OracleRecord {
        OracleRecord {
            architecture: a.into(),
            seed,
            accuracy: acc,
            epochs: 1,
            final_loss: 0.5,
        }
    }

    #[test]
    fn mean_accuracy_groups_by_architecture() {
        let r = vec![rec("a", 1, 0.5), rec("b", 1, 0.25), rec("a", 2, 0.75)];
        assert_eq!(
            mean_accuracy(&r),
            vec![("a".to_string(), 0.625), ("b".to_string(), 0.25)]
        );
    }

    #[test]
    fn csv_round_trip() {
        let r = vec![rec("m0.m1", 1, 0.1 + 0.2), rec("m2.m3", 7, 1.0 / 3.0)];
        assert_eq!(records_from_csv(&records_to_csv(&r, "abc")).unwrap(), r);
    }

    #[test]
    fn config_rejects_tiny_sets() {
        let c = OracleConfig {
            architectures: 2,
            ..OracleConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
