//! Datasets, deterministic splits, augmentation and normalization.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{
    augment, crop_padded, hflip, to_grayscale, AugmentPolicy, AugmentRecord, CROP_PAD,
};
pub use cifar::{load_cifar10_binary, parse_cifar10, to_record, RECORD_BYTES};
pub use synthetic::{generate_synthetic, SyntheticSpec, SYNTHETIC_SIDE};

use std::fmt;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// An unsplit labelled image source.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    /// `[n, 3, H, W]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: String,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitId {
    NasTrain,
    NasVal,
    OracleTrain,
    OracleTest,
}

impl SplitId {
    pub const ALL: [SplitId; 4] = [
        SplitId::NasTrain,
        SplitId::NasVal,
        SplitId::OracleTrain,
        SplitId::OracleTest,
    ];
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitId::NasTrain => "nas-train",
            SplitId::NasVal => "nas-val",
            SplitId::OracleTrain => "oracle-train",
            SplitId::OracleTest => "oracle-test",
        })
    }
}

/// Where a split's samples came from: a range of a seeded permutation of the source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    pub range: Range<usize>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub id: SplitId,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub provenance: Provenance,
    /// Source indices, for disjointness checks.
    pub indices: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Image `i` as a flat `[3, H, W]` slice.
    pub fn image(&self, i: usize) -> &[f64] {
        let per = self.images.numel() / self.len();
        &self.images.data()[i * per..(i + 1) * per]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub nas_train: usize,
    pub nas_val: usize,
    pub oracle_train: usize,
    pub oracle_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            nas_train: 1024,
            nas_val: 512,
            oracle_train: 1024,
            oracle_test: 512,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.nas_train + self.nas_val + self.oracle_train + self.oracle_test
    }

    fn get(&self, id: SplitId) -> usize {
        match id {
            SplitId::NasTrain => self.nas_train,
            SplitId::NasVal => self.nas_val,
            SplitId::OracleTrain => self.oracle_train,
            SplitId::OracleTest => self.oracle_test,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplitSet {
    pub nas_train: DatasetSplit,
    pub nas_val: DatasetSplit,
    pub oracle_train: DatasetSplit,
    pub oracle_test: DatasetSplit,
}

impl SplitSet {
    pub fn get(&self, id: SplitId) -> &DatasetSplit {
        match id {
            SplitId::NasTrain => &self.nas_train,
            SplitId::NasVal => &self.nas_val,
            SplitId::OracleTrain => &self.oracle_train,
            SplitId::OracleTest => &self.oracle_test,
        }
    }
}

/// Cuts consecutive ranges of a seeded permutation into the four splits.
pub fn make_splits(source: &LabeledImages, sizes: &SplitSizes, seed: u64) -> Result<SplitSet> {
    if sizes.total() > source.len() {
        return Err(Error::Dataset(format!(
            "splits need {} samples but the source has {}",
            sizes.total(),
            source.len()
        )));
    }
    if SplitId::ALL.iter().any(|&id| sizes.get(id) == 0) {
        return Err(Error::Dataset("every split must be nonempty".into()));
    }
    let mut perm: Vec<usize> = (0..source.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut start = 0;
    let mut cut = |id: SplitId| {
        let range = start..start + sizes.get(id);
        start = range.end;
        let indices = perm[range.clone()].to_vec();
        DatasetSplit {
            id,
            images: source.images.select_batch(&indices),
            labels: indices.iter().map(|&i| source.labels[i]).collect(),
            classes: source.classes,
            provenance: Provenance {
                source: source.source.clone(),
                seed,
                range,
            },
            indices,
        }
    };
    Ok(SplitSet {
        nas_train: cut(SplitId::NasTrain),
        nas_val: cut(SplitId::NasVal),
        oracle_train: cut(SplitId::OracleTrain),
        oracle_test: cut(SplitId::OracleTest),
    })
}

/// Per-channel standardization constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn fit(split: &DatasetSplit) -> Self {
        let shape = split.images.shape();
        let plane = shape[2] * shape[3];
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let vals = || {
                (0..shape[0]).flat_map(move |n| {
                    let at = (n * 3 + c) * plane;
                    split.images.data()[at..at + plane].iter().copied()
                })
            };
            let count = (shape[0] * plane) as f64;
            let m = vals().sum::<f64>() / count;
            let v = vals().map(|x| (x - m) * (x - m)).sum::<f64>() / count;
            mean[c] = m;
            std[c] = v.sqrt().max(1e-8);
        }
        Normalizer { mean, std }
    }

    /// Standardizes a `[n, 3, H, W]` batch in place.
    pub fn apply(&self, batch: &mut Tensor) {
        let shape = batch.shape().to_vec();
        let plane = shape[2] * shape[3];
        for (i, chunk) in batch.data_mut().chunks_mut(plane).enumerate() {
            let c = i % 3;
            for v in chunk {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

/// Augments every image of a `[n, 3, side, side]` batch with a shared rng.
pub fn augment_batch<R: rand::Rng + ?Sized>(
    batch: &Tensor,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Tensor {
    if policy.is_identity() {
        return batch.clone();
    }
    let shape = batch.shape();
    let side = shape[3];
    let per = batch.numel() / shape[0];
    let mut data = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks(per) {
        data.extend(augment(img, side, policy, rng).0);
    }
    Tensor::new(shape.to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        let src = generate_synthetic(1, 200, &SyntheticSpec::default()).unwrap();
        let sizes = SplitSizes {
            nas_train: 80,
            nas_val: 40,
            oracle_train: 50,
            oracle_test: 30,
        };
        let set = make_splits(&src, &sizes, 3).unwrap();
        let mut all: Vec<usize> = SplitId::ALL
            .iter()
            .flat_map(|&id| set.get(id).indices.clone())
            .collect();
        assert_eq!(all.len(), 200);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 200);
        assert_eq!(set.nas_val.len(), 40);
        assert_eq!(set.oracle_test.provenance.range, 170..200);
    }

    #[test]
    fn oversized_splits_rejected() {
        let src = generate_synthetic(1, 16, &SyntheticSpec::default()).unwrap();
        assert!(make_splits(&src, &SplitSizes::default(), 0).is_err());
    }

    #[test]
    fn normalizer_standardizes_its_split() {
        let src = generate_synthetic(2, 64, &SyntheticSpec::default()).unwrap();
        let sizes = SplitSizes {
            nas_train: 32,
            nas_val: 8,
            oracle_train: 16,
            oracle_test: 8,
        };
        let set = make_splits(&src, &sizes, 1).unwrap();
        let norm = Normalizer::fit(&set.nas_train);
        let mut x = set.nas_train.images.clone();
        norm.apply(&mut x);
        let refit = Normalizer::fit(&DatasetSplit {
            images: x,
            ..set.nas_train.clone()
        });
        for c in 0..3 {
            assert!(refit.mean[c].abs() < 1e-9);
            assert!((refit.std[c] - 1.0).abs() < 1e-9);
        }
    }
}
