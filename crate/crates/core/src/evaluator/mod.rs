//! Label-free architecture rating against the population center on fixed
//! view pairs, plus traversal and evolutionary search.

mod search;
mod table;

pub use search::{
    evolutionary_search, select_best, traversal_search, BlockRatings, EvolutionConfig,
    EvolutionOutcome, GenerationRecord, SearchOutcome,
};
pub use table::{RatingMeta, RatingTable, PREFIX_POLICY};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentPolicy, DatasetSplit, Normalizer, Provenance};
use crate::error::{Error, Result};
use crate::space::{Architecture, Gene};
use crate::substrate::{Graph, Tensor};
use crate::trainer::{ensemble_target, mlp_forward, pool_features, SiameseState};

/// Evaluator knobs that do not depend on a particular checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub view_seed: u64,
    /// Per-block weights of the composite rating; empty means all ones.
    pub lambda: Vec<f64>,
    pub val_subset: usize,
    /// Samples per frozen forward pass.
    pub chunk: usize,
    pub augment: AugmentPolicy,
    pub evolution: EvolutionConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            view_seed: 0,
            lambda: Vec::new(),
            val_subset: 512,
            chunk: 128,
            augment: AugmentPolicy::full(),
            evolution: EvolutionConfig::default(),
        }
    }
}

impl EvalSettings {
    /// The λ vector expanded to `blocks` entries.
    pub fn lambda_for(&self, blocks: usize) -> Result<Vec<f64>> {
        if self.lambda.is_empty() {
            return Ok(vec![1.0; blocks]);
        }
        if self.lambda.len() != blocks {
            return Err(Error::Config {
                path: "evaluator.lambda".into(),
                reason: format!("{} weights for {blocks} blocks", self.lambda.len()),
            });
        }
        if self.lambda.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Config {
                path: "evaluator.lambda".into(),
                reason: "weights must be positive and finite".into(),
            });
        }
        Ok(self.lambda.clone())
    }
}

/// One frozen augmented pair per validation sample, unnormalized.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedViewSet {
    pub x1: Tensor,
    pub x2: Tensor,
    pub seed: u64,
    pub provenance: Provenance,
}

impl FixedViewSet {
    pub fn len(&self) -> usize {
        self.x1.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws one view pair for each of the first `limit` samples of `split`.
pub fn build_fixed_views(
    split: &DatasetSplit,
    policy: &AugmentPolicy,
    seed: u64,
    limit: usize,
) -> Result<FixedViewSet> {
    let n = split.len().min(limit);
    if n == 0 {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let side = split.side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per = 3 * side * side;
    let mut a = Vec::with_capacity(n * per);
    let mut b = Vec::with_capacity(n * per);
    for i in 0..n {
        let img = split.image(i);
        a.extend(augment(img, side, policy, &mut rng).0);
        b.extend(augment(img, side, policy, &mut rng).0);
    }
    let shape = vec![n, 3, side, side];
    Ok(FixedViewSet {
        x1: Tensor::new(shape.clone(), a)?,
        x2: Tensor::new(shape, b)?,
        seed,
        provenance: split.provenance.clone(),
    })
}

/// Features of both views entering a block.
#[derive(Clone, Debug, PartialEq)]
pub struct Prefix {
    pub x1: Tensor,
    pub x2: Tensor,
    pub scale: usize,
}

/// Per-sample output of one path: normalized projections of both views and,
/// when requested, the block output features.
#[derive(Clone, Debug)]
pub struct PathOutput {
    pub v1: Tensor,
    pub v2: Tensor,
    pub features: Option<(Tensor, Tensor)>,
    pub exit_scale: usize,
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = Vec<usize>> {
    let size = size.max(1);
    (0..n.div_ceil(size)).map(move |c| (c * size..((c + 1) * size).min(n)).collect())
}

/// Standardizes both views and runs the shared stem on them.
pub fn stem_prefix(
    state: &SiameseState,
    views: &FixedViewSet,
    normalizer: &Normalizer,
    chunk: usize,
) -> Result<Prefix> {
    let run = |x: &Tensor| -> Result<Tensor> {
        let mut parts = Vec::new();
        for idx in chunks(x.shape()[0], chunk) {
            let mut batch = x.select_batch(&idx);
            normalizer.apply(&mut batch);
            let mut g = Graph::frozen();
            let v = g.input(batch);
            let y = state.online.stem_forward(&mut g, v)?;
            parts.push(g.value(y).clone());
        }
        Tensor::cat_batch(&parts)
    };
    Ok(Prefix {
        x1: run(&views.x1)?,
        x2: run(&views.x2)?,
        scale: state
            .space()
            .scale_rules
            .as_ref()
            .map_or(0, |r| r.initial_scale),
    })
}

fn run_view(
    state: &SiameseState,
    k: usize,
    path: &[Gene],
    x: &Tensor,
    entry: usize,
    chunk: usize,
    keep: bool,
) -> Result<(Tensor, Option<Tensor>, usize)> {
    let dim = state.space().block_feature_dim(k);
    let mut vecs = Vec::new();
    let mut feats = Vec::new();
    let mut exit = entry;
    for idx in chunks(x.shape()[0], chunk) {
        let mut g = Graph::frozen();
        let v = g.input(x.select_batch(&idx));
        let (y, s) = state.online.forward_block(&mut g, k, path, v, entry)?;
        exit = s;
        let pooled = pool_features(&mut g, y, dim)?;
        let z = mlp_forward(&mut g, &state.online_projection[k], pooled)?;
        let z = g.l2_normalize(z)?;
        vecs.push(g.value(z).clone());
        if keep {
            feats.push(g.value(y).clone());
        }
    }
    let feats = if keep {
        Some(Tensor::cat_batch(&feats)?)
    } else {
        None
    };
    Ok((Tensor::cat_batch(&vecs)?, feats, exit))
}

/// Runs block `k` along `path` on both views of `prefix` with frozen online weights.
pub fn path_output(
    state: &SiameseState,
    k: usize,
    path: &[Gene],
    prefix: &Prefix,
    chunk: usize,
    keep_features: bool,
) -> Result<PathOutput> {
    let (v1, f1, exit) = run_view(
        state,
        k,
        path,
        &prefix.x1,
        prefix.scale,
        chunk,
        keep_features,
    )?;
    let (v2, f2, _) = run_view(
        state,
        k,
        path,
        &prefix.x2,
        prefix.scale,
        chunk,
        keep_features,
    )?;
    Ok(PathOutput {
        v1,
        v2,
        features: f1.zip(f2),
        exit_scale: exit,
    })
}

/// Projected vectors of every path, computed in parallel and returned in input order.
pub fn path_outputs(
    state: &SiameseState,
    k: usize,
    paths: &[Vec<Gene>],
    prefix: &Prefix,
    chunk: usize,
) -> Result<Vec<PathOutput>> {
    paths
        .par_iter()
        .map(|p| path_output(state, k, p, prefix, chunk, false))
        .collect()
}

/// Normalized mean of the members' second-view vectors, per sample.
pub fn center_of(members: &[&Tensor]) -> Result<Tensor> {
    let owned: Vec<Tensor> = members.iter().map(|t| (*t).clone()).collect();
    ensemble_target(&owned)
}

/// Center of `population` for block `k` on the second view of `prefix`.
pub fn population_center(
    state: &SiameseState,
    k: usize,
    population: &[Vec<Gene>],
    prefix: &Prefix,
    chunk: usize,
) -> Result<Tensor> {
    if population.is_empty() {
        return Err(Error::shape("population-center", "empty population"));
    }
    let outs = path_outputs(state, k, population, prefix, chunk)?;
    center_of(&outs.iter().map(|o| &o.v2).collect::<Vec<_>>())
}

/// Mean over samples of the squared distance between `v1` and `center`.
pub fn distance_to_center(v1: &Tensor, center: &Tensor) -> Result<f64> {
    if v1.shape() != center.shape() {
        return Err(Error::shape(
            "rating",
            format!("vectors {:?} vs center {:?}", v1.shape(), center.shape()),
        ));
    }
    let n = v1.shape()[0] as f64;
    let total: f64 = v1
        .data()
        .iter()
        .zip(center.data())
        .map(|(a, c)| (a - c) * (a - c))
        .sum();
    Ok(total / n)
}

/// Ratings of `candidates` for block `k` against a precomputed `center`.
pub fn rate_block_candidates(
    state: &SiameseState,
    k: usize,
    candidates: &[Vec<Gene>],
    center: &Tensor,
    prefix: &Prefix,
    chunk: usize,
) -> Result<Vec<f64>> {
    path_outputs(state, k, candidates, prefix, chunk)?
        .iter()
        .map(|o| distance_to_center(&o.v1, center))
        .collect()
}

/// Rates `architectures` by their per-block ratings against the greedy-best prefix.
pub fn rate_architecture_set(
    state: &SiameseState,
    architectures: &[Architecture],
    views: &FixedViewSet,
    normalizer: &Normalizer,
    settings: &EvalSettings,
    checkpoint: &str,
) -> Result<RatingTable> {
    let outcome = traversal_search(state, views, normalizer, settings)?;
    let lambda = settings.lambda_for(state.space().block_count())?;
    let meta = RatingMeta {
        checkpoint: checkpoint.to_string(),
        view_seed: views.seed,
        prefix_policy: PREFIX_POLICY.to_string(),
        lambda,
        config_digest: String::new(),
    };
    RatingTable::from_block_ratings(&outcome.blocks, architectures, meta)
}
