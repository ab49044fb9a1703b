use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    center_of, distance_to_center, path_output, path_outputs, stem_prefix, EvalSettings,
    FixedViewSet, Prefix,
};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::space::{
    encode_path, enumerate_block_paths_at, path_exit_scale, Architecture, Gene, SearchSpaceDef,
};
use crate::substrate::Tensor;
use crate::trainer::SiameseState;

/// Index of the smallest loss; ties go to the lowest index.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        match best {
            Some(b) if losses[b] <= l => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Every rated path of one block, in enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockRatings {
    /// 0-based.
    pub block: usize,
    pub entry_scale: usize,
    pub paths: Vec<Vec<Gene>>,
    pub losses: Vec<f64>,
    pub best: usize,
}

impl BlockRatings {
    pub fn best_path(&self) -> &[Gene] {
        &self.paths[self.best]
    }

    pub fn loss_of(&self, path: &[Gene]) -> Option<f64> {
        self.paths
            .iter()
            .position(|p| p == path)
            .map(|i| self.losses[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: Architecture,
    pub blocks: Vec<BlockRatings>,
}

/// Propagates both views of `prefix` through the chosen path of block `k`.
fn advance(
    state: &SiameseState,
    k: usize,
    path: &[Gene],
    prefix: &Prefix,
    chunk: usize,
) -> Result<Prefix> {
    let out = path_output(state, k, path, prefix, chunk, true)?;
    let (x1, x2) = out.features.expect("features requested");
    Ok(Prefix {
        x1,
        x2,
        scale: out.exit_scale,
    })
}

/// Rates every path of every block against that block's full-enumeration
/// center, block by block, feeding the next block through the best path.
pub fn traversal_search(
    state: &SiameseState,
    views: &FixedViewSet,
    normalizer: &Normalizer,
    settings: &EvalSettings,
) -> Result<SearchOutcome> {
    let space = state.space();
    let mut prefix = stem_prefix(state, views, normalizer, settings.chunk)?;
    let mut blocks = Vec::with_capacity(space.block_count());
    for k in 0..space.block_count() {
        let mut paths = enumerate_block_paths_at(space, k, prefix.scale)?;
        paths.sort();
        let outs = path_outputs(state, k, &paths, &prefix, settings.chunk)?;
        let center = center_of(&outs.iter().map(|o| &o.v2).collect::<Vec<_>>())?;
        let losses = outs
            .iter()
            .map(|o| distance_to_center(&o.v1, &center))
            .collect::<Result<Vec<_>>>()?;
        let best = select_best(&losses).expect("nonempty enumeration");
        let next = if k + 1 < space.block_count() {
            Some(advance(state, k, &paths[best], &prefix, settings.chunk)?)
        } else {
            None
        };
        blocks.push(BlockRatings {
            block: k,
            entry_scale: prefix.scale,
            paths,
            losses,
            best,
        });
        if let Some(n) = next {
            prefix = n;
        }
    }
    let best = Architecture {
        blocks: blocks.iter().map(|b| b.best_path().to_vec()).collect(),
    };
    Ok(SearchOutcome { best, blocks })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub pop_size: usize,
    pub generations: usize,
    /// Probability that a refilled member receives a single-gene mutation.
    pub mutation_rate: f64,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            pop_size: 16,
            generations: 5,
            mutation_rate: 0.5,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: &str| {
            Err(Error::Config {
                path: format!("evaluator.evolution.{path}"),
                reason: reason.into(),
            })
        };
        if self.pop_size < 2 {
            return bad("pop_size", "must be at least 2");
        }
        if self.generations == 0 {
            return bad("generations", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return bad("mutation_rate", "must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    /// 1-based.
    pub block: usize,
    /// 1-based.
    pub generation: usize,
    pub members: Vec<String>,
    pub losses: Vec<f64>,
    pub best: String,
    pub best_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvolutionOutcome {
    pub best: Architecture,
    pub history: Vec<GenerationRecord>,
}

fn valid_at(space: &SearchSpaceDef, path: &[Gene], entry: usize) -> bool {
    path_exit_scale(space, path, entry).is_some()
}

/// Distinct valid paths drawn uniformly; the full enumeration when it is no
/// larger than `size`.
fn initial_population<R: Rng + ?Sized>(
    space: &SearchSpaceDef,
    k: usize,
    entry: usize,
    size: usize,
    rng: &mut R,
) -> Vec<Vec<Gene>> {
    let mut pop = match enumerate_block_paths_at(space, k, entry) {
        Ok(all) if all.len() <= size => all,
        Ok(all) => sample(rng, all.len(), size)
            .into_iter()
            .map(|i| all[i].clone())
            .collect(),
        Err(_) => {
            let layers = &space.layers[space.block_range(k)];
            let mut seen: Vec<Vec<Gene>> = Vec::with_capacity(size);
            while seen.len() < size {
                let p: Vec<Gene> = layers
                    .iter()
                    .map(|l| l.candidates[rng.random_range(0..l.candidates.len())])
                    .collect();
                if valid_at(space, &p, entry) && !seen.contains(&p) {
                    seen.push(p);
                }
            }
            seen
        }
    };
    pop.sort();
    pop
}

const MUTATION_ATTEMPTS: usize = 64;

/// Replaces one gene with a different candidate of the same layer, retrying
/// until the path is valid; gives up and returns the parent after a bounded
/// number of attempts.
fn mutate<R: Rng + ?Sized>(
    space: &SearchSpaceDef,
    k: usize,
    entry: usize,
    parent: &[Gene],
    rng: &mut R,
) -> Vec<Gene> {
    let layers = &space.layers[space.block_range(k)];
    for _ in 0..MUTATION_ATTEMPTS {
        let mut child = parent.to_vec();
        let j = rng.random_range(0..child.len());
        let cands = &layers[j].candidates;
        let alt: Vec<Gene> = cands.iter().copied().filter(|&g| g != child[j]).collect();
        if alt.is_empty() {
            continue;
        }
        child[j] = alt[rng.random_range(0..alt.len())];
        if valid_at(space, &child, entry) {
            return child;
        }
    }
    parent.to_vec()
}

/// Per block: evolves a population whose own center is the rating target,
/// keeping the top half each generation and refilling by mutation.
pub fn evolutionary_search(
    state: &SiameseState,
    views: &FixedViewSet,
    normalizer: &Normalizer,
    settings: &EvalSettings,
) -> Result<EvolutionOutcome> {
    let cfg = &settings.evolution;
    cfg.validate()?;
    let space = state.space();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prefix = stem_prefix(state, views, normalizer, settings.chunk)?;
    let mut history = Vec::new();
    let mut chosen = Vec::with_capacity(space.block_count());
    for k in 0..space.block_count() {
        let mut cache: HashMap<Vec<Gene>, (Tensor, Tensor)> = HashMap::new();
        let mut pop = initial_population(space, k, prefix.scale, cfg.pop_size, &mut rng);
        let mut block_best = Vec::new();
        for generation in 1..=cfg.generations {
            let missing: Vec<Vec<Gene>> = {
                let mut m: Vec<Vec<Gene>> = pop
                    .iter()
                    .filter(|p| !cache.contains_key(*p))
                    .cloned()
                    .collect();
                m.sort();
                m.dedup();
                m
            };
            for (p, o) in
                missing
                    .iter()
                    .zip(path_outputs(state, k, &missing, &prefix, settings.chunk)?)
            {
                cache.insert(p.clone(), (o.v1, o.v2));
            }
            let center = center_of(&pop.iter().map(|p| &cache[p].1).collect::<Vec<_>>())?;
            let losses = pop
                .iter()
                .map(|p| distance_to_center(&cache[p].0, &center))
                .collect::<Result<Vec<_>>>()?;
            let b = select_best(&losses).expect("nonempty population");
            block_best = pop[b].clone();
            history.push(GenerationRecord {
                block: k + 1,
                generation,
                members: pop.iter().map(|p| encode_path(p)).collect(),
                losses: losses.clone(),
                best: encode_path(&pop[b]),
                best_loss: losses[b],
            });
            if generation == cfg.generations {
                break;
            }
            let mut order: Vec<usize> = (0..pop.len()).collect();
            order.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]).then(i.cmp(&j)));
            let keep = pop.len().div_ceil(2);
            let survivors: Vec<Vec<Gene>> = order[..keep].iter().map(|&i| pop[i].clone()).collect();
            let mut next = survivors.clone();
            while next.len() < pop.len() {
                let parent = &survivors[rng.random_range(0..survivors.len())];
                let child = if rng.random_bool(cfg.mutation_rate) {
                    mutate(space, k, prefix.scale, parent, &mut rng)
                } else {
                    parent.clone()
                };
                next.push(child);
            }
            next.sort();
            pop = next;
        }
        if k + 1 < space.block_count() {
            prefix = advance(state, k, &block_best, &prefix, settings.chunk)?;
        }
        chosen.push(block_best);
    }
    Ok(EvolutionOutcome {
        best: Architecture { blocks: chosen },
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_picks_smallest() {
        assert_eq!(select_best(&[0.3, 0.1, 0.2]), Some(1));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(select_best(&[0.2, 0.5, 0.2]), Some(0));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn mutation_changes_exactly_one_gene() {
        let space = SearchSpaceDef::mbconv_mini();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let parent = vec![Gene::MbConv { index: 0 }, Gene::MbConv { index: 1 }];
        for _ in 0..50 {
            let child = mutate(&space, 1, 0, &parent, &mut rng);
            let diff = child.iter().zip(&parent).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn hytra_mutants_stay_valid() {
        let space = SearchSpaceDef::hytra_mini();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pop = initial_population(&space, 1, 1, 12, &mut rng);
        assert_eq!(pop.len(), 12);
        for p in &pop {
            assert!(valid_at(&space, p, 1));
            for _ in 0..20 {
                assert!(valid_at(&space, &mutate(&space, 1, 1, p, &mut rng), 1));
            }
        }
    }

    #[test]
    fn small_blocks_start_from_full_enumeration() {
        let space = SearchSpaceDef::mbconv_mini();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pop = initial_population(&space, 0, 0, 16, &mut rng);
        assert_eq!(pop, enumerate_block_paths_at(&space, 0, 0).unwrap());
    }
}
