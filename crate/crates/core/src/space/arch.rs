use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::def::{ScaleRules, SearchSpaceDef};
use super::gene::Gene;
use crate::error::{Error, Result};

/// Per-block gene lists. Ordered lexicographically, which matches the
/// enumeration order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Architecture {
    pub blocks: Vec<Vec<Gene>>,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (b, genes) in self.blocks.iter().enumerate() {
            if b > 0 {
                f.write_str("-")?;
            }
            for (i, g) in genes.iter().enumerate() {
                if i > 0 {
                    f.write_str(".")?;
                }
                write!(f, "{g}")?;
            }
        }
        Ok(())
    }
}

pub fn encode_path(path: &[Gene]) -> String {
    path.iter()
        .map(Gene::to_string)
        .collect::<Vec<_>>()
        .join(".")
}

impl Architecture {
    pub fn encode(&self) -> String {
        self.to_string()
    }

    /// Parses and validates an architecture string against `space`.
    pub fn decode(space: &SearchSpaceDef, s: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        for (b, group) in s.split('-').enumerate() {
            let mut genes = Vec::new();
            for (i, token) in group.split('.').enumerate() {
                let gene = token.parse::<Gene>().map_err(|e| match e {
                    Error::Architecture { reason, .. } => Error::Architecture {
                        position: format!("block {}, gene {}", b + 1, i + 1),
                        reason: format!("malformed token `{token}`: {reason}"),
                    },
                    other => other,
                })?;
                genes.push(gene);
            }
            blocks.push(genes);
        }
        let arch = Architecture { blocks };
        validate_architecture(space, &arch)?;
        Ok(arch)
    }

    pub fn genes(&self) -> impl Iterator<Item = Gene> + '_ {
        self.blocks.iter().flatten().copied()
    }

    pub fn from_flat(space: &SearchSpaceDef, genes: &[Gene]) -> Self {
        let blocks = (0..space.block_count())
            .map(|k| genes[space.block_range(k)].to_vec())
            .collect();
        Architecture { blocks }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PathValidity {
    Valid,
    /// `layer` is 1-based.
    Violation {
        layer: usize,
        reason: String,
    },
}

impl PathValidity {
    pub fn is_valid(&self) -> bool {
        matches!(self, PathValidity::Valid)
    }
}

/// Walks scales from `entry`; returns the exit scale or (offset, reason).
fn walk(
    rules: &ScaleRules,
    entry: usize,
    genes: &[Gene],
) -> std::result::Result<usize, (usize, String)> {
    let mut scale = entry;
    for (i, g) in genes.iter().enumerate() {
        if g.stride() == Some(2) {
            if scale + 1 > rules.max_scale {
                return Err((
                    i,
                    format!(
                        "downsample would exceed the smallest scale (at most {} downsamples)",
                        rules.max_scale - rules.initial_scale
                    ),
                ));
            }
            scale += 1;
        }
        if g.is_attention() && !rules.attention_scales.contains(&scale) {
            return Err((
                i,
                format!(
                    "attention at scale {scale}; attention is only permitted at scales {:?}",
                    rules.attention_scales
                ),
            ));
        }
    }
    Ok(scale)
}

fn rules(space: &SearchSpaceDef) -> Result<&ScaleRules> {
    space.scale_rules.as_ref().ok_or_else(|| Error::Config {
        path: "space".into(),
        reason: format!("{} has no scale rules", space.name),
    })
}

/// Checks a full gene sequence (one gene per layer) against the fabric rules.
pub fn validate_hytra_path(space: &SearchSpaceDef, genes: &[Gene]) -> Result<PathValidity> {
    let r = rules(space)?;
    if genes.len() != space.layer_count() {
        return Err(Error::Architecture {
            position: "architecture".into(),
            reason: format!("{} genes for {} layers", genes.len(), space.layer_count()),
        });
    }
    Ok(match walk(r, r.initial_scale, genes) {
        Ok(_) => PathValidity::Valid,
        Err((i, reason)) => PathValidity::Violation {
            layer: i + 1,
            reason,
        },
    })
}

pub fn validate_architecture(space: &SearchSpaceDef, arch: &Architecture) -> Result<()> {
    if arch.blocks.len() != space.block_count() {
        return Err(Error::Architecture {
            position: "architecture".into(),
            reason: format!(
                "{} blocks, space has {}",
                arch.blocks.len(),
                space.block_count()
            ),
        });
    }
    for (k, genes) in arch.blocks.iter().enumerate() {
        let range = space.block_range(k);
        if genes.len() != range.len() {
            return Err(Error::Architecture {
                position: format!("block {}", k + 1),
                reason: format!("{} genes, block has {} layers", genes.len(), range.len()),
            });
        }
        for (i, (g, layer)) in genes.iter().zip(&space.layers[range]).enumerate() {
            if !layer.candidates.contains(g) {
                return Err(Error::Architecture {
                    position: format!("block {}, gene {}", k + 1, i + 1),
                    reason: format!("`{g}` is not a candidate of this layer"),
                });
            }
        }
    }
    if space.scale_rules.is_some() {
        let flat: Vec<Gene> = arch.genes().collect();
        if let PathValidity::Violation { layer, reason } = validate_hytra_path(space, &flat)? {
            let k = (0..space.block_count())
                .find(|&k| space.block_range(k).contains(&(layer - 1)))
                .expect("layer within space");
            return Err(Error::Architecture {
                position: format!(
                    "block {}, gene {} (layer {layer})",
                    k + 1,
                    layer - space.block_range(k).start
                ),
                reason,
            });
        }
    }
    Ok(())
}

/// Scale on entry to block `k` along `arch`; always 0 outside the hybrid space.
pub fn entry_scale(space: &SearchSpaceDef, arch: &Architecture, k: usize) -> usize {
    match &space.scale_rules {
        None => 0,
        Some(r) => {
            let downs = arch.blocks[..k]
                .iter()
                .flatten()
                .filter(|g| g.stride() == Some(2))
                .count();
            r.initial_scale + downs
        }
    }
}

/// Exit scale of a block path entered at `entry`, or `None` when invalid there.
pub fn path_exit_scale(space: &SearchSpaceDef, path: &[Gene], entry: usize) -> Option<usize> {
    match &space.scale_rules {
        None => Some(0),
        Some(r) => walk(r, entry, path).ok(),
    }
}

/// Entry scales a valid prefix can deliver to block `k`.
pub fn reachable_entry_scales(space: &SearchSpaceDef, k: usize) -> Vec<usize> {
    match &space.scale_rules {
        None => vec![0],
        Some(r) => {
            let before = space.block_range(k).start;
            (r.initial_scale..=r.max_scale.min(r.initial_scale + before)).collect()
        }
    }
}

fn block_path_valid(space: &SearchSpaceDef, k: usize, path: &[Gene]) -> bool {
    reachable_entry_scales(space, k)
        .into_iter()
        .any(|e| path_exit_scale(space, path, e).is_some())
}

/// Visits every gene combination over `layers` in lexicographic order.
fn odometer(
    space: &SearchSpaceDef,
    layers: std::ops::Range<usize>,
    mut visit: impl FnMut(&[Gene]),
) {
    let lists: Vec<&[Gene]> = space.layers[layers]
        .iter()
        .map(|l| l.candidates.as_slice())
        .collect();
    let mut idx = vec![0usize; lists.len()];
    let mut genes: Vec<Gene> = lists.iter().map(|l| l[0]).collect();
    loop {
        visit(&genes);
        let mut pos = lists.len();
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < lists[pos].len() {
                genes[pos] = lists[pos][idx[pos]];
                break;
            }
            idx[pos] = 0;
            genes[pos] = lists[pos][0];
        }
    }
}

fn product(space: &SearchSpaceDef, layers: std::ops::Range<usize>) -> u128 {
    space.layers[layers]
        .iter()
        .map(|l| l.candidates.len() as u128)
        .product()
}

/// Counts paths over `layers` valid from `entry` by dynamic programming on scale.
fn count_from(space: &SearchSpaceDef, layers: std::ops::Range<usize>, entry: usize) -> u128 {
    let Some(r) = &space.scale_rules else {
        return product(space, layers);
    };
    let mut ways = vec![0u128; r.max_scale + 1];
    ways[entry] = 1;
    for layer in &space.layers[layers] {
        let mut next = vec![0u128; r.max_scale + 1];
        for (s, &w) in ways.iter().enumerate().filter(|(_, &w)| w > 0) {
            for &g in &layer.candidates {
                if let Ok(out) = walk(r, s, &[g]) {
                    next[out] += w;
                }
            }
        }
        ways = next;
    }
    ways.iter().sum()
}

/// Number of distinct paths of block `k` valid from at least one reachable entry scale.
pub fn count_block_paths(space: &SearchSpaceDef, k: usize) -> u128 {
    let range = space.block_range(k);
    if space.scale_rules.is_none() {
        return product(space, range);
    }
    if product(space, range.clone()) <= 1 << 20 {
        let mut n = 0u128;
        odometer(space, range, |p| {
            if block_path_valid(space, k, p) {
                n += 1;
            }
        });
        n
    } else {
        reachable_entry_scales(space, k)
            .into_iter()
            .map(|e| count_from(space, range.clone(), e))
            .sum()
    }
}

fn cap_check(space: &SearchSpaceDef, k: usize, count: u128) -> Result<()> {
    if count > space.traversal_cap as u128 {
        return Err(Error::TraversalCap {
            block: k + 1,
            count,
            cap: space.traversal_cap,
        });
    }
    Ok(())
}

/// Every valid path of block `k` in lexicographic order.
pub fn enumerate_block_paths(space: &SearchSpaceDef, k: usize) -> Result<Vec<Vec<Gene>>> {
    cap_check(space, k, count_block_paths(space, k))?;
    let mut out = Vec::new();
    odometer(space, space.block_range(k), |p| {
        if block_path_valid(space, k, p) {
            out.push(p.to_vec());
        }
    });
    Ok(out)
}

/// Paths of block `k` valid when entered at scale `entry`.
pub fn enumerate_block_paths_at(
    space: &SearchSpaceDef,
    k: usize,
    entry: usize,
) -> Result<Vec<Vec<Gene>>> {
    let range = space.block_range(k);
    cap_check(space, k, count_from(space, range.clone(), entry))?;
    let mut out = Vec::new();
    odometer(space, range, |p| {
        if path_exit_scale(space, p, entry).is_some() {
            out.push(p.to_vec());
        }
    });
    Ok(out)
}

pub fn count_architectures(space: &SearchSpaceDef) -> u128 {
    match &space.scale_rules {
        None => product(space, 0..space.layer_count()),
        Some(r) => count_from(space, 0..space.layer_count(), r.initial_scale),
    }
}

/// Every valid architecture in lexicographic order, refusing above `cap`.
pub fn enumerate_architectures(space: &SearchSpaceDef, cap: usize) -> Result<Vec<Architecture>> {
    let count = count_architectures(space);
    if count > cap as u128 {
        return Err(Error::TraversalCap {
            block: 0,
            count,
            cap,
        });
    }
    let mut out = Vec::with_capacity(count as usize);
    odometer(space, 0..space.layer_count(), |genes| {
        let ok = match &space.scale_rules {
            None => true,
            Some(r) => walk(r, r.initial_scale, genes).is_ok(),
        };
        if ok {
            out.push(Architecture::from_flat(space, genes));
        }
    });
    Ok(out)
}

fn draw<R: Rng + ?Sized>(
    space: &SearchSpaceDef,
    layers: std::ops::Range<usize>,
    rng: &mut R,
) -> Vec<Gene> {
    space.layers[layers]
        .iter()
        .map(|l| l.candidates[rng.random_range(0..l.candidates.len())])
        .collect()
}

/// `count` paths of block `k`, uniform over its valid paths (duplicates allowed).
pub fn sample_paths(space: &SearchSpaceDef, k: usize, count: usize, seed: u64) -> Vec<Vec<Gene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_paths_with(space, k, count, &mut rng)
}

pub fn sample_paths_with<R: Rng + ?Sized>(
    space: &SearchSpaceDef,
    k: usize,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<Gene>> {
    let range = space.block_range(k);
    (0..count)
        .map(|_| loop {
            let p = draw(space, range.clone(), rng);
            if block_path_valid(space, k, &p) {
                break p;
            }
        })
        .collect()
}

/// Whole architectures, uniform over the valid space.
pub fn sample_architectures<R: Rng + ?Sized>(
    space: &SearchSpaceDef,
    count: usize,
    rng: &mut R,
) -> Vec<Architecture> {
    (0..count)
        .map(|_| loop {
            let genes = draw(space, 0..space.layer_count(), rng);
            let ok = match &space.scale_rules {
                None => true,
                Some(r) => walk(r, r.initial_scale, &genes).is_ok(),
            };
            if ok {
                break Architecture::from_flat(space, &genes);
            }
        })
        .collect()
}

/// Draws architectures by rejection from the unconstrained product; exposed
/// for cross-checking enumeration completeness.
pub fn draw_unconstrained<R: Rng + ?Sized>(space: &SearchSpaceDef, rng: &mut R) -> Vec<Gene> {
    draw(space, 0..space.layer_count(), rng)
}
