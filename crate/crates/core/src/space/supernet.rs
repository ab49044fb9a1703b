use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::arch::{path_exit_scale, validate_architecture, Architecture};
use super::def::{SearchSpaceDef, SpaceName};
use super::gene::Gene;
use crate::blocks::{conv_bn, init_conv_bn, BlockInstance, BlockSpec, DEFAULT_HEADS, WIDTH_SET};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Kernel and expansion of each mb-conv candidate index.
pub const MBCONV_CANDIDATES: [(usize, usize); 4] = [(3, 3), (3, 6), (5, 3), (5, 6)];

/// Identifies a shared block within a layer. In the hybrid space `candidate`
/// is 0 for convolution and 1 for attention and `scale` is the output scale;
/// elsewhere `scale` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeKey {
    pub candidate: u8,
    pub scale: u8,
}

/// Weight-sharing supernet: every architecture of the space is a path through it.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub space: SearchSpaceDef,
    pub stem: ParameterStore,
    pub layers: Vec<BTreeMap<NodeKey, BlockInstance>>,
}

impl Supernet {
    pub fn build(space: &SearchSpaceDef, seed: u64) -> Result<Self> {
        space.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = ParameterStore::new();
        init_conv_bn(
            &mut stem,
            "stem",
            space.stem_channels,
            space.input_channels,
            3,
            &mut rng,
        );
        let mut layers = Vec::with_capacity(space.layer_count());
        for (l, layer) in space.layers.iter().enumerate() {
            let mut nodes = BTreeMap::new();
            match (space.name, &space.scale_rules) {
                (SpaceName::HytraMini, Some(r)) => {
                    let top = r.max_scale.min(r.initial_scale + l + 1);
                    for s in r.initial_scale..=top {
                        let c = r.channels[s];
                        let stride = if s > r.initial_scale { 2 } else { 1 };
                        let key = NodeKey {
                            candidate: 0,
                            scale: s as u8,
                        };
                        nodes.insert(
                            key,
                            BlockInstance::build(&BlockSpec::res_conv(c, c, stride), &mut rng)?,
                        );
                        if r.attention_scales.contains(&s) {
                            let key = NodeKey {
                                candidate: 1,
                                scale: s as u8,
                            };
                            let spec = BlockSpec::res_att(c, c, stride, DEFAULT_HEADS);
                            nodes.insert(key, BlockInstance::build(&spec, &mut rng)?);
                        }
                    }
                }
                (SpaceName::MbconvMini, _) => {
                    for g in &layer.candidates {
                        let (k, e) = MBCONV_CANDIDATES[g.index() as usize];
                        let spec = BlockSpec::mbconv(
                            layer.in_channels,
                            layer.out_channels,
                            layer.stride,
                            k,
                            e,
                        );
                        let key = NodeKey {
                            candidate: g.index(),
                            scale: 0,
                        };
                        nodes.insert(key, BlockInstance::build(&spec, &mut rng)?);
                    }
                }
                (SpaceName::NatsSizeMini, _) => {
                    let spec = BlockSpec::nats_cell(layer.in_channels, &WIDTH_SET, layer.stride);
                    nodes.insert(
                        NodeKey {
                            candidate: 0,
                            scale: 0,
                        },
                        BlockInstance::build(&spec, &mut rng)?,
                    );
                }
                (SpaceName::HytraMini, None) => {
                    return Err(Error::Config {
                        path: "space".into(),
                        reason: "hybrid space without scale rules".into(),
                    })
                }
            }
            layers.push(nodes);
        }
        Ok(Supernet {
            space: space.clone(),
            stem,
            layers,
        })
    }

    pub fn stem_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        conv_bn(g, &self.stem, "stem", x, self.space.stem_stride, true)
    }

    fn node(&self, layer: usize, key: NodeKey) -> Result<&BlockInstance> {
        self.layers[layer]
            .get(&key)
            .ok_or_else(|| Error::Architecture {
                position: format!("layer {}", layer + 1),
                reason: format!(
                    "no shared block for candidate {} at scale {}",
                    key.candidate, key.scale
                ),
            })
    }

    /// Forwards block `k` along `path`, entered at `entry_scale`; returns the
    /// output and the exit scale.
    pub fn forward_block(
        &self,
        g: &mut Graph,
        k: usize,
        path: &[Gene],
        x: Var,
        entry_scale: usize,
    ) -> Result<(Var, usize)> {
        let range = self.space.block_range(k);
        if path.len() != range.len() {
            return Err(Error::Architecture {
                position: format!("block {}", k + 1),
                reason: format!("{} genes, block has {} layers", path.len(), range.len()),
            });
        }
        if path_exit_scale(&self.space, path, entry_scale).is_none() {
            return Err(Error::Architecture {
                position: format!("block {}", k + 1),
                reason: format!("path invalid when entered at scale {entry_scale}"),
            });
        }
        let mut x = x;
        let mut scale = entry_scale;
        for (l, &gene) in range.zip(path) {
            let layer = &self.space.layers[l];
            if !layer.candidates.contains(&gene) {
                return Err(Error::Architecture {
                    position: format!("layer {}", l + 1),
                    reason: format!("`{gene}` is not a candidate of this layer"),
                });
            }
            x = match gene {
                Gene::Conv { stride, .. } | Gene::Attention { stride, .. } => {
                    let rules = self
                        .space
                        .scale_rules
                        .as_ref()
                        .expect("validated hybrid space");
                    if stride == 2 {
                        scale += 1;
                        x = g.pad_channels(x, rules.channels[scale])?;
                    }
                    let key = NodeKey {
                        candidate: gene.is_attention() as u8,
                        scale: scale as u8,
                    };
                    self.node(l, key)?.forward_at(g, x, stride as usize)?
                }
                Gene::MbConv { index } => self
                    .node(
                        l,
                        NodeKey {
                            candidate: index,
                            scale: 0,
                        },
                    )?
                    .forward(g, x)?,
                Gene::Width { index } => {
                    let width = WIDTH_SET[index as usize];
                    self.node(
                        l,
                        NodeKey {
                            candidate: 0,
                            scale: 0,
                        },
                    )?
                    .forward_width(g, x, width, layer.stride)?
                }
            };
        }
        Ok((x, scale))
    }

    /// Stem plus every block of `arch`; returns the feature map at each block boundary.
    pub fn forward(&self, g: &mut Graph, arch: &Architecture, x: Var) -> Result<Vec<Var>> {
        validate_architecture(&self.space, arch)?;
        let mut h = self.stem_forward(g, x)?;
        let mut scale = self
            .space
            .scale_rules
            .as_ref()
            .map_or(0, |r| r.initial_scale);
        let mut outs = Vec::with_capacity(arch.blocks.len());
        for (k, path) in arch.blocks.iter().enumerate() {
            let (y, s) = self.forward_block(g, k, path, h, scale)?;
            outs.push(y);
            h = y;
            scale = s;
        }
        Ok(outs)
    }

    /// Stores of the stem followed by every shared block, in a fixed order.
    pub fn stores(&self) -> Vec<&ParameterStore> {
        let mut v = vec![&self.stem];
        for nodes in &self.layers {
            for b in nodes.values() {
                v.extend(b.stores().into_iter().map(|(_, s)| s));
            }
        }
        v
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParameterStore> {
        let mut v = vec![&mut self.stem];
        for nodes in &mut self.layers {
            for b in nodes.values_mut() {
                v.extend(b.stores_mut().into_iter().map(|(_, s)| s));
            }
        }
        v
    }

    /// Stores with stable names, in the same order as [`Supernet::stores`].
    pub fn named_stores(&self) -> Vec<(String, &ParameterStore)> {
        let mut v = vec![("stem".to_string(), &self.stem)];
        for (l, nodes) in self.layers.iter().enumerate() {
            for (key, b) in nodes {
                for (part, s) in b.stores() {
                    v.push((
                        format!("l{}.c{}s{}.{part}", l + 1, key.candidate, key.scale),
                        s,
                    ));
                }
            }
        }
        v
    }

    pub fn named_stores_mut(&mut self) -> Vec<(String, &mut ParameterStore)> {
        let mut v = vec![("stem".to_string(), &mut self.stem)];
        for (l, nodes) in self.layers.iter_mut().enumerate() {
            for (key, b) in nodes.iter_mut() {
                for (part, s) in b.stores_mut() {
                    v.push((
                        format!("l{}.c{}s{}.{part}", l + 1, key.candidate, key.scale),
                        s,
                    ));
                }
            }
        }
        v
    }

    /// Stores touched by block `k` (the stem belongs to the first block).
    pub fn block_stores(&self, k: usize) -> Vec<&ParameterStore> {
        let mut v = Vec::new();
        if k == 0 {
            v.push(&self.stem);
        }
        for nodes in &self.layers[self.space.block_range(k)] {
            for b in nodes.values() {
                v.extend(b.stores().into_iter().map(|(_, s)| s));
            }
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.stores().iter().map(|s| s.param_count()).sum()
    }
}
