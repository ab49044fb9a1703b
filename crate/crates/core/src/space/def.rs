use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::gene::Gene;
use crate::blocks::WIDTH_SET;
use crate::error::{Error, Result};

/// Default bound on per-block path counts for exhaustive traversal.
pub const DEFAULT_TRAVERSAL_CAP: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceName {
    HytraMini,
    MbconvMini,
    NatsSizeMini,
}

impl fmt::Display for SpaceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpaceName::HytraMini => "hytra-mini",
            SpaceName::MbconvMini => "mbconv-mini",
            SpaceName::NatsSizeMini => "nats-size-mini",
        })
    }
}

impl FromStr for SpaceName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hytra-mini" => Ok(SpaceName::HytraMini),
            "mbconv-mini" => Ok(SpaceName::MbconvMini),
            "nats-size-mini" => Ok(SpaceName::NatsSizeMini),
            _ => Err(Error::Config {
                path: "space".into(),
                reason: format!("unknown search space `{s}`"),
            }),
        }
    }
}

/// Fabric rules for the hybrid space: each stride-2 gene moves one scale down.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleRules {
    pub initial_scale: usize,
    pub max_scale: usize,
    pub attention_scales: Vec<usize>,
    /// Channel width at each scale index.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDef {
    /// Candidates in enumeration order.
    pub candidates: Vec<Gene>,
    /// Fixed-shape spaces only; for slimmable layers these are the maxima.
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SearchSpaceDef {
    pub name: SpaceName,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub layers: Vec<LayerDef>,
    /// Number of layers in each block, in order.
    pub block_layers: Vec<usize>,
    pub scale_rules: Option<ScaleRules>,
    pub traversal_cap: usize,
}

fn hytra_layer() -> LayerDef {
    let mut candidates = Vec::new();
    for stride in [1, 2] {
        candidates.push(Gene::Conv { index: 0, stride });
        candidates.push(Gene::Attention { index: 0, stride });
    }
    candidates.sort();
    LayerDef {
        candidates,
        in_channels: 0,
        out_channels: 0,
        stride: 0,
    }
}

impl SearchSpaceDef {
    pub fn named(name: SpaceName) -> Self {
        match name {
            SpaceName::HytraMini => Self::hytra_mini(),
            SpaceName::MbconvMini => Self::mbconv_mini(),
            SpaceName::NatsSizeMini => Self::nats_size_mini(),
        }
    }

    /// Stem plus 8 conv/attention layers over 3 scales, 4 blocks of 2.
    pub fn hytra_mini() -> Self {
        Self::hytra(&[2, 2, 2, 2], 2, &[16, 32, 64])
    }

    /// Hybrid fabric space with the given block sizes and scale count;
    /// attention is permitted at the last two scales.
    pub fn hytra(block_layers: &[usize], max_scale: usize, channels: &[usize]) -> Self {
        let n: usize = block_layers.iter().sum();
        let attention_scales = (max_scale.saturating_sub(1)..=max_scale).collect();
        SearchSpaceDef {
            name: SpaceName::HytraMini,
            input_channels: 3,
            stem_channels: channels[0],
            stem_stride: 2,
            layers: vec![hytra_layer(); n],
            block_layers: block_layers.to_vec(),
            scale_rules: Some(ScaleRules {
                initial_scale: 0,
                max_scale,
                attention_scales,
                channels: channels.to_vec(),
            }),
            traversal_cap: DEFAULT_TRAVERSAL_CAP,
        }
    }

    /// 6 inverted-residual layers with kernel {3,5} × expansion {3,6}, 3 blocks of 2.
    pub fn mbconv_mini() -> Self {
        let shape = [
            (8, 12, 2),
            (12, 12, 1),
            (12, 16, 2),
            (16, 16, 1),
            (16, 24, 1),
            (24, 24, 1),
        ];
        let layers = shape
            .iter()
            .map(|&(i, o, s)| LayerDef {
                candidates: (0..4).map(|index| Gene::MbConv { index }).collect(),
                in_channels: i,
                out_channels: o,
                stride: s,
            })
            .collect();
        SearchSpaceDef {
            name: SpaceName::MbconvMini,
            input_channels: 3,
            stem_channels: 8,
            stem_stride: 2,
            layers,
            block_layers: vec![2, 2, 2],
            scale_rules: None,
            traversal_cap: DEFAULT_TRAVERSAL_CAP,
        }
    }

    /// 5 slimmable 3×3 layers with widths from the 8-entry set; layers 2 and 4
    /// downsample and open new blocks.
    pub fn nats_size_mini() -> Self {
        let max = *WIDTH_SET.last().expect("nonempty");
        let layers = (0..5)
            .map(|l| LayerDef {
                candidates: (0..WIDTH_SET.len() as u8)
                    .map(|index| Gene::Width { index })
                    .collect(),
                in_channels: if l == 0 { 16 } else { max },
                out_channels: max,
                stride: if l == 1 || l == 3 { 2 } else { 1 },
            })
            .collect();
        SearchSpaceDef {
            name: SpaceName::NatsSizeMini,
            input_channels: 3,
            stem_channels: 16,
            stem_stride: 2,
            layers,
            block_layers: vec![1, 2, 2],
            scale_rules: None,
            traversal_cap: DEFAULT_TRAVERSAL_CAP,
        }
    }

    pub fn block_count(&self) -> usize {
        self.block_layers.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Layer index range of block `k`.
    pub fn block_range(&self, k: usize) -> Range<usize> {
        let start: usize = self.block_layers[..k].iter().sum();
        start..start + self.block_layers[k]
    }

    /// Widest feature map block `k` can emit; heads pad to this size.
    pub fn block_feature_dim(&self, k: usize) -> usize {
        let last = self.block_range(k).end - 1;
        match &self.scale_rules {
            Some(r) => *r.channels.iter().max().expect("scales"),
            None => self.layers[last].out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Config {
                path: "space".into(),
                reason,
            })
        };
        if self.block_layers.contains(&0)
            || self.block_layers.iter().sum::<usize>() != self.layers.len()
        {
            return fail(format!(
                "block sizes {:?} do not partition {} layers",
                self.block_layers,
                self.layers.len()
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.candidates.len() < 2 {
                return fail(format!("layer {} has fewer than 2 candidates", i + 1));
            }
        }
        if let Some(r) = &self.scale_rules {
            if r.channels.len() <= r.max_scale || r.initial_scale > r.max_scale {
                return fail("scale rules need a channel width for every scale".into());
            }
        }
        Ok(())
    }
}
