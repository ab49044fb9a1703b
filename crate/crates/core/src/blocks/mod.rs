//! Candidate building blocks for the three search spaces.

mod layers;
pub mod mbconv;
pub mod res_att;
pub mod res_conv;
pub mod slimmable;

pub use layers::{batch_norm, conv, conv_bn, dense, init_bn, init_conv, init_conv_bn, init_dense};
pub use mbconv::build_mbconv_mini;
pub use res_att::build_res_att_mini;
pub use res_conv::build_res_conv_mini;
pub use slimmable::{slimmable_forward, slimmable_forward_with, WIDTH_SET};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Largest token count a res-att block accepts.
pub const DEFAULT_TOKEN_CAP: usize = 256;

/// Attention heads used by every res-att block.
pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    ResConv,
    ResAtt,
    MbConv,
    NatsCell,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// res-att only.
    pub heads: usize,
    /// mb-conv only: 3 or 5.
    pub kernel: usize,
    /// mb-conv only: 3 or 6.
    pub expansion: usize,
    /// nats-cell only: admissible output widths.
    pub widths: Vec<usize>,
}

impl BlockSpec {
    fn base(kind: BlockKind, in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            out_channels,
            stride,
            heads: 0,
            kernel: 0,
            expansion: 0,
            widths: Vec::new(),
        }
    }

    pub fn res_conv(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self::base(BlockKind::ResConv, in_channels, out_channels, stride)
    }

    pub fn res_att(in_channels: usize, out_channels: usize, stride: usize, heads: usize) -> Self {
        BlockSpec {
            heads,
            ..Self::base(BlockKind::ResAtt, in_channels, out_channels, stride)
        }
    }

    pub fn mbconv(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        kernel: usize,
        expansion: usize,
    ) -> Self {
        BlockSpec {
            kernel,
            expansion,
            ..Self::base(BlockKind::MbConv, in_channels, out_channels, stride)
        }
    }

    /// Slimmable cell with max input `in_channels` and output widths `widths`.
    pub fn nats_cell(in_channels: usize, widths: &[usize], stride: usize) -> Self {
        let max = widths.iter().copied().max().unwrap_or(0);
        BlockSpec {
            widths: widths.to_vec(),
            ..Self::base(BlockKind::NatsCell, in_channels, max, stride)
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::BlockSpec("channel counts must be positive".into()));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::BlockSpec(format!(
                "stride must be 1 or 2, got {}",
                self.stride
            )));
        }
        match self.kind {
            BlockKind::MbConv => {
                if ![3, 5].contains(&self.kernel) {
                    return Err(Error::BlockSpec(format!(
                        "mb-conv kernel must be 3 or 5, got {}",
                        self.kernel
                    )));
                }
                if ![3, 6].contains(&self.expansion) {
                    return Err(Error::BlockSpec(format!(
                        "mb-conv expansion must be 3 or 6, got {}",
                        self.expansion
                    )));
                }
            }
            BlockKind::ResAtt => {
                if self.heads == 0 || !self.out_channels.is_multiple_of(self.heads) {
                    return Err(Error::BlockSpec(format!(
                        "res-att needs out-channels ({}) divisible by heads ({})",
                        self.out_channels, self.heads
                    )));
                }
            }
            BlockKind::ResConv | BlockKind::NatsCell => {}
        }
        Ok(())
    }
}

/// One candidate block with its own parameters. The optional shortcut
/// projection lives in a separate store so it is only updated when used.
#[derive(Clone, Debug)]
pub struct BlockInstance {
    pub spec: BlockSpec,
    pub params: ParameterStore,
    pub shortcut: Option<ParameterStore>,
    pub token_cap: usize,
}

impl BlockInstance {
    pub fn build<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            BlockKind::ResConv => build_res_conv_mini(spec, rng),
            BlockKind::ResAtt => build_res_att_mini(spec, rng),
            BlockKind::MbConv => build_mbconv_mini(spec, rng),
            BlockKind::NatsCell => slimmable::build_nats_cell(spec, rng),
        }
    }

    fn with_projection_shortcut<R: Rng + ?Sized>(
        spec: BlockSpec,
        params: ParameterStore,
        rng: &mut R,
    ) -> Self {
        let shortcut = if spec.stride == 2 || spec.in_channels != spec.out_channels {
            let mut s = ParameterStore::new();
            init_conv_bn(&mut s, "proj", spec.out_channels, spec.in_channels, 1, rng);
            Some(s)
        } else {
            None
        };
        BlockInstance {
            spec,
            params,
            shortcut,
            token_cap: DEFAULT_TOKEN_CAP,
        }
    }

    /// Identity when shapes line up at `stride`, else the strided projection.
    fn shortcut_path(
        &self,
        g: &mut Graph,
        sc: Option<&ParameterStore>,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        if stride == 1 && self.spec.in_channels == self.spec.out_channels {
            return Ok(x);
        }
        let s = sc.ok_or_else(|| {
            Error::BlockSpec(format!(
                "block built for stride {} has no projection shortcut for stride {stride}",
                self.spec.stride
            ))
        })?;
        conv_bn(g, s, "proj", x, stride, false)
    }

    /// Forward at the spec's own stride.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_at(g, x, self.spec.stride)
    }

    /// Forward with an overridden stride; both strides share every main-path tensor.
    pub fn forward_at(&self, g: &mut Graph, x: Var, stride: usize) -> Result<Var> {
        self.forward_with(g, &self.params, self.shortcut.as_ref(), x, stride)
    }

    /// Forward using explicit stores in place of the instance's own, which
    /// must have the same parameter ids and shapes.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &ParameterStore,
        shortcut: Option<&ParameterStore>,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let cin = g.shape(x).get(1).copied().unwrap_or(0);
        match self.spec.kind {
            BlockKind::NatsCell => {
                return slimmable::slimmable_forward_with(
                    &self.spec,
                    params,
                    g,
                    self.spec.out_channels,
                    x,
                    stride,
                );
            }
            _ if cin != self.spec.in_channels => {
                return Err(Error::shape(
                    "block",
                    format!(
                        "input has {cin} channels, block expects {}",
                        self.spec.in_channels
                    ),
                ));
            }
            _ => {}
        }
        match self.spec.kind {
            BlockKind::ResConv => res_conv::forward(self, params, shortcut, g, x, stride),
            BlockKind::ResAtt => res_att::forward(self, params, shortcut, g, x, stride),
            BlockKind::MbConv => mbconv::forward(self, params, g, x, stride),
            BlockKind::NatsCell => unreachable!(),
        }
    }

    /// Slimmable forward at an output width (nats-cell only).
    pub fn forward_width(&self, g: &mut Graph, x: Var, width: usize, stride: usize) -> Result<Var> {
        slimmable_forward(self, g, width, x, stride)
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
            + self
                .shortcut
                .as_ref()
                .map_or(0, ParameterStore::param_count)
    }

    pub fn stores(&self) -> Vec<(&'static str, &ParameterStore)> {
        let mut v = vec![("main", &self.params)];
        if let Some(s) = &self.shortcut {
            v.push(("shortcut", s));
        }
        v
    }

    pub fn stores_mut(&mut self) -> Vec<(&'static str, &mut ParameterStore)> {
        let mut v = vec![("main", &mut self.params)];
        if let Some(s) = &mut self.shortcut {
            v.push(("shortcut", s));
        }
        v
    }
}
