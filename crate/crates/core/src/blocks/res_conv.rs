use rand::Rng;

use super::layers::{conv_bn, init_conv_bn};
use super::{BlockInstance, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Residual bottleneck whose middle 3×3 conv carries the stride, so the
/// stride-1 and stride-2 variants share every main-path tensor.
pub fn build_res_conv_mini<R: Rng + ?Sized>(
    spec: &BlockSpec,
    rng: &mut R,
) -> Result<BlockInstance> {
    if spec.kind != BlockKind::ResConv {
        return Err(Error::BlockSpec(format!(
            "expected res-conv, got {:?}",
            spec.kind
        )));
    }
    if spec.in_channels < 2 {
        return Err(Error::BlockSpec(format!(
            "res-conv needs at least 2 input channels to reduce, got {}",
            spec.in_channels
        )));
    }
    let mid = spec.in_channels / 2;
    let mut params = ParameterStore::new();
    init_conv_bn(&mut params, "reduce", mid, spec.in_channels, 1, rng);
    init_conv_bn(&mut params, "conv", mid, mid, 3, rng);
    init_conv_bn(&mut params, "expand", spec.out_channels, mid, 1, rng);
    Ok(BlockInstance::with_projection_shortcut(
        spec.clone(),
        params,
        rng,
    ))
}

pub(super) fn forward(
    block: &BlockInstance,
    p: &ParameterStore,
    sc: Option<&ParameterStore>,
    g: &mut Graph,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let h = conv_bn(g, p, "reduce", x, 1, true)?;
    let h = conv_bn(g, p, "conv", h, stride, true)?;
    let h = conv_bn(g, p, "expand", h, 1, false)?;
    let s = block.shortcut_path(g, sc, x, stride)?;
    g.add(h, s)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::substrate::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_expand_gives_identity() {
        let mut b = BlockInstance::build(&BlockSpec::res_conv(8, 8, 1), &mut rng()).unwrap();
        b.params.param_mut("expand.w").unwrap().data_mut().fill(0.0);
        let x = Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng());
        for mut g in [Graph::recording(), Graph::frozen()] {
            let xv = g.input(x.clone());
            let y = b.forward(&mut g, xv).unwrap();
            assert_eq!(g.value(y), &x);
        }
    }

    #[test]
    fn stride_two_halves_side() {
        let b = BlockInstance::build(&BlockSpec::res_conv(8, 16, 2), &mut rng()).unwrap();
        let mut g = Graph::recording();
        let x = g.input(Tensor::randn(&[2, 8, 8, 8], 1.0, &mut rng()));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 4, 4]);
    }

    #[test]
    fn parameter_count_matches_layer_shapes() {
        let b = BlockInstance::build(&BlockSpec::res_conv(16, 16, 1), &mut rng()).unwrap();
        // conv weights plus (gamma, beta) per normalized channel
        let reduce = 16 * 8 + 2 * 8;
        let mid = 8 * 8 * 3 * 3 + 2 * 8;
        let expand = 8 * 16 + 2 * 16;
        assert_eq!(b.param_count(), reduce + mid + expand);
        assert!(b.shortcut.is_none());
    }

    #[test]
    fn one_input_channel_rejected() {
        assert!(BlockInstance::build(&BlockSpec::res_conv(1, 4, 1), &mut rng()).is_err());
    }
}
