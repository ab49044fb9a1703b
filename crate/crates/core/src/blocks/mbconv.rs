use rand::Rng;

use super::layers::{batch_norm, conv_bn, depthwise, init_bn, init_conv_bn, init_depthwise};
use super::{BlockInstance, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Inverted residual: 1×1 expand → depthwise k×k → 1×1 project.
pub fn build_mbconv_mini<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<BlockInstance> {
    if spec.kind != BlockKind::MbConv {
        return Err(Error::BlockSpec(format!(
            "expected mb-conv, got {:?}",
            spec.kind
        )));
    }
    let hidden = spec.hidden_width();
    let mut params = ParameterStore::new();
    init_conv_bn(&mut params, "expand", hidden, spec.in_channels, 1, rng);
    init_depthwise(&mut params, "dw", hidden, spec.kernel, rng);
    init_bn(&mut params, "dw.bn", hidden);
    init_conv_bn(&mut params, "project", spec.out_channels, hidden, 1, rng);
    Ok(BlockInstance {
        spec: spec.clone(),
        params,
        shortcut: None,
        token_cap: super::DEFAULT_TOKEN_CAP,
    })
}

pub(super) fn forward(
    block: &BlockInstance,
    p: &ParameterStore,
    g: &mut Graph,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let h = conv_bn(g, p, "expand", x, 1, true)?;
    let h = depthwise(g, p, "dw", h, stride)?;
    let h = batch_norm(g, p, "dw.bn", h)?;
    let h = g.relu(h)?;
    let h = conv_bn(g, p, "project", h, 1, false)?;
    if stride == 1 && block.spec.in_channels == block.spec.out_channels {
        g.add(h, x)
    } else {
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::substrate::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn zero_project_gives_identity() {
        let mut b = BlockInstance::build(&BlockSpec::mbconv(8, 8, 1, 5, 3), &mut rng()).unwrap();
        b.params
            .param_mut("project.w")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng());
        let mut g = Graph::recording();
        let xv = g.input(x.clone());
        let y = b.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn expansion_six_of_eight_is_48() {
        assert_eq!(BlockSpec::mbconv(8, 8, 1, 3, 6).hidden_width(), 48);
    }

    #[test]
    fn four_candidates_have_distinct_counts() {
        let (cin, cout) = (8, 12);
        let mut counts = Vec::new();
        for k in [3, 5] {
            for e in [3, 6] {
                let b = BlockInstance::build(&BlockSpec::mbconv(cin, cout, 2, k, e), &mut rng())
                    .unwrap();
                let h = cin * e;
                let expected = (cin * h + 2 * h) + (h * k * k + 2 * h) + (h * cout + 2 * cout);
                assert_eq!(b.param_count(), expected, "k={k} e={e}");
                counts.push(expected);
            }
        }
        counts.sort();
        counts.dedup();
        assert_eq!(counts.len(), 4);
    }

    #[test]
    fn no_skip_when_shapes_change() {
        let b = BlockInstance::build(&BlockSpec::mbconv(8, 12, 2, 3, 3), &mut rng()).unwrap();
        let mut g = Graph::frozen();
        let x = g.input(Tensor::randn(&[1, 8, 7, 7], 1.0, &mut rng()));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 12, 4, 4]);
    }

    #[test]
    fn bad_kernel_rejected() {
        assert!(BlockInstance::build(&BlockSpec::mbconv(8, 8, 1, 4, 3), &mut rng()).is_err());
        assert!(BlockInstance::build(&BlockSpec::mbconv(8, 8, 1, 3, 4), &mut rng()).is_err());
    }
}
