use rand::Rng;

use super::layers::{batch_norm, init_bn, init_conv};
use super::{BlockInstance, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Channel widths of the size search space.
pub const WIDTH_SET: [usize; 8] = [8, 16, 24, 32, 40, 48, 56, 64];

/// Max-width 3×3 conv → bn → relu cell whose narrower variants use the
/// leading weight slice and their own normalization statistics.
pub fn build_nats_cell<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<BlockInstance> {
    if spec.kind != BlockKind::NatsCell {
        return Err(Error::BlockSpec(format!(
            "expected nats-cell, got {:?}",
            spec.kind
        )));
    }
    if spec.widths.is_empty() || spec.widths.iter().any(|&w| w == 0 || w > spec.out_channels) {
        return Err(Error::BlockSpec(format!(
            "width set {:?} must be nonempty and within 1..={}",
            spec.widths, spec.out_channels
        )));
    }
    let mut params = ParameterStore::new();
    init_conv(
        &mut params,
        "conv",
        spec.out_channels,
        spec.in_channels,
        3,
        rng,
    );
    for &w in &spec.widths {
        init_bn(&mut params, &bn_name(w), w);
    }
    Ok(BlockInstance {
        spec: spec.clone(),
        params,
        shortcut: None,
        token_cap: super::DEFAULT_TOKEN_CAP,
    })
}

pub fn bn_name(width: usize) -> String {
    format!("bn.w{width}")
}

/// Forward at output `width`; the input's channel count selects the input slice.
pub fn slimmable_forward(
    block: &BlockInstance,
    g: &mut Graph,
    width: usize,
    x: Var,
    stride: usize,
) -> Result<Var> {
    slimmable_forward_with(&block.spec, &block.params, g, width, x, stride)
}

pub fn slimmable_forward_with(
    spec: &BlockSpec,
    params: &ParameterStore,
    g: &mut Graph,
    width: usize,
    x: Var,
    stride: usize,
) -> Result<Var> {
    if !spec.widths.contains(&width) {
        return Err(Error::Width {
            width,
            set: spec.widths.clone(),
        });
    }
    let cin = g.shape(x)[1];
    if cin > spec.in_channels {
        return Err(Error::shape(
            "slimmable",
            format!(
                "input has {cin} channels, layer max is {}",
                spec.in_channels
            ),
        ));
    }
    let w = g.param(params, "conv.w")?;
    let w = if width == spec.out_channels && cin == spec.in_channels {
        w
    } else {
        g.slice_leading(w, vec![width, cin, 3, 3])?
    };
    let y = g.conv2d(x, w, stride)?;
    let y = batch_norm(g, params, &bn_name(width), y)?;
    g.relu(y)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::substrate::Tensor;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn width_set_is_eight_multiples() {
        assert_eq!(
            WIDTH_SET.to_vec(),
            (1..=8).map(|i| 8 * i).collect::<Vec<_>>()
        );
    }

    #[test]
    fn full_width_equals_plain_forward() {
        let b = BlockInstance::build(&BlockSpec::nats_cell(16, &WIDTH_SET, 1), &mut rng()).unwrap();
        let x = Tensor::randn(&[2, 16, 5, 5], 1.0, &mut rng());
        let mut g1 = Graph::recording();
        let x1 = g1.input(x.clone());
        let y1 = b.forward(&mut g1, x1).unwrap();
        let mut g2 = Graph::recording();
        let x2 = g2.input(x);
        let y2 = slimmable_forward(&b, &mut g2, 64, x2, 1).unwrap();
        assert_eq!(g1.value(y1), g2.value(y2));
    }

    #[test]
    fn narrow_width_equals_sliced_standalone_layer() {
        let b = BlockInstance::build(&BlockSpec::nats_cell(64, &WIDTH_SET, 2), &mut rng()).unwrap();
        let cin = 24;
        let mut small =
            BlockInstance::build(&BlockSpec::nats_cell(cin, &[8], 2), &mut rng()).unwrap();
        let full = b.params.param("conv.w").unwrap();
        let mut sliced = Vec::new();
        for o in 0..8 {
            for i in 0..cin {
                let at = (o * 64 + i) * 9;
                sliced.extend_from_slice(&full.data()[at..at + 9]);
            }
        }
        small
            .params
            .insert("conv.w", Tensor::new(vec![8, cin, 3, 3], sliced).unwrap());
        for suffix in ["gamma", "beta"] {
            let t = b.params.param(&format!("bn.w8.{suffix}")).unwrap().clone();
            small.params.insert(format!("bn.w8.{suffix}"), t);
        }
        let x = Tensor::randn(&[3, cin, 6, 6], 1.0, &mut rng());
        for mode in [
            crate::substrate::Mode::Recording,
            crate::substrate::Mode::Frozen,
        ] {
            let mut g1 = Graph::new(mode);
            let x1 = g1.input(x.clone());
            let y1 = slimmable_forward(&b, &mut g1, 8, x1, 2).unwrap();
            let mut g2 = Graph::new(mode);
            let x2 = g2.input(x.clone());
            let y2 = small.forward(&mut g2, x2).unwrap();
            assert_eq!(g1.value(y1), g2.value(y2));
            assert_eq!(g1.shape(y1), &[3, 8, 3, 3]);
        }
    }

    #[test]
    fn widths_keep_separate_statistics() {
        let b = BlockInstance::build(&BlockSpec::nats_cell(16, &WIDTH_SET, 1), &mut rng()).unwrap();
        for w in WIDTH_SET {
            assert_eq!(
                b.params.buffer(&format!("bn.w{w}.mean")).unwrap().numel(),
                w
            );
        }
    }

    #[test]
    fn width_outside_set_rejected() {
        let b = BlockInstance::build(&BlockSpec::nats_cell(16, &WIDTH_SET, 1), &mut rng()).unwrap();
        let mut g = Graph::frozen();
        let x = g.input(Tensor::zeros(&[1, 16, 4, 4]));
        assert!(matches!(
            slimmable_forward(&b, &mut g, 12, x, 1),
            Err(Error::Width { width: 12, .. })
        ));
    }
}
