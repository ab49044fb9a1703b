use rand::Rng;

use super::layers::{
    batch_norm, conv, conv_bn, depthwise, init_bn, init_conv, init_conv_bn, init_depthwise,
};
use super::{BlockInstance, BlockKind, BlockSpec};
use crate::error::{Error, Result};
use crate::substrate::{Graph, ParameterStore, Var};

/// Lightweight transformer block. A depthwise 3×3 conv sits between the
/// input projection and self-attention; it acts as implicit position
/// encoding and performs any downsampling.
pub fn build_res_att_mini<R: Rng + ?Sized>(spec: &BlockSpec, rng: &mut R) -> Result<BlockInstance> {
    if spec.kind != BlockKind::ResAtt {
        return Err(Error::BlockSpec(format!(
            "expected res-att, got {:?}",
            spec.kind
        )));
    }
    if spec.heads == 0 || !spec.out_channels.is_multiple_of(spec.heads) {
        return Err(Error::BlockSpec(format!(
            "res-att needs out-channels ({}) divisible by heads ({})",
            spec.out_channels, spec.heads
        )));
    }
    let d = spec.out_channels;
    let mut params = ParameterStore::new();
    init_conv_bn(&mut params, "in_proj", d, spec.in_channels, 1, rng);
    init_depthwise(&mut params, "pos", d, 3, rng);
    init_bn(&mut params, "pos.bn", d);
    for name in ["q", "k", "v"] {
        init_conv(&mut params, name, d, d, 1, rng);
    }
    init_conv_bn(&mut params, "out_proj", spec.out_channels, d, 1, rng);
    Ok(BlockInstance::with_projection_shortcut(
        spec.clone(),
        params,
        rng,
    ))
}

/// Scaled dot-product attention probabilities `[batch·heads, queries, keys]`
/// over the flattened spatial tokens of `x`.
pub fn attention_weights(
    g: &mut Graph,
    params: &ParameterStore,
    x: Var,
    heads: usize,
    token_cap: usize,
) -> Result<(Var, Var)> {
    let [n, c, h, w] = match g.shape(x) {
        &[n, c, h, w] => [n, c, h, w],
        s => {
            return Err(Error::shape(
                "res-att",
                format!("expected 4-D input, got {s:?}"),
            ))
        }
    };
    let tokens = h * w;
    if tokens > token_cap {
        return Err(Error::TokenCap {
            tokens,
            cap: token_cap,
        });
    }
    let dh = c / heads;
    let q = conv(g, params, "q", x, 1)?;
    let k = conv(g, params, "k", x, 1)?;
    let v = conv(g, params, "v", x, 1)?;
    let q = g.reshape(q, vec![n * heads, dh, tokens])?;
    let k = g.reshape(k, vec![n * heads, dh, tokens])?;
    let v = g.reshape(v, vec![n * heads, dh, tokens])?;
    let logits = g.bmm(q, k, true, false)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
    Ok((g.softmax(logits)?, v))
}

/// Multi-head self-attention over spatial tokens; output has the input shape.
pub fn multi_head_attention(
    g: &mut Graph,
    params: &ParameterStore,
    x: Var,
    heads: usize,
    token_cap: usize,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (attn, v) = attention_weights(g, params, x, heads, token_cap)?;
    // out[d, q] = Σ_k v[d, k] · attn[q, k]
    let out = g.bmm(v, attn, false, true)?;
    g.reshape(out, shape)
}

pub(super) fn forward(
    block: &BlockInstance,
    p: &ParameterStore,
    sc: Option<&ParameterStore>,
    g: &mut Graph,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let h = conv_bn(g, p, "in_proj", x, 1, true)?;
    let h = depthwise(g, p, "pos", h, stride)?;
    let h = batch_norm(g, p, "pos.bn", h)?;
    let h = multi_head_attention(g, p, h, block.spec.heads, block.token_cap)?;
    let h = conv_bn(g, p, "out_proj", h, 1, false)?;
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
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let b = BlockInstance::build(&BlockSpec::res_att(8, 8, 1, 4), &mut rng()).unwrap();
        let mut g = Graph::recording();
        let x = g.input(Tensor::randn(&[2, 8, 4, 4], 1.0, &mut rng()));
        let (attn, _) = attention_weights(&mut g, &b.params, x, 4, 256).unwrap();
        let a = g.value(attn);
        assert_eq!(a.shape(), &[8, 16, 16]);
        for row in a.data().chunks(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stride_two_gives_sixteen_tokens() {
        let b = BlockInstance::build(&BlockSpec::res_att(8, 8, 2, 4), &mut rng()).unwrap();
        let mut g = Graph::recording();
        let x = g.input(Tensor::randn(&[2, 8, 8, 8], 1.0, &mut rng()));
        let y = b.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 8, 4, 4]);
    }

    #[test]
    fn uniform_attention_with_identity_values_averages_tokens() {
        let c = 8;
        let mut b = BlockInstance::build(&BlockSpec::res_att(c, c, 1, 4), &mut rng()).unwrap();
        b.params.param_mut("q.w").unwrap().data_mut().fill(0.0);
        let v = b.params.param_mut("v.w").unwrap().data_mut();
        v.fill(0.0);
        for i in 0..c {
            v[i * c + i] = 1.0;
        }
        let x = Tensor::randn(&[1, c, 3, 3], 1.0, &mut rng());
        let mut g = Graph::frozen();
        let xv = g.input(x.clone());
        let y = multi_head_attention(&mut g, &b.params, xv, 4, 256).unwrap();
        let out = g.value(y).data();
        for ch in 0..c {
            let plane = &x.data()[ch * 9..(ch + 1) * 9];
            let mean = plane.iter().sum::<f64>() / 9.0;
            for t in 0..9 {
                assert!((out[ch * 9 + t] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_cap_enforced() {
        let b = BlockInstance::build(&BlockSpec::res_att(4, 4, 1, 4), &mut rng()).unwrap();
        let mut g = Graph::frozen();
        let x = g.input(Tensor::zeros(&[1, 4, 17, 16]));
        assert!(matches!(
            b.forward(&mut g, x),
            Err(Error::TokenCap {
                tokens: 272,
                cap: 256
            })
        ));
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(BlockInstance::build(&BlockSpec::res_att(8, 6, 1, 4), &mut rng()).is_err());
    }
}
