#![allow(dead_code)]

pub mod textbook;

use boss_core::blocks::{self, BlockInstance, BlockSpec, WIDTH_SET};
use boss_core::substrate::tape::BN_EPS;
use boss_core::substrate::{
    gradcheck, GradcheckReport, Graph, ParameterStore, Primitive, Tensor, Var,
};
use boss_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
pub const ATTENTION_TOL: f64 = 1e-3;

pub struct Case {
    pub name: String,
    pub report: GradcheckReport,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store(entries: &[(&str, &[usize])], seed: u64) -> ParameterStore {
    let mut r = rng(seed);
    let mut s = ParameterStore::new();
    for (name, shape) in entries {
        s.insert(*name, Tensor::randn(shape, 1.0, &mut r));
    }
    s
}

fn run<F>(out: &mut Vec<Case>, name: &str, tol: f64, s: &ParameterStore, input: &Tensor, build: F)
where
    F: Fn(&mut Graph, &ParameterStore, Var) -> Result<Var>,
{
    let report = gradcheck(build, s, input, tol).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push(Case {
        name: name.to_string(),
        report,
    });
}

/// Gradient checks over every primitive the tape supports.
pub fn primitive_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let dummy = Tensor::zeros(&[1]);

    let s = store(&[("a", &[2, 3]), ("b", &[3, 4])], 1);
    run(&mut out, "matmul", TOL, &s, &dummy, |g, s, _| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        g.matmul(a, b)
    });

    let s = store(&[("a", &[2, 4, 3]), ("b", &[2, 4, 5])], 2);
    run(&mut out, "batch-matmul", TOL, &s, &dummy, |g, s, _| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let ab = g.bmm(a, b, true, false)?;
        let c = g.param(s, "b")?;
        g.bmm(ab, c, false, true)
    });

    for stride in [1, 2] {
        let s = store(&[("w", &[3, 2, 3, 3])], 3);
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng(4));
        run(
            &mut out,
            &format!("conv2d-s{stride}"),
            TOL,
            &s,
            &x,
            move |g, s, x| {
                let w = g.param(s, "w")?;
                g.conv2d(x, w, stride)
            },
        );
        let s = store(&[("w", &[4, 1, 3, 3]), ("x", &[2, 4, 8, 8])], 5);
        run(
            &mut out,
            &format!("depthwise-conv2d-s{stride}"),
            TOL,
            &s,
            &dummy,
            move |g, s, _| {
                let w = g.param(s, "w")?;
                let x = g.param(s, "x")?;
                g.depthwise(x, w, stride)
            },
        );
    }

    let s = store(
        &[("a", &[2, 3, 2, 2]), ("b", &[2, 3, 2, 2]), ("bias", &[3])],
        6,
    );
    run(&mut out, "add-sub-mul", TOL, &s, &dummy, |g, s, _| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        let bias = g.param(s, "bias")?;
        let sum = g.add(a, bias)?;
        let diff = g.sub(sum, b)?;
        g.mul(diff, a)
    });

    let s = store(&[("x", &[3, 5])], 7);
    run(&mut out, "relu-scale", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        let r = g.relu(x)?;
        g.scale(r, -1.5)
    });

    let s = store(&[("x", &[4, 3, 2, 2]), ("gamma", &[3]), ("beta", &[3])], 8);
    run(&mut out, "batchnorm-train", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        Ok(g.batch_norm_train(x, gamma, beta)?.0)
    });

    run(&mut out, "batchnorm-eval", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        let gamma = g.param(s, "gamma")?;
        let beta = g.param(s, "beta")?;
        let mean = g.input(Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
        let var = g.input(Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap());
        g.apply(
            Primitive::BatchNormEval { eps: BN_EPS },
            &[x, gamma, beta, mean, var],
        )
    });

    let s = store(&[("x", &[2, 3, 6])], 9);
    run(&mut out, "softmax-lastdim", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        g.softmax(x)
    });

    let s = store(&[("x", &[2, 3, 4, 4])], 10);
    run(
        &mut out,
        "global-avg-pool-reshape",
        TOL,
        &s,
        &dummy,
        |g, s, _| {
            let x = g.param(s, "x")?;
            let p = g.global_avg_pool(x)?;
            g.reshape(p, vec![2, 3])
        },
    );

    let s = store(&[("a", &[2, 2, 3, 3]), ("b", &[2, 3, 3, 3])], 11);
    run(&mut out, "concat-channels", TOL, &s, &dummy, |g, s, _| {
        let a = g.param(s, "a")?;
        let b = g.param(s, "b")?;
        g.concat_channels(&[a, b])
    });

    let s = store(&[("w", &[6, 5, 3, 3])], 12);
    run(&mut out, "slice-leading", TOL, &s, &dummy, |g, s, _| {
        let w = g.param(s, "w")?;
        g.slice_leading(w, vec![4, 3, 3, 3])
    });

    let s = store(&[("x", &[3, 5])], 13);
    run(&mut out, "l2-normalize", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        g.l2_normalize(x)
    });

    run(&mut out, "sum-mean", TOL, &s, &dummy, |g, s, _| {
        let x = g.param(s, "x")?;
        let sq = g.mul(x, x)?;
        let a = g.sum(sq)?;
        let b = g.mean(x)?;
        g.add(a, b)
    });

    run(
        &mut out,
        "softmax-cross-entropy",
        TOL,
        &s,
        &dummy,
        |g, s, _| {
            let x = g.param(s, "x")?;
            g.cross_entropy(x, vec![0, 4, 2])
        },
    );

    out
}

/// Small networks named in the substrate contract.
pub fn network_cases() -> Vec<Case> {
    let mut out = Vec::new();
    let mut r = rng(20);

    let mut s = ParameterStore::new();
    blocks::init_dense(&mut s, "fc", 4, 3, &mut r);
    s.insert("fc.b", Tensor::randn(&[3], 0.5, &mut r));
    let x = Tensor::randn(&[2, 4], 1.0, &mut r);
    run(&mut out, "dense-4x3", TOL, &s, &x, |g, s, x| {
        blocks::dense(g, s, "fc", x)
    });

    let mut s = ParameterStore::new();
    blocks::init_conv(&mut s, "conv", 4, 3, 3, &mut r);
    blocks::init_dense(&mut s, "fc", 4, 5, &mut r);
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r);
    run(&mut out, "conv-relu-pool-dense", TOL, &s, &x, |g, s, x| {
        let h = blocks::conv(g, s, "conv", x, 1)?;
        let h = g.relu(h)?;
        let h = g.global_avg_pool(h)?;
        let h = g.reshape(h, vec![2, 4])?;
        blocks::dense(g, s, "fc", h)
    });

    let mut s = ParameterStore::new();
    for n in ["q", "k", "v"] {
        blocks::init_conv(&mut s, n, 4, 4, 1, &mut r);
    }
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r);
    run(
        &mut out,
        "self-attention-dh4-16tok",
        ATTENTION_TOL,
        &s,
        &x,
        |g, s, x| blocks::res_att::multi_head_attention(g, s, x, 1, 256),
    );
    out
}

fn block_case(
    out: &mut Vec<Case>,
    name: &str,
    tol: f64,
    spec: BlockSpec,
    input_shape: &[usize],
    seed: u64,
) {
    let mut r = rng(seed);
    let b = BlockInstance::build(&spec, &mut r).unwrap();
    let x = Tensor::randn(input_shape, 1.0, &mut r);
    let bm = b.clone();
    run(out, name, tol, &b.params, &x, move |g, s, x| {
        bm.forward_with(g, s, bm.shortcut.as_ref(), x, bm.spec.stride)
    });
    if let Some(sc) = &b.shortcut {
        let bs = b.clone();
        let main = b.params.clone();
        run(
            out,
            &format!("{name}/shortcut"),
            tol,
            sc,
            &x,
            move |g, s, x| bs.forward_with(g, &main, Some(s), x, bs.spec.stride),
        );
    }
}

/// Every candidate block kind, at both strides.
pub fn block_cases() -> Vec<Case> {
    let mut out = Vec::new();
    block_case(
        &mut out,
        "res-conv-s1",
        TOL,
        BlockSpec::res_conv(4, 4, 1),
        &[2, 4, 5, 5],
        30,
    );
    block_case(
        &mut out,
        "res-conv-s2",
        TOL,
        BlockSpec::res_conv(4, 8, 2),
        &[2, 4, 6, 6],
        31,
    );
    block_case(
        &mut out,
        "res-att-s1",
        ATTENTION_TOL,
        BlockSpec::res_att(8, 8, 1, 4),
        &[2, 8, 4, 4],
        32,
    );
    block_case(
        &mut out,
        "res-att-s2",
        ATTENTION_TOL,
        BlockSpec::res_att(4, 8, 2, 4),
        &[2, 4, 6, 6],
        33,
    );
    block_case(
        &mut out,
        "mb-conv-k3e3-s1",
        TOL,
        BlockSpec::mbconv(4, 4, 1, 3, 3),
        &[2, 4, 5, 5],
        34,
    );
    block_case(
        &mut out,
        "mb-conv-k5e6-s2",
        TOL,
        BlockSpec::mbconv(4, 6, 2, 5, 6),
        &[2, 4, 6, 6],
        35,
    );
    block_case(
        &mut out,
        "nats-cell-s2",
        TOL,
        BlockSpec::nats_cell(4, &[8], 2),
        &[2, 4, 6, 6],
        36,
    );

    let mut r = rng(37);
    let b = BlockInstance::build(&BlockSpec::nats_cell(6, &WIDTH_SET[..2], 1), &mut r).unwrap();
    let x = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut r);
    let spec = b.spec.clone();
    run(
        &mut out,
        "nats-cell-slim-w8",
        TOL,
        &b.params,
        &x,
        move |g, s, x| blocks::slimmable_forward_with(&spec, s, g, 8, x, 1),
    );
    out
}

pub fn all_cases() -> Vec<Case> {
    let mut v = primitive_cases();
    v.extend(network_cases());
    v.extend(block_cases());
    v
}
