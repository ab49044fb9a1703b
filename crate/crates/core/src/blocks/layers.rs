//! Parameter initialization and the small layer helpers every block shares.

use rand::Rng;

use crate::error::Result;
use crate::substrate::{BnUpdate, Graph, ParameterStore, Tensor, Var};

/// He-normal convolution weight `[out, in, k, k]`.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[out, inp, k, k], std, rng),
    );
}

/// Depthwise weight `[channels, 1, k, k]`.
pub fn init_depthwise<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    channels: usize,
    k: usize,
    rng: &mut R,
) {
    let std = (2.0 / (k * k) as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::randn(&[channels, 1, k, k], std, rng),
    );
}

pub fn init_bn(store: &mut ParameterStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.mean"), Tensor::zeros(&[channels]));
    store.insert_buffer(format!("{name}.var"), Tensor::full(&[channels], 1.0));
}

/// Dense layer: weight `[in, out]`, bias `[out]`.
pub fn init_dense<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut R,
) {
    let bound = (1.0 / inp as f64).sqrt();
    store.insert(
        format!("{name}.w"),
        Tensor::uniform(&[inp, out], -bound, bound, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[out]));
}

pub fn conv(
    g: &mut Graph,
    store: &ParameterStore,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    g.conv2d(x, w, stride)
}

pub fn depthwise(
    g: &mut Graph,
    store: &ParameterStore,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    g.depthwise(x, w, stride)
}

/// Batch normalization honouring the graph mode: batch statistics (queued
/// as a running-average update) or frozen running statistics.
pub fn batch_norm(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    if g.mode().batch_stats() {
        let (y, mean, var) = g.batch_norm_train(x, gamma, beta)?;
        g.push_bn_update(BnUpdate {
            store: store.id(),
            name: name.to_string(),
            mean,
            var,
        });
        Ok(y)
    } else {
        let rm = g.input(store.buffer(&format!("{name}.mean"))?.clone());
        let rv = g.input(store.buffer(&format!("{name}.var"))?.clone());
        g.apply(
            crate::substrate::Primitive::BatchNormEval {
                eps: crate::substrate::tape::BN_EPS,
            },
            &[x, gamma, beta, rm, rv],
        )
    }
}

pub fn dense(g: &mut Graph, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// conv → bn, optionally followed by relu.
pub fn conv_bn(
    g: &mut Graph,
    store: &ParameterStore,
    name: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var> {
    let y = conv(g, store, name, x, stride)?;
    let y = batch_norm(g, store, &format!("{name}.bn"), y)?;
    if relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}

pub fn init_conv_bn<R: Rng + ?Sized>(
    store: &mut ParameterStore,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) {
    init_conv(store, name, out, inp, k, rng);
    init_bn(store, &format!("{name}.bn"), out);
}
