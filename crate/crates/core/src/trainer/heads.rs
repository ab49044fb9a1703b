use rand::Rng;

use crate::blocks::{batch_norm, dense, init_bn, init_dense};
use crate::error::Result;
use crate::substrate::{Graph, ParameterStore, Var};

pub const PROJECTION_HIDDEN: usize = 64;
pub const LATENT_DIM: usize = 32;

/// dense(in → 64) → bn → relu → dense(64 → 32).
pub fn init_projection<R: Rng + ?Sized>(in_dim: usize, rng: &mut R) -> ParameterStore {
    mlp(in_dim, PROJECTION_HIDDEN, LATENT_DIM, rng)
}

/// dense(32 → 32) → bn → relu → dense(32 → 32).
pub fn init_prediction<R: Rng + ?Sized>(rng: &mut R) -> ParameterStore {
    mlp(LATENT_DIM, LATENT_DIM, LATENT_DIM, rng)
}

fn mlp<R: Rng + ?Sized>(inp: usize, hidden: usize, out: usize, rng: &mut R) -> ParameterStore {
    let mut s = ParameterStore::new();
    init_dense(&mut s, "fc1", inp, hidden, rng);
    init_bn(&mut s, "bn", hidden);
    init_dense(&mut s, "fc2", hidden, out, rng);
    s
}

pub fn mlp_forward(g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
    let h = dense(g, store, "fc1", x)?;
    let n = g.shape(h).to_vec();
    // batchnorm runs over [N, C, 1, 1]
    let h = g.reshape(h, vec![n[0], n[1], 1, 1])?;
    let h = batch_norm(g, store, "bn", h)?;
    let h = g.relu(h)?;
    let h = g.reshape(h, n)?;
    dense(g, store, "fc2", h)
}

/// Global-average-pools a feature map to `[N, dim]`, zero-padding channels.
pub fn pool_features(g: &mut Graph, features: Var, dim: usize) -> Result<Var> {
    let pooled = g.global_avg_pool(features)?;
    let pooled = g.pad_channels(pooled, dim)?;
    let n = g.shape(pooled)[0];
    g.reshape(pooled, vec![n, dim])
}
