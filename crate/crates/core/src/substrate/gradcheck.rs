use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::store::ParameterStore;
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// `max |analytic − numeric| / max(max |analytic|, max |numeric|)` over the tensor.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Compares analytic gradients of every parameter in `store` against central
/// finite differences. The block output is reduced to a scalar by a fixed
/// random projection so every output element contributes.
pub fn gradcheck<F>(
    build: F,
    store: &ParameterStore,
    input: &Tensor,
    tolerance: f64,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &ParameterStore, Var) -> Result<Var>,
{
    let mut probe_graph = Graph::recording();
    let x = probe_graph.input(input.clone());
    let out = build(&mut probe_graph, store, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let projection = Tensor::randn(probe_graph.shape(out), 1.0, &mut rng);

    let scalar = |g: &mut Graph, store: &ParameterStore| -> Result<Var> {
        let x = g.input(input.clone());
        let out = build(g, store, x)?;
        let r = g.input(projection.clone());
        let prod = g.mul(out, r)?;
        g.sum(prod)
    };

    let mut g = Graph::recording();
    let loss = scalar(&mut g, store)?;
    let grads = g.backward(loss)?;

    let mut probe = store.clone();
    let names: Vec<String> = store.params().map(|(n, _)| n.clone()).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let n = store.param(&name)?.numel();
        let analytic = grads
            .get(store, &name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.param(&name)?.data()[i];
            probe.param_mut(&name)?.data_mut()[i] = orig + FD_STEP;
            let mut gp = Graph::recording();
            let lp = scalar(&mut gp, &probe)?;
            let plus = gp.value(lp).item();
            probe.param_mut(&name)?.data_mut()[i] = orig - FD_STEP;
            let mut gm = Graph::recording();
            let lm = scalar(&mut gm, &probe)?;
            let minus = gm.value(lm).item();
            probe.param_mut(&name)?.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
            .max(1e-12);
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        params.push(ParamCheck {
            name,
            max_rel_error: diff / scale,
        });
    }
    Ok(GradcheckReport { params, tolerance })
}
