//! Minimal reverse-mode differentiable tensor engine in double precision.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod store;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind};
pub use store::{BnUpdate, ParameterStore, StoreId};
pub use tape::{forward_primitive, Attrs, Gradients, Graph, Mode, Primitive, PrimitiveKind, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Row-wise L2 normalization of a `[batch, dim]` tensor; all-zero rows stay zero.
pub fn l2_normalize(v: &Tensor, eps: f64) -> Result<Tensor> {
    if v.shape().len() != 2 {
        return Err(Error::shape(
            "l2-normalize",
            format!("expected [batch, dim], got {:?}", v.shape()),
        ));
    }
    let dim = v.shape()[1];
    let mut out = v.data().to_vec();
    for row in out.chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(v.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normalize_three_four_five() {
        let v = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize(&v, 1e-12).unwrap();
        assert!((n.data()[0] - 0.6).abs() < 1e-15);
        assert!((n.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(&n.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn normalize_keeps_unit_rows() {
        let v = Tensor::new(vec![1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(l2_normalize(&v, 1e-12).unwrap(), v);
    }

    #[test]
    fn normalize_random_rows_have_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let v = Tensor::randn(&[5, 9], 3.0, &mut rng);
        let n = l2_normalize(&v, 1e-12).unwrap();
        for r in 0..5 {
            let norm = n.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }
}
