//! Tensors, trainable parameters, reverse-mode gradients and the optimizer.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
pub(crate) mod kernels;
mod optim;
mod param;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::Adam;
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// LayerNorm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut s = ParamStore::new();
        let w = s.register("w", t2(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        let w2 = s.register("w2", t2(&[&[1.0], &[1.0]])).unwrap();
        let b2 = s.register("b2", Tensor::vector(vec![1.0])).unwrap();
        let mut g = Graph::new();
        let x = g.input(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let wv = g.param(&s, w);
        let y = g.linear(x, wv, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 1.0]);

        let x = g.input(t2(&[&[1.0, 2.0]]));
        let (wv, bv) = (g.param(&s, w2), g.param(&s, b2));
        let y = g.linear(x, wv, Some(bv)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let w = g.input(Tensor::zeros(&[4, 5]));
        let err = g.linear(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.input(t2(&[&[1.0, -1.0]]));
        let gam = g.input(Tensor::vector(vec![1.0, 1.0]));
        let bet = g.input(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gam, bet, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0]);

        let x = g.input(t2(&[&[5.0, 5.0, 5.0]]));
        let gam = g.input(Tensor::vector(vec![1.0; 3]));
        let bet = g.input(Tensor::vector(vec![0.5, -0.5, 2.0]));
        let y = g.layer_norm(x, gam, bet, LN_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5, 2.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.input(Tensor::vector(vec![1000.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn max_pool_examples_and_empty_group() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 0.0]).unwrap());
        let y = g.max_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);
        assert_eq!(g.argmax(y).unwrap(), &[1, 0]);

        let x = g.input(Tensor::filled(&[1, 4, 1], 2.0));
        let y = g.max_pool(x).unwrap();
        assert_eq!(g.argmax(y).unwrap(), &[0]);

        let x = g.input(Tensor::zeros(&[2, 0, 3]));
        assert!(matches!(g.max_pool(x), Err(Error::EmptyGroup(_))));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = g.input(Tensor::vector(vec![-1.0, -3.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-15);

        let x = g.input(t2(&[&[0.0, 1000.0, 0.0]]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);

        let x = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.cross_entropy(x, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn backward_outer_product_and_accumulation() {
        let mut s = ParamStore::new();
        let w = s.register("w", t2(&[&[0.5, -1.0, 2.0], &[1.5, 0.25, -0.75]])).unwrap();
        let unused = s.register("unused", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let xs = [[2.0, -3.0], [0.5, 4.0]];
        let build = |s: &ParamStore, g: &mut Graph| {
            let x = g.input(t2(&[&xs[0], &xs[1]]));
            let wv = g.param(s, w);
            let y = g.linear(x, wv, None).unwrap();
            g.sum(y)
        };
        let mut g = Graph::new();
        let loss = build(&s, &mut g);
        g.backward(loss, &mut s).unwrap();
        // d/dW_kj sum_ij (xW)_ij = sum_i x_ik
        let want = [2.5, 2.5, 2.5, 1.0, 1.0, 1.0];
        assert_eq!(s.get(w).grad.data(), &want);
        assert_eq!(s.get(unused).grad.data(), &[0.0, 0.0]);

        let mut g = Graph::new();
        let loss = build(&s, &mut g);
        g.backward(loss, &mut s).unwrap();
        let doubled: Vec<f64> = want.iter().map(|v| 2.0 * v).collect();
        assert_eq!(s.get(w).grad.data(), doubled.as_slice());
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut s = ParamStore::new();
        let w = s.register("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let v = g.param(&s, w);
        assert!(matches!(g.backward(v, &mut s), Err(Error::Contract(_))));
    }
}
