//! Minimal reverse-mode differentiation: dense matrices, a recording
//! tape with the primitives the model needs, Xavier init and Adam.

mod gradcheck;
mod mat;
mod optim;
mod params;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckReport, Probe, FD_STEP};
pub use mat::{gemm, Mat};
pub use optim::{xavier_init, xavier_uniform, Adam, AdamConfig};
pub use params::{ParamId, Parameter, ParameterStore};
pub use tape::{bce, sigmoid, softmax_in_place, Gradients, SparseRows, Tape, Var, PROB_CLAMP};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loss_grad(build: impl Fn(&mut Tape, Var) -> Var, x: &Mat) -> Mat {
        let mut store = ParameterStore::new();
        let id = store.add("x", x.clone());
        let mut t = Tape::new();
        let v = t.param(&store, id).unwrap();
        let l = build(&mut t, v);
        let g = t.backward(l).unwrap();
        t.accumulate_param_grads(&g, &mut store);
        store.grad(id).clone()
    }

    proptest! {
        #[test]
        fn backward_is_linear(vals in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let x = Mat::from_vec(3, 2, vals);
            let l1 = |t: &mut Tape, v: Var| t.sq_norm(v).unwrap();
            let l2 = |t: &mut Tape, v: Var| {
                let s = t.sigmoid(v).unwrap();
                t.sq_norm(s).unwrap()
            };
            let sum = |t: &mut Tape, v: Var| {
                let a = l1(t, v);
                let b = l2(t, v);
                t.add(a, b).unwrap()
            };
            let g1 = loss_grad(l1, &x);
            let g2 = loss_grad(l2, &x);
            let gs = loss_grad(sum, &x);
            for i in 0..6 {
                let want = g1.as_slice()[i] + g2.as_slice()[i];
                prop_assert!((gs.as_slice()[i] - want).abs() < 1e-12);
            }
        }

        #[test]
        fn segment_mean_ignores_order(vals in proptest::collection::vec(-1.0f64..1.0, 8), perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let x = Mat::from_vec(4, 2, vals);
            let mut group = vec![0usize, 1, 2, 3];
            let mut t = Tape::new();
            let v = t.constant(x).unwrap();
            let a = t.segment_mean(v, &[group.clone()]).unwrap();
            group.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let b = t.segment_mean(v, &[group]).unwrap();
            for (p, q) in t.value(a).as_slice().iter().zip(t.value(b).as_slice()) {
                prop_assert!((p - q).abs() < 1e-15);
            }
        }
    }
}
