//! Dense `f64` arrays, a reverse-mode tape, and the transformer pieces
//! built on them.

mod array;
pub mod kernels;
mod param;
mod tape;
pub mod transformer;

pub use array::Array;
pub use kernels::{AttentionMask, AttnLayout, MaskKind};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Precision, Tape, Var};
pub use transformer::{DecodeCache, TransformerStack};

#[cfg(test)]
mod gradcheck {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` w.r.t. every element of `x`.
    fn numeric_grad(x: &Array, f: &dyn Fn(&Array) -> f64, h: f64) -> Array {
        let mut out = Array::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Array, b: &Array) -> f64 {
        let num = a.sub(b).unwrap().sq_norm().sqrt();
        let den = a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(1e-12);
        num / den
    }

    /// Checks the gradient of a scalar function of several inputs built on
    /// a fresh tape.
    fn check(inputs: &[Array], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        check_with(&ParamStore::new(), inputs, build)
    }

    fn check_with(store: &ParamStore, inputs: &[Array], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Array]| {
            let mut tape = Tape::new(store);
            let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone()).unwrap()).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).data()[0]
        };
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (i, x) in inputs.iter().enumerate() {
            let f = |xi: &Array| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                eval(&xs)
            };
            let num = numeric_grad(x, &f, 1e-5);
            let ana = grads.wrt(vars[i]).cloned().unwrap_or_else(|| Array::zeros(x.shape()));
            let e = rel_err(&ana, &num);
            assert!(e < 1e-5, "input {i}: relative error {e}");
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Projects to a scalar with fixed random weights so every output
    /// element contributes.
    fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let shape = tape.value(x).shape().to_vec();
        let w = Array::randn(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
        let w = tape.constant(w).unwrap();
        let p = tape.mul(x, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.variable(Array::randn(&[3, 4], &mut rng())).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Array::full(&[3, 4], 1.0));
    }

    #[test]
    fn constant_loss_zero_grad() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array::randn(&[2, 2], &mut rng())).unwrap();
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let c = tape.constant(Array::scalar(3.0)).unwrap();
        let z = tape.scale(w, 0.0).unwrap();
        let z = tape.sum(z).unwrap();
        let loss = tape.add(z, c).unwrap();
        let g = tape.backward(loss).unwrap();
        store.accumulate(&g).unwrap();
        assert!(store.get(id).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.variable(Array::zeros(&[2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn non_finite_values_rejected() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.variable(Array::full(&[2], 1e300)).unwrap();
        assert!(matches!(
            tape.mul(x, x),
            Err(crate::Error::NonFinite { op: "mul" })
        ));
    }

    #[test]
    fn matmul_squared_norm() {
        let mut r = rng();
        let a = Array::randn(&[3, 4], &mut r);
        let b = Array::randn(&[4, 2], &mut r);
        check(&[a, b], |t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            let sq = t.mul(c, c).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn elementwise_ops() {
        let mut r = rng();
        let a = Array::randn(&[3, 4], &mut r);
        let b = Array::randn(&[3, 4], &mut r);
        let row = Array::randn(&[4], &mut r);
        check(&[a, b, row], |t, v| {
            let x = t.add(v[0], v[1]).unwrap();
            let y = t.sub(x, v[1]).unwrap();
            let y = t.mul(y, v[1]).unwrap();
            let y = t.scale(y, 0.7).unwrap();
            let y = t.add_row(y, v[2]).unwrap();
            let y = t.scale_rows(y, vec![1.0, -2.0, 0.5]).unwrap();
            let y = t.silu(y).unwrap();
            let y = t.mean(y).unwrap();
            let z = project(t, x, 5);
            t.add(y, z).unwrap()
        });
    }

    #[test]
    fn rmsnorm_grad() {
        let mut r = rng();
        let x = Array::randn(&[3, 6], &mut r);
        let g = Array::randn(&[6], &mut r);
        check(&[x, g], |t, v| {
            let y = t.rmsnorm(v[0], v[1]).unwrap();
            project(t, y, 1)
        });
    }

    #[test]
    fn rope_grad() {
        let x = Array::randn(&[4, 8], &mut rng());
        check(&[x], |t, v| {
            let y = t.rope(v[0], vec![0, 1, 5, 9], 4).unwrap();
            project(t, y, 2)
        });
    }

    #[test]
    fn attention_grad() {
        let mut r = rng();
        let q = Array::randn(&[6, 4], &mut r);
        let k = Array::randn(&[6, 4], &mut r);
        let v = Array::randn(&[6, 4], &mut r);
        for mask in [AttentionMask::causal(3), AttentionMask::bidirectional(3)] {
            for heads in [1, 2] {
                check(&[q.clone(), k.clone(), v.clone()], |t, x| {
                    let layout = AttnLayout::new(mask, heads)
                        .with_key_valid(vec![true, true, true, true, false, true]);
                    let y = t.attention(x[0], x[1], x[2], layout).unwrap();
                    project(t, y, 3)
                });
            }
        }
    }

    #[test]
    fn gather_grad() {
        let mut r = rng();
        let a = Array::randn(&[2, 3], &mut r);
        let b = Array::randn(&[3, 3], &mut r);
        check(&[a, b], |t, v| {
            let y = t
                .gather_rows(&[v[0], v[1]], vec![(1, 2), (0, 0), (1, 2), (0, 1)])
                .unwrap();
            project(t, y, 4)
        });
    }

    #[test]
    fn losses_grad() {
        let mut r = rng();
        let p = Array::randn(&[3, 2], &mut r);
        let target = Array::randn(&[3, 2], &mut r);
        let logits = Array::randn(&[4, 1], &mut r);
        check(&[p, logits], |t, v| {
            let a = t.mse(v[0], target.clone(), Some(vec![1.0, 0.0, 2.0])).unwrap();
            let b = t
                .bce_with_logits(v[1], vec![0.0, 1.0, 1.0, 0.0], vec![1.0, 1.0, 0.5, 1.0])
                .unwrap();
            t.add(a, b).unwrap()
        });
    }

    #[test]
    fn transformer_stack_grad() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let stack = TransformerStack::init(&mut store, "s", 2, 4, 6, 2, &mut r).unwrap();
        let x = Array::randn(&[6, 4], &mut r);
        for mask in [AttentionMask::causal(3), AttentionMask::bidirectional(3)] {
            check_with(&store, &[x.clone()], |t, v| {
                let y = stack.forward(t, v[0], mask, None).unwrap();
                project(t, y, 6)
            });
        }
        // Parameter gradients through the stack.
        let loss_at = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let xv = t.constant(x.clone()).unwrap();
            let y = stack.forward(&mut t, xv, AttentionMask::causal(3), None).unwrap();
            let y = project(&mut t, y, 6);
            t.value(y).data()[0]
        };
        let mut t = Tape::new(&store);
        let xv = t.constant(x.clone()).unwrap();
        let y = stack.forward(&mut t, xv, AttentionMask::causal(3), None).unwrap();
        let y = project(&mut t, y, 6);
        let g = t.backward(y).unwrap();
        let mut with_grads = store.clone();
        with_grads.accumulate(&g).unwrap();
        for id in store.ids() {
            let base = store.value(id).clone();
            let num = numeric_grad(
                &base,
                &|w: &Array| {
                    let mut s = store.clone();
                    s.get_mut(id).value = w.clone();
                    loss_at(&s)
                },
                1e-5,
            );
            let e = rel_err(&with_grads.get(id).grad, &num);
            assert!(e < 1e-4, "{}: {e}", store.name(id));
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let stack = TransformerStack::init(&mut store, "lm", 3, 8, 16, 2, &mut r).unwrap();
        let x = Array::randn(&[7, 8], &mut r);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(x.clone()).unwrap();
        let full = stack.forward(&mut tape, xv, AttentionMask::causal(7), None).unwrap();
        let full = tape.value(full).clone();

        let mut cache = stack.new_cache();
        let pre = stack.prefill(&store, &mut cache, &x.slice_rows(0, 3)).unwrap();
        assert!(pre.max_abs_diff(&full.slice_rows(0, 3)) < 1e-10);
        for i in 3..7 {
            let row = stack.decode_step(&store, &mut cache, &x.slice_rows(i, i + 1)).unwrap();
            assert!(row.max_abs_diff(&full.slice_rows(i, i + 1)) < 1e-10);
        }
        assert_eq!(cache.len(), 7);
    }

    #[test]
    fn f32_mode_rounds_values() {
        let store = ParamStore::new();
        let mut tape = Tape::with_precision(&store, Precision::F32);
        let x = tape.variable(Array::scalar(0.1)).unwrap();
        assert_eq!(tape.value(x).data()[0], 0.1f32 as f64);
    }
}
