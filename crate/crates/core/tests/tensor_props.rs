use avatar_field::tensor::{finite_difference_check, Graph, ParamStore, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

#[test]
fn four_op_composite_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamStore::new();
    let w = params.insert("w", random(&mut rng, 3, 4), true);
    let b = params.insert("b", random(&mut rng, 1, 4), true);
    let x = random(&mut rng, 5, 3);
    let report = finite_difference_check::<_, TensorError>(
        &params,
        |g| {
            let xv = g.constant(x.clone());
            let (wv, bv) = (g.param(w), g.param(b));
            let h = g.matmul(xv, wv)?;
            let h = g.add(h, bv)?;
            let s = g.sin(h)?;
            let s2 = g.mul(s, s)?;
            g.sum(s2)
        },
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:?}");
}

#[test]
fn forward_is_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamStore::new();
    let w = params.insert("w", random(&mut rng, 8, 8), true);
    let x = random(&mut rng, 64, 8);
    let run = || {
        let mut g = Graph::new(&params);
        let xv = g.constant(x.clone());
        let wv = g.param(w);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.softplus(h).unwrap();
        let l = g.sum(h).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(h).clone(), grads.params().get(w).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sigmoid_gradient_matches_closed_form(x in -8.0f64..8.0) {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let v = g.input(Tensor::scalar(x));
        let s = g.sigmoid(v).unwrap();
        let grads = g.backward(s).unwrap();
        let y = 1.0 / (1.0 + (-x).exp());
        prop_assert!((grads.wrt(v).unwrap().item() - y * (1.0 - y)).abs() < 1e-12);
    }

    #[test]
    fn broadcast_add_gradient_sums_over_rows(rows in 1usize..6, cols in 1usize..6) {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let a = g.input(Tensor::zeros(rows, cols));
        let b = g.input(Tensor::zeros(1, cols));
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        prop_assert!(grads.wrt(b).unwrap().data().iter().all(|&v| v == rows as f64));
    }
}
