use mdnet::{Real, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

fn grads(ts: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    ts.iter().map(|t| t.grad().unwrap_or_default()).collect()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[rows, cols], 20.0, &mut rng);
        let s = x.softmax(1).unwrap().to_vec();
        for r in s.chunks(cols) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_ignores_a_common_shift(v in finite_vec(6), shift in -100.0f64..100.0) {
        let x = Tensor::<f64>::new(v.clone(), &[6]).unwrap();
        let y = Tensor::<f64>::new(v.iter().map(|a| a + shift).collect(), &[6]).unwrap();
        let (a, b) = (x.softmax(0).unwrap().to_vec(), y.softmax(0).unwrap().to_vec());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_over_independent_losses(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng).into_param();
        let b = Tensor::<f64>::randn(&[4, 2], 1.0, &mut rng).into_param();
        let l1 = |a: &Tensor<f64>, b: &Tensor<f64>| a.matmul(b).unwrap().silu().sum();
        let l2 = |a: &Tensor<f64>, b: &Tensor<f64>| a.exp().sum().add(&b.softplus().mean()).unwrap();

        l1(&a, &b).backward().unwrap();
        let g1 = grads(&[a.clone(), b.clone()]);
        a.zero_grad();
        b.zero_grad();
        l2(&a, &b).backward().unwrap();
        let g2 = grads(&[a.clone(), b.clone()]);
        a.zero_grad();
        b.zero_grad();
        l1(&a, &b).add(&l2(&a, &b)).unwrap().backward().unwrap();
        let both = grads(&[a, b]);
        for ((x, y), z) in g1.iter().flatten().zip(g2.iter().flatten()).zip(both.iter().flatten()) {
            prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }
}

#[test]
fn repeated_forward_backward_is_bitwise_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[4, 16], 1.0, &mut rng).into_param();
        let w = Tensor::<f32>::randn(&[16, 16], 0.3, &mut rng).into_param();
        let gain = Tensor::<f32>::new(vec![1.0; 16], &[16]).unwrap().into_param();
        let bias = Tensor::<f32>::new(vec![0.0; 16], &[16]).unwrap().into_param();
        let y = x.matmul(&w).unwrap().layer_norm(&gain, &bias, 1e-5).unwrap();
        y.softmax(1).unwrap().mul(&y).unwrap().sum().backward().unwrap();
        [x, w, gain, bias]
            .iter()
            .flat_map(|t| t.grad().unwrap())
            .map(|v| v.as_f64().to_bits())
            .collect::<Vec<_>>()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let first = pool.install(run);
    assert_eq!(first, pool.install(run));
    // kernels never reorder sums across threads
    assert_eq!(first, run());
}
