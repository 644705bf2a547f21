use colexp::loss::ranking_loss;
use colexp::metrics::{evaluate, Pairing, DEFAULT_KS};
use colexp::similarity::similarity;
use colexp::tensor::Tensor;
use colexp::text_encoder::{renormalize_weights, TextEmbedding};
use colexp::video_encoder::JointEmbedding;
use proptest::prelude::*;

fn row(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0..20.0f64, len)
}

fn square() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| (Just(n), prop::collection::vec(-1.0..1.0f64, n * n)))
}

fn weights_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (1usize..7).prop_flat_map(|n| {
        (
            prop::collection::vec(0.01..1.0f64, n),
            prop::collection::vec(any::<bool>(), n).prop_filter("one available", |m| m.iter().any(|&a| a)),
        )
    })
}

proptest! {
    #[test]
    fn softmax_ignores_shifts(x in row(1..10), c in -50.0..50.0f64) {
        let a = Tensor::matrix(1, x.len(), x.clone()).unwrap().softmax();
        let b = Tensor::matrix(1, x.len(), x.iter().map(|v| v + c).collect()).unwrap().softmax();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!((a.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn l2_normalize_gives_unit_rows(x in row(1..10)) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3));
        let n = Tensor::matrix(1, x.len(), x).unwrap().l2_normalize(1e-12).norm();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn renormalization_is_idempotent((w, mask) in weights_and_mask()) {
        let once = renormalize_weights(&w, &mask).unwrap();
        let twice = renormalize_weights(&once, &mask).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        for (x, &m) in once.iter().zip(&mask) {
            prop_assert!(m || *x == 0.0);
        }
    }

    #[test]
    fn loss_is_nonnegative((n, s) in square(), margin in 0.0..1.0f64) {
        let l = ranking_loss(&Tensor::matrix(n, n, s).unwrap(), margin).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn loss_vanishes_once_the_diagonal_clears_the_margin((n, mut s) in square(), margin in 0.0..0.5f64) {
        for i in 0..n {
            s[i * n + i] = 1.0 + margin + 1e-9;
        }
        prop_assert_eq!(ranking_loss(&Tensor::matrix(n, n, s).unwrap(), margin).unwrap(), 0.0);
    }

    #[test]
    fn zero_padding_matches_masked_sum(
        (w, mask) in weights_and_mask(),
        seed in any::<u64>(),
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = w.len();
        let unit = |rng: &mut rand_chacha::ChaCha8Rng| Tensor::<f64>::randn(&[3], 1.0, rng).l2_normalize(1e-12);
        let v = JointEmbedding {
            blocks: mask.iter().map(|&a| if a { unit(&mut rng) } else { Tensor::zeros(&[3]) }).collect(),
            available: mask.clone(),
        };
        let t = TextEmbedding { blocks: (0..n).map(|_| unit(&mut rng)).collect(), weights: Some(w.clone()) };
        let got = similarity(&v, &t).unwrap();
        let rw = renormalize_weights(&w, &mask).unwrap();
        let padded: f64 = (0..n).map(|i| rw[i] * v.blocks[i].dot(&t.blocks[i]).unwrap()).sum();
        prop_assert!((got - padded).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_transforms((n, s) in square(), k in 1i32..40) {
        let m = Tensor::matrix(n, n, s).unwrap();
        let p = Pairing::identity(n);
        let before = evaluate(&m, &p, &DEFAULT_KS).unwrap();
        let after = evaluate(&m.map(|x| (x * k as f64).exp()), &p, &DEFAULT_KS).unwrap();
        prop_assert_eq!(before, after);
    }
}
