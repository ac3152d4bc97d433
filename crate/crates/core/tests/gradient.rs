mod common;

use delta_embed::delta::{l21_penalty, l21_subgradient, l2_norm};
use delta_embed::model::{backward, batch_backward, Example};
use delta_embed::{ComposedEmbedding, DeltaTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_matches_finite_differences(seed in any::<u64>()) {
        let inst = common::random_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let (err, _) = common::check_gradient(&inst).map_err(TestCaseError::fail)?;
        prop_assert!(err < 1e-5, "relative error {err:e}");
    }

    #[test]
    fn batch_gradient_is_mean_of_examples(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = common::random_instance(&mut rng);
        let emb = ComposedEmbedding::new(&inst.base, &inst.delta).unwrap();
        let mut examples = vec![inst.example.clone()];
        for i in 1..n {
            let mut ids = inst.example.ids.clone();
            let len = ids.len();
            ids.rotate_left(i % len);
            ids.truncate(1 + i % len);
            examples.push(Example { ids, label: inst.example.label });
        }
        examples.push(Example { ids: vec![], label: 0 });

        let (loss, grad, skipped) = batch_backward(&inst.params, &emb, &examples).unwrap();
        prop_assert_eq!(skipped, 1);
        let used = &examples[..n];
        let mut want_loss = 0.0;
        let mut want_bias = vec![0.0; inst.params.classes];
        for e in used {
            let (l, g) = backward(&inst.params, &emb, e).unwrap();
            want_loss += l / n as f64;
            for (w, b) in want_bias.iter_mut().zip(&g.bias) {
                *w += b / n as f64;
            }
        }
        prop_assert!((loss - want_loss).abs() < 1e-12);
        for (a, b) in grad.bias.iter().zip(&want_bias) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn subgradient_matches_penalty_derivative(
        row in prop::collection::vec(-3.0f64..3.0, 1..8),
        c in 1e-4f64..2.0,
    ) {
        prop_assume!(l2_norm(&row) > 1e-3);
        let g = l21_subgradient(&row, c);
        let h = common::FD_STEP;
        let penalty = |r: &[f64]| {
            let mut t = DeltaTable::new(r.len());
            t.insert(0, r.to_vec()).unwrap();
            l21_penalty(&t, c).unwrap()
        };
        for j in 0..row.len() {
            let (mut p, mut m) = (row.clone(), row.clone());
            p[j] += h;
            m[j] -= h;
            let fd = (penalty(&p) - penalty(&m)) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(c), "coord {j}: {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn repeated_token_gets_proportional_share() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut inst = common::random_instance(&mut rng);
    while inst.params.classes < 2 {
        inst = common::random_instance(&mut rng);
    }
    let a = 0;
    let b = 1;
    inst.example.ids = vec![a, a, a, b];
    let emb = ComposedEmbedding::new(&inst.base, &inst.delta).unwrap();
    let (_, g) = backward(&inst.params, &emb, &inst.example).unwrap();
    for (x, y) in g.delta[&a].iter().zip(&g.delta[&b]) {
        assert!((x - 3.0 * y).abs() <= 1e-12 * x.abs().max(1.0));
    }
}
