use civic_lens::baselines::{predict_proba, train_logreg};
use civic_lens::features::{FeatureMatrix, Normalization};
use civic_lens::hiernet::{chunk_tokens, fuse, Fusion, FusionKind};
use civic_lens::nn::{Graph, Matrix, ParamSet};
use civic_lens::Label;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix_from_dense(rows: &[Vec<f64>]) -> FeatureMatrix {
    let cols = rows.first().map_or(0, Vec::len);
    FeatureMatrix {
        row_ids: (0..rows.len()).map(|i| format!("u{i}")).collect(),
        feature_names: (0..cols).map(|c| format!("f{c}")).collect(),
        rows: rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(c, v)| (c, *v))
                    .collect()
            })
            .collect(),
        normalization: Normalization::None,
    }
}

fn arb_problem() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Label>)> {
    (4usize..30, 1usize..6).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), n),
            prop::collection::vec(any::<bool>(), n)
                .prop_filter("both classes", |y| y.iter().any(|&b| b) && y.iter().any(|&b| !b)),
        )
            .prop_map(|(x, y)| {
                (
                    x,
                    y.into_iter()
                        .map(|b| if b { Label::Poster } else { Label::ActiveCitizen })
                        .collect(),
                )
            })
    })
}

fn arb_rows(max_rows: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 1..=max_rows)
}

fn fusion(kind: FusionKind, dim: usize, seed: u64) -> (Fusion, ParamSet) {
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = Fusion::new(&mut ps, kind, dim, 5, &mut rng);
    (f, ps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logistic_loss_never_increases((x, y) in arb_problem(), alpha in 1e-4f64..1.0) {
        let model = train_logreg(&matrix_from_dense(&x), &y, alpha).unwrap();
        for w in model.loss_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn zero_columns_do_not_change_predictions((x, y) in arb_problem(), extra in 1usize..5) {
        let fm = matrix_from_dense(&x);
        let model = train_logreg(&fm, &y, 1e-2).unwrap();
        let mut wide = fm.clone();
        wide.feature_names.extend((0..extra).map(|i| format!("zero{i}")));
        let mut padded = model.clone();
        padded.weights.extend(std::iter::repeat(0.0).take(extra));
        prop_assert_eq!(predict_proba(&model, &fm).unwrap(), predict_proba(&padded, &wide).unwrap());
    }
}

proptest! {
    #[test]
    fn chunk_count_and_round_trip(cap in 1usize..64, factor in 0.0f64..10.0, offset in 0usize..1000) {
        let len = ((cap as f64 * factor) as usize).max(1);
        let tokens: Vec<usize> = (0..len).map(|i| 4 + (i + offset) % 97).collect();
        let cs = chunk_tokens(&tokens, cap).unwrap();
        prop_assert_eq!(cs.n_chunks, len.div_ceil(cap));
        prop_assert_eq!(cs.content_tokens(), tokens);
    }

    #[test]
    fn pooling_is_permutation_invariant(rows in arb_rows(8, 4), rot in 0usize..8, seed in any::<u64>()) {
        let m = Matrix::from_rows(&rows);
        let mut shuffled = rows.clone();
        shuffled.rotate_left(rot % rows.len());
        shuffled.reverse();
        let p = Matrix::from_rows(&shuffled);
        for kind in [FusionKind::MaxPool, FusionKind::MeanPool] {
            let (f, ps) = fusion(kind, 4, seed);
            let a = fuse(&m, &f, &ps).unwrap();
            let b = fuse(&p, &f, &ps).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_form_a_distribution(rows in arb_rows(12, 4), seed in any::<u64>()) {
        let (f, ps) = fusion(FusionKind::LstmAttention, 4, seed);
        let mut g = Graph::new(&ps);
        let x = g.constant(Matrix::from_rows(&rows));
        let (_, w) = f.forward(&mut g, x).unwrap();
        let w = g.value(w.expect("attention fusion reports weights"));
        prop_assert_eq!(w.len(), rows.len());
        prop_assert!(w.data.iter().all(|&v| v >= 0.0));
        prop_assert!((w.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lstm_attention_depends_on_order() {
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.37).sin()).collect())
        .collect();
    let mut reversed = rows.clone();
    reversed.reverse();
    let (f, ps) = fusion(FusionKind::LstmAttention, 4, 11);
    let a = fuse(&Matrix::from_rows(&rows), &f, &ps).unwrap();
    let b = fuse(&Matrix::from_rows(&reversed), &f, &ps).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}
