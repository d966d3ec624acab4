mod common;

use coe::index::{cosine, fuse, IndexError};
use coe::{EmbeddingVector, FusedIndex, FusionConfig};
use common::oracle_top_k;
use proptest::prelude::*;

fn pool_strategy() -> impl Strategy<Value = (usize, Vec<Vec<f32>>, Vec<f32>)> {
    (1usize..12, 1usize..60).prop_flat_map(|(dim, n)| {
        let v = prop::collection::vec(-1.0f32..1.0, dim)
            .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3));
        (Just(dim), prop::collection::vec(v.clone(), n), v)
    })
}

fn index_of(rows: &[Vec<f32>], dim: usize) -> FusedIndex {
    let ids = (0..rows.len()).map(|i| format!("r{i}")).collect();
    FusedIndex::from_rows(ids, rows.concat(), dim, FusionConfig::default()).unwrap()
}

proptest! {
    #[test]
    fn top_k_matches_full_sort((dim, rows, query) in pool_strategy(), k in 1usize..15, exclude in prop::option::of(0usize..60)) {
        let index = index_of(&rows, dim);
        let q = EmbeddingVector::new(query.clone()).unwrap();
        let exclude = exclude.filter(|&e| e < rows.len());
        let excl_id = exclude.map(|e| format!("r{e}"));
        let got: Vec<usize> = index
            .top_k(&q, k, excl_id.as_deref())
            .unwrap()
            .iter()
            .map(|n| n.id[1..].parse().unwrap())
            .collect();
        prop_assert_eq!(got, oracle_top_k(&rows, &query, k, exclude));
    }

    #[test]
    fn duplicate_rows_rank_by_position(dim in 1usize..8, copies in 2usize..10, k in 1usize..10) {
        let row: Vec<f32> = (0..dim).map(|i| i as f32 + 1.0).collect();
        let rows = vec![row.clone(); copies];
        let index = index_of(&rows, dim);
        let got: Vec<String> = index
            .top_k(&EmbeddingVector::new(row).unwrap(), k, None)
            .unwrap()
            .into_iter()
            .map(|n| n.id)
            .collect();
        let want: Vec<String> = (0..k.min(copies)).map(|i| format!("r{i}")).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn similarities_descend_and_bounded((dim, rows, query) in pool_strategy()) {
        let index = index_of(&rows, dim);
        let hits = index.top_k(&EmbeddingVector::new(query).unwrap(), rows.len(), None).unwrap();
        prop_assert_eq!(hits.len(), rows.len());
        for w in hits.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
        prop_assert!(hits.iter().all(|h| (-1.0..=1.0).contains(&h.similarity)));
    }

    #[test]
    fn fused_rows_are_unit_length(t in prop::collection::vec(-10.0f32..10.0, 1..64), seed in any::<u64>()) {
        let dim = t.len();
        let mut rng = common::rng(seed);
        let i = common::random_vec(&mut rng, dim);
        let t = EmbeddingVector::new(t).unwrap();
        let i = EmbeddingVector::new(i).unwrap();
        match fuse(&t, &i, &FusionConfig::default()) {
            Ok(f) => prop_assert!((f.norm() - 1.0).abs() < 1e-5),
            Err(e) => prop_assert_eq!(e, IndexError::ZeroNorm { id: None }),
        }
    }

    #[test]
    fn cosine_is_symmetric(a in prop::collection::vec(0.1f32..1.0, 4), b in prop::collection::vec(0.1f32..1.0, 4)) {
        let a = EmbeddingVector::new(a).unwrap();
        let b = EmbeddingVector::new(b).unwrap();
        prop_assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn fusion_of_axes_is_exact() {
    let cfg = FusionConfig {
        normalize: false,
        ..FusionConfig::default()
    };
    let t = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    let i = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
    assert_eq!(fuse(&t, &i, &cfg).unwrap().as_slice(), &[0.8, 0.2]);
}

#[test]
fn self_exclusion_promotes_next_row() {
    let rows = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![0.7, 0.3]];
    let index = index_of(&rows, 2);
    let q = EmbeddingVector::new(rows[1].clone()).unwrap();
    let ids = |ex: Option<&str>| -> Vec<String> { index.top_k(&q, 2, ex).unwrap().into_iter().map(|n| n.id).collect() };
    assert_eq!(ids(None), ["r1", "r0"]);
    assert_eq!(ids(Some("r1")), ["r0", "r3"]);
    assert_eq!(ids(Some("absent")), ["r1", "r0"]);
}

#[test]
fn query_errors() {
    let index = index_of(&[vec![1.0, 0.0]], 2);
    let q = EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap();
    assert_eq!(
        index.top_k(&q, 1, None),
        Err(IndexError::DimensionMismatch { expected: 2, got: 3 })
    );
    let q = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
    assert_eq!(index.top_k(&q, 0, None), Err(IndexError::ZeroK));
    assert_eq!(index.top_k(&q, 5, None).unwrap().len(), 1);
}
