mod common;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use reltrans::attention::{
    block_forward, build_masks, masked_attention, permute_masks, transformer_block, AttentionKind, AttentionParams,
    Mask, NormPlacement,
};
use reltrans::eval::Generator;
use reltrans::model::ModelConfig;
use reltrans::sampler::ContextWindow;
use reltrans::store::RelationalDatabase;

fn brute_force(db: &RelationalDatabase, w: &ContextWindow, kind: AttentionKind) -> Mask {
    let t = &w.tokens;
    Mask::from_fn(t.len(), |q, k| {
        let (rq, rk) = (t[q].row, t[k].row);
        match kind {
            AttentionKind::Column => t[q].column == t[k].column,
            AttentionKind::Feature => rq == rk || db.out_links(rq).contains(&rk),
            AttentionKind::Neighbor => db.out_links(rk).contains(&rq),
            AttentionKind::Full => true,
        }
    })
}

#[test]
fn masks_match_pairwise_predicates() {
    let windows = common::random_windows(12, 10, 48);
    assert!(windows.len() >= 100);
    let schemas: std::collections::BTreeSet<_> = windows
        .iter()
        .map(|(db, _)| db.schema().tables.len() * 1000 + db.num_rows())
        .collect();
    assert!(schemas.len() >= 10);
    for (db, w) in &windows {
        let masks = build_masks(w);
        for kind in AttentionKind::ALL {
            assert_eq!(masks.get(kind), &brute_force(db, w, kind), "{kind:?}");
        }
    }
}

#[test]
fn mask_structure() {
    for (_, w) in common::random_windows(10, 5, 40) {
        let m = build_masks(&w);
        let n = w.len();
        assert!(m.column.is_symmetric());
        assert!(m.full.bits().iter().all(|&b| b));
        for q in 0..n {
            assert!(m.column.get(q, q) && m.feature.get(q, q));
            for q2 in 0..n {
                if w.tokens[q].row == w.tokens[q2].row {
                    let a: Vec<_> = (0..n).map(|k| m.feature.get(q, k)).collect();
                    let b: Vec<_> = (0..n).map(|k| m.feature.get(q2, k)).collect();
                    assert_eq!(a, b, "feature rows differ within one row");
                }
            }
        }
        // A parent sees its child through the neighbor mask exactly when the
        // child sees the parent through the feature mask across rows.
        for q in 0..n {
            for k in 0..n {
                if w.tokens[q].row != w.tokens[k].row {
                    assert_eq!(m.feature.get(q, k), m.neighbor.get(k, q));
                }
            }
        }
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = reltrans::rng::stream(seed, &[]);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

#[test]
fn single_token_window_attends_to_itself() {
    let d = 8;
    let p = AttentionParams {
        wq: random_matrix(d, d, 1),
        wk: random_matrix(d, d, 2),
        wv: random_matrix(d, d, 3),
        wo: random_matrix(d, d, 4),
    };
    let x = random_matrix(1, d, 5);
    let y = masked_attention(&x, &p, &Mask::from_fn(1, |_, _| true), 2).unwrap();
    let expect = x.dot(&p.wv).dot(&p.wo);
    for (a, b) in y.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn query_without_visible_keys_outputs_zero() {
    let d = 4;
    let p = AttentionParams {
        wq: random_matrix(d, d, 1),
        wk: random_matrix(d, d, 2),
        wv: random_matrix(d, d, 3),
        wo: random_matrix(d, d, 4),
    };
    let x = random_matrix(3, d, 5);
    let y = masked_attention(&x, &p, &Mask::from_fn(3, |q, k| q != 1 && k == 0), 2).unwrap();
    assert!(y.row(1).iter().all(|&v| v == 0.0));
    assert!(y.row(0).iter().any(|&v| v != 0.0));
}

#[test]
fn checked_entry_points_reject_bad_input() {
    let d = 4;
    let p = AttentionParams::<f64>::zeros(d);
    let x = random_matrix(3, d, 1);
    assert!(masked_attention(&x, &p, &Mask::from_fn(2, |_, _| true), 2).is_err());
    assert!(masked_attention(&x, &p, &Mask::from_fn(3, |_, _| true), 3).is_err());
    let mut bad = x.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(masked_attention(&bad, &p, &Mask::from_fn(3, |_, _| true), 2).is_err());
}

fn permutation_deviation<F: reltrans::tensor::Real>(placement: NormPlacement, seed: u64) -> f64 {
    let db = common::synthetic(Generator::CopyParentFeature, 80, seed);
    let cfg = ModelConfig {
        norm: placement,
        ..ModelConfig::sized(2, 16, 2)
    };
    let state: reltrans::model::ModelState<F> = common::state_for(&db, cfg.clone(), seed);
    let (_, w) = common::random_windows(1, 1, 40).remove(0);
    let masks = build_masks(&w);
    let n = w.len();
    let x = random_matrix(n, 16, seed).mapv(F::of_f64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut reltrans::rng::stream(seed, &[1]));
    let xp = Array2::from_shape_fn((n, 16), |(i, j)| x[[perm[i], j]]);
    let pm = permute_masks(&masks, &perm);
    let (mut y, mut yp) = (x, xp);
    for b in &state.params.blocks {
        y = block_forward(&y, b, &masks, cfg.heads, placement).0;
        yp = transformer_block(&yp, b, &pm, cfg.heads, placement).unwrap();
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..16 {
            let (a, b) = (yp[[i, j]].as_f64(), y[[perm[i], j]].as_f64());
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
        }
    }
    worst
}

#[test]
fn blocks_are_permutation_equivariant() {
    for placement in [NormPlacement::Post, NormPlacement::Pre] {
        for seed in 0..3 {
            assert!(permutation_deviation::<f64>(placement, seed) < 1e-12);
            assert!(permutation_deviation::<f32>(placement, seed) < 1e-5);
        }
    }
}
