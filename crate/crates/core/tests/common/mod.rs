#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;
use reltrans::codec::fit_norm_stats;
use reltrans::eval::{generate_attached, Generator, SyntheticSpec};
use reltrans::fixtures::{maskable_seeds, random_database, RandomDbSpec};
use reltrans::model::{EncodedWindow, ModelConfig, ModelState, WindowEncoder};
use reltrans::sampler::{sample_context, ContextWindow, SamplerConfig};
use reltrans::store::{RelationalDatabase, RowRef, Seed, Split};
use reltrans::train::apply_masking;

pub fn synthetic(generator: Generator, entities: usize, seed: u64) -> RelationalDatabase {
    let spec = SyntheticSpec {
        entities,
        rng_seed: seed,
        ..SyntheticSpec::new(generator)
    };
    generate_attached(&spec).expect("synthetic database")
}

pub fn train_cutoff(db: &RelationalDatabase) -> i64 {
    db.active_task().map_or(i64::MAX, |t| t.train_cutoff)
}

pub fn state_for<F: reltrans::tensor::Real>(db: &RelationalDatabase, cfg: ModelConfig, seed: u64) -> ModelState<F> {
    let stats = fit_norm_stats(db, train_cutoff(db));
    ModelState::new(cfg, stats, &mut reltrans::rng::stream(seed, &[])).expect("model state")
}

pub fn encoder_for(db: &RelationalDatabase, cfg: &ModelConfig) -> WindowEncoder {
    let stats = fit_norm_stats(db, train_cutoff(db));
    WindowEncoder::new(
        Arc::new(stats),
        Arc::new(reltrans::codec::HashingEmbedder::new(cfg.d_text)),
    )
}

/// Windows over random schemas, seeded at random maskable cells.
pub fn random_windows(
    n_schemas: u64,
    per_schema: usize,
    context_length: usize,
) -> Vec<(RelationalDatabase, ContextWindow)> {
    let mut out = Vec::new();
    for s in 0..n_schemas {
        let db = random_database(s, RandomDbSpec::default());
        let seeds = maskable_seeds(&db);
        if seeds.is_empty() {
            continue;
        }
        let mut r = reltrans::rng::stream(s, &[0x7e57]);
        for i in 0..per_schema {
            let seed = seeds[r.random_range(0..seeds.len())];
            let cfg = SamplerConfig {
                context_length,
                width_bound: 4,
                rng_seed: i as u64,
            };
            out.push((db.clone(), sample_context(&db, &seed, &cfg).expect("window")));
        }
    }
    out
}

/// A mixed numeric/boolean/datetime/text batch for gradient checks: windows
/// from the shop fixture and from a copy-task database, with extra masking.
pub fn gradcheck_batch(cfg: &ModelConfig) -> (ModelState<f64>, Vec<EncodedWindow>) {
    let copy = synthetic(Generator::CopyParentFeature, 60, 3);
    let shop = reltrans::fixtures::shop();
    let state: ModelState<f64> = state_for(&copy, cfg.clone(), 7);
    let copy_enc = encoder_for(&copy, cfg);
    let shop_enc = WindowEncoder::new(
        Arc::new(fit_norm_stats(&shop, 1000)),
        Arc::new(reltrans::codec::HashingEmbedder::new(cfg.d_text)),
    );
    let sampler = SamplerConfig {
        context_length: 24,
        width_bound: 4,
        rng_seed: 5,
    };
    let mut batch = Vec::new();
    let mut r = reltrans::rng::stream(11, &[]);
    for seed in copy.seed_rows_for_task(Split::Train).unwrap().into_iter().take(2) {
        let mut w = sample_context(&copy, &seed, &sampler).unwrap();
        apply_masking(&mut w, 0.3, &mut r);
        batch.push(copy_enc.encode(&copy, &w, Some("copy")).unwrap());
    }
    let orders = shop.table_id("orders").unwrap();
    let seed = Seed {
        row: RowRef::new(orders, 3),
        target: shop.column_ref("orders", "price").unwrap(),
    };
    let mut w = sample_context(&shop, &seed, &sampler).unwrap();
    apply_masking(&mut w, 0.3, &mut r);
    batch.push(shop_enc.encode(&shop, &w, None).unwrap());
    (state, batch)
}
