//! Data-parallel gradient accumulation with a fixed reduction order, so
//! results are bit-identical for any thread count.

use mmtok_core::model::{window_batch, Gradients, Model, ModelError, TrainState};
use mmtok_core::sampler::PackedWindow;
use rayon::prelude::*;

pub fn thread_pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool")
}

/// Summed per-instance mean loss and its gradient. Per-instance gradients
/// are computed in parallel and added in batch order.
pub fn batch_grad(
    pool: &rayon::ThreadPool,
    model: &Model,
    batch: &[(&[u32], (usize, usize))],
) -> Result<(f64, Gradients), ModelError> {
    let parts: Vec<Result<(f64, Gradients), ModelError>> =
        pool.install(|| batch.par_iter().map(|(t, s)| model.loss_and_grad(t, *s)).collect());
    let mut total = model.zero_grad();
    let mut loss = 0.0;
    for p in parts {
        let (l, g) = p?;
        loss += l;
        total.0.iter_mut().zip(&g.0).for_each(|(a, b)| *a += b);
    }
    Ok((loss, total))
}

/// One optimizer step on a packed window; returns the summed loss.
pub fn train_window(
    pool: &rayon::ThreadPool,
    model: &mut Model,
    state: &mut TrainState,
    window: &PackedWindow,
) -> Result<f64, ModelError> {
    let batch = window_batch(window);
    let (loss, g) = batch_grad(pool, model, &batch)?;
    state.apply(model, g)?;
    Ok(loss)
}

/// Per-token NLL for many sequences in parallel, in input order.
pub fn batch_nll(
    pool: &rayon::ThreadPool,
    model: &Model,
    batch: &[(&[u32], (usize, usize))],
) -> Result<Vec<Vec<f64>>, ModelError> {
    pool.install(|| batch.par_iter().map(|(t, s)| model.target_nll(t, *s)).collect())
}
