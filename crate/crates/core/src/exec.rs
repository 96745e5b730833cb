//! Per-item gradient accumulation, serial or on a rayon pool.
//!
//! In parallel mode each item runs on its own copy of the model and the
//! copies' gradients are added back in item order, so results do not depend
//! on scheduling. They may differ from the serial path in the last bits
//! because floating-point summation is grouped differently.

use rayon::prelude::*;
use rayon::ThreadPool;

use crate::error::{Error, Result};
use crate::nn::Params;

pub fn thread_pool(threads: usize) -> Result<Option<ThreadPool>> {
    match threads {
        0 => Err(Error::Config("threads must be >= 1".into())),
        1 => Ok(None),
        n => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(Some)
            .map_err(|e| Error::Config(format!("thread pool: {e}"))),
    }
}

/// Runs `f(model, item)` for every item. `f` must only add into the model's
/// gradient accumulators; parameter values are read-only here.
pub fn accumulate<M, I, O, F>(model: &mut M, items: &[I], pool: Option<&ThreadPool>, f: F) -> Result<Vec<O>>
where
    M: Params + Clone + Send + Sync,
    I: Sync,
    O: Send,
    F: Fn(&mut M, &I) -> Result<O> + Sync,
{
    let Some(pool) = pool else {
        return items.iter().map(|item| f(model, item)).collect();
    };
    let shared = &*model;
    let results = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let mut worker = shared.clone();
                worker.zero_grad();
                let out = f(&mut worker, item)?;
                Ok((out, worker.grads()))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(results
        .into_iter()
        .map(|(out, grads)| {
            model.add_grads(&grads);
            out
        })
        .collect())
}

/// Order-preserving map, parallel when a pool is given.
pub fn map<I, O, F>(items: &[I], pool: Option<&ThreadPool>, f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync,
{
    match pool {
        None => items.iter().map(f).collect(),
        Some(pool) => pool.install(|| items.par_iter().map(&f).collect()),
    }
}
