//! Shared mini-batch plumbing for both training stages.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::exec::Exec;
use crate::numerics::{Gradients, Real};

/// Runs `f` on every example of a batch (possibly in parallel), then merges
/// gradients sequentially in example order and averages them.
pub(crate) fn batch_gradients<E, T, F>(exec: Exec, batch: &[E], f: F) -> Result<(f64, Gradients<T>)>
where
    E: Sync,
    T: Real,
    F: Fn(&E) -> Result<(f64, Gradients<T>)> + Sync + Send,
{
    let results = exec.map(batch, f);
    let mut total = Gradients::default();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        total.merge(g);
    }
    let n = batch.len().max(1) as f64;
    total.scale(T::from_f64(1.0 / n));
    Ok((loss / n, total))
}

/// Example order for one epoch.
pub(crate) fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

pub(crate) fn total_steps(examples: usize, batch: usize, epochs: usize) -> usize {
    examples.div_ceil(batch.max(1)) * epochs
}
