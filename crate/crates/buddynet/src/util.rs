//! Shared plumbing: a deterministic order-preserving parallel map whose
//! worker count is capped by the `BUDDYNET_THREADS` environment variable
//! (0 or unset = auto).

use crate::error::Result;

pub fn worker_count() -> usize {
    let cap = std::env::var("BUDDYNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    if cap != 0 {
        return cap.max(1);
    }
    std::thread::available_parallelism().map(usize::from).unwrap_or(1)
}

/// Map `f` over `items`, preserving order. Falls back to a sequential loop
/// for a single worker or tiny inputs; results are identical either way
/// because every `f` call is pure per item.
pub fn parallel_map<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let workers = worker_count().min(items.len().max(1));
    if workers <= 1 || items.len() < 4 {
        return items.iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<U>>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (items_chunk, slots_chunk) in items.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            scope.spawn(|| {
                for (item, slot) in items_chunk.iter().zip(slots_chunk.iter_mut()) {
                    *slot = Some(f(item));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled every slot")).collect()
}
