use std::thread;

/// Maps `f` over `items` on up to `workers` threads. Results keep the input order, and each
/// item is processed by the same code whatever the worker count, so outputs are identical
/// for any `workers`.
pub fn par_map<I: Sync, O: Send>(workers: usize, items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<O>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
