//! Order-preserving parallel map over independent work items.
//!
//! Used where the concurrency contracts allow it: inference tiles and
//! per-slice feature extraction against read-only parameters. Results are
//! written by item index, so the output is identical regardless of the worker
//! count. `ANSG_THREADS` caps the number of workers; on wasm everything runs
//! serially.

/// Maps `f` over `items`, preserving order.
pub fn parallel_map<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync,
{
    let workers = worker_count(items.len());
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }

    let indexed: Vec<(usize, I)> = items.into_iter().enumerate().collect();
    let mut chunks: Vec<Vec<(usize, I)>> = (0..workers).map(|_| Vec::new()).collect();
    for (pos, item) in indexed {
        chunks[pos % workers].push((pos, item));
    }

    let mut collected: Vec<(usize, O)> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let f = &f;
                scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(pos, item)| (pos, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            collected.extend(h.join().expect("worker panicked"));
        }
    });

    collected.sort_by_key(|(pos, _)| *pos);
    collected.into_iter().map(|(_, out)| out).collect()
}

fn worker_count(items: usize) -> usize {
    if cfg!(target_arch = "wasm32") || items <= 1 {
        return 1;
    }
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("ANSG_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(available).min(items)
}
