//! Execution strategy: rayon data-parallel loops with a sequential fallback.
//!
//! Every parallel loop in this crate splits the work into tasks that own
//! disjoint output slices and reduce serially inside the task, so results are
//! bit-identical whether they run on one thread or many. The `parallel`
//! cargo feature compiles the rayon path; [`set_serial_override`] switches to
//! the sequential path at runtime (used by the benches to compare both), and
//! `CFNET_THREADS` caps the worker count.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

static FORCE_SERIAL: AtomicBool = AtomicBool::new(false);
static INIT: Once = Once::new();

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn set_serial_override(serial: bool) {
    FORCE_SERIAL.store(serial, Ordering::SeqCst);
}

/// True when work may be dispatched to the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SERIAL.load(Ordering::SeqCst)
}

/// Build the global thread pool once, honouring `CFNET_THREADS`.
///
/// Safe to call repeatedly; only the first call takes effect. A cap of 1
/// routes everything through the sequential path.
pub fn init_threads() {
    INIT.call_once(|| {
        if let Ok(v) = std::env::var("CFNET_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n <= 1 {
                    set_serial_override(true);
                    return;
                }
                #[cfg(feature = "parallel")]
                {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Run `body(i, chunk_i)` over `data` split into `n` equal chunks.
///
/// Each chunk is written by exactly one task; `data.len()` must be a
/// multiple of `n`.
pub(crate) fn for_each_chunk<F>(data: &mut [f64], n: usize, body: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if n == 0 {
        return;
    }
    debug_assert_eq!(data.len() % n, 0);
    let chunk = data.len() / n;

    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, s)| body(i, s));
        return;
    }

    for (i, s) in data.chunks_mut(chunk).enumerate() {
        body(i, s);
    }
}

/// Map `0..n` through `body`, preserving index order in the result.
pub(crate) fn map_indexed<T, F>(n: usize, body: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(body).collect();
    }

    (0..n).map(body).collect()
}
