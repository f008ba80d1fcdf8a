//! Index-preserving parallel map over std threads.
//!
//! This is the single fan-out primitive the pipeline uses; the CLI's
//! `--workers` knob feeds straight into it.
//!
//! Results are written into slots keyed by input index, so the output is
//! identical whatever order the workers finish in.

use crate::error::Result;

/// Applies `f` to every index in `0..n`, using up to `workers` threads.
/// `workers <= 1` runs inline. The first error wins deterministically by
/// lowest index.
pub fn par_map_indexed<U, F>(n: usize, workers: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> Result<U> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<Result<U>>> = (0..n).map(|_| None).collect();
    let workers = workers.min(n);
    std::thread::scope(|scope| {
        let mut chunks: Vec<&mut [Option<Result<U>>]> = Vec::new();
        let mut rest = slots.as_mut_slice();
        let base = n / workers;
        let extra = n % workers;
        for w in 0..workers {
            let len = base + usize::from(w < extra);
            let (head, tail) = rest.split_at_mut(len);
            chunks.push(head);
            rest = tail;
        }
        let mut offset = 0;
        for chunk in chunks {
            let start = offset;
            offset += chunk.len();
            let f = &f;
            scope.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(start + i));
                }
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        out.push(slot.expect("worker filled every slot")?);
    }
    Ok(out)
}
