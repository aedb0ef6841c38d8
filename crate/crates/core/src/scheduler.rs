//! Multicore workload balancing.
//!
//! Workers get contiguous index ranges sized in proportion to their measured
//! (or configured) throughput. A fixed pool is built once per engine; every
//! parallel call splits precomputed ranges across it and joins before
//! returning.

use std::hint::black_box;
use std::ops::Range;
use std::time::Instant;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreProfile {
    pub worker_id: usize,
    pub rate: f64,
}

/// Build profiles from explicit rates, verbatim.
pub fn profiles_from_rates(rates: &[f64]) -> Result<Vec<CoreProfile>> {
    if rates.is_empty() {
        return Err(Error::BadArg("at least one rate is required".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
        return Err(Error::BadArg(format!("rates must be positive and finite, got {r}")));
    }
    Ok(rates
        .iter()
        .enumerate()
        .map(|(worker_id, &rate)| CoreProfile { worker_id, rate })
        .collect())
}

pub fn uniform_profiles(n_workers: usize) -> Vec<CoreProfile> {
    (0..n_workers.max(1)).map(|worker_id| CoreProfile { worker_id, rate: 1.0 }).collect()
}

fn probe(work: u64) -> f64 {
    let mut acc = 1.0f64;
    for i in 0..work {
        acc = black_box(acc * 1.000_000_1 + (i & 7) as f64 * 1e-9);
    }
    acc
}

/// Time an identical arithmetic probe on `n_workers` threads.
///
/// `rate_i = slowest_time / own_time`, so the slowest worker has rate 1.
/// Wall-clock dependent; pass explicit rates through [`profiles_from_rates`]
/// when reproducibility matters.
pub fn measure_rates(n_workers: usize, probe_work: u64) -> Vec<CoreProfile> {
    let n = n_workers.max(1);
    if n == 1 {
        return uniform_profiles(1);
    }
    let times: Vec<f64> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .map(|_| {
                s.spawn(move || {
                    let start = Instant::now();
                    black_box(probe(probe_work));
                    start.elapsed().as_secs_f64().max(1e-9)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("probe thread panicked")).collect()
    });
    let slowest = times.iter().copied().fold(0.0, f64::max);
    times
        .iter()
        .enumerate()
        .map(|(worker_id, t)| CoreProfile { worker_id, rate: slowest / t })
        .collect()
}

/// Split `[0, n)` into one contiguous range per worker.
///
/// Worker `i` first receives `floor(n * rate_i / sum(rates))` items; the
/// remaining items go one each to the highest-rate workers (ties to the
/// lower worker id).
pub fn partition(n: usize, profiles: &[CoreProfile]) -> Vec<Range<usize>> {
    if profiles.is_empty() {
        return Vec::new();
    }
    let total: f64 = profiles.iter().map(|p| p.rate).sum();
    let mut sizes: Vec<usize> = profiles
        .iter()
        .map(|p| ((n as f64 * p.rate / total).floor() as usize).min(n))
        .collect();
    // float rounding may overshoot by an item in pathological cases
    while sizes.iter().sum::<usize>() > n {
        let i = sizes.iter().enumerate().max_by_key(|(_, s)| **s).map(|(i, _)| i).unwrap();
        sizes[i] -= 1;
    }
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&a, &b| profiles[b].rate.total_cmp(&profiles[a].rate).then(a.cmp(&b)));
    let mut leftover = n - sizes.iter().sum::<usize>();
    let mut cursor = 0;
    while leftover > 0 {
        sizes[order[cursor % order.len()]] += 1;
        leftover -= 1;
        cursor += 1;
    }
    let mut start = 0;
    sizes
        .into_iter()
        .map(|len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

pub fn uniform_partition(n: usize, n_workers: usize) -> Vec<Range<usize>> {
    partition(n, &uniform_profiles(n_workers))
}

/// Simulated completion time `max_i(|range_i| / rate_i)` in probe units.
pub fn simulated_makespan(ranges: &[Range<usize>], profiles: &[CoreProfile]) -> f64 {
    ranges
        .iter()
        .zip(profiles)
        .map(|(r, p)| r.len() as f64 / p.rate)
        .fold(0.0, f64::max)
}

/// Fixed worker pool.
pub struct Pool {
    pool: Option<rayon::ThreadPool>,
    profiles: Vec<CoreProfile>,
}

impl std::fmt::Debug for Pool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pool").field("profiles", &self.profiles).finish()
    }
}

impl Pool {
    /// A pool that runs everything on the calling thread.
    pub fn single() -> Self {
        Self { pool: None, profiles: uniform_profiles(1) }
    }

    /// Build a pool of `threads` workers. Without `rates` the workers'
    /// throughput is measured once here.
    pub fn new(threads: usize, rates: Option<&[f64]>) -> Result<Self> {
        if threads == 0 {
            return Err(Error::BadArg("thread count must be at least 1".into()));
        }
        let profiles = match rates {
            Some(r) => {
                if r.len() != threads {
                    return Err(Error::BadArg(format!(
                        "{} rates given for {threads} threads",
                        r.len()
                    )));
                }
                profiles_from_rates(r)?
            }
            None => measure_rates(threads, 200_000),
        };
        if threads == 1 {
            return Ok(Self { pool: None, profiles });
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .thread_name(|i| format!("tfllm-worker-{i}"))
            .build()
            .map_err(|e| Error::BadArg(format!("thread pool: {e}")))?;
        Ok(Self { pool: Some(pool), profiles })
    }

    pub fn threads(&self) -> usize {
        self.profiles.len()
    }

    pub fn profiles(&self) -> &[CoreProfile] {
        &self.profiles
    }

    pub fn partition(&self, n: usize) -> Vec<Range<usize>> {
        partition(n, &self.profiles)
    }

    /// Run `task(worker, range)` for every range and wait for all of them.
    /// A panicking task is re-raised after the others finish.
    pub fn parallel_for<F>(&self, ranges: &[Range<usize>], task: F)
    where
        F: Fn(usize, Range<usize>) + Sync,
    {
        match &self.pool {
            None => {
                for (i, r) in ranges.iter().enumerate() {
                    if !r.is_empty() {
                        task(i, r.clone());
                    }
                }
            }
            Some(pool) => pool.scope(|s| {
                for (i, r) in ranges.iter().enumerate() {
                    if r.is_empty() {
                        continue;
                    }
                    let task = &task;
                    let r = r.clone();
                    s.spawn(move |_| task(i, r));
                }
            }),
        }
    }

    /// Like [`Pool::parallel_for`] but hands each task the disjoint slice of
    /// `data` covered by its range. Ranges must be ascending and contiguous.
    pub fn parallel_chunks<T, F>(&self, data: &mut [T], ranges: &[Range<usize>], task: F)
    where
        T: Send,
        F: Fn(usize, Range<usize>, &mut [T]) + Sync,
    {
        let mut rest = data;
        let mut offset = 0;
        let mut pieces = Vec::with_capacity(ranges.len());
        for (i, r) in ranges.iter().enumerate() {
            assert_eq!(r.start, offset, "ranges must be contiguous");
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(r.len());
            rest = tail;
            offset = r.end;
            pieces.push((i, r.clone(), head));
        }
        match &self.pool {
            None => {
                for (i, r, chunk) in pieces {
                    if !r.is_empty() {
                        task(i, r, chunk);
                    }
                }
            }
            Some(pool) => pool.scope(|s| {
                for (i, r, chunk) in pieces {
                    if r.is_empty() {
                        continue;
                    }
                    let task = &task;
                    s.spawn(move |_| task(i, r, chunk));
                }
            }),
        }
    }
}
