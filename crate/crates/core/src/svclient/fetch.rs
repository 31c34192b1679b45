use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::cache::{CacheEntry, FetchStatus, ImageCache};
use super::transport::{Fetched, Transport, TransportError};
use super::{Budget, ImageRequest, SvError, Usd};

/// Capped exponential backoff between attempts of one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt == 0 {
            return Duration::ZERO;
        }
        let factor = 1u32 << (attempt - 1).min(16);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchOptions {
    /// Global cap on transport calls per second; non-positive disables it.
    pub rate_per_sec: f64,
    pub workers: usize,
    pub budget: Budget,
    pub retry: RetryPolicy,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            rate_per_sec: 10.0,
            workers: 4,
            budget: Budget::default(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Per-run accounting. `fetched + cached + unavailable + failed + skipped`
/// always equals `planned`; `excluded` counts stored images (new or cached)
/// whose capture date fell outside the window.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FetchReport {
    pub planned: usize,
    pub fetched: usize,
    pub cached: usize,
    pub unavailable: usize,
    pub failed: usize,
    /// Left untouched because the budget ran out.
    pub skipped: usize,
    pub excluded: usize,
    pub attempts: u64,
    pub spend: Usd,
}

impl FetchReport {
    /// Stored images captured inside the window.
    pub fn usable(&self) -> usize {
        self.fetched + self.cached - self.excluded
    }
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("{source}; {} requests left for a later run", report.skipped)]
    BudgetHalt {
        report: FetchReport,
        #[source]
        source: SvError,
    },
    #[error(transparent)]
    Sv(#[from] SvError),
}

/// Spaces calls at least `1/rate` seconds apart across all threads.
pub struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(rate_per_sec: f64) -> Self {
        let interval = (rate_per_sec.is_finite() && rate_per_sec > 0.0)
            .then(|| Duration::from_secs_f64(1.0 / rate_per_sec));
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let slot = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

enum Outcome {
    Image(Vec<u8>, chrono::NaiveDate),
    Unavailable,
    Failed(TransportError),
}

/// Fetch every request in `plan` not already settled in `cache`.
///
/// Workers pull requests from a shared queue; results flow back to this
/// thread, which is the only writer of the cache. Transient transport errors
/// are retried per `opts.retry`. Before each download a slot is reserved
/// against the budget; once the next image would exceed the cap, no new
/// requests start and the run ends with [`FetchError::BudgetHalt`]. Every
/// completed result is already in the manifest, so a later run resumes.
pub fn fetch_all(
    plan: &[ImageRequest],
    transport: &dyn Transport,
    cache: &mut ImageCache,
    opts: &FetchOptions,
) -> Result<FetchReport, FetchError> {
    let mut report = FetchReport {
        planned: plan.len(),
        ..Default::default()
    };
    let mut todo = Vec::new();
    for r in plan {
        match cache.hit(&r.request_id).map(|e| e.status) {
            Some(FetchStatus::Unavailable) => report.unavailable += 1,
            Some(status) => {
                report.cached += 1;
                if status == FetchStatus::Excluded {
                    report.excluded += 1;
                }
            }
            None => todo.push(r),
        }
    }

    let limiter = RateLimiter::new(opts.rate_per_sec);
    let cursor = AtomicUsize::new(0);
    let halted = AtomicBool::new(false);
    let attempts = AtomicU64::new(0);
    // images paid for or in flight
    let reserved = Mutex::new(0u64);
    let workers = opts.workers.max(1).min(todo.len().max(1));

    let mut record_err = None;
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel::<(usize, Outcome)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, cursor, halted, limiter, attempts, reserved) =
                (&todo, &cursor, &halted, &limiter, &attempts, &reserved);
            s.spawn(move || loop {
                if halted.load(Ordering::SeqCst) {
                    break;
                }
                {
                    let mut n = reserved.lock().expect("budget lock");
                    if opts.budget.cost_of(*n + 1) > opts.budget.max {
                        halted.store(true, Ordering::SeqCst);
                        break;
                    }
                    *n += 1;
                }
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                let Some(req) = todo.get(i) else {
                    *reserved.lock().expect("budget lock") -= 1;
                    break;
                };
                let outcome = fetch_one(req, transport, limiter, &opts.retry, attempts);
                if !matches!(outcome, Outcome::Image(..)) {
                    *reserved.lock().expect("budget lock") -= 1;
                }
                if tx.send((i, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for (i, outcome) in rx {
            let req = todo[i];
            let result = match outcome {
                Outcome::Image(bytes, date) => {
                    let status = if req.window.contains(date) {
                        FetchStatus::Ok
                    } else {
                        report.excluded += 1;
                        FetchStatus::Excluded
                    };
                    report.fetched += 1;
                    let mut e = CacheEntry::for_request(req, status);
                    e.capture_date = Some(date);
                    cache.record(e, Some(&bytes))
                }
                Outcome::Unavailable => {
                    report.unavailable += 1;
                    cache.record(CacheEntry::for_request(req, FetchStatus::Unavailable), None)
                }
                Outcome::Failed(err) => {
                    log::warn!("request {} failed: {err}", req.request_id);
                    report.failed += 1;
                    cache.record(CacheEntry::for_request(req, FetchStatus::Failed), None)
                }
            };
            if let Err(e) = result {
                halted.store(true, Ordering::SeqCst);
                record_err.get_or_insert(e);
            }
        }
    });
    if let Some(e) = record_err {
        return Err(e.into());
    }

    report.attempts = attempts.load(Ordering::SeqCst);
    report.spend = opts.budget.cost_of(report.fetched as u64);
    report.skipped = report.planned
        - (report.fetched + report.cached + report.unavailable + report.failed);
    cache.compact()?;

    if report.skipped > 0 {
        let cost = opts.budget.cost_of(report.fetched as u64 + report.skipped as u64);
        let cap = opts.budget.max;
        return Err(FetchError::BudgetHalt {
            report,
            source: SvError::BudgetExceeded {
                cost,
                cap,
                overage: Usd(cost.0.saturating_sub(cap.0)),
            },
        });
    }
    Ok(report)
}

fn fetch_one(
    req: &ImageRequest,
    transport: &dyn Transport,
    limiter: &RateLimiter,
    retry: &RetryPolicy,
    attempts: &AtomicU64,
) -> Outcome {
    let mut last = TransportError::Transient("no attempt made".into());
    for attempt in 0..retry.attempts.max(1) {
        let delay = retry.delay_before(attempt);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        limiter.acquire();
        attempts.fetch_add(1, Ordering::SeqCst);
        match transport.get(req) {
            Ok(Fetched::Image { bytes, capture_date }) => return Outcome::Image(bytes, capture_date),
            Ok(Fetched::NotAvailable) => return Outcome::Unavailable,
            Err(e @ TransportError::Fatal(_)) => return Outcome::Failed(e),
            Err(e) => {
                log::debug!("request {} attempt {} failed: {e}", req.request_id, attempt + 1);
                last = e;
            }
        }
    }
    Outcome::Failed(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_capped() {
        let p = RetryPolicy {
            attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        let d: Vec<u128> = (0..5).map(|a| p.delay_before(a).as_millis()).collect();
        assert_eq!(d, vec![0, 100, 200, 350, 350]);
    }

    #[test]
    fn unlimited_rate_does_not_block() {
        let l = RateLimiter::new(0.0);
        let t = Instant::now();
        for _ in 0..1000 {
            l.acquire();
        }
        assert!(t.elapsed() < Duration::from_millis(100));
    }
}
