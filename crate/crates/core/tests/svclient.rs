use std::collections::HashMap;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use cropref::geodesy::{BearingDeg, GeoPoint};
use cropref::svclient::{
    estimate_cost, fetch_all, Budget, DateWindow, FetchError, FetchOptions, FetchStatus, Fetched, ImageCache,
    ImageRequest, RetryPolicy, Transport, TransportError, Usd,
};

fn season() -> DateWindow {
    DateWindow::new(
        NaiveDate::from_ymd_opt(2022, 5, 1).unwrap(),
        NaiveDate::from_ymd_opt(2022, 10, 31).unwrap(),
    )
    .unwrap()
}

fn plan(n: usize) -> Vec<ImageRequest> {
    (0..n)
        .map(|i| {
            let street = GeoPoint::new(15.0 + i as f64 * 1e-3, 100.5).unwrap();
            let field = GeoPoint::new(15.0 + i as f64 * 1e-3, 100.5003).unwrap();
            ImageRequest::new(street, BearingDeg::new(90.0), field, 640, season())
        })
        .collect()
}

/// Answers from a script: per-request transient failures before success,
/// optional unavailability and capture dates. Records call times.
#[derive(Default)]
struct Scripted {
    failures: Mutex<HashMap<String, u32>>,
    unavailable: Vec<String>,
    dates: HashMap<String, NaiveDate>,
    calls: Mutex<Vec<(String, Instant)>>,
}

impl Transport for Scripted {
    fn name(&self) -> &str {
        "scripted"
    }

    fn get(&self, r: &ImageRequest) -> Result<Fetched, TransportError> {
        self.calls.lock().unwrap().push((r.request_id.clone(), Instant::now()));
        if let Some(left) = self.failures.lock().unwrap().get_mut(&r.request_id) {
            if *left > 0 {
                *left -= 1;
                return Err(TransportError::Transient("503".into()));
            }
        }
        if self.unavailable.contains(&r.request_id) {
            return Ok(Fetched::NotAvailable);
        }
        Ok(Fetched::Image {
            bytes: format!("jpeg {}", r.request_id).into_bytes(),
            capture_date: self
                .dates
                .get(&r.request_id)
                .copied()
                .unwrap_or(NaiveDate::from_ymd_opt(2022, 7, 1).unwrap()),
        })
    }
}

fn fast() -> FetchOptions {
    FetchOptions {
        rate_per_sec: 0.0,
        workers: 3,
        budget: Budget::default(),
        retry: RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        },
    }
}

#[test]
fn happy_path_then_cached_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(5);
    let t = Scripted::default();
    let mut cache = ImageCache::open(dir.path()).unwrap();
    let r = fetch_all(&plan, &t, &mut cache, &fast()).unwrap();
    assert_eq!((r.fetched, r.cached, r.unavailable, r.failed), (5, 0, 0, 0));
    assert_eq!(r.spend, estimate_cost(5, &Budget::default()).unwrap());

    let mut reopened = ImageCache::open(dir.path()).unwrap();
    let again = fetch_all(&plan, &t, &mut reopened, &fast()).unwrap();
    assert_eq!((again.fetched, again.cached), (0, 5));
    assert_eq!(again.spend, Usd(0));
    assert_eq!(t.calls.lock().unwrap().len(), 5);
    for req in &plan {
        let bytes = reopened.image_bytes(&req.request_id).unwrap().unwrap();
        assert_eq!(bytes, format!("jpeg {}", req.request_id).into_bytes());
    }
}

#[test]
fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(1);
    let t = Scripted::default();
    t.failures.lock().unwrap().insert(plan[0].request_id.clone(), 2);
    let mut cache = ImageCache::open(dir.path()).unwrap();
    let r = fetch_all(&plan, &t, &mut cache, &fast()).unwrap();
    assert_eq!(r.fetched, 1);
    assert_eq!(r.attempts, 3);
}

#[test]
fn exhausted_retries_fail_and_are_retried_next_run() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(2);
    let t = Scripted::default();
    t.failures.lock().unwrap().insert(plan[1].request_id.clone(), 3);
    let mut cache = ImageCache::open(dir.path()).unwrap();
    let r = fetch_all(&plan, &t, &mut cache, &fast()).unwrap();
    assert_eq!((r.fetched, r.failed), (1, 1));
    assert_eq!(cache.entry(&plan[1].request_id).unwrap().status, FetchStatus::Failed);
    let r = fetch_all(&plan, &t, &mut cache, &fast()).unwrap();
    assert_eq!((r.fetched, r.cached, r.failed), (1, 1, 0));
}

#[test]
fn categories_sum_to_plan_and_dates_outside_window_are_excluded() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(6);
    let t = Scripted {
        unavailable: vec![plan[0].request_id.clone()],
        dates: [(plan[1].request_id.clone(), NaiveDate::from_ymd_opt(2022, 11, 15).unwrap())].into(),
        ..Default::default()
    };
    t.failures.lock().unwrap().insert(plan[2].request_id.clone(), 10);
    let mut cache = ImageCache::open(dir.path()).unwrap();
    let r = fetch_all(&plan, &t, &mut cache, &fast()).unwrap();
    assert_eq!(r.fetched + r.cached + r.unavailable + r.failed + r.skipped, plan.len());
    assert_eq!((r.unavailable, r.failed, r.excluded), (1, 1, 1));
    assert_eq!(r.usable(), 3);
    assert_eq!(cache.entry(&plan[1].request_id).unwrap().status, FetchStatus::Excluded);
}

#[test]
fn observed_rate_respects_limit() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(12);
    let t = Scripted::default();
    let opts = FetchOptions {
        rate_per_sec: 40.0,
        workers: 4,
        ..fast()
    };
    let mut cache = ImageCache::open(dir.path()).unwrap();
    fetch_all(&plan, &t, &mut cache, &opts).unwrap();
    let mut times: Vec<Instant> = t.calls.lock().unwrap().iter().map(|(_, t)| *t).collect();
    times.sort();
    let span = times.last().unwrap().duration_since(times[0]).as_secs_f64();
    let observed = (times.len() - 1) as f64 / span;
    assert!(observed <= 40.0 * 1.1, "observed {observed:.1} req/s");
}

#[test]
fn budget_halt_is_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan(5);
    let t = Scripted::default();
    // $7 per 1000: three images cost 2 cents, four cost 3
    let tight = FetchOptions {
        workers: 1,
        budget: Budget::new(7.0, 0.02),
        ..fast()
    };
    let mut cache = ImageCache::open(dir.path()).unwrap();
    let Err(FetchError::BudgetHalt { report, .. }) = fetch_all(&plan, &t, &mut cache, &tight) else {
        panic!("expected a budget halt");
    };
    assert_eq!((report.fetched, report.skipped), (3, 2));
    assert!(report.spend <= Usd(2));

    let mut reopened = ImageCache::open(dir.path()).unwrap();
    let r = fetch_all(&plan, &t, &mut reopened, &fast()).unwrap();
    assert_eq!((r.fetched, r.cached), (2, 3));
}
