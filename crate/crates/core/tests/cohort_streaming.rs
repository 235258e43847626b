//! Streaming a large cohort file must not hold more than a record or two in
//! memory. Lives in its own test binary because it installs a counting
//! global allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicIsize, Ordering};

use riskfuse_core::cohort::{open_cohort, write_cohort};
use riskfuse_core::synth::{generate_cohort, CohortConfig};

struct Counting;

static LIVE: AtomicIsize = AtomicIsize::new(0);
static PEAK: AtomicIsize = AtomicIsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size() as isize, Ordering::SeqCst) + layout.size() as isize;
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size() as isize, Ordering::SeqCst);
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

#[test]
fn ten_thousand_records_stream_in_constant_memory() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cohort.jsonl");
    let cohort = generate_cohort(&CohortConfig {
        n_patients: 10_000,
        ..CohortConfig::default()
    })
    .unwrap();
    write_cohort(&cohort, &path).unwrap();
    drop(cohort);
    let file_size = std::fs::metadata(&path).unwrap().len() as isize;

    let baseline = LIVE.load(Ordering::SeqCst);
    PEAK.store(baseline, Ordering::SeqCst);
    let mut count = 0;
    let mut diabetics = 0;
    for record in open_cohort(&path).unwrap() {
        let record = record.unwrap();
        count += 1;
        diabetics += record.labels.unwrap().diabetes as usize;
    }
    let peak = PEAK.load(Ordering::SeqCst) - baseline;

    assert_eq!(count, 10_000);
    assert!(diabetics > 0);
    // One buffered line plus one record: tens of kilobytes at most, against
    // a multi-megabyte file.
    assert!(peak < 256 * 1024, "peak {peak} bytes while streaming a {file_size}-byte file");
    assert!(file_size > 40 * peak);
}
