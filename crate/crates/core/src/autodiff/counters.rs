//! Per-thread pass counters keyed by parameter tag ("teacher", "student").
//!
//! Forward passes are recorded by model code, backward passes by
//! [`Graph::backward`](super::Graph::backward). Tests use the counts to
//! assert the cost structure of the influence paths.

use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounts {
    pub forwards: u64,
    pub backwards: u64,
}

thread_local! {
    static COUNTS: RefCell<BTreeMap<String, PassCounts>> = const { RefCell::new(BTreeMap::new()) };
}

pub fn record_forward(tag: &str) {
    COUNTS.with(|c| c.borrow_mut().entry(tag.to_string()).or_default().forwards += 1);
}

pub fn record_backward(tag: &str) {
    COUNTS.with(|c| c.borrow_mut().entry(tag.to_string()).or_default().backwards += 1);
}

pub fn get(tag: &str) -> PassCounts {
    COUNTS.with(|c| c.borrow().get(tag).copied().unwrap_or_default())
}

pub fn reset() {
    COUNTS.with(|c| c.borrow_mut().clear());
}

/// Counts accumulated while running `f`, per tag.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, BTreeMap<String, PassCounts>) {
    let before = COUNTS.with(|c| c.borrow().clone());
    let out = f();
    let after = COUNTS.with(|c| c.borrow().clone());
    let delta = after
        .into_iter()
        .map(|(tag, a)| {
            let b = before.get(&tag).copied().unwrap_or_default();
            (
                tag,
                PassCounts {
                    forwards: a.forwards - b.forwards,
                    backwards: a.backwards - b.backwards,
                },
            )
        })
        .filter(|(_, d)| d.forwards + d.backwards > 0)
        .collect();
    (out, delta)
}
