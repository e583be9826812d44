use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

const INTERVAL: Duration = Duration::from_millis(500);

/// Counts finished work items and prints at most one stderr line per
/// interval, plus the final one.
pub struct Progress {
    label: String,
    total: usize,
    done: AtomicUsize,
    last: Mutex<Option<Instant>>,
    quiet: bool,
}

impl Progress {
    pub fn new(label: impl Into<String>, total: usize, quiet: bool) -> Self {
        Progress { label: label.into(), total, done: AtomicUsize::new(0), last: Mutex::new(None), quiet }
    }

    pub fn tick(&self) {
        let done = self.done.fetch_add(1, Ordering::Relaxed) + 1;
        if self.quiet {
            return;
        }
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        let due = last.is_none_or(|t| t.elapsed() >= INTERVAL);
        if due || done == self.total {
            eprintln!("{}: {done}/{}", self.label, self.total);
            *last = Some(Instant::now());
        }
    }

    #[cfg(test)]
    pub fn done(&self) -> usize {
        self.done.load(Ordering::Relaxed)
    }
}
