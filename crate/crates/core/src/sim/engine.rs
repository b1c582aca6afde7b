use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{self, Write};

use sha2::{Digest, Sha256};

use crate::time::SimTime;

struct Entry<E> {
    time: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // Reversed so the max-heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Future-event list ordered by time, then by insertion.
pub struct EventQueue<E> {
    heap: BinaryHeap<Entry<E>>,
    seq: u64,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: SimTime, event: E) {
        self.heap.push(Entry { time, seq: self.seq, event });
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    /// Pops the next event if it fires no later than `limit`.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<(SimTime, E)> {
        if self.peek_time()? > limit {
            return None;
        }
        self.heap.pop().map(|e| (e.time, e.event))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Running digest over processed events, plus an optional text log.
pub struct Trace {
    hasher: Sha256,
    count: u64,
    sink: Option<Box<dyn Write + Send>>,
    error: Option<io::Error>,
}

impl Default for Trace {
    fn default() -> Self {
        Trace { hasher: Sha256::new(), count: 0, sink: None, error: None }
    }
}

impl Trace {
    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Trace { sink: Some(sink), ..Self::default() }
    }

    pub fn enabled(&self) -> bool {
        self.sink.is_some()
    }

    /// `detail` is only rendered when a log is attached.
    pub fn record(&mut self, time: SimTime, kind: &str, node: u32, words: [u64; 3], detail: impl FnOnce() -> String) {
        self.count += 1;
        self.hasher.update(time.as_micros().to_le_bytes());
        self.hasher.update(kind.as_bytes());
        self.hasher.update(node.to_le_bytes());
        for w in words {
            self.hasher.update(w.to_le_bytes());
        }
        if let Some(sink) = self.sink.as_mut() {
            if self.error.is_none() {
                let line = format!("{}\t{}\tn{}\t{}\n", time, kind, node, detail());
                if let Err(e) = sink.write_all(line.as_bytes()) {
                    self.error = Some(e);
                }
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn digest(&self) -> String {
        let d = self.hasher.clone().finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn finish(&mut self) -> io::Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        if let Some(sink) = self.sink.as_mut() {
            sink.flush()?;
        }
        Ok(())
    }
}
