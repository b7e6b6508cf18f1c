use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::NetError;

struct Pending<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event,
    // lowest sequence number first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Discrete-event clock. Events fire in nondecreasing time order, ties in
/// insertion order.
pub struct EventClock<E> {
    now: f64,
    next_seq: u64,
    pending: BinaryHeap<Pending<E>>,
}

impl<E> Default for EventClock<E> {
    fn default() -> Self {
        Self::new(0.0)
    }
}

impl<E> EventClock<E> {
    pub fn new(start: f64) -> Self {
        Self {
            now: start,
            next_seq: 0,
            pending: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn schedule(&mut self, at: f64, event: E) -> Result<(), NetError> {
        if !at.is_finite() || at < self.now {
            return Err(NetError::TimeInPast { at, now: self.now });
        }
        self.pending.push(Pending {
            time: at,
            seq: self.next_seq,
            event,
        });
        self.next_seq += 1;
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: f64, event: E) -> Result<(), NetError> {
        self.schedule(self.now + delay, event)
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.pending.peek().map(|p| p.time)
    }

    /// Fires the next event if it is due at or before `t_end`.
    pub fn pop_until(&mut self, t_end: f64) -> Option<(f64, E)> {
        if self.peek_time()? > t_end {
            return None;
        }
        let p = self.pending.pop()?;
        self.now = p.time;
        Some((p.time, p.event))
    }

    /// Fires every event due by `t_end` and advances the clock to `t_end`.
    pub fn run_until(&mut self, t_end: f64) -> Vec<(f64, E)> {
        let mut trace = Vec::new();
        while let Some(fired) = self.pop_until(t_end) {
            trace.push(fired);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        trace
    }

    /// Drains every pending event, letting the handler schedule follow-ups.
    pub fn run_with<F>(&mut self, mut handler: F) -> Result<Vec<(f64, E)>, NetError>
    where
        E: Clone,
        F: FnMut(&mut Self, f64, &E) -> Result<(), NetError>,
    {
        let mut trace = Vec::new();
        while let Some((t, ev)) = self.pop_until(f64::INFINITY) {
            handler(self, t, &ev)?;
            trace.push((t, ev));
        }
        Ok(trace)
    }
}
