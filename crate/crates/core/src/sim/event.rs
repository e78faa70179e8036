use super::types::Millis;
use crate::domain::{OrderId, RobotId, StationId};
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

/// Tie-break rank for events sharing a timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) enum Rank {
    Arrival = 0,
    /// Tote lifted onto or unloaded from a robot.
    Handling = 1,
    Pick = 2,
    Store = 3,
    RobotFree = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) enum EventKind {
    Arrival(OrderId),
    Stop { robot: RobotId, index: usize },
    PickDone(StationId),
    RobotFree(RobotId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Event {
    pub time: Millis,
    pub rank: Rank,
    /// Tote id for robot stops, station id for picks, order or robot id otherwise.
    pub entity: u32,
    pub sub: u8,
    pub seq: u64,
    pub kind: EventKind,
}

impl Event {
    fn sort_key(&self) -> (Millis, Rank, u32, u8, u64) {
        (self.time, self.rank, self.entity, self.sub, self.seq)
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: Millis, rank: Rank, entity: u32, sub: u8, kind: EventKind) {
        self.seq += 1;
        self.heap.push(Reverse(Event { time, rank, entity, sub, seq: self.seq, kind }));
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.heap.peek().map(|e| e.0.time)
    }

    pub fn pop_at(&mut self, time: Millis) -> Option<Event> {
        if self.peek_time() == Some(time) {
            self.heap.pop().map(|e| e.0)
        } else {
            None
        }
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.heap.iter().map(|e| &e.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_times_order_by_rank_then_entity() {
        let mut q = EventQueue::default();
        q.push(5, Rank::RobotFree, 0, 0, EventKind::RobotFree(RobotId(0)));
        q.push(5, Rank::Pick, 1, 0, EventKind::PickDone(StationId(1)));
        q.push(5, Rank::Arrival, 9, 0, EventKind::Arrival(OrderId(9)));
        q.push(5, Rank::Arrival, 2, 0, EventKind::Arrival(OrderId(2)));
        q.push(3, Rank::Store, 0, 0, EventKind::PickDone(StationId(0)));
        let mut order = Vec::new();
        while let Some(t) = q.peek_time() {
            while let Some(e) = q.pop_at(t) {
                order.push((e.time, e.rank, e.entity));
            }
        }
        assert_eq!(
            order,
            vec![
                (3, Rank::Store, 0),
                (5, Rank::Arrival, 2),
                (5, Rank::Arrival, 9),
                (5, Rank::Pick, 1),
                (5, Rank::RobotFree, 0)
            ]
        );
    }
}
