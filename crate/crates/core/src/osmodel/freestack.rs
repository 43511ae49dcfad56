//! LIFO free list of physical page frames.
//!
//! An intrusive doubly linked list over frame numbers, so push, pop and
//! removal of an arbitrary frame are all O(1).

use super::OsError;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct FreeStack {
    next: Vec<u32>,
    prev: Vec<u32>,
    free: Vec<bool>,
    head: u32,
    len: usize,
}

impl FreeStack {
    /// Empty list able to hold frames `0..frames`.
    pub fn new(frames: u64) -> Self {
        let n = frames as usize;
        Self {
            next: vec![NIL; n],
            prev: vec![NIL; n],
            free: vec![false; n],
            head: NIL,
            len: 0,
        }
    }

    pub fn capacity(&self) -> u64 {
        self.free.len() as u64
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.free.get(frame as usize).copied().unwrap_or(false)
    }

    pub fn peek(&self) -> Option<u64> {
        (self.head != NIL).then_some(u64::from(self.head))
    }

    pub fn push(&mut self, frame: u64) -> Result<(), OsError> {
        let f = frame as usize;
        if f >= self.free.len() {
            return Err(OsError::BadFrame(frame));
        }
        if self.free[f] {
            return Err(OsError::DoubleFree(frame));
        }
        let f32 = frame as u32;
        self.free[f] = true;
        self.prev[f] = NIL;
        self.next[f] = self.head;
        if self.head != NIL {
            self.prev[self.head as usize] = f32;
        }
        self.head = f32;
        self.len += 1;
        Ok(())
    }

    pub fn pop(&mut self) -> Option<u64> {
        if self.head == NIL {
            return None;
        }
        let f = u64::from(self.head);
        self.unlink(f);
        Some(f)
    }

    /// Remove a specific frame from the list wherever it sits.
    pub fn take(&mut self, frame: u64) -> bool {
        if !self.contains(frame) {
            return false;
        }
        self.unlink(frame);
        true
    }

    fn unlink(&mut self, frame: u64) {
        let f = frame as usize;
        let (p, n) = (self.prev[f], self.next[f]);
        if p != NIL {
            self.next[p as usize] = n;
        } else {
            self.head = n;
        }
        if n != NIL {
            self.prev[n as usize] = p;
        }
        self.next[f] = NIL;
        self.prev[f] = NIL;
        self.free[f] = false;
        self.len -= 1;
    }

    /// Frames from top (next to be popped) to bottom.
    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            if cur == NIL {
                return None;
            }
            let f = cur;
            cur = self.next[f as usize];
            Some(u64::from(f))
        })
    }
}
