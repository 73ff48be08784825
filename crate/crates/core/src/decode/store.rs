use std::collections::BTreeMap;

use crate::error::SimError;
use crate::workload::RequestId;

/// Paged KV memory of one instance. A request's pages are either all
/// resident or all swapped out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PagedKvStore {
    capacity: u64,
    used: u64,
    resident: BTreeMap<RequestId, u64>,
    swapped: BTreeMap<RequestId, u64>,
}

impl PagedKvStore {
    pub fn new(capacity_pages: u64) -> Self {
        PagedKvStore {
            capacity: capacity_pages,
            used: 0,
            resident: BTreeMap::new(),
            swapped: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn used(&self) -> u64 {
        self.used
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    pub fn resident_pages(&self, id: RequestId) -> u64 {
        self.resident.get(&id).copied().unwrap_or(0)
    }

    pub fn swapped_pages(&self, id: RequestId) -> u64 {
        self.swapped.get(&id).copied().unwrap_or(0)
    }

    pub fn is_resident(&self, id: RequestId) -> bool {
        self.resident.contains_key(&id)
    }

    pub fn residents(&self) -> impl Iterator<Item = (RequestId, u64)> + '_ {
        self.resident.iter().map(|(&id, &p)| (id, p))
    }

    /// Grow (or create) `id`'s resident allocation to `pages` in total.
    pub fn grow_to(&mut self, id: RequestId, pages: u64) -> Result<(), SimError> {
        let held = self.resident_pages(id);
        if pages <= held {
            return Ok(());
        }
        let extra = pages - held;
        if extra > self.free() {
            return Err(SimError::Invariant(format!(
                "allocating {extra} pages for request {id} with only {} free",
                self.free()
            )));
        }
        self.used += extra;
        self.resident.insert(id, pages);
        Ok(())
    }

    pub fn release(&mut self, id: RequestId) -> u64 {
        let pages = self.resident.remove(&id).unwrap_or(0);
        self.used -= pages;
        pages
    }

    /// Move every page of `id` out of accelerator memory.
    pub fn evict(&mut self, id: RequestId) -> u64 {
        let pages = self.release(id);
        if pages > 0 {
            self.swapped.insert(id, pages);
        }
        pages
    }

    /// Bring a swapped request back. Returns the pages moved.
    pub fn restore(&mut self, id: RequestId) -> Result<u64, SimError> {
        let pages = self.swapped.remove(&id).unwrap_or(0);
        self.grow_to(id, pages)?;
        Ok(pages)
    }

    /// Evict whole requests, largest resident first (ties: newest id), until
    /// `needed` pages are free. `keep` is never chosen.
    pub fn swap_out(&mut self, needed: u64, keep: Option<RequestId>) -> Vec<(RequestId, u64)> {
        let mut victims = Vec::new();
        while self.free() < needed {
            let victim = self
                .resident
                .iter()
                .filter(|(id, _)| Some(**id) != keep)
                .max_by_key(|(id, pages)| (**pages, **id))
                .map(|(id, _)| *id);
            let Some(victim) = victim else { break };
            let pages = self.evict(victim);
            victims.push((victim, pages));
        }
        victims
    }

    /// Consistency check used by the simulator after every event.
    pub fn check(&self) -> Result<(), SimError> {
        let sum: u64 = self.resident.values().sum();
        if sum != self.used || self.used > self.capacity {
            return Err(SimError::Invariant(format!(
                "KV store holds {sum} pages (tracked {}) of capacity {}",
                self.used, self.capacity
            )));
        }
        if let Some(id) = self
            .resident
            .keys()
            .find(|id| self.swapped.contains_key(id))
        {
            return Err(SimError::Invariant(format!(
                "request {id} both resident and swapped"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_victims_when_room() {
        let mut s = PagedKvStore::new(20);
        s.grow_to(RequestId(1), 4).unwrap();
        assert!(s.swap_out(6, None).is_empty());
    }

    #[test]
    fn largest_resident_goes_first() {
        let mut s = PagedKvStore::new(12);
        s.grow_to(RequestId(1), 4).unwrap();
        s.grow_to(RequestId(2), 8).unwrap();
        let victims = s.swap_out(6, None);
        assert_eq!(victims, vec![(RequestId(2), 8)]);
        assert!(s.is_resident(RequestId(1)));
        assert_eq!(s.swapped_pages(RequestId(2)), 8);
        s.check().unwrap();
    }

    #[test]
    fn keep_is_spared() {
        let mut s = PagedKvStore::new(12);
        s.grow_to(RequestId(1), 4).unwrap();
        s.grow_to(RequestId(2), 8).unwrap();
        let victims = s.swap_out(6, Some(RequestId(2)));
        assert_eq!(victims, vec![(RequestId(1), 4)]);
        assert_eq!(s.free(), 4);
    }

    #[test]
    fn over_allocation_is_rejected() {
        let mut s = PagedKvStore::new(4);
        assert!(s.grow_to(RequestId(1), 5).is_err());
        s.grow_to(RequestId(1), 4).unwrap();
        assert_eq!(s.evict(RequestId(1)), 4);
        assert_eq!(s.restore(RequestId(1)).unwrap(), 4);
        assert_eq!(s.used(), 4);
    }
}
