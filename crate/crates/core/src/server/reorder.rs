use std::collections::BTreeMap;

/// Releases items in sequence order, whatever order they arrive in. `None`
/// marks a sequence number that produced nothing but must not block the ones
/// after it.
#[derive(Debug)]
pub struct ReorderBuffer<T> {
    next: u64,
    pending: BTreeMap<u64, Option<T>>,
}

impl<T> Default for ReorderBuffer<T> {
    fn default() -> Self {
        Self {
            next: 0,
            pending: BTreeMap::new(),
        }
    }
}

impl<T> ReorderBuffer<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert the item for `seq` and return everything now releasable.
    pub fn insert(&mut self, seq: u64, item: Option<T>) -> Vec<T> {
        if seq >= self.next {
            self.pending.insert(seq, item);
        }
        let mut ready = Vec::new();
        while let Some(item) = self.pending.remove(&self.next) {
            self.next += 1;
            ready.extend(item);
        }
        ready
    }

    pub fn waiting(&self) -> usize {
        self.pending.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn releases_in_order() {
        let mut r = ReorderBuffer::new();
        assert!(r.insert(1, Some("b")).is_empty());
        assert!(r.insert(2, None).is_empty());
        assert_eq!(r.insert(0, Some("a")), vec!["a", "b"]);
        assert_eq!(r.insert(3, Some("d")), vec!["d"]);
        assert_eq!(r.waiting(), 0);
    }

    #[test]
    fn stale_sequence_ignored() {
        let mut r = ReorderBuffer::new();
        assert_eq!(r.insert(0, Some(1)), vec![1]);
        assert!(r.insert(0, Some(2)).is_empty());
        assert_eq!(r.waiting(), 0);
    }
}
