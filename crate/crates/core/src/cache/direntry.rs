//! In-memory LRU map from directory objects to their entries.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use lru::LruCache;

use crate::model::DirEntry;
use crate::swhid::Swhid;

pub const DEFAULT_DIRENTRY_CAPACITY: usize = 10_000;

pub struct DirentryCache {
    inner: Mutex<LruCache<Swhid, Arc<Vec<DirEntry>>>>,
}

impl DirentryCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("nonzero");
        DirentryCache {
            inner: Mutex::new(LruCache::new(cap)),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<Swhid, Arc<Vec<DirEntry>>>> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, dir: &Swhid) -> Option<Arc<Vec<DirEntry>>> {
        self.lock().get(dir).cloned()
    }

    pub fn put(&self, dir: Swhid, entries: Arc<Vec<DirEntry>>) {
        self.lock().put(dir, entries);
    }

    pub fn remove(&self, dir: &Swhid) {
        self.lock().pop(dir);
    }

    pub fn clear(&self) {
        self.lock().clear();
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.lock().cap().get()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swhid::ObjectType;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn dir(n: usize) -> Swhid {
        Swhid::new(ObjectType::Directory, &format!("{n:040x}")).unwrap()
    }

    fn entries(n: usize) -> Arc<Vec<DirEntry>> {
        Arc::new(vec![DirEntry {
            name: format!("f{n}").into_bytes(),
            target: Swhid::new(ObjectType::Content, &format!("{n:040x}")).unwrap(),
            perm: crate::model::EntryPerm::File,
            length: Some(n as u64),
        }])
    }

    #[test]
    fn oldest_evicted_past_capacity() {
        let cache = DirentryCache::new(3);
        for i in 0..4 {
            cache.put(dir(i), entries(i));
        }
        assert_eq!(cache.len(), 3);
        assert!(cache.get(&dir(0)).is_none());
        for i in 1..4 {
            assert_eq!(cache.get(&dir(i)), Some(entries(i)));
        }
    }

    #[test]
    fn get_refreshes_recency() {
        let cache = DirentryCache::new(2);
        cache.put(dir(0), entries(0));
        cache.put(dir(1), entries(1));
        cache.get(&dir(0));
        cache.put(dir(2), entries(2));
        assert!(cache.get(&dir(0)).is_some());
        assert!(cache.get(&dir(1)).is_none());
    }

    #[derive(Debug, Clone)]
    enum Op {
        Put(usize),
        Get(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![(0..12usize).prop_map(Op::Put), (0..12usize).prop_map(Op::Get)]
    }

    proptest! {
        // The cache against a plain recency-list model.
        #[test]
        fn matches_lru_model(ops in proptest::collection::vec(op(), 0..200), cap in 1..6usize) {
            let cache = DirentryCache::new(cap);
            let mut model: VecDeque<usize> = VecDeque::new();
            for op in ops {
                match op {
                    Op::Put(k) => {
                        cache.put(dir(k), entries(k));
                        model.retain(|x| *x != k);
                        model.push_back(k);
                        if model.len() > cap {
                            model.pop_front();
                        }
                    }
                    Op::Get(k) => {
                        let hit = cache.get(&dir(k));
                        let in_model = model.contains(&k);
                        prop_assert_eq!(hit.is_some(), in_model);
                        if let Some(v) = hit {
                            prop_assert_eq!(v, entries(k));
                            model.retain(|x| *x != k);
                            model.push_back(k);
                        }
                    }
                }
            }
            prop_assert_eq!(cache.len(), model.len());
        }
    }
}
