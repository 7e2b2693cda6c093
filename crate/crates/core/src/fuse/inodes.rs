//! Inode numbers for layout paths.
//!
//! Numbers are handed out sequentially and a path keeps its number for the
//! lifetime of the mount, even after the kernel forgets it, so numbers are
//! never reused. Each slot also remembers the node the path resolved to;
//! nodes that may change are dropped once the kernel holds no reference.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::layout::{root_node, Name, VNode};

pub const ROOT_INO: u64 = 1;

struct Slot {
    path: Vec<Name>,
    node: Option<VNode>,
    lookups: u64,
}

struct Tables {
    slots: HashMap<u64, Slot>,
    by_path: HashMap<Vec<Name>, u64>,
    next: u64,
}

pub struct InodeTable {
    inner: Mutex<Tables>,
}

impl Default for InodeTable {
    fn default() -> Self {
        Self::new()
    }
}

impl InodeTable {
    pub fn new() -> Self {
        let mut slots = HashMap::new();
        slots.insert(
            ROOT_INO,
            Slot {
                path: Vec::new(),
                node: Some(root_node()),
                lookups: 1,
            },
        );
        let mut by_path = HashMap::new();
        by_path.insert(Vec::new(), ROOT_INO);
        InodeTable {
            inner: Mutex::new(Tables {
                slots,
                by_path,
                next: ROOT_INO + 1,
            }),
        }
    }

    /// Path of `ino` and the node last recorded for it, if any.
    pub fn get(&self, ino: u64) -> Option<(Vec<Name>, Option<VNode>)> {
        let t = self.inner.lock().unwrap();
        t.slots.get(&ino).map(|s| (s.path.clone(), s.node.clone()))
    }

    pub fn ino_of(&self, path: &[Name]) -> Option<u64> {
        self.inner.lock().unwrap().by_path.get(path).copied()
    }

    /// Recorded node at `path`, provided it cannot change.
    pub fn stable(&self, path: &[Name]) -> Option<(u64, VNode)> {
        let t = self.inner.lock().unwrap();
        let ino = *t.by_path.get(path)?;
        let node = t.slots.get(&ino)?.node.as_ref()?;
        (!node.volatile).then(|| (ino, node.clone()))
    }

    /// Records `node` at `path` and returns its inode number. When
    /// `counted` is set the kernel now holds one more reference to it.
    pub fn record(&self, path: &[Name], node: VNode, counted: bool) -> u64 {
        let mut t = self.inner.lock().unwrap();
        let ino = match t.by_path.get(path) {
            Some(ino) => *ino,
            None => {
                let ino = t.next;
                t.next += 1;
                t.by_path.insert(path.to_vec(), ino);
                t.slots.insert(
                    ino,
                    Slot {
                        path: path.to_vec(),
                        node: None,
                        lookups: 0,
                    },
                );
                ino
            }
        };
        let slot = t.slots.get_mut(&ino).expect("slot of known inode");
        slot.node = Some(node);
        if counted {
            slot.lookups += 1;
        }
        ino
    }

    /// Drops the recorded node of `path`, forcing the next access to
    /// resolve it again.
    pub fn invalidate(&self, path: &[Name]) {
        let mut t = self.inner.lock().unwrap();
        if let Some(ino) = t.by_path.get(path).copied() {
            if let Some(slot) = t.slots.get_mut(&ino) {
                slot.node = None;
            }
        }
    }

    /// The kernel released `n` references to `ino`.
    pub fn forget(&self, ino: u64, n: u64) {
        if ino == ROOT_INO {
            return;
        }
        let mut t = self.inner.lock().unwrap();
        if let Some(slot) = t.slots.get_mut(&ino) {
            slot.lookups = slot.lookups.saturating_sub(n);
            if slot.lookups == 0 && slot.node.as_ref().is_some_and(|n| n.volatile) {
                slot.node = None;
            }
        }
    }

    pub fn lookups(&self, ino: u64) -> u64 {
        let t = self.inner.lock().unwrap();
        t.slots.get(&ino).map_or(0, |s| s.lookups)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Render;
    use proptest::prelude::*;

    fn path(parts: &[&str]) -> Vec<Name> {
        parts.iter().map(|p| p.as_bytes().to_vec()).collect()
    }

    fn text(volatile: bool) -> VNode {
        let mut node = VNode::file(Render::Text(b"x".to_vec()), 1, 0);
        node.volatile = volatile;
        node
    }

    #[test]
    fn root_is_fixed() {
        let table = InodeTable::new();
        assert_eq!(table.ino_of(&[]), Some(ROOT_INO));
        let (p, node) = table.get(ROOT_INO).unwrap();
        assert!(p.is_empty());
        assert!(node.unwrap().is_dir());
        table.forget(ROOT_INO, 10);
        assert!(table.get(ROOT_INO).unwrap().1.is_some());
    }

    #[test]
    fn numbers_survive_forget() {
        let table = InodeTable::new();
        let a = table.record(&path(&["a"]), text(false), true);
        let b = table.record(&path(&["b"]), text(true), true);
        assert_ne!(a, b);
        table.forget(a, 1);
        table.forget(b, 1);
        assert_eq!(table.lookups(a), 0);
        // stable nodes are kept, volatile ones dropped
        assert!(table.stable(&path(&["a"])).is_some());
        assert!(table.get(b).unwrap().1.is_none());
        assert_eq!(table.record(&path(&["a"]), text(false), true), a);
        assert_eq!(table.record(&path(&["b"]), text(true), true), b);
        let c = table.record(&path(&["c"]), text(false), false);
        assert!(c > b);
        assert_eq!(table.lookups(c), 0);
    }

    #[test]
    fn volatile_nodes_are_not_stable() {
        let table = InodeTable::new();
        table.record(&path(&["v"]), text(true), true);
        assert!(table.stable(&path(&["v"])).is_none());
        table.record(&path(&["s"]), text(false), true);
        table.invalidate(&path(&["s"]));
        assert!(table.stable(&path(&["s"])).is_none());
    }

    proptest! {
        // Whatever the order of records and forgets, distinct paths get
        // distinct numbers and a path always maps back to the same number.
        #[test]
        fn paths_and_numbers_stay_a_bijection(
            ops in proptest::collection::vec((0usize..12, any::<bool>()), 1..200),
        ) {
            let table = InodeTable::new();
            let mut seen: HashMap<usize, u64> = HashMap::new();
            for (n, forget) in ops {
                let p = path(&["d", &n.to_string()]);
                let ino = table.record(&p, text(n % 2 == 0), true);
                if let Some(prev) = seen.insert(n, ino) {
                    prop_assert_eq!(prev, ino);
                }
                prop_assert_eq!(table.get(ino).unwrap().0, p);
                if forget {
                    table.forget(ino, 1);
                }
            }
            let mut numbers: Vec<u64> = seen.values().copied().collect();
            numbers.sort();
            numbers.dedup();
            prop_assert_eq!(numbers.len(), seen.len());
            prop_assert!(!numbers.contains(&ROOT_INO));
        }
    }
}
