//! Summary views over the ancestors of a revision: fixed-size pages in
//! history order, hash-prefix shards, and calendar buckets of committer
//! dates. The calendar view needs one metadata document per ancestor and is
//! filled in by a background task.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Datelike, FixedOffset, Utc};
use futures::StreamExt;
use log::{debug, warn};

use crate::backend::Backend;
use crate::swhid::Swhid;

/// A calendar bucket: a year, a month of a year, or a single day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DateKey {
    pub year: i32,
    pub month: Option<u32>,
    pub day: Option<u32>,
}

impl DateKey {
    pub fn year(year: i32) -> Self {
        DateKey {
            year,
            month: None,
            day: None,
        }
    }

    /// Depth below `by-date/`: 1 for years, 2 for months, 3 for days.
    pub fn depth(&self) -> usize {
        1 + usize::from(self.month.is_some()) + usize::from(self.day.is_some())
    }

    pub fn components(&self) -> Vec<String> {
        let mut out = vec![format!("{:04}", self.year)];
        out.extend(self.month.map(|m| format!("{m:02}")));
        out.extend(self.day.map(|d| format!("{d:02}")));
        out
    }

    /// Parses `name` as the next level below `self` (or below `by-date/`
    /// itself when `parent` is `None`).
    pub fn child(parent: Option<&DateKey>, name: &str) -> Option<DateKey> {
        let expected_len = if parent.is_none() { 4 } else { 2 };
        if name.len() != expected_len || !name.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let n: u32 = name.parse().ok()?;
        match parent {
            None => Some(DateKey::year(n as i32)),
            Some(k) if k.month.is_none() => Some(DateKey {
                month: Some(n),
                ..*k
            }),
            Some(k) if k.day.is_none() => Some(DateKey { day: Some(n), ..*k }),
            Some(_) => None,
        }
    }
}

/// UTC calendar day of a committer date.
pub fn day_of(date: &DateTime<FixedOffset>) -> (i32, u32, u32) {
    let utc = date.with_timezone(&Utc);
    (utc.year(), utc.month(), utc.day())
}

#[derive(Default)]
struct DateIndex {
    days: BTreeMap<(i32, u32, u32), BTreeSet<Swhid>>,
    dated: usize,
    seen: std::collections::HashSet<Swhid>,
}

pub struct HistoryViews {
    order: Vec<Swhid>,
    index: HashMap<Swhid, usize>,
    shards: BTreeMap<String, Vec<Swhid>>,
    dates: Mutex<DateIndex>,
    populating: AtomicBool,
}

impl HistoryViews {
    pub fn new(order: Vec<Swhid>) -> Self {
        let index = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut shards: BTreeMap<String, Vec<Swhid>> = BTreeMap::new();
        for id in &order {
            shards
                .entry(id.shard_prefix(2).to_owned())
                .or_default()
                .push(*id);
        }
        for ids in shards.values_mut() {
            ids.sort();
        }
        HistoryViews {
            order,
            index,
            shards,
            dates: Mutex::new(DateIndex::default()),
            populating: AtomicBool::new(false),
        }
    }

    /// Ancestors in history order.
    pub fn order(&self) -> &[Swhid] {
        &self.order
    }

    pub fn total(&self) -> usize {
        self.order.len()
    }

    pub fn contains(&self, id: &Swhid) -> bool {
        self.index.contains_key(id)
    }

    pub fn page_count(&self, page_size: usize) -> usize {
        self.order.len().div_ceil(page_size)
    }

    pub fn page(&self, n: usize, page_size: usize) -> &[Swhid] {
        let start = n.saturating_mul(page_size).min(self.order.len());
        let end = start.saturating_add(page_size).min(self.order.len());
        &self.order[start..end]
    }

    pub fn page_of(&self, id: &Swhid, page_size: usize) -> Option<usize> {
        self.index.get(id).map(|i| i / page_size)
    }

    pub fn shard_names(&self) -> impl Iterator<Item = &str> {
        self.shards.keys().map(String::as_str)
    }

    pub fn shard(&self, prefix: &str) -> Option<&[Swhid]> {
        self.shards.get(prefix).map(Vec::as_slice)
    }

    pub fn record_date(&self, id: Swhid, date: &DateTime<FixedOffset>) {
        if !self.contains(&id) {
            return;
        }
        let mut dates = self.dates.lock().unwrap();
        if dates.seen.insert(id) {
            dates.days.entry(day_of(date)).or_default().insert(id);
            dates.dated += 1;
        }
    }

    pub fn populated(&self) -> usize {
        self.dates.lock().unwrap().dated
    }

    pub fn is_complete(&self) -> bool {
        self.populated() >= self.total()
    }

    /// `<populated>/<total>` progress line.
    pub fn status_line(&self) -> String {
        format!("{}/{}\n", self.populated(), self.total())
    }

    fn undated(&self) -> Vec<Swhid> {
        let dates = self.dates.lock().unwrap();
        self.order
            .iter()
            .filter(|id| !dates.seen.contains(id))
            .copied()
            .collect()
    }

    /// Child buckets (or, for days, the revisions) currently known below
    /// `key`; `None` lists years.
    pub fn date_children(&self, key: Option<&DateKey>) -> Vec<String> {
        let dates = self.dates.lock().unwrap();
        let mut out: BTreeSet<String> = BTreeSet::new();
        for ((y, m, d), ids) in &dates.days {
            match key {
                None => {
                    out.insert(format!("{y:04}"));
                }
                Some(k) if k.year != *y => {}
                Some(DateKey {
                    month: None, ..
                }) => {
                    out.insert(format!("{m:02}"));
                }
                Some(DateKey {
                    month: Some(km),
                    day: None,
                    ..
                }) if km == m => {
                    out.insert(format!("{d:02}"));
                }
                Some(DateKey {
                    month: Some(km),
                    day: Some(kd),
                    ..
                }) if km == m && kd == d => {
                    out.extend(ids.iter().map(Swhid::to_string));
                }
                Some(_) => {}
            }
        }
        out.into_iter().collect()
    }

    pub fn day_contains(&self, key: &DateKey, id: &Swhid) -> bool {
        let (Some(m), Some(d)) = (key.month, key.day) else {
            return false;
        };
        self.dates
            .lock()
            .unwrap()
            .days
            .get(&(key.year, m, d))
            .is_some_and(|ids| ids.contains(id))
    }

    pub fn bucket_exists(&self, key: &DateKey) -> bool {
        let dates = self.dates.lock().unwrap();
        dates.days.keys().any(|(y, m, d)| {
            *y == key.year
                && key.month.is_none_or(|km| km == *m)
                && key.day.is_none_or(|kd| kd == *d)
        })
    }

    /// Starts filling the calendar view unless it is complete or already
    /// being filled. Ancestors whose metadata could not be fetched stay
    /// missing; a later call retries just those.
    pub fn start_population(self: &Arc<Self>, backend: &Arc<Backend>, concurrency: usize) {
        if self.is_complete() || self.populating.swap(true, Ordering::AcqRel) {
            return;
        }
        let views = self.clone();
        let backend = backend.clone();
        tokio::spawn(async move {
            let todo = views.undated();
            debug!("dating {} ancestors", todo.len());
            let mut fetches = futures::stream::iter(todo)
                .map(|id| {
                    let backend = backend.clone();
                    async move { (id, backend.revision(&id).await) }
                })
                .buffer_unordered(concurrency.max(1));
            let mut failures = 0usize;
            while let Some((id, meta)) = fetches.next().await {
                match meta {
                    Ok(meta) => views.record_date(id, &meta.committer_date),
                    Err(e) => {
                        failures += 1;
                        debug!("could not date {id}: {e}");
                    }
                }
            }
            if failures > 0 {
                warn!("{failures} ancestors left undated; will retry on next access");
            }
            views.populating.store(false, Ordering::Release);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swhid::ObjectType;
    use chrono::TimeZone;

    fn rev(n: u32) -> Swhid {
        Swhid::new(ObjectType::Revision, &format!("{n:08x}").repeat(5)).unwrap()
    }

    #[test]
    fn pages_partition_the_order() {
        let order: Vec<Swhid> = (0..25).map(rev).collect();
        let views = HistoryViews::new(order.clone());
        assert_eq!(views.page_count(10), 3);
        assert_eq!(views.page(0, 10), &order[..10]);
        assert_eq!(views.page(2, 10), &order[20..]);
        assert!(views.page(3, 10).is_empty());
        assert_eq!(views.page_of(&order[21], 10), Some(2));
        assert_eq!(HistoryViews::new(vec![]).page_count(10), 0);
    }

    #[test]
    fn shards_cover_every_ancestor() {
        let order: Vec<Swhid> = (0..300u32)
            .map(|n| Swhid::new(ObjectType::Revision, &format!("{:02x}{n:038x}", n % 256)).unwrap())
            .collect();
        let views = HistoryViews::new(order.clone());
        let mut all: Vec<Swhid> = views
            .shard_names()
            .flat_map(|s| views.shard(s).unwrap().to_vec())
            .collect();
        all.sort();
        let mut expected = order;
        expected.sort();
        assert_eq!(all, expected);
    }

    #[test]
    fn dates_bucket_in_utc() {
        let views = HistoryViews::new(vec![rev(1), rev(2)]);
        // 23:30 at -02:00 is already the next day in UTC
        let late = FixedOffset::west_opt(2 * 3600)
            .unwrap()
            .with_ymd_and_hms(2020, 12, 31, 23, 30, 0)
            .unwrap();
        views.record_date(rev(1), &late);
        assert_eq!(views.status_line(), "1/2\n");
        assert_eq!(views.date_children(None), vec!["2021"]);
        let y = DateKey::child(None, "2021").unwrap();
        let m = DateKey::child(Some(&y), "01").unwrap();
        let d = DateKey::child(Some(&m), "01").unwrap();
        assert_eq!(views.date_children(Some(&d)), vec![rev(1).to_string()]);
        assert!(views.day_contains(&d, &rev(1)));
        assert!(views.bucket_exists(&m));
        assert!(!views.bucket_exists(&DateKey::year(2020)));
        views.record_date(rev(1), &late);
        assert!(!views.is_complete());
        views.record_date(rev(2), &late);
        assert!(views.is_complete());
    }

    #[test]
    fn date_key_names() {
        assert_eq!(DateKey::child(None, "99"), None);
        assert_eq!(DateKey::child(None, "20x0"), None);
        let y = DateKey::child(None, "2020").unwrap();
        assert_eq!(DateKey::child(Some(&y), "2020"), None);
        let m = DateKey::child(Some(&y), "07").unwrap();
        assert_eq!(m.components(), vec!["2020", "07"]);
        assert_eq!(m.depth(), 2);
    }
}
