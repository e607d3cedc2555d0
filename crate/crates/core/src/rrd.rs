//! Fixed-footprint round-robin time series.
//!
//! Each series holds one [`RoundRobinArchive`] per configured [`ArchiveSpec`].
//! Samples are folded into the archive's open slot; the slot is finalized
//! lazily when the first sample of a later slot arrives. Rows never
//! allocate after creation, so a series costs the same memory after one
//! sample as after a million.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{valid_hostname, valid_metric_name};

/// Upper bound on slots returned by one query.
pub const MAX_QUERY_SLOTS: u64 = 100_000;
const SNAPSHOT_MAGIC: &[u8; 8] = b"C2MSRRD1";
const MAX_SNAPSHOT_ROWS: u32 = 10_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum RrdError {
    #[error("sample at {timestamp} precedes open slot starting at {open_slot}")]
    StaleSample { timestamp: u64, open_slot: u64 },
    #[error("non-finite sample value")]
    NonFiniteValue,
    #[error("unknown series {0}")]
    UnknownSeries(SeriesKey),
    #[error("invalid window: start {start} must precede end {end}")]
    BadWindow { start: u64, end: u64 },
    #[error("window spans {0} slots, limit is {MAX_QUERY_SLOTS}")]
    WindowTooLarge(u64),
    #[error("invalid series key {0}")]
    InvalidKey(SeriesKey),
    #[error("invalid archive spec: {0}")]
    InvalidSpec(&'static str),
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a snapshot file")]
    BadHeader,
    #[error("unsupported snapshot version {0:?}")]
    UnsupportedVersion(String),
    #[error("corrupt snapshot: {0}")]
    Corrupt(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consolidation {
    Average,
    Max,
    Last,
}

impl Consolidation {
    fn to_wire(self) -> u8 {
        match self {
            Consolidation::Average => 0,
            Consolidation::Max => 1,
            Consolidation::Last => 2,
        }
    }

    fn from_wire(b: u8) -> Option<Self> {
        match b {
            0 => Some(Consolidation::Average),
            1 => Some(Consolidation::Max),
            2 => Some(Consolidation::Last),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchiveSpec {
    pub step: u64,
    pub rows: usize,
    pub consolidation: Consolidation,
}

impl ArchiveSpec {
    pub fn new(step: u64, rows: usize, consolidation: Consolidation) -> Result<Self, RrdError> {
        if step < 1 {
            return Err(RrdError::InvalidSpec("step must be at least 1"));
        }
        if rows < 2 {
            return Err(RrdError::InvalidSpec("rows must be at least 2"));
        }
        Ok(ArchiveSpec { step, rows, consolidation })
    }

    pub fn retention(&self) -> u64 {
        self.step * self.rows as u64
    }
}

/// 15 s x 240 rows (1 h) and 300 s x 288 rows (24 h), both averaged.
pub fn default_archives() -> Vec<ArchiveSpec> {
    vec![
        ArchiveSpec { step: 15, rows: 240, consolidation: Consolidation::Average },
        ArchiveSpec { step: 300, rows: 288, consolidation: Consolidation::Average },
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub hostname: String,
    pub metric: String,
}

impl SeriesKey {
    pub fn new(hostname: impl Into<String>, metric: impl Into<String>) -> Self {
        SeriesKey { hostname: hostname.into(), metric: metric.into() }
    }

    pub fn is_valid(&self) -> bool {
        valid_hostname(&self.hostname) && valid_metric_name(&self.metric)
    }
}

impl std::fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.hostname, self.metric)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Row {
    start: u64,
    value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Accumulator {
    slot: u64,
    sum: f64,
    count: u32,
    max: f64,
    last: f64,
}

impl Accumulator {
    fn open(slot: u64, v: f64) -> Self {
        Accumulator { slot, sum: v, count: 1, max: v, last: v }
    }

    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
        self.max = self.max.max(v);
        self.last = v;
    }

    fn value(&self, cf: Consolidation) -> f64 {
        match cf {
            Consolidation::Average => self.sum / self.count as f64,
            Consolidation::Max => self.max,
            Consolidation::Last => self.last,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub start: u64,
    /// `None` is Unknown: no sample contributed to the slot.
    pub value: Option<f64>,
}

/// A query result at a single step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub step: u64,
    pub points: Vec<Point>,
}

/// Slot grid covering every slot that intersects `[start, end)`.
pub fn slot_grid(step: u64, start: u64, end: u64) -> Result<Vec<u64>, RrdError> {
    if start >= end {
        return Err(RrdError::BadWindow { start, end });
    }
    let first = start - start % step;
    let count = (end - first).div_ceil(step);
    if count > MAX_QUERY_SLOTS {
        return Err(RrdError::WindowTooLarge(count));
    }
    Ok((0..count).map(|i| first + i * step).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRobinArchive {
    spec: ArchiveSpec,
    rows: Vec<Row>,
    cursor: usize,
    filled: usize,
    open: Option<Accumulator>,
}

impl RoundRobinArchive {
    pub fn new(spec: ArchiveSpec) -> Self {
        RoundRobinArchive {
            spec,
            rows: vec![Row { start: 0, value: None }; spec.rows],
            cursor: 0,
            filled: 0,
            open: None,
        }
    }

    pub fn spec(&self) -> &ArchiveSpec {
        &self.spec
    }

    fn slot_of(&self, ts: u64) -> u64 {
        ts - ts % self.spec.step
    }

    pub fn open_slot(&self) -> Option<u64> {
        self.open.map(|a| a.slot)
    }

    pub fn newest_finalized(&self) -> Option<u64> {
        (self.filled > 0).then(|| self.rows[(self.cursor + self.spec.rows - 1) % self.spec.rows].start)
    }

    fn oldest_index(&self) -> usize {
        (self.cursor + self.spec.rows - self.filled) % self.spec.rows
    }

    /// Finalized rows in logical (oldest first) order.
    pub fn finalized(&self) -> Vec<(u64, Option<f64>)> {
        let oldest = self.oldest_index();
        (0..self.filled)
            .map(|i| {
                let r = self.rows[(oldest + i) % self.spec.rows];
                (r.start, r.value)
            })
            .collect()
    }

    pub fn footprint_bytes(&self) -> usize {
        self.rows.len() * std::mem::size_of::<Row>()
    }

    fn check(&self, ts: u64) -> Result<(), RrdError> {
        match self.open {
            Some(acc) if self.slot_of(ts) < acc.slot => {
                Err(RrdError::StaleSample { timestamp: ts, open_slot: acc.slot })
            }
            _ => Ok(()),
        }
    }

    fn push(&mut self, row: Row) {
        self.rows[self.cursor] = row;
        self.cursor = (self.cursor + 1) % self.spec.rows;
        self.filled = (self.filled + 1).min(self.spec.rows);
    }

    fn fold(&mut self, ts: u64, v: f64) {
        let slot = self.slot_of(ts);
        match &mut self.open {
            None => self.open = Some(Accumulator::open(slot, v)),
            Some(acc) if acc.slot == slot => acc.add(v),
            Some(acc) => {
                let done = *acc;
                self.push(Row { start: done.slot, value: Some(done.value(self.spec.consolidation)) });
                // Skipped slots become Unknown rows; only the last `rows` of them can survive.
                let step = self.spec.step;
                let first_gap = done.slot + step;
                let keep_from = slot.saturating_sub(self.spec.rows as u64 * step).max(first_gap);
                let mut s = keep_from;
                while s < slot {
                    self.push(Row { start: s, value: None });
                    s += step;
                }
                self.open = Some(Accumulator::open(slot, v));
            }
        }
    }

    /// Whether the archive's capacity reaches back to `start`.
    fn covers(&self, start: u64) -> bool {
        match self.open {
            Some(acc) => start >= acc.slot.saturating_sub(self.spec.retention()),
            None => true,
        }
    }

    /// Consolidated value of one slot: finalized row, the open slot's
    /// provisional value, or Unknown.
    pub fn value_at(&self, slot: u64) -> Option<f64> {
        if let Some(acc) = self.open {
            if acc.slot == slot {
                return Some(acc.value(self.spec.consolidation));
            }
        }
        if self.filled == 0 || !slot.is_multiple_of(self.spec.step) {
            return None;
        }
        let oldest = self.rows[self.oldest_index()].start;
        if slot < oldest {
            return None;
        }
        let offset = ((slot - oldest) / self.spec.step) as usize;
        if offset >= self.filled {
            return None;
        }
        self.rows[(self.oldest_index() + offset) % self.spec.rows].value
    }

    pub fn query(&self, start: u64, end: u64) -> Result<Series, RrdError> {
        let points = slot_grid(self.spec.step, start, end)?
            .into_iter()
            .map(|s| Point { start: s, value: self.value_at(s) })
            .collect();
        Ok(Series { step: self.spec.step, points })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct SeriesData {
    archives: Vec<RoundRobinArchive>,
    last: Option<(u64, f64)>,
}

impl SeriesData {
    fn new(specs: &[ArchiveSpec]) -> Self {
        SeriesData { archives: specs.iter().copied().map(RoundRobinArchive::new).collect(), last: None }
    }

    fn insert(&mut self, ts: u64, v: f64) -> Result<(), RrdError> {
        for a in &self.archives {
            a.check(ts)?;
        }
        for a in &mut self.archives {
            a.fold(ts, v);
        }
        if self.last.is_none_or(|(t, _)| ts >= t) {
            self.last = Some((ts, v));
        }
        Ok(())
    }

    /// Finest archive whose capacity reaches back to `start`, else the coarsest.
    fn select(&self, start: u64) -> &RoundRobinArchive {
        self.archives
            .iter()
            .filter(|a| a.covers(start))
            .min_by_key(|a| a.spec.step)
            .or_else(|| self.archives.iter().max_by_key(|a| a.spec.step))
            .expect("series has at least one archive")
    }

    fn query(&self, start: u64, end: u64) -> Result<Series, RrdError> {
        self.select(start).query(start, end)
    }
}

#[derive(Debug, Default)]
pub struct StoreCounters {
    pub inserted: AtomicU64,
    pub stale: AtomicU64,
    pub non_finite: AtomicU64,
}

/// Concurrent map of series. Writers lock one series at a time; readers
/// never block each other.
pub struct RrdStore {
    specs: Vec<ArchiveSpec>,
    series: RwLock<HashMap<SeriesKey, Arc<RwLock<SeriesData>>>>,
    pub counters: StoreCounters,
}

impl Default for RrdStore {
    fn default() -> Self {
        Self::new(default_archives()).expect("default archive set is valid")
    }
}

impl RrdStore {
    pub fn new(mut specs: Vec<ArchiveSpec>) -> Result<Self, RrdError> {
        if specs.is_empty() {
            return Err(RrdError::InvalidSpec("at least one archive required"));
        }
        for s in &specs {
            ArchiveSpec::new(s.step, s.rows, s.consolidation)?;
        }
        specs.sort_by_key(|s| s.step);
        Ok(RrdStore { specs, series: RwLock::new(HashMap::new()), counters: StoreCounters::default() })
    }

    pub fn archive_specs(&self) -> &[ArchiveSpec] {
        &self.specs
    }

    pub fn insert(&self, key: &SeriesKey, timestamp: u64, value: f64) -> Result<(), RrdError> {
        if !value.is_finite() {
            self.counters.non_finite.fetch_add(1, Ordering::Relaxed);
            return Err(RrdError::NonFiniteValue);
        }
        if !key.is_valid() {
            return Err(RrdError::InvalidKey(key.clone()));
        }
        let existing = self.series.read().get(key).cloned();
        let entry = match existing {
            Some(e) => e,
            None => self
                .series
                .write()
                .entry(key.clone())
                .or_insert_with(|| Arc::new(RwLock::new(SeriesData::new(&self.specs))))
                .clone(),
        };
        let res = entry.write().insert(timestamp, value);
        match &res {
            Ok(()) => self.counters.inserted.fetch_add(1, Ordering::Relaxed),
            Err(_) => self.counters.stale.fetch_add(1, Ordering::Relaxed),
        };
        res
    }

    fn get(&self, key: &SeriesKey) -> Option<Arc<RwLock<SeriesData>>> {
        self.series.read().get(key).cloned()
    }

    pub fn query(&self, key: &SeriesKey, start: u64, end: u64) -> Result<Series, RrdError> {
        if start >= end {
            return Err(RrdError::BadWindow { start, end });
        }
        let s = self.get(key).ok_or_else(|| RrdError::UnknownSeries(key.clone()))?;
        let guard = s.read();
        guard.query(start, end)
    }

    /// Step of the archive a query starting at `start` would read.
    pub fn select_step(&self, key: &SeriesKey, start: u64) -> Result<u64, RrdError> {
        let s = self.get(key).ok_or_else(|| RrdError::UnknownSeries(key.clone()))?;
        let guard = s.read();
        Ok(guard.select(start).spec.step)
    }

    /// Reads the archive with exactly `step`; Unknown everywhere if the
    /// series has no such archive.
    pub fn query_step(&self, key: &SeriesKey, step: u64, start: u64, end: u64) -> Result<Series, RrdError> {
        let s = self.get(key).ok_or_else(|| RrdError::UnknownSeries(key.clone()))?;
        let guard = s.read();
        match guard.archives.iter().find(|a| a.spec.step == step) {
            Some(a) => a.query(start, end),
            None => Ok(Series {
                step,
                points: slot_grid(step, start, end)?.into_iter().map(|start| Point { start, value: None }).collect(),
            }),
        }
    }

    /// Most recent raw sample, bypassing consolidation.
    pub fn last(&self, key: &SeriesKey) -> Option<(u64, f64)> {
        self.get(key).and_then(|s| s.read().last)
    }

    pub fn contains(&self, key: &SeriesKey) -> bool {
        self.series.read().contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.series.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<SeriesKey> {
        let mut keys: Vec<_> = self.series.read().keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Bytes held by row buffers of one series.
    pub fn footprint_bytes(&self, key: &SeriesKey) -> Option<usize> {
        self.get(key).map(|s| s.read().archives.iter().map(RoundRobinArchive::footprint_bytes).sum())
    }

    /// Snapshot of one archive of a series, for inspection and tests.
    pub fn archive(&self, key: &SeriesKey, step: u64) -> Option<RoundRobinArchive> {
        self.get(key).and_then(|s| s.read().archives.iter().find(|a| a.spec.step == step).cloned())
    }

    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<(), SnapshotError> {
        let keys = self.keys();
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_u32::<BigEndian>(keys.len() as u32)?;
        for key in keys {
            let Some(entry) = self.get(&key) else { continue };
            let data = entry.read();
            write_str(&mut w, &key.hostname)?;
            write_str(&mut w, &key.metric)?;
            match data.last {
                Some((t, v)) => {
                    w.write_u8(1)?;
                    w.write_u64::<BigEndian>(t)?;
                    w.write_f64::<BigEndian>(v)?;
                }
                None => w.write_u8(0)?,
            }
            w.write_u8(data.archives.len() as u8)?;
            for a in &data.archives {
                w.write_u64::<BigEndian>(a.spec.step)?;
                w.write_u32::<BigEndian>(a.spec.rows as u32)?;
                w.write_u8(a.spec.consolidation.to_wire())?;
                w.write_u32::<BigEndian>(a.filled as u32)?;
                w.write_u32::<BigEndian>(a.cursor as u32)?;
                match a.open {
                    Some(acc) => {
                        w.write_u8(1)?;
                        w.write_u64::<BigEndian>(acc.slot)?;
                        w.write_f64::<BigEndian>(acc.sum)?;
                        w.write_u32::<BigEndian>(acc.count)?;
                        w.write_f64::<BigEndian>(acc.max)?;
                        w.write_f64::<BigEndian>(acc.last)?;
                    }
                    None => w.write_u8(0)?,
                }
                for row in &a.rows {
                    w.write_u64::<BigEndian>(row.start)?;
                    w.write_u8(row.value.is_some() as u8)?;
                    w.write_f64::<BigEndian>(row.value.unwrap_or(0.0))?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Restores a store from a snapshot. The archive layout comes from the
    /// file, not from the caller.
    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self, SnapshotError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| SnapshotError::BadHeader)?;
        if &magic != SNAPSHOT_MAGIC {
            if magic.starts_with(b"C2MSRRD") {
                return Err(SnapshotError::UnsupportedVersion(String::from_utf8_lossy(&magic[7..]).into_owned()));
            }
            return Err(SnapshotError::BadHeader);
        }
        let count = r.read_u32::<BigEndian>()?;
        let mut map = HashMap::new();
        let mut specs: Option<Vec<ArchiveSpec>> = None;
        for _ in 0..count {
            let key = SeriesKey::new(read_str(&mut r)?, read_str(&mut r)?);
            if !key.is_valid() {
                return Err(SnapshotError::Corrupt("invalid series key"));
            }
            let last = match r.read_u8()? {
                0 => None,
                1 => Some((r.read_u64::<BigEndian>()?, r.read_f64::<BigEndian>()?)),
                _ => return Err(SnapshotError::Corrupt("bad last-sample flag")),
            };
            let n = r.read_u8()?;
            if n == 0 {
                return Err(SnapshotError::Corrupt("series without archives"));
            }
            let mut archives = Vec::with_capacity(n as usize);
            for _ in 0..n {
                let step = r.read_u64::<BigEndian>()?;
                let rows = r.read_u32::<BigEndian>()?;
                let cf = Consolidation::from_wire(r.read_u8()?).ok_or(SnapshotError::Corrupt("bad consolidation"))?;
                if rows > MAX_SNAPSHOT_ROWS {
                    return Err(SnapshotError::Corrupt("row count too large"));
                }
                let spec = ArchiveSpec::new(step, rows as usize, cf)
                    .map_err(|_| SnapshotError::Corrupt("bad archive spec"))?;
                let filled = r.read_u32::<BigEndian>()? as usize;
                let cursor = r.read_u32::<BigEndian>()? as usize;
                if filled > spec.rows || cursor >= spec.rows {
                    return Err(SnapshotError::Corrupt("cursor out of range"));
                }
                let open = match r.read_u8()? {
                    0 => None,
                    1 => Some(Accumulator {
                        slot: r.read_u64::<BigEndian>()?,
                        sum: r.read_f64::<BigEndian>()?,
                        count: r.read_u32::<BigEndian>()?,
                        max: r.read_f64::<BigEndian>()?,
                        last: r.read_f64::<BigEndian>()?,
                    }),
                    _ => return Err(SnapshotError::Corrupt("bad open-slot flag")),
                };
                let mut row_buf = Vec::with_capacity(spec.rows);
                for _ in 0..spec.rows {
                    let start = r.read_u64::<BigEndian>()?;
                    let known = r.read_u8()?;
                    let v = r.read_f64::<BigEndian>()?;
                    row_buf.push(Row { start, value: (known == 1).then_some(v) });
                }
                archives.push(RoundRobinArchive { spec, rows: row_buf, cursor, filled, open });
            }
            let these: Vec<_> = archives.iter().map(|a| a.spec).collect();
            match &specs {
                None => specs = Some(these),
                Some(s) if *s != these => return Err(SnapshotError::Corrupt("mixed archive layouts")),
                _ => {}
            }
            map.insert(key, Arc::new(RwLock::new(SeriesData { archives, last })));
        }
        let mut store = RrdStore::new(specs.unwrap_or_else(default_archives))
            .map_err(|_| SnapshotError::Corrupt("bad archive spec"))?;
        store.series = RwLock::new(map);
        Ok(store)
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u8(s.len() as u8)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, SnapshotError> {
    let n = r.read_u8()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| SnapshotError::Corrupt("invalid utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn avg(step: u64, rows: usize) -> ArchiveSpec {
        ArchiveSpec::new(step, rows, Consolidation::Average).unwrap()
    }

    fn key() -> SeriesKey {
        SeriesKey::new("node01", "cpu_user")
    }

    #[test]
    fn spec_bounds() {
        assert!(ArchiveSpec::new(0, 10, Consolidation::Average).is_err());
        assert!(ArchiveSpec::new(1, 1, Consolidation::Average).is_err());
        assert_eq!(avg(15, 240).retention(), 3600);
    }

    #[test]
    fn constant_slot_averages_to_constant() {
        let mut a = RoundRobinArchive::new(avg(10, 4));
        for t in 0..10 {
            a.fold(100 + t, 5.0);
        }
        a.fold(110, 1.0);
        assert_eq!(a.finalized(), vec![(100, Some(5.0))]);
    }

    #[test]
    fn one_to_ten_averages_to_five_and_a_half() {
        let mut a = RoundRobinArchive::new(avg(10, 4));
        for (i, t) in (0..10).enumerate() {
            a.fold(t, (i + 1) as f64);
        }
        a.fold(10, 0.0);
        assert_eq!(a.finalized(), vec![(0, Some(55.0 / 10.0))]);
    }

    #[test]
    fn max_and_last_consolidation() {
        let mut m = RoundRobinArchive::new(ArchiveSpec::new(10, 3, Consolidation::Max).unwrap());
        let mut l = RoundRobinArchive::new(ArchiveSpec::new(10, 3, Consolidation::Last).unwrap());
        for (t, v) in [(0, 3.0), (4, 9.0), (8, 1.0), (12, 0.0)] {
            m.fold(t, v);
            l.fold(t, v);
        }
        assert_eq!(m.finalized(), vec![(0, Some(9.0))]);
        assert_eq!(l.finalized(), vec![(0, Some(1.0))]);
    }

    #[test]
    fn stale_sample_leaves_store_unchanged() {
        let store = RrdStore::new(vec![avg(10, 4)]).unwrap();
        store.insert(&key(), 5, 1.0).unwrap();
        store.insert(&key(), 25, 2.0).unwrap();
        let before = store.archive(&key(), 10).unwrap();
        let err = store.insert(&key(), 9, 3.0).unwrap_err();
        assert!(matches!(err, RrdError::StaleSample { .. }));
        assert_eq!(store.archive(&key(), 10).unwrap(), before);
        assert_eq!(store.counters.stale.load(Ordering::Relaxed), 1);
        assert_eq!(store.last(&key()), Some((25, 2.0)));
    }

    #[test]
    fn non_finite_rejected() {
        let store = RrdStore::default();
        assert_eq!(store.insert(&key(), 1, f64::INFINITY), Err(RrdError::NonFiniteValue));
        assert!(!store.contains(&key()));
    }

    #[test]
    fn gaps_are_unknown_not_zero() {
        let mut a = RoundRobinArchive::new(avg(10, 5));
        a.fold(0, 1.0);
        a.fold(30, 2.0);
        assert_eq!(a.finalized(), vec![(0, Some(1.0)), (10, None), (20, None)]);
    }

    #[test]
    fn long_gap_wraps_without_looping_forever() {
        let mut a = RoundRobinArchive::new(avg(1, 3));
        a.fold(0, 1.0);
        a.fold(1_000_000_000, 2.0);
        assert_eq!(a.finalized(), vec![(999_999_997, None), (999_999_998, None), (999_999_999, None)]);
    }

    #[test]
    fn future_window_is_all_unknown() {
        let store = RrdStore::default();
        store.insert(&key(), 1000, 1.0).unwrap();
        let s = store.query(&key(), 9_990, 10_140).unwrap();
        assert_eq!(s.step, 15);
        assert_eq!(s.points.len(), 10);
        assert!(s.points.iter().all(|p| p.value.is_none()));
    }

    #[test]
    fn finest_covering_archive_is_chosen() {
        let store = RrdStore::default();
        let t0 = 1_700_000_000 - 1_700_000_000 % 300;
        for t in (t0..t0 + 1800).step_by(5) {
            store.insert(&key(), t, 1.0).unwrap();
        }
        assert_eq!(store.query(&key(), t0 + 600, t0 + 1200).unwrap().step, 15);
        // older than the 1 h horizon of the fine archive
        assert_eq!(store.query(&key(), t0 - 7200, t0).unwrap().step, 300);
    }

    #[test]
    fn constant_signal_reads_back_constant() {
        let store = RrdStore::default();
        let t0 = 1_700_000_100;
        for t in t0..t0 + 600 {
            store.insert(&key(), t, 3.0).unwrap();
        }
        let start = t0 - t0 % 15 + 15;
        let s = store.query(&key(), start, t0 + 585).unwrap();
        assert_eq!(s.step, 15);
        assert!(!s.points.is_empty());
        assert!(s.points.iter().all(|p| p.value == Some(3.0)));
    }

    #[test]
    fn query_errors() {
        let store = RrdStore::default();
        assert!(matches!(store.query(&key(), 0, 10), Err(RrdError::UnknownSeries(_))));
        store.insert(&key(), 1, 1.0).unwrap();
        assert!(matches!(store.query(&key(), 10, 10), Err(RrdError::BadWindow { .. })));
        assert!(matches!(store.query(&key(), 0, u64::MAX), Err(RrdError::WindowTooLarge(_))));
    }

    #[test]
    fn last_tracks_most_recent_raw_sample() {
        let store = RrdStore::default();
        assert_eq!(store.last(&key()), None);
        store.insert(&key(), 100, 7.0).unwrap();
        assert_eq!(store.last(&key()), Some((100, 7.0)));
        store.insert(&key(), 101, 8.0).unwrap();
        assert_eq!(store.last(&key()), Some((101, 8.0)));
    }

    #[test]
    fn overwrite_keeps_newest_rows() {
        let rows = 4;
        let k = 3u64;
        let mut a = RoundRobinArchive::new(avg(10, rows));
        for slot in 0..(rows as u64 + k + 1) {
            a.fold(slot * 10, slot as f64);
        }
        let fin = a.finalized();
        assert_eq!(fin.len(), rows);
        assert_eq!(fin[0], (k * 10, Some(k as f64)));
        assert_eq!(a.value_at(0), None);
    }

    #[test]
    fn footprint_is_stable() {
        let store = RrdStore::default();
        store.insert(&key(), 0, 1.0).unwrap();
        let before = store.footprint_bytes(&key()).unwrap();
        for t in 1..1_000_000u64 {
            store.insert(&key(), t, (t % 17) as f64).unwrap();
        }
        assert_eq!(store.footprint_bytes(&key()).unwrap(), before);
        assert_eq!(before, (240 + 288) * std::mem::size_of::<Row>());
    }

    #[test]
    fn snapshot_round_trip() {
        let store = RrdStore::default();
        for t in 0..2000u64 {
            store.insert(&SeriesKey::new("a", "cpu_user"), 1_700_000_000 + t, t as f64).unwrap();
            store.insert(&SeriesKey::new("b", "mem_free"), 1_700_000_000 + t * 3, 1.0).unwrap();
        }
        let mut buf = Vec::new();
        store.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"C2MSRRD1");
        let back = RrdStore::read_snapshot(&buf[..]).unwrap();
        assert_eq!(back.keys(), store.keys());
        for k in store.keys() {
            for spec in store.archive_specs() {
                assert_eq!(back.archive(&k, spec.step), store.archive(&k, spec.step));
            }
            assert_eq!(back.last(&k), store.last(&k));
        }
    }

    #[test]
    fn snapshot_rejects_other_versions() {
        let mut buf = Vec::new();
        RrdStore::default().write_snapshot(&mut buf).unwrap();
        buf[7] = b'2';
        assert!(matches!(RrdStore::read_snapshot(&buf[..]), Err(SnapshotError::UnsupportedVersion(v)) if v == "2"));
        assert!(matches!(RrdStore::read_snapshot(&b"garbage!"[..]), Err(SnapshotError::BadHeader)));
        assert!(matches!(RrdStore::read_snapshot(&b"C2MS"[..]), Err(SnapshotError::BadHeader)));
    }

    proptest! {
        #[test]
        fn truncated_snapshot_never_panics(cut in 0usize..400) {
            let store = RrdStore::new(vec![avg(5, 3)]).unwrap();
            store.insert(&key(), 12, 1.0).unwrap();
            let mut buf = Vec::new();
            store.write_snapshot(&mut buf).unwrap();
            let cut = cut.min(buf.len());
            let res = RrdStore::read_snapshot(&buf[..cut]);
            prop_assert_eq!(res.is_ok(), cut == buf.len());
        }
    }
}
