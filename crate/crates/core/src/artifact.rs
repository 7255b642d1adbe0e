//! Removal of connection artifacts before scan detection.
//!
//! Failing connection retries (mail delivery fallbacks, IPsec negotiation)
//! show up as a source hitting the same destination address and port over
//! and over. Per UTC day and source /64 we count packets whose
//! `(source /64, dst, dport, proto)` flow exceeds a repeat threshold; when
//! those make up more than a configured fraction of the source's traffic
//! that day, every packet of that source-day is dropped. The filter is
//! port-agnostic: removal never keys on specific port numbers.

use std::collections::HashMap;

use serde::Serialize;

use crate::detect::PortKey;
use crate::model::{DayStamp, PacketRecord, Prefix, Proto};

/// Whether a flow above the repeat threshold counts all of its packets as
/// duplicates or only those beyond the threshold.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DupCountMode {
    All,
    Excess,
}

impl std::str::FromStr for DupCountMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(DupCountMode::All),
            "excess" => Ok(DupCountMode::Excess),
            other => Err(format!("unknown duplicate count mode `{other}`")),
        }
    }
}

pub const DEFAULT_DUP_THRESHOLD: u64 = 5;
pub const DEFAULT_DUP_FRACTION: f64 = 0.30;

/// Duplicate accounting for one (source /64, UTC day) pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DupEntry {
    pub prefix: Prefix,
    pub day: DayStamp,
    pub packets: u64,
    pub duplicates: u64,
    pub fraction: f64,
    pub removed: bool,
}

/// Per source-day duplicate report over one record stream.
#[derive(Debug, Clone, Serialize)]
pub struct DuplicateReport {
    pub dup_count_threshold: u64,
    pub dup_fraction: f64,
    pub mode: DupCountMode,
    /// Sorted by (day, prefix) for stable output.
    pub entries: Vec<DupEntry>,
    /// Packet counts per (proto, dport) across removed source-days, most
    /// common first.
    pub top_removed_ports: Vec<(PortKey, u64)>,
}

impl DuplicateReport {
    pub fn removed(&self) -> impl Iterator<Item = &DupEntry> {
        self.entries.iter().filter(|e| e.removed)
    }

    fn removed_set(&self) -> std::collections::HashSet<(i64, u128)> {
        self.removed()
            .map(|e| (e.day.0, e.prefix.base().bits()))
            .collect()
    }
}

fn source_day(rec: &PacketRecord) -> (i64, u128) {
    let day = crate::model::utc_day(rec.ts);
    // /64 masking is a fixed shift; avoids Prefix::new in the hot loop.
    let base = rec.src.bits() & (u128::MAX << 64);
    (day, base)
}

/// Count repeat-flow packets per (source /64, UTC day) and flag source-days
/// whose duplicate fraction exceeds `dup_fraction` (strictly).
pub fn mark_duplicates(
    records: &[PacketRecord],
    dup_count_threshold: u64,
    dup_fraction: f64,
    mode: DupCountMode,
) -> DuplicateReport {
    // (day, src /64) -> ((dst, dport, proto) -> packets)
    let mut buckets: HashMap<(i64, u128), HashMap<(u128, u16, Proto), u64>> = HashMap::new();
    for rec in records {
        *buckets
            .entry(source_day(rec))
            .or_default()
            .entry((rec.dst.bits(), rec.dport, rec.proto))
            .or_insert(0) += 1;
    }

    let mut entries: Vec<DupEntry> = buckets
        .iter()
        .map(|(&(day, base), flows)| {
            let packets: u64 = flows.values().sum();
            let duplicates: u64 = flows
                .values()
                .filter(|&&c| c > dup_count_threshold)
                .map(|&c| match mode {
                    DupCountMode::All => c,
                    DupCountMode::Excess => c - dup_count_threshold,
                })
                .sum();
            let fraction = duplicates as f64 / packets as f64;
            DupEntry {
                prefix: Prefix::new(crate::model::Address::new(base), 64)
                    .expect("64 is a valid length"),
                day: DayStamp(day),
                packets,
                duplicates,
                fraction,
                removed: fraction > dup_fraction,
            }
        })
        .collect();
    entries.sort_by_key(|e| (e.day.0, e.prefix.base()));

    let removed: std::collections::HashSet<(i64, u128)> = entries
        .iter()
        .filter(|e| e.removed)
        .map(|e| (e.day.0, e.prefix.base().bits()))
        .collect();
    let mut port_counts: HashMap<PortKey, u64> = HashMap::new();
    for rec in records {
        if removed.contains(&source_day(rec)) {
            *port_counts
                .entry(PortKey {
                    proto: rec.proto,
                    port: rec.dport,
                })
                .or_insert(0) += 1;
        }
    }
    let mut top_removed_ports: Vec<_> = port_counts.into_iter().collect();
    top_removed_ports.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));

    DuplicateReport {
        dup_count_threshold,
        dup_fraction,
        mode,
        entries,
        top_removed_ports,
    }
}

/// Drop every packet of the report's removed source-days; everything else
/// passes through unchanged. Returns the retained stream and the removed
/// source-day entries.
pub fn filter_sources(
    records: &[PacketRecord],
    report: &DuplicateReport,
) -> (Vec<PacketRecord>, Vec<DupEntry>) {
    let removed = report.removed_set();
    let kept = records
        .iter()
        .filter(|rec| !removed.contains(&source_day(rec)))
        .copied()
        .collect();
    (kept, report.removed().cloned().collect())
}
