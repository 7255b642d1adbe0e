//! Scan characterization metrics: durations, traffic concentration, port
//! targeting, DNS-exposure attribution of targets, target density per /64,
//! Hamming-weight analysis of target IIDs, hitlist overlap, weekly series,
//! and per-AS accounting.
//!
//! Everything here is a pure function over detected events (plus an oracle
//! or lookup table where needed). Operations that need the complete target
//! set reject events whose stored address list was capped.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::detect::{PortKey, ScanEvent};
use crate::ingest::{AsnTable, DnsOracle};
use crate::model::{iso_week_label, prefix_of, Address, PacketRecord, Prefix};

#[derive(Debug, Error)]
pub enum CharacterizeError {
    #[error("event {key} has a capped address set ({distinct} distinct); re-run detection with a higher cap")]
    CappedEvent { key: Prefix, distinct: u64 },
    #[error("event {0} has an empty target set")]
    EmptyTargets(Prefix),
}

fn full_targets(event: &ScanEvent) -> Result<&[Address], CharacterizeError> {
    event
        .dsts
        .addresses()
        .ok_or_else(|| CharacterizeError::CappedEvent {
            key: event.key,
            distinct: event.dsts.distinct(),
        })
}

/// Duration summary for the events of one aggregation length.
#[derive(Debug, Clone, Serialize)]
pub struct DurationStats {
    pub count: usize,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    /// Sorted durations, for downstream percentile work.
    #[serde(skip)]
    pub durations: Vec<f64>,
}

fn median_of_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Durations (`last_ts - first_ts`) summarized per aggregation length.
pub fn duration_stats(events: &[ScanEvent]) -> BTreeMap<u8, DurationStats> {
    let mut by_length: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for event in events {
        by_length
            .entry(event.length())
            .or_default()
            .push(event.last_ts - event.first_ts);
    }
    by_length
        .into_iter()
        .map(|(length, mut durations)| {
            durations.sort_by(|a, b| a.partial_cmp(b).expect("finite durations"));
            let stats = DurationStats {
                count: durations.len(),
                median: median_of_sorted(&durations),
                max: *durations.last().expect("non-empty group"),
                mean: durations.iter().sum::<f64>() / durations.len() as f64,
                durations,
            };
            (length, stats)
        })
        .collect()
}

/// Port-targeting class of a scan, derived from the fraction `f` of
/// packets hitting the scan's most common port: `f > 0.5` is single-port,
/// then `f > 0.09` (fewer than 10 ports), `f > 0.009` (fewer than 100),
/// otherwise more than 100 ports.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum PortClass {
    #[serde(rename = "single")]
    Single,
    #[serde(rename = "under10")]
    Under10,
    #[serde(rename = "under100")]
    Under100,
    #[serde(rename = "over100")]
    Over100,
}

impl std::fmt::Display for PortClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PortClass::Single => "single",
            PortClass::Under10 => "under10",
            PortClass::Under100 => "under100",
            PortClass::Over100 => "over100",
        })
    }
}

pub fn port_class(event: &ScanEvent) -> PortClass {
    let total: u64 = event.ports.values().sum();
    let max = event.ports.values().copied().max().unwrap_or(0);
    if total == 0 {
        return PortClass::Over100;
    }
    let f = max as f64 / total as f64;
    if f > 0.5 {
        PortClass::Single
    } else if f > 0.09 {
        PortClass::Under10
    } else if f > 0.009 {
        PortClass::Under100
    } else {
        PortClass::Over100
    }
}

/// Normalized distributions of scans, sources, and packets over the four
/// port classes. Sources are deduplicated by key and classified by their
/// highest-packet scan.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MultiportBreakdown {
    pub scans: BTreeMap<PortClass, f64>,
    pub sources: BTreeMap<PortClass, f64>,
    pub packets: BTreeMap<PortClass, f64>,
}

pub fn multiport_breakdown(events: &[ScanEvent]) -> MultiportBreakdown {
    if events.is_empty() {
        return MultiportBreakdown::default();
    }
    let mut scans: BTreeMap<PortClass, u64> = BTreeMap::new();
    let mut packets: BTreeMap<PortClass, u64> = BTreeMap::new();
    let mut best_per_source: HashMap<Prefix, &ScanEvent> = HashMap::new();
    for event in events {
        let class = port_class(event);
        *scans.entry(class).or_insert(0) += 1;
        *packets.entry(class).or_insert(0) += event.packets;
        best_per_source
            .entry(event.key)
            .and_modify(|best| {
                if (event.packets, -event.first_ts) > (best.packets, -best.first_ts) {
                    *best = event;
                }
            })
            .or_insert(event);
    }
    let mut sources: BTreeMap<PortClass, u64> = BTreeMap::new();
    for event in best_per_source.values() {
        *sources.entry(port_class(event)).or_insert(0) += 1;
    }
    let normalize = |counts: BTreeMap<PortClass, u64>| {
        let total: u64 = counts.values().sum();
        counts
            .into_iter()
            .map(|(class, c)| (class, c as f64 / total as f64))
            .collect()
    };
    MultiportBreakdown {
        scans: normalize(scans),
        sources: normalize(sources),
        packets: normalize(packets),
    }
}

/// One port's share in a ranked table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortShare {
    pub port: PortKey,
    pub share: f64,
}

/// Top ports by packet share, by fraction of scans containing the port,
/// and by fraction of sources containing the port.
#[derive(Debug, Clone, Serialize)]
pub struct TopPorts {
    pub by_packets: Vec<PortShare>,
    pub by_scans: Vec<PortShare>,
    pub by_sources: Vec<PortShare>,
}

pub fn top_ports(events: &[ScanEvent], k: usize) -> TopPorts {
    let total_packets: u64 = events.iter().map(|e| e.packets).sum();
    let total_scans = events.len() as u64;
    let sources: HashSet<Prefix> = events.iter().map(|e| e.key).collect();
    let total_sources = sources.len() as u64;

    let mut packet_counts: BTreeMap<PortKey, u64> = BTreeMap::new();
    let mut scan_counts: BTreeMap<PortKey, u64> = BTreeMap::new();
    let mut source_sets: BTreeMap<PortKey, HashSet<Prefix>> = BTreeMap::new();
    for event in events {
        for (&port, &count) in &event.ports {
            *packet_counts.entry(port).or_insert(0) += count;
            *scan_counts.entry(port).or_insert(0) += 1;
            source_sets.entry(port).or_default().insert(event.key);
        }
    }

    let rank = |counts: Vec<(PortKey, u64)>, total: u64| -> Vec<PortShare> {
        if total == 0 {
            return Vec::new();
        }
        let mut rows: Vec<PortShare> = counts
            .into_iter()
            .map(|(port, c)| PortShare {
                port,
                share: c as f64 / total as f64,
            })
            .collect();
        rows.sort_by(|a, b| {
            b.share
                .partial_cmp(&a.share)
                .expect("finite shares")
                .then_with(|| a.port.port.cmp(&b.port.port))
                .then_with(|| a.port.proto.cmp(&b.port.proto))
        });
        rows.truncate(k);
        rows
    };

    TopPorts {
        by_packets: rank(packet_counts.into_iter().collect(), total_packets),
        by_scans: rank(scan_counts.into_iter().collect(), total_scans),
        by_sources: rank(
            source_sets
                .into_iter()
                .map(|(p, s)| (p, s.len() as u64))
                .collect(),
            total_sources,
        ),
    }
}

/// Cumulative packet share of the top-k sources in one period.
#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationRow {
    pub week: String,
    pub total_packets: u64,
    /// (k, cumulative share), in the order the ks were requested.
    pub shares: Vec<(usize, f64)>,
}

/// Week-by-week share of scan packets sent by the top-k sources.
pub fn concentration(events: &[ScanEvent], ks: &[usize]) -> Vec<ConcentrationRow> {
    let mut weeks: BTreeMap<String, HashMap<Prefix, u64>> = BTreeMap::new();
    for event in events {
        *weeks
            .entry(iso_week_label(event.first_ts))
            .or_default()
            .entry(event.key)
            .or_insert(0) += event.packets;
    }
    weeks
        .into_iter()
        .map(|(week, per_source)| {
            let total: u64 = per_source.values().sum();
            let mut counts: Vec<(Prefix, u64)> = per_source.into_iter().collect();
            counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let shares = ks
                .iter()
                .map(|&k| {
                    let top: u64 = counts.iter().take(k).map(|(_, c)| c).sum();
                    (k, top as f64 / total as f64)
                })
                .collect();
            ConcentrationRow {
                week,
                total_packets: total,
                shares,
            }
        })
        .collect()
}

/// DNS-exposure split of one event's targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DnsAttribution {
    pub in_dns: u64,
    pub not_in_dns: u64,
    pub fraction_not_in_dns: f64,
}

pub fn dns_attribution(
    event: &ScanEvent,
    oracle: &DnsOracle,
) -> Result<DnsAttribution, CharacterizeError> {
    let targets = full_targets(event)?;
    let in_dns = targets.iter().filter(|a| oracle.contains(**a)).count() as u64;
    let not_in_dns = targets.len() as u64 - in_dns;
    Ok(DnsAttribution {
        in_dns,
        not_in_dns,
        fraction_not_in_dns: if targets.is_empty() {
            0.0
        } else {
            not_in_dns as f64 / targets.len() as f64
        },
    })
}

/// Fraction of not-in-DNS targets preceded by an in-DNS probe in the same
/// prefix of the given length. `None` when the event has no not-in-DNS
/// targets.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearbyFraction {
    pub length: u8,
    pub fraction: Option<f64>,
}

pub const NEARBY_LENGTHS: [u8; 4] = [124, 120, 116, 112];

/// Nearby-probe analysis over an event's packets (time-sorted).
///
/// For each not-in-DNS target, the condition at length `L` holds iff some
/// strictly earlier probe of the event targeted an in-DNS address sharing
/// the top `L` bits.
pub fn nearby_in_dns(
    packets: &[PacketRecord],
    oracle: &DnsOracle,
    lengths: &[u8],
) -> Vec<NearbyFraction> {
    let mut seen = HashSet::new();
    let mut targets = Vec::new();
    for rec in packets {
        if seen.insert(rec.dst) {
            targets.push(rec.dst);
        }
    }
    nearby_in_dns_targets(&targets, oracle, lengths)
}

/// Same analysis over a distinct target list in first-probe order (the
/// form stored on events).
pub fn nearby_in_dns_targets(
    targets: &[Address],
    oracle: &DnsOracle,
    lengths: &[u8],
) -> Vec<NearbyFraction> {
    lengths
        .iter()
        .map(|&length| {
            let mask = if length == 0 {
                0u128
            } else {
                u128::MAX << (128 - length as u32)
            };
            let mut seen_in_dns: HashSet<u128> = HashSet::new();
            let mut not_in_dns = 0u64;
            let mut with_nearby = 0u64;
            for &target in targets {
                if oracle.contains(target) {
                    seen_in_dns.insert(target.bits() & mask);
                } else {
                    not_in_dns += 1;
                    if seen_in_dns.contains(&(target.bits() & mask)) {
                        with_nearby += 1;
                    }
                }
            }
            NearbyFraction {
                length,
                fraction: (not_in_dns > 0).then(|| with_nearby as f64 / not_in_dns as f64),
            }
        })
        .collect()
}

/// Distribution of distinct targets per destination /64.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetsPerDst64 {
    pub median: f64,
    /// targets-per-prefix count -> number of /64 prefixes with that count.
    pub histogram: BTreeMap<u64, u64>,
}

pub fn targets_per_dst64(event: &ScanEvent) -> Result<TargetsPerDst64, CharacterizeError> {
    let targets = full_targets(event)?;
    if targets.is_empty() {
        return Err(CharacterizeError::EmptyTargets(event.key));
    }
    let mut per_prefix: HashMap<u128, u64> = HashMap::new();
    for target in targets {
        *per_prefix
            .entry(target.bits() & (u128::MAX << 64))
            .or_insert(0) += 1;
    }
    let mut counts: Vec<f64> = per_prefix.values().map(|&c| c as f64).collect();
    counts.sort_by(|a, b| a.partial_cmp(b).expect("finite counts"));
    let mut histogram: BTreeMap<u64, u64> = BTreeMap::new();
    for &c in per_prefix.values() {
        *histogram.entry(c).or_insert(0) += 1;
    }
    Ok(TargetsPerDst64 {
        median: median_of_sorted(&counts),
        histogram,
    })
}

/// Hamming-weight histogram of target IIDs. A mean below
/// [`LOW_WEIGHT_MEAN`] flags structured (non-random) target generation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HammingDistribution {
    /// Counts per weight 0..=64.
    pub histogram: Vec<u64>,
    pub mean: f64,
    pub low_weight: bool,
}

/// Mean-weight threshold below which IIDs are marked non-random; far below
/// the Binomial(64, 0.5) mean of 32.
pub const LOW_WEIGHT_MEAN: f64 = 24.0;

pub fn hamming_distribution(event: &ScanEvent) -> Result<HammingDistribution, CharacterizeError> {
    let targets = full_targets(event)?;
    if targets.is_empty() {
        return Err(CharacterizeError::EmptyTargets(event.key));
    }
    let mut histogram = vec![0u64; 65];
    let mut sum = 0u64;
    for target in targets {
        let w = crate::model::hamming_weight_iid(*target);
        histogram[w as usize] += 1;
        sum += w as u64;
    }
    let mean = sum as f64 / targets.len() as f64;
    Ok(HammingDistribution {
        histogram,
        mean,
        low_weight: mean < LOW_WEIGHT_MEAN,
    })
}

/// Share of an event's targets present in a hitlist.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HitlistOverlap {
    pub fraction: f64,
    pub distinct_targets: u64,
}

pub fn hitlist_overlap(
    event: &ScanEvent,
    oracle: &DnsOracle,
) -> Result<HitlistOverlap, CharacterizeError> {
    let targets = full_targets(event)?;
    if targets.is_empty() {
        return Err(CharacterizeError::EmptyTargets(event.key));
    }
    let hits = targets.iter().filter(|a| oracle.contains(**a)).count();
    Ok(HitlistOverlap {
        fraction: hits as f64 / targets.len() as f64,
        distinct_targets: targets.len() as u64,
    })
}

/// Counts for one (week, aggregation length) bucket.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WeeklyBucket {
    pub scans: u64,
    pub sources: u64,
    pub packets: u64,
}

/// Scan/source/packet counts per ISO week (of `first_ts`) and per
/// aggregation length.
#[derive(Debug, Clone, Default, Serialize)]
pub struct WeeklySeries {
    pub weeks: BTreeMap<String, BTreeMap<u8, WeeklyBucket>>,
}

pub fn weekly_series(events: &[ScanEvent]) -> WeeklySeries {
    let mut sources: BTreeMap<(String, u8), HashSet<Prefix>> = BTreeMap::new();
    let mut weeks: BTreeMap<String, BTreeMap<u8, WeeklyBucket>> = BTreeMap::new();
    for event in events {
        let week = iso_week_label(event.first_ts);
        let bucket = weeks
            .entry(week.clone())
            .or_default()
            .entry(event.length())
            .or_default();
        bucket.scans += 1;
        bucket.packets += event.packets;
        sources
            .entry((week, event.length()))
            .or_default()
            .insert(event.key);
    }
    for ((week, length), set) in sources {
        weeks
            .get_mut(&week)
            .expect("bucket created above")
            .get_mut(&length)
            .expect("bucket created above")
            .sources = set.len() as u64;
    }
    WeeklySeries { weeks }
}

/// One AS row in the per-AS accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsRow {
    pub rank: usize,
    /// `None` groups events whose key has no covering table entry.
    pub asn: Option<u32>,
    pub packets: u64,
    pub packet_share: f64,
    pub srcs_48: u64,
    pub srcs_64: u64,
    pub srcs_128: u64,
}

/// Ranked ASes by scan packets with multi-granularity source counts.
#[derive(Debug, Clone, Serialize)]
pub struct AsReport {
    /// Aggregation length whose events supplied the packet counts.
    pub packet_length: u8,
    pub rows: Vec<AsRow>,
}

/// Per-AS packets and distinct scan-source counts at /48, /64, and /128.
///
/// Packet totals come from the `packet_length` stratum (by default /64,
/// falling back to the coarsest available). Each source-count column is
/// computed from the events of its own stratum by re-keying the observed
/// source addresses at that length, so a column counts sources *detected
/// at* that aggregation; a /48 column can therefore exceed the /64 one.
/// Columns with no matching stratum fall back to re-keying the
/// packet stratum's source samples.
pub fn as_report(
    events_by_length: &BTreeMap<u8, Vec<ScanEvent>>,
    table: &AsnTable,
    k: usize,
    packet_length: Option<u8>,
) -> AsReport {
    let packet_length = packet_length
        .filter(|l| events_by_length.contains_key(l))
        .or_else(|| {
            if events_by_length.contains_key(&64) {
                Some(64)
            } else {
                events_by_length.keys().next().copied()
            }
        })
        .unwrap_or(64);

    let mut packets: BTreeMap<Option<u32>, u64> = BTreeMap::new();
    if let Some(events) = events_by_length.get(&packet_length) {
        for event in events {
            *packets.entry(table.lookup(event.key.base())).or_insert(0) += event.packets;
        }
    }

    let mut source_sets: HashMap<(Option<u32>, u8), HashSet<Prefix>> = HashMap::new();
    for &column in &[48u8, 64, 128] {
        let events: &[ScanEvent] = events_by_length
            .get(&column)
            .or_else(|| events_by_length.get(&packet_length))
            .map(|v| v.as_slice())
            .unwrap_or(&[]);
        for event in events {
            let asn = table.lookup(event.key.base());
            let set = source_sets.entry((asn, column)).or_default();
            for src in event.srcs.sample() {
                set.insert(prefix_of(*src, column).expect("column lengths are valid"));
            }
        }
    }

    let total_packets: u64 = packets.values().sum();
    let mut rows: Vec<AsRow> = packets
        .into_iter()
        .map(|(asn, pkts)| AsRow {
            rank: 0,
            asn,
            packets: pkts,
            packet_share: if total_packets == 0 {
                0.0
            } else {
                pkts as f64 / total_packets as f64
            },
            srcs_48: source_sets
                .get(&(asn, 48))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
            srcs_64: source_sets
                .get(&(asn, 64))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
            srcs_128: source_sets
                .get(&(asn, 128))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
        })
        .collect();
    // Make sure ASes that only appear in non-packet strata still get rows.
    let present: HashSet<Option<u32>> = rows.iter().map(|r| r.asn).collect();
    let mut extra: BTreeMap<Option<u32>, ()> = BTreeMap::new();
    for (asn, _) in source_sets.keys() {
        if !present.contains(asn) {
            extra.insert(*asn, ());
        }
    }
    for (asn, ()) in extra {
        rows.push(AsRow {
            rank: 0,
            asn,
            packets: 0,
            packet_share: 0.0,
            srcs_48: source_sets
                .get(&(asn, 48))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
            srcs_64: source_sets
                .get(&(asn, 64))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
            srcs_128: source_sets
                .get(&(asn, 128))
                .map(|s| s.len() as u64)
                .unwrap_or(0),
        });
    }
    rows.sort_by(|a, b| {
        b.packets
            .cmp(&a.packets)
            .then_with(|| a.asn.is_none().cmp(&b.asn.is_none()))
            .then_with(|| a.asn.cmp(&b.asn))
    });
    rows.truncate(k);
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    AsReport {
        packet_length,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{detect, DetectParams, Detector, TargetSet};
    use crate::model::Proto;

    fn addr(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn prefix(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn event(key: &str, first_ts: f64, last_ts: f64, ports: &[(&str, u16, u64)]) -> ScanEvent {
        let mut port_map = BTreeMap::new();
        let mut packets = 0;
        for &(proto, port, count) in ports {
            port_map.insert(
                PortKey {
                    proto: proto.parse().unwrap(),
                    port,
                },
                count,
            );
            packets += count;
        }
        let key = prefix(key);
        ScanEvent {
            key,
            detector: Detector::Cdn,
            first_ts,
            last_ts,
            packets,
            ports: port_map,
            dsts: TargetSet::from_parts(vec![addr("2001:db8:f::1")], 1, false).unwrap(),
            srcs: TargetSet::from_parts(vec![key.base()], 1, false).unwrap(),
        }
    }

    fn with_targets(mut e: ScanEvent, targets: Vec<Address>) -> ScanEvent {
        let n = targets.len() as u64;
        e.dsts = TargetSet::from_parts(targets, n, false).unwrap();
        e
    }

    #[test]
    fn duration_stats_per_length() {
        let events = vec![
            event("2001:db8::/64", 100.0, 100.0, &[("tcp", 22, 1)]),
            event("2001:db8:1::/64", 0.0, 94.0, &[("tcp", 22, 1)]),
            event("2001:db8:2::/64", 0.0, 200.0, &[("tcp", 22, 1)]),
            event("2001:db8::/48", 0.0, 10.0, &[("tcp", 22, 1)]),
        ];
        let stats = duration_stats(&events);
        assert_eq!(stats[&64].count, 3);
        assert_eq!(stats[&64].median, 94.0);
        assert_eq!(stats[&64].max, 200.0);
        assert_eq!(stats[&48].median, 10.0);
        // Even count: average of the two middle values.
        let pair = vec![
            event("2001:db8::/64", 0.0, 10.0, &[("tcp", 22, 1)]),
            event("2001:db8:1::/64", 0.0, 20.0, &[("tcp", 22, 1)]),
        ];
        assert_eq!(duration_stats(&pair)[&64].median, 15.0);
    }

    #[test]
    fn port_class_thresholds() {
        let single = event(
            "2001:db8::/64",
            0.0,
            1.0,
            &[("tcp", 22, 60), ("tcp", 80, 40)],
        );
        assert_eq!(port_class(&single), PortClass::Single);

        let ten: Vec<(&str, u16, u64)> = (0..10).map(|i| ("tcp", 8000 + i, 10u64)).collect();
        let e = event("2001:db8::/64", 0.0, 1.0, &ten);
        assert_eq!(port_class(&e), PortClass::Under10);

        let many: Vec<(&str, u16, u64)> = (0..445).map(|i| ("tcp", 1000 + i, 2u64)).collect();
        let e = event("2001:db8::/64", 0.0, 1.0, &many);
        assert_eq!(port_class(&e), PortClass::Over100);

        let mid: Vec<(&str, u16, u64)> = (0..50).map(|i| ("tcp", 1000 + i, 2u64)).collect();
        let e = event("2001:db8::/64", 0.0, 1.0, &mid);
        assert_eq!(port_class(&e), PortClass::Under100);
    }

    #[test]
    fn port_class_is_scale_invariant() {
        for scale in [1u64, 3, 100] {
            let e = event(
                "2001:db8::/64",
                0.0,
                1.0,
                &[("tcp", 22, 6 * scale), ("tcp", 80, 4 * scale)],
            );
            assert_eq!(port_class(&e), PortClass::Single);
        }
    }

    #[test]
    fn multiport_breakdown_normalizes() {
        let events = vec![
            event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 100)]),
            event(
                "2001:db8:1::/64",
                0.0,
                1.0,
                &[("tcp", 22, 50), ("tcp", 23, 50)],
            ),
        ];
        let breakdown = multiport_breakdown(&events);
        for dist in [&breakdown.scans, &breakdown.sources, &breakdown.packets] {
            let sum: f64 = dist.values().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        assert_eq!(breakdown.scans[&PortClass::Single], 0.5);
        assert_eq!(breakdown.scans[&PortClass::Under10], 0.5);

        let empty = multiport_breakdown(&[]);
        assert!(empty.scans.is_empty());

        let one = multiport_breakdown(&events[..1]);
        assert_eq!(one.scans[&PortClass::Single], 1.0);
        assert_eq!(one.sources[&PortClass::Single], 1.0);
        assert_eq!(one.packets[&PortClass::Single], 1.0);
    }

    #[test]
    fn top_ports_shares() {
        let one = vec![event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)])];
        let top = top_ports(&one, 5);
        for table in [&top.by_packets, &top.by_scans, &top.by_sources] {
            assert_eq!(table.len(), 1);
            assert_eq!(table[0].share, 1.0);
        }

        let two = vec![
            event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)]),
            event("2001:db8:1::/64", 0.0, 1.0, &[("tcp", 23, 10)]),
        ];
        let top = top_ports(&two, 5);
        assert_eq!(top.by_scans.len(), 2);
        assert!(top.by_scans.iter().all(|r| r.share == 0.5));
        assert!(top.by_sources.iter().all(|r| r.share == 0.5));
        // Equal shares break ties by ascending port.
        assert_eq!(top.by_scans[0].port.port, 22);
    }

    #[test]
    fn concentration_shares() {
        let week0 = 1_609_459_200.0; // 2021-01-01
        let events = vec![
            event("2001:db8::/64", week0, week0 + 1.0, &[("tcp", 22, 100)]),
            event(
                "2001:db8:1::/64",
                week0 + 10.0,
                week0 + 11.0,
                &[("tcp", 22, 100)],
            ),
        ];
        let rows = concentration(&events, &[1, 2, 3]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].shares, vec![(1, 0.5), (2, 1.0), (3, 1.0)]);

        let single = concentration(&events[..1], &[1]);
        assert_eq!(single[0].shares, vec![(1, 1.0)]);
    }

    #[test]
    fn dns_attribution_partitions_targets() {
        let targets: Vec<Address> = (1..=10)
            .map(|i| addr(&format!("2001:db8:f::{i:x}")))
            .collect();
        let e = with_targets(
            event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)]),
            targets.clone(),
        );

        let all_in = DnsOracle::from_addresses(targets.clone());
        let attr = dns_attribution(&e, &all_in).unwrap();
        assert_eq!((attr.in_dns, attr.not_in_dns), (10, 0));
        assert_eq!(attr.fraction_not_in_dns, 0.0);

        let none_in = DnsOracle::from_addresses([]);
        let attr = dns_attribution(&e, &none_in).unwrap();
        assert_eq!((attr.in_dns, attr.not_in_dns), (0, 10));
        assert_eq!(attr.fraction_not_in_dns, 1.0);

        let half_in = DnsOracle::from_addresses(targets[..5].to_vec());
        let attr = dns_attribution(&e, &half_in).unwrap();
        assert_eq!(attr.in_dns + attr.not_in_dns, e.dsts.distinct());
        assert_eq!(attr.fraction_not_in_dns, 0.5);
    }

    #[test]
    fn capped_events_are_rejected() {
        let mut e = event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)]);
        e.dsts = TargetSet::from_parts(vec![addr("2001:db8:f::1")], 5, true).unwrap();
        let oracle = DnsOracle::from_addresses([]);
        assert!(matches!(
            dns_attribution(&e, &oracle),
            Err(CharacterizeError::CappedEvent { .. })
        ));
        assert!(hamming_distribution(&e).is_err());
        assert!(targets_per_dst64(&e).is_err());
        assert!(hitlist_overlap(&e, &oracle).is_err());
    }

    #[test]
    fn nearby_orders_and_lengths() {
        // ::10 and ::1f differ only in the low 4 bits: same /124.
        let a = addr("2001:db8:f::10");
        let b = addr("2001:db8:f::1f");
        let oracle = DnsOracle::from_addresses([a]);

        let fractions = nearby_in_dns_targets(&[a, b], &oracle, &NEARBY_LENGTHS);
        assert!(fractions.iter().all(|f| f.fraction == Some(1.0)));

        // Reverse order: the in-DNS probe is not previous.
        let fractions = nearby_in_dns_targets(&[b, a], &oracle, &NEARBY_LENGTHS);
        assert!(fractions.iter().all(|f| f.fraction == Some(0.0)));
    }

    #[test]
    fn nearby_respects_prefix_length() {
        // b shares a /112 with a but not a /120 or /124.
        let a = addr("2001:db8:f::1:0010");
        let b = addr("2001:db8:f::1:f010");
        let oracle = DnsOracle::from_addresses([a]);
        let fractions = nearby_in_dns_targets(&[a, b], &oracle, &NEARBY_LENGTHS);
        let by_len: BTreeMap<u8, Option<f64>> =
            fractions.iter().map(|f| (f.length, f.fraction)).collect();
        assert_eq!(by_len[&112], Some(1.0));
        assert_eq!(by_len[&116], Some(0.0));
        assert_eq!(by_len[&120], Some(0.0));
        assert_eq!(by_len[&124], Some(0.0));
    }

    #[test]
    fn nearby_is_monotone_in_length() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut targets = Vec::new();
        let mut hitlist = Vec::new();
        for i in 0..200u32 {
            let base = 0x2001_0db8_000f_0000_0000_0000_0000_0000u128 | (rng.gen::<u16>() as u128) << 8;
            let t = Address::new(base | rng.gen_range(0..256));
            if i % 3 == 0 {
                hitlist.push(t);
            }
            targets.push(t);
        }
        let oracle = DnsOracle::from_addresses(hitlist);
        let fractions = nearby_in_dns_targets(&targets, &oracle, &NEARBY_LENGTHS);
        // /124 strictest ... /112 loosest; fractions must not decrease.
        for pair in fractions.windows(2) {
            let (strict, loose) = (&pair[0], &pair[1]);
            assert!(strict.length > loose.length);
            if let (Some(s), Some(l)) = (strict.fraction, loose.fraction) {
                assert!(l >= s, "nearby fraction decreased: {s} -> {l}");
            }
        }
    }

    #[test]
    fn targets_per_dst64_medians() {
        let own: Vec<Address> = (0..9)
            .map(|i| addr(&format!("2001:db8:f:{i:x}::1")))
            .collect();
        let e = with_targets(event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 9)]), own);
        let stats = targets_per_dst64(&e).unwrap();
        assert_eq!(stats.median, 1.0);
        assert_eq!(stats.histogram[&1], 9);

        let same: Vec<Address> = (1..=9)
            .map(|i| addr(&format!("2001:db8:f::{i:x}")))
            .collect();
        let e = with_targets(event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 9)]), same);
        assert_eq!(targets_per_dst64(&e).unwrap().median, 9.0);

        let pairs: Vec<Address> = (0..8)
            .flat_map(|i| {
                [
                    addr(&format!("2001:db8:f:{i:x}::1")),
                    addr(&format!("2001:db8:f:{i:x}::2")),
                ]
            })
            .collect();
        let e = with_targets(event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 16)]), pairs);
        assert_eq!(targets_per_dst64(&e).unwrap().median, 2.0);
    }

    #[test]
    fn hamming_distribution_flags_low_weight() {
        let targets: Vec<Address> = (0..10)
            .map(|i| addr(&format!("2001:db8:f:{i:x}::1")))
            .collect();
        let e = with_targets(
            event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)]),
            targets,
        );
        let dist = hamming_distribution(&e).unwrap();
        assert_eq!(dist.histogram[1], 10);
        assert_eq!(dist.mean, 1.0);
        assert!(dist.low_weight);

        let empty = with_targets(event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 0)]), vec![]);
        assert!(hamming_distribution(&empty).is_err());
    }

    #[test]
    fn hitlist_overlap_fractions() {
        let targets: Vec<Address> = (1..=4)
            .map(|i| addr(&format!("2001:db8:f::{i:x}")))
            .collect();
        let e = with_targets(
            event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 4)]),
            targets.clone(),
        );
        let all = DnsOracle::from_addresses(targets.clone());
        assert_eq!(hitlist_overlap(&e, &all).unwrap().fraction, 1.0);
        let none = DnsOracle::from_addresses([]);
        assert_eq!(hitlist_overlap(&e, &none).unwrap().fraction, 0.0);
        let half = DnsOracle::from_addresses(targets[..2].to_vec());
        assert_eq!(hitlist_overlap(&e, &half).unwrap().fraction, 0.5);
    }

    #[test]
    fn weekly_series_buckets_and_conserves() {
        let week0 = 1_609_459_200.0; // 2021-01-01, ISO week 2020-W53
        let events = vec![
            event("2001:db8::/64", week0, week0 + 1.0, &[("tcp", 22, 10)]),
            // Spans the week boundary; counted in its first_ts week.
            event(
                "2001:db8:1::/64",
                week0 + 2.0 * 86_400.0,
                week0 + 9.0 * 86_400.0,
                &[("tcp", 22, 20)],
            ),
            event(
                "2001:db8::/64",
                week0 + 7.0 * 86_400.0,
                week0 + 7.5 * 86_400.0,
                &[("tcp", 22, 30)],
            ),
        ];
        let series = weekly_series(&events);
        assert_eq!(series.weeks.len(), 2);
        let w53 = &series.weeks["2020-W53"][&64];
        assert_eq!((w53.scans, w53.sources, w53.packets), (2, 2, 30));
        let w01 = &series.weeks["2021-W01"][&64];
        assert_eq!((w01.scans, w01.sources, w01.packets), (1, 1, 30));
        let total: u64 = series
            .weeks
            .values()
            .flat_map(|m| m.values())
            .map(|b| b.packets)
            .sum();
        assert_eq!(total, 60);

        assert!(weekly_series(&[]).weeks.is_empty());
    }

    #[test]
    fn as_report_counts_sources_per_stratum() {
        // A /48-spread source detected only at /48 plus a single-address
        // source detected at every length, both in one AS.
        let mut records = Vec::new();
        for i in 0..120 {
            records.push(PacketRecord {
                ts: i as f64,
                src: addr(&format!("2001:db8:0:{:x}::1", i % 4)),
                dst: addr(&format!("2001:db8:f::{:x}", i + 1)),
                proto: Proto::Tcp,
                sport: 40000,
                dport: 22,
                len: 60,
            });
        }
        for i in 0..120 {
            records.push(PacketRecord {
                ts: i as f64,
                src: addr("2001:db8:1:2::9"),
                dst: addr(&format!("2001:db8:e::{:x}", i + 1)),
                proto: Proto::Tcp,
                sport: 40000,
                dport: 443,
                len: 60,
            });
        }
        let by_len = detect(
            &records,
            &[128, 64, 48],
            Detector::Cdn,
            &DetectParams::default(),
        )
        .unwrap();
        assert_eq!(by_len[&48].len(), 2);
        assert_eq!(by_len[&64].len(), 1);
        assert_eq!(by_len[&128].len(), 1);

        let table = AsnTable::from_entries([(prefix("2001:db8::/32"), 64496)]);
        let report = as_report(&by_len, &table, 20, None);
        assert_eq!(report.packet_length, 64);
        assert_eq!(report.rows.len(), 1);
        let row = &report.rows[0];
        assert_eq!(row.asn, Some(64496));
        assert_eq!(row.packets, 120);
        // /48 sources exceed /64 sources: the spread source only shows up
        // in the /48 stratum.
        assert_eq!(row.srcs_48, 2);
        assert_eq!(row.srcs_64, 1);
        assert_eq!(row.srcs_128, 1);
        assert!(row.srcs_48 > row.srcs_64);
    }

    #[test]
    fn as_report_unknown_and_single_source() {
        let e = event("2001:db8::/64", 0.0, 1.0, &[("tcp", 22, 10)]);
        let mut by_len = BTreeMap::new();
        by_len.insert(64u8, vec![e]);
        let table = AsnTable::from_entries([(prefix("2001:db8::/32"), 64496)]);
        let report = as_report(&by_len, &table, 20, None);
        let row = &report.rows[0];
        assert_eq!(row.asn, Some(64496));
        assert_eq!((row.srcs_48, row.srcs_64, row.srcs_128), (1, 1, 1));

        let outside = event("3fff::/64", 0.0, 1.0, &[("tcp", 22, 10)]);
        let mut by_len = BTreeMap::new();
        by_len.insert(64u8, vec![outside]);
        let report = as_report(&by_len, &table, 20, None);
        assert_eq!(report.rows[0].asn, None);
    }
}
