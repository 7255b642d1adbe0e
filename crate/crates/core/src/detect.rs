//! The scan detection engine: source aggregation, timeout sessionization,
//! the session/destination-count detector (`cdn`), and the per-port
//! detector with a packet-length entropy gate (`mawi`).
//!
//! Detection runs per source key, where a key is the source address masked
//! to a configured prefix length. Aggregating first and detecting second is
//! what lets a scan spread across an entire prefix (one packet per random
//! /128) surface at a coarse length while every finer key stays below
//! threshold.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::{Address, ModelError, PacketRecord, Prefix, Proto};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("packet list is not sorted by timestamp")]
    Unsorted,
    #[error("cannot compute entropy of an empty length list")]
    EmptyEntropyInput,
    #[error("invalid event record: {0}")]
    BadEventRecord(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which detection rule to apply.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detector {
    /// Sessionize on an inter-arrival timeout, then require a minimum
    /// number of distinct destination addresses per session.
    Cdn,
    /// Group packets by destination port within one analysis window;
    /// require many destinations, few repeats per destination, and
    /// near-zero packet-length entropy. Per-port scans of one source are
    /// merged into a multi-port event.
    Mawi,
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::Cdn => "cdn",
            Detector::Mawi => "mawi",
        })
    }
}

impl FromStr for Detector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cdn" => Ok(Detector::Cdn),
            "mawi" => Ok(Detector::Mawi),
            other => Err(format!("unknown detector `{other}`")),
        }
    }
}

/// Normalizer for packet-length entropy.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropyNorm {
    /// Divide by log2(number of packets).
    Packets,
    /// Divide by log2(number of distinct length values).
    Distinct,
}

impl FromStr for EntropyNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "packets" => Ok(EntropyNorm::Packets),
            "distinct" => Ok(EntropyNorm::Distinct),
            other => Err(format!("unknown entropy normalizer `{other}`")),
        }
    }
}

/// Scope over which the destination-count threshold is evaluated.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DstScope {
    /// Each session must reach the threshold on its own.
    Session,
    /// The union of a source's destinations across the whole trace must
    /// reach the threshold; every session of a qualifying source becomes
    /// an event.
    Source,
}

impl FromStr for DstScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "session" => Ok(DstScope::Session),
            "source" => Ok(DstScope::Source),
            other => Err(format!("unknown destination scope `{other}`")),
        }
    }
}

pub const DEFAULT_MIN_DSTS: usize = 100;
pub const DEFAULT_TIMEOUT_S: f64 = 3_600.0;
pub const DEFAULT_MAX_PKTS_PER_DST_PORT: u64 = 10;
pub const DEFAULT_ENTROPY_MAX: f64 = 0.1;
pub const DEFAULT_DST_CAP: usize = 1_000_000;
pub const DEFAULT_AGG_LENGTHS: [u8; 3] = [128, 64, 48];

/// Detection thresholds. Defaults are the reference configuration.
#[derive(Clone, Debug, Serialize)]
pub struct DetectParams {
    pub min_dsts: usize,
    pub timeout_s: f64,
    pub max_pkts_per_dst_port: u64,
    pub entropy_max: f64,
    pub entropy_norm: EntropyNorm,
    pub dst_scope: DstScope,
    /// Per-event cap on stored destination/source address lists. Distinct
    /// counts stay exact beyond the cap; the stored list is truncated to a
    /// leading sample and the event is marked capped.
    pub dst_cap: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            min_dsts: DEFAULT_MIN_DSTS,
            timeout_s: DEFAULT_TIMEOUT_S,
            max_pkts_per_dst_port: DEFAULT_MAX_PKTS_PER_DST_PORT,
            entropy_max: DEFAULT_ENTROPY_MAX,
            entropy_norm: EntropyNorm::Packets,
            dst_scope: DstScope::Session,
            dst_cap: DEFAULT_DST_CAP,
        }
    }
}

/// A protocol-qualified destination port, displayed as `tcp/22`.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortKey {
    pub proto: Proto,
    pub port: u16,
}

impl fmt::Display for PortKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.proto, self.port)
    }
}

impl Serialize for PortKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PortKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        let (proto, port) = s
            .split_once('/')
            .ok_or_else(|| serde::de::Error::custom("expected `proto/port`"))?;
        Ok(PortKey {
            proto: proto.parse().map_err(serde::de::Error::custom)?,
            port: port.parse().map_err(serde::de::Error::custom)?,
        })
    }
}

/// A distinct address set in first-observation order, truncated to a
/// leading sample once it exceeds the cap. The distinct count stays exact
/// either way.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetSet {
    list: Vec<Address>,
    distinct: u64,
    capped: bool,
}

impl TargetSet {
    fn collect<I: IntoIterator<Item = Address>>(iter: I, cap: usize) -> Self {
        let mut seen = HashSet::new();
        let mut list = Vec::new();
        let mut distinct = 0u64;
        for a in iter {
            if seen.insert(a) {
                distinct += 1;
                if (list.len()) < cap {
                    list.push(a);
                }
            }
        }
        TargetSet {
            capped: distinct > list.len() as u64,
            list,
            distinct,
        }
    }

    pub fn from_parts(list: Vec<Address>, distinct: u64, capped: bool) -> Result<Self, DetectError> {
        if !capped && distinct != list.len() as u64 {
            return Err(DetectError::BadEventRecord(format!(
                "uncapped address list of {} entries claims {} distinct",
                list.len(),
                distinct
            )));
        }
        if capped && distinct < list.len() as u64 {
            return Err(DetectError::BadEventRecord(
                "capped address list larger than its distinct count".to_string(),
            ));
        }
        Ok(TargetSet {
            list,
            distinct,
            capped,
        })
    }

    pub fn distinct(&self) -> u64 {
        self.distinct
    }

    pub fn is_capped(&self) -> bool {
        self.capped
    }

    /// The complete address list in first-observation order, or `None` if
    /// the set was capped.
    pub fn addresses(&self) -> Option<&[Address]> {
        if self.capped {
            None
        } else {
            Some(&self.list)
        }
    }

    /// The stored (possibly truncated) list.
    pub fn sample(&self) -> &[Address] {
        &self.list
    }
}

/// One detected scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanEvent {
    pub key: Prefix,
    pub detector: Detector,
    pub first_ts: f64,
    pub last_ts: f64,
    pub packets: u64,
    /// Packet counts per protocol-qualified destination port.
    pub ports: BTreeMap<PortKey, u64>,
    /// Distinct destinations in first-probe order.
    pub dsts: TargetSet,
    /// Distinct /128 source addresses observed, in first-seen order.
    pub srcs: TargetSet,
}

impl ScanEvent {
    pub fn length(&self) -> u8 {
        self.key.length()
    }

    pub fn distinct_dsts(&self) -> u64 {
        self.dsts.distinct()
    }

    pub fn to_record(&self) -> EventRecord {
        EventRecord {
            key: self.key,
            length: self.key.length(),
            detector: self.detector,
            first_ts: self.first_ts,
            last_ts: self.last_ts,
            packets: self.packets,
            distinct_dsts: self.dsts.distinct(),
            ports: self
                .ports
                .iter()
                .map(|(k, &packets)| PortCount {
                    proto: k.proto,
                    port: k.port,
                    packets,
                })
                .collect(),
            dsts: self.dsts.sample().to_vec(),
            dsts_capped: self.dsts.is_capped(),
            src_count: self.srcs.distinct(),
            srcs: self.srcs.sample().to_vec(),
            srcs_capped: self.srcs.is_capped(),
        }
    }

    pub fn from_record(rec: EventRecord) -> Result<Self, DetectError> {
        if rec.length != rec.key.length() {
            return Err(DetectError::BadEventRecord(format!(
                "length {} does not match key {}",
                rec.length, rec.key
            )));
        }
        let port_sum: u64 = rec.ports.iter().map(|p| p.packets).sum();
        if port_sum != rec.packets {
            return Err(DetectError::BadEventRecord(format!(
                "port packet counts sum to {port_sum}, event claims {}",
                rec.packets
            )));
        }
        let mut ports = BTreeMap::new();
        for p in rec.ports {
            let key = PortKey {
                proto: p.proto,
                port: p.port,
            };
            if ports.insert(key, p.packets).is_some() {
                return Err(DetectError::BadEventRecord(format!(
                    "duplicate port entry {key}"
                )));
            }
        }
        Ok(ScanEvent {
            key: rec.key,
            detector: rec.detector,
            first_ts: rec.first_ts,
            last_ts: rec.last_ts,
            packets: rec.packets,
            ports,
            dsts: TargetSet::from_parts(rec.dsts, rec.distinct_dsts, rec.dsts_capped)?,
            srcs: TargetSet::from_parts(rec.srcs, rec.src_count, rec.srcs_capped)?,
        })
    }
}

/// Packet count for one protocol-qualified port in an event record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PortCount {
    pub proto: Proto,
    pub port: u16,
    pub packets: u64,
}

/// The on-disk (ndjson) form of a [`ScanEvent`], with a stable field order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EventRecord {
    pub key: Prefix,
    pub length: u8,
    pub detector: Detector,
    pub first_ts: f64,
    pub last_ts: f64,
    pub packets: u64,
    pub distinct_dsts: u64,
    pub ports: Vec<PortCount>,
    pub dsts: Vec<Address>,
    pub dsts_capped: bool,
    pub src_count: u64,
    pub srcs: Vec<Address>,
    pub srcs_capped: bool,
}

/// Group records by source prefix at the given length. Every record lands
/// under exactly one key; per-key index lists are sorted by timestamp,
/// stable on ties by input order.
pub fn aggregate_sources(
    records: &[PacketRecord],
    length: u8,
) -> Result<BTreeMap<Prefix, Vec<u32>>, DetectError> {
    if length > 128 {
        return Err(ModelError::PrefixLength(length as u16).into());
    }
    let mask = if length == 0 {
        0u128
    } else {
        u128::MAX << (128 - length as u32)
    };
    let mut groups: HashMap<u128, Vec<u32>> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        groups
            .entry(rec.src.bits() & mask)
            .or_default()
            .push(i as u32);
    }
    let mut out = BTreeMap::new();
    for (base, mut idxs) in groups {
        // Indices are in input order already; a stable sort by ts keeps
        // input order on ties.
        idxs.sort_by(|&a, &b| {
            records[a as usize]
                .ts
                .partial_cmp(&records[b as usize].ts)
                .expect("validated timestamps are comparable")
        });
        out.insert(Prefix::new(Address::new(base), length)?, idxs);
    }
    Ok(out)
}

/// One timeout-delimited run of packets from a single source key.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub first_ts: f64,
    pub last_ts: f64,
    /// Indices into the record slice, in time order.
    pub idxs: Vec<u32>,
}

/// Split a time-sorted packet list at inter-arrival gaps strictly greater
/// than `timeout_s`. Sessions partition the input and preserve its order.
pub fn sessionize(
    records: &[PacketRecord],
    idxs: &[u32],
    timeout_s: f64,
) -> Result<Vec<Session>, DetectError> {
    let mut sessions = Vec::new();
    let mut current: Vec<u32> = Vec::new();
    let mut prev_ts = f64::NEG_INFINITY;
    for &idx in idxs {
        let ts = records[idx as usize].ts;
        if !current.is_empty() && ts < prev_ts {
            return Err(DetectError::Unsorted);
        }
        if !current.is_empty() && ts - prev_ts > timeout_s {
            sessions.push(finish_session(records, std::mem::take(&mut current)));
        }
        current.push(idx);
        prev_ts = ts;
    }
    if !current.is_empty() {
        sessions.push(finish_session(records, current));
    }
    Ok(sessions)
}

fn finish_session(records: &[PacketRecord], idxs: Vec<u32>) -> Session {
    Session {
        first_ts: records[idxs[0] as usize].ts,
        last_ts: records[*idxs.last().expect("non-empty session") as usize].ts,
        idxs,
    }
}

fn build_event(
    records: &[PacketRecord],
    key: Prefix,
    idxs: &[u32],
    detector: Detector,
    cap: usize,
) -> ScanEvent {
    let mut ports: BTreeMap<PortKey, u64> = BTreeMap::new();
    for &idx in idxs {
        let rec = &records[idx as usize];
        *ports
            .entry(PortKey {
                proto: rec.proto,
                port: rec.dport,
            })
            .or_insert(0) += 1;
    }
    ScanEvent {
        key,
        detector,
        first_ts: records[idxs[0] as usize].ts,
        last_ts: records[*idxs.last().expect("non-empty event") as usize].ts,
        packets: idxs.len() as u64,
        ports,
        dsts: TargetSet::collect(idxs.iter().map(|&i| records[i as usize].dst), cap),
        srcs: TargetSet::collect(idxs.iter().map(|&i| records[i as usize].src), cap),
    }
}

fn count_distinct_dsts(records: &[PacketRecord], idxs: &[u32]) -> usize {
    idxs.iter()
        .map(|&i| records[i as usize].dst)
        .collect::<HashSet<_>>()
        .len()
}

/// Emit one event per session that reaches the distinct-destination
/// threshold (with `DstScope::Source`, per source whose trace-wide union
/// reaches it).
pub fn detect_scans_cdn(
    records: &[PacketRecord],
    key: Prefix,
    sessions: &[Session],
    params: &DetectParams,
) -> Vec<ScanEvent> {
    match params.dst_scope {
        DstScope::Session => sessions
            .iter()
            .filter(|s| count_distinct_dsts(records, &s.idxs) >= params.min_dsts)
            .map(|s| build_event(records, key, &s.idxs, Detector::Cdn, params.dst_cap))
            .collect(),
        DstScope::Source => {
            let mut union = HashSet::new();
            for s in sessions {
                union.extend(s.idxs.iter().map(|&i| records[i as usize].dst));
            }
            if union.len() >= params.min_dsts {
                sessions
                    .iter()
                    .map(|s| build_event(records, key, &s.idxs, Detector::Cdn, params.dst_cap))
                    .collect()
            } else {
                Vec::new()
            }
        }
    }
}

/// Normalized Shannon entropy of a packet-length sample, in `[0, 1]`.
///
/// `H = -Σ p_i log2 p_i` over the distribution of distinct length values,
/// divided by `log2(N)` where `N` is the number of packets. Defined as 0
/// for a single packet or a single distinct value.
pub fn packet_length_entropy(lengths: &[u32]) -> Result<f64, DetectError> {
    packet_length_entropy_with(lengths, EntropyNorm::Packets)
}

/// Entropy with an explicit normalizer choice.
pub fn packet_length_entropy_with(
    lengths: &[u32],
    norm: EntropyNorm,
) -> Result<f64, DetectError> {
    if lengths.is_empty() {
        return Err(DetectError::EmptyEntropyInput);
    }
    let n = lengths.len() as f64;
    let mut counts: HashMap<u32, u64> = HashMap::new();
    for &len in lengths {
        *counts.entry(len).or_insert(0) += 1;
    }
    if lengths.len() == 1 || counts.len() == 1 {
        return Ok(0.0);
    }
    let h: f64 = counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    let normalizer = match norm {
        EntropyNorm::Packets => n.log2(),
        EntropyNorm::Distinct => (counts.len() as f64).log2(),
    };
    Ok(h / normalizer)
}

/// Per-port detection over one source key within one analysis window
/// (one input file). Returns the unmerged single-port events.
///
/// A `(proto, dport)` group qualifies iff it reaches `min_dsts` distinct
/// destinations, no destination receives `max_pkts_per_dst_port` or more
/// packets on the port, and the normalized entropy of its packet lengths
/// stays below `entropy_max`.
pub fn detect_port_scans_mawi(
    records: &[PacketRecord],
    key: Prefix,
    idxs: &[u32],
    params: &DetectParams,
) -> Vec<ScanEvent> {
    let mut groups: BTreeMap<PortKey, Vec<u32>> = BTreeMap::new();
    for &idx in idxs {
        let rec = &records[idx as usize];
        groups
            .entry(PortKey {
                proto: rec.proto,
                port: rec.dport,
            })
            .or_default()
            .push(idx);
    }
    let mut events = Vec::new();
    for (_, group) in groups {
        let mut per_dst: HashMap<Address, u64> = HashMap::new();
        for &idx in &group {
            *per_dst.entry(records[idx as usize].dst).or_insert(0) += 1;
        }
        if per_dst.len() < params.min_dsts {
            continue;
        }
        if per_dst.values().any(|&c| c >= params.max_pkts_per_dst_port) {
            continue;
        }
        let lengths: Vec<u32> = group.iter().map(|&i| records[i as usize].len).collect();
        let entropy = packet_length_entropy_with(&lengths, params.entropy_norm)
            .expect("group is non-empty");
        if entropy >= params.entropy_max {
            continue;
        }
        events.push(build_event(
            records,
            key,
            &group,
            Detector::Mawi,
            params.dst_cap,
        ));
    }
    events
}

/// Merge all per-port events of a source key within one analysis window
/// into one multi-port event per key. Port counts are unioned, destination
/// and source sets are unioned (first occurrence wins for ordering, taking
/// events by ascending `first_ts`), and the time bounds are the envelope.
pub fn merge_per_port_scans(events: Vec<ScanEvent>) -> Vec<ScanEvent> {
    let mut by_key: BTreeMap<Prefix, Vec<ScanEvent>> = BTreeMap::new();
    for event in events {
        by_key.entry(event.key).or_default().push(event);
    }
    let mut merged = Vec::new();
    for (key, mut group) in by_key {
        if group.len() == 1 {
            merged.push(group.pop().expect("single event"));
            continue;
        }
        group.sort_by(|a, b| {
            a.first_ts
                .partial_cmp(&b.first_ts)
                .expect("event timestamps are finite")
                .then_with(|| a.ports.keys().next().cmp(&b.ports.keys().next()))
        });
        let detector = group[0].detector;
        let first_ts = group
            .iter()
            .map(|e| e.first_ts)
            .fold(f64::INFINITY, f64::min);
        let last_ts = group
            .iter()
            .map(|e| e.last_ts)
            .fold(f64::NEG_INFINITY, f64::max);
        let packets = group.iter().map(|e| e.packets).sum();
        let mut ports = BTreeMap::new();
        for event in &group {
            for (&port, &count) in &event.ports {
                *ports.entry(port).or_insert(0) += count;
            }
        }
        // When an input set was truncated the exact union size is unknown;
        // the merged set keeps the deduplicated sample and stays capped.
        let mut dsts = TargetSet::collect(
            group.iter().flat_map(|e| e.dsts.sample().iter().copied()),
            usize::MAX,
        );
        dsts.capped |= group.iter().any(|e| e.dsts.is_capped());
        let mut srcs = TargetSet::collect(
            group.iter().flat_map(|e| e.srcs.sample().iter().copied()),
            usize::MAX,
        );
        srcs.capped |= group.iter().any(|e| e.srcs.is_capped());
        merged.push(ScanEvent {
            key,
            detector,
            first_ts,
            last_ts,
            packets,
            ports,
            dsts,
            srcs,
        });
    }
    merged
}

/// Per-port detection plus the multi-port merge for one source key.
///
/// The merged event is rebuilt from the qualifying groups' packets in time
/// order, so its destination list reflects true first-probe order.
pub fn detect_scans_mawi(
    records: &[PacketRecord],
    key: Prefix,
    idxs: &[u32],
    params: &DetectParams,
) -> Vec<ScanEvent> {
    let per_port = detect_port_scans_mawi(records, key, idxs, params);
    if per_port.len() <= 1 {
        return per_port;
    }
    let qualifying: HashSet<PortKey> = per_port
        .iter()
        .flat_map(|e| e.ports.keys().copied())
        .collect();
    let union: Vec<u32> = idxs
        .iter()
        .copied()
        .filter(|&i| {
            let rec = &records[i as usize];
            qualifying.contains(&PortKey {
                proto: rec.proto,
                port: rec.dport,
            })
        })
        .collect();
    vec![build_event(
        records,
        key,
        &union,
        Detector::Mawi,
        params.dst_cap,
    )]
}

/// Run the full pipeline per requested aggregation length. Results are
/// independent per length; events are sorted by (key, first_ts).
pub fn detect(
    records: &[PacketRecord],
    agg_lengths: &[u8],
    detector: Detector,
    params: &DetectParams,
) -> Result<BTreeMap<u8, Vec<ScanEvent>>, DetectError> {
    let mut out = BTreeMap::new();
    for &length in agg_lengths {
        let groups: Vec<(Prefix, Vec<u32>)> =
            aggregate_sources(records, length)?.into_iter().collect();
        let per_key: Vec<Vec<ScanEvent>> = groups
            .par_iter()
            .map(|(key, idxs)| match detector {
                Detector::Cdn => {
                    let sessions = sessionize(records, idxs, params.timeout_s)
                        .expect("aggregated index lists are time-sorted");
                    detect_scans_cdn(records, *key, &sessions, params)
                }
                Detector::Mawi => detect_scans_mawi(records, *key, idxs, params),
            })
            .collect();
        out.insert(length, per_key.into_iter().flatten().collect());
    }
    Ok(out)
}

/// Total packets attributed to events, per aggregation length.
pub fn attributed_packets(events: &BTreeMap<u8, Vec<ScanEvent>>) -> BTreeMap<u8, u64> {
    events
        .iter()
        .map(|(&len, evs)| (len, evs.iter().map(|e| e.packets).sum()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> Address {
        s.parse().unwrap()
    }

    fn prefix(s: &str) -> Prefix {
        s.parse().unwrap()
    }

    fn pkt(ts: f64, src: &str, dst: &str, dport: u16) -> PacketRecord {
        PacketRecord {
            ts,
            src: addr(src),
            dst: addr(dst),
            proto: Proto::Tcp,
            sport: 40000,
            dport,
            len: 60,
        }
    }

    #[test]
    fn aggregation_masks_sources() {
        let records = vec![
            pkt(1.0, "2001:db8::a", "2001:db8:f::1", 22),
            pkt(2.0, "2001:db8::b", "2001:db8:f::2", 22),
            pkt(3.0, "2001:db9::c", "2001:db8:f::3", 22),
        ];
        let at64 = aggregate_sources(&records, 64).unwrap();
        assert_eq!(at64.len(), 2);
        assert_eq!(at64[&prefix("2001:db8::/64")], vec![0, 1]);
        assert_eq!(at64[&prefix("2001:db9::/64")], vec![2]);

        let at128 = aggregate_sources(&records, 128).unwrap();
        assert_eq!(at128.len(), 3);

        let at0 = aggregate_sources(&records, 0).unwrap();
        assert_eq!(at0.len(), 1);
        assert_eq!(at0[&prefix("::/0")], vec![0, 1, 2]);

        assert!(aggregate_sources(&records, 129).is_err());
    }

    #[test]
    fn aggregation_sorts_by_time_stable() {
        let records = vec![
            pkt(5.0, "2001:db8::a", "2001:db8:f::1", 22),
            pkt(1.0, "2001:db8::b", "2001:db8:f::2", 22),
            pkt(5.0, "2001:db8::c", "2001:db8:f::3", 22),
        ];
        let at64 = aggregate_sources(&records, 64).unwrap();
        assert_eq!(at64[&prefix("2001:db8::/64")], vec![1, 0, 2]);
    }

    fn sessions_of(gaps: &[f64], timeout: f64) -> Vec<usize> {
        let mut ts = 0.0;
        let mut records = vec![pkt(ts, "2001:db8::1", "2001:db8:f::1", 22)];
        for gap in gaps {
            ts += gap;
            records.push(pkt(ts, "2001:db8::1", "2001:db8:f::1", 22));
        }
        let idxs: Vec<u32> = (0..records.len() as u32).collect();
        sessionize(&records, &idxs, timeout)
            .unwrap()
            .iter()
            .map(|s| s.idxs.len())
            .collect()
    }

    #[test]
    fn sessionize_splits_on_gaps() {
        assert_eq!(sessions_of(&[10.0, 10.0, 4000.0, 10.0], 3600.0), vec![3, 2]);
        assert_eq!(sessions_of(&[], 3600.0), vec![1]);
        // Gap exactly at the timeout does not split.
        assert_eq!(sessions_of(&[3600.0], 3600.0), vec![2]);
        assert_eq!(sessions_of(&[3600.01], 3600.0), vec![1, 1]);
    }

    #[test]
    fn sessionize_rejects_unsorted_input() {
        let records = vec![
            pkt(5.0, "2001:db8::1", "2001:db8:f::1", 22),
            pkt(1.0, "2001:db8::1", "2001:db8:f::2", 22),
        ];
        let err = sessionize(&records, &[0, 1], 3600.0).unwrap_err();
        assert!(matches!(err, DetectError::Unsorted));
    }

    #[test]
    fn singleton_session_bounds() {
        let records = vec![pkt(42.5, "2001:db8::1", "2001:db8:f::1", 22)];
        let sessions = sessionize(&records, &[0], 3600.0).unwrap();
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].first_ts, sessions[0].last_ts);
    }

    fn spray(src: &str, n: usize, start: f64, step: f64, dport: u16) -> Vec<PacketRecord> {
        (0..n)
            .map(|i| {
                pkt(
                    start + i as f64 * step,
                    src,
                    &format!("2001:db8:f::{:x}", i + 1),
                    dport,
                )
            })
            .collect()
    }

    fn cdn_events(records: &[PacketRecord], params: &DetectParams) -> Vec<ScanEvent> {
        let key = prefix("2001:db8::/64");
        let idxs: Vec<u32> = (0..records.len() as u32).collect();
        let sessions = sessionize(records, &idxs, params.timeout_s).unwrap();
        detect_scans_cdn(records, key, &sessions, params)
    }

    #[test]
    fn cdn_threshold_is_at_least() {
        let params = DetectParams::default();
        let records = spray("2001:db8::1", 100, 0.0, 6.0, 22);
        let events = cdn_events(&records, &params);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].distinct_dsts(), 100);
        assert_eq!(events[0].packets, 100);

        let records = spray("2001:db8::1", 99, 0.0, 6.0, 22);
        assert!(cdn_events(&records, &params).is_empty());
    }

    #[test]
    fn cdn_repeated_destinations_do_not_count_twice() {
        let params = DetectParams::default();
        // 500 packets but only 99 distinct destinations.
        let mut records = Vec::new();
        for i in 0..500 {
            records.push(pkt(
                i as f64,
                "2001:db8::1",
                &format!("2001:db8:f::{:x}", (i % 99) + 1),
                22,
            ));
        }
        assert!(cdn_events(&records, &params).is_empty());
    }

    #[test]
    fn cdn_two_bursts_merge_only_with_larger_timeout() {
        let mut records = spray("2001:db8::1", 60, 0.0, 1.0, 22);
        let mut second: Vec<PacketRecord> = (0..60)
            .map(|i| {
                pkt(
                    59.0 + 7200.0 + i as f64,
                    "2001:db8::1",
                    &format!("2001:db8:f:1::{:x}", i + 1),
                    22,
                )
            })
            .collect();
        records.append(&mut second);

        let params = DetectParams::default();
        assert!(cdn_events(&records, &params).is_empty());

        let params = DetectParams {
            timeout_s: 7201.0,
            ..DetectParams::default()
        };
        let events = cdn_events(&records, &params);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].distinct_dsts(), 120);
    }

    #[test]
    fn cdn_source_scope_counts_whole_trace() {
        // Two sessions of 60 distinct destinations each; only the source
        // scope reaches 100 over the union.
        let mut records = spray("2001:db8::1", 60, 0.0, 1.0, 22);
        records.extend((0..60).map(|i| {
            pkt(
                10_000.0 + i as f64,
                "2001:db8::1",
                &format!("2001:db8:f:1::{:x}", i + 1),
                22,
            )
        }));
        let session_scope = DetectParams::default();
        assert!(cdn_events(&records, &session_scope).is_empty());

        let source_scope = DetectParams {
            dst_scope: DstScope::Source,
            ..DetectParams::default()
        };
        let events = cdn_events(&records, &source_scope);
        assert_eq!(events.len(), 2);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(packet_length_entropy(&[40, 40, 40, 40]).unwrap(), 0.0);
        assert!((packet_length_entropy(&[40, 44, 48, 52]).unwrap() - 1.0).abs() < 1e-12);
        assert!((packet_length_entropy(&[40, 40, 44, 44]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(packet_length_entropy(&[1500]).unwrap(), 0.0);
        assert!(packet_length_entropy(&[]).is_err());

        // Distinct-value normalizer: two values at 50/50 are maximal.
        let e =
            packet_length_entropy_with(&[40, 40, 44, 44], EntropyNorm::Distinct).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    fn mawi_events(records: &[PacketRecord], params: &DetectParams) -> Vec<ScanEvent> {
        let key = prefix("2001:db8::/64");
        let idxs: Vec<u32> = (0..records.len() as u32).collect();
        detect_scans_mawi(records, key, &idxs, params)
    }

    #[test]
    fn mawi_fixed_length_probes_pass() {
        let params = DetectParams::default();
        let records = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        let events = mawi_events(&records, &params);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].distinct_dsts(), 120);
        assert_eq!(events[0].detector, Detector::Mawi);
    }

    #[test]
    fn mawi_per_destination_repeat_gate() {
        let params = DetectParams::default();
        // Nine extra packets to one destination keeps its count at 10,
        // which is not strictly fewer than 10.
        let mut records = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        for i in 0..9 {
            records.push(pkt(200.0 + i as f64, "2001:db8::1", "2001:db8:f::1", 22));
        }
        assert!(mawi_events(&records, &params).is_empty());

        // One fewer repeat (count 9) passes.
        let mut records = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        for i in 0..8 {
            records.push(pkt(200.0 + i as f64, "2001:db8::1", "2001:db8:f::1", 22));
        }
        assert_eq!(mawi_events(&records, &params).len(), 1);
    }

    #[test]
    fn mawi_random_lengths_are_rejected() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let params = DetectParams::default();
        let mut records = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        for rec in &mut records {
            rec.len = rng.gen_range(40..=1500);
        }
        let lengths: Vec<u32> = records.iter().map(|r| r.len).collect();
        assert!(packet_length_entropy(&lengths).unwrap() >= 0.1);
        assert!(mawi_events(&records, &params).is_empty());
    }

    #[test]
    fn mawi_merges_ports_of_one_key() {
        let params = DetectParams::default();
        let mut records = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        records.extend(spray("2001:db8::1", 150, 500.0, 1.0, 23));
        let events = mawi_events(&records, &params);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].ports.len(), 2);
        assert_eq!(events[0].packets, 270);
        // Destinations overlap between ports, so the union is 150.
        assert_eq!(events[0].distinct_dsts(), 150);
        // A non-qualifying port (few destinations) is not merged in.
        let mut records2 = records.clone();
        records2.extend(spray("2001:db8::1", 5, 800.0, 1.0, 80));
        let events2 = mawi_events(&records2, &params);
        assert_eq!(events2.len(), 1);
        assert_eq!(events2[0].ports.len(), 2);
        assert_eq!(events2[0].packets, 270);
    }

    #[test]
    fn merge_is_identity_for_single_event_and_keeps_keys_apart() {
        let params = DetectParams::default();
        let a = spray("2001:db8::1", 120, 0.0, 1.0, 22);
        let b = spray("2001:db8:1::1", 120, 0.0, 1.0, 23);
        let key_a = prefix("2001:db8::/64");
        let key_b = prefix("2001:db8:1::/64");
        let idxs_a: Vec<u32> = (0..a.len() as u32).collect();
        let idxs_b: Vec<u32> = (0..b.len() as u32).collect();
        let mut events = detect_port_scans_mawi(&a, key_a, &idxs_a, &params);
        events.extend(detect_port_scans_mawi(&b, key_b, &idxs_b, &params));
        assert_eq!(events.len(), 2);
        let merged = merge_per_port_scans(events.clone());
        assert_eq!(merged.len(), 2);
        assert_eq!(merged, events);
    }

    #[test]
    fn detect_counts_can_peak_at_coarser_lengths() {
        // Two /64s inside one /48, each below the threshold on its own.
        let mut records = spray("2001:db8:0:1::1", 60, 0.0, 1.0, 22);
        records.extend((0..60).map(|i| {
            pkt(
                60.0 + i as f64,
                "2001:db8:0:2::1",
                &format!("2001:db8:f:2::{:x}", i + 1),
                22,
            )
        }));
        let params = DetectParams::default();
        let by_len = detect(&records, &[128, 64, 48], Detector::Cdn, &params).unwrap();
        assert!(by_len[&128].is_empty());
        assert!(by_len[&64].is_empty());
        assert_eq!(by_len[&48].len(), 1);
        assert_eq!(by_len[&48][0].distinct_dsts(), 120);
    }

    #[test]
    fn detect_empty_input() {
        let by_len = detect(&[], &[128, 64, 48], Detector::Cdn, &DetectParams::default()).unwrap();
        assert!(by_len.values().all(|v| v.is_empty()));
    }

    #[test]
    fn detect_is_order_invariant() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut records = spray("2001:db8::1", 150, 0.0, 7.0, 22);
        records.extend(spray("2001:db8:7::9", 120, 3.0, 11.0, 443));
        let params = DetectParams {
            min_dsts: 100,
            ..DetectParams::default()
        };
        let baseline = detect(&records, &[128, 64, 48], Detector::Cdn, &params).unwrap();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(11));
        let shuffled_out = detect(&shuffled, &[128, 64, 48], Detector::Cdn, &params).unwrap();
        assert_eq!(baseline, shuffled_out);
    }

    #[test]
    fn capped_events_keep_exact_counts() {
        let params = DetectParams {
            min_dsts: 5,
            dst_cap: 3,
            ..DetectParams::default()
        };
        let records = spray("2001:db8::1", 10, 0.0, 1.0, 22);
        let events = cdn_events(&records, &params);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        assert_eq!(e.distinct_dsts(), 10);
        assert!(e.dsts.is_capped());
        assert_eq!(e.dsts.sample().len(), 3);
        assert_eq!(e.dsts.addresses(), None);

        // Round trip through the ndjson form.
        let line = serde_json::to_string(&e.to_record()).unwrap();
        let back = ScanEvent::from_record(serde_json::from_str(&line).unwrap()).unwrap();
        assert_eq!(&back, e);
    }

    #[test]
    fn event_record_round_trip_and_validation() {
        let params = DetectParams::default();
        let records = spray("2001:db8::1", 110, 0.0, 1.0, 22);
        let events = cdn_events(&records, &params);
        let mut rec = events[0].to_record();
        assert_eq!(rec.length, 64);
        let json = serde_json::to_string(&rec).unwrap();
        let parsed: EventRecord = serde_json::from_str(&json).unwrap();
        let back = ScanEvent::from_record(parsed).unwrap();
        assert_eq!(back, events[0]);

        rec.packets += 1;
        assert!(ScanEvent::from_record(rec).is_err());
    }

    #[test]
    fn session_containment_across_lengths() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut records = Vec::new();
        for _ in 0..400 {
            let src = format!(
                "2001:db8:{:x}:{:x}::{:x}",
                rng.gen_range(0..2u32),
                rng.gen_range(0..4u32),
                rng.gen_range(1..200u32)
            );
            let dst = format!("2001:db8:f::{:x}", rng.gen_range(1..50u32));
            records.push(pkt(rng.gen_range(0..500_000u32) as f64, &src, &dst, 22));
        }
        let timeout = 1_000.0;
        let fine = aggregate_sources(&records, 64).unwrap();
        let coarse = aggregate_sources(&records, 48).unwrap();
        let coarse_sessions: Vec<(Prefix, Session)> = coarse
            .iter()
            .flat_map(|(k, idxs)| {
                sessionize(&records, idxs, timeout)
                    .unwrap()
                    .into_iter()
                    .map(|s| (*k, s))
            })
            .collect();
        for (key, idxs) in &fine {
            for session in sessionize(&records, idxs, timeout).unwrap() {
                let contained = coarse_sessions.iter().any(|(ck, cs)| {
                    ck.contains(key.base())
                        && session.idxs.iter().all(|i| cs.idxs.contains(i))
                });
                assert!(contained, "session of {key} not contained at /48");
            }
        }
    }
}
