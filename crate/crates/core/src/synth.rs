//! Deterministic generator of labeled synthetic traces.
//!
//! Scenarios describe scan actors (source-address archetypes, target
//! strategies, port strategies) and retry-style noise, plus a telescope of
//! paired DNS-exposed / unexposed destination addresses. Every packet in
//! the output carries a ground-truth label, so detection and filtering
//! results can be checked against construction instead of against the code
//! under test.
//!
//! The same config and seed always produce byte-identical traces: every
//! component draws from its own seeded substream, so adding one actor
//! never perturbs another's randomness.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::DnsOracle;
use crate::model::{Address, PacketRecord, Prefix, Proto};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig(msg.into())
}

/// Source-address behavior of a scan actor.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Every packet from one fixed address.
    SingleAddress,
    /// The configured number of low bits varies per packet.
    LowbitVary,
    /// Each packet sourced from a uniform random address in the prefix.
    PrefixSpread,
    /// A fresh uniform random address in the prefix for every packet.
    RandomPerPacket,
}

/// How an actor picks destination addresses.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetStrategy {
    /// DNS-exposed pool members only.
    Hitlist,
    /// Alternates each DNS-exposed address with its unexposed pair member.
    NearbyPerturb,
    /// Uniform random interface IDs inside the telescope's first /64.
    RandomIid,
    /// One random-IID address per destination /64.
    DistinctDst64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetSpec {
    pub strategy: TargetStrategy,
    /// Number of distinct destination addresses.
    pub count: u32,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortStrategy {
    SinglePort,
    /// Cycles through a set of well-known ports, one per full target pass.
    PortSet,
    /// Increments the port after each full target pass.
    PortSweep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PortSpec {
    pub strategy: PortStrategy,
    #[serde(default = "default_proto")]
    pub proto: Proto,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default = "default_set_size")]
    pub set_size: u16,
    #[serde(default = "default_sweep_start")]
    pub sweep_start: u16,
}

fn default_proto() -> Proto {
    Proto::Tcp
}

fn default_port() -> u16 {
    22
}

fn default_set_size() -> u16 {
    10
}

fn default_sweep_start() -> u16 {
    1024
}

impl Default for PortSpec {
    fn default() -> Self {
        PortSpec {
            strategy: PortStrategy::SinglePort,
            proto: default_proto(),
            port: default_port(),
            set_size: default_set_size(),
            sweep_start: default_sweep_start(),
        }
    }
}

const WELL_KNOWN_PORTS: [u16; 20] = [
    21, 22, 23, 25, 53, 80, 110, 143, 443, 445, 993, 995, 1433, 3306, 3389, 5900, 8000, 8080,
    8443, 8888,
];

/// One synthetic scanning actor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ActorSpec {
    pub id: String,
    pub archetype: Archetype,
    /// Source prefix; the base address for the fixed/low-bit archetypes.
    pub source: Prefix,
    /// Low bits varied by `lowbit_vary`.
    #[serde(default = "default_vary_bits")]
    pub vary_bits: u8,
    pub targets: TargetSpec,
    #[serde(default)]
    pub ports: PortSpec,
    /// Packets per second over the active window.
    pub rate: f64,
    /// Active window as offsets from the scenario epoch, in seconds.
    pub start_s: f64,
    pub stop_s: f64,
    #[serde(default = "default_packet_len")]
    pub packet_len: u32,
    #[serde(default = "default_sport")]
    pub sport: u16,
}

fn default_vary_bits() -> u8 {
    8
}

fn default_packet_len() -> u32 {
    60
}

fn default_sport() -> u16 {
    54321
}

/// Retry-artifact noise archetype.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Failing mail delivery: tcp/25 retries to the same destinations.
    SmtpRetry,
    /// Failing key negotiation: udp/500 retries with sport 500.
    IpsecRetry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub id: String,
    pub kind: NoiseKind,
    /// Fixed source address.
    pub source: Address,
    /// DNS-exposed destinations retried every day.
    pub dst_count: u32,
    /// Packets per destination per day.
    #[serde(default = "default_repeats")]
    pub repeats_per_day: u32,
    /// One-off destinations per day, diluting the duplicate fraction.
    #[serde(default)]
    pub unique_extra_per_day: u32,
    pub start_s: f64,
    pub stop_s: f64,
}

fn default_repeats() -> u32 {
    6
}

/// Destination pool description: where the telescope lives and how many
/// DNS-exposed/unexposed address pairs it holds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TelescopeSpec {
    pub prefix: Prefix,
    pub dns_pairs: u32,
}

/// A complete scenario. Identical config and seed produce byte-identical
/// traces and labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Absolute base timestamp; actor/noise windows are offsets from it.
    #[serde(default = "default_epoch")]
    pub epoch_ts: f64,
    pub duration_s: f64,
    pub telescope: TelescopeSpec,
    #[serde(default)]
    pub actors: Vec<ActorSpec>,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
}

/// 2021-01-01 00:00:00 UTC.
fn default_epoch() -> f64 {
    1_609_459_200.0
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Actor,
    Noise,
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelDef {
    pub id: String,
    pub kind: LabelKind,
}

/// A generated trace with one ground-truth label per packet.
#[derive(Clone, Debug)]
pub struct LabeledTrace {
    pub records: Vec<PacketRecord>,
    /// Per-record index into `label_defs`.
    pub labels: Vec<u16>,
    pub label_defs: Vec<LabelDef>,
}

impl LabeledTrace {
    pub fn label_of(&self, record_idx: usize) -> &LabelDef {
        &self.label_defs[self.labels[record_idx] as usize]
    }

    /// Record indices carrying the given label id.
    pub fn indices_of(&self, id: &str) -> Vec<usize> {
        let def = self
            .label_defs
            .iter()
            .position(|d| d.id == id)
            .unwrap_or(usize::MAX);
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l as usize == def)
            .map(|(i, _)| i)
            .collect()
    }

    /// Ndjson labels, one `{"idx":..,"label":..,"kind":..}` object per
    /// record, aligned with the trace by line number.
    pub fn write_labels<W: Write>(&self, mut w: W) -> Result<(), SynthError> {
        #[derive(Serialize)]
        struct Row<'a> {
            idx: usize,
            label: &'a str,
            kind: LabelKind,
        }
        for (idx, &label) in self.labels.iter().enumerate() {
            let def = &self.label_defs[label as usize];
            serde_json::to_writer(
                &mut w,
                &Row {
                    idx,
                    label: &def.id,
                    kind: def.kind,
                },
            )
            .map_err(|e| SynthError::Io(std::io::Error::other(e)))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// The telescope's paired destinations: each pair shares a /123, one
/// member is DNS-exposed, the other is not.
#[derive(Clone, Debug)]
pub struct DnsPairs {
    pub pairs: Vec<(Address, Address)>,
}

impl DnsPairs {
    pub fn in_dns(&self) -> impl Iterator<Item = Address> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn oracle(&self) -> DnsOracle {
        DnsOracle::from_addresses(self.in_dns())
    }

    /// Hitlist file: the DNS-exposed member of every pair, one per line.
    pub fn write_hitlist<W: Write>(&self, mut w: W) -> Result<(), SynthError> {
        for (in_dns, _) in &self.pairs {
            writeln!(w, "{in_dns}")?;
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn substream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a(tag))
}

fn host_mask(length: u8) -> u128 {
    if length == 0 {
        u128::MAX
    } else if length == 128 {
        0
    } else {
        (1u128 << (128 - length as u32)) - 1
    }
}

/// Build the telescope's address pairs and hitlist content.
///
/// Pair blocks are distinct /123 prefixes under the telescope prefix with
/// counter-valued interface IDs, giving the DNS-exposed pool the low
/// Hamming weight that structured host addressing produces.
pub fn emit_dns_pairs(config: &ScenarioConfig) -> Result<DnsPairs, SynthError> {
    if config.telescope.dns_pairs == 0 {
        return Err(invalid("telescope.dns_pairs must be at least 1"));
    }
    if config.telescope.prefix.length() > 123 {
        return Err(invalid(
            "telescope prefix longer than /123 leaves no room for address pairs",
        ));
    }
    let mut rng = substream(config.seed, "dns-pairs");
    let base = config.telescope.prefix.base().bits();
    let mut pairs = Vec::with_capacity(config.telescope.dns_pairs as usize);
    for i in 0..config.telescope.dns_pairs as u128 {
        let block = base | ((i + 1) << 5);
        // Members differ only in the low 4 bits, so each pair shares its
        // /124 (and therefore its /123) but never collides.
        let in_offset: u128 = rng.gen_range(0..32);
        let out_offset = (in_offset & 0x10) | ((in_offset + 1 + rng.gen_range(0..15)) & 0xf);
        pairs.push((
            Address::new(block | in_offset),
            Address::new(block | out_offset),
        ));
    }
    Ok(DnsPairs { pairs })
}

struct Emitted {
    records: Vec<PacketRecord>,
    label: u16,
}

fn actor_targets(
    actor: &ActorSpec,
    config: &ScenarioConfig,
    pairs: &DnsPairs,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Address>, SynthError> {
    let count = actor.targets.count as usize;
    if count == 0 {
        return Err(invalid(format!("actor `{}` has zero targets", actor.id)));
    }
    match actor.targets.strategy {
        TargetStrategy::Hitlist => {
            if count > pairs.pairs.len() {
                return Err(invalid(format!(
                    "actor `{}` wants {count} hitlist targets but the telescope has {} pairs",
                    actor.id,
                    pairs.pairs.len()
                )));
            }
            let mut idxs: Vec<usize> = (0..pairs.pairs.len()).collect();
            idxs.shuffle(rng);
            Ok(idxs[..count].iter().map(|&i| pairs.pairs[i].0).collect())
        }
        TargetStrategy::NearbyPerturb => {
            let need = count.div_ceil(2);
            if need > pairs.pairs.len() {
                return Err(invalid(format!(
                    "actor `{}` wants {count} paired targets but the telescope has {} pairs",
                    actor.id,
                    pairs.pairs.len()
                )));
            }
            let mut idxs: Vec<usize> = (0..pairs.pairs.len()).collect();
            idxs.shuffle(rng);
            let mut targets = Vec::with_capacity(count);
            for &i in &idxs[..need] {
                targets.push(pairs.pairs[i].0);
                targets.push(pairs.pairs[i].1);
            }
            targets.truncate(count);
            Ok(targets)
        }
        TargetStrategy::RandomIid => {
            let base = config.telescope.prefix.base().bits() & (u128::MAX << 64);
            let mut seen = HashSet::with_capacity(count);
            let mut targets = Vec::with_capacity(count);
            while targets.len() < count {
                let addr = Address::new(base | rng.gen::<u64>() as u128);
                if seen.insert(addr) {
                    targets.push(addr);
                }
            }
            Ok(targets)
        }
        TargetStrategy::DistinctDst64 => {
            let plen = config.telescope.prefix.length();
            if plen > 64 {
                return Err(invalid(
                    "distinct_dst64 needs a telescope prefix of /64 or shorter",
                ));
            }
            let sel_bits = 64 - plen as u32;
            if sel_bits < 64 && (count as u128) > (1u128 << sel_bits) {
                return Err(invalid(format!(
                    "actor `{}` wants {count} distinct /64s but the telescope prefix only has 2^{sel_bits}",
                    actor.id
                )));
            }
            let base = config.telescope.prefix.base().bits();
            let space = 1u128 << sel_bits.min(63);
            let mut selectors: Vec<u128> = Vec::with_capacity(count);
            if sel_bits <= 20 {
                let mut all: Vec<u128> = (0..space).collect();
                all.shuffle(rng);
                selectors.extend(all.into_iter().take(count));
            } else {
                let mut seen = HashSet::with_capacity(count);
                while selectors.len() < count {
                    let sel = rng.gen::<u64>() as u128 & ((1u128 << sel_bits.min(64)) - 1);
                    if seen.insert(sel) {
                        selectors.push(sel);
                    }
                }
            }
            Ok(selectors
                .into_iter()
                .map(|sel| Address::new(base | (sel << 64) | rng.gen::<u64>() as u128))
                .collect())
        }
    }
}

fn actor_port(actor: &ActorSpec, cycle: u64) -> u16 {
    match actor.ports.strategy {
        PortStrategy::SinglePort => actor.ports.port,
        PortStrategy::PortSet => {
            let n = actor.ports.set_size.max(1) as u64;
            let i = (cycle % n) as usize;
            if i < WELL_KNOWN_PORTS.len() {
                WELL_KNOWN_PORTS[i]
            } else {
                10_000 + i as u16
            }
        }
        PortStrategy::PortSweep => {
            let span = 65_535u64 - actor.ports.sweep_start as u64 + 1;
            actor.ports.sweep_start + (cycle % span) as u16
        }
    }
}

fn emit_actor(
    actor: &ActorSpec,
    config: &ScenarioConfig,
    pairs: &DnsPairs,
    label: u16,
) -> Result<Emitted, SynthError> {
    if !(actor.rate.is_finite() && actor.rate > 0.0) {
        return Err(invalid(format!(
            "actor `{}` has non-positive rate",
            actor.id
        )));
    }
    if actor.start_s < 0.0 || actor.stop_s <= actor.start_s || actor.stop_s > config.duration_s {
        return Err(invalid(format!(
            "actor `{}` has an invalid active window [{}, {})",
            actor.id, actor.start_s, actor.stop_s
        )));
    }
    if actor.vary_bits == 0 || actor.vary_bits > 64 {
        return Err(invalid(format!(
            "actor `{}` vary_bits must be in 1..=64",
            actor.id
        )));
    }

    let mut rng = substream(config.seed, &actor.id);
    let targets = actor_targets(actor, config, pairs, &mut rng)?;

    let duration = actor.stop_s - actor.start_s;
    let n = (actor.rate * duration).round() as u64;
    let mut times: Vec<f64> = (0..n)
        .map(|_| config.epoch_ts + actor.start_s + rng.gen::<f64>() * duration)
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).expect("finite timestamps"));

    let src_base = actor.source.base().bits();
    let spread_mask = host_mask(actor.source.length());
    let vary_mask = host_mask(128 - actor.vary_bits);

    let (proto, forced_zero_ports) = match actor.ports.proto {
        Proto::Icmp6 => (Proto::Icmp6, true),
        p => (p, false),
    };

    let records = times
        .iter()
        .enumerate()
        .map(|(i, &ts)| {
            let target = targets[i % targets.len()];
            let cycle = (i / targets.len()) as u64;
            let src = match actor.archetype {
                Archetype::SingleAddress => src_base,
                Archetype::LowbitVary => {
                    (src_base & !vary_mask) | (rng.gen::<u64>() as u128 & vary_mask)
                }
                Archetype::PrefixSpread | Archetype::RandomPerPacket => {
                    (src_base & !spread_mask) | (rng.gen::<u128>() & spread_mask)
                }
            };
            PacketRecord {
                ts,
                src: Address::new(src),
                dst: target,
                proto,
                sport: if forced_zero_ports { 0 } else { actor.sport },
                dport: if forced_zero_ports {
                    0
                } else {
                    actor_port(actor, cycle)
                },
                len: actor.packet_len,
            }
        })
        .collect();

    Ok(Emitted { records, label })
}

fn emit_noise(
    noise: &NoiseSpec,
    config: &ScenarioConfig,
    pairs: &DnsPairs,
    label: u16,
) -> Result<Emitted, SynthError> {
    if noise.dst_count == 0 {
        return Err(invalid(format!(
            "noise `{}` has zero destinations",
            noise.id
        )));
    }
    if noise.repeats_per_day == 0 {
        return Err(invalid(format!("noise `{}` has zero repeats", noise.id)));
    }
    if noise.start_s < 0.0 || noise.stop_s <= noise.start_s || noise.stop_s > config.duration_s {
        return Err(invalid(format!(
            "noise `{}` has an invalid active window",
            noise.id
        )));
    }
    if noise.dst_count as usize > pairs.pairs.len() {
        return Err(invalid(format!(
            "noise `{}` wants {} destinations but the telescope has {} pairs",
            noise.id,
            noise.dst_count,
            pairs.pairs.len()
        )));
    }

    let mut rng = substream(config.seed, &noise.id);
    let mut idxs: Vec<usize> = (0..pairs.pairs.len()).collect();
    idxs.shuffle(&mut rng);
    let dsts: Vec<Address> = idxs[..noise.dst_count as usize]
        .iter()
        .map(|&i| pairs.pairs[i].0)
        .collect();

    let (proto, dport, sport) = match noise.kind {
        NoiseKind::SmtpRetry => (Proto::Tcp, 25, 44_000),
        NoiseKind::IpsecRetry => (Proto::Udp, 500, 500),
    };
    // Retries carry assorted payload sizes, unlike fixed-size probes.
    let lengths = [90u32, 110, 74, 628, 131];

    let telescope_base = config.telescope.prefix.base().bits();
    let telescope_mask = host_mask(config.telescope.prefix.length());

    let mut records = Vec::new();
    let mut day_start = noise.start_s;
    while day_start < noise.stop_s {
        let day_end = (day_start + 86_400.0).min(noise.stop_s);
        let span = day_end - day_start;
        for &dst in &dsts {
            for _ in 0..noise.repeats_per_day {
                records.push(PacketRecord {
                    ts: config.epoch_ts + day_start + rng.gen::<f64>() * span,
                    src: noise.source,
                    dst,
                    proto,
                    sport,
                    dport,
                    len: lengths[rng.gen_range(0..lengths.len())],
                });
            }
        }
        for _ in 0..noise.unique_extra_per_day {
            let dst = Address::new(telescope_base | (rng.gen::<u128>() & telescope_mask));
            records.push(PacketRecord {
                ts: config.epoch_ts + day_start + rng.gen::<f64>() * span,
                src: noise.source,
                dst,
                proto,
                sport,
                dport,
                len: lengths[rng.gen_range(0..lengths.len())],
            });
        }
        day_start += 86_400.0;
    }
    records.sort_by(|a, b| a.ts.partial_cmp(&b.ts).expect("finite timestamps"));
    Ok(Emitted { records, label })
}

/// Generate the scenario's trace: time-sorted records plus one label per
/// packet, all randomness from the config seed.
pub fn generate(config: &ScenarioConfig) -> Result<LabeledTrace, SynthError> {
    if !(config.epoch_ts.is_finite() && config.epoch_ts >= 0.0) {
        return Err(invalid("epoch_ts must be finite and non-negative"));
    }
    if !(config.duration_s.is_finite() && config.duration_s > 0.0) {
        return Err(invalid("duration_s must be positive"));
    }
    let mut ids = HashSet::new();
    for id in config
        .actors
        .iter()
        .map(|a| &a.id)
        .chain(config.noise.iter().map(|n| &n.id))
    {
        if id.is_empty() {
            return Err(invalid("component ids must be non-empty"));
        }
        if !ids.insert(id.clone()) {
            return Err(invalid(format!("duplicate component id `{id}`")));
        }
    }
    let components = config.actors.len() + config.noise.len();
    if components > u16::MAX as usize {
        return Err(invalid("too many scenario components"));
    }

    let pairs = if config.telescope.dns_pairs > 0 {
        emit_dns_pairs(config)?
    } else {
        DnsPairs { pairs: Vec::new() }
    };

    let mut label_defs = Vec::with_capacity(components);
    let mut emitted = Vec::with_capacity(components);
    for actor in &config.actors {
        let label = label_defs.len() as u16;
        label_defs.push(LabelDef {
            id: actor.id.clone(),
            kind: LabelKind::Actor,
        });
        emitted.push(emit_actor(actor, config, &pairs, label)?);
    }
    for noise in &config.noise {
        let label = label_defs.len() as u16;
        label_defs.push(LabelDef {
            id: noise.id.clone(),
            kind: LabelKind::Noise,
        });
        emitted.push(emit_noise(noise, config, &pairs, label)?);
    }

    let total: usize = emitted.iter().map(|e| e.records.len()).sum();
    let mut merged: Vec<(PacketRecord, u16)> = Vec::with_capacity(total);
    for Emitted { records, label } in emitted {
        merged.extend(records.into_iter().map(|r| (r, label)));
    }
    // Stable sort: equal timestamps keep config order, so output is a pure
    // function of (config, seed).
    merged.sort_by(|a, b| a.0.ts.partial_cmp(&b.0.ts).expect("finite timestamps"));

    let mut records = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for (rec, label) in merged {
        records.push(rec);
        labels.push(label);
    }
    Ok(LabeledTrace {
        records,
        labels,
        label_defs,
    })
}
