//! Address, prefix, and time primitives shared by all other modules.
//!
//! Addresses are 128-bit integers compared numerically; the text form is the
//! canonical RFC 5952 lowercase rendering so that keys in reports are
//! unambiguous and byte-stable.

use std::fmt;
use std::net::Ipv6Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("prefix length {0} out of range (0..=128)")]
    PrefixLength(u16),
    #[error("invalid IPv6 address `{text}`: {reason}")]
    AddrParse { text: String, reason: String },
    #[error("invalid prefix `{0}`: expected <address>/<length>")]
    PrefixParse(String),
    #[error("timestamp {0} is not finite and non-negative")]
    BadTimestamp(f64),
    #[error("icmp6 record must carry zero ports (got sport={sport} dport={dport})")]
    Icmp6Ports { sport: u16, dport: u16 },
}

/// A single IPv6 address, stored as its 128-bit numeric value.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(u128);

impl Address {
    pub const fn new(bits: u128) -> Self {
        Address(bits)
    }

    pub const fn bits(self) -> u128 {
        self.0
    }

    /// Interface ID: the lowest 64 bits of the address.
    pub const fn iid(self) -> u64 {
        self.0 as u64
    }
}

/// Number of 1-bits in the interface ID (the lowest 64 bits).
///
/// Low weights indicate structured, non-random target generation; a
/// uniformly random IID has weight distributed as Binomial(64, 0.5).
pub fn hamming_weight_iid(a: Address) -> u32 {
    a.iid().count_ones()
}

/// Parse the full or zero-compressed IPv6 text form. IPv4 literals and
/// zone-qualified addresses are rejected.
pub fn parse_address(text: &str) -> Result<Address, ModelError> {
    Address::from_str(text)
}

impl From<Ipv6Addr> for Address {
    fn from(a: Ipv6Addr) -> Self {
        Address(u128::from(a))
    }
}

impl From<Address> for Ipv6Addr {
    fn from(a: Address) -> Self {
        Ipv6Addr::from(a.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Ipv6Addr::from(self.0).fmt(f)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Address {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match Ipv6Addr::from_str(s) {
            Ok(a) => Ok(a.into()),
            Err(e) => Err(ModelError::AddrParse {
                text: s.to_string(),
                reason: e.to_string(),
            }),
        }
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct AddrVisitor;
        impl serde::de::Visitor<'_> for AddrVisitor {
            type Value = Address;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an IPv6 address string")
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<Address, E> {
                s.parse().map_err(E::custom)
            }
        }
        deserializer.deserialize_str(AddrVisitor)
    }
}

/// An IPv6 prefix: a base address with host bits zeroed plus a length in
/// `0..=128`. The unit of source aggregation and ASN lookup.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prefix {
    base: Address,
    length: u8,
}

impl Prefix {
    /// Build a prefix, masking any host bits of `base`.
    pub fn new(base: Address, length: u8) -> Result<Self, ModelError> {
        if length > 128 {
            return Err(ModelError::PrefixLength(length as u16));
        }
        Ok(Prefix {
            base: Address(base.0 & network_mask(length)),
            length,
        })
    }

    pub const fn base(self) -> Address {
        self.base
    }

    pub const fn length(self) -> u8 {
        self.length
    }

    /// True iff the top `length` bits of `a` equal those of the base.
    pub fn contains(self, a: Address) -> bool {
        a.0 & network_mask(self.length) == self.base.0
    }
}

fn network_mask(length: u8) -> u128 {
    if length == 0 {
        0
    } else {
        u128::MAX << (128 - length as u32)
    }
}

/// The covering prefix of `a` at the given length, host bits zeroed.
pub fn prefix_of(a: Address, length: u8) -> Result<Prefix, ModelError> {
    Prefix::new(a, length)
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.base, self.length)
    }
}

impl fmt::Debug for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Prefix {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, len) = s
            .split_once('/')
            .ok_or_else(|| ModelError::PrefixParse(s.to_string()))?;
        let base: Address = addr.parse()?;
        let length: u8 = len
            .parse()
            .map_err(|_| ModelError::PrefixParse(s.to_string()))?;
        Prefix::new(base, length)
    }
}

impl Serialize for Prefix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Prefix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PrefixVisitor;
        impl serde::de::Visitor<'_> for PrefixVisitor {
            type Value = Prefix;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an IPv6 prefix string like `2001:db8::/32`")
            }

            fn visit_str<E: serde::de::Error>(self, s: &str) -> Result<Prefix, E> {
                s.parse().map_err(E::custom)
            }
        }
        deserializer.deserialize_str(PrefixVisitor)
    }
}

/// Transport protocol of a logged packet.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Tcp,
    Udp,
    Icmp6,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Tcp => "tcp",
            Proto::Udp => "udp",
            Proto::Icmp6 => "icmp6",
        })
    }
}

impl FromStr for Proto {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Proto::Tcp),
            "udp" => Ok(Proto::Udp),
            "icmp6" => Ok(Proto::Icmp6),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// One unsolicited packet observation.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Seconds since the Unix epoch; fractional values allowed.
    pub ts: f64,
    pub src: Address,
    pub dst: Address,
    pub proto: Proto,
    pub sport: u16,
    pub dport: u16,
    /// IP packet length in bytes.
    pub len: u32,
}

impl PacketRecord {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.ts.is_finite() || self.ts < 0.0 {
            return Err(ModelError::BadTimestamp(self.ts));
        }
        if self.proto == Proto::Icmp6 && (self.sport != 0 || self.dport != 0) {
            return Err(ModelError::Icmp6Ports {
                sport: self.sport,
                dport: self.dport,
            });
        }
        Ok(())
    }
}

/// UTC calendar day index of a timestamp (days since the epoch).
pub fn utc_day(ts: f64) -> i64 {
    ts.div_euclid(86_400.0) as i64
}

/// A UTC calendar day, displayed as `YYYY-MM-DD`.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DayStamp(pub i64);

impl DayStamp {
    pub fn of(ts: f64) -> Self {
        DayStamp(utc_day(ts))
    }
}

impl fmt::Display for DayStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dt = chrono::DateTime::from_timestamp(self.0 * 86_400, 0)
            .expect("day index within chrono range");
        write!(f, "{}", dt.format("%Y-%m-%d"))
    }
}

impl fmt::Debug for DayStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl Serialize for DayStamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// ISO week label (Monday-anchored, UTC) of a timestamp, e.g. `2021-W05`.
pub fn iso_week_label(ts: f64) -> String {
    use chrono::Datelike;
    let dt = chrono::DateTime::from_timestamp(ts.floor() as i64, 0)
        .expect("timestamp within chrono range");
    let week = dt.iso_week();
    format!("{}-W{:02}", week.year(), week.week())
}
