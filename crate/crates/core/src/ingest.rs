//! Parsers for packet-record streams, DNS hitlists, and prefix-to-ASN tables.
//!
//! Two record formats are supported: ndjson (one object per line, unknown
//! keys ignored) and csv with the fixed column order
//! `ts,src,dst,proto,sport,dport,len` (header optional). Malformed lines are
//! either skipped and counted or abort the read, depending on strictness;
//! silent drops never happen.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Address, ModelError, PacketRecord, Prefix, Proto};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{0}")]
    Record(String),
    #[error("line {line}: {reason}")]
    Line { line: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Input record encoding.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Format {
    Ndjson,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ndjson" => Ok(Format::Ndjson),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}`")),
        }
    }
}

/// What to do with malformed input lines.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Strictness {
    /// Abort on the first malformed line.
    Strict,
    /// Skip malformed lines, reporting how many were dropped.
    SkipAndCount,
}

/// Counters from one stream read.
#[derive(Debug, Default, Clone, Serialize)]
pub struct ParseStats {
    pub lines: u64,
    pub parsed: u64,
    pub skipped: u64,
    /// First few skip reasons, for diagnostics.
    pub sample_errors: Vec<String>,
}

const MAX_SAMPLE_ERRORS: usize = 8;

/// Parse one record line in the given format and validate it.
pub fn parse_record_line(line: &str, format: Format) -> Result<PacketRecord, IngestError> {
    let rec: PacketRecord = match format {
        Format::Ndjson => {
            serde_json::from_str(line).map_err(|e| IngestError::Record(e.to_string()))?
        }
        Format::Csv => parse_csv_line(line)?,
    };
    rec.validate()
        .map_err(|e| IngestError::Record(e.to_string()))?;
    Ok(rec)
}

fn parse_csv_line(line: &str) -> Result<PacketRecord, IngestError> {
    let bad = |reason: String| IngestError::Record(reason);
    let mut fields = line.split(',');
    let mut next = |name: &str| {
        fields
            .next()
            .map(str::trim)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let ts: f64 = next("ts")?
        .parse()
        .map_err(|e| bad(format!("invalid ts: {e}")))?;
    let src: Address = next("src")?.parse().map_err(|e: ModelError| bad(e.to_string()))?;
    let dst: Address = next("dst")?.parse().map_err(|e: ModelError| bad(e.to_string()))?;
    let proto: Proto = next("proto")?.parse().map_err(bad)?;
    let sport: u16 = next("sport")?
        .parse()
        .map_err(|e| bad(format!("invalid sport: {e}")))?;
    let dport: u16 = next("dport")?
        .parse()
        .map_err(|e| bad(format!("invalid dport: {e}")))?;
    let len: u32 = next("len")?
        .parse()
        .map_err(|e| bad(format!("invalid len: {e}")))?;
    if fields.next().is_some() {
        return Err(bad("too many columns".to_string()));
    }
    Ok(PacketRecord {
        ts,
        src,
        dst,
        proto,
        sport,
        dport,
        len,
    })
}

fn is_csv_header(line: &str) -> bool {
    line.split(',').next().map(str::trim) == Some("ts")
}

/// Read a whole record stream. Lines are parsed in parallel chunks; the
/// output order always equals file order.
pub fn read_records<R: Read>(
    reader: R,
    format: Format,
    strictness: Strictness,
) -> Result<(Vec<PacketRecord>, ParseStats), IngestError> {
    const CHUNK_BYTES: usize = 16 << 20;

    let mut reader = std::io::BufReader::new(reader);
    let mut records = Vec::new();
    let mut stats = ParseStats::default();
    let mut carry: Vec<u8> = Vec::new();
    let mut buf = vec![0u8; CHUNK_BYTES];
    let mut eof = false;

    while !eof {
        let mut chunk = std::mem::take(&mut carry);
        while chunk.len() < CHUNK_BYTES {
            let n = reader.read(&mut buf)?;
            if n == 0 {
                eof = true;
                break;
            }
            chunk.extend_from_slice(&buf[..n]);
        }
        if !eof {
            // Hold back the trailing partial line for the next chunk.
            match chunk.iter().rposition(|&b| b == b'\n') {
                Some(pos) => {
                    carry = chunk.split_off(pos + 1);
                }
                None => {
                    carry = std::mem::take(&mut chunk);
                    continue;
                }
            }
        }
        if chunk.is_empty() {
            continue;
        }
        let text = std::str::from_utf8(&chunk).map_err(|e| IngestError::Line {
            line: stats.lines + 1,
            reason: format!("invalid utf-8: {e}"),
        })?;
        let base_line = stats.lines;
        let lines: Vec<&str> = text.lines().collect();
        stats.lines += lines.len() as u64;

        let parsed: Vec<(u64, Result<Option<PacketRecord>, String>)> = lines
            .par_iter()
            .enumerate()
            .map(|(i, line)| {
                let lineno = base_line + i as u64 + 1;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    return (lineno, Ok(None));
                }
                if format == Format::Csv && lineno == 1 && is_csv_header(trimmed) {
                    return (lineno, Ok(None));
                }
                match parse_record_line(trimmed, format) {
                    Ok(rec) => (lineno, Ok(Some(rec))),
                    Err(e) => (lineno, Err(e.to_string())),
                }
            })
            .collect();

        for (lineno, res) in parsed {
            match res {
                Ok(Some(rec)) => {
                    records.push(rec);
                    stats.parsed += 1;
                }
                Ok(None) => {}
                Err(reason) => {
                    if strictness == Strictness::Strict {
                        return Err(IngestError::Line {
                            line: lineno,
                            reason,
                        });
                    }
                    stats.skipped += 1;
                    if stats.sample_errors.len() < MAX_SAMPLE_ERRORS {
                        stats.sample_errors.push(format!("line {lineno}: {reason}"));
                    }
                }
            }
        }
    }
    Ok((records, stats))
}

/// Write records as ndjson with a stable field order.
pub fn write_ndjson<W: Write>(mut w: W, records: &[PacketRecord]) -> Result<(), IngestError> {
    for rec in records {
        serde_json::to_writer(&mut w, rec)
            .map_err(|e| IngestError::Io(std::io::Error::other(e)))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Exact membership oracle for DNS-exposed addresses.
#[derive(Debug, Default, Clone)]
pub struct DnsOracle {
    set: std::collections::HashSet<Address>,
}

impl DnsOracle {
    pub fn from_addresses<I: IntoIterator<Item = Address>>(addrs: I) -> Self {
        DnsOracle {
            set: addrs.into_iter().collect(),
        }
    }

    /// Load a hitlist: one address per line, `#` comments, blank lines ignored.
    pub fn load_hitlist<R: BufRead>(reader: R) -> Result<Self, IngestError> {
        let mut set = std::collections::HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let text = match line.find('#') {
                Some(pos) => &line[..pos],
                None => &line[..],
            }
            .trim();
            if text.is_empty() {
                continue;
            }
            let addr: Address = text.parse().map_err(|e: ModelError| IngestError::Line {
                line: i as u64 + 1,
                reason: e.to_string(),
            })?;
            set.insert(addr);
        }
        Ok(DnsOracle { set })
    }

    pub fn contains(&self, a: Address) -> bool {
        self.set.contains(&a)
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Longest-prefix-match table mapping prefixes to AS numbers.
///
/// One map per present prefix length, probed from most to least specific.
/// Tables here are thousands of entries at most, so this beats a trie on
/// simplicity without giving up correctness.
#[derive(Debug, Default, Clone)]
pub struct AsnTable {
    by_length: Vec<(u8, HashMap<u128, u32>)>,
}

impl AsnTable {
    pub fn from_entries<I: IntoIterator<Item = (Prefix, u32)>>(entries: I) -> Self {
        let mut maps: HashMap<u8, HashMap<u128, u32>> = HashMap::new();
        for (prefix, asn) in entries {
            maps.entry(prefix.length())
                .or_default()
                .insert(prefix.base().bits(), asn);
        }
        let mut by_length: Vec<_> = maps.into_iter().collect();
        by_length.sort_by(|a, b| b.0.cmp(&a.0));
        AsnTable { by_length }
    }

    /// Load lines of the form `prefix/len,asn`. `#` comments and blank
    /// lines are ignored.
    pub fn load<R: BufRead>(reader: R) -> Result<Self, IngestError> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let text = match line.find('#') {
                Some(pos) => &line[..pos],
                None => &line[..],
            }
            .trim();
            if text.is_empty() {
                continue;
            }
            let err = |reason: String| IngestError::Line {
                line: i as u64 + 1,
                reason,
            };
            let (prefix, asn) = text
                .split_once(',')
                .ok_or_else(|| err("expected `prefix/len,asn`".to_string()))?;
            let prefix: Prefix = prefix
                .trim()
                .parse()
                .map_err(|e: ModelError| err(e.to_string()))?;
            let asn: u32 = asn
                .trim()
                .parse()
                .map_err(|e| err(format!("invalid asn: {e}")))?;
            entries.push((prefix, asn));
        }
        Ok(Self::from_entries(entries))
    }

    /// Longest-prefix-match lookup.
    pub fn lookup(&self, a: Address) -> Option<u32> {
        self.lookup_entry(a).map(|(_, asn)| asn)
    }

    /// Longest-prefix-match lookup returning the matched prefix as well.
    pub fn lookup_entry(&self, a: Address) -> Option<(Prefix, u32)> {
        for (length, map) in &self.by_length {
            let key = Prefix::new(a, *length).expect("length from a valid prefix");
            if let Some(&asn) = map.get(&key.base().bits()) {
                return Some((key, asn));
            }
        }
        None
    }

    pub fn is_empty(&self) -> bool {
        self.by_length.is_empty()
    }
}
