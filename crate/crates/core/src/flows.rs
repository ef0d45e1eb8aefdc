//! Flow assembly and packet-length tokenization.
//!
//! Packets are grouped by their directional five-tuple; every packet of a
//! key belongs to a single flow (no idle timeout). A flow is reduced to the
//! lengths of its head packets, clamped to `max_len` and zero-padded, which
//! is the only signal the feature extractor sees.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::net::IpAddr;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HEAD_PACKETS: usize = 50;
pub const DEFAULT_MAX_LEN: u32 = 1500;
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "TCP",
            Protocol::Udp => "UDP",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TCP" | "6" => Ok(Protocol::Tcp),
            "UDP" | "17" => Ok(Protocol::Udp),
            other => Err(format!("unknown protocol `{other}`")),
        }
    }
}

/// Binary class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Normal = 0,
    Malicious = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Normal),
            1 => Some(Label::Malicious),
            _ => None,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Malicious,
            Label::Malicious => Label::Normal,
        }
    }

    pub fn is_malicious(self) -> bool {
        self == Label::Malicious
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim()
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| format!("label must be 0 or 1, got `{}`", s.trim()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    pub timestamp: f64,
    pub length: u32,
}

impl PacketRecord {
    pub fn key(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip,
            dst_ip: self.dst_ip,
            src_port: self.src_port,
            dst_port: self.dst_port,
            protocol: self.protocol,
        }
    }
}

/// Directional five-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub key: FlowKey,
    pub first_ts: f64,
    pub lengths: Vec<u32>,
}

/// Fixed-length token sequence of one flow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LengthSequence {
    pub tokens: Vec<u32>,
    pub true_len: usize,
}

impl LengthSequence {
    pub fn n(&self) -> usize {
        self.tokens.len()
    }
}

/// Groups packets into one flow per directional five-tuple.
///
/// Lengths within a flow follow packet timestamps, ties keeping input order;
/// flows are returned by ascending first timestamp (ties by first
/// appearance).
pub fn assemble_flows(packets: &[PacketRecord]) -> Result<Vec<Flow>> {
    let mut index: HashMap<FlowKey, usize> = HashMap::new();
    let mut groups: Vec<(FlowKey, Vec<(f64, u32)>)> = Vec::new();
    for (i, p) in packets.iter().enumerate() {
        if p.length == 0 {
            return Err(Error::MalformedPacket {
                index: i,
                reason: "packet length must be positive".into(),
            });
        }
        if !p.timestamp.is_finite() {
            return Err(Error::MalformedPacket {
                index: i,
                reason: "timestamp is not finite".into(),
            });
        }
        let key = p.key();
        let slot = *index.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push((p.timestamp, p.length));
    }
    let mut flows: Vec<Flow> = groups
        .into_iter()
        .map(|(key, mut pkts)| {
            // stable: equal timestamps keep input order
            pkts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Flow {
                key,
                first_ts: pkts[0].0,
                lengths: pkts.into_iter().map(|(_, l)| l).collect(),
            }
        })
        .collect();
    flows.sort_by(|a, b| a.first_ts.total_cmp(&b.first_ts));
    Ok(flows)
}

/// Keeps the first `n` packet lengths, clamps each to `max_len` and pads
/// with [`PAD_TOKEN`]. The vocabulary size is `max_len + 1`.
pub fn tokenize(flow: &Flow, n: usize, max_len: u32) -> LengthSequence {
    assert!(n >= 1 && max_len >= 1);
    let true_len = flow.lengths.len().min(n);
    let mut tokens = vec![PAD_TOKEN; n];
    for (slot, &len) in tokens.iter_mut().zip(&flow.lengths) {
        *slot = len.clamp(1, max_len);
    }
    LengthSequence { tokens, true_len }
}

pub fn vocab_size(max_len: u32) -> usize {
    max_len as usize + 1
}

fn format_flow(flow: &Flow) -> String {
    let lens: Vec<String> = flow.lengths.iter().map(|l| l.to_string()).collect();
    let k = &flow.key;
    format!(
        "{},{},{},{},{},{},{}",
        k.src_ip,
        k.dst_ip,
        k.src_port,
        k.dst_port,
        k.protocol,
        flow.first_ts,
        lens.join(" ")
    )
}

fn parse_flow_fields(fields: &[&str]) -> std::result::Result<Flow, String> {
    let ip = |s: &str| s.trim().parse::<IpAddr>().map_err(|e| format!("bad address `{s}`: {e}"));
    let port = |s: &str| s.trim().parse::<u16>().map_err(|e| format!("bad port `{s}`: {e}"));
    let first_ts: f64 = fields[5]
        .trim()
        .parse()
        .map_err(|e| format!("bad timestamp `{}`: {e}", fields[5]))?;
    if !first_ts.is_finite() {
        return Err("timestamp is not finite".into());
    }
    let lengths = fields[6]
        .split_whitespace()
        .map(|t| match t.parse::<u32>() {
            Ok(0) => Err("packet length must be positive".to_string()),
            Ok(v) => Ok(v),
            Err(e) => Err(format!("bad length `{t}`: {e}")),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if lengths.is_empty() {
        return Err("flow has no packet lengths".into());
    }
    Ok(Flow {
        key: FlowKey {
            src_ip: ip(fields[0])?,
            dst_ip: ip(fields[1])?,
            src_port: port(fields[2])?,
            dst_port: port(fields[3])?,
            protocol: fields[4].parse()?,
        },
        first_ts,
        lengths,
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Writes a flow file; `header` lines are emitted as `#` comments.
pub fn save_flow_file(flows: &[Flow], path: &Path, header: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for f in flows {
        writeln!(w, "{}", format_flow(f))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_flow_file(path: &Path) -> Result<Vec<Flow>> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(no, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::parse(path, no, format!("expected 7 fields, found {}", fields.len())));
            }
            parse_flow_fields(&fields).map_err(|r| Error::parse(path, no, r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub flow: Flow,
    pub label: Label,
}

pub fn save_labeled_flow_file(flows: &[LabeledFlow], path: &Path, header: &[String]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for h in header {
        writeln!(w, "# {h}")?;
    }
    for f in flows {
        writeln!(w, "{},{}", format_flow(&f.flow), f.label)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_labeled_flow_file(path: &Path) -> Result<Vec<LabeledFlow>> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(no, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::parse(path, no, format!("expected 8 fields, found {}", fields.len())));
            }
            let flow = parse_flow_fields(&fields[..7]).map_err(|r| Error::parse(path, no, r))?;
            let label = fields[7].parse::<Label>().map_err(|r| Error::parse(path, no, r))?;
            Ok(LabeledFlow { flow, label })
        })
        .collect()
}

/// Reads a packet file: `timestamp,src_ip,dst_ip,src_port,dst_port,proto,length`.
pub fn load_packet_file(path: &Path) -> Result<Vec<PacketRecord>> {
    let text = fs::read_to_string(path)?;
    data_lines(&text)
        .map(|(no, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(Error::parse(path, no, format!("expected 7 fields, found {}", f.len())));
            }
            let err = |r: String| Error::parse(path, no, r);
            Ok(PacketRecord {
                timestamp: f[0].parse().map_err(|e| err(format!("bad timestamp: {e}")))?,
                src_ip: f[1].parse().map_err(|e| err(format!("bad address: {e}")))?,
                dst_ip: f[2].parse().map_err(|e| err(format!("bad address: {e}")))?,
                src_port: f[3].parse().map_err(|e| err(format!("bad port: {e}")))?,
                dst_port: f[4].parse().map_err(|e| err(format!("bad port: {e}")))?,
                protocol: f[5].parse().map_err(err)?,
                length: f[6].parse().map_err(|e| err(format!("bad length: {e}")))?,
            })
        })
        .collect()
}
