use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::phy::AuditTx;
use crate::types::{Band, FrameKind, GatewayId, NodeAddr, SimTime, Source};

/// One line of the JSON-lines event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Tx {
        start_us: u64,
        airtime_us: u64,
        from: String,
        kind: FrameKind,
        node: u32,
        counter: u16,
        channel: u8,
        sf: u8,
        band: Band,
    },
    Rx {
        t_us: u64,
        gateway: u32,
        kind: FrameKind,
        node: u32,
        counter: u16,
    },
    Delivered {
        t_us: u64,
        node: u32,
        counter: u16,
        late: bool,
        relayed: bool,
    },
    Acked {
        t_us: u64,
        node: u32,
        counter: u16,
        attempt: u32,
        kind: FrameKind,
    },
    Abandoned {
        t_us: u64,
        node: u32,
        counter: u16,
        attempts: u32,
    },
    Gateway {
        t_us: u64,
        gateway: u32,
        what: String,
        node: u32,
        counter: u16,
    },
}

impl LogRecord {
    /// The duty-cycle view of a transmission record.
    pub fn audit_tx(&self) -> Option<AuditTx> {
        match self {
            LogRecord::Tx {
                start_us,
                airtime_us,
                from,
                band,
                ..
            } => Some(AuditTx {
                transmitter: parse_source(from)?,
                band: *band,
                start: SimTime::from_micros(*start_us),
                airtime: *airtime_us,
            }),
            _ => None,
        }
    }
}

fn parse_source(s: &str) -> Option<Source> {
    let (tag, id) = s.split_at(1.min(s.len()));
    let id: u32 = id.parse().ok()?;
    match tag {
        "N" => Some(Source::Node(NodeAddr(id))),
        "G" => Some(Source::Gateway(GatewayId(id))),
        _ => None,
    }
}

pub fn write_jsonl<W: Write>(records: &[LogRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses a JSON-lines log; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> io::Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(io::Error::other)?);
    }
    Ok(out)
}
