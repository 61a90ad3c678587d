//! Binary framing for every message exchanged between nodes.
//!
//! Fixed 32-byte little-endian header followed by the payload:
//!
//! | offset | type | field |
//! |---|---|---|
//! | 0 | u16 | magic `0xF75D` |
//! | 2 | u8 | version (1) |
//! | 3 | u8 | op |
//! | 4 | u32 | sender node id |
//! | 8 | u32 | communicator epoch |
//! | 12 | u32 | collective sequence number |
//! | 16 | u32 | chunk index |
//! | 20 | u32 | aux (op specific) |
//! | 24 | u32 | payload length in bytes |
//! | 28 | u32 | CRC-32 of bytes 0..28 followed by the payload |
//!
//! Payloads are little-endian f64 values for `Allreduce` and `Bcast`, u32
//! values for `ShrinkPropose` and `ShrinkCommit`, and empty otherwise.

use thiserror::Error;

use crate::NodeId;

pub const MAGIC: u16 = 0xF75D;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
/// Upper bound on accepted payloads, guarding against corrupt length fields.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Op {
    Allreduce = 1,
    Bcast = 2,
    Barrier = 3,
    ShrinkPropose = 4,
    ShrinkCommit = 5,
    Heartbeat = 6,
}

impl Op {
    pub const ALL: [Op; 6] = [
        Op::Allreduce,
        Op::Bcast,
        Op::Barrier,
        Op::ShrinkPropose,
        Op::ShrinkCommit,
        Op::Heartbeat,
    ];

    pub fn from_u8(v: u8) -> Option<Op> {
        Op::ALL.into_iter().find(|op| *op as u8 == v)
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Allreduce => "allreduce",
            Op::Bcast => "bcast",
            Op::Barrier => "barrier",
            Op::ShrinkPropose => "shrink-propose",
            Op::ShrinkCommit => "shrink-commit",
            Op::Heartbeat => "heartbeat",
        }
    }

    pub fn parse(s: &str) -> Option<Op> {
        match s {
            "propose" => Some(Op::ShrinkPropose),
            "commit" => Some(Op::ShrinkCommit),
            _ => Op::ALL.into_iter().find(|op| op.name() == s),
        }
    }

    fn carries_reals(self) -> bool {
        matches!(self, Op::Allreduce | Op::Bcast)
    }

    fn carries_ids(self) -> bool {
        matches!(self, Op::ShrinkPropose | Op::ShrinkCommit)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Empty,
    Reals(Vec<f64>),
    Ids(Vec<u32>),
}

impl Payload {
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Empty => 0,
            Payload::Reals(v) => 8 * v.len(),
            Payload::Ids(v) => 4 * v.len(),
        }
    }

    pub fn reals(&self) -> &[f64] {
        match self {
            Payload::Reals(v) => v,
            _ => &[],
        }
    }

    pub fn ids(&self) -> &[u32] {
        match self {
            Payload::Ids(v) => v,
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireMessage {
    pub op: Op,
    pub sender: NodeId,
    pub epoch: u32,
    pub seq: u32,
    pub chunk: u32,
    pub aux: u32,
    pub payload: Payload,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame shorter than its header or declared payload")]
    Short,
    #[error("bad magic {0:#06x}")]
    Magic(u16),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown op {0}")]
    Op(u8),
    #[error("payload of {len} bytes invalid for {op}")]
    PayloadShape { op: &'static str, len: usize },
    #[error("checksum mismatch")]
    Checksum,
}

impl WireMessage {
    pub fn new(op: Op, sender: NodeId, epoch: u32, seq: u32) -> Self {
        WireMessage {
            op,
            sender,
            epoch,
            seq,
            chunk: 0,
            aux: 0,
            payload: Payload::Empty,
        }
    }

    pub fn with_chunk(mut self, chunk: u32) -> Self {
        self.chunk = chunk;
        self
    }

    pub fn with_aux(mut self, aux: u32) -> Self {
        self.aux = aux;
        self
    }

    pub fn with_payload(mut self, payload: Payload) -> Self {
        self.payload = payload;
        self
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.byte_len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.op as u8);
        for v in [
            self.sender,
            self.epoch,
            self.seq,
            self.chunk,
            self.aux,
            self.payload.byte_len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[0; 4]);
        match &self.payload {
            Payload::Empty => {}
            Payload::Reals(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Ids(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        let crc = checksum(&out[..28], &out[HEADER_LEN..]);
        out[28..32].copy_from_slice(&crc.to_le_bytes());
        out
    }

    /// Payload length declared by a header, for stream readers.
    pub fn payload_len(header: &[u8; HEADER_LEN]) -> Result<usize, WireError> {
        let len = u32_at(header, 24) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::Short);
        }
        Ok(len)
    }

    pub fn decode(frame: &[u8]) -> Result<Self, WireError> {
        if frame.len() < HEADER_LEN {
            return Err(WireError::Short);
        }
        let magic = u16::from_le_bytes([frame[0], frame[1]]);
        if magic != MAGIC {
            return Err(WireError::Magic(magic));
        }
        if frame[2] != VERSION {
            return Err(WireError::Version(frame[2]));
        }
        let op = Op::from_u8(frame[3]).ok_or(WireError::Op(frame[3]))?;
        let len = u32_at(frame, 24) as usize;
        if frame.len() != HEADER_LEN + len {
            return Err(WireError::Short);
        }
        let body = &frame[HEADER_LEN..];
        if checksum(&frame[..28], body) != u32_at(frame, 28) {
            return Err(WireError::Checksum);
        }
        let bad = || WireError::PayloadShape { op: op.name(), len };
        let payload = if op.carries_reals() {
            if !len.is_multiple_of(8) {
                return Err(bad());
            }
            Payload::Reals(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            )
        } else if op.carries_ids() {
            if !len.is_multiple_of(4) {
                return Err(bad());
            }
            Payload::Ids(
                body.chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            if len != 0 {
                return Err(bad());
            }
            Payload::Empty
        };
        Ok(WireMessage {
            op,
            sender: u32_at(frame, 4),
            epoch: u32_at(frame, 8),
            seq: u32_at(frame, 12),
            chunk: u32_at(frame, 16),
            aux: u32_at(frame, 20),
            payload,
        })
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn checksum(header: &[u8], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(header);
    h.update(payload);
    h.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = WireMessage::new(Op::Bcast, 7, 3, 9)
            .with_chunk(2)
            .with_aux(5)
            .with_payload(Payload::Reals(vec![1.5]));
        let b = m.encode();
        assert_eq!(b.len(), 40);
        assert_eq!(&b[..4], &[0x5D, 0xF7, 1, 2]);
        assert_eq!(u32_at(&b, 4), 7);
        assert_eq!(u32_at(&b, 8), 3);
        assert_eq!(u32_at(&b, 12), 9);
        assert_eq!(u32_at(&b, 16), 2);
        assert_eq!(u32_at(&b, 20), 5);
        assert_eq!(u32_at(&b, 24), 8);
        assert_eq!(&b[32..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn corruption_is_detected() {
        let m = WireMessage::new(Op::ShrinkPropose, 1, 0, 0).with_payload(Payload::Ids(vec![4, 5]));
        let mut b = m.encode();
        b[33] ^= 1;
        assert_eq!(WireMessage::decode(&b), Err(WireError::Checksum));
        let mut b = m.encode();
        b[0] = 0;
        assert!(matches!(WireMessage::decode(&b), Err(WireError::Magic(_))));
        assert_eq!(WireMessage::decode(&m.encode()[..35]), Err(WireError::Short));
    }

    #[test]
    fn op_names_round_trip() {
        for op in Op::ALL {
            assert_eq!(Op::parse(op.name()), Some(op));
        }
        assert_eq!(Op::parse("commit"), Some(Op::ShrinkCommit));
        assert_eq!(Op::parse("nope"), None);
    }

    proptest! {
        #[test]
        fn round_trip(
            sender: u32, epoch: u32, seq: u32, chunk: u32, aux: u32,
            reals in proptest::collection::vec(any::<f64>(), 0..64),
            ids in proptest::collection::vec(any::<u32>(), 0..16),
            which in 0usize..6,
        ) {
            let op = Op::ALL[which];
            let payload = if op.carries_reals() {
                Payload::Reals(reals)
            } else if op.carries_ids() {
                Payload::Ids(ids)
            } else {
                Payload::Empty
            };
            let m = WireMessage { op, sender, epoch, seq, chunk, aux, payload };
            let back = WireMessage::decode(&m.encode()).unwrap();
            // compare bit patterns so NaN payloads count as equal
            prop_assert_eq!(back.encode(), m.encode());
        }
    }
}
