//! Framing for the memory node protocol.
//!
//! Every frame is a 30-byte big-endian header followed by an optional
//! payload:
//!
//! ```text
//! magic "DLMA" | version u8 | opcode u8 | request_id u64 | offset u64 | length u64
//! ```
//!
//! Requests carry a payload for WRITE (the data), CAS (expected, desired),
//! FADD (delta) and SNAPSHOT (a UTF-8 path); for these `length` is the payload
//! size. ALLOC, FREE and READ have no payload and `length` is the size asked
//! for. In a successful response the opcode is echoed, `length` is the payload
//! size and `offset` carries the result (allocated offset for ALLOC, capacity
//! for PING). A failed response sets the high bit of the opcode, puts the
//! error code in `offset` and has no payload.

use std::io::{self, Read, Write};

use crate::fabric::ErrorCode;

pub const MAGIC: &[u8; 4] = b"DLMA";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 30;
pub const ERROR_BIT: u8 = 0x80;

/// Largest payload a peer will accept in one frame.
pub const MAX_PAYLOAD: u64 = (1 << 30) + 4096;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Alloc = 0,
    Free = 1,
    Read = 2,
    Write = 3,
    Cas = 4,
    Fadd = 5,
    Ping = 6,
    Snapshot = 7,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        use Opcode::*;
        Some(match v {
            0 => Alloc,
            1 => Free,
            2 => Read,
            3 => Write,
            4 => Cas,
            5 => Fadd,
            6 => Ping,
            7 => Snapshot,
            _ => return None,
        })
    }

    /// Whether a request with this opcode is followed by `length` payload bytes.
    pub fn request_has_payload(self) -> bool {
        matches!(self, Opcode::Write | Opcode::Cas | Opcode::Fadd | Opcode::Snapshot)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub request_id: u64,
    pub offset: u64,
    pub length: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn request(op: Opcode, request_id: u64, offset: u64, length: u64) -> Self {
        Frame {
            opcode: op as u8,
            request_id,
            offset,
            length,
            payload: Vec::new(),
        }
    }

    pub fn with_payload(op: Opcode, request_id: u64, offset: u64, payload: Vec<u8>) -> Self {
        Frame {
            opcode: op as u8,
            request_id,
            offset,
            length: payload.len() as u64,
            payload,
        }
    }

    pub fn error(op: u8, request_id: u64, code: ErrorCode) -> Self {
        Frame {
            opcode: ERROR_BIT | op,
            request_id,
            offset: code as u64,
            length: 0,
            payload: Vec::new(),
        }
    }

    pub fn is_error(&self) -> bool {
        self.opcode & ERROR_BIT != 0
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        if self.is_error() {
            u8::try_from(self.offset).ok().and_then(ErrorCode::from_u8)
        } else {
            None
        }
    }

    pub fn header(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(MAGIC);
        h[4] = VERSION;
        h[5] = self.opcode;
        h[6..14].copy_from_slice(&self.request_id.to_be_bytes());
        h[14..22].copy_from_slice(&self.offset.to_be_bytes());
        h[22..30].copy_from_slice(&self.length.to_be_bytes());
        h
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(HEADER_LEN + self.payload.len());
        v.extend_from_slice(&self.header());
        v.extend_from_slice(&self.payload);
        v
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.header())?;
        w.write_all(&self.payload)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(u64),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Decoded header fields, before the payload is read.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub opcode: u8,
    pub request_id: u64,
    pub offset: u64,
    pub length: u64,
}

pub fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, WireError> {
    let magic: [u8; 4] = h[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(WireError::BadVersion(h[4]));
    }
    let be = |r: std::ops::Range<usize>| u64::from_be_bytes(h[r].try_into().unwrap());
    Ok(Header {
        opcode: h[5],
        request_id: be(6..14),
        offset: be(14..22),
        length: be(22..30),
    })
}

/// Reads one header. Returns `None` on a clean end of stream.
pub fn read_header(r: &mut impl Read) -> Result<Option<Header>, WireError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    parse_header(&h).map(Some)
}

fn read_payload(r: &mut impl Read, len: u64) -> Result<Vec<u8>, WireError> {
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut p = vec![0; len as usize];
    r.read_exact(&mut p)?;
    Ok(p)
}

/// Reads a request frame, including its payload when the opcode has one.
/// Unknown opcodes are returned without a payload for the server to reject.
pub fn read_request(r: &mut impl Read) -> Result<Option<Frame>, WireError> {
    let Some(h) = read_header(r)? else { return Ok(None) };
    let payload = match Opcode::from_u8(h.opcode) {
        Some(op) if op.request_has_payload() => read_payload(r, h.length)?,
        _ => Vec::new(),
    };
    Ok(Some(Frame {
        opcode: h.opcode,
        request_id: h.request_id,
        offset: h.offset,
        length: h.length,
        payload,
    }))
}

/// Reads a response frame; `length` is always the payload size.
pub fn read_response(r: &mut impl Read) -> Result<Option<Frame>, WireError> {
    let Some(h) = read_header(r)? else { return Ok(None) };
    let payload = read_payload(r, h.length)?;
    Ok(Some(Frame {
        opcode: h.opcode,
        request_id: h.request_id,
        offset: h.offset,
        length: h.length,
        payload,
    }))
}
