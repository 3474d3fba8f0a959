//! Wire format shared by the simulator, the server and the client library.
//!
//! A request starts with a fixed 64-byte header followed by its payload. The
//! header's `size` field counts 64-byte blocks and includes the header block
//! itself, so a request always spans `size * 64` bytes on the wire. Responses
//! carry a 16-byte header followed by `payload_size` bytes. All multi-byte
//! fields are big-endian.

use thiserror::Error;

/// Bytes in one size block; also the encoded header length.
pub const BLOCK_BYTES: usize = 64;
pub const REQUEST_HEADER_BYTES: usize = 64;
pub const PARAMETER_BYTES: usize = 60;
pub const RESPONSE_HEADER_BYTES: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("expected {expected} header bytes, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("request size must be at least one block")]
    ZeroSize,
    #[error("unknown response status {0}")]
    UnknownStatus(u16),
    #[error("payload of {0} bytes does not fit in a request")]
    PayloadTooLarge(usize),
}

/// The invocation descriptor embedded in the first fragment of every request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RequestHeader {
    pub accelerator_id: u16,
    /// Request length in 64-byte blocks, header block included.
    pub size: u16,
    /// Accelerator-specific arguments, passed through untouched.
    pub parameters: [u8; PARAMETER_BYTES],
}

impl RequestHeader {
    pub fn new(accelerator_id: u16, size: u16, parameters: [u8; PARAMETER_BYTES]) -> Self {
        Self {
            accelerator_id,
            size,
            parameters,
        }
    }

    /// Header for a request carrying `payload_len` bytes after the header,
    /// rounded up to whole blocks.
    pub fn for_payload(
        accelerator_id: u16,
        payload_len: usize,
        parameters: [u8; PARAMETER_BYTES],
    ) -> Result<Self, ProtocolError> {
        let blocks = padded_request_bytes(payload_len) / BLOCK_BYTES;
        let size = u16::try_from(blocks).map_err(|_| ProtocolError::PayloadTooLarge(payload_len))?;
        Ok(Self::new(accelerator_id, size, parameters))
    }

    pub fn encode(&self) -> [u8; REQUEST_HEADER_BYTES] {
        encode_header(self)
    }

    pub fn total_bytes(&self) -> u64 {
        request_total_bytes(self)
    }

    /// Payload bytes following the header.
    pub fn payload_bytes(&self) -> u64 {
        self.total_bytes().saturating_sub(REQUEST_HEADER_BYTES as u64)
    }
}

pub fn encode_header(h: &RequestHeader) -> [u8; REQUEST_HEADER_BYTES] {
    let mut out = [0u8; REQUEST_HEADER_BYTES];
    out[0..2].copy_from_slice(&h.accelerator_id.to_be_bytes());
    out[2..4].copy_from_slice(&h.size.to_be_bytes());
    out[4..].copy_from_slice(&h.parameters);
    out
}

/// Inverse of [`encode_header`]. Rejects anything that is not exactly 64
/// bytes and any header declaring zero blocks.
pub fn decode_header(b: &[u8]) -> Result<RequestHeader, ProtocolError> {
    if b.len() != REQUEST_HEADER_BYTES {
        return Err(ProtocolError::WrongLength {
            expected: REQUEST_HEADER_BYTES,
            actual: b.len(),
        });
    }
    let accelerator_id = u16::from_be_bytes([b[0], b[1]]);
    let size = u16::from_be_bytes([b[2], b[3]]);
    if size == 0 {
        return Err(ProtocolError::ZeroSize);
    }
    let mut parameters = [0u8; PARAMETER_BYTES];
    parameters.copy_from_slice(&b[4..]);
    Ok(RequestHeader {
        accelerator_id,
        size,
        parameters,
    })
}

pub fn request_total_bytes(h: &RequestHeader) -> u64 {
    u64::from(h.size) * BLOCK_BYTES as u64
}

/// Bytes on the wire for a request whose logical payload is `payload_len`:
/// header plus payload, zero-padded to the next block boundary.
pub fn padded_request_bytes(payload_len: usize) -> usize {
    (REQUEST_HEADER_BYTES + payload_len).div_ceil(BLOCK_BYTES) * BLOCK_BYTES
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u16)]
pub enum Status {
    Ok = 0,
    DroppedNoBuffer = 1,
    UnknownAccelerator = 2,
    Malformed = 3,
}

impl Status {
    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::DroppedNoBuffer => "dropped",
            Status::UnknownAccelerator => "unknown_accelerator",
            Status::Malformed => "malformed",
        }
    }
}

impl TryFrom<u16> for Status {
    type Error = ProtocolError;

    fn try_from(v: u16) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Status::Ok),
            1 => Ok(Status::DroppedNoBuffer),
            2 => Ok(Status::UnknownAccelerator),
            3 => Ok(Status::Malformed),
            other => Err(ProtocolError::UnknownStatus(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResponseHeader {
    pub status: Status,
    pub accelerator_id: u16,
    pub payload_size: u32,
}

impl ResponseHeader {
    pub fn ok(accelerator_id: u16, payload_size: u32) -> Self {
        Self {
            status: Status::Ok,
            accelerator_id,
            payload_size,
        }
    }

    /// Error responses never carry a payload.
    pub fn error(status: Status, accelerator_id: u16) -> Self {
        Self {
            status,
            accelerator_id,
            payload_size: 0,
        }
    }

    pub fn encode(&self) -> [u8; RESPONSE_HEADER_BYTES] {
        let mut out = [0u8; RESPONSE_HEADER_BYTES];
        out[0..2].copy_from_slice(&self.status.code().to_be_bytes());
        out[2..4].copy_from_slice(&self.accelerator_id.to_be_bytes());
        let size = if self.status == Status::Ok {
            self.payload_size
        } else {
            0
        };
        out[4..8].copy_from_slice(&size.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ProtocolError> {
        if b.len() != RESPONSE_HEADER_BYTES {
            return Err(ProtocolError::WrongLength {
                expected: RESPONSE_HEADER_BYTES,
                actual: b.len(),
            });
        }
        let status = Status::try_from(u16::from_be_bytes([b[0], b[1]]))?;
        let accelerator_id = u16::from_be_bytes([b[2], b[3]]);
        let payload_size = u32::from_be_bytes([b[4], b[5], b[6], b[7]]);
        Ok(Self {
            status,
            accelerator_id,
            payload_size,
        })
    }
}

/// One transport payload carrying part of one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub connection_id: u32,
    pub payload: Vec<u8>,
    /// True iff `payload` begins with a [`RequestHeader`].
    pub is_first: bool,
}

impl Fragment {
    pub fn first(connection_id: u32, payload: Vec<u8>) -> Self {
        Self {
            connection_id,
            payload,
            is_first: true,
        }
    }

    pub fn continuation(connection_id: u32, payload: Vec<u8>) -> Self {
        Self {
            connection_id,
            payload,
            is_first: false,
        }
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

/// Splits an encoded request into fragments of at most `fragment_bytes`.
/// The first fragment always carries the whole header.
pub fn fragment_request(connection_id: u32, wire: &[u8], fragment_bytes: usize) -> Vec<Fragment> {
    assert!(fragment_bytes >= REQUEST_HEADER_BYTES);
    wire.chunks(fragment_bytes)
        .enumerate()
        .map(|(i, chunk)| Fragment {
            connection_id,
            payload: chunk.to_vec(),
            is_first: i == 0,
        })
        .collect()
}
