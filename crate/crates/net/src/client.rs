//! Blocking client: one request in flight per connection.

use std::io::{self, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use offrac_core::protocol::{
    padded_request_bytes, ProtocolError, RequestHeader, ResponseHeader, Status, PARAMETER_BYTES, REQUEST_HEADER_BYTES,
    RESPONSE_HEADER_BYTES,
};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("connection failed: {0}")]
    Io(#[from] io::Error),
    #[error("bad response: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("still dropped after {0} attempts")]
    RetriesExhausted(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub accelerator_id: u16,
    pub payload: Vec<u8>,
}

/// Header plus payload, zero-padded to whole 64-byte blocks.
pub fn encode_request(
    accelerator_id: u16,
    parameters: [u8; PARAMETER_BYTES],
    payload: &[u8],
) -> Result<Vec<u8>, ProtocolError> {
    let header = RequestHeader::for_payload(accelerator_id, payload.len(), parameters)?;
    let mut wire = Vec::with_capacity(padded_request_bytes(payload.len()));
    wire.extend_from_slice(&header.encode());
    wire.extend_from_slice(payload);
    wire.resize(padded_request_bytes(payload.len()), 0);
    Ok(wire)
}

/// Payload length that makes a request span exactly `fragments` fragments.
pub fn payload_for_fragments(fragments: u32, fragment_bytes: usize) -> usize {
    (fragments as usize * fragment_bytes).saturating_sub(REQUEST_HEADER_BYTES)
}

pub struct Client {
    stream: TcpStream,
    fragment_bytes: usize,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, fragment_bytes: usize) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            fragment_bytes: fragment_bytes.max(REQUEST_HEADER_BYTES),
        })
    }

    /// Writes the whole request, one fragment per write. A request that gets
    /// dropped is still sent in full so the byte stream stays framed; the
    /// server discards the remainder.
    pub fn send(&mut self, wire: &[u8]) -> io::Result<()> {
        for chunk in wire.chunks(self.fragment_bytes) {
            self.stream.write_all(chunk)?;
        }
        Ok(())
    }

    pub fn receive(&mut self) -> Result<Response, ClientError> {
        let mut header = [0u8; RESPONSE_HEADER_BYTES];
        self.stream.read_exact(&mut header)?;
        let header = ResponseHeader::decode(&header)?;
        let mut payload = vec![0u8; header.payload_size as usize];
        self.stream.read_exact(&mut payload)?;
        Ok(Response {
            status: header.status,
            accelerator_id: header.accelerator_id,
            payload,
        })
    }

    pub fn call(
        &mut self,
        accelerator_id: u16,
        parameters: [u8; PARAMETER_BYTES],
        payload: &[u8],
    ) -> Result<Response, ClientError> {
        let wire = encode_request(accelerator_id, parameters, payload)?;
        self.send(&wire)?;
        self.receive()
    }

    /// Retries dropped requests after a uniform random delay in
    /// `retry_delay`. Returns the final response and the attempts made.
    pub fn call_with_retry(
        &mut self,
        accelerator_id: u16,
        parameters: [u8; PARAMETER_BYTES],
        payload: &[u8],
        retry_delay: (Duration, Duration),
        max_attempts: u32,
    ) -> Result<(Response, u32), ClientError> {
        let wire = encode_request(accelerator_id, parameters, payload)?;
        let mut rng = rand::rng();
        for attempt in 1..=max_attempts {
            self.send(&wire)?;
            let response = self.receive()?;
            if response.status != Status::DroppedNoBuffer {
                return Ok((response, attempt));
            }
            if attempt < max_attempts {
                std::thread::sleep(rng.random_range(retry_delay.0..=retry_delay.1));
            }
        }
        Err(ClientError::RetriesExhausted(max_attempts))
    }

    pub fn into_stream(self) -> TcpStream {
        self.stream
    }
}
