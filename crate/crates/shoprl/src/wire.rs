//! Length-prefixed binary frames for the inter-process scoring mode.
//!
//! Frame layout: u32 payload length (little endian), u8 message kind,
//! payload. Payload fields use the same little-endian primitive encoding as
//! checkpoints; strings are u32-length-prefixed UTF-8.

use std::io::{Read, Write};
use std::net::TcpStream;

use crate::actions::ScoredActionSet;
use crate::env::{ActionKind, ActionSpec};
use crate::error::ShopError;
use crate::model::ContextEncoding;

pub const KIND_SCORE_REQUEST: u8 = 1;
pub const KIND_SCORE_RESPONSE: u8 = 2;
pub const KIND_REFRESH: u8 = 3;
pub const KIND_ACK: u8 = 4;
pub const KIND_ERROR: u8 = 5;
pub const KIND_SHUTDOWN: u8 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub stream_id: u32,
    pub context: ContextEncoding,
    pub actions: Vec<ActionSpec>,
    /// Seed for materializing an open query slot, drawn by the master so the
    /// result does not depend on which worker serves the request.
    pub query_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub stream_id: u32,
    pub set: ScoredActionSet,
    pub value: f64,
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ShopError> {
        if self.pos + n > self.buf.len() {
            return Err(ShopError::Format("wire payload truncated".into()));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, ShopError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ShopError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, ShopError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, ShopError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, ShopError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn string(&mut self) -> Result<String, ShopError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ShopError::Format("invalid utf-8".into()))
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_action(w: &mut Writer, action: &ActionSpec) {
    w.u8(match action.kind {
        ActionKind::SearchQuery => 0,
        ActionKind::Click => 1,
    });
    w.u32(action.surface.len() as u32);
    for tok in &action.surface {
        w.string(tok);
    }
}

fn read_action(r: &mut Reader<'_>) -> Result<ActionSpec, ShopError> {
    let kind = match r.u8()? {
        0 => ActionKind::SearchQuery,
        1 => ActionKind::Click,
        k => return Err(ShopError::Format(format!("unknown action kind {k}"))),
    };
    let n = r.u32()? as usize;
    let mut surface = Vec::with_capacity(n);
    for _ in 0..n {
        surface.push(r.string()?);
    }
    Ok(ActionSpec { kind, surface })
}

pub fn encode_request(req: &ScoreRequest) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(req.stream_id);
    w.u64(req.query_seed);
    w.u32(req.context.token_ids.len() as u32);
    for id in &req.context.token_ids {
        w.u32(*id);
    }
    w.u32(req.actions.len() as u32);
    for a in &req.actions {
        write_action(&mut w, a);
    }
    w.finish()
}

pub fn decode_request(payload: &[u8]) -> Result<ScoreRequest, ShopError> {
    let mut r = Reader::new(payload);
    let stream_id = r.u32()?;
    let query_seed = r.u64()?;
    let n_ctx = r.u32()? as usize;
    let mut token_ids = Vec::with_capacity(n_ctx);
    for _ in 0..n_ctx {
        token_ids.push(r.u32()?);
    }
    let n_actions = r.u32()? as usize;
    let mut actions = Vec::with_capacity(n_actions);
    for _ in 0..n_actions {
        actions.push(read_action(&mut r)?);
    }
    Ok(ScoreRequest {
        stream_id,
        context: ContextEncoding { token_ids },
        actions,
        query_seed,
    })
}

pub fn encode_response(resp: &ScoreResponse) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(resp.stream_id);
    w.f64(resp.value);
    w.u32(resp.set.actions.len() as u32);
    for i in 0..resp.set.actions.len() {
        write_action(&mut w, &resp.set.actions[i]);
        w.f64(resp.set.mean_logprobs[i]);
        w.f64(resp.set.probs[i]);
    }
    w.finish()
}

pub fn decode_response(payload: &[u8]) -> Result<ScoreResponse, ShopError> {
    let mut r = Reader::new(payload);
    let stream_id = r.u32()?;
    let value = r.f64()?;
    let n = r.u32()? as usize;
    let mut actions = Vec::with_capacity(n);
    let mut mean_logprobs = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        actions.push(read_action(&mut r)?);
        mean_logprobs.push(r.f64()?);
        probs.push(r.f64()?);
    }
    Ok(ScoreResponse {
        stream_id,
        set: ScoredActionSet { actions, mean_logprobs, probs },
        value,
    })
}

pub fn encode_refresh(arch_hash: u64, flat: &[f32]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(arch_hash);
    w.u64(flat.len() as u64);
    for v in flat {
        w.f32(*v);
    }
    w.finish()
}

pub fn decode_refresh(payload: &[u8]) -> Result<(u64, Vec<f32>), ShopError> {
    let mut r = Reader::new(payload);
    let hash = r.u64()?;
    let n = r.u64()? as usize;
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        flat.push(r.f32()?);
    }
    Ok((hash, flat))
}

pub fn write_frame(stream: &mut TcpStream, kind: u8, payload: &[u8]) -> Result<(), ShopError> {
    stream.write_all(&(payload.len() as u32).to_le_bytes())?;
    stream.write_all(&[kind])?;
    stream.write_all(payload)?;
    stream.flush()?;
    Ok(())
}

pub fn read_frame(stream: &mut TcpStream) -> Result<(u8, Vec<u8>), ShopError> {
    let mut len_buf = [0u8; 4];
    stream.read_exact(&mut len_buf)?;
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut kind = [0u8; 1];
    stream.read_exact(&mut kind)?;
    let mut payload = vec![0u8; len];
    stream.read_exact(&mut payload)?;
    Ok((kind[0], payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_roundtrip() {
        let req = ScoreRequest {
            stream_id: 7,
            context: ContextEncoding { token_ids: vec![1, 5, 9, 2] },
            actions: vec![
                ActionSpec::query(vec!["query".into()]),
                ActionSpec::click(&["buy", "now"]),
            ],
            query_seed: 0xdead_beef_cafe,
        };
        let bytes = encode_request(&req);
        assert_eq!(decode_request(&bytes).unwrap(), req);
    }

    #[test]
    fn response_roundtrip_preserves_float_bits() {
        let set = ScoredActionSet {
            actions: vec![ActionSpec::click(&["next"]), ActionSpec::click(&["prev"])],
            mean_logprobs: vec![-1.234567890123, -0.000000012345],
            probs: vec![0.7500000000001, 0.2499999999999],
        };
        let resp = ScoreResponse { stream_id: 3, set, value: -0.125 };
        let bytes = encode_response(&resp);
        let back = decode_response(&bytes).unwrap();
        assert_eq!(back, resp);
        assert_eq!(back.set.probs[0].to_bits(), resp.set.probs[0].to_bits());
    }

    #[test]
    fn truncated_payloads_are_rejected() {
        let req = ScoreRequest {
            stream_id: 1,
            context: ContextEncoding { token_ids: vec![4] },
            actions: vec![ActionSpec::click(&["next"])],
            query_seed: 1,
        };
        let bytes = encode_request(&req);
        assert!(decode_request(&bytes[..bytes.len() - 3]).is_err());
    }
}
