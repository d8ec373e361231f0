//! Metadata wire format, argument serialization and identifier derivation.
//!
//! Every metadata unit is a fixed 24-byte [`MessageHeader`] followed by
//! `payload_len` bytes:
//!
//! ```text
//! 0      4   5    6     7    8        12               20          24
//! +------+---+----+-----+----+--------+----------------+-----------+
//! | MRPC |ver|kind|flags| 0  | rpc_id |     cookie     |payload_len|
//! +------+---+----+-----+----+--------+----------------+-----------+
//! ```
//!
//! All multi-byte integers are little-endian.

use std::fmt;

use thiserror::Error;

/// Magic prefix of every header.
pub const MAGIC: [u8; 4] = *b"MRPC";
/// Current protocol version.
pub const VERSION: u8 = 1;
/// Encoded size of [`MessageHeader`].
pub const HEADER_LEN: usize = 24;
/// Default maximum payload of a REQUEST/RESPONSE/ERROR frame.
pub const DEFAULT_EAGER_LIMIT: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("short buffer: {len} bytes, header needs {HEADER_LEN}")]
    ShortBuffer { len: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    BadKind(u8),
    #[error("rpc name must not be empty")]
    EmptyName,
    #[error("decode overrun: need {needed} bytes, {remaining} remaining")]
    DecodeOverrun { needed: usize, remaining: usize },
    #[error("declared length {declared} exceeds remaining {remaining} bytes")]
    LengthOverflow { declared: usize, remaining: usize },
    #[error("length {0} does not fit a u32 prefix")]
    TooLong(usize),
    #[error("frame declares {declared} payload bytes but carries {actual}")]
    FrameLength { declared: usize, actual: usize },
    #[error("invalid utf-8 in string field")]
    Utf8,
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageKind {
    Request = 1,
    Response = 2,
    BulkGet = 3,
    BulkPut = 4,
    BulkData = 5,
    BulkAck = 6,
    Error = 7,
    /// Connection preamble carrying the connector's listen address.
    Hello = 8,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Request,
        MessageKind::Response,
        MessageKind::BulkGet,
        MessageKind::BulkPut,
        MessageKind::BulkData,
        MessageKind::BulkAck,
        MessageKind::Error,
        MessageKind::Hello,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| *k as u8 == v)
            .ok_or(WireError::BadKind(v))
    }

    /// Kinds that travel as unexpected messages and are bounded by the eager limit.
    pub fn is_metadata(self) -> bool {
        matches!(
            self,
            MessageKind::Request | MessageKind::Response | MessageKind::Error
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Flags(pub u8);

impl Flags {
    pub const NONE: Flags = Flags(0);
    pub const NO_RESPONSE: Flags = Flags(1 << 0);
    pub const HAS_BULK: Flags = Flags(1 << 1);

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }
}

impl std::ops::BitOr for Flags {
    type Output = Flags;
    fn bitor(self, rhs: Flags) -> Flags {
        Flags(self.0 | rhs.0)
    }
}

/// Identifier selecting the target callback, derived from the registered name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RpcId(pub u32);

impl fmt::Display for RpcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

const FNV_OFFSET_BASIS: u32 = 0x811C_9DC5;
const FNV_PRIME: u32 = 0x0100_0193;

/// FNV-1a (32-bit) over the UTF-8 bytes of `name`.
pub fn rpc_id_from_name(name: &str) -> Result<RpcId> {
    if name.is_empty() {
        return Err(WireError::EmptyName);
    }
    let hash = name.bytes().fold(FNV_OFFSET_BASIS, |h, b| {
        (h ^ u32::from(b)).wrapping_mul(FNV_PRIME)
    });
    Ok(RpcId(hash))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub version: u8,
    pub kind: MessageKind,
    pub flags: Flags,
    pub rpc_id: RpcId,
    pub cookie: u64,
    pub payload_len: u32,
}

impl MessageHeader {
    pub fn new(kind: MessageKind, rpc_id: RpcId, cookie: u64, flags: Flags, payload_len: u32) -> Self {
        Self {
            version: VERSION,
            kind,
            flags,
            rpc_id,
            cookie,
            payload_len,
        }
    }
}

pub fn encode_header(h: &MessageHeader) -> [u8; HEADER_LEN] {
    let mut out = [0u8; HEADER_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4] = h.version;
    out[5] = h.kind as u8;
    out[6] = h.flags.0;
    // out[7] is padding
    out[8..12].copy_from_slice(&h.rpc_id.0.to_le_bytes());
    out[12..20].copy_from_slice(&h.cookie.to_le_bytes());
    out[20..24].copy_from_slice(&h.payload_len.to_le_bytes());
    out
}

pub fn decode_header(b: &[u8]) -> Result<MessageHeader> {
    if b.len() < HEADER_LEN {
        return Err(WireError::ShortBuffer { len: b.len() });
    }
    let magic: [u8; 4] = b[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if b[4] != VERSION {
        return Err(WireError::BadVersion(b[4]));
    }
    let kind = MessageKind::from_u8(b[5])?;
    Ok(MessageHeader {
        version: b[4],
        kind,
        flags: Flags(b[6]),
        rpc_id: RpcId(u32::from_le_bytes(b[8..12].try_into().unwrap())),
        cookie: u64::from_le_bytes(b[12..20].try_into().unwrap()),
        payload_len: u32::from_le_bytes(b[20..24].try_into().unwrap()),
    })
}

/// Builds `header ‖ payload`, filling in `payload_len`.
pub fn encode_frame(mut header: MessageHeader, payload: &[u8]) -> Result<Vec<u8>> {
    header.payload_len = u32::try_from(payload.len()).map_err(|_| WireError::TooLong(payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&encode_header(&header));
    out.extend_from_slice(payload);
    Ok(out)
}

/// Splits a complete frame into its header and payload.
pub fn split_frame(frame: &[u8]) -> Result<(MessageHeader, &[u8])> {
    let header = decode_header(frame)?;
    let payload = &frame[HEADER_LEN..];
    if payload.len() != header.payload_len as usize {
        return Err(WireError::FrameLength {
            declared: header.payload_len as usize,
            actual: payload.len(),
        });
    }
    Ok((header, payload))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcDirection {
    Encode,
    Decode,
}

/// Symmetric serialization context: the same sequence of `proc_*` calls
/// encodes values into the buffer or decodes them back out of it.
#[derive(Debug, Clone)]
pub struct ProcContext {
    direction: ProcDirection,
    buffer: Vec<u8>,
    position: usize,
}

impl ProcContext {
    pub fn encoder() -> Self {
        Self {
            direction: ProcDirection::Encode,
            buffer: Vec::new(),
            position: 0,
        }
    }

    pub fn decoder(buffer: impl Into<Vec<u8>>) -> Self {
        Self {
            direction: ProcDirection::Decode,
            buffer: buffer.into(),
            position: 0,
        }
    }

    pub fn direction(&self) -> ProcDirection {
        self.direction
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn remaining(&self) -> usize {
        self.buffer.len() - self.position
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buffer
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buffer
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(WireError::DecodeOverrun {
                needed: n,
                remaining: self.remaining(),
            });
        }
        let start = self.position;
        self.position += n;
        Ok(&self.buffer[start..start + n])
    }

    fn put(&mut self, bytes: &[u8]) {
        self.buffer.extend_from_slice(bytes);
        self.position = self.buffer.len();
    }

    pub fn proc_u8(&mut self, v: &mut u8) -> Result<()> {
        match self.direction {
            ProcDirection::Encode => self.put(&[*v]),
            ProcDirection::Decode => *v = self.take(1)?[0],
        }
        Ok(())
    }

    pub fn proc_u32(&mut self, v: &mut u32) -> Result<()> {
        match self.direction {
            ProcDirection::Encode => self.put(&v.to_le_bytes()),
            ProcDirection::Decode => *v = u32::from_le_bytes(self.take(4)?.try_into().unwrap()),
        }
        Ok(())
    }

    pub fn proc_u64(&mut self, v: &mut u64) -> Result<()> {
        match self.direction {
            ProcDirection::Encode => self.put(&v.to_le_bytes()),
            ProcDirection::Decode => *v = u64::from_le_bytes(self.take(8)?.try_into().unwrap()),
        }
        Ok(())
    }

    /// `u32` length prefix followed by the raw bytes.
    pub fn proc_bytes(&mut self, v: &mut Vec<u8>) -> Result<()> {
        match self.direction {
            ProcDirection::Encode => {
                let len = u32::try_from(v.len()).map_err(|_| WireError::TooLong(v.len()))?;
                self.put(&len.to_le_bytes());
                self.put(v);
            }
            ProcDirection::Decode => {
                let mut len = 0u32;
                self.proc_u32(&mut len)?;
                let len = len as usize;
                if len > self.remaining() {
                    return Err(WireError::LengthOverflow {
                        declared: len,
                        remaining: self.remaining(),
                    });
                }
                *v = self.take(len)?.to_vec();
            }
        }
        Ok(())
    }

    pub fn proc_string(&mut self, v: &mut String) -> Result<()> {
        match self.direction {
            ProcDirection::Encode => {
                let mut bytes = v.as_bytes().to_vec();
                self.proc_bytes(&mut bytes)
            }
            ProcDirection::Decode => {
                let mut bytes = Vec::new();
                self.proc_bytes(&mut bytes)?;
                *v = String::from_utf8(bytes).map_err(|_| WireError::Utf8)?;
                Ok(())
            }
        }
    }
}

/// Types that know how to move themselves through a [`ProcContext`].
pub trait Proc {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()>;
}

impl Proc for u8 {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()> {
        ctx.proc_u8(self)
    }
}

impl Proc for u32 {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()> {
        ctx.proc_u32(self)
    }
}

impl Proc for u64 {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()> {
        ctx.proc_u64(self)
    }
}

impl Proc for Vec<u8> {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()> {
        ctx.proc_bytes(self)
    }
}

impl Proc for String {
    fn proc(&mut self, ctx: &mut ProcContext) -> Result<()> {
        ctx.proc_string(self)
    }
}

/// Encodes a value into a fresh buffer.
pub fn encode<T: Proc + Clone>(value: &T) -> Result<Vec<u8>> {
    let mut ctx = ProcContext::encoder();
    value.clone().proc(&mut ctx)?;
    Ok(ctx.into_bytes())
}

/// Decodes a value, rejecting trailing bytes.
pub fn decode<T: Proc + Default>(bytes: &[u8]) -> Result<T> {
    let mut ctx = ProcContext::decoder(bytes);
    let mut value = T::default();
    value.proc(&mut ctx)?;
    if ctx.remaining() != 0 {
        return Err(WireError::FrameLength {
            declared: ctx.position(),
            actual: bytes.len(),
        });
    }
    Ok(value)
}

/// CRC-32 (IEEE, reflected, init and final xor all-ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub u32);

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08x}", self.0)
    }
}

pub fn checksum(b: &[u8]) -> Checksum {
    Checksum(crc32fast::hash(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(payload_len: u32) -> MessageHeader {
        MessageHeader::new(MessageKind::Request, RpcId(0), 0, Flags::NONE, payload_len)
    }

    #[test]
    fn zero_header_layout() {
        let b = encode_header(&request(0));
        assert_eq!(&b[0..4], b"MRPC");
        assert_eq!(b[4], VERSION);
        assert_eq!(b[5], MessageKind::Request as u8);
        assert!(b[6..].iter().all(|&x| x == 0));
    }

    #[test]
    fn payload_len_little_endian() {
        let b = encode_header(&request(42));
        assert_eq!(&b[20..24], &[0x2A, 0, 0, 0]);
    }

    #[test]
    fn field_offsets() {
        let h = MessageHeader::new(
            MessageKind::BulkAck,
            RpcId(0x0403_0201),
            0x0807_0605_0403_0201,
            Flags::HAS_BULK,
            0xDDCC_BBAA,
        );
        let b = encode_header(&h);
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(b[6], 2);
        assert_eq!(b[7], 0);
        assert_eq!(&b[8..12], &[1, 2, 3, 4]);
        assert_eq!(&b[12..20], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(&b[20..24], &[0xAA, 0xBB, 0xCC, 0xDD]);
    }

    #[test]
    fn decode_errors() {
        let b = encode_header(&request(0));
        assert_eq!(
            decode_header(&b[..HEADER_LEN - 1]),
            Err(WireError::ShortBuffer { len: HEADER_LEN - 1 })
        );
        let mut bad = b;
        bad[1] = b'X';
        assert!(matches!(decode_header(&bad), Err(WireError::BadMagic(_))));
        let mut bad = b;
        bad[4] = 2;
        assert_eq!(decode_header(&bad), Err(WireError::BadVersion(2)));
        let mut bad = b;
        bad[5] = 0;
        assert_eq!(decode_header(&bad), Err(WireError::BadKind(0)));
        bad[5] = 200;
        assert_eq!(decode_header(&bad), Err(WireError::BadKind(200)));
    }

    #[test]
    fn rpc_id_examples() {
        assert_eq!(rpc_id_from_name(""), Err(WireError::EmptyName));
        let expected = (0x811C_9DC5u32 ^ 0x61).wrapping_mul(0x0100_0193);
        assert_eq!(rpc_id_from_name("a").unwrap(), RpcId(expected));
        assert_eq!(rpc_id_from_name("a").unwrap(), RpcId(0xE40C_292C));
        assert_eq!(rpc_id_from_name("echo").unwrap(), RpcId(0xD49D_D484));
    }

    #[test]
    fn proc_u64_cases() {
        let mut enc = ProcContext::encoder();
        enc.proc_u64(&mut 0).unwrap();
        assert_eq!(enc.as_bytes(), &[0u8; 8]);
        assert_eq!(enc.position(), 8);

        let mut enc = ProcContext::encoder();
        enc.proc_u64(&mut 123_456_789).unwrap();
        let mut dec = ProcContext::decoder(enc.into_bytes());
        let mut v = 0;
        dec.proc_u64(&mut v).unwrap();
        assert_eq!(v, 123_456_789);
        assert_eq!(dec.position(), 8);

        let mut dec = ProcContext::decoder(vec![0u8; 7]);
        assert_eq!(
            dec.proc_u64(&mut v),
            Err(WireError::DecodeOverrun { needed: 8, remaining: 7 })
        );
        assert_eq!(dec.position(), 0);
    }

    #[test]
    fn proc_bytes_cases() {
        let mut enc = ProcContext::encoder();
        enc.proc_bytes(&mut Vec::new()).unwrap();
        assert_eq!(enc.as_bytes(), &[0u8; 4]);

        let mut buf = 100u32.to_le_bytes().to_vec();
        buf.extend_from_slice(&[7u8; 50]);
        let mut dec = ProcContext::decoder(buf);
        assert_eq!(
            dec.proc_bytes(&mut Vec::new()),
            Err(WireError::LengthOverflow { declared: 100, remaining: 50 })
        );

        let mut dec = ProcContext::decoder(vec![1u8, 0]);
        assert!(matches!(
            dec.proc_bytes(&mut Vec::new()),
            Err(WireError::DecodeOverrun { .. })
        ));
    }

    #[test]
    fn typed_helpers() {
        let bytes = encode(&"hello".to_string()).unwrap();
        assert_eq!(decode::<String>(&bytes).unwrap(), "hello");
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode::<String>(&trailing).is_err());
    }

    #[test]
    fn checksum_examples() {
        assert_eq!(checksum(b""), Checksum(0));
        assert_eq!(checksum(b"123456789"), Checksum(0xCBF4_3926));
    }

    #[test]
    fn frame_split() {
        let f = encode_frame(request(0), b"abc").unwrap();
        let (h, p) = split_frame(&f).unwrap();
        assert_eq!(h.payload_len, 3);
        assert_eq!(p, b"abc");
        assert!(matches!(
            split_frame(&f[..f.len() - 1]),
            Err(WireError::FrameLength { .. })
        ));
    }
}
