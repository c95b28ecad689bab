//! Binary message format.
//!
//! All integers are little-endian.
//!
//! ```text
//! header   "FSPT" | version u16 | kind u8 | round u32 | client u32 | samples u64 | arrays u16
//! array    name_len u16 | name (UTF-8) | dtype u8 | rank u8 | dims u32 * rank | values
//! trailer  CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Values are stored as f32 (`dtype = 1`) or f64 (`dtype = 2`). An f32 array
//! is rounded once when it is attached to a message, so the in-memory message
//! and its decoded copy are always bit-identical.

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSPT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 1 + 4 + 4 + 8 + 2;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    GlobalUpload,
    GlobalBroadcast,
    DomainUpload,
    DomainBroadcast,
    /// Local storage only; never sent over the channel.
    Checkpoint,
}

impl MessageKind {
    pub fn code(self) -> u8 {
        match self {
            MessageKind::GlobalUpload => 1,
            MessageKind::GlobalBroadcast => 2,
            MessageKind::DomainUpload => 3,
            MessageKind::DomainBroadcast => 4,
            MessageKind::Checkpoint => 0x10,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            1 => MessageKind::GlobalUpload,
            2 => MessageKind::GlobalBroadcast,
            3 => MessageKind::DomainUpload,
            4 => MessageKind::DomainBroadcast,
            0x10 => MessageKind::Checkpoint,
            other => return Err(Error::codec(format!("unknown message kind {other:#04x}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::GlobalUpload => "GLOBAL_UPLOAD",
            MessageKind::GlobalBroadcast => "GLOBAL_BROADCAST",
            MessageKind::DomainUpload => "DOMAIN_UPLOAD",
            MessageKind::DomainBroadcast => "DOMAIN_BROADCAST",
            MessageKind::Checkpoint => "CHECKPOINT",
        }
    }

    /// Kinds allowed on the federated channel.
    pub fn is_transport(self) -> bool {
        !matches!(self, MessageKind::Checkpoint)
    }
}

impl std::fmt::Display for MessageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::codec(format!("unknown dtype code {other}"))),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds a value to what this dtype can carry.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => f64::from(v as f32),
            Dtype::F64 => v,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::config(format!("unknown wire precision {other:?} (f32|f64)"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamArray {
    pub fn new(name: impl Into<String>, dtype: Dtype, dims: &[usize], values: &[f64]) -> Result<Self> {
        let name = name.into();
        if name.len() > usize::from(u16::MAX) {
            return Err(Error::codec("array name too long"));
        }
        if dims.len() > usize::from(u8::MAX) || dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::codec(format!("array {name}: dims do not fit the wire format")));
        }
        let count: usize = dims.iter().product();
        if count != values.len() {
            return Err(Error::codec(format!(
                "array {name}: dims {dims:?} hold {count} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            name,
            dtype,
            dims: dims.to_vec(),
            values: values.iter().map(|&v| dtype.quantize(v)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 1 + 4 * self.dims.len() + self.values.len() * self.dtype.width()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedMessage {
    pub kind: MessageKind,
    pub round: u32,
    pub client: u32,
    pub samples: u64,
    pub arrays: Vec<ParamArray>,
}

impl FederatedMessage {
    pub fn new(kind: MessageKind, round: u32, client: u32, samples: u64) -> Self {
        Self {
            kind,
            round,
            client,
            samples,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, dims: &[usize], values: &[f64]) -> Result<()> {
        let array = ParamArray::new(name, dtype, dims, values)?;
        if self.array(&array.name).is_some() {
            return Err(Error::codec(format!("duplicate array name {:?}", array.name)));
        }
        if self.arrays.len() == usize::from(u16::MAX) {
            return Err(Error::codec("too many arrays in one message"));
        }
        self.arrays.push(array);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, dtype: Dtype, dims: &[usize], values: &[f64]) -> Result<Self> {
        self.push(name, dtype, dims, values)?;
        Ok(self)
    }

    pub fn array(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&ParamArray> {
        self.array(name)
            .ok_or_else(|| Error::codec(format!("{} message has no array {name:?}", self.kind)))
    }

    /// Total scalar count over all arrays.
    pub fn param_count(&self) -> usize {
        self.arrays.iter().map(ParamArray::len).sum()
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.arrays.iter().map(ParamArray::encoded_len).sum::<usize>() + TRAILER_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&self.samples.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u16).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(a.dtype.code());
            out.push(a.dims.len() as u8);
            for &d in &a.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match a.dtype {
                Dtype::F32 => a.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                Dtype::F64 => a.values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + TRAILER_LEN {
            return Err(Error::codec(format!("message of {} bytes is truncated", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::codec(format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::codec("bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::codec(format!("unsupported version {version}")));
        }
        let kind = MessageKind::from_code(r.u8()?)?;
        let round = r.u32()?;
        let client = r.u32()?;
        let samples = r.u64()?;
        let count = r.u16()?;
        let mut msg = FederatedMessage::new(kind, round, client, samples);
        for _ in 0..count {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::codec("array name is not UTF-8"))?
                .to_owned();
            let dtype = Dtype::from_code(r.u8()?)?;
            let rank = usize::from(r.u8()?);
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::codec("array size overflows"))?;
            let raw = r.take(n.checked_mul(dtype.width()).ok_or_else(|| Error::codec("array size overflows"))?)?;
            let values: Vec<f64> = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            msg.push(name, dtype, &dims, &values)?;
        }
        if r.pos != body.len() {
            return Err(Error::codec(format!("{} trailing bytes after last array", body.len() - r.pos)));
        }
        Ok(msg)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::codec("unexpected end of message"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
