//! Checkpoint container: encoded messages back to back, then an index footer.
//!
//! ```text
//! message_0 .. message_{n-1}
//! (offset u64, length u64) * n
//! n u32 | "FSPX"
//! ```

use std::path::Path;

use super::wire::{FederatedMessage, ParamArray};
use crate::error::{Error, Result};

pub const FOOTER_MAGIC: [u8; 4] = *b"FSPX";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub messages: Vec<FederatedMessage>,
}

impl Checkpoint {
    pub fn new(messages: Vec<FederatedMessage>) -> Self {
        Self { messages }
    }

    pub fn push(&mut self, message: FederatedMessage) {
        self.messages.push(message);
    }

    /// First array called `name` across all messages.
    pub fn array(&self, name: &str) -> Option<&ParamArray> {
        self.messages.iter().find_map(|m| m.array(name))
    }

    pub fn require(&self, name: &str) -> Result<&ParamArray> {
        self.array(name)
            .ok_or_else(|| Error::codec(format!("checkpoint has no array {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut index = Vec::with_capacity(self.messages.len());
        for m in &self.messages {
            let bytes = m.encode();
            index.push((out.len() as u64, bytes.len() as u64));
            out.extend_from_slice(&bytes);
        }
        for (offset, len) in index {
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
        out.extend_from_slice(&(self.messages.len() as u32).to_le_bytes());
        out.extend_from_slice(&FOOTER_MAGIC);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[bytes.len() - 4..] != FOOTER_MAGIC {
            return Err(Error::codec("not a checkpoint file (missing footer)"));
        }
        let count_at = bytes.len() - 8;
        let count = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().expect("4 bytes")) as usize;
        let index_len = count
            .checked_mul(16)
            .filter(|&n| n <= count_at)
            .ok_or_else(|| Error::codec("checkpoint index does not fit the file"))?;
        let index_at = count_at - index_len;
        let mut messages = Vec::with_capacity(count);
        for i in 0..count {
            let at = index_at + 16 * i;
            let offset = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
            let len = u64::from_le_bytes(bytes[at + 8..at + 16].try_into().expect("8 bytes")) as usize;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= index_at)
                .ok_or_else(|| Error::codec(format!("checkpoint entry {i} points outside the file")))?;
            messages.push(FederatedMessage::decode(&bytes[offset..end])?);
        }
        Ok(Self { messages })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedruntime::wire::{Dtype, MessageKind};

    #[test]
    fn round_trip_and_lookup() {
        let a = FederatedMessage::new(MessageKind::Checkpoint, 0, 0, 0)
            .with("alpha", Dtype::F64, &[2], &[1.0, 2.0])
            .unwrap();
        let b = FederatedMessage::new(MessageKind::DomainBroadcast, 4, 0, 0)
            .with("beta", Dtype::F32, &[1, 1], &[0.5])
            .unwrap();
        let ck = Checkpoint::new(vec![a, b]);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.require("beta").unwrap().values, vec![0.5]);
        assert!(back.require("gamma").is_err());
        assert_eq!(Checkpoint::from_bytes(&Checkpoint::default().to_bytes()).unwrap().messages.len(), 0);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let ck = Checkpoint::new(vec![FederatedMessage::new(MessageKind::Checkpoint, 0, 0, 0)]);
        let mut bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[5] ^= 0xFF;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
