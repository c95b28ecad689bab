use std::fmt::Write as _;

use super::wire::MessageKind;

/// One transmitted message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub round: u32,
    pub client: u32,
    pub kind: MessageKind,
    pub param_count: usize,
    pub byte_count: usize,
}

/// Communication ledger kept by the channel.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

pub const LEDGER_CSV_HEADER: &str = "round,client_id,kind,param_count,byte_count";

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn count(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn total_params(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.param_count).sum()
    }

    pub fn total_bytes(&self, kind: MessageKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.byte_count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LEDGER_CSV_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{},{}", e.round, e.client, e.kind, e.param_count, e.byte_count);
        }
        s
    }
}
