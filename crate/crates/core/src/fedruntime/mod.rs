//! Federated runtime: wire format, checkpoints, the communication ledger and
//! the client/server protocol.

mod checkpoint;
mod export;
mod ledger;
mod protocol;
mod wire;

pub use checkpoint::{Checkpoint, FOOTER_MAGIC};
pub use export::{
    bank_from_message, bank_message, encoder_message, transforms_from_message, transforms_message, world_from_message,
    world_message,
};
pub use ledger::{CommLedger, LedgerEntry, LEDGER_CSV_HEADER};
pub use protocol::{
    aggregate, comm_cost, domain_prompt_name, model_from_message, model_message, run_stage1, Aggregation, ClientInput,
    ClientState, Federation, PhaseLosses, PromptPlan, RoundConfig, RoundLog, ServerState, Setup, Stage1Output,
    CLASSIFIER_BIAS, CLASSIFIER_WEIGHT, DOMAIN_PROMPT, GLOBAL_PROMPT,
};
pub use wire::{Dtype, FederatedMessage, MessageKind, ParamArray, HEADER_LEN, MAGIC, TRAILER_LEN, VERSION};
