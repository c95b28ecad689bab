//! Client/server state machines for the two training stages.

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::ledger::{CommLedger, LedgerEntry};
use super::wire::{Dtype, FederatedMessage, MessageKind, ParamArray};
use crate::datagen::{Descriptions, LabeledEmbedding};
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::mst::{build_augmentation_bank, train_transform, AugmentationBank, MstConfig, TrainedTransform};
use crate::numerics::{GradTape, Matrix, Sgd};
use crate::prompts::{
    classifier_loss, description_embedding, domain_loss, global_loss, DomainClassifier, DomainPromptList,
    PromptBlock, PromptConfig, PromptModel, TextContext,
};
use crate::seed::{derive_seed, rng_for};

pub const GLOBAL_PROMPT: &str = "prompt.global";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";
pub const DOMAIN_PROMPT: &str = "prompt.domain";

pub fn domain_prompt_name(slot: usize) -> String {
    format!("{DOMAIN_PROMPT}.{slot}")
}

/// Parameters in one GLOBAL_UPLOAD: the global prompt (`L·d`) plus a linear
/// classifier over the source domains (`d·K + K`).
pub fn comm_cost(prompt_len: usize, dim: usize, source_domains: usize) -> usize {
    prompt_len * dim + dim * source_domains + source_domains
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Uniform,
    SampleCount,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Aggregation::Uniform),
            "sample-count" => Ok(Aggregation::SampleCount),
            other => Err(Error::config(format!("unknown aggregation {other:?} (uniform|sample-count)"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Uniform => "uniform",
            Aggregation::SampleCount => "sample-count",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub clients: usize,
    pub rounds: usize,
    pub global_epochs: usize,
    pub domain_epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub classifier_lr: f64,
    pub aggregation: Aggregation,
    pub seed: u64,
    pub wire: Dtype,
    /// Run client phases on scoped threads. Results do not depend on it.
    pub parallel: bool,
}

impl RoundConfig {
    pub fn desk(clients: usize, seed: u64) -> Self {
        Self {
            clients,
            rounds: 20,
            global_epochs: 5,
            domain_epochs: 5,
            batch_size: 16,
            prompt_lr: 0.005,
            classifier_lr: 0.01,
            aggregation: Aggregation::SampleCount,
            seed,
            wire: Dtype::F32,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 2 {
            return Err(Error::config("at least 2 clients are required"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if !(self.prompt_lr > 0.0 && self.classifier_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Which trainable components take part in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptPlan {
    pub use_global_prompt: bool,
    pub use_domain_prompt: bool,
    pub use_contrastive: bool,
    /// Train the domain classifier and generate prompts for unseen samples.
    pub use_dpg: bool,
}

impl PromptPlan {
    pub const FULL: PromptPlan = PromptPlan {
        use_global_prompt: true,
        use_domain_prompt: true,
        use_contrastive: true,
        use_dpg: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.use_dpg && !self.use_domain_prompt {
            return Err(Error::config("use_dpg requires use_domain_prompt"));
        }
        if self.use_domain_prompt && !self.use_dpg {
            return Err(Error::config("use_domain_prompt requires use_dpg"));
        }
        if self.use_contrastive && !(self.use_global_prompt && self.use_domain_prompt) {
            return Err(Error::config("use_contrastive requires use_global_prompt and use_domain_prompt"));
        }
        if !self.use_global_prompt && !self.use_domain_prompt {
            return Err(Error::config("at least one of use_global_prompt and use_domain_prompt is required"));
        }
        Ok(())
    }
}

/// Static inputs shared by every party.
#[derive(Debug, Clone, Copy)]
pub struct Setup<'a> {
    pub encoder: &'a FrozenEncoder,
    pub class_tokens: &'a [Vec<f64>],
    pub prompt: PromptConfig,
    pub plan: PromptPlan,
    pub round: RoundConfig,
}

impl<'a> Setup<'a> {
    pub fn context(&self) -> TextContext<'a> {
        TextContext::new(self.encoder, self.class_tokens, self.prompt.temperature)
    }

    fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        self.plan.validate()?;
        self.round.validate()?;
        if self.prompt.dim != self.encoder.dim() {
            return Err(Error::config("prompt dimension differs from the encoder dimension"));
        }
        self.encoder.config().validate(self.prompt.length)
    }
}

/// Output of local style-transfer training for one client.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub transforms: Vec<TrainedTransform>,
    pub bank: AugmentationBank,
}

/// Each client trains `Q^{i→j}` for every described domain `j ≠ i` on its own
/// data and builds its augmentation bank. Nothing is transmitted.
pub fn run_stage1(
    clients: &[(usize, &[LabeledEmbedding])],
    encoder: &FrozenEncoder,
    descriptions: &Descriptions,
    config: &MstConfig,
    seed: u64,
) -> Result<Vec<Stage1Output>> {
    clients
        .iter()
        .map(|&(domain, data)| {
            let targets: Vec<usize> = descriptions.domain_tokens.keys().copied().filter(|&j| j != domain).collect();
            let transforms = targets
                .iter()
                .map(|&j| {
                    let s = derive_seed(seed, "mst.transform", domain as u64, j as u64);
                    train_transform(data, domain, j, encoder, descriptions, config, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let nets: Vec<_> = transforms.iter().map(|t| t.network.clone()).collect();
            let bank = build_augmentation_bank(domain, data, &targets, &nets)?;
            Ok(Stage1Output { transforms, bank })
        })
        .collect()
}

/// Local inputs for one client.
#[derive(Debug, Clone)]
pub struct ClientInput {
    pub domain: usize,
    pub data: Vec<LabeledEmbedding>,
    pub bank: AugmentationBank,
    pub domain_token: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PhaseLosses {
    pub global: f64,
    pub classifier: f64,
    pub domain: f64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub slot: usize,
    pub domain: usize,
    pub data: Vec<LabeledEmbedding>,
    pub bank: AugmentationBank,
    /// `T(t_i)` for the contrastive term.
    pub domain_text: Vec<f64>,
    pub global: Option<PromptBlock>,
    pub classifier: Option<DomainClassifier>,
    pub domain_prompt: Option<PromptBlock>,
    /// Domain index of each client slot, shared so that augmented entries
    /// can be labelled for the classifier.
    slot_domains: Vec<usize>,
    pub uploads: Vec<LedgerEntry>,
}

fn epoch_rng(seed: u64, tag: &str, slot: usize, round: u32, epoch: usize) -> rand_chacha::ChaCha8Rng {
    rng_for(derive_seed(seed, tag, slot as u64, u64::from(round)), "epoch", 0, epoch as u64)
}

fn check_loss(v: f64, what: &str, slot: usize, round: u32) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss of client {slot} in round {round}")))
    }
}

fn check_params(v: &[f64], what: &str, slot: usize, round: u32) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!(
            "{what} of client {slot} diverged at index {i} in round {round}"
        ))),
    }
}

/// Data and encoder are validated up front, so a domain error raised while
/// training can only come from parameters that have blown up.
fn diverged(e: Error, slot: usize, round: u32) -> Error {
    match e {
        Error::Domain(msg) => Error::NonFinite(format!("client {slot} diverged in round {round}: {msg}")),
        other => other,
    }
}

impl ClientState {
    fn global_phase(&mut self, setup: &Setup, round: u32) -> Result<PhaseLosses> {
        let ctx = setup.context();
        let cfg = &setup.round;
        let pool: Vec<&LabeledEmbedding> = self.data.iter().chain(self.bank.entries()).collect();
        let (l, d) = (setup.prompt.length, setup.prompt.dim);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let (mut sum_g, mut sum_f, mut n_g, mut n_f) = (0.0, 0.0, 0usize, 0usize);
        let prompt_sgd = Sgd::new(cfg.prompt_lr);
        let clf_sgd = Sgd::new(cfg.classifier_lr);
        for epoch in 0..cfg.global_epochs {
            order.shuffle(&mut epoch_rng(cfg.seed, "fed.global", self.slot, round, epoch));
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&LabeledEmbedding> = chunk.iter().map(|&i| pool[i]).collect();
                if let Some(pg) = self.global.as_mut() {
                    let mut tape = GradTape::new();
                    let leaf = tape.leaf(GLOBAL_PROMPT, &[l, d]);
                    let loss = global_loss(&ctx, &batch, pg, Some((&mut tape, leaf)))
                        .map_err(|e| diverged(e, self.slot, round))?;
                    check_loss(loss, "global", self.slot, round)?;
                    prompt_sgd.step(pg.data_mut(), tape.grad(leaf))?;
                    check_params(pg.data(), "global prompt", self.slot, round)?;
                    sum_g += loss;
                    n_g += 1;
                }
                if let Some(phi) = self.classifier.as_mut() {
                    let mut inputs = Vec::with_capacity(batch.len());
                    let mut labels = Vec::with_capacity(batch.len());
                    for s in &batch {
                        if let Some(slot) = self.slot_domains.iter().position(|&k| k == s.domain) {
                            inputs.push(s.embedding.as_slice());
                            labels.push(slot);
                        }
                    }
                    if inputs.is_empty() {
                        continue;
                    }
                    let mut tape = GradTape::new();
                    let leaf = tape.leaf("classifier", &[phi.params().len()]);
                    let loss = classifier_loss(&inputs, &labels, phi, Some((&mut tape, leaf)))
                        .map_err(|e| diverged(e, self.slot, round))?;
                    check_loss(loss, "classifier", self.slot, round)?;
                    clf_sgd.step(phi.params_mut(), tape.grad(leaf))?;
                    check_params(phi.params(), "classifier", self.slot, round)?;
                    sum_f += loss;
                    n_f += 1;
                }
            }
        }
        Ok(PhaseLosses {
            global: if n_g > 0 { sum_g / n_g as f64 } else { 0.0 },
            classifier: if n_f > 0 { sum_f / n_f as f64 } else { 0.0 },
            domain: 0.0,
        })
    }

    fn domain_phase(&mut self, setup: &Setup, round: u32) -> Result<f64> {
        let Some(pd) = self.domain_prompt.as_mut() else {
            return Ok(0.0);
        };
        let ctx = setup.context();
        let cfg = &setup.round;
        let sgd = Sgd::new(cfg.prompt_lr);
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let (mut sum, mut n) = (0.0, 0usize);
        for epoch in 0..cfg.domain_epochs {
            order.shuffle(&mut epoch_rng(cfg.seed, "fed.domain", self.slot, round, epoch));
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&LabeledEmbedding> = chunk.iter().map(|&i| &self.data[i]).collect();
                let mut tape = GradTape::new();
                let leaf = tape.leaf(DOMAIN_PROMPT, &[pd.length(), pd.dim()]);
                let parts = domain_loss(
                    &ctx,
                    &batch,
                    self.global.as_ref(),
                    pd,
                    &self.domain_text,
                    setup.plan.use_contrastive,
                    Some((&mut tape, leaf)),
                )
                .map_err(|e| diverged(e, self.slot, round))?;
                check_loss(parts.total(), "domain", self.slot, round)?;
                sgd.step(pd.data_mut(), tape.grad(leaf))?;
                check_params(pd.data(), "domain prompt", self.slot, round)?;
                sum += parts.total();
                n += 1;
            }
        }
        Ok(if n > 0 { sum / n as f64 } else { 0.0 })
    }

    /// GLOBAL_UPLOAD carrying the local global prompt and classifier.
    pub fn global_upload(&self, round: u32, dtype: Dtype) -> Result<FederatedMessage> {
        let mut m = FederatedMessage::new(MessageKind::GlobalUpload, round, self.slot as u32, self.data.len() as u64);
        if let Some(pg) = &self.global {
            m.push(GLOBAL_PROMPT, dtype, &[pg.length(), pg.dim()], pg.data())?;
        }
        if let Some(phi) = &self.classifier {
            m.push(CLASSIFIER_WEIGHT, dtype, &[phi.domains(), phi.dim()], &phi.params()[..phi.domains() * phi.dim()])?;
            m.push(CLASSIFIER_BIAS, dtype, &[phi.domains()], phi.bias())?;
        }
        Ok(m)
    }

    fn apply_global(&mut self, msg: &FederatedMessage) -> Result<()> {
        if let Some(pg) = self.global.as_mut() {
            pg.data_mut().copy_from_slice(&msg.require(GLOBAL_PROMPT)?.values);
        }
        if let Some(phi) = self.classifier.as_mut() {
            let w = &msg.require(CLASSIFIER_WEIGHT)?.values;
            let b = &msg.require(CLASSIFIER_BIAS)?.values;
            let p = phi.params_mut();
            p[..w.len()].copy_from_slice(w);
            p[w.len()..].copy_from_slice(b);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: Option<PromptBlock>,
    pub classifier: Option<DomainClassifier>,
    pub domain_prompts: Option<DomainPromptList>,
    pub round: u32,
    pub ledger: CommLedger,
}

/// Weighted mean of GLOBAL_UPLOAD messages from one round. Uploads are
/// ordered by client id and the mean is taken as offsets from the
/// lowest-id upload, so identical inputs come back unchanged.
pub fn aggregate(uploads: &[FederatedMessage], weighting: Aggregation) -> Result<Vec<ParamArray>> {
    let mut sorted: Vec<&FederatedMessage> = uploads.iter().collect();
    sorted.sort_by_key(|m| m.client);
    let first = *sorted.first().ok_or_else(|| Error::protocol("no uploads to aggregate"))?;
    for pair in sorted.windows(2) {
        if pair[0].client == pair[1].client {
            return Err(Error::protocol(format!("client {} uploaded twice", pair[0].client)));
        }
    }
    for m in &sorted {
        if m.kind != MessageKind::GlobalUpload {
            return Err(Error::protocol(format!("cannot aggregate a {} message", m.kind)));
        }
        if m.round != first.round {
            return Err(Error::protocol(format!(
                "upload from client {} is for round {}, expected {}",
                m.client, m.round, first.round
            )));
        }
        let same_layout = m.arrays.len() == first.arrays.len()
            && m.arrays.iter().zip(&first.arrays).all(|(a, b)| a.name == b.name && a.dims == b.dims);
        if !same_layout {
            return Err(Error::protocol(format!("upload from client {} has a different layout", m.client)));
        }
    }
    let weights: Vec<f64> = sorted
        .iter()
        .map(|m| match weighting {
            Aggregation::Uniform => 1.0,
            Aggregation::SampleCount => m.samples as f64,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::protocol("aggregation weights sum to zero"));
    }
    first
        .arrays
        .iter()
        .enumerate()
        .map(|(a, base)| {
            let values: Vec<f64> = (0..base.values.len())
                .map(|i| {
                    let r = base.values[i];
                    let offset: f64 = sorted
                        .iter()
                        .zip(&weights)
                        .map(|(m, w)| w * (m.arrays[a].values[i] - r))
                        .sum();
                    r + offset / total
                })
                .collect();
            ParamArray::new(base.name.clone(), Dtype::F64, &base.dims, &values)
        })
        .collect()
}

/// Serializes, logs and decodes a message; the receiver only ever sees the
/// decoded copy.
fn transmit(ledger: &mut CommLedger, msg: &FederatedMessage) -> Result<FederatedMessage> {
    if !msg.kind.is_transport() {
        return Err(Error::protocol(format!("{} messages are not allowed on the channel", msg.kind)));
    }
    let bytes = msg.encode();
    ledger.push(LedgerEntry {
        round: msg.round,
        client: msg.client,
        kind: msg.kind,
        param_count: msg.param_count(),
        byte_count: bytes.len(),
    });
    FederatedMessage::decode(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoundLog {
    pub round: u32,
    pub losses: PhaseLosses,
}

/// Clients, server and the shared setup of one federated run.
#[derive(Debug)]
pub struct Federation<'a> {
    pub setup: Setup<'a>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    finalized: bool,
}

impl<'a> Federation<'a> {
    pub fn new(setup: Setup<'a>, inputs: Vec<ClientInput>) -> Result<Self> {
        setup.validate()?;
        if inputs.len() != setup.round.clients {
            return Err(Error::config(format!(
                "round config expects {} clients, got {}",
                setup.round.clients,
                inputs.len()
            )));
        }
        let (l, d) = (setup.prompt.length, setup.prompt.dim);
        let k = inputs.len();
        let seed = setup.round.seed;
        let global = setup.plan.use_global_prompt.then(|| {
            PromptBlock::random(l, d, setup.prompt.init_std, &mut rng_for(seed, "prompt.global.init", 0, 0))
        });
        let classifier = setup.plan.use_dpg.then(|| DomainClassifier::zeros(k, d));
        let slot_domains: Vec<usize> = inputs.iter().map(|c| c.domain).collect();
        let clients = inputs
            .into_iter()
            .enumerate()
            .map(|(slot, input)| {
                let domain_prompt = setup.plan.use_domain_prompt.then(|| {
                    let mut rng = rng_for(seed, "prompt.domain.init", slot as u64, 0);
                    PromptBlock::random(l, d, setup.prompt.init_std, &mut rng)
                });
                Ok(ClientState {
                    slot,
                    domain: input.domain,
                    domain_text: description_embedding(setup.encoder, &input.domain_token)?,
                    data: input.data,
                    bank: input.bank,
                    global: global.clone(),
                    classifier: classifier.clone(),
                    domain_prompt,
                    slot_domains: slot_domains.clone(),
                    uploads: Vec::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            setup,
            server: ServerState {
                global,
                classifier,
                domain_prompts: None,
                round: 0,
                ledger: CommLedger::new(),
            },
            clients,
            finalized: false,
        })
    }

    fn each_client<T: Send>(&mut self, f: impl Fn(&mut ClientState, &Setup) -> Result<T> + Sync) -> Result<Vec<T>> {
        let setup = &self.setup;
        if setup.round.parallel {
            std::thread::scope(|scope| {
                let handles: Vec<_> = self.clients.iter_mut().map(|c| scope.spawn(|| f(c, setup))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().map_err(|_| Error::protocol("client thread panicked"))?)
                    .collect()
            })
        } else {
            self.clients.iter_mut().map(|c| f(c, setup)).collect()
        }
    }

    /// One round: local global-phase epochs, upload, aggregate, broadcast,
    /// then local domain-phase epochs.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        if self.finalized {
            return Err(Error::protocol("federation already finalized"));
        }
        if self.server.round as usize >= self.setup.round.rounds {
            return Err(Error::protocol("all configured rounds are complete"));
        }
        let round = self.server.round + 1;
        let wire = self.setup.round.wire;
        let global_losses = self.each_client(|c, s| c.global_phase(s, round))?;

        let mut received = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            let msg = c.global_upload(round, wire)?;
            let decoded = transmit(&mut self.server.ledger, &msg)?;
            c.uploads.push(*self.server.ledger.entries().last().expect("just pushed"));
            received.push(decoded);
        }
        let merged = aggregate(&received, self.setup.round.aggregation)?;
        for c in &mut self.clients {
            let mut msg = FederatedMessage::new(MessageKind::GlobalBroadcast, round, c.slot as u32, 0);
            for a in &merged {
                msg.push(a.name.clone(), wire, &a.dims, &a.values)?;
            }
            let decoded = transmit(&mut self.server.ledger, &msg)?;
            c.apply_global(&decoded)?;
        }
        if let Some(g) = self.server.global.as_mut() {
            g.data_mut().copy_from_slice(self.clients[0].global.as_ref().expect("plan is shared").data());
        }
        if let Some(phi) = self.server.classifier.as_mut() {
            phi.params_mut().copy_from_slice(self.clients[0].classifier.as_ref().expect("plan is shared").params());
        }

        let domain_losses = self.each_client(|c, s| c.domain_phase(s, round))?;
        self.server.round = round;
        let k = self.clients.len() as f64;
        Ok(RoundLog {
            round,
            losses: PhaseLosses {
                global: global_losses.iter().map(|p| p.global).sum::<f64>() / k,
                classifier: global_losses.iter().map(|p| p.classifier).sum::<f64>() / k,
                domain: domain_losses.iter().sum::<f64>() / k,
            },
        })
    }

    /// Collects every domain prompt and broadcasts the ordered list. A no-op
    /// for plans without domain prompts.
    pub fn finalize(&mut self) -> Result<()> {
        if self.finalized {
            return Err(Error::protocol("federation already finalized"));
        }
        if (self.server.round as usize) < self.setup.round.rounds {
            return Err(Error::protocol(format!(
                "finalize after round {} of {}",
                self.server.round,
                self.setup.round.rounds
            )));
        }
        self.finalized = true;
        if !self.setup.plan.use_domain_prompt {
            return Ok(());
        }
        let round = self.server.round;
        let wire = self.setup.round.wire;
        let mut blocks = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            let pd = c
                .domain_prompt
                .as_ref()
                .ok_or_else(|| Error::protocol(format!("client {} has no domain prompt", c.slot)))?;
            let msg = FederatedMessage::new(MessageKind::DomainUpload, round, c.slot as u32, c.data.len() as u64)
                .with(DOMAIN_PROMPT, wire, &[pd.length(), pd.dim()], pd.data())?;
            let decoded = transmit(&mut self.server.ledger, &msg)?;
            c.uploads.push(*self.server.ledger.entries().last().expect("just pushed"));
            let a = decoded.require(DOMAIN_PROMPT)?;
            blocks.push(PromptBlock::from_matrix(Matrix::from_vec(a.dims[0], a.dims[1], a.values.clone())?));
        }
        let list = DomainPromptList::new(blocks)?;
        for c in &mut self.clients {
            let mut msg = FederatedMessage::new(MessageKind::DomainBroadcast, round, c.slot as u32, 0);
            for (k, b) in list.blocks().iter().enumerate() {
                msg.push(domain_prompt_name(k), wire, &[b.length(), b.dim()], b.data())?;
            }
            transmit(&mut self.server.ledger, &msg)?;
        }
        self.server.domain_prompts = Some(list);
        Ok(())
    }

    /// Runs every remaining round and finalizes.
    pub fn run(&mut self) -> Result<Vec<RoundLog>> {
        let mut logs = Vec::with_capacity(self.setup.round.rounds);
        while (self.server.round as usize) < self.setup.round.rounds {
            logs.push(self.run_round()?);
        }
        self.finalize()?;
        Ok(logs)
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Server-side model for unseen-domain inference.
    pub fn model(&self) -> Result<PromptModel> {
        if !self.finalized {
            return Err(Error::protocol("model requested before finalize"));
        }
        Ok(PromptModel {
            global: self.server.global.clone(),
            domains: self.server.domain_prompts.clone(),
            classifier: self.server.classifier.clone(),
        })
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.server.ledger
    }

    /// Final server parameters as a checkpoint (f64, exact).
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(vec![model_message(&self.model()?, self.server.round)?]))
    }
}

/// One CHECKPOINT message holding every array of a trained model.
pub fn model_message(model: &PromptModel, round: u32) -> Result<FederatedMessage> {
    let mut m = FederatedMessage::new(MessageKind::Checkpoint, round, 0, 0);
    if let Some(g) = &model.global {
        m.push(GLOBAL_PROMPT, Dtype::F64, &[g.length(), g.dim()], g.data())?;
    }
    if let Some(phi) = &model.classifier {
        m.push(CLASSIFIER_WEIGHT, Dtype::F64, &[phi.domains(), phi.dim()], &phi.params()[..phi.domains() * phi.dim()])?;
        m.push(CLASSIFIER_BIAS, Dtype::F64, &[phi.domains()], phi.bias())?;
    }
    if let Some(list) = &model.domains {
        for (k, b) in list.blocks().iter().enumerate() {
            m.push(domain_prompt_name(k), Dtype::F64, &[b.length(), b.dim()], b.data())?;
        }
    }
    Ok(m)
}

fn block_from(a: &ParamArray) -> Result<PromptBlock> {
    if a.dims.len() != 2 {
        return Err(Error::codec(format!("array {} is not a matrix", a.name)));
    }
    Ok(PromptBlock::from_matrix(Matrix::from_vec(a.dims[0], a.dims[1], a.values.clone())?))
}

/// Inverse of [`model_message`].
pub fn model_from_message(m: &FederatedMessage) -> Result<PromptModel> {
    let global = m.array(GLOBAL_PROMPT).map(block_from).transpose()?;
    let classifier = match (m.array(CLASSIFIER_WEIGHT), m.array(CLASSIFIER_BIAS)) {
        (Some(w), Some(b)) => {
            let w = block_from(w)?;
            Some(DomainClassifier::from_parts(w.matrix(), &b.values)?)
        }
        (None, None) => None,
        _ => return Err(Error::codec("classifier weight and bias must both be present")),
    };
    let mut blocks = Vec::new();
    while let Some(a) = m.array(&domain_prompt_name(blocks.len())) {
        blocks.push(block_from(a)?);
    }
    let domains = if blocks.is_empty() { None } else { Some(DomainPromptList::new(blocks)?) };
    Ok(PromptModel {
        global,
        domains,
        classifier,
    })
}
