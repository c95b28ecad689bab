//! One experiment, end to end: world, split, style transfer, federated
//! prompt tuning and unseen-domain evaluation.

use fdg_core::datagen::{
    apply_shots, generate_world, leave_one_out, target_text_toggle, Descriptions, EvaluationSplit, SyntheticWorld,
};
use fdg_core::encoder::FrozenEncoder;
use fdg_core::fedruntime::{run_stage1, Checkpoint, ClientInput, CommLedger, Federation, RoundLog, Setup, Stage1Output};
use fdg_core::mst::AugmentationBank;
use fdg_core::prompts::{PromptModel, TextContext};
use fdg_core::seed::derive_seed;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::variant::Variant;

pub fn build_encoder(cfg: &ExperimentConfig) -> CliResult<FrozenEncoder> {
    Ok(FrozenEncoder::new(cfg.encoder_config())?)
}

/// The world of one seed. The encoder seed is fixed by the config, so every
/// seed shares one encoder.
pub fn build_world(cfg: &ExperimentConfig, encoder: &FrozenEncoder, seed: u64) -> CliResult<SyntheticWorld> {
    Ok(generate_world(&cfg.world_spec(seed), encoder)?)
}

/// Leave-one-out split with the configured shot cap applied to the sources.
pub fn prepare_split(
    cfg: &ExperimentConfig,
    world: &SyntheticWorld,
    holdout: usize,
    seed: u64,
) -> CliResult<(EvaluationSplit, bool)> {
    let mut split = leave_one_out(world, holdout)?;
    let saturated = match cfg.shots {
        Some(shots) => apply_shots(&mut split, shots, derive_seed(seed, "run.shots", holdout as u64, 0))?,
        None => false,
    };
    Ok((split, saturated))
}

pub fn descriptions_for(world: &SyntheticWorld, split: &EvaluationSplit, variant: Variant) -> Descriptions {
    target_text_toggle(world, split, variant.toggles().include_target_text)
}

pub fn train_style_transfer(
    cfg: &ExperimentConfig,
    encoder: &FrozenEncoder,
    split: &EvaluationSplit,
    descriptions: &Descriptions,
    seed: u64,
) -> CliResult<Vec<Stage1Output>> {
    let clients: Vec<(usize, &[_])> = split.sources.iter().copied().zip(split.clients.iter().map(Vec::as_slice)).collect();
    let mst_seed = derive_seed(seed, "run.mst", split.holdout as u64, 0);
    Ok(run_stage1(&clients, encoder, descriptions, &cfg.mst_config(), mst_seed)?)
}

#[derive(Debug, Clone)]
pub struct TrainedPrompts {
    pub model: PromptModel,
    pub logs: Vec<RoundLog>,
    pub ledger: CommLedger,
    pub checkpoint: Checkpoint,
}

/// Stage 2. `banks` is ignored (treated as empty) for variants without style
/// transfer.
pub fn train_prompts(
    cfg: &ExperimentConfig,
    encoder: &FrozenEncoder,
    world: &SyntheticWorld,
    split: &EvaluationSplit,
    banks: Option<&[AugmentationBank]>,
    variant: Variant,
    seed: u64,
) -> CliResult<TrainedPrompts> {
    let toggles = variant.toggles();
    toggles.validate()?;
    let class_tokens = world.class_tokens();
    let setup = Setup {
        encoder,
        class_tokens: &class_tokens,
        prompt: cfg.prompt_config(),
        plan: toggles.plan(),
        round: cfg.round_config(split.client_count(), derive_seed(seed, "run.rounds", split.holdout as u64, 0)),
    };
    let inputs = split
        .sources
        .iter()
        .zip(&split.clients)
        .enumerate()
        .map(|(slot, (&domain, data))| {
            let bank = match (toggles.use_mst, banks) {
                (true, Some(b)) => b[slot].clone(),
                (true, None) => {
                    return Err(crate::error::CliError::StageOrder(
                        "variant uses style transfer but no augmentation banks were supplied".into(),
                    ))
                }
                (false, _) => AugmentationBank {
                    source: domain,
                    lists: Vec::new(),
                },
            };
            Ok(ClientInput {
                domain,
                data: data.clone(),
                bank,
                domain_token: world.domain_token(domain),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut fed = Federation::new(setup, inputs)?;
    let logs = fed.run()?;
    Ok(TrainedPrompts {
        model: fed.model()?,
        logs,
        ledger: fed.ledger().clone(),
        checkpoint: fed.checkpoint()?,
    })
}

pub fn evaluate(cfg: &ExperimentConfig, encoder: &FrozenEncoder, world: &SyntheticWorld, model: &PromptModel, split: &EvaluationSplit) -> CliResult<f64> {
    let class_tokens = world.class_tokens();
    let ctx = TextContext::new(encoder, &class_tokens, cfg.temperature);
    Ok(model.accuracy(&ctx, &split.target, cfg.dpg_mode)?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub variant: Variant,
    pub holdout: usize,
    pub accuracy: f64,
    pub last_round: RoundLog,
    pub transforms_per_client: usize,
    pub ledger: CommLedger,
}

/// Caches style-transfer output per (seed, holdout, target text) while a
/// batch of variants runs on the same world.
pub struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    encoder: &'a FrozenEncoder,
    world: &'a SyntheticWorld,
    seed: u64,
    holdout: usize,
    split: EvaluationSplit,
    banks: [Option<Vec<Stage1Output>>; 2],
}

impl<'a> Runner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, encoder: &'a FrozenEncoder, world: &'a SyntheticWorld, holdout: usize) -> CliResult<Self> {
        let seed = world.spec.seed;
        let (split, _) = prepare_split(cfg, world, holdout, seed)?;
        Ok(Self {
            cfg,
            encoder,
            world,
            seed,
            holdout,
            split,
            banks: [None, None],
        })
    }

    pub fn split(&self) -> &EvaluationSplit {
        &self.split
    }

    pub fn run(&mut self, variant: Variant) -> CliResult<RunOutcome> {
        let toggles = variant.toggles();
        toggles.validate()?;
        let slot = usize::from(toggles.include_target_text);
        if toggles.use_mst && self.banks[slot].is_none() {
            let desc = descriptions_for(self.world, &self.split, variant);
            self.banks[slot] = Some(train_style_transfer(self.cfg, self.encoder, &self.split, &desc, self.seed)?);
        }
        let stage1 = if toggles.use_mst { self.banks[slot].as_deref() } else { None };
        let banks: Option<Vec<AugmentationBank>> = stage1.map(|s| s.iter().map(|o| o.bank.clone()).collect());
        let trained = train_prompts(self.cfg, self.encoder, self.world, &self.split, banks.as_deref(), variant, self.seed)?;
        let accuracy = evaluate(self.cfg, self.encoder, self.world, &trained.model, &self.split)?;
        Ok(RunOutcome {
            seed: self.seed,
            variant,
            holdout: self.holdout,
            accuracy,
            last_round: trained.logs.last().copied().unwrap_or_default(),
            transforms_per_client: stage1.map_or(0, |s| s[0].transforms.len()),
            ledger: trained.ledger,
        })
    }
}
