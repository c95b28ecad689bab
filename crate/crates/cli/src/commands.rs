//! Subcommands. Each stage reads the files the previous stage wrote to the
//! output directory and refuses to run when they are missing. Every command
//! returns the text it wants printed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fdg_core::datagen::{LabeledEmbedding, SyntheticWorld};
use fdg_core::encoder::FrozenEncoder;
use fdg_core::fedruntime::{
    bank_from_message, bank_message, comm_cost, encoder_message, model_from_message, transforms_message,
    world_from_message, world_message, Checkpoint, Dtype, FederatedMessage, MessageKind, PhaseLosses,
    LEDGER_CSV_HEADER,
};
use fdg_core::mst::{nearest_neighbor_audit, AugmentationBank};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::metrics::{metrics_csv, summarize, summary_csv, timings_csv, MetricsRow, TimingRow};
use crate::pipeline::{
    build_encoder, build_world, descriptions_for, evaluate, prepare_split, train_prompts, train_style_transfer,
    Runner,
};
use crate::variant::Variant;

const LOSSES: &str = "train.losses";

/// Options shared by every subcommand. Unset values fall back to the config:
/// the first listed seed, the first listed held-out domain (else 0) and the
/// full method.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub holdout: Option<usize>,
    pub variant: Option<Variant>,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: PathBuf) -> Self {
        Self {
            config,
            out,
            seed: None,
            holdout: None,
            variant: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.config.seeds[0])
    }

    pub fn holdout(&self) -> CliResult<usize> {
        let u = self.holdout.or_else(|| self.config.holdouts.first().copied()).unwrap_or(0);
        if u >= self.config.domains {
            return Err(CliError::Config(format!(
                "held-out domain {u} out of range for {} domains",
                self.config.domains
            )));
        }
        Ok(u)
    }

    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(Variant::Full)
    }

    pub fn world_path(&self, seed: u64) -> PathBuf {
        self.out.join(format!("world-s{seed}.fspt"))
    }

    pub fn mst_path(&self, seed: u64, holdout: usize, target_text: bool) -> PathBuf {
        let suffix = if target_text { "-target" } else { "" };
        self.out.join(format!("mst-s{seed}-u{holdout}{suffix}.fspt"))
    }

    pub fn prompts_path(&self, seed: u64, holdout: usize, variant: Variant) -> PathBuf {
        self.out.join(format!("prompts-s{seed}-u{holdout}-{variant}.fspt"))
    }

    pub fn ledger_path(&self, seed: u64, holdout: usize, variant: Variant) -> PathBuf {
        self.out.join(format!("ledger-s{seed}-u{holdout}-{variant}.csv"))
    }

    pub fn metrics_path(&self, seed: u64, holdout: usize, variant: Variant) -> PathBuf {
        self.out.join(format!("metrics-s{seed}-u{holdout}-{variant}.csv"))
    }

    fn prepare_out(&self) -> CliResult<()> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_stage(path: &Path, hint: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::StageOrder(format!("{} not found; {hint}", path.display())));
    }
    Ok(Checkpoint::read(path)?)
}

/// Encoder and world of one seed, checked against the current config.
fn load_world(ctx: &Context, seed: u64) -> CliResult<(FrozenEncoder, SyntheticWorld)> {
    let path = ctx.world_path(seed);
    let ckpt = read_stage(&path, &format!("run `fdg-sim generate --seed {seed}` first"))?;
    let encoder = build_encoder(&ctx.config)?;
    let stored = ckpt.require("encoder.projection")?;
    let world = world_from_message(
        ckpt.messages
            .iter()
            .find(|m| m.array("world.spec").is_some())
            .ok_or_else(|| CliError::StageOrder(format!("{} holds no world", path.display())))?,
    )?;
    if stored.values != encoder.projection().data() || world.spec != ctx.config.world_spec(seed) {
        return Err(CliError::Config(format!(
            "{} was generated from a different config; rerun `fdg-sim generate --seed {seed}`",
            path.display()
        )));
    }
    Ok((encoder, world))
}

pub fn generate(ctx: &Context) -> CliResult<String> {
    ctx.prepare_out()?;
    let seed = ctx.seed();
    let encoder = build_encoder(&ctx.config)?;
    let world = build_world(&ctx.config, &encoder, seed)?;
    let path = ctx.world_path(seed);
    Checkpoint::new(vec![encoder_message(&encoder)?, world_message(&world)?]).write(&path)?;
    Ok(format!(
        "world seed {seed}: {} classes, {} domains, {} samples -> {}\n",
        world.spec.classes,
        world.spec.domains,
        world.samples.len(),
        path.display()
    ))
}

pub fn train_mst(ctx: &Context) -> CliResult<String> {
    let (seed, holdout, variant) = (ctx.seed(), ctx.holdout()?, ctx.variant());
    let toggles = variant.toggles();
    if !toggles.use_mst {
        return Err(CliError::Config(format!("variant {variant} does not use style transfer")));
    }
    let (encoder, world) = load_world(ctx, seed)?;
    let (split, _) = prepare_split(&ctx.config, &world, holdout, seed)?;
    let desc = descriptions_for(&world, &split, variant);
    let outputs = train_style_transfer(&ctx.config, &encoder, &split, &desc, seed)?;

    let networks: Vec<_> = outputs.iter().flat_map(|o| o.transforms.iter().map(|t| t.network.clone())).collect();
    let mut ckpt = Checkpoint::new(vec![transforms_message(&networks)?]);
    let mut report = String::new();
    for (slot, o) in outputs.iter().enumerate() {
        ckpt.push(bank_message(&o.bank, ctx.config.dim)?);
        for t in &o.transforms {
            let last = t.log.last().map_or(f64::NAN, |l| l.combined);
            writeln!(
                report,
                "client {slot} (domain {}) -> domain {}: final loss {last}",
                t.network.source, t.network.target
            )
            .expect("string write");
        }
        writeln!(report, "client {slot}: bank of {} entries", o.bank.len()).expect("string write");
    }
    let path = ctx.mst_path(seed, holdout, toggles.include_target_text);
    ckpt.write(&path)?;
    writeln!(report, "-> {}", path.display()).expect("string write");
    Ok(report)
}

fn load_banks(ctx: &Context, seed: u64, holdout: usize, variant: Variant, sources: &[usize]) -> CliResult<Vec<AugmentationBank>> {
    let path = ctx.mst_path(seed, holdout, variant.toggles().include_target_text);
    let ckpt = read_stage(
        &path,
        &format!("run `fdg-sim train-mst --seed {seed} --holdout {holdout} --variant {variant}` first"),
    )?;
    let banks = ckpt
        .messages
        .iter()
        .filter(|m| m.array("bank.source").is_some())
        .map(bank_from_message)
        .collect::<fdg_core::Result<Vec<_>>>()?;
    if banks.iter().map(|b| b.source).ne(sources.iter().copied()) {
        return Err(CliError::Config(format!(
            "{} does not match the clients of held-out domain {holdout}",
            path.display()
        )));
    }
    Ok(banks)
}

pub fn train_prompts_cmd(ctx: &Context) -> CliResult<String> {
    let (seed, holdout, variant) = (ctx.seed(), ctx.holdout()?, ctx.variant());
    let (encoder, world) = load_world(ctx, seed)?;
    let (split, _) = prepare_split(&ctx.config, &world, holdout, seed)?;
    let banks = if variant.toggles().use_mst {
        Some(load_banks(ctx, seed, holdout, variant, &split.sources)?)
    } else {
        None
    };
    let trained = train_prompts(&ctx.config, &encoder, &world, &split, banks.as_deref(), variant, seed)?;

    let losses: Vec<f64> = trained
        .logs
        .iter()
        .flat_map(|l| [f64::from(l.round), l.losses.global, l.losses.classifier, l.losses.domain])
        .collect();
    let mut ckpt = trained.checkpoint;
    ckpt.push(
        FederatedMessage::new(MessageKind::Checkpoint, 0, 0, 0).with(LOSSES, Dtype::F64, &[trained.logs.len(), 4], &losses)?,
    );
    let path = ctx.prompts_path(seed, holdout, variant);
    ckpt.write(&path)?;
    write_file(&ctx.ledger_path(seed, holdout, variant), trained.ledger.to_csv())?;

    let mut report = String::from("round,loss_global,loss_classifier,loss_domain\n");
    for l in &trained.logs {
        writeln!(report, "{},{},{},{}", l.round, l.losses.global, l.losses.classifier, l.losses.domain).expect("string write");
    }
    writeln!(report, "-> {}", path.display()).expect("string write");
    Ok(report)
}

pub fn evaluate_cmd(ctx: &Context) -> CliResult<String> {
    let (seed, holdout, variant) = (ctx.seed(), ctx.holdout()?, ctx.variant());
    let (encoder, world) = load_world(ctx, seed)?;
    let path = ctx.prompts_path(seed, holdout, variant);
    let ckpt = read_stage(
        &path,
        &format!("run `fdg-sim train-prompts --seed {seed} --holdout {holdout} --variant {variant}` first"),
    )?;
    let model = model_from_message(&ckpt.messages[0])?;
    let (split, _) = prepare_split(&ctx.config, &world, holdout, seed)?;
    let accuracy = evaluate(&ctx.config, &encoder, &world, &model, &split)?;
    let table = ckpt.require(LOSSES)?;
    let last = table
        .values
        .chunks(4)
        .last()
        .ok_or_else(|| CliError::StageOrder(format!("{} records no rounds", path.display())))?;
    let row = MetricsRow {
        seed,
        variant,
        holdout,
        round: last[0] as u32,
        accuracy,
        losses: PhaseLosses {
            global: last[1],
            classifier: last[2],
            domain: last[3],
        },
    };
    let csv = metrics_csv(&[row])?;
    write_file(&ctx.metrics_path(seed, holdout, variant), &csv)?;
    Ok(csv)
}

/// Everything an ablation produced, already merged in (seed, variant,
/// held-out domain) order.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    pub transforms_per_client: Vec<(u64, Variant, usize, usize)>,
}

/// Runs every configured variant for every seed and held-out domain in
/// memory. `--seed`, `--holdout` and `--variant` narrow the matrix.
pub fn run_ablation(ctx: &Context) -> CliResult<AblationResult> {
    let cfg = &ctx.config;
    let seeds = ctx.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    let holdouts = match ctx.holdout {
        Some(_) => vec![ctx.holdout()?],
        None => cfg.holdout_list(),
    };
    let variants = ctx.variant.map_or_else(|| cfg.variants.clone(), |v| vec![v]);
    if variants.is_empty() {
        return Err(CliError::Config("run.variants is empty".into()));
    }
    for v in &variants {
        v.toggles().validate()?;
    }
    let encoder = build_encoder(cfg)?;
    let mut result = AblationResult {
        rows: Vec::new(),
        timings: Vec::new(),
        transforms_per_client: Vec::new(),
    };
    for &seed in &seeds {
        let world = build_world(cfg, &encoder, seed)?;
        for &holdout in &holdouts {
            let mut runner = Runner::new(cfg, &encoder, &world, holdout)?;
            for &variant in &variants {
                let t = Instant::now();
                let out = runner.run(variant)?;
                result.rows.push(MetricsRow {
                    seed,
                    variant,
                    holdout,
                    round: out.last_round.round,
                    accuracy: out.accuracy,
                    losses: out.last_round.losses,
                });
                result.timings.push(TimingRow {
                    seed,
                    variant,
                    holdout,
                    seconds: t.elapsed().as_secs_f64(),
                });
                result.transforms_per_client.push((seed, variant, holdout, out.transforms_per_client));
            }
        }
    }
    result.rows.sort_by_key(MetricsRow::sort_key);
    result.timings.sort_by_key(|t| (t.seed, t.variant, t.holdout));
    result.transforms_per_client.sort();
    Ok(result)
}

pub fn ablate(ctx: &Context) -> CliResult<String> {
    ctx.prepare_out()?;
    let result = run_ablation(ctx)?;
    let summary = summarize(&result.rows);
    write_file(&ctx.out.join("metrics.csv"), metrics_csv(&result.rows)?)?;
    write_file(&ctx.out.join("timings.csv"), timings_csv(&result.timings)?)?;
    let text = summary_csv(&summary)?;
    write_file(&ctx.out.join("summary.csv"), &text)?;
    Ok(text)
}

/// Encoded size of one GLOBAL_UPLOAD carrying a prompt of `length` tokens and
/// a classifier over `sources` domains.
pub fn upload_bytes(length: usize, dim: usize, sources: usize, wire: Dtype) -> CliResult<usize> {
    let mut m = FederatedMessage::new(MessageKind::GlobalUpload, 1, 0, 0);
    if length > 0 {
        m.push("prompt.global", wire, &[length, dim], &vec![0.0; length * dim])?;
    }
    m.push("classifier.weight", wire, &[sources, dim], &vec![0.0; sources * dim])?;
    m.push("classifier.bias", wire, &[sources], &vec![0.0; sources])?;
    Ok(m.encoded_len())
}

fn ledger_totals(path: &Path) -> CliResult<Vec<(String, usize, usize, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let header = r.headers().map_err(|e| CliError::Config(e.to_string()))?.iter().collect::<Vec<_>>().join(",");
    if header != LEDGER_CSV_HEADER {
        return Err(CliError::Config(format!("{} is not a ledger file", path.display())));
    }
    let mut totals: Vec<(String, usize, usize, usize)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let kind = rec.get(2).unwrap_or("").to_string();
        let num = |i: usize| -> CliResult<usize> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::Config(format!("{}: malformed row", path.display())))
        };
        let (params, bytes) = (num(3)?, num(4)?);
        match totals.iter_mut().find(|t| t.0 == kind) {
            Some(t) => {
                t.1 += 1;
                t.2 += params;
                t.3 += bytes;
            }
            None => totals.push((kind, 1, params, bytes)),
        }
    }
    Ok(totals)
}

pub fn comm_report(ctx: &Context) -> CliResult<String> {
    let cfg = &ctx.config;
    let sources = cfg.domains - 1;
    let mut out = String::from("scope,prompt_length,dim,source_domains,params_per_upload,params_millions,bytes_per_upload\n");
    for (scope, l, d) in [("paper", 4, 768), ("config", cfg.prompt_length, cfg.dim)] {
        let k = if scope == "paper" { 3 } else { sources };
        let params = comm_cost(l, d, k);
        let bytes = upload_bytes(l, d, k, cfg.wire)?;
        writeln!(out, "{scope},{l},{d},{k},{params},{:.3},{bytes}", params as f64 / 1e6).expect("string write");
    }
    let mut ledgers: Vec<PathBuf> = match fs::read_dir(&ctx.out) {
        Ok(dir) => dir
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("ledger-") && n.ends_with(".csv"))
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    ledgers.sort();
    if !ledgers.is_empty() {
        out.push_str("\nrun,kind,messages,params,bytes\n");
        for path in &ledgers {
            let name = path.file_stem().and_then(|n| n.to_str()).unwrap_or("").trim_start_matches("ledger-").to_string();
            for (kind, n, params, bytes) in ledger_totals(path)? {
                writeln!(out, "{name},{kind},{n},{params},{bytes}").expect("string write");
            }
        }
    }
    Ok(out)
}

/// Nearest real target-domain sample of every augmented entry: how often it
/// has the entry's class, and the mean similarity.
pub fn nn_audit(ctx: &Context) -> CliResult<String> {
    let (seed, holdout, variant) = (ctx.seed(), ctx.holdout()?, ctx.variant());
    let (_, world) = load_world(ctx, seed)?;
    let (split, _) = prepare_split(&ctx.config, &world, holdout, seed)?;
    let banks = load_banks(ctx, seed, holdout, variant, &split.sources)?;
    let mut out = String::from("source,target,entries,class_match,mean_similarity\n");
    for bank in &banks {
        for (target, list) in &bank.lists {
            let reference: Vec<LabeledEmbedding> = world.domain(*target).cloned().collect();
            let (mut hits, mut sim) = (0usize, 0.0);
            for e in list {
                let (i, s) = nearest_neighbor_audit(&e.embedding, &reference)?;
                hits += usize::from(reference[i].class == e.class);
                sim += s;
            }
            let n = list.len().max(1) as f64;
            writeln!(out, "{},{target},{},{},{}", bank.source, list.len(), hits as f64 / n, sim / n).expect("string write");
        }
    }
    write_file(&ctx.out.join(format!("nn-audit-s{seed}-u{holdout}.csv")), &out)?;
    Ok(out)
}
