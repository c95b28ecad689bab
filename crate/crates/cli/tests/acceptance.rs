//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use fdg_core::datagen::{generate_world, LabeledEmbedding, SyntheticWorld, WorldSpec};
use fdg_core::encoder::{EncoderConfig, FrozenEncoder};
use fdg_core::fedruntime::{aggregate, comm_cost, Aggregation, ClientInput, Dtype, FederatedMessage, Federation, MessageKind, Setup};
use fdg_core::mst::{alignment_loss, consistency_loss, mst_gradient, mst_loss, MstTargets, TransformNetwork};
use fdg_core::numerics::{grad_check, GradTape, Matrix};
use fdg_core::prompts::{
    classifier_loss, composite_loss, contrastive_loss, description_embedding, dpg_generate, global_loss, DomainClassifier,
    DomainPromptList, PromptBlock, TextContext,
};
use fdg_core::seed::rng_for;
use fdg_sim::commands::{run_ablation, Context};
use fdg_sim::config::ExperimentConfig;
use fdg_sim::pipeline::{build_encoder, build_world, descriptions_for, train_style_transfer, Runner};
use fdg_sim::variant::Variant;
use rand::Rng;
use rand_distr::StandardNormal;

const COMM_BUDGET: Duration = Duration::from_secs(1);
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PROTOCOL_BUDGET: Duration = Duration::from_secs(60);
const MST_BUDGET: Duration = Duration::from_secs(180);
const ABLATION_BUDGET: Duration = Duration::from_secs(900);
const FEW_SHOT_BUDGET: Duration = Duration::from_secs(600);

const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-4;
const FD_POINTS: u64 = 10;
const FD_DIM: usize = 16;
const DPG_TOLERANCE: f64 = 1e-15;
const DPG_VECTORS: u64 = 100;
const MST_CELL_FRACTION: f64 = 0.9;
const ABLATION_SLACK: f64 = 0.005;
const FEW_SHOT_SLACK: f64 = 0.01;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, budget: Duration) -> (bool, String) {
    let ok = elapsed < budget;
    (ok, format!("{:.2}s of {}s", elapsed.as_secs_f64(), budget.as_secs()))
}

fn comm_cost_criterion() -> Verdict {
    let t = Instant::now();
    let params = comm_cost(4, 768, 3);
    let millions = format!("{:.3}", params as f64 / 1e6);
    let (fast, time) = within(t.elapsed(), COMM_BUDGET);
    verdict(params == 5379 && millions == "0.005" && fast, format!("{params} params = {millions}M, {time}"))
}

fn random_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_block(rng: &mut impl Rng, length: usize, dim: usize) -> PromptBlock {
    PromptBlock::from_matrix(Matrix::from_vec(length, dim, random_vec(rng, length * dim, 0.5)).unwrap())
}

struct GradWorld {
    encoder: FrozenEncoder,
    world: SyntheticWorld,
    tokens: Vec<Vec<f64>>,
}

impl GradWorld {
    fn new() -> Self {
        let encoder = FrozenEncoder::new(EncoderConfig::new(FD_DIM, 12, 7)).unwrap();
        let spec = WorldSpec {
            classes: 3,
            dim: FD_DIM,
            samples_per_cell: 3,
            ..WorldSpec::desk(7)
        };
        let world = generate_world(&spec, &encoder).unwrap();
        let tokens = world.class_tokens();
        Self { encoder, world, tokens }
    }

    fn batch(&self, rng: &mut impl Rng, n: usize) -> Vec<&LabeledEmbedding> {
        (0..n).map(|_| &self.world.samples[rng.random_range(0..self.world.samples.len())]).collect()
    }

    /// Text directions and class anchors drawn at random, so the check does
    /// not depend on any particular description.
    fn targets(&self, rng: &mut impl Rng) -> MstTargets {
        let dirs = (0..3).map(|_| random_vec(rng, FD_DIM, 1.0)).collect();
        let anchors = (0..3).map(|_| random_vec(rng, FD_DIM, 1.0)).collect();
        MstTargets::from_parts(dirs, anchors).unwrap()
    }
}

type Point<'a> = (Vec<f64>, Vec<f64>, Box<dyn Fn(&[f64]) -> f64 + 'a>);

/// Worst relative error of one loss over its random points.
fn check_loss<'a>(points: impl Fn(u64) -> Point<'a>) -> f64 {
    (0..FD_POINTS)
        .map(|i| {
            let (params, analytic, f) = points(i);
            grad_check(f, &params, &analytic, FD_STEP, FD_TOLERANCE).max_rel_error
        })
        .fold(0.0, f64::max)
}

fn gradient_criterion() -> Verdict {
    let t = Instant::now();
    let g = GradWorld::new();
    let ctx = TextContext::new(&g.encoder, &g.tokens, 0.5);
    let hidden = 8;
    let temperature = 0.5;
    let lambda = 0.3;

    let mst = |weights: (f64, f64), tag: &'static str| {
        let g = &g;
        check_loss(move |i| {
            let mut rng = rng_for(i, tag, 0, 0);
            let params = random_vec(&mut rng, TransformNetwork::param_count(FD_DIM, hidden), 0.3);
            let q = TransformNetwork::from_params(FD_DIM, hidden, 0, 1, params.clone()).unwrap();
            let batch = g.batch(&mut rng, 4);
            let targets = g.targets(&mut rng);
            let mut tape = GradTape::new();
            let leaf = tape.leaf("q", &[params.len()]);
            mst_gradient(&q, &batch, &targets, weights, temperature, &mut tape, leaf).unwrap();
            let analytic = tape.take(leaf);
            let f = move |p: &[f64]| {
                let q = TransformNetwork::from_params(FD_DIM, hidden, 0, 1, p.to_vec()).unwrap();
                match weights {
                    (1.0, 0.0) => alignment_loss(&q, &batch, &targets).unwrap() / batch.len() as f64,
                    (0.0, 1.0) => consistency_loss(&q, &batch, &targets, temperature).unwrap(),
                    _ => mst_loss(&q, &batch, &targets, lambda, temperature).unwrap(),
                }
            };
            (params, analytic, Box::new(f) as Box<dyn Fn(&[f64]) -> f64>)
        })
    };

    let mut errors = vec![
        ("L_A", mst((1.0, 0.0), "fd.align")),
        ("L_C", mst((0.0, 1.0), "fd.consistency")),
        ("L_MST", mst((lambda, 1.0 - lambda), "fd.mst")),
    ];

    errors.push((
        "L_G",
        check_loss(|i| {
            let mut rng = rng_for(i, "fd.global", 0, 0);
            let block = random_block(&mut rng, 4, FD_DIM);
            let batch = g.batch(&mut rng, 4);
            let mut tape = GradTape::new();
            let leaf = tape.leaf("pg", &[4, FD_DIM]);
            global_loss(&ctx, &batch, &block, Some((&mut tape, leaf))).unwrap();
            let analytic = tape.take(leaf);
            let ctx = &ctx;
            let f = move |p: &[f64]| {
                let b = PromptBlock::from_matrix(Matrix::from_vec(4, FD_DIM, p.to_vec()).unwrap());
                global_loss(ctx, &batch, &b, None).unwrap()
            };
            (block.data().to_vec(), analytic, Box::new(f) as Box<dyn Fn(&[f64]) -> f64>)
        }),
    ));

    errors.push((
        "L_Cla",
        check_loss(|i| {
            let mut rng = rng_for(i, "fd.composite", 0, 0);
            let global = random_block(&mut rng, 4, FD_DIM);
            let domain = random_block(&mut rng, 4, FD_DIM);
            let batch = g.batch(&mut rng, 4);
            let mut tape = GradTape::new();
            let leaf = tape.leaf("pd", &[4, FD_DIM]);
            composite_loss(&ctx, &batch, Some(&global), &domain, Some((&mut tape, leaf))).unwrap();
            let analytic = tape.take(leaf);
            let ctx = &ctx;
            let f = move |p: &[f64]| {
                let d = PromptBlock::from_matrix(Matrix::from_vec(4, FD_DIM, p.to_vec()).unwrap());
                composite_loss(ctx, &batch, Some(&global), &d, None).unwrap()
            };
            (domain.data().to_vec(), analytic, Box::new(f) as Box<dyn Fn(&[f64]) -> f64>)
        }),
    ));

    errors.push((
        "L_Con",
        check_loss(|i| {
            let mut rng = rng_for(i, "fd.contrastive", 0, 0);
            let global = random_block(&mut rng, 4, FD_DIM);
            let domain = random_block(&mut rng, 4, FD_DIM);
            let k = rng.random_range(0..g.world.spec.domains);
            let text = description_embedding(&g.encoder, &g.world.domain_token(k)).unwrap();
            let mut tape = GradTape::new();
            let leaf = tape.leaf("pd", &[4, FD_DIM]);
            contrastive_loss(&domain, &global, &text, Some((&mut tape, leaf))).unwrap();
            let analytic = tape.take(leaf);
            let f = move |p: &[f64]| {
                let d = PromptBlock::from_matrix(Matrix::from_vec(4, FD_DIM, p.to_vec()).unwrap());
                contrastive_loss(&d, &global, &text, None).unwrap()
            };
            (domain.data().to_vec(), analytic, Box::new(f) as Box<dyn Fn(&[f64]) -> f64>)
        }),
    ));

    errors.push((
        "L_F",
        check_loss(|i| {
            let mut rng = rng_for(i, "fd.classifier", 0, 0);
            let domains = 3;
            let weight = Matrix::from_vec(domains, FD_DIM, random_vec(&mut rng, domains * FD_DIM, 0.5)).unwrap();
            let clf = DomainClassifier::from_parts(&weight, &random_vec(&mut rng, domains, 0.5)).unwrap();
            let batch = g.batch(&mut rng, 6);
            let inputs: Vec<Vec<f64>> = batch.iter().map(|s| s.embedding.clone()).collect();
            let labels: Vec<usize> = (0..batch.len()).map(|_| rng.random_range(0..domains)).collect();
            let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
            let mut tape = GradTape::new();
            let leaf = tape.leaf("phi", &[clf.params().len()]);
            classifier_loss(&refs, &labels, &clf, Some((&mut tape, leaf))).unwrap();
            let analytic = tape.take(leaf);
            let f = move |p: &[f64]| {
                let w = Matrix::from_vec(domains, FD_DIM, p[..domains * FD_DIM].to_vec()).unwrap();
                let c = DomainClassifier::from_parts(&w, &p[domains * FD_DIM..]).unwrap();
                let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
                classifier_loss(&refs, &labels, &c, None).unwrap()
            };
            (clf.params().to_vec(), analytic, Box::new(f) as Box<dyn Fn(&[f64]) -> f64>)
        }),
    ));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let (fast, time) = within(t.elapsed(), GRAD_BUDGET);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        worst < FD_TOLERANCE && fast,
        format!("max rel error {worst:.2e} < {FD_TOLERANCE:e} [{}], {time}", listed.join(", ")),
    )
}

fn protocol_criterion() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let encoder = build_encoder(&cfg).unwrap();
    let world = build_world(&cfg, &encoder, 0).unwrap();
    let runner = Runner::new(&cfg, &encoder, &world, 0).unwrap();
    let split = runner.split();
    let desc = descriptions_for(&world, split, Variant::Full);
    let stage1 = train_style_transfer(&cfg, &encoder, split, &desc, 0).unwrap();
    let class_tokens = world.class_tokens();
    let k = split.client_count();
    let setup = Setup {
        encoder: &encoder,
        class_tokens: &class_tokens,
        prompt: cfg.prompt_config(),
        plan: Variant::Full.toggles().plan(),
        round: cfg.round_config(k, 17),
    };
    let inputs = split
        .sources
        .iter()
        .enumerate()
        .map(|(slot, &domain)| ClientInput {
            domain,
            data: split.clients[slot].clone(),
            bank: stage1[slot].bank.clone(),
            domain_token: world.domain_token(domain),
        })
        .collect();
    let mut fed = Federation::new(setup, inputs).unwrap();
    let rounds = cfg.rounds;

    let mut synced = true;
    for _ in 0..rounds {
        fed.run_round().unwrap();
        let g = fed.server.global.as_ref().unwrap().data();
        let phi = fed.server.classifier.as_ref().unwrap().params();
        synced &= fed
            .clients
            .iter()
            .all(|c| c.global.as_ref().unwrap().data() == g && c.classifier.as_ref().unwrap().params() == phi);
    }
    fed.finalize().unwrap();

    let ledger = fed.ledger();
    let uploads = ledger.count(MessageKind::GlobalUpload);
    let domain_uploads = ledger.count(MessageKind::DomainUpload);
    let counts = uploads == k * rounds && domain_uploads == k;
    let allowed = [
        MessageKind::GlobalUpload,
        MessageKind::GlobalBroadcast,
        MessageKind::DomainUpload,
        MessageKind::DomainBroadcast,
    ];
    let whitelist = ledger.entries().iter().all(|e| allowed.contains(&e.kind));

    let sent = fed.clients[0].global_upload(rounds as u32, Dtype::F32).unwrap();
    let copies: Vec<FederatedMessage> = (0..k as u32)
        .map(|c| {
            let mut m = sent.clone();
            m.client = c;
            m.samples = 10 + 7 * u64::from(c);
            m
        })
        .collect();
    let fixed = [Aggregation::Uniform, Aggregation::SampleCount]
        .iter()
        .all(|&mode| {
            let merged = aggregate(&copies, mode).unwrap();
            merged.len() == sent.arrays.len()
                && merged.iter().zip(&sent.arrays).all(|(m, s)| m.name == s.name && m.values == s.values)
        });

    let (fast, time) = within(t.elapsed(), PROTOCOL_BUDGET);
    verdict(
        synced && counts && whitelist && fixed && k == 3 && fast,
        format!(
            "K={k} R={rounds}: synced {synced}, GLOBAL_UPLOAD {uploads}, DOMAIN_UPLOAD {domain_uploads}, \
             whitelist {whitelist}, fixed point {fixed}, {time}"
        ),
    )
}

fn dpg_criterion() -> Verdict {
    let (k, length, dim) = (3, 4, 64);
    let mut rng = rng_for(3, "dpg.blocks", 0, 0);
    let list = DomainPromptList::new((0..k).map(|_| random_block(&mut rng, length, dim)).collect()).unwrap();

    let one_hot = (0..k).all(|j| {
        let mut w = vec![0.0; k];
        w[j] = 1.0;
        dpg_generate(&w, &list).unwrap().data() == list.blocks()[j].data()
    });

    let mut worst: f64 = 0.0;
    for i in 0..DPG_VECTORS {
        let w = random_vec(&mut rng_for(i, "dpg.weights", 0, 0), k, 1.0);
        let out = dpg_generate(&w, &list).unwrap();
        for (e, &v) in out.data().iter().enumerate() {
            let mut oracle = 0.0;
            for (wk, block) in w.iter().zip(list.blocks()) {
                oracle += wk * block.data()[e];
            }
            worst = worst.max((v - oracle).abs());
        }
    }
    verdict(
        one_hot && worst <= DPG_TOLERANCE,
        format!("one-hot exact {one_hot}, max abs error {worst:e} over {DPG_VECTORS} weight vectors"),
    )
}

fn mst_criterion() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig::default();
    let encoder = build_encoder(&cfg).unwrap();
    let (mut improved, mut total) = (0, 0);
    for seed in 0..3 {
        let world = build_world(&cfg, &encoder, seed).unwrap();
        for holdout in 0..cfg.domains {
            let runner = Runner::new(&cfg, &encoder, &world, holdout).unwrap();
            let split = runner.split();
            let desc = descriptions_for(&world, split, Variant::Full);
            let stage1 = train_style_transfer(&cfg, &encoder, split, &desc, seed).unwrap();
            for (slot, out) in stage1.iter().enumerate() {
                let cells = fdg_core::mst::transfer_cells(&out.bank, &split.clients[slot], &world.samples, cfg.classes).unwrap();
                total += cells.len();
                improved += cells.iter().filter(|c| c.improved()).count();
            }
        }
    }
    let fraction = improved as f64 / total as f64;
    let (fast, time) = within(t.elapsed(), MST_BUDGET);
    verdict(
        fraction >= MST_CELL_FRACTION && fast,
        format!("{improved}/{total} cells improved ({:.1}% >= {:.0}%), {time}", 100.0 * fraction, 100.0 * MST_CELL_FRACTION),
    )
}

fn mean_accuracy(rows: &[fdg_sim::metrics::MetricsRow], variant: Variant) -> f64 {
    let acc: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.accuracy).collect();
    acc.iter().sum::<f64>() / acc.len() as f64
}

fn ablation_criterion() -> Verdict {
    let t = Instant::now();
    let cfg = ExperimentConfig {
        seeds: (0..5).collect(),
        holdouts: Vec::new(),
        variants: vec![Variant::V1, Variant::V3, Variant::V4, Variant::Full],
        ..ExperimentConfig::default()
    };
    let result = run_ablation(&Context::new(cfg, "unused".into())).unwrap();
    let [v1, v3, v4, full] = [Variant::V1, Variant::V3, Variant::V4, Variant::Full].map(|v| mean_accuracy(&result.rows, v));
    let ok = v1 < v3 && v4 <= full + ABLATION_SLACK && full > v1;
    let (fast, time) = within(t.elapsed(), ABLATION_BUDGET);
    verdict(
        ok && fast && result.rows.len() == 5 * 4 * 4,
        format!("v1 {v1:.4} < v3 {v3:.4}; v4 {v4:.4} <= full {full:.4} + 0.5pp; full > v1; {time}"),
    )
}

fn determinism_criterion() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("det.cfg"), "run.seeds = 0, 1\nrun.holdouts = 0, 3\n").unwrap();
    let run = |out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_fdg-sim"))
            .args(["--config", "det.cfg", "--out", out, "ablate"])
            .current_dir(dir.path())
            .env_remove("FDG_SIM_OUT")
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        fs::read(dir.path().join(out).join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let rows = a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    verdict(a == b && rows == 2 * 2 * Variant::ALL.len(), format!("{rows} rows, {} bytes, identical {}", a.len(), a == b))
}

fn few_shot_criterion() -> Verdict {
    let t = Instant::now();
    let base = ExperimentConfig::default();
    let encoder = build_encoder(&base).unwrap();
    let shots = [Some(1), Some(4), Some(16), None];
    let mut means = Vec::new();
    for &s in &shots {
        let mut cfg = base.clone();
        cfg.shots = s;
        let mut acc = Vec::new();
        for seed in 0..3 {
            let world = build_world(&cfg, &encoder, seed).unwrap();
            for holdout in 0..cfg.domains {
                acc.push(Runner::new(&cfg, &encoder, &world, holdout).unwrap().run(Variant::Full).unwrap().accuracy);
            }
        }
        means.push(acc.iter().sum::<f64>() / acc.len() as f64);
    }
    let drops: Vec<f64> = means.windows(2).map(|w| w[0] - w[1]).filter(|&d| d > 0.0).collect();
    let ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= FEW_SHOT_SLACK);
    let (fast, time) = within(t.elapsed(), FEW_SHOT_BUDGET);
    let listed: Vec<String> = shots
        .iter()
        .zip(&means)
        .map(|(s, m)| format!("{}:{m:.4}", s.map_or("full".to_string(), |v| v.to_string())))
        .collect();
    verdict(ok && fast, format!("{} with {} inversion(s), {time}", listed.join(" "), drops.len()))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("communication cost", comm_cost_criterion),
        ("gradient suite", gradient_criterion),
        ("protocol suite", protocol_criterion),
        ("DPG laws", dpg_criterion),
        ("MST efficacy", mst_criterion),
        ("ablation ordering", ablation_criterion),
        ("determinism", determinism_criterion),
        ("few-shot monotonicity", few_shot_criterion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let v = check();
        println!("criterion {id} {name}: {} ({})", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
