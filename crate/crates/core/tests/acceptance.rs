//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::*;
use visrep::backbone::ArchSpec;
use visrep::cli::{cmd_train, starter_config, TrainArgs, CHECKPOINT_DIR, RECALL_REPORTS};
use visrep::data::synthetic::write_corpus;
use visrep::model::{HeadStyle, ModelGraph};
use visrep::nn::Group;
use visrep::probe::{attention_heatmaps, Axis, Block};
use visrep::retrieval::{epoch_callback, recall_reports};
use visrep::train::{dataset_accuracy, evaluate_triplet_loss, lr_at, train, triplet_loss, Mode, Regime, Schedule};

type Outcome = (bool, String);
type Check = fn() -> Outcome;

const RUN_BUDGET_SECS: f64 = 300.0;

fn main() {
    let criteria: [(&str, Check); 11] = [
        ("gradient correctness", gradients),
        ("recall oracle equivalence", recall_oracle_equivalence),
        ("masked-loss decomposition", masked_decomposition),
        ("sampler uniformity", sampler_uniformity),
        ("freeze discipline", freeze_discipline),
        ("desk-scale learning", desk_learning),
        ("directional ordering", directional_ordering),
        ("schedule endpoints", schedule_endpoints),
        ("triplet-loss algebra", triplet_algebra),
        ("heatmap contract", heatmap_contract),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = check();
        failed += usize::from(!ok);
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {:>2} {name}: {detail} [{:.1}s]", i + 1, t.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let (worst_name, worst) = ops::ALL
        .iter()
        .map(|(name, case)| (*name, ops::worst_over_shapes(*case, 20)))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = t.elapsed().as_secs_f64();
    (
        worst < FD_TOL && secs < 60.0,
        format!("{} ops × 20 shapes, worst relative error {worst:.2e} ({worst_name}), {secs:.1}s", ops::ALL.len()),
    )
}

fn recall_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let ks = [1, 5, 10, 50];
    let mut mismatches = 0;
    for seed in 0..100 {
        let ds = random_retrieval(seed);
        for r in recall_reports(&ds, &ks).unwrap() {
            if r.tp != recall_oracle(&ds, r.k) {
                mismatches += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (mismatches == 0 && secs < 10.0, format!("100 instances × K∈{ks:?}, {mismatches} TP mismatches, {secs:.1}s"))
}

fn masked_decomposition() -> Outcome {
    let (lib, oracle) =
        (0..50).map(masked_decomposition_gap).fold((0.0f64, 0.0f64), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    (
        lib < 1e-6 && oracle < 1e-6,
        format!("50 batches, max gap {lib:.1e} vs separated sub-batches, {oracle:.1e} vs direct oracle"),
    )
}

fn sampler_uniformity() -> Outcome {
    let (batches, violations) = sampler_violations(&desk_corpus(0), 0);
    (batches > 0 && violations == 0, format!("{batches} batches of 64 over 4 datasets, {violations} violations"))
}

fn freeze_discipline() -> Outcome {
    let corpus = desk_corpus(1);
    let mut model = desk_model(&desk_spec(32), Regime::Multitask, &corpus.datasets, 1);
    let mut plan = desk_plan(Regime::Multitask);
    plan.epochs = 1;
    plan.warm_epochs_frozen = 1;
    let backbone = |m: &ModelGraph| m.store.checksum(|p| p.group == Group::Backbone);
    let heads = |m: &ModelGraph| m.store.checksum(|p| p.group.is_head());
    let (b0, h0) = (backbone(&model), heads(&model));
    let log = train(&mut model, &corpus.datasets, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
    let (same, moved) = (backbone(&model) == b0, heads(&model) != h0);
    (
        same && moved && log.steps.iter().all(|s| s.phase == 1),
        format!("{} phase-1 steps, backbone identical: {same}, heads changed: {moved}", log.steps.len()),
    )
}

fn desk_learning() -> Outcome {
    let corpus = desk_corpus(2);
    let spec = desk_spec(32);
    let mut notes = Vec::new();
    let mut ok = true;

    let t = Instant::now();
    let mut mt = desk_model(&spec, Regime::Multitask, &corpus.datasets, 2);
    let mut plan = desk_plan(Regime::Multitask);
    plan.max_steps = Some(200);
    train(&mut mt, &corpus.datasets, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
    let acc: Vec<f64> =
        corpus.datasets.iter().enumerate().map(|(h, d)| dataset_accuracy(&mt, d, h, 1).unwrap().unwrap()).collect();
    let easiest = (0..acc.len()).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
    let secs = t.elapsed().as_secs_f64();
    ok &= acc[easiest] >= 0.95 && secs < RUN_BUDGET_SECS;
    notes.push(format!(
        "(a) MT {} top-1 {:.3} in 200 steps ({secs:.0}s)",
        corpus.datasets[easiest].task_name, acc[easiest]
    ));

    let t = Instant::now();
    let single = [corpus.datasets[easiest].clone()];
    let mut st = desk_model(&spec, Regime::SingleTask, &single, 2);
    let mut plan = desk_plan(Regime::SingleTask);
    plan.max_steps = Some(200);
    train(&mut st, &single, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
    let st_acc = dataset_accuracy(&st, &single[0], 0, 1).unwrap().unwrap();
    let secs = t.elapsed().as_secs_f64();
    ok &= st_acc >= 0.95 && secs < RUN_BUDGET_SECS;
    notes.push(format!("ST {st_acc:.3} ({secs:.0}s)"));

    let t = Instant::now();
    let mut tr = desk_model(&spec, Regime::Triplet, &corpus.datasets, 2);
    let intra = &corpus.retrieval[..1];
    let before = epoch_callback(&tr, intra, &[5]).unwrap()[0].recall;
    let mut plan = desk_plan(Regime::Triplet);
    plan.max_steps = Some(300);
    train(&mut tr, &corpus.datasets, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
    let loss = evaluate_triplet_loss(&tr, &corpus.datasets, &plan, 2).unwrap();
    let after = epoch_callback(&tr, intra, &[5]).unwrap()[0].recall;
    let secs = t.elapsed().as_secs_f64();
    ok &= loss < 0.05 && after - before >= 0.2 && secs < RUN_BUDGET_SECS;
    notes.push(format!("(b) triplet loss {loss:.4} in 300 steps ({secs:.0}s)"));
    notes.push(format!("(c) {} R@5 {before:.3} → {after:.3}", intra[0].name));
    (ok, notes.join(", "))
}

fn directional_ordering() -> Outcome {
    let mut satisfied = 0;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let corpus = desk_corpus(10 + seed);
        let r: Vec<f64> = [Mode::Full, Mode::LinearProbe, Mode::PseudoZeroShot]
            .into_iter()
            .map(|mode| {
                let mut model = desk_model(&desk_spec(32), Regime::Multitask, &corpus.datasets, seed);
                let mut plan = desk_plan(Regime::Multitask);
                plan.mode = mode;
                plan.seed = seed;
                plan.max_steps = Some(200);
                train(&mut model, &corpus.datasets, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
                epoch_callback(&model, &corpus.retrieval[..1], &[5]).unwrap()[0].recall
            })
            .collect();
        let (g1, g2) = (r[0] - r[1], r[1] - r[2]);
        let holds = g1 >= 0.0 && g2 >= 0.0 && g1.max(g2) >= 0.05;
        satisfied += usize::from(holds);
        rows.push(format!("seed {seed}: {:.3} ≥ {:.3} ≥ {:.3} {}", r[0], r[1], r[2], if holds { "ok" } else { "no" }));
    }
    (satisfied >= 2, format!("R@5 full ≥ linear probe ≥ one step; {}; {satisfied}/3 seeds", rows.join("; ")))
}

fn schedule_endpoints() -> Outcome {
    let total = 1234;
    let base = 3e-4;
    let mut ok = true;
    for s in [Schedule::Cosine, Schedule::Polynomial { power: 1.0 }, Schedule::Polynomial { power: 2.0 }] {
        ok &= lr_at(s, 0, total, base).unwrap() == base;
        ok &= lr_at(s, total, total, base).unwrap() == 0.0;
    }
    (ok, format!("cosine and polynomial: lr(0) == {base} and lr({total}) == 0 exactly"))
}

fn triplet_algebra() -> Outcome {
    let margin = visrep::train::TrainPlan::preset(visrep::train::Preset::TripletEfficientnetB0).margin;
    let x = [0.3f32, -0.2, 0.9];
    let margin_only = triplet_loss(&x, &x, &x, margin).unwrap();
    let inactive = triplet_loss(&x, &x, &[5.0, 5.0, 5.0], margin).unwrap();
    (
        margin == 0.2 && margin_only == margin && inactive == 0.0,
        format!("default margin {margin}, coincident triplet {margin_only}, far negative {inactive}"),
    )
}

fn heatmap_contract() -> Outcome {
    let mut spec = ArchSpec::vit(16, 4, 2, 32, 8);
    spec.class_token = false;
    let mut model: ModelGraph = ModelGraph::build(&spec, 0).unwrap();
    model.attach_embedding_head(16, HeadStyle::PoolerDense).unwrap();
    let image = randn(&[3, 16, 16], &mut rng(4)).map(|v| 0.5 + 0.4 * v).cast();
    let b = attention_heatmaps(&model, &image, Block::Last, Axis::Query).unwrap();
    let worst = (0..b.heads())
        .map(|h| (b.pooled.row(h).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (
        b.per_head.shape() == [8, 4, 4] && worst <= 1e-5,
        format!("maps {:?}, worst |mass − 1| {worst:.1e}", b.per_head.shape()),
    )
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let files = write_corpus(&tiny_corpus(5), tmp.path().join("data")).unwrap();
    let mut cfg = starter_config(files.manifests, files.retrieval, 16);
    cfg.model.arch = ArchSpec::convnet(16, vec![1, 1, 1], vec![8, 16, 16]);
    cfg.model.embedding_dim = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    let config = tmp.path().join("run.toml");
    let run = |out: &str| {
        let mut c = cfg.clone();
        c.output_dir = tmp.path().join(out);
        fs::write(&config, c.to_toml()).unwrap();
        cmd_train(&TrainArgs { config: config.clone() }).unwrap();
        let dir = tmp.path().join(out);
        (dir_bytes(&dir.join(CHECKPOINT_DIR)), fs::read(dir.join(RECALL_REPORTS)).unwrap())
    };
    let (c1, r1) = run("a");
    let (c2, r2) = run("b");
    let bytes: usize = c1.iter().map(|(_, b)| b.len()).sum();
    (
        c1 == c2 && r1 == r2,
        format!(
            "{} checkpoint files ({bytes} bytes) and {} report bytes identical: {}",
            c1.len(),
            r1.len(),
            c1 == c2 && r1 == r2
        ),
    )
}
