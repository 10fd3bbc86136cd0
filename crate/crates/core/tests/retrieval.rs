mod common;

use common::*;
use proptest::prelude::*;
use visrep::data::ImageSource;
use visrep::model::{HeadStyle, ModelGraph};
use visrep::retrieval::*;
use visrep::tensor::Tensor;
use visrep::Error;

#[test]
fn recall_matches_full_scan_oracle_on_100_instances() {
    for seed in 0..100 {
        let ds = random_retrieval(seed);
        let ks = [1, 5, 10, 50];
        let reports = recall_reports(&ds, &ks).unwrap();
        for (r, &k) in reports.iter().zip(&ks) {
            assert_eq!(r.tp, recall_oracle(&ds, k), "seed {seed} K {k}");
            assert_eq!(r.recall, r.tp as f64 / r.n as f64);
            assert!(r.tp <= r.n);
        }
    }
}

#[test]
fn three_of_four_queries_hit() {
    // queries on a line; candidate groups chosen so query 3 has no match in its top 5
    let queries = Tensor::<f32>::from_rows(&[vec![0.0], vec![10.0], vec![20.0], vec![30.0]]).unwrap();
    let cands: Vec<Vec<f32>> = (0..24).map(|i| vec![i as f32 * 1.5]).collect();
    let mut cgroups: Vec<String> = (0..24).map(|i| format!("x{i}")).collect();
    cgroups[0] = "a".into();
    cgroups[7] = "b".into();
    cgroups[13] = "c".into();
    cgroups[2] = "d".into(); // far from the fourth query
    let ds = EmbeddedDataset {
        name: "hand".into(),
        queries,
        query_groups: ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
        candidates: Tensor::from_rows(&cands).unwrap(),
        candidate_groups: cgroups,
    };
    let r = recall_at_k(&ds, 5).unwrap();
    assert_eq!(r.recall, 0.75);
    assert_eq!(r.tp, recall_oracle(&ds, 5));
}

#[test]
fn shared_group_everywhere_is_one_and_empty_queries_are_rejected() {
    let ds = EmbeddedDataset {
        name: "same".into(),
        queries: Tensor::from_fn(vec![3, 2], |i| i as f32),
        query_groups: vec!["g".into(); 3],
        candidates: Tensor::from_fn(vec![4, 2], |i| -(i as f32)),
        candidate_groups: vec!["g".into(); 4],
    };
    for k in [1, 5, 10] {
        assert_eq!(recall_at_k(&ds, k).unwrap().recall, 1.0);
    }
    let empty = EmbeddedDataset { queries: Tensor::zeros(vec![0, 2]), query_groups: vec![], ..ds.clone() };
    assert!(matches!(recall_at_k(&empty, 5), Err(Error::Config(_))));
}

#[test]
fn single_candidate_index_answers_everything() {
    let idx = build_index(&Tensor::<f32>::from_rows(&[vec![0.3, 0.4]]).unwrap()).unwrap();
    for q in [[0.0, 0.0], [5.0, -1.0], [0.3, 0.4]] {
        let hits = query_knn(&idx, &q, 5).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].0, 0);
    }
    assert_eq!(query_knn(&idx, &[0.3, 0.4], 1).unwrap()[0].1, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let ds = random_retrieval(seed);
        let ks: Vec<usize> = (1..=30).collect();
        let reports = recall_reports(&ds, &ks).unwrap();
        for w in reports.windows(2) {
            prop_assert!(w[1].tp >= w[0].tp);
        }
        prop_assert_eq!(recall_reports(&ds, &ks).unwrap(), reports);
    }

    #[test]
    fn recall_invariant_under_rotation_and_scaling(seed in any::<u64>(), scale in 0.1f64..10.0) {
        // distinct continuous points so no ties change order
        let mut r = rng(seed);
        let (nq, nc, d) = (20, 40, 6);
        let q = randn(&[nq, d], &mut r);
        let c = randn(&[nc, d], &mut r);
        let groups = |n: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
            use rand::Rng;
            (0..n).map(|_| format!("g{}", r.random_range(0..8))).collect()
        };
        let (qg, cg) = (groups(nq, &mut r), groups(nc, &mut r));
        let rot = random_orthogonal(d, seed ^ 5);
        let apply = |t: &Tensor<f64>, s: f64| Tensor::<f32>::from_fn(t.shape().to_vec(), |i| {
            let (row, col) = (i / d, i % d);
            (s * (0..d).map(|k| t.row(row)[k] * rot[col][k]).sum::<f64>()) as f32
        });
        let base = EmbeddedDataset { name: "p".into(), queries: q.cast(), query_groups: qg.clone(), candidates: c.cast(), candidate_groups: cg.clone() };
        let moved = EmbeddedDataset { name: "p".into(), queries: apply(&q, scale), query_groups: qg, candidates: apply(&c, scale), candidate_groups: cg };
        let ks = [1, 3, 5, 10];
        let a: Vec<usize> = recall_reports(&base, &ks).unwrap().iter().map(|r| r.tp).collect();
        let b: Vec<usize> = recall_reports(&moved, &ks).unwrap().iter().map(|r| r.tp).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn dataset_construction_enforces_disjointness() {
    let item = |id: &str, g: &str| RetrievalItem {
        record_id: id.into(),
        image: Tensor::zeros(vec![3, 4, 4]),
        group: g.into(),
    };
    assert!(matches!(
        RetrievalDataset::new("x", RetrievalKind::Custom, vec![item("r1", "g")], vec![item("r1", "g")]),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        RetrievalDataset::new("x", RetrievalKind::Custom, vec![item("r1", "")], vec![item("r2", "g")]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn retrieval_manifest_roundtrip() {
    let corpus = tiny_corpus(1);
    let dir = tempfile::tempdir().unwrap();
    let path = write_retrieval_dataset(&corpus.retrieval[1], dir.path()).unwrap();
    let back = load_retrieval_dataset(&path).unwrap();
    assert_eq!(back.kind, RetrievalKind::IntraListingReviews);
    assert_eq!(back.queries.len(), corpus.retrieval[1].queries.len());
    assert_eq!(back.candidates.len(), corpus.retrieval[1].candidates.len());
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "#retrieval\tname=n\ttype=intra_listing\nX\ta.ppm\tg\n").unwrap();
    assert!(matches!(load_retrieval_dataset(&bad), Err(Error::Parse { line: 2, .. })));
}

fn small_model(seed: u64) -> ModelGraph {
    let mut m = ModelGraph::build(&desk_spec(16), seed).unwrap();
    m.attach_embedding_head(16, HeadStyle::ConvPool).unwrap();
    m
}

#[test]
fn epoch_callback_reports_every_dataset_and_k_without_mutating() {
    let corpus = tiny_corpus(2);
    let model = small_model(0);
    let log: Vec<QueryLogRow> = corpus.query_log.clone();
    let t2i = build_text2image_eval(&log, &StubTextToImage { size: 16 }, 0).unwrap();
    let mut sets = corpus.retrieval.clone();
    sets.push(t2i.dataset);
    let before = model.store.checksum_all();
    let reports = epoch_callback(&model, &sets, &DEFAULT_KS).unwrap();
    assert_eq!(reports.len(), 6);
    assert_eq!(model.store.checksum_all(), before);
    assert_eq!(epoch_callback(&model, &sets, &DEFAULT_KS).unwrap(), reports);
    let table = summary_table(&reports);
    assert_eq!(table.lines().count(), 7);
    let dir = tempfile::tempdir().unwrap();
    write_reports(&reports, dir.path().join("r.jsonl")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
    let parsed: Vec<RecallReport> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, reports);
}

fn log_rows(n: usize) -> Vec<QueryLogRow> {
    (0..n)
        .map(|i| QueryLogRow {
            text: format!("a small red square number {}", i % 7),
            clicked_listing_id: format!("L{}", i % 7),
            hero_image: ImageSource::Memory(Tensor::from_fn(vec![3, 16, 16], |j| {
                ((i % 7) * 31 + j) as f32 % 17.0 / 17.0
            })),
        })
        .collect()
}

#[test]
fn text2image_construction_and_determinism() {
    let log = log_rows(10);
    let stub = StubTextToImage { size: 16 };
    let a = build_text2image_eval(&log, &stub, 3).unwrap();
    assert_eq!(a.dataset.queries.len(), 10);
    assert_eq!(a.dataset.candidates.len(), 7);
    assert_eq!(a.skipped, 0);
    let b = build_text2image_eval(&log, &stub, 3).unwrap();
    for (x, y) in a.dataset.queries.iter().zip(&b.dataset.queries) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.group, y.group);
    }
    assert!(build_text2image_eval(&[], &stub, 0).is_err());
}

struct HeroCopy(Vec<QueryLogRow>);

impl TextToImage for HeroCopy {
    fn generate(&self, text: &str, _seed: u64) -> visrep::Result<Tensor> {
        self.0.iter().find(|r| r.text == text).unwrap().hero_image.load()
    }
}

struct Flaky;

impl TextToImage for Flaky {
    fn generate(&self, text: &str, _seed: u64) -> visrep::Result<Tensor> {
        if text.ends_with('3') {
            Err(Error::Validation("generator refused".into()))
        } else {
            Ok(Tensor::zeros(vec![3, 16, 16]))
        }
    }
}

#[test]
fn hero_copy_generator_gives_perfect_recall_at_one() {
    let log = log_rows(10);
    let built = build_text2image_eval(&log, &HeroCopy(log.clone()), 0).unwrap();
    let model = small_model(1);
    let reports = epoch_callback(&model, &[built.dataset], &[1]).unwrap();
    assert_eq!(reports[0].recall, 1.0);
}

#[test]
fn generator_failures_are_skipped_and_counted() {
    let log = log_rows(10);
    let built = build_text2image_eval(&log, &Flaky, 0).unwrap();
    assert_eq!(built.skipped, 1);
    assert_eq!(built.dataset.queries.len(), 9);
}

#[test]
fn training_improves_recall_over_the_untrained_model() {
    use visrep::train::{train, Regime};
    let corpus = desk_corpus(3);
    let mut model = desk_model(&desk_spec(32), Regime::Triplet, &corpus.datasets, 3);
    let before = epoch_callback(&model, &corpus.retrieval[..1], &[5]).unwrap()[0].recall;
    let mut plan = desk_plan(Regime::Triplet);
    plan.max_steps = Some(120);
    train(&mut model, &corpus.datasets, &plan, &mut |_, _| Ok(Vec::new())).unwrap();
    let after = epoch_callback(&model, &corpus.retrieval[..1], &[5]).unwrap()[0].recall;
    assert!(after > before, "{before} → {after}");
}
