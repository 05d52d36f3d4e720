mod common;

use common::*;
use num_rational::Ratio;
use oapr_core::catalog::{NovelFraction, SplitManifest};
use oapr_core::retrieval::*;
use oapr_core::tape::Mat;
use rand::Rng;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("img{i:03}")).collect()
}

/// Repeated selection of the best remaining candidate; ties to the smaller id.
fn selection_rank(ids: &[String], scores: &Mat, cols: &[usize], candidates: &[usize]) -> Vec<usize> {
    let mean = |e: usize| cols.iter().map(|&c| scores[[e, c]]).sum::<f64>() / cols.len() as f64;
    let mut left = candidates.to_vec();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (mean(left[i]), mean(left[best]));
            if a > b || (a == b && ids[left[i]] < ids[left[best]]) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

#[test]
fn ranking_matches_selection_oracle() {
    for seed in 0..30 {
        let mut r = rng(seed);
        let e = 6;
        // Few distinct values so that ties really occur.
        let scores = Mat::from_shape_simple_fn((e, 3), || r.random_range(0..3) as f64 / 2.0);
        let cols: Vec<usize> = (0..r.random_range(1..=3)).collect();
        let mut id = ids(e);
        id.reverse();
        let cand: Vec<usize> = (0..e).collect();
        let got: Vec<usize> = rank_entries(&id, &scores, &cols, &cand, ScoreMode::Mean).into_iter().map(|x| x.0).collect();
        assert_eq!(got, selection_rank(&id, &scores, &cols, &cand), "seed {seed}");
    }
}

#[test]
fn ties_break_by_ascending_image_id() {
    let id = vec!["b".to_string(), "c".into(), "a".into()];
    let scores = Mat::from_elem((3, 1), 0.5);
    let got: Vec<usize> = rank_entries(&id, &scores, &[0], &[0, 1, 2], ScoreMode::Mean).into_iter().map(|x| x.0).collect();
    assert_eq!(got, vec![2, 0, 1]);
    assert_eq!(rank_entries(&id, &scores, &[0], &[1], ScoreMode::Mean).len(), 1);
}

#[test]
fn combine_modes() {
    assert_eq!(ScoreMode::Mean.combine(&[0.2, 0.6]), 0.4);
    assert!((ScoreMode::Product.combine(&[0.2, 0.6]) - 0.12).abs() < 1e-15);
    assert_eq!(ScoreMode::Min.combine(&[0.2, 0.6]), 0.2);
}

fn manifest(base: &[&str], novel: &[&str]) -> SplitManifest {
    let mut b: Vec<String> = base.iter().map(|s| s.to_string()).collect();
    let mut n: Vec<String> = novel.iter().map(|s| s.to_string()).collect();
    b.sort();
    n.sort();
    SplitManifest {
        clusters: vec![b.iter().chain(&n).cloned().collect()],
        base: b,
        novel: n,
        dataset_name: "test".into(),
        n_clusters: 1,
        novel_fraction: NovelFraction::QUARTER,
        seed: 0,
    }
}

struct EvalWorld {
    ids: Vec<String>,
    labels: Vec<Vec<bool>>,
    names: Vec<String>,
    scores: Mat,
    queries: Vec<(QuerySplit, Vec<AttributeQuery>)>,
}

fn eval_world(seed: u64, e: usize) -> EvalWorld {
    let mut r = rng(seed);
    let names: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
    let labels: Vec<Vec<bool>> = (0..e).map(|_| (0..5).map(|_| r.random_bool(0.5)).collect()).collect();
    let scores = Mat::from_shape_simple_fn((e, 5), || r.random_range(-1.0..1.0));
    let m = manifest(&["a0", "a1", "a2"], &["a3", "a4"]);
    let queries = QuerySplit::ALL
        .iter()
        .map(|&s| (s, make_query_set(&m, &names, &labels, s, 2).unwrap()))
        .collect();
    EvalWorld {
        ids: ids(e),
        labels,
        names,
        scores,
        queries,
    }
}

#[test]
fn query_sets_enumerate_satisfiable_pairs() {
    let w = eval_world(4, 20);
    let find = |s: QuerySplit| w.queries.iter().find(|q| q.0 == s).unwrap().1.clone();
    for q in find(QuerySplit::Base) {
        assert!(q.attributes.iter().all(|&a| a < 3));
    }
    for q in find(QuerySplit::Novel) {
        assert_eq!(q.attributes, vec![3, 4]);
    }
    let mixed = find(QuerySplit::Mixed);
    let mut want = Vec::new();
    for i in 0..5 {
        for j in (i + 1)..5 {
            if i < 3 && j >= 3 && w.labels.iter().any(|l| l[i] && l[j]) {
                want.push(vec![i, j]);
            }
        }
    }
    assert_eq!(mixed.into_iter().map(|q| q.attributes).collect::<Vec<_>>(), want);
}

#[test]
fn full_evaluation_matches_brute_force() {
    for seed in 0..10 {
        let w = eval_world(seed, 20);
        let report = evaluate_scores(&w.ids, &w.labels, &w.names, &w.scores, &w.queries, &[1, 5], EvalMode::Full, ScoreMode::Mean).unwrap();
        let all: Vec<usize> = (0..20).collect();
        for (split, qs) in &w.queries {
            if qs.is_empty() {
                continue;
            }
            let rankings: Vec<Vec<usize>> = qs.iter().map(|q| selection_rank(&w.ids, &w.scores, &q.attributes, &all)).collect();
            let attrs: Vec<Vec<usize>> = qs.iter().map(|q| q.attributes.clone()).collect();
            let m = &report.splits[split];
            assert_eq!(m.n_queries, qs.len());
            for k in [1, 5] {
                let lbl: Ratio<u64> = brute_p_at_k_label(&rankings, &w.labels, &attrs, k);
                assert!((m.p_at_k_label[&k] - ratio_to_f64(lbl)).abs() < 1e-12);
                assert_eq!(m.p_at_k_instance[&k], ratio_to_f64(brute_p_at_k_instance(&rankings, &w.labels, &attrs, k)));
            }
        }
    }
}

#[test]
fn balanced_subsample_has_equal_cells() {
    let w = eval_world(9, 60);
    let q = AttributeQuery { attributes: vec![1, 3] };
    let mut cell_sizes = [0usize; 4];
    for l in &w.labels {
        cell_sizes[usize::from(l[1]) | usize::from(l[3]) << 1] += 1;
    }
    let m = *cell_sizes.iter().min().unwrap();
    let pick = |s: u64| {
        let mut r: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(s);
        balanced_subsample(&w.labels, &q, &mut r)
    };
    let got = pick(1);
    assert_eq!(got.len(), 4 * m);
    let mut counts = [0usize; 4];
    for &e in &got {
        counts[usize::from(w.labels[e][1]) | usize::from(w.labels[e][3]) << 1] += 1;
    }
    assert_eq!(counts, [m; 4]);
    assert!(got.windows(2).all(|p| p[0] < p[1]));
    assert_eq!(got, pick(1));
    assert_ne!(got, pick(2));
}

#[test]
fn balanced_evaluation_is_seeded_and_skips_thin_queries() {
    let w = eval_world(2, 40);
    let run = |seed| {
        evaluate_scores(&w.ids, &w.labels, &w.names, &w.scores, &w.queries, &[1, 5], EvalMode::Balanced { seed }, ScoreMode::Mean).unwrap()
    };
    assert_eq!(run(3).rankings, run(3).rankings);
    let rep = run(3);
    for r in &rep.rankings {
        assert!(r.candidates >= 5 && r.candidates % 4 == 0);
    }
    let total: usize = w.queries.iter().map(|q| q.1.len()).sum();
    let seen: usize = rep.splits.values().map(|m| m.n_queries + m.n_skipped).sum();
    assert_eq!(seen, total);
}

#[test]
fn perfect_and_adversarial_scorers() {
    let mut r = rng(11);
    let e = 64;
    let names: Vec<String> = (0..4).map(|i| format!("a{i}")).collect();
    let labels: Vec<Vec<bool>> = (0..e).map(|_| (0..4).map(|_| r.random_bool(0.5)).collect()).collect();
    let m = manifest(&["a0", "a1"], &["a2", "a3"]);
    let queries: Vec<_> = QuerySplit::ALL.iter().map(|&s| (s, make_query_set(&m, &names, &labels, s, 2).unwrap())).collect();
    let good = Mat::from_shape_fn((e, 4), |(i, a)| if labels[i][a] { 1.0 } else { 0.0 });
    let bad = good.mapv(|v| -v);
    for (scores, want) in [(good, 1.0), (bad, 0.0)] {
        let rep = evaluate_scores(&ids(e), &labels, &names, &scores, &queries, &[1, 5], EvalMode::Balanced { seed: 0 }, ScoreMode::Mean).unwrap();
        assert!(rep.splits.values().all(|m| m.n_queries > 0));
        for m in rep.splits.values() {
            assert_eq!(m.p_at_k_label[&5], want);
            assert_eq!(m.p_at_k_instance[&1], want);
        }
    }
}

#[test]
fn index_round_trips_through_disk() {
    let mut r = rng(21);
    let entries: Vec<GalleryEntry> = (0..8)
        .rev()
        .map(|i| GalleryEntry {
            image_id: format!("img{i}"),
            image_uri: format!("images/img{i}.png"),
            labels: vec![i % 2 == 0, i % 3 == 0],
        })
        .collect();
    let feats: Vec<Mat> = (0..8).map(|_| random_mat(&mut r, 4, 6, 1.0)).collect();
    let idx = build_index_from_features(entries, feats.clone(), vec!["x".into(), "y".into()], "sha256:enc", Some("sha256:ck".into())).unwrap();
    // Sorted by id; features follow their entries and are rounded to f32.
    assert_eq!(idx.entries[0].image_id, "img0");
    assert_eq!(idx.f_body[0], feats[7].mapv(|v| v as f32 as f64));
    assert_eq!(idx.position("img3"), Some(3));
    assert_eq!(idx.dims(), (4, 6));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.idx");
    idx.save(&path).unwrap();
    let back = GalleryIndex::load(&path).unwrap();
    assert_eq!(back.entries, idx.entries);
    assert_eq!(back.f_body, idx.f_body);
    assert_eq!(back.feature_checksum(), idx.feature_checksum());
    assert_eq!(back.checkpoint_fingerprint.as_deref(), Some("sha256:ck"));
    assert_eq!(back.attributes, idx.attributes);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(GalleryIndex::load(&path).is_err());
    let mut truncated = std::fs::read(dir.path().join("g.idx")).unwrap();
    truncated[0] = b'O';
    truncated.truncate(truncated.len() - 3);
    std::fs::write(&path, &truncated).unwrap();
    assert!(GalleryIndex::load(&path).is_err());
}

#[test]
fn index_rejects_bad_inputs() {
    let e = |id: &str| GalleryEntry {
        image_id: id.into(),
        image_uri: String::new(),
        labels: vec![true],
    };
    let f = Mat::zeros((2, 3));
    assert!(build_index_from_features(vec![e("a"), e("a")], vec![f.clone(), f.clone()], vec!["x".into()], "e", None).is_err());
    assert!(build_index_from_features(vec![e("a")], vec![], vec!["x".into()], "e", None).is_err());
    assert!(build_index_from_features(vec![e("a"), e("b")], vec![f.clone(), Mat::zeros((3, 3))], vec!["x".into()], "e", None).is_err());
    assert!(build_index_from_features(vec![e("a")], vec![f.mapv(|_| f64::NAN)], vec!["x".into()], "e", None).is_err());
}

#[test]
fn query_construction_cleans_phrases() {
    let q = RetrievalQuery::new([" Wearing a hat ", "", "Wearing a hat", "Pushing a stroller"], 5).unwrap();
    assert_eq!(q.attributes, vec!["Wearing a hat", "Pushing a stroller"]);
    assert!(RetrievalQuery::new(["  "], 5).is_err());
    assert!(RetrievalQuery::new(["x"], 0).is_err());
}
