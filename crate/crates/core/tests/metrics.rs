mod common;

use common::*;
use oapr_core::retrieval::{p_at_k_instance, p_at_k_label};
use rand::seq::SliceRandom;
use rand::Rng;

struct World {
    labels: Vec<Vec<bool>>,
    queries: Vec<Vec<usize>>,
    rankings: Vec<Vec<usize>>,
}

fn random_world(seed: u64, max_images: usize, max_attrs: usize, k: usize) -> World {
    let mut r = rng(seed);
    let e = r.random_range(k..=max_images);
    let a = r.random_range(1..=max_attrs);
    let labels: Vec<Vec<bool>> = (0..e).map(|_| (0..a).map(|_| r.random_bool(0.4)).collect()).collect();
    let n_q = r.random_range(1..10);
    let queries: Vec<Vec<usize>> = (0..n_q)
        .map(|_| {
            let mut attrs: Vec<usize> = (0..a).collect();
            attrs.shuffle(&mut r);
            attrs.truncate(r.random_range(1..=a.min(3)));
            attrs
        })
        .collect();
    let rankings = queries
        .iter()
        .map(|_| {
            let mut order: Vec<usize> = (0..e).collect();
            order.shuffle(&mut r);
            order.truncate(k);
            order
        })
        .collect();
    World {
        labels,
        queries,
        rankings,
    }
}

#[test]
fn fifty_random_galleries_match_rational_brute_force() {
    for seed in 0..50 {
        for k in [1, 5] {
            let w = random_world(seed, 30, 8, k);
            let lbl = p_at_k_label(&w.rankings, &w.labels, &w.queries, k).unwrap();
            let ins = p_at_k_instance(&w.rankings, &w.labels, &w.queries, k).unwrap();
            let want_lbl = ratio_to_f64(brute_p_at_k_label(&w.rankings, &w.labels, &w.queries, k));
            let want_ins = ratio_to_f64(brute_p_at_k_instance(&w.rankings, &w.labels, &w.queries, k));
            assert!((lbl - want_lbl).abs() <= 1e-12, "seed {seed} k {k}: {lbl} vs {want_lbl}");
            assert_eq!(ins, want_ins, "seed {seed} k {k}");
        }
    }
}

#[test]
fn all_pairs_on_a_twenty_image_gallery() {
    let mut r = rng(99);
    let labels: Vec<Vec<bool>> = (0..20).map(|_| (0..6).map(|_| r.random_bool(0.5)).collect()).collect();
    let mut queries = Vec::new();
    for i in 0..6 {
        for j in (i + 1)..6 {
            queries.push(vec![i, j]);
        }
    }
    let rankings: Vec<Vec<usize>> = queries
        .iter()
        .map(|_| {
            let mut o: Vec<usize> = (0..20).collect();
            o.shuffle(&mut r);
            o.truncate(5);
            o
        })
        .collect();
    let lbl = p_at_k_label(&rankings, &labels, &queries, 5).unwrap();
    assert!((lbl - ratio_to_f64(brute_p_at_k_label(&rankings, &labels, &queries, 5))).abs() <= 1e-12);
    assert_eq!(
        p_at_k_instance(&rankings, &labels, &queries, 5).unwrap(),
        ratio_to_f64(brute_p_at_k_instance(&rankings, &labels, &queries, 5))
    );
}

#[test]
fn covered_but_never_jointly() {
    let labels = vec![
        vec![true, false],
        vec![false, true],
        vec![true, false],
        vec![false, true],
        vec![true, false],
        vec![true, true],
    ];
    let q = vec![vec![0, 1]];
    assert_eq!(p_at_k_instance(&[vec![0, 1, 2, 3, 4]], &labels, &q, 5).unwrap(), 0.0);
    assert_eq!(p_at_k_instance(&[vec![5]], &labels, &q, 1).unwrap(), 1.0);
    assert_eq!(p_at_k_label(&[vec![5]], &labels, &q, 1).unwrap(), 1.0);
}
