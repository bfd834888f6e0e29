//! Geometry kernels against brute-force oracles on random instances.

mod common;

use dtnet_core::geom::{
    ball_query, farthest_point_sample, group_and_reduce, interpolate_features, interpolation_weights, knn,
    NeighborList,
};
use common::{ball_oracle, cloud, d2, fps_oracle, knn_oracle};
use dtnet_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn interp_oracle(q: &Tensor<f64>, src: &Tensor<f64>, feats: &Tensor<f64>, k: usize) -> Vec<f64> {
    let idx = knn_oracle(q, src, k);
    let c = feats.last_dim();
    let mut out = vec![0.0; q.rows() * c];
    for qi in 0..q.rows() {
        let nb = &idx[qi * k..(qi + 1) * k];
        let w: Vec<f64> = nb.iter().map(|&j| 1.0 / (d2(q.row(qi), src.row(j)) + 1e-8)).collect();
        let total: f64 = w.iter().sum();
        for (&j, &wj) in nb.iter().zip(&w) {
            for ch in 0..c {
                out[qi * c + ch] += wj / total * feats.get(&[j, ch]);
            }
        }
    }
    out
}

#[test]
fn fifty_random_instances_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let n = rng.gen_range(2..=32);
        let pts = cloud(n, &mut rng);
        let s = rng.gen_range(1..=n);
        let seed = rng.gen_range(0..n);
        assert_eq!(farthest_point_sample(&pts, s, seed).unwrap(), fps_oracle(&pts, s, seed));

        let q = cloud(rng.gen_range(1..8), &mut rng);
        let r = rng.gen_range(0.1..1.5);
        let k = rng.gen_range(1..=n);
        assert_eq!(ball_query(&q, &pts, r, k).unwrap().indices, ball_oracle(&q, &pts, r, k));
        assert_eq!(knn(&q, &pts, k).unwrap().indices, knn_oracle(&q, &pts, k));

        let c = rng.gen_range(1..5);
        let feats = Tensor::new([n, c], (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let kk = k.min(3);
        let tape = Tape::new();
        let got = interpolate_features(&q, &pts, tape.constant(feats.clone()), kk).unwrap();
        let want = interp_oracle(&q, &pts, &feats, kk);
        for (a, b) in got.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn fps_last_pick_beats_every_suffix_exchange() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..30 {
        let n = rng.gen_range(3..=16);
        let pts = cloud(n, &mut rng);
        let s = rng.gen_range(2..n);
        let sel = farthest_point_sample(&pts, s, 0).unwrap();
        let min_pair = |set: &[usize]| {
            let mut m = f64::INFINITY;
            for i in 0..set.len() {
                for j in i + 1..set.len() {
                    m = m.min(d2(pts.row(set[i]), pts.row(set[j])));
                }
            }
            m
        };
        let base = min_pair(&sel);
        let mut unique = sel.clone();
        unique.sort();
        unique.dedup();
        assert_eq!(unique.len(), s);
        for x in (0..n).filter(|i| !sel.contains(i)) {
            let mut alt = sel.clone();
            *alt.last_mut().unwrap() = x;
            assert!(base >= min_pair(&alt) - 1e-15);
        }
    }
}

#[test]
fn group_and_reduce_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 12;
    let pts = cloud(n, &mut rng);
    let feats = Tensor::new([n, 2], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = Tensor::new([5, 4], (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let centers = pts.select_rows(&[0, 5, 7]);
    let nl = ball_query(&centers, &pts, 0.9, 4).unwrap();

    let tape = Tape::new();
    let wv = tape.constant(w.clone());
    let got = group_and_reduce(&nl, tape.constant(feats.clone()), &pts, &centers, |x| x.linear(wv, None)?.relu()).unwrap();

    for q in 0..3 {
        for o in 0..4 {
            let mut best = f64::NEG_INFINITY;
            for &j in nl.of(q) {
                let mut row = feats.row(j).to_vec();
                row.extend((0..3).map(|d| pts.get(&[j, d]) - centers.get(&[q, d])));
                let v: f64 = (0..5).map(|i| row[i] * w.get(&[i, o])).sum::<f64>().max(0.0);
                best = best.max(v);
            }
            assert!((got.value().get(&[q, o]) - best).abs() < 1e-6);
        }
    }
}

proptest! {
    #[test]
    fn neighborhoods_follow_source_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(4..20);
        let pts = cloud(n, &mut rng);
        let q = cloud(3, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffled = pts.select_rows(&perm);

        // With k = N every source appears; compare as sets of original ids.
        let a = knn(&q, &pts, 3).unwrap();
        let b = knn(&q, &shuffled, 3).unwrap();
        let da = a.distances.unwrap();
        let db = b.distances.unwrap();
        for (x, y) in da.iter().zip(&db) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let r = 0.8;
        let ba = ball_query(&q, &pts, r, n).unwrap();
        let bb = ball_query(&q, &shuffled, r, n).unwrap();
        for qi in 0..3 {
            let mut sa: Vec<usize> = ba.of(qi).to_vec();
            let mut sb: Vec<usize> = bb.of(qi).iter().map(|&j| perm[j]).collect();
            sa.sort();
            sa.dedup();
            sb.sort();
            sb.dedup();
            prop_assert_eq!(sa, sb);
        }
    }

    #[test]
    fn interpolation_is_convex(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..20);
        let pts = cloud(n, &mut rng);
        let q = cloud(4, &mut rng);
        let feats = Tensor::new([n, 2], (0..2 * n).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let nl = knn(&q, &pts, 3).unwrap();
        for row in interpolation_weights(&nl).chunks(3) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let tape = Tape::new();
        let out = interpolate_features(&q, &pts, tape.constant(feats.clone()), 3).unwrap();
        for qi in 0..4 {
            for c in 0..2 {
                let vals: Vec<f64> = nl.of(qi).iter().map(|&j| feats.get(&[j, c])).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = out.value().get(&[qi, c]);
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn group_reduce_ignores_neighbor_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 10;
        let pts = cloud(n, &mut rng);
        let feats = Tensor::new([n, 3], (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let centers = pts.select_rows(&[1, 4]);
        let mut idx: Vec<usize> = (0..8).map(|_| rng.gen_range(0..n)).collect();
        let a = NeighborList::<f64> { indices: idx.clone(), width: 4, distances: None };
        idx[..4].shuffle(&mut rng);
        idx[4..].shuffle(&mut rng);
        let b = NeighborList::<f64> { indices: idx, width: 4, distances: None };
        let tape = Tape::new();
        let f = tape.constant(feats);
        let ra = group_and_reduce(&a, f, &pts, &centers, |x| x.relu()).unwrap();
        let rb = group_and_reduce(&b, f, &pts, &centers, |x| x.relu()).unwrap();
        prop_assert_eq!(&*ra.value(), &*rb.value());
    }
}
