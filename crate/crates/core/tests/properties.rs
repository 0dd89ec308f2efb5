mod common;

use common::*;
use proptest::prelude::*;
use xalign::adversarial::orthogonalize_step;
use xalign::dictionary::{sample_dictionary, Dictionary, Provenance};
use xalign::eval::{auc, avg_wcd, precision_at_ks};
use xalign::format::{read_binary, read_text, write_binary, write_text};
use xalign::procrustes::{solve_procrustes, PairedMatrices};
use xalign::relevance::{QueryAdsInstance, Recipe, RelevanceScorer};
use xalign::similarity::{cosine, csls, Metric, SimilarityTable};
use xalign::synth::random_semi_orthogonal;
use xalign::{AlignmentMap, EmbeddingSpace, Normalization};

fn random_space(name: &str, n: usize, dim: usize, rng: &mut xalign::Rng) -> EmbeddingSpace {
    EmbeddingSpace::from_rows(name, dim, (0..n).map(|i| (format!("{name}{i:03}"), rand_vec(dim, rng)))).unwrap()
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, dim)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unit_normalization_gives_unit_rows_and_is_idempotent(seed in any::<u64>(), n in 1usize..20, dim in 1usize..6) {
        let s = random_space("x", n, dim, &mut rng(seed));
        for scheme in [Normalization::Unit, Normalization::CenterThenUnit] {
            let Ok(u) = s.normalize(scheme) else { continue };
            for (_, v) in u.iter() {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
            let again = u.normalize(Normalization::Unit).unwrap();
            for (a, b) in u.as_slice().iter().zip(again.as_slice()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csls_stays_within_bounds(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let pv = random_space("v", 6, 3, &mut r);
        let pt = random_space("t", 7, 3, &mut r);
        for i in 0..pv.len() {
            for j in 0..pt.len() {
                let c = csls(pv.vector(i), pt.vector(j), &pt, &pv, k).unwrap();
                prop_assert!((-4.0..=2.0).contains(&c));
            }
        }
    }

    #[test]
    fn cosine_ignores_positive_scale(u in vec_strategy(4), v in vec_strategy(4), alpha in 0.01..100.0f64) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        prop_assert!((cosine(&scaled, &v).unwrap() - cosine(&u, &v).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn csls_ranking_ignores_query_scale(seed in any::<u64>(), alpha in 0.1..10.0f64) {
        let mut r = rng(seed);
        let queries = random_space("q", 5, 3, &mut r);
        let targets = random_space("t", 8, 3, &mut r);
        let mut scaled = EmbeddingSpace::new("q", 3);
        for (i, (id, v)) in queries.iter().enumerate() {
            let f = if i == 0 { alpha } else { 1.0 };
            scaled.push(id, &v.iter().map(|x| f * x).collect::<Vec<_>>()).unwrap();
        }
        let a = SimilarityTable::csls(&queries, &targets, 3).unwrap();
        let b = SimilarityTable::csls(&scaled, &targets, 3).unwrap();
        for row in 0..a.rows() {
            let order = |t: &SimilarityTable| {
                let mut idx: Vec<usize> = (0..t.cols()).collect();
                idx.sort_by(|&x, &y| t.get(row, y).partial_cmp(&t.get(row, x)).unwrap());
                idx
            };
            prop_assert_eq!(order(&a), order(&b));
        }
    }

    #[test]
    fn sampling_is_a_deterministic_subset(seed in any::<u64>(), fraction in 0.01..=1.0f64, n in 1usize..200) {
        let mut r = rng(seed);
        let mut d = Dictionary::new(Provenance::Semantic);
        for i in 0..n {
            d.push(format!("s{i}"), format!("t{}", r.random_range(0..10)));
        }
        let a = sample_dictionary(&d, fraction, seed).unwrap();
        let b = sample_dictionary(&d, fraction, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|(s, t)| d.contains(s, t)));
    }

    #[test]
    fn procrustes_is_semi_orthogonal_and_equivariant(seed in any::<u64>(), d2 in 1usize..5, extra in 0usize..3, p in 1usize..12, alpha in 0.1..10.0f64) {
        let d1 = d2 + extra;
        let mut r = rng(seed);
        let pm = PairedMatrices::new(rand_matrix(d1, p, &mut r), rand_matrix(d2, p, &mut r)).unwrap();
        let w = solve_procrustes(&pm).unwrap();
        prop_assert!(w.is_semi_orthogonal());
        prop_assert!(w.orthogonality_residual() <= 1e-8);

        let scaled = PairedMatrices::new(&pm.v_hat * alpha, pm.t_hat.clone()).unwrap();
        let ws = solve_procrustes(&scaled).unwrap();

        let q = random_semi_orthogonal(d2, d2, &mut r);
        let rotated = PairedMatrices::new(pm.v_hat.clone(), &q * &pm.t_hat).unwrap();
        let wq = solve_procrustes(&rotated).unwrap();

        // Only well-conditioned instances have a unique solution.
        let sv = (&pm.t_hat * pm.v_hat.transpose()).singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let distinct = s.windows(2).all(|w| w[0] - w[1] > 1e-3) && s.last().copied().unwrap_or(0.0) > 1e-3;
        prop_assume!(p >= d2 && distinct);
        prop_assert!((ws.matrix() - w.matrix()).amax() < 1e-9);
        prop_assert!((wq.matrix() - &q * w.matrix()).amax() < 1e-9);
    }

    #[test]
    fn precision_is_monotone_and_complete(seed in any::<u64>(), csls_metric in any::<bool>()) {
        let mut r = rng(seed);
        let source = random_space("s", 12, 5, &mut r);
        let target = random_space("t", 10, 3, &mut r);
        let map = AlignmentMap::new(random_semi_orthogonal(3, 5, &mut r), true).unwrap();
        let mut gold = Dictionary::new(Provenance::Gold);
        for i in 0..12 {
            gold.push(source.id(i), target.id(r.random_range(0..10)));
        }
        let metric = if csls_metric { Metric::Csls { k: 3 } } else { Metric::Cosine };
        let ks: Vec<usize> = (1..=10).collect();
        let p = precision_at_ks(&map, &source, &target, &gold, &ks, metric).unwrap();
        let values: Vec<f64> = p.values().copied().collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(p[&10], 1.0);
    }

    #[test]
    fn auc_ignores_monotone_transforms(scores in prop::collection::vec(-5.0..5.0f64, 2..40), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut labels: Vec<u8> = (0..scores.len()).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
        prop_assert!((auc(&transformed, &labels).unwrap() - base).abs() < 1e-12);
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).all(|w| w[0] != w[1]) {
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auc(&negated, &labels).unwrap() + base - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wcd_is_translation_invariant_and_scales_linearly(seed in any::<u64>(), shift in vec_strategy(3), scale in 0.1..10.0f64) {
        let mut r = rng(seed);
        let pts: Vec<Vec<f64>> = (0..15).map(|_| rand_vec(3, &mut r)).collect();
        let cluster_of: Vec<usize> = (0..15).map(|i| i % 4).collect();
        let refs = |p: &[Vec<f64>]| -> f64 {
            let v: Vec<&[f64]> = p.iter().map(Vec::as_slice).collect();
            avg_wcd(&v, &cluster_of).unwrap()
        };
        let base = refs(&pts);
        let shifted: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|a| a * scale).collect()).collect();
        prop_assert!((refs(&shifted) - base).abs() < 1e-9);
        prop_assert!((refs(&scaled) - scale * base).abs() < 1e-9 * scale.max(1.0));
    }

    #[test]
    fn orthogonalize_is_contractive_near_the_manifold(seed in any::<u64>(), beta in 0.0..=0.01f64, eps in 0.0..0.2f64) {
        let mut r = rng(seed);
        let q = random_semi_orthogonal(3, 5, &mut r);
        let w = AlignmentMap::new(&q + rand_matrix(3, 5, &mut r) * eps, false).unwrap();
        prop_assume!(w.orthogonality_residual() < 1.0);
        let next = orthogonalize_step(&w, beta).unwrap();
        prop_assert!(next.orthogonality_residual() <= w.orthogonality_residual() + 1e-15);
    }

    #[test]
    fn scorer_ignores_region_order(seed in any::<u64>(), max_pool in any::<bool>()) {
        let mut r = rng(seed);
        let regions: Vec<Vec<f64>> = (0..4).map(|_| rand_vec(5, &mut r)).collect();
        let mut reversed = regions.clone();
        reversed.reverse();
        let inst = |regions: Vec<Vec<f64>>| QueryAdsInstance { query: vec![0.3, -0.2, 0.9], text: vec![1.0, 0.0, 0.5], regions, label: 1 };
        let recipe = if max_pool { Recipe::ConcatMax } else { Recipe::ConcatMean };
        let scorer = RelevanceScorer { weights: rand_vec(12, &mut r), bias: 0.1, recipe };
        let map = AlignmentMap::new(random_semi_orthogonal(3, 5, &mut r), true).unwrap();
        let a = scorer.score_instance(&inst(regions), Some(&map)).unwrap();
        let b = scorer.score_instance(&inst(reversed), Some(&map)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn maps_round_trip_bitwise(seed in any::<u64>(), d2 in 1usize..5, d1 in 1usize..7) {
        let m = AlignmentMap::new(rand_matrix(d2, d1, &mut rng(seed)), false).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = AlignmentMap::read_from(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.matrix(), m.matrix());
        prop_assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn spaces_round_trip_in_both_formats(seed in any::<u64>(), n in 0usize..10, dim in 1usize..5) {
        let s = random_space("x", n, dim, &mut rng(seed));
        let origin = std::path::Path::new("mem");
        let mut text = Vec::new();
        write_text(&s, &mut text).unwrap();
        let t = read_text(text.as_slice(), "x", origin).unwrap();
        prop_assert_eq!(t.as_slice(), s.as_slice());
        prop_assert_eq!(t.ids(), s.ids());
        let mut bin = Vec::new();
        write_binary(&s, &mut bin).unwrap();
        // Values narrow to f32 once; after that the bytes are stable.
        let b = read_binary(bin.as_slice(), "x", origin).unwrap();
        let narrowed: Vec<f64> = s.as_slice().iter().map(|&x| x as f32 as f64).collect();
        prop_assert_eq!(b.as_slice(), narrowed.as_slice());
        let mut again = Vec::new();
        write_binary(&b, &mut again).unwrap();
        prop_assert_eq!(again, bin);
    }
}

#[test]
fn orthogonalize_fixed_point() {
    let q = random_semi_orthogonal(3, 6, &mut rng(4));
    let w = AlignmentMap::new(q.clone(), true).unwrap();
    let next = orthogonalize_step(&w, 0.01).unwrap();
    assert!((next.matrix() - &q).amax() < 1e-12);
}
