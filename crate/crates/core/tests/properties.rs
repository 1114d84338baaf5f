use std::collections::BTreeSet;

use ndarray::Array2;
use pocketalign::contrastive::{l1_terms, l2_terms};
use pocketalign::element::Element;
use pocketalign::encoder::{EncoderConfig, FrozenEncoder, TokenSeq, VOCAB};
use pocketalign::evaluation::{auc_roc, knn_regress, KnnConfig, KnnWeighting};
use pocketalign::fragment_forge::{extract_chain, ExtractionConfig};
use pocketalign::geometry::{dist, quaternion_to_matrix, rigid_transform, Vec3};
use pocketalign::grid::SpatialGrid;
use pocketalign::sampler::{stratified_sample, Histogram2D, SamplingTable};
use pocketalign::surface::{compute_rbsa, occluded_sasa, shrake_rupley, SasaConfig};
use pocketalign::synthetic::random_chain;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn point(span: f64) -> impl Strategy<Value = Vec3> {
    [-span..span, -span..span, -span..span]
}

fn element() -> impl Strategy<Value = Element> {
    prop::sample::select(vec![Element::C, Element::N, Element::O, Element::S])
}

fn atoms(n: std::ops::Range<usize>, span: f64) -> impl Strategy<Value = Vec<(Element, Vec3)>> {
    prop::collection::vec((element(), point(span)), n)
}

fn rotation() -> impl Strategy<Value = [f64; 4]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
        .prop_filter("non-degenerate quaternion", |q| q.iter().map(|x| x * x).sum::<f64>() > 0.05)
}

fn fast_sasa() -> SasaConfig {
    SasaConfig {
        sphere_points: 240,
        ..SasaConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_query_matches_brute_force(
        pts in prop::collection::vec(point(15.0), 0..120),
        q in point(18.0),
        radius in 0.1..6.0f64,
        cell in 0.5..6.0f64,
    ) {
        let grid = SpatialGrid::new(pts.clone(), cell);
        let got: BTreeSet<usize> = grid.within(q, radius).into_iter().collect();
        let want: BTreeSet<usize> = (0..pts.len()).filter(|&i| dist(pts[i], q) < radius).collect();
        // Boundary ties are the only permitted disagreement.
        for i in got.symmetric_difference(&want) {
            prop_assert!((dist(pts[*i], q) - radius).abs() < 1e-9);
        }
    }

    #[test]
    fn adding_an_occluder_never_grows_any_area(
        targets in atoms(1..8, 4.0),
        occluders in atoms(0..6, 5.0),
        extra in (element(), point(5.0)),
    ) {
        let cfg = fast_sasa();
        let before = occluded_sasa(&targets, &occluders, &cfg);
        let mut more = occluders.clone();
        more.push(extra);
        let after = occluded_sasa(&targets, &more, &cfg);
        for (a, b) in after.iter().zip(&before) {
            prop_assert!(a <= b, "{a} > {b}");
        }
    }

    #[test]
    fn rbsa_is_bounded_and_monotone_in_pocket_atoms(
        ligand in atoms(1..6, 3.0),
        pocket in atoms(0..10, 6.0),
        cut in 0usize..10,
    ) {
        let cfg = fast_sasa();
        let partial = &pocket[..cut.min(pocket.len())];
        let small = compute_rbsa(&ligand, partial, &cfg).unwrap();
        let full = compute_rbsa(&ligand, &pocket, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&small));
        prop_assert!((0.0..=1.0).contains(&full));
        prop_assert!(full >= small, "{full} < {small}");
    }

    #[test]
    fn sasa_follows_rigid_motions(
        mol in atoms(2..10, 4.0),
        q in rotation(),
        shift in point(20.0),
    ) {
        let cfg = SasaConfig::default();
        let rot = quaternion_to_matrix(q);
        let pos: Vec<Vec3> = mol.iter().map(|a| a.1).collect();
        let moved: Vec<(Element, Vec3)> = rigid_transform(&pos, &rot, shift)
            .into_iter()
            .zip(&mol)
            .map(|(p, a)| (a.0, p))
            .collect();
        let a: f64 = shrake_rupley(&mol, &cfg).iter().sum();
        let b: f64 = shrake_rupley(&moved, &cfg).iter().sum();
        prop_assert!((a - b).abs() <= 0.005 * a.max(1e-9), "{a} vs {b}");
    }

    #[test]
    fn embeddings_are_se3_and_permutation_invariant(
        toks in prop::collection::vec((1usize..VOCAB, point(6.0)), 1..12),
        q in rotation(),
        shift in point(30.0),
        perm_seed in any::<u64>(),
    ) {
        let enc = FrozenEncoder::new(EncoderConfig::small(8, 2, 2), 3).unwrap();
        let types: Vec<usize> = toks.iter().map(|t| t.0).collect();
        let coords: Vec<Vec3> = toks.iter().map(|t| t.1).collect();
        let base = enc.encode(&TokenSeq::new(types.clone(), coords.clone()).unwrap());

        let moved = rigid_transform(&coords, &quaternion_to_matrix(q), shift);
        let rigid = enc.encode(&TokenSeq::new(types.clone(), moved).unwrap());

        let mut order: Vec<usize> = (0..types.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let permuted = enc.encode(&TokenSeq::new(
            order.iter().map(|&i| types[i]).collect(),
            order.iter().map(|&i| coords[i]).collect(),
        ).unwrap());

        for ((a, b), c) in base.iter().zip(&rigid).zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!((a - c).abs() < 1e-9);
        }
        let n: f64 = base.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infonce_terms_are_nonnegative_and_ignore_negative_order(
        vals in prop::collection::vec(-5.0..5.0f64, 25),
        perm_seed in any::<u64>(),
    ) {
        let n = 5;
        let logits = Array2::from_shape_vec((n, n), vals).unwrap();
        let (l1, l2) = (l1_terms(&logits), l2_terms(&logits));
        prop_assert!(l1.iter().chain(&l2).all(|&x| x >= 0.0));

        // Relabel the batch: positives stay on the diagonal, negatives are reordered.
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled = Array2::from_shape_fn((n, n), |(i, j)| logits[[order[i], order[j]]]);
        let (p1, p2) = (l1_terms(&shuffled), l2_terms(&shuffled));
        for i in 0..n {
            prop_assert!((p1[i] - l1[order[i]]).abs() < 1e-12);
            prop_assert!((p2[i] - l2[order[i]]).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_prediction_moves_affinely_with_labels(
        bank in prop::collection::vec((prop::collection::vec(0.05..1.0f64, 4), -10.0..10.0f64), 1..40),
        query in prop::collection::vec(0.05..1.0f64, 4),
        k in 1usize..50,
        a in prop_oneof![-5.0..-0.1f64, 0.1..5.0f64],
        b in -10.0..10.0f64,
    ) {
        // Positive-orthant vectors keep every verbatim weight positive and finite.
        for weighting in [KnnWeighting::InverseSimilarity, KnnWeighting::Similarity] {
            let cfg = KnnConfig { k, epsilon: 1e-8, weighting };
            let y = knn_regress(&query, &bank, &cfg).unwrap();
            let mapped: Vec<(Vec<f64>, f64)> = bank.iter().map(|(v, l)| (v.clone(), a * l + b)).collect();
            let z = knn_regress(&query, &mapped, &cfg).unwrap();
            let tol = 1e-6 * (1.0 + (a * y + b).abs());
            prop_assert!((z - (a * y + b)).abs() < tol, "{z} vs {}", a * y + b);
        }
    }

    #[test]
    fn auc_matches_pair_count(
        data in prop::collection::vec((prop::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]), any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        let pos: Vec<f64> = data.iter().filter(|d| d.1).map(|d| d.0).collect();
        let neg: Vec<f64> = data.iter().filter(|d| !d.1).map(|d| d.0).collect();
        prop_assume!(!pos.is_empty() && !neg.is_empty());
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        let want = wins / (pos.len() * neg.len()) as f64;
        prop_assert!((auc_roc(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sampling_ignores_record_order(chain_seed in any::<u64>(), table_seed in any::<u64>(), rate in 0.1..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(chain_seed);
        let chain = random_chain(&mut rng, 24, "perm");
        let cfg = ExtractionConfig { max_fragment_len: 3, ..ExtractionConfig::default() };
        let records = extract_chain(&chain, &cfg, &fast_sasa()).records;
        let table = SamplingTable::uniform(Histogram2D::default_edges(), rate).with_seed(table_seed);
        let forward = stratified_sample(&records, &table);
        let mut reversed_input = records.clone();
        reversed_input.reverse();
        let mut backward = stratified_sample(&reversed_input, &table);
        backward.reverse();
        prop_assert_eq!(forward, backward);
    }
}
