//! Property tests for structural invariants.

use proptest::prelude::*;

use mfauc_core::distributions::build_distributions;
use mfauc_core::metrics::{curve_area, roc_curve, DenseScores, Scorer};
use mfauc_core::parallel::make_schedule;
use mfauc_core::ratings::{read_ratings, save_ratings, split_holdout, ImplicitRatings};

fn arb_ratings(max_m: usize, max_n: usize) -> impl Strategy<Value = ImplicitRatings> {
    (1..=max_m, 2..=max_n).prop_flat_map(|(m, n)| {
        proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), m).prop_map(
            move |flags| {
                let rows: Vec<Vec<u32>> = flags
                    .into_iter()
                    .map(|row| {
                        row.into_iter()
                            .enumerate()
                            .filter(|(_, b)| *b)
                            .map(|(j, _)| j as u32)
                            .collect()
                    })
                    .collect();
                ImplicitRatings::from_rows(n, rows).unwrap()
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_round_trip(ratings in arb_ratings(8, 10)) {
        let path = std::env::temp_dir().join(format!(
            "mfauc-prop-{}-{:x}.mtx",
            std::process::id(),
            ratings.nnz() * 1000 + ratings.num_users() * 10 + ratings.num_items()
        ));
        save_ratings(&ratings, &path).unwrap();
        let text = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).ok();
        let back = read_ratings(std::io::Cursor::new(text), None).unwrap();
        prop_assert_eq!(ratings, back);
    }

    #[test]
    fn distribution_masses_are_normalised(
        ratings in arb_ratings(7, 9),
        tau in 0.0f64..2.5,
    ) {
        let dists = build_distributions(&ratings, tau).unwrap();
        for i in 0..ratings.num_users() {
            if ratings.is_degenerate(i) {
                continue;
            }
            let g: f64 = ratings.row(i).iter().map(|&j| dists.g(i, j)).sum();
            let gp: f64 = (0..ratings.num_items() as u32)
                .filter(|&j| !ratings.is_relevant(i, j))
                .map(|j| dists.g_prime(i, j))
                .sum();
            prop_assert!((g - 1.0).abs() < 1e-12);
            prop_assert!((gp - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn holdout_union_and_disjointness(
        ratings in arb_ratings(8, 12),
        per_user in 1usize..4,
        seed in any::<u64>(),
    ) {
        let split = split_holdout(&ratings, per_user, 1, seed).unwrap();
        for i in 0..ratings.num_users() {
            let mut union: Vec<u32> = split.train.row(i).to_vec();
            union.extend_from_slice(&split.test[i]);
            union.sort_unstable();
            prop_assert_eq!(union.as_slice(), ratings.row(i));
            for t in &split.test[i] {
                prop_assert!(!split.train.is_relevant(i, *t));
            }
            if split.skipped.binary_search(&(i as u32)).is_ok() {
                prop_assert!(split.test[i].is_empty());
            } else {
                prop_assert_eq!(split.test[i].len(), per_user);
            }
        }
        let again = split_holdout(&ratings, per_user, 1, seed).unwrap();
        prop_assert_eq!(split.train, again.train);
        prop_assert_eq!(split.test, again.test);
    }

    #[test]
    fn schedule_covers_every_pair_conflict_free(
        d1 in 1usize..=8,
        d2 in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let schedule = make_schedule(d1, d2, seed);
        prop_assert_eq!(schedule.rounds.len(), d1.max(d2));
        let mut seen = vec![false; d1 * d2];
        for round in &schedule.rounds {
            let mut rows = vec![false; d1];
            let mut cols = vec![false; d2];
            for &(a, b) in round {
                let (a, b) = (a as usize, b as usize);
                prop_assert!(!rows[a]);
                prop_assert!(!cols[b]);
                rows[a] = true;
                cols[b] = true;
                prop_assert!(!seen[a * d2 + b]);
                seen[a * d2 + b] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn roc_area_is_auc_and_transform_invariant(
        raw in proptest::collection::vec(0u8..40, 4..20),
        rel_mask in proptest::collection::vec(any::<bool>(), 20),
    ) {
        let scores: Vec<f64> = raw.iter().map(|&x| x as f64 / 7.0).collect();
        let relevant: Vec<u32> = (0..scores.len() as u32)
            .filter(|&j| rel_mask[j as usize])
            .collect();
        prop_assume!(!relevant.is_empty() && relevant.len() < scores.len());
        let curve = roc_curve(&scores, &relevant, None).unwrap();
        let area = curve_area(&curve);

        let n = scores.len();
        let ratings = ImplicitRatings::from_rows(n, vec![relevant.clone()]).unwrap();
        let scorer = DenseScores(vec![scores.clone()]);
        let auc = mfauc_core::metrics::empirical_auc(&scorer, &ratings, None)
            .unwrap()
            .value;
        prop_assert!((area - auc).abs() < 1e-12);

        // strictly monotone transform leaves the curve area unchanged
        let squashed: Vec<f64> = scores.iter().map(|&s| (s * 0.7 + 1.0).exp()).collect();
        let curve2 = roc_curve(&squashed, &relevant, None).unwrap();
        prop_assert!((curve_area(&curve2) - area).abs() < 1e-12);
        let _ = scorer.num_items();
    }
}
