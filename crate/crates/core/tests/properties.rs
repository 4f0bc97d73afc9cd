use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use vpglab_core::corruption::{plan_corruption, read_plans_csv, selection_size, write_plans_csv, CorruptionVariant};
use vpglab_core::guidance::{compose_cfg_vpg, BranchLogits, GuidanceConfig, ReferenceMode};
use vpglab_core::model::{build_tabular, softmax, Condition, Corpus, LogitGrid, Predictor, TabularModel};
use vpglab_core::oracle::{self, kl_divergence, Target};
use vpglab_core::sampler::{
    read_trace_csv, rollout, rollout_distribution, truncated_distribution, write_trace_csv, SamplerConfig,
};
use vpglab_core::tokenizer::{Codebook, CodebookSpec, Decoder, ScaleSchedule, TokenMap, Tokenizer};

fn grid(v: usize, data: &[f64]) -> LogitGrid {
    LogitGrid::new(1, 1, data.len() / v, v, data.to_vec()).unwrap()
}

fn branches(v: usize, data: &[f64]) -> BranchLogits {
    let n = data.len() / 4;
    BranchLogits {
        cond_gen: grid(v, &data[..n]),
        null_gen: Some(grid(v, &data[n..2 * n])),
        cond_corr: Some(grid(v, &data[2 * n..3 * n])),
        null_corr: Some(grid(v, &data[3 * n..])),
    }
}

fn logits_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (2usize..6, 1usize..4).prop_flat_map(|(v, sites)| (Just(v), prop::collection::vec(-8.0f64..8.0, 4 * v * sites)))
}

fn small_model() -> impl Strategy<Value = TabularModel> {
    (2usize..4, 1usize..4, any::<u64>(), prop::bool::ANY).prop_map(|(v, c, seed, wide)| {
        let schedule = if wide { "1x1,1x2" } else { "1x1,1x1,1x1" };
        build_tabular(&ScaleSchedule::parse(schedule).unwrap(), v, c, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_is_invariant_to_per_site_shifts(
        (v, data) in logits_strategy(),
        shift in -50.0f64..50.0,
        gamma in 0.0f64..4.0,
        lambda in 0.0f64..4.0,
    ) {
        let base = compose_cfg_vpg(&branches(v, &data), gamma, lambda).unwrap();
        let shifted: Vec<f64> = data.iter().map(|x| x + shift).collect();
        let moved = compose_cfg_vpg(&branches(v, &shifted), gamma, lambda).unwrap();
        for s in 0..base.sites() {
            let (a, b) = (softmax(base.site(s)), softmax(moved.site(s)));
            for (x, y) in a.iter().zip(&b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn guidance_commutes_with_vocabulary_permutation(
        (v, data) in logits_strategy(),
        gamma in 0.0f64..4.0,
        lambda in 0.0f64..4.0,
        rotate in 0usize..5,
    ) {
        let perm = |x: &[f64]| -> Vec<f64> {
            x.chunks(v).flat_map(|site| {
                let mut s = site.to_vec();
                s.rotate_left(rotate % v);
                s
            }).collect()
        };
        let base = compose_cfg_vpg(&branches(v, &data), gamma, lambda).unwrap();
        let permuted = compose_cfg_vpg(&branches(v, &perm(&data)), gamma, lambda).unwrap();
        prop_assert_eq!(perm(&base.data), permuted.data);
    }

    #[test]
    fn tabular_rows_are_distributions(model in small_model()) {
        for c in 0..model.classes() as u32 {
            for k in 0..model.schedule().len() {
                for (prefix, _) in oracle::enumerate_prefixes(&model, Condition::Class(c), k).unwrap() {
                    let row = model.row(c, &prefix).unwrap();
                    for site in row.chunks(model.vocab()) {
                        assert_abs_diff_eq!(site.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                        prop_assert!(site.iter().all(|&p| p > 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn marginal_and_posterior_are_consistent(model in small_model(), pick in any::<u64>()) {
        let k = model.schedule().len() - 1;
        let c = Condition::Class((pick % model.classes() as u64) as u32);
        let marginal = oracle::prefix_marginal(&model, c, k).unwrap();
        assert_abs_diff_eq!(marginal.probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let (h, w) = model.schedule().dims(k);
        let ids = (0..h * w).map(|s| ((pick >> (8 * s)) % model.vocab() as u64) as u32).collect();
        let next = TokenMap::new(k, h, w, ids).unwrap();
        let posterior = oracle::prefix_posterior(&model, c, &next).unwrap();
        assert_abs_diff_eq!(posterior.iter().map(|(_, p)| p).sum::<f64>(), 1.0, epsilon = 1e-12);
        // Bayes: p(prefix | r, c) p(r | c) = p(prefix | c) p(r | prefix, c).
        let index = next.ids.iter().fold(0usize, |acc, &id| acc * model.vocab() + id as usize);
        let prior = oracle::enumerate_prefixes(&model, c, k).unwrap();
        for ((prefix, post), (same, p_prefix)) in posterior.iter().zip(&prior) {
            prop_assert_eq!(prefix, same);
            let cond = model.predict(c, prefix).unwrap().probs();
            let likelihood: f64 = next.ids.iter().enumerate().map(|(s, &id)| cond[s * model.vocab() + id as usize]).product();
            assert_abs_diff_eq!(post * marginal.probs[index], p_prefix * likelihood, epsilon = 1e-12);
        }
    }

    #[test]
    fn vpg_divergence_grows_with_lambda(model in small_model(), a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let k = model.schedule().len() - 1;
        let c = Condition::Class(0);
        for (prefix, _) in oracle::enumerate_prefixes(&model, c, k).unwrap().into_iter().take(4) {
            let base = oracle::augmented_vpg(&model, c, &prefix, 0.0, Target::Joint).unwrap();
            let at = |l| kl_divergence(&oracle::augmented_vpg(&model, c, &prefix, l, Target::Joint).unwrap().probs, &base.probs);
            prop_assert!(at(lo) <= at(hi) + 1e-12);
        }
    }

    #[test]
    fn truncation_yields_a_distribution_on_the_kept_head(
        logits in prop::collection::vec(-6.0f64..6.0, 1..12),
        temperature in 0.2f64..3.0,
        top_k in 1usize..12,
        top_p in 0.05f64..=1.0,
    ) {
        let config = SamplerConfig { temperature, top_k: Some(top_k), top_p, seed: 0 };
        let law = truncated_distribution(&logits, &config).unwrap();
        assert_abs_diff_eq!(law.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let support: Vec<usize> = (0..law.len()).filter(|&i| law[i] > 0.0).collect();
        prop_assert!(!support.is_empty() && support.len() <= top_k);
        // Every kept token is at least as likely as every dropped one.
        let kept_min = support.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        prop_assert!((0..law.len()).filter(|&i| law[i] == 0.0).all(|i| logits[i] <= kept_min));
    }

    #[test]
    fn selection_size_is_monotone_and_bounded(total in 0usize..200, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(selection_size(total, lo) <= selection_size(total, hi));
        prop_assert!(selection_size(total, hi) <= total);
        prop_assert_eq!(selection_size(total, 0.0), 0);
        prop_assert_eq!(selection_size(total, 1.0), total);
    }

    #[test]
    fn plans_round_trip_through_csv(seeds in prop::collection::vec(any::<u64>(), 1..4), fraction in 0.0f64..=1.0, v in 0usize..5) {
        let schedule = ScaleSchedule::parse("1x1,1x2,2x2,3x3").unwrap();
        let variant = CorruptionVariant::ALL[v];
        let plans: Vec<_> = seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| plan_corruption(&schedule, 1 + i % 3, fraction, variant, 4, seed).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_plans_csv(&mut buf, &plans).unwrap();
        prop_assert_eq!(read_plans_csv(buf.as_slice(), &schedule).unwrap(), plans);
    }
}

#[test]
fn rollout_law_sums_to_one_and_matches_empirical_frequencies() {
    let schedule = ScaleSchedule::parse("1x1,1x2").unwrap();
    let model = build_tabular(&schedule, 3, 2, 17).unwrap();
    let guidance = GuidanceConfig {
        cfg_scale: 0.5,
        vpg_scale: 1.0,
        reference: ReferenceMode::ExactMarginal,
        ..GuidanceConfig::default()
    };
    let sampler = SamplerConfig {
        top_k: Some(2),
        top_p: 0.9,
        ..SamplerConfig::default()
    };
    let law = rollout_distribution(&model, Condition::Class(1), &guidance, &sampler, None).unwrap();
    assert_abs_diff_eq!(law.total(), 1.0, epsilon = 1e-12);

    let book = Codebook::seeded(2, 3, 2, &CodebookSpec::default()).unwrap();
    let tokenizer = Tokenizer::new(schedule, book, Decoder::Identity).unwrap();
    let n = 6000;
    let mut counts = std::collections::BTreeMap::new();
    for seed in 0..n {
        let trace = rollout(
            &model,
            Condition::Class(1),
            &guidance,
            &SamplerConfig { seed, ..sampler.clone() },
            &tokenizer,
        )
        .unwrap();
        let seq: Vec<u32> = trace.maps().iter().flat_map(|m| m.ids.clone()).collect();
        *counts.entry(seq).or_insert(0usize) += 1;
    }
    for seq in counts.keys() {
        assert!(law.probability(seq) > 0.0, "sampled {seq:?} outside the law's support");
    }
    for (seq, &p) in &law.probs {
        let freq = counts.get(seq).copied().unwrap_or(0) as f64 / n as f64;
        // Five binomial standard errors.
        let bound = 5.0 * (p * (1.0 - p) / n as f64).sqrt() + 1e-3;
        assert!((freq - p).abs() < bound, "{seq:?}: empirical {freq} vs exact {p}");
    }
}

#[test]
fn traces_round_trip_through_csv() {
    let schedule = ScaleSchedule::parse("1x1,1x2,2x2").unwrap();
    let model = build_tabular(&schedule, 4, 2, 3).unwrap();
    let book = Codebook::seeded(3, 4, 2, &CodebookSpec::default()).unwrap();
    let tokenizer = Tokenizer::new(schedule.clone(), book, Decoder::Identity).unwrap();
    let guidance = GuidanceConfig {
        cfg_scale: 1.0,
        vpg_scale: 0.5,
        reference: ReferenceMode::ExactMarginal,
        ..GuidanceConfig::default()
    };
    let trace = rollout(&model, Condition::Class(0), &guidance, &SamplerConfig::default(), &tokenizer).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    write_trace_csv(std::fs::File::create(&path).unwrap(), &trace, true).unwrap();
    let back = read_trace_csv(std::fs::File::open(&path).unwrap(), &schedule).unwrap();
    assert_eq!(back.maps, trace.maps());
    for (a, s) in back.logits.iter().zip(&trace.steps) {
        assert!(a.data.iter().zip(&s.logits.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn corpus_round_trips_through_csv() {
    let schedule = ScaleSchedule::parse("1x1,2x2").unwrap();
    let book = Codebook::seeded(2, 5, 2, &CodebookSpec::default()).unwrap();
    let tokenizer = Tokenizer::new(schedule.clone(), book, Decoder::Identity).unwrap();
    let corpus = Corpus::synthetic(&tokenizer, 3, 30, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.csv");
    corpus.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    assert_eq!(Corpus::read_csv(std::fs::File::open(&path).unwrap(), &schedule).unwrap(), corpus);
}
