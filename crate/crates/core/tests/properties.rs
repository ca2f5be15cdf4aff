use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neobert::checkpoint::Checkpoint;
use neobert::contrastive::{cosine_sim, dataset_mix_probs, info_nce};
use neobert::data::{pack_sequences, Corruptor, MaskMode, MaskingScheme, PackedBatch, IGNORE_INDEX};
use neobert::eval::retrieval_eval;
use neobert::model::{Encoder, ModelConfig};
use neobert::optim::lr_schedule;
use neobert::tokenizer::{Tokenizer, TokenizerMode, NUM_SPECIAL};
use neobert::train::{builtin_specials, encoder_checkpoint, load_encoder, TrainPlan};
use neobert::Tensor;

fn docs_strategy() -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(prop::collection::vec(NUM_SPECIAL..60u32, 1..20), 1..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rows, cols], scale, &mut rng);
        let s = x.softmax(1).unwrap();
        for r in 0..rows {
            let total: f64 = s.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(s.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn info_nce_shift_invariant_and_monotone(
        pos in -1.0f64..1.0,
        negs in prop::collection::vec(-1.0f64..1.0, 1..10),
        shift in -5.0f64..5.0,
        tau in 0.02f64..1.0,
        bump in 0.01f64..0.5,
    ) {
        let base = info_nce(pos, &negs, tau).unwrap();
        prop_assert!(base > 0.0);
        let moved: Vec<f64> = negs.iter().map(|s| s + shift).collect();
        let shifted = info_nce(pos + shift, &moved, tau).unwrap();
        prop_assert!((shifted - base).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(info_nce(pos + bump, &negs, tau).unwrap() < base);
        let hardest = (0..negs.len()).max_by(|&a, &b| negs[a].total_cmp(&negs[b])).unwrap();
        let mut harder = negs.clone();
        harder[hardest] += bump;
        prop_assert!(info_nce(pos, &harder, tau).unwrap() > base);
    }

    #[test]
    fn mix_probs_sum_to_one_and_ignore_scale(
        sizes in prop::collection::vec(1usize..10_000, 1..6),
        alpha in 0.0f64..2.0,
        k in 1usize..50,
    ) {
        let p = dataset_mix_probs(&sizes, alpha).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let scaled: Vec<usize> = sizes.iter().map(|s| s * k).collect();
        let q = dataset_mix_probs(&scaled, alpha).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let big = sizes.iter().enumerate().max_by_key(|(_, s)| **s).unwrap().0;
        prop_assert!(p.iter().all(|x| *x <= p[big] + 1e-15));
    }

    #[test]
    fn packing_keeps_every_document_intact(docs in docs_strategy(), max_len in 1usize..24) {
        for mode in [MaskMode::PackedBlockDiagonal, MaskMode::PackedNaive, MaskMode::Padded] {
            let b = PackedBatch::concat(&pack_sequences(&docs, max_len, mode, 0)).unwrap();
            for r in 0..b.n_rows() {
                prop_assert!(b.row_range(r).len() <= max_len);
            }
            let groups = b.documents();
            prop_assert_eq!(groups.len(), docs.len());
            let mut seen = vec![false; docs.len()];
            for g in &groups {
                let seq = b.seq_ids[g[0]] as usize;
                prop_assert!(!seen[seq]);
                seen[seq] = true;
                let want = &docs[seq][..docs[seq].len().min(max_len)];
                let got: Vec<u32> = g.iter().map(|&i| b.token_ids[i]).collect();
                prop_assert_eq!(&got[..], want);
                let pos: Vec<u32> = g.iter().map(|&i| b.positions[i]).collect();
                prop_assert_eq!(pos, (0..want.len() as u32).collect::<Vec<_>>());
            }
            let mask = b.attention_mask();
            prop_assert_eq!(mask.total_len(), b.len());
        }
    }

    #[test]
    fn corruption_touches_only_plain_tokens(
        tokens in prop::collection::vec(0u32..40, 1..200),
        rate in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let specials = builtin_specials();
        let c = Corruptor::new(rate, MaskingScheme::BERT, specials, 40).unwrap();
        let (inputs, labels) = c.corrupt(&tokens, &mut ChaCha8Rng::seed_from_u64(seed));
        for i in 0..tokens.len() {
            if specials.contains(tokens[i]) {
                prop_assert_eq!(labels[i], IGNORE_INDEX);
                prop_assert_eq!(inputs[i], tokens[i]);
            } else if labels[i] == IGNORE_INDEX {
                prop_assert_eq!(inputs[i], tokens[i]);
            } else {
                prop_assert_eq!(labels[i], tokens[i] as i32);
            }
        }
    }

    #[test]
    fn mrr_bounds_accuracy(n in 1usize..12, dim in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q: Vec<Vec<f32>> = (0..n).map(|_| Tensor::randn(&[dim], 1.0, &mut rng).into_data()).collect();
        let d: Vec<Vec<f32>> = (0..n).map(|_| Tensor::randn(&[dim], 1.0, &mut rng).into_data()).collect();
        let gold: Vec<usize> = (0..n).rev().collect();
        let s = retrieval_eval(&q, &d, &gold).unwrap();
        prop_assert!(s.mrr >= s.acc_at_1 - 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.acc_at_1) && s.mrr <= 1.0 && s.mrr >= 1.0 / n as f64 - 1e-12);
        prop_assert!(s.ranks.iter().all(|&r| (1..=n).contains(&r)));
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(
        u in prop::collection::vec(-3.0f32..3.0, 4),
        v in prop::collection::vec(-3.0f32..3.0, 4),
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let a = cosine_sim(&u, &v).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&a));
        prop_assert!((a - cosine_sim(&v, &u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_stays_in_range(step in 0u64..3_000_000) {
        let plan = TrainPlan::neobert();
        let lr = lr_schedule(step, plan.scheduled_steps(), &plan.schedule);
        prop_assert!((0.0..=plan.schedule.peak_lr).contains(&lr));
        if step >= plan.schedule.warmup_steps {
            prop_assert!(lr >= plan.schedule.floor_fraction * plan.schedule.peak_lr * (1.0 - 1e-12));
        }
    }

    #[test]
    fn whitespace_tokenizer_round_trips(words in prop::collection::vec("[a-z]{1,6}", 1..12)) {
        let text = words.join(" ");
        let tok = Tokenizer::build([text.as_str()], 1000, TokenizerMode::WhitespaceVocab).unwrap();
        prop_assert_eq!(tok.decode(&tok.encode(&text)), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn embeddings_have_unit_norm(docs in docs_strategy(), seed in 0u64..4) {
        let enc = Encoder::new(ModelConfig::toy(60), seed).unwrap();
        for e in enc.embed_sequences(&docs).unwrap() {
            let n: f64 = e.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encoder_checkpoint_round_trips(seed in any::<u64>()) {
        let enc = Encoder::new(ModelConfig::toy(32), seed).unwrap();
        let bytes = encoder_checkpoint(&enc).to_bytes();
        let back = load_encoder(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(back, enc);
    }
}
