use forumlm::bpe::{train_bpe, TokenId, Vocabulary, RECORD_TOKEN};
use forumlm::decode::{blocked_tokens, generate, top_k_renormalize, DecodeConfig};
use forumlm::exec::Execution;
use forumlm::lm::{train_ngram, LanguageModel, NGramModel};
use proptest::prelude::*;

fn trained_vocab() -> Vocabulary {
    let corpus = [
        "hej hej hallå, vad gör ni?",
        "jag gör ingenting alls idag",
        "ni gör väl något ändå",
        "ååå äää ööö åäö",
    ];
    train_bpe(&corpus, 320, Execution::Sequential).unwrap().vocab
}

/// Applies merges one at a time in rank order, each left to right.
fn merge_by_rank(vocab: &Vocabulary, text: &str) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
    for (rank, &(a, b)) in vocab.merges().iter().enumerate() {
        let new = 257 + rank as TokenId;
        let mut out = Vec::with_capacity(ids.len());
        let mut i = 0;
        while i < ids.len() {
            if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                out.push(new);
                i += 2;
            } else {
                out.push(ids[i]);
                i += 1;
            }
        }
        ids = out;
    }
    ids
}

fn byte_records() -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(97u32..102, 1..30), 1..6)
}

fn greedy(model: &NGramModel, context: &[TokenId], max_new: usize) -> Vec<TokenId> {
    let mut history = context.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new {
        let t = model.next_token_distribution(&history).argmax().unwrap();
        out.push(t);
        history.push(t);
        if t == RECORD_TOKEN {
            break;
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn bpe_round_trip(text in "\\PC{0,80}") {
        let vocab = trained_vocab();
        let ids = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text.clone());
        prop_assert!(ids.len() <= text.len());
    }

    #[test]
    fn bpe_encode_matches_rank_order_merging(text in "[hejåäö gnidla,]{0,60}") {
        let vocab = trained_vocab();
        prop_assert_eq!(vocab.encode(&text), merge_by_rank(&vocab, &text));
    }

    #[test]
    fn distributions_normalize(records in byte_records(), ctx in prop::collection::vec(97u32..103, 0..6)) {
        let model = train_ngram(&records, 257, 3, 0.1, Some(RECORD_TOKEN)).unwrap();
        let d = model.next_token_distribution(&ctx);
        prop_assert!((d.total() - 1.0).abs() < 1e-9);
        prop_assert!(d.entries().iter().all(|&(_, p)| p > 0.0));
    }

    #[test]
    fn chain_rule(records in byte_records(), seq in prop::collection::vec(97u32..102, 1..8)) {
        let model = train_ngram(&records, 257, 3, 0.5, None).unwrap();
        let product: f64 = (0..seq.len()).map(|i| model.prob(&seq[..i], seq[i])).product();
        let lp = model.sequence_log_prob(&seq).unwrap();
        prop_assert!((lp.exp() - product).abs() <= 1e-9 * product);
    }

    #[test]
    fn top_k_keeps_the_k_largest(records in byte_records(), k in 1usize..10) {
        let model = train_ngram(&records, 257, 2, 0.1, None).unwrap();
        let d = model.next_token_distribution(&[97]);
        let kept = top_k_renormalize(&d, k);
        prop_assert_eq!(kept.support_len(), k.min(d.support_len()));
        let floor = kept.entries().iter().map(|&(t, _)| d.prob(t)).fold(f64::INFINITY, f64::min);
        let above = d.entries().iter().filter(|&&(_, p)| p > floor).count();
        prop_assert!(above < k);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generations_obey_constraints(records in byte_records(), seed in any::<u64>()) {
        let vocab = Vocabulary::byte_level();
        let model = train_ngram(&records, vocab.size(), 3, 0.05, Some(RECORD_TOKEN)).unwrap();
        let context: Vec<TokenId> = vec![97, 98, 99];
        let config = DecodeConfig {
            beam_size: 3,
            top_k: 8,
            max_new_tokens: 25,
            banned_sequences: vec![vec![97, 97], vec![100]],
            rng_seed: seed,
            ..DecodeConfig::default()
        };
        let Ok(out) = generate(&model, &vocab, &context, &config) else { return Ok(()); };
        let full: Vec<TokenId> = context.iter().chain(&out.tokens).copied().collect();
        let mut seen = std::collections::HashSet::new();
        for w in full.windows(3) {
            prop_assert!(seen.insert(w.to_vec()), "repeated 3-gram {:?}", w);
        }
        prop_assert!(!out.tokens.contains(&100));
        prop_assert!(!out.tokens.windows(2).any(|w| w == [97, 97]));
        for i in 0..out.tokens.len() {
            prop_assert!(!blocked_tokens(&context, &out.tokens[..i], &config).contains(&out.tokens[i]));
        }
        let again = generate(&model, &vocab, &context, &config).unwrap();
        prop_assert_eq!(out.tokens, again.tokens);
        prop_assert_eq!(out.text, again.text);
    }

    #[test]
    fn beam_one_top_one_is_greedy(records in byte_records(), ctx in prop::collection::vec(97u32..102, 1..5)) {
        let vocab = Vocabulary::byte_level();
        let model = train_ngram(&records, vocab.size(), 3, 0.1, Some(RECORD_TOKEN)).unwrap();
        let config = DecodeConfig {
            beam_size: 1,
            top_k: 1,
            no_repeat_ngram: 0,
            max_new_tokens: 30,
            stop_at_post_header: false,
            ..DecodeConfig::default()
        };
        let out = generate(&model, &vocab, &ctx, &config).unwrap();
        prop_assert_eq!(out.tokens, greedy(&model, &ctx, 30));
    }
}
