use proptest::prelude::*;

use textgnn::tokenize::{trigram_hash, Vocabulary, PAD};

const WORDS: [&str; 10] = ["usps", "com", "careers", "login", "postal", "service", "jobs", "free", "games", "online"];

fn vocab(max_seq_len: usize) -> Vocabulary {
    Vocabulary::build(WORDS, 1, 100, max_seq_len).unwrap()
}

fn in_vocab_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS.to_vec()), 0..8).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn retokenizing_detokenized_text_is_stable(text in in_vocab_text(), special: bool, len in 2usize..12) {
        let v = vocab(len);
        let seq = v.tokenize(&text, special);
        let again = v.tokenize(&v.detokenize(&seq), special);
        prop_assert_eq!(seq, again);
    }

    #[test]
    fn sequences_are_padded_to_length(text in "[a-z ]{0,40}", special: bool, len in 2usize..12) {
        let seq = vocab(len).tokenize(&text, special);
        prop_assert_eq!(seq.ids.len(), len);
        prop_assert_eq!(seq.attention_mask.len(), len);
        let real = seq.real_len();
        prop_assert!(seq.attention_mask[..real].iter().all(|&m| m));
        for (i, (&id, &m)) in seq.ids.iter().zip(&seq.attention_mask).enumerate() {
            if !m {
                prop_assert!(i >= real);
                prop_assert_eq!(id, PAD);
            }
        }
    }

    #[test]
    fn trigram_counts_match_word_lengths(text in "[a-z]{1,6}( [a-z]{1,6}){0,3}", buckets in 1usize..500) {
        // "#word#" has len(word) trigrams
        let expected: usize = text.split(' ').map(|w| w.chars().count()).sum();
        let total: f64 = trigram_hash(&text, buckets).iter().map(|&(_, c)| c as f64).sum();
        prop_assert_eq!(total as usize, expected);
        prop_assert_eq!(trigram_hash(&text, buckets), trigram_hash(&text, buckets));
    }
}
