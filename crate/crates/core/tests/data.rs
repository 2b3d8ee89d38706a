use proptest::prelude::*;
use shrink::data::grammar::Language;
use shrink::data::{
    detokenize, sample_calibration, synth_cloze_set, synth_corpus, tokenize_bytes, total_variation, Corpus, Style,
};

#[test]
fn grammar_oracle_answers_every_cloze_item() {
    for style in [Style::A, Style::B] {
        let lang = Language::of(style);
        let id_of = |w: &str| lang.words.iter().position(|x| x == w.as_bytes()).unwrap();
        let items = synth_cloze_set(style, 2_000, 5).unwrap();
        let mut right = 0;
        for it in &items {
            let last = id_of(it.prefix.split_whitespace().last().unwrap());
            let fits = |c: &str| lang.successors[last].contains(&id_of(c.trim()));
            let pick = if fits(&it.cand0) && !fits(&it.cand1) { 0 } else { 1 };
            assert_ne!(fits(&it.cand0), fits(&it.cand1));
            right += (pick == it.label) as usize;
        }
        assert_eq!(right, items.len());
    }
}

#[test]
fn corpus_from_file_and_shift() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("text.txt");
    std::fs::write(&path, b"hello world").unwrap();
    let c = Corpus::from_file(&path).unwrap();
    assert_eq!(c.tokens.len(), 12);
    assert_eq!(detokenize(&c.tokens), b"hello world");
    std::fs::write(&path, b"").unwrap();
    assert!(Corpus::from_file(&path).is_err());
    assert!(Corpus::from_file(&dir.path().join("missing")).is_err());

    let a = synth_corpus(Style::A, 200_000, 9).unwrap();
    let b = synth_corpus(Style::B, 200_000, 9).unwrap();
    assert!(total_variation(&a.unigram(), &b.unigram()) >= 0.3);
    assert_eq!(total_variation(&a.unigram(), &a.unigram()), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenization_is_a_bijection_on_payload(bytes in prop::collection::vec(any::<u8>(), 0..2048)) {
        let t = tokenize_bytes(&bytes);
        prop_assert_eq!(t[0], 256);
        prop_assert_eq!(t.len(), bytes.len() + 1);
        prop_assert_eq!(detokenize(&t), bytes);
    }

    #[test]
    fn calibration_windows_are_distinct_and_seeded(n in 1usize..20, seed in any::<u64>()) {
        let c = synth_corpus(Style::B, 20 * 32 + 1, 1).unwrap();
        let w = sample_calibration(&c, n, 32, seed).unwrap();
        prop_assert_eq!(w.len(), n);
        prop_assert!(w.iter().all(|x| x.len() == 32));
        let mut uniq = w.clone();
        uniq.sort();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), n);
        prop_assert_eq!(&w, &sample_calibration(&c, n, 32, seed).unwrap());
    }

    #[test]
    fn synthetic_corpora_stay_in_vocab(n in 1usize..5_000, seed in any::<u64>()) {
        for style in [Style::A, Style::B] {
            let c = synth_corpus(style, n, seed).unwrap();
            prop_assert_eq!(c.len(), n);
            prop_assert!(c.tokens.iter().all(|&t| t < 258));
        }
    }
}
