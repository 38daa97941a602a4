use std::collections::HashMap;

use hatlm::data::*;
use hatlm::lm::{LanguageModel, NGramLm, Smoothing};

fn small(seed: u64) -> TaskConfig {
    TaskConfig {
        train_size: 200,
        dev_size: 30,
        test_size: 30,
        text_size: 1000,
        seed,
        ..TaskConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_corpora() {
    let a = generate_task(&small(5)).unwrap();
    let b = generate_task(&small(5)).unwrap();
    assert_eq!(a, b);
    let c = generate_task(&small(6)).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn rare_words_are_capped_in_paired_training_data() {
    for seed in 0..3 {
        let t = generate_task(&TaskConfig {
            seed,
            ..TaskConfig::default()
        })
        .unwrap();
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for u in &t.train {
            for &w in &u.reference {
                *counts.entry(w).or_default() += 1;
            }
        }
        for r in &t.lexicon.rare {
            assert!(counts.get(r).copied().unwrap_or(0) <= 4, "rare word {r} seen {counts:?}");
        }
        let rich: usize = t.text.iter().flat_map(|r| &r.words).filter(|w| t.lexicon.is_rare(**w)).count();
        assert!(rich > 100, "text-only corpus should carry rare words, got {rich}");
        for u in &t.test_rare {
            assert!(u.reference.iter().any(|w| t.lexicon.is_rare(*w)));
        }
    }
}

#[test]
fn noiseless_acoustics_decode_by_table_lookup() {
    let t = generate_task(&TaskConfig { noise: 0.0, ..small(3) }).unwrap();
    let table: HashMap<&[u32], u32> = t
        .lexicon
        .codes
        .iter()
        .enumerate()
        .map(|(w, c)| (c.as_slice(), w as u32))
        .collect();
    assert_eq!(table.len(), t.config.vocab_size, "codes must be distinct");
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for u in t.train.iter().chain(&t.test_rare) {
        let words: Vec<u32> = u
            .acoustics
            .split(|s| *s == SEPARATOR)
            .map(|code| table[code])
            .collect();
        hyps.push(words);
        refs.push(u.reference.clone());
    }
    assert_eq!(wer(&hyps, &refs).unwrap(), 0.0);
}

#[test]
fn noise_flips_symbols_at_the_configured_rate() {
    let t = generate_task(&TaskConfig { noise: 0.3, ..small(4) }).unwrap();
    let (mut flips, mut total) = (0usize, 0usize);
    for u in &t.train {
        let clean: Vec<u32> = u
            .reference
            .iter()
            .map(|&w| t.lexicon.codes[w as usize].clone())
            .collect::<Vec<_>>()
            .join(&SEPARATOR);
        assert_eq!(clean.len(), u.acoustics.len());
        for (a, b) in clean.iter().zip(&u.acoustics) {
            if *a != SEPARATOR {
                total += 1;
                flips += usize::from(a != b);
            }
        }
    }
    let rate = flips as f64 / total as f64;
    assert!((rate - 0.3).abs() < 0.03, "{rate}");
}

#[test]
fn manifest_regenerates_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let t = generate_task(&small(8)).unwrap();
    let m = write_task(&t, dir.path()).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(m, back);
    assert_eq!(back.seed, 8);
    let again = tempfile::tempdir().unwrap();
    write_task(&generate_task(&back.config).unwrap(), again.path()).unwrap();
    for f in std::fs::read_dir(dir.path()).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(
            std::fs::read(dir.path().join(&name)).unwrap(),
            std::fs::read(again.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    for s in SPLITS {
        assert_eq!(read_split(dir.path(), s).unwrap(), t.split(s).unwrap());
    }
    assert_eq!(read_text(dir.path()).unwrap(), t.text);
}

#[test]
fn invalid_configs_are_rejected() {
    let too_small = TaskConfig {
        vocab_size: 10,
        rare_words: 8,
        ..TaskConfig::default()
    };
    assert!(generate_task(&too_small).is_err());
    assert!(generate_task(&TaskConfig { noise: 1.0, ..TaskConfig::default() }).is_err());
}

#[test]
fn text_only_lm_prefers_rare_word_sentences() {
    for seed in 0..2 {
        let t = generate_task(&TaskConfig {
            seed,
            ..TaskConfig::default()
        })
        .unwrap();
        let v = t.config.vocab_size;
        let text = NGramLm::train(&t.text_sentences(), v, 3, Smoothing::default(), false, true).unwrap();
        let paired = NGramLm::train(&t.train_transcripts(), v, 3, Smoothing::default(), false, true).unwrap();
        let avg = |lm: &NGramLm| {
            let total: f64 = t.test_rare.iter().map(|u| lm.score_tokens(&u.reference, false).total).sum();
            total / t.test_rare.len() as f64
        };
        assert!(avg(&text) > avg(&paired), "seed {seed}: {} vs {}", avg(&text), avg(&paired));
    }
}

#[test]
fn corpus_wer_differs_from_mean_of_rates() {
    let refs = vec![vec![1], vec![1, 2, 3, 4, 5, 6, 7, 8, 9]];
    let hyps = vec![vec![2], vec![1, 2, 3, 4, 5, 6, 7, 8, 9]];
    // one edit over ten words; the per-utterance rates would average to 50%
    assert!((wer(&hyps, &refs).unwrap() - 10.0).abs() < 1e-12);
    let refs = vec![vec![1, 2, 3], vec![4, 5, 6, 7]];
    let hyps = vec![vec![1, 2], vec![4, 9, 6]];
    assert!((wer(&hyps, &refs).unwrap() - 100.0 * 3.0 / 7.0).abs() < 1e-12);
}
