//! Synthetic rare-word task: codebook acoustics with symbol-flip noise, a
//! sparse word grammar, and rare words that mostly live in text-only data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hat::Utterance;
use crate::mwer::nwe;
use crate::util::{read_jsonl, stable_hash, write_jsonl};

/// Acoustic symbol between word codes.
pub const SEPARATOR: u32 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub vocab_size: usize,
    pub rare_words: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub text_size: usize,
    /// Per-symbol flip probability.
    pub noise: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub code_len: usize,
    pub code_symbols: usize,
    /// Successors per word in the grammar.
    pub branching: usize,
    /// Most occurrences of any rare word in the paired training split.
    pub rare_paired_cap: usize,
    /// Chance of a rare word after its trigger, in the common distribution.
    pub rare_rate_common: f64,
    /// The same chance in the rare-rich distribution.
    pub rare_rate_rich: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            rare_words: 8,
            train_size: 600,
            dev_size: 100,
            test_size: 200,
            text_size: 5000,
            noise: 0.15,
            min_len: 3,
            max_len: 6,
            code_len: 3,
            code_symbols: 10,
            branching: 4,
            rare_paired_cap: 4,
            rare_rate_common: 0.05,
            rare_rate_rich: 0.6,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn acoustic_vocab(&self) -> usize {
        self.code_symbols + 1
    }

    pub fn validate(&self) -> Result<()> {
        let common = self.vocab_size.saturating_sub(self.rare_words);
        if self.rare_words == 0 || common < 2 * self.rare_words.max(1) || common < self.branching + 1 {
            return Err(Error::config(format!(
                "vocabulary of {} is too small for {} rare words",
                self.vocab_size, self.rare_words
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::config("noise rate must lie in [0, 1)"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config("sentence lengths must satisfy 1 <= min <= max"));
        }
        if self.code_len < 2 || self.code_symbols < 3 {
            return Err(Error::config("codes need at least 2 positions and 3 symbols"));
        }
        let space = (self.code_symbols as f64).powi(self.code_len as i32);
        if space < 4.0 * self.vocab_size as f64 * self.code_len as f64 {
            return Err(Error::config("code space too small for the vocabulary"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub words: Vec<u32>,
}

/// Everything `generate_task` draws from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    /// Acoustic code of every word, symbols in `1..=code_symbols`.
    pub codes: Vec<Vec<u32>>,
    pub rare: Vec<u32>,
    /// Common word whose code differs from the rare word's in one place.
    pub partners: Vec<u32>,
    /// Common word after which the rare word tends to follow.
    pub triggers: Vec<u32>,
    successors: Vec<Vec<(u32, f64)>>,
}

impl Lexicon {
    pub fn is_rare(&self, w: u32) -> bool {
        self.rare.contains(&w)
    }

    pub fn word_name(&self, w: u32) -> String {
        if self.is_rare(w) {
            format!("r{w:02}")
        } else {
            format!("w{w:02}")
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub config: TaskConfig,
    pub lexicon: Lexicon,
    pub train: Vec<Utterance>,
    pub dev_common: Vec<Utterance>,
    pub dev_rare: Vec<Utterance>,
    pub test_common: Vec<Utterance>,
    pub test_rare: Vec<Utterance>,
    pub text: Vec<TextRecord>,
}

fn hamming(a: &[u32], b: &[u32]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn random_code(rng: &mut ChaCha8Rng, c: &TaskConfig) -> Vec<u32> {
    (0..c.code_len)
        .map(|_| rng.gen_range(1..=c.code_symbols as u32))
        .collect()
}

fn build_lexicon(c: &TaskConfig, rng: &mut ChaCha8Rng) -> Result<Lexicon> {
    let common = c.vocab_size - c.rare_words;
    let mut codes: Vec<Vec<u32>> = Vec::with_capacity(c.vocab_size);
    let attempts = 100_000;
    for _ in 0..common {
        let code = (0..attempts)
            .map(|_| random_code(rng, c))
            .find(|k| codes.iter().all(|o| hamming(o, k) >= 2))
            .ok_or_else(|| Error::config("could not place common codes"))?;
        codes.push(code);
    }
    let mut pool: Vec<u32> = (0..common as u32).collect();
    pool.shuffle(rng);
    let partners: Vec<u32> = pool[..c.rare_words].to_vec();
    let triggers: Vec<u32> = pool[c.rare_words..2 * c.rare_words].to_vec();
    for &p in &partners {
        let base = codes[p as usize].clone();
        let code = (0..attempts)
            .map(|_| {
                let mut k = base.clone();
                let i = rng.gen_range(0..c.code_len);
                let mut s = rng.gen_range(1..=c.code_symbols as u32);
                while s == base[i] {
                    s = rng.gen_range(1..=c.code_symbols as u32);
                }
                k[i] = s;
                k
            })
            .find(|k| {
                codes
                    .iter()
                    .enumerate()
                    .all(|(w, o)| w == p as usize || hamming(o, k) >= 2)
            })
            .ok_or_else(|| Error::config("could not place rare-word codes"))?;
        codes.push(code);
    }
    let rare: Vec<u32> = (common as u32..c.vocab_size as u32).collect();
    let mut successors = Vec::with_capacity(common);
    for w in 0..common as u32 {
        let mut next: Vec<u32> = (0..common as u32).filter(|&x| x != w).collect();
        next.shuffle(rng);
        next.truncate(c.branching);
        let weights: Vec<f64> = (0..next.len()).map(|_| rng.gen_range(0.5..2.0)).collect();
        let z: f64 = weights.iter().sum();
        successors.push(next.into_iter().zip(weights.into_iter().map(|x| x / z)).collect());
    }
    Ok(Lexicon {
        codes,
        rare,
        partners,
        triggers,
        successors,
    })
}

fn pick(rng: &mut ChaCha8Rng, dist: &[(u32, f64)]) -> u32 {
    let mut x = rng.gen::<f64>();
    for &(w, p) in dist {
        if x < p {
            return w;
        }
        x -= p;
    }
    dist.last().expect("nonempty distribution").0
}

fn sentence(rng: &mut ChaCha8Rng, c: &TaskConfig, lex: &Lexicon, rare_rate: f64) -> Vec<u32> {
    let common = (c.vocab_size - c.rare_words) as u32;
    let len = rng.gen_range(c.min_len..=c.max_len);
    let mut out = Vec::with_capacity(len);
    // state word whose successors drive the next choice
    let mut state = rng.gen_range(0..common);
    out.push(state);
    while out.len() < len {
        let last = *out.last().expect("nonempty");
        if let Some(i) = lex.triggers.iter().position(|&t| t == last) {
            if rng.gen::<f64>() < rare_rate {
                out.push(lex.rare[i]);
                state = lex.partners[i];
                continue;
            }
        }
        state = pick(rng, &lex.successors[state as usize]);
        out.push(state);
    }
    out
}

/// Acoustic rendering of a word sequence with independent symbol flips.
pub fn render(rng: &mut ChaCha8Rng, c: &TaskConfig, lex: &Lexicon, words: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            out.push(SEPARATOR);
        }
        for &s in &lex.codes[w as usize] {
            if c.noise > 0.0 && rng.gen::<f64>() < c.noise {
                let mut t = rng.gen_range(1..=c.code_symbols as u32);
                while t == s {
                    t = rng.gen_range(1..=c.code_symbols as u32);
                }
                out.push(t);
            } else {
                out.push(s);
            }
        }
    }
    out
}

fn paired(
    rng: &mut ChaCha8Rng,
    c: &TaskConfig,
    lex: &Lexicon,
    prefix: &str,
    n: usize,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Vec<u32>,
) -> Vec<Utterance> {
    (0..n)
        .map(|i| {
            let words = draw(rng);
            Utterance {
                id: format!("{prefix}-{i:05}"),
                acoustics: render(rng, c, lex, &words),
                reference: words,
            }
        })
        .collect()
}

pub fn generate_task(config: &TaskConfig) -> Result<Task> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let lex = build_lexicon(c, &mut rng)?;

    let mut counts = vec![0usize; c.vocab_size];
    let train = paired(&mut rng, c, &lex, "train", c.train_size, |rng| loop {
        let s = sentence(rng, c, &lex, c.rare_rate_common);
        let mut next = counts.clone();
        for &w in &s {
            next[w as usize] += 1;
        }
        if lex.rare.iter().all(|&r| next[r as usize] <= c.rare_paired_cap) {
            counts = next;
            break s;
        }
    });
    let rich = |rng: &mut ChaCha8Rng| loop {
        let s = sentence(rng, c, &lex, c.rare_rate_rich);
        if s.iter().any(|&w| lex.is_rare(w)) {
            break s;
        }
    };
    let common = |rng: &mut ChaCha8Rng| sentence(rng, c, &lex, c.rare_rate_common);
    let dev_common = paired(&mut rng, c, &lex, "dev-common", c.dev_size, common);
    let dev_rare = paired(&mut rng, c, &lex, "dev-rare", c.dev_size, rich);
    let test_common = paired(&mut rng, c, &lex, "test-common", c.test_size, common);
    let test_rare = paired(&mut rng, c, &lex, "test-rare", c.test_size, rich);
    let text = (0..c.text_size)
        .map(|i| {
            let rate = if i % 2 == 0 {
                c.rare_rate_common
            } else {
                c.rare_rate_rich
            };
            TextRecord {
                id: format!("text-{i:06}"),
                words: sentence(&mut rng, c, &lex, rate),
            }
        })
        .collect();
    Ok(Task {
        config: c.clone(),
        lexicon: lex,
        train,
        dev_common,
        dev_rare,
        test_common,
        test_rare,
        text,
    })
}

impl Task {
    pub fn text_sentences(&self) -> Vec<Vec<u32>> {
        self.text.iter().map(|r| r.words.clone()).collect()
    }

    pub fn train_transcripts(&self) -> Vec<Vec<u32>> {
        self.train.iter().map(|u| u.reference.clone()).collect()
    }

    /// Split by name, as written to disk.
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev-common" => Some(&self.dev_common),
            "dev-rare" => Some(&self.dev_rare),
            "test-common" => Some(&self.test_common),
            "test-rare" => Some(&self.test_rare),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 5] = ["train", "dev-common", "dev-rare", "test-common", "test-rare"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: TaskConfig,
    pub config_hash: String,
    pub seed: u64,
    pub acoustic_vocab: usize,
    pub lexicon: Lexicon,
    pub words: Vec<String>,
    /// `(file, content hash)` for every corpus file.
    pub files: Vec<(String, String)>,
}

pub fn config_hash(config: &TaskConfig) -> String {
    stable_hash(&serde_json::to_vec(config).expect("config serializes"))
}

/// Writes every split, the text corpus and `manifest.json` under `dir`.
pub fn write_task(task: &Task, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for name in SPLITS {
        let file = format!("{name}.jsonl");
        let path = dir.join(&file);
        write_jsonl(&path, task.split(name).expect("known split"))?;
        files.push((file, stable_hash(&std::fs::read(&path)?)));
    }
    let path = dir.join("text.jsonl");
    write_jsonl(&path, &task.text)?;
    files.push(("text.jsonl".into(), stable_hash(&std::fs::read(&path)?)));
    let manifest = Manifest {
        format: "hatlm-task".into(),
        version: 1,
        config: task.config.clone(),
        config_hash: config_hash(&task.config),
        seed: task.config.seed,
        acoustic_vocab: task.config.acoustic_vocab(),
        lexicon: task.lexicon.clone(),
        words: (0..task.config.vocab_size as u32)
            .map(|w| task.lexicon.word_name(w))
            .collect(),
        files,
    };
    let mut f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    std::io::Write::write_all(&mut f, b"\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes =
        std::fs::read(&path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_split(dir: &Path, name: &str) -> Result<Vec<Utterance>> {
    read_jsonl(&dir.join(format!("{name}.jsonl")))
}

pub fn read_text(dir: &Path) -> Result<Vec<TextRecord>> {
    read_jsonl(&dir.join("text.jsonl"))
}

/// Corpus-level WER in percent: total edits over total reference words.
pub fn wer(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch {
            left: hypotheses.len(),
            right: references.len(),
        });
    }
    let words: usize = references.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::config("no reference words"));
    }
    let edits: usize = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| nwe(h, r))
        .sum();
    Ok(100.0 * edits as f64 / words as f64)
}
