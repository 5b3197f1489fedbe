//! Confusion sets, corruption of clean text into training pairs, and the
//! JSON-lines record format shared by every dataset file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SentenceRef;
use crate::pinyin::{PinyinTriplet, Syllable, SyllableTable};

/// Paragraphs longer than this are dropped (the encoder's default maximum).
pub const DEFAULT_MAX_PARAGRAPH: usize = 192;

/// Character -> characters it is easily mistaken for.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionSet {
    map: BTreeMap<char, Vec<char>>,
}

impl ConfusionSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `a <-> b`. Self pairs are ignored.
    pub fn insert_symmetric(&mut self, a: char, b: char) {
        self.insert_directed(a, b);
        self.insert_directed(b, a);
    }

    fn insert_directed(&mut self, from: char, to: char) {
        if from == to {
            return;
        }
        let set = self.map.entry(from).or_default();
        if let Err(pos) = set.binary_search(&to) {
            set.insert(pos, to);
        }
    }

    /// Sorted confusables of `ch`, empty when it has none.
    pub fn confusables(&self, ch: char) -> &[char] {
        self.map.get(&ch).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (char, &[char])> + '_ {
        self.map.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    /// Every (key, confusable) edge.
    pub fn pairs(&self) -> impl Iterator<Item = (char, char)> + '_ {
        self.iter().flat_map(|(a, bs)| bs.iter().map(move |&b| (a, b)))
    }

    /// Checks that every character is known to `table`.
    pub fn validate(&self, table: &SyllableTable) -> Result<()> {
        for (a, b) in self.pairs() {
            for c in [a, b] {
                if table.reading(c).is_none() {
                    return Err(Error::MissingPinyin(c));
                }
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (ch, set) in self.iter() {
            out.push(ch);
            out.push('\t');
            out.extend(set.iter());
            out.push('\n');
        }
        out
    }
}

/// Reads `char<TAB>confusables` lines into directed pairs.
pub fn parse_confusion_pairs(text: &str, source: &Path) -> Result<Vec<(char, char)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: source.to_path_buf(),
            line: lineno + 1,
            msg: "expected `char<TAB>confusables`".into(),
        })?;
        let mut key_chars = key.chars();
        let key = match (key_chars.next(), key_chars.next()) {
            (Some(c), None) => c,
            _ => {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("`{key}` is not a single character"),
                })
            }
        };
        pairs.extend(rest.trim().chars().map(|c| (key, c)));
    }
    Ok(pairs)
}

/// Loads and merges several confusion files into one pair list.
pub fn read_confusion_pairs<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<(char, char)>> {
    let mut pairs = Vec::new();
    for p in paths {
        let p = p.as_ref();
        pairs.extend(parse_confusion_pairs(&std::fs::read_to_string(p)?, p)?);
    }
    Ok(pairs)
}

pub fn char_frequencies<'a, I>(texts: I) -> HashMap<char, u64>
where
    I: IntoIterator<Item = &'a [char]>,
{
    let mut freq = HashMap::new();
    for text in texts {
        for &c in text {
            *freq.entry(c).or_insert(0) += 1;
        }
    }
    freq
}

/// Keeps the pairs whose two characters are both among the most frequent
/// `top_fraction` of corpus characters, and closes the result under symmetry.
///
/// The cutoff is the count of the character at rank `ceil(top_fraction * k)`
/// among the `k` characters seen; every character at or above that count is
/// kept, so ties at the boundary are included.
pub fn build_confusion_set(
    pairs: &[(char, char)],
    corpus_frequencies: &HashMap<char, u64>,
    top_fraction: f64,
) -> Result<ConfusionSet> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "top_fraction must be in (0, 1], got {top_fraction}"
        )));
    }
    let mut counts: Vec<u64> = corpus_frequencies.values().copied().filter(|&c| c > 0).collect();
    if counts.is_empty() {
        return Err(Error::Empty("corpus frequencies"));
    }
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let keep = ((top_fraction * counts.len() as f64).ceil() as usize).clamp(1, counts.len());
    let threshold = counts[keep - 1];
    let frequent = |c: char| corpus_frequencies.get(&c).is_some_and(|&n| n >= threshold && n > 0);

    let mut set = ConfusionSet::new();
    for &(a, b) in pairs {
        if a != b && frequent(a) && frequent(b) {
            set.insert_symmetric(a, b);
        }
    }
    if set.is_empty() {
        log::warn!("no confusion pair survived frequency filtering (top {top_fraction})");
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub select_rate: f64,
    pub confuse_p: f64,
    pub random_p: f64,
    pub keep_p: f64,
    pub freq_top_fraction: f64,
    pub max_paragraph: usize,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            select_rate: 0.15,
            confuse_p: 0.8,
            random_p: 0.1,
            keep_p: 0.1,
            freq_top_fraction: 0.4,
            max_paragraph: DEFAULT_MAX_PARAGRAPH,
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("select_rate", self.select_rate),
            ("confuse_p", self.confuse_p),
            ("random_p", self.random_p),
            ("keep_p", self.keep_p),
            ("freq_top_fraction", self.freq_top_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name}={p} is not a probability")));
            }
        }
        let sum = self.confuse_p + self.random_p + self.keep_p;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "confuse_p + random_p + keep_p = {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

/// What happened to one target character during corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    Unselected,
    Confused,
    /// Uniform vocabulary character; `fallback` when the confusion branch
    /// was drawn but the character had no confusables.
    Random { fallback: bool },
    Kept,
}

impl Corruption {
    pub fn is_selected(self) -> bool {
        self != Corruption::Unselected
    }
}

/// Aligned misspelled/correct sentences plus their pinyin.
///
/// Characters without a reading (punctuation, Latin letters, digits) carry
/// `None` pinyin and receive no pronunciation supervision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<char>,
    pub target: Vec<char>,
    pub source_pinyin: Vec<Option<Syllable>>,
    pub target_pinyin: Vec<Option<Syllable>>,
    pub target_triplets: Vec<Option<PinyinTriplet>>,
}

impl SentencePair {
    pub fn new(source: Vec<char>, target: Vec<char>, table: &SyllableTable) -> Result<Self> {
        let source_pinyin = source.iter().map(|&c| table.reading(c).cloned()).collect();
        let target_pinyin = target.iter().map(|&c| table.reading(c).cloned()).collect();
        Self::with_pinyin(source, target, source_pinyin, target_pinyin, table)
    }

    pub fn with_pinyin(
        source: Vec<char>,
        target: Vec<char>,
        source_pinyin: Vec<Option<Syllable>>,
        target_pinyin: Vec<Option<Syllable>>,
        table: &SyllableTable,
    ) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Empty("sentence pair"));
        }
        let n = source.len();
        for (what, len) in [
            ("target", target.len()),
            ("source_pinyin", source_pinyin.len()),
            ("target_pinyin", target_pinyin.len()),
        ] {
            if len != n {
                return Err(Error::LengthMismatch {
                    what,
                    left: n,
                    right: len,
                });
            }
        }
        let target_triplets = target_pinyin
            .iter()
            .map(|s| s.as_ref().map(|s| table.decompose(s)).transpose())
            .collect::<Result<_>>()?;
        Ok(SentencePair {
            source,
            target,
            source_pinyin,
            target_pinyin,
            target_triplets,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn source_ref(&self) -> SentenceRef<'_> {
        SentenceRef::new(&self.source, &self.source_pinyin)
    }

    pub fn target_ref(&self) -> SentenceRef<'_> {
        SentenceRef::new(&self.target, &self.target_pinyin)
    }

    pub fn error_positions(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.source[i] != self.target[i])
    }

    pub fn to_record(&self) -> PairRecord {
        PairRecord {
            source: self.source.iter().collect(),
            target: self.target.iter().collect(),
            source_pinyin: self.source_pinyin.clone(),
            target_pinyin: self.target_pinyin.clone(),
        }
    }

    /// Builds a pair from a file record. Pinyin arrays that are absent are
    /// filled in from the table.
    pub fn from_record(rec: PairRecord, table: &SyllableTable) -> Result<Self> {
        let source: Vec<char> = rec.source.chars().collect();
        let target: Vec<char> = rec.target.chars().collect();
        let fill = |given: Vec<Option<Syllable>>, chars: &[char]| {
            if given.is_empty() {
                chars.iter().map(|&c| table.reading(c).cloned()).collect()
            } else {
                given
            }
        };
        let source_pinyin = fill(rec.source_pinyin, &source);
        let target_pinyin = fill(rec.target_pinyin, &target);
        Self::with_pinyin(source, target, source_pinyin, target_pinyin, table)
    }
}

/// One line of a dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: String,
    pub target: String,
    #[serde(default)]
    pub source_pinyin: Vec<Option<Syllable>>,
    #[serde(default)]
    pub target_pinyin: Vec<Option<Syllable>>,
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[SentencePair]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for pair in pairs {
        serde_json::to_writer(&mut out, &pair.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path, table: &SyllableTable) -> Result<Vec<SentencePair>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        pairs.push(SentencePair::from_record(rec, table).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(pairs)
}

/// Splits article text into paragraphs, one per non-blank line, trimmed.
/// Paragraphs shorter than 2 or longer than `max_len` characters are dropped.
pub fn split_paragraphs(article_text: &str, max_len: usize) -> Vec<Vec<char>> {
    article_text
        .lines()
        .map(|l| l.trim().chars().collect::<Vec<char>>())
        .filter(|p| p.len() >= 2 && p.len() <= max_len)
        .collect()
}

/// Reads every regular file under `dir` (sorted by path) and splits it into
/// paragraphs.
pub fn read_corpus_dir(dir: &Path, max_len: usize) -> Result<Vec<Vec<char>>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.sort();
    let mut paragraphs = Vec::new();
    for f in files {
        paragraphs.extend(split_paragraphs(&std::fs::read_to_string(&f)?, max_len));
    }
    Ok(paragraphs)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Turns clean paragraphs into misspelled/correct pairs.
pub struct Synthesizer<'a> {
    confusion: &'a ConfusionSet,
    config: SynthesisConfig,
    vocab: Vec<char>,
    table: &'a SyllableTable,
}

impl<'a> Synthesizer<'a> {
    /// The random branch draws from the characters of `table`.
    pub fn new(
        confusion: &'a ConfusionSet,
        config: SynthesisConfig,
        table: &'a SyllableTable,
    ) -> Result<Self> {
        config.validate()?;
        let vocab: Vec<char> = table.characters().collect();
        if vocab.is_empty() {
            return Err(Error::Empty("replacement vocabulary"));
        }
        Ok(Synthesizer {
            confusion,
            config,
            vocab,
            table,
        })
    }

    pub fn config(&self) -> &SynthesisConfig {
        &self.config
    }

    /// Corrupts `target` character by character. Returns the new source and
    /// what happened at each position.
    pub fn corrupt<R: Rng + ?Sized>(&self, target: &[char], rng: &mut R) -> (Vec<char>, Vec<Corruption>) {
        let cfg = &self.config;
        let mut source = Vec::with_capacity(target.len());
        let mut outcomes = Vec::with_capacity(target.len());
        for &ch in target {
            if rng.gen::<f64>() >= cfg.select_rate {
                source.push(ch);
                outcomes.push(Corruption::Unselected);
                continue;
            }
            let branch = rng.gen::<f64>();
            let (out, what) = if branch < cfg.confuse_p {
                let confusables = self.confusion.confusables(ch);
                if confusables.is_empty() {
                    (self.random_char(rng), Corruption::Random { fallback: true })
                } else {
                    (confusables[rng.gen_range(0..confusables.len())], Corruption::Confused)
                }
            } else if branch < cfg.confuse_p + cfg.random_p {
                (self.random_char(rng), Corruption::Random { fallback: false })
            } else {
                (ch, Corruption::Kept)
            };
            source.push(out);
            outcomes.push(what);
        }
        (source, outcomes)
    }

    fn random_char<R: Rng + ?Sized>(&self, rng: &mut R) -> char {
        self.vocab[rng.gen_range(0..self.vocab.len())]
    }

    pub fn synthesize_pair<R: Rng + ?Sized>(&self, target: &[char], rng: &mut R) -> Result<SentencePair> {
        if target.is_empty() {
            return Err(Error::Empty("target sentence"));
        }
        let (source, _) = self.corrupt(target, rng);
        SentencePair::new(source, target.to_vec(), self.table)
    }

    /// Synthesizes all paragraphs in parallel. Paragraph `i` uses its own
    /// stream `i` of a generator seeded with `rng_seed`, so the output does
    /// not depend on scheduling.
    pub fn synthesize_corpus(&self, paragraphs: &[Vec<char>]) -> Result<Vec<SentencePair>> {
        paragraphs
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut rng = paragraph_rng(self.config.rng_seed, i as u64);
                self.synthesize_pair(p, &mut rng)
            })
            .collect()
    }
}

pub fn paragraph_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Characters seen in `pairs`, deduplicated and sorted.
pub fn characters_of(pairs: &[SentencePair]) -> BTreeSet<char> {
    pairs
        .iter()
        .flat_map(|p| p.source.iter().chain(p.target.iter()).copied())
        .collect()
}
