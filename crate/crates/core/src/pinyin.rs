//! Mandarin syllables and their initial/final/tone decomposition.
//!
//! A [`Syllable`] is numbered pinyin such as `gao4`. The [`SyllableTable`]
//! maps characters to their default reading and owns the initial and final
//! vocabularies used to split syllables into [`PinyinTriplet`]s.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of tones, neutral tone included (written as 5).
pub const TONE_COUNT: usize = 5;

/// The zero initial, as in `an1`.
pub const EMPTY_INITIAL: &str = "";

const BUILTIN_TABLE: &str = include_str!("../data/pinyin_table.tsv");
const BUILTIN_INITIALS: &str = include_str!("../data/initials.txt");
const BUILTIN_FINALS: &str = include_str!("../data/finals.txt");

/// Numbered pinyin: lowercase ASCII letters followed by one tone digit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Syllable(String);

impl Syllable {
    pub fn parse(text: &str) -> Result<Self> {
        let bytes = text.as_bytes();
        let malformed = || Error::MalformedSyllable(text.to_string());
        let (&last, letters) = bytes.split_last().ok_or_else(malformed)?;
        if !(b'1'..=b'5').contains(&last) {
            return Err(malformed());
        }
        if letters.is_empty() || !letters.iter().all(u8::is_ascii_lowercase) {
            return Err(malformed());
        }
        Ok(Syllable(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The romanization without the tone digit.
    pub fn letters(&self) -> &str {
        &self.0[..self.0.len() - 1]
    }

    pub fn tone(&self) -> u8 {
        self.0.as_bytes()[self.0.len() - 1] - b'0'
    }
}

impl FromStr for Syllable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Syllable::parse(s)
    }
}

impl TryFrom<String> for Syllable {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Syllable::parse(&s)
    }
}

impl From<Syllable> for String {
    fn from(s: Syllable) -> String {
        s.0
    }
}

impl fmt::Display for Syllable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Initial, final and tone of one syllable. The zero initial is the empty
/// string so that `initial + final + tone` spells the syllable back.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PinyinTriplet {
    pub initial: String,
    pub final_: String,
    pub tone: u8,
}

impl PinyinTriplet {
    pub fn new(initial: &str, final_: &str, tone: u8) -> Self {
        PinyinTriplet {
            initial: initial.to_string(),
            final_: final_.to_string(),
            tone,
        }
    }

    pub fn has_zero_initial(&self) -> bool {
        self.initial.is_empty()
    }

    pub fn recompose(&self) -> String {
        format!("{}{}{}", self.initial, self.final_, self.tone)
    }
}

impl fmt::Display for PinyinTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.initial, self.final_, self.tone)
    }
}

/// Class ids of a triplet in the three pronunciation heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletIds {
    pub initial: usize,
    pub final_: usize,
    pub tone: usize,
}

/// The initial and final vocabularies, and the class ids they induce in the
/// three fine-grained pronunciation heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PronUnits {
    initials: Vec<String>,
    finals: Vec<String>,
    initial_index: HashMap<String, usize>,
    final_index: HashMap<String, usize>,
}

impl PronUnits {
    pub fn new(initials: Vec<String>, finals: Vec<String>) -> Result<Self> {
        check_unique(&initials)?;
        check_unique(&finals)?;
        Ok(PronUnits {
            initial_index: initials.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            final_index: finals.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect(),
            initials,
            finals,
        })
    }

    pub fn initials(&self) -> &[String] {
        &self.initials
    }

    pub fn finals(&self) -> &[String] {
        &self.finals
    }

    pub fn is_final(&self, s: &str) -> bool {
        self.final_index.contains_key(s)
    }

    /// Initial head size: the vocabulary plus the zero-initial slot.
    pub fn initial_classes(&self) -> usize {
        self.initials.len() + 1
    }

    pub fn final_classes(&self) -> usize {
        self.finals.len()
    }

    /// Total pronunciation units across the three fine-grained heads.
    pub fn unit_count(&self) -> usize {
        self.initial_classes() + self.final_classes() + TONE_COUNT
    }

    /// Zero initial is class 0, vocabulary initials follow in file order.
    pub fn triplet_ids(&self, t: &PinyinTriplet) -> Option<TripletIds> {
        let initial = if t.has_zero_initial() {
            0
        } else {
            self.initial_index.get(&t.initial)? + 1
        };
        let final_ = *self.final_index.get(&t.final_)?;
        if !(1..=TONE_COUNT as u8).contains(&t.tone) {
            return None;
        }
        Some(TripletIds {
            initial,
            final_,
            tone: t.tone as usize - 1,
        })
    }

    /// Splits a syllable: the initial is the longest initial that prefixes
    /// the letters, the remainder must be a known final.
    pub fn decompose(&self, syllable: &Syllable) -> Result<PinyinTriplet> {
        let letters = syllable.letters();
        let initial = self
            .initials
            .iter()
            .filter(|i| letters.starts_with(i.as_str()))
            .max_by_key(|i| i.len())
            .map(String::as_str)
            .unwrap_or(EMPTY_INITIAL);
        let remainder = &letters[initial.len()..];
        if !self.is_final(remainder) {
            return Err(Error::UnknownSyllable {
                syllable: syllable.to_string(),
                remainder: remainder.to_string(),
            });
        }
        Ok(PinyinTriplet::new(initial, remainder, syllable.tone()))
    }
}

/// Character readings plus the initial and final vocabularies.
#[derive(Clone, Debug)]
pub struct SyllableTable {
    readings: BTreeMap<char, Syllable>,
    units: PronUnits,
    syllables: Vec<Syllable>,
    syllable_index: HashMap<Syllable, usize>,
}

impl SyllableTable {
    /// The table shipped with the crate: GB2312 characters with their
    /// default reading.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TABLE, BUILTIN_INITIALS, BUILTIN_FINALS)
            .expect("built-in pinyin table is valid")
    }

    /// Loads `pinyin_table.tsv`, `initials.txt` and `finals.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |name: &str| std::fs::read_to_string(dir.join(name));
        Self::parse(
            &read("pinyin_table.tsv")?,
            &read("initials.txt")?,
            &read("finals.txt")?,
        )
    }

    pub fn parse(table_tsv: &str, initials: &str, finals: &str) -> Result<Self> {
        let mut table = SyllableTable {
            readings: BTreeMap::new(),
            units: PronUnits::new(parse_vocab(initials), parse_vocab(finals))?,
            syllables: Vec::new(),
            syllable_index: HashMap::new(),
        };

        for (lineno, line) in table_tsv.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: "pinyin_table.tsv".into(),
                line: lineno + 1,
                msg,
            };
            let (ch, syl) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `char<TAB>syllable`".into()))?;
            let mut chars = ch.chars();
            let ch = match (chars.next(), chars.next()) {
                (Some(c), None) => c,
                _ => return Err(parse_err(format!("`{ch}` is not a single character"))),
            };
            let syl = Syllable::parse(syl.trim()).map_err(|e| parse_err(e.to_string()))?;
            table.decompose(&syl).map_err(|e| parse_err(e.to_string()))?;
            table.readings.insert(ch, syl);
        }

        let mut inventory: Vec<Syllable> = table.readings.values().cloned().collect();
        inventory.sort();
        inventory.dedup();
        table.syllable_index = inventory
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        table.syllables = inventory;
        Ok(table)
    }

    pub fn decompose(&self, syllable: &Syllable) -> Result<PinyinTriplet> {
        self.units.decompose(syllable)
    }

    pub fn reading(&self, ch: char) -> Option<&Syllable> {
        self.readings.get(&ch)
    }

    pub fn triplet_of(&self, ch: char) -> Result<PinyinTriplet> {
        let syl = self.reading(ch).ok_or(Error::MissingPinyin(ch))?;
        self.decompose(syl)
    }

    /// Characters with a reading, in code point order.
    pub fn characters(&self) -> impl Iterator<Item = char> + '_ {
        self.readings.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (char, &Syllable)> + '_ {
        self.readings.iter().map(|(c, s)| (*c, s))
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn units(&self) -> &PronUnits {
        &self.units
    }

    /// Distinct syllables used by the table, sorted. These are the classes
    /// of the coarse pronunciation head.
    pub fn syllables(&self) -> &[Syllable] {
        &self.syllables
    }

    pub fn syllable_id(&self, s: &Syllable) -> Option<usize> {
        self.syllable_index.get(s).copied()
    }
}

fn parse_vocab(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

fn check_unique(units: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for u in units {
        if !seen.insert(u) {
            return Err(Error::DuplicateVocab(u.clone()));
        }
    }
    Ok(())
}

pub fn decompose(s: &Syllable, table: &SyllableTable) -> Result<PinyinTriplet> {
    table.decompose(s)
}

/// How many of initial, final and tone agree (0..=3).
pub fn shared_components(a: &PinyinTriplet, b: &PinyinTriplet) -> u8 {
    (a.initial == b.initial) as u8 + (a.final_ == b.final_) as u8 + (a.tone == b.tone) as u8
}

/// Fraction of identical components: one of 0, 1/3, 2/3, 1.
pub fn fine_similarity(a: &PinyinTriplet, b: &PinyinTriplet) -> f64 {
    f64::from(shared_components(a, b)) / 3.0
}

/// Whole-syllable equality.
pub fn coarse_similarity(a: &Syllable, b: &Syllable) -> u8 {
    (a == b) as u8
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.chars().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != *cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - lev(a, b) / max(|a|, |b|)` over the full strings, tone digit included.
pub fn edit_weight(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

pub fn pinyin_edit_weight(a: &Syllable, b: &Syllable) -> f64 {
    edit_weight(a.as_str(), b.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syl(s: &str) -> Syllable {
        Syllable::parse(s).unwrap()
    }

    fn triplet(s: &str) -> PinyinTriplet {
        SyllableTable::builtin().decompose(&syl(s)).unwrap()
    }

    #[test]
    fn decomposes_examples() {
        assert_eq!(triplet("gao1"), PinyinTriplet::new("g", "ao", 1));
        assert_eq!(triplet("wan2"), PinyinTriplet::new("w", "an", 2));
        assert_eq!(triplet("an1"), PinyinTriplet::new(EMPTY_INITIAL, "an", 1));
        assert_eq!(triplet("shou1"), PinyinTriplet::new("sh", "ou", 1));
        assert_eq!(triplet("zhuang4"), PinyinTriplet::new("zh", "uang", 4));
        assert_eq!(triplet("lve4"), PinyinTriplet::new("l", "ve", 4));
        assert_eq!(triplet("er2"), PinyinTriplet::new("", "er", 2));
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["gaoX", "gao", "gao0", "gao6", "1", "", "Gao1", "gao12", "gāo1"] {
            assert!(
                matches!(Syllable::parse(bad), Err(Error::MalformedSyllable(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn rejects_unknown_final() {
        let table = SyllableTable::builtin();
        let err = table.decompose(&syl("gxq1")).unwrap_err();
        assert!(matches!(err, Error::UnknownSyllable { .. }));
        // greedy "n" leaves an empty remainder
        assert!(table.decompose(&syl("n2")).is_err());
    }

    #[test]
    fn table_lookup() {
        let table = SyllableTable::builtin();
        assert_eq!(table.reading('高').unwrap().as_str(), "gao1");
        assert_eq!(table.reading('完').unwrap().as_str(), "wan2");
        assert_eq!(table.reading('监').unwrap().as_str(), "jian1");
        assert!(table.reading('，').is_none());
        assert!(matches!(table.triplet_of('a'), Err(Error::MissingPinyin('a'))));
    }

    #[test]
    fn triplet_ids_cover_heads() {
        let table = SyllableTable::builtin();
        let units = table.units();
        for (_, s) in table.entries() {
            let ids = units.triplet_ids(&table.decompose(s).unwrap()).unwrap();
            assert!(ids.initial < units.initial_classes());
            assert!(ids.final_ < units.final_classes());
            assert!(ids.tone < TONE_COUNT);
        }
        assert_eq!(units.unit_count(), 24 + 35 + 5);
        let zero = units.triplet_ids(&triplet("an1")).unwrap();
        assert_eq!(zero.initial, 0);
    }

    #[test]
    fn duplicate_vocab_rejected() {
        let err = SyllableTable::parse("", "b\nb\n", "a\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateVocab(_)));
    }

    #[test]
    fn table_rejects_undecomposable_rows() {
        let err = SyllableTable::parse("高\tgao1\n", "g\n", "a\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(fine_similarity(&triplet("gao1"), &triplet("gao4")), 2.0 / 3.0);
        assert_eq!(fine_similarity(&triplet("shou1"), &triplet("zou3")), 1.0 / 3.0);
        assert_eq!(fine_similarity(&triplet("lan2"), &triplet("jian1")), 0.0);
        assert_eq!(fine_similarity(&triplet("wan2"), &triplet("wan2")), 1.0);
        assert_eq!(coarse_similarity(&syl("wan2"), &syl("wan2")), 1);
        assert_eq!(coarse_similarity(&syl("gao1"), &syl("gao4")), 0);
        assert_eq!(coarse_similarity(&syl("lan2"), &syl("jian1")), 0);
    }

    #[test]
    fn edit_weight_examples() {
        assert_eq!(pinyin_edit_weight(&syl("gao1"), &syl("gao1")), 1.0);
        assert_eq!(pinyin_edit_weight(&syl("gao1"), &syl("gao4")), 0.75);
        assert!((pinyin_edit_weight(&syl("lan2"), &syl("jian1")) - 0.4).abs() < 1e-15);
        assert_eq!(levenshtein("lan2", "jian1"), 3);
        assert_eq!(edit_weight("", "gao1"), 0.0);
    }
}
