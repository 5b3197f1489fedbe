use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pinyin::{PinyinTriplet, PronUnits, Syllable, SyllableTable, TripletIds};

/// Id 0 of the character and pinyin vocabularies: anything unknown.
pub const UNK_ID: usize = 0;

/// Placeholder printed for the unknown character id.
const UNK_CHAR: char = '\u{FFFD}';

/// Model-side vocabularies: characters, syllables, initials and finals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    chars: Vec<char>,
    char_index: HashMap<char, usize>,
    syllables: Vec<Syllable>,
    syllable_index: HashMap<Syllable, usize>,
    units: PronUnits,
}

/// Serialized form kept in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconData {
    /// Characters in id order, excluding the unknown slot.
    pub chars: String,
    pub syllables: Vec<Syllable>,
    pub initials: Vec<String>,
    pub finals: Vec<String>,
}

impl Lexicon {
    /// Character vocabulary from `chars` (deduplicated, sorted); syllable
    /// and unit vocabularies from `table`.
    pub fn new<I: IntoIterator<Item = char>>(chars: I, table: &SyllableTable) -> Self {
        let chars: BTreeSet<char> = chars.into_iter().collect();
        Self::from_data(LexiconData {
            chars: chars.into_iter().collect(),
            syllables: table.syllables().to_vec(),
            initials: table.units().initials().to_vec(),
            finals: table.units().finals().to_vec(),
        })
        .expect("table vocabularies are duplicate-free")
    }

    pub fn from_data(data: LexiconData) -> Result<Self> {
        let mut chars = vec![UNK_CHAR];
        let mut char_index = HashMap::new();
        for c in data.chars.chars() {
            if char_index.insert(c, chars.len()).is_some() {
                return Err(Error::DuplicateVocab(c.to_string()));
            }
            chars.push(c);
        }
        let mut syllable_index = HashMap::new();
        for (i, s) in data.syllables.iter().enumerate() {
            if syllable_index.insert(s.clone(), i).is_some() {
                return Err(Error::DuplicateVocab(s.to_string()));
            }
        }
        Ok(Lexicon {
            chars,
            char_index,
            syllables: data.syllables,
            syllable_index,
            units: PronUnits::new(data.initials, data.finals)?,
        })
    }

    pub fn to_data(&self) -> LexiconData {
        LexiconData {
            chars: self.chars[1..].iter().collect(),
            syllables: self.syllables.clone(),
            initials: self.units.initials().to_vec(),
            finals: self.units.finals().to_vec(),
        }
    }

    /// Vocabulary size including the unknown slot.
    pub fn char_count(&self) -> usize {
        self.chars.len()
    }

    pub fn char_id(&self, c: char) -> usize {
        self.char_index.get(&c).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, c: char) -> bool {
        self.char_index.contains_key(&c)
    }

    pub fn char_at(&self, id: usize) -> char {
        self.chars[id]
    }

    /// Size of the pinyin embedding table: syllables plus the unknown slot.
    pub fn pinyin_input_count(&self) -> usize {
        self.syllables.len() + 1
    }

    pub fn pinyin_input_id(&self, s: Option<&Syllable>) -> usize {
        s.and_then(|s| self.syllable_index.get(s))
            .map_or(UNK_ID, |i| i + 1)
    }

    /// Classes of the coarse pronunciation head.
    pub fn syllable_count(&self) -> usize {
        self.syllables.len()
    }

    pub fn syllable_class(&self, s: &Syllable) -> Option<usize> {
        self.syllable_index.get(s).copied()
    }

    pub fn units(&self) -> &PronUnits {
        &self.units
    }

    pub fn triplet_ids(&self, t: &PinyinTriplet) -> Option<TripletIds> {
        self.units.triplet_ids(t)
    }
}
