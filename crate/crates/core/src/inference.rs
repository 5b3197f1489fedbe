//! Greedy correction, constrained iterative correction and the 的/地/得
//! post-processing rule.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, SentenceRef, UNK_ID};
use crate::pinyin::{Syllable, SyllableTable};

/// A single-pass corrector: same length in, same length out.
pub trait Corrector: Sync {
    fn correct_once(&self, sentence: &[char]) -> Result<Vec<char>>;
}

/// Argmax of the character decoder at every position. Pinyin is looked up
/// from `table` each time, so a chained pass sees the edited readings.
pub struct ModelCorrector<'a> {
    pub model: &'a Model,
    pub table: &'a SyllableTable,
}

impl<'a> ModelCorrector<'a> {
    pub fn new(model: &'a Model, table: &'a SyllableTable) -> Self {
        ModelCorrector { model, table }
    }

    fn pinyin(&self, sentence: &[char]) -> Vec<Option<Syllable>> {
        sentence.iter().map(|&c| self.table.reading(c).cloned()).collect()
    }
}

impl Corrector for ModelCorrector<'_> {
    /// Out-of-vocabulary input characters and unknown predictions leave the
    /// position unchanged.
    fn correct_once(&self, sentence: &[char]) -> Result<Vec<char>> {
        if sentence.is_empty() {
            return Ok(Vec::new());
        }
        let pinyin = self.pinyin(sentence);
        let input = self.model.pack([SentenceRef::new(sentence, &pinyin)])?;
        let lex = self.model.lexicon();
        Ok(self
            .model
            .predict_ids(&input)
            .into_iter()
            .zip(sentence)
            .map(|(id, &c)| {
                if id == UNK_ID || !lex.contains(c) {
                    c
                } else {
                    lex.char_at(id)
                }
            })
            .collect())
    }
}

/// One greedy pass.
pub fn greedy_correct(corrector: &dyn Corrector, sentence: &[char]) -> Result<Vec<char>> {
    let out = corrector.correct_once(sentence)?;
    check_len(sentence, &out)?;
    Ok(out)
}

fn check_len(a: &[char], b: &[char]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            what: "input vs corrected",
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CICConfig {
    pub iterations: usize,
    /// Odd; an edit at `q` admits positions `q - window/2 ..= q + window/2`
    /// in the next round.
    pub window: usize,
}

impl Default for CICConfig {
    fn default() -> Self {
        CICConfig {
            iterations: 2,
            window: 3,
        }
    }
}

impl CICConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("window must be odd and positive, got {}", self.window)));
        }
        Ok(())
    }

    fn radius(&self) -> usize {
        (self.window - 1) / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub position: usize,
    pub previous: char,
    pub new: char,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    /// Accepted edits of each round, in position order.
    pub iterations: Vec<Vec<Edit>>,
    pub final_output: String,
    pub reverted_positions: BTreeSet<usize>,
}

impl CorrectionTrace {
    pub fn edited_positions(&self, round: usize) -> BTreeSet<usize> {
        self.iterations
            .get(round)
            .map(|edits| edits.iter().map(|e| e.position).collect())
            .unwrap_or_default()
    }
}

/// Round 1 edits freely. Round `t > 1` re-runs the corrector on the
/// round-`t-1` output and keeps an edit at `p` only if some position edited
/// in round `t-1` lies within the window. With two or more rounds, a
/// position that changed in every round goes back to its input character.
pub fn iterative_correct(
    corrector: &dyn Corrector,
    sentence: &[char],
    cfg: &CICConfig,
) -> Result<(Vec<char>, CorrectionTrace)> {
    cfg.validate()?;
    let radius = cfg.radius();
    let mut current = sentence.to_vec();
    let mut trace = CorrectionTrace::default();
    let mut previous_edits: Option<BTreeSet<usize>> = None;

    for _ in 0..cfg.iterations {
        if previous_edits.as_ref().is_some_and(BTreeSet::is_empty) {
            trace.iterations.push(Vec::new());
            continue;
        }
        let proposal = greedy_correct(corrector, &current)?;
        let mut edits = Vec::new();
        for (p, (&old, &new)) in current.iter().zip(&proposal).enumerate() {
            if old == new {
                continue;
            }
            let allowed = match &previous_edits {
                None => true,
                Some(prev) => prev.range(p.saturating_sub(radius)..=p + radius).next().is_some(),
            };
            if allowed {
                edits.push(Edit {
                    position: p,
                    previous: old,
                    new,
                });
            }
        }
        for e in &edits {
            current[e.position] = e.new;
        }
        previous_edits = Some(edits.iter().map(|e| e.position).collect());
        trace.iterations.push(edits);
    }

    if cfg.iterations >= 2 {
        let mut every = trace.edited_positions(0);
        for round in 1..trace.iterations.len() {
            let edited = trace.edited_positions(round);
            every.retain(|p| edited.contains(p));
        }
        for &p in &every {
            current[p] = sentence[p];
        }
        trace.reverted_positions = every;
    }
    trace.final_output = current.iter().collect();
    Ok((current, trace))
}

/// Corrects many sentences in parallel.
pub fn correct_all(
    corrector: &dyn Corrector,
    sentences: &[Vec<char>],
    cfg: &CICConfig,
) -> Result<Vec<(Vec<char>, CorrectionTrace)>> {
    sentences
        .par_iter()
        .map(|s| iterative_correct(corrector, s, cfg))
        .collect()
}

const DE_CHARS: [char; 3] = ['的', '地', '得'];

/// Undoes every edit that touches 的, 地 or 得 on either side.
pub fn sighan13_postprocess(source: &[char], prediction: &[char]) -> Result<Vec<char>> {
    if source.len() != prediction.len() {
        return Err(Error::LengthMismatch {
            what: "source vs prediction",
            left: source.len(),
            right: prediction.len(),
        });
    }
    Ok(source
        .iter()
        .zip(prediction)
        .map(|(&s, &p)| {
            if s != p && (DE_CHARS.contains(&s) || DE_CHARS.contains(&p)) {
                s
            } else {
                p
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// 秃 becomes 涂 anywhere; 户 becomes 糊 only right before 涂.
    struct Staged;

    impl Corrector for Staged {
        fn correct_once(&self, s: &[char]) -> Result<Vec<char>> {
            Ok((0..s.len())
                .map(|i| match s[i] {
                    '秃' => '涂',
                    '户' if s.get(i + 1) == Some(&'涂') => '糊',
                    c => c,
                })
                .collect())
        }
    }

    /// Swaps 他 and 她 on every pass.
    struct Oscillating;

    impl Corrector for Oscillating {
        fn correct_once(&self, s: &[char]) -> Result<Vec<char>> {
            Ok(s.iter()
                .map(|&c| match c {
                    '他' => '她',
                    '她' => '他',
                    '撤' => '沉',
                    c => c,
                })
                .collect())
        }
    }

    struct Identity;

    impl Corrector for Identity {
        fn correct_once(&self, s: &[char]) -> Result<Vec<char>> {
            Ok(s.to_vec())
        }
    }

    #[test]
    fn consecutive_errors_need_two_rounds() {
        let src = chars("我真户秃");
        let (one, _) = iterative_correct(&Staged, &src, &CICConfig { iterations: 1, window: 3 }).unwrap();
        assert_eq!(one, chars("我真户涂"));
        let (two, trace) = iterative_correct(&Staged, &src, &CICConfig::default()).unwrap();
        assert_eq!(two, chars("我真糊涂"));
        assert_eq!(trace.edited_positions(0), BTreeSet::from([3]));
        assert_eq!(trace.edited_positions(1), BTreeSet::from([2]));
        assert!(trace.reverted_positions.is_empty());
        assert_eq!(trace.final_output, "我真糊涂");
    }

    #[test]
    fn oscillation_is_reverted() {
        let src = chars("他再也不会撤扬");
        let (out, trace) = iterative_correct(&Oscillating, &src, &CICConfig::default()).unwrap();
        assert_eq!(out[0], '他');
        assert_eq!(trace.reverted_positions, BTreeSet::from([0]));
        assert_eq!(out[5], '沉');
    }

    #[test]
    fn window_blocks_far_edits() {
        // The second-round 糊 at position 0 is three positions from the
        // first-round edit at 3.
        struct Far;
        impl Corrector for Far {
            fn correct_once(&self, s: &[char]) -> Result<Vec<char>> {
                let mut out = s.to_vec();
                out[3] = '涂';
                if s[3] == '涂' {
                    out[0] = '糊';
                }
                Ok(out)
            }
        }
        let (out, trace) = iterative_correct(&Far, &chars("户真我秃"), &CICConfig::default()).unwrap();
        assert_eq!(out, chars("户真我涂"));
        assert!(trace.iterations[1].is_empty());
        let (out, _) = iterative_correct(&Far, &chars("户真我秃"), &CICConfig { iterations: 2, window: 7 }).unwrap();
        assert_eq!(out, chars("糊真我涂"));
    }

    #[test]
    fn identity_leaves_empty_trace() {
        let src = chars("我真糊涂");
        let (out, trace) = iterative_correct(&Identity, &src, &CICConfig { iterations: 3, window: 3 }).unwrap();
        assert_eq!(out, src);
        assert!(trace.iterations.iter().all(Vec::is_empty));
        assert!(trace.reverted_positions.is_empty());
    }

    #[test]
    fn one_round_equals_greedy() {
        for s in ["他再也不会撤扬", "我真户秃", "秃秃户户"] {
            let s = chars(s);
            for c in [&Staged as &dyn Corrector, &Oscillating] {
                let (out, trace) = iterative_correct(c, &s, &CICConfig { iterations: 1, window: 3 }).unwrap();
                assert_eq!(out, greedy_correct(c, &s).unwrap());
                assert!(trace.reverted_positions.is_empty());
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(CICConfig { iterations: 0, window: 3 }.validate().is_err());
        assert!(CICConfig { iterations: 2, window: 2 }.validate().is_err());
        assert!(CICConfig { iterations: 2, window: 0 }.validate().is_err());
        assert!(CICConfig { iterations: 2, window: 1 }.validate().is_ok());
    }

    #[test]
    fn postprocess_rule() {
        assert_eq!(sighan13_postprocess(&chars("的"), &chars("地")).unwrap(), chars("的"));
        assert_eq!(sighan13_postprocess(&chars("我真户秃"), &chars("我真糊涂")).unwrap(), chars("我真糊涂"));
        let out = sighan13_postprocess(&chars("他跑的快地说高诉"), &chars("他跑得快的说告诉")).unwrap();
        assert_eq!(out, chars("他跑的快地说告诉"));
        assert!(matches!(
            sighan13_postprocess(&chars("的"), &chars("的地")),
            Err(Error::LengthMismatch { .. })
        ));
    }
}
