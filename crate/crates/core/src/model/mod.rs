//! Shared encoder with a character decoder and a pronunciation decoder.
//!
//! The encoder fuses per-character char, pinyin and glyph embeddings through
//! one linear layer, adds position embeddings and runs a post-LayerNorm
//! transformer stack. On top of the encoder output `H`:
//!
//! * the character decoder computes `GeLU(W_c h + b_c)` and a vocabulary
//!   softmax;
//! * the pronunciation decoder computes `GeLU(W_p h + b_p)` and either three
//!   heads (initial, final, tone) or one whole-syllable head.
//!
//! Everything is built on [`Graph`] so the training code can differentiate
//! the same forward pass that inference runs.

mod checkpoint;
mod lexicon;

use std::collections::HashMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::pinyin::{Syllable, TONE_COUNT};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use lexicon::{Lexicon, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Initial, final and tone heads.
    Fine,
    /// One head over whole syllables.
    Coarse,
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fine" => Ok(Granularity::Fine),
            "coarse" => Ok(Granularity::Coarse),
            other => Err(Error::InvalidConfig(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Architecture hyperparameters. Vocabulary sizes come from the [`Lexicon`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub granularity: Granularity,
    /// Standard deviation of the normal weight initialisation.
    pub init_std: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 256,
            max_len: 192,
            granularity: Granularity::Fine,
            init_std: 0.02,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.embed_dim == 0 || self.num_heads == 0 || self.num_layers == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }
}

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Matrix) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    query: (usize, usize),
    key: (usize, usize),
    value: (usize, usize),
    attn_out: (usize, usize),
    attn_norm: (usize, usize),
    ffn_in: (usize, usize),
    ffn_out: (usize, usize),
    ffn_norm: (usize, usize),
}

#[derive(Clone, Debug)]
enum PronHeadIds {
    Fine {
        initial: (usize, usize),
        final_: (usize, usize),
        tone: (usize, usize),
    },
    Coarse {
        syllable: (usize, usize),
    },
}

#[derive(Clone, Debug)]
struct ParamIds {
    char_emb: usize,
    pinyin_emb: usize,
    glyph_emb: usize,
    fusion: (usize, usize),
    position: usize,
    emb_norm: (usize, usize),
    layers: Vec<LayerIds>,
    char_proj: (usize, usize),
    char_head: (usize, usize),
    pron_proj: (usize, usize),
    pron_heads: Option<PronHeadIds>,
}

fn pair_ids(store: &ParamStore, prefix: &str, a: &str, b: &str) -> Result<(usize, usize)> {
    let get = |suffix: &str| {
        let name = format!("{prefix}.{suffix}");
        store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    Ok((get(a)?, get(b)?))
}

fn linear_ids(store: &ParamStore, prefix: &str) -> Result<(usize, usize)> {
    pair_ids(store, prefix, "weight", "bias")
}

fn norm_ids(store: &ParamStore, prefix: &str) -> Result<(usize, usize)> {
    pair_ids(store, prefix, "gamma", "beta")
}

impl ParamIds {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let single = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let layers = (0..cfg.num_layers)
            .map(|l| {
                let p = |s: &str| format!("encoder.layer{l}.{s}");
                Ok(LayerIds {
                    query: linear_ids(store, &p("query"))?,
                    key: linear_ids(store, &p("key"))?,
                    value: linear_ids(store, &p("value"))?,
                    attn_out: linear_ids(store, &p("attn_out"))?,
                    attn_norm: norm_ids(store, &p("attn_norm"))?,
                    ffn_in: linear_ids(store, &p("ffn_in"))?,
                    ffn_out: linear_ids(store, &p("ffn_out"))?,
                    ffn_norm: norm_ids(store, &p("ffn_norm"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pron_heads = match cfg.granularity {
            Granularity::Fine if store.id("pron_head.initial.weight").is_some() => Some(PronHeadIds::Fine {
                initial: linear_ids(store, "pron_head.initial")?,
                final_: linear_ids(store, "pron_head.final")?,
                tone: linear_ids(store, "pron_head.tone")?,
            }),
            Granularity::Coarse if store.id("pron_head.syllable.weight").is_some() => {
                Some(PronHeadIds::Coarse {
                    syllable: linear_ids(store, "pron_head.syllable")?,
                })
            }
            _ => None,
        };
        Ok(ParamIds {
            char_emb: single("embed.char")?,
            pinyin_emb: single("embed.pinyin")?,
            glyph_emb: single("embed.glyph")?,
            fusion: linear_ids(store, "embed.fusion")?,
            position: single("embed.position")?,
            emb_norm: norm_ids(store, "embed.norm")?,
            layers,
            char_proj: linear_ids(store, "char_proj")?,
            char_head: linear_ids(store, "char_head")?,
            pron_proj: linear_ids(store, "pron_proj")?,
            pron_heads,
        })
    }
}

/// A sentence and the pinyin of each of its characters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentenceRef<'a> {
    pub chars: &'a [char],
    pub pinyin: &'a [Option<Syllable>],
}

impl<'a> SentenceRef<'a> {
    pub fn new(chars: &'a [char], pinyin: &'a [Option<Syllable>]) -> Self {
        SentenceRef { chars, pinyin }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

/// Encoder input: several sentences packed row-wise. Sentence `s` occupies
/// rows `segments[s]`; attention never crosses segments.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PackedInput {
    pub char_ids: Vec<usize>,
    pub pinyin_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl PackedInput {
    pub fn rows(&self) -> usize {
        self.char_ids.len()
    }
}

/// Contextualised representation, one row per input character.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Matrix,
}

/// Pronunciation logits for the configured granularity.
#[derive(Clone, Debug, PartialEq)]
pub enum PronLogits {
    Fine {
        initial: Matrix,
        final_: Matrix,
        tone: Matrix,
    },
    Coarse {
        syllable: Matrix,
    },
}

impl PronLogits {
    pub fn granularity(&self) -> Granularity {
        match self {
            PronLogits::Fine { .. } => Granularity::Fine,
            PronLogits::Coarse { .. } => Granularity::Coarse,
        }
    }

    /// Softmax of every head, same layout.
    pub fn probabilities(&self) -> PronLogits {
        match self {
            PronLogits::Fine {
                initial,
                final_,
                tone,
            } => PronLogits::Fine {
                initial: softmax_rows(initial),
                final_: softmax_rows(final_),
                tone: softmax_rows(tone),
            },
            PronLogits::Coarse { syllable } => PronLogits::Coarse {
                syllable: softmax_rows(syllable),
            },
        }
    }

    pub fn heads(&self) -> Vec<&Matrix> {
        match self {
            PronLogits::Fine {
                initial,
                final_,
                tone,
            } => vec![initial, final_, tone],
            PronLogits::Coarse { syllable } => vec![syllable],
        }
    }
}

/// Graph handles of the pronunciation heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PronVars {
    Fine { initial: Var, final_: Var, tone: Var },
    Coarse { syllable: Var },
}

/// Configuration, vocabularies and parameters of one model.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    lexicon: Lexicon,
    params: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// Randomly initialised model: weights `N(0, init_std)`, biases zero,
    /// LayerNorm gains one.
    pub fn new(config: ModelConfig, lexicon: Lexicon) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::InvalidConfig(format!("init_std: {e}")))?;
        let mut store = ParamStore::default();
        let d = config.embed_dim;
        let mut rand_matrix = |rows: usize, cols: usize| {
            Matrix::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
        };
        let add_linear = |store: &mut ParamStore, rand: &mut dyn FnMut(usize, usize) -> Matrix, name: &str, out_dim: usize, in_dim: usize| {
            store.insert(&format!("{name}.weight"), rand(out_dim, in_dim));
            store.insert(&format!("{name}.bias"), Matrix::zeros((1, out_dim)));
        };
        let norm = |store: &mut ParamStore, name: &str| {
            store.insert(&format!("{name}.gamma"), Matrix::ones((1, d)));
            store.insert(&format!("{name}.beta"), Matrix::zeros((1, d)));
        };

        store.insert("embed.char", rand_matrix(lexicon.char_count(), d));
        store.insert("embed.pinyin", rand_matrix(lexicon.pinyin_input_count(), d));
        store.insert("embed.glyph", rand_matrix(lexicon.char_count(), d));
        add_linear(&mut store, &mut rand_matrix, "embed.fusion", d, 3 * d);
        store.insert("embed.position", rand_matrix(config.max_len, d));
        norm(&mut store, "embed.norm");
        for l in 0..config.num_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            for proj in ["query", "key", "value", "attn_out"] {
                add_linear(&mut store, &mut rand_matrix, &p(proj), d, d);
            }
            norm(&mut store, &p("attn_norm"));
            add_linear(&mut store, &mut rand_matrix, &p("ffn_in"), config.ffn_dim, d);
            add_linear(&mut store, &mut rand_matrix, &p("ffn_out"), d, config.ffn_dim);
            norm(&mut store, &p("ffn_norm"));
        }
        add_linear(&mut store, &mut rand_matrix, "char_proj", d, d);
        add_linear(&mut store, &mut rand_matrix, "char_head", lexicon.char_count(), d);
        add_linear(&mut store, &mut rand_matrix, "pron_proj", d, d);
        match config.granularity {
            Granularity::Fine => {
                let units = lexicon.units();
                add_linear(&mut store, &mut rand_matrix, "pron_head.initial", units.initial_classes(), d);
                add_linear(&mut store, &mut rand_matrix, "pron_head.final", units.final_classes(), d);
                add_linear(&mut store, &mut rand_matrix, "pron_head.tone", TONE_COUNT, d);
            }
            Granularity::Coarse => {
                add_linear(&mut store, &mut rand_matrix, "pron_head.syllable", lexicon.syllable_count(), d);
            }
        }
        Self::from_parts(config, lexicon, store)
    }

    /// Assembles a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, lexicon: Lexicon, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ParamIds::resolve(&params, &config)?;
        let model = Model {
            config,
            lexicon,
            params,
            ids,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.config.embed_dim;
        let lex = &self.lexicon;
        let mut expected: Vec<(&str, (usize, usize))> = vec![
            ("embed.char", (lex.char_count(), d)),
            ("embed.pinyin", (lex.pinyin_input_count(), d)),
            ("embed.glyph", (lex.char_count(), d)),
            ("embed.fusion.weight", (d, 3 * d)),
            ("embed.position", (self.config.max_len, d)),
            ("char_proj.weight", (d, d)),
            ("char_head.weight", (lex.char_count(), d)),
            ("pron_proj.weight", (d, d)),
        ];
        match self.ids.pron_heads {
            Some(PronHeadIds::Fine { .. }) => {
                expected.push(("pron_head.initial.weight", (lex.units().initial_classes(), d)));
                expected.push(("pron_head.final.weight", (lex.units().final_classes(), d)));
                expected.push(("pron_head.tone.weight", (TONE_COUNT, d)));
            }
            Some(PronHeadIds::Coarse { .. }) => {
                expected.push(("pron_head.syllable.weight", (lex.syllable_count(), d)));
            }
            None => {}
        }
        for (name, shape) in expected {
            let got = self.params.get(name).map(Matrix::dim);
            if got != Some(shape) {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {got:?}, expected {shape:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access to the tensors. Names and shapes cannot change.
    pub fn param_values_mut(&mut self) -> &mut [Matrix] {
        self.params.values_mut()
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.params.get_mut(name)
    }

    pub fn granularity(&self) -> Granularity {
        self.config.granularity
    }

    /// Whether the pronunciation heads are present. They are only needed
    /// for training; see [`Model::without_pron_heads`].
    pub fn has_pron_heads(&self) -> bool {
        self.ids.pron_heads.is_some()
    }

    /// A copy with the pronunciation heads removed, as used at inference.
    pub fn without_pron_heads(&self) -> Result<Model> {
        let mut store = ParamStore::default();
        for (name, value) in self.params.iter() {
            if !name.starts_with("pron_head.") {
                store.insert(name, value.clone());
            }
        }
        Model::from_parts(self.config.clone(), self.lexicon.clone(), store)
    }

    /// A copy predicting pronunciation at `granularity`. Everything except
    /// the pronunciation heads is kept; new heads are freshly initialised.
    pub fn with_granularity(&self, granularity: Granularity) -> Result<Model> {
        if granularity == self.granularity() && self.has_pron_heads() {
            return Ok(self.clone());
        }
        let config = ModelConfig {
            granularity,
            ..self.config.clone()
        };
        let fresh = Model::new(config.clone(), self.lexicon.clone())?;
        let mut store = ParamStore::default();
        for (name, value) in self.params.iter().filter(|(n, _)| !n.starts_with("pron_head.")) {
            store.insert(name, value.clone());
        }
        for (name, value) in fresh.params.iter().filter(|(n, _)| n.starts_with("pron_head.")) {
            store.insert(name, value.clone());
        }
        Model::from_parts(config, self.lexicon.clone(), store)
    }

    /// Packs sentences with their pinyin into encoder input.
    pub fn pack<'a, I>(&self, sentences: I) -> Result<PackedInput>
    where
        I: IntoIterator<Item = SentenceRef<'a>>,
    {
        let mut packed = PackedInput::default();
        for SentenceRef { chars, pinyin } in sentences {
            if chars.len() != pinyin.len() {
                return Err(Error::LengthMismatch {
                    what: "characters vs pinyin",
                    left: chars.len(),
                    right: pinyin.len(),
                });
            }
            if chars.is_empty() {
                return Err(Error::Empty("sentence"));
            }
            if chars.len() > self.config.max_len {
                return Err(Error::SequenceTooLong {
                    len: chars.len(),
                    max: self.config.max_len,
                });
            }
            let start = packed.rows();
            packed.char_ids.extend(chars.iter().map(|&c| self.lexicon.char_id(c)));
            packed
                .pinyin_ids
                .extend(pinyin.iter().map(|s| self.lexicon.pinyin_input_id(s.as_ref())));
            packed.positions.extend(0..chars.len());
            packed.segments.push(start..packed.rows());
        }
        Ok(packed)
    }

    /// Builds the encoder on `g` and returns `H`.
    pub fn encode_graph(&self, g: &mut Graph, input: &PackedInput) -> Var {
        let ids = &self.ids;
        let chars = g.gather(Var::Param(ids.char_emb), &input.char_ids);
        let pinyin = g.gather(Var::Param(ids.pinyin_emb), &input.pinyin_ids);
        let glyph = g.gather(Var::Param(ids.glyph_emb), &input.char_ids);
        let fused = g.concat_cols(&[chars, pinyin, glyph]);
        let fused = linear(g, fused, ids.fusion);
        let pos = g.gather(Var::Param(ids.position), &input.positions);
        let x = g.add(fused, pos);
        let mut x = norm(g, x, ids.emb_norm);
        for layer in &ids.layers {
            let q = linear(g, x, layer.query);
            let k = linear(g, x, layer.key);
            let v = linear(g, x, layer.value);
            let att = g.attention(q, k, v, &input.segments, self.config.num_heads);
            let att = linear(g, att, layer.attn_out);
            let res = g.add(x, att);
            let a = norm(g, res, layer.attn_norm);
            let hidden = linear(g, a, layer.ffn_in);
            let hidden = g.gelu(hidden);
            let ffn = linear(g, hidden, layer.ffn_out);
            let res = g.add(a, ffn);
            x = norm(g, res, layer.ffn_norm);
        }
        x
    }

    pub fn char_projection_graph(&self, g: &mut Graph, hidden: Var) -> Var {
        let h = linear(g, hidden, self.ids.char_proj);
        g.gelu(h)
    }

    pub fn char_logits_graph(&self, g: &mut Graph, char_features: Var) -> Var {
        linear(g, char_features, self.ids.char_head)
    }

    pub fn pron_projection_graph(&self, g: &mut Graph, hidden: Var) -> Var {
        let h = linear(g, hidden, self.ids.pron_proj);
        g.gelu(h)
    }

    pub fn pron_logits_graph(&self, g: &mut Graph, pron_features: Var) -> Result<PronVars> {
        match &self.ids.pron_heads {
            Some(PronHeadIds::Fine {
                initial,
                final_,
                tone,
            }) => Ok(PronVars::Fine {
                initial: linear(g, pron_features, *initial),
                final_: linear(g, pron_features, *final_),
                tone: linear(g, pron_features, *tone),
            }),
            Some(PronHeadIds::Coarse { syllable }) => Ok(PronVars::Coarse {
                syllable: linear(g, pron_features, *syllable),
            }),
            None => Err(Error::GranularityMismatch),
        }
    }

    /// Encodes one sentence. Characters outside the vocabulary and missing
    /// pinyin map to the unknown embeddings.
    pub fn encode(&self, chars: &[char], pinyin: &[Option<Syllable>]) -> Result<EncoderOutput> {
        let input = self.pack([SentenceRef::new(chars, pinyin)])?;
        let mut g = Graph::new(self.params.values());
        let h = self.encode_graph(&mut g, &input);
        Ok(EncoderOutput {
            hidden: g.value(h).clone(),
        })
    }

    /// `GeLU(W_c h + b_c)` row by row.
    pub fn char_projection(&self, hidden: &Matrix) -> Matrix {
        self.eval_graph(hidden, |m, g, h| m.char_projection_graph(g, h))
    }

    /// Character-decoder logits from encoder output `H`.
    pub fn char_logits(&self, hidden: &Matrix) -> Matrix {
        self.eval_graph(hidden, |m, g, h| {
            let hc = m.char_projection_graph(g, h);
            m.char_logits_graph(g, hc)
        })
    }

    /// `GeLU(W_p h + b_p)` row by row.
    pub fn pron_projection(&self, hidden: &Matrix) -> Matrix {
        self.eval_graph(hidden, |m, g, h| m.pron_projection_graph(g, h))
    }

    /// Pronunciation-head logits from projected features `H_p`.
    pub fn pron_logits(&self, pron_features: &Matrix) -> Result<PronLogits> {
        let mut g = Graph::new(self.params.values());
        let hp = g.constant(pron_features.clone());
        Ok(match self.pron_logits_graph(&mut g, hp)? {
            PronVars::Fine {
                initial,
                final_,
                tone,
            } => PronLogits::Fine {
                initial: g.value(initial).clone(),
                final_: g.value(final_).clone(),
                tone: g.value(tone).clone(),
            },
            PronVars::Coarse { syllable } => PronLogits::Coarse {
                syllable: g.value(syllable).clone(),
            },
        })
    }

    fn eval_graph(&self, input: &Matrix, build: impl FnOnce(&Self, &mut Graph, Var) -> Var) -> Matrix {
        let mut g = Graph::new(self.params.values());
        let x = g.constant(input.clone());
        let out = build(self, &mut g, x);
        g.value(out).clone()
    }

    /// Per-position argmax of the character decoder for packed sentences.
    pub fn predict_ids(&self, input: &PackedInput) -> Vec<usize> {
        let mut g = Graph::new(self.params.values());
        let h = self.encode_graph(&mut g, input);
        let hc = self.char_projection_graph(&mut g, h);
        let logits = self.char_logits_graph(&mut g, hc);
        argmax_rows(g.value(logits))
    }
}

fn linear(g: &mut Graph, x: Var, (w, b): (usize, usize)) -> Var {
    g.linear(x, Var::Param(w), Var::Param(b))
}

fn norm(g: &mut Graph, x: Var, (gamma, beta): (usize, usize)) -> Var {
    g.layer_norm(x, Var::Param(gamma), Var::Param(beta))
}

/// Index of the largest entry in each row; the first one on ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pinyin::SyllableTable;
    use ndarray::array;

    fn toy_model(granularity: Granularity) -> Model {
        let table = SyllableTable::builtin();
        let lexicon = Lexicon::new("我真糊涂户秃他她".chars(), &table);
        let config = ModelConfig {
            embed_dim: 16,
            num_heads: 4,
            ffn_dim: 32,
            max_len: 12,
            granularity,
            init_std: 0.2,
            ..Default::default()
        };
        Model::new(config, lexicon).unwrap()
    }

    fn sentence(s: &str) -> (Vec<char>, Vec<Option<Syllable>>) {
        let table = SyllableTable::builtin();
        let chars: Vec<char> = s.chars().collect();
        let pinyin = chars.iter().map(|&c| table.reading(c).cloned()).collect();
        (chars, pinyin)
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = toy_model(Granularity::Fine);
        let (c, p) = sentence("我");
        assert_eq!(model.encode(&c, &p).unwrap().hidden.dim(), (1, 16));
        let (c, p) = sentence("我真糊涂");
        let a = model.encode(&c, &p).unwrap();
        let b = model.encode(&c, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.hidden.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn swapping_characters_changes_rows() {
        let model = toy_model(Granularity::Fine);
        let (c1, p1) = sentence("我真");
        let (c2, p2) = sentence("真我");
        let h1 = model.encode(&c1, &p1).unwrap().hidden;
        let h2 = model.encode(&c2, &p2).unwrap().hidden;
        // without positions the rows would simply swap
        assert_ne!(h1.row(0), h2.row(1));
        assert_ne!(h1.row(1), h2.row(0));
    }

    #[test]
    fn too_long_is_rejected() {
        let model = toy_model(Granularity::Fine);
        let (c, p) = sentence("我真糊涂我真糊涂我真糊涂我");
        assert!(matches!(
            model.encode(&c, &p),
            Err(Error::SequenceTooLong { len: 13, max: 12 })
        ));
    }

    #[test]
    fn unknown_chars_use_unk() {
        let model = toy_model(Granularity::Fine);
        let input = model
            .pack([SentenceRef::new(&['好', '我'], &[None, None])])
            .unwrap();
        assert_eq!(input.char_ids[0], UNK_ID);
        assert_ne!(input.char_ids[1], UNK_ID);
        assert_eq!(input.pinyin_ids, vec![UNK_ID, UNK_ID]);
    }

    #[test]
    fn zero_projection_gives_zero_features() {
        let mut model = toy_model(Granularity::Fine);
        model.param_mut("char_proj.weight").unwrap().fill(0.0);
        model.param_mut("pron_proj.weight").unwrap().fill(0.0);
        let (c, p) = sentence("我真糊涂");
        let h = model.encode(&c, &p).unwrap().hidden;
        assert!(model.char_projection(&h).iter().all(|&v| v == 0.0));
        let hp = model.pron_projection(&h);
        assert_eq!(hp.dim(), (4, 16));
        assert!(hp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probabilities_are_distributions() {
        for gran in [Granularity::Fine, Granularity::Coarse] {
            let model = toy_model(gran);
            let (c, p) = sentence("他真糊涂");
            let h = model.encode(&c, &p).unwrap().hidden;
            let probs = softmax_rows(&model.char_logits(&h));
            assert_eq!(probs.ncols(), model.lexicon().char_count());
            let pron = model.pron_logits(&model.pron_projection(&h)).unwrap();
            assert_eq!(pron.granularity(), gran);
            let pron = pron.probabilities();
            let expected_heads = if gran == Granularity::Fine { 3 } else { 1 };
            assert_eq!(pron.heads().len(), expected_heads);
            for m in std::iter::once(&probs).chain(pron.heads()) {
                for row in m.rows() {
                    assert!(row.iter().all(|&v| v >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn coarse_head_spans_syllable_inventory() {
        let model = toy_model(Granularity::Coarse);
        let h = Matrix::zeros((2, 16));
        let PronLogits::Coarse { syllable } = model.pron_logits(&h).unwrap() else {
            panic!("coarse model produced fine heads");
        };
        assert_eq!(syllable.ncols(), SyllableTable::builtin().syllables().len());
    }

    #[test]
    fn removing_heads_reports_mismatch() {
        let model = toy_model(Granularity::Fine).without_pron_heads().unwrap();
        assert!(!model.has_pron_heads());
        assert!(matches!(
            model.pron_logits(&Matrix::zeros((1, 16))),
            Err(Error::GranularityMismatch)
        ));
    }

    #[test]
    fn regranulating_keeps_encoder() {
        let fine = toy_model(Granularity::Fine);
        let coarse = fine.with_granularity(Granularity::Coarse).unwrap();
        assert_eq!(coarse.granularity(), Granularity::Coarse);
        assert!(coarse.params().get("pron_head.syllable.weight").is_some());
        assert!(coarse.params().get("pron_head.tone.weight").is_none());
        for (name, value) in fine.params().iter().filter(|(n, _)| !n.starts_with("pron_head.")) {
            assert_eq!(coarse.params().get(name), Some(value), "{name}");
        }
        let (c, p) = sentence("我真糊涂");
        assert_eq!(fine.encode(&c, &p).unwrap(), coarse.encode(&c, &p).unwrap());
    }

    #[test]
    fn char_decoder_two_by_two_matches_scalar_oracle() {
        // D = 2 and two vocabulary entries (UNK + one char)
        let table = SyllableTable::builtin();
        let lexicon = Lexicon::new("我".chars(), &table);
        let config = ModelConfig {
            embed_dim: 2,
            num_heads: 1,
            num_layers: 1,
            ffn_dim: 2,
            max_len: 4,
            ..Default::default()
        };
        let mut model = Model::new(config, lexicon).unwrap();
        let wc = array![[0.5, -1.0], [2.0, 0.25]];
        let bc = array![[0.1, -0.3]];
        let wy = array![[1.5, -0.5], [-2.0, 0.75]];
        let by = array![[0.2, 0.4]];
        *model.param_mut("char_proj.weight").unwrap() = wc.clone();
        *model.param_mut("char_proj.bias").unwrap() = bc.clone();
        *model.param_mut("char_head.weight").unwrap() = wy.clone();
        *model.param_mut("char_head.bias").unwrap() = by.clone();
        let h = array![[0.3, -0.7], [1.2, 0.4]];

        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let logits = model.char_logits(&h);
        let feats = model.char_projection(&h);
        for i in 0..2 {
            let mut hc = [0.0; 2];
            for r in 0..2 {
                let mut acc = bc[[0, r]];
                for c in 0..2 {
                    acc += wc[[r, c]] * h[[i, c]];
                }
                hc[r] = gelu(acc);
                assert!((feats[[i, r]] - hc[r]).abs() < 1e-14);
            }
            for v in 0..2 {
                let expect = by[[0, v]] + wy[[v, 0]] * hc[0] + wy[[v, 1]] * hc[1];
                assert!((logits[[i, v]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn pron_projection_two_by_two_matches_scalar_oracle() {
        let table = SyllableTable::builtin();
        let lexicon = Lexicon::new("我".chars(), &table);
        let config = ModelConfig {
            embed_dim: 2,
            num_heads: 1,
            num_layers: 1,
            ffn_dim: 2,
            max_len: 4,
            ..Default::default()
        };
        let mut model = Model::new(config, lexicon).unwrap();
        let wp = array![[-0.4, 1.1], [0.9, 0.3]];
        let bp = array![[0.05, 0.5]];
        *model.param_mut("pron_proj.weight").unwrap() = wp.clone();
        *model.param_mut("pron_proj.bias").unwrap() = bp.clone();
        let h = array![[0.6, 0.2], [-1.0, 0.8]];
        let gelu = |x: f64| 0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()));
        let hp = model.pron_projection(&h);
        for i in 0..2 {
            for r in 0..2 {
                let pre = bp[[0, r]] + wp[[r, 0]] * h[[i, 0]] + wp[[r, 1]] * h[[i, 1]];
                assert!((hp[[i, r]] - gelu(pre)).abs() < 1e-14);
            }
        }
    }
}
