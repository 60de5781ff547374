//! Part compositions to prompt tokens, and pseudo-token embeddings through the
//! bottleneck projector.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::nn::{self, TensorRecord};
use crate::part_discovery::{PartCode, PartComposition};

pub const PLACEHOLDER: &str = "[p]";
pub const DEFAULT_TEMPLATE: &str = "a photo of a [p]";
pub const TOKEN_TABLE_SCHEMA_VERSION: u32 = 1;

/// Shape of the part vocabulary: slots `0..=num_parts`, variants `1..=num_variants`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartSpace {
    pub num_parts: usize,
    pub num_variants: usize,
}

impl PartSpace {
    pub fn new(num_parts: usize, num_variants: usize) -> Self {
        PartSpace {
            num_parts,
            num_variants,
        }
    }

    pub fn num_slots(&self) -> usize {
        self.num_parts + 1
    }

    /// Rows of the embedding table, `(M+1)·K`.
    pub fn rows(&self) -> usize {
        self.num_slots() * self.num_variants
    }

    pub fn validate(&self, composition: &PartComposition) -> Result<()> {
        composition.validate(self.num_parts, self.num_variants)
    }
}

/// Reserved vocabulary entry of a present code, e.g. `<s2_v17>`.
pub fn pseudo_token(code: PartCode) -> Option<String> {
    code.variant.map(|v| format!("<s{}_v{}>", code.slot, v))
}

pub fn parse_pseudo_token(token: &str) -> Option<PartCode> {
    let inner = token.strip_prefix("<s")?.strip_suffix('>')?;
    let (slot, variant) = inner.split_once("_v")?;
    let code = PartCode::new(slot.parse().ok()?, variant.parse().ok()?);
    (code.variant != Some(0)).then_some(code)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub template: String,
    pub composition: PartComposition,
    pub style_suffix: Option<String>,
}

impl PromptSpec {
    pub fn new(composition: PartComposition) -> Self {
        PromptSpec {
            template: DEFAULT_TEMPLATE.to_string(),
            composition,
            style_suffix: None,
        }
    }

    pub fn with_style(mut self, style: impl Into<String>) -> Self {
        self.style_suffix = Some(style.into());
        self
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Template words with the placeholder replaced by one pseudo-token per
/// present slot in slot order; the style suffix follows the part tokens.
pub fn render_prompt(spec: &PromptSpec, space: PartSpace) -> Result<Vec<String>> {
    let count = spec.template.matches(PLACEHOLDER).count();
    if count != 1 {
        return Err(input_err!(
            "template {:?} must contain {PLACEHOLDER} exactly once (found {count})",
            spec.template
        ));
    }
    space.validate(&spec.composition)?;
    let (before, after) = spec
        .template
        .split_once(PLACEHOLDER)
        .expect("placeholder present");
    let mut out: Vec<String> = words(before).collect();
    out.extend(spec.composition.present().filter_map(|c| pseudo_token(*c)));
    if let Some(style) = &spec.style_suffix {
        out.extend(words(style).filter(|w| parse_pseudo_token(w).is_none()));
    }
    out.extend(words(after));
    Ok(out)
}

/// One position of an encoded prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Word(usize),
    Part(PartCode),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub tokens: Vec<Token>,
    /// `(slot, context column)` of every pseudo-token, in slot order.
    pub part_columns: Vec<(usize, usize)>,
}

impl EncodedPrompt {
    pub fn column_of(&self, slot: usize) -> Option<usize> {
        self.part_columns
            .iter()
            .find(|(s, _)| *s == slot)
            .map(|&(_, c)| c)
    }
}

pub const BOS: &str = "<|startoftext|>";
pub const EOS: &str = "<|endoftext|>";
pub const UNK: &str = "<|unk|>";

/// Natural-language vocabulary of the frozen text encoder. Pseudo-tokens are
/// resolved separately and never collide with words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

const DEFAULT_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "picture", "bird", "dog", "cat", "robot", "with", "and", "in",
    "style", "pencil", "drawing", "oil", "painting", "van", "gogh", "dslr", "designed", "inspired",
    "by",
];

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::new(DEFAULT_WORDS.iter().map(|s| s.to_string()))
    }
}

impl Vocabulary {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all = vec![BOS.to_string(), EOS.to_string(), UNK.to_string()];
        for w in words {
            if !all.contains(&w) && parse_pseudo_token(&w).is_none() {
                all.push(w);
            }
        }
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(self.index[UNK])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// `BOS tokens EOS` padded with EOS to `context_len`.
    pub fn encode(&self, tokens: &[String], space: PartSpace, context_len: usize) -> Result<EncodedPrompt> {
        if tokens.len() + 2 > context_len {
            return Err(input_err!(
                "prompt has {} tokens but the context holds {}",
                tokens.len() + 2,
                context_len
            ));
        }
        let mut out = vec![Token::Word(self.id(BOS))];
        let mut part_columns = Vec::new();
        for t in tokens {
            match parse_pseudo_token(t) {
                Some(code) => {
                    code.validate(space.num_parts, space.num_variants)?;
                    if part_columns.iter().any(|&(s, _)| s == code.slot) {
                        return Err(input_err!("slot {} appears twice in the prompt", code.slot));
                    }
                    part_columns.push((code.slot, out.len()));
                    out.push(Token::Part(code));
                }
                None => out.push(Token::Word(self.id(t))),
            }
        }
        let eos = self.id(EOS);
        out.resize(context_len, Token::Word(eos));
        part_columns.sort_unstable();
        Ok(EncodedPrompt {
            tokens: out,
            part_columns,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorMode {
    /// Two affine layers with a ReLU between them.
    #[default]
    Bottleneck,
    /// Raw embedding rows are used directly.
    Identity,
}

#[derive(Debug, Clone)]
struct Projector {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Learnable embedding dictionary (one row per part code) plus projector.
#[derive(Debug, Clone)]
pub struct TokenTable {
    space: PartSpace,
    dim: usize,
    hidden: usize,
    mode: ProjectorMode,
    embeddings: Var,
    projector: Option<Projector>,
}

impl TokenTable {
    /// Every row starts at `init_row` (the embedding of a neutral class word)
    /// plus Gaussian noise; the projector uses fan-in scaled uniform weights.
    pub fn new(
        space: PartSpace,
        init_row: &[f64],
        hidden: usize,
        mode: ProjectorMode,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = init_row.len();
        if dim == 0 || hidden == 0 || space.num_variants == 0 {
            return Err(Error::Config("token table dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Tensor::from_slice(init_row, (1, dim), &nn::device())?;
        let noise = nn::normal(&mut rng, &[space.rows(), dim], noise_std.max(0.0) + f64::MIN_POSITIVE)?;
        let embeddings = Var::from_tensor(&base.broadcast_add(&noise)?)?;
        let projector = match mode {
            ProjectorMode::Identity => None,
            ProjectorMode::Bottleneck => Some(Projector {
                w1: Var::from_tensor(&nn::fan_in_uniform(&mut rng, hidden, dim)?)?,
                b1: Var::from_tensor(&nn::uniform(&mut rng, &[hidden], 1.0 / (dim as f64).sqrt())?)?,
                w2: Var::from_tensor(&nn::fan_in_uniform(&mut rng, dim, hidden)?)?,
                b2: Var::from_tensor(&nn::uniform(&mut rng, &[dim], 1.0 / (hidden as f64).sqrt())?)?,
            }),
        };
        Ok(TokenTable {
            space,
            dim,
            hidden,
            mode,
            embeddings,
            projector,
        })
    }

    pub fn space(&self) -> PartSpace {
        self.space
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn mode(&self) -> ProjectorMode {
        self.mode
    }

    pub fn embeddings(&self) -> &Var {
        &self.embeddings
    }

    /// Overwrites the projector weights (bottleneck mode only).
    pub fn set_projector(&mut self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<()> {
        let p = self
            .projector
            .as_mut()
            .ok_or_else(|| Error::State("identity-mode table has no projector".into()))?;
        p.w1.set(&w1)?;
        p.b1.set(&b1)?;
        p.w2.set(&w2)?;
        p.b2.set(&b2)?;
        Ok(())
    }

    pub fn set_embeddings(&mut self, e: &Tensor) -> Result<()> {
        self.embeddings.set(e)?;
        Ok(())
    }

    /// The projector `f` applied row-wise.
    pub fn project(&self, raw: &Tensor) -> Result<Tensor> {
        match &self.projector {
            None => Ok(raw.clone()),
            Some(p) => {
                let h = nn::linear(raw, p.w1.as_tensor(), Some(p.b1.as_tensor()))?.relu()?;
                nn::linear(&h, p.w2.as_tensor(), Some(p.b2.as_tensor()))
            }
        }
    }

    /// `f(e[row])` for each row, `(rows, D)`.
    pub fn embed_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if let Some(r) = rows.iter().find(|&&r| r >= self.space.rows()) {
            return Err(input_err!("token row {r} out of range"));
        }
        let idx = Tensor::from_vec(rows.iter().map(|&r| r as u32).collect::<Vec<_>>(), rows.len(), &nn::device())?;
        let raw = self.embeddings.as_tensor().index_select(&idx, 0)?;
        self.project(&raw)
    }

    /// Conditioned embeddings of the present codes, in slot order; absent
    /// codes are skipped.
    pub fn embed(&self, composition: &PartComposition) -> Result<Tensor> {
        self.space.validate(composition)?;
        let rows: Vec<usize> = composition
            .present()
            .filter_map(|c| c.row(self.space.num_variants))
            .collect();
        if rows.is_empty() {
            return Ok(nn::zeros(&[0, self.dim])?);
        }
        self.embed_rows(&rows)
    }

    /// Trainable variables with stable names.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let mut out = vec![("tokens.embeddings".to_string(), self.embeddings.clone())];
        if let Some(p) = &self.projector {
            out.push(("tokens.projector.w1".into(), p.w1.clone()));
            out.push(("tokens.projector.b1".into(), p.b1.clone()));
            out.push(("tokens.projector.w2".into(), p.w2.clone()));
            out.push(("tokens.projector.b2".into(), p.b2.clone()));
        }
        out
    }

    pub fn to_record(&self) -> Result<TokenTableRecord> {
        let mut projector = BTreeMap::new();
        if let Some(p) = &self.projector {
            for (k, v) in [("w1", &p.w1), ("b1", &p.b1), ("w2", &p.w2), ("b2", &p.b2)] {
                projector.insert(k.to_string(), TensorRecord::from_tensor(v.as_tensor())?);
            }
        }
        Ok(TokenTableRecord {
            schema_version: TOKEN_TABLE_SCHEMA_VERSION,
            space: self.space,
            dim: self.dim,
            hidden: self.hidden,
            mode: self.mode,
            embeddings: TensorRecord::from_tensor(self.embeddings.as_tensor())?,
            projector,
        })
    }

    pub fn from_record(r: &TokenTableRecord) -> Result<Self> {
        if r.schema_version != TOKEN_TABLE_SCHEMA_VERSION {
            return Err(Error::Schema {
                what: "token table",
                found: r.schema_version,
                expected: TOKEN_TABLE_SCHEMA_VERSION,
            });
        }
        if r.embeddings.shape != [r.space.rows(), r.dim] {
            return Err(input_err!(
                "token table has shape {:?}, expected [{}, {}]",
                r.embeddings.shape,
                r.space.rows(),
                r.dim
            ));
        }
        if r.embeddings.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite token embedding".into()));
        }
        let get = |k: &str, shape: &[usize]| -> Result<Var> {
            let rec = r
                .projector
                .get(k)
                .ok_or_else(|| input_err!("token table is missing projector.{k}"))?;
            if rec.shape != shape {
                return Err(input_err!("projector.{k} has shape {:?}, expected {shape:?}", rec.shape));
            }
            Ok(Var::from_tensor(&rec.to_tensor()?)?)
        };
        let projector = match r.mode {
            ProjectorMode::Identity => None,
            ProjectorMode::Bottleneck => Some(Projector {
                w1: get("w1", &[r.hidden, r.dim])?,
                b1: get("b1", &[r.hidden])?,
                w2: get("w2", &[r.dim, r.hidden])?,
                b2: get("b2", &[r.dim])?,
            }),
        };
        Ok(TokenTable {
            space: r.space,
            dim: r.dim,
            hidden: r.hidden,
            mode: r.mode,
            embeddings: Var::from_tensor(&r.embeddings.to_tensor()?)?,
            projector,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.to_record()?)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_record(&serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTableRecord {
    pub schema_version: u32,
    pub space: PartSpace,
    pub dim: usize,
    pub hidden: usize,
    pub mode: ProjectorMode,
    pub embeddings: TensorRecord,
    #[serde(default)]
    pub projector: BTreeMap<String, TensorRecord>,
}

/// Conditioned embeddings `f(e(code))` of the present codes as plain vectors.
pub fn embed_tokens(composition: &PartComposition, table: &TokenTable) -> Result<Vec<Vec<f64>>> {
    Ok(table.embed(composition)?.to_vec2::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(s: &str) -> PartComposition {
        s.parse().unwrap()
    }

    #[test]
    fn renders_one_token_per_present_slot() {
        let space = PartSpace::new(3, 8);
        let spec = PromptSpec::new(comp("0:1,1:2,2:3,3:4"));
        let out = render_prompt(&spec, space).unwrap();
        assert_eq!(out, ["a", "photo", "of", "a", "<s0_v1>", "<s1_v2>", "<s2_v3>", "<s3_v4>"]);
        assert_eq!(render_prompt(&spec, space).unwrap(), out);
    }

    #[test]
    fn absent_slots_are_skipped() {
        let out = render_prompt(&PromptSpec::new(comp("0:1,1:2,2:3,3:-")), PartSpace::new(3, 8)).unwrap();
        assert_eq!(out.iter().filter(|t| parse_pseudo_token(t).is_some()).count(), 3);
        assert!(!out.iter().any(|t| t.starts_with("<s3")));
    }

    #[test]
    fn style_follows_part_tokens() {
        let spec = PromptSpec {
            template: "[p] on a branch".into(),
            composition: comp("0:1,1:2"),
            style_suffix: Some("in pencil drawing style".into()),
        };
        let out = render_prompt(&spec, PartSpace::new(1, 2)).unwrap();
        assert_eq!(
            out,
            ["<s0_v1>", "<s1_v2>", "in", "pencil", "drawing", "style", "on", "a", "branch"]
        );
    }

    #[test]
    fn bad_templates_and_variants() {
        let space = PartSpace::new(1, 2);
        let mut spec = PromptSpec::new(comp("0:1,1:3"));
        assert!(matches!(render_prompt(&spec, space), Err(Error::Input(_))));
        spec.composition = comp("0:1,1:2");
        spec.template = "a [p] and [p]".into();
        assert!(render_prompt(&spec, space).is_err());
        spec.template = "no placeholder".into();
        assert!(render_prompt(&spec, space).is_err());
    }

    #[test]
    fn pseudo_tokens_parse_back() {
        let code = PartCode::new(4, 256);
        let t = pseudo_token(code).unwrap();
        assert_eq!(t, "<s4_v256>");
        assert_eq!(parse_pseudo_token(&t), Some(code));
        assert_eq!(parse_pseudo_token("<s1_v0>"), None);
        assert_eq!(parse_pseudo_token("bird"), None);
        assert_eq!(pseudo_token(PartCode::absent(2)), None);
    }

    #[test]
    fn encode_tracks_part_columns() {
        let vocab = Vocabulary::default();
        let space = PartSpace::new(2, 4);
        let words = render_prompt(&PromptSpec::new(comp("0:2,1:-,2:4")), space).unwrap();
        let enc = vocab.encode(&words, space, 10).unwrap();
        assert_eq!(enc.tokens.len(), 10);
        assert_eq!(enc.part_columns, vec![(0, 5), (2, 6)]);
        assert_eq!(enc.tokens[5], Token::Part(PartCode::new(0, 2)));
        assert_eq!(enc.tokens[9], Token::Word(vocab.id(EOS)));
        assert!(vocab.encode(&words, space, 7).is_err());
        assert_eq!(vocab.id("zebra"), vocab.id(UNK));
    }

    #[test]
    fn zero_projector_gives_zero_output() {
        let space = PartSpace::new(2, 3);
        let mut table = TokenTable::new(space, &[0.3; 6], 5, ProjectorMode::Bottleneck, 0.5, 1).unwrap();
        table
            .set_projector(nn::zeros(&[5, 6]).unwrap(), nn::zeros(&[5]).unwrap(), nn::zeros(&[6, 5]).unwrap(), nn::zeros(&[6]).unwrap())
            .unwrap();
        let out = embed_tokens(&comp("0:1,1:3,2:2"), &table).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_mode_is_raw_lookup() {
        let space = PartSpace::new(2, 3);
        let table = TokenTable::new(space, &[0.1, -0.2, 0.3], 3, ProjectorMode::Identity, 0.01, 7).unwrap();
        let c = comp("0:3,1:-,2:1");
        let out = embed_tokens(&c, &table).unwrap();
        let e = table.embeddings().as_tensor().to_vec2::<f64>().unwrap();
        assert_eq!(out, vec![e[2].clone(), e[6].clone()]);
    }

    #[test]
    fn record_round_trip() {
        let space = PartSpace::new(1, 2);
        let table = TokenTable::new(space, &[0.5, 0.25], 4, ProjectorMode::Bottleneck, 0.01, 3).unwrap();
        let back = TokenTable::from_record(&table.to_record().unwrap()).unwrap();
        let c = comp("0:2,1:1");
        assert_eq!(embed_tokens(&c, &table).unwrap(), embed_tokens(&c, &back).unwrap());
        let mut rec = table.to_record().unwrap();
        rec.projector.remove("w2");
        assert!(TokenTable::from_record(&rec).is_err());
    }
}
