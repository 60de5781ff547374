//! Frozen toy text encoder: word table + positions + one causal attention
//! mixing layer. Pseudo-token rows come from a [`TokenTable`].

use std::collections::BTreeMap;

use candle_core::{Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, TensorMap};
use crate::token_codec::{EncodedPrompt, PartSpace, PromptSpec, Token, TokenTable, Vocabulary};

#[derive(Debug, Clone)]
pub struct TextEncoder {
    vocab: Vocabulary,
    context_len: usize,
    dim: usize,
    params: TensorMap,
}

impl TextEncoder {
    pub fn new(vocab: Vocabulary, context_len: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorMap::new();
        params.insert("text.tokens".into(), nn::normal(&mut rng, &[vocab.len(), dim], 1.0)?);
        params.insert("text.pos".into(), nn::normal(&mut rng, &[context_len, dim], 0.3)?);
        for name in ["q", "k", "v", "o"] {
            params.insert(format!("text.attn.{name}"), nn::fan_in_uniform(&mut rng, dim, dim)?);
        }
        Ok(TextEncoder {
            vocab,
            context_len,
            dim,
            params,
        })
    }

    pub fn from_params(vocab: Vocabulary, context_len: usize, params: TensorMap) -> Result<Self> {
        let tokens = nn::get(&params, "text.tokens")?;
        let (rows, dim) = tokens.dims2()?;
        if rows != vocab.len() {
            return Err(Error::Input(format!(
                "text encoder has {rows} word rows but the vocabulary has {}",
                vocab.len()
            )));
        }
        for name in ["text.pos", "text.attn.q", "text.attn.k", "text.attn.v", "text.attn.o"] {
            nn::get(&params, name)?;
        }
        Ok(TextEncoder {
            vocab,
            context_len,
            dim,
            params,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &TensorMap {
        &self.params
    }

    /// Input embedding row of a natural word.
    pub fn word_row(&self, word: &str) -> Result<Vec<f64>> {
        let id = self.vocab.id(word);
        Ok(nn::get(&self.params, "text.tokens")?.get(id)?.to_vec1::<f64>()?)
    }

    pub fn tokenize(&self, spec: &PromptSpec, space: PartSpace) -> Result<(Vec<String>, EncodedPrompt)> {
        let words = crate::token_codec::render_prompt(spec, space)?;
        let enc = self.vocab.encode(&words, space, self.context_len)?;
        Ok((words, enc))
    }

    /// Plain-text prompt (no pseudo-tokens allowed to be resolved).
    pub fn tokenize_text(&self, text: &str) -> Result<EncodedPrompt> {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        self.vocab.encode(&words, PartSpace::new(0, 0), self.context_len)
    }

    /// `(B, context_len, dim)` conditioning for a batch of prompts.
    pub fn encode(&self, prompts: &[EncodedPrompt], table: Option<&TokenTable>) -> Result<Tensor> {
        let words = nn::get(&self.params, "text.tokens")?;
        let vocab_rows = words.dim(0)?;
        let mut part_rows: BTreeMap<usize, usize> = BTreeMap::new();
        let mut index = Vec::with_capacity(prompts.len() * self.context_len);
        for p in prompts {
            if p.tokens.len() != self.context_len {
                return Err(Error::Input(format!(
                    "prompt has {} positions, encoder expects {}",
                    p.tokens.len(),
                    self.context_len
                )));
            }
            for t in &p.tokens {
                index.push(match *t {
                    Token::Word(id) => id as u32,
                    Token::Part(code) => {
                        let table = table.ok_or_else(|| {
                            Error::State("prompt contains part tokens but no token table was given".into())
                        })?;
                        let row = code
                            .row(table.space().num_variants)
                            .ok_or_else(|| Error::Internal("absent code in an encoded prompt".into()))?;
                        let next = part_rows.len();
                        (vocab_rows + *part_rows.entry(row).or_insert(next)) as u32
                    }
                });
            }
        }
        let all = match (table, part_rows.is_empty()) {
            (Some(table), false) => {
                let mut rows = vec![0; part_rows.len()];
                for (&row, &slot) in &part_rows {
                    rows[slot] = row;
                }
                Tensor::cat(&[words, &table.embed_rows(&rows)?], 0)?
            }
            _ => words.clone(),
        };
        let n = index.len();
        let idx = Tensor::from_vec(index, n, &nn::device())?;
        let x = all
            .index_select(&idx, 0)?
            .reshape((prompts.len(), self.context_len, self.dim))?
            .broadcast_add(nn::get(&self.params, "text.pos")?)?;
        let h = nn::layer_norm(&x)?;
        let p = |name: &str| nn::get(&self.params, name);
        let q = nn::linear(&h, p("text.attn.q")?, None)?;
        let k = nn::linear(&h, p("text.attn.k")?, None)?;
        let v = nn::linear(&h, p("text.attn.v")?, None)?;
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (self.dim as f64).sqrt())?;
        let mask = causal_mask(self.context_len)?;
        let probs = nn::softmax_last(&scores.broadcast_add(&mask)?)?;
        let mixed = nn::linear(&probs.matmul(&v)?, p("text.attn.o")?, None)?;
        nn::layer_norm(&(x + mixed)?)
    }
}

fn causal_mask(n: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..n * n)
        .map(|i| if i % n > i / n { -1e9 } else { 0.0 })
        .collect();
    Ok(Tensor::from_vec(data, (n, n), &nn::device())?)
}

/// Row-wise L2 norm, used by tests and diagnostics.
pub fn row_norms(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.sqr()?.sum(D::Minus1)?.sqrt()?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_codec::ProjectorMode;

    fn encoder() -> TextEncoder {
        TextEncoder::new(Vocabulary::default(), 12, 8, 3).unwrap()
    }

    #[test]
    fn causal_positions_ignore_later_tokens() {
        let enc = encoder();
        let a = enc.tokenize_text("a photo of a bird").unwrap();
        let b = enc.tokenize_text("a photo of a dog").unwrap();
        let out = enc.encode(&[a, b], None).unwrap().to_vec3::<f64>().unwrap();
        // Positions up to the differing word (index 5 incl. BOS) agree.
        for pos in 0..5 {
            for (x, y) in out[0][pos].iter().zip(&out[1][pos]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(out[0][5].iter().zip(&out[1][5]).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn part_tokens_need_a_table() {
        let enc = encoder();
        let space = PartSpace::new(1, 2);
        let spec = PromptSpec::new("0:1,1:2".parse().unwrap());
        let (_, p) = enc.tokenize(&spec, space).unwrap();
        assert!(matches!(enc.encode(&[p.clone()], None), Err(Error::State(_))));
        let row = enc.word_row("bird").unwrap();
        let table = TokenTable::new(space, &row, 8, ProjectorMode::Identity, 0.01, 0).unwrap();
        let out = enc.encode(&[p], Some(&table)).unwrap();
        assert_eq!(out.dims(), &[1, 12, 8]);
        assert!(row_norms(&out).unwrap().iter().all(|n| n.is_finite()));
    }
}
