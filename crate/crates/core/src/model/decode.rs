//! Greedy and beam-search decoding.
//!
//! Both searches run over a `SeqScorer`, so tests can drive them with
//! hand-built distributions and exhaustive enumeration oracles. Scores are
//! raw sums of token log-probabilities with no length normalization; a
//! finished hypothesis is frozen, and the search stops once the best
//! unfinished hypothesis can no longer beat the best finished one.

use crate::adapt::{Attach, LoraAdapter};
use crate::error::{Error, Result};
use crate::model::forward::{bind_params, decode_logits, encode, EncoderOut, Trainable};
use crate::model::{ModelParams, BOS, EOS};
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// Next-token log-probabilities given a generated prefix.
pub trait SeqScorer {
    fn vocab(&self) -> usize;
    fn logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam_width: 4, max_len: 10 }
    }
}

/// Argmax decoding. Emits tokens until EOS or `max_len` steps; the returned
/// sequence excludes EOS, the score includes its log-probability when the
/// sequence terminated on EOS. Ties break toward the lowest token id.
pub fn greedy<S: SeqScorer>(scorer: &S, max_len: usize) -> Result<(Vec<u32>, f64)> {
    if max_len == 0 {
        return Err(Error::InvalidParameter("greedy: max_len must be >= 1".into()));
    }
    let mut out: Vec<u32> = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = scorer.logprobs(&out)?;
        let tok = argmax(&lp);
        score += lp[tok];
        if tok as u32 == EOS {
            return Ok((out, score));
        }
        out.push(tok as u32);
    }
    Ok((out, score))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<u32>,
    score: f64,
}

/// Beam search with the given width. Width 1 reproduces `greedy` exactly,
/// including tie-breaking and score accounting.
pub fn beam<S: SeqScorer>(scorer: &S, width: usize, max_len: usize) -> Result<(Vec<u32>, f64)> {
    if width == 0 || max_len == 0 {
        return Err(Error::InvalidParameter(
            "beam: width and max_len must be >= 1".into(),
        ));
    }
    let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (score, live index, token)
        let mut candidates: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * scorer.vocab());
        for (bi, hyp) in live.iter().enumerate() {
            let lp = scorer.logprobs(&hyp.tokens)?;
            for (tok, &l) in lp.iter().enumerate() {
                candidates.push((hyp.score + l, bi, tok as u32));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .expect("finite scores")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(width);
        for &(score, bi, tok) in candidates.iter().take(width) {
            if tok == EOS {
                finished.push(Hyp { tokens: live[bi].tokens.clone(), score });
            } else {
                let mut tokens = live[bi].tokens.clone();
                tokens.push(tok);
                next.push(Hyp { tokens, score });
            }
        }
        live = next;
        if let Some(best_fin) = best_of(&finished) {
            if let Some(best_live) = best_of(&live) {
                // Extending only adds log-probabilities <= 0.
                if best_live.score <= best_fin.score {
                    break;
                }
            }
        }
    }

    let winner = match (best_of(&finished), best_of(&live)) {
        (Some(f), _) => f,
        (None, Some(l)) => l,
        (None, None) => return Err(Error::State("beam: no hypotheses".into())),
    };
    Ok((winner.tokens.clone(), winner.score))
}

fn best_of(hyps: &[Hyp]) -> Option<&Hyp> {
    hyps.iter().reduce(|best, h| if h.score > best.score { h } else { best })
}

// ── Model-backed scorer ─────────────────────────────────────────────

/// Encodes the input once, then scores decoder continuations. Evaluation
/// mode: no dropout, nothing trainable.
pub struct ModelScorer<'a> {
    params: &'a ModelParams,
    lora: Option<&'a LoraAdapter>,
    enc_out: Tensor,
    enc_valid: Vec<usize>,
    precision: Precision,
    max_steps: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(
        params: &'a ModelParams,
        attach: Attach<'a>,
        input: &[u32],
        precision: Precision,
    ) -> Result<Self> {
        let mut tape = Tape::new(precision);
        let bound = bind_params(&mut tape, params, attach.lora, Trainable::none())?;
        let prompt_node = match attach.prompt {
            Some(p) => Some((tape.leaf(&p.rows, false)?, p.len())),
            None => None,
        };
        let enc = encode(
            &mut tape,
            &bound,
            &params.config,
            prompt_node,
            &[input.to_vec()],
            &mut None,
        )?;
        let enc_out = tape.value_tensor(enc.node);
        Ok(ModelScorer {
            params,
            lora: attach.lora,
            enc_out,
            enc_valid: enc.valid,
            precision,
            max_steps: params.config.max_seq_len - 1,
        })
    }

    /// Longest decodable sequence for this model.
    pub fn step_limit(&self) -> usize {
        self.max_steps
    }
}

impl SeqScorer for ModelScorer<'_> {
    fn vocab(&self) -> usize {
        self.params.config.vocab_size
    }

    fn logprobs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.len() >= self.max_steps {
            // Past the positional table; force EOS.
            let mut lp = vec![f64::NEG_INFINITY; self.vocab()];
            lp[EOS as usize] = 0.0;
            return Ok(lp);
        }
        let mut tape = Tape::new(self.precision);
        let bound = bind_params(&mut tape, self.params, self.lora, Trainable::none())?;
        let enc_node = tape.constant(&self.enc_out)?;
        let enc = EncoderOut {
            node: enc_node,
            key_len: self.enc_out.shape[1],
            valid: self.enc_valid.clone(),
        };
        let t_len = prefix.len() + 1;
        let mut dec_in = Vec::with_capacity(t_len);
        dec_in.push(BOS);
        dec_in.extend_from_slice(prefix);
        let logits = decode_logits(
            &mut tape,
            &bound,
            &self.params.config,
            &enc,
            &dec_in,
            1,
            t_len,
            &[t_len],
            &mut None,
        )?;
        let v = self.vocab();
        let row = &tape.value(logits)[(t_len - 1) * v..t_len * v];
        Ok(log_softmax(row))
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
    let lse = mx + z.ln();
    row.iter().map(|v| v - lse).collect()
}

/// Argmax decode of one input through the model.
pub fn greedy_decode(
    params: &ModelParams,
    attach: Attach<'_>,
    input: &[u32],
    max_len: usize,
    precision: Precision,
) -> Result<Vec<u32>> {
    let scorer = ModelScorer::new(params, attach, input, precision)?;
    let limit = max_len.min(scorer.step_limit());
    Ok(greedy(&scorer, limit)?.0)
}

/// Beam-search decode of one input through the model.
pub fn beam_decode(
    params: &ModelParams,
    attach: Attach<'_>,
    input: &[u32],
    config: DecodeConfig,
    precision: Precision,
) -> Result<Vec<u32>> {
    let scorer = ModelScorer::new(params, attach, input, precision)?;
    let limit = config.max_len.min(scorer.step_limit());
    Ok(beam(&scorer, config.beam_width, limit)?.0)
}
