//! Removable adapters: soft prompts and low-rank (LoRA) updates.
//!
//! Both attach to a frozen or trainable model without touching its weights.
//! A soft prompt is a `p × e` matrix prepended to the embedded encoder
//! input; a LoRA adapter reparameterizes selected attention projections as
//! `W + (alpha / r) · A · B`. At off-task inference time adapters are simply
//! removed, restoring the base model exactly.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Trainable prompt matrix with a task tag for multi-task routing.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub task_tag: String,
    /// [prompt_length, d_model]
    pub rows: Tensor,
}

impl SoftPrompt {
    pub fn len(&self) -> usize {
        self.rows.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.shape[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptInit {
    /// Copy rows sampled without replacement from the token embedding matrix.
    VocabSample,
    /// I.i.d. uniform on (-0.5, 0.5); used by the random-prompt ablation.
    Uniform,
}

impl std::fmt::Display for PromptInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptInit::VocabSample => write!(f, "vocab_sample"),
            PromptInit::Uniform => write!(f, "uniform"),
        }
    }
}

impl std::str::FromStr for PromptInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vocab_sample" => Ok(PromptInit::VocabSample),
            "uniform" => Ok(PromptInit::Uniform),
            other => Err(Error::InvalidParameter(format!(
                "unknown prompt init `{other}`"
            ))),
        }
    }
}

pub fn init_prompt(
    params: &ModelParams,
    prompt_len: usize,
    strategy: PromptInit,
    seed: u64,
    task_tag: &str,
) -> Result<SoftPrompt> {
    let e = params.config.d_model;
    let mut rng = Rng::stream(seed, &format!("prompt_init.{task_tag}"));
    let rows = match strategy {
        PromptInit::VocabSample => {
            let embed = params.get("embed.tokens")?;
            let vocab = embed.shape[0];
            if prompt_len > vocab {
                return Err(Error::InvalidParameter(format!(
                    "vocab_sample prompt length {prompt_len} > vocab size {vocab}"
                )));
            }
            let picks = rng.sample_distinct(vocab, prompt_len);
            let mut data = Vec::with_capacity(prompt_len * e);
            for row in picks {
                data.extend_from_slice(embed.row(row));
            }
            Tensor::new(vec![prompt_len, e], data)?
        }
        PromptInit::Uniform => Tensor::uniform(&[prompt_len, e], -0.5, 0.5, &mut rng),
    };
    Ok(SoftPrompt { task_tag: task_tag.to_string(), rows })
}

// ── LoRA ────────────────────────────────────────────────────────────

/// Which attention projections an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
}

impl LoraTarget {
    fn suffix(self) -> &'static str {
        match self {
            LoraTarget::Q => "wq",
            LoraTarget::K => "wk",
            LoraTarget::V => "wv",
            LoraTarget::O => "wo",
        }
    }
}

/// Canonical attachment set: query and value projections.
pub const LORA_DEFAULT_TARGETS: [LoraTarget; 2] = [LoraTarget::Q, LoraTarget::V];

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    /// [d, r], normal(0, 0.02) at init.
    pub a: Tensor,
    /// [r, d], zero at init so the adapter starts as an exact identity.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    /// Keyed by the name of the projection the pair attaches to.
    pub mats: BTreeMap<String, LoraPair>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub fn init_lora(
    params: &ModelParams,
    rank: usize,
    alpha: f64,
    targets: &[LoraTarget],
    seed: u64,
) -> Result<LoraAdapter> {
    let d = params.config.d_model;
    if rank == 0 {
        return Err(Error::InvalidParameter("lora rank must be >= 1".into()));
    }
    if rank > d {
        return Err(Error::InvalidParameter(format!(
            "lora rank {rank} > projection dim {d}"
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidParameter("lora attachment set is empty".into()));
    }
    let mut rng = Rng::stream(seed, "lora_init");
    let mut mats = BTreeMap::new();
    for name in params.names() {
        let attached = targets
            .iter()
            .any(|t| name.ends_with(&format!(".{}", t.suffix())));
        if !attached {
            continue;
        }
        let a = Tensor::randn(&[d, rank], 0.02, &mut rng);
        let b = Tensor::zeros(&[rank, d]);
        mats.insert(name.clone(), LoraPair { a, b });
    }
    Ok(LoraAdapter { rank, alpha, mats })
}

/// What attaches to the model for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct Attach<'a> {
    pub prompt: Option<&'a SoftPrompt>,
    pub lora: Option<&'a LoraAdapter>,
}

impl<'a> Attach<'a> {
    pub fn none() -> Self {
        Attach { prompt: None, lora: None }
    }

    pub fn prompt(p: &'a SoftPrompt) -> Self {
        Attach { prompt: Some(p), lora: None }
    }

    pub fn lora(l: &'a LoraAdapter) -> Self {
        Attach { prompt: None, lora: Some(l) }
    }
}
