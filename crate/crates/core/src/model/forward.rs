//! Teacher-forced forward pass: encoder, decoder, and the training loss.
//!
//! Both adaptation stages run through this one code path with different
//! trainability masks; evaluating with no prompt is exactly the zero-length
//! prompt path.

use std::collections::BTreeMap;

use crate::adapt::{Attach, LoraAdapter, SoftPrompt};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, BOS, EOS, PAD};
use crate::rng::Rng;
use crate::tape::{mask_blocked, NodeId, Tape};
use crate::tensor::Tensor;

/// Which attached components receive gradients this pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trainable {
    pub model: bool,
    pub prompt: bool,
    pub lora: bool,
}

impl Trainable {
    pub fn none() -> Self {
        Trainable::default()
    }

    pub fn model_only() -> Self {
        Trainable { model: true, prompt: false, lora: false }
    }

    pub fn prompt_only() -> Self {
        Trainable { model: false, prompt: true, lora: false }
    }

    pub fn lora_only() -> Self {
        Trainable { model: false, prompt: false, lora: true }
    }

    pub fn joint() -> Self {
        Trainable { model: true, prompt: true, lora: false }
    }
}

/// One teacher-forcing batch.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Model parameters registered on a tape, with LoRA-effective weights
/// substituted where an adapter is attached.
pub struct Bound {
    pub param_nodes: BTreeMap<String, NodeId>,
    pub lora_nodes: BTreeMap<String, NodeId>,
    effective: BTreeMap<String, NodeId>,
}

impl Bound {
    fn weight(&self, name: &str) -> NodeId {
        *self
            .effective
            .get(name)
            .or_else(|| self.param_nodes.get(name))
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }
}

pub fn bind_params(
    tape: &mut Tape,
    params: &ModelParams,
    lora: Option<&LoraAdapter>,
    trainable: Trainable,
) -> Result<Bound> {
    let mut param_nodes = BTreeMap::new();
    for (name, t) in params.iter() {
        param_nodes.insert(name.clone(), tape.leaf(t, trainable.model)?);
    }
    let mut lora_nodes = BTreeMap::new();
    let mut effective = BTreeMap::new();
    if let Some(adapter) = lora {
        for (target, pair) in &adapter.mats {
            let base = *param_nodes
                .get(target)
                .ok_or_else(|| Error::State(format!("lora target `{target}` not found")))?;
            let a = tape.leaf(&pair.a, trainable.lora)?;
            let b = tape.leaf(&pair.b, trainable.lora)?;
            lora_nodes.insert(format!("lora.{target}.a"), a);
            lora_nodes.insert(format!("lora.{target}.b"), b);
            let delta = tape.matmul(a, b, false)?;
            let scaled = tape.scale(delta, adapter.scale())?;
            effective.insert(target.clone(), tape.add(base, scaled)?);
        }
    }
    Ok(Bound { param_nodes, lora_nodes, effective })
}

/// Dropout context: present only in training mode.
pub struct DropoutCtx<'a> {
    pub rng: &'a mut Rng,
    pub rate: f64,
}

fn maybe_dropout(tape: &mut Tape, x: NodeId, ctx: &mut Option<DropoutCtx<'_>>) -> Result<NodeId> {
    match ctx {
        Some(d) if d.rate > 0.0 => tape.dropout(x, d.rate, d.rng),
        _ => Ok(x),
    }
}

pub struct EncoderOut {
    pub node: NodeId,
    /// Total key length (prompt + padded input length).
    pub key_len: usize,
    /// Valid key count per batch element (prompt rows + real tokens).
    pub valid: Vec<usize>,
}

fn attention(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x_q: NodeId,
    x_kv: NodeId,
    heads: usize,
    mask: &Tensor,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<NodeId> {
    let q = tape.matmul(x_q, bound.weight(&format!("{prefix}.wq")), false)?;
    let k = tape.matmul(x_kv, bound.weight(&format!("{prefix}.wk")), false)?;
    let v = tape.matmul(x_kv, bound.weight(&format!("{prefix}.wv")), false)?;
    let scores = tape.attn_scores(q, k, heads)?;
    let probs = tape.masked_softmax(scores, mask)?;
    let ctx = tape.attn_mix(probs, v, heads)?;
    let out = tape.matmul(ctx, bound.weight(&format!("{prefix}.wo")), false)?;
    maybe_dropout(tape, out, dropout)
}

fn mlp(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: NodeId,
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<NodeId> {
    let h = tape.matmul(x, bound.weight(&format!("{prefix}.w1")), false)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, bound.weight(&format!("{prefix}.w2")), false)?;
    maybe_dropout(tape, out, dropout)
}

/// Run the encoder over a padded batch, optionally with a prompt prepended
/// after the positional embeddings are added (prompt rows carry their own
/// learned values and no position).
pub fn encode(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    prompt_node: Option<(NodeId, usize)>,
    inputs: &[Vec<u32>],
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<EncoderOut> {
    let b = inputs.len();
    if b == 0 {
        return Err(Error::InvalidParameter("encode: empty batch".into()));
    }
    let p = prompt_node.map(|(_, len)| len).unwrap_or(0);
    let mut max_len = 0;
    for (i, seq) in inputs.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::InvalidParameter(format!("encode: example {i} is empty")));
        }
        if seq.len() + p > config.max_seq_len {
            return Err(Error::TooLong(format!(
                "example {i}: input length {} + prompt length {p} exceeds max_seq_len {}",
                seq.len(),
                config.max_seq_len
            )));
        }
        max_len = max_len.max(seq.len());
    }

    let mut ids = Vec::with_capacity(b * max_len);
    for seq in inputs {
        ids.extend_from_slice(seq);
        ids.resize(ids.len() + (max_len - seq.len()), PAD);
    }

    let mut x = tape.embed(bound.weight("embed.tokens"), &ids, &[b, max_len])?;
    x = tape.add_rows(x, bound.weight("embed.enc_pos"), 0)?;
    x = maybe_dropout(tape, x, dropout)?;
    if let Some((node, len)) = prompt_node {
        if len > 0 {
            x = tape.prepend_rows(node, x)?;
        }
    }

    let s = p + max_len;
    let valid: Vec<usize> = inputs.iter().map(|seq| p + seq.len()).collect();
    // Key-padding mask, shared by every encoder layer.
    let mut mask = Tensor::zeros(&[b, s, s]);
    for (bi, &vb) in valid.iter().enumerate() {
        for i in 0..s {
            for j in vb..s {
                mask.data[(bi * s + i) * s + j] = mask_blocked();
            }
        }
    }

    for layer in 0..config.n_enc_layers {
        let prefix = format!("enc.{layer}");
        let h = tape.rms_norm(x, bound.weight(&format!("{prefix}.attn.norm")))?;
        let attn = attention(
            tape,
            bound,
            &format!("{prefix}.attn"),
            h,
            h,
            config.n_heads,
            &mask,
            dropout,
        )?;
        x = tape.add(x, attn)?;
        let h = tape.rms_norm(x, bound.weight(&format!("{prefix}.mlp.norm")))?;
        let m = mlp(tape, bound, &format!("{prefix}.mlp"), h, dropout)?;
        x = tape.add(x, m)?;
    }
    let node = tape.rms_norm(x, bound.weight("enc.final_norm"))?;
    Ok(EncoderOut { node, key_len: s, valid })
}

/// Run the decoder over teacher-forcing inputs and return logits [B, T, V].
pub fn decode_logits(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    enc: &EncoderOut,
    dec_in: &[u32],
    b: usize,
    t_len: usize,
    dec_valid: &[usize],
    dropout: &mut Option<DropoutCtx<'_>>,
) -> Result<NodeId> {
    let mut y = tape.embed(bound.weight("embed.tokens"), dec_in, &[b, t_len])?;
    y = tape.add_rows(y, bound.weight("embed.dec_pos"), 0)?;
    y = maybe_dropout(tape, y, dropout)?;

    // Causal + key-padding mask for decoder self-attention.
    let mut self_mask = Tensor::zeros(&[b, t_len, t_len]);
    for bi in 0..b {
        for i in 0..t_len {
            for j in 0..t_len {
                if j > i || j >= dec_valid[bi] {
                    self_mask.data[(bi * t_len + i) * t_len + j] = mask_blocked();
                }
            }
        }
    }
    // Cross-attention masks padded encoder keys.
    let s = enc.key_len;
    let mut cross_mask = Tensor::zeros(&[b, t_len, s]);
    for bi in 0..b {
        for i in 0..t_len {
            for j in enc.valid[bi]..s {
                cross_mask.data[(bi * t_len + i) * s + j] = mask_blocked();
            }
        }
    }

    for layer in 0..config.n_dec_layers {
        let prefix = format!("dec.{layer}");
        let h = tape.rms_norm(y, bound.weight(&format!("{prefix}.self.norm")))?;
        let attn = attention(
            tape,
            bound,
            &format!("{prefix}.self"),
            h,
            h,
            config.n_heads,
            &self_mask,
            dropout,
        )?;
        y = tape.add(y, attn)?;

        let h = tape.rms_norm(y, bound.weight(&format!("{prefix}.cross.norm")))?;
        let attn = attention(
            tape,
            bound,
            &format!("{prefix}.cross"),
            h,
            enc.node,
            config.n_heads,
            &cross_mask,
            dropout,
        )?;
        y = tape.add(y, attn)?;

        let h = tape.rms_norm(y, bound.weight(&format!("{prefix}.mlp.norm")))?;
        let m = mlp(tape, bound, &format!("{prefix}.mlp"), h, dropout)?;
        y = tape.add(y, m)?;
    }
    y = tape.rms_norm(y, bound.weight("dec.final_norm"))?;
    // Shared embedding: logits = states · E^T.
    tape.matmul(y, bound.weight("embed.tokens"), true)
}

/// One task group of a (possibly multi-task) forward pass.
pub struct GroupSpec<'a> {
    pub prompt: Option<&'a SoftPrompt>,
    pub batch: &'a Batch,
}

pub struct GroupOut {
    /// Mean loss over this group's target positions.
    pub loss: NodeId,
    pub logits: NodeId,
    pub npos: f64,
    pub prompt_node: Option<NodeId>,
}

pub struct LossGraph {
    /// Combined loss: the global mean over every group's target positions.
    pub loss: NodeId,
    pub bound: Bound,
    pub groups: Vec<GroupOut>,
}

/// Teacher-forced label-smoothed loss over one or more task groups sharing
/// the model parameters. Groups with their own prompts route each batch
/// through that prompt; the combined loss weights groups by target-position
/// counts so it equals the global mean.
pub fn forward_loss_multi(
    tape: &mut Tape,
    params: &ModelParams,
    lora: Option<&LoraAdapter>,
    groups: &[GroupSpec<'_>],
    smoothing: f64,
    trainable: Trainable,
    mut dropout: Option<DropoutCtx<'_>>,
) -> Result<LossGraph> {
    if groups.is_empty() {
        return Err(Error::InvalidParameter("forward_loss: no groups".into()));
    }
    let bound = bind_params(tape, params, lora, trainable)?;
    let mut outs = Vec::with_capacity(groups.len());
    for g in groups {
        let batch = g.batch;
        if batch.is_empty() || batch.inputs.len() != batch.targets.len() {
            return Err(Error::InvalidParameter(format!(
                "forward_loss: batch of {} inputs / {} targets",
                batch.inputs.len(),
                batch.targets.len()
            )));
        }
        let prompt_node = match g.prompt {
            Some(pr) => {
                if pr.dim() != params.config.d_model {
                    return Err(Error::ShapeMismatch {
                        op: "attach_prompt",
                        lhs: pr.rows.shape.clone(),
                        rhs: vec![params.config.d_model],
                    });
                }
                Some((tape.leaf(&pr.rows, trainable.prompt)?, pr.len()))
            }
            None => None,
        };
        let enc = encode(tape, &bound, &params.config, prompt_node, &batch.inputs, &mut dropout)?;

        let b = batch.len();
        let mut t_max = 0;
        for (i, tgt) in batch.targets.iter().enumerate() {
            if tgt.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "forward_loss: example {i} has an empty target"
                )));
            }
            if tgt.len() + 1 > params.config.max_seq_len {
                return Err(Error::TooLong(format!(
                    "example {i}: target length {} exceeds max_seq_len {}",
                    tgt.len(),
                    params.config.max_seq_len
                )));
            }
            t_max = t_max.max(tgt.len() + 1);
        }
        let mut dec_in = Vec::with_capacity(b * t_max);
        let mut labels = Vec::with_capacity(b * t_max);
        let mut mask = Vec::with_capacity(b * t_max);
        let mut dec_valid = Vec::with_capacity(b);
        for tgt in &batch.targets {
            let tb = tgt.len() + 1;
            dec_valid.push(tb);
            dec_in.push(BOS);
            dec_in.extend_from_slice(tgt);
            dec_in.resize(dec_in.len() + (t_max - tb), PAD);
            labels.extend_from_slice(tgt);
            labels.push(EOS);
            labels.resize(labels.len() + (t_max - tb), PAD);
            for t in 0..t_max {
                mask.push(if t < tb { 1.0 } else { 0.0 });
            }
        }
        let logits = decode_logits(
            tape,
            &bound,
            &params.config,
            &enc,
            &dec_in,
            b,
            t_max,
            &dec_valid,
            &mut dropout,
        )?;
        let loss = tape.cross_entropy_ls(logits, &labels, &mask, smoothing)?;
        let npos: f64 = mask.iter().sum();
        outs.push(GroupOut {
            loss,
            logits,
            npos,
            prompt_node: prompt_node.map(|(n, _)| n),
        });
    }

    let total: f64 = outs.iter().map(|o| o.npos).sum();
    let terms: Vec<(NodeId, f64)> = outs.iter().map(|o| (o.loss, o.npos / total)).collect();
    let loss = tape.weighted_sum(&terms)?;
    Ok(LossGraph { loss, bound, groups: outs })
}

/// Single-task wrapper around `forward_loss_multi`.
pub fn forward_loss(
    tape: &mut Tape,
    params: &ModelParams,
    attach: Attach<'_>,
    batch: &Batch,
    smoothing: f64,
    trainable: Trainable,
    dropout: Option<DropoutCtx<'_>>,
) -> Result<LossGraph> {
    forward_loss_multi(
        tape,
        params,
        attach.lora,
        &[GroupSpec { prompt: attach.prompt, batch }],
        smoothing,
        trainable,
        dropout,
    )
}

impl LossGraph {
    /// Gradients of the model parameters, keyed by name. Only trainable
    /// leaves carry gradients.
    pub fn model_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .param_nodes
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn lora_grads(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .lora_nodes
            .iter()
            .filter_map(|(name, &id)| tape.grad(id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    pub fn prompt_grad(&self, tape: &Tape, group: usize) -> Option<Vec<f64>> {
        self.groups[group]
            .prompt_node
            .and_then(|id| tape.grad(id).map(|g| g.to_vec()))
    }
}
