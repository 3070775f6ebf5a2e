//! Decoder-block generators.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{attr, EltwiseOp, OpKind, OpNode, OperatorGraph, Phase, Precision, TensorMeta, TensorRef, TensorRole};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub num_experts: u64,
    pub top_k: u64,
    pub expert_ffn_hidden: u64,
    /// Optional per-expert multipliers on the uniform token share.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub load_factor: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_size: u64,
    pub num_heads: u64,
    pub num_kv_heads: u64,
    pub head_dim: u64,
    pub ffn_hidden: u64,
    pub num_layers: u64,
    pub vocab_size: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe: Option<MoeConfig>,
    pub precision: Precision,
    pub batch: u64,
    pub seq_len: u64,
}

impl ModelConfig {
    /// A Llama-style dense configuration with square attention projections.
    pub fn dense(hidden: u64, heads: u64, ffn: u64, layers: u64, batch: u64, seq: u64) -> Self {
        ModelConfig {
            hidden_size: hidden,
            num_heads: heads,
            num_kv_heads: heads,
            head_dim: hidden / heads.max(1),
            ffn_hidden: ffn,
            num_layers: layers,
            vocab_size: 32000,
            moe: None,
            precision: Precision::Bf16,
            batch,
            seq_len: seq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("num_layers", self.num_layers),
            ("vocab_size", self.vocab_size),
            ("batch", self.batch),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model field `{name}` must be positive")));
            }
        }
        if self.num_heads * self.head_dim != self.hidden_size {
            return Err(Error::config(format!(
                "num_heads ({}) x head_dim ({}) != hidden_size ({})",
                self.num_heads, self.head_dim, self.hidden_size
            )));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_heads ({}) not a multiple of num_kv_heads ({})",
                self.num_heads, self.num_kv_heads
            )));
        }
        if let Some(m) = &self.moe {
            if m.num_experts == 0 || m.top_k == 0 || m.expert_ffn_hidden == 0 {
                return Err(Error::config("moe fields must be positive"));
            }
            if m.top_k > m.num_experts {
                return Err(Error::config(format!("top_k ({}) exceeds num_experts ({})", m.top_k, m.num_experts)));
            }
            if !m.load_factor.is_empty() && m.load_factor.len() as u64 != m.num_experts {
                return Err(Error::config("load_factor must list one entry per expert"));
            }
            if m.load_factor.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
                return Err(Error::config("load factors must be positive"));
            }
        }
        Ok(())
    }

    /// Tokens routed to expert `e` under the uniform-load assumption,
    /// scaled by the expert's load factor when one is given.
    pub fn expert_tokens(&self, tokens: u64, e: usize) -> u64 {
        let Some(m) = &self.moe else { return tokens };
        let share = tokens * m.top_k;
        match m.load_factor.get(e) {
            None => share.div_ceil(m.num_experts),
            Some(f) => libm::ceil(share as f64 * f / m.num_experts as f64).max(1.0) as u64,
        }
    }

    /// Forward FLOPs of the embedding lookup and output projection, counted
    /// once per model rather than per block.
    pub fn head_flops(&self) -> u64 {
        2 * self.batch * self.seq_len * self.hidden_size * self.vocab_size
    }

    /// KV-cache bytes for the whole model at context length `ctx`.
    pub fn kv_cache_bytes(&self, ctx: u64) -> u64 {
        2 * self.num_layers * self.num_kv_heads * self.head_dim * ctx * self.batch * self.precision.bytes()
    }
}

/// Dense or MoE block depending on `cfg.moe`.
pub fn build_block(cfg: &ModelConfig) -> Result<OperatorGraph> {
    if cfg.moe.is_some() {
        build_moe_block(cfg)
    } else {
        build_dense_block(cfg)
    }
}

pub fn build_dense_block(cfg: &ModelConfig) -> Result<OperatorGraph> {
    if cfg.moe.is_some() {
        return Err(Error::config("build_dense_block called with a MoE configuration"));
    }
    Builder::new(cfg)?.block(cfg.seq_len, 0)
}

pub fn build_moe_block(cfg: &ModelConfig) -> Result<OperatorGraph> {
    if cfg.moe.is_none() {
        return Err(Error::config("build_moe_block requires a `moe` section"));
    }
    Builder::new(cfg)?.block(cfg.seq_len, 0)
}

/// One prefill chunk of `chunk` new tokens attending over `cached` earlier
/// tokens held in the KV cache.
pub fn build_prefill_chunk(cfg: &ModelConfig, chunk: u64, cached: u64) -> Result<OperatorGraph> {
    if chunk == 0 {
        return Err(Error::config("prefill chunk must be positive"));
    }
    Builder::new(cfg)?.block(chunk, cached)
}

/// One decode step: a single new token per sequence over `context` cached tokens.
pub fn build_decode_block(cfg: &ModelConfig, context: u64) -> Result<OperatorGraph> {
    Builder::new(cfg)?.block(1, context)
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    g: OperatorGraph,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut g = OperatorGraph::new();
        g.block_multiplier = cfg.num_layers;
        Ok(Builder { cfg, g })
    }

    fn act(&self, shape: &[u64]) -> TensorMeta {
        TensorMeta::new(shape.to_vec(), self.cfg.precision, TensorRole::Activation)
    }

    fn weight(&mut self, name: &str, shape: &[u64]) -> TensorRef {
        self.g.add_input(name, TensorMeta::new(shape.to_vec(), self.cfg.precision, TensorRole::Weight))
    }

    fn node(&mut self, id: &str, kind: OpKind, inputs: Vec<TensorRef>, out: &[u64], part: &str) -> OpNode {
        OpNode::new(id, kind, Phase::Forward)
            .with_inputs(inputs)
            .with_output(self.act(out))
            .with_attr(attr::BLOCK_PART, part)
    }

    fn block(mut self, seq: u64, cached: u64) -> Result<OperatorGraph> {
        let c = self.cfg;
        let (b, h) = (c.batch, c.hidden_size);
        let qd = c.num_heads * c.head_dim;
        let kvd = c.num_kv_heads * c.head_dim;
        let x = self.g.add_input("x", self.act(&[b, seq, h]));
        let k_cache = (cached > 0).then(|| {
            let meta = TensorMeta::new(alloc::vec![b, cached, kvd], c.precision, TensorRole::KvCache);
            (self.g.add_input("k_cache", meta.clone()), self.g.add_input("v_cache", meta))
        });

        let w = self.weight("attn_norm.w", &[h]);
        let n = self.node("attn_norm", OpKind::RmsNorm, alloc::vec![x.clone(), w], &[b, seq, h], "other");
        let xn = self.g.push(n.with_attr(attr::TP_REGION_IN, true));

        let proj = |this: &mut Self, id: &str, wname: &str, out: u64| {
            let w = this.weight(wname, &[h, out]);
            let n = this.node(id, OpKind::Matmul, alloc::vec![xn.clone(), w], &[b, seq, out], "attention");
            this.g.push(n.with_attr(attr::SHARD, "col"))
        };
        let q = proj(&mut self, "q_proj", "wq", qd);
        let k = proj(&mut self, "k_proj", "wk", kvd);
        let v = proj(&mut self, "v_proj", "wv", kvd);

        let mut attn_in = alloc::vec![q];
        if let Some((kc, vc)) = k_cache {
            attn_in.extend([kc, vc]);
        }
        attn_in.extend([k, v]);
        let n = self
            .node("attention", OpKind::Attention, attn_in, &[b, seq, qd], "attention")
            .with_attr(attr::SHARD, "attn")
            .with_attr(attr::HEADS, c.num_heads)
            .with_attr(attr::KV_HEADS, c.num_kv_heads)
            .with_attr(attr::HEAD_DIM, c.head_dim)
            .with_attr(attr::CAUSAL, true);
        let a = self.g.push(n);

        let wo = self.weight("wo", &[qd, h]);
        let n = self.node("o_proj", OpKind::Matmul, alloc::vec![a, wo], &[b, seq, h], "attention");
        let o = self.g.push(n.with_attr(attr::SHARD, "row").with_attr(attr::TP_REGION_OUT, true));
        let n = self.node("attn_residual", OpKind::Elementwise(EltwiseOp::Add), alloc::vec![x, o], &[b, seq, h], "other");
        let r1 = self.g.push(n);

        let w = self.weight("ffn_norm.w", &[h]);
        let n = self.node("ffn_norm", OpKind::RmsNorm, alloc::vec![r1.clone(), w], &[b, seq, h], "other");
        let hn = self.g.push(n.with_attr(attr::TP_REGION_IN, true));

        let f = if c.moe.is_some() { self.moe_ffn(hn, seq)? } else { self.dense_ffn(hn, seq, "", c.ffn_hidden, None) };
        let n = self.node("ffn_residual", OpKind::Elementwise(EltwiseOp::Add), alloc::vec![r1, f], &[b, seq, h], "other");
        let y = self.g.push(n);
        self.g.add_output("y", y);
        self.g.validate()?;
        Ok(self.g)
    }

    /// Gate/up/down FFN. With `tokens` set, the FFN runs on a flattened
    /// `[tokens, H]` expert input.
    fn dense_ffn(&mut self, input: TensorRef, seq: u64, suffix: &str, ffn: u64, tokens: Option<(usize, u64)>) -> TensorRef {
        let c = self.cfg;
        let h = c.hidden_size;
        let lead: Vec<u64> = match tokens {
            Some((_, t)) => alloc::vec![t],
            None => alloc::vec![c.batch, seq],
        };
        let shape = |last: u64| {
            let mut s = lead.clone();
            s.push(last);
            s
        };
        let tag = |n: OpNode| match tokens {
            Some((e, t)) => n.with_attr(attr::EXPERT, e as u64).with_attr(attr::TOKENS, t).with_attr(attr::MOE, true),
            None => n,
        };
        let id = |base: &str| format!("{base}{suffix}");

        let wg = self.weight(&id("w_gate"), &[h, ffn]);
        let wu = self.weight(&id("w_up"), &[h, ffn]);
        let wd = self.weight(&id("w_down"), &[ffn, h]);
        let n = self.node(&id("gate_proj"), OpKind::Matmul, alloc::vec![input.clone(), wg], &shape(ffn), "ffn");
        let gate = self.g.push(tag(n.with_attr(attr::SHARD, "col")));
        let n = self.node(&id("up_proj"), OpKind::Matmul, alloc::vec![input, wu], &shape(ffn), "ffn");
        let up = self.g.push(tag(n.with_attr(attr::SHARD, "col")));
        let n = self.node(&id("act"), OpKind::Elementwise(EltwiseOp::Silu), alloc::vec![gate], &shape(ffn), "ffn");
        let act = self.g.push(tag(n.with_attr(attr::SHARD, "local")));
        let n = self.node(&id("gate_mul"), OpKind::Elementwise(EltwiseOp::Mul), alloc::vec![act, up], &shape(ffn), "ffn");
        let prod = self.g.push(tag(n.with_attr(attr::SHARD, "local")));
        let n = self.node(&id("down_proj"), OpKind::Matmul, alloc::vec![prod, wd], &shape(h), "ffn");
        let n = n.with_attr(attr::SHARD, "row");
        let n = if tokens.is_none() { n.with_attr(attr::TP_REGION_OUT, true) } else { n };
        self.g.push(tag(n))
    }

    fn moe_ffn(&mut self, input: TensorRef, seq: u64) -> Result<TensorRef> {
        let c = self.cfg;
        let m = c.moe.as_ref().unwrap();
        let (b, h, e) = (c.batch, c.hidden_size, m.num_experts);
        let tokens = b * seq;
        let routing = |n: OpNode| n.with_attr(attr::SHARD, "rep").with_attr(attr::MOE_ROUTING, true);

        let wr = self.weight("router.w", &[h, e]);
        let n = self.node("router", OpKind::Matmul, alloc::vec![input.clone(), wr], &[b, seq, e], "ffn");
        let logits = self.g.push(routing(n));
        let n = self.node("router_topk", OpKind::RouterTopk, alloc::vec![logits], &[b, seq, m.top_k], "ffn");
        let topk = self.g.push(routing(n.with_attr(attr::TOP_K, m.top_k)));

        let per_expert: Vec<u64> = (0..e as usize).map(|i| c.expert_tokens(tokens, i)).collect();
        let mut dispatch = OpNode::new("dispatch", OpKind::Elementwise(EltwiseOp::Mul), Phase::Forward)
            .with_inputs([input, topk])
            .with_attr(attr::BLOCK_PART, "ffn");
        for &t in &per_expert {
            dispatch = dispatch.with_output(self.act(&[t, h]));
        }
        let dispatch = routing(dispatch);
        let did = dispatch.id.clone();
        self.g.push(dispatch);

        let mut outs = Vec::new();
        for (i, &t) in per_expert.iter().enumerate() {
            let src = TensorRef::output(did.clone(), i);
            outs.push(self.dense_ffn(src, seq, &format!(".e{i}"), m.expert_ffn_hidden, Some((i, t))));
        }
        let n = self
            .node("combine", OpKind::Elementwise(EltwiseOp::Add), outs, &[b, seq, h], "ffn")
            .with_attr(attr::REDUCE, true)
            .with_attr(attr::TP_REGION_OUT, true);
        Ok(self.g.push(routing(n)))
    }
}
