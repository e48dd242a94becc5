//! BERT-layout transformer (post-layer-norm, erf GELU, tied MLM decoder).
//! Weight matrices are stored `in × out` so a dense layer is `x · W + b`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{normal_matrix, ParamId, ParamStore};
use super::tape::{Matrix, Tape, Var};
use super::BackboneError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub intermediate_size: usize,
    pub max_position: usize,
    pub type_vocab_size: usize,
    pub layer_norm_eps: f64,
    /// Causal self-attention (decoder-only language model).
    #[serde(default)]
    pub causal: bool,
}

impl TransformerConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(BackboneError::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.vocab_size == 0 || self.max_position == 0 {
            return Err(BackboneError::Config("layers, vocabulary and positions must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
    o_w: ParamId,
    o_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct MlmIds {
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct PoolerIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pub params: ParamStore,
    word: ParamId,
    position: ParamId,
    token_type: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerIds>,
    mlm: Option<MlmIds>,
    pooler: Option<PoolerIds>,
}

pub mod names {
    pub const WORD: &str = "embeddings.word_embeddings";
    pub const POSITION: &str = "embeddings.position_embeddings";
    pub const TOKEN_TYPE: &str = "embeddings.token_type_embeddings";
    pub const EMB_LN_G: &str = "embeddings.layer_norm.weight";
    pub const EMB_LN_B: &str = "embeddings.layer_norm.bias";

    pub fn layer(i: usize, suffix: &str) -> String {
        format!("encoder.layer.{i}.{suffix}")
    }

    pub const LAYER_SUFFIXES: [&str; 16] = [
        "attention.query.weight",
        "attention.query.bias",
        "attention.key.weight",
        "attention.key.bias",
        "attention.value.weight",
        "attention.value.bias",
        "attention.output.weight",
        "attention.output.bias",
        "attention.layer_norm.weight",
        "attention.layer_norm.bias",
        "intermediate.weight",
        "intermediate.bias",
        "output.weight",
        "output.bias",
        "output.layer_norm.weight",
        "output.layer_norm.bias",
    ];

    pub const MLM_DENSE_W: &str = "mlm.transform.weight";
    pub const MLM_DENSE_B: &str = "mlm.transform.bias";
    pub const MLM_LN_G: &str = "mlm.layer_norm.weight";
    pub const MLM_LN_B: &str = "mlm.layer_norm.bias";
    pub const MLM_BIAS: &str = "mlm.bias";
    pub const POOLER_W: &str = "pooler.weight";
    pub const POOLER_B: &str = "pooler.bias";
}

/// Shape of every named tensor for a configuration, in registration order.
pub(crate) fn tensor_layout(cfg: &TransformerConfig, mlm: bool, pooler: bool) -> Vec<(String, (usize, usize), bool)> {
    let d = cfg.hidden_size;
    let f = cfg.intermediate_size;
    let mut out = vec![
        (names::WORD.to_string(), (cfg.vocab_size, d), true),
        (names::POSITION.to_string(), (cfg.max_position, d), true),
        (names::TOKEN_TYPE.to_string(), (cfg.type_vocab_size.max(1), d), true),
        (names::EMB_LN_G.to_string(), (1, d), false),
        (names::EMB_LN_B.to_string(), (1, d), false),
    ];
    for i in 0..cfg.num_layers {
        let shapes = [
            (d, d), (1, d), (d, d), (1, d), (d, d), (1, d), (d, d), (1, d),
            (1, d), (1, d), (d, f), (1, f), (f, d), (1, d), (1, d), (1, d),
        ];
        for (suffix, shape) in names::LAYER_SUFFIXES.iter().zip(shapes) {
            let decay = shape.0 > 1;
            out.push((names::layer(i, suffix), shape, decay));
        }
    }
    if mlm {
        out.push((names::MLM_DENSE_W.into(), (d, d), true));
        out.push((names::MLM_DENSE_B.into(), (1, d), false));
        out.push((names::MLM_LN_G.into(), (1, d), false));
        out.push((names::MLM_LN_B.into(), (1, d), false));
        out.push((names::MLM_BIAS.into(), (1, cfg.vocab_size), false));
    }
    if pooler {
        out.push((names::POOLER_W.into(), (d, d), true));
        out.push((names::POOLER_B.into(), (1, d), false));
    }
    out
}

impl Transformer {
    /// Seeded random initialisation: N(0, `init_std`) weights and
    /// embeddings, zero biases, unit layer-norm scales.
    pub fn random(config: TransformerConfig, seed: u64, init_std: f64) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for (name, (r, c), decay) in tensor_layout(&config, true, true) {
            let value = if name.ends_with("layer_norm.weight") {
                Matrix::ones((r, c))
            } else if name.ends_with("bias") {
                Matrix::zeros((r, c))
            } else {
                normal_matrix(&mut rng, r, c, init_std)
            };
            store.insert(&name, value, decay);
        }
        Self::from_store(config, store)
    }

    /// Binds a populated store. The MLM head and pooler are optional.
    pub fn from_store(config: TransformerConfig, params: ParamStore) -> Result<Self, BackboneError> {
        config.validate()?;
        let has = |n: &str| params.id(n).is_some();
        let mlm_present = has(names::MLM_DENSE_W);
        let pooler_present = has(names::POOLER_W);
        for (name, shape, _) in tensor_layout(&config, mlm_present, pooler_present) {
            let t = params
                .by_name(&name)
                .ok_or_else(|| BackboneError::Capability(format!("missing tensor {name}")))?;
            if t.dim() != shape {
                return Err(BackboneError::Capability(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dim(),
                    shape
                )));
            }
        }
        let id = |n: &str| params.id(n).expect("validated above");
        let layers = (0..config.num_layers)
            .map(|i| {
                let l = |s: &str| id(&names::layer(i, s));
                let sx = names::LAYER_SUFFIXES;
                LayerIds {
                    q_w: l(sx[0]),
                    q_b: l(sx[1]),
                    k_w: l(sx[2]),
                    k_b: l(sx[3]),
                    v_w: l(sx[4]),
                    v_b: l(sx[5]),
                    o_w: l(sx[6]),
                    o_b: l(sx[7]),
                    ln1_g: l(sx[8]),
                    ln1_b: l(sx[9]),
                    ff1_w: l(sx[10]),
                    ff1_b: l(sx[11]),
                    ff2_w: l(sx[12]),
                    ff2_b: l(sx[13]),
                    ln2_g: l(sx[14]),
                    ln2_b: l(sx[15]),
                }
            })
            .collect();
        let mlm = mlm_present.then(|| MlmIds {
            dense_w: id(names::MLM_DENSE_W),
            dense_b: id(names::MLM_DENSE_B),
            ln_g: id(names::MLM_LN_G),
            ln_b: id(names::MLM_LN_B),
            bias: id(names::MLM_BIAS),
        });
        let pooler = pooler_present.then(|| PoolerIds {
            w: id(names::POOLER_W),
            b: id(names::POOLER_B),
        });
        Ok(Self {
            word: id(names::WORD),
            position: id(names::POSITION),
            token_type: id(names::TOKEN_TYPE),
            emb_ln_g: id(names::EMB_LN_G),
            emb_ln_b: id(names::EMB_LN_B),
            config,
            params,
            layers,
            mlm,
            pooler,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    pub fn has_mlm_head(&self) -> bool {
        self.mlm.is_some()
    }

    pub fn has_pooler(&self) -> bool {
        self.pooler.is_some()
    }

    /// `LN(word[ids] + position[offset..offset+n] + token_type[0])`.
    pub fn embed(&self, tape: &mut Tape, ids: &[u32], position_offset: usize) -> Result<Var, BackboneError> {
        if position_offset + ids.len() > self.config.max_position {
            return Err(BackboneError::Length {
                needed: position_offset + ids.len(),
                max: self.config.max_position,
            });
        }
        if let Some(bad) = ids.iter().find(|i| **i as usize >= self.config.vocab_size) {
            return Err(BackboneError::Config(format!("token id {bad} outside vocabulary")));
        }
        let word = tape.param(self.word);
        let idx: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
        let w = tape.gather_rows(word, &idx);
        let pos_table = tape.param(self.position);
        let positions: Vec<usize> = (position_offset..position_offset + ids.len()).collect();
        let p = tape.gather_rows(pos_table, &positions);
        let tt_table = tape.param(self.token_type);
        let tt = tape.rows(tt_table, 0, 1);
        let x = tape.add(w, p);
        let x = tape.add_row(x, tt);
        let g = tape.param(self.emb_ln_g);
        let b = tape.param(self.emb_ln_b);
        Ok(tape.layer_norm(x, g, b, self.config.layer_norm_eps))
    }

    fn dense(&self, tape: &mut Tape, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// One encoder block over a `k × d` input; output has the same shape.
    pub fn layer_forward(&self, tape: &mut Tape, i: usize, x: Var) -> Var {
        let l = &self.layers[i];
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let k_len = tape.value(x).nrows();
        let q = self.dense(tape, x, l.q_w, l.q_b);
        let k = self.dense(tape, x, l.k_w, l.k_b);
        let v = self.dense(tape, x, l.v_w, l.v_b);
        let causal_mask = cfg.causal.then(|| {
            Matrix::from_shape_fn((k_len, k_len), |(r, c)| if c > r { f64::NEG_INFINITY } else { 0.0 })
        });
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for h in 0..cfg.num_heads {
            let qh = tape.columns(q, h * dh, dh);
            let kh = tape.columns(k, h * dh, dh);
            let vh = tape.columns(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(m) = &causal_mask {
                scores = tape.add_const(scores, m);
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_columns(&heads) };
        let attn_out = self.dense(tape, ctx, l.o_w, l.o_b);
        let res1 = tape.add(x, attn_out);
        let g1 = tape.param(l.ln1_g);
        let b1 = tape.param(l.ln1_b);
        let h1 = tape.layer_norm(res1, g1, b1, cfg.layer_norm_eps);
        let ff = self.dense(tape, h1, l.ff1_w, l.ff1_b);
        let ff = tape.gelu(ff);
        let ff = self.dense(tape, ff, l.ff2_w, l.ff2_b);
        let res2 = tape.add(h1, ff);
        let g2 = tape.param(l.ln2_g);
        let b2 = tape.param(l.ln2_b);
        tape.layer_norm(res2, g2, b2, cfg.layer_norm_eps)
    }

    pub fn forward_plain(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var, BackboneError> {
        let mut x = self.embed(tape, ids, 0)?;
        for i in 0..self.config.num_layers {
            x = self.layer_forward(tape, i, x);
        }
        Ok(x)
    }

    /// Deep-prompt forward pass. `prefix[i]` is `Some(p × d)` for injected
    /// layers; layer 0 must be injected. Prefix rows occupy positions
    /// `0..p` and tokens shift to `p..p+n`. Returns the token rows of the
    /// final hidden states (`n × d`).
    pub fn forward_with_prefix(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        prefix: &[Option<Var>],
    ) -> Result<Var, BackboneError> {
        let cfg = &self.config;
        if prefix.len() != cfg.num_layers {
            return Err(BackboneError::Config(format!(
                "prefix covers {} layers, backbone has {}",
                prefix.len(),
                cfg.num_layers
            )));
        }
        let Some(first) = prefix[0] else {
            return Err(BackboneError::Config("layer 0 must receive a prefix".into()));
        };
        let p = tape.value(first).nrows();
        let n = ids.len();
        if p + n > cfg.max_position {
            return Err(BackboneError::Length {
                needed: p + n,
                max: cfg.max_position,
            });
        }
        let e = self.embed(tape, ids, p)?;
        let mut x = if p == 0 { e } else { tape.concat_rows(&[first, e]) };
        for (i, injected) in prefix.iter().enumerate() {
            if i > 0 && p > 0 {
                if let Some(h) = injected {
                    if tape.value(*h).nrows() != p {
                        return Err(BackboneError::Config(format!("layer {i} prefix length differs from layer 0")));
                    }
                    let tail = tape.rows(x, p, n);
                    x = tape.concat_rows(&[*h, tail]);
                }
            }
            x = self.layer_forward(tape, i, x);
        }
        Ok(if p == 0 { x } else { tape.rows(x, p, n) })
    }

    fn mlm_transform(&self, tape: &mut Tape, hidden_row: Var) -> Result<Var, BackboneError> {
        let m = self
            .mlm
            .as_ref()
            .ok_or_else(|| BackboneError::Capability("backbone has no language-model head".into()))?;
        let t = self.dense(tape, hidden_row, m.dense_w, m.dense_b);
        let t = tape.gelu(t);
        let g = tape.param(m.ln_g);
        let b = tape.param(m.ln_b);
        Ok(tape.layer_norm(t, g, b, self.config.layer_norm_eps))
    }

    /// Vocabulary logits for one hidden row (`1 × V`), through the head
    /// whose decoder is tied to the word embeddings.
    pub fn vocab_logits(&self, tape: &mut Tape, hidden_row: Var) -> Result<Var, BackboneError> {
        let t = self.mlm_transform(tape, hidden_row)?;
        let word = tape.param(self.word);
        let logits = tape.matmul_t(t, word);
        let bias = tape.param(self.mlm.as_ref().expect("checked").bias);
        Ok(tape.add_row(logits, bias))
    }

    /// Same values as selecting `tokens` columns of [`Self::vocab_logits`],
    /// without forming the full vocabulary row.
    pub fn token_logits(&self, tape: &mut Tape, hidden_row: Var, tokens: &[u32]) -> Result<Var, BackboneError> {
        let t = self.mlm_transform(tape, hidden_row)?;
        let idx: Vec<usize> = tokens.iter().map(|t| *t as usize).collect();
        let word = tape.param(self.word);
        let rows = tape.gather_rows(word, &idx);
        let logits = tape.matmul_t(t, rows);
        let bias = tape.param(self.mlm.as_ref().expect("checked").bias);
        let b = tape.gather_columns(bias, &idx);
        Ok(tape.add_row(logits, b))
    }

    /// `tanh(W h₀ + b)` over the first row when a pooler exists, otherwise
    /// the first row itself.
    pub fn pooled(&self, tape: &mut Tape, hidden: Var) -> Var {
        let first = tape.rows(hidden, 0, 1);
        match &self.pooler {
            Some(p) => {
                let y = self.dense(tape, first, p.w, p.b);
                tape.tanh(y)
            }
            None => first,
        }
    }
}
