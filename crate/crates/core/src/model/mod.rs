//! The dual-CTC hierarchical encoder, attention decoder and joint loss.

mod checkpoint;
mod net;

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint_to, Checkpoint, CheckpointMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use net::{
    compute_total_loss, decoder_forward, embed_features, encode, evaluate_loss, EncodedBatch, EncoderOutput,
    LossBreakdown, LossOutput, Net,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::BLANK;
use crate::error::{Error, Result};
use crate::numerics::{xavier_init, Rng, Tensor, XavierKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    /// 1-based encoder layer whose output feeds the LID head.
    pub n_int: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub downsample_stride: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    /// Text vocabulary size including reserved tokens and language tags.
    pub text_vocab: usize,
    /// LID vocabulary size including blank.
    pub lid_vocab: usize,
    pub init: XavierKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            d_model: 256,
            ff_dim: 2048,
            enc_layers: 6,
            dec_layers: 6,
            n_heads: 8,
            n_int: 1,
            dropout: 0.1,
            label_smoothing: 0.1,
            downsample_stride: 1,
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 3.0,
            text_vocab: 0,
            lid_vocab: 0,
            init: XavierKind::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.feature_dim == 0 || self.d_model == 0 || self.ff_dim == 0 {
            return bad("feature_dim, d_model and ff_dim must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_int < 1 || self.n_int >= self.enc_layers {
            return bad(format!(
                "n_int {} must satisfy 1 <= n_int < enc_layers ({})",
                self.n_int, self.enc_layers
            ));
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("dropout and label_smoothing must lie in [0, 1)".into());
        }
        if self.downsample_stride == 0 {
            return bad("downsample_stride must be positive".into());
        }
        for (name, l) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} = {l} must be a non-negative number"));
            }
        }
        if self.text_vocab <= BLANK {
            return bad(format!("text_vocab {} leaves no room for words", self.text_vocab));
        }
        if self.lid_vocab < 2 {
            return bad(format!("lid_vocab {} needs blank plus at least one tag", self.lid_vocab));
        }
        Ok(())
    }

    /// Every parameter name with its shape, sorted by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, v) = (self.d_model, self.ff_dim, self.text_vocab);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
        let ln = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            add(format!("{p}.g"), vec![d]);
            add(format!("{p}.b"), vec![d]);
        };
        let attn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            for m in ["q", "k", "v", "o"] {
                add(format!("{p}.w{m}"), vec![d, d]);
                add(format!("{p}.b{m}"), vec![d]);
            }
        };
        let ffn = |add: &mut dyn FnMut(String, Vec<usize>), p: &str| {
            add(format!("{p}.w1"), vec![d, ff]);
            add(format!("{p}.b1"), vec![ff]);
            add(format!("{p}.w2"), vec![ff, d]);
            add(format!("{p}.b2"), vec![d]);
        };
        add("enc.in_proj.w".into(), vec![self.feature_dim, d]);
        add("enc.in_proj.b".into(), vec![d]);
        for l in 0..self.enc_layers {
            let p = format!("enc.layer{l:02}");
            ln(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.attn"));
            ln(&mut add, &format!("{p}.ln2"));
            ffn(&mut add, &format!("{p}.ff"));
        }
        ln(&mut add, "enc.lid.ln");
        add("enc.lid.proj.w".into(), vec![d, self.lid_vocab]);
        add("enc.lid.proj.b".into(), vec![self.lid_vocab]);
        ln(&mut add, "enc.final_ln");
        add("enc.ctc.proj.w".into(), vec![d, v]);
        add("enc.ctc.proj.b".into(), vec![v]);
        add("dec.embed".into(), vec![v, d]);
        for l in 0..self.dec_layers {
            let p = format!("dec.layer{l:02}");
            ln(&mut add, &format!("{p}.ln1"));
            attn(&mut add, &format!("{p}.self_attn"));
            ln(&mut add, &format!("{p}.ln2"));
            attn(&mut add, &format!("{p}.cross_attn"));
            ln(&mut add, &format!("{p}.ln3"));
            ffn(&mut add, &format!("{p}.ff"));
        }
        ln(&mut add, "dec.final_ln");
        add("dec.out.b".into(), vec![v]);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Names of the LID head's parameters.
    pub fn is_lid_param(name: &str) -> bool {
        name.starts_with("enc.lid.")
    }
}

/// Closed-form parameter count.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let (d, ff, v, lv) = (cfg.d_model, cfg.ff_dim, cfg.text_vocab, cfg.lid_vocab);
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let ffn = d * ff + ff + ff * d + d;
    let enc_layer = 2 * ln + attn + ffn;
    let dec_layer = 3 * ln + 2 * attn + ffn;
    let input = cfg.feature_dim * d + d;
    let lid = ln + d * lv + lv;
    let ctc = ln + d * v + v;
    let decoder_extra = v * d + ln + v;
    input + cfg.enc_layers * enc_layer + lid + ctc + cfg.dec_layers * dec_layer + decoder_extra
}

/// Named parameter tensors, sorted by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: a stable per-name stream id, so adding layers leaves other tensors untouched
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl ModelParams {
    /// Xavier weights, unit layer-norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let root = Rng::new(seed);
        let mut pairs = Vec::new();
        for (name, shape) in cfg.param_shapes() {
            let t = if shape.len() == 2 {
                xavier_init(&shape, cfg.init, &mut root.derive(name_hash(&name)))?
            } else if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            pairs.push((name, t));
        }
        ModelParams::from_named(pairs)
    }

    pub fn from_named(mut pairs: Vec<(String, Tensor)>) -> Result<Self> {
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        let mut index = HashMap::with_capacity(pairs.len());
        for (i, (n, t)) in pairs.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::usage(format!("duplicate parameter name {n}")));
            }
            if !t.is_finite() {
                return Err(Error::usage(format!("parameter {n} holds non-finite values")));
            }
        }
        let (names, tensors) = pairs.into_iter().unzip();
        Ok(ModelParams { names, tensors, index })
    }

    /// Checks that names and shapes match `cfg` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let want = cfg.param_shapes();
        if want.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.names.len()
            )));
        }
        for ((n, shape), (have, t)) in want.iter().zip(self.names.iter().zip(&self.tensors)) {
            if n != have || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {have} {:?} does not match expected {n} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
