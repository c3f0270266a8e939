use crate::ctc::{ctc_batch_loss, CtcPosteriors, Reduction};
use crate::data::{Labels, BLANK, BOS, LID_BLANK};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId, Segment};
use crate::numerics::{Rng, Tensor};

use super::{ModelConfig, ModelParams};

/// Encoder results for one sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Residual stream after layer `n_int`.
    pub h_int: Tensor,
    pub lid_log_post: CtcPosteriors,
    /// Residual stream after the last layer, before the final layer norm.
    pub h_fin: Tensor,
    pub txt_log_post: CtcPosteriors,
}

/// Loss components; `l_total` is `lambda1*l_lid + lambda2*l_txt + lambda3*l_attn`.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub l_lid: f64,
    pub l_txt: f64,
    pub l_attn: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_lid, self.l_txt, self.l_attn, self.l_total].iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: LossBreakdown,
    /// One gradient per parameter tensor, in parameter order; empty when not requested.
    pub grads: Vec<Tensor>,
}

/// Node handles for a packed encoder pass.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    /// `(first_row, frames)` of every sequence.
    pub segments: Vec<(usize, usize)>,
    pub h_int: NodeId,
    pub lid_logp: NodeId,
    pub h_fin: NodeId,
    /// Final-layer-normed `h_fin`: what the decoder attends to and the text CTC head reads.
    pub memory: NodeId,
    pub txt_logp: NodeId,
}

fn sinusoid(positions: impl Iterator<Item = usize>, d: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for pos in positions {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            out.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

fn downsample(f: &Tensor, stride: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.rows().div_ceil(stride) * f.cols());
    for t in (0..f.rows()).step_by(stride) {
        out.extend_from_slice(f.row(t));
    }
    out
}

/// A forward computation over the model's parameters.
pub struct Net<'p> {
    pub g: Graph<'p>,
    cfg: &'p ModelConfig,
    params: &'p ModelParams,
    nodes: Vec<NodeId>,
    dropout: Option<Rng>,
}

impl<'p> Net<'p> {
    /// With `dropout` set the pass is in training mode and draws masks from it.
    pub fn new(cfg: &'p ModelConfig, params: &'p ModelParams, trainable: bool, dropout: Option<Rng>) -> Self {
        let mut g = Graph::new();
        let nodes = params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant_ref(t) })
            .collect();
        let dropout = dropout.filter(|_| cfg.dropout > 0.0);
        Net {
            g,
            cfg,
            params,
            nodes,
            dropout,
        }
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    fn p(&self, name: &str) -> NodeId {
        let i = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"));
        self.nodes[i]
    }

    fn drop(&mut self, x: NodeId) -> NodeId {
        let p = self.cfg.dropout;
        let Some(rng) = self.dropout.as_mut() else { return x };
        let keep = 1.0 / (1.0 - p);
        let mask = (0..self.g.value(x).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        self.g.dropout(x, mask)
    }

    fn ln(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let (g, b) = (self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")));
        self.g.layer_norm(x, g, b)
    }

    fn lin(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let (w, b) = (self.p(w), self.p(b));
        self.g.linear(x, w, b)
    }

    fn mha(&mut self, prefix: &str, xq: NodeId, xkv: NodeId, segs: &[Segment], causal: bool) -> NodeId {
        let q = self.lin(xq, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
        let k = self.lin(xkv, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
        let v = self.lin(xkv, &format!("{prefix}.wv"), &format!("{prefix}.bv"));
        let a = self.g.attention(q, k, v, segs, self.cfg.n_heads, causal);
        self.lin(a, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let h = self.lin(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"));
        let h = self.g.gelu(h);
        self.lin(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: NodeId, sub: NodeId) -> NodeId {
        let sub = self.drop(sub);
        self.g.add(x, sub)
    }

    /// Downsamples, projects and position-encodes every sequence, packed row-wise.
    pub fn embed(&mut self, features: &[&Tensor]) -> Result<(NodeId, Vec<(usize, usize)>)> {
        let (fd, d, stride) = (self.cfg.feature_dim, self.cfg.d_model, self.cfg.downsample_stride);
        let mut packed = Vec::new();
        let mut pe = Vec::new();
        let mut segments = Vec::with_capacity(features.len());
        let mut start = 0;
        for f in features {
            if f.cols() != fd || f.shape().len() != 2 {
                return Err(Error::usage(format!(
                    "feature width {} does not match model feature_dim {fd}",
                    f.cols()
                )));
            }
            let frames = f.rows().div_ceil(stride);
            packed.extend(downsample(f, stride));
            pe.extend(sinusoid(0..frames, d));
            segments.push((start, frames));
            start += frames;
        }
        if start == 0 {
            return Err(Error::usage("empty batch"));
        }
        let x = self.g.constant(Tensor::matrix(start, fd, packed));
        let h = self.lin(x, "enc.in_proj.w", "enc.in_proj.b");
        let pe = self.g.constant(Tensor::matrix(start, d, pe));
        let h = self.g.add(h, pe);
        Ok((self.drop(h), segments))
    }

    pub fn encode_batch(&mut self, features: &[&Tensor]) -> Result<EncodedBatch> {
        let (mut h, segments) = self.embed(features)?;
        let segs: Vec<Segment> = segments
            .iter()
            .map(|&(s, n)| Segment {
                q_start: s,
                q_len: n,
                k_start: s,
                k_len: n,
            })
            .collect();
        let mut h_int = h;
        for l in 0..self.cfg.enc_layers {
            let p = format!("enc.layer{l:02}");
            let x = self.ln(h, &format!("{p}.ln1"));
            let a = self.mha(&format!("{p}.attn"), x, x, &segs, false);
            h = self.residual(h, a);
            let x = self.ln(h, &format!("{p}.ln2"));
            let f = self.ffn(&format!("{p}.ff"), x);
            h = self.residual(h, f);
            if l + 1 == self.cfg.n_int {
                h_int = h;
            }
        }
        let x = self.ln(h_int, "enc.lid.ln");
        let lid = self.lin(x, "enc.lid.proj.w", "enc.lid.proj.b");
        let lid_logp = self.g.log_softmax(lid);
        let memory = self.ln(h, "enc.final_ln");
        let txt = self.lin(memory, "enc.ctc.proj.w", "enc.ctc.proj.b");
        let txt_logp = self.g.log_softmax(txt);
        Ok(EncodedBatch {
            segments,
            h_int,
            lid_logp,
            h_fin: h,
            memory,
            txt_logp,
        })
    }

    /// Teacher-forced decoder over packed prefixes.
    ///
    /// Prefix `i` attends to memory segment `mem_segments[source[i]]`. Returns
    /// log-probabilities with one row per prefix token, packed in prefix order.
    pub fn decode_batch(
        &mut self,
        memory: NodeId,
        mem_segments: &[(usize, usize)],
        source: &[usize],
        prefixes: &[&[usize]],
    ) -> Result<NodeId> {
        let d = self.cfg.d_model;
        let v = self.cfg.text_vocab;
        let mut ids = Vec::new();
        let mut pe = Vec::new();
        let mut self_segs = Vec::with_capacity(prefixes.len());
        let mut cross_segs = Vec::with_capacity(prefixes.len());
        for (&src, pre) in source.iter().zip(prefixes) {
            if pre.is_empty() {
                return Err(Error::usage("decoder prefix is empty"));
            }
            if let Some(&bad) = pre.iter().find(|&&t| t >= v) {
                return Err(Error::usage(format!("token id {bad} outside vocabulary of {v}")));
            }
            let (ms, ml) = mem_segments[src];
            let start = ids.len();
            self_segs.push(Segment {
                q_start: start,
                q_len: pre.len(),
                k_start: start,
                k_len: pre.len(),
            });
            cross_segs.push(Segment {
                q_start: start,
                q_len: pre.len(),
                k_start: ms,
                k_len: ml,
            });
            ids.extend_from_slice(pre);
            pe.extend(sinusoid(0..pre.len(), d));
        }
        if ids.is_empty() {
            return Err(Error::usage("decoder batch is empty"));
        }
        let embed = self.p("dec.embed");
        let e = self.g.gather(embed, &ids);
        let e = self.g.scale(e, (d as f64).sqrt());
        let pe = self.g.constant(Tensor::matrix(ids.len(), d, pe));
        let h = self.g.add(e, pe);
        let mut h = self.drop(h);
        for l in 0..self.cfg.dec_layers {
            let p = format!("dec.layer{l:02}");
            let x = self.ln(h, &format!("{p}.ln1"));
            let a = self.mha(&format!("{p}.self_attn"), x, x, &self_segs, true);
            h = self.residual(h, a);
            let x = self.ln(h, &format!("{p}.ln2"));
            let c = self.mha(&format!("{p}.cross_attn"), x, memory, &cross_segs, false);
            h = self.residual(h, c);
            let x = self.ln(h, &format!("{p}.ln3"));
            let f = self.ffn(&format!("{p}.ff"), x);
            h = self.residual(h, f);
        }
        let y = self.ln(h, "dec.final_ln");
        let logits = self.g.matmul(y, embed, true);
        let b = self.p("dec.out.b");
        let logits = self.g.add_row(logits, b);
        Ok(self.g.log_softmax(logits))
    }
}

/// Projects one feature sequence into the encoder's input space.
pub fn embed_features(features: &Tensor, cfg: &ModelConfig, params: &ModelParams) -> Result<Tensor> {
    let mut net = Net::new(cfg, params, false, None);
    let (h, _) = net.embed(&[features])?;
    Ok(net.g.value(h).clone())
}

fn diverged(what: &str) -> Error {
    Error::Divergence {
        step: 0,
        what: what.to_string(),
    }
}

/// Inference-mode encoder pass over one sequence.
pub fn encode(features: &Tensor, cfg: &ModelConfig, params: &ModelParams) -> Result<EncoderOutput> {
    let mut net = Net::new(cfg, params, false, None);
    let e = net.encode_batch(&[features])?;
    let take = |id: NodeId| net.g.value(id).clone();
    let (h_int, h_fin) = (take(e.h_int), take(e.h_fin));
    let (lid, txt) = (take(e.lid_logp), take(e.txt_logp));
    if !(h_int.is_finite() && h_fin.is_finite() && lid.is_finite() && txt.is_finite()) {
        return Err(diverged("non-finite encoder output"));
    }
    Ok(EncoderOutput {
        h_int,
        lid_log_post: CtcPosteriors::new(lid, LID_BLANK)?,
        h_fin,
        txt_log_post: CtcPosteriors::new(txt, BLANK)?,
    })
}

/// Inference-mode decoder: one row of log-probabilities per prefix position.
pub fn decoder_forward(h_fin: &Tensor, prefix: &[usize], cfg: &ModelConfig, params: &ModelParams) -> Result<Tensor> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::usage("decoder prefix must start with <bos>"));
    }
    let mut net = Net::new(cfg, params, false, None);
    let h = net.g.constant_ref(h_fin);
    let memory = net.ln(h, "enc.final_ln");
    let out = net.decode_batch(memory, &[(0, h_fin.rows())], &[0], &[prefix])?;
    Ok(net.g.value(out).clone())
}

/// Label-smoothed cross entropy summed per sequence and averaged over the batch.
fn smoothed_ce(logp: &Tensor, targets: &[&[usize]], eps: f64) -> (f64, Tensor) {
    let v = logp.cols();
    let scale = 1.0 / targets.len() as f64;
    let off = eps / v as f64;
    let mut grad = Tensor::zeros(logp.shape());
    let mut total = 0.0;
    let mut row = 0;
    for tgt in targets {
        let mut sample = 0.0;
        for &y in tgt.iter() {
            let lp = logp.row(row);
            let g = grad.row_mut(row);
            let mut loss = 0.0;
            for c in 0..v {
                let q = off + if c == y { 1.0 - eps } else { 0.0 };
                loss -= q * lp[c];
                g[c] = -q * scale;
            }
            sample += loss;
            row += 1;
        }
        total += sample;
    }
    (total * scale, grad)
}

fn total_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    features: &[&Tensor],
    labels: &[&Labels],
    dropout: Option<Rng>,
    want_grad: bool,
) -> Result<LossOutput> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::usage("loss batch is empty or features/labels differ in count"));
    }
    let with_lid = labels[0].lid.is_some();
    if labels.iter().any(|l| l.lid.is_some() != with_lid) {
        return Err(Error::usage("batch mixes samples with and without LID targets"));
    }
    let mut net = Net::new(cfg, params, want_grad, dropout);
    let enc = net.encode_batch(features)?;

    let txt_targets: Vec<Vec<usize>> = labels.iter().map(|l| l.txt_ctc.clone()).collect();
    let (l_txt, g_txt, _) =
        ctc_batch_loss(net.g.value(enc.txt_logp), BLANK, &enc.segments, &txt_targets, Reduction::Mean)?;
    let txt_node = net.g.external_loss(enc.txt_logp, l_txt, g_txt);

    let lid_node = if with_lid {
        let lid_targets: Vec<Vec<usize>> = labels.iter().map(|l| l.lid.clone().unwrap_or_default()).collect();
        let (l, g, _) =
            ctc_batch_loss(net.g.value(enc.lid_logp), LID_BLANK, &enc.segments, &lid_targets, Reduction::Mean)?;
        net.g.external_loss(enc.lid_logp, l, g)
    } else {
        net.g.constant(Tensor::scalar(0.0))
    };

    let prefixes: Vec<&[usize]> = labels.iter().map(|l| &l.attn[..l.attn.len() - 1]).collect();
    let shifted: Vec<&[usize]> = labels.iter().map(|l| &l.attn[1..]).collect();
    if prefixes.iter().any(|p| p.is_empty()) {
        return Err(Error::usage("attention target shorter than two tokens"));
    }
    let source: Vec<usize> = (0..labels.len()).collect();
    let dec = net.decode_batch(enc.memory, &enc.segments, &source, &prefixes)?;
    let (l_attn, g_attn) = smoothed_ce(net.g.value(dec), &shifted, cfg.label_smoothing);
    let attn_node = net.g.external_loss(dec, l_attn, g_attn);

    let total = net
        .g
        .weighted_sum(&[(lid_node, cfg.lambda1), (txt_node, cfg.lambda2), (attn_node, cfg.lambda3)]);
    let loss = LossBreakdown {
        l_lid: net.g.scalar(lid_node),
        l_txt: net.g.scalar(txt_node),
        l_attn: net.g.scalar(attn_node),
        l_total: net.g.scalar(total),
    };
    let grads = if want_grad && loss.is_finite() {
        let mut gr = net.g.backward(total);
        net.param_nodes()
            .iter()
            .zip(params.tensors())
            .map(|(&id, t)| gr.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    } else {
        Vec::new()
    };
    Ok(LossOutput { loss, grads })
}

/// Joint loss and its gradient with respect to every parameter tensor.
///
/// `dropout` puts the pass in training mode with masks drawn from that stream.
pub fn compute_total_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    features: &[&Tensor],
    labels: &[&Labels],
    dropout: Option<Rng>,
) -> Result<LossOutput> {
    total_loss(cfg, params, features, labels, dropout, true)
}

/// Inference-mode joint loss without gradients.
pub fn evaluate_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    features: &[&Tensor],
    labels: &[&Labels],
) -> Result<LossBreakdown> {
    Ok(total_loss(cfg, params, features, labels, None, false)?.loss)
}
