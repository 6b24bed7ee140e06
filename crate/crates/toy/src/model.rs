//! Pre-norm transformer with gated SiLU feed-forward blocks and bucketed
//! relative position bias, in encoder-decoder or prefix-decoder form.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use ul2_core::{Example, PathLabel, RngStream};

use crate::config::{Arch, ToyConfig};
use crate::masks::{bucket_grid, build_attention_masks, AttentionMaskSet, MaskMatrix};
use crate::tape::{Mat, NodeId, Tape};
use crate::ToyError;

/// Token fed to the decoder before the first target.
pub const BOS_ID: usize = 0;

#[derive(Clone, Copy, Debug)]
struct AttnParams {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
}

#[derive(Clone, Debug)]
struct LayerParams {
    self_norm: usize,
    self_attn: AttnParams,
    cross: Option<(usize, AttnParams)>,
    ffn_norm: usize,
    gate: usize,
    up: usize,
    down: usize,
}

#[derive(Clone, Debug)]
struct Stack {
    layers: Vec<LayerParams>,
    bias: usize,
    final_norm: usize,
}

#[derive(Clone, Debug)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub params: Vec<Mat>,
    names: Vec<String>,
    embed: usize,
    encoder: Option<Stack>,
    decoder: Stack,
    out_proj: usize,
    out_bias: usize,
}

/// One example laid out for a given architecture. For the prefix decoder,
/// `dec_tokens` is `inputs ++ [BOS] ++ targets[..-1]` and the inputs block
/// carries weight 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub enc_tokens: Vec<usize>,
    pub dec_tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub prefix_len: usize,
}

impl Prepared {
    pub fn target_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 0.0).count()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Mean cross-entropy over every target position in the batch.
    pub loss: f64,
    /// Per example: decoder logits, one row per decoder position.
    pub logits: Vec<Mat>,
    /// Per example mean cross-entropy.
    pub per_example: Vec<f64>,
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self, ToyError> {
        config.check()?;
        let mut b = Builder { params: Vec::new(), names: Vec::new(), rng: RngStream::new(config.seed).derive(PathLabel::Op("toy-init")) };
        let d = config.d_model;
        let embed = b.normal("embed", config.vocab_size, d, 1.0);
        let encoder = match config.arch {
            Arch::EncoderDecoder => Some(b.stack("enc", &config, false)),
            Arch::PrefixLmDecoder => None,
        };
        let decoder = b.stack("dec", &config, config.arch == Arch::EncoderDecoder);
        let out_proj = b.normal("out_proj", d, config.vocab_size, 1.0 / (d as f64).sqrt());
        let out_bias = b.fill("out_bias", 1, config.vocab_size, 0.0);
        Ok(ToyModel { config, params: b.params, names: b.names, embed, encoder, decoder, out_proj, out_bias })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zero the output projection and bias so every position predicts the
    /// uniform distribution.
    pub fn zero_output_projection(&mut self) {
        for i in [self.out_proj, self.out_bias] {
            self.params[i].data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_token(&self, t: usize) -> Result<usize, ToyError> {
        if t >= self.config.vocab_size {
            return Err(ToyError::TokenOutOfRange { token: t, vocab_size: self.config.vocab_size });
        }
        Ok(t)
    }

    pub fn prepare(&self, example: &Example) -> Result<Prepared, ToyError> {
        let inputs = example.inputs.iter().map(|t| self.check_token(t.0 as usize)).collect::<Result<Vec<_>, _>>()?;
        let targets = example.targets.iter().map(|t| self.check_token(t.0 as usize)).collect::<Result<Vec<_>, _>>()?;
        prepare_tokens(&self.config, &inputs, &targets)
    }

    /// Decoder logits and the weighted cross-entropy sum for one example,
    /// using parameter leaves `p`.
    fn build(&self, tape: &mut Tape, p: &[NodeId], prep: &Prepared) -> (NodeId, NodeId) {
        let cfg = &self.config;
        let in_len = prep.prefix_len.max(prep.enc_tokens.len());
        let masks = build_attention_masks(cfg.arch, in_len, prep.dec_tokens.len() - prep.prefix_len);
        let logits_in = match (&masks, &self.encoder) {
            (AttentionMaskSet::EncoderDecoder { encoder, decoder, cross }, Some(enc_stack)) => {
                let x = tape.gather(p[self.embed], &prep.enc_tokens);
                let enc_buckets = bucket_grid(prep.enc_tokens.len(), prep.enc_tokens.len(), true, cfg.num_buckets, cfg.max_distance);
                let memory = self.run_stack(tape, p, enc_stack, x, encoder, &enc_buckets, None);
                let y = tape.gather(p[self.embed], &prep.dec_tokens);
                let n = prep.dec_tokens.len();
                let dec_buckets = bucket_grid(n, n, false, cfg.num_buckets, cfg.max_distance);
                self.run_stack(tape, p, &self.decoder, y, decoder, &dec_buckets, Some((memory, cross)))
            }
            (AttentionMaskSet::PrefixDecoder { mask }, None) => {
                let x = tape.gather(p[self.embed], &prep.dec_tokens);
                let n = prep.dec_tokens.len();
                let buckets = bucket_grid(n, n, true, cfg.num_buckets, cfg.max_distance);
                self.run_stack(tape, p, &self.decoder, x, mask, &buckets, None)
            }
            _ => unreachable!("mask set matches architecture"),
        };
        let logits = tape.matmul(logits_in, p[self.out_proj]);
        let logits = tape.add_row(logits, p[self.out_bias]);
        let ce = tape.cross_entropy_sum(logits, &prep.labels, &prep.weights);
        (logits, ce)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        stack: &Stack,
        mut x: NodeId,
        mask: &MaskMatrix,
        buckets: &[usize],
        cross: Option<(NodeId, &MaskMatrix)>,
    ) -> NodeId {
        for layer in &stack.layers {
            let h = tape.rms_norm(x, p[layer.self_norm]);
            let a = self.attention(tape, p, layer.self_attn, h, h, mask, Some((p[stack.bias], buckets)));
            x = tape.add(x, a);
            if let (Some((norm, attn)), Some((memory, cmask))) = (layer.cross, cross) {
                let h = tape.rms_norm(x, p[norm]);
                let a = self.attention(tape, p, attn, h, memory, cmask, None);
                x = tape.add(x, a);
            }
            let h = tape.rms_norm(x, p[layer.ffn_norm]);
            let g = tape.matmul(h, p[layer.gate]);
            let g = tape.silu(g);
            let u = tape.matmul(h, p[layer.up]);
            let f = tape.mul(g, u);
            let f = tape.matmul(f, p[layer.down]);
            x = tape.add(x, f);
        }
        tape.rms_norm(x, p[stack.final_norm])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        p: &[NodeId],
        w: AttnParams,
        queries: NodeId,
        keys: NodeId,
        mask: &MaskMatrix,
        bias: Option<(NodeId, &[usize])>,
    ) -> NodeId {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = tape.matmul(queries, p[w.q]);
        let k = tape.matmul(keys, p[w.k]);
        let v = tape.matmul(keys, p[w.v]);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.col_slice(q, h * dh, dh);
            let kh = tape.col_slice(k, h * dh, dh);
            let vh = tape.col_slice(v, h * dh, dh);
            let s = tape.matmul_t(qh, kh);
            let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some((table, buckets)) = bias {
                s = tape.rel_bias(s, table, buckets, h);
            }
            let a = tape.masked_softmax(s, &mask.data);
            outs.push(tape.matmul(a, vh));
        }
        let o = tape.concat_cols(&outs);
        tape.matmul(o, p[w.o])
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().enumerate().map(|(i, m)| tape.param(i, m)).collect()
    }

    pub fn forward_prepared(&self, batch: &[Prepared]) -> Result<ForwardOutput, ToyError> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_on(&mut tape, batch)?;
        Ok(out)
    }

    fn forward_on(&self, tape: &mut Tape, batch: &[Prepared]) -> Result<(ForwardOutput, NodeId), ToyError> {
        if batch.is_empty() {
            return Err(ToyError::EmptyBatch);
        }
        let p = self.leaves(tape);
        let mut logits = Vec::with_capacity(batch.len());
        let mut per_example = Vec::with_capacity(batch.len());
        let mut ces = Vec::with_capacity(batch.len());
        let mut count = 0usize;
        for prep in batch {
            let (l, ce) = self.build(tape, &p, prep);
            let n = prep.target_count();
            per_example.push(tape.value(ce).data[0] / n as f64);
            count += n;
            logits.push(tape.value(l).clone());
            ces.push(ce);
        }
        let total = tape.sum(&ces);
        let mean = tape.scale(total, 1.0 / count as f64);
        Ok((ForwardOutput { loss: tape.value(mean).data[0], logits, per_example }, mean))
    }

    pub fn forward_loss(&self, batch: &[Example]) -> Result<ForwardOutput, ToyError> {
        let prepared = batch.iter().map(|e| self.prepare(e)).collect::<Result<Vec<_>, _>>()?;
        self.forward_prepared(&prepared)
    }

    /// Mean loss and its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, batch: &[Prepared]) -> Result<(f64, Vec<Mat>), ToyError> {
        let mut tape = Tape::new();
        let (out, mean) = self.forward_on(&mut tape, batch)?;
        let grads = tape.backward(mean, self.params.len());
        let grads = grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.rows, p.cols)))
            .collect();
        Ok((out.loss, grads))
    }
}

/// Lay out token ids for `config.arch`; ids are assumed in range.
pub fn prepare_tokens(config: &ToyConfig, inputs: &[usize], targets: &[usize]) -> Result<Prepared, ToyError> {
    if targets.is_empty() {
        return Err(ToyError::EmptyTargets);
    }
    let shifted: Vec<usize> = std::iter::once(BOS_ID).chain(targets[..targets.len() - 1].iter().copied()).collect();
    match config.arch {
        Arch::EncoderDecoder => {
            let longest = inputs.len().max(targets.len());
            if longest > config.max_len {
                return Err(ToyError::TooLong { len: longest, max_len: config.max_len });
            }
            Ok(Prepared {
                enc_tokens: inputs.to_vec(),
                dec_tokens: shifted,
                labels: targets.to_vec(),
                weights: vec![1.0; targets.len()],
                prefix_len: 0,
            })
        }
        Arch::PrefixLmDecoder => {
            let len = inputs.len() + targets.len();
            if len > config.max_len {
                return Err(ToyError::TooLong { len, max_len: config.max_len });
            }
            let mut dec_tokens = inputs.to_vec();
            dec_tokens.extend(&shifted);
            // Labels on the inputs block are the next input token; they carry no weight.
            let mut labels: Vec<usize> = inputs.iter().skip(1).copied().chain(std::iter::once(BOS_ID)).collect();
            labels.truncate(inputs.len());
            labels.extend(targets);
            let mut weights = vec![0.0; inputs.len()];
            weights.extend(std::iter::repeat_n(1.0, targets.len()));
            Ok(Prepared { enc_tokens: Vec::new(), dec_tokens, labels, weights, prefix_len: inputs.len() })
        }
    }
}

struct Builder {
    params: Vec<Mat>,
    names: Vec<String>,
    rng: RngStream,
}

impl Builder {
    fn push(&mut self, name: String, m: Mat) -> usize {
        self.params.push(m);
        self.names.push(name);
        self.params.len() - 1
    }

    fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        self.push(name.to_string(), Mat::from_vec(rows, cols, data))
    }

    fn fill(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> usize {
        self.push(name.to_string(), Mat::from_vec(rows, cols, vec![v; rows * cols]))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        let s = 1.0 / (d as f64).sqrt();
        AttnParams {
            q: self.normal(&format!("{prefix}.q"), d, d, s),
            k: self.normal(&format!("{prefix}.k"), d, d, s),
            v: self.normal(&format!("{prefix}.v"), d, d, s),
            o: self.normal(&format!("{prefix}.o"), d, d, s),
        }
    }

    fn stack(&mut self, prefix: &str, cfg: &ToyConfig, with_cross: bool) -> Stack {
        let d = cfg.d_model;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = format!("{prefix}.{l}");
            let self_norm = self.fill(&format!("{name}.self_norm"), 1, d, 1.0);
            let self_attn = self.attn(&format!("{name}.self"), d);
            let cross = with_cross.then(|| {
                let norm = self.fill(&format!("{name}.cross_norm"), 1, d, 1.0);
                (norm, self.attn(&format!("{name}.cross"), d))
            });
            let ffn_norm = self.fill(&format!("{name}.ffn_norm"), 1, d, 1.0);
            let gate = self.normal(&format!("{name}.gate"), d, cfg.d_ff, 1.0 / (d as f64).sqrt());
            let up = self.normal(&format!("{name}.up"), d, cfg.d_ff, 1.0 / (d as f64).sqrt());
            let down = self.normal(&format!("{name}.down"), cfg.d_ff, d, 1.0 / (cfg.d_ff as f64).sqrt());
            layers.push(LayerParams { self_norm, self_attn, cross, ffn_norm, gate, up, down });
        }
        let bias = self.normal(&format!("{prefix}.rel_bias"), cfg.num_buckets, cfg.heads, 0.1);
        let final_norm = self.fill(&format!("{prefix}.final_norm"), 1, d, 1.0);
        Stack { layers, bias, final_norm }
    }
}

/// Perturb every parameter entry by a small random amount; used to move
/// checks away from the symmetric initial point.
pub fn jitter(model: &mut ToyModel, scale: f64, seed: u64) {
    let mut rng = RngStream::new(seed).derive(PathLabel::Op("jitter"));
    for p in &mut model.params {
        for x in &mut p.data {
            *x += scale * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}
