//! A small pre-LayerNorm decoder-only transformer with ReLU feed-forward
//! blocks and learned positional embeddings.
//!
//! Per layer: `x += attn(ln1(x))`, then `x += W_down relu(W_up ln2(x) + b_up) + b_down`.
//! Linear weights are stored `[out, in]`; activations are `[positions, features]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Metadata, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::numerics::{self, linear, relu, Matrix, RandomSource};
use crate::quant::{QuantSpec, QuantizedMatrix, MIN_SCALE};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub heads: usize,
    /// Maximum sequence length.
    pub context: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return Err(Error::Domain(format!("degenerate config {self:?}")));
        }
        if self.d_ff % 2 != 0 {
            return Err(Error::Domain(format!(
                "d_ff = {} must be even for pairwise rotations",
                self.d_ff
            )));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Domain(format!(
                "d_model = {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 || self.context == 0 {
            return Err(Error::Domain("vocab must be >= 2 and context > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// `[d_ff, d_model]`
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    /// `[d_model, d_ff]`
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_weight: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_weight: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub tok_emb: Matrix,
    /// `[context, d_model]`
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub lnf_weight: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// `[vocab, d_model]`
    pub lm_head: Matrix,
}

fn random_matrix(rng: &mut RandomSource, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

fn random_vec(rng: &mut RandomSource, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.standard_normal()).collect()
}

/// How [`ModelParams::random`] draws its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, 1/fan_in)` linear weights, unit-variance embeddings and
    /// `N(0, 0.1²)` biases. Every sublayer contributes visibly to the output.
    FanIn,
    /// Every weight and bias drawn from `N(0, std²)`.
    Constant(f64),
}

impl ModelParams {
    pub fn random(config: ModelConfig, seed: u64, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomSource::new(seed);
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab);
        let (emb_std, bias_std) = match init {
            Init::FanIn => (1.0, 0.1),
            Init::Constant(s) => (s, s),
        };
        let w_std = |fan_in: usize| match init {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::Constant(s) => s,
        };
        let tok_emb = random_matrix(&mut rng, v, d, emb_std);
        let pos_emb = random_matrix(&mut rng, config.context, d, emb_std);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            layers.push(LayerParams {
                ln1_weight: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                wq: random_matrix(&mut rng, d, d, w_std(d)),
                bq: random_vec(&mut rng, d, bias_std),
                wk: random_matrix(&mut rng, d, d, w_std(d)),
                bk: random_vec(&mut rng, d, bias_std),
                wv: random_matrix(&mut rng, d, d, w_std(d)),
                bv: random_vec(&mut rng, d, bias_std),
                wo: random_matrix(&mut rng, d, d, w_std(d)),
                bo: random_vec(&mut rng, d, bias_std),
                ln2_weight: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                ffn: FfnParams {
                    w_up: random_matrix(&mut rng, f, d, w_std(d)),
                    b_up: random_vec(&mut rng, f, bias_std),
                    w_down: random_matrix(&mut rng, d, f, w_std(f)),
                    b_down: random_vec(&mut rng, d, bias_std),
                },
            });
        }
        Ok(ModelParams {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_weight: vec![1.0; d],
            lnf_bias: vec![0.0; d],
            lm_head: random_matrix(&mut rng, v, d, w_std(d)),
        })
    }

    /// Checks every tensor shape against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab);
        let check_m = |name: &str, m: &Matrix, shape: (usize, usize)| {
            if m.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
            Ok(())
        };
        let check_v = |name: &str, x: &[f64], n: usize| {
            if x.len() != n {
                return Err(Error::Shape(format!("{name} has {} entries, expected {n}", x.len())));
            }
            Ok(())
        };
        check_m("tok_emb", &self.tok_emb, (v, d))?;
        check_m("pos_emb", &self.pos_emb, (c.context, d))?;
        check_m("lm_head", &self.lm_head, (v, d))?;
        check_v("ln_f.weight", &self.lnf_weight, d)?;
        check_v("ln_f.bias", &self.lnf_bias, d)?;
        if self.layers.len() != c.layers {
            return Err(Error::Shape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                c.layers
            )));
        }
        for l in &self.layers {
            for (n, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                check_m(n, m, (d, d))?;
            }
            for (n, b) in [
                ("bq", &l.bq),
                ("bk", &l.bk),
                ("bv", &l.bv),
                ("bo", &l.bo),
                ("ln1.weight", &l.ln1_weight),
                ("ln1.bias", &l.ln1_bias),
                ("ln2.weight", &l.ln2_weight),
                ("ln2.bias", &l.ln2_bias),
                ("b_down", &l.ffn.b_down),
            ] {
                check_v(n, b, d)?;
            }
            check_m("w_up", &l.ffn.w_up, (f, d))?;
            check_m("w_down", &l.ffn.w_down, (d, f))?;
            check_v("b_up", &l.ffn.b_up, f)?;
        }
        Ok(())
    }

    /// Every linear weight the quantizer touches, with its container name.
    /// Biases and LayerNorm parameters stay in full precision.
    pub fn weights(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn.q.weight"), &l.wq));
            out.push((format!("layers.{i}.attn.k.weight"), &l.wk));
            out.push((format!("layers.{i}.attn.v.weight"), &l.wv));
            out.push((format!("layers.{i}.attn.o.weight"), &l.wo));
            out.push((format!("layers.{i}.ffn.up.weight"), &l.ffn.w_up));
            out.push((format!("layers.{i}.ffn.down.weight"), &l.ffn.w_down));
        }
        out.push(("lm_head.weight".to_string(), &self.lm_head));
        out
    }

    fn weights_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.ffn.w_up,
                &mut l.ffn.w_down,
            ]);
        }
        out.push(&mut self.lm_head);
        out
    }

    fn vectors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}.");
            out.extend([
                (format!("{p}ln1.weight"), l.ln1_weight.as_slice()),
                (format!("{p}ln1.bias"), &l.ln1_bias),
                (format!("{p}attn.q.bias"), &l.bq),
                (format!("{p}attn.k.bias"), &l.bk),
                (format!("{p}attn.v.bias"), &l.bv),
                (format!("{p}attn.o.bias"), &l.bo),
                (format!("{p}ln2.weight"), &l.ln2_weight),
                (format!("{p}ln2.bias"), &l.ln2_bias),
                (format!("{p}ffn.up.bias"), &l.ffn.b_up),
                (format!("{p}ffn.down.bias"), &l.ffn.b_down),
            ]);
        }
        out.push(("ln_f.weight".into(), &self.lnf_weight));
        out.push(("ln_f.bias".into(), &self.lnf_bias));
        out
    }

    /// Copy with every linear weight replaced by its fake-quantized value.
    pub fn fake_quantized(&self, spec: &QuantSpec) -> Result<ModelParams> {
        let mut out = self.clone();
        for w in out.weights_mut() {
            *w = crate::quant::fake_quantize_matrix(w, spec)?;
        }
        Ok(out)
    }

    pub fn quantize_weights(&self, spec: &QuantSpec) -> Result<Vec<(String, QuantizedMatrix)>> {
        self.weights()
            .into_iter()
            .map(|(n, w)| Ok((n, QuantizedMatrix::quantize(w, spec)?)))
            .collect()
    }

    /// Full-precision f32 checkpoint.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(Metadata {
            config: self.config,
            quant: None,
        });
        self.push_tensors(&mut ckpt, None)
            .expect("unquantized export cannot fail");
        ckpt
    }

    /// Checkpoint holding packed integer codes, f16 group scales and packed
    /// zero points for every linear weight.
    pub fn to_quantized_checkpoint(&self, spec: &QuantSpec) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(Metadata {
            config: self.config,
            quant: Some(*spec),
        });
        self.push_tensors(&mut ckpt, Some(spec))?;
        Ok(ckpt)
    }

    fn push_tensors(&self, ckpt: &mut Checkpoint, spec: Option<&QuantSpec>) -> Result<()> {
        for (name, w) in self.weights() {
            match spec {
                None => ckpt.push(Tensor::from_matrix(name, w)),
                Some(spec) => {
                    for t in quantized_tensors(&name, &QuantizedMatrix::quantize(w, spec)?) {
                        ckpt.push(t);
                    }
                }
            }
        }
        for (name, v) in self.vectors() {
            ckpt.push(Tensor::from_vector(name, v));
        }
        Ok(())
    }

    /// Loads parameters from either a full-precision or a quantized
    /// checkpoint. Quantized weights are dequantized on load.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<ModelParams> {
        let config = ckpt.meta.config;
        config.validate()?;
        let matrix = |name: &str| -> Result<Matrix> {
            if let Some(t) = ckpt.get(name) {
                return t.to_matrix();
            }
            let spec = ckpt.meta.quant.ok_or_else(|| Error::MissingTensor(name.into()))?;
            Ok(read_quantized(ckpt, name, &spec)?.dequantize())
        };
        let vector = |name: &str| ckpt.require(name)?.float_values();
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layers.{i}.");
            let n = |s: &str| format!("{p}{s}");
            layers.push(LayerParams {
                ln1_weight: vector(&n("ln1.weight"))?,
                ln1_bias: vector(&n("ln1.bias"))?,
                wq: matrix(&n("attn.q.weight"))?,
                bq: vector(&n("attn.q.bias"))?,
                wk: matrix(&n("attn.k.weight"))?,
                bk: vector(&n("attn.k.bias"))?,
                wv: matrix(&n("attn.v.weight"))?,
                bv: vector(&n("attn.v.bias"))?,
                wo: matrix(&n("attn.o.weight"))?,
                bo: vector(&n("attn.o.bias"))?,
                ln2_weight: vector(&n("ln2.weight"))?,
                ln2_bias: vector(&n("ln2.bias"))?,
                ffn: FfnParams {
                    w_up: matrix(&n("ffn.up.weight"))?,
                    b_up: vector(&n("ffn.up.bias"))?,
                    w_down: matrix(&n("ffn.down.weight"))?,
                    b_down: vector(&n("ffn.down.bias"))?,
                },
            });
        }
        let params = ModelParams {
            config,
            tok_emb: matrix("tok_emb")?,
            pos_emb: matrix("pos_emb")?,
            layers,
            lnf_weight: vector("ln_f.weight")?,
            lnf_bias: vector("ln_f.bias")?,
            lm_head: matrix("lm_head.weight")?,
        };
        params.validate()?;
        Ok(params)
    }
}

/// The three container tensors for one quantized weight: `<name>.codes`,
/// `<name>.scales` (f16) and `<name>.zeros`.
pub fn quantized_tensors(name: &str, q: &QuantizedMatrix) -> [Tensor; 3] {
    let bits = q.spec.bits();
    [
        Tensor {
            name: format!("{name}.codes"),
            dims: vec![q.rows as u32, q.cols as u32],
            data: TensorData::Codes {
                bits,
                values: q.codes.clone(),
            },
        },
        Tensor {
            name: format!("{name}.scales"),
            dims: vec![q.scales.len() as u32],
            data: TensorData::F16(q.scales.iter().map(|&s| half::f16::from_f64(s)).collect()),
        },
        Tensor {
            name: format!("{name}.zeros"),
            dims: vec![q.zeros.len() as u32],
            data: TensorData::Codes {
                bits,
                values: q.zeros.clone(),
            },
        },
    ]
}

/// Rebuilds a quantized weight from its container tensors. Scales that
/// underflowed to zero in f16 are raised back to the scale floor.
pub fn read_quantized(ckpt: &Checkpoint, name: &str, spec: &QuantSpec) -> Result<QuantizedMatrix> {
    let codes_t = ckpt.require(&format!("{name}.codes"))?;
    let (bits, codes) = codes_t.codes()?;
    let (_, zeros) = ckpt.require(&format!("{name}.zeros"))?.codes()?;
    let scales = ckpt.require(&format!("{name}.scales"))?.float_values()?;
    if bits != spec.bits() {
        return Err(Error::Format(format!(
            "`{name}` stores {bits}-bit codes, metadata says {}",
            spec.bits()
        )));
    }
    let [rows, cols] = codes_t.dims.as_slice() else {
        return Err(Error::Shape(format!("`{name}.codes` is not rank 2")));
    };
    let q = QuantizedMatrix {
        spec: *spec,
        rows: *rows as usize,
        cols: *cols as usize,
        codes: codes.to_vec(),
        scales: scales.into_iter().map(|s| s.max(MIN_SCALE)).collect(),
        zeros: zeros.to_vec(),
    };
    q.validate()?;
    Ok(q)
}

pub fn layer_norm(x: &Matrix, weight: &[f64], bias: &[f64]) -> Matrix {
    let mut out = x.clone();
    let n = x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for ((v, w), b) in row.iter_mut().zip(weight).zip(bias) {
            *v = (*v - mean) * inv * w + b;
        }
    }
    out
}

/// `z = W_down relu(W_up x + b_up) + b_down`, applied to each row of `x`.
pub fn ffn_block(
    x: &Matrix,
    w_up: &Matrix,
    b_up: &[f64],
    w_down: &Matrix,
    b_down: &[f64],
) -> Result<Matrix> {
    let hidden = relu(&linear(x, w_up, Some(b_up))?);
    linear(&hidden, w_down, Some(b_down))
}

fn attention(x: &Matrix, layer: &LayerParams, heads: usize) -> Result<Matrix> {
    let q = linear(x, &layer.wq, Some(&layer.bq))?;
    let k = linear(x, &layer.wk, Some(&layer.bk))?;
    let v = linear(x, &layer.wv, Some(&layer.bv))?;
    let (t, d) = x.shape();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut mixed = Matrix::zeros(t, d);
    let mut weights = vec![0.0; t];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..t {
            let qi = &q.row(i)[cols.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                let kj = &k.row(j)[cols.clone()];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                weights[j] = s * scale;
                max = max.max(weights[j]);
            }
            let mut total = 0.0;
            for w in &mut weights[..=i] {
                *w = (*w - max).exp();
                total += *w;
            }
            let out = &mut mixed.row_mut(i)[cols.clone()];
            for j in 0..=i {
                let p = weights[j] / total;
                for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    linear(&mixed, &layer.wo, Some(&layer.bo))
}

/// Per-sequence forward state kept by the search to restart evaluation at
/// a layer's feed-forward block.
#[derive(Debug, Clone)]
pub(crate) struct SequencePass {
    /// Residual stream entering each layer's FFN sublayer.
    pub pre_ffn: Vec<Matrix>,
    /// FFN output `z` of each layer.
    pub ffn_out: Vec<Matrix>,
    pub logits: Matrix,
}

fn embed(params: &ModelParams, tokens: &[u32]) -> Result<Matrix> {
    let c = &params.config;
    if tokens.len() > c.context {
        return Err(Error::Range(format!(
            "sequence of {} tokens exceeds context window {}",
            tokens.len(),
            c.context
        )));
    }
    let mut x = Matrix::zeros(tokens.len(), c.d_model);
    for (p, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= c.vocab {
            return Err(Error::Range(format!("token id {t} >= vocab {}", c.vocab)));
        }
        for ((o, e), q) in x
            .row_mut(p)
            .iter_mut()
            .zip(params.tok_emb.row(t))
            .zip(params.pos_emb.row(p))
        {
            *o = e + q;
        }
    }
    Ok(x)
}

/// Runs one sequence. With `resume = Some((l, prev))` layers before `l` and
/// the attention sublayer of `l` are taken from `prev`, which must come from
/// parameters identical to `params` on all of those sublayers.
pub(crate) fn forward_sequence(
    params: &ModelParams,
    tokens: &[u32],
    resume: Option<(usize, &SequencePass)>,
) -> Result<SequencePass> {
    let n_layers = params.layers.len();
    let mut pre_ffn = Vec::with_capacity(n_layers);
    let mut ffn_out = Vec::with_capacity(n_layers);
    let (start, mut x) = match resume {
        Some((l, prev)) => {
            pre_ffn.extend_from_slice(&prev.pre_ffn[..l]);
            ffn_out.extend_from_slice(&prev.ffn_out[..l]);
            (l, None)
        }
        None => (0, Some(embed(params, tokens)?)),
    };
    for (i, layer) in params.layers.iter().enumerate().skip(start) {
        let mut mid = match x.take() {
            Some(mut h) => {
                let a = attention(
                    &layer_norm(&h, &layer.ln1_weight, &layer.ln1_bias),
                    layer,
                    params.config.heads,
                )?;
                h.add_assign(&a)?;
                h
            }
            None => resume.expect("resume state").1.pre_ffn[i].clone(),
        };
        let f = &layer.ffn;
        let z = ffn_block(
            &layer_norm(&mid, &layer.ln2_weight, &layer.ln2_bias),
            &f.w_up,
            &f.b_up,
            &f.w_down,
            &f.b_down,
        )?;
        pre_ffn.push(mid.clone());
        mid.add_assign(&z)?;
        ffn_out.push(z);
        x = Some(mid);
    }
    let x = x.expect("at least one layer");
    let logits = linear(
        &layer_norm(&x, &params.lnf_weight, &params.lnf_bias),
        &params.lm_head,
        None,
    )?;
    Ok(SequencePass {
        pre_ffn,
        ffn_out,
        logits,
    })
}

/// FFN outputs captured from selected layers, positions of all sequences
/// stacked in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ActivationTrace {
    pub layers: Vec<usize>,
    /// One `[positions, d_model]` matrix per entry of `layers`.
    pub activations: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, layer: usize) -> Option<&Matrix> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.activations[i])
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One `[len, vocab]` matrix per input sequence.
    pub logits: Vec<Matrix>,
    pub trace: ActivationTrace,
}

pub(crate) fn stack_rows(parts: &[&Matrix]) -> Matrix {
    let cols = parts.first().map_or(0, |m| m.cols());
    let rows = parts.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in parts {
        data.extend_from_slice(m.data());
    }
    Matrix::from_vec(rows, cols, data).expect("consistent widths")
}

pub(crate) fn check_capture(params: &ModelParams, capture: &[usize]) -> Result<()> {
    if let Some(&l) = capture.iter().find(|&&l| l >= params.layers.len()) {
        return Err(Error::Range(format!(
            "capture layer {l} outside 0..{}",
            params.layers.len()
        )));
    }
    Ok(())
}

/// Evaluates every sequence (in parallel, results kept in input order) and
/// captures the FFN outputs of the `capture` layers (0-based).
pub fn forward(params: &ModelParams, sequences: &[Vec<u32>], capture: &[usize]) -> Result<ForwardOutput> {
    check_capture(params, capture)?;
    let passes: Vec<SequencePass> = sequences
        .par_iter()
        .map(|s| forward_sequence(params, s, None))
        .collect::<Result<_>>()?;
    let trace = ActivationTrace {
        layers: capture.to_vec(),
        activations: capture
            .iter()
            .map(|&l| stack_rows(&passes.iter().map(|p| &p.ffn_out[l]).collect::<Vec<_>>()))
            .collect(),
    };
    Ok(ForwardOutput {
        logits: passes.into_iter().map(|p| p.logits).collect(),
        trace,
    })
}

/// Sum of next-token negative log-likelihoods and the number of targets.
pub(crate) fn sequence_nll(logits: &Matrix, tokens: &[u32]) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Ok((0.0, 0));
    }
    let n = tokens.len() - 1;
    let head = Matrix::from_vec(n, logits.cols(), logits.data()[..n * logits.cols()].to_vec())?;
    Ok((numerics::cross_entropy_sum(&head, &tokens[1..])?, n))
}

/// Mean next-token cross-entropy in nats over the corpus.
pub fn cross_entropy(params: &ModelParams, corpus: &[Vec<u32>]) -> Result<f64> {
    let out = forward(params, corpus, &[])?;
    let mut total = 0.0;
    let mut count = 0;
    for (logits, tokens) in out.logits.iter().zip(corpus) {
        let (s, n) = sequence_nll(logits, tokens)?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Domain("corpus has no next-token targets".into()));
    }
    Ok(total / count as f64)
}

/// `exp(mean cross-entropy)`, after fake-quantizing every linear weight when
/// `spec` is given.
pub fn perplexity(params: &ModelParams, corpus: &[Vec<u32>], spec: Option<&QuantSpec>) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Domain("empty corpus".into()));
    }
    let ce = match spec {
        Some(s) => cross_entropy(&params.fake_quantized(s)?, corpus)?,
        None => cross_entropy(params, corpus)?,
    };
    Ok(ce.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            d_ff: 12,
            vocab: 11,
            heads: 2,
            context: 16,
        }
    }

    fn tokens(n: usize, seed: u64, vocab: usize) -> Vec<u32> {
        let mut rng = RandomSource::new(seed);
        (0..n).map(|_| rng.below(vocab) as u32).collect()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        let odd = ModelConfig { d_ff: 7, ..tiny_config() };
        assert!(matches!(odd.validate(), Err(Error::Domain(_))));
        let heads = ModelConfig { heads: 3, ..tiny_config() };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn ffn_block_examples() {
        let x = Matrix::from_rows(&[vec![0.5, 2.0, 0.0]]).unwrap();
        let eye = Matrix::identity(3);
        let z = ffn_block(&x, &eye, &[0.0; 3], &eye, &[0.0; 3]).unwrap();
        assert_eq!(z, x);

        let mut rng = RandomSource::new(1);
        let w_up = random_matrix(&mut rng, 4, 3, 1.0);
        let w_down = random_matrix(&mut rng, 3, 4, 1.0);
        let b_down = vec![0.3, -1.0, 2.0];
        let z = ffn_block(&Matrix::zeros(1, 3), &w_up, &[0.0; 4], &w_down, &b_down).unwrap();
        assert_eq!(z.data(), b_down.as_slice());

        assert!(matches!(
            ffn_block(&Matrix::zeros(1, 2), &w_up, &[0.0; 4], &w_down, &b_down),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ffn_block_matches_direct_evaluation() {
        let mut rng = RandomSource::new(2);
        let (t, d, f) = (5, 6, 10);
        let x = random_matrix(&mut rng, t, d, 1.0);
        let w_up = random_matrix(&mut rng, f, d, 1.0);
        let b_up = random_vec(&mut rng, f, 1.0);
        let w_down = random_matrix(&mut rng, d, f, 1.0);
        let b_down = random_vec(&mut rng, d, 1.0);
        let z = ffn_block(&x, &w_up, &b_up, &w_down, &b_down).unwrap();
        for p in 0..t {
            let hidden: Vec<f64> = (0..f)
                .map(|j| {
                    let pre: f64 = (0..d).map(|i| w_up.get(j, i) * x.get(p, i)).sum::<f64>() + b_up[j];
                    pre.max(0.0)
                })
                .collect();
            for o in 0..d {
                let expected: f64 =
                    (0..f).map(|j| w_down.get(o, j) * hidden[j]).sum::<f64>() + b_down[o];
                assert!((z.get(p, o) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_positive_scaling_commutes() {
        let mut rng = RandomSource::new(3);
        let (d, f) = (5, 8);
        let x = random_matrix(&mut rng, 4, d, 1.0);
        let w_up = random_matrix(&mut rng, f, d, 1.0);
        let b_up = random_vec(&mut rng, f, 1.0);
        let w_down = random_matrix(&mut rng, d, f, 1.0);
        let b_down = random_vec(&mut rng, d, 1.0);
        let s: Vec<f64> = (0..f).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
        let mut su = w_up.clone();
        let mut sb = b_up.clone();
        let mut sd = w_down.clone();
        for j in 0..f {
            su.row_mut(j).iter_mut().for_each(|v| *v *= s[j]);
            sb[j] *= s[j];
            for o in 0..d {
                sd.set(o, j, w_down.get(o, j) / s[j]);
            }
        }
        let z = ffn_block(&x, &w_up, &b_up, &w_down, &b_down).unwrap();
        let zs = ffn_block(&x, &su, &sb, &sd, &b_down).unwrap();
        assert!(numerics::relative_difference(&zs, &z).unwrap() < 1e-10);
    }

    #[test]
    fn degenerate_network_is_embedding_passthrough() {
        // one layer, attention zeroed, FFN weights identity
        let config = ModelConfig {
            layers: 1,
            d_model: 4,
            d_ff: 4,
            vocab: 6,
            heads: 1,
            context: 8,
        };
        let mut p = ModelParams::random(config, 5, Init::FanIn).unwrap();
        let l = &mut p.layers[0];
        for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
            *m = Matrix::zeros(4, 4);
        }
        for b in [&mut l.bq, &mut l.bk, &mut l.bv, &mut l.bo] {
            *b = vec![0.0; 4];
        }
        l.ffn = FfnParams {
            w_up: Matrix::identity(4),
            b_up: vec![0.0; 4],
            w_down: Matrix::identity(4),
            b_down: vec![0.0; 4],
        };
        let toks = vec![3u32, 0, 5];
        let out = forward(&p, &[toks.clone()], &[]).unwrap();

        // x = e + pos; x += relu(norm(x)); logits = head · norm(x)
        let norm = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            v.iter().map(|a| (a - m) / (var + 1e-5).sqrt()).collect::<Vec<_>>()
        };
        for (pos, &t) in toks.iter().enumerate() {
            let x: Vec<f64> = (0..4)
                .map(|i| p.tok_emb.get(t as usize, i) + p.pos_emb.get(pos, i))
                .collect();
            let x: Vec<f64> = x.iter().zip(norm(&x)).map(|(a, n)| a + n.max(0.0)).collect();
            let h = norm(&x);
            for v in 0..6 {
                let expected: f64 = (0..4).map(|i| p.lm_head.get(v, i) * h[i]).sum();
                assert!((out.logits[0].get(pos, v) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn capture_is_observational_and_deterministic() {
        let p = ModelParams::random(tiny_config(), 7, Init::FanIn).unwrap();
        let seqs = vec![tokens(9, 1, 11), tokens(5, 2, 11)];
        let a = forward(&p, &seqs, &[]).unwrap();
        let b = forward(&p, &seqs, &[0, 1]).unwrap();
        assert!(a.trace.is_empty());
        assert_eq!(a.logits, b.logits);
        assert_eq!(b.trace.activations[1].shape(), (14, 8));
        let c = forward(&p, &seqs, &[0, 1]).unwrap();
        assert_eq!(b.logits, c.logits);
        assert_eq!(b.trace, c.trace);
        assert!(forward(&p, &seqs, &[2]).is_err());
    }

    #[test]
    fn causal_prefix_is_stable() {
        let p = ModelParams::random(tiny_config(), 8, Init::FanIn).unwrap();
        let s = tokens(10, 4, 11);
        let full = forward(&p, &[s.clone()], &[]).unwrap();
        let prefix = forward(&p, &[s[..6].to_vec()], &[]).unwrap();
        for r in 0..6 {
            for (a, b) in full.logits[0].row(r).iter().zip(prefix.logits[0].row(r)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_tokens_and_long_sequences() {
        let p = ModelParams::random(tiny_config(), 9, Init::FanIn).unwrap();
        assert!(matches!(forward(&p, &[vec![0, 11]], &[]), Err(Error::Range(_))));
        assert!(matches!(forward(&p, &[vec![0; 17]], &[]), Err(Error::Range(_))));
    }

    #[test]
    fn resumed_pass_matches_full_pass() {
        let p = ModelParams::random(tiny_config(), 10, Init::FanIn).unwrap();
        let s = tokens(12, 5, 11);
        let full = forward_sequence(&p, &s, None).unwrap();
        let mut q = p.clone();
        q.layers[1].ffn.w_down = q.layers[1].ffn.w_down.scale(0.5);
        let resumed = forward_sequence(&q, &s, Some((1, &full))).unwrap();
        let fresh = forward_sequence(&q, &s, None).unwrap();
        assert_eq!(resumed.logits, fresh.logits);
        assert_eq!(resumed.ffn_out, fresh.ffn_out);
    }

    #[test]
    fn uniform_model_has_perplexity_vocab() {
        let config = ModelConfig { vocab: 4, ..tiny_config() };
        let mut p = ModelParams::random(config, 1, Init::FanIn).unwrap();
        p.lm_head = Matrix::zeros(4, 8);
        let ppl = perplexity(&p, &[vec![0, 1, 2, 3, 1]], None).unwrap();
        assert!((ppl - 4.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_degenerate_inputs() {
        let p = ModelParams::random(tiny_config(), 1, Init::FanIn).unwrap();
        assert!(matches!(perplexity(&p, &[], None), Err(Error::Domain(_))));
        assert!(matches!(
            perplexity(&p, &[vec![1], vec![2]], None),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn perplexity_is_exp_cross_entropy() {
        let p = ModelParams::random(tiny_config(), 2, Init::FanIn).unwrap();
        let corpus = vec![tokens(10, 1, 11), tokens(7, 2, 11)];
        let ce = cross_entropy(&p, &corpus).unwrap();
        assert_eq!(perplexity(&p, &corpus, None).unwrap(), ce.exp());
    }

    #[test]
    fn checkpoint_round_trip_full_precision() {
        let p = ModelParams::random(tiny_config(), 3, Init::FanIn).unwrap();
        let ckpt = p.to_checkpoint();
        let bytes = ckpt.to_bytes().unwrap();
        let back = ModelParams::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        // f32 storage
        for ((_, a), (_, b)) in p.weights().iter().zip(back.weights()) {
            assert!(crate::quant::max_abs_error(a, b) < 1e-6);
        }
    }

    #[test]
    fn quantized_checkpoint_round_trip() {
        let p = ModelParams::random(tiny_config(), 4, Init::FanIn).unwrap();
        let spec = QuantSpec::new(2, 4).unwrap();
        let ckpt = p.to_quantized_checkpoint(&spec).unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for (name, q) in p.quantize_weights(&spec).unwrap() {
            let r = read_quantized(&back, &name, &spec).unwrap();
            assert_eq!(r.codes, q.codes);
            assert_eq!(r.zeros, q.zeros);
            for (a, b) in r.scales.iter().zip(&q.scales) {
                assert_eq!(*a, half::f16::from_f64(*b).to_f64().max(MIN_SCALE));
            }
        }
        let loaded = ModelParams::from_checkpoint(&back).unwrap();
        let fq = p.fake_quantized(&spec).unwrap();
        for ((_, a), (_, b)) in fq.weights().iter().zip(loaded.weights()) {
            assert!(crate::quant::max_abs_error(a, b) < 1e-2);
        }
    }
}
