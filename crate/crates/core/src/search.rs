//! Activation-guided hill climbing over per-layer FFN transforms.
//!
//! The objective is the cross-entropy of the fake-quantized model on the
//! calibration set plus `α` times the mean (over matched layers) squared
//! error between the quantized model's FFN outputs and those of the
//! original full-precision model. Each step picks a layer, perturbs a random
//! subset of its hidden neurons (cyclic reshuffle of the permutation,
//! Gaussian random walk on scales and rotation angles), requantizes that
//! layer and keeps the candidate only if the objective strictly drops.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::invariance::{transform_ffn, LayerTransform};
use crate::model::{
    check_capture, forward, forward_sequence, sequence_nll, ActivationTrace, ModelParams,
    SequencePass,
};
use crate::numerics::{self, gaussian, squared_error_sum, RandomSource};
use crate::quant::{fake_quantize_matrix, QuantSpec};

/// Which transform families a proposal may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moves {
    pub permute: bool,
    pub scale: bool,
    pub rotate: bool,
}

impl Moves {
    pub const ALL: Moves = Moves {
        permute: true,
        scale: true,
        rotate: true,
    };
    pub const PERMUTE: Moves = Moves {
        permute: true,
        scale: false,
        rotate: false,
    };
    pub const SCALE: Moves = Moves {
        permute: false,
        scale: true,
        rotate: false,
    };
    pub const ROTATE: Moves = Moves {
        permute: false,
        scale: false,
        rotate: true,
    };
}

impl Default for Moves {
    fn default() -> Self {
        Moves::ALL
    }
}

/// Which layers feed the activation-matching term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerMatch {
    All,
    /// `n` evenly spaced layers.
    Count(usize),
    Layers(Vec<usize>),
}

impl LayerMatch {
    pub fn resolve(&self, n_layers: usize) -> Vec<usize> {
        match self {
            LayerMatch::All => (0..n_layers).collect(),
            LayerMatch::Count(n) => evenly_spaced_layers(n_layers, *n),
            LayerMatch::Layers(v) => v.clone(),
        }
    }
}

/// `count` layer indices spread evenly over `0..n_layers`, always including
/// the last layer when `count > 0`.
pub fn evenly_spaced_layers(n_layers: usize, count: usize) -> Vec<usize> {
    let count = count.min(n_layers);
    if count == 0 {
        return Vec::new();
    }
    // layer (i+1)·L/count − 1 for i in 0..count
    (0..count)
        .map(|i| ((i + 1) * n_layers).div_ceil(count) - 1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    /// Random-walk standard deviation of the scales.
    pub sigma_scale: f64,
    /// Random-walk standard deviation of the rotation angles (radians).
    pub sigma_rotation: f64,
    /// Fraction of hidden neurons a proposal touches.
    pub subset_fraction: f64,
    /// Initial cross-entropy to weighted-MSE ratio used to fix `α`.
    pub alpha_ratio: f64,
    /// Explicit `α`, bypassing `alpha_ratio`.
    pub alpha: Option<f64>,
    pub matched_layers: LayerMatch,
    /// `None` searches against the full-precision model (no quantization).
    pub quant: Option<QuantSpec>,
    pub seed: u64,
    pub moves: Moves,
    /// Width of the sliding acceptance-rate window.
    pub window: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            sigma_scale: 1e-2,
            sigma_rotation: 1e-5,
            subset_fraction: 0.10,
            alpha_ratio: 10.0,
            alpha: None,
            matched_layers: LayerMatch::All,
            quant: Some(QuantSpec::new(2, 128).expect("valid")),
            seed: 0,
            moves: Moves::ALL,
            window: 500,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(Error::Domain(format!(
                "subset fraction {} not in (0, 1]",
                self.subset_fraction
            )));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_rotation >= 0.0) {
            return Err(Error::Domain("random-walk deviations must be >= 0".into()));
        }
        if !(self.alpha_ratio > 0.0) {
            return Err(Error::Domain("alpha ratio must be positive".into()));
        }
        if matches!(self.alpha, Some(a) if !(a >= 0.0)) {
            return Err(Error::Domain("alpha must be >= 0".into()));
        }
        if self.window == 0 {
            return Err(Error::Domain("acceptance window must be positive".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy plus `alpha` times the mean over `matched` layers of
/// the MSE between `params`' FFN outputs (after fake quantization with
/// `spec`) and `reference`.
pub fn objective(
    params: &ModelParams,
    spec: Option<&QuantSpec>,
    calib: &[Vec<u32>],
    reference: &ActivationTrace,
    alpha: f64,
    matched: &[usize],
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Domain("alpha must be >= 0".into()));
    }
    let quantized;
    let params = match spec {
        Some(s) => {
            quantized = params.fake_quantized(s)?;
            &quantized
        }
        None => params,
    };
    let out = forward(params, calib, matched)?;
    let mut total = 0.0;
    let mut count = 0;
    for (logits, tokens) in out.logits.iter().zip(calib) {
        let (s, n) = sequence_nll(logits, tokens)?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(Error::Domain("calibration set has no next-token targets".into()));
    }
    let ce = total / count as f64;
    if matched.is_empty() {
        return Ok(ce);
    }
    let mut mse = 0.0;
    for (&layer, act) in matched.iter().zip(&out.trace.activations) {
        let r = reference
            .get(layer)
            .ok_or_else(|| Error::Shape(format!("reference trace lacks layer {layer}")))?;
        mse += numerics::mse(act, r)?;
    }
    Ok(ce + alpha * mse / matched.len() as f64)
}

/// Cross-entropy and activation-matching terms of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParts {
    pub ce: f64,
    pub mse: f64,
    pub loss: f64,
}

/// Cached quantized forward state of every calibration sequence.
#[derive(Debug, Clone)]
struct Evaluation {
    passes: Vec<SequencePass>,
    ce: f64,
    mse: f64,
}

struct Evaluator<'a> {
    calib: &'a [Vec<u32>],
    matched: Vec<usize>,
    /// Full-precision FFN outputs of the original model per sequence.
    reference: Vec<SequencePass>,
    targets: usize,
    positions: usize,
    d_model: usize,
}

impl<'a> Evaluator<'a> {
    fn new(base: &ModelParams, calib: &'a [Vec<u32>], matched: Vec<usize>) -> Result<Self> {
        check_capture(base, &matched)?;
        let targets: usize = calib.iter().map(|s| s.len().saturating_sub(1)).sum();
        if targets == 0 {
            return Err(Error::Domain("calibration set has no next-token targets".into()));
        }
        let reference = calib
            .par_iter()
            .map(|s| forward_sequence(base, s, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            calib,
            matched,
            reference,
            targets,
            positions: calib.iter().map(Vec::len).sum(),
            d_model: base.config.d_model,
        })
    }

    fn evaluate(&self, params: &ModelParams, resume: Option<(usize, &Evaluation)>) -> Result<Evaluation> {
        let per_seq = self
            .calib
            .par_iter()
            .enumerate()
            .map(|(i, tokens)| {
                let pass = forward_sequence(params, tokens, resume.map(|(l, e)| (l, &e.passes[i])))?;
                let (nll, _) = sequence_nll(&pass.logits, tokens)?;
                let se = self
                    .matched
                    .iter()
                    .map(|&l| squared_error_sum(&pass.ffn_out[l], &self.reference[i].ffn_out[l]))
                    .collect::<Result<Vec<_>>>()?;
                Ok((pass, nll, se))
            })
            .collect::<Result<Vec<_>>>()?;
        // fixed-order reductions
        let mut nll = 0.0;
        let mut se = vec![0.0; self.matched.len()];
        let mut passes = Vec::with_capacity(per_seq.len());
        for (pass, n, s) in per_seq {
            nll += n;
            for (acc, v) in se.iter_mut().zip(s) {
                *acc += v;
            }
            passes.push(pass);
        }
        let mse = if self.matched.is_empty() {
            0.0
        } else {
            let denom = (self.positions * self.d_model) as f64;
            se.iter().map(|s| s / denom).sum::<f64>() / self.matched.len() as f64
        };
        Ok(Evaluation {
            passes,
            ce: nll / self.targets as f64,
            mse,
        })
    }

    fn reference_trace(&self) -> ActivationTrace {
        ActivationTrace {
            layers: self.matched.clone(),
            activations: self
                .matched
                .iter()
                .map(|&l| {
                    crate::model::stack_rows(&self.reference.iter().map(|p| &p.ffn_out[l]).collect::<Vec<_>>())
                })
                .collect(),
        }
    }
}

/// A candidate transform for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub layer: usize,
    pub transform: LayerTransform,
    /// Hidden indices chosen for this move, in draw order.
    pub subset: Vec<usize>,
}

const LAYER_STREAM: u64 = 0xff_ffff;

/// Draws the proposal for `step` from `transforms`. Randomness comes only from
/// sub-streams of `rng` keyed by the step, so proposals do not depend on
/// earlier accept/reject outcomes except through `transforms`.
pub fn propose(
    transforms: &[LayerTransform],
    cfg: &SearchConfig,
    rng: &RandomSource,
    step: u64,
) -> Proposal {
    let layer = rng.substream(step, LAYER_STREAM).below(transforms.len());
    let mut draw = rng.substream(step, layer as u64);
    let current = &transforms[layer];
    let n = current.width();
    let k = ((cfg.subset_fraction * n as f64).ceil() as usize).clamp(1, n);
    let subset = index::sample(&mut draw, n, k).into_vec();
    let mut next = current.clone();

    if cfg.moves.permute && k >= 2 {
        // cyclic derangement of the chosen positions
        for (i, &pos) in subset.iter().enumerate() {
            next.perm[pos] = current.perm[subset[(i + 1) % k]];
        }
    }
    if cfg.moves.scale {
        for &i in &subset {
            next.scales[i] = loop {
                let s = gaussian(&mut draw, &[current.scales[i]], cfg.sigma_scale)[0];
                if s > 0.0 {
                    break s;
                }
            };
        }
    }
    if cfg.moves.rotate {
        let mut pairs: Vec<usize> = subset.iter().map(|i| i / 2).collect();
        pairs.sort_unstable();
        pairs.dedup();
        for p in pairs {
            next.angles[p] = gaussian(&mut draw, &[current.angles[p]], cfg.sigma_rotation)[0];
        }
    }
    Proposal {
        layer,
        transform: next,
        subset,
    }
}

/// One row of the optimization curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub layer: usize,
    pub proposed_loss: f64,
    pub best_loss: f64,
    #[serde(with = "bool_as_int")]
    pub accepted: bool,
    pub acceptance_rate_window: f64,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(serde::de::Error::custom(format!("expected 0 or 1, got {v}"))),
        }
    }
}

/// Mutable hill-climbing state: accepted transforms, the transformed
/// full-precision parameters and their fake-quantized image.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub transforms: Vec<LayerTransform>,
    pub params: ModelParams,
    pub quantized: ModelParams,
    pub best_loss: f64,
    pub best_parts: ObjectiveParts,
    pub steps_taken: usize,
    pub log: Vec<StepRecord>,
    eval: Evaluation,
}

pub struct Search<'a> {
    base: &'a ModelParams,
    cfg: SearchConfig,
    evaluator: Evaluator<'a>,
    alpha: f64,
    initial: ObjectiveParts,
    rng: RandomSource,
    state: SearchState,
    window_accepts: usize,
}

fn quantize_if(params: &ModelParams, spec: Option<&QuantSpec>) -> Result<ModelParams> {
    match spec {
        Some(s) => params.fake_quantized(s),
        None => Ok(params.clone()),
    }
}

impl<'a> Search<'a> {
    /// Identity transforms everywhere, the reference trace from `base`, and
    /// `α` fixed from the initial quantized losses.
    pub fn new(base: &'a ModelParams, cfg: SearchConfig, calib: &'a [Vec<u32>]) -> Result<Self> {
        cfg.validate()?;
        base.validate()?;
        if calib.is_empty() {
            return Err(Error::Domain("empty calibration set".into()));
        }
        let matched = cfg.matched_layers.resolve(base.layers.len());
        let evaluator = Evaluator::new(base, calib, matched)?;
        let quantized = quantize_if(base, cfg.quant.as_ref())?;
        let eval = evaluator.evaluate(&quantized, None)?;
        let alpha = match cfg.alpha {
            Some(a) => a,
            None if eval.mse > 0.0 => eval.ce / (cfg.alpha_ratio * eval.mse),
            None => 0.0,
        };
        let loss = eval.ce + alpha * eval.mse;
        let initial = ObjectiveParts {
            ce: eval.ce,
            mse: eval.mse,
            loss,
        };
        let d_ff = base.config.d_ff;
        let state = SearchState {
            transforms: vec![LayerTransform::identity(d_ff); base.layers.len()],
            params: base.clone(),
            quantized,
            best_loss: loss,
            best_parts: initial,
            steps_taken: 0,
            log: Vec::new(),
            eval,
        };
        Ok(Self {
            base,
            rng: RandomSource::new(cfg.seed),
            cfg,
            evaluator,
            alpha,
            initial,
            state,
            window_accepts: 0,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn initial(&self) -> ObjectiveParts {
        self.initial
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    /// Full-precision FFN outputs of the original model on the matched layers.
    pub fn reference_trace(&self) -> ActivationTrace {
        self.evaluator.reference_trace()
    }

    pub fn next_proposal(&self) -> Proposal {
        propose(
            &self.state.transforms,
            &self.cfg,
            &self.rng,
            self.state.steps_taken as u64 + 1,
        )
    }

    /// Objective of the model whose layer `proposal.layer` carries the
    /// proposed transform and every other layer its current one, together
    /// with the candidate's caches.
    fn score(&self, proposal: &Proposal) -> Result<(ObjectiveParts, ModelParams, ModelParams, Evaluation)> {
        let l = proposal.layer;
        let ffn = transform_ffn(&self.base.layers[l].ffn, &proposal.transform)?;
        let mut quantized = self.state.quantized.clone();
        let q = &mut quantized.layers[l].ffn;
        match &self.cfg.quant {
            Some(spec) => {
                q.w_up = fake_quantize_matrix(&ffn.w_up, spec)?;
                q.w_down = fake_quantize_matrix(&ffn.w_down, spec)?;
            }
            None => {
                q.w_up = ffn.w_up.clone();
                q.w_down = ffn.w_down.clone();
            }
        }
        q.b_up = ffn.b_up.clone();
        let eval = self.evaluator.evaluate(&quantized, Some((l, &self.state.eval)))?;
        let parts = ObjectiveParts {
            ce: eval.ce,
            mse: eval.mse,
            loss: eval.ce + self.alpha * eval.mse,
        };
        let mut params = self.state.params.clone();
        params.layers[l].ffn = ffn;
        Ok((parts, params, quantized, eval))
    }

    /// Objective the proposal would reach, without changing the state.
    pub fn evaluate_proposal(&self, proposal: &Proposal) -> Result<ObjectiveParts> {
        Ok(self.score(proposal)?.0)
    }

    /// Scores `proposal` and accepts it iff its loss is strictly below the
    /// current best.
    pub fn apply_proposal(&mut self, proposal: Proposal) -> Result<StepRecord> {
        let (parts, params, quantized, eval) = self.score(&proposal)?;
        let accepted = parts.loss < self.state.best_loss;
        let st = &mut self.state;
        if accepted {
            st.transforms[proposal.layer] = proposal.transform;
            st.params = params;
            st.quantized = quantized;
            st.eval = eval;
            st.best_loss = parts.loss;
            st.best_parts = parts;
        }
        st.steps_taken += 1;
        self.window_accepts += accepted as usize;
        if st.log.len() >= self.cfg.window {
            self.window_accepts -= st.log[st.log.len() - self.cfg.window].accepted as usize;
        }
        let in_window = (st.log.len() + 1).min(self.cfg.window);
        let record = StepRecord {
            step: st.steps_taken,
            layer: proposal.layer,
            proposed_loss: parts.loss,
            best_loss: st.best_loss,
            accepted,
            acceptance_rate_window: self.window_accepts as f64 / in_window as f64,
        };
        st.log.push(record);
        Ok(record)
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let proposal = self.next_proposal();
        self.apply_proposal(proposal)
    }

    pub fn run_to_end(mut self) -> Result<SearchOutcome> {
        while self.state.steps_taken < self.cfg.steps {
            self.step()?;
        }
        Ok(SearchOutcome {
            alpha: self.alpha,
            initial: self.initial,
            best: self.state.best_parts,
            params: self.state.params,
            quantized: self.state.quantized,
            transforms: self.state.transforms,
            curve: self.state.log,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub alpha: f64,
    /// Objective of plain round-to-nearest quantization of the input model.
    pub initial: ObjectiveParts,
    pub best: ObjectiveParts,
    /// Transformed full-precision parameters.
    pub params: ModelParams,
    /// Their fake-quantized image.
    pub quantized: ModelParams,
    pub transforms: Vec<LayerTransform>,
    pub curve: Vec<StepRecord>,
}

/// Runs `cfg.steps` hill-climbing steps from identity transforms.
pub fn run(base: &ModelParams, cfg: SearchConfig, calib: &[Vec<u32>]) -> Result<SearchOutcome> {
    Search::new(base, cfg, calib)?.run_to_end()
}
