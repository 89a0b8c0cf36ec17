//! Recurrent actor-critic network: shared feed-forward feature layers, one
//! LSTM layer, an actor head producing a masked softmax over actions and a
//! critic head producing a scalar value. Gradients are computed by hand with
//! backpropagation through time over a whole episode.
//!
//! Parameters live in one flat `f64` vector. Layer order in that vector (and
//! in checkpoint files) is: feature layers, LSTM (input weights, recurrent
//! weights, bias), actor layers, critic layers. Every dense layer stores its
//! weight matrix row-major (`out x in`) followed by its bias. LSTM gate rows
//! are ordered input, forget, cell, output.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths. `actor_layers` ends with the number of actions and
/// `critic_layers` ends with 1; the last layer of each head is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub feature_layers: Vec<usize>,
    pub lstm_width: usize,
    pub actor_layers: Vec<usize>,
    pub critic_layers: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    /// Builds an architecture from hidden widths; appends the output widths
    /// of both heads.
    pub fn new(
        input_dim: usize,
        feature_layers: &[usize],
        lstm_width: usize,
        actor_hidden: &[usize],
        critic_hidden: &[usize],
        n_actions: usize,
    ) -> Result<Self> {
        let mut actor_layers = actor_hidden.to_vec();
        actor_layers.push(n_actions);
        let mut critic_layers = critic_hidden.to_vec();
        critic_layers.push(1);
        let arch = Architecture {
            input_dim,
            feature_layers: feature_layers.to_vec(),
            lstm_width,
            actor_layers,
            critic_layers,
            activation: Activation::Tanh,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("architecture: {msg}")));
        if self.feature_layers.is_empty() {
            return bad("at least one shared feature layer is required");
        }
        if self.actor_layers.is_empty() || self.critic_layers.is_empty() {
            return bad("actor and critic heads need an output layer");
        }
        if self.critic_layers.last() != Some(&1) {
            return bad("critic head must end in a single output");
        }
        let widths = std::iter::once(self.input_dim)
            .chain(self.feature_layers.iter().copied())
            .chain(std::iter::once(self.lstm_width))
            .chain(self.actor_layers.iter().copied())
            .chain(self.critic_layers.iter().copied());
        for w in widths {
            if w == 0 {
                return bad("all widths must be at least 1");
            }
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        *self.actor_layers.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    inp: usize,
    out: usize,
}

impl Dense {
    fn end(&self) -> usize {
        self.b + self.out
    }
}

#[derive(Debug, Clone, Copy)]
struct LstmLayout {
    wx: usize,
    wh: usize,
    b: usize,
    inp: usize,
    width: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    features: Vec<Dense>,
    lstm: LstmLayout,
    actor: Vec<Dense>,
    critic: Vec<Dense>,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        fn dense(offset: &mut usize, inp: usize, out: usize) -> Dense {
            let d = Dense {
                w: *offset,
                b: *offset + inp * out,
                inp,
                out,
            };
            *offset = d.end();
            d
        }
        fn head(offset: &mut usize, inp: usize, widths: &[usize]) -> Vec<Dense> {
            let mut inp = inp;
            widths
                .iter()
                .map(|&w| {
                    let d = dense(offset, inp, w);
                    inp = w;
                    d
                })
                .collect()
        }

        let mut offset = 0;
        let features = head(&mut offset, arch.input_dim, &arch.feature_layers);
        let inp = *arch.feature_layers.last().unwrap_or(&arch.input_dim);
        let h = arch.lstm_width;
        let lstm = LstmLayout {
            wx: offset,
            wh: offset + 4 * h * inp,
            b: offset + 4 * h * inp + 4 * h * h,
            inp,
            width: h,
        };
        offset = lstm.b + 4 * h;
        let actor = head(&mut offset, h, &arch.actor_layers);
        let critic = head(&mut offset, h, &arch.critic_layers);
        Layout {
            features,
            lstm,
            actor,
            critic,
            total: offset,
        }
    }
}

/// Network weights, or a gradient with the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    arch: Architecture,
    layout_total: usize,
    data: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let total = arch.param_count();
        Ok(PolicyParams {
            arch: arch.clone(),
            layout_total: total,
            data: vec![0.0; total],
        })
    }

    /// Uniform weights in `±1/sqrt(fan_in)`, zero biases, forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        let mut p = PolicyParams::zeros(arch)?;
        let layout = Layout::new(arch);
        let mut fill = |data: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in data {
                *v = rng.gen_range(-bound..=bound);
            }
        };
        for d in layout.features.iter().chain(&layout.actor).chain(&layout.critic) {
            fill(&mut p.data[d.w..d.b], d.inp);
        }
        let l = layout.lstm;
        fill(&mut p.data[l.wx..l.wh], l.inp);
        fill(&mut p.data[l.wh..l.b], l.width);
        for v in &mut p.data[l.b + l.width..l.b + 2 * l.width] {
            *v = 1.0;
        }
        Ok(p)
    }

    pub fn from_vec(arch: &Architecture, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let total = arch.param_count();
        if data.len() != total {
            return Err(Error::Dimension {
                what: "parameter vector",
                got: data.len(),
                expected: total,
            });
        }
        Ok(PolicyParams {
            arch: arch.clone(),
            layout_total: total,
            data,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.layout_total
    }

    pub fn is_empty(&self) -> bool {
        self.layout_total == 0
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bias entries (dense biases and the LSTM bias), for inspection.
    pub fn biases(&self) -> Vec<f64> {
        let layout = Layout::new(&self.arch);
        let mut out = Vec::new();
        for d in layout.features.iter().chain(&layout.actor).chain(&layout.critic) {
            out.extend_from_slice(&self.data[d.b..d.end()]);
        }
        out.extend_from_slice(&self.data[layout.lstm.b..layout.lstm.b + 4 * layout.lstm.width]);
        out
    }

    /// Order-sensitive FNV-1a hash of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(width: usize) -> Self {
        HiddenState {
            h: vec![0.0; width],
            c: vec![0.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Raw actor outputs before masking.
    pub logits: Vec<f64>,
    pub action_probs: Vec<f64>,
    pub value: f64,
}

impl PolicyOutput {
    /// `ln pi(a)`; `-inf` for masked actions.
    pub fn log_prob(&self, action: usize) -> f64 {
        self.action_probs[action].ln()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .action_probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

/// Draws an action index; greedy ties resolve to the lowest index.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R, mode: SampleMode) -> usize {
    match mode {
        SampleMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SampleMode::Stochastic => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last_legal = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > 0.0 {
                    acc += p;
                    last_legal = i;
                    if u < acc {
                        return i;
                    }
                }
            }
            last_legal
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = W x + b` for a dense layer stored in `data`.
fn affine(data: &[f64], d: &Dense, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let w = &data[d.w..d.b];
    let b = &data[d.b..d.end()];
    for (row, &bias) in w.chunks_exact(d.inp).zip(b) {
        out.push(bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

/// Accumulates `dW += dy x^T`, `db += dy`, and returns `dx = W^T dy`.
fn affine_backward(data: &[f64], grad: &mut [f64], d: &Dense, x: &[f64], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; d.inp];
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = d.w + o * d.inp;
        for (k, &xk) in x.iter().enumerate() {
            grad[row + k] += g * xk;
            dx[k] += g * data[row + k];
        }
        grad[d.b + o] += g;
    }
    dx
}

/// Masked, max-shifted softmax.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= sum;
    }
    probs
}

#[derive(Debug, Clone)]
struct StepCache {
    /// Inputs to each feature layer followed by the last feature output.
    feature_acts: Vec<Vec<f64>>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gate_i: Vec<f64>,
    gate_f: Vec<f64>,
    gate_g: Vec<f64>,
    gate_o: Vec<f64>,
    tanh_c: Vec<f64>,
    /// Inputs to each head layer (the first is the LSTM output).
    actor_acts: Vec<Vec<f64>>,
    critic_acts: Vec<Vec<f64>>,
}

/// Forward activations of a whole episode, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EpisodeTape {
    steps: Vec<StepCache>,
    pub outputs: Vec<PolicyOutput>,
    pub final_hidden: HiddenState,
}

impl EpisodeTape {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

/// Gradient of a scalar loss with respect to the network outputs of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    /// With respect to the pre-softmax logits; entries of masked actions are ignored.
    pub d_logits: Vec<f64>,
    pub d_value: f64,
}

impl PolicyParams {
    fn check_input(&self, obs: &[f64], mask: &[bool]) -> Result<()> {
        if obs.len() != self.arch.input_dim {
            return Err(Error::Dimension {
                what: "observation",
                got: obs.len(),
                expected: self.arch.input_dim,
            });
        }
        if mask.len() != self.arch.n_actions() {
            return Err(Error::Dimension {
                what: "action mask",
                got: mask.len(),
                expected: self.arch.n_actions(),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Config("action mask excludes every action".into()));
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation"));
        }
        Ok(())
    }

    fn step_forward(&self, layout: &Layout, obs: &[f64], hidden: &HiddenState, mask: &[bool]) -> (StepCache, PolicyOutput, HiddenState) {
        let data = &self.data;
        let act = self.arch.activation;

        let mut feature_acts = Vec::with_capacity(layout.features.len() + 1);
        feature_acts.push(obs.to_vec());
        for d in &layout.features {
            let mut y = Vec::with_capacity(d.out);
            affine(data, d, feature_acts.last().unwrap(), &mut y);
            for v in &mut y {
                *v = act.apply(*v);
            }
            feature_acts.push(y);
        }

        let l = &layout.lstm;
        let hw = l.width;
        let x = feature_acts.last().unwrap();
        let mut z = data[l.b..l.b + 4 * hw].to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let wx = &data[l.wx + r * l.inp..l.wx + (r + 1) * l.inp];
            let wh = &data[l.wh + r * hw..l.wh + (r + 1) * hw];
            *zr += wx.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                + wh.iter().zip(&hidden.h).map(|(a, b)| a * b).sum::<f64>();
        }
        let gate_i: Vec<f64> = z[..hw].iter().map(|&v| sigmoid(v)).collect();
        let gate_f: Vec<f64> = z[hw..2 * hw].iter().map(|&v| sigmoid(v)).collect();
        let gate_g: Vec<f64> = z[2 * hw..3 * hw].iter().map(|&v| v.tanh()).collect();
        let gate_o: Vec<f64> = z[3 * hw..].iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hw)
            .map(|k| gate_f[k] * hidden.c[k] + gate_i[k] * gate_g[k])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
        let h: Vec<f64> = (0..hw).map(|k| gate_o[k] * tanh_c[k]).collect();

        let run_head = |head: &[Dense]| {
            let mut acts = Vec::with_capacity(head.len() + 1);
            acts.push(h.clone());
            for (idx, d) in head.iter().enumerate() {
                let mut y = Vec::with_capacity(d.out);
                affine(data, d, acts.last().unwrap(), &mut y);
                if idx + 1 < head.len() {
                    for v in &mut y {
                        *v = act.apply(*v);
                    }
                }
                acts.push(y);
            }
            acts
        };
        let mut actor_acts = run_head(&layout.actor);
        let mut critic_acts = run_head(&layout.critic);
        let logits = actor_acts.pop().unwrap();
        let value = critic_acts.pop().unwrap()[0];
        let action_probs = masked_softmax(&logits, mask);

        let cache = StepCache {
            feature_acts,
            h_prev: hidden.h.clone(),
            c_prev: hidden.c.clone(),
            gate_i,
            gate_f,
            gate_g,
            gate_o,
            tanh_c,
            actor_acts,
            critic_acts,
        };
        let out = PolicyOutput {
            logits,
            action_probs,
            value,
        };
        (cache, out, HiddenState { h, c })
    }

    /// One step of the recurrent policy.
    pub fn forward(&self, obs: &[f64], hidden: &HiddenState, mask: &[bool]) -> Result<(PolicyOutput, HiddenState)> {
        self.check_input(obs, mask)?;
        if hidden.h.len() != self.arch.lstm_width || hidden.c.len() != self.arch.lstm_width {
            return Err(Error::Dimension {
                what: "hidden state",
                got: hidden.h.len(),
                expected: self.arch.lstm_width,
            });
        }
        let layout = Layout::new(&self.arch);
        let (_, out, next) = self.step_forward(&layout, obs, hidden, mask);
        if !out.value.is_finite() || out.action_probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy output"));
        }
        Ok((out, next))
    }

    /// Runs an episode from a zero hidden state, recording activations.
    pub fn unroll(&self, observations: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<EpisodeTape> {
        if observations.len() != masks.len() {
            return Err(Error::Dimension {
                what: "mask sequence",
                got: masks.len(),
                expected: observations.len(),
            });
        }
        let layout = Layout::new(&self.arch);
        let mut hidden = HiddenState::zeros(self.arch.lstm_width);
        let mut steps = Vec::with_capacity(observations.len());
        let mut outputs = Vec::with_capacity(observations.len());
        for (obs, mask) in observations.iter().zip(masks) {
            self.check_input(obs, mask)?;
            let (cache, out, next) = self.step_forward(&layout, obs, &hidden, mask);
            if !out.value.is_finite() || out.action_probs.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite("policy output"));
            }
            steps.push(cache);
            outputs.push(out);
            hidden = next;
        }
        Ok(EpisodeTape {
            steps,
            outputs,
            final_hidden: hidden,
        })
    }

    /// Backpropagation through time. Adds the gradient of the loss whose
    /// output-gradients are `grads` into `into` (same shape as `self`).
    pub fn backward_into(&self, tape: &EpisodeTape, grads: &[OutputGrad], into: &mut PolicyParams) -> Result<()> {
        if grads.len() != tape.len() {
            return Err(Error::Dimension {
                what: "output gradients",
                got: grads.len(),
                expected: tape.len(),
            });
        }
        if into.arch != self.arch {
            return Err(Error::ArchitectureMismatch("gradient buffer".into()));
        }
        let layout = Layout::new(&self.arch);
        let data = &self.data;
        let g = &mut into.data;
        let act = self.arch.activation;
        let l = layout.lstm;
        let hw = l.width;

        let mut dh_next = vec![0.0; hw];
        let mut dc_next = vec![0.0; hw];
        for (cache, og) in tape.steps.iter().zip(grads).rev() {
            if og.d_logits.len() != self.arch.n_actions() {
                return Err(Error::Dimension {
                    what: "logit gradient",
                    got: og.d_logits.len(),
                    expected: self.arch.n_actions(),
                });
            }
            if !og.d_value.is_finite() || og.d_logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("output gradient"));
            }
            let mut dh = dh_next.clone();

            let mut head_back = |head: &[Dense], acts: &[Vec<f64>], dy: Vec<f64>, g: &mut [f64]| {
                let mut dy = dy;
                for (idx, d) in head.iter().enumerate().rev() {
                    if idx + 1 < head.len() {
                        // acts[idx + 1] is this layer's activated output
                        for (v, &y) in dy.iter_mut().zip(&acts[idx + 1]) {
                            *v *= act.derivative_from_output(y);
                        }
                    }
                    dy = affine_backward(data, g, d, &acts[idx], &dy);
                }
                for (a, b) in dh.iter_mut().zip(&dy) {
                    *a += b;
                }
            };
            head_back(&layout.actor, &cache.actor_acts, og.d_logits.clone(), g);
            head_back(&layout.critic, &cache.critic_acts, vec![og.d_value], g);

            let mut dz = vec![0.0; 4 * hw];
            for k in 0..hw {
                let o = cache.gate_o[k];
                let tc = cache.tanh_c[k];
                let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
                let i = cache.gate_i[k];
                let f = cache.gate_f[k];
                let gg = cache.gate_g[k];
                dz[k] = dc * gg * i * (1.0 - i);
                dz[hw + k] = dc * cache.c_prev[k] * f * (1.0 - f);
                dz[2 * hw + k] = dc * i * (1.0 - gg * gg);
                dz[3 * hw + k] = dh[k] * tc * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            let x = cache.feature_acts.last().unwrap();
            let mut dx = vec![0.0; l.inp];
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                let wx = l.wx + r * l.inp;
                for (k, &xk) in x.iter().enumerate() {
                    g[wx + k] += dzr * xk;
                    dx[k] += dzr * data[wx + k];
                }
                let wh = l.wh + r * hw;
                for k in 0..hw {
                    g[wh + k] += dzr * cache.h_prev[k];
                    dh_next[k] += dzr * data[wh + k];
                }
                g[l.b + r] += dzr;
            }

            let mut dy = dx;
            for (idx, d) in layout.features.iter().enumerate().rev() {
                for (v, &y) in dy.iter_mut().zip(&cache.feature_acts[idx + 1]) {
                    *v *= act.derivative_from_output(y);
                }
                dy = affine_backward(data, g, d, &cache.feature_acts[idx], &dy);
            }
        }
        if !into.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(())
    }

    pub fn backward(&self, tape: &EpisodeTape, grads: &[OutputGrad]) -> Result<PolicyParams> {
        let mut out = PolicyParams::zeros(&self.arch)?;
        self.backward_into(tape, grads, &mut out)?;
        Ok(out)
    }
}

/// Observations and legal-action masks of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInputs {
    pub observations: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

/// A differentiable scalar loss of the per-step outputs of one episode.
pub trait EpisodeLoss {
    fn evaluate(&self, outputs: &[PolicyOutput]) -> (f64, Vec<OutputGrad>);
}

/// Loss value and parameter gradient for one episode.
pub fn loss_and_grad<L: EpisodeLoss + ?Sized>(
    params: &PolicyParams,
    inputs: &EpisodeInputs,
    loss: &L,
) -> Result<(f64, PolicyParams)> {
    let tape = params.unroll(&inputs.observations, &inputs.masks)?;
    let (value, grads) = loss.evaluate(&tape.outputs);
    let grad = params.backward(&tape, &grads)?;
    Ok((value, grad))
}

/// Gradient-check relative error `|a - n| / max(|a|, |n|, floor)`.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares backpropagated gradients with fourth-order central differences on up to
/// `coords` randomly chosen parameters (all of them if fewer exist) and
/// returns the largest relative error.
pub fn grad_check<L: EpisodeLoss + ?Sized, R: Rng + ?Sized>(
    params: &PolicyParams,
    inputs: &EpisodeInputs,
    loss: &L,
    epsilon: f64,
    coords: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let (_, analytic) = loss_and_grad(params, inputs, loss)?;
    let indices: Vec<usize> = if coords >= params.len() {
        (0..params.len()).collect()
    } else {
        rand::seq::index::sample(rng, params.len(), coords).into_vec()
    };
    let eval = |p: &PolicyParams| -> Result<f64> {
        let tape = p.unroll(&inputs.observations, &inputs.masks)?;
        Ok(loss.evaluate(&tape.outputs).0)
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in indices {
        let orig = probe.data[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data[i] = orig + offset;
            eval(&probe)
        };
        // five-point central stencil
        let numeric = (8.0 * (at(epsilon)? - at(-epsilon)?) - (at(2.0 * epsilon)? - at(-2.0 * epsilon)?))
            / (12.0 * epsilon);
        probe.data[i] = orig;
        let a = analytic.data[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

const MAGIC: &[u8; 8] = b"MCDPOLCY";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout (all integers little-endian):
/// magic `MCDPOLCY` | version u32 | header length u64 | header JSON
/// (the architecture) | parameter count u64 | parameters as f64 LE.
pub fn write_params<W: Write>(out: &mut W, params: &PolicyParams) -> std::io::Result<()> {
    let header = serde_json::to_vec(&params.arch)?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(params.data.len() as u64).to_le_bytes())?;
    for v in &params.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_params<Rd: Read>(input: &mut Rd) -> Result<PolicyParams> {
    let corrupt = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cursor = &bytes[..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(corrupt("truncated file"));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(MAGIC.len())? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let arch: Architecture = serde_json::from_slice(take(header_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    arch.validate()
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if count != arch.param_count() {
        return Err(corrupt("parameter count disagrees with architecture"));
    }
    let raw = take(count.checked_mul(8).ok_or_else(|| corrupt("bad count"))?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !cursor.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    PolicyParams::from_vec(&arch, data)
}

pub fn save_params(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_params(&mut file, params).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(&mut file)
}

/// Loads a checkpoint and insists on a specific architecture.
pub fn load_params_for(path: &Path, expected: &Architecture) -> Result<PolicyParams> {
    let params = load_params(path)?;
    if params.architecture() != expected {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint has {:?}, expected {:?}",
            params.architecture(),
            expected
        )));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture::new(10, &[8], 6, &[7], &[5], 22).unwrap()
    }

    /// `sum_t (value_t - target)^2 + sum_t <w, logits_t>`: exercises both heads.
    struct Quadratic {
        target: f64,
        logit_weights: Vec<f64>,
    }

    impl EpisodeLoss for Quadratic {
        fn evaluate(&self, outputs: &[PolicyOutput]) -> (f64, Vec<OutputGrad>) {
            let mut loss = 0.0;
            let grads = outputs
                .iter()
                .map(|o| {
                    loss += (o.value - self.target).powi(2);
                    loss += o.logits.iter().zip(&self.logit_weights).map(|(a, b)| a * b).sum::<f64>();
                    OutputGrad {
                        d_logits: self.logit_weights.clone(),
                        d_value: 2.0 * (o.value - self.target),
                    }
                })
                .collect();
            (loss, grads)
        }
    }

    struct Constant;

    impl EpisodeLoss for Constant {
        fn evaluate(&self, outputs: &[PolicyOutput]) -> (f64, Vec<OutputGrad>) {
            let grads = outputs
                .iter()
                .map(|o| OutputGrad {
                    d_logits: vec![0.0; o.logits.len()],
                    d_value: 0.0,
                })
                .collect();
            (3.0, grads)
        }
    }

    fn random_inputs(arch: &Architecture, steps: usize, rng: &mut ChaCha8Rng) -> EpisodeInputs {
        EpisodeInputs {
            observations: (0..steps)
                .map(|_| (0..arch.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect(),
            masks: (0..steps).map(|_| vec![true; arch.n_actions()]).collect(),
        }
    }

    #[test]
    fn init_properties() {
        let arch = small_arch();
        let a = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let layout = Layout::new(&arch);
        for d in layout.features.iter().chain(&layout.actor).chain(&layout.critic) {
            let bound = 1.0 / (d.inp as f64).sqrt();
            assert!(a.data[d.w..d.b].iter().all(|w| w.abs() <= bound));
            assert!(a.data[d.b..d.end()].iter().all(|&v| v == 0.0));
        }
        let l = layout.lstm;
        let lstm_bias = &a.data[l.b..l.b + 4 * l.width];
        for (k, &v) in lstm_bias.iter().enumerate() {
            let forget = (l.width..2 * l.width).contains(&k);
            assert_eq!(v, if forget { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let arch = Architecture::new(13, &[64, 64], 128, &[32], &[32], 41).unwrap();
        let expected = 13 * 64 + 64 + 64 * 64 + 64 + 4 * 128 * (64 + 128 + 1) + 128 * 32 + 32 + 32 * 41 + 41 + 128 * 32 + 32 + 32 + 1;
        assert_eq!(arch.param_count(), expected);
    }

    #[test]
    fn empty_feature_list_is_rejected() {
        assert!(Architecture::new(10, &[], 6, &[7], &[5], 22).is_err());
        assert!(Architecture::new(10, &[0], 6, &[7], &[5], 22).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let arch = small_arch();
        let p = PolicyParams::zeros(&arch).unwrap();
        let obs = vec![0.3; 10];
        let (out, _) = p.forward(&obs, &HiddenState::zeros(6), &[true; 22]).unwrap();
        assert!(out.action_probs.iter().all(|&q| (q - 1.0 / 22.0).abs() < 1e-15));
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn masked_actions_have_zero_probability() {
        let arch = small_arch();
        let p = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut mask = vec![true; 22];
        mask[0] = false;
        mask[5] = false;
        let (out, _) = p.forward(&[0.1; 10], &HiddenState::zeros(6), &mask).unwrap();
        assert_eq!(out.action_probs[0], 0.0);
        assert_eq!(out.action_probs[5], 0.0);
        assert!((out.action_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_recurrent_weights_make_outputs_step_invariant() {
        let arch = small_arch();
        let mut p = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let l = Layout::new(&arch).lstm;
        for v in &mut p.data[l.wh..l.b] {
            *v = 0.0;
        }
        // also drop the forget path so c does not carry over
        for v in &mut p.data[l.b + l.width..l.b + 2 * l.width] {
            *v = -1e3;
        }
        for v in &mut p.data[l.wx + l.width * l.inp..l.wx + 2 * l.width * l.inp] {
            *v = 0.0;
        }
        let obs = vec![0.4; 10];
        let mask = vec![true; 22];
        let (first, h1) = p.forward(&obs, &HiddenState::zeros(6), &mask).unwrap();
        let (second, _) = p.forward(&obs, &h1, &mask).unwrap();
        for (a, b) in first.action_probs.iter().zip(&second.action_probs) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((first.value - second.value).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = PolicyParams::zeros(&small_arch()).unwrap();
        let h = HiddenState::zeros(6);
        assert!(matches!(p.forward(&[0.0; 9], &h, &[true; 22]), Err(Error::Dimension { .. })));
        let mut obs = vec![0.0; 10];
        obs[3] = f64::NAN;
        assert!(matches!(p.forward(&obs, &h, &[true; 22]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sampling_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let onehot = [0.0, 0.0, 1.0, 0.0];
        assert_eq!(sample_action(&onehot, &mut rng, SampleMode::Stochastic), 2);
        assert_eq!(sample_action(&onehot, &mut rng, SampleMode::Greedy), 2);
        assert_eq!(sample_action(&[0.25, 0.5, 0.5], &mut rng, SampleMode::Greedy), 1);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let probs = vec![1.0 / 22.0; 22];
        let draws = 100_000;
        let mut counts = [0usize; 22];
        for _ in 0..draws {
            counts[sample_action(&probs, &mut rng, SampleMode::Stochastic)] += 1;
        }
        let p = 1.0 / 22.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma + 1.0, "count {c}");
        }
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = PolicyParams::init(&arch, &mut rng).unwrap();
        let inputs = random_inputs(&arch, 5, &mut rng);
        let (_, g) = loss_and_grad(&p, &inputs, &Constant).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn critic_output_bias_gradient_is_closed_form() {
        // d/db (v - y)^2 = 2 (v - y) for the linear output bias.
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = PolicyParams::init(&arch, &mut rng).unwrap();
        let inputs = random_inputs(&arch, 1, &mut rng);
        let loss = Quadratic {
            target: 0.7,
            logit_weights: vec![0.0; 22],
        };
        let tape = p.unroll(&inputs.observations, &inputs.masks).unwrap();
        let (_, g) = loss_and_grad(&p, &inputs, &loss).unwrap();
        let out = Layout::new(&arch).critic.last().copied().unwrap();
        let expected = 2.0 * (tape.outputs[0].value - 0.7);
        assert!((g.data[out.b] - expected).abs() < 1e-14);
        // and the weight gradient is that times the layer input
        for k in 0..out.inp {
            let x = tape.steps[0].critic_acts.last().unwrap()[k];
            assert!((g.data[out.w + k] - expected * x).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PolicyParams::init(&arch, &mut rng).unwrap();
        let inputs = random_inputs(&arch, 6, &mut rng);
        let loss = Quadratic {
            target: -0.3,
            logit_weights: (0..22).map(|i| (i as f64 - 10.0) / 10.0).collect(),
        };
        let err = grad_check(&p, &inputs, &loss, 1e-3, 400, &mut rng).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let arch = small_arch();
        let p = PolicyParams::init(&arch, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_params(&path, &p).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   q.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(p.checksum(), q.checksum());

        let other = Architecture::new(10, &[8], 7, &[7], &[5], 22).unwrap();
        assert!(matches!(load_params_for(&path, &other), Err(Error::ArchitectureMismatch(_))));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_params(&mut &bytes[..]), Err(Error::Checkpoint(_))));
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(read_params(&mut &bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        assert!(matches!(read_params(&mut &bytes[..]), Err(Error::Checkpoint(_))));
    }
}
