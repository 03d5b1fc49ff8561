//! Recurrent memorized attention: an LSTM that alternately scores the region
//! it was given and proposes the transform for the next one.
//!
//! An episode runs `K + 1` iterations. Iteration 0 looks at the whole map
//! (identity transform) and only proposes `M_1`; iterations `1..=K` sample
//! with `M_k`, emit a score vector `s_k`, and propose `M_{k+1}`. The final
//! proposal is computed and discarded. Scores are fused per class by max.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};
use crate::transform::TransformParams;

/// How the hidden state is read out of the memory cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CellOutput {
    /// `h = o ⊙ c`.
    #[default]
    Linear,
    /// `h = o ⊙ tanh(c)`, the usual LSTM readout.
    Tanh,
}

impl CellOutput {
    pub fn code(self) -> u32 {
        match self {
            CellOutput::Linear => 0,
            CellOutput::Tanh => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(CellOutput::Linear),
            1 => Ok(CellOutput::Tanh),
            _ => Err(Error::config(format!("unknown cell readout code {code}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Channels `D` of the feature map.
    pub feature_channels: usize,
    /// Output size of the spatial transformer.
    pub region_h: usize,
    pub region_w: usize,
    /// Width of the embedded region feature `x_k`.
    pub embed: usize,
    /// LSTM state size.
    pub hidden: usize,
    /// Width of the shared head layer `z_k`.
    pub head: usize,
    pub classes: usize,
    pub cell: CellOutput,
}

impl AttentionConfig {
    /// Length of a flattened region.
    pub fn region_len(&self) -> usize {
        self.feature_channels * self.region_h * self.region_w
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_channels", self.feature_channels),
            ("region_h", self.region_h),
            ("region_w", self.region_w),
            ("embed", self.embed),
            ("hidden", self.hidden),
            ("head", self.head),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real = f32> {
    /// `out×in`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::xavier(&[output, input], input, output, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }
}

/// One LSTM gate: `act(w_x · x + w_h · h + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T: Real = f32> {
    pub w_x: Tensor<T>,
    pub w_h: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Gate<T> {
    fn xavier<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w_x: Tensor::xavier(&[hidden, input], input, hidden, rng),
            w_h: Tensor::xavier(&[hidden, hidden], hidden, hidden, rng),
            bias: Tensor::zeros(&[hidden]),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Tensor::zeros(&[hidden, input]),
            w_h: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[hidden]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T: Real = f32> {
    pub config: AttentionConfig,
    /// `x_k = relu(W_fx f_k + b_x)`.
    pub embed: Linear<T>,
    pub input_gate: Gate<T>,
    pub forget_gate: Gate<T>,
    pub output_gate: Gate<T>,
    /// Input modulation, passed through tanh.
    pub modulation: Gate<T>,
    /// `z_k = relu(W_hz h_k + b_z)`.
    pub hidden_head: Linear<T>,
    /// `s_k = W_zs z_k + b_s`.
    pub score_head: Linear<T>,
    /// `M_{k+1} = W_zm z_k + b_m`, outputs ordered `(s_x, s_y, t_x, t_y)`.
    pub loc_head: Linear<T>,
}

impl<T: Real> AttentionWeights<T> {
    /// Xavier-uniform weights and zero biases, except the localization head:
    /// its weight starts at zero and its bias at the identity transform, so an
    /// untrained model attends to the whole map at every step.
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, n, z) = (config.embed, config.hidden, config.head);
        let mut loc_head = Linear::zeros(z, 4);
        loc_head.bias = TransformParams::IDENTITY.to_tensor();
        Ok(Self {
            embed: Linear::xavier(config.region_len(), e, rng),
            input_gate: Gate::xavier(e, n, rng),
            forget_gate: Gate::xavier(e, n, rng),
            output_gate: Gate::xavier(e, n, rng),
            modulation: Gate::xavier(e, n, rng),
            hidden_head: Linear::xavier(n, z, rng),
            score_head: Linear::xavier(z, config.classes, rng),
            loc_head,
            config,
        })
    }

    /// All weights zero; the localization bias is the identity.
    pub fn zeros(config: AttentionConfig) -> Result<Self> {
        config.validate()?;
        let (e, n, z) = (config.embed, config.hidden, config.head);
        let mut loc_head = Linear::zeros(z, 4);
        loc_head.bias = TransformParams::IDENTITY.to_tensor();
        Ok(Self {
            embed: Linear::zeros(config.region_len(), e),
            input_gate: Gate::zeros(e, n),
            forget_gate: Gate::zeros(e, n),
            output_gate: Gate::zeros(e, n),
            modulation: Gate::zeros(e, n),
            hidden_head: Linear::zeros(n, z),
            score_head: Linear::zeros(z, config.classes),
            loc_head,
            config,
        })
    }

    fn expected_shapes(&self) -> Vec<Vec<usize>> {
        let c = &self.config;
        let (f, e, n, z) = (c.region_len(), c.embed, c.hidden, c.head);
        let gate = [vec![n, e], vec![n, n], vec![n]];
        let mut shapes = vec![vec![e, f], vec![e]];
        for _ in 0..4 {
            shapes.extend(gate.iter().cloned());
        }
        shapes.extend([vec![z, n], vec![z], vec![c.classes, z], vec![c.classes], vec![4, z], vec![4]]);
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for ((name, t), want) in self.names().iter().zip(self.tensors()).zip(self.expected_shapes()) {
            if t.shape() != want.as_slice() {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.embed.weight, &self.embed.bias];
        for gate in [&self.input_gate, &self.forget_gate, &self.output_gate, &self.modulation] {
            out.extend([&gate.w_x, &gate.w_h, &gate.bias]);
        }
        for lin in [&self.hidden_head, &self.score_head, &self.loc_head] {
            out.extend([&lin.weight, &lin.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embed.weight, &mut self.embed.bias];
        for gate in [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.output_gate,
            &mut self.modulation,
        ] {
            out.extend([&mut gate.w_x, &mut gate.w_h, &mut gate.bias]);
        }
        for lin in [&mut self.hidden_head, &mut self.score_head, &mut self.loc_head] {
            out.extend([&mut lin.weight, &mut lin.bias]);
        }
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["attention.embed.weight".to_string(), "attention.embed.bias".to_string()];
        for gate in ["input_gate", "forget_gate", "output_gate", "modulation"] {
            for part in ["w_x", "w_h", "bias"] {
                out.push(format!("attention.{gate}.{part}"));
            }
        }
        for lin in ["hidden_head", "score_head", "loc_head"] {
            out.push(format!("attention.{lin}.weight"));
            out.push(format!("attention.{lin}.bias"));
        }
        out
    }

    /// Rebuilds weights from tensors in [`AttentionWeights::names`] order.
    pub fn from_tensors(config: AttentionConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        if tensors.len() != w.tensors().len() {
            return Err(Error::config(format!(
                "attention weights need {} tensors, got {}",
                w.tensors().len(),
                tensors.len()
            )));
        }
        for (dst, src) in w.tensors_mut().into_iter().zip(tensors) {
            *dst = src;
        }
        w.validate()?;
        Ok(w)
    }

    pub fn cast<U: Real>(&self) -> AttentionWeights<U> {
        let tensors = self.tensors().into_iter().map(|t| t.cast()).collect();
        AttentionWeights::from_tensors(self.config.clone(), tensors).expect("cast preserves shapes")
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AttentionVars {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        AttentionVars::from_vars(&vars, self.config.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// Graph handles for [`AttentionWeights`], in the same order.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub config: AttentionConfig,
    pub embed: LinearVars,
    pub input_gate: GateVars,
    pub forget_gate: GateVars,
    pub output_gate: GateVars,
    pub modulation: GateVars,
    pub hidden_head: LinearVars,
    pub score_head: LinearVars,
    pub loc_head: LinearVars,
}

impl AttentionVars {
    /// Groups handles given in [`AttentionWeights::names`] order.
    pub fn from_vars(v: &[Var], config: AttentionConfig) -> Self {
        let lin = |i: usize| LinearVars {
            weight: v[i],
            bias: v[i + 1],
        };
        let gate = |i: usize| GateVars {
            w_x: v[i],
            w_h: v[i + 1],
            bias: v[i + 2],
        };
        Self {
            config,
            embed: lin(0),
            input_gate: gate(2),
            forget_gate: gate(5),
            output_gate: gate(8),
            modulation: gate(11),
            hidden_head: lin(14),
            score_head: lin(16),
            loc_head: lin(18),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed.weight, self.embed.bias];
        for gate in [&self.input_gate, &self.forget_gate, &self.output_gate, &self.modulation] {
            out.extend([gate.w_x, gate.w_h, gate.bias]);
        }
        for lin in [&self.hidden_head, &self.score_head, &self.loc_head] {
            out.extend([lin.weight, lin.bias]);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<T: Real = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Real> LstmState<T> {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
}

fn affine<T: Real>(g: &mut Graph<T>, lin: LinearVars, x: Var) -> Result<Var> {
    let wx = g.matmul(lin.weight, x)?;
    g.add(wx, lin.bias)
}

fn gate_pre<T: Real>(g: &mut Graph<T>, gate: GateVars, x: Var, h: Var) -> Result<Var> {
    let a = g.matmul(gate.w_x, x)?;
    let b = g.matmul(gate.w_h, h)?;
    let ab = g.add(a, b)?;
    g.add(ab, gate.bias)
}

/// Records one LSTM step on a sampled region `f_k` (`D×h_r×w_r`).
pub fn lstm_step_graph<T: Real>(g: &mut Graph<T>, region: Var, prev: StateVars, w: &AttentionVars) -> Result<StateVars> {
    let len = g.value(region).len();
    if len != w.config.region_len() {
        return Err(Error::config(format!(
            "region {:?} flattens to {len} values, weights expect {}",
            g.value(region).shape(),
            w.config.region_len()
        )));
    }
    let flat = g.reshape(region, &[len])?;
    let pre_x = affine(g, w.embed, flat)?;
    let x = g.relu(pre_x);
    let pre_i = gate_pre(g, w.input_gate, x, prev.h)?;
    let i = g.sigmoid(pre_i);
    let pre_f = gate_pre(g, w.forget_gate, x, prev.h)?;
    let f = g.sigmoid(pre_f);
    let pre_o = gate_pre(g, w.output_gate, x, prev.h)?;
    let o = g.sigmoid(pre_o);
    let pre_m = gate_pre(g, w.modulation, x, prev.h)?;
    let m = g.tanh(pre_m);
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, m)?;
    let c = g.add(keep, write)?;
    let readout = match w.config.cell {
        CellOutput::Linear => c,
        CellOutput::Tanh => g.tanh(c),
    };
    let h = g.mul(o, readout)?;
    Ok(StateVars { h, c })
}

/// Records the score and localization heads on `h_k`. The score is skipped
/// when `emit_score` is false (iteration 0).
pub fn heads_graph<T: Real>(g: &mut Graph<T>, h: Var, w: &AttentionVars, emit_score: bool) -> Result<(Option<Var>, Var)> {
    let pre_z = affine(g, w.hidden_head, h)?;
    let z = g.relu(pre_z);
    let score = if emit_score {
        Some(affine(g, w.score_head, z)?)
    } else {
        None
    };
    let next = affine(g, w.loc_head, z)?;
    Ok((score, next))
}

/// Graph handles for one recorded episode.
#[derive(Clone, Debug)]
pub struct EpisodeVars {
    /// `M_0 … M_K`; `M_0` is a constant identity.
    pub transforms: Vec<Var>,
    /// `M_{K+1}`, proposed by the last iteration and unused.
    pub next_transform: Var,
    /// `s_1 … s_K`.
    pub scores: Vec<Var>,
    /// States after iterations `0 … K`.
    pub states: Vec<StateVars>,
}

impl EpisodeVars {
    /// Transforms of the scored regions, `M_1 … M_K`.
    pub fn region_transforms(&self) -> &[Var] {
        &self.transforms[1..]
    }
}

/// Records a `K+1`-iteration episode over `feature` (`D×H'×W'`).
pub fn episode_graph<T: Real>(g: &mut Graph<T>, feature: Var, w: &AttentionVars, steps: usize) -> Result<EpisodeVars> {
    if steps == 0 {
        return Err(Error::config("an episode needs K ≥ 1 scored regions"));
    }
    let (d, _, _) = g.value(feature).chw()?;
    if d != w.config.feature_channels {
        return Err(Error::config(format!(
            "feature map has {d} channels, attention weights expect {}",
            w.config.feature_channels
        )));
    }
    let n = w.config.hidden;
    let mut state = StateVars {
        h: g.constant(Tensor::zeros(&[n])),
        c: g.constant(Tensor::zeros(&[n])),
    };
    let mut transforms = vec![g.constant(TransformParams::IDENTITY.to_tensor())];
    let mut scores = Vec::with_capacity(steps);
    let mut states = Vec::with_capacity(steps + 1);
    let mut next_transform = transforms[0];
    for k in 0..=steps {
        let grid = g.grid(transforms[k], w.config.region_h, w.config.region_w)?;
        let region = g.bilinear(feature, grid)?;
        state = lstm_step_graph(g, region, state, w)?;
        states.push(state);
        let (score, next) = heads_graph(g, state.h, w, k != 0)?;
        scores.extend(score);
        if k < steps {
            transforms.push(next);
        } else {
            next_transform = next;
        }
    }
    Ok(EpisodeVars {
        transforms,
        next_transform,
        scores,
        states,
    })
}

/// Category-wise max over the region scores.
pub fn fuse_graph<T: Real>(g: &mut Graph<T>, scores: &[Var]) -> Result<Var> {
    if scores.is_empty() {
        return Err(Error::Protocol("cannot fuse an empty list of score vectors".into()));
    }
    g.max_over(scores)
}

/// Values recorded during one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace<T: Real = f32> {
    /// `M_0 … M_K`, each used to sample one region.
    pub transforms: Vec<TransformParams>,
    /// `M_{K+1}`.
    pub next_transform: TransformParams,
    /// `s_1 … s_K`.
    pub scores: Vec<Tensor<T>>,
    /// States after iterations `0 … K`.
    pub states: Vec<LstmState<T>>,
}

impl<T: Real> EpisodeTrace<T> {
    pub fn from_graph(g: &Graph<T>, ep: &EpisodeVars) -> Self {
        let params = |v: Var| TransformParams::from_slice(g.value(v).data());
        Self {
            transforms: ep.transforms.iter().map(|&v| params(v)).collect(),
            next_transform: params(ep.next_transform),
            scores: ep.scores.iter().map(|&v| g.value(v).clone()).collect(),
            states: ep
                .states
                .iter()
                .map(|s| LstmState {
                    h: g.value(s.h).clone(),
                    c: g.value(s.c).clone(),
                })
                .collect(),
        }
    }

    /// Transforms of the scored regions, `M_1 … M_K`.
    pub fn region_transforms(&self) -> &[TransformParams] {
        &self.transforms[1..]
    }
}

/// One LSTM step outside a training graph.
pub fn lstm_step<T: Real>(region: &Tensor<T>, prev: &LstmState<T>, w: &AttentionWeights<T>) -> Result<LstmState<T>> {
    let mut g = Graph::new();
    let vars = w.bind(&mut g, false);
    let r = g.constant(region.clone());
    let prev = StateVars {
        h: g.constant(prev.h.clone()),
        c: g.constant(prev.c.clone()),
    };
    let s = lstm_step_graph(&mut g, r, prev, &vars)?;
    Ok(LstmState {
        h: g.value(s.h).clone(),
        c: g.value(s.c).clone(),
    })
}

/// Heads outside a training graph.
pub fn heads<T: Real>(h: &Tensor<T>, w: &AttentionWeights<T>, emit_score: bool) -> Result<(Option<Tensor<T>>, TransformParams)> {
    let mut g = Graph::new();
    let vars = w.bind(&mut g, false);
    let hv = g.constant(h.clone());
    let (score, next) = heads_graph(&mut g, hv, &vars, emit_score)?;
    Ok((
        score.map(|s| g.value(s).clone()),
        TransformParams::from_slice(g.value(next).data()),
    ))
}

/// Runs a full episode with `steps` scored regions.
pub fn run_episode<T: Real>(feature: &Tensor<T>, w: &AttentionWeights<T>, steps: usize) -> Result<EpisodeTrace<T>> {
    let mut g = Graph::new();
    let vars = w.bind(&mut g, false);
    let f = g.constant(feature.clone());
    let ep = episode_graph(&mut g, f, &vars, steps)?;
    Ok(EpisodeTrace::from_graph(&g, &ep))
}

/// Category-wise max-pooling of region scores.
pub fn fuse_scores<T: Real>(scores: &[Tensor<T>]) -> Result<Tensor<T>> {
    if scores.is_empty() {
        return Err(Error::Protocol("cannot fuse an empty list of score vectors".into()));
    }
    let refs: Vec<&Tensor<T>> = scores.iter().collect();
    Ok(crate::ops::max_over(&refs)?.0)
}
