//! Small differentiable building blocks: 1-D convolution over bands, a
//! ConvLSTM cell recurrent in time, a dueling Q head, Adam, and a
//! finite-difference gradient checker.
//!
//! Activations are stored band-major: element `(band, channel)` lives at
//! `band * channels + channel`. A dense layer is a convolution with kernel
//! width 1 applied to a single "band" holding the flattened input.
//!
//! Everything is generic over the float type. Training runs in `f32`;
//! gradient checks run in `f64`.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env_sim::BandVector;
use crate::error::{Error, Result};

pub trait Scalar: Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
fn cst<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant representable")
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Named parameter tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, len: usize) -> Self {
        Self {
            name: name.into(),
            value: vec![F::zero(); len],
            grad: vec![F::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Anything exposing its parameters in a fixed order.
pub trait HasParams<F: Scalar> {
    fn params(&self) -> Vec<&Param<F>>;
    fn params_mut(&mut self) -> Vec<&mut Param<F>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Cross-correlation along the band axis with zero padding.
///
/// Weights are laid out `[tap][in][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<F> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub w: Param<F>,
    pub b: Param<F>,
}

impl<F: Scalar> Conv1d<F> {
    pub fn zeros(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Shape(format!("{name}: kernel width {kernel} must be odd")));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            w: Param::zeros(format!("{name}.w"), kernel * in_channels * out_channels),
            b: Param::zeros(format!("{name}.b"), out_channels),
        })
    }

    /// Uniform init in `±1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut c = Self::zeros(name, in_channels, out_channels, kernel)?;
        let bound = 1.0 / ((kernel * in_channels).max(1) as f64).sqrt();
        for w in &mut c.w.value {
            *w = cst(rng.gen_range(-bound..bound));
        }
        Ok(c)
    }

    /// A dense layer: one position, kernel width 1.
    pub fn dense<R: Rng>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Result<Self> {
        Self::new(name, inputs, outputs, 1, rng)
    }

    fn check(&self, len: usize, bands: usize) -> Result<()> {
        if len != bands * self.in_channels {
            return Err(Error::Shape(format!(
                "{}: input has {len} values, expected {bands} bands x {} channels",
                self.w.name, self.in_channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[F], bands: usize) -> Result<Vec<F>> {
        self.check(x.len(), bands)?;
        let (ci, co, half) = (self.in_channels, self.out_channels, self.kernel / 2);
        let mut y = Vec::with_capacity(bands * co);
        for _ in 0..bands {
            y.extend_from_slice(&self.b.value);
        }
        for bo in 0..bands {
            let yrow = &mut y[bo * co..(bo + 1) * co];
            for j in 0..self.kernel {
                let Some(bi) = (bo + j).checked_sub(half).filter(|&bi| bi < bands) else {
                    continue;
                };
                let xrow = &x[bi * ci..(bi + 1) * ci];
                let wj = &self.w.value[j * ci * co..(j + 1) * ci * co];
                for (i, &xv) in xrow.iter().enumerate() {
                    if xv == F::zero() {
                        continue;
                    }
                    for (yv, &wv) in yrow.iter_mut().zip(&wj[i * co..(i + 1) * co]) {
                        *yv = *yv + xv * wv;
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and, if given, the input gradient.
    pub fn backward(&mut self, x: &[F], bands: usize, dy: &[F], mut dx: Option<&mut [F]>) -> Result<()> {
        self.check(x.len(), bands)?;
        let (ci, co, half) = (self.in_channels, self.out_channels, self.kernel / 2);
        if dy.len() != bands * co {
            return Err(Error::Shape(format!("{}: output gradient has {} values", self.w.name, dy.len())));
        }
        for bo in 0..bands {
            let dyrow = &dy[bo * co..(bo + 1) * co];
            for (g, &d) in self.b.grad.iter_mut().zip(dyrow) {
                *g = *g + d;
            }
            for j in 0..self.kernel {
                let Some(bi) = (bo + j).checked_sub(half).filter(|&bi| bi < bands) else {
                    continue;
                };
                let xrow = &x[bi * ci..(bi + 1) * ci];
                let base = j * ci * co;
                for (i, &xv) in xrow.iter().enumerate() {
                    let off = base + i * co;
                    if xv != F::zero() {
                        for (g, &d) in self.w.grad[off..off + co].iter_mut().zip(dyrow) {
                            *g = *g + xv * d;
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let mut acc = F::zero();
                        for (&w, &d) in self.w.value[off..off + co].iter().zip(dyrow) {
                            acc = acc + w * d;
                        }
                        dx[bi * ci + i] = dx[bi * ci + i] + acc;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<F: Scalar> HasParams<F> for Conv1d<F> {
    fn params(&self) -> Vec<&Param<F>> {
        vec![&self.w, &self.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Affine map followed by ReLU.
pub fn dense_apply<F: Scalar>(layer: &Conv1d<F>, x: &[F]) -> Result<Vec<F>> {
    Ok(relu(&layer.forward(x, 1)?))
}

pub fn relu<F: Scalar>(x: &[F]) -> Vec<F> {
    x.iter().map(|&v| v.max(F::zero())).collect()
}

/// Gradient through ReLU given its pre-activation input.
pub fn relu_backward<F: Scalar>(pre: &[F], dy: &[F]) -> Vec<F> {
    pre.iter()
        .zip(dy)
        .map(|(&p, &d)| if p > F::zero() { d } else { F::zero() })
        .collect()
}

/// Values kept from a ConvLSTM step for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmCache<F> {
    z: Vec<F>,
    gates: Vec<F>,
    c_prev: Vec<F>,
    tc: Vec<F>,
}

/// LSTM cell whose gate projections are band convolutions over `[x, h]`.
///
/// Gate order within the `4H` pre-activation channels is input, forget,
/// candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstm<F> {
    pub in_channels: usize,
    pub hidden: usize,
    pub conv: Conv1d<F>,
}

impl<F: Scalar> ConvLstm<F> {
    pub fn zeros(name: &str, in_channels: usize, hidden: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            in_channels,
            hidden,
            conv: Conv1d::zeros(name, in_channels + hidden, 4 * hidden, kernel)?,
        })
    }

    pub fn new<R: Rng>(name: &str, in_channels: usize, hidden: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut cell = Self {
            in_channels,
            hidden,
            conv: Conv1d::new(name, in_channels + hidden, 4 * hidden, kernel, rng)?,
        };
        for u in hidden..2 * hidden {
            cell.conv.b.value[u] = F::one();
        }
        Ok(cell)
    }

    pub fn step(&self, x: &[F], h: &[F], c: &[F], bands: usize) -> Result<(Vec<F>, Vec<F>, LstmCache<F>)> {
        let (ci, hd) = (self.in_channels, self.hidden);
        if x.len() != bands * ci || h.len() != bands * hd || c.len() != bands * hd {
            return Err(Error::Shape(format!(
                "{}: state or input does not match {bands} bands",
                self.conv.w.name
            )));
        }
        let mut z = Vec::with_capacity(bands * (ci + hd));
        for b in 0..bands {
            z.extend_from_slice(&x[b * ci..(b + 1) * ci]);
            z.extend_from_slice(&h[b * hd..(b + 1) * hd]);
        }
        let mut gates = self.conv.forward(&z, bands)?;
        let mut h_new = vec![F::zero(); bands * hd];
        let mut c_new = vec![F::zero(); bands * hd];
        let mut tc = vec![F::zero(); bands * hd];
        for b in 0..bands {
            let g = &mut gates[b * 4 * hd..(b + 1) * 4 * hd];
            for u in 0..hd {
                let i = sigmoid(g[u]);
                let f = sigmoid(g[hd + u]);
                let cand = g[2 * hd + u].tanh();
                let o = sigmoid(g[3 * hd + u]);
                g[u] = i;
                g[hd + u] = f;
                g[2 * hd + u] = cand;
                g[3 * hd + u] = o;
                let k = b * hd + u;
                c_new[k] = f * c[k] + i * cand;
                tc[k] = c_new[k].tanh();
                h_new[k] = o * tc[k];
            }
        }
        let cache = LstmCache {
            z,
            gates,
            c_prev: c.to_vec(),
            tc,
        };
        Ok((h_new, c_new, cache))
    }

    /// Returns `(dx, dh_prev, dc_prev)` and accumulates parameter gradients.
    pub fn step_backward(
        &mut self,
        cache: &LstmCache<F>,
        bands: usize,
        dh: &[F],
        dc_next: &[F],
    ) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
        let (ci, hd) = (self.in_channels, self.hidden);
        let one = F::one();
        let mut dpre = vec![F::zero(); bands * 4 * hd];
        let mut dc_prev = vec![F::zero(); bands * hd];
        for b in 0..bands {
            let g = &cache.gates[b * 4 * hd..(b + 1) * 4 * hd];
            let dp = &mut dpre[b * 4 * hd..(b + 1) * 4 * hd];
            for u in 0..hd {
                let k = b * hd + u;
                let (i, f, cand, o) = (g[u], g[hd + u], g[2 * hd + u], g[3 * hd + u]);
                let tc = cache.tc[k];
                let dc = dc_next[k] + dh[k] * o * (one - tc * tc);
                dp[u] = dc * cand * i * (one - i);
                dp[hd + u] = dc * cache.c_prev[k] * f * (one - f);
                dp[2 * hd + u] = dc * i * (one - cand * cand);
                dp[3 * hd + u] = dh[k] * tc * o * (one - o);
                dc_prev[k] = dc * f;
            }
        }
        let mut dz = vec![F::zero(); bands * (ci + hd)];
        self.conv.backward(&cache.z, bands, &dpre, Some(&mut dz))?;
        let mut dx = Vec::with_capacity(bands * ci);
        let mut dh_prev = Vec::with_capacity(bands * hd);
        for b in 0..bands {
            let row = &dz[b * (ci + hd)..(b + 1) * (ci + hd)];
            dx.extend_from_slice(&row[..ci]);
            dh_prev.extend_from_slice(&row[ci..]);
        }
        Ok((dx, dh_prev, dc_prev))
    }
}

impl<F: Scalar> HasParams<F> for ConvLstm<F> {
    fn params(&self) -> Vec<&Param<F>> {
        self.conv.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.conv.params_mut()
    }
}

/// `Q(b) = V + A(b) - mean_b A(b)`.
pub fn dueling_combine<F: Scalar>(value: F, advantage: &[F]) -> Vec<F> {
    if advantage.is_empty() {
        return Vec::new();
    }
    let n = cst::<F>(advantage.len() as f64);
    let mean = advantage.iter().fold(F::zero(), |a, &b| a + b) / n;
    advantage.iter().map(|&a| value + a - mean).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Convolution in frequency; parameter count independent of band count.
    Conv,
    /// Flattened input through dense layers.
    Dense,
}

/// Shared-trunk network: feature layer, recurrent cell, then Q / M / P heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layout: Layout,
    pub n_bands: usize,
    pub in_channels: usize,
    pub feature_channels: usize,
    pub feature_kernel: usize,
    pub hidden: usize,
    pub lstm_kernel: usize,
    /// Outputs per band of the M and P heads: 1 (sigmoid) or `n_classes + 1` (softmax).
    pub m_outputs: usize,
    pub q_head: bool,
    pub p_head: bool,
    pub dueling: bool,
}

impl NetworkConfig {
    pub fn conv(n_bands: usize, in_channels: usize, n_classes: usize) -> Self {
        Self {
            layout: Layout::Conv,
            n_bands,
            in_channels,
            feature_channels: 16,
            feature_kernel: 5,
            hidden: 32,
            lstm_kernel: 3,
            m_outputs: if n_classes > 1 { n_classes + 1 } else { 1 },
            q_head: true,
            p_head: false,
            dueling: true,
        }
    }

    pub fn dense(n_bands: usize, in_channels: usize, n_classes: usize) -> Self {
        Self {
            layout: Layout::Dense,
            feature_channels: 64,
            feature_kernel: 1,
            hidden: 64,
            lstm_kernel: 1,
            ..Self::conv(n_bands, in_channels, n_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_kernel % 2 == 0 || self.lstm_kernel % 2 == 0 {
            return Err(Error::Config("kernel widths must be odd".into()));
        }
        if self.n_bands == 0 || self.in_channels == 0 || self.feature_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.m_outputs == 0 || self.m_outputs == 2 {
            return Err(Error::Config("m_outputs must be 1 or n_classes + 1 with n_classes >= 2".into()));
        }
        if self.layout == Layout::Dense && (self.feature_kernel != 1 || self.lstm_kernel != 1) {
            return Err(Error::Config("dense layout uses kernel width 1".into()));
        }
        Ok(())
    }

    /// Positions the layers slide over.
    pub fn positions(&self) -> usize {
        match self.layout {
            Layout::Conv => self.n_bands,
            Layout::Dense => 1,
        }
    }

    /// Width of the per-step input vector.
    pub fn input_len(&self) -> usize {
        self.n_bands * self.in_channels
    }

    fn per_position(&self, per_band: usize) -> usize {
        match self.layout {
            Layout::Conv => per_band,
            Layout::Dense => per_band * self.n_bands,
        }
    }
}

/// Head outputs at one recurrent state. `m` and `p` are logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOut<F> {
    pub m: Vec<F>,
    pub p: Option<Vec<F>>,
    pub q: Option<Vec<F>>,
    hbar: Vec<F>,
}

/// Loss gradients with respect to [`HeadOut`] fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadGrad<F> {
    pub m: Option<Vec<F>>,
    pub p: Option<Vec<F>>,
    pub q: Option<Vec<F>>,
}

#[derive(Clone, Debug)]
struct StepTrace<F> {
    x: Vec<F>,
    feat_pre: Vec<F>,
    lstm: LstmCache<F>,
}

/// Forward pass over an episode, kept for backpropagation through time.
///
/// `states[0]` is the zero initial state; `states[t + 1]` follows input `t`.
#[derive(Clone, Debug)]
pub struct Trace<F> {
    steps: Vec<StepTrace<F>>,
    pub states: Vec<Vec<F>>,
    pub heads: Vec<HeadOut<F>>,
}

/// Recurrent state `(h, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<F> {
    pub config: NetworkConfig,
    pub feature: Conv1d<F>,
    pub lstm: ConvLstm<F>,
    pub m_head: Conv1d<F>,
    pub p_head: Option<Conv1d<F>>,
    pub q_adv: Option<Conv1d<F>>,
    pub q_value: Option<Conv1d<F>>,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let feat_in = c.per_position(c.in_channels);
        let k_out = c.per_position(c.m_outputs);
        let feature = Conv1d::new("feature", feat_in, c.feature_channels, c.feature_kernel, &mut rng)?;
        let lstm = ConvLstm::new("lstm", c.feature_channels, c.hidden, c.lstm_kernel, &mut rng)?;
        let m_head = Conv1d::new("m", c.hidden, k_out, 1, &mut rng)?;
        let p_head = if c.p_head {
            Some(Conv1d::new("p", c.hidden, k_out, 1, &mut rng)?)
        } else {
            None
        };
        let (q_adv, q_value) = if c.q_head {
            let adv = Conv1d::new("q_adv", c.hidden, c.per_position(1), 1, &mut rng)?;
            let value = if c.dueling {
                Some(Conv1d::dense("q_value", c.hidden, 1, &mut rng)?)
            } else {
                None
            };
            (Some(adv), value)
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            feature,
            lstm,
            m_head,
            p_head,
            q_adv,
            q_value,
        })
    }

    pub fn initial_state(&self) -> RecurrentState<F> {
        let n = self.config.positions() * self.config.hidden;
        RecurrentState {
            h: vec![F::zero(); n],
            c: vec![F::zero(); n],
        }
    }

    fn check_input(&self, x: &[F]) -> Result<()> {
        if x.len() != self.config.input_len() {
            return Err(Error::Shape(format!(
                "step input has {} values, expected {}",
                x.len(),
                self.config.input_len()
            )));
        }
        Ok(())
    }

    /// Advances the recurrent state by one encoded step.
    pub fn step(&self, state: &RecurrentState<F>, x: &[F]) -> Result<RecurrentState<F>> {
        self.check_input(x)?;
        let s = self.config.positions();
        let feat = relu(&self.feature.forward(x, s)?);
        let (h, c, _) = self.lstm.step(&feat, &state.h, &state.c, s)?;
        Ok(RecurrentState { h, c })
    }

    pub fn heads(&self, h: &[F]) -> Result<HeadOut<F>> {
        let s = self.config.positions();
        let hd = self.config.hidden;
        let m = self.m_head.forward(h, s)?;
        let p = self.p_head.as_ref().map(|l| l.forward(h, s)).transpose()?;
        let mut hbar = vec![F::zero(); hd];
        let q = match &self.q_adv {
            Some(adv) => {
                let a = adv.forward(h, s)?;
                match &self.q_value {
                    Some(vl) => {
                        let inv = cst::<F>(1.0 / s as f64);
                        for b in 0..s {
                            for u in 0..hd {
                                hbar[u] = hbar[u] + h[b * hd + u] * inv;
                            }
                        }
                        let v = vl.forward(&hbar, 1)?[0];
                        Some(dueling_combine(v, &a))
                    }
                    None => Some(a),
                }
            }
            None => None,
        };
        Ok(HeadOut { m, p, q, hbar })
    }

    fn heads_backward(&mut self, h: &[F], out: &HeadOut<F>, grad: &HeadGrad<F>, dh: &mut [F]) -> Result<()> {
        let s = self.config.positions();
        let hd = self.config.hidden;
        if let Some(dm) = &grad.m {
            self.m_head.backward(h, s, dm, Some(dh))?;
        }
        if let Some(dp) = &grad.p {
            let layer = self.p_head.as_mut().ok_or(Error::MissingHead("P"))?;
            layer.backward(h, s, dp, Some(dh))?;
        }
        if let Some(dq) = &grad.q {
            let adv = self.q_adv.as_mut().ok_or(Error::MissingHead("Q"))?;
            match self.q_value.as_mut() {
                Some(vl) => {
                    let total = dq.iter().fold(F::zero(), |a, &b| a + b);
                    let mean = total / cst(dq.len() as f64);
                    let da: Vec<F> = dq.iter().map(|&d| d - mean).collect();
                    adv.backward(h, s, &da, Some(dh))?;
                    let mut dhbar = vec![F::zero(); hd];
                    vl.backward(&out.hbar, 1, &[total], Some(&mut dhbar))?;
                    let inv = cst::<F>(1.0 / s as f64);
                    for b in 0..s {
                        for u in 0..hd {
                            dh[b * hd + u] = dh[b * hd + u] + dhbar[u] * inv;
                        }
                    }
                }
                None => adv.backward(h, s, dq, Some(dh))?,
            }
        }
        Ok(())
    }

    /// Runs the whole input sequence and evaluates the heads at every state.
    pub fn forward_sequence(&self, xs: &[Vec<F>]) -> Result<Trace<F>> {
        let s = self.config.positions();
        let mut state = self.initial_state();
        let mut steps = Vec::with_capacity(xs.len());
        let mut states = Vec::with_capacity(xs.len() + 1);
        let mut heads = Vec::with_capacity(xs.len() + 1);
        heads.push(self.heads(&state.h)?);
        states.push(state.h.clone());
        for x in xs {
            self.check_input(x)?;
            let feat_pre = self.feature.forward(x, s)?;
            let feat = relu(&feat_pre);
            let (h, c, lstm) = self.lstm.step(&feat, &state.h, &state.c, s)?;
            heads.push(self.heads(&h)?);
            states.push(h.clone());
            steps.push(StepTrace {
                x: x.clone(),
                feat_pre,
                lstm,
            });
            state = RecurrentState { h, c };
        }
        Ok(Trace { steps, states, heads })
    }

    /// Backpropagation through time; `grads[t]` applies to `trace.heads[t]`.
    pub fn backward_sequence(&mut self, trace: &Trace<F>, grads: &[HeadGrad<F>]) -> Result<()> {
        if grads.len() != trace.heads.len() {
            return Err(Error::LengthMismatch {
                expected: trace.heads.len(),
                got: grads.len(),
            });
        }
        let s = self.config.positions();
        let n = s * self.config.hidden;
        let mut dh_next = vec![F::zero(); n];
        let mut dc_next = vec![F::zero(); n];
        for t in (1..trace.heads.len()).rev() {
            let mut dh = dh_next;
            self.heads_backward(&trace.states[t], &trace.heads[t], &grads[t], &mut dh)?;
            let step = &trace.steps[t - 1];
            let (dfeat, dh_prev, dc_prev) = self.lstm.step_backward(&step.lstm, s, &dh, &dc_next)?;
            let dpre = relu_backward(&step.feat_pre, &dfeat);
            self.feature.backward(&step.x, s, &dpre, None)?;
            dh_next = dh_prev;
            dc_next = dc_prev;
        }
        // The initial state is constant; only head parameters see its gradient.
        let mut sink = vec![F::zero(); n];
        self.heads_backward(&trace.states[0], &trace.heads[0], &grads[0], &mut sink)?;
        Ok(())
    }

    /// Copies every parameter value from `other` (target-network sync).
    pub fn copy_from(&mut self, other: &Network<F>) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.value.copy_from_slice(&src.value);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Checkpoint bytes: magic, format version, JSON config header, then
    /// every parameter as a little-endian `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for p in self.params() {
            for v in &p.value {
                let x = v.to_f32().unwrap_or(f32::NAN);
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf.get(*pos..*pos + n).ok_or_else(|| bad("truncated"))?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let config: NetworkConfig = serde_json::from_slice(take(&mut pos, hlen)?)?;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut net = Network::new(config, 0)?;
        if count != net.param_count() {
            return Err(Error::Checkpoint(format!(
                "{count} parameters stored, config needs {}",
                net.param_count()
            )));
        }
        for p in net.params_mut() {
            for v in p.value.iter_mut() {
                let x = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
                *v = F::from_f32(x).ok_or_else(|| bad("unrepresentable value"))?;
            }
        }
        if pos != buf.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(net)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SPMNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl<F: Scalar> HasParams<F> for Network<F> {
    fn params(&self) -> Vec<&Param<F>> {
        let mut v = self.feature.params();
        v.extend(self.lstm.params());
        v.extend(self.m_head.params());
        for l in [&self.p_head, &self.q_adv, &self.q_value].into_iter().flatten() {
            v.extend(l.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = self.feature.params_mut();
        v.extend(self.lstm.params_mut());
        v.extend(self.m_head.params_mut());
        for l in [&mut self.p_head, &mut self.q_adv, &mut self.q_value].into_iter().flatten() {
            v.extend(l.params_mut());
        }
        v
    }
}

/// Per-band probabilities from head logits: sigmoid for one output per
/// band, softmax over `k` outputs otherwise.
pub fn head_probs<F: Scalar>(logits: &[F], k: usize) -> Vec<F> {
    if k == 1 {
        return logits.iter().map(|&z| sigmoid(z)).collect();
    }
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let e: Vec<F> = row.iter().map(|&z| (z - mx).exp()).collect();
        let sum = e.iter().fold(F::zero(), |a, &b| a + b);
        out.extend(e.into_iter().map(|v| v / sum));
    }
    out
}

/// Wraps head probabilities as a [`BandVector`].
pub fn probs_to_band_vector<F: Scalar>(probs: &[F], k: usize) -> BandVector {
    let rows: Vec<f64> = probs.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    if k == 1 {
        BandVector::Probability(rows)
    } else {
        BandVector::ClassDistribution { n_classes: k - 1, rows }
    }
}

/// Per-band objectness from head probabilities.
pub fn objectness<F: Scalar>(probs: &[F], k: usize) -> Vec<F> {
    if k == 1 {
        probs.to_vec()
    } else {
        probs.chunks(k).map(|row| F::one() - row[0]).collect()
    }
}

/// Weighted BCE on head logits with its gradient.
///
/// `mask` restricts the loss to selected bands; the mean runs over the
/// selected bands only. Clipping affects the value, not the gradient.
pub fn wbce_logits<F: Scalar>(logits: &[F], k: usize, labels: &[u8], mask: Option<&[bool]>, w_neg: F) -> (F, Vec<F>) {
    let n = labels.len();
    let mut grad = vec![F::zero(); logits.len()];
    let probs = head_probs(logits, k);
    let lo = cst::<F>(crate::metrics::PROB_CLIP);
    let hi = F::one() - lo;
    let selected = |b: usize| mask.is_none_or(|m| m[b]);
    let count = (0..n).filter(|&b| selected(b)).count();
    if count == 0 {
        return (F::zero(), grad);
    }
    let scale = F::one() / cst(count as f64);
    let mut loss = F::zero();
    for (b, &y) in labels.iter().enumerate() {
        if !selected(b) {
            continue;
        }
        if k == 1 {
            let p = probs[b];
            let pc = p.max(lo).min(hi);
            if y > 0 {
                loss = loss - pc.ln();
                grad[b] = (p - F::one()) * scale;
            } else {
                loss = loss - w_neg * (F::one() - pc).ln();
                grad[b] = w_neg * p * scale;
            }
        } else {
            let c = y as usize;
            let weight = if c > 0 { F::one() } else { w_neg };
            let row = &probs[b * k..(b + 1) * k];
            loss = loss - weight * row[c].max(lo).min(hi).ln();
            for j in 0..k {
                let ind = if j == c { F::one() } else { F::zero() };
                grad[b * k + j] = weight * (row[j] - ind) * scale;
            }
        }
    }
    (loss * scale, grad)
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    /// Rescale gradients whose global norm exceeds this.
    pub clip_norm: Option<F>,
    t: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: cst(0.9),
            beta2: cst(0.999),
            eps: cst(1e-8),
            clip_norm: None,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update from the accumulated gradients. Fails, leaving the
    /// parameters untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Param<F>>) -> Result<()> {
        let mut norm2 = F::zero();
        for p in &params {
            for &g in &p.grad {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
                norm2 = norm2 + g * g;
            }
        }
        let scale = match self.clip_norm {
            Some(c) if norm2.sqrt() > c => c / norm2.sqrt(),
            _ => F::one(),
        };
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t);
        let bc2 = F::one() - self.beta2.powi(self.t);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i] * scale;
                m[i] = self.beta1 * m[i] + (F::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (F::one() - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.value[i] = p.value[i] - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub const GRAD_CHECK_EPS: f64 = 1e-4;
/// Denominator floor in the relative error, so that gradients near zero
/// are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares analytic gradients with central differences.
///
/// `loss_and_grad` must zero the gradients, return the loss and leave the
/// analytic gradient in the parameter buffers.
pub fn grad_check<M: HasParams<f64>>(model: &mut M, mut loss_and_grad: impl FnMut(&mut M) -> f64) -> GradCheckReport {
    loss_and_grad(model);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (k, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params()[k].value[i];
            model.params_mut()[k].value[i] = orig + GRAD_CHECK_EPS;
            let up = loss_and_grad(model);
            model.params_mut()[k].value[i] = orig - GRAD_CHECK_EPS;
            let down = loss_and_grad(model);
            model.params_mut()[k].value[i] = orig;
            let num = (up - down) / (2.0 * GRAD_CHECK_EPS);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_param = names[k].clone();
                report.worst_index = i;
            }
        }
    }
    loss_and_grad(model);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_and_zero() {
        let mut d = Conv1d::<f64>::zeros("d", 3, 3, 1).unwrap();
        for i in 0..3 {
            d.w.value[i * 3 + i] = 1.0;
        }
        assert_eq!(dense_apply(&d, &[1.0, -2.0, 3.0]).unwrap(), vec![1.0, 0.0, 3.0]);
        let mut z = Conv1d::<f64>::zeros("z", 3, 2, 1).unwrap();
        assert_eq!(z.forward(&[1.0, 2.0, 3.0], 1).unwrap(), vec![0.0, 0.0]);
        let mut dx = vec![0.0; 3];
        z.backward(&[1.0, 2.0, 3.0], 1, &[1.0, 1.0], Some(&mut dx)).unwrap();
        assert_eq!(dx, vec![0.0; 3]);
        assert!(z.forward(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn conv_hand_cases() {
        let mut c = Conv1d::<f64>::zeros("c", 1, 1, 3).unwrap();
        c.w.value = vec![0.0, 1.0, 0.0];
        let x = vec![0.5, -1.0, 2.0, 0.0, 3.0];
        assert_eq!(c.forward(&x, 5).unwrap(), x);
        c.w.value = vec![1.0, 1.0, 1.0];
        let mut impulse = vec![0.0; 7];
        impulse[3] = 1.0;
        assert_eq!(c.forward(&impulse, 7).unwrap(), vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(Conv1d::<f64>::zeros("even", 1, 1, 4).is_err());
    }

    #[test]
    fn conv_gradient_check() {
        let mut c = Conv1d::<f64>::new("c", 3, 4, 5, &mut rng()).unwrap();
        let x = rand_vec(6 * 3, 1);
        let wts = rand_vec(6 * 4, 2);
        let r = grad_check(&mut c, |c| {
            c.zero_grad();
            let y = c.forward(&x, 6).unwrap();
            let loss: f64 = y.iter().zip(&wts).map(|(a, b)| a * b).sum();
            c.backward(&x, 6, &wts, None).unwrap();
            loss
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_input_gradient_matches_differences() {
        let mut c = Conv1d::<f64>::new("c", 2, 3, 3, &mut rng()).unwrap();
        let x = rand_vec(5 * 2, 3);
        let wts = rand_vec(5 * 3, 4);
        let f = |c: &Conv1d<f64>, x: &[f64]| -> f64 {
            c.forward(x, 5).unwrap().iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let mut dx = vec![0.0; x.len()];
        c.backward(&x, 5, &wts, Some(&mut dx)).unwrap();
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += 1e-4;
            let mut down = x.clone();
            down[i] -= 1e-4;
            let num = (f(&c, &up) - f(&c, &down)) / 2e-4;
            assert!((num - dx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let cell = ConvLstm::<f64>::zeros("l", 2, 3, 3).unwrap();
        let (h, _, _) = cell
            .step(&rand_vec(8, 1), &rand_vec(12, 2), &rand_vec(12, 3), 4)
            .unwrap();
        // o = sigmoid(0) = 0.5, c' = 0.5 c + 0.5 * tanh(0) = c / 2.
        let c = rand_vec(12, 3);
        for (hv, cv) in h.iter().zip(&c) {
            assert!((hv - 0.5 * (0.5 * cv).tanh()).abs() < 1e-12);
        }
        let (h0, _, _) = cell.step(&rand_vec(8, 1), &[0.0; 12], &[0.0; 12], 4).unwrap();
        assert!(h0.iter().all(|&v| v == 0.0));
    }

    /// Textbook LSTM with separate weight matrices.
    fn scalar_lstm(
        wx: &[Vec<f64>; 4],
        wh: &[Vec<f64>; 4],
        bias: &[Vec<f64>; 4],
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let gate = |g: usize, u: usize| -> f64 {
            let mut s = bias[g][u];
            for (i, xv) in x.iter().enumerate() {
                s += wx[g][i * hd + u] * xv;
            }
            for (j, hv) in h.iter().enumerate() {
                s += wh[g][j * hd + u] * hv;
            }
            s
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for u in 0..hd {
            let i = sig(gate(0, u));
            let f = sig(gate(1, u));
            let g = gate(2, u).tanh();
            let o = sig(gate(3, u));
            c2[u] = f * c[u] + i * g;
            h2[u] = o * c2[u].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn one_band_convlstm_is_a_dense_lstm() {
        let (ci, hd) = (3, 2);
        let cell = ConvLstm::<f64>::new("l", ci, hd, 1, &mut rng()).unwrap();
        let w = &cell.conv.w.value;
        let co = 4 * hd;
        let pick = |g: usize, row: usize, u: usize| w[row * co + g * hd + u];
        let wx: [Vec<f64>; 4] = std::array::from_fn(|g| {
            (0..ci).flat_map(|i| (0..hd).map(move |u| (i, u))).map(|(i, u)| pick(g, i, u)).collect()
        });
        let wh: [Vec<f64>; 4] = std::array::from_fn(|g| {
            (0..hd).flat_map(|j| (0..hd).map(move |u| (j, u))).map(|(j, u)| pick(g, ci + j, u)).collect()
        });
        let bias: [Vec<f64>; 4] = std::array::from_fn(|g| cell.conv.b.value[g * hd..(g + 1) * hd].to_vec());
        let (x, h, c) = (rand_vec(ci, 1), rand_vec(hd, 2), rand_vec(hd, 3));
        let (h1, c1, _) = cell.step(&x, &h, &c, 1).unwrap();
        let (h2, c2) = scalar_lstm(&wx, &wh, &bias, &x, &h, &c);
        for k in 0..hd {
            assert!((h1[k] - h2[k]).abs() < 1e-12);
            assert!((c1[k] - c2[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn convlstm_gradient_check_three_steps() {
        let bands = 4;
        let mut cell = ConvLstm::<f64>::new("l", 2, 3, 3, &mut rng()).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|t| rand_vec(bands * 2, 10 + t)).collect();
        let wts = rand_vec(bands * 3, 99);
        let r = grad_check(&mut cell, |cell| {
            cell.zero_grad();
            let mut h = vec![0.0; bands * 3];
            let mut c = vec![0.0; bands * 3];
            let mut caches = Vec::new();
            for x in &xs {
                let (h2, c2, cache) = cell.step(x, &h, &c, bands).unwrap();
                h = h2;
                c = c2;
                caches.push(cache);
            }
            let loss: f64 = h.iter().zip(&wts).map(|(a, b)| a * b).sum();
            let mut dh = wts.clone();
            let mut dc = vec![0.0; bands * 3];
            for cache in caches.iter().rev() {
                let (_, dhp, dcp) = cell.step_backward(cache, bands, &dh, &dc).unwrap();
                dh = dhp;
                dc = dcp;
            }
            loss
        });
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    fn toy_config(layout: Layout) -> NetworkConfig {
        let mut c = match layout {
            Layout::Conv => NetworkConfig::conv(4, 2, 1),
            Layout::Dense => NetworkConfig::dense(4, 2, 1),
        };
        c.feature_channels = 3;
        c.hidden = 3;
        c.p_head = true;
        c
    }

    fn toy_inputs(t: usize, len: usize) -> Vec<Vec<f64>> {
        (0..t).map(|i| rand_vec(len, 50 + i as u64)).collect()
    }

    fn network_grad_check(config: NetworkConfig) -> GradCheckReport {
        let mut net = Network::<f64>::new(config, 3).unwrap();
        let xs = toy_inputs(3, net.config.input_len());
        let n = net.config.n_bands;
        let k = net.config.m_outputs;
        grad_check(&mut net, |net| {
            net.zero_grad();
            let trace = net.forward_sequence(&xs).unwrap();
            let mut loss = 0.0;
            let mut grads = Vec::new();
            for (t, out) in trace.heads.iter().enumerate() {
                let wm = rand_vec(n * k, 200 + t as u64);
                let wq = rand_vec(n, 300 + t as u64);
                let wp = rand_vec(n * k, 400 + t as u64);
                loss += out.m.iter().zip(&wm).map(|(a, b)| a * b).sum::<f64>();
                loss += out.q.as_ref().unwrap().iter().zip(&wq).map(|(a, b)| a * b * a).sum::<f64>();
                loss += out.p.as_ref().unwrap().iter().zip(&wp).map(|(a, b)| a * b).sum::<f64>();
                let dq = out.q.as_ref().unwrap().iter().zip(&wq).map(|(a, b)| 2.0 * a * b).collect();
                grads.push(HeadGrad { m: Some(wm), p: Some(wp), q: Some(dq) });
            }
            net.backward_sequence(&trace, &grads).unwrap();
            loss
        })
    }

    #[test]
    fn network_gradient_checks() {
        let r = network_grad_check(toy_config(Layout::Conv));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let r = network_grad_check(toy_config(Layout::Dense));
        assert!(r.max_rel_error < 1e-3, "{r:?}");
        let mut plain = toy_config(Layout::Conv);
        plain.dueling = false;
        let r = network_grad_check(plain);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut c = Conv1d::<f64>::new("c", 2, 2, 3, &mut rng()).unwrap();
        let x = rand_vec(8, 1);
        let wts = rand_vec(8, 2);
        let r = grad_check(&mut c, |c| {
            c.zero_grad();
            let y = c.forward(&x, 4).unwrap();
            c.backward(&x, 4, &wts, None).unwrap();
            c.w.grad[0] *= 1.5;
            y.iter().zip(&wts).map(|(a, b)| a * b).sum()
        });
        assert!(r.max_rel_error > 1e-1);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut c = Conv1d::<f64>::new("c", 2, 2, 3, &mut rng()).unwrap();
        let r = grad_check(&mut c, |c| {
            c.zero_grad();
            1.0
        });
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn wbce_gradient_matches_differences() {
        for k in [1usize, 3] {
            let logits = rand_vec(5 * k, 8);
            let labels: Vec<u8> = if k == 1 { vec![1, 0, 0, 1, 0] } else { vec![2, 0, 1, 0, 2] };
            let mask = [true, false, true, true, true];
            let (_, g) = wbce_logits(&logits, k, &labels, Some(&mask), 0.1);
            for i in 0..logits.len() {
                let mut up = logits.clone();
                up[i] += 1e-5;
                let mut down = logits.clone();
                down[i] -= 1e-5;
                let num = (wbce_logits(&up, k, &labels, Some(&mask), 0.1).0
                    - wbce_logits(&down, k, &labels, Some(&mask), 0.1).0)
                    / 2e-5;
                assert!((num - g[i]).abs() < 1e-7, "k={k} i={i}");
            }
        }
        let (l, _) = wbce_logits(&[0.0f64], 1, &[1], None, 0.1);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn wbce_agrees_with_metrics() {
        let logits = rand_vec(6, 5);
        let labels = vec![1u8, 0, 0, 1, 0, 0];
        let (l, _) = wbce_logits(&logits, 1, &labels, None, 0.1);
        let pred = probs_to_band_vector(&head_probs(&logits, 1), 1);
        let m = crate::metrics::wbce_loss(&pred, &BandVector::Binary(labels), 0.1).unwrap();
        assert!((l - m).abs() < 1e-12);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Param::<f64>::zeros("p", 3);
        p.value = vec![1.0, 2.0, 3.0];
        let mut opt = Adam::new(1e-3);
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.value, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Param::<f64>::zeros("x", 1);
        p.value[0] = 0.3;
        let mut opt = Adam::new(1e-2);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 0.7);
            opt.step(vec![&mut p]).unwrap();
        }
        assert!((p.value[0] - 0.7).abs() < 1e-3, "{}", p.value[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = Param::<f32>::zeros("lstm.w", 2);
        p.grad[1] = f32::NAN;
        let err = Adam::new(1e-3).step(vec![&mut p]).unwrap_err();
        assert!(err.to_string().contains("lstm.w"));
        assert_eq!(p.value, vec![0.0, 0.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut net = Network::<f32>::new(NetworkConfig::conv(6, 2, 1), 1).unwrap();
            let mut opt = Adam::new(1e-3);
            let xs: Vec<Vec<f32>> = (0..4).map(|t| vec![(t % 2) as f32; 12]).collect();
            for _ in 0..3 {
                net.zero_grad();
                let trace = net.forward_sequence(&xs).unwrap();
                let grads: Vec<HeadGrad<f32>> = trace
                    .heads
                    .iter()
                    .map(|h| HeadGrad { m: Some(h.m.clone()), p: None, q: h.q.clone() })
                    .collect();
                net.backward_sequence(&trace, &grads).unwrap();
                opt.step(net.params_mut()).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_output_weights_give_half_probabilities() {
        let mut net = Network::<f32>::new(NetworkConfig::conv(10, 2, 1), 0).unwrap();
        net.m_head.w.value.iter_mut().for_each(|w| *w = 0.0);
        let out = net.heads(&net.initial_state().h).unwrap();
        assert!(head_probs(&out.m, 1).iter().all(|&p| p == 0.5));
    }

    #[test]
    fn parameter_counts_scale_as_expected() {
        let conv20 = Network::<f32>::new(NetworkConfig::conv(20, 2, 1), 0).unwrap();
        let conv40 = Network::<f32>::new(NetworkConfig::conv(40, 2, 1), 0).unwrap();
        let dense20 = Network::<f32>::new(NetworkConfig::dense(20, 2, 1), 0).unwrap();
        let dense40 = Network::<f32>::new(NetworkConfig::dense(40, 2, 1), 0).unwrap();
        assert_eq!(conv20.param_count(), conv40.param_count());
        assert!(dense40.param_count() > dense20.param_count());
        assert!(conv20.param_count() < dense20.param_count());
    }

    #[test]
    fn convolution_is_translation_equivariant() {
        let net = Network::<f64>::new(NetworkConfig::conv(30, 2, 1), 4).unwrap();
        let mut x = vec![0.0; 60];
        x[2 * 10] = 1.0;
        x[2 * 10 + 1] = 1.0;
        x[2 * 12] = 1.0;
        let mut shifted = vec![0.0; 60];
        shifted[..60 - 2 * 5].copy_from_slice(&x[..60 - 2 * 5]);
        shifted.rotate_right(2 * 5);
        let mut s1 = net.initial_state();
        let mut s2 = net.initial_state();
        for _ in 0..3 {
            s1 = net.step(&s1, &x).unwrap();
            s2 = net.step(&s2, &shifted).unwrap();
        }
        let hd = net.config.hidden;
        // Receptive field after three steps stays well inside bands 2..27.
        for b in 2..20 {
            for u in 0..hd {
                let a = s1.h[b * hd + u];
                let z = s2.h[(b + 5) * hd + u];
                assert!((a - z).abs() < 1e-12, "band {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut cfg = NetworkConfig::conv(8, 5, 3);
        cfg.p_head = true;
        let net = Network::<f32>::new(cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = Network::<f32>::load(&path).unwrap();
        assert_eq!(net, back);
        let mut bytes = net.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Network::<f32>::from_bytes(&bytes).is_err());
        bytes = net.to_bytes().unwrap();
        bytes.pop();
        assert!(Network::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn multiclass_heads_are_distributions() {
        let net = Network::<f32>::new(NetworkConfig::conv(5, 5, 3), 2).unwrap();
        let s = net.step(&net.initial_state(), &[1.0; 25]).unwrap();
        let out = net.heads(&s.h).unwrap();
        let p = head_probs(&out.m, 4);
        for row in p.chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(probs_to_band_vector(&p, 4).is_well_formed());
    }

    proptest! {
        #[test]
        fn dueling_identities(v in -5.0f64..5.0, adv in prop::collection::vec(-5.0f64..5.0, 1..30), c in -3.0f64..3.0) {
            let q = dueling_combine(v, &adv);
            let shifted: Vec<f64> = adv.iter().map(|a| a + c).collect();
            let q2 = dueling_combine(v, &shifted);
            for (a, b) in q.iter().zip(&q2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let argmax = |x: &[f64]| x.iter().enumerate().fold(0, |best, (i, &y)| if y > x[best] { i } else { best });
            prop_assert_eq!(argmax(&q), argmax(&adv));
            let flat = dueling_combine(v, &vec![c; adv.len()]);
            prop_assert!(flat.iter().all(|&x| (x - v).abs() < 1e-9));
        }
    }
}
