//! Full-precision Double DQN teacher: the conv-net Q-function, experience
//! replay, epsilon-greedy exploration, frozen target network, and the
//! RMSProp training loop.
//!
//! The network is the classic three-conv stack (32 filters of kernel 8
//! stride 4, 64 of kernel 4 stride 2, 64 of kernel 3 stride 1) into a
//! 512-unit dense layer and a linear action head. On 84x84 inputs that
//! geometry works unpadded; desk-scale 24x24 frames would collapse to
//! nothing, so the two later convs get one ring of padding there. Channel
//! widths are parameterized for tests that need a small-but-identical
//! learner; the shipped constructor always uses the paper stack.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::conv::{conv2d, conv2d_backward};
use crate::env::{EnvSpec, FrameStack};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{argmax_tiebreak, linear_backward, linear_forward};
use crate::{bin_io, Tensor};

/// A stacked observation quantized back to 8-bit pixels for replay storage.
/// Native desk frames are exact under this round trip (they start as 8-bit
/// pixels); resized frames lose sub-quantum detail, which replay tolerates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredObs {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl StoredObs {
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.len(), 3, "stored observations are [C,H,W]");
        StoredObs {
            shape: [s[0], s[1], s[2]],
            data: t.data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&p| p as f64 / 255.0).collect()).unwrap()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Copies this observation into row `i` of a `[N, C, H, W]` batch.
    fn write_into(&self, batch: &mut Tensor, i: usize) {
        let n: usize = self.shape.iter().product();
        let row = &mut batch.data_mut()[i * n..(i + 1) * n];
        for (dst, &p) in row.iter_mut().zip(&self.data) {
            *dst = p as f64 / 255.0;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub s: StoredObs,
    pub a: usize,
    pub r: f64,
    pub s2: StoredObs,
    pub done: bool,
}

/// Fixed-capacity ring buffer with uniform sampling over the filled region.
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { items: Vec::with_capacity(capacity.min(4096)), capacity, next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        debug_assert!(t.r.is_finite(), "non-finite reward in replay");
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn sample_indices(&self, rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
        assert!(!self.items.is_empty(), "sampling from an empty replay buffer");
        (0..n).map(|_| rng.gen_range(0..self.items.len())).collect()
    }
}

/// Linear annealing from `start` to `end` over `anneal_steps`, constant after.
#[derive(Clone, Copy, Debug)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EpsilonSchedule {
    pub fn value(&self, step: u64) -> f64 {
        if step >= self.anneal_steps || self.anneal_steps == 0 {
            self.end
        } else {
            self.start + (self.end - self.start) * step as f64 / self.anneal_steps as f64
        }
    }
}

/// The Double DQN backup: the online network selects the next action, the
/// frozen target network evaluates it.
pub fn ddqn_target(
    r: f64,
    done: bool,
    gamma: f64,
    q_online_next: &[f64],
    q_target_next: &[f64],
) -> f64 {
    assert!((0.0..=1.0).contains(&gamma), "gamma must lie in [0,1]");
    if done {
        return r;
    }
    r + gamma * q_target_next[argmax_tiebreak(q_online_next)]
}

#[derive(Clone, Debug)]
struct ConvLayer {
    w: Tensor,
    b: Vec<f64>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
pub struct TeacherNetwork {
    pub input_shape: [usize; 3],
    pub actions: usize,
    channels: [usize; 3],
    fc_units: usize,
    conv: Vec<ConvLayer>,
    fc_w: Tensor,
    fc_b: Vec<f64>,
    head_w: Tensor,
    head_b: Vec<f64>,
}

const CONV_KERNELS: [usize; 3] = [8, 4, 3];
const CONV_STRIDES: [usize; 3] = [4, 2, 1];

/// Spatial size after one valid convolution.
fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|d| d / stride + 1)
}

impl TeacherNetwork {
    /// The paper's architecture: channels (32, 64, 64), 512 dense units.
    pub fn new(input_shape: [usize; 3], actions: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        Self::with_dims(input_shape, actions, [32, 64, 64], 512, rng)
    }

    /// Same stack with configurable widths, for tests that need the exact
    /// learning dynamics at a fraction of the compute.
    pub fn with_dims(
        input_shape: [usize; 3],
        actions: usize,
        channels: [usize; 3],
        fc_units: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if actions == 0 {
            return Err(Error::config("teacher needs at least one action".to_string()));
        }
        // Unpadded on large frames (the 84x84 layout); desk frames need one
        // ring of padding on the later convs to keep a usable map.
        let pads = if input_shape[1] >= 40 { [0, 0, 0] } else { [0, 1, 1] };
        let mut conv = Vec::with_capacity(3);
        let (mut h, mut w) = (input_shape[1], input_shape[2]);
        let mut c = input_shape[0];
        let uniform = |fan_in: usize, shape: &[usize], rng: &mut ChaCha12Rng| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()).unwrap()
        };
        for i in 0..3 {
            let (k, s, p) = (CONV_KERNELS[i], CONV_STRIDES[i], pads[i]);
            h = conv_out(h, k, s, p).filter(|&v| v > 0).ok_or_else(|| {
                Error::config(format!(
                    "teacher input {input_shape:?} collapses at conv {i} (kernel {k}, stride {s})"
                ))
            })?;
            w = conv_out(w, k, s, p).unwrap();
            let fan_in = c * k * k;
            conv.push(ConvLayer {
                w: uniform(fan_in, &[channels[i], c, k, k], rng),
                b: vec![0.0; channels[i]],
                stride: s,
                pad: p,
            });
            c = channels[i];
        }
        let flat = c * h * w;
        let fc_w = uniform(flat, &[fc_units, flat], rng);
        let head_w = uniform(fc_units, &[actions, fc_units], rng);
        Ok(TeacherNetwork {
            input_shape,
            actions,
            channels,
            fc_units,
            conv,
            fc_w,
            fc_b: vec![0.0; fc_units],
            head_w,
            head_b: vec![0.0; actions],
        })
    }

    #[cfg(test)]
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(10);
        for layer in &self.conv {
            out.push(layer.w.data());
            out.push(layer.b.as_slice());
        }
        out.push(self.fc_w.data());
        out.push(self.fc_b.as_slice());
        out.push(self.head_w.data());
        out.push(self.head_b.as_slice());
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(10);
        for layer in &mut self.conv {
            out.push(layer.w.data_mut());
            out.push(layer.b.as_mut_slice());
        }
        out.push(self.fc_w.data_mut());
        out.push(self.fc_b.as_mut_slice());
        out.push(self.head_w.data_mut());
        out.push(self.head_b.as_mut_slice());
        out
    }

    /// Q-values for a batch `[N, C, H, W]`, plus everything backward needs.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, TeacherCache)> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "teacher input {s:?} vs expected [N, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let n = s[0];
        let mut acts = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(3);
        let mut cur = x.clone();
        for layer in &self.conv {
            let mut z = conv2d(&cur, &layer.w, layer.stride, layer.pad, 1)?;
            add_channel_bias(&mut z, &layer.b);
            cur = z.map(|v| v.max(0.0));
            pre.push(z);
            acts.push(cur.clone());
        }
        let flat = cur.reshape(&[n, cur.len() / n])?;
        let fc_pre = linear_forward(&flat, &self.fc_w, &self.fc_b)?;
        let fc_act = fc_pre.map(|v| v.max(0.0));
        let q = linear_forward(&fc_act, &self.head_w, &self.head_b)?;
        Ok((q, TeacherCache { input: x.clone(), pre, acts, flat, fc_pre, fc_act }))
    }

    /// Q-values for one observation `[C, H, W]`.
    pub fn q_values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        let s = obs.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("q_values wants [C,H,W], got {s:?}")));
        }
        let batch = obs.reshape(&[1, s[0], s[1], s[2]])?;
        Ok(self.forward(&batch)?.0.into_data())
    }

    pub fn greedy_action(&self, obs: &Tensor) -> Result<usize> {
        Ok(argmax_tiebreak(&self.q_values(obs)?))
    }

    /// Backpropagates `grad_q` through the cached forward pass; gradient
    /// slices come back in `param_slices` order.
    pub fn backward(&self, cache: &TeacherCache, grad_q: &Tensor) -> Result<TeacherGrads> {
        let (dw_head, db_head, d_fc_act) = linear_backward(&cache.fc_act, &self.head_w, grad_q)?;
        let mut d_fc_pre = d_fc_act;
        relu_backward(&mut d_fc_pre, &cache.fc_pre);
        let (dw_fc, db_fc, d_flat) = linear_backward(&cache.flat, &self.fc_w, &d_fc_pre)?;
        let mut dy = d_flat.reshape(cache.acts[2].shape())?;
        let mut conv_grads = Vec::with_capacity(3);
        for i in (0..3).rev() {
            relu_backward(&mut dy, &cache.pre[i]);
            let db = channel_bias_grad(&dy);
            let x = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            let (dw, dx) =
                conv2d_backward(x, &self.conv[i].w, &dy, self.conv[i].stride, self.conv[i].pad, 1)?;
            conv_grads.push((dw, db));
            dy = dx;
        }
        conv_grads.reverse();
        let mut parts = Vec::with_capacity(10);
        for (dw, db) in conv_grads {
            parts.push(dw.into_data());
            parts.push(db);
        }
        parts.push(dw_fc.into_data());
        parts.push(db_fc);
        parts.push(dw_head.into_data());
        parts.push(db_head);
        Ok(TeacherGrads { parts })
    }

    const MAGIC: &'static [u8; 4] = b"TCK1";
    const VERSION: u16 = 1;

    /// Serializes weights plus the environment provenance needed to rebuild
    /// the observation pipeline this teacher was trained on.
    pub fn to_bytes(&self, env: &EnvSpec) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        bin_io::put_u16(&mut out, Self::VERSION);
        bin_io::put_str(&mut out, &env.name);
        bin_io::put_u32(&mut out, env.grid as u32);
        bin_io::put_u32(&mut out, env.render_scale as u32);
        let (rh, rw) = env.resize.unwrap_or((0, 0));
        bin_io::put_u32(&mut out, rh as u32);
        bin_io::put_u32(&mut out, rw as u32);
        for d in self.input_shape {
            bin_io::put_u32(&mut out, d as u32);
        }
        bin_io::put_u32(&mut out, self.actions as u32);
        for c in self.channels {
            bin_io::put_u32(&mut out, c as u32);
        }
        bin_io::put_u32(&mut out, self.fc_units as u32);
        for layer in &self.conv {
            bin_io::put_tensor(&mut out, &layer.w);
            bin_io::put_f64_slice(&mut out, &layer.b);
        }
        bin_io::put_tensor(&mut out, &self.fc_w);
        bin_io::put_f64_slice(&mut out, &self.fc_b);
        bin_io::put_tensor(&mut out, &self.head_w);
        bin_io::put_f64_slice(&mut out, &self.head_b);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, EnvSpec)> {
        let mut r = bin_io::Reader::new(bytes, "teacher checkpoint");
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(Error::corrupt(format!("teacher checkpoint version {version}")));
        }
        let name = r.str()?;
        let grid = r.u32()? as usize;
        let render_scale = r.u32()? as usize;
        let (rh, rw) = (r.u32()? as usize, r.u32()? as usize);
        let env = EnvSpec {
            name,
            grid,
            render_scale,
            resize: if rh == 0 || rw == 0 { None } else { Some((rh, rw)) },
        };
        let input_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let actions = r.u32()? as usize;
        let channels = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let fc_units = r.u32()? as usize;
        let mut template = {
            let mut init_rng = rng::stream(0, rng::streams::TEACHER_INIT);
            Self::with_dims(input_shape, actions, channels, fc_units, &mut init_rng)
                .map_err(|e| Error::corrupt(format!("teacher checkpoint: {e}")))?
        };
        for layer in &mut template.conv {
            let w = r.tensor()?;
            if w.shape() != layer.w.shape() {
                return Err(Error::corrupt(format!(
                    "teacher checkpoint: conv weights {:?} vs expected {:?}",
                    w.shape(),
                    layer.w.shape()
                )));
            }
            layer.w = w;
            let b = r.f64_slice()?;
            if b.len() != layer.b.len() {
                return Err(Error::corrupt("teacher checkpoint: conv bias malformed".to_string()));
            }
            layer.b = b;
        }
        let fc_w = r.tensor()?;
        let fc_b = r.f64_slice()?;
        let head_w = r.tensor()?;
        let head_b = r.f64_slice()?;
        if fc_w.shape() != template.fc_w.shape()
            || fc_b.len() != template.fc_b.len()
            || head_w.shape() != template.head_w.shape()
            || head_b.len() != template.head_b.len()
        {
            return Err(Error::corrupt("teacher checkpoint: dense block malformed".to_string()));
        }
        template.fc_w = fc_w;
        template.fc_b = fc_b;
        template.head_w = head_w;
        template.head_b = head_b;
        r.expect_end()?;
        Ok((template, env))
    }
}

pub struct TeacherCache {
    input: Tensor,
    pre: Vec<Tensor>,
    acts: Vec<Tensor>,
    flat: Tensor,
    fc_pre: Tensor,
    fc_act: Tensor,
}

pub struct TeacherGrads {
    parts: Vec<Vec<f64>>,
}

fn add_channel_bias(z: &mut Tensor, b: &[f64]) {
    let s = z.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let zd = z.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for v in &mut zd[base..base + hw] {
                *v += b[ch];
            }
        }
    }
}

fn channel_bias_grad(dz: &Tensor) -> Vec<f64> {
    let s = dz.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut db = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            db[ch] += dz.data()[base..base + hw].iter().sum::<f64>();
        }
    }
    db
}

fn relu_backward(dy: &mut Tensor, pre: &Tensor) {
    for (g, &z) in dy.data_mut().iter_mut().zip(pre.data()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
}

/// RMSProp with a moving average of squared gradients:
/// `sq <- decay*sq + (1-decay)*g^2; w -= lr * g / (sqrt(sq) + eps)`.
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    sq: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64, decay: f64, eps: f64) -> Self {
        assert!(lr > 0.0 && (0.0..1.0).contains(&decay) && eps > 0.0);
        RmsProp { lr, decay, eps, sq: Vec::new() }
    }

    pub fn step(&mut self, net: &mut TeacherNetwork, grads: &TeacherGrads) {
        let mut params = net.param_slices_mut();
        assert_eq!(params.len(), grads.parts.len(), "gradient/parameter mismatch");
        if self.sq.is_empty() {
            self.sq = grads.parts.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        for ((p, g), sq) in params.iter_mut().zip(&grads.parts).zip(&mut self.sq) {
            for i in 0..g.len() {
                sq[i] = self.decay * sq[i] + (1.0 - self.decay) * g[i] * g[i];
                p[i] -= self.lr * g[i] / (sq[i].sqrt() + self.eps);
            }
        }
    }
}

/// Computes the batch TD loss and its parameter gradients without applying
/// them: mean squared error between Q(s, a) and the DDQN backup, gradient
/// flowing only through the taken action's Q-value.
pub fn td_loss_and_grads(
    online: &TeacherNetwork,
    target: &TeacherNetwork,
    buffer: &ReplayBuffer,
    batch: &[usize],
    gamma: f64,
) -> Result<(f64, TeacherGrads)> {
    let n = batch.len();
    assert!(n > 0, "empty td batch");
    let [c, h, w] = online.input_shape;
    let mut s = Tensor::zeros(&[n, c, h, w]);
    let mut s2 = Tensor::zeros(&[n, c, h, w]);
    for (i, &idx) in batch.iter().enumerate() {
        buffer.get(idx).s.write_into(&mut s, i);
        buffer.get(idx).s2.write_into(&mut s2, i);
    }
    let (q, cache) = online.forward(&s)?;
    let (q2_online, _) = online.forward(&s2)?;
    let (q2_target, _) = target.forward(&s2)?;
    let mut loss = 0.0;
    let mut dq = Tensor::zeros(q.shape());
    for (i, &idx) in batch.iter().enumerate() {
        let t = buffer.get(idx);
        let backup = ddqn_target(t.r, t.done, gamma, q2_online.row(i), q2_target.row(i));
        let err = q.row(i)[t.a] - backup;
        loss += err * err / n as f64;
        dq.row_mut(i)[t.a] = 2.0 * err / n as f64;
    }
    Ok((loss, online.backward(&cache, &dq)?))
}

/// One optimization step on a sampled batch; returns the loss.
pub fn td_step(
    online: &mut TeacherNetwork,
    target: &TeacherNetwork,
    buffer: &ReplayBuffer,
    batch: &[usize],
    gamma: f64,
    opt: &mut RmsProp,
) -> Result<f64> {
    let (loss, grads) = td_loss_and_grads(online, target, buffer, batch, gamma)?;
    opt.step(online, &grads);
    Ok(loss)
}

pub fn sync_target(online: &TeacherNetwork, target: &mut TeacherNetwork) {
    *target = online.clone();
}

#[derive(Clone, Debug)]
pub struct TeacherConfig {
    pub gamma: f64,
    pub lr: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_eps: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal: u64,
    pub target_sync: u64,
    pub replay_capacity: usize,
    pub batch: usize,
    pub total_steps: u64,
    pub warmup: u64,
    pub update_every: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_workers: usize,
    /// Stop as soon as a periodic evaluation reaches this mean return.
    pub stop_return: Option<f64>,
    /// Channel widths and dense units, exposed for the scaled-down tests.
    pub channels: [usize; 3],
    pub fc_units: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            gamma: 0.99,
            lr: 0.00025,
            rmsprop_decay: 0.95,
            rmsprop_eps: 0.01,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_anneal: 20_000,
            target_sync: 1_000,
            replay_capacity: 50_000,
            batch: 32,
            total_steps: 30_000,
            warmup: 1_000,
            update_every: 4,
            eval_interval: 2_000,
            eval_episodes: 100,
            eval_workers: 1,
            stop_return: None,
            channels: [32, 64, 64],
            fc_units: 512,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("teacher config: {what}")))
            }
        };
        check((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0,1]")?;
        check(self.lr > 0.0, "learning rate must be positive")?;
        check((0.0..1.0).contains(&self.rmsprop_decay), "rmsprop decay must lie in [0,1)")?;
        check(self.rmsprop_eps > 0.0, "rmsprop eps must be positive")?;
        check(
            (0.0..=1.0).contains(&self.epsilon_start) && (0.0..=1.0).contains(&self.epsilon_end),
            "epsilon bounds must lie in [0,1]",
        )?;
        check(self.batch > 0, "batch size must be positive")?;
        check(self.replay_capacity >= self.batch, "replay capacity must cover one batch")?;
        check(self.total_steps > 0, "total steps must be positive")?;
        check(self.update_every > 0, "update interval must be positive")?;
        check(self.eval_episodes > 0, "eval episodes must be positive")?;
        check(self.eval_interval > 0, "eval interval must be positive")?;
        check(self.eval_workers > 0, "eval workers must be positive")?;
        check(self.target_sync > 0, "target sync interval must be positive")?;
        Ok(())
    }
}

/// One row of the teacher metrics log, emitted per finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherMetricsRow {
    pub step: u64,
    pub episode_return: f64,
    pub loss: f64,
    pub epsilon: f64,
}

#[derive(Debug)]
pub struct TeacherReport {
    pub rows: Vec<TeacherMetricsRow>,
    /// `(step, mean greedy return)` per periodic evaluation.
    pub evals: Vec<(u64, f64)>,
    pub steps_run: u64,
    pub final_eval: f64,
}

/// Mean greedy return over `episodes` deterministic evaluation episodes.
/// Episode i always plays the environment seeded with `eval_base + i`, so
/// the result is independent of scheduling and worker counts; workers just
/// split the episode indices between them.
pub fn evaluate_teacher(
    net: &TeacherNetwork,
    env_spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    let seed_of = |ep: usize| seed.wrapping_add(rng::streams::EVAL_BASE) + ep as u64;
    let total = if workers <= 1 {
        let mut sum = 0.0;
        for ep in 0..episodes {
            sum += greedy_episode(net, env_spec, seed_of(ep))?;
        }
        sum
    } else {
        let partials = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers.min(episodes))
                .map(|w| {
                    scope.spawn(move || {
                        let mut sum = 0.0;
                        for ep in (w..episodes).step_by(workers) {
                            sum += greedy_episode(net, env_spec, seed_of(ep))?;
                        }
                        Ok::<f64, Error>(sum)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect::<Result<Vec<f64>>>()
        })?;
        partials.iter().sum()
    };
    Ok(total / episodes.max(1) as f64)
}

fn greedy_episode(net: &TeacherNetwork, env_spec: &EnvSpec, env_seed: u64) -> Result<f64> {
    let mut env = env_spec.build(env_seed)?;
    let mut stack = FrameStack::new();
    stack.reset(env_spec.preprocess(&env.reset()));
    let mut ret = 0.0;
    loop {
        let action = net.greedy_action(&stack.observation())?;
        let step = env.step(action)?;
        ret += step.reward;
        if step.terminal {
            return Ok(ret);
        }
        stack.push(env_spec.preprocess(&step.frame));
    }
}

/// The full training loop: epsilon-greedy rollouts into replay, periodic
/// TD updates after warmup, hard target syncs, and periodic greedy
/// evaluations (optionally stopping early once good enough).
pub fn train_teacher(
    env_spec: &EnvSpec,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<(TeacherNetwork, TeacherReport)> {
    cfg.validate()?;
    let obs_shape = env_spec.obs_shape()?;
    let mut env = env_spec.build(seed)?;
    let actions = env.num_actions();
    let mut init_rng = rng::stream(seed, rng::streams::TEACHER_INIT);
    let mut online =
        TeacherNetwork::with_dims(obs_shape, actions, cfg.channels, cfg.fc_units, &mut init_rng)?;
    let mut target = online.clone();
    let mut opt = RmsProp::new(cfg.lr, cfg.rmsprop_decay, cfg.rmsprop_eps);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut explore_rng = rng::stream(seed, rng::streams::EXPLORATION);
    let mut sample_rng = rng::stream(seed, rng::streams::REPLAY_SAMPLE);
    let schedule = EpsilonSchedule {
        start: cfg.epsilon_start,
        end: cfg.epsilon_end,
        anneal_steps: cfg.epsilon_anneal,
    };

    let mut stack = FrameStack::new();
    stack.reset(env_spec.preprocess(&env.reset()));
    let mut obs = stack.observation();
    let mut episode_return = 0.0;
    let mut last_loss = 0.0;
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    let mut steps_run = 0;

    for t in 0..cfg.total_steps {
        steps_run = t + 1;
        let epsilon = schedule.value(t);
        let action = if explore_rng.gen::<f64>() < epsilon {
            explore_rng.gen_range(0..actions)
        } else {
            argmax_tiebreak(&online.q_values(&obs)?)
        };
        let step = env.step(action)?;
        episode_return += step.reward;
        stack.push(env_spec.preprocess(&step.frame));
        let obs2 = stack.observation();
        replay.push(Transition {
            s: StoredObs::from_tensor(&obs),
            a: action,
            r: step.reward,
            s2: StoredObs::from_tensor(&obs2),
            done: step.terminal,
        });
        if step.terminal {
            rows.push(TeacherMetricsRow {
                step: t + 1,
                episode_return,
                loss: last_loss,
                epsilon,
            });
            episode_return = 0.0;
            stack.reset(env_spec.preprocess(&env.reset()));
            obs = stack.observation();
        } else {
            obs = obs2;
        }
        if t + 1 >= cfg.warmup && (t + 1) % cfg.update_every == 0 && replay.len() >= cfg.batch {
            let batch = replay.sample_indices(&mut sample_rng, cfg.batch);
            last_loss = td_step(&mut online, &target, &replay, &batch, cfg.gamma, &mut opt)?;
        }
        if (t + 1) % cfg.target_sync == 0 {
            sync_target(&online, &mut target);
        }
        if (t + 1) % cfg.eval_interval == 0 {
            let mean =
                evaluate_teacher(&online, env_spec, cfg.eval_episodes, seed, cfg.eval_workers)?;
            evals.push((t + 1, mean));
            if cfg.stop_return.is_some_and(|stop| mean >= stop) {
                break;
            }
        }
    }
    let final_eval = match evals.last() {
        Some(&(_, m)) => m,
        None => evaluate_teacher(&online, env_spec, cfg.eval_episodes, seed, cfg.eval_workers)?,
    };
    Ok((online, TeacherReport { rows, evals, steps_run, final_eval }))
}
