//! Policy distillation from a trained teacher into the low-precision
//! student: dataset generation, the three distillation losses, temperature
//! handling, multi-game merging, the student training loops, and
//! normalized evaluation.
//!
//! Teacher Q-vectors are recorded against the 8-bit-quantized observation
//! actually stored in the buffer, so recomputing the teacher on a stored
//! state reproduces the stored label bit for bit. Transduced states are
//! kept bit-packed in memory and on disk; they expand to float batches
//! only at training time.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::deploy::DeployedNetwork;
use crate::env::{transduce, transduce_bits, EnvSpec, FrameStack};
use crate::error::{Error, Result};
use crate::lowprec::{Activation, StudentGrads, StudentNetwork};
use crate::netspec::NetworkSpec;
use crate::rng;
use crate::teacher::{evaluate_teacher, StoredObs, TeacherNetwork};
use crate::tensor::{argmax_tiebreak, log_softmax};
use crate::{bin_io, Tensor};

/// Temperatures searched by the sweep, best-first per the source results.
pub const TAU_GRID: [f64; 4] = [0.05, 0.01, 0.005, 0.001];

pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Nll,
    Kl,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Nll => "nll",
            LossKind::Kl => "kl",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "nll" => Ok(LossKind::Nll),
            "kl" => Ok(LossKind::Kl),
            other => Err(Error::config(format!("unknown loss '{other}' (mse, nll, kl)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelKind {
    QVec,
    OneHot,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    /// The teacher's full Q-vector.
    QVec(Vec<f64>),
    /// Index of the teacher's greedy action.
    OneHot(usize),
}

impl Label {
    fn kind(&self) -> LabelKind {
        match self {
            Label::QVec(_) => LabelKind::QVec,
            Label::OneHot(_) => LabelKind::OneHot,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillSample {
    /// The stacked float observation the teacher saw, kept for replaying
    /// the teacher on stored states. Absent after a disk round trip.
    pub raw: Option<StoredObs>,
    /// Transduced binary state, bit-packed LSB-first.
    bits: Vec<u8>,
    pub label: Label,
    pub game: u16,
}

/// Ring buffer of distillation samples with uniform sampling, tagged with
/// enough geometry to rebuild student inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillBuffer {
    /// Game names; `DistillSample::game` indexes this table.
    pub games: Vec<String>,
    pub actions: usize,
    /// `[C, H, W]` of the raw (pre-transduction) observation.
    pub obs_shape: [usize; 3],
    pub levels: usize,
    pub label_kind: LabelKind,
    samples: Vec<DistillSample>,
    capacity: usize,
    next: usize,
}

fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        debug_assert!(b <= 1);
        out[i / 8] |= b << (i % 8);
    }
    out
}

fn unpack_bits(packed: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect()
}

impl DistillBuffer {
    pub fn new(
        games: Vec<String>,
        actions: usize,
        obs_shape: [usize; 3],
        levels: usize,
        label_kind: LabelKind,
        capacity: usize,
    ) -> Result<Self> {
        if games.is_empty() || actions == 0 || levels == 0 || capacity == 0 {
            return Err(Error::usage(
                "distill buffer needs a game, an action, a level, and capacity".to_string(),
            ));
        }
        if obs_shape.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!("degenerate observation shape {obs_shape:?}")));
        }
        Ok(DistillBuffer {
            games,
            actions,
            obs_shape,
            levels,
            label_kind,
            samples: Vec::new(),
            capacity,
            next: 0,
        })
    }

    /// Bits per transduced state: channels x levels x height x width.
    pub fn bit_len(&self) -> usize {
        self.obs_shape[0] * self.levels * self.obs_shape[1] * self.obs_shape[2]
    }

    /// Shape of the student input this buffer produces.
    pub fn input_shape(&self) -> [usize; 3] {
        [self.obs_shape[0] * self.levels, self.obs_shape[1], self.obs_shape[2]]
    }

    pub fn push(&mut self, raw: Option<StoredObs>, bits: &[u8], label: Label, game: u16) {
        assert_eq!(bits.len(), self.bit_len(), "transduced state length mismatch");
        assert_eq!(label.kind(), self.label_kind, "label kind mismatch");
        if let Label::QVec(q) = &label {
            assert_eq!(q.len(), self.actions, "label length vs action count");
        }
        if let Label::OneHot(a) = &label {
            assert!(*a < self.actions, "one-hot label out of range");
        }
        assert!((game as usize) < self.games.len(), "unknown game id {game}");
        let sample = DistillSample { raw, bits: pack_bits(bits), label, game };
        if self.samples.len() < self.capacity {
            self.samples.push(sample);
        } else {
            self.samples[self.next] = sample;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &DistillSample {
        &self.samples[i]
    }

    pub fn state_bits(&self, i: usize) -> Vec<u8> {
        unpack_bits(&self.samples[i].bits, self.bit_len())
    }

    pub fn sample_indices(&self, rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
        assert!(!self.samples.is_empty(), "sampling from an empty distill buffer");
        (0..n).map(|_| rng.gen_range(0..self.samples.len())).collect()
    }

    /// Collapses Q-vector labels to one-hot greedy labels; the multi-game
    /// pipeline merges datasets in this form.
    pub fn to_onehot(&self) -> DistillBuffer {
        let mut out = self.clone();
        out.label_kind = LabelKind::OneHot;
        for s in &mut out.samples {
            if let Label::QVec(q) = &s.label {
                s.label = Label::OneHot(argmax_tiebreak(q));
            }
        }
        out
    }

    const MAGIC: &'static [u8; 4] = b"TDS1";
    const VERSION: u16 = 1;

    /// Dataset file layout: header (game table, action count, transduction
    /// geometry, label kind, sample count) then per sample the game id, the
    /// bit-packed state, and the label. Raw observations are not persisted.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        bin_io::put_u16(&mut out, Self::VERSION);
        bin_io::put_u16(&mut out, self.games.len() as u16);
        for g in &self.games {
            bin_io::put_str(&mut out, g);
        }
        bin_io::put_u32(&mut out, self.actions as u32);
        bin_io::put_u32(&mut out, self.levels as u32);
        for d in self.obs_shape {
            bin_io::put_u32(&mut out, d as u32);
        }
        out.push(match self.label_kind {
            LabelKind::QVec => 0,
            LabelKind::OneHot => 1,
        });
        bin_io::put_u64(&mut out, self.samples.len() as u64);
        for s in &self.samples {
            bin_io::put_u16(&mut out, s.game);
            out.extend_from_slice(&s.bits);
            match &s.label {
                Label::QVec(q) => bin_io::put_f64_slice(&mut out, q),
                Label::OneHot(a) => bin_io::put_u32(&mut out, *a as u32),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bin_io::Reader::new(bytes, "distill dataset");
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(Error::corrupt(format!("distill dataset version {version}")));
        }
        let n_games = r.u16()? as usize;
        if n_games == 0 {
            return Err(Error::corrupt("distill dataset: empty game table".to_string()));
        }
        let games: Vec<String> = (0..n_games).map(|_| r.str()).collect::<Result<_>>()?;
        let actions = r.u32()? as usize;
        let levels = r.u32()? as usize;
        let obs_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let label_kind = match r.take(1)?[0] {
            0 => LabelKind::QVec,
            1 => LabelKind::OneHot,
            k => return Err(Error::corrupt(format!("distill dataset: label kind {k}"))),
        };
        let count = r.u64()? as usize;
        let mut buf = DistillBuffer::new(games, actions, obs_shape, levels, label_kind, count.max(1))
            .map_err(|e| Error::corrupt(format!("distill dataset: {e}")))?;
        let bit_len = buf.bit_len();
        let packed_len = bit_len.div_ceil(8);
        for _ in 0..count {
            let game = r.u16()?;
            if game as usize >= buf.games.len() {
                return Err(Error::corrupt(format!("distill dataset: game id {game}")));
            }
            let packed = r.take(packed_len)?.to_vec();
            if bit_len % 8 != 0 && packed[packed_len - 1] >> (bit_len % 8) != 0 {
                return Err(Error::corrupt(
                    "distill dataset: nonzero padding bits in state".to_string(),
                ));
            }
            let label = match label_kind {
                LabelKind::QVec => {
                    let q = r.f64_slice()?;
                    if q.len() != actions || q.iter().any(|v| !v.is_finite()) {
                        return Err(Error::corrupt("distill dataset: bad Q label".to_string()));
                    }
                    Label::QVec(q)
                }
                LabelKind::OneHot => {
                    let a = r.u32()? as usize;
                    if a >= actions {
                        return Err(Error::corrupt(format!("distill dataset: action {a}")));
                    }
                    Label::OneHot(a)
                }
            };
            buf.samples.push(DistillSample { raw: None, bits: packed, label, game });
        }
        buf.next = buf.samples.len() % buf.capacity;
        r.expect_end()?;
        Ok(buf)
    }
}

/// Rolls the teacher through the environment epsilon-greedily for
/// `n_frames`, labeling every visited state with the teacher's Q-vector.
/// Labels are computed from the 8-bit stored form of each observation, so
/// replaying the teacher on a stored state reproduces its label exactly.
pub fn generate_buffer(
    teacher: &TeacherNetwork,
    env_spec: &EnvSpec,
    epsilon: f64,
    n_frames: usize,
    levels: usize,
    capacity: usize,
    seed: u64,
) -> Result<DistillBuffer> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::usage(format!("epsilon {epsilon} outside [0,1]")));
    }
    let obs_shape = env_spec.obs_shape()?;
    if obs_shape != teacher.input_shape {
        return Err(Error::usage(format!(
            "teacher expects {:?} observations, environment yields {obs_shape:?}",
            teacher.input_shape
        )));
    }
    let mut buf = DistillBuffer::new(
        vec![env_spec.name.clone()],
        teacher.actions,
        obs_shape,
        levels,
        LabelKind::QVec,
        capacity,
    )?;
    let mut env = env_spec.build(seed)?;
    let mut gen_rng = rng::stream(seed, rng::streams::DISTILL_GEN);
    let mut stack = FrameStack::new();
    stack.reset(env_spec.preprocess(&env.reset()));
    for _ in 0..n_frames {
        let stored = StoredObs::from_tensor(&stack.observation());
        let replay_obs = stored.to_tensor();
        let q = teacher.q_values(&replay_obs)?;
        let bits = transduce_bits(&replay_obs, levels);
        let action = if gen_rng.gen::<f64>() < epsilon {
            gen_rng.gen_range(0..teacher.actions)
        } else {
            argmax_tiebreak(&q)
        };
        buf.push(Some(stored), &bits, Label::QVec(q), 0);
        let step = env.step(action)?;
        if step.terminal {
            stack.reset(env_spec.preprocess(&env.reset()));
        } else {
            stack.push(env_spec.preprocess(&step.frame));
        }
    }
    Ok(buf)
}

/// Concatenates per-game one-hot datasets and shuffles them with a seeded
/// permutation. Game tags survive the merge for per-game evaluation.
pub fn merge_multigame(buffers: &[&DistillBuffer], seed: u64) -> Result<DistillBuffer> {
    let first = *buffers.first().ok_or_else(|| Error::usage("merge of zero datasets"))?;
    let mut games = Vec::new();
    let mut merged: Vec<DistillSample> = Vec::new();
    for b in buffers {
        if b.actions != first.actions {
            return Err(Error::usage(format!(
                "action-count mismatch in merge: {} vs {}",
                b.actions, first.actions
            )));
        }
        if b.obs_shape != first.obs_shape || b.levels != first.levels {
            return Err(Error::usage("merge of datasets with different geometry".to_string()));
        }
        if b.label_kind != LabelKind::OneHot {
            return Err(Error::usage(
                "multi-game merge takes one-hot datasets; convert labels first".to_string(),
            ));
        }
        let base = games.len() as u16;
        games.extend(b.games.iter().cloned());
        for s in &b.samples {
            let mut s = s.clone();
            s.game += base;
            merged.push(s);
        }
    }
    let mut shuffle_rng = rng::stream(seed, rng::streams::MERGE_SHUFFLE);
    merged.shuffle(&mut shuffle_rng);
    let capacity = merged.len().max(1);
    let next = merged.len() % capacity;
    Ok(DistillBuffer {
        games,
        actions: first.actions,
        obs_shape: first.obs_shape,
        levels: first.levels,
        label_kind: LabelKind::OneHot,
        samples: merged,
        capacity,
        next,
    })
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(usize, usize)> {
    let s = a.shape();
    if s.len() != 2 || s != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} vs {:?}, expected matching [N, A]",
            a.shape(),
            b.shape()
        )));
    }
    Ok((s[0], s[1]))
}

/// Squared-error regression onto the teacher's Q-vector, summed over the
/// batch; the gradient with respect to the student's Q output is
/// `2 (q_S - q_T)`.
pub fn loss_mse(q_t: &Tensor, q_s: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape(q_t, q_s, "mse loss")?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(q_s.shape());
    let gd = grad.data_mut();
    for (i, (&t, &s)) in q_t.data().iter().zip(q_s.data()).enumerate() {
        let d = s - t;
        loss += d * d;
        gd[i] = 2.0 * d;
    }
    Ok((loss, grad))
}

/// Cross-entropy against the teacher's greedy action as a hard target,
/// summed over the batch. Ties in the teacher's Q-vector resolve to the
/// lowest action index.
pub fn loss_nll(q_t: &Tensor, logits_s: &Tensor) -> Result<(f64, Tensor)> {
    check_same_shape(q_t, logits_s, "nll loss")?;
    let targets: Vec<usize> = (0..q_t.shape()[0]).map(|i| argmax_tiebreak(q_t.row(i))).collect();
    loss_nll_onehot(&targets, logits_s)
}

/// Cross-entropy against explicit hard targets; the form multi-game
/// training uses, and the exact zero-temperature limit of the KL loss.
pub fn loss_nll_onehot(targets: &[usize], logits_s: &Tensor) -> Result<(f64, Tensor)> {
    let s = logits_s.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::shape(format!(
            "nll loss: logits {:?} vs {} targets",
            logits_s.shape(),
            targets.len()
        )));
    }
    let actions = s[1];
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s);
    for (i, &t) in targets.iter().enumerate() {
        if t >= actions {
            return Err(Error::usage(format!("nll target {t} with {actions} actions")));
        }
        let ls = log_softmax(logits_s.row(i));
        loss -= ls[t];
        let g = grad.row_mut(i);
        for (a, lv) in ls.iter().enumerate() {
            g[a] = lv.exp() - if a == t { 1.0 } else { 0.0 };
        }
    }
    Ok((loss, grad))
}

/// KL divergence from the tempered teacher distribution to the student's
/// softmax, summed over the batch: `sum_a p_a ln(p_a / s_a)` with
/// `p = softmax(q_T / tau)` and `s = softmax(logits_S)`. The teacher side
/// is tempered, the student side is not.
pub fn loss_kl(q_t: &Tensor, logits_s: &Tensor, tau: f64) -> Result<(f64, Tensor)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::usage(format!("temperature must be positive, got {tau}")));
    }
    let (n, actions) = check_same_shape(q_t, logits_s, "kl loss")?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits_s.shape());
    let mut tempered = vec![0.0; actions];
    for i in 0..n {
        for (tv, &qv) in tempered.iter_mut().zip(q_t.row(i)) {
            *tv = qv / tau;
        }
        let lp = log_softmax(&tempered);
        let ls = log_softmax(logits_s.row(i));
        let g = grad.row_mut(i);
        for a in 0..actions {
            let p = lp[a].exp();
            loss += p * (lp[a] - ls[a]);
            g[a] = ls[a].exp() - p;
        }
    }
    Ok((loss, grad))
}

enum BatchLabels {
    Q(Tensor),
    Hot(Vec<usize>),
}

/// Dispatches one loss evaluation. KL against hard one-hot labels reduces
/// exactly to the cross-entropy form (the zero-temperature limit), which is
/// what merged multi-game training exercises.
fn batch_loss(
    kind: LossKind,
    tau: f64,
    labels: &BatchLabels,
    q: &Tensor,
) -> Result<(f64, Tensor)> {
    match (kind, labels) {
        (LossKind::Mse, BatchLabels::Q(t)) => loss_mse(t, q),
        (LossKind::Nll, BatchLabels::Q(t)) => loss_nll(t, q),
        (LossKind::Kl, BatchLabels::Q(t)) => loss_kl(t, q, tau),
        (LossKind::Nll, BatchLabels::Hot(t)) | (LossKind::Kl, BatchLabels::Hot(t)) => {
            loss_nll_onehot(t, q)
        }
        (LossKind::Mse, BatchLabels::Hot(_)) => Err(Error::usage(
            "mse regression needs full Q-vector labels, dataset has one-hot labels".to_string(),
        )),
    }
}

#[derive(Clone, Debug)]
pub struct StudentConfig {
    pub loss: LossKind,
    pub tau: f64,
    /// Spike-sparsity penalty weight.
    pub eta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Training batches in offline mode.
    pub batches: u64,
    /// Online mode: one training batch per this many generated frames.
    pub train_every: u64,
    /// Online mode: total frames of teacher play.
    pub gen_frames: u64,
    pub gen_epsilon: f64,
    pub buffer_capacity: usize,
    /// Thermometer levels per input channel.
    pub levels: usize,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub eval_workers: usize,
    pub log_every: u64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            loss: LossKind::Kl,
            tau: DEFAULT_TAU,
            eta: 1e-4,
            lr: 20.0,
            momentum: 0.9,
            batch: 32,
            batches: 50_000,
            train_every: 4,
            gen_frames: 200_000,
            gen_epsilon: 0.1,
            buffer_capacity: 200_000,
            levels: 4,
            eval_interval: 500,
            eval_episodes: 30,
            eval_workers: 1,
            log_every: 50,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("student config: {what}")))
            }
        };
        check(self.tau > 0.0, "temperature must be positive")?;
        check(self.eta >= 0.0, "sparsity weight must be non-negative")?;
        check(self.lr > 0.0, "learning rate must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must lie in [0,1)")?;
        check(self.batch > 0, "batch size must be positive")?;
        check(self.batches > 0, "batch budget must be positive")?;
        check(self.train_every > 0, "train interval must be positive")?;
        check((0.0..=1.0).contains(&self.gen_epsilon), "generation epsilon must lie in [0,1]")?;
        check(self.buffer_capacity > 0, "buffer capacity must be positive")?;
        check(self.levels > 0, "transduction levels must be positive")?;
        check(self.eval_interval > 0, "eval interval must be positive")?;
        check(self.eval_episodes > 0, "eval episodes must be positive")?;
        check(self.eval_workers > 0, "eval workers must be positive")?;
        check(self.log_every > 0, "log interval must be positive")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudentMetricsRow {
    pub batch: u64,
    pub loss: f64,
    pub eval_return: Option<f64>,
    pub normalized_pct: Option<f64>,
}

#[derive(Debug)]
pub struct StudentReport {
    pub rows: Vec<StudentMetricsRow>,
    pub batches_run: u64,
    /// Mean greedy return from the last periodic evaluation, if any ran.
    pub final_eval: Option<f64>,
}

fn check_buffer_fits(spec: &NetworkSpec, buffer: &DistillBuffer) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::usage("training from an empty distill buffer".to_string()));
    }
    if spec.input_shape != buffer.input_shape() {
        return Err(Error::usage(format!(
            "network expects input {:?}, dataset provides {:?}",
            spec.input_shape,
            buffer.input_shape()
        )));
    }
    if spec.actions != buffer.actions {
        return Err(Error::usage(format!(
            "network has {} actions, dataset has {}",
            spec.actions, buffer.actions
        )));
    }
    Ok(())
}

/// Expands sampled rows into a float input batch plus matching labels.
fn assemble_batch(buffer: &DistillBuffer, indices: &[usize]) -> (Tensor, BatchLabels) {
    let [c, h, w] = buffer.input_shape();
    let n = indices.len();
    let row_len = c * h * w;
    let mut input = Tensor::zeros(&[n, c, h, w]);
    let id = input.data_mut();
    for (i, &idx) in indices.iter().enumerate() {
        let bits = buffer.state_bits(idx);
        for (dst, b) in id[i * row_len..(i + 1) * row_len].iter_mut().zip(bits) {
            *dst = b as f64;
        }
    }
    let labels = match buffer.label_kind {
        LabelKind::QVec => {
            let mut t = Tensor::zeros(&[n, buffer.actions]);
            for (i, &idx) in indices.iter().enumerate() {
                if let Label::QVec(q) = &buffer.get(idx).label {
                    t.row_mut(i).copy_from_slice(q);
                }
            }
            BatchLabels::Q(t)
        }
        LabelKind::OneHot => BatchLabels::Hot(
            indices
                .iter()
                .map(|&idx| match buffer.get(idx).label {
                    Label::OneHot(a) => a,
                    Label::QVec(_) => unreachable!("label kind enforced on push"),
                })
                .collect(),
        ),
    };
    (input, labels)
}

/// Per-family scales applied to the shared learning rate. One global rate
/// cannot serve all three parameter families at once: batch-norm affine
/// grads accumulate over batch x spatial sums (hundreds of terms), readout
/// grads over the batch, and proxy grads arrive through the bounded
/// surrogate window. Left unscaled, the affine pair blows past the
/// surrogate's support within a few hundred batches, after which every
/// upstream gradient is exactly zero and the layer never recovers. The
/// affine scale is zero: with gamma/beta pinned at identity the normalized
/// pre-activations keep most of their mass inside the surrogate window for
/// the whole run, and the next layer's normalizer absorbs any shift the
/// affine pair would have provided.
const PROXY_LR_SCALE: f64 = 0.15;
const BN_AFFINE_LR_SCALE: f64 = 0.0;
const READOUT_LR_SCALE: f64 = 0.0015;
/// The learning rate decays linearly to this fraction of its initial value
/// over the planned batch budget.
const LR_DECAY_FLOOR: f64 = 0.1;

fn scale_grad_families(grads: &mut StudentGrads) {
    for t in &mut grads.proxy {
        t.scale(PROXY_LR_SCALE);
    }
    for v in grads.gamma.iter_mut().chain(grads.beta.iter_mut()) {
        for g in v.iter_mut() {
            *g *= BN_AFFINE_LR_SCALE;
        }
    }
    grads.readout_w.scale(READOUT_LR_SCALE);
    for g in &mut grads.readout_b {
        *g *= READOUT_LR_SCALE;
    }
}

fn decayed_lr(base: f64, batch_idx: u64, planned: u64) -> f64 {
    if planned == 0 {
        return base;
    }
    let t = (batch_idx.saturating_sub(1)) as f64 / planned as f64;
    base * (1.0 - (1.0 - LR_DECAY_FLOOR) * t)
}

/// One SGD step on one sampled batch; returns the mean per-sample loss
/// including the sparsity penalty.
fn train_one_batch(
    net: &mut StudentNetwork,
    buffer: &DistillBuffer,
    cfg: &StudentConfig,
    batch_idx: u64,
    planned_batches: u64,
    sample_rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let indices = buffer.sample_indices(sample_rng, cfg.batch);
    let (input, labels) = assemble_batch(buffer, &indices);
    let cache = net.forward_train(&input, Activation::Binary)?;
    let (loss_sum, mut grad_q) = batch_loss(cfg.loss, cfg.tau, &labels, &cache.q)?;
    // batch-mean scaling keeps the step size independent of batch size
    let inv_n = 1.0 / cfg.batch as f64;
    grad_q.scale(inv_n);
    let sparsity = net.sparsity_loss(&cache);
    let mut grads = net.backward_train(&cache, &grad_q)?;
    scale_grad_families(&mut grads);
    net.sgd_momentum_step(&grads, decayed_lr(cfg.lr, batch_idx, planned_batches), cfg.momentum);
    Ok(loss_sum * inv_n + sparsity)
}

struct MetricsSink<'a> {
    rows: Vec<StudentMetricsRow>,
    cfg: &'a StudentConfig,
    eval_env: Option<&'a EnvSpec>,
    teacher_mean: Option<f64>,
    loss_acc: f64,
    loss_count: u64,
    final_eval: Option<f64>,
}

impl<'a> MetricsSink<'a> {
    fn new(cfg: &'a StudentConfig, eval_env: Option<&'a EnvSpec>, teacher_mean: Option<f64>) -> Self {
        MetricsSink { rows: Vec::new(), cfg, eval_env, teacher_mean, loss_acc: 0.0, loss_count: 0, final_eval: None }
    }

    fn record(&mut self, net: &StudentNetwork, batch: u64, loss: f64, seed: u64) -> Result<()> {
        self.loss_acc += loss;
        self.loss_count += 1;
        let log_due = batch % self.cfg.log_every == 0;
        let eval_due = self.eval_env.is_some() && batch % self.cfg.eval_interval == 0;
        if !log_due && !eval_due {
            return Ok(());
        }
        let mean_loss = self.loss_acc / self.loss_count as f64;
        self.loss_acc = 0.0;
        self.loss_count = 0;
        let eval_return = match (eval_due, self.eval_env) {
            (true, Some(env)) => {
                let mean = evaluate_student(
                    net,
                    env,
                    self.cfg.levels,
                    self.cfg.eval_episodes,
                    seed,
                    self.cfg.eval_workers,
                )?;
                self.final_eval = Some(mean);
                Some(mean)
            }
            _ => None,
        };
        let normalized_pct = match (eval_return, self.teacher_mean) {
            (Some(s), Some(t)) if t > 0.0 => Some(100.0 * s / t),
            _ => None,
        };
        self.rows.push(StudentMetricsRow { batch, loss: mean_loss, eval_return, normalized_pct });
        Ok(())
    }
}

/// Offline distillation: SGD with momentum over batches sampled uniformly
/// from a frozen dataset, with the sparsity penalty folded into the loss
/// and periodic greedy evaluation through the binary inference path (the
/// one the deployed network reproduces bit-exactly).
pub fn train_student(
    spec: &NetworkSpec,
    buffer: &DistillBuffer,
    cfg: &StudentConfig,
    seed: u64,
    eval_env: Option<&EnvSpec>,
    teacher_mean: Option<f64>,
) -> Result<(StudentNetwork, StudentReport)> {
    cfg.validate()?;
    check_buffer_fits(spec, buffer)?;
    let mut net = StudentNetwork::new(
        spec.clone(),
        cfg.eta,
        &mut rng::stream(seed, rng::streams::STUDENT_INIT),
    )?;
    let mut sample_rng = rng::stream(seed, rng::streams::DISTILL_SAMPLE);
    let mut sink = MetricsSink::new(cfg, eval_env, teacher_mean);
    for b in 1..=cfg.batches {
        let loss = train_one_batch(&mut net, buffer, cfg, b, cfg.batches, &mut sample_rng)?;
        sink.record(&net, b, loss, seed)?;
    }
    Ok((net, StudentReport { rows: sink.rows, batches_run: cfg.batches, final_eval: sink.final_eval }))
}

/// Online distillation: the teacher plays epsilon-greedily, every frame's
/// labeled state lands in the ring buffer, and the student trains on one
/// batch per `train_every` frames once a full batch is available.
pub fn train_student_online(
    spec: &NetworkSpec,
    teacher: &TeacherNetwork,
    env_spec: &EnvSpec,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<(StudentNetwork, DistillBuffer, StudentReport)> {
    cfg.validate()?;
    let obs_shape = env_spec.obs_shape()?;
    if obs_shape != teacher.input_shape {
        return Err(Error::usage(format!(
            "teacher expects {:?} observations, environment yields {obs_shape:?}",
            teacher.input_shape
        )));
    }
    let mut buf = DistillBuffer::new(
        vec![env_spec.name.clone()],
        teacher.actions,
        obs_shape,
        cfg.levels,
        LabelKind::QVec,
        cfg.buffer_capacity,
    )?;
    check_buffer_fits_shape(spec, &buf)?;
    let mut net = StudentNetwork::new(
        spec.clone(),
        cfg.eta,
        &mut rng::stream(seed, rng::streams::STUDENT_INIT),
    )?;
    let mut gen_rng = rng::stream(seed, rng::streams::DISTILL_GEN);
    let mut sample_rng = rng::stream(seed, rng::streams::DISTILL_SAMPLE);
    let mut env = env_spec.build(seed)?;
    let mut stack = FrameStack::new();
    stack.reset(env_spec.preprocess(&env.reset()));
    let mut sink = MetricsSink::new(cfg, Some(env_spec), None);
    let mut batches = 0u64;
    for frame in 1..=cfg.gen_frames {
        let stored = StoredObs::from_tensor(&stack.observation());
        let replay_obs = stored.to_tensor();
        let q = teacher.q_values(&replay_obs)?;
        let bits = transduce_bits(&replay_obs, cfg.levels);
        let action = if gen_rng.gen::<f64>() < cfg.gen_epsilon {
            gen_rng.gen_range(0..teacher.actions)
        } else {
            argmax_tiebreak(&q)
        };
        buf.push(Some(stored), &bits, Label::QVec(q), 0);
        let step = env.step(action)?;
        if step.terminal {
            stack.reset(env_spec.preprocess(&env.reset()));
        } else {
            stack.push(env_spec.preprocess(&step.frame));
        }
        if frame % cfg.train_every == 0 && buf.len() >= cfg.batch {
            batches += 1;
            let planned = cfg.gen_frames / cfg.train_every;
            let loss = train_one_batch(&mut net, &buf, cfg, batches, planned, &mut sample_rng)?;
            sink.record(&net, batches, loss, seed)?;
        }
    }
    Ok((net, buf, StudentReport { rows: sink.rows, batches_run: batches, final_eval: sink.final_eval }))
}

fn check_buffer_fits_shape(spec: &NetworkSpec, buffer: &DistillBuffer) -> Result<()> {
    if spec.input_shape != buffer.input_shape() || spec.actions != buffer.actions {
        return Err(Error::usage(format!(
            "network wants input {:?} with {} actions, environment provides {:?} with {}",
            spec.input_shape,
            spec.actions,
            buffer.input_shape(),
            buffer.actions
        )));
    }
    Ok(())
}

/// Deterministic greedy rollouts shared by every student-side evaluator:
/// episode `i` always plays the environment seeded `eval_base + i`, split
/// across workers without affecting the result.
fn mean_greedy_return<P>(
    policy: &P,
    env_spec: &EnvSpec,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<f64>
where
    P: Fn(&Tensor) -> Result<usize> + Sync,
{
    if episodes == 0 {
        return Err(Error::usage("evaluation needs at least one episode".to_string()));
    }
    let seed_of = |ep: usize| seed.wrapping_add(rng::streams::EVAL_BASE) + ep as u64;
    let rollout = |ep: usize| -> Result<f64> {
        let mut env = env_spec.build(seed_of(ep))?;
        let mut stack = FrameStack::new();
        stack.reset(env_spec.preprocess(&env.reset()));
        let mut ret = 0.0;
        loop {
            let step = env.step(policy(&stack.observation())?)?;
            ret += step.reward;
            if step.terminal {
                return Ok(ret);
            }
            stack.push(env_spec.preprocess(&step.frame));
        }
    };
    let total = if workers <= 1 {
        let mut sum = 0.0;
        for ep in 0..episodes {
            sum += rollout(ep)?;
        }
        sum
    } else {
        let partials = std::thread::scope(|scope| {
            let rollout = &rollout;
            let handles: Vec<_> = (0..workers.min(episodes))
                .map(|w| {
                    scope.spawn(move || {
                        let mut sum = 0.0;
                        for ep in (w..episodes).step_by(workers) {
                            sum += rollout(ep)?;
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
    Ok(total / episodes as f64)
}

/// Mean greedy return of the student through its float binary-inference
/// path (bit-equivalent to the deployed network).
pub fn evaluate_student(
    net: &StudentNetwork,
    env_spec: &EnvSpec,
    levels: usize,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    let policy =
        |obs: &Tensor| -> Result<usize> { Ok(argmax_tiebreak(&net.q_values(&transduce(obs, levels))?)) };
    mean_greedy_return(&policy, env_spec, episodes, seed, workers)
}

/// Mean greedy return of the deployed integer network.
pub fn evaluate_deployed(
    dn: &DeployedNetwork,
    env_spec: &EnvSpec,
    levels: usize,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<f64> {
    let policy = |obs: &Tensor| -> Result<usize> { dn.act(&transduce_bits(obs, levels)) };
    mean_greedy_return(&policy, env_spec, episodes, seed, workers)
}

/// Student score as a percentage of the teacher's, both measured on the
/// same seeded episode set. When the teacher's mean return is not positive
/// the ratio is meaningless and `pct` is absent; report the raw means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedScore {
    pub student_mean: f64,
    pub teacher_mean: f64,
    pub pct: Option<f64>,
}

impl NormalizedScore {
    pub fn from_means(student_mean: f64, teacher_mean: f64) -> Self {
        let pct =
            (teacher_mean > 0.0).then(|| 100.0 * student_mean / teacher_mean);
        NormalizedScore { student_mean, teacher_mean, pct }
    }

    pub fn summary(&self) -> String {
        match self.pct {
            Some(p) => format!(
                "{:.2}% of teacher (student {:.4}, teacher {:.4})",
                p, self.student_mean, self.teacher_mean
            ),
            None => format!(
                "teacher mean not positive; raw returns: student {:.4}, teacher {:.4}",
                self.student_mean, self.teacher_mean
            ),
        }
    }
}

/// Evaluates student and teacher on the identical episode set and reports
/// the normalized percentage.
pub fn evaluate_normalized(
    student: &StudentNetwork,
    teacher: &TeacherNetwork,
    env_spec: &EnvSpec,
    levels: usize,
    episodes: usize,
    seed: u64,
    workers: usize,
) -> Result<NormalizedScore> {
    if episodes == 0 {
        return Err(Error::usage("evaluation needs at least one episode".to_string()));
    }
    let student_mean = evaluate_student(student, env_spec, levels, episodes, seed, workers)?;
    let teacher_mean = evaluate_teacher(teacher, env_spec, episodes, seed, workers)?;
    Ok(NormalizedScore::from_means(student_mean, teacher_mean))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub game: String,
    pub tau: f64,
    pub score: NormalizedScore,
}

/// Trains one KL student per (game, temperature) pair under a shared
/// architecture and budget; the per-game dataset is generated once and
/// reused across the temperature grid.
pub fn temperature_sweep(
    tasks: &[(EnvSpec, &TeacherNetwork)],
    taus: &[f64],
    spec: &NetworkSpec,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::with_capacity(tasks.len() * taus.len());
    for (env_spec, teacher) in tasks {
        let buffer = generate_buffer(
            teacher,
            env_spec,
            cfg.gen_epsilon,
            cfg.gen_frames as usize,
            cfg.levels,
            cfg.buffer_capacity,
            seed,
        )?;
        let teacher_mean =
            evaluate_teacher(teacher, env_spec, cfg.eval_episodes, seed, cfg.eval_workers)?;
        for &tau in taus {
            let mut cell_cfg = cfg.clone();
            cell_cfg.loss = LossKind::Kl;
            cell_cfg.tau = tau;
            let (net, _) = train_student(spec, &buffer, &cell_cfg, seed, None, None)?;
            let student_mean = evaluate_student(
                &net,
                env_spec,
                cfg.levels,
                cfg.eval_episodes,
                seed,
                cfg.eval_workers,
            )?;
            cells.push(SweepCell {
                game: env_spec.name.clone(),
                tau,
                score: NormalizedScore::from_means(student_mean, teacher_mean),
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;
    use rand::SeedableRng;

    fn catch_spec() -> EnvSpec {
        EnvSpec { name: "catch".into(), grid: 12, render_scale: 2, resize: None }
    }

    fn tiny_teacher(seed: u64) -> TeacherNetwork {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TeacherNetwork::with_dims([4, 24, 24], 3, [4, 4, 4], 8, &mut rng).unwrap()
    }

    fn rand_logits(rng: &mut ChaCha12Rng, n: usize, a: usize, span: f64) -> Tensor {
        Tensor::new(&[n, a], (0..n * a).map(|_| rng.gen_range(-span..span)).collect()).unwrap()
    }

    #[test]
    fn mse_pinned_values_and_finite_differences() {
        let t = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let (zero, grad) = loss_mse(&t, &t).unwrap();
        assert_eq!(zero, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
        let s = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (one, _) = loss_mse(&t, &s).unwrap();
        assert_eq!(one, 1.0);

        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let t = rand_logits(&mut rng, 4, 3, 2.0);
        let mut s = rand_logits(&mut rng, 4, 3, 2.0);
        let (_, grad) = loss_mse(&t, &s).unwrap();
        let eps = 1e-4;
        for i in 0..s.len() {
            let orig = s.data()[i];
            s.data_mut()[i] = orig + eps;
            let up = loss_mse(&t, &s).unwrap().0;
            s.data_mut()[i] = orig - eps;
            let down = loss_mse(&t, &s).unwrap().0;
            s.data_mut()[i] = orig;
            assert!(((up - down) / (2.0 * eps) - grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn nll_uniform_logits_give_log_action_count() {
        let t = Tensor::new(&[2, 3], vec![0.9, 0.1, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let s = Tensor::zeros(&[2, 3]);
        let (loss, _) = loss_nll(&t, &s).unwrap();
        assert!((loss - 2.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_is_monotone_in_correct_logit_and_ties_break_low() {
        let t = Tensor::new(&[1, 3], vec![5.0, 5.0, 1.0]).unwrap();
        // tie between actions 0 and 1 resolves to 0
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let s = Tensor::new(&[1, 3], vec![margin, 0.0, 0.0]).unwrap();
            let (loss, _) = loss_nll(&t, &s).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn nll_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let t = rand_logits(&mut rng, 5, 4, 3.0);
        let mut s = rand_logits(&mut rng, 5, 4, 3.0);
        let (_, grad) = loss_nll(&t, &s).unwrap();
        for i in 0..5 {
            let sm = softmax(s.row(i));
            let target = argmax_tiebreak(t.row(i));
            for a in 0..4 {
                let want = sm[a] - if a == target { 1.0 } else { 0.0 };
                assert!((grad.row(i)[a] - want).abs() < 1e-14);
            }
        }
        let eps = 1e-5;
        for i in 0..s.len() {
            let orig = s.data()[i];
            s.data_mut()[i] = orig + eps;
            let up = loss_nll(&t, &s).unwrap().0;
            s.data_mut()[i] = orig - eps;
            let down = loss_nll(&t, &s).unwrap().0;
            s.data_mut()[i] = orig;
            assert!(((up - down) / (2.0 * eps) - grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let t = rand_logits(&mut rng, 6, 4, 2.0);
        let (loss, grad) = loss_kl(&t, &t, 1.0).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn kl_rejects_non_positive_temperature() {
        let t = Tensor::zeros(&[1, 2]);
        assert!(matches!(loss_kl(&t, &t, 0.0), Err(Error::Usage(_))));
        assert!(matches!(loss_kl(&t, &t, -0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_is_non_negative_on_random_pairs() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        for _ in 0..100_000 {
            let t = rand_logits(&mut rng, 1, 4, 4.0);
            let s = rand_logits(&mut rng, 1, 4, 4.0);
            let (loss, _) = loss_kl(&t, &s, 1.0).unwrap();
            assert!(loss >= 0.0, "negative KL {loss}");
        }
    }

    /// With q_T=(1,0) at tau=0.01 the tempered teacher is within 4e-44 of a
    /// point mass, so the loss collapses to -ln softmax(2,0)[0]; the exact
    /// value ln(1+e^2) - 2 absorbs corrections far below 1e-12.
    #[test]
    fn kl_matches_extended_precision_oracle_at_low_temperature() {
        let t = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let s = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        let (loss, grad) = loss_kl(&t, &s, 0.01).unwrap();
        let oracle = (1.0 + 2.0f64.exp()).ln() - 2.0;
        assert!((loss - oracle).abs() < 1e-12, "loss {loss} vs {oracle}");
        let eps = 1e-6;
        for i in 0..2 {
            let mut sp = s.clone();
            sp.data_mut()[i] += eps;
            let up = loss_kl(&t, &sp, 0.01).unwrap().0;
            sp.data_mut()[i] -= 2.0 * eps;
            let down = loss_kl(&t, &sp, 0.01).unwrap().0;
            assert!(((up - down) / (2.0 * eps) - grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let t = rand_logits(&mut rng, 4, 3, 2.0);
        let mut s = rand_logits(&mut rng, 4, 3, 2.0);
        let (_, grad) = loss_kl(&t, &s, 0.37).unwrap();
        let eps = 1e-5;
        for i in 0..s.len() {
            let orig = s.data()[i];
            s.data_mut()[i] = orig + eps;
            let up = loss_kl(&t, &s, 0.37).unwrap().0;
            s.data_mut()[i] = orig - eps;
            let down = loss_kl(&t, &s, 0.37).unwrap().0;
            s.data_mut()[i] = orig;
            assert!(((up - down) / (2.0 * eps) - grad.data()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_gradient_vanishes_at_the_tempered_optimum() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let t = rand_logits(&mut rng, 3, 4, 1.5);
        let tau = 0.5;
        let opt = t.map(|v| v / tau);
        let (loss, grad) = loss_kl(&t, &opt, tau).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|&g| g.abs() < 1e-15));
    }

    /// For one-hot teacher vectors at vanishing temperature the tempered
    /// distribution underflows to an exact point mass, so KL and NLL order
    /// candidate students identically.
    #[test]
    fn kl_at_vanishing_temperature_orders_like_nll_on_onehot_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut t = Tensor::zeros(&[6, 3]);
        for i in 0..6 {
            t.row_mut(i)[i % 3] = 1.0;
        }
        let candidates: Vec<Tensor> = (0..5).map(|_| rand_logits(&mut rng, 6, 3, 3.0)).collect();
        let kl: Vec<f64> =
            candidates.iter().map(|c| loss_kl(&t, c, 1e-3).unwrap().0).collect();
        let nll: Vec<f64> = candidates.iter().map(|c| loss_nll(&t, c).unwrap().0).collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
            idx
        };
        assert_eq!(order(&kl), order(&nll));
        for (k, n) in kl.iter().zip(&nll) {
            assert!((k - n).abs() < 1e-9, "kl {k} vs nll {n}");
        }
    }

    #[test]
    fn generated_buffer_length_and_exact_replay_consistency() {
        let teacher = tiny_teacher(8);
        let spec = catch_spec();
        let buf = generate_buffer(&teacher, &spec, 0.05, 300, 4, 100_000, 9).unwrap();
        assert_eq!(buf.len(), 300);
        assert_eq!(buf.input_shape(), [16, 24, 24]);
        let capped = generate_buffer(&teacher, &spec, 0.05, 300, 4, 120, 9).unwrap();
        assert_eq!(capped.len(), 120);
        for i in (0..buf.len()).step_by(37) {
            let s = buf.get(i);
            let replayed = teacher.q_values(&s.raw.as_ref().unwrap().to_tensor()).unwrap();
            match &s.label {
                Label::QVec(q) => assert_eq!(&replayed, q, "label drift at sample {i}"),
                _ => unreachable!(),
            }
            let expect_bits = transduce_bits(&s.raw.as_ref().unwrap().to_tensor(), 4);
            assert_eq!(buf.state_bits(i), expect_bits);
        }
    }

    #[test]
    fn zero_epsilon_generation_follows_the_greedy_trace() {
        let teacher = tiny_teacher(10);
        let spec = catch_spec();
        let buf = generate_buffer(&teacher, &spec, 0.0, 60, 4, 1_000, 11).unwrap();
        // replay the environment under pure argmax and compare every label
        let mut env = spec.build(11).unwrap();
        let mut stack = FrameStack::new();
        stack.reset(spec.preprocess(&env.reset()));
        for i in 0..60 {
            let stored = StoredObs::from_tensor(&stack.observation());
            let q = teacher.q_values(&stored.to_tensor()).unwrap();
            match &buf.get(i).label {
                Label::QVec(got) => assert_eq!(got, &q, "divergence at frame {i}"),
                _ => unreachable!(),
            }
            let step = env.step(argmax_tiebreak(&q)).unwrap();
            if step.terminal {
                stack.reset(spec.preprocess(&env.reset()));
            } else {
                stack.push(spec.preprocess(&step.frame));
            }
        }
        let again = generate_buffer(&teacher, &spec, 0.0, 60, 4, 1_000, 11).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn merge_preserves_lengths_frequencies_and_rejects_mismatches() {
        let teacher = tiny_teacher(12);
        let catch = catch_spec();
        let pong = EnvSpec { name: "minipong".into(), grid: 12, render_scale: 2, resize: None };
        let a = generate_buffer(&teacher, &catch, 0.1, 200, 4, 1_000, 13).unwrap().to_onehot();
        let b = generate_buffer(&teacher, &pong, 0.1, 150, 4, 1_000, 13).unwrap().to_onehot();
        let merged = merge_multigame(&[&a, &b], 14).unwrap();
        assert_eq!(merged.len(), 350);
        assert_eq!(merged.games, vec!["catch".to_string(), "minipong".to_string()]);
        let mut freq = std::collections::HashMap::new();
        for i in 0..merged.len() {
            let s = merged.get(i);
            let a = match s.label {
                Label::OneHot(a) => a,
                _ => unreachable!(),
            };
            *freq.entry((s.game, a)).or_insert(0usize) += 1;
        }
        let mut want = std::collections::HashMap::new();
        for (g, buf) in [(0u16, &a), (1u16, &b)] {
            for i in 0..buf.len() {
                if let Label::OneHot(act) = buf.get(i).label {
                    *want.entry((g, act)).or_insert(0usize) += 1;
                }
            }
        }
        assert_eq!(freq, want);

        // merging a single dataset is a pure shuffle of it
        let solo = merge_multigame(&[&a], 15).unwrap();
        assert_eq!(solo.len(), a.len());
        let mut sorted_bits: Vec<Vec<u8>> = (0..solo.len()).map(|i| solo.get(i).bits.clone()).collect();
        let mut orig_bits: Vec<Vec<u8>> = (0..a.len()).map(|i| a.get(i).bits.clone()).collect();
        sorted_bits.sort();
        orig_bits.sort();
        assert_eq!(sorted_bits, orig_bits);

        // action-count mismatch refuses
        let mut two_action = a.clone();
        two_action.actions = 2;
        assert!(matches!(merge_multigame(&[&a, &two_action], 16), Err(Error::Usage(_))));
        // q-vector datasets refuse
        let qvec = generate_buffer(&teacher, &catch, 0.1, 10, 4, 100, 17).unwrap();
        assert!(matches!(merge_multigame(&[&qvec], 18), Err(Error::Usage(_))));
    }

    #[test]
    fn dataset_file_round_trip_is_byte_identical() {
        let teacher = tiny_teacher(19);
        let buf = generate_buffer(&teacher, &catch_spec(), 0.1, 50, 4, 1_000, 20).unwrap();
        let bytes = buf.to_bytes();
        let back = DistillBuffer::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.len(), buf.len());
        assert_eq!(back.games, buf.games);
        for i in 0..buf.len() {
            assert_eq!(back.get(i).label, buf.get(i).label);
            assert_eq!(back.state_bits(i), buf.state_bits(i));
            assert!(back.get(i).raw.is_none());
        }
        let hot = buf.to_onehot();
        let hot_back = DistillBuffer::from_bytes(&hot.to_bytes()).unwrap();
        assert_eq!(hot_back.to_bytes(), hot.to_bytes());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(DistillBuffer::from_bytes(&bad), Err(Error::Corrupt(_))));
        assert!(matches!(
            DistillBuffer::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corrupt(_))
        ));
        let mut junk = bytes.clone();
        junk.push(0);
        assert!(matches!(DistillBuffer::from_bytes(&junk), Err(Error::Corrupt(_))));
    }

    #[test]
    fn offline_training_logs_finite_losses_and_is_deterministic() {
        let teacher = tiny_teacher(21);
        let spec = catch_spec();
        let buf = generate_buffer(&teacher, &spec, 0.05, 600, 4, 10_000, 22).unwrap();
        let arch = NetworkSpec::desk(1).unwrap();
        let cfg = StudentConfig {
            batches: 60,
            log_every: 10,
            eval_interval: 30,
            eval_episodes: 3,
            ..StudentConfig::default()
        };
        let (net1, rep1) = train_student(&arch, &buf, &cfg, 23, Some(&spec), Some(1.0)).unwrap();
        assert!(!rep1.rows.is_empty());
        for row in &rep1.rows {
            assert!(row.loss.is_finite(), "non-finite loss at batch {}", row.batch);
        }
        assert!(rep1.rows.iter().any(|r| r.eval_return.is_some()));
        assert!(rep1.final_eval.is_some());
        let (net2, rep2) = train_student(&arch, &buf, &cfg, 23, Some(&spec), Some(1.0)).unwrap();
        assert_eq!(net1.to_bytes(), net2.to_bytes());
        assert_eq!(rep1.rows, rep2.rows);
    }

    #[test]
    fn student_memorizes_a_single_repeated_sample() {
        let teacher = tiny_teacher(24);
        let spec = catch_spec();
        let buf = generate_buffer(&teacher, &spec, 0.0, 1, 4, 1, 25).unwrap();
        assert_eq!(buf.len(), 1);
        let target = 2usize;
        let mut solo = buf.clone();
        solo.label_kind = LabelKind::OneHot;
        solo.samples[0].label = Label::OneHot(target);
        let arch = NetworkSpec::desk(1).unwrap();
        let cfg = StudentConfig {
            loss: LossKind::Nll,
            batches: 200,
            log_every: 200,
            ..StudentConfig::default()
        };
        let (net, _) = train_student(&arch, &solo, &cfg, 26, None, None).unwrap();
        let bits = solo.state_bits(0);
        let input = Tensor::new(&[16, 24, 24], bits.iter().map(|&b| b as f64).collect()).unwrap();
        let q = net.q_values(&input).unwrap();
        assert_eq!(argmax_tiebreak(&q), target, "q {q:?}");
    }

    #[test]
    fn online_training_interleaves_generation_and_batches() {
        let teacher = tiny_teacher(27);
        let spec = catch_spec();
        let arch = NetworkSpec::desk(1).unwrap();
        let cfg = StudentConfig {
            gen_frames: 400,
            train_every: 4,
            batch: 16,
            log_every: 25,
            eval_interval: 1_000_000,
            ..StudentConfig::default()
        };
        let (net1, buf, rep) = train_student_online(&arch, &teacher, &spec, &cfg, 28).unwrap();
        assert_eq!(buf.len(), 400);
        // one batch per 4 frames once 16 samples exist: frames 16..=400
        assert_eq!(rep.batches_run, (400 - 16) / 4 + 1);
        for row in &rep.rows {
            assert!(row.loss.is_finite());
        }
        let (net2, _, _) = train_student_online(&arch, &teacher, &spec, &cfg, 28).unwrap();
        assert_eq!(net1.to_bytes(), net2.to_bytes());
    }

    #[test]
    fn normalized_score_handles_zero_and_negative_teacher_means() {
        let s = NormalizedScore::from_means(0.9, 1.0);
        assert_eq!(s.pct, Some(90.0));
        assert!(s.summary().contains("90.00%"));
        let s = NormalizedScore::from_means(0.5, 0.0);
        assert_eq!(s.pct, None);
        assert!(s.summary().contains("raw returns"));
        let s = NormalizedScore::from_means(-0.2, -0.5);
        assert_eq!(s.pct, None);
    }

    #[test]
    fn evaluation_rejects_zero_episodes_and_splits_across_workers() {
        let teacher = tiny_teacher(29);
        let spec = catch_spec();
        let buf = generate_buffer(&teacher, &spec, 0.05, 200, 4, 1_000, 30).unwrap();
        let arch = NetworkSpec::desk(1).unwrap();
        let cfg =
            StudentConfig { batches: 10, log_every: 10, ..StudentConfig::default() };
        let (net, _) = train_student(&arch, &buf, &cfg, 31, None, None).unwrap();
        assert!(matches!(
            evaluate_student(&net, &spec, 4, 0, 32, 1),
            Err(Error::Usage(_))
        ));
        let serial = evaluate_student(&net, &spec, 4, 9, 32, 1).unwrap();
        let threaded = evaluate_student(&net, &spec, 4, 9, 32, 4).unwrap();
        assert_eq!(serial, threaded);
        assert!(matches!(
            evaluate_normalized(&net, &teacher, &spec, 4, 0, 32, 1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn temperature_sweep_covers_the_grid_deterministically() {
        let teacher = tiny_teacher(33);
        let spec = catch_spec();
        let arch = NetworkSpec::desk(1).unwrap();
        let cfg = StudentConfig {
            batches: 30,
            gen_frames: 200,
            eval_episodes: 3,
            log_every: 30,
            ..StudentConfig::default()
        };
        let tasks = [(spec, &teacher)];
        let taus = [0.05, 0.01];
        let table = temperature_sweep(&tasks, &taus, &arch, &cfg, 34).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].tau, 0.05);
        assert_eq!(table[1].tau, 0.01);
        assert!(table.iter().all(|c| c.game == "catch"));
        let again = temperature_sweep(&tasks, &taus, &arch, &cfg, 34).unwrap();
        assert_eq!(table, again);
    }
}
