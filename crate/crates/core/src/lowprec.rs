//! Constrained student networks: ternary weights trained through
//! full-precision shadow proxies, binary step activations with a triangular
//! surrogate gradient, batch norm per layer, a spike-sparsity penalty, and
//! a full-precision linear readout.
//!
//! The forward pass has two activation modes. `Binary` is the real network:
//! a unit fires 1 iff its batch-normalized response clears the threshold.
//! `Relaxed` replaces the step with the piecewise-quadratic antiderivative
//! of the surrogate, making the whole network differentiable so that the
//! hand-written backward pass (which both modes share) can be checked
//! against finite differences. Gradients flow to the shadow proxies by the
//! straight-through rule: d(loss)/d(proxy) := d(loss)/d(ternary weight).

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::batchnorm::{BatchNorm, BnBatchStats};
use crate::conv::{conv2d, conv2d_backward};
use crate::error::{Error, Result};
use crate::netspec::{LayerSpec, NetworkSpec};
use crate::tensor::{linear_backward, linear_forward, TensorBase};
use crate::{bin_io, Real};

pub type Tensor = TensorBase<Real>;

/// Quantize one shadow weight: clip to [-1,1], then round half away from
/// zero. 0.5 maps to 1 and -0.5 to -1; idempotent on {-1,0,1}.
pub fn ternarize(w_h: f64) -> f64 {
    w_h.clamp(-1.0, 1.0).round()
}

pub fn ternarize_tensor(t: &Tensor) -> Tensor {
    t.map(ternarize)
}

/// Threshold activation; the boundary fires. This exact convention is what
/// the deployment fold reproduces with integer thresholds.
pub fn binary_step(r: f64, theta: f64) -> f64 {
    if r >= theta {
        1.0
    } else {
        0.0
    }
}

/// Triangular stand-in for the step function's derivative.
pub fn step_surrogate_grad(r: f64) -> f64 {
    (1.0 - r.abs()).max(0.0)
}

/// Antiderivative of `step_surrogate_grad`, used as the forward activation
/// in `Activation::Relaxed`. C1-smooth ramp from 0 (r <= -1) to 1 (r >= 1);
/// its exact derivative is the surrogate, which is what makes finite
/// differences of the relaxed network a valid oracle for the backward pass.
pub fn step_relaxed(r: f64) -> f64 {
    if r <= -1.0 {
        0.0
    } else if r <= 0.0 {
        (r + 1.0) * (r + 1.0) / 2.0
    } else if r < 1.0 {
        0.5 + r - r * r / 2.0
    } else {
        1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Binary,
    Relaxed,
}

/// One constrained convolution layer.
#[derive(Clone, Debug)]
pub struct QuantLayer {
    pub geom: LayerSpec,
    /// Shadow weights, kept in [-1,1] by the optimizer.
    pub proxy: Tensor,
    /// `ternarize(proxy)`, the weights actually used in forward/backward.
    pub ternary: Tensor,
    pub bn: BatchNorm<f64>,
    velocity: Tensor,
    vel_gamma: Vec<f64>,
    vel_beta: Vec<f64>,
}

impl QuantLayer {
    fn new(geom: LayerSpec, in_features: usize, rng: &mut ChaCha12Rng) -> Self {
        let shape = [geom.features, in_features / geom.groups, geom.kernel, geom.kernel];
        let n: usize = shape.iter().product();
        let proxy = Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect()).unwrap();
        let ternary = ternarize_tensor(&proxy);
        QuantLayer {
            geom,
            velocity: Tensor::zeros(&shape),
            ternary,
            proxy,
            bn: BatchNorm::new(geom.features, 0.9, 1e-5),
            vel_gamma: vec![0.0; geom.features],
            vel_beta: vec![0.0; geom.features],
        }
    }

    fn check_invariants(&self) {
        debug_assert!(self.proxy.data().iter().all(|&w| (-1.0..=1.0).contains(&w)));
        debug_assert!(self
            .ternary
            .data()
            .iter()
            .zip(self.proxy.data())
            .all(|(&t, &p)| t == ternarize(p)));
    }
}

/// Spike-sparsity penalty over a set of activation tensors (one per layer,
/// each `[N, F, H, W]`). With ybar_f the mean activation of feature f over
/// batch and spatial positions, the loss term is eta/2 * sum_f ybar_f^2 and
/// each activation of feature f receives gradient eta * ybar_f / M_f, where
/// M_f counts the activations averaged into ybar_f.
pub fn sparsity_penalty(acts: &[&Tensor], eta: f64) -> (f64, Vec<Tensor>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(acts.len());
    for t in acts {
        let mut grad = Tensor::zeros(t.shape());
        let (n, f, hw) = match *t.shape() {
            [n, f, h, w] => (n, f, h * w),
            [n, f] => (n, f, 1),
            _ => (1, t.shape()[0], t.len() / t.shape()[0]),
        };
        let m = (n * hw) as f64;
        for feat in 0..f {
            let mut ybar = 0.0;
            for b in 0..n {
                let base = (b * f + feat) * hw;
                for i in base..base + hw {
                    ybar += t.data()[i];
                }
            }
            ybar /= m;
            loss += eta / 2.0 * ybar * ybar;
            let g = eta * ybar / m;
            let gd = grad.data_mut();
            for b in 0..n {
                let base = (b * f + feat) * hw;
                for i in base..base + hw {
                    gd[i] = g;
                }
            }
        }
        grads.push(grad);
    }
    (loss, grads)
}

/// Everything the backward pass needs from one training forward pass.
pub struct ForwardCache {
    pub mode: Activation,
    step_count: u64,
    /// The network input batch.
    input: Tensor,
    /// Per layer: conv output (pre batch norm).
    pre_bn: Vec<Tensor>,
    /// Per layer: batch-normalized response r.
    pub post_bn: Vec<Tensor>,
    /// Per layer: activations y.
    pub acts: Vec<Tensor>,
    stats: Vec<BnBatchStats<f64>>,
    /// Last activations flattened to [N, D].
    readout_in: Tensor,
    /// Network output [N, actions].
    pub q: Tensor,
}

/// Gradients for every trainable parameter, shaped like the network.
pub struct StudentGrads {
    pub proxy: Vec<Tensor>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub readout_w: Tensor,
    pub readout_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StudentNetwork {
    pub spec: NetworkSpec,
    pub layers: Vec<QuantLayer>,
    /// Full-precision readout [actions, D]; the one unconstrained layer,
    /// quantized only at deployment.
    pub readout_w: Tensor,
    pub readout_b: Vec<f64>,
    readout_vw: Tensor,
    readout_vb: Vec<f64>,
    pub eta: f64,
    /// Bumped by every optimizer step; caches from before a step are stale.
    step_count: u64,
}

impl StudentNetwork {
    pub fn new(spec: NetworkSpec, eta: f64, rng: &mut ChaCha12Rng) -> Result<Self> {
        spec.validate()?;
        if eta < 0.0 {
            return Err(Error::config(format!("sparsity eta must be >= 0, got {eta}")));
        }
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, geom) in spec.layers.iter().enumerate() {
            layers.push(QuantLayer::new(*geom, spec.layer_input_features(idx), rng));
        }
        let d = spec.readout_inputs()?;
        let bound = 1.0 / (d as f64).sqrt();
        let readout_w = Tensor::new(
            &[spec.actions, d],
            (0..spec.actions * d).map(|_| rng.gen_range(-bound..=bound)).collect(),
        )?;
        let readout_b = vec![0.0; spec.actions];
        Ok(StudentNetwork {
            readout_vw: Tensor::zeros(readout_w.shape()),
            readout_vb: vec![0.0; spec.actions],
            readout_w,
            readout_b,
            layers,
            spec,
            eta,
            step_count: 0,
        })
    }

    fn check_batch_shape(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        let want = self.spec.input_shape;
        if s.len() != 4 || s[1] != want[0] || s[2] != want[1] || s[3] != want[2] || s[0] == 0 {
            return Err(Error::usage(format!(
                "input batch shape {s:?} vs spec input [N, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(s[0])
    }

    /// Training-mode forward: batch statistics for the norm, activations per
    /// `mode`. Mutates batch-norm running statistics.
    pub fn forward_train(&mut self, batch: &Tensor, mode: Activation) -> Result<ForwardCache> {
        let n = self.check_batch_shape(batch)?;
        let mut pre_bn = Vec::with_capacity(self.layers.len());
        let mut post_bn = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        let mut stats = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            let x = if idx == 0 { batch } else { &acts[idx - 1] };
            let z = conv2d(x, &layer.ternary, layer.geom.stride, layer.geom.pad, layer.geom.groups)?;
            let (r, st) = layer.bn.forward_train(&z)?;
            let y = match mode {
                Activation::Binary => r.map(|v| binary_step(v, 0.0)),
                Activation::Relaxed => r.map(step_relaxed),
            };
            pre_bn.push(z);
            post_bn.push(r);
            stats.push(st);
            acts.push(y);
        }
        let d = self.readout_w.shape()[1];
        let readout_in = acts.last().unwrap().reshape(&[n, d])?;
        let q = linear_forward(&readout_in, &self.readout_w, &self.readout_b)?;
        debug_assert!(q.all_finite(), "non-finite q values out of forward pass");
        Ok(ForwardCache {
            mode,
            step_count: self.step_count,
            input: batch.clone(),
            pre_bn,
            post_bn,
            acts,
            stats,
            readout_in,
            q,
        })
    }

    /// Inference-mode forward (running statistics, binary activations) over
    /// a batch; pure. Returns `[N, actions]` Q-values.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.eval_with_activations(batch)?.0)
    }

    /// Inference forward that also returns every layer's binary activation
    /// map; the deployment equivalence check compares these bit-for-bit.
    pub fn eval_with_activations(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let n = self.check_batch_shape(batch)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let x = if idx == 0 { batch } else { &acts[idx - 1] };
            let z = conv2d(x, &layer.ternary, layer.geom.stride, layer.geom.pad, layer.geom.groups)?;
            let r = layer.bn.forward_infer(&z)?;
            acts.push(r.map(|v| binary_step(v, 0.0)));
        }
        let d = self.readout_w.shape()[1];
        let readout_in = acts.last().unwrap().reshape(&[n, d])?;
        let q = linear_forward(&readout_in, &self.readout_w, &self.readout_b)?;
        Ok((q, acts))
    }

    /// Q-values for a single observation `[C, H, W]`.
    pub fn q_values(&self, obs: &Tensor) -> Result<Vec<f64>> {
        let s = obs.shape();
        if s.len() != 3 {
            return Err(Error::usage(format!("q_values wants [C,H,W], got {s:?}")));
        }
        let batch = obs.reshape(&[1, s[0], s[1], s[2]])?;
        Ok(self.forward_eval(&batch)?.into_data())
    }

    /// Sparsity-penalty loss term for the activations in `cache`.
    pub fn sparsity_loss(&self, cache: &ForwardCache) -> f64 {
        let acts: Vec<&Tensor> = cache.acts.iter().collect();
        sparsity_penalty(&acts, self.eta).0
    }

    /// Backpropagation through the shared backward path: surrogate at each
    /// step activation, batch-norm backward through batch statistics,
    /// convolution gradients against the ternary weights. The sparsity
    /// penalty's activation gradients are folded in here.
    pub fn backward_train(&self, cache: &ForwardCache, grad_q: &Tensor) -> Result<StudentGrads> {
        if cache.step_count != self.step_count {
            return Err(Error::usage(
                "stale forward cache: the network was updated after this forward pass".to_string(),
            ));
        }
        if grad_q.shape() != cache.q.shape() {
            return Err(Error::shape(format!(
                "grad_q shape {:?} vs q {:?}",
                grad_q.shape(),
                cache.q.shape()
            )));
        }
        let (dw_read, db_read, d_flat) =
            linear_backward(&cache.readout_in, &self.readout_w, grad_q)?;
        let acts_ref: Vec<&Tensor> = cache.acts.iter().collect();
        let (_, sparsity_grads) = sparsity_penalty(&acts_ref, self.eta);
        let mut proxy = vec![Tensor::zeros(&[0]); self.layers.len()];
        let mut gamma = Vec::with_capacity(self.layers.len());
        let mut beta = Vec::with_capacity(self.layers.len());
        let mut dy = d_flat.reshape(cache.acts.last().unwrap().shape())?;
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            dy.add_assign(&sparsity_grads[idx])?;
            // dy/dr via the triangular surrogate (both activation modes)
            let mut dr = dy;
            {
                let drd = dr.data_mut();
                for (g, &r) in drd.iter_mut().zip(cache.post_bn[idx].data()) {
                    *g *= step_surrogate_grad(r);
                }
            }
            let (dz, dg, db) = layer.bn.backward(&cache.pre_bn[idx], &cache.stats[idx], &dr)?;
            let x = if idx == 0 { &cache.input } else { &cache.acts[idx - 1] };
            let (dw, dx) = conv2d_backward(
                x,
                &layer.ternary,
                &dz,
                layer.geom.stride,
                layer.geom.pad,
                layer.geom.groups,
            )?;
            proxy[idx] = dw;
            gamma.push(dg);
            beta.push(db);
            dy = dx;
        }
        gamma.reverse();
        beta.reverse();
        Ok(StudentGrads { proxy, gamma, beta, readout_w: dw_read, readout_b: db_read })
    }

    /// SGD with momentum: v <- momentum*v + g; parameter -= lr*v. Proxies
    /// are clipped back into [-1,1] and the ternary weights re-derived; no
    /// weight decay anywhere.
    pub fn sgd_momentum_step(&mut self, grads: &StudentGrads, lr: f64, momentum: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
        for (layer, g) in self.layers.iter_mut().zip(&grads.proxy) {
            let v = layer.velocity.data_mut();
            let w = layer.proxy.data_mut();
            for i in 0..v.len() {
                v[i] = momentum * v[i] + g.data()[i];
                w[i] = (w[i] - lr * v[i]).clamp(-1.0, 1.0);
            }
            layer.ternary = ternarize_tensor(&layer.proxy);
        }
        for (idx, layer) in self.layers.iter_mut().enumerate() {
            for f in 0..layer.geom.features {
                layer.vel_gamma[f] = momentum * layer.vel_gamma[f] + grads.gamma[idx][f];
                layer.bn.gamma[f] -= lr * layer.vel_gamma[f];
                layer.vel_beta[f] = momentum * layer.vel_beta[f] + grads.beta[idx][f];
                layer.bn.beta[f] -= lr * layer.vel_beta[f];
            }
        }
        {
            let v = self.readout_vw.data_mut();
            let w = self.readout_w.data_mut();
            for i in 0..v.len() {
                v[i] = momentum * v[i] + grads.readout_w.data()[i];
                w[i] -= lr * v[i];
            }
            for i in 0..self.readout_b.len() {
                self.readout_vb[i] = momentum * self.readout_vb[i] + grads.readout_b[i];
                self.readout_b[i] -= lr * self.readout_vb[i];
            }
        }
        self.step_count += 1;
        for layer in &self.layers {
            layer.check_invariants();
        }
    }

    const MAGIC: &'static [u8; 4] = b"TSC1";
    const VERSION: u16 = 1;

    /// Serializes the trained network (spec text, shadow and ternary state
    /// via proxies, batch-norm parameters and running statistics, readout).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        bin_io::put_u16(&mut out, Self::VERSION);
        bin_io::put_str(&mut out, &self.spec.to_text());
        bin_io::put_f64(&mut out, self.eta);
        for layer in &self.layers {
            bin_io::put_tensor(&mut out, &layer.proxy);
            bin_io::put_f64_slice(&mut out, &layer.bn.gamma);
            bin_io::put_f64_slice(&mut out, &layer.bn.beta);
            bin_io::put_f64_slice(&mut out, &layer.bn.running_mean);
            bin_io::put_f64_slice(&mut out, &layer.bn.running_var);
            bin_io::put_f64(&mut out, layer.bn.momentum);
            bin_io::put_f64(&mut out, layer.bn.eps);
        }
        bin_io::put_tensor(&mut out, &self.readout_w);
        bin_io::put_f64_slice(&mut out, &self.readout_b);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bin_io::Reader::new(bytes, "student checkpoint");
        r.magic(Self::MAGIC)?;
        let version = r.u16()?;
        if version != Self::VERSION {
            return Err(Error::corrupt(format!("student checkpoint version {version}")));
        }
        let spec = NetworkSpec::from_text(&r.str()?)
            .map_err(|e| Error::corrupt(format!("student checkpoint spec: {e}")))?;
        let eta = r.f64()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, geom) in spec.layers.iter().enumerate() {
            let proxy = r.tensor()?;
            let want = [
                geom.features,
                spec.layer_input_features(idx) / geom.groups,
                geom.kernel,
                geom.kernel,
            ];
            if proxy.shape() != want {
                return Err(Error::corrupt(format!(
                    "student checkpoint: layer {idx} weights {:?} vs spec {want:?}",
                    proxy.shape()
                )));
            }
            let gamma = r.f64_slice()?;
            let beta = r.f64_slice()?;
            let running_mean = r.f64_slice()?;
            let running_var = r.f64_slice()?;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            if [gamma.len(), beta.len(), running_mean.len(), running_var.len()]
                != [geom.features; 4]
                || eps <= 0.0
            {
                return Err(Error::corrupt(format!(
                    "student checkpoint: layer {idx} batch-norm block malformed"
                )));
            }
            layers.push(QuantLayer {
                geom: *geom,
                velocity: Tensor::zeros(proxy.shape()),
                ternary: ternarize_tensor(&proxy),
                proxy,
                bn: BatchNorm { gamma, beta, running_mean, running_var, momentum, eps },
                vel_gamma: vec![0.0; geom.features],
                vel_beta: vec![0.0; geom.features],
            });
        }
        let readout_w = r.tensor()?;
        let readout_b = r.f64_slice()?;
        let d = spec.readout_inputs().map_err(|e| Error::corrupt(e.to_string()))?;
        if readout_w.shape() != [spec.actions, d] || readout_b.len() != spec.actions {
            return Err(Error::corrupt("student checkpoint: readout block malformed".to_string()));
        }
        r.expect_end()?;
        Ok(StudentNetwork {
            readout_vw: Tensor::zeros(readout_w.shape()),
            readout_vb: vec![0.0; spec.actions],
            readout_w,
            readout_b,
            layers,
            spec,
            eta,
            step_count: 0,
        })
    }
}
