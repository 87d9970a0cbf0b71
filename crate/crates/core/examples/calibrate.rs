//! Scratch calibration runs for picking training budgets. Not shipped.

use std::time::Instant;

use ternq_core::distill::{
    evaluate_student, generate_buffer, train_student, LossKind, StudentConfig,
};
use ternq_core::env::EnvSpec;
use ternq_core::netspec::NetworkSpec;
use ternq_core::teacher::{evaluate_teacher, train_teacher, TeacherConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("teacher");
    match mode {
        "teacher" => teacher_run(args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0)),
        "pong" => pong_run(args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0)),
        "student" => student_run(
            args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2),
            args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0u64),
            args.get(4).map(|s| s.as_str().parse().unwrap()).unwrap_or(50_000u64),
            args.get(5).map(|s| s.as_str()).unwrap_or("kl").to_string(),
        ),
        "diag" => diag_run(
            args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2),
            args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.2),
            args.get(4).map(|s| s.as_str().parse().unwrap()).unwrap_or(2000usize),
            args.get(5).map(|s| s.parse().unwrap()).unwrap_or(32usize),
        ),
        "teval" => teacher_trace(args.get(2).map(|s| s.as_str()).unwrap_or("/tmp/teacher_catch_0.bin")),
        other => eprintln!("unknown mode {other}"),
    }
}

/// Greedy teacher rollouts on the eval episode set, one trace line each,
/// to eyeball how direct its paths are (zigzags mean mushy Q off-policy).
fn teacher_trace(path: &str) {
    use ternq_core::env::FrameStack;
    use ternq_core::tensor::argmax_tiebreak;

    let bytes = std::fs::read(path).expect("teacher checkpoint");
    let (teacher, spec) = ternq_core::teacher::TeacherNetwork::from_bytes(&bytes).unwrap();
    let eval_base = 1u64 << 32;
    let mut wander = 0usize;
    let mut misses = 0usize;
    for ep in 0..30u64 {
        let mut env = spec.build(eval_base + ep).unwrap();
        let mut stack = FrameStack::new();
        stack.reset(spec.preprocess(&env.reset()));
        let mut ret = 0.0;
        let mut acts = Vec::new();
        let mut cols = Vec::new();
        loop {
            let obs = stack.observation();
            let a = argmax_tiebreak(&teacher.q_values(&obs).unwrap());
            let [c, h, w] = [obs.shape()[0], obs.shape()[1], obs.shape()[2]];
            let newest = &obs.data()[(c - 1) * h * w..c * h * w];
            let (mut ball, mut paddle) = (-1isize, -1isize);
            for r in 0..h {
                for col in 0..w {
                    if newest[r * w + col] > 0.5 {
                        if r >= h - 2 {
                            paddle = (col / 2) as isize;
                        } else {
                            ball = (col / 2) as isize;
                        }
                    }
                }
            }
            acts.push(a);
            cols.push((ball, paddle));
            let step = env.step(a).unwrap();
            ret += step.reward;
            if step.terminal {
                break;
            }
            stack.push(spec.preprocess(&step.frame));
        }
        // count direction reversals (right after left or vice versa)
        let dirs: Vec<i32> = acts.iter().map(|&a| a as i32 - 1).filter(|&d| d != 0).collect();
        let revs = dirs.windows(2).filter(|w| w[0] * w[1] < 0).count();
        wander += revs;
        if ret < 1.0 {
            misses += 1;
        }
        let (b0, p0) = cols[0];
        println!(
            "ep {ep:>2} ball {b0:>2} paddle {p0} ret {ret:+.0} revs {revs} acts {:?}",
            acts
        );
    }
    println!("teacher: {misses}/30 misses, {wander} direction reversals across 30 episodes");
}

fn teacher_run(seed: u64) {
    let spec = EnvSpec { name: "catch".into(), grid: 12, render_scale: 2, resize: None };
    let stop: Option<f64> = std::env::var("STOP_RETURN").ok().map(|s| s.parse().unwrap());
    let steps: u64 = std::env::var("STEPS").map(|s| s.parse().unwrap()).unwrap_or(150_000);
    let cfg = TeacherConfig { stop_return: stop, total_steps: steps, ..TeacherConfig::default() };
    let t0 = Instant::now();
    let (net, report) = train_teacher(&spec, &cfg, seed).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "seed {seed}: steps {} final_eval {:.3} wall {:.1}s evals {:?}",
        report.steps_run, report.final_eval, dt, report.evals
    );
    let final100 = evaluate_teacher(&net, &spec, 100, seed, 1).unwrap();
    println!("seed {seed}: 100-episode eval {final100:.3}");
    std::fs::write(format!("/tmp/teacher_catch_{seed}.bin"), net.to_bytes(&spec)).unwrap();
}

fn pong_run(seed: u64) {
    let spec = EnvSpec { name: "minipong".into(), grid: 12, render_scale: 2, resize: None };
    let stop: Option<f64> = std::env::var("STOP_RETURN").ok().map(|s| s.parse().unwrap());
    let steps: u64 = std::env::var("STEPS").map(|s| s.parse().unwrap()).unwrap_or(150_000);
    let cfg = TeacherConfig { stop_return: stop, total_steps: steps, ..TeacherConfig::default() };
    let t0 = Instant::now();
    let (net, report) = train_teacher(&spec, &cfg, seed).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "pong seed {seed}: steps {} final_eval {:.3} wall {:.1}s evals {:?}",
        report.steps_run, report.final_eval, dt, report.evals
    );
    let final100 = evaluate_teacher(&net, &spec, 100, seed, 1).unwrap();
    println!("pong seed {seed}: 100-episode eval {final100:.3}");
    std::fs::write(format!("/tmp/teacher_pong_{seed}.bin"), net.to_bytes(&spec)).unwrap();
}

fn student_run(tier: u8, seed: u64, batches: u64, loss: String) {
    let bytes = std::fs::read("/tmp/teacher_catch_0.bin").expect("train teacher first");
    let (teacher, spec) = ternq_core::teacher::TeacherNetwork::from_bytes(&bytes).unwrap();
    let teacher_mean = evaluate_teacher(&teacher, &spec, 100, 0, 1).unwrap();
    println!("teacher mean over 100 eps: {teacher_mean:.3}");
    let arch = NetworkSpec::desk(tier).unwrap();
    let mut cfg = StudentConfig {
        loss: loss.parse().unwrap(),
        batches,
        eval_interval: 10_000,
        eval_episodes: 30,
        log_every: 2_000,
        ..StudentConfig::default()
    };
    if let Ok(f) = std::env::var("GEN_FRAMES") {
        cfg.gen_frames = f.parse().unwrap();
        cfg.buffer_capacity = (cfg.gen_frames as usize).max(100_000);
    }
    let t0 = Instant::now();
    let buffer = generate_buffer(
        &teacher,
        &spec,
        cfg.gen_epsilon,
        cfg.gen_frames as usize,
        cfg.levels,
        cfg.buffer_capacity,
        seed,
    )
    .unwrap();
    println!("buffer gen: {:.1}s ({} frames)", t0.elapsed().as_secs_f64(), buffer.len());
    let t0 = Instant::now();
    let (net, report) =
        train_student(&arch, &buffer, &cfg, seed, Some(&spec), Some(teacher_mean)).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    for row in report.rows.iter().filter(|r| r.eval_return.is_some()) {
        println!(
            "  batch {:>6} loss {:.4} eval {:+.3} norm {:?}",
            row.batch, row.loss, row.eval_return.unwrap(), row.normalized_pct
        );
    }
    let final100 = evaluate_student(&net, &spec, 4, 100, 0, 1).unwrap();
    println!(
        "tier {tier} seed {seed} {loss} batches {batches}: wall {:.1}s final100 {:.3} ({:.1}% of teacher)",
        dt,
        final100,
        100.0 * final100 / teacher_mean
    );

    // diagnostics: does the student fit its own training set?
    use ternq_core::tensor::argmax_tiebreak;
    use ternq_core::Tensor;
    let n = 2000.min(buffer.len());
    let [c, h, w] = buffer.input_shape();
    let mut input = Tensor::zeros(&[n, c, h, w]);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let bits = buffer.state_bits(i);
        let row = &mut input.data_mut()[i * c * h * w..(i + 1) * c * h * w];
        for (d, b) in row.iter_mut().zip(bits) {
            *d = b as f64;
        }
        match &buffer.get(i).label {
            ternq_core::distill::Label::QVec(q) => targets.push(argmax_tiebreak(q)),
            _ => unreachable!(),
        }
    }
    let (q_eval, acts) = net.eval_with_activations(&input).unwrap();
    let agree = (0..n)
        .filter(|&i| argmax_tiebreak(q_eval.row(i)) == targets[i])
        .count() as f64
        / n as f64;
    println!("eval-mode train-set agreement: {:.3}", agree);
    for (li, a) in acts.iter().enumerate() {
        let rate = a.data().iter().sum::<f64>() / a.len() as f64;
        println!("  layer {li} firing rate {:.4}", rate);
    }
    let mut label_counts = [0usize; 3];
    for &t in &targets {
        label_counts[t] += 1;
    }
    let mut pred_counts = [0usize; 3];
    for i in 0..n {
        pred_counts[argmax_tiebreak(q_eval.row(i))] += 1;
    }
    println!("label dist {:?} pred dist {:?}", label_counts, pred_counts);
}

fn diag_run(tier: u8, lr: f64, batches: usize, batch_size: usize) {
    use rand::SeedableRng;
    use ternq_core::distill::{loss_kl, Label};
    use ternq_core::lowprec::{Activation, StudentNetwork};
    use ternq_core::tensor::argmax_tiebreak;
    use ternq_core::Tensor;

    let bytes = std::fs::read("/tmp/teacher_catch_0.bin").expect("train teacher first");
    let (teacher, spec) = ternq_core::teacher::TeacherNetwork::from_bytes(&bytes).unwrap();
    let mut arch = NetworkSpec::desk(tier).unwrap();
    if let Ok(s) = std::env::var("L1_STRIDE") {
        arch.layers[0].stride = s.parse().unwrap();
        arch.validate().unwrap();
        println!("L1 stride override: {} (shapes {:?})", arch.layers[0].stride,
                 arch.feature_map_shapes().unwrap());
    }
    let gen_eps: f64 = std::env::var("GEN_EPS")
        .map(|s| s.parse().unwrap())
        .unwrap_or(0.05);
    let gen_frames: usize = std::env::var("GEN_FRAMES")
        .map(|s| s.parse().unwrap())
        .unwrap_or(20_000);
    let run_seed: u64 = std::env::var("SEED")
        .map(|s| s.parse().unwrap())
        .unwrap_or(0);
    let buffer = generate_buffer(
        &teacher,
        &spec,
        gen_eps,
        gen_frames,
        4,
        gen_frames.max(100_000),
        run_seed,
    )
    .unwrap();
    let [c, h, w] = buffer.input_shape();

    let assemble = |idx: &[usize]| -> (Tensor, Tensor, Vec<usize>) {
        let n = idx.len();
        let mut input = Tensor::zeros(&[n, c, h, w]);
        let mut qt = Tensor::zeros(&[n, buffer.actions]);
        let mut hard = Vec::with_capacity(n);
        for (row, &i) in idx.iter().enumerate() {
            let bits = buffer.state_bits(i);
            let dst = &mut input.data_mut()[row * c * h * w..(row + 1) * c * h * w];
            for (d, b) in dst.iter_mut().zip(bits) {
                *d = b as f64;
            }
            match &buffer.get(i).label {
                Label::QVec(q) => {
                    qt.row_mut(row).copy_from_slice(q);
                    hard.push(argmax_tiebreak(q));
                }
                _ => unreachable!(),
            }
        }
        (input, qt, hard)
    };

    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42 + run_seed);
    let mut init_rng = rand_chacha::ChaCha12Rng::seed_from_u64(7 + run_seed);
    let mut net = StudentNetwork::new(arch.clone(), 1e-4, &mut init_rng).unwrap();

    let snapshot = |net: &StudentNetwork| -> Vec<Vec<f64>> {
        net.layers.iter().map(|l| l.ternary.data().to_vec()).collect()
    };
    let mut last_snap = snapshot(&net);
    let mut loss_acc = 0.0;
    let mut agree_acc = 0.0;
    let mut seen = 0usize;
    let every = 200;

    for b in 1..=batches {
        let idx = buffer.sample_indices(&mut rng, batch_size);
        let (input, qt, hard) = assemble(&idx);
        let cache = net.forward_train(&input, Activation::Binary).unwrap();
        let (loss, mut grad) = loss_kl(&qt, &cache.q, 0.01).unwrap();
        let nb = batch_size as f64;
        grad.data_mut().iter_mut().for_each(|g| *g /= nb);
        let mut grads = net.backward_train(&cache, &grad).unwrap();
        if let Ok(spec_str) = std::env::var("GROUP_LRS") {
            let parts: Vec<f64> =
                spec_str.split(',').map(|s| s.parse().unwrap()).collect();
            let (mp, mb, mr) = (parts[0], parts[1], parts[2]);
            for t in &mut grads.proxy {
                t.data_mut().iter_mut().for_each(|v| *v *= mp);
            }
            for v in grads.gamma.iter_mut().chain(grads.beta.iter_mut()) {
                v.iter_mut().for_each(|x| *x *= mb);
            }
            grads.readout_w.data_mut().iter_mut().for_each(|v| *v *= mr);
            grads.readout_b.iter_mut().for_each(|v| *v *= mr);
        }
        if std::env::var("NORM_GRADS").is_ok() {
            let rms = |d: &[f64]| (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
            let norm_t = |t: &mut Tensor| {
                let r = rms(t.data());
                if r > 1e-12 {
                    t.data_mut().iter_mut().for_each(|v| *v /= r);
                }
            };
            let norm_v = |v: &mut Vec<f64>| {
                let r = rms(v);
                if r > 1e-12 {
                    v.iter_mut().for_each(|x| *x /= r);
                }
            };
            for t in &mut grads.proxy {
                norm_t(t);
            }
            for v in &mut grads.gamma {
                norm_v(v);
            }
            for v in &mut grads.beta {
                norm_v(v);
            }
            norm_t(&mut grads.readout_w);
            norm_v(&mut grads.readout_b);
        }
        if b % every == 0 {
            let mg = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
            let pg: Vec<String> = grads.proxy.iter().map(|t| format!("{:.1e}", mg(t))).collect();
            let rg = mg(&grads.readout_w);
            let gg: Vec<String> = grads
                .gamma
                .iter()
                .map(|g| {
                    format!("{:.1e}", g.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64)
                })
                .collect();
            println!("        |g| proxy{pg:?} gamma{gg:?} readout {rg:.1e}");
            let mut sup = Vec::new();
            let mut gstat = Vec::new();
            for (li, r) in cache.post_bn.iter().enumerate() {
                let s = r.data().iter().filter(|v| v.abs() < 1.0).count() as f64
                    / r.len() as f64;
                sup.push(format!("{s:.2}"));
                let bn = &net.layers[li].bn;
                let gmin = bn.gamma.iter().cloned().fold(f64::INFINITY, f64::min);
                let gmax = bn.gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let bmin = bn.beta.iter().cloned().fold(f64::INFINITY, f64::min);
                let bmax = bn.beta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                gstat.push(format!("g[{gmin:.2},{gmax:.2}]b[{bmin:.2},{bmax:.2}]"));
            }
            println!("        support{sup:?} {}", gstat.join(" "));
        }
        let step_lr = if std::env::var("LR_DECAY").is_ok() {
            let floor: f64 = std::env::var("DECAY_FLOOR")
                .map(|s| s.parse().unwrap())
                .unwrap_or(0.1);
            lr * (1.0 - (1.0 - floor) * (b as f64 - 1.0) / batches as f64)
        } else {
            lr
        };
        net.sgd_momentum_step(&grads, step_lr, 0.9);
        loss_acc += loss / nb;
        let q = &cache.q;
        agree_acc += (0..idx.len())
            .filter(|&i| argmax_tiebreak(q.row(i)) == hard[i])
            .count() as f64
            / nb;
        seen += 1;
        if b % every == 0 {
            let snap = snapshot(&net);
            let mut flips = Vec::new();
            let mut zeros = Vec::new();
            let mut boundary = Vec::new();
            for (li, layer) in net.layers.iter().enumerate() {
                let f = snap[li]
                    .iter()
                    .zip(&last_snap[li])
                    .filter(|(a, b)| a != b)
                    .count();
                flips.push(f);
                let z = layer.ternary.data().iter().filter(|&&v| v == 0.0).count();
                zeros.push(format!("{:.2}", z as f64 / layer.ternary.len() as f64));
                let nb = layer
                    .proxy
                    .data()
                    .iter()
                    .filter(|&&p| (p.abs() - 0.5).abs() < 0.05)
                    .count();
                boundary.push(format!("{:.2}", nb as f64 / layer.proxy.len() as f64));
            }
            println!(
                "batch {:>5} loss {:.4} train-agree {:.3} flips{:?} zeros{:?} nearthr{:?}",
                b,
                loss_acc / seen as f64,
                agree_acc / seen as f64,
                flips,
                zeros,
                boundary
            );
            last_snap = snap;
            loss_acc = 0.0;
            agree_acc = 0.0;
            seen = 0;
        }
    }

    // train-mode vs eval-mode on the same 2000 sample set
    let idx: Vec<usize> = (0..2000.min(buffer.len())).collect();
    let (input, _qt, hard) = assemble(&idx);
    let n = idx.len();
    let mut probe = net.clone();
    let cache = probe.forward_train(&input, Activation::Binary).unwrap();
    let train_agree = (0..n)
        .filter(|&i| argmax_tiebreak(cache.q.row(i)) == hard[i])
        .count() as f64
        / n as f64;
    let (q_eval, acts_eval) = net.eval_with_activations(&input).unwrap();
    let eval_agree = (0..n)
        .filter(|&i| argmax_tiebreak(q_eval.row(i)) == hard[i])
        .count() as f64
        / n as f64;
    println!("train-mode agree {train_agree:.3}  eval-mode agree {eval_agree:.3}");
    for (li, (a_tr, a_ev)) in cache.acts.iter().zip(&acts_eval).enumerate() {
        let rt = a_tr.data().iter().sum::<f64>() / a_tr.len() as f64;
        let re = a_ev.data().iter().sum::<f64>() / a_ev.len() as f64;
        let mismatch = a_tr
            .data()
            .iter()
            .zip(a_ev.data())
            .filter(|(x, y)| x != y)
            .count() as f64
            / a_tr.len() as f64;
        println!("  layer {li}: fire train {rt:.4} eval {re:.4} bit-mismatch {mismatch:.4}");
    }
    // bn stats divergence: batch stats of the big probe batch vs running
    for (li, layer) in net.layers.iter().enumerate() {
        let bn = &layer.bn;
        println!(
            "  layer {li} bn: run_mean[0..4] {:?} run_var[0..4] {:?}",
            &bn.running_mean[..4.min(bn.running_mean.len())]
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>(),
            &bn.running_var[..4.min(bn.running_var.len())]
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
        );
    }
    let mean_return = evaluate_student(&net, &spec, 4, 100, 0, 1).unwrap();
    println!("env eval over 100 episodes: {mean_return:+.3}");

    if std::env::var("MISS_DETAIL").is_ok() {
        miss_detail(&net, &teacher, &spec);
    }
}

/// Replays the eval episode set step by step, comparing the student's greedy
/// action against the teacher's on every visited state, and prints a trace
/// of each missed episode (ball/paddle columns recovered from the frames).
fn miss_detail(
    net: &ternq_core::lowprec::StudentNetwork,
    teacher: &ternq_core::teacher::TeacherNetwork,
    spec: &ternq_core::env::EnvSpec,
) {
    use ternq_core::env::{transduce, FrameStack};
    use ternq_core::tensor::argmax_tiebreak;

    let eval_base = 1u64 << 32;
    let mut missed = 0usize;
    let mut disagree_steps = 0usize;
    let mut total_steps = 0usize;
    for ep in 0..100u64 {
        let mut env = spec.build(eval_base + ep).unwrap();
        let mut stack = FrameStack::new();
        stack.reset(spec.preprocess(&env.reset()));
        let mut ret = 0.0;
        let mut trace: Vec<(usize, usize, isize, isize)> = Vec::new();
        loop {
            let obs = stack.observation();
            let s_act = argmax_tiebreak(&net.q_values(&transduce(&obs, 4)).unwrap());
            let t_act = argmax_tiebreak(&teacher.q_values(&obs).unwrap());
            total_steps += 1;
            if s_act != t_act {
                disagree_steps += 1;
            }
            // newest frame is the last channel; scan for bright cells
            let [c, h, w] = [obs.shape()[0], obs.shape()[1], obs.shape()[2]];
            let newest = &obs.data()[(c - 1) * h * w..c * h * w];
            let mut ball = -1isize;
            let mut paddle = -1isize;
            for r in 0..h {
                for col in 0..w {
                    if newest[r * w + col] > 0.5 {
                        if r >= h - 2 {
                            paddle = (col / 2) as isize;
                        } else {
                            ball = (col / 2) as isize;
                        }
                    }
                }
            }
            trace.push((s_act, t_act, ball, paddle));
            let step = env.step(s_act).unwrap();
            ret += step.reward;
            if step.terminal {
                break;
            }
            stack.push(spec.preprocess(&step.frame));
        }
        if ret < 1.0 {
            missed += 1;
            let line: Vec<String> = trace
                .iter()
                .map(|(s, t, b, p)| {
                    let mark = if s == t { ' ' } else { '!' };
                    format!("{mark}s{s}t{t}b{b}p{p}")
                })
                .collect();
            println!("  MISS ep {ep:>3}: {}", line.join(" "));
        }
    }
    println!(
        "misses {missed}/100, on-trajectory disagreement {disagree_steps}/{total_steps} steps"
    );
}
