//! The five pipeline stages behind the subcommands. Each artifact-producing
//! command resolves its config up front, trains or checks through the core
//! library, writes artifacts plus a manifest into the output directory, and
//! prints a one-line summary per major result.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use ternq_core::deploy::{deploy, equivalence_check, DeployedNetwork};
use ternq_core::distill::{
    evaluate_deployed, evaluate_student, generate_buffer, merge_multigame, temperature_sweep,
    train_student, train_student_online, DistillBuffer, StudentReport,
};
use ternq_core::env::{transduce_bits, EnvSpec, FrameStack};
use ternq_core::lowprec::StudentNetwork;
use ternq_core::netspec::NetworkSpec;
use ternq_core::teacher::{evaluate_teacher, train_teacher, TeacherNetwork};
use ternq_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;

pub fn cmd_train_teacher(cfg: &ExperimentConfig) -> Result<()> {
    let env = cfg.env_spec()?;
    let tcfg = cfg.teacher_config()?;
    let seed = cfg.seed()?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;

    let (net, report) = train_teacher(&env, &tcfg, seed)?;

    let mut man = Manifest::new("train-teacher", seed, &cfg.to_text());
    man.write_artifact(&out, "teacher.bin", &net.to_bytes(&env))?;
    let mut metrics = String::from("step,episode_return,loss,epsilon\n");
    for r in &report.rows {
        writeln!(metrics, "{},{},{},{}", r.step, r.episode_return, r.loss, r.epsilon).unwrap();
    }
    man.write_artifact(&out, "teacher_metrics.csv", metrics.as_bytes())?;
    let mut evals = String::from("step,mean_return\n");
    for (step, mean) in &report.evals {
        writeln!(evals, "{step},{mean}").unwrap();
    }
    man.write_artifact(&out, "teacher_evals.csv", evals.as_bytes())?;
    man.write_artifact(&out, "config.txt", cfg.to_text().as_bytes())?;
    man.write(&out)?;

    println!(
        "teacher on {}: {} steps, final eval {:.3}, artifacts in {}",
        env.name,
        report.steps_run,
        report.final_eval,
        out.display()
    );
    Ok(())
}

fn load_teacher(path: &Path) -> Result<(TeacherNetwork, EnvSpec)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::MissingInput(format!("teacher checkpoint {}: {e}", path.display())))?;
    TeacherNetwork::from_bytes(&bytes)
}

fn student_metrics_csv(report: &StudentReport) -> String {
    let mut out = String::from("batch,loss,eval_return,normalized_pct\n");
    for r in &report.rows {
        let ev = r.eval_return.map(|v| v.to_string()).unwrap_or_default();
        let pct = r.normalized_pct.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{ev},{pct}", r.batch, r.loss).unwrap();
    }
    out
}

pub fn cmd_distill(cfg: &ExperimentConfig, games: Option<&str>, deployed_eval: bool) -> Result<()> {
    let seed = cfg.seed()?;
    let scfg = cfg.student_config()?;
    let tier = cfg.student_tier()?;
    let spec = NetworkSpec::by_tier(&tier)?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let mut man = Manifest::new("distill", seed, &cfg.to_text());

    let game_list: Option<Vec<&str>> =
        games.map(|g| g.split(',').map(str::trim).filter(|s| !s.is_empty()).collect());

    match game_list.as_deref() {
        None | Some([]) | Some([_]) => {
            // single game: teacher Q-vector labels, KL/NLL/MSE per config
            let ckpt = match game_list.as_deref() {
                Some([g]) => cfg.teacher_checkpoint(Some(g))?,
                _ => cfg.teacher_checkpoint(None)?,
            };
            let (teacher, env) = load_teacher(&ckpt)?;
            let teacher_mean =
                evaluate_teacher(&teacher, &env, scfg.eval_episodes, seed, scfg.eval_workers)?;
            let (net, report) = if cfg.student_online()? {
                let (net, buf, report) =
                    train_student_online(&spec, &teacher, &env, &scfg, seed)?;
                if cfg.save_dataset()? {
                    man.write_artifact(&out, &format!("{}.tds", env.name), &buf.to_bytes())?;
                }
                (net, report)
            } else {
                let buffer = generate_buffer(
                    &teacher,
                    &env,
                    scfg.gen_epsilon,
                    scfg.gen_frames as usize,
                    scfg.levels,
                    scfg.buffer_capacity,
                    seed,
                )?;
                if cfg.save_dataset()? {
                    man.write_artifact(&out, &format!("{}.tds", env.name), &buffer.to_bytes())?;
                }
                train_student(&spec, &buffer, &scfg, seed, Some(&env), Some(teacher_mean))?
            };
            let dn = deploy(&net)?;
            man.write_artifact(&out, "student.bin", &net.to_bytes())?;
            man.write_artifact(&out, "deployed.tnf", &dn.to_bytes())?;
            man.write_artifact(&out, "student_metrics.csv", student_metrics_csv(&report).as_bytes())?;

            let student_mean = if deployed_eval {
                evaluate_deployed(&dn, &env, scfg.levels, scfg.eval_episodes, seed, scfg.eval_workers)?
            } else {
                evaluate_student(&net, &env, scfg.levels, scfg.eval_episodes, seed, scfg.eval_workers)?
            };
            let path_tag = if deployed_eval { "deployed" } else { "float" };
            print!(
                "student {tier} ({}) on {}: {} batches, mean return {student_mean:.3} vs teacher {teacher_mean:.3}",
                scfg.loss, env.name, report.batches_run
            );
            if teacher_mean > 0.0 {
                print!(" ({:.1}% of teacher, {path_tag} path)", 100.0 * student_mean / teacher_mean);
            } else {
                print!(" (teacher mean not positive; raw returns reported, {path_tag} path)");
            }
            println!();
        }
        Some(list) => {
            // multi-game: per-game one-hot datasets merged into one shuffled
            // buffer, trained offline, evaluated per game
            if cfg.student_online()? {
                return Err(Error::config(
                    "student.online does not combine with --games; multi-game training is offline",
                ));
            }
            let mut envs = Vec::new();
            let mut buffers = Vec::new();
            for (i, game) in list.iter().enumerate() {
                let ckpt = cfg.teacher_checkpoint(Some(game))?;
                let (teacher, env) = load_teacher(&ckpt)?;
                let buffer = generate_buffer(
                    &teacher,
                    &env,
                    scfg.gen_epsilon,
                    scfg.gen_frames as usize,
                    scfg.levels,
                    scfg.buffer_capacity,
                    seed.wrapping_add(i as u64),
                )?
                .to_onehot();
                if cfg.save_dataset()? {
                    man.write_artifact(&out, &format!("{}.tds", env.name), &buffer.to_bytes())?;
                }
                let teacher_mean =
                    evaluate_teacher(&teacher, &env, scfg.eval_episodes, seed, scfg.eval_workers)?;
                envs.push((env, teacher_mean));
                buffers.push(buffer);
            }
            let refs: Vec<&DistillBuffer> = buffers.iter().collect();
            let merged = merge_multigame(&refs, seed)?;
            let (net, report) = train_student(&spec, &merged, &scfg, seed, None, None)?;
            let dn = deploy(&net)?;
            man.write_artifact(&out, "student.bin", &net.to_bytes())?;
            man.write_artifact(&out, "deployed.tnf", &dn.to_bytes())?;
            man.write_artifact(&out, "student_metrics.csv", student_metrics_csv(&report).as_bytes())?;

            let mut eval_csv = String::from("game,student_mean,teacher_mean,pct\n");
            for (env, teacher_mean) in &envs {
                let student_mean = if deployed_eval {
                    evaluate_deployed(&dn, env, scfg.levels, scfg.eval_episodes, seed, scfg.eval_workers)?
                } else {
                    evaluate_student(&net, env, scfg.levels, scfg.eval_episodes, seed, scfg.eval_workers)?
                };
                let pct = (*teacher_mean > 0.0)
                    .then(|| (100.0 * student_mean / teacher_mean).to_string())
                    .unwrap_or_default();
                writeln!(eval_csv, "{},{student_mean},{teacher_mean},{pct}", env.name).unwrap();
                println!(
                    "student {tier} (merged) on {}: mean return {student_mean:.3} vs teacher {teacher_mean:.3}",
                    env.name
                );
            }
            man.write_artifact(&out, "multigame_eval.csv", eval_csv.as_bytes())?;
        }
    }
    man.write_artifact(&out, "config.txt", cfg.to_text().as_bytes())?;
    man.write(&out)?;
    println!("artifacts in {}", out.display());
    Ok(())
}

pub fn cmd_play(
    model: &Path,
    cfg: &ExperimentConfig,
    fps: f64,
    steps: u64,
    seed: u64,
) -> Result<()> {
    let bytes = std::fs::read(model)
        .map_err(|e| Error::MissingInput(format!("deployed model {}: {e}", model.display())))?;
    let dn = DeployedNetwork::from_bytes(&bytes)?;
    let env_spec = cfg.env_spec()?;
    let levels: usize = cfg.student_config()?.levels;
    let obs = env_spec.obs_shape()?;
    let expected = [obs[0] * levels, obs[1], obs[2]];
    if dn.spec.input_shape != expected {
        return Err(Error::usage(format!(
            "model wants input {:?}, environment provides {:?} at {levels} levels",
            dn.spec.input_shape, expected
        )));
    }

    println!(
        "playing {} on {} (tier {}), target {} fps, {} steps, seed {seed}",
        model.display(),
        env_spec.name,
        dn.spec.tier,
        if fps > 0.0 { fps.to_string() } else { "unpaced".to_string() },
        steps
    );
    if steps == 0 {
        return Ok(());
    }

    let mut env = env_spec.build(seed)?;
    let mut stack = FrameStack::new();
    stack.reset(env_spec.preprocess(&env.reset()));
    let frame_budget = (fps > 0.0).then(|| Duration::from_secs_f64(1.0 / fps));
    let start = Instant::now();
    let mut infer_time = Duration::ZERO;
    let mut episode_return = 0.0;
    let mut episodes = 0u64;
    for step in 1..=steps {
        let t0 = Instant::now();
        let bits = transduce_bits(&stack.observation(), levels);
        let action = dn.act(&bits)?;
        infer_time += t0.elapsed();
        let outcome = env.step(action)?;
        episode_return += outcome.reward;
        if outcome.terminal {
            episodes += 1;
            println!("episode {episodes}: return {episode_return:+.1}");
            episode_return = 0.0;
            stack.reset(env_spec.preprocess(&env.reset()));
        } else {
            stack.push(env_spec.preprocess(&outcome.frame));
        }
        if let Some(budget) = frame_budget {
            let due = start + budget * step as u32;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let infer = infer_time.as_secs_f64();
    println!(
        "{} steps in {:.2}s: measured {:.1} fps, inference-only {:.0} inferences/sec",
        steps,
        elapsed,
        steps as f64 / elapsed,
        if infer > 0.0 { steps as f64 / infer } else { f64::INFINITY }
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &ExperimentConfig, grid: &str) -> Result<()> {
    let taus = parse_tau_grid(grid)?;
    let seed = cfg.seed()?;
    let scfg = cfg.student_config()?;
    let spec = NetworkSpec::by_tier(&cfg.student_tier()?)?;
    let out = cfg.out_dir()?;
    std::fs::create_dir_all(&out)?;
    let results_path = out.join("sweep_results.csv");

    // resume: cells already present in the results file are not rerun
    let mut have: BTreeSet<(String, String)> = BTreeSet::new();
    let mut rows: Vec<(String, String, String)> = Vec::new();
    if let Ok(existing) = std::fs::read_to_string(&results_path) {
        for line in existing.lines().skip(1) {
            let mut fields = line.splitn(3, ',');
            if let (Some(game), Some(tau), Some(rest)) =
                (fields.next(), fields.next(), fields.next())
            {
                have.insert((game.to_string(), tau.to_string()));
                rows.push((game.to_string(), tau.to_string(), rest.to_string()));
            }
        }
    }

    let (teacher, env) = load_teacher(&cfg.teacher_checkpoint(None)?)?;
    let missing: Vec<f64> = taus
        .iter()
        .copied()
        .filter(|t| !have.contains(&(env.name.clone(), t.to_string())))
        .collect();
    println!(
        "sweep on {}: grid {:?}, {} cells present, {} to run",
        env.name,
        taus,
        have.len(),
        missing.len()
    );
    if !missing.is_empty() {
        let tasks = [(env.clone(), &teacher)];
        for cell in temperature_sweep(&tasks, &missing, &spec, &scfg, seed)? {
            let pct = cell.score.pct.map(|p| p.to_string()).unwrap_or_default();
            rows.push((
                cell.game.clone(),
                cell.tau.to_string(),
                format!("{},{},{pct}", cell.score.student_mean, cell.score.teacher_mean),
            ));
        }
    }

    // rows ordered by grid position so the table reads in grid order
    let mut csv = String::from("game,tau,student_mean,teacher_mean,pct\n");
    for tau in &taus {
        let key = tau.to_string();
        for (game, t, rest) in &rows {
            if *t == key {
                writeln!(csv, "{game},{t},{rest}").unwrap();
                println!("  tau {t} on {game}: {rest}");
            }
        }
    }
    let mut man = Manifest::new("sweep", seed, &cfg.to_text());
    man.write_artifact(&out, "sweep_results.csv", csv.as_bytes())?;
    man.write_artifact(&out, "config.txt", cfg.to_text().as_bytes())?;
    man.write(&out)?;
    println!("artifacts in {}", out.display());
    Ok(())
}

fn parse_tau_grid(grid: &str) -> Result<Vec<f64>> {
    let values = grid
        .strip_prefix("tau=")
        .ok_or_else(|| Error::config(format!("grid must look like tau=0.05,0.01, got '{grid}'")))?;
    let taus: Vec<f64> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::config(format!("grid value '{s}' is not a number")))
        })
        .collect::<Result<_>>()?;
    if taus.is_empty() {
        return Err(Error::config("grid is empty; give at least one tau"));
    }
    if let Some(bad) = taus.iter().find(|&&t| t <= 0.0) {
        return Err(Error::config(format!("grid tau {bad} must be positive")));
    }
    Ok(taus)
}

pub fn cmd_verify(model: &Path, checkpoint: &Path) -> Result<()> {
    let model_bytes = std::fs::read(model)
        .map_err(|e| Error::MissingInput(format!("deployed model {}: {e}", model.display())))?;
    let dn = DeployedNetwork::from_bytes(&model_bytes)?;
    let ckpt_bytes = std::fs::read(checkpoint).map_err(|e| {
        Error::MissingInput(format!("student checkpoint {}: {e}", checkpoint.display()))
    })?;
    let net = StudentNetwork::from_bytes(&ckpt_bytes)?;

    let violations = dn.spec.validate_fanin();
    for v in &violations {
        println!("fan-in violation: layer {} reads {} inputs (bound {})", v.layer, v.fan_in, v.bound);
    }
    let report = equivalence_check(&net, &dn, 10_000)?;
    println!(
        "hidden activations bit-exact: {} over {} random inputs",
        report.hidden_bitexact, report.samples
    );
    println!("readout argmax agreement: {:.4}", report.argmax_agreement);
    if let Some(m) = &report.first_mismatch {
        println!("first mismatch: {m}");
    }

    if !violations.is_empty() {
        return Err(Error::Verification(format!(
            "{} fan-in violation(s) in the deployed spec",
            violations.len()
        )));
    }
    if !report.hidden_bitexact {
        return Err(Error::Verification(
            report.first_mismatch.unwrap_or_else(|| "hidden activations diverge".to_string()),
        ));
    }
    // the fold promises at least this much argmax agreement at deploy time
    if report.argmax_agreement < 0.9995 {
        return Err(Error::Verification(format!(
            "readout argmax agreement {:.4} below the deploy floor 0.9995",
            report.argmax_agreement
        )));
    }
    println!("verification passed");
    Ok(())
}
