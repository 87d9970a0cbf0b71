//! Experiment configuration: a flat text file of dotted keys, merged with
//! command-line overrides, validated up front. Unknown keys are rejected
//! so typos fail loudly instead of silently running defaults.
//!
//! Defaults follow the source hyperparameters where published ([paper])
//! and the desk-scale setup otherwise ([desk]); `print-config` emits the
//! full annotated template.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ternq_core::distill::StudentConfig;
use ternq_core::env::EnvSpec;
use ternq_core::teacher::TeacherConfig;
use ternq_core::{Error, Result};

/// Every key the config file accepts, with its annotated default. This
/// table drives parsing, validation, `print-config`, and `--help`, so the
/// three can never drift apart.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("env.name", "catch", "[desk] game: catch, minipong, chain"),
    ("env.grid", "12", "[desk] logical grid size"),
    ("env.render_scale", "2", "[desk] pixels per cell"),
    ("env.resize", "", "[desk] optional bilinear resize HxW; empty = native"),
    ("seed", "0", "[desk] master seed for every stream"),
    ("out_dir", "run", "[desk] output directory, under TERNQ_OUT_ROOT if set"),
    ("eval.episodes", "100", "[desk] greedy evaluation episodes"),
    ("eval.workers", "1", "[desk] parallel evaluation workers"),
    ("teacher.gamma", "0.99", "[paper] discount"),
    ("teacher.lr", "0.00025", "[paper] RMSProp learning rate"),
    ("teacher.rmsprop_momentum", "0.95", "[paper] RMSProp squared-gradient decay"),
    ("teacher.rmsprop_eps", "0.01", "[paper] RMSProp denominator floor"),
    ("teacher.epsilon_start", "1.0", "[paper] exploration start"),
    ("teacher.epsilon_end", "0.1", "[paper] exploration floor"),
    ("teacher.epsilon_anneal", "20000", "[desk] linear anneal steps"),
    ("teacher.target_sync", "1000", "[desk] steps between hard target syncs"),
    ("teacher.replay", "50000", "[desk] replay buffer capacity"),
    ("teacher.batch", "32", "[paper] TD batch size"),
    ("teacher.total_steps", "150000", "[desk] environment step budget"),
    ("teacher.warmup", "1000", "[desk] steps before updates start"),
    ("teacher.update_every", "4", "[desk] environment steps per TD update"),
    ("teacher.eval_interval", "2000", "[desk] steps between greedy evaluations"),
    ("teacher.stop_return", "", "[desk] optional early-stop mean return; empty = off"),
    ("teacher.checkpoint", "", "path to a trained teacher (distill/sweep input)"),
    ("teachers.catch", "", "per-game teacher checkpoint for multi-game runs"),
    ("teachers.minipong", "", "per-game teacher checkpoint for multi-game runs"),
    ("student.tier", "desk-2", "[desk] architecture tier: desk-1..desk-4"),
    ("student.loss", "kl", "[paper] distillation loss: kl, nll, mse"),
    ("student.tau", "0.01", "[paper] distillation temperature"),
    ("student.eta", "0.0001", "[paper] spike-sparsity penalty weight"),
    ("student.lr", "20.0", "[paper] SGD learning rate, scaled per parameter family internally"),
    ("student.momentum", "0.9", "[paper] SGD momentum"),
    ("student.batch", "32", "[paper] distillation batch size"),
    ("student.batches", "50000", "[desk] offline training batches"),
    ("student.train_every", "4", "[paper] online mode: frames per training batch"),
    ("student.gen_frames", "200000", "[desk] teacher frames for dataset generation"),
    ("student.gen_epsilon", "0.1", "[desk] teacher exploration during generation"),
    ("student.buffer", "200000", "[desk] distillation buffer capacity"),
    ("student.levels", "4", "[desk] thermometer transduction levels"),
    ("student.eval_interval", "10000", "[desk] batches between greedy evaluations"),
    ("student.online", "false", "[desk] interleave generation and training"),
    ("student.save_dataset", "false", "[desk] persist generated datasets as .tds files"),
];

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _, _)| *k == key)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, unknown keys are errors naming the key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected 'key = value', got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingInput(format!("config file {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known(key) {
            return Err(Error::config(format!("unknown config key '{key}'")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn raw(&self, key: &str) -> &str {
        debug_assert!(known(key), "lookup of undeclared key {key}");
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(Error::config(format!("missing value for field {key}")));
        }
        v.parse().map_err(|_| {
            Error::config(format!("field {key}: cannot parse '{v}' as {}", std::any::type_name::<T>()))
        })
    }

    fn optional<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key).is_empty() {
            return Ok(None);
        }
        self.parse_as(key).map(Some)
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse_as("seed")
    }

    /// Output directory, rooted at `TERNQ_OUT_ROOT` when that is set and
    /// the configured path is relative.
    pub fn out_dir(&self) -> Result<PathBuf> {
        let dir = PathBuf::from(self.raw("out_dir"));
        if dir.as_os_str().is_empty() {
            return Err(Error::config("missing value for field out_dir".to_string()));
        }
        match std::env::var_os("TERNQ_OUT_ROOT") {
            Some(root) if dir.is_relative() => Ok(PathBuf::from(root).join(dir)),
            _ => Ok(dir),
        }
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        let name: String = self.parse_as("env.name")?;
        let resize = match self.raw("env.resize") {
            "" => None,
            s => {
                let (h, w) = s.split_once('x').ok_or_else(|| {
                    Error::config(format!("field env.resize: expected HxW, got '{s}'"))
                })?;
                Some((
                    h.trim().parse().map_err(|_| Error::config("field env.resize: bad height".to_string()))?,
                    w.trim().parse().map_err(|_| Error::config("field env.resize: bad width".to_string()))?,
                ))
            }
        };
        let spec = EnvSpec {
            name,
            grid: self.parse_as("env.grid")?,
            render_scale: self.parse_as("env.render_scale")?,
            resize,
        };
        // fail now, not at run time, if the game name or geometry is bad
        spec.build(0)?;
        Ok(spec)
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        let cfg = TeacherConfig {
            gamma: self.parse_as("teacher.gamma")?,
            lr: self.parse_as("teacher.lr")?,
            rmsprop_decay: self.parse_as("teacher.rmsprop_momentum")?,
            rmsprop_eps: self.parse_as("teacher.rmsprop_eps")?,
            epsilon_start: self.parse_as("teacher.epsilon_start")?,
            epsilon_end: self.parse_as("teacher.epsilon_end")?,
            epsilon_anneal: self.parse_as("teacher.epsilon_anneal")?,
            target_sync: self.parse_as("teacher.target_sync")?,
            replay_capacity: self.parse_as("teacher.replay")?,
            batch: self.parse_as("teacher.batch")?,
            total_steps: self.parse_as("teacher.total_steps")?,
            warmup: self.parse_as("teacher.warmup")?,
            update_every: self.parse_as("teacher.update_every")?,
            eval_interval: self.parse_as("teacher.eval_interval")?,
            eval_episodes: self.parse_as("eval.episodes")?,
            eval_workers: self.parse_as("eval.workers")?,
            stop_return: self.optional("teacher.stop_return")?,
            ..TeacherConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn student_config(&self) -> Result<StudentConfig> {
        let loss: String = self.parse_as("student.loss")?;
        let cfg = StudentConfig {
            loss: loss.parse()?,
            tau: self.parse_as("student.tau")?,
            eta: self.parse_as("student.eta")?,
            lr: self.parse_as("student.lr")?,
            momentum: self.parse_as("student.momentum")?,
            batch: self.parse_as("student.batch")?,
            batches: self.parse_as("student.batches")?,
            train_every: self.parse_as("student.train_every")?,
            gen_frames: self.parse_as("student.gen_frames")?,
            gen_epsilon: self.parse_as("student.gen_epsilon")?,
            buffer_capacity: self.parse_as("student.buffer")?,
            levels: self.parse_as("student.levels")?,
            eval_interval: self.parse_as("student.eval_interval")?,
            eval_episodes: self.parse_as("eval.episodes")?,
            eval_workers: self.parse_as("eval.workers")?,
            ..StudentConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn student_tier(&self) -> Result<String> {
        self.parse_as("student.tier")
    }

    pub fn student_online(&self) -> Result<bool> {
        self.parse_as("student.online")
    }

    pub fn save_dataset(&self) -> Result<bool> {
        self.parse_as("student.save_dataset")
    }

    /// Teacher checkpoint path for `game` in multi-game mode, or the
    /// single `teacher.checkpoint` when `game` is None.
    pub fn teacher_checkpoint(&self, game: Option<&str>) -> Result<PathBuf> {
        let key = match game {
            None => "teacher.checkpoint".to_string(),
            Some(g) => format!("teachers.{g}"),
        };
        if !known(&key) {
            return Err(Error::config(format!(
                "no teacher checkpoint key for game '{}'",
                game.unwrap_or("?")
            )));
        }
        let v = self.raw(&key);
        if v.is_empty() {
            return Err(Error::MissingInput(format!(
                "field {key} is empty; point it at a trained teacher checkpoint"
            )));
        }
        Ok(PathBuf::from(v))
    }

    /// The resolved key=value text, hashed into the manifest and written
    /// next to the artifacts so a run can be reproduced exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    /// The annotated default template `print-config` emits.
    pub fn template() -> String {
        let mut out = String::from("# experiment configuration: key = value, '#' comments\n");
        let mut section = "";
        for (k, v, help) in KEYS {
            let head = k.split('.').next().unwrap_or("");
            if head != section {
                section = head;
                out.push('\n');
            }
            out.push_str(&format!("{k} = {v:<12} # {help}\n"));
        }
        out
    }
}
