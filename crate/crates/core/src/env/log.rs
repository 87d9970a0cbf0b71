//! Line-delimited episode logs: one `step,action,reward,terminal` record
//! per environment step. Replaying a log's actions against a same-seeded
//! environment must reproduce the rewards and terminal flags exactly, which
//! the tests use to pin environment determinism.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub action: usize,
    pub reward: f64,
    pub terminal: bool,
}

pub fn format_log(records: &[LogRecord]) -> String {
    let mut out = String::from("step,action,reward,terminal\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.action, r.reward, r.terminal as u8));
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<LogRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("step,action,reward,terminal") => {}
        other => {
            return Err(Error::corrupt(format!("episode log header missing, got {other:?}")));
        }
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::corrupt(format!("episode log line {}: {line:?}", i + 2)));
        }
        let bad = |what: &str| Error::corrupt(format!("episode log line {}: bad {what}", i + 2));
        records.push(LogRecord {
            step: fields[0].parse().map_err(|_| bad("step"))?,
            action: fields[1].parse().map_err(|_| bad("action"))?,
            reward: fields[2].parse().map_err(|_| bad("reward"))?,
            terminal: match fields[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad("terminal")),
            },
        });
    }
    Ok(records)
}
