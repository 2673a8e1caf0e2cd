//! Line-delimited JSON run log: every event goes to `<out>/<command>.log.jsonl`
//! and, except routine step records, to stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use vl3d::config::RunConfig;
use vl3d::pipeline::TrainLog;
use vl3d::{Error, Result};

/// Step records echoed to stderr every this many steps.
const ECHO_EVERY: usize = 25;

pub struct Log {
    command: String,
    file: Option<BufWriter<File>>,
}

impl Log {
    pub fn create(cfg: &RunConfig, command: &str, dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                let path = d.join(format!("{command}.log.jsonl"));
                let f = File::create(&path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut log = Self { command: command.to_string(), file };
        log.event("start", json!({ "config_hash": cfg.hash(), "seed": cfg.train.seed }));
        Ok(log)
    }

    fn write(&mut self, event: &str, fields: Value, echo: bool) {
        let mut m = Map::new();
        m.insert("cmd".into(), json!(self.command));
        m.insert("event".into(), json!(event));
        if let Value::Object(f) = fields {
            m.extend(f);
        }
        let line = Value::Object(m).to_string();
        if let Some(f) = &mut self.file {
            // A lost log line must not abort a run.
            let _ = writeln!(f, "{line}");
        }
        if echo {
            eprintln!("{line}");
        }
    }

    pub fn event(&mut self, event: &str, fields: Value) {
        self.write(event, fields, true);
    }

    pub fn step(&mut self, stage: &str, l: &TrainLog) {
        let echo = l.step % ECHO_EVERY == 0;
        self.write("step", json!({ "stage": stage, "step": l.step, "loss": l.loss, "lr": l.lr }), echo);
    }

    pub fn finish(&mut self, artifact: &Path, steps: &[TrainLog]) {
        let last = steps.last().map(|l| l.loss);
        self.event("done", json!({ "artifact": artifact, "steps": steps.len(), "final_loss": last }));
    }
}

impl Drop for Log {
    fn drop(&mut self) {
        if let Some(f) = &mut self.file {
            let _ = f.flush();
        }
    }
}
