//! Training metrics: per-step loss rows, per-(task, epoch) evaluation rows,
//! and their CSV / JSON-lines renderings.

use std::io;
use std::path::Path;

use serde::Serialize;

pub const STEPS_CSV_HEADER: &str = "task_index,epoch,step,loss_total,loss_recon,kl_z,kl_delta,kl_s,teacher_critic_loss,teacher_gen_loss";
pub const EVAL_CSV_HEADER: &str = "task_index,epoch,eval_task,metric,value";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub task_index: usize,
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_recon: f64,
    pub kl_z: f64,
    pub kl_delta: f64,
    pub kl_s: f64,
    pub teacher_critic_loss: f64,
    pub teacher_gen_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub task_index: usize,
    pub epoch: usize,
    pub eval_task: usize,
    /// "accuracy" (percent) or "nll" (nats), depending on the training mode.
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Event<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    pub fn new() -> Self {
        MetricsLog::default()
    }

    pub fn steps_csv(&self) -> String {
        let mut out = String::from(STEPS_CSV_HEADER);
        out.push('\n');
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.task_index,
                s.epoch,
                s.step,
                s.loss_total,
                s.loss_recon,
                s.kl_z,
                s.kl_delta,
                s.kl_s,
                s.teacher_critic_loss,
                s.teacher_gen_loss
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for e in &self.evals {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.task_index, e.epoch, e.eval_task, e.metric, e.value
            ));
        }
        out
    }

    /// Machine-readable mirror of both CSVs, one JSON object per line in
    /// logging order (steps first, then evaluations).
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(&Event::Step(s)).expect("serializable"));
            out.push('\n');
        }
        for e in &self.evals {
            out.push_str(&serde_json::to_string(&Event::Eval(e)).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// Writes metrics.csv, accuracy.csv and events.jsonl under `dir`.
    pub fn write_all(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), self.steps_csv())?;
        std::fs::write(dir.join("accuracy.csv"), self.eval_csv())?;
        std::fs::write(dir.join("events.jsonl"), self.events_jsonl())?;
        Ok(())
    }

    /// Evaluation value for one (task_index, epoch, eval_task) triple.
    pub fn eval_value(&self, task_index: usize, epoch: usize, eval_task: usize) -> Option<f64> {
        self.evals
            .iter()
            .find(|e| e.task_index == task_index && e.epoch == epoch && e.eval_task == eval_task)
            .map(|e| e.value)
    }
}
