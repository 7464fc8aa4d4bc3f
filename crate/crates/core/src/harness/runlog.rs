//! Per-step and per-evaluation training records, written as CSV.
//!
//! `steps.csv` columns: `step,loss,d,d_clipped,lr,wall_ms`. `loss` is the mean
//! of the two probe losses taken at that step; `wall_ms` is elapsed time since
//! the run started (0 in deterministic mode). `eval.csv` columns:
//! `step,split,metric,value`. Both carry a run header in `run_header.txt`.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub const RUNLOG_SCHEMA: &str = "qzo-runlog/1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub d: f64,
    pub d_clipped: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub step: usize,
    pub split: &'static str,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub header: Vec<(String, String)>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Step at which a non-finite loss or derivative appeared.
    pub collapsed_at: Option<usize>,
}

impl RunLog {
    pub fn collapsed(&self) -> bool {
        self.collapsed_at.is_some()
    }

    /// Directional derivatives after clipping, in step order.
    pub fn clipped_derivatives(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|r| r.d_clipped)
    }

    pub fn write_steps(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,loss,d,d_clipped,lr,wall_ms")?;
        for r in &self.steps {
            writeln!(w, "{},{:e},{:e},{:e},{:e},{}", r.step, r.loss, r.d, r.d_clipped, r.lr, r.wall_ms)?;
        }
        Ok(())
    }

    pub fn write_evals(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,split,metric,value")?;
        for e in &self.evals {
            writeln!(w, "{},{},{},{:e}", e.step, e.split, e.metric, e.value)?;
        }
        Ok(())
    }

    pub fn write_header(&self, mut w: impl Write) -> Result<()> {
        for (k, v) in &self.header {
            for line in v.lines() {
                writeln!(w, "{k}: {line}")?;
            }
        }
        match self.collapsed_at {
            Some(step) => writeln!(w, "status: collapsed at step {step}")?,
            None => writeln!(w, "status: completed")?,
        }
        Ok(())
    }

    /// Write `steps.csv`, `eval.csv` and `run_header.txt` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        self.write_steps(&mut buf)?;
        std::fs::write(dir.join("steps.csv"), &buf)?;
        buf.clear();
        self.write_evals(&mut buf)?;
        std::fs::write(dir.join("eval.csv"), &buf)?;
        buf.clear();
        self.write_header(&mut buf)?;
        std::fs::write(dir.join("run_header.txt"), &buf)?;
        Ok(())
    }

    pub fn steps_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_steps(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}
