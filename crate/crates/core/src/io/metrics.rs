//! Line-delimited JSON metrics history, one [`StepMetrics`] object per line.

use std::path::Path;

use crate::distill::StepMetrics;
use crate::error::Result;
use crate::io::archive::write_atomic;

pub fn to_jsonl(history: &[StepMetrics]) -> Result<String> {
    let mut out = String::new();
    for m in history {
        out.push_str(&serde_json::to_string(m)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_metrics(path: impl AsRef<Path>, history: &[StepMetrics]) -> Result<()> {
    write_atomic(path.as_ref(), to_jsonl(history)?.as_bytes())
}

pub fn parse_metrics(text: &str) -> Result<Vec<StepMetrics>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    parse_metrics(&std::fs::read_to_string(path)?)
}
