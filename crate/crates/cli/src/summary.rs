//! Mean ± std of final test accuracy per (task, mode) over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::Mode;
use crate::error::{CliError, Result};

/// Final test accuracy of one task in one completed run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunAccuracy {
    pub seed: u64,
    pub task: usize,
    pub mode: Mode,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub task: usize,
    pub mode: Mode,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

pub fn emit_summary(runs: &[RunAccuracy]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(CliError::Data("no completed runs to summarise".into()));
    }
    let mut cells: BTreeMap<(usize, Mode), Vec<f64>> = BTreeMap::new();
    for r in runs {
        cells.entry((r.task, r.mode)).or_default().push(r.test_acc);
    }
    let rows = cells
        .into_iter()
        .map(|((task, mode), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            SummaryRow {
                task,
                mode,
                runs: v.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(Summary { rows })
}

impl Summary {
    pub fn get(&self, task: usize, mode: Mode) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.task == task && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,mode,runs,mean,std\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{:.6},{:.6}", r.task, r.mode.tag(), r.runs, r.mean, r.std);
        }
        s
    }

    /// Tasks down the side, modes across the top, `mean ± std` in percent.
    pub fn to_text(&self) -> String {
        let modes: Vec<Mode> = Mode::ALL
            .into_iter()
            .filter(|m| self.rows.iter().any(|r| r.mode == *m))
            .collect();
        let mut tasks: Vec<usize> = self.rows.iter().map(|r| r.task).collect();
        tasks.dedup();

        let mut table = vec![std::iter::once("task".to_string())
            .chain(modes.iter().map(|m| m.tag().to_string()))
            .collect::<Vec<_>>()];
        for &t in &tasks {
            let mut line = vec![format!("T{}", t + 1)];
            for &m in &modes {
                line.push(match self.get(t, m) {
                    Some(r) => format!("{:.2} ± {:.2}", 100.0 * r.mean, 100.0 * r.std),
                    None => "-".into(),
                });
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        for row in &table {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| {
                    let pad = w - v.chars().count();
                    if c == 0 {
                        format!("{v}{}", " ".repeat(pad))
                    } else {
                        format!("{}{v}", " ".repeat(pad))
                    }
                })
                .collect();
            s.push_str(cells.join("  ").trim_end());
            s.push('\n');
        }
        s
    }
}
