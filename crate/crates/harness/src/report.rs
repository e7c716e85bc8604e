use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::sweep::{Cell, Comparison, Grid};
use crate::HarnessError;

pub const CSV_HEADER: [&str; 7] = ["histories", "ranking", "epsilon", "mean", "sd", "diverged", "restarts"];

/// Epsilon as written in CSV files: `0`, `1e-9`, `1e-1`.
pub fn csv_epsilon(epsilon: f64) -> String {
    if epsilon == 0.0 {
        "0".into()
    } else {
        format!("{epsilon:e}")
    }
}

/// Epsilon as written in table headers: `0`, `1E-9`, `0.1`.
pub fn table_epsilon(epsilon: f64) -> String {
    if epsilon == 0.0 {
        "0".into()
    } else if epsilon >= 0.01 {
        format!("{epsilon}")
    } else {
        format!("{epsilon:E}")
    }
}

fn csv_row(cell: &Cell) -> [String; 7] {
    [
        cell.histories.to_string(),
        cell.ranking.to_string(),
        csv_epsilon(cell.epsilon),
        format!("{:.6}", cell.stats.mean),
        format!("{:.6}", cell.stats.sd),
        cell.stats.diverged.to_string(),
        cell.stats.restarts.to_string(),
    ]
}

/// Writes the whole grid as CSV. Wall times are left out so that the output
/// is byte-stable.
pub fn write_csv<W: Write>(grid: &Grid, out: W) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(CSV_HEADER)?;
    for cell in &grid.cells {
        writer.write_record(csv_row(cell))?;
    }
    writer.flush().map_err(|source| HarnessError::Io {
        path: PathBuf::from("<csv>"),
        source,
    })?;
    Ok(())
}

pub fn render_csv(grid: &Grid) -> String {
    let mut buf = Vec::new();
    write_csv(grid, &mut buf).expect("writing to memory does not fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// CSV file that grows one flushed row per finished cell.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let file = File::create(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut sink = Self {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        };
        sink.write(&CSV_HEADER.map(String::from))?;
        Ok(sink)
    }

    pub fn append(&mut self, cell: &Cell) -> Result<(), HarnessError> {
        self.write(&csv_row(cell))
    }

    fn write(&mut self, row: &[String]) -> Result<(), HarnessError> {
        self.writer.write_record(row)?;
        self.writer.flush().map_err(|source| HarnessError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Cell text: `13.36 (sd=2.91)`, or `F` for a diverged cell.
pub fn format_cell(cell: &Cell) -> String {
    if cell.stats.diverged {
        "F".into()
    } else {
        format!("{:.2} (sd={:.2})", cell.stats.mean, cell.stats.sd)
    }
}

/// Fixed-width table with one row per (histories, ranking) pair and one
/// column per epsilon. Missing cells of a partial grid are left blank.
pub fn render_table(grid: &Grid) -> String {
    let mut header = vec!["histories".to_string(), "ranking".to_string()];
    header.extend(grid.epsilon.iter().map(|&e| format!("ε={}", table_epsilon(e))));

    let mut rows = Vec::new();
    for &h in &grid.histories {
        for &r in &grid.ranking {
            let mut row = vec![h.to_string(), r.to_string()];
            for &e in &grid.epsilon {
                row.push(grid.get(h, r, e).map(format_cell).unwrap_or_default());
            }
            rows.push(row);
        }
    }

    let width = |i: usize| {
        rows.iter()
            .map(|row: &Vec<String>| row[i].chars().count())
            .chain(std::iter::once(header[i].chars().count()))
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = (0..header.len()).map(width).collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{}{}", " ".repeat(w - c.chars().count()), c))
            .collect();
        padded.join("  ")
    };

    let mut out = line(&header);
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

pub fn render_comparison(cmp: &Comparison) -> String {
    let mut out = format!(
        "ciqn settings: histories={} ranking={} epsilon={}\n",
        cmp.histories,
        cmp.ranking,
        table_epsilon(cmp.epsilon)
    );
    out.push_str(&format!("{:<8}  {:>10}  {:>8}  {:>8}\n", "accel", "mean", "sd", "diverged"));
    for entry in &cmp.entries {
        let (mean, sd) = if entry.stats.diverged {
            ("F".to_string(), "-".to_string())
        } else {
            (format!("{:.2}", entry.stats.mean), format!("{:.2}", entry.stats.sd))
        };
        out.push_str(&format!(
            "{:<8}  {:>10}  {:>8}  {:>8}\n",
            entry.accel.name(),
            mean,
            sd,
            entry.stats.diverged
        ));
    }
    match cmp.speed_ratio() {
        Some(ratio) => out.push_str(&format!("speed ratio (aitken/ciqn iterations): {ratio:.3}\n")),
        None => out.push_str("speed ratio (aitken/ciqn iterations): n/a\n"),
    }
    out
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::sweep::CellStats;

    fn cell(h: usize, r: usize, e: f64, mean: f64, sd: f64, diverged: bool) -> Cell {
        Cell {
            histories: h,
            ranking: r,
            epsilon: e,
            stats: CellStats {
                mean,
                sd,
                diverged,
                filtered: 0,
                restarts: 2,
                steps: 50,
                wall_time: Duration::from_millis(12),
                failure: None,
            },
        }
    }

    fn grid() -> Grid {
        Grid {
            histories: vec![0, 2],
            ranking: vec![5],
            epsilon: vec![0.0, 1e-9, 0.1],
            cells: vec![
                cell(0, 5, 0.0, 14.0, 1.0, false),
                cell(0, 5, 1e-9, 13.36, 2.91, false),
                cell(0, 5, 0.1, 9.0, 0.0, true),
                cell(2, 5, 0.0, 17.76, 2.905, false),
            ],
        }
    }

    #[test]
    fn cell_format_follows_the_table_style() {
        assert_eq!(format_cell(&cell(0, 5, 0.0, 14.0, 1.0, false)), "14.00 (sd=1.00)");
        assert_eq!(format_cell(&cell(0, 5, 0.0, 13.36, 2.91, false)), "13.36 (sd=2.91)");
        assert_eq!(format_cell(&cell(0, 5, 0.0, 13.36, 2.91, true)), "F");
    }

    #[test]
    fn epsilon_labels() {
        assert_eq!(csv_epsilon(0.0), "0");
        assert_eq!(csv_epsilon(1e-9), "1e-9");
        assert_eq!(csv_epsilon(0.1), "1e-1");
        assert_eq!(table_epsilon(1e-9), "1E-9");
        assert_eq!(table_epsilon(1e-3), "1E-3");
        assert_eq!(table_epsilon(0.1), "0.1");
    }

    #[test]
    fn csv_has_fixed_columns_and_no_wall_time() {
        let text = render_csv(&grid());
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("histories,ranking,epsilon,mean,sd,diverged,restarts"));
        assert_eq!(lines.next(), Some("0,5,0,14.000000,1.000000,false,2"));
        assert_eq!(lines.nth(1), Some("0,5,1e-1,9.000000,0.000000,true,2"));
        assert_eq!(text, render_csv(&grid()));
    }

    #[test]
    fn table_marks_diverged_and_missing_cells() {
        let table = render_table(&grid());
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("ε=1E-9") && lines[0].contains("ε=0.1"));
        assert!(lines[2].ends_with("  F"));
        assert!(lines[2].contains("13.36 (sd=2.91)"));
        assert!(lines[3].contains("17.76 (sd=2.90)") || lines[3].contains("17.76 (sd=2.91)"));
        let widths: Vec<usize> = lines.iter().map(|l| l.chars().count()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{widths:?}");
        assert_eq!(table, render_table(&grid()));
    }
}
