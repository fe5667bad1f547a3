//! Round-by-round metric logging as CSV.
//!
//! Reals are written with 17 significant digits, which round-trips every
//! f64 exactly; the kept-subset accuracy uses -1 as its no-kept-examples
//! sentinel so the column stays numeric.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "round,test_accuracy,label_accuracy,threshold_accuracy,label_ratio,loss_sup,loss_unsup";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    pub test_accuracy: f64,
    pub label_accuracy: f64,
    pub threshold_accuracy: f64,
    pub label_ratio: f64,
    pub loss_sup: f64,
    pub loss_unsup: f64,
}

impl RoundLog {
    fn to_csv_line(self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.round,
            self.test_accuracy,
            self.label_accuracy,
            self.threshold_accuracy,
            self.label_ratio,
            self.loss_sup,
            self.loss_unsup,
        )
    }
}

pub fn write_round_csv(logs: &[RoundLog], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for log in logs {
        writeln!(w, "{}", log.to_csv_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_round_csv(path: &Path) -> Result<Vec<RoundLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(Error::format(0, format!("unexpected CSV header {header:?}")))
        }
        None => return Err(Error::format(0, "empty CSV file".to_string())),
    }
    let mut logs = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::format(
                0,
                format!("line {}: {} fields, expected 7", lineno + 1, fields.len()),
            ));
        }
        let real = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::format(0, format!("line {}: bad real {:?}", lineno + 1, fields[i])))
        };
        logs.push(RoundLog {
            round: fields[0].parse().map_err(|_| {
                Error::format(0, format!("line {}: bad round {:?}", lineno + 1, fields[0]))
            })?,
            test_accuracy: real(1)?,
            label_accuracy: real(2)?,
            threshold_accuracy: real(3)?,
            label_ratio: real(4)?,
            loss_sup: real(5)?,
            loss_unsup: real(6)?,
        });
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample_logs() -> Vec<RoundLog> {
        let mut rng = crate::rng::derive_rng(11, &[0xC5]);
        (1..=5)
            .map(|round| RoundLog {
                round,
                test_accuracy: rng.random_range(0.0..1.0),
                label_accuracy: rng.random_range(0.0..1.0),
                threshold_accuracy: if round == 3 { -1.0 } else { rng.random_range(0.0..1.0) },
                label_ratio: rng.random_range(0.0..1.0),
                loss_sup: rng.random_range(0.0..3.0),
                loss_unsup: rng.random_range(0.0..3.0),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let logs = sample_logs();
        write_round_csv(&logs, &path).unwrap();
        let back = parse_round_csv(&path).unwrap();
        assert_eq!(logs, back);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().count(), logs.len() + 1);
        // Sentinel row stays numeric, not NaN text.
        assert!(text.lines().nth(3).unwrap().contains("-1.0000000000000000e0"));
    }

    #[test]
    fn header_only_file_is_an_empty_log() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_round_csv(&[], &path).unwrap();
        assert_eq!(parse_round_csv(&path).unwrap(), vec![]);
    }

    #[test]
    fn malformed_files_name_the_problem() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");

        std::fs::write(&path, "wrong,header\n").unwrap();
        let err = parse_round_csv(&path).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");

        std::fs::write(&path, format!("{CSV_HEADER}\n1,0.5,0.5\n")).unwrap();
        let err = parse_round_csv(&path).unwrap_err();
        assert!(err.to_string().contains("3 fields"), "{err}");

        std::fs::write(&path, format!("{CSV_HEADER}\n1,x,0,0,0,0,0\n")).unwrap();
        let err = parse_round_csv(&path).unwrap_err();
        assert!(err.to_string().contains("bad real"), "{err}");
    }
}
