//! Annotation files: one box per line, `classId cx cy w h`, normalized.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};

/// Parses a label file. Blank lines are skipped; every box is validated.
pub fn parse_labels(text: &str) -> Result<Vec<GroundTruthBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "label line {}: expected 5 fields, found {}",
                n + 1,
                fields.len()
            )));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("label line {}: class {:?}", n + 1, fields[0])))?;
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Format(format!("label line {}: value {f:?}", n + 1)))?;
        }
        let gt = GroundTruthBox::new(class_id, v[0], v[1], v[2], v[3]);
        gt.validate()
            .map_err(|e| Error::Format(format!("label line {}: {e}", n + 1)))?;
        out.push(gt);
    }
    Ok(out)
}

/// Formats boxes so that [`parse_labels`] reads back identical values.
pub fn format_labels(boxes: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let bb = b.bbox;
        writeln!(s, "{} {} {} {} {}", b.class_id, bb.cx, bb.cy, bb.w, bb.h).unwrap();
    }
    s
}

pub fn read_labels(path: &Path) -> Result<Vec<GroundTruthBox>> {
    parse_labels(&std::fs::read_to_string(path)?)
}

pub fn write_labels(boxes: &[GroundTruthBox], path: &Path) -> Result<()> {
    std::fs::write(path, format_labels(boxes))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let boxes = vec![
            GroundTruthBox::new(0, 0.1, 0.2, 0.05, 0.0625),
            GroundTruthBox::new(2, 1.0 / 3.0, 0.7, 0.1, 0.1),
        ];
        assert_eq!(parse_labels(&format_labels(&boxes)).unwrap(), boxes);
        assert!(parse_labels("").unwrap().is_empty());
        assert_eq!(parse_labels("\n0 0.5 0.5 0.1 0.1\n\n").unwrap().len(), 1);
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["0 0.5 0.5 0.1", "x 0.5 0.5 0.1 0.1", "0 0.5 0.5 0.1 nan", "0 1.5 0.5 0.1 0.1", "-1 0.5 0.5 0.1 0.1"] {
            assert!(parse_labels(bad).is_err(), "{bad}");
        }
    }
}
