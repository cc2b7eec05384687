//! Plain-text feature files.
//!
//! ```text
//! REIDFEAT 1 F=<int>
//! <dataset_id> <camera_id> <person_id|-> <tracklet_id> <t_start> <t_end> <f_1> ... <f_F>
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! save/load cycle reproduces every value bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &str = "REIDFEAT";
const FEATURE_VERSION: &str = "1";
const META_COLUMNS: usize = 6;

pub fn load_features(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(BufReader::new(file), path)
}

/// Parses a feature file from any reader; `origin` names it in errors.
pub fn read_features(reader: impl Read, origin: &Path) -> Result<Dataset> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(origin, e))?,
        None => return Err(Error::parse(origin, 1, "missing header")),
    };
    let feature_dim = parse_header(&header).map_err(|m| Error::parse(origin, 1, m))?;

    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_row(&line, feature_dim).map_err(|m| Error::parse(origin, lineno, m))?;
        samples.push(sample);
    }
    Dataset::new(feature_dim, samples)
}

fn parse_header(header: &str) -> Result<usize, String> {
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FEATURE_MAGIC) {
        return Err(format!("expected `{FEATURE_MAGIC}` header"));
    }
    match parts.next() {
        Some(FEATURE_VERSION) => {}
        Some(v) => return Err(format!("unsupported version {v}")),
        None => return Err("missing version".into()),
    }
    let dim = parts
        .next()
        .and_then(|p| p.strip_prefix("F="))
        .ok_or_else(|| "missing `F=<int>`".to_string())?;
    if parts.next().is_some() {
        return Err("trailing tokens in header".into());
    }
    dim.parse::<usize>()
        .map_err(|_| format!("bad feature dimension `{dim}`"))
}

fn parse_row(line: &str, feature_dim: usize) -> Result<Sample, String> {
    let tokens: Vec<&str> = line.split(' ').filter(|t| !t.is_empty()).collect();
    if tokens.len() != META_COLUMNS + feature_dim {
        return Err(format!(
            "expected {} features, found {}",
            feature_dim,
            tokens.len().saturating_sub(META_COLUMNS)
        ));
    }
    fn num<T: std::str::FromStr>(tok: &str, what: &str) -> Result<T, String> {
        tok.parse().map_err(|_| format!("bad {what} `{tok}`"))
    }
    let person_id = match tokens[2] {
        "-" => None,
        t => Some(num(t, "person id")?),
    };
    let time_start: f64 = num(tokens[4], "start time")?;
    let time_end: f64 = num(tokens[5], "end time")?;
    if !time_start.is_finite() || !time_end.is_finite() {
        return Err("non-finite time".into());
    }
    if time_start > time_end {
        return Err(format!("interval [{time_start}, {time_end}] is reversed"));
    }
    let mut features = Vec::with_capacity(feature_dim);
    for tok in &tokens[META_COLUMNS..] {
        let v: f64 = num(tok, "feature")?;
        if !v.is_finite() {
            return Err(format!("non-finite feature `{tok}`"));
        }
        features.push(v);
    }
    Ok(Sample {
        features,
        dataset_id: num(tokens[0], "dataset id")?,
        camera_id: num(tokens[1], "camera id")?,
        person_id,
        tracklet_id: num(tokens[3], "tracklet id")?,
        time_start,
        time_end,
    })
}

pub fn save_features(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_features(dataset, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_features(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "{FEATURE_MAGIC} {FEATURE_VERSION} F={}",
        dataset.feature_dim()
    )?;
    let mut line = String::new();
    for s in dataset.samples() {
        line.clear();
        let _ = write!(line, "{} {} ", s.dataset_id, s.camera_id);
        match s.person_id {
            Some(p) => {
                let _ = write!(line, "{p}");
            }
            None => line.push('-'),
        }
        let _ = write!(
            line,
            " {} {:?} {:?}",
            s.tracklet_id, s.time_start, s.time_end
        );
        for v in &s.features {
            let _ = write!(line, " {v:?}");
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}
