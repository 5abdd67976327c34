//! Output files: sorted-key JSON, CSV tables, optional SVG plots, and a run
//! manifest. Files are staged in memory and written together so a failed run
//! leaves nothing behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pretty JSON with object keys in sorted order and a trailing newline.
pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // `Value` maps are ordered by key
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Shortest round-trip decimal form; non-finite values as `nan`, `inf`, `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:?}")
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.header.len() {
            return Err(Error::Parameter(format!(
                "csv row has {} cells, header has {}",
                cells.len(),
                self.header.len()
            )));
        }
        self.rows.push(cells);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

impl Format {
    fn of(name: &str) -> Option<Format> {
        match Path::new(name).extension().and_then(|e| e.to_str()) {
            Some("csv") => Some(Format::Csv),
            Some("json") => Some(Format::Json),
            Some("svg") => Some(Format::Svg),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Ties every output to its configuration. Timestamps live only here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<OutputEntry>,
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Staged output files keyed by relative name.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    files: BTreeMap<String, Vec<u8>>,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> Result<()> {
        self.add(name, to_sorted_json(value)?);
        Ok(())
    }

    pub fn add_csv(&mut self, name: impl Into<String>, csv: &Csv) {
        self.add(name, csv.render());
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.get(name).map(|v| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(|k| k.as_str())
    }

    /// Keeps files whose extension is in `formats`, plus non-tabular files
    /// such as checkpoints.
    pub fn retain_formats(&mut self, formats: &[Format]) {
        self.files
            .retain(|name, _| Format::of(name).is_none_or(|f| formats.contains(&f)));
    }

    /// Writes every staged file and `manifest.json` under `dir`.
    pub fn commit(self, dir: &Path, mut manifest: RunManifest) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        manifest.outputs.clear();
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&path, bytes)?;
            manifest.outputs.push(OutputEntry {
                file: name.clone(),
                sha256: hex::encode(Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            });
            written.push(path);
        }
        manifest.finished_unix_ms = unix_ms();
        let path = dir.join("manifest.json");
        std::fs::write(&path, to_sorted_json(&manifest)?)?;
        written.push(path);
        Ok(written)
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<path d="M{PAD} {PAD} V{} H{}" stroke="#444" fill="none"/>"##,
        H - PAD,
        W - PAD
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Bars over `[−1, 1]`.
pub fn svg_histogram(title: &str, counts: &[u64]) -> String {
    let mut s = svg_open(title);
    let max = counts.iter().copied().max().unwrap_or(1).max(1) as f64;
    let bw = (W - 2.0 * PAD) / counts.len().max(1) as f64;
    for (i, c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * *c as f64 / max;
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#1f77b4"/>"##,
            PAD + i as f64 * bw,
            H - PAD - h,
            (bw - 1.0).max(0.5),
            h
        );
    }
    for (x, label) in [(PAD, "-1"), (W / 2.0, "0"), (W - PAD, "1")] {
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            H - PAD + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot, one polyline per named series; log10 y when `log_y`.
pub fn svg_curves(title: &str, series: &[(String, Vec<f64>)], log_y: bool) -> String {
    let mut s = svg_open(title);
    let tf = |v: f64| if log_y { v.max(1e-300).log10() } else { v };
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().map(|x| tf(*x))));
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(2) as f64;
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                let x = PAD + (W - 2.0 * PAD) * i as f64 / (len - 1.0);
                let y = H - PAD - (H - 2.0 * PAD) * (tf(*v) - lo) / (hi - lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            W - PAD - 100.0,
            PAD + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Scatter of 2D points colored by label.
pub fn svg_scatter(title: &str, points: &[[f64; 2]], labels: &[usize]) -> String {
    let mut s = svg_open(title);
    let (x0, x1) = range(points.iter().map(|p| p[0]));
    let (y0, y1) = range(points.iter().map(|p| p[1]));
    for (p, l) in points.iter().zip(labels) {
        let x = PAD + (W - 2.0 * PAD) * (p[0] - x0) / (x1 - x0);
        let y = H - PAD - (H - 2.0 * PAD) * (p[1] - y0) / (y1 - y0);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}"/>"#,
            PALETTE[l % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_keys_are_sorted() {
        #[derive(Serialize)]
        struct S {
            zeta: u8,
            alpha: u8,
        }
        let s = to_sorted_json(&S { zeta: 1, alpha: 2 }).unwrap();
        assert!(s.find("alpha").unwrap() < s.find("zeta").unwrap());
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, -2.5e10, 0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    #[test]
    fn csv_checks_width() {
        let mut c = Csv::new(&["a", "b"]);
        c.row(vec!["1".into(), "2".into()]).unwrap();
        assert!(c.row(vec!["1".into()]).is_err());
        assert_eq!(c.render(), "a,b\n1,2\n");
    }

    #[test]
    fn commit_writes_manifest_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = Outputs::new();
        o.add("x.csv", "a\n1\n");
        o.add("x.svg", "<svg/>");
        o.add("m.hywu", vec![1u8, 2]);
        o.retain_formats(&[Format::Csv]);
        let manifest = RunManifest {
            command: "t".into(),
            config_hash: "h".into(),
            seed: 1,
            tool_version: "0".into(),
            started_unix_ms: 0,
            finished_unix_ms: 0,
            outputs: Vec::new(),
        };
        o.commit(dir.path(), manifest).unwrap();
        assert!(dir.path().join("x.csv").exists());
        assert!(!dir.path().join("x.svg").exists());
        assert!(dir.path().join("m.hywu").exists());
        let m: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m.outputs.len(), 2);
        assert_eq!(m.outputs[1].sha256, hex::encode(Sha256::digest(b"a\n1\n")));
    }

    #[test]
    fn svgs_are_well_formed_enough() {
        for s in [
            svg_histogram("h", &[1, 2, 3]),
            svg_curves("c", &[("a".into(), vec![1.0, 0.5, 0.1])], true),
            svg_scatter("s", &[[0.0, 1.0], [1.0, 0.0]], &[0, 1]),
        ] {
            assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        }
    }
}
