//! File emission: a hashed JSON envelope for the convergence report, flat
//! CSV tables for the per-level summaries and histograms. Everything except
//! the timestamp is a pure function of the report content; the hash covers
//! exactly the timestamp-free payload so reruns can be compared byte for
//! byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use eki_core::ConvergenceReport;

use crate::runner::{hist_edge, LevelHistogram, RunOutcome, HIST_BINS};
use crate::scenario::SCHEMA_VERSION;

#[derive(Debug, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub schema_version: u32,
    /// Wall-clock seconds at emission; excluded from the hash.
    pub created_unix: u64,
    /// Hex SHA-256 of the canonical JSON serialization of `report`.
    pub payload_sha256: String,
    pub report: ConvergenceReport,
}

pub fn payload_hash(report: &ConvergenceReport) -> Result<String> {
    let payload = serde_json::to_vec(report).context("serializing report payload")?;
    let mut hasher = Sha256::new();
    hasher.update(&payload);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn envelope(report: ConvergenceReport) -> Result<ReportEnvelope> {
    let payload_sha256 = payload_hash(&report)?;
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(ReportEnvelope {
        schema_version: SCHEMA_VERSION,
        created_unix,
        payload_sha256,
        report,
    })
}

/// Reads an envelope back and refuses one whose payload does not match its
/// recorded hash.
pub fn read_envelope(path: &Path) -> Result<ReportEnvelope> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading report {}", path.display()))?;
    let env: ReportEnvelope = serde_json::from_str(&text)
        .with_context(|| format!("parsing report {}", path.display()))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(anyhow!(
            "{}: schema_version {} unsupported (expected {SCHEMA_VERSION})",
            path.display(),
            env.schema_version
        ));
    }
    let expected = payload_hash(&env.report)?;
    if expected != env.payload_sha256 {
        return Err(anyhow!(
            "{}: payload hash mismatch (file says {}, content gives {expected})",
            path.display(),
            env.payload_sha256
        ));
    }
    Ok(env)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-level summary table. Empty cells mean the statistic is undefined
/// (every replica at that level exploded).
pub fn report_csv(report: &ConvergenceReport) -> String {
    let mut out = String::new();
    out.push_str(
        "schema_version,level,h,replicas,mean_sup_error,sup_error_se,moment_value,moment_se,\
         moment_excluded,p_hat,ci_low,ci_high,exploded_fraction,second_moment_sup\n",
    );
    for l in &report.levels {
        let _ = writeln!(
            out,
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            l.level,
            l.h,
            l.replicas,
            fmt_opt(l.mean_sup_error),
            fmt_opt(l.sup_error_se),
            fmt_opt(l.moment_value),
            fmt_opt(l.moment_se),
            l.moment_excluded,
            l.p_hat,
            l.ci_low,
            l.ci_high,
            l.exploded_fraction,
            l.second_moment_sup,
        );
    }
    out
}

/// One histogram table: half-decade buckets of the sup-error, with
/// underflow and overflow rows. Exploded replicas land in the overflow row.
pub fn histogram_csv(hist: &LevelHistogram) -> String {
    let mut out = String::new();
    out.push_str("schema_version,level,bucket,lo,hi,count\n");
    let _ = writeln!(
        out,
        "{SCHEMA_VERSION},{},underflow,0,{},{}",
        hist.level,
        hist_edge(0),
        hist.underflow
    );
    for (i, c) in hist.counts.iter().enumerate() {
        let _ = writeln!(
            out,
            "{SCHEMA_VERSION},{},bin_{i:02},{},{},{c}",
            hist.level,
            hist_edge(i),
            hist_edge(i + 1),
        );
    }
    let _ = writeln!(
        out,
        "{SCHEMA_VERSION},{},overflow_or_exploded,{},inf,{}",
        hist.level,
        hist_edge(HIST_BINS),
        hist.overflow
    );
    out
}

/// Writes report.json, report.csv, and one histogram CSV per level into
/// `out_dir`. Returns the paths written.
pub fn write_run_outputs(out_dir: &Path, outcome: &RunOutcome) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let mut written = Vec::new();

    let env = envelope(outcome.report.clone())?;
    let json =
        serde_json::to_string_pretty(&env).context("serializing report envelope")?;
    let path = out_dir.join("report.json");
    std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    written.push(path);

    let path = out_dir.join("report.csv");
    std::fs::write(&path, report_csv(&outcome.report))
        .with_context(|| format!("writing {}", path.display()))?;
    written.push(path);

    for hist in &outcome.histograms {
        let path = out_dir.join(format!("hist_level_{:02}.csv", hist.level));
        std::fs::write(&path, histogram_csv(hist))
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
