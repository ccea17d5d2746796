//! CSV and JSON file formats.
//!
//! Floats are written with Rust's shortest round-trip `Display`, so every
//! value reads back bit-exactly. Missing optional values are empty fields.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use coadapt_core::gns::GnsTraceRow;
use coadapt_core::orchestrator::AuditRecord;
use coadapt_core::profile::{ConfigTuple, ParallelStrategy, ThroughputEntry, ThroughputProfile};
use coadapt_core::reshard::{Move, Region, TransferPlan};
use coadapt_core::sim::{DecompositionSeries, SimTrace};
use serde::Serialize;

use crate::error::{CliError, Result};

pub const PROFILE_HEADER: &str =
    "d,t,p,global_batch,micro_batch,samples_per_sec,peak_mem_bytes,feasible";
pub const TRACE_HEADER: &str =
    "time_s,step,tokens,global_batch,micro_batch,d,t,p,loss,phi,goodput,command";
pub const AUDIT_HEADER: &str =
    "step,time_s,phi,current_cfg,winner_cfg,current_score,winner_score,penalized,command";
pub const GNS_HEADER: &str = "step,tokens,signal_raw,noise_raw,ema_signal,ema_noise,phi";
pub const PLAN_HEADER: &str = "key,src_rank,dst_rank,offsets,extents,bytes,local";
pub const DECOMPOSITION_HEADER: &str = "time_s,phi,policy,throughput,efficiency,goodput";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

/// Writes `header` then `rows` as CSV.
fn write_csv<W: Write>(w: W, header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let fail = |e: csv::Error| CliError::Internal(format!("csv write failed: {e}"));
    out.write_record(header.split(',')).map_err(fail)?;
    for r in rows {
        out.write_record(&r).map_err(fail)?;
    }
    out.flush()
        .map_err(|e| CliError::Internal(format!("csv flush failed: {e}")))
}

fn save_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let f = create(path)?;
    write_csv(f, header, rows).map_err(|e| match e {
        CliError::Internal(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads CSV records after checking the header, passing each record and
/// its 1-based line number to `f`.
fn read_csv<R: Read>(
    r: R,
    origin: &Path,
    header: &str,
    mut f: impl FnMut(&csv::StringRecord, u64) -> std::result::Result<(), String>,
) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut records = rdr.records();
    let parse_err = |line: u64, message: String| CliError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    match records.next() {
        Some(Ok(h)) => {
            let got: Vec<&str> = h.iter().collect();
            if got.join(",") != header {
                return Err(parse_err(1, format!("expected header `{header}`")));
            }
        }
        Some(Err(e)) => return Err(parse_err(1, e.to_string())),
        None => return Err(parse_err(1, "empty file".into())),
    }
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        f(&rec, line).map_err(|m| parse_err(line, m))?;
    }
    Ok(())
}

fn field<T: FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<T, String> {
    let raw = rec.get(i).ok_or_else(|| format!("missing field `{name}`"))?;
    raw.trim()
        .parse()
        .map_err(|_| format!("bad value `{raw}` for `{name}`"))
}

fn opt_field(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<Option<f64>, String> {
    match rec.get(i).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => field(rec, i, name).map(Some),
    }
}

fn bool_field(rec: &csv::StringRecord, i: usize, name: &str) -> std::result::Result<bool, String> {
    match rec.get(i).map(str::trim) {
        Some("1") => Ok(true),
        Some("0") => Ok(false),
        Some(v) => Err(format!("bad value `{v}` for `{name}` (expected 0 or 1)")),
        None => Err(format!("missing field `{name}`")),
    }
}

fn check_width(rec: &csv::StringRecord, header: &str) -> std::result::Result<(), String> {
    let n = header.split(',').count();
    if rec.len() != n {
        return Err(format!("expected {n} fields, found {}", rec.len()));
    }
    Ok(())
}

/// Parses `d,t,p` (for example `2,1,4`).
pub fn parse_strategy(s: &str) -> Result<ParallelStrategy> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || CliError::Validation(format!("bad strategy `{s}`; expected d,t,p"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: Vec<u32> = parts
        .iter()
        .map(|p| p.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    Ok(ParallelStrategy::new(n[0], n[1], n[2]))
}

/// Parses the `Display` form `d2-t1-p4-bg16-bm1`.
pub fn parse_config(s: &str) -> Result<ConfigTuple> {
    let bad = || CliError::Validation(format!("bad configuration `{s}`; expected d<d>-t<t>-p<p>-bg<B_g>-bm<B_m>"));
    let mut vals = [0u32; 5];
    let prefixes = ["d", "t", "p", "bg", "bm"];
    let parts: Vec<&str> = s.trim().split('-').collect();
    if parts.len() != 5 {
        return Err(bad());
    }
    for ((v, part), pre) in vals.iter_mut().zip(&parts).zip(prefixes) {
        *v = part
            .strip_prefix(pre)
            .and_then(|x| x.parse().ok())
            .ok_or_else(bad)?;
    }
    Ok(ConfigTuple::new(
        ParallelStrategy::new(vals[0], vals[1], vals[2]),
        vals[3],
        vals[4],
    ))
}

pub fn write_profile<W: Write>(profile: &ThroughputProfile, w: W) -> Result<()> {
    let rows = profile.entries().map(|(k, e)| {
        vec![
            k.strategy.d.to_string(),
            k.strategy.t.to_string(),
            k.strategy.p.to_string(),
            k.global_batch.to_string(),
            k.micro_batch.to_string(),
            e.samples_per_second.to_string(),
            e.peak_memory.to_string(),
            flag(e.feasible).into(),
        ]
    });
    write_csv(w, PROFILE_HEADER, rows)
}

pub fn save_profile(profile: &ThroughputProfile, path: &Path) -> Result<()> {
    let rows = {
        let mut buf = Vec::new();
        write_profile(profile, &mut buf)?;
        buf
    };
    let mut f = create(path)?;
    f.write_all(&rows)
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Reads a profile. The CSV does not carry the hardware label or memory
/// capacity, so they are supplied by the caller; `n_gpus` comes from the
/// first row.
pub fn read_profile<R: Read>(
    r: R,
    origin: &Path,
    hardware_id: &str,
    memory_capacity: f64,
) -> Result<ThroughputProfile> {
    let mut profile: Option<ThroughputProfile> = None;
    read_csv(r, origin, PROFILE_HEADER, |rec, _| {
        check_width(rec, PROFILE_HEADER)?;
        let s = ParallelStrategy::new(field(rec, 0, "d")?, field(rec, 1, "t")?, field(rec, 2, "p")?);
        let key = ConfigTuple::new(s, field(rec, 3, "global_batch")?, field(rec, 4, "micro_batch")?);
        let entry = ThroughputEntry {
            samples_per_second: field(rec, 5, "samples_per_sec")?,
            peak_memory: field(rec, 6, "peak_mem_bytes")?,
            feasible: bool_field(rec, 7, "feasible")?,
        };
        let p = match profile.as_mut() {
            Some(p) => p,
            None => {
                let n = u32::try_from(s.world_size()).map_err(|_| "world size overflows".to_string())?;
                profile.insert(ThroughputProfile::new(hardware_id, n, memory_capacity))
            }
        };
        p.insert(key, entry).map_err(|e| e.to_string())
    })?;
    profile.ok_or_else(|| CliError::Parse {
        path: origin.to_path_buf(),
        line: 2,
        message: "profile has no rows".into(),
    })
}

pub fn load_profile(path: &Path, hardware_id: &str, memory_capacity: f64) -> Result<ThroughputProfile> {
    read_profile(open(path)?, path, hardware_id, memory_capacity)
}

pub fn write_plan<W: Write>(plan: &TransferPlan, w: W) -> Result<()> {
    let rows = plan.moves.iter().map(|m| {
        vec![
            m.key.clone(),
            m.src_rank.to_string(),
            m.dst_rank.to_string(),
            join(&m.region.offset),
            join(&m.region.extent),
            m.bytes.to_string(),
            flag(m.local).into(),
        ]
    });
    write_csv(w, PLAN_HEADER, rows)
}

pub fn save_plan(plan: &TransferPlan, path: &Path) -> Result<()> {
    write_plan(plan, create(path)?)
}

fn split_usizes(s: &str, name: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|x| x.trim().parse().map_err(|_| format!("bad value `{s}` for `{name}`")))
        .collect()
}

pub fn read_plan<R: Read>(r: R, origin: &Path) -> Result<TransferPlan> {
    let mut moves = Vec::new();
    read_csv(r, origin, PLAN_HEADER, |rec, _| {
        check_width(rec, PLAN_HEADER)?;
        moves.push(Move {
            key: rec[0].to_string(),
            src_rank: field(rec, 1, "src_rank")?,
            dst_rank: field(rec, 2, "dst_rank")?,
            region: Region {
                offset: split_usizes(&rec[3], "offsets")?,
                extent: split_usizes(&rec[4], "extents")?,
            },
            bytes: field(rec, 5, "bytes")?,
            local: bool_field(rec, 6, "local")?,
        });
        Ok(())
    })?;
    Ok(TransferPlan::from_moves(moves))
}

pub fn load_plan(path: &Path) -> Result<TransferPlan> {
    read_plan(open(path)?, path)
}

pub fn write_trace<W: Write>(trace: &SimTrace, w: W) -> Result<()> {
    let rows = trace.events.iter().map(|e| {
        vec![
            e.time_s.to_string(),
            e.step.to_string(),
            e.tokens.to_string(),
            e.config.global_batch.to_string(),
            e.config.micro_batch.to_string(),
            e.config.strategy.d.to_string(),
            e.config.strategy.t.to_string(),
            e.config.strategy.p.to_string(),
            e.loss.to_string(),
            opt(e.phi),
            opt(e.goodput),
            e.command.map(|c| c.name().to_string()).unwrap_or_default(),
        ]
    });
    write_csv(w, TRACE_HEADER, rows)
}

pub fn save_trace(trace: &SimTrace, path: &Path) -> Result<()> {
    write_trace(trace, create(path)?)
}

/// One parsed trace line. Throughput is not part of the format.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time_s: f64,
    pub step: u64,
    pub tokens: u64,
    pub config: ConfigTuple,
    pub loss: f64,
    pub phi: Option<f64>,
    pub goodput: Option<f64>,
    pub command: Option<String>,
}

pub fn read_trace<R: Read>(r: R, origin: &Path) -> Result<Vec<TraceRow>> {
    let mut rows = Vec::new();
    read_csv(r, origin, TRACE_HEADER, |rec, _| {
        check_width(rec, TRACE_HEADER)?;
        let s = ParallelStrategy::new(field(rec, 5, "d")?, field(rec, 6, "t")?, field(rec, 7, "p")?);
        let cmd = rec[11].trim();
        rows.push(TraceRow {
            time_s: field(rec, 0, "time_s")?,
            step: field(rec, 1, "step")?,
            tokens: field(rec, 2, "tokens")?,
            config: ConfigTuple::new(s, field(rec, 3, "global_batch")?, field(rec, 4, "micro_batch")?),
            loss: field(rec, 8, "loss")?,
            phi: opt_field(rec, 9, "phi")?,
            goodput: opt_field(rec, 10, "goodput")?,
            command: (!cmd.is_empty()).then(|| cmd.to_string()),
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn load_trace(path: &Path) -> Result<Vec<TraceRow>> {
    read_trace(open(path)?, path)
}

pub fn save_audit(records: &[AuditRecord], path: &Path) -> Result<()> {
    let rows = records.iter().map(|a| {
        vec![
            a.step.to_string(),
            a.time_s.to_string(),
            opt(a.phi),
            a.current_cfg.to_string(),
            a.winner_cfg.to_string(),
            opt(a.current_score),
            opt(a.winner_score),
            flag(a.penalized).into(),
            a.command.to_string(),
        ]
    });
    save_csv(path, AUDIT_HEADER, rows)
}

pub fn save_gns_trace(rows: &[GnsTraceRow], path: &Path) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.step.to_string(),
            r.tokens.to_string(),
            r.signal_raw.to_string(),
            r.noise_raw.to_string(),
            r.ema_signal.to_string(),
            r.ema_noise.to_string(),
            opt(r.phi),
        ]
    });
    save_csv(path, GNS_HEADER, rows)
}

/// Long format: one line per (sample time, policy).
pub fn save_decomposition(series: &[DecompositionSeries], path: &Path) -> Result<()> {
    let n = series.first().map_or(0, |s| s.points.len());
    let rows = (0..n).flat_map(|i| {
        series.iter().map(move |s| {
            let p = &s.points[i];
            vec![
                p.time_s.to_string(),
                p.phi.to_string(),
                s.policy.clone(),
                opt(p.throughput),
                opt(p.efficiency),
                opt(p.goodput),
            ]
        })
    });
    save_csv(path, DECOMPOSITION_HEADER, rows)
}

/// Per-policy outcome of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicySummary {
    /// Seconds to reach each target, keyed by the target's decimal form;
    /// `null` if never reached.
    pub time_to_loss: BTreeMap<String, Option<f64>>,
    pub final_loss: f64,
    pub wall_time_s: f64,
    pub steps: u64,
    pub tokens: u64,
    pub reconfigurations: usize,
    pub reconfig_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub targets: Vec<f64>,
    pub policies: BTreeMap<String, PolicySummary>,
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)
        .map_err(|e| CliError::Internal(format!("json write failed: {e}")))?;
    f.write_all(b"\n")
        .and_then(|_| f.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parse_round_trip() {
        let c = ConfigTuple::new(ParallelStrategy::new(2, 1, 4), 16, 2);
        assert_eq!(parse_config(&c.to_string()).unwrap(), c);
        assert!(parse_config("d2-t1-p4-bg16").is_err());
        assert!(parse_config("x2-t1-p4-bg16-bm1").is_err());
    }

    #[test]
    fn strategy_parse() {
        assert_eq!(parse_strategy("2,1,4").unwrap(), ParallelStrategy::new(2, 1, 4));
        assert!(parse_strategy("2,1").is_err());
        assert!(parse_strategy("a,b,c").is_err());
    }

    #[test]
    fn profile_row_mapping() {
        let text = format!("{PROFILE_HEADER}\n2,1,4,16,2,310.5,41e9,1\n");
        let p = read_profile(text.as_bytes(), Path::new("x.csv"), "h", f64::INFINITY).unwrap();
        let k = ConfigTuple::new(ParallelStrategy::new(2, 1, 4), 16, 2);
        let e = p.get(&k).unwrap();
        assert_eq!(e.samples_per_second, 310.5);
        assert_eq!(e.peak_memory, 41e9);
        assert!(e.feasible);
        assert_eq!(p.n_gpus, 8);
    }

    #[test]
    fn profile_errors_name_the_line() {
        let text = format!("{PROFILE_HEADER}\n2,1,4,16,2,310.5,41e9,1\n2,1,4,17,2,1,1,1\n");
        let err = read_profile(text.as_bytes(), Path::new("x.csv"), "h", 1.0).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 3, .. }), "{err}");

        let text = format!("{PROFILE_HEADER}\n2,1,4,16,2,310.5,41e9,1\n2,1,4,16,2,300,41e9,1\n");
        let err = read_profile(text.as_bytes(), Path::new("x.csv"), "h", 1.0).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        let text = format!("{PROFILE_HEADER}\n2,1,4,16,2,abc,41e9,1\n");
        let err = read_profile(text.as_bytes(), Path::new("x.csv"), "h", 1.0).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 2, .. }), "{err}");

        let err = read_profile("d,t,p\n".as_bytes(), Path::new("x.csv"), "h", 1.0).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 1, .. }));
    }

    #[test]
    fn world_size_mismatch_rejected() {
        let text = format!("{PROFILE_HEADER}\n2,1,4,16,2,310.5,41e9,1\n2,1,2,16,2,1,1,1\n");
        let err = read_profile(text.as_bytes(), Path::new("x.csv"), "h", 1.0).unwrap_err();
        assert!(err.to_string().contains("DP2,TP1,PP2"), "{err}");
    }
}
