//! On-disk dataset container.
//!
//! A dataset directory holds:
//! - `meta.txt` — UTF-8 `key:value` lines (format version, kind, n, seed,
//!   grid, active noise ranges), written in a fixed order;
//! - `clean.f32`, `noisy.f32` — headerless little-endian f32, row-major
//!   n x 900 (`clean.f32` may be absent for field data);
//! - `params.csv` — per-sample generator parameters and noise draws.
//!
//! Writing is deterministic: the same dataset produces identical bytes.

use super::{
    Dataset, DomainKind, DomainSpec, ImpulseRange, NoiseDraws, SampleLog, SignalParams, TimeGrid,
    ToneRange,
};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const META_FILE: &str = "meta.txt";
pub const CLEAN_FILE: &str = "clean.f32";
pub const NOISY_FILE: &str = "noisy.f32";
pub const PARAMS_FILE: &str = "params.csv";
const FORMAT_VERSION: u32 = 1;

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(META_FILE), render_meta(ds))?;
    if let Some(clean) = &ds.clean {
        write_f32(&dir.join(CLEAN_FILE), clean)?;
    }
    write_f32(&dir.join(NOISY_FILE), &ds.noisy)?;
    fs::write(dir.join(PARAMS_FILE), render_params(&ds.log))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta_raw = fs::read_to_string(&meta_path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", meta_path.display())))?;
    let meta = parse_meta(&meta_raw)?;

    let get = |k: &str| -> Result<&str> {
        meta.get(k)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::format(format!("meta.txt missing key {k:?}")))
    };
    let version: u32 = parse_num(get("format_version")?, "format_version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let kind = DomainKind::parse(get("kind")?)?;
    let n: usize = parse_num(get("n")?, "n")?;
    let seed: u64 = parse_num(get("seed")?, "seed")?;
    let grid = TimeGrid::new(
        parse_num(get("grid_n")?, "grid_n")?,
        parse_num(get("grid_dt")?, "grid_dt")?,
        parse_num(get("grid_t0")?, "grid_t0")?,
    )?;
    let spec = spec_from_meta(kind, &meta)?;

    let noisy = read_f32(&dir.join(NOISY_FILE), n * grid.n)?;
    let clean_path = dir.join(CLEAN_FILE);
    let clean = if clean_path.exists() {
        Some(read_f32(&clean_path, n * grid.n)?)
    } else {
        None
    };
    let log = parse_params(&fs::read_to_string(dir.join(PARAMS_FILE)).map_err(|e| {
        Error::format(format!("cannot read params.csv: {e}"))
    })?)?;
    if log.len() != n {
        return Err(Error::format(format!(
            "params.csv has {} rows, meta says n = {n}",
            log.len()
        )));
    }
    Ok(Dataset {
        spec,
        seed,
        grid,
        n,
        clean,
        noisy,
        log,
    })
}

fn render_meta(ds: &Dataset) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}:{v}");
    };
    kv("format_version", FORMAT_VERSION.to_string());
    kv("kind", ds.spec.kind.as_str().to_string());
    kv("n", ds.n.to_string());
    kv("seed", ds.seed.to_string());
    kv("grid_n", ds.grid.n.to_string());
    kv("grid_dt", ds.grid.dt.to_string());
    kv("grid_t0", ds.grid.t0.to_string());
    kv("has_clean", (ds.clean.is_some() as u8).to_string());
    if let Some((lo, hi)) = ds.spec.snr_db {
        kv("snr_lo", lo.to_string());
        kv("snr_hi", hi.to_string());
    }
    for (name, tone) in [("lfi", ds.spec.lfi), ("hfi", ds.spec.hfi)] {
        if let Some(t) = tone {
            kv(&format!("{name}_amp_lo"), t.amp_mv.0.to_string());
            kv(&format!("{name}_amp_hi"), t.amp_mv.1.to_string());
            kv(&format!("{name}_freq_lo"), t.freq_hz.0.to_string());
            kv(&format!("{name}_freq_hi"), t.freq_hz.1.to_string());
            kv(&format!("{name}_phase_lo"), t.phase.0.to_string());
            kv(&format!("{name}_phase_hi"), t.phase.1.to_string());
        }
    }
    if let Some(imp) = ds.spec.imp {
        kv("imp_k_lo", imp.count.0.to_string());
        kv("imp_k_hi", imp.count.1.to_string());
        kv("imp_amp_lo", imp.amp_mv.0.to_string());
        kv("imp_amp_hi", imp.amp_mv.1.to_string());
    }
    out
}

fn parse_meta(raw: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (ln, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::format(format!("meta.txt line {}: no ':' in {line:?}", ln + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn spec_from_meta(kind: DomainKind, meta: &HashMap<String, String>) -> Result<DomainSpec> {
    let num = |k: &str| -> Result<f64> { parse_num(meta.get(k).map(|s| s.as_str()).unwrap_or(""), k) };
    let mut spec = DomainSpec {
        kind,
        snr_db: None,
        lfi: None,
        hfi: None,
        imp: None,
    };
    if meta.contains_key("snr_lo") {
        spec.snr_db = Some((num("snr_lo")?, num("snr_hi")?));
    }
    for name in ["lfi", "hfi"] {
        if meta.contains_key(&format!("{name}_amp_lo")) {
            let tone = ToneRange {
                amp_mv: (num(&format!("{name}_amp_lo"))?, num(&format!("{name}_amp_hi"))?),
                freq_hz: (num(&format!("{name}_freq_lo"))?, num(&format!("{name}_freq_hi"))?),
                phase: (num(&format!("{name}_phase_lo"))?, num(&format!("{name}_phase_hi"))?),
            };
            if name == "lfi" {
                spec.lfi = Some(tone);
            } else {
                spec.hfi = Some(tone);
            }
        }
    }
    if meta.contains_key("imp_k_lo") {
        spec.imp = Some(ImpulseRange {
            count: (
                parse_num(meta.get("imp_k_lo").unwrap(), "imp_k_lo")?,
                parse_num(meta.get("imp_k_hi").unwrap(), "imp_k_hi")?,
            ),
            amp_mv: (num("imp_amp_lo")?, num("imp_amp_hi")?),
        });
    }
    spec.validate()?;
    Ok(spec)
}

const PARAMS_HEADER: &str = "q1,q2,b,terms,snr_db,lfi_amp,lfi_freq,lfi_phase,hfi_amp,hfi_freq,hfi_phase,imp_k";

fn render_params(log: &[SampleLog]) -> String {
    let mut out = String::with_capacity(64 * log.len());
    out.push_str(PARAMS_HEADER);
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let tone3 = |v: Option<(f64, f64, f64)>| match v {
        Some((a, f, p)) => format!("{a},{f},{p}"),
        None => ",,".to_string(),
    };
    for s in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.params.q1,
            s.params.q2,
            s.params.b,
            s.params.terms,
            opt(s.draws.snr_db),
            tone3(s.draws.lfi),
            tone3(s.draws.hfi),
            s.draws.imp_k.map(|k| k.to_string()).unwrap_or_default(),
        );
    }
    out
}

fn parse_params(raw: &str) -> Result<Vec<SampleLog>> {
    let mut lines = raw.lines();
    match lines.next() {
        Some(h) if h == PARAMS_HEADER => {}
        other => {
            return Err(Error::format(format!(
                "params.csv: unexpected header {other:?}"
            )))
        }
    }
    let mut log = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 12 {
            return Err(Error::format(format!(
                "params.csv row {}: expected 12 columns, got {}",
                ln + 2,
                cols.len()
            )));
        }
        let f = |i: usize| -> Result<f64> { parse_num(cols[i], PARAMS_HEADER.split(',').nth(i).unwrap()) };
        let opt_f = |i: usize| -> Result<Option<f64>> {
            if cols[i].is_empty() {
                Ok(None)
            } else {
                f(i).map(Some)
            }
        };
        let tone = |i: usize| -> Result<Option<(f64, f64, f64)>> {
            match (opt_f(i)?, opt_f(i + 1)?, opt_f(i + 2)?) {
                (Some(a), Some(fr), Some(p)) => Ok(Some((a, fr, p))),
                (None, None, None) => Ok(None),
                _ => Err(Error::format(format!(
                    "params.csv row {}: partially filled tone columns",
                    ln + 2
                ))),
            }
        };
        log.push(SampleLog {
            params: SignalParams {
                q1: f(0)?,
                q2: f(1)?,
                b: f(2)?,
                terms: parse_num(cols[3], "terms")?,
            },
            draws: NoiseDraws {
                snr_db: opt_f(4)?,
                lfi: tone(5)?,
                hfi: tone(8)?,
                imp_k: if cols[11].is_empty() {
                    None
                } else {
                    Some(parse_num(cols[11], "imp_k")?)
                },
            },
        });
    }
    Ok(log)
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(format!("cannot parse {what} from {s:?}")))
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)
        .map_err(|e| Error::format(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() != expect * 4 {
        return Err(Error::format(format!(
            "{}: {} bytes, expected {} (n x 900 f32)",
            path.display(),
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
