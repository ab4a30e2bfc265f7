//! Text documents for topologies and control points.
//!
//! A control-point document is a sequence of labeled sections, each a small
//! CSV table with one row per explicit index tuple:
//!
//! ```text
//! # provenance
//! [pi]
//! i,j,value
//! [p]
//! i,j,nu,value
//! [q]
//! i,j,beta,value
//! [w]
//! class,j,k,value        class is d, dbar or e
//! [placement]
//! j,i,segments
//! [capacity]
//! j,value
//! [t]
//! i,value
//! ```
//!
//! Reals are written in shortest round-trip form, so reading a written
//! document reproduces the same values bit for bit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::{AuxVars, BandwidthWeights, CachePlacement, ControlPoint, ScheduleMatrices, SystemTopology};

const SECTIONS: [&str; 7] = ["pi", "p", "q", "w", "placement", "capacity", "t"];

fn header(section: &str) -> &'static str {
    match section {
        "pi" => "i,j,value",
        "p" => "i,j,nu,value",
        "q" => "i,j,beta,value",
        "w" => "class,j,k,value",
        "placement" => "j,i,segments",
        "capacity" => "j,value",
        _ => "i,value",
    }
}

pub fn write_point<W: Write>(point: &ControlPoint, mut out: W, provenance: &str) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("# {provenance}\n"));
    let sec = |s: &mut String, name: &str| s.push_str(&format!("[{name}]\n{}\n", header(name)));
    sec(&mut s, "pi");
    for (i, row) in point.schedule.pi.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            s.push_str(&format!("{i},{j},{v:?}\n"));
        }
    }
    for (name, m) in [("p", &point.schedule.p), ("q", &point.schedule.q)] {
        sec(&mut s, name);
        for (i, per_server) in m.iter().enumerate() {
            for (j, row) in per_server.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    s.push_str(&format!("{i},{j},{k},{v:?}\n"));
                }
            }
        }
    }
    sec(&mut s, "w");
    let bw = &point.bandwidth;
    for (class, m) in [("d", &bw.w_d), ("dbar", &bw.w_dbar), ("e", &bw.w_e)] {
        for (j, row) in m.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                s.push_str(&format!("{class},{j},{k},{v:?}\n"));
            }
        }
    }
    sec(&mut s, "placement");
    for (j, row) in point.placement.segments.iter().enumerate() {
        for (i, c) in row.iter().enumerate() {
            s.push_str(&format!("{j},{i},{c}\n"));
        }
    }
    sec(&mut s, "capacity");
    for (j, c) in point.placement.capacity.iter().enumerate() {
        s.push_str(&format!("{j},{c:?}\n"));
    }
    sec(&mut s, "t");
    for (i, t) in point.aux.t.iter().enumerate() {
        s.push_str(&format!("{i},{t:?}\n"));
    }
    out.write_all(s.as_bytes()).map_err(|e| Error::Io(e.to_string()))
}

/// Dense table keyed by index tuple, filled while parsing.
#[derive(Default)]
struct Table {
    cells: BTreeMap<Vec<usize>, (String, usize)>,
}

struct Parser<'a> {
    file: &'a str,
}

impl Parser<'_> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            location: if line == 0 { "document".into() } else { format!("line {line}") },
            message: message.into(),
        }
    }

    fn index(&self, line: usize, s: &str) -> Result<usize> {
        s.trim().parse().map_err(|_| self.err(line, format!("bad index {s:?}")))
    }

    fn real(&self, line: usize, s: &str) -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| self.err(line, format!("bad number {s:?}")))?;
        if !v.is_finite() {
            return Err(self.err(line, format!("non-finite number {s:?}")));
        }
        Ok(v)
    }

    fn count(&self, line: usize, s: &str) -> Result<u32> {
        s.trim().parse().map_err(|_| self.err(line, format!("bad segment count {s:?}")))
    }
}

/// Extent of a dense index set: `len` distinct values `0..len`, checked.
fn extent(p: &Parser, what: &str, values: impl Iterator<Item = usize>) -> Result<usize> {
    let set: std::collections::BTreeSet<usize> = values.collect();
    let len = set.len();
    if set.iter().enumerate().any(|(k, &v)| k != v) {
        return Err(p.err(0, format!("{what} indices are not contiguous from 0")));
    }
    Ok(len)
}

pub fn read_point<R: BufRead>(input: R, file: &str) -> Result<ControlPoint> {
    let p = Parser { file };
    let mut tables: BTreeMap<String, Table> = BTreeMap::new();
    let mut current: Option<String> = None;
    let mut expect_header = false;
    for (n, line) in input.lines().enumerate() {
        let ln = n + 1;
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if !SECTIONS.contains(&name) {
                return Err(p.err(ln, format!("unknown section [{name}]")));
            }
            if tables.contains_key(name) {
                return Err(p.err(ln, format!("duplicate section [{name}]")));
            }
            tables.insert(name.to_string(), Table::default());
            current = Some(name.to_string());
            expect_header = true;
            continue;
        }
        let Some(sec) = current.as_deref() else {
            return Err(p.err(ln, "data before the first section"));
        };
        if expect_header {
            if line != header(sec) {
                return Err(p.err(ln, format!("expected header {:?}", header(sec))));
            }
            expect_header = false;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let width = header(sec).split(',').count();
        if fields.len() != width {
            return Err(p.err(ln, format!("expected {width} fields, got {}", fields.len())));
        }
        let mut key = Vec::with_capacity(width - 1);
        for (k, f) in fields[..width - 1].iter().enumerate() {
            if sec == "w" && k == 0 {
                key.push(match f.trim() {
                    "d" => 0,
                    "dbar" => 1,
                    "e" => 2,
                    other => return Err(p.err(ln, format!("unknown stream class {other:?}"))),
                });
            } else {
                key.push(p.index(ln, f)?);
            }
        }
        let table = tables.get_mut(sec).expect("section registered");
        if table.cells.insert(key, (fields[width - 1].to_string(), ln)).is_some() {
            return Err(p.err(ln, "duplicate index tuple"));
        }
    }
    for name in SECTIONS {
        if !tables.contains_key(name) {
            return Err(p.err(0, format!("missing section [{name}]")));
        }
    }
    let t = |name: &str| &tables[name].cells;

    let r = extent(&p, "t file", t("t").keys().map(|k| k[0]))?;
    let m = extent(&p, "capacity server", t("capacity").keys().map(|k| k[0]))?;
    let per_server = |name: &str| -> Result<Vec<usize>> {
        (0..m).map(|j| extent(&p, name, t(name).keys().filter(|k| k[1] == j).map(|k| k[2]))).collect()
    };
    let e = per_server("p")?;
    let d = per_server("q")?;

    let real = |name: &str, key: Vec<usize>| -> Result<f64> {
        let (v, ln) = t(name).get(&key).ok_or_else(|| p.err(0, format!("[{name}] lacks entry {key:?}")))?;
        p.real(*ln, v)
    };
    let expect_len = |name: &str, len: usize| -> Result<()> {
        if t(name).len() != len {
            return Err(p.err(0, format!("[{name}] has {} entries, expected {len}", t(name).len())));
        }
        Ok(())
    };
    expect_len("pi", r * m)?;
    let e_total: usize = e.iter().sum();
    let d_total: usize = d.iter().sum();
    expect_len("p", r * e_total)?;
    expect_len("q", r * d_total)?;
    expect_len("w", 2 * d_total + e_total)?;
    expect_len("placement", m * r)?;

    let mut pi = vec![vec![0.0; m]; r];
    let mut pm = Vec::with_capacity(r);
    let mut qm = Vec::with_capacity(r);
    for i in 0..r {
        for j in 0..m {
            pi[i][j] = real("pi", vec![i, j])?;
        }
        pm.push((0..m).map(|j| (0..e[j]).map(|k| real("p", vec![i, j, k])).collect::<Result<Vec<f64>>>()).collect::<Result<Vec<_>>>()?);
        qm.push((0..m).map(|j| (0..d[j]).map(|k| real("q", vec![i, j, k])).collect::<Result<Vec<f64>>>()).collect::<Result<Vec<_>>>()?);
    }
    let w_of = |class: usize, counts: &[usize]| -> Result<Vec<Vec<f64>>> {
        (0..m).map(|j| (0..counts[j]).map(|k| real("w", vec![class, j, k])).collect()).collect()
    };
    let bandwidth = BandwidthWeights {
        w_d: w_of(0, &d)?,
        w_dbar: w_of(1, &d)?,
        w_e: w_of(2, &e)?,
    };
    let mut segments = vec![vec![0u32; r]; m];
    for (j, row) in segments.iter_mut().enumerate() {
        for (i, c) in row.iter_mut().enumerate() {
            let (v, ln) = t("placement").get(&vec![j, i]).ok_or_else(|| p.err(0, format!("[placement] lacks entry {:?}", [j, i])))?;
            *c = p.count(*ln, v)?;
        }
    }
    let capacity = (0..m).map(|j| real("capacity", vec![j])).collect::<Result<Vec<f64>>>()?;
    let tv = (0..r).map(|i| real("t", vec![i])).collect::<Result<Vec<f64>>>()?;
    Ok(ControlPoint {
        schedule: ScheduleMatrices { pi, p: pm, q: qm },
        bandwidth,
        placement: CachePlacement { segments, capacity },
        aux: AuxVars { t: tv },
    })
}

/// Topology as TOML: one array per field, indexed by server.
pub fn write_topology<W: Write>(topology: &SystemTopology, mut out: W, provenance: &str) -> Result<()> {
    let body = toml::to_string(topology).map_err(|e| Error::Io(e.to_string()))?;
    write!(out, "# {provenance}\n{body}").map_err(|e| Error::Io(e.to_string()))
}

pub fn read_topology(text: &str, file: &str) -> Result<SystemTopology> {
    let topo: SystemTopology = toml::from_str(text).map_err(|e| toml_error(&e, text, file))?;
    topo.validate()?;
    Ok(topo)
}

/// Parse error with a `line:column` location taken from the TOML span.
pub fn toml_error(e: &toml::de::Error, text: &str, file: &str) -> Error {
    let location = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |k| k + 1) + 1;
            format!("line {line} column {col}")
        }
        None => "unknown".into(),
    };
    Error::Parse {
        file: file.to_string(),
        location,
        message: e.message().replace('\n', " "),
    }
}
