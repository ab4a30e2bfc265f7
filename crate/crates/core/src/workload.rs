//! Synthetic catalogs with truncated-Pareto video lengths, and scenario
//! sweeps over a base instance.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SystemTopology, VideoCatalog};

/// Per-server base rates (1/s) of the reference twelve-node deployment.
pub const REFERENCE_ALPHA: [f64; 12] = [82.00, 76.53, 71.06, 65.6, 60.13, 54.66, 49.20, 44.28, 39.36, 34.44, 29.52, 24.60];
/// Service-time shift (s) shared by every stream class.
pub const REFERENCE_ETA: f64 = 0.014;

/// `share` of the files, in index order, request at `rate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateBand {
    pub share: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub r: usize,
    pub pareto_shape: f64,
    /// Seconds.
    pub pareto_scale: f64,
    /// Lengths at or above this (seconds) are redrawn.
    pub max_length: f64,
    pub tau: f64,
    pub lambda_rule: Vec<RateBand>,
    /// Replaced by the run seed when driven from a run config.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_d_s")]
    pub d_s: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_d_s() -> f64 {
    4.0
}

fn default_sigma() -> f64 {
    10.0
}

impl WorkloadSpec {
    /// Half the files at 0.002/s, half at 0.003/s, Pareto(2, 300 s) lengths
    /// under an hour, 4 s segments.
    pub fn reference(r: usize, seed: u64) -> Self {
        Self {
            r,
            pareto_shape: 2.0,
            pareto_scale: 300.0,
            max_length: 3600.0,
            tau: 4.0,
            lambda_rule: vec![RateBand { share: 0.5, rate: 0.002 }, RateBand { share: 0.5, rate: 0.003 }],
            seed,
            d_s: default_d_s(),
            sigma: default_sigma(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Spec("r must be positive".into()));
        }
        if !(self.pareto_shape > 1.0) || !(self.pareto_scale > 0.0) || !(self.max_length >= self.pareto_scale) || !(self.tau > 0.0) {
            return Err(Error::Spec("need shape > 1, scale > 0, max_length >= scale, tau > 0".into()));
        }
        if self.lambda_rule.is_empty() || self.lambda_rule.iter().any(|b| !(b.share >= 0.0) || !(b.rate > 0.0)) {
            return Err(Error::Spec("lambda_rule needs bands with share >= 0 and rate > 0".into()));
        }
        if !(self.d_s >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Spec("need d_s >= 0 and sigma >= 0".into()));
        }
        Ok(())
    }

    /// Rate of file `i` (zero-based): bands cover consecutive index ranges
    /// of `round(share·r)` files; files past the last band use its rate.
    pub fn rate_of(&self, i: usize) -> f64 {
        let mut end = 0.0;
        for b in &self.lambda_rule {
            end += b.share * self.r as f64;
            if (i as f64) < end.round() {
                return b.rate;
            }
        }
        self.lambda_rule.last().expect("validated").rate
    }
}

/// Segment count of a video of `seconds`, rounded up to whole segments.
pub fn segments_for(seconds: f64, tau: f64) -> u32 {
    (seconds / tau).ceil() as u32
}

/// Mean of Pareto(shape, scale) conditioned on lying below `max`.
pub fn truncated_pareto_mean(shape: f64, scale: f64, max: f64) -> f64 {
    let mass = 1.0 - (scale / max).powf(shape);
    let integral = shape * scale.powf(shape) * (max.powf(1.0 - shape) - scale.powf(1.0 - shape)) / (1.0 - shape);
    integral / mass
}

/// Draws `r` lengths below `max_length` by rejection.
pub fn draw_lengths(spec: &WorkloadSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let dist = Pareto::new(spec.pareto_scale, spec.pareto_shape).map_err(|e| Error::Spec(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.r);
    let mut draws = 0usize;
    while out.len() < spec.r {
        if draws >= 100 * spec.r {
            return Err(Error::Spec(format!("only {} of {} lengths accepted after {draws} draws", out.len(), spec.r)));
        }
        draws += 1;
        let x: f64 = dist.sample(&mut rng);
        if x < spec.max_length {
            out.push(x);
        }
    }
    Ok(out)
}

pub fn generate_catalog(spec: &WorkloadSpec) -> Result<VideoCatalog> {
    let lengths = draw_lengths(spec)?;
    let catalog = VideoCatalog {
        lengths: lengths.iter().map(|&x| segments_for(x, spec.tau)).collect(),
        lambda: (0..spec.r).map(|i| spec.rate_of(i)).collect(),
        weight: vec![1.0; spec.r],
        tau: spec.tau,
        d_s: spec.d_s,
        sigma: spec.sigma,
    };
    catalog.validate()?;
    Ok(catalog)
}

/// The first `m` reference servers with `d` and `e` streams each.
pub fn reference_topology(m: usize, d: usize, e: usize) -> Result<SystemTopology> {
    if m == 0 || m > REFERENCE_ALPHA.len() {
        return Err(Error::InvalidInput(format!("reference topology has 1..=12 servers, got {m}")));
    }
    SystemTopology::homogeneous(d, e, &REFERENCE_ALPHA[..m], REFERENCE_ETA)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ArrivalScale,
    RateScale,
    StreamScale,
    FileCount,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub factor: f64,
    pub topology: SystemTopology,
    pub catalog: VideoCatalog,
}

/// One derived instance per factor. `FileCount` keeps the first
/// `round(factor·r)` files (at least one) and may not exceed the catalog.
pub fn sweep(scenario: Scenario, topology: &SystemTopology, catalog: &VideoCatalog, factors: &[f64]) -> Result<Vec<Instance>> {
    topology.validate()?;
    catalog.validate()?;
    let mut out = Vec::with_capacity(factors.len());
    for &f in factors {
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::InvalidInput(format!("sweep factor must be positive, got {f}")));
        }
        let mut topo = topology.clone();
        let mut cat = catalog.clone();
        match scenario {
            Scenario::ArrivalScale => cat.lambda.iter_mut().for_each(|l| *l *= f),
            Scenario::RateScale => {
                topo.alpha_d_base.iter_mut().for_each(|a| *a *= f);
                topo.alpha_f_base.iter_mut().for_each(|a| *a *= f);
            }
            Scenario::StreamScale => {
                let scale = |n: &mut usize| *n = ((*n as f64 * f).round() as usize).max(1);
                topo.d.iter_mut().for_each(scale);
                topo.e.iter_mut().for_each(scale);
            }
            Scenario::FileCount => {
                let r = ((catalog.r() as f64 * f).round() as usize).max(1);
                if r > catalog.r() {
                    return Err(Error::InvalidInput(format!("file_count factor {f} exceeds the catalog")));
                }
                cat.lengths.truncate(r);
                cat.lambda.truncate(r);
                cat.weight.truncate(r);
            }
        }
        out.push(Instance {
            factor: f,
            topology: topo,
            catalog: cat,
        });
    }
    Ok(out)
}

/// Catalog CSV: `file_id,L_i,lambda_i,weight_i`. Shared parameters go on
/// leading `#` comment lines so the file round-trips on its own.
pub fn write_catalog_csv<W: Write>(catalog: &VideoCatalog, mut out: W, provenance: &str) -> Result<()> {
    let io = |e: std::io::Error| Error::Io(e.to_string());
    writeln!(out, "# {provenance}").map_err(io)?;
    writeln!(out, "# tau={:?} d_s={:?} sigma={:?}", catalog.tau, catalog.d_s, catalog.sigma).map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let ce = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["file_id", "L_i", "lambda_i", "weight_i"]).map_err(ce)?;
    for i in 0..catalog.r() {
        w.write_record([i.to_string(), catalog.lengths[i].to_string(), format!("{:?}", catalog.lambda[i]), format!("{:?}", catalog.weight[i])])
            .map_err(ce)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn read_catalog_csv<R: BufRead>(input: R, file: &str) -> Result<VideoCatalog> {
    let perr = |line: usize, msg: String| Error::Parse {
        file: file.to_string(),
        location: format!("line {line}"),
        message: msg,
    };
    let mut shared: Option<(f64, f64, f64)> = None;
    let mut body = String::new();
    let mut body_start = 0;
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Io(e.to_string()))?;
        if let Some(rest) = line.strip_prefix('#') {
            if rest.trim_start().starts_with("tau=") {
                let mut vals = [None; 3];
                for kv in rest.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| perr(n + 1, format!("bad entry {kv:?}")))?;
                    let v: f64 = v.parse().map_err(|_| perr(n + 1, format!("bad number {v:?}")))?;
                    match k {
                        "tau" => vals[0] = Some(v),
                        "d_s" => vals[1] = Some(v),
                        "sigma" => vals[2] = Some(v),
                        _ => return Err(perr(n + 1, format!("unknown key {k:?}"))),
                    }
                }
                match vals {
                    [Some(a), Some(b), Some(c)] => shared = Some((a, b, c)),
                    _ => return Err(perr(n + 1, "need tau, d_s and sigma".into())),
                }
            }
            continue;
        }
        if body.is_empty() {
            body_start = n;
        }
        body.push_str(&line);
        body.push('\n');
    }
    let (tau, d_s, sigma) = shared.ok_or_else(|| perr(1, "missing '# tau=.. d_s=.. sigma=..' line".into()))?;
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    let mut cat = VideoCatalog {
        lengths: Vec::new(),
        lambda: Vec::new(),
        weight: Vec::new(),
        tau,
        d_s,
        sigma,
    };
    for (k, rec) in rd.records().enumerate() {
        let line = body_start + k + 2;
        let rec = rec.map_err(|e| perr(line, e.to_string()))?;
        if rec.len() != 4 {
            return Err(perr(line, format!("expected 4 fields, got {}", rec.len())));
        }
        let id: usize = rec[0].trim().parse().map_err(|_| perr(line, "bad file_id".into()))?;
        if id != k {
            return Err(perr(line, format!("file_id {id} out of order (expected {k})")));
        }
        cat.lengths.push(rec[1].trim().parse().map_err(|_| perr(line, "bad L_i".into()))?);
        cat.lambda.push(rec[2].trim().parse().map_err(|_| perr(line, "bad lambda_i".into()))?);
        cat.weight.push(rec[3].trim().parse().map_err(|_| perr(line, "bad weight_i".into()))?);
    }
    cat.validate().map_err(|e| perr(1, e.to_string()))?;
    Ok(cat)
}
