//! Per-stream queue state: effective rate, aggregate arrivals, load and the
//! per-file traffic that makes up each batch-service mixture.

use std::collections::HashMap;

use crate::model::{DecisionVars, SystemTopology, VideoCatalog, MARGIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum QueueClass {
    /// Cache-to-edge stream serving cached segments.
    E,
    /// Datacenter-to-cache stream.
    D,
    /// Cache-to-edge stream forwarding datacenter segments.
    Dbar,
}

impl QueueClass {
    pub fn tag(self) -> &'static str {
        match self {
            QueueClass::E => "e",
            QueueClass::D => "d",
            QueueClass::Dbar => "dbar",
        }
    }
}

/// One file's contribution to a stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamUser {
    pub file: usize,
    /// Routed request rate `lambda_i * pi_ij * (p or q)`; may be zero.
    pub a: f64,
    /// Segments this file's requests bring to the stream.
    pub n: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub class: QueueClass,
    pub server: usize,
    pub index: usize,
    pub alpha: f64,
    pub eta: f64,
    pub lambda: f64,
    pub rho: f64,
    /// One entry per file, in file order.
    pub users: Vec<StreamUser>,
}

/// `ln(α e^{ηt}/(α-t))`; `None` unless `t < α`.
pub fn ln_shifted_exp_mgf(alpha: f64, eta: f64, t: f64) -> Option<f64> {
    if t < alpha {
        Some(alpha.ln() + eta * t - (alpha - t).ln())
    } else {
        None
    }
}

impl StreamState {
    pub fn label(&self) -> String {
        format!("{}[{}][{}]", self.class.tag(), self.server, self.index)
    }

    pub fn mean_service(&self) -> f64 {
        self.eta + 1.0 / self.alpha
    }

    pub fn ln_mgf(&self, t: f64) -> Option<f64> {
        ln_shifted_exp_mgf(self.alpha, self.eta, t)
    }

    /// Unnormalized mixture `Σ_k a_k M^{n_k}` given `ln M`.
    pub fn mixture(&self, ln_m: f64) -> f64 {
        self.users
            .iter()
            .filter(|u| u.a > 0.0)
            .map(|u| u.a * (u.n * ln_m).exp())
            .sum()
    }

    /// Batch-service MGF at `t < α`; 1 when the stream carries no traffic.
    pub fn batch_mgf(&self, t: f64) -> f64 {
        if self.lambda <= 0.0 {
            return 1.0;
        }
        match self.ln_mgf(t) {
            Some(l) => self.mixture(l) / self.lambda,
            None => f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueueSnapshot {
    streams: Vec<StreamState>,
    /// First stream with bit-identical rate, shift and traffic; such streams
    /// have identical MGFs, so per-stream work is done once per class.
    rep: Vec<usize>,
    e_off: Vec<usize>,
    d_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl QueueSnapshot {
    pub fn build(topology: &SystemTopology, catalog: &VideoCatalog, vars: &DecisionVars) -> Self {
        let m = topology.m();
        let r = catalog.r();
        let mut streams = Vec::new();
        let (mut e_off, mut d_off, mut b_off) = (vec![0; m], vec![0; m], vec![0; m]);
        for j in 0..m {
            e_off[j] = streams.len();
            for nu in 0..topology.e[j] {
                let users = (0..r)
                    .map(|i| StreamUser {
                        file: i,
                        a: catalog.lambda[i] * vars.pi[i][j] * vars.p[i][j][nu],
                        n: vars.cache[j][i],
                    })
                    .collect();
                streams.push(Self::finish(QueueClass::E, j, nu, vars.w_e[j][nu] * topology.alpha_f_base[j], topology.eta_e[j], users));
            }
            for (class, off) in [(QueueClass::D, &mut d_off), (QueueClass::Dbar, &mut b_off)] {
                off[j] = streams.len();
                for beta in 0..topology.d[j] {
                    let users = (0..r)
                        .map(|i| StreamUser {
                            file: i,
                            a: catalog.lambda[i] * vars.pi[i][j] * vars.q[i][j][beta],
                            n: catalog.lengths[i] as f64 - vars.cache[j][i],
                        })
                        .collect();
                    let (alpha, eta) = match class {
                        QueueClass::D => (vars.w_d[j][beta] * topology.alpha_d_base[j], topology.eta_d[j]),
                        _ => (vars.w_dbar[j][beta] * topology.alpha_f_base[j], topology.eta_dbar[j]),
                    };
                    streams.push(Self::finish(class, j, beta, alpha, eta, users));
                }
            }
        }
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let rep = streams
            .iter()
            .enumerate()
            .map(|(id, s)| {
                let mut key = Vec::with_capacity(2 + 2 * s.users.len());
                key.push(s.alpha.to_bits());
                key.push(s.eta.to_bits());
                for u in &s.users {
                    key.push(u.a.to_bits());
                    key.push(u.n.to_bits());
                }
                *seen.entry(key).or_insert(id)
            })
            .collect();
        Self { streams, rep, e_off, d_off, b_off }
    }

    /// Representative of stream `id`'s symmetry class.
    pub fn rep(&self, id: usize) -> usize {
        self.rep[id]
    }

    fn finish(class: QueueClass, server: usize, index: usize, alpha: f64, eta: f64, users: Vec<StreamUser>) -> StreamState {
        let lambda: f64 = users.iter().map(|u| u.a).sum();
        let work: f64 = users.iter().map(|u| u.a * u.n).sum();
        let rho = if work <= 0.0 {
            0.0
        } else if alpha > 0.0 {
            work * (eta + 1.0 / alpha)
        } else {
            f64::INFINITY
        };
        StreamState {
            class,
            server,
            index,
            alpha,
            eta,
            lambda,
            rho,
            users,
        }
    }

    pub fn streams(&self) -> &[StreamState] {
        &self.streams
    }

    pub fn id(&self, class: QueueClass, server: usize, index: usize) -> usize {
        match class {
            QueueClass::E => self.e_off[server] + index,
            QueueClass::D => self.d_off[server] + index,
            QueueClass::Dbar => self.b_off[server] + index,
        }
    }

    pub fn stream(&self, class: QueueClass, server: usize, index: usize) -> &StreamState {
        &self.streams[self.id(class, server, index)]
    }

    /// Whether every MGF that file `i` relies on exists at `t`, with margin.
    pub fn mgf_exists_for(&self, i: usize, t: f64) -> bool {
        self.streams.iter().enumerate().filter(|&(id, _)| self.rep[id] == id).all(|(_, s)| {
            let u = &s.users[i];
            if u.a <= 0.0 || u.n <= 0.0 {
                return true;
            }
            if s.alpha - t - MARGIN < 0.0 {
                return false;
            }
            let b = s.batch_mgf(t);
            (t - s.lambda * (b - 1.0)) / t - MARGIN >= 0.0
        })
    }
}
