//! In-process message passing. Every payload crosses the boundary as
//! serialized text so that the byte counts are real.

use super::log::{Direction, MessageRecord, PayloadKind};
use crate::cka::{aggregate_grams, aggregate_representations, gram_linear, GramMatrix, ProximalForm, Reference, Weighted};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

/// Server to client: the alignment set and the current reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub round: usize,
    rad: String,
    reference: String,
    kernel: bool,
}

impl Broadcast {
    pub fn new(round: usize, rad: &Matrix, reference: &Reference) -> Broadcast {
        Broadcast {
            round,
            rad: rad.to_csv(),
            reference: reference.matrix().to_csv(),
            kernel: matches!(reference, Reference::Kernel(_)),
        }
    }

    pub fn bytes(&self) -> usize {
        self.rad.len() + self.reference.len()
    }

    pub fn open(&self) -> Result<(Matrix, Reference)> {
        let rad = Matrix::from_csv(&self.rad).map_err(|e| e.context("alignment set payload"))?;
        let m = Matrix::from_csv(&self.reference).map_err(|e| e.context("reference payload"))?;
        let reference = if self.kernel {
            Reference::Kernel(GramMatrix::new(m)?)
        } else {
            Reference::Representation(m)
        };
        Ok((rad, reference))
    }

    pub fn record(&self, client: usize, rad_rows: usize) -> MessageRecord {
        MessageRecord {
            round: self.round,
            client,
            direction: Direction::ToClient,
            payload: PayloadKind::Broadcast,
            rows: rad_rows,
            cols: 0,
            bytes: self.bytes(),
        }
    }
}

/// Client to server: a Gram matrix or a representation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Upload {
    pub round: usize,
    pub client: usize,
    pub kind: PayloadKind,
    pub rows: usize,
    pub cols: usize,
    body: String,
}

impl Upload {
    /// Builds the payload a client sends for `form` from its representations
    /// of the alignment set.
    pub fn from_representations(round: usize, client: usize, phi: &Matrix, form: ProximalForm) -> Result<Upload> {
        let (kind, m) = if form.uses_kernel() {
            (PayloadKind::Gram, gram_linear(phi)?.into_entries())
        } else {
            (PayloadKind::Representation, phi.clone())
        };
        Ok(Upload {
            round,
            client,
            kind,
            rows: m.rows(),
            cols: m.cols(),
            body: m.to_csv(),
        })
    }

    pub fn bytes(&self) -> usize {
        self.body.len()
    }

    pub fn open(&self) -> Result<Matrix> {
        Matrix::from_csv(&self.body).map_err(|e| e.context(format!("payload from client {}", self.client)))
    }

    pub fn record(&self) -> MessageRecord {
        MessageRecord {
            round: self.round,
            client: self.client,
            direction: Direction::ToServer,
            payload: self.kind,
            rows: self.rows,
            cols: self.cols,
            bytes: self.bytes(),
        }
    }
}

/// Server side of the protocol: the latest payload of every client and the
/// aggregation weights. It never sees model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Server {
    pub round: usize,
    pub form: ProximalForm,
    pub weights: Vec<f64>,
    pub latest: Vec<Option<Matrix>>,
}

impl Server {
    pub fn new(form: ProximalForm, weights: Vec<f64>) -> Server {
        let n = weights.len();
        Server {
            round: 0,
            form,
            weights,
            latest: vec![None; n],
        }
    }

    /// Stores one upload per expected client, then aggregates over all
    /// clients' latest payloads.
    pub fn aggregate(&mut self, uploads: &[Upload], expected: &[usize]) -> Result<Reference> {
        let mut fresh: Vec<Option<Matrix>> = vec![None; self.latest.len()];
        for u in uploads {
            if u.client >= self.latest.len() {
                return Err(Error::Protocol(format!("upload from unknown client {}", u.client)));
            }
            if !expected.contains(&u.client) {
                return Err(Error::Protocol(format!("client {} was not sampled this round", u.client)));
            }
            if fresh[u.client].is_some() {
                return Err(Error::Protocol(format!("client {} reported twice", u.client)));
            }
            fresh[u.client] = Some(u.open()?);
        }
        if let Some(&k) = expected.iter().find(|&&k| fresh[k].is_none()) {
            return Err(Error::Protocol(format!("client {k} did not report")));
        }
        for (k, m) in fresh.into_iter().enumerate() {
            if let Some(m) = m {
                self.latest[k] = Some(m);
            }
        }
        self.reference()
    }

    /// `Σ_j w_j P_j` over every client's latest payload, summed in client order.
    pub fn reference(&self) -> Result<Reference> {
        let payloads: Vec<&Matrix> = self
            .latest
            .iter()
            .enumerate()
            .map(|(k, m)| m.as_ref().ok_or_else(|| Error::Protocol(format!("no payload from client {k} yet"))))
            .collect::<Result<_>>()?;
        if self.form.uses_kernel() {
            let grams: Vec<GramMatrix> = payloads.iter().map(|m| GramMatrix::new((*m).clone())).collect::<Result<_>>()?;
            let parts: Vec<Weighted<'_, GramMatrix>> = grams
                .iter()
                .enumerate()
                .map(|(k, g)| Weighted {
                    client: k,
                    weight: self.weights[k],
                    value: g,
                })
                .collect();
            Ok(Reference::Kernel(aggregate_grams(&parts)?))
        } else {
            let parts: Vec<Weighted<'_, Matrix>> = payloads
                .iter()
                .enumerate()
                .map(|(k, m)| Weighted {
                    client: k,
                    weight: self.weights[k],
                    value: *m,
                })
                .collect();
            Ok(Reference::Representation(aggregate_representations(&parts)?))
        }
    }
}

/// Aggregates `uploads` (one per sampled client) into a new reference,
/// reusing the stored payloads of clients that were not sampled.
pub fn server_aggregate(server: &mut Server, uploads: &[Upload], sampled: &[usize]) -> Result<Reference> {
    server.aggregate(uploads, sampled)
}
