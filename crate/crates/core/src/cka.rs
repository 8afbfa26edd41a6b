//! Gram matrices, linear CKA, kernel and representation aggregation, and the
//! proximal terms that couple a client to the aggregated reference.
//!
//! Gram matrices are uncentered unless [`Proximal::centered`] is set. The
//! linear CKA score is `tr(K_i K_j) / (‖K_i‖_F ‖K_j‖_F)`, which for linear
//! kernels equals `‖A_jᵀ A_i‖_F² / (‖A_iᵀ A_i‖_F ‖A_jᵀ A_j‖_F)`.
//!
//! The proximal term added to the local loss comes in four forms. The
//! local objective adds `μ · d(Φ, reference)`; whether `d` should be the
//! CKA similarity itself or the distance `1 - CKA` is ambiguous in the
//! original formulation (adding a similarity to a minimized loss pushes
//! clients apart). [`ProximalForm::OneMinusCka`] is the default distance
//! reading and [`ProximalForm::RawCka`] keeps the literal similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, frobenius_inner, frobenius_norm, Matrix};

const SYMMETRY_TOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-9;
/// Below this distance the L2 proximal gradient returns the zero subgradient.
pub const L2_GRAD_EPS: f64 = 1e-12;

/// Symmetric `L x L` kernel matrix over the alignment dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    entries: Matrix,
}

impl GramMatrix {
    /// Wraps a square matrix, checking symmetry to within 1e-12 (relative to
    /// the largest entry when that exceeds one).
    pub fn new(entries: Matrix) -> Result<Self> {
        let (r, c) = entries.shape();
        if r != c {
            return Err(Error::shape("GramMatrix::new", format!("{r}x{c} is not square")));
        }
        let tol = SYMMETRY_TOL * entries.max_abs().max(1.0);
        for p in 0..r {
            for q in p + 1..r {
                if (entries.get(p, q) - entries.get(q, p)).abs() > tol {
                    return Err(Error::Degenerate(format!(
                        "Gram matrix not symmetric at ({p},{q})"
                    )));
                }
            }
        }
        Ok(GramMatrix { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn into_entries(self) -> Matrix {
        self.entries
    }

    /// `H K H` with `H = I - 11ᵀ/L`.
    pub fn centered(&self) -> GramMatrix {
        let n = self.size();
        let k = &self.entries;
        let row_means: Vec<f64> = (0..n).map(|p| k.row(p).iter().sum::<f64>() / n as f64).collect();
        let grand = row_means.iter().sum::<f64>() / n as f64;
        let mut data = vec![0.0; n * n];
        for p in 0..n {
            for q in p..n {
                // Row and column means coincide for symmetric K.
                let v = k.get(p, q) - row_means[p] - row_means[q] + grand;
                data[p * n + q] = v;
                data[q * n + p] = v;
            }
        }
        GramMatrix {
            entries: Matrix::new(n, n, data).expect("centering keeps finite values"),
        }
    }
}

/// `K = A Aᵀ`, filled symmetrically.
pub fn gram_linear(a: &Matrix) -> Result<GramMatrix> {
    let n = a.rows();
    if n == 0 {
        return Err(Error::shape("gram_linear", "activation matrix has no rows"));
    }
    let mut data = vec![0.0; n * n];
    for p in 0..n {
        for q in p..n {
            let v = dot(a.row(p), a.row(q));
            data[p * n + q] = v;
            data[q * n + p] = v;
        }
    }
    Ok(GramMatrix {
        entries: Matrix::new(n, n, data)?,
    })
}

/// `K_pq = exp(-γ ‖a_p - a_q‖²)`.
pub fn gram_rbf(a: &Matrix, gamma: f64) -> Result<GramMatrix> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("RBF gamma must be positive, got {gamma}")));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::shape("gram_rbf", "activation matrix has no rows"));
    }
    let mut data = vec![0.0; n * n];
    for p in 0..n {
        data[p * n + p] = 1.0;
        for q in p + 1..n {
            let d2: f64 = a
                .row(p)
                .iter()
                .zip(a.row(q))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let v = (-gamma * d2).exp();
            data[p * n + q] = v;
            data[q * n + p] = v;
        }
    }
    Ok(GramMatrix {
        entries: Matrix::new(n, n, data)?,
    })
}

fn same_size(a: &GramMatrix, b: &GramMatrix, op: &'static str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(op, format!("L={} vs L={}", a.size(), b.size())));
    }
    Ok(())
}

/// `Σ_pq K_i[p,q] K̄[p,q]`, i.e. `tr(K_i K̄)` for symmetric inputs.
pub fn trace_alignment(ki: &GramMatrix, kbar: &GramMatrix) -> Result<f64> {
    same_size(ki, kbar, "trace_alignment")?;
    frobenius_inner(&ki.entries, &kbar.entries)
}

/// `tr(K_i K_j) / (‖K_i‖_F ‖K_j‖_F)`.
pub fn linear_cka(ki: &GramMatrix, kj: &GramMatrix) -> Result<f64> {
    same_size(ki, kj, "linear_cka")?;
    let ni = frobenius_norm(&ki.entries);
    let nj = frobenius_norm(&kj.entries);
    if ni == 0.0 || nj == 0.0 {
        return Err(Error::Degenerate("linear CKA of a zero Gram matrix".into()));
    }
    Ok(frobenius_inner(&ki.entries, &kj.entries)? / (ni * nj))
}

/// One client's contribution to an aggregate.
#[derive(Debug)]
pub struct Weighted<'a, T> {
    pub client: usize,
    pub weight: f64,
    pub value: &'a T,
}

impl<T> Clone for Weighted<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Weighted<'_, T> {}

fn check_weights<T>(items: &[Weighted<'_, T>]) -> Result<Vec<usize>> {
    if items.is_empty() {
        return Err(Error::Config("aggregation over zero clients".into()));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].client);
    if order.windows(2).any(|w| items[w[0]].client == items[w[1]].client) {
        return Err(Error::Config("duplicate client in aggregation".into()));
    }
    if let Some(bad) = items.iter().find(|w| !(w.weight >= 0.0)) {
        return Err(Error::Config(format!(
            "client {} has negative weight {}",
            bad.client, bad.weight
        )));
    }
    let sum: f64 = order.iter().map(|&i| items[i].weight).sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!("aggregation weights sum to {sum}, expected 1")));
    }
    Ok(order)
}

fn weighted_sum(parts: &[Weighted<'_, Matrix>]) -> Result<Matrix> {
    let order = check_weights(parts)?;
    let first = parts[order[0]].value;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for &i in &order {
        acc = acc.add_scaled(parts[i].value, parts[i].weight)?;
    }
    Ok(acc)
}

/// `K̄ = Σ_k w_k K_k`, reduced in ascending client order so that the result
/// does not depend on the order reports arrive in.
pub fn aggregate_grams(parts: &[Weighted<'_, GramMatrix>]) -> Result<GramMatrix> {
    if let Some(first) = parts.first() {
        for p in parts {
            same_size(first.value, p.value, "aggregate_grams")?;
        }
    }
    let as_mats: Vec<Weighted<'_, Matrix>> = parts
        .iter()
        .map(|p| Weighted {
            client: p.client,
            weight: p.weight,
            value: &p.value.entries,
        })
        .collect();
    GramMatrix::new(weighted_sum(&as_mats)?)
}

/// `Φ̄ = Σ_k w_k Φ_k`. Only defined when every client has the same
/// representation width; heterogeneous clients must use the kernel form.
pub fn aggregate_representations(parts: &[Weighted<'_, Matrix>]) -> Result<Matrix> {
    if let Some(first) = parts.first() {
        for p in parts {
            if p.value.shape() != first.value.shape() {
                return Err(Error::Unsupported(format!(
                    "representation aggregation needs equal shapes, got {:?} (client {}) and {:?} (client {}); use a kernel proximal form for heterogeneous widths",
                    first.value.shape(),
                    first.client,
                    p.value.shape(),
                    p.client
                )));
            }
        }
    }
    weighted_sum(parts)
}

/// Which distance couples local representations to the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximalForm {
    /// `1 - CKA(ΦΦᵀ, K̄)`.
    OneMinusCka,
    /// `CKA(ΦΦᵀ, K̄)`.
    RawCka,
    /// `Σ (ΦΦᵀ) ∘ K̄`.
    TraceAlignment,
    /// `‖Φ - Φ̄‖_F`.
    L2Rep,
}

impl ProximalForm {
    pub fn uses_kernel(self) -> bool {
        !matches!(self, ProximalForm::L2Rep)
    }
}

/// The server-side quantity a client is pulled towards.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    Kernel(GramMatrix),
    Representation(Matrix),
}

impl Reference {
    pub fn matrix(&self) -> &Matrix {
        match self {
            Reference::Kernel(k) => k.entries(),
            Reference::Representation(m) => m,
        }
    }
}

/// Proximal form plus the centering toggle for the CKA forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proximal {
    pub form: ProximalForm,
    pub centered: bool,
}

impl Proximal {
    pub fn new(form: ProximalForm) -> Self {
        Proximal {
            form,
            centered: false,
        }
    }

    fn kernel<'a>(&self, reference: &'a Reference) -> Result<&'a GramMatrix> {
        match reference {
            Reference::Kernel(k) if self.form.uses_kernel() => Ok(k),
            _ => Err(Error::Config(format!(
                "proximal form {:?} does not accept this reference kind",
                self.form
            ))),
        }
    }

    fn representation<'a>(&self, reference: &'a Reference, phi: &Matrix) -> Result<&'a Matrix> {
        match reference {
            Reference::Representation(r) if self.form == ProximalForm::L2Rep => {
                if r.shape() != phi.shape() {
                    return Err(Error::shape(
                        "proximal L2",
                        format!("Φ is {:?}, Φ̄ is {:?}", phi.shape(), r.shape()),
                    ));
                }
                Ok(r)
            }
            _ => Err(Error::Config(
                "L2 proximal form requires a representation reference".into(),
            )),
        }
    }

    /// Unweighted distance `d(Φ, reference)`.
    pub fn distance(&self, phi: &Matrix, reference: &Reference) -> Result<f64> {
        match self.form {
            ProximalForm::L2Rep => {
                let r = self.representation(reference, phi)?;
                Ok(frobenius_norm(&phi.sub(r)?))
            }
            ProximalForm::TraceAlignment => {
                let kbar = self.kernel(reference)?;
                trace_alignment(&gram_linear(phi)?, kbar)
            }
            ProximalForm::RawCka | ProximalForm::OneMinusCka => {
                let kbar = self.kernel(reference)?;
                let (k, kbar) = self.cka_pair(gram_linear(phi)?, kbar)?;
                let c = linear_cka(&k, &kbar)?;
                Ok(if self.form == ProximalForm::RawCka { c } else { 1.0 - c })
            }
        }
    }

    fn cka_pair(&self, k: GramMatrix, kbar: &GramMatrix) -> Result<(GramMatrix, GramMatrix)> {
        same_size(&k, kbar, "proximal CKA")?;
        if self.centered {
            Ok((k.centered(), kbar.centered()))
        } else {
            Ok((k, kbar.clone()))
        }
    }

    /// `μ · d(Φ, reference)`.
    pub fn value(&self, phi: &Matrix, reference: &Reference, mu: f64) -> Result<f64> {
        if mu == 0.0 {
            // Still validate the pairing so misconfiguration surfaces early.
            match self.form {
                ProximalForm::L2Rep => {
                    self.representation(reference, phi)?;
                }
                _ => {
                    self.kernel(reference)?;
                }
            }
            return Ok(0.0);
        }
        Ok(mu * self.distance(phi, reference)?)
    }

    /// Gradient of the unweighted distance with respect to `Φ`, treating the
    /// reference as a constant.
    pub fn grad(&self, phi: &Matrix, reference: &Reference) -> Result<Matrix> {
        match self.form {
            ProximalForm::L2Rep => {
                let r = self.representation(reference, phi)?;
                let diff = phi.sub(r)?;
                let dist = frobenius_norm(&diff);
                if dist <= L2_GRAD_EPS {
                    return Ok(Matrix::zeros(phi.rows(), phi.cols()));
                }
                diff.scale(1.0 / dist)
            }
            ProximalForm::TraceAlignment => {
                let kbar = self.kernel(reference)?;
                if kbar.size() != phi.rows() {
                    return Err(Error::shape("proximal trace", "K̄ size differs from Φ rows"));
                }
                kbar.entries().matmul(phi)?.scale(2.0)
            }
            ProximalForm::RawCka | ProximalForm::OneMinusCka => {
                let kbar = self.kernel(reference)?;
                let (k, kbar) = self.cka_pair(gram_linear(phi)?, kbar)?;
                let n = frobenius_norm(k.entries());
                let m = frobenius_norm(kbar.entries());
                if n == 0.0 || m == 0.0 {
                    return Err(Error::Degenerate("CKA gradient at a zero Gram matrix".into()));
                }
                let t = frobenius_inner(k.entries(), kbar.entries())?;
                let kbar_phi = kbar.entries().matmul(phi)?;
                let k_phi = k.entries().matmul(phi)?;
                let raw = kbar_phi
                    .add_scaled(&k_phi, -t / (n * n))?
                    .scale(2.0 / (n * m))?;
                if self.form == ProximalForm::RawCka {
                    Ok(raw)
                } else {
                    raw.scale(-1.0)
                }
            }
        }
    }
}

/// `μ · d(Φ, reference)` with uncentered Grams.
pub fn proximal_value(phi: &Matrix, reference: &Reference, form: ProximalForm, mu: f64) -> Result<f64> {
    Proximal::new(form).value(phi, reference, mu)
}

/// `∂ d(Φ, reference) / ∂Φ` with uncentered Grams.
pub fn proximal_grad(phi: &Matrix, reference: &Reference, form: ProximalForm) -> Result<Matrix> {
    Proximal::new(form).grad(phi, reference)
}
