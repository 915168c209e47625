//! Truncated SVD latent model, fitted with one-sided Jacobi rotations.

use crate::error::{invalid, LfsError, Result};
use crate::Scalar;

/// Thin singular value decomposition `A = U Σ Vᵀ` of an `m×n` matrix,
/// keeping only `U` and `Σ` (singular values in descending order).
#[derive(Clone, Debug)]
pub struct LeftSvd {
    pub m: usize,
    /// Columns of `U`, each of length `m`; one per singular value.
    pub u: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
}

const MAX_SWEEPS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hestenes one-sided Jacobi: rotates column pairs of `cols` until all are
/// mutually orthogonal. Every rotation is mirrored onto `acc` when given.
fn orthogonalize(cols: &mut [Vec<f64>], mut acc: Option<&mut [Vec<f64>]>) {
    let n = cols.len();
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta) = (norms[p], norms[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let (lo, hi) = cols.split_at_mut(q);
                let (cp, cq) = (&mut lo[p], &mut hi[0]);
                let gamma = dot(cp, cq);
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                norms[p] = dot(cp, cp);
                norms[q] = dot(cq, cq);
                if let Some(acc) = acc.as_deref_mut() {
                    let (lo, hi) = acc.split_at_mut(q);
                    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                        let (a, b) = (*x, *y);
                        *x = c * a - s * b;
                        *y = s * a + c * b;
                    }
                }
            }
        }
        if !rotated {
            return;
        }
    }
    log::warn!("jacobi svd did not converge in {MAX_SWEEPS} sweeps");
}

/// Left singular vectors and singular values of the `m×n` matrix whose
/// columns are `columns`.
pub fn left_svd(columns: &[Vec<f64>]) -> Result<LeftSvd> {
    let n = columns.len();
    if n == 0 {
        return Err(invalid("svd of an empty matrix"));
    }
    let m = columns[0].len();
    if columns.iter().any(|c| c.len() != m) || m == 0 {
        return Err(LfsError::Shape("svd columns differ in length".into()));
    }
    let (u, sigma) = if n <= m {
        // A V = U Σ: orthogonalized columns are σ_j u_j
        let mut cols = columns.to_vec();
        orthogonalize(&mut cols, None);
        let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
        let u = cols
            .into_iter()
            .zip(&sigma)
            .map(|(c, &s)| {
                if s > 0.0 {
                    c.iter().map(|x| x / s).collect()
                } else {
                    vec![0.0; m]
                }
            })
            .collect();
        (u, sigma)
    } else {
        // Aᵀ W = Z Σ with W orthogonal, so A = W Σ Zᵀ and W holds U
        let mut rows: Vec<Vec<f64>> = (0..m).map(|i| columns.iter().map(|c| c[i]).collect()).collect();
        let mut w: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                e
            })
            .collect();
        orthogonalize(&mut rows, Some(&mut w));
        let sigma: Vec<f64> = rows.iter().map(|c| dot(c, c).sqrt()).collect();
        (w, sigma)
    };
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    Ok(LeftSvd {
        m,
        u: order.iter().map(|&i| u[i].clone()).collect(),
        sigma: order.iter().map(|&i| sigma[i]).collect(),
    })
}

/// Modified Gram-Schmidt, applied twice. Columns that vanish (zero
/// singular value) are replaced by the first unit vectors independent of
/// the columns kept so far.
fn orthonormalize(cols: &mut Vec<Vec<f64>>) {
    let m = cols.first().map_or(0, Vec::len);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(cols.len());
    let mut next_unit = 0;
    for c in cols.drain(..) {
        let mut v = c;
        let mut ok = false;
        loop {
            let before = dot(&v, &v).sqrt();
            for _ in 0..2 {
                for q in &out {
                    let p = dot(&v, q);
                    v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
                }
            }
            let after = dot(&v, &v).sqrt();
            if before > 0.0 && after > 1e-8 * before {
                v.iter_mut().for_each(|x| *x /= after);
                ok = true;
            }
            if ok || next_unit >= m {
                break;
            }
            v = vec![0.0; m];
            v[next_unit] = 1.0;
            next_unit += 1;
        }
        out.push(v);
    }
    *cols = out;
}

/// Rank-`c` SVD encoder/decoder: `E(g) = Uᵀ(g − μ)`, `D(l) = U l + μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdLvm<S> {
    pub k: usize,
    pub c: usize,
    /// `Uᵀ`, row-major `c × k²`.
    pub basis_t: Vec<S>,
    /// All singular values of the training matrix, descending.
    pub singular_values: Vec<f64>,
    /// Training mean frame when centring is on.
    pub mean: Option<Vec<S>>,
}

impl<S: Scalar> SvdLvm<S> {
    /// Fits on the columns `frames` (each a flattened `k×k` frame).
    pub fn fit(frames: &[Vec<f64>], k: usize, c: usize, center: bool) -> Result<Self> {
        let m = k * k;
        if frames.is_empty() {
            return Err(invalid("svd fit needs at least one frame"));
        }
        if frames.iter().any(|f| f.len() != m) {
            return Err(LfsError::Shape(format!("svd fit expects frames of {m} values")));
        }
        if c == 0 || c > m.min(frames.len()) {
            return Err(invalid(format!(
                "rank c={c} must lie in [1, min(k², frames)] = [1, {}]",
                m.min(frames.len())
            )));
        }
        let mean = center.then(|| {
            let mut mu = vec![0.0; m];
            for f in frames {
                mu.iter_mut().zip(f).for_each(|(a, b)| *a += b);
            }
            mu.iter_mut().for_each(|a| *a /= frames.len() as f64);
            mu
        });
        let cols: Vec<Vec<f64>> = match &mean {
            Some(mu) => frames
                .iter()
                .map(|f| f.iter().zip(mu).map(|(a, b)| a - b).collect())
                .collect(),
            None => frames.to_vec(),
        };
        let svd = left_svd(&cols)?;
        let mut basis: Vec<Vec<f64>> = svd.u.into_iter().take(c).collect();
        orthonormalize(&mut basis);
        Ok(Self {
            k,
            c,
            basis_t: basis.iter().flatten().map(|&x| S::lit(x)).collect(),
            singular_values: svd.sigma,
            mean: mean.map(|mu| mu.into_iter().map(S::lit).collect()),
        })
    }

    /// `sqrt(Σ_{i>c} σ_i²)`, the optimal rank-`c` Frobenius error.
    pub fn tail_energy(&self) -> f64 {
        self.singular_values[self.c.min(self.singular_values.len())..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }

    pub fn basis_column(&self, j: usize) -> Vec<S> {
        let m = self.k * self.k;
        self.basis_t[j * m..(j + 1) * m].to_vec()
    }

    pub fn encode_flat(&self, frame: &[S]) -> Vec<S> {
        let m = self.k * self.k;
        let centred: Vec<S> = match &self.mean {
            Some(mu) => frame.iter().zip(mu).map(|(&a, &b)| a - b).collect(),
            None => frame.to_vec(),
        };
        let mut out = vec![S::zero(); self.c];
        S::gemm(self.c, m, 1, &self.basis_t, false, &centred, false, &mut out, false);
        out
    }

    pub fn decode_flat(&self, latent: &[S]) -> Vec<S> {
        let m = self.k * self.k;
        let mut out = match &self.mean {
            Some(mu) => mu.clone(),
            None => vec![S::zero(); m],
        };
        S::gemm(m, self.c, 1, &self.basis_t, true, latent, false, &mut out, true);
        out
    }

    pub fn cast<T: Scalar>(&self) -> SvdLvm<T> {
        SvdLvm {
            k: self.k,
            c: self.c,
            basis_t: self.basis_t.iter().map(|v| T::lit(v.as_f64())).collect(),
            singular_values: self.singular_values.clone(),
            mean: self
                .mean
                .as_ref()
                .map(|m| m.iter().map(|v| T::lit(v.as_f64())).collect()),
        }
    }
}
