//! Dense eigenvalue machinery for the small matrices this crate works with.
//!
//! Nonsymmetric eigenvalues are computed in-repo by Householder reduction to
//! Hessenberg form followed by the Francis double-shift QR iteration
//! (eigenvalues only, no Schur vectors). Matrices here are tiny (n ≲ 130), so
//! a dense O(n³) routine without balancing is plenty.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("QR eigenvalue iteration failed to converge for eigenvalue index {index}")]
    QrNoConvergence { index: usize },
}

/// One eigenvalue of a real matrix; complex ones come in conjugate pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Householder similarity reduction to upper Hessenberg form, in place.
fn reduce_to_hessenberg(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for k in 0..n.saturating_sub(2) {
        let mut norm2 = 0.0;
        for i in (k + 1)..n {
            norm2 += a[(i, k)] * a[(i, k)];
        }
        if norm2 == 0.0 {
            continue;
        }
        let x1 = a[(k + 1, k)];
        let alpha = if x1 > 0.0 {
            -norm2.sqrt()
        } else {
            norm2.sqrt()
        };
        // u = x - alpha e1, |u|^2 = 2 alpha (alpha - x1)
        let u_norm2 = 2.0 * alpha * (alpha - x1);
        if u_norm2 <= f64::EPSILON * norm2 {
            continue;
        }
        let mut u = DVector::zeros(n);
        u[k + 1] = x1 - alpha;
        for i in (k + 2)..n {
            u[i] = a[(i, k)];
        }
        let beta = 2.0 / u_norm2;
        // A <- (I - beta u u^T) A
        for j in 0..n {
            let mut dot = 0.0;
            for i in (k + 1)..n {
                dot += u[i] * a[(i, j)];
            }
            let dot = beta * dot;
            for i in (k + 1)..n {
                a[(i, j)] -= dot * u[i];
            }
        }
        // A <- A (I - beta u u^T)
        for i in 0..n {
            let mut dot = 0.0;
            for j in (k + 1)..n {
                dot += a[(i, j)] * u[j];
            }
            let dot = beta * dot;
            for j in (k + 1)..n {
                a[(i, j)] -= dot * u[j];
            }
        }
    }
}

/// Eigenvalues of a general real square matrix.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Eigenvalue>, LinalgError> {
    if m.nrows() != m.ncols() {
        return Err(LinalgError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut h = m.clone();
    reduce_to_hessenberg(&mut h);
    francis_qr_eigenvalues(&mut h)
}

/// Francis double-shift QR on an upper Hessenberg matrix (EISPACK `hqr` lineage).
fn francis_qr_eigenvalues(h: &mut DMatrix<f64>) -> Result<Vec<Eigenvalue>, LinalgError> {
    let n = h.nrows();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];

    let mut anorm = 0.0;
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += h[(i, j)].abs();
        }
    }
    if anorm == 0.0 {
        return Ok(vec![Eigenvalue { re: 0.0, im: 0.0 }; n]);
    }

    let eps = f64::EPSILON;
    let mut t = 0.0;
    let mut nn = n as isize - 1;
    while nn >= 0 {
        let mut its = 0;
        'qr: loop {
            // Find small subdiagonal element.
            let mut l = nn;
            while l >= 1 {
                let s =
                    h[(l as usize - 1, l as usize - 1)].abs() + h[(l as usize, l as usize)].abs();
                let s = if s == 0.0 { anorm } else { s };
                if h[(l as usize, l as usize - 1)].abs() <= eps * s {
                    h[(l as usize, l as usize - 1)] = 0.0;
                    break;
                }
                l -= 1;
            }
            let x = h[(nn as usize, nn as usize)];
            if l == nn {
                // One real root found.
                wr[nn as usize] = x + t;
                wi[nn as usize] = 0.0;
                nn -= 1;
                break 'qr;
            }
            let y = h[(nn as usize - 1, nn as usize - 1)];
            let w = h[(nn as usize, nn as usize - 1)] * h[(nn as usize - 1, nn as usize)];
            if l == nn - 1 {
                // Two roots found.
                let p = 0.5 * (y - x);
                let q = p * p + w;
                let mut z = q.abs().sqrt();
                let x = x + t;
                if q >= 0.0 {
                    z = p + z.copysign(p);
                    wr[nn as usize - 1] = x + z;
                    wr[nn as usize] = if z != 0.0 { x - w / z } else { x + z };
                    wi[nn as usize - 1] = 0.0;
                    wi[nn as usize] = 0.0;
                } else {
                    wr[nn as usize - 1] = x + p;
                    wr[nn as usize] = x + p;
                    wi[nn as usize - 1] = -z;
                    wi[nn as usize] = z;
                }
                nn -= 2;
                break 'qr;
            }
            if its == 40 {
                return Err(LinalgError::QrNoConvergence { index: nn as usize });
            }
            let (mut x, mut y, mut w) = (x, y, w);
            if its == 10 || its == 20 || its == 30 {
                // Exceptional shift.
                t += x;
                for i in 0..=nn as usize {
                    h[(i, i)] -= x;
                }
                let s = h[(nn as usize, nn as usize - 1)].abs()
                    + h[(nn as usize - 1, nn as usize - 2)].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            its += 1;
            // Form shift, then look for two consecutive small subdiagonals.
            let mut m = nn - 2;
            let (mut p, mut q, mut r) = (0.0, 0.0, 0.0);
            while m >= l {
                let mu = m as usize;
                let z = h[(mu, mu)];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / h[(mu + 1, mu)] + h[(mu, mu + 1)];
                q = h[(mu + 1, mu + 1)] - z - rr - ss;
                r = h[(mu + 2, mu + 1)];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = h[(mu, mu - 1)].abs() * (q.abs() + r.abs());
                let v = p.abs() * (h[(mu - 1, mu - 1)].abs() + z.abs() + h[(mu + 1, mu + 1)].abs());
                if u <= eps * v {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nn {
                h[(i as usize, i as usize - 2)] = 0.0;
                if i > m + 2 {
                    h[(i as usize, i as usize - 3)] = 0.0;
                }
            }
            // Double QR step on rows l..=nn, columns m..=nn.
            for k in m..nn {
                let ku = k as usize;
                if k != m {
                    p = h[(ku, ku - 1)];
                    q = h[(ku + 1, ku - 1)];
                    r = if k != nn - 1 {
                        h[(ku + 2, ku - 1)]
                    } else {
                        0.0
                    };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = (p * p + q * q + r * r).sqrt().copysign(p);
                if s == 0.0 {
                    continue;
                }
                if k == m {
                    if l != m {
                        h[(ku, ku - 1)] = -h[(ku, ku - 1)];
                    }
                } else {
                    h[(ku, ku - 1)] = -s * x;
                }
                p += s;
                x = p / s;
                y = q / s;
                let z = r / s;
                q /= p;
                r /= p;
                // Row modification.
                for j in ku..=nn as usize {
                    let mut pp = h[(ku, j)] + q * h[(ku + 1, j)];
                    if k != nn - 1 {
                        pp += r * h[(ku + 2, j)];
                        h[(ku + 2, j)] -= pp * z;
                    }
                    h[(ku + 1, j)] -= pp * y;
                    h[(ku, j)] -= pp * x;
                }
                let mmin = if nn < k + 3 { nn as usize } else { ku + 3 };
                // Column modification.
                for i in l as usize..=mmin {
                    let mut pp = x * h[(i, ku)] + y * h[(i, ku + 1)];
                    if k != nn - 1 {
                        pp += z * h[(i, ku + 2)];
                        h[(i, ku + 2)] -= pp * r;
                    }
                    h[(i, ku + 1)] -= pp * q;
                    h[(i, ku)] -= pp;
                }
            }
        }
    }
    Ok((0..n)
        .map(|i| Eigenvalue {
            re: wr[i],
            im: wi[i],
        })
        .collect())
}

/// Spectral radius: max |λ| over the eigenvalues of a general square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, LinalgError> {
    Ok(eigenvalues(m)?
        .iter()
        .map(Eigenvalue::modulus)
        .fold(0.0, f64::max))
}

/// ℓ2 operator norm, computed as sqrt(λ_max(MᵀM)) via a symmetric eigensolve.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v))
        .max(0.0)
        .sqrt()
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

/// Orthonormal basis (columns) for the span of eigenvectors of a symmetric
/// matrix whose eigenvalues exceed `cutoff · max|λ|`, together with the kept
/// eigenvalues. Used to restrict operators to the numerical range of a PSD
/// Gram matrix.
pub fn range_basis(m: &DMatrix<f64>, cutoff: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = m.nrows();
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs()));
    let mut cols = Vec::new();
    let mut kept = Vec::new();
    for j in 0..n {
        let lambda = eig.eigenvalues[j];
        if max_abs > 0.0 && lambda.abs() > cutoff * max_abs {
            cols.push(eig.eigenvectors.column(j).clone_owned());
            kept.push(lambda);
        }
    }
    let basis = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (basis, kept)
}
