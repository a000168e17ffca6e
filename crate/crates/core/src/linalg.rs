//! Dense and sparse linear-algebra helpers shared by the physics modules.
//!
//! Dense eigensolvers and matrix products go through LAPACK/BLAS via
//! `ndarray-linalg`. The sparse type is a minimal CSR used for drive
//! operators and collapse operators, where only a few hundred entries
//! survive out of a 64x64 matrix.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, ShapeBuilder, Zip};
use ndarray_linalg::{Eigh, UPLO};
use num_complex::Complex64;

use crate::error::Result;

pub type C64 = Complex64;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub fn to_complex(a: &Array2<f64>) -> Array2<C64> {
    a.mapv(|x| C64::new(x, 0.0))
}

pub fn dagger(a: &Array2<C64>) -> Array2<C64> {
    a.t().mapv(|z| z.conj())
}

pub fn identity(n: usize) -> Array2<C64> {
    Array2::from_diag_elem(n, ONE)
}

pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            if aij == ZERO {
                continue;
            }
            out.slice_mut(s![i * br..(i + 1) * br, j * bc..(j + 1) * bc])
                .assign(&b.mapv(|x| x * aij));
        }
    }
    out
}

/// Trace of a square complex matrix.
pub fn trace(a: &Array2<C64>) -> C64 {
    a.diag().sum()
}

/// max |A - A^dagger|.
pub fn hermiticity_residual(a: &Array2<C64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((a[[i, j]] - a[[j, i]].conj()).norm());
        }
    }
    worst
}

/// max |U^dagger U - I| over all entries.
pub fn unitarity_residual(u: &Array2<C64>) -> f64 {
    let p = dagger(u).dot(u);
    let mut worst: f64 = 0.0;
    for ((i, j), z) in p.indexed_iter() {
        let target = if i == j { ONE } else { ZERO };
        worst = worst.max((z - target).norm());
    }
    worst
}

pub fn frobenius(a: &Array2<C64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Make `a` exactly Hermitian by averaging with its adjoint.
pub fn symmetrize(a: &mut Array2<C64>) {
    let n = a.nrows();
    for i in 0..n {
        a[[i, i]].im = 0.0;
        for j in (i + 1)..n {
            let avg = (a[[i, j]] + a[[j, i]].conj()) * 0.5;
            a[[i, j]] = avg;
            a[[j, i]] = avg.conj();
        }
    }
}

/// Real symmetric eigendecomposition, ascending eigenvalues.
pub fn eigh_real(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    Ok(a.eigh(UPLO::Lower)?)
}

/// Hermitian eigendecomposition, ascending eigenvalues.
pub fn eigh_complex(a: &Array2<C64>) -> Result<(Array1<f64>, Array2<C64>)> {
    // Row-major complex input comes back with conjugated eigenvectors.
    let mut f = Array2::zeros(a.dim().f());
    f.assign(a);
    Ok(f.eigh(UPLO::Lower)?)
}

/// exp(-i H t) for a real symmetric H given its eigendecomposition.
pub fn expm_from_real_eig(values: &Array1<f64>, vectors: &Array2<f64>, t: f64) -> Array2<C64> {
    let mut vc = vectors.clone();
    let mut vs = vectors.clone();
    for (k, &lam) in values.iter().enumerate() {
        let (sn, cs) = (lam * t).sin_cos();
        vc.column_mut(k).mapv_inplace(|x| x * cs);
        vs.column_mut(k).mapv_inplace(|x| -x * sn);
    }
    let re = vc.dot(&vectors.t());
    let im = vs.dot(&vectors.t());
    let mut out = Array2::zeros(re.dim());
    Zip::from(&mut out)
        .and(&re)
        .and(&im)
        .for_each(|o, &r, &i| *o = C64::new(r, i));
    out
}

/// exp(-i H t) for a Hermitian H.
pub fn expm_hermitian(h: &Array2<C64>, t: f64) -> Result<Array2<C64>> {
    let (vals, vecs) = eigh_complex(h)?;
    let mut scaled = vecs.clone();
    for (k, &lam) in vals.iter().enumerate() {
        let ph = C64::from_polar(1.0, -lam * t);
        scaled.column_mut(k).mapv_inplace(|x| x * ph);
    }
    Ok(scaled.dot(&dagger(&vecs)))
}

/// Partition of basis indices into blocks that a matrix leaves invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStructure {
    pub dim: usize,
    pub blocks: Vec<Vec<usize>>,
}

impl BlockStructure {
    pub fn single(dim: usize) -> Self {
        BlockStructure { dim, blocks: vec![(0..dim).collect()] }
    }

    pub fn extract(&self, a: &Array2<f64>, b: usize) -> Array2<f64> {
        let idx = &self.blocks[b];
        Array2::from_shape_fn((idx.len(), idx.len()), |(i, j)| a[[idx[i], idx[j]]])
    }
}

/// Eigendecomposition of a real symmetric matrix that is block diagonal
/// under `blocks`. Eigenvectors are returned in the full basis, sorted by
/// ascending eigenvalue.
pub fn eigh_blocked(a: &Array2<f64>, blocks: &BlockStructure) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = blocks.dim;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    let mut per_block = Vec::with_capacity(blocks.blocks.len());
    for (b, _) in blocks.blocks.iter().enumerate() {
        let (vals, vecs) = eigh_real(&blocks.extract(a, b))?;
        for (k, &v) in vals.iter().enumerate() {
            pairs.push((v, b, k));
        }
        per_block.push(vecs);
    }
    pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (col, &(v, b, k)) in pairs.iter().enumerate() {
        values[col] = v;
        let idx = &blocks.blocks[b];
        for (r, &row) in idx.iter().enumerate() {
            vectors[[row, col]] = per_block[b][[r, k]];
        }
    }
    Ok((values, vectors))
}

/// A unitary stored as one dense complex block per invariant subspace.
#[derive(Debug, Clone)]
pub struct BlockUnitary {
    pub structure: BlockStructure,
    pub blocks: Vec<Array2<C64>>,
}

impl BlockUnitary {
    pub fn identity(structure: &BlockStructure) -> Self {
        let blocks = structure.blocks.iter().map(|b| identity(b.len())).collect();
        BlockUnitary { structure: structure.clone(), blocks }
    }

    /// exp(-i H t) of a block-diagonal real symmetric H.
    pub fn expm_real(h: &Array2<f64>, structure: &BlockStructure, t: f64) -> Result<Self> {
        let mut blocks = Vec::with_capacity(structure.blocks.len());
        for b in 0..structure.blocks.len() {
            let (vals, vecs) = eigh_real(&structure.extract(h, b))?;
            blocks.push(expm_from_real_eig(&vals, &vecs, t));
        }
        Ok(BlockUnitary { structure: structure.clone(), blocks })
    }

    /// self <- step * self
    pub fn left_mul(&mut self, step: &BlockUnitary) {
        for (b, s) in self.blocks.iter_mut().zip(step.blocks.iter()) {
            *b = s.dot(b);
        }
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let n = self.structure.dim;
        let mut out = Array2::zeros((n, n));
        for (idx, blk) in self.structure.blocks.iter().zip(self.blocks.iter()) {
            for (i, &r) in idx.iter().enumerate() {
                for (j, &c) in idx.iter().enumerate() {
                    out[[r, c]] = blk[[i, j]];
                }
            }
        }
        out
    }
}

/// Compressed sparse row complex matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<C64>,
}

impl Csr {
    /// Keep entries with |a_ij| > tol.
    pub fn from_dense(a: &Array2<C64>, tol: f64) -> Self {
        let n = a.nrows();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for j in 0..a.ncols() {
                let z = a[[i, j]];
                if z.norm() > tol {
                    cols.push(j);
                    vals.push(z);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { n, row_ptr, cols, vals }
    }

    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, C64)>) -> Self {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(entries.len());
        let mut vals: Vec<C64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            cols.push(c);
            vals.push(v);
            row_ptr[r + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { n, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// out = scale * self * x (overwrites out)
    pub fn apply_into(&self, x: ArrayView2<C64>, scale: C64, mut out: ArrayViewMut2<C64>) {
        let k = x.ncols();
        out.fill(ZERO);
        for i in 0..self.n {
            let mut orow = out.row_mut(i);
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                let v = self.vals[p] * scale;
                let xrow = x.row(self.cols[p]);
                for c in 0..k {
                    orow[c] += v * xrow[c];
                }
            }
        }
    }

    /// self * x
    pub fn dot(&self, x: &Array2<C64>) -> Array2<C64> {
        let mut out = Array2::zeros((self.n, x.ncols()));
        self.apply_into(x.view(), ONE, out.view_mut());
        out
    }

    /// self * x * self^dagger for square x
    pub fn sandwich(&self, x: &Array2<C64>) -> Array2<C64> {
        let ax = self.dot(x);
        // (A X) A^dagger = ((A (A X)^dagger))^dagger
        let inner = self.dot(&dagger(&ax));
        dagger(&inner)
    }

    pub fn to_dense(&self) -> Array2<C64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[[i, self.cols[p]]] += self.vals[p];
            }
        }
        out
    }
}

/// x <- exp(-i (diag(d) + h) dt) x by a truncated Taylor series with
/// norm-based substepping. `h` holds only off-diagonal (or any) entries.
pub fn taylor_step(d: &Array1<f64>, h: &Csr, dt: f64, x: &mut Array2<C64>) {
    let hmax = h
        .row_ptr
        .windows(2)
        .enumerate()
        .map(|(i, w)| d[i].abs() + h.vals[w[0]..w[1]].iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let sub = ((hmax * dt) / 0.5).ceil().max(1.0) as usize;
    let tau = dt / sub as f64;
    let mut term = Array2::<C64>::zeros(x.dim());
    let mut next = Array2::<C64>::zeros(x.dim());
    for _ in 0..sub {
        term.assign(x);
        let mut k = 1.0;
        loop {
            h.apply_into(term.view(), C64::new(0.0, -tau / k), next.view_mut());
            for (mut nrow, (trow, &dv)) in next
                .axis_iter_mut(Axis(0))
                .zip(term.axis_iter(Axis(0)).zip(d.iter()))
            {
                let f = C64::new(0.0, -tau * dv / k);
                for (n, t) in nrow.iter_mut().zip(trow.iter()) {
                    *n += f * t;
                }
            }
            std::mem::swap(&mut term, &mut next);
            *x += &term;
            let size = term.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
            if size < 1e-34 || k > 40.0 {
                break;
            }
            k += 1.0;
        }
    }
}

/// Least-squares solution of A x = b via the normal equations.
pub fn lstsq_real(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    use ndarray_linalg::Solve;
    let ata = a.t().dot(a);
    let atb = a.t().dot(b);
    Ok(ata.solve(&atb)?)
}

/// Principal branch argument, wrapped into (-pi, pi].
pub fn wrap_pi(x: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut y = x.rem_euclid(tau);
    if y > std::f64::consts::PI {
        y -= tau;
    }
    y
}

/// Wrap into [0, 2 pi).
pub fn wrap_2pi(x: f64) -> f64 {
    x.rem_euclid(std::f64::consts::TAU)
}

/// Remove 2 pi jumps from a sequence of phases.
pub fn unwrap(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (k, &p) in phases.iter().enumerate() {
        if k > 0 {
            let prev = phases[k - 1];
            offset += std::f64::consts::TAU * ((prev - p) / std::f64::consts::TAU).round();
        }
        out.push(p + offset);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kron_of_identities_is_identity() {
        let k = kron(&identity(2), &identity(3));
        assert_eq!(k, identity(6));
    }

    #[test]
    fn expm_real_matches_hermitian_path() {
        let h = array![[1.0, 0.3, 0.0], [0.3, -0.5, 0.2], [0.0, 0.2, 2.0]];
        let (v, w) = eigh_real(&h).unwrap();
        let u1 = expm_from_real_eig(&v, &w, 0.7);
        let u2 = expm_hermitian(&to_complex(&h), 0.7).unwrap();
        assert!(frobenius(&(&u1 - &u2)) < 1e-13);
        assert!(unitarity_residual(&u1) < 1e-13);
    }

    #[test]
    fn taylor_matches_dense_exponential() {
        let h = array![
            [C64::new(0.0, 0.0), C64::new(0.4, 0.1), C64::new(0.0, 0.0)],
            [C64::new(0.4, -0.1), C64::new(0.0, 0.0), C64::new(0.2, 0.0)],
            [C64::new(0.0, 0.0), C64::new(0.2, 0.0), C64::new(0.0, 0.0)]
        ];
        let d = array![0.5, -1.0, 3.0];
        let mut full = h.clone();
        for i in 0..3 {
            full[[i, i]] += d[i];
        }
        let exact = expm_hermitian(&full, 1.3).unwrap();
        let mut x = identity(3);
        taylor_step(&d, &Csr::from_dense(&h, 0.0), 1.3, &mut x);
        let err = frobenius(&(&x - &exact));
        assert!(err < 1e-12, "taylor error {err}");
    }

    #[test]
    fn blocked_eigh_recovers_full_spectrum() {
        let h = array![[1.0, 0.0, 0.5], [0.0, 2.0, 0.0], [0.5, 0.0, -1.0]];
        let blocks = BlockStructure { dim: 3, blocks: vec![vec![0, 2], vec![1]] };
        let (vb, _) = eigh_blocked(&h, &blocks).unwrap();
        let (vf, _) = eigh_real(&h).unwrap();
        for (a, b) in vb.iter().zip(vf.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unwrap_removes_jumps() {
        let u = unwrap(&[3.0, -3.0, -2.5]);
        assert!((u[1] - (-3.0 + std::f64::consts::TAU)).abs() < 1e-12);
    }
}
