//! Multifrontal LU for matrices with a (near) symmetric sparsity pattern.
//!
//! The elimination order and supernode partition come from the symmetric
//! analysis of `A + Aᵀ` (approximate minimum degree), which fills far less
//! than a column ordering built for arbitrary row pivoting. Row pivoting is
//! confined to the fully summed block of each front. Unknowns whose diagonal
//! is zero (pressures, multipliers) are ordered after every neighbour with a
//! nonzero diagonal, so their pivot is a Schur complement entry rather than
//! the structural zero.
//!
//! Without pivoting across fronts the factorization can break down or lose
//! accuracy; callers must check the residual and keep a fallback.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::lu::partial_pivoting::factor::{lu_in_place, lu_in_place_scratch};
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_unit_lower_triangular_in_place};
use faer::perm::PermRef;
use faer::sparse::linalg::amd;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, SymbolicCholeskyRaw, SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::SymbolicSparseColMat;
use faer::{Accum, Mat, Par, Side};

use crate::sparse::SparseMatrix;

#[derive(Debug)]
pub(crate) enum FrontalError {
    Analysis(String),
    ZeroPivot { column: usize },
}

impl std::fmt::Display for FrontalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrontalError::Analysis(m) => write!(f, "symbolic analysis failed: {m}"),
            FrontalError::ZeroPivot { column } => write!(f, "zero pivot at eliminated column {column}"),
        }
    }
}

/// Entry of the input matrix routed to a front.
#[derive(Debug, Clone, Copy)]
struct Scatter {
    csr_pos: usize,
    row: usize,
    col: usize,
}

#[derive(Debug)]
struct Supernode {
    begin: usize,
    end: usize,
    /// Permuted indices below the diagonal block, increasing.
    rows: Vec<usize>,
    parent: Option<usize>,
    /// Position of each of `rows` in the parent's front.
    to_parent: Vec<usize>,
    scatter: Vec<Scatter>,
}

/// Ordering and supernodal structure, reusable for any matrix with the
/// same pattern.
#[derive(Debug)]
pub(crate) struct FrontalSymbolic {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// `perm[new] = old`
    perm: Vec<usize>,
    supernodes: Vec<Supernode>,
}

struct FrontFactor {
    /// `L11` (unit, strict lower) and `U11` (upper) of the pivoted block.
    lu11: Mat<f64>,
    l21: Mat<f64>,
    u12: Mat<f64>,
    /// Row `i` of the factored block is row `piv[i]` of the assembled one.
    piv: Vec<usize>,
}

pub(crate) struct FrontalLu {
    symbolic: std::sync::Arc<FrontalSymbolic>,
    fronts: Vec<FrontFactor>,
}

impl FrontalSymbolic {
    pub(crate) fn matches(&self, a: &SparseMatrix) -> bool {
        a.nrows == self.n && a.indptr == self.indptr && a.indices == self.indices
    }

    pub(crate) fn analyze(a: &SparseMatrix) -> Result<Self, FrontalError> {
        let n = a.nrows;
        let sym = symmetrized_pattern(a);
        let csc = SymbolicSparseColMat::new_checked(n, n, sym.0.clone(), None, sym.1.clone());

        let mut fwd = vec![0usize; n];
        let mut inv = vec![0usize; n];
        let nnz = sym.1.len();
        let mut mem = MemBuffer::try_new(amd::order_scratch::<usize>(n, nnz))
            .map_err(|e| FrontalError::Analysis(format!("{e:?}")))?;
        amd::order(&mut fwd, &mut inv, csc.as_ref(), amd::Control::default(), MemStack::new(&mut mem))
            .map_err(|e| FrontalError::Analysis(format!("{e:?}")))?;
        let perm = delay_zero_diagonal(a, &sym, &fwd);
        let mut perm_inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            perm_inv[old] = new;
        }

        let params = CholeskySymbolicParams {
            supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
            ..Default::default()
        };
        let chol = factorize_symbolic_cholesky(
            csc.as_ref(),
            Side::Upper,
            SymmetricOrdering::Custom(PermRef::new_checked(&perm, &perm_inv, n)),
            params,
        )
        .map_err(|e| FrontalError::Analysis(format!("{e:?}")))?;
        let SymbolicCholeskyRaw::Supernodal(sn) = chol.raw() else {
            return Err(FrontalError::Analysis("expected a supernodal structure".into()));
        };

        let ns = sn.n_supernodes();
        let mut owner = vec![0usize; n];
        let mut supernodes = Vec::with_capacity(ns);
        for s in 0..ns {
            let begin = sn.supernode_begin()[s];
            let end = sn.supernode_end()[s];
            owner[begin..end].iter_mut().for_each(|o| *o = s);
            let rows: Vec<usize> = sn.supernode(s).pattern().to_vec();
            supernodes.push(Supernode { begin, end, rows, parent: None, to_parent: Vec::new(), scatter: Vec::new() });
        }
        for s in 0..ns {
            if let Some(&first) = supernodes[s].rows.first() {
                let p = owner[first];
                let (pb, pe) = (supernodes[p].begin, supernodes[p].end);
                let prows = &supernodes[p].rows;
                let local = |g: usize| -> usize {
                    if g < pe {
                        g - pb
                    } else {
                        (pe - pb) + prows.binary_search(&g).expect("child row in parent front")
                    }
                };
                let map: Vec<usize> = supernodes[s].rows.iter().map(|&g| local(g)).collect();
                supernodes[s].parent = Some(p);
                supernodes[s].to_parent = map;
            }
        }

        // route every stored entry of A to the front that owns it
        let t = transpose_with_positions(a);
        for s in 0..ns {
            let (b, e) = (supernodes[s].begin, supernodes[s].end);
            let rows = supernodes[s].rows.clone();
            let local = |g: usize| -> Option<usize> {
                if g >= b && g < e {
                    Some(g - b)
                } else {
                    rows.binary_search(&g).ok().map(|k| (e - b) + k)
                }
            };
            let mut scatter = Vec::new();
            for j in b..e {
                let old = perm[j];
                for k in a.indptr[old]..a.indptr[old + 1] {
                    let c = perm_inv[a.indices[k]];
                    if c >= b {
                        let col = local(c).ok_or_else(|| FrontalError::Analysis("entry outside front".into()))?;
                        scatter.push(Scatter { csr_pos: k, row: j - b, col });
                    }
                }
                for k in t.indptr[old]..t.indptr[old + 1] {
                    let r = perm_inv[t.indices[k]];
                    if r >= e {
                        let row = local(r).ok_or_else(|| FrontalError::Analysis("entry outside front".into()))?;
                        scatter.push(Scatter { csr_pos: t.positions[k], row, col: j - b });
                    }
                }
            }
            supernodes[s].scatter = scatter;
        }

        Ok(FrontalSymbolic { n, indptr: a.indptr.clone(), indices: a.indices.clone(), perm, supernodes })
    }
}

impl FrontalLu {
    pub(crate) fn factorize(
        symbolic: std::sync::Arc<FrontalSymbolic>,
        values: &[f64],
    ) -> Result<Self, FrontalError> {
        let sym = &*symbolic;
        let mut updates: Vec<Option<Mat<f64>>> = (0..sym.supernodes.len()).map(|_| None).collect();
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); sym.supernodes.len()];
        for (s, sn) in sym.supernodes.iter().enumerate() {
            if let Some(p) = sn.parent {
                children[p].push(s);
            }
        }
        let mut fronts = Vec::with_capacity(sym.supernodes.len());
        for (s, sn) in sym.supernodes.iter().enumerate() {
            let nc = sn.end - sn.begin;
            let m = nc + sn.rows.len();
            let mut f = Mat::<f64>::zeros(m, m);
            for sc in &sn.scatter {
                f[(sc.row, sc.col)] += values[sc.csr_pos];
            }
            for &c in &children[s] {
                let upd = updates[c].take().expect("child processed before parent");
                let map = &sym.supernodes[c].to_parent;
                for (jl, &jp) in map.iter().enumerate() {
                    for (il, &ip) in map.iter().enumerate() {
                        f[(ip, jp)] += upd[(il, jl)];
                    }
                }
            }

            let (top, bottom) = f.as_mut().split_at_row_mut(nc);
            let (mut f11, mut f12) = top.split_at_col_mut(nc);
            let (mut f21, mut f22) = bottom.split_at_col_mut(nc);

            let mut perm = vec![0usize; nc];
            let mut perm_inv = vec![0usize; nc];
            let mut mem = MemBuffer::new(lu_in_place_scratch::<usize, f64>(nc, nc, Par::Seq, Default::default()));
            lu_in_place(f11.as_mut(), &mut perm, &mut perm_inv, Par::Seq, MemStack::new(&mut mem), Default::default());
            for i in 0..nc {
                let d = f11[(i, i)];
                if d == 0.0 || !d.is_finite() {
                    return Err(FrontalError::ZeroPivot { column: sn.begin + i });
                }
            }
            if !sn.rows.is_empty() {
                // rows of F12 follow the pivoting of F11
                let orig = f12.to_owned();
                for i in 0..nc {
                    for j in 0..f12.ncols() {
                        f12[(i, j)] = orig[(perm[i], j)];
                    }
                }
                solve_unit_lower_triangular_in_place(f11.as_ref(), f12.as_mut(), Par::Seq);
                solve_lower_triangular_in_place(f11.as_ref().transpose(), f21.as_mut().transpose_mut(), Par::Seq);
                matmul(f22.as_mut(), Accum::Add, f21.as_ref(), f12.as_ref(), -1.0, Par::Seq);
                updates[s] = Some(f22.to_owned());
            }
            fronts.push(FrontFactor { lu11: f11.to_owned(), l21: f21.to_owned(), u12: f12.to_owned(), piv: perm });
        }
        Ok(FrontalLu { symbolic, fronts })
    }

    pub(crate) fn solve(&self, b: &[f64]) -> Vec<f64> {
        let sym = &*self.symbolic;
        let mut x: Vec<f64> = sym.perm.iter().map(|&old| b[old]).collect();
        let mut buf = Vec::new();
        for (sn, fr) in sym.supernodes.iter().zip(&self.fronts) {
            let nc = sn.end - sn.begin;
            buf.clear();
            buf.extend(fr.piv.iter().map(|&p| x[sn.begin + p]));
            for i in 0..nc {
                let mut v = buf[i];
                for j in 0..i {
                    v -= fr.lu11[(i, j)] * buf[j];
                }
                buf[i] = v;
            }
            x[sn.begin..sn.end].copy_from_slice(&buf);
            for j in 0..nc {
                let yj = buf[j];
                if yj != 0.0 {
                    let col = fr.l21.col(j);
                    for (k, &r) in sn.rows.iter().enumerate() {
                        x[r] -= col[k] * yj;
                    }
                }
            }
        }
        for (sn, fr) in sym.supernodes.iter().zip(&self.fronts).rev() {
            let nc = sn.end - sn.begin;
            for i in (0..nc).rev() {
                let mut v = x[sn.begin + i];
                for (k, &r) in sn.rows.iter().enumerate() {
                    v -= fr.u12[(i, k)] * x[r];
                }
                for j in i + 1..nc {
                    v -= fr.lu11[(i, j)] * x[sn.begin + j];
                }
                x[sn.begin + i] = v / fr.lu11[(i, i)];
            }
        }
        let mut out = vec![0.0; sym.n];
        for (new, &old) in sym.perm.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

/// CSC arrays of the pattern of `A + Aᵀ`, diagonal included.
fn symmetrized_pattern(a: &SparseMatrix) -> (Vec<usize>, Vec<usize>) {
    let n = a.nrows;
    let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
    for r in 0..n {
        cols[r].push(r);
        for &c in &a.indices[a.indptr[r]..a.indptr[r + 1]] {
            cols[c].push(r);
            cols[r].push(c);
        }
    }
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::new();
    indptr.push(0);
    for mut c in cols {
        c.sort_unstable();
        c.dedup();
        indices.extend(c);
        indptr.push(indices.len());
    }
    (indptr, indices)
}

struct PositionedTranspose {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// CSR position in `A` of each transposed entry.
    positions: Vec<usize>,
}

fn transpose_with_positions(a: &SparseMatrix) -> PositionedTranspose {
    let mut counts = vec![0usize; a.ncols + 1];
    for &c in &a.indices {
        counts[c + 1] += 1;
    }
    for i in 0..a.ncols {
        counts[i + 1] += counts[i];
    }
    let mut next = counts.clone();
    let mut indices = vec![0usize; a.nnz()];
    let mut positions = vec![0usize; a.nnz()];
    for r in 0..a.nrows {
        for k in a.indptr[r]..a.indptr[r + 1] {
            let c = a.indices[k];
            indices[next[c]] = r;
            positions[next[c]] = k;
            next[c] += 1;
        }
    }
    PositionedTranspose { indptr: counts, indices, positions }
}

/// Moves every unknown with a zero diagonal after all of its neighbours that
/// have a nonzero one; zero-diagonal unknowns without such neighbours go last.
fn delay_zero_diagonal(a: &SparseMatrix, sym: &(Vec<usize>, Vec<usize>), order: &[usize]) -> Vec<usize> {
    let n = a.nrows;
    let zero_diag: Vec<bool> = (0..n).map(|r| a.get(r, r) == 0.0).collect();
    if !zero_diag.iter().any(|&z| z) {
        return order.to_vec();
    }
    let mut pos = vec![0usize; n];
    for (k, &v) in order.iter().enumerate() {
        pos[v] = k;
    }
    let mut keys: Vec<(usize, u8, usize, usize)> = Vec::with_capacity(n);
    for v in 0..n {
        if !zero_diag[v] {
            keys.push((pos[v], 0, 0, v));
            continue;
        }
        let mut last: Option<usize> = None;
        for &u in &sym.1[sym.0[v]..sym.0[v + 1]] {
            if u != v && !zero_diag[u] {
                last = Some(last.map_or(pos[u], |l| l.max(pos[u])));
            }
        }
        match last {
            Some(l) => keys.push((l, 1, pos[v], v)),
            None => keys.push((usize::MAX, 2, pos[v], v)),
        }
    }
    keys.sort_unstable();
    keys.into_iter().map(|k| k.3).collect()
}
