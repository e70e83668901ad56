//! Polynomial mapping function `y(x)`, quadratic level-set indicator
//! `zeta(x)`, their derivatives, and the packing of both into a flat
//! design vector.
//!
//! Coefficients are stored in symmetry-reduced form: `b_ijk = b_ikj` keeps
//! one entry per pair `j <= k`, and `c_ijkl` (fully symmetric in `jkl`)
//! keeps one entry per multiset `j <= k <= l`. The canonical design-vector
//! order is `a` row-major, then `b`, then `c`, then `alpha`, `beta`,
//! upper-triangular `gamma`.

use std::sync::LazyLock;

use crate::{Error, Result};

/// Symmetric index bookkeeping for one dimension count.
#[derive(Debug)]
pub struct SymTables {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
    pub triples: Vec<(usize, usize, usize)>,
    pair_of: [[usize; 3]; 3],
    triple_of: [[[usize; 3]; 3]; 3],
}

impl SymTables {
    fn build(n: usize) -> Self {
        let mut pairs = Vec::new();
        let mut pair_of = [[usize::MAX; 3]; 3];
        for j in 0..n {
            for k in j..n {
                pair_of[j][k] = pairs.len();
                pair_of[k][j] = pairs.len();
                pairs.push((j, k));
            }
        }
        let mut triples = Vec::new();
        let mut triple_of = [[[usize::MAX; 3]; 3]; 3];
        for j in 0..n {
            for k in j..n {
                for l in k..n {
                    let idx = triples.len();
                    triples.push((j, k, l));
                    // all permutations point at the same slot
                    for p in [
                        (j, k, l),
                        (j, l, k),
                        (k, j, l),
                        (k, l, j),
                        (l, j, k),
                        (l, k, j),
                    ] {
                        triple_of[p.0][p.1][p.2] = idx;
                    }
                }
            }
        }
        Self { n, pairs, triples, pair_of, triple_of }
    }

    #[inline]
    pub fn pair(&self, j: usize, k: usize) -> usize {
        self.pair_of[j][k]
    }

    #[inline]
    pub fn triple(&self, j: usize, k: usize, l: usize) -> usize {
        self.triple_of[j][k][l]
    }
}

static TABLES_2D: LazyLock<SymTables> = LazyLock::new(|| SymTables::build(2));
static TABLES_3D: LazyLock<SymTables> = LazyLock::new(|| SymTables::build(3));

pub fn sym_tables(n: usize) -> &'static SymTables {
    match n {
        2 => &TABLES_2D,
        3 => &TABLES_3D,
        _ => panic!("unsupported dimension {n}"),
    }
}

/// Cubic polynomial map `y_i = a_ij x_j + 1/2 b_ijk x_j x_k
/// + 1/3 c_ijkl x_j x_k x_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialMap {
    pub dim: usize,
    /// `n x n`, row-major.
    pub a: Vec<f64>,
    /// `n x npairs`, coefficient index major.
    pub b: Vec<f64>,
    /// `n x ntriples`.
    pub c: Vec<f64>,
}

impl PolynomialMap {
    pub fn zero(dim: usize) -> Self {
        let t = sym_tables(dim);
        Self {
            dim,
            a: vec![0.0; dim * dim],
            b: vec![0.0; dim * t.pairs.len()],
            c: vec![0.0; dim * t.triples.len()],
        }
    }

    /// `y = s * x` (diagonal linear map).
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        let mut m = Self::zero(dim);
        for i in 0..dim {
            m.a[i * dim + i] = s;
        }
        m
    }

    pub fn n_coeffs(dim: usize) -> usize {
        let t = sym_tables(dim);
        dim * dim + dim * t.pairs.len() + dim * t.triples.len()
    }

    #[inline]
    fn b_at(&self, t: &SymTables, i: usize, j: usize, k: usize) -> f64 {
        self.b[i * t.pairs.len() + t.pair(j, k)]
    }

    #[inline]
    fn c_at(&self, t: &SymTables, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.c[i * t.triples.len() + t.triple(j, k, l)]
    }

    /// Evaluate the fictitious point `y(x)`.
    pub fn eval(&self, x: &[f64; 3]) -> [f64; 3] {
        let n = self.dim;
        let t = sym_tables(n);
        let mut y = [0.0; 3];
        for i in 0..n {
            let mut v = 0.0;
            for j in 0..n {
                v += self.a[i * n + j] * x[j];
            }
            let mut q = 0.0;
            for j in 0..n {
                for k in 0..n {
                    q += self.b_at(t, i, j, k) * x[j] * x[k];
                }
            }
            v += 0.5 * q;
            let mut cterm = 0.0;
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        cterm += self.c_at(t, i, j, k, l) * x[j] * x[k] * x[l];
                    }
                }
            }
            v += cterm / 3.0;
            y[i] = v;
        }
        y
    }

    /// Jacobian `J_ij = a_ij + b_ijk x_k + c_ijkl x_k x_l` (row `i`).
    pub fn jacobian(&self, x: &[f64; 3]) -> [[f64; 3]; 3] {
        let n = self.dim;
        let t = sym_tables(n);
        let mut jm = [[0.0; 3]; 3];
        for i in 0..n {
            for j in 0..n {
                let mut v = self.a[i * n + j];
                for k in 0..n {
                    v += self.b_at(t, i, j, k) * x[k];
                }
                for k in 0..n {
                    for l in 0..n {
                        v += self.c_at(t, i, j, k, l) * x[k] * x[l];
                    }
                }
                jm[i][j] = v;
            }
        }
        jm
    }

    /// Derivative of the Jacobian with respect to each map coefficient,
    /// in canonical order (`a` row-major, `b`, `c`).
    pub fn jacobian_design_derivatives(&self, x: &[f64; 3]) -> Vec<[[f64; 3]; 3]> {
        let n = self.dim;
        let t = sym_tables(n);
        let mut out = Vec::with_capacity(Self::n_coeffs(n));
        for i in 0..n {
            for j in 0..n {
                let mut d = [[0.0; 3]; 3];
                d[i][j] = 1.0;
                out.push(d);
            }
        }
        for i in 0..n {
            for p in 0..t.pairs.len() {
                let mut d = [[0.0; 3]; 3];
                for j in 0..n {
                    for k in 0..n {
                        if t.pair(j, k) == p {
                            d[i][j] += x[k];
                        }
                    }
                }
                out.push(d);
            }
        }
        for i in 0..n {
            for tr in 0..t.triples.len() {
                let mut d = [[0.0; 3]; 3];
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            if t.triple(j, k, l) == tr {
                                d[i][j] += x[k] * x[l];
                            }
                        }
                    }
                }
                out.push(d);
            }
        }
        out
    }
}

/// Determinant of the leading `n x n` block.
pub fn det_n(j: &[[f64; 3]; 3], n: usize) -> f64 {
    match n {
        2 => j[0][0] * j[1][1] - j[0][1] * j[1][0],
        3 => {
            j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
        }
        _ => panic!("unsupported dimension {n}"),
    }
}

/// Quadratic level-set indicator `zeta(x) = alpha + beta_k x_k
/// + 1/2 gamma_kl x_k x_l` with symmetric `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelIndicator {
    pub dim: usize,
    pub alpha: f64,
    /// length `n`.
    pub beta: Vec<f64>,
    /// upper-triangular `gamma`, pair order.
    pub gamma: Vec<f64>,
}

impl LevelIndicator {
    pub fn constant(dim: usize, alpha: f64) -> Self {
        let t = sym_tables(dim);
        Self { dim, alpha, beta: vec![0.0; dim], gamma: vec![0.0; t.pairs.len()] }
    }

    pub fn n_coeffs(dim: usize) -> usize {
        1 + dim + sym_tables(dim).pairs.len()
    }

    fn raw(&self, x: &[f64; 3]) -> f64 {
        let n = self.dim;
        let t = sym_tables(n);
        let mut v = self.alpha;
        for k in 0..n {
            v += self.beta[k] * x[k];
        }
        let mut q = 0.0;
        for k in 0..n {
            for l in 0..n {
                q += self.gamma[t.pair(k, l)] * x[k] * x[l];
            }
        }
        v + 0.5 * q
    }

    /// Evaluate and hard-clamp into `range`; the flag reports clamping.
    pub fn eval(&self, x: &[f64; 3], range: (f64, f64)) -> (f64, bool) {
        let v = self.raw(x);
        if v < range.0 {
            (range.0, true)
        } else if v > range.1 {
            (range.1, true)
        } else {
            (v, false)
        }
    }

    /// Per-coefficient derivative of `zeta` at `x`, in canonical order
    /// (`alpha`, `beta`, `gamma`). All zero where the clamp is active
    /// (subgradient convention).
    pub fn gradient(&self, x: &[f64; 3], range: (f64, f64)) -> Vec<f64> {
        let n = self.dim;
        let t = sym_tables(n);
        let m = Self::n_coeffs(n);
        let (_, clamped) = self.eval(x, range);
        if clamped {
            return vec![0.0; m];
        }
        let mut g = Vec::with_capacity(m);
        g.push(1.0);
        for k in 0..n {
            g.push(x[k]);
        }
        for &(k, l) in &t.pairs {
            if k == l {
                g.push(0.5 * x[k] * x[k]);
            } else {
                g.push(x[k] * x[l]);
            }
        }
        g
    }
}

/// Total design-vector length for dimension `n` (24 in 2D, 67 in 3D).
pub fn design_len(dim: usize) -> usize {
    PolynomialMap::n_coeffs(dim) + LevelIndicator::n_coeffs(dim)
}

/// Pack map and indicator coefficients into the canonical flat vector.
pub fn pack(map: &PolynomialMap, ind: &LevelIndicator) -> Vec<f64> {
    assert_eq!(map.dim, ind.dim);
    let mut d = Vec::with_capacity(design_len(map.dim));
    d.extend_from_slice(&map.a);
    d.extend_from_slice(&map.b);
    d.extend_from_slice(&map.c);
    d.push(ind.alpha);
    d.extend_from_slice(&ind.beta);
    d.extend_from_slice(&ind.gamma);
    d
}

/// Unpack a canonical design vector; rejects wrong lengths.
pub fn unpack(dim: usize, d: &[f64]) -> Result<(PolynomialMap, LevelIndicator)> {
    let expect = design_len(dim);
    if d.len() != expect {
        return Err(Error::Design(format!(
            "design vector has {} entries, expected {expect} for dimension {dim}",
            d.len()
        )));
    }
    let t = sym_tables(dim);
    let (na, nb, nc) = (dim * dim, dim * t.pairs.len(), dim * t.triples.len());
    let map = PolynomialMap {
        dim,
        a: d[..na].to_vec(),
        b: d[na..na + nb].to_vec(),
        c: d[na + nb..na + nb + nc].to_vec(),
    };
    let rest = &d[na + nb + nc..];
    let ind = LevelIndicator {
        dim,
        alpha: rest[0],
        beta: rest[1..1 + dim].to_vec(),
        gamma: rest[1 + dim..].to_vec(),
    };
    Ok((map, ind))
}

/// Serialize a design vector to the plain-text restart format: a header
/// with the dimension and count, then one value per line.
pub fn design_to_text(dim: usize, d: &[f64]) -> String {
    let mut s = String::new();
    s.push_str("# igm design vector\n");
    s.push_str(&format!("n {dim}\n"));
    s.push_str(&format!("count {}\n", d.len()));
    for v in d {
        s.push_str(&format!("{v}\n"));
    }
    s
}

/// Parse the plain-text design-vector format.
pub fn design_from_text(text: &str) -> Result<(usize, Vec<f64>)> {
    let mut dim = None;
    let mut count = None;
    let mut vals = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("n ") {
            dim = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Design(format!("bad dimension line `{line}`")))?,
            );
        } else if let Some(rest) = line.strip_prefix("count ") {
            count = Some(
                rest.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Design(format!("bad count line `{line}`")))?,
            );
        } else {
            vals.push(
                line.parse::<f64>()
                    .map_err(|_| Error::Design(format!("bad value line `{line}`")))?,
            );
        }
    }
    let dim = dim.ok_or_else(|| Error::Design("missing `n` header".into()))?;
    let count = count.ok_or_else(|| Error::Design("missing `count` header".into()))?;
    if vals.len() != count {
        return Err(Error::Design(format!(
            "expected {count} values, found {}",
            vals.len()
        )));
    }
    Ok((dim, vals))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coefficient_counts() {
        assert_eq!(PolynomialMap::n_coeffs(2), 18);
        assert_eq!(PolynomialMap::n_coeffs(3), 57);
        assert_eq!(design_len(2), 24);
        assert_eq!(design_len(3), 67);
    }

    #[test]
    fn identity_map() {
        let m = PolynomialMap::scaled_identity(2, 1.0);
        let y = m.eval(&[1.5, -2.0, 0.0]);
        assert_eq!(&y[..2], &[1.5, -2.0]);
        let j = m.jacobian(&[0.7, 0.3, 0.0]);
        assert_eq!(j[0][0], 1.0);
        assert_eq!(j[1][1], 1.0);
        assert_eq!(j[0][1], 0.0);
    }

    #[test]
    fn single_quadratic_term() {
        let t = sym_tables(2);
        let mut m = PolynomialMap::zero(2);
        m.b[0 * t.pairs.len() + t.pair(0, 0)] = 0.2;
        let y = m.eval(&[2.0, 0.0, 0.0]);
        assert!((y[0] - 0.4).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn single_cubic_term() {
        let t = sym_tables(2);
        let mut m = PolynomialMap::zero(2);
        m.c[0 * t.triples.len() + t.triple(0, 0, 0)] = 0.3;
        let y = m.eval(&[1.0, 0.0, 0.0]);
        assert!((y[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn jacobian_single_terms() {
        let t = sym_tables(2);
        let mut m = PolynomialMap::scaled_identity(2, 1.0);
        m.b[0 * t.pairs.len() + t.pair(0, 0)] = 0.1;
        let j = m.jacobian(&[2.0, 0.0, 0.0]);
        assert!((j[0][0] - 1.2).abs() < 1e-15);
    }

    fn pseudo_random_map(dim: usize, seed: u64) -> PolynomialMap {
        // deterministic LCG fill
        let mut state = seed;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let mut m = PolynomialMap::zero(dim);
        for v in m.a.iter_mut().chain(m.b.iter_mut()).chain(m.c.iter_mut()) {
            *v = 0.3 * next();
        }
        m
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for dim in [2usize, 3] {
            let m = pseudo_random_map(dim, 42 + dim as u64);
            let x = [0.37, -0.81, 0.22];
            let j = m.jacobian(&x);
            let h = 1e-5;
            for col in 0..dim {
                let mut xp = x;
                let mut xm = x;
                xp[col] += h;
                xm[col] -= h;
                let (yp, ym) = (m.eval(&xp), m.eval(&xm));
                for row in 0..dim {
                    let fd = (yp[row] - ym[row]) / (2.0 * h);
                    let rel = (j[row][col] - fd).abs() / fd.abs().max(1e-8);
                    assert!(rel < 1e-7, "J[{row}][{col}] {} vs {fd}", j[row][col]);
                }
            }
        }
    }

    #[test]
    fn jacobian_design_derivatives_match_fd() {
        for dim in [2usize, 3] {
            let m = pseudo_random_map(dim, 7);
            let x = [0.9, -0.4, 0.6];
            let derivs = m.jacobian_design_derivatives(&x);
            assert_eq!(derivs.len(), PolynomialMap::n_coeffs(dim));
            let ind = LevelIndicator::constant(dim, 0.0);
            let d0 = pack(&m, &ind);
            let h = 1e-6;
            for vi in 0..derivs.len() {
                let mut dp = d0.clone();
                let mut dm = d0.clone();
                dp[vi] += h;
                dm[vi] -= h;
                let (mp, _) = unpack(dim, &dp).unwrap();
                let (mm, _) = unpack(dim, &dm).unwrap();
                let (jp, jm) = (mp.jacobian(&x), mm.jacobian(&x));
                for r in 0..dim {
                    for c in 0..dim {
                        let fd = (jp[r][c] - jm[r][c]) / (2.0 * h);
                        assert!(
                            (derivs[vi][r][c] - fd).abs() < 1e-7,
                            "var {vi} J[{r}][{c}]: {} vs {fd}",
                            derivs[vi][r][c]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zeta_examples() {
        let range = (0.0, std::f64::consts::SQRT_2 / 4.0);
        let ind = LevelIndicator::constant(2, 0.2);
        let (z, clamped) = ind.eval(&[3.0, -1.0, 0.0], range);
        assert_eq!(z, 0.2);
        assert!(!clamped);

        let ind = LevelIndicator::constant(2, 0.5);
        let (z, clamped) = ind.eval(&[0.0; 3], range);
        assert!((z - range.1).abs() < 1e-15);
        assert!(clamped);

        let mut ind = LevelIndicator::constant(2, 0.0);
        ind.beta[0] = 0.1;
        let (z, _) = ind.eval(&[2.0, 0.0, 0.0], range);
        assert!((z - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zeta_gradient_and_clamp() {
        let range = (0.0, 1.0);
        let mut ind = LevelIndicator::constant(2, 0.3);
        ind.beta = vec![0.05, -0.02];
        ind.gamma = vec![0.01, 0.03, -0.02];
        let x = [2.0, 1.0, 0.0];
        let g = ind.gradient(&x, range);
        assert_eq!(g[0], 1.0); // d/dalpha
        assert_eq!(g[1], 2.0); // d/dbeta_1
        assert_eq!(g[2], 1.0);
        // fd check on unclamped point
        let d0 = pack(&PolynomialMap::zero(2), &ind);
        let h = 1e-6;
        let nmap = PolynomialMap::n_coeffs(2);
        for vi in 0..LevelIndicator::n_coeffs(2) {
            let mut dp = d0.clone();
            let mut dm = d0.clone();
            dp[nmap + vi] += h;
            dm[nmap + vi] -= h;
            let (_, ip) = unpack(2, &dp).unwrap();
            let (_, im) = unpack(2, &dm).unwrap();
            let fd = (ip.eval(&x, range).0 - im.eval(&x, range).0) / (2.0 * h);
            assert!((g[vi] - fd).abs() < 1e-7, "zeta var {vi}: {} vs {fd}", g[vi]);
        }
        // clamped point has an all-zero row
        let mut hot = LevelIndicator::constant(2, 5.0);
        hot.beta = vec![1.0, 1.0];
        let g = hot.gradient(&x, range);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn design_text_roundtrip() {
        let m = pseudo_random_map(2, 3);
        let ind = LevelIndicator {
            dim: 2,
            alpha: 0.123456789,
            beta: vec![1e-17, -2.5],
            gamma: vec![0.0, 3.25, -1.0 / 3.0],
        };
        let d = pack(&m, &ind);
        let text = design_to_text(2, &d);
        let (dim, parsed) = design_from_text(&text).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(parsed, d); // bit-exact via shortest round-trip formatting
    }

    #[test]
    fn unpack_rejects_wrong_length() {
        let err = unpack(2, &[0.0; 23]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("expected 24"), "{msg}");
    }

    proptest::proptest! {
        #[test]
        fn pack_unpack_roundtrip(vals in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let (m, ind) = unpack(2, &vals).unwrap();
            let packed = pack(&m, &ind);
            proptest::prop_assert_eq!(packed, vals);
        }
    }
}
