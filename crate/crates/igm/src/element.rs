//! Shared bilinear-quad / trilinear-hex element machinery: Gauss rules,
//! shape gradients, and strain-displacement columns. Both the cell and
//! macro solvers work on grids of congruent axis-aligned elements, so one
//! set of per-Gauss data serves every element.

use crate::elasticity::{voigt_dim, voigt_index};

/// Per-Gauss-point element data.
pub struct GaussData {
    /// Physical quadrature weight.
    pub weight: f64,
    /// Plain shape gradients `dN_a/dx` per local node.
    pub grad: Vec<[f64; 3]>,
    /// Strain-displacement columns per local dof (eng-Voigt rows), built
    /// from the (optionally warped) shape gradients.
    pub bcols: Vec<[f64; 6]>,
}

pub fn local_nodes(dim: usize) -> &'static [[usize; 3]] {
    match dim {
        2 => &[[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]],
        3 => &[
            [0, 0, 0],
            [1, 0, 0],
            [1, 1, 0],
            [0, 1, 0],
            [0, 0, 1],
            [1, 0, 1],
            [1, 1, 1],
            [0, 1, 1],
        ],
        d => panic!("unsupported dimension {d}"),
    }
}

/// Gauss data for the canonical element with side lengths `len` warped by
/// `jac` (pass the identity for plain physical gradients). 2x2(x2)
/// quadrature.
pub fn element_gauss(dim: usize, len: &[f64; 3], jac: &[[f64; 3]; 3]) -> Vec<GaussData> {
    let nodes = local_nodes(dim);
    let nn = nodes.len();
    let g1 = 1.0 / 3.0_f64.sqrt();
    let pts_1d = [-g1, g1];
    let ngauss = 1 << dim;
    let mut out = Vec::with_capacity(ngauss);
    let mut weight = 1.0;
    for a in 0..dim {
        weight *= 0.5 * len[a];
    }
    for gp in 0..ngauss {
        let mut s = [0.0; 3];
        for a in 0..dim {
            s[a] = pts_1d[(gp >> a) & 1];
        }
        let mut grad = Vec::with_capacity(nn);
        for node in nodes {
            let mut g = [0.0; 3];
            for a in 0..dim {
                let mut v = if node[a] == 1 { 1.0 } else { -1.0 } / len[a];
                for b in 0..dim {
                    if b != a {
                        v *= if node[b] == 1 {
                            0.5 * (1.0 + s[b])
                        } else {
                            0.5 * (1.0 - s[b])
                        };
                    }
                }
                g[a] = v;
            }
            grad.push(g);
        }
        let mut bcols = vec![[0.0; 6]; nn * dim];
        for (a, g) in grad.iter().enumerate() {
            // warped gradient: (J^T dN_a)_j
            let mut gw = [0.0; 3];
            for j in 0..dim {
                for m in 0..dim {
                    gw[j] += jac[m][j] * g[m];
                }
            }
            for c in 0..dim {
                let col = &mut bcols[a * dim + c];
                col[voigt_index(dim, c, c)] += gw[c];
                for d in 0..dim {
                    if d != c {
                        col[voigt_index(dim, c, d)] += gw[d];
                    }
                }
            }
        }
        out.push(GaussData { weight, grad, bcols });
    }
    out
}

/// Element stiffness `sum_g B^T C B w` for the solid constitutive matrix.
pub fn element_stiffness(
    dim: usize,
    gauss: &[GaussData],
    cmat: &crate::elasticity::VoigtMat,
) -> Vec<Vec<f64>> {
    let nn = local_nodes(dim).len();
    let ndof = nn * dim;
    let vdim = voigt_dim(dim);
    let mut ke = vec![vec![0.0; ndof]; ndof];
    for g in gauss {
        for p in 0..ndof {
            let cbp = cmat.mul_vec(&g.bcols[p]);
            for q in 0..ndof {
                let mut acc = 0.0;
                for i in 0..vdim {
                    acc += cbp[i] * g.bcols[q][i];
                }
                ke[p][q] += acc * g.weight;
            }
        }
    }
    ke
}

pub const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
