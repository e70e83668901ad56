//! Isotropic base material, Voigt-matrix algebra, and the tensor
//! transforms shared by the cell and macro solvers.
//!
//! Voigt convention: stress/strain pairs ordered `(11, 22, 12)` in 2D and
//! `(11, 22, 33, 23, 13, 12)` in 3D, with engineering shear strains
//! (`gamma = 2 eps`). Stiffness entries are plain tensor components, so
//! `sigma_I = C_IJ eps_hat_J` holds with no extra factors.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Linear elastic base material with an ersatz factor for void.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseMaterial {
    pub youngs: f64,
    pub poisson: f64,
    pub dim: usize,
    /// Plane stress in 2D (the 3D model ignores this flag).
    pub plane_stress: bool,
    /// Stiffness scale assigned to void pixels.
    pub ersatz: f64,
}

impl BaseMaterial {
    pub fn new(youngs: f64, poisson: f64, dim: usize, ersatz: f64) -> Result<Self> {
        if !(youngs > 0.0) {
            return Err(Error::Config(format!(
                "Young's modulus must be positive, got {youngs}"
            )));
        }
        if !(-1.0 < poisson && poisson < 0.5) {
            return Err(Error::Config(format!(
                "Poisson ratio {poisson} outside (-1, 0.5)"
            )));
        }
        if !(ersatz > 0.0 && ersatz < 1.0) {
            return Err(Error::Config(format!(
                "ersatz factor {ersatz} outside (0, 1)"
            )));
        }
        Ok(Self { youngs, poisson, dim, plane_stress: true, ersatz })
    }

    /// Voigt stiffness of the solid phase.
    pub fn stiffness(&self) -> VoigtMat {
        let e = self.youngs;
        let nu = self.poisson;
        let mut m = VoigtMat::zero(voigt_dim(self.dim));
        match self.dim {
            2 => {
                // plane stress
                let q = e / (1.0 - nu * nu);
                let g = e / (2.0 * (1.0 + nu));
                m.a[0][0] = q;
                m.a[1][1] = q;
                m.a[0][1] = nu * q;
                m.a[1][0] = nu * q;
                m.a[2][2] = g;
            }
            3 => {
                let lame = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
                let mu = e / (2.0 * (1.0 + nu));
                for i in 0..3 {
                    for j in 0..3 {
                        m.a[i][j] = if i == j { lame + 2.0 * mu } else { lame };
                    }
                }
                for i in 3..6 {
                    m.a[i][i] = mu;
                }
            }
            d => panic!("unsupported dimension {d}"),
        }
        m
    }
}

pub fn voigt_dim(dim: usize) -> usize {
    match dim {
        2 => 3,
        3 => 6,
        d => panic!("unsupported dimension {d}"),
    }
}

/// Tensor index pairs backing each Voigt slot.
pub fn voigt_pairs(dim: usize) -> &'static [(usize, usize)] {
    match dim {
        2 => &[(0, 0), (1, 1), (0, 1)],
        3 => &[(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)],
        d => panic!("unsupported dimension {d}"),
    }
}

/// Voigt slot of an (unordered) tensor index pair.
pub fn voigt_index(dim: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i <= j { (i, j) } else { (j, i) };
    voigt_pairs(dim)
        .iter()
        .position(|&(p, q)| (p, q) == (a, b))
        .expect("valid tensor pair")
}

/// Small dense matrix sized for Voigt work (up to 6x6).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoigtMat {
    pub n: usize,
    pub a: [[f64; 6]; 6],
}

impl VoigtMat {
    pub fn zero(n: usize) -> Self {
        Self { n, a: [[0.0; 6]; 6] }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = *self;
        for i in 0..self.n {
            for j in 0..self.n {
                out.a[i][j] *= s;
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &VoigtMat, s: f64) {
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i][j] += s * other.a[i][j];
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                m = m.max(self.a[i][j].abs());
            }
        }
        m
    }

    /// Largest asymmetry relative to the largest entry.
    pub fn skew_rel(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i + 1..self.n {
                worst = worst.max((self.a[i][j] - self.a[j][i]).abs());
            }
        }
        worst / scale
    }

    pub fn symmetrize(&mut self) {
        for i in 0..self.n {
            for j in i + 1..self.n {
                let m = 0.5 * (self.a[i][j] + self.a[j][i]);
                self.a[i][j] = m;
                self.a[j][i] = m;
            }
        }
    }

    /// `A v` for a Voigt-sized vector.
    pub fn mul_vec(&self, v: &[f64; 6]) -> [f64; 6] {
        let mut out = [0.0; 6];
        for i in 0..self.n {
            for j in 0..self.n {
                out[i] += self.a[i][j] * v[j];
            }
        }
        out
    }

    /// Double contraction `sum_ij A_ij B_ij`.
    pub fn ddot(&self, other: &VoigtMat) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self.a[i][j] * other.a[i][j];
            }
        }
        s
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let m = DMatrix::from_fn(self.n, self.n, |i, j| 0.5 * (self.a[i][j] + self.a[j][i]));
        let eig = m.symmetric_eigen();
        eig.eigenvalues.iter().copied().collect()
    }

    /// Relative difference against another matrix.
    pub fn rel_diff(&self, other: &VoigtMat) -> f64 {
        let scale = self.max_abs().max(other.max_abs()).max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                worst = worst.max((self.a[i][j] - other.a[i][j]).abs());
            }
        }
        worst / scale
    }
}

/// Apply the 4th-order rotation transform `C'_ijkl = R_ip R_jq R_ks R_lt
/// C_pqst` to a Voigt stiffness.
pub fn rotate_voigt(c: &VoigtMat, r: &[[f64; 3]; 3], dim: usize) -> VoigtMat {
    let pairs = voigt_pairs(dim);
    let mut out = VoigtMat::zero(c.n);
    for (vi, &(i, j)) in pairs.iter().enumerate() {
        for (vk, &(k, l)) in pairs.iter().enumerate() {
            let mut sum = 0.0;
            for p in 0..dim {
                for q in 0..dim {
                    for s in 0..dim {
                        for t in 0..dim {
                            sum += r[i][p]
                                * r[j][q]
                                * r[k][s]
                                * r[l][t]
                                * c.a[voigt_index(dim, p, q)][voigt_index(dim, s, t)];
                        }
                    }
                }
            }
            out.a[vi][vk] = sum;
        }
    }
    out
}
