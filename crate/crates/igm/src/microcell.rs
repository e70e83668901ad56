//! Periodic unit-cell elasticity under a Jacobian warp.
//!
//! Solves the characteristic-field problems on a regular pixel/voxel
//! grid with bilinear quads / trilinear hexes and periodic node
//! identification, then evaluates the effective elasticity tensor. The
//! warp enters only through the strain-displacement matrices (shape
//! gradients composed with `J`), so a single set of per-Gauss element
//! data serves every element of the grid.

use std::sync::Arc;

use faer::sparse::linalg::solvers::SymbolicLlt;

use crate::elasticity::{voigt_dim, BaseMaterial, VoigtMat};
use crate::element::{element_gauss, element_stiffness, local_nodes, GaussData};
use crate::linsolve::{Pattern, PatternBuilder, SpdMatrix, RESIDUAL_TOL};
use crate::mapping::det_n;
use crate::menu::CellMenu;
use crate::{Error, Result};

/// Pixel/voxel discretization of one generating cell.
#[derive(Debug, Clone)]
pub struct CellGrid {
    pub dim: usize,
    pub resolution: usize,
    /// Solid flag per element, x fastest.
    pub solid: Vec<bool>,
    pub material: BaseMaterial,
}

impl CellGrid {
    pub fn n_elements(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    /// Stiffness scale of an element (1 for solid, ersatz for void).
    #[inline]
    pub fn scale(&self, e: usize) -> f64 {
        if self.solid[e] {
            1.0
        } else {
            self.material.ersatz
        }
    }

    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.n_elements() as f64
    }
}

/// Sample the menu at pixel centers: solid iff the indicator is
/// non-negative.
pub fn discretize_cell(
    menu: &CellMenu,
    zeta: f64,
    resolution: usize,
    material: BaseMaterial,
) -> CellGrid {
    let dim = menu.dim;
    let n = resolution;
    let px = 1.0 / n as f64;
    let nelem = n.pow(dim as u32);
    let mut solid = Vec::with_capacity(nelem);
    let layers = if dim == 3 { n } else { 1 };
    for k in 0..layers {
        let yk = -0.5 + (k as f64 + 0.5) * px;
        for j in 0..n {
            let yj = -0.5 + (j as f64 + 0.5) * px;
            for i in 0..n {
                let yi = -0.5 + (i as f64 + 0.5) * px;
                let y = [yi, yj, if dim == 3 { yk } else { 0.0 }];
                solid.push(menu.cell_indicator(&y, zeta) >= 0.0);
            }
        }
    }
    CellGrid { dim, resolution: n, solid, material }
}

/// Shared FE scaffolding for one `(dim, resolution)` cell family:
/// periodic connectivity, reduced dof pattern, symbolic factorization.
pub struct CellContext {
    pub dim: usize,
    pub resolution: usize,
    /// Global node ids per element, local order.
    elem_nodes: Vec<Vec<u32>>,
    pattern: Arc<Pattern>,
    slots: Vec<u32>,
    symbolic: SymbolicLlt<usize>,
}

impl CellContext {
    pub fn new(dim: usize, resolution: usize) -> Result<Self> {
        let n = resolution;
        let nn_side = n; // periodic: node n == node 0
        let node_id = |i: usize, j: usize, k: usize| -> u32 {
            let (i, j, k) = (i % nn_side, j % nn_side, k % nn_side);
            ((k * nn_side + j) * nn_side + i) as u32
        };
        let nodes = local_nodes(dim);
        let layers = if dim == 3 { n } else { 1 };
        let mut elem_nodes = Vec::with_capacity(n * n * layers);
        for k in 0..layers {
            for j in 0..n {
                for i in 0..n {
                    let ids: Vec<u32> = nodes
                        .iter()
                        .map(|d| node_id(i + d[0], j + d[1], if dim == 3 { k + d[2] } else { 0 }))
                        .collect();
                    elem_nodes.push(ids);
                }
            }
        }
        let nnodes = nn_side.pow(dim as u32);
        let nred = dim * (nnodes - 1); // node 0 pinned
        let mut builder = PatternBuilder::new(nred);
        for ids in &elem_nodes {
            for &na in ids {
                for ca in 0..dim {
                    let ra = na as usize * dim + ca;
                    if ra < dim {
                        continue;
                    }
                    for &nb in ids {
                        for cb in 0..dim {
                            let cb_dof = nb as usize * dim + cb;
                            if cb_dof < dim {
                                continue;
                            }
                            builder.add(ra - dim, cb_dof - dim);
                        }
                    }
                }
            }
        }
        let (pattern, slots) = builder.build();
        let symbolic = pattern.analyze()?;
        Ok(Self { dim, resolution, elem_nodes, pattern, slots, symbolic })
    }

    pub fn n_nodes(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }
}

/// Characteristic displacement fields, one per independent load pair.
pub struct CellSolution {
    pub dim: usize,
    pub resolution: usize,
    pub jac: [[f64; 3]; 3],
    /// `fields[K][node*dim + c]`, full periodic numbering, zero mean.
    pub fields: Vec<Vec<f64>>,
    gauss: Vec<GaussData>,
}

/// Solve the periodic cell problems for every unit load pair under the
/// given Jacobian.
pub fn solve_cell_problems(
    ctx: &CellContext,
    grid: &CellGrid,
    jac: &[[f64; 3]; 3],
) -> Result<CellSolution> {
    assert_eq!(grid.dim, ctx.dim);
    assert_eq!(grid.resolution, ctx.resolution);
    let dim = ctx.dim;
    let vdim = voigt_dim(dim);
    let det = det_n(jac, dim);
    if det.abs() < 1e-8 {
        log::warn!("cell problem with nearly singular Jacobian (det J = {det:.3e})");
    }
    let cmat = grid.material.stiffness();
    let len = 1.0 / ctx.resolution as f64;
    let gauss = element_gauss(dim, &[len, len, len], jac);
    let nn = local_nodes(dim).len();
    let ndof_e = nn * dim;

    // element stiffness and load vectors of the solid phase
    let ke = element_stiffness(dim, &gauss, &cmat);
    let mut fe = vec![vec![0.0; ndof_e]; vdim];
    for g in &gauss {
        for p in 0..ndof_e {
            let cbp = cmat.mul_vec(&g.bcols[p]);
            for k in 0..vdim {
                // rhs column: B^T C e_K
                fe[k][p] += cbp[k] * g.weight;
            }
        }
    }

    let nred = ctx.pattern.n;
    let mut mat = SpdMatrix::new(ctx.pattern.clone()).with_symbolic(ctx.symbolic.clone());
    let mut rhs = vec![vec![0.0; nred]; vdim];
    let mut slot_k = 0usize;
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let scale = grid.scale(e);
        for (la, &na) in ids.iter().enumerate() {
            for ca in 0..dim {
                let ra = na as usize * dim + ca;
                if ra < dim {
                    continue;
                }
                for (lb, &nb) in ids.iter().enumerate() {
                    for cb in 0..dim {
                        let cb_dof = nb as usize * dim + cb;
                        if cb_dof < dim {
                            continue;
                        }
                        mat.values[ctx.slots[slot_k] as usize] +=
                            scale * ke[la * dim + ca][lb * dim + cb];
                        slot_k += 1;
                    }
                }
                for k in 0..vdim {
                    rhs[k][ra - dim] += scale * fe[k][la * dim + ca];
                }
            }
        }
    }
    debug_assert_eq!(slot_k, ctx.slots.len());

    let solved = mat.solve_refined(&rhs, RESIDUAL_TOL)?;
    let nnodes = ctx.n_nodes();
    let mut fields = Vec::with_capacity(vdim);
    for sol in solved {
        let mut full = vec![0.0; nnodes * dim];
        full[dim..].copy_from_slice(&sol);
        // zero-mean normalization per component
        for c in 0..dim {
            let mean: f64 =
                (0..nnodes).map(|nd| full[nd * dim + c]).sum::<f64>() / nnodes as f64;
            for nd in 0..nnodes {
                full[nd * dim + c] -= mean;
            }
        }
        fields.push(full);
    }
    Ok(CellSolution { dim, resolution: ctx.resolution, jac: *jac, fields, gauss })
}

impl CellSolution {
    /// Per-field element strains (eng Voigt) at one Gauss point.
    fn strains_at(
        &self,
        ids: &[u32],
        g: &GaussData,
        field: usize,
    ) -> [f64; 6] {
        let dim = self.dim;
        let mut eps = [0.0; 6];
        for (a, &nid) in ids.iter().enumerate() {
            for c in 0..dim {
                let u = self.fields[field][nid as usize * dim + c];
                let b = &g.bcols[a * dim + c];
                for i in 0..voigt_dim(dim) {
                    eps[i] += b[i] * u;
                }
            }
        }
        eps
    }

    /// Raw (unwarped) gradient `d xi_c / d Y_n` of one field at a Gauss
    /// point.
    fn raw_gradient_at(&self, ids: &[u32], g: &GaussData, field: usize) -> [[f64; 3]; 3] {
        let dim = self.dim;
        let mut d = [[0.0; 3]; 3];
        for (a, &nid) in ids.iter().enumerate() {
            for c in 0..dim {
                let u = self.fields[field][nid as usize * dim + c];
                for n in 0..dim {
                    d[c][n] += g.grad[a][n] * u;
                }
            }
        }
        d
    }
}

fn voigt_unit(vdim: usize, k: usize) -> [f64; 6] {
    let mut e = [0.0; 6];
    e[k] = 1.0;
    let _ = vdim;
    e
}

/// Effective elasticity tensor: volume-weighted base stiffness minus the
/// characteristic-strain correction. Checks symmetry and positive
/// semi-definiteness.
pub fn effective_tensor(
    ctx: &CellContext,
    grid: &CellGrid,
    sol: &CellSolution,
) -> Result<VoigtMat> {
    let dim = ctx.dim;
    let vdim = voigt_dim(dim);
    let cmat = grid.material.stiffness();
    let mut ch = VoigtMat::zero(vdim);
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let scale = grid.scale(e);
        for g in &sol.gauss {
            for k in 0..vdim {
                let eps = sol.strains_at(ids, g, k);
                let sig = cmat.mul_vec(&eps);
                for i in 0..vdim {
                    ch.a[i][k] += scale * g.weight * (cmat.a[i][k] - sig[i]);
                }
            }
        }
    }
    let skew = ch.skew_rel();
    if skew > 1e-8 {
        return Err(Error::Numerical(format!(
            "effective tensor asymmetry {skew:.3e} exceeds tolerance"
        )));
    }
    ch.symmetrize();
    let eigs = ch.eigenvalues();
    let trace: f64 = (0..vdim).map(|i| ch.a[i][i]).sum();
    if eigs.iter().any(|&e| e < -1e-8 * trace.abs()) {
        return Err(Error::Numerical(format!(
            "effective tensor not positive semi-definite (eigs {eigs:?})"
        )));
    }
    Ok(ch)
}

/// Energy-form route to the same tensor; agrees with
/// [`effective_tensor`] by Galerkin orthogonality and is used as an
/// independent cross-check.
pub fn effective_tensor_energy_form(
    ctx: &CellContext,
    grid: &CellGrid,
    sol: &CellSolution,
) -> VoigtMat {
    let dim = ctx.dim;
    let vdim = voigt_dim(dim);
    let cmat = grid.material.stiffness();
    let mut ch = VoigtMat::zero(vdim);
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let scale = grid.scale(e);
        for g in &sol.gauss {
            let mut resid = Vec::with_capacity(vdim);
            for k in 0..vdim {
                let eps = sol.strains_at(ids, g, k);
                let mut r = voigt_unit(vdim, k);
                for i in 0..vdim {
                    r[i] -= eps[i];
                }
                resid.push(r);
            }
            for i in 0..vdim {
                let ci = cmat.mul_vec(&resid[i]);
                for k in 0..vdim {
                    let mut acc = 0.0;
                    for m in 0..vdim {
                        acc += ci[m] * resid[k][m];
                    }
                    ch.a[i][k] += scale * g.weight * acc;
                }
            }
        }
    }
    ch
}

/// Derivative of the effective tensor with respect to each Jacobian
/// entry, indexed `n * dim + q`. Uses the stationarity of the cell
/// solution, so only explicit `J`-dependence contributes.
pub fn effective_tensor_jacobian_derivative(
    ctx: &CellContext,
    grid: &CellGrid,
    sol: &CellSolution,
) -> Vec<VoigtMat> {
    let dim = ctx.dim;
    let vdim = voigt_dim(dim);
    let cmat = grid.material.stiffness();
    let pairs = crate::elasticity::voigt_pairs(dim);
    let mut out = vec![VoigtMat::zero(vdim); dim * dim];
    let mut stress_t = vec![[[0.0; 3]; 3]; vdim];
    let mut grads = vec![[[0.0; 3]; 3]; vdim];
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let scale = grid.scale(e);
        for g in &sol.gauss {
            for k in 0..vdim {
                let eps = sol.strains_at(ids, g, k);
                let mut r = voigt_unit(vdim, k);
                for i in 0..vdim {
                    r[i] -= eps[i];
                }
                let sig = cmat.mul_vec(&r);
                // stress as a tensor, scaled by the element phase
                let mut st = [[0.0; 3]; 3];
                for (vi, &(p, q)) in pairs.iter().enumerate() {
                    st[p][q] = scale * sig[vi];
                    st[q][p] = scale * sig[vi];
                }
                stress_t[k] = st;
                grads[k] = sol.raw_gradient_at(ids, g, k);
            }
            for n in 0..dim {
                for q in 0..dim {
                    let m = &mut out[n * dim + q];
                    for i in 0..vdim {
                        for k in 0..vdim {
                            let mut acc = 0.0;
                            for c in 0..dim {
                                acc += grads[i][c][n] * stress_t[k][c][q]
                                    + stress_t[i][c][q] * grads[k][c][n];
                            }
                            m.a[i][k] -= acc * g.weight;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Derivative of the effective tensor against a per-element stiffness
/// density (a scalar multiplying the base stiffness in each element).
pub fn effective_tensor_material_derivative(
    ctx: &CellContext,
    grid: &CellGrid,
    sol: &CellSolution,
    density: &[f64],
) -> VoigtMat {
    assert_eq!(density.len(), grid.n_elements());
    let dim = ctx.dim;
    let vdim = voigt_dim(dim);
    let cmat = grid.material.stiffness();
    let mut out = VoigtMat::zero(vdim);
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let de = density[e];
        if de == 0.0 {
            continue;
        }
        for g in &sol.gauss {
            let mut resid = Vec::with_capacity(vdim);
            for k in 0..vdim {
                let eps = sol.strains_at(ids, g, k);
                let mut r = voigt_unit(vdim, k);
                for i in 0..vdim {
                    r[i] -= eps[i];
                }
                resid.push(r);
            }
            for i in 0..vdim {
                let ci = cmat.mul_vec(&resid[i]);
                for k in 0..vdim {
                    let mut acc = 0.0;
                    for m in 0..vdim {
                        acc += ci[m] * resid[k][m];
                    }
                    out.a[i][k] += de * g.weight * acc;
                }
            }
        }
    }
    out
}

/// Per-element stiffness-density derivative with respect to the level
/// value: a smoothed-Heaviside band around the cell boundary (bandwidth
/// in pixels) times the indicator's zeta-derivative.
pub fn zeta_stiffness_density(
    menu: &CellMenu,
    zeta: f64,
    resolution: usize,
    material: &BaseMaterial,
    bandwidth_px: f64,
) -> Vec<f64> {
    let dim = menu.dim;
    let n = resolution;
    let px = 1.0 / n as f64;
    let layers = if dim == 3 { n } else { 1 };
    let nelem = n * n * layers;
    let mut q = vec![0.0; nelem];
    let mut dqdz = vec![0.0; nelem];
    let idx = |i: usize, j: usize, k: usize| (k * n + j) * n + i;
    for k in 0..layers {
        let yk = -0.5 + (k as f64 + 0.5) * px;
        for j in 0..n {
            let yj = -0.5 + (j as f64 + 0.5) * px;
            for i in 0..n {
                let yi = -0.5 + (i as f64 + 0.5) * px;
                let y = [yi, yj, if dim == 3 { yk } else { 0.0 }];
                q[idx(i, j, k)] = menu.cell_indicator(&y, zeta);
                dqdz[idx(i, j, k)] = menu.indicator_zeta_derivative(&y, zeta);
            }
        }
    }
    let mut density = vec![0.0; nelem];
    let wrap = |v: usize, d: isize| -> usize { ((v as isize + d).rem_euclid(n as isize)) as usize };
    for k in 0..layers {
        for j in 0..n {
            for i in 0..n {
                let e = idx(i, j, k);
                let gx = (q[idx(wrap(i, 1), j, k)] - q[idx(wrap(i, -1), j, k)]) / (2.0 * px);
                let gy = (q[idx(i, wrap(j, 1), k)] - q[idx(i, wrap(j, -1), k)]) / (2.0 * px);
                let gz = if dim == 3 {
                    (q[idx(i, j, wrap(k, 1))] - q[idx(i, j, wrap(k, -1))]) / (2.0 * px)
                } else {
                    0.0
                };
                let gnorm = (gx * gx + gy * gy + gz * gz).sqrt();
                let tau = bandwidth_px * px * gnorm;
                if tau <= f64::MIN_POSITIVE {
                    continue;
                }
                // one-sided band: the interface energy is sampled from
                // the solid phase, where the characteristic fields are
                // bounded (void-side strains concentrate and overcount)
                let qe = q[e];
                if !(0.0..tau).contains(&qe) {
                    continue;
                }
                let delta = (1.0 + (std::f64::consts::PI * qe / tau).cos()) / tau;
                density[e] = delta * dqdz[e] * (1.0 - material.ersatz);
            }
        }
    }
    density
}
