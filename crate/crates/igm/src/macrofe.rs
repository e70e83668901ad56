//! Homogenized equilibrium on a structured macro mesh (4-node quads /
//! 8-node hexes), compliance evaluation by both the work and energy
//! routes, and the fine-scale validation solver that meshes a raster
//! pixel-per-element.

use std::sync::Arc;

use faer::sparse::linalg::solvers::SymbolicLlt;

use crate::elasticity::{voigt_dim, BaseMaterial, VoigtMat};
use crate::element::{element_gauss, element_stiffness, local_nodes, GaussData, IDENTITY3};
use crate::linsolve::{Pattern, PatternBuilder, SpdMatrix, RESIDUAL_TOL};
use crate::tdf::{DomainBox, RasterGrid};
use crate::{Error, Result};

/// Axis-aligned boundary faces of the domain box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub fn axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "x_min" => Ok(Face::XMin),
            "x_max" => Ok(Face::XMax),
            "y_min" => Ok(Face::YMin),
            "y_max" => Ok(Face::YMax),
            "z_min" => Ok(Face::ZMin),
            "z_max" => Ok(Face::ZMax),
            _ => Err(Error::Config(format!("unknown face `{s}`"))),
        }
    }
}

/// Uniform traction over a face, acting along one coordinate direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Traction {
    pub face: Face,
    pub direction: usize,
    /// Force per unit boundary measure.
    pub magnitude: f64,
}

/// Structured-mesh macro problem description.
#[derive(Debug, Clone)]
pub struct MacroProblem {
    pub dim: usize,
    pub domain: DomainBox,
    /// Elements per axis (third entry ignored in 2D).
    pub nelem: [usize; 3],
    pub fixed_faces: Vec<Face>,
    pub tractions: Vec<Traction>,
    /// Uniform body force (zero in all the beam studies).
    pub body_force: [f64; 3],
}

impl MacroProblem {
    pub fn n_elements(&self) -> usize {
        let nz = if self.dim == 3 { self.nelem[2] } else { 1 };
        self.nelem[0] * self.nelem[1] * nz
    }

    pub fn nodes_per_axis(&self) -> [usize; 3] {
        [
            self.nelem[0] + 1,
            self.nelem[1] + 1,
            if self.dim == 3 { self.nelem[2] + 1 } else { 1 },
        ]
    }

    pub fn n_nodes(&self) -> usize {
        let n = self.nodes_per_axis();
        n[0] * n[1] * n[2]
    }

    pub fn element_size(&self) -> [f64; 3] {
        let mut s = [1.0; 3];
        for a in 0..self.dim {
            s[a] = self.domain.extents[a] / self.nelem[a] as f64;
        }
        s
    }

    fn node_id(&self, i: usize, j: usize, k: usize) -> usize {
        let n = self.nodes_per_axis();
        (k * n[1] + j) * n[0] + i
    }

    fn validate(&self) -> Result<()> {
        if self.fixed_faces.is_empty() {
            return Err(Error::Config("at least one face must be fixed".into()));
        }
        for t in &self.tractions {
            if !t.magnitude.is_finite() {
                return Err(Error::Config("traction magnitude must be finite".into()));
            }
            if t.direction >= self.dim {
                return Err(Error::Config(format!(
                    "traction direction {} out of range",
                    t.direction
                )));
            }
        }
        Ok(())
    }

    /// True if the node with grid index `(i, j, k)` lies on the face.
    fn on_face(&self, face: Face, idx: [usize; 3]) -> bool {
        let n = self.nodes_per_axis();
        let a = face.axis();
        if face.is_max() {
            idx[a] == n[a] - 1
        } else {
            idx[a] == 0
        }
    }
}

/// FE scaffolding for one macro problem: connectivity, constrained-dof
/// numbering, pattern, symbolic factorization, and the consistent load
/// vector.
pub struct MacroContext {
    pub problem: MacroProblem,
    elem_nodes: Vec<Vec<u32>>,
    /// Reduced dof per full dof, `usize::MAX` when fixed.
    dof_map: Vec<usize>,
    pub n_reduced: usize,
    pattern: Arc<Pattern>,
    slots: Vec<u32>,
    symbolic: SymbolicLlt<usize>,
    gauss: Vec<GaussData>,
    /// Consistent load vector (reduced numbering).
    load: Vec<f64>,
}

impl MacroContext {
    pub fn new(problem: MacroProblem) -> Result<Self> {
        problem.validate()?;
        let dim = problem.dim;
        let npa = problem.nodes_per_axis();
        let layers = if dim == 3 { problem.nelem[2] } else { 1 };

        let locals = local_nodes(dim);
        let mut elem_nodes = Vec::with_capacity(problem.n_elements());
        for k in 0..layers {
            for j in 0..problem.nelem[1] {
                for i in 0..problem.nelem[0] {
                    let ids: Vec<u32> = locals
                        .iter()
                        .map(|d| {
                            problem.node_id(i + d[0], j + d[1], if dim == 3 { k + d[2] } else { 0 })
                                as u32
                        })
                        .collect();
                    elem_nodes.push(ids);
                }
            }
        }

        // constrained dofs: every component on fixed faces
        let n_nodes = problem.n_nodes();
        let mut fixed = vec![false; n_nodes * dim];
        for k in 0..npa[2] {
            for j in 0..npa[1] {
                for i in 0..npa[0] {
                    for face in &problem.fixed_faces {
                        if problem.on_face(*face, [i, j, k]) {
                            let nd = problem.node_id(i, j, k);
                            for c in 0..dim {
                                fixed[nd * dim + c] = true;
                            }
                        }
                    }
                }
            }
        }
        let mut dof_map = vec![usize::MAX; n_nodes * dim];
        let mut n_reduced = 0;
        for (d, m) in dof_map.iter_mut().enumerate() {
            if !fixed[d] {
                *m = n_reduced;
                n_reduced += 1;
            }
        }

        let mut builder = PatternBuilder::new(n_reduced);
        for ids in &elem_nodes {
            for &na in ids {
                for ca in 0..dim {
                    let ra = dof_map[na as usize * dim + ca];
                    if ra == usize::MAX {
                        continue;
                    }
                    for &nb in ids {
                        for cb in 0..dim {
                            let rb = dof_map[nb as usize * dim + cb];
                            if rb == usize::MAX {
                                continue;
                            }
                            builder.add(ra, rb);
                        }
                    }
                }
            }
        }
        let (pattern, slots) = builder.build();
        let symbolic = pattern.analyze()?;
        let gauss = element_gauss(dim, &problem.element_size(), &IDENTITY3);

        // consistent loads: tractions spread over face facets, plus any
        // uniform body force
        let mut load = vec![0.0; n_reduced];
        let es = problem.element_size();
        for t in &problem.tractions {
            let a = t.face.axis();
            let (b, c) = match a {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let facet_measure = if dim == 2 { es[b] } else { es[b] * es[c] };
            let corner_share = facet_measure / (1 << (dim - 1)) as f64;
            let nb = problem.nelem[b];
            let nc = if dim == 3 { problem.nelem[c] } else { 1 };
            let a_idx = if t.face.is_max() { npa[a] - 1 } else { 0 };
            for jc in 0..nc {
                for ib in 0..nb {
                    for (db, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                        if dim == 2 && dc == 1 {
                            continue;
                        }
                        let mut idx = [0usize; 3];
                        idx[a] = a_idx;
                        idx[b] = ib + db;
                        idx[c] = jc + dc;
                        let nd = problem.node_id(idx[0], idx[1], idx[2]);
                        let rd = dof_map[nd * dim + t.direction];
                        if rd != usize::MAX {
                            load[rd] += t.magnitude * corner_share;
                        }
                    }
                }
            }
        }
        if problem.body_force.iter().any(|&f| f != 0.0) {
            let mut vol = 1.0;
            for a in 0..dim {
                vol *= es[a];
            }
            let share = vol / locals.len() as f64;
            for ids in &elem_nodes {
                for &nd in ids {
                    for c in 0..dim {
                        let rd = dof_map[nd as usize * dim + c];
                        if rd != usize::MAX {
                            load[rd] += problem.body_force[c] * share;
                        }
                    }
                }
            }
        }

        Ok(Self {
            problem,
            elem_nodes,
            dof_map,
            n_reduced,
            pattern,
            slots,
            symbolic,
            gauss,
            load,
        })
    }

    pub fn n_gauss(&self) -> usize {
        self.gauss.len()
    }
}

/// Macro solution: full-numbering displacements and the compliance by
/// both routes.
#[derive(Debug, Clone)]
pub struct MacroSolution {
    pub u: Vec<f64>,
    /// External work `f . u`.
    pub compliance: f64,
    /// Strain energy route `u . K u` (agrees with `compliance` to 1e-8).
    pub energy: f64,
}

/// Solve the homogenized equilibrium with one effective tensor per zone.
pub fn solve_macro(
    ctx: &MacroContext,
    zone_of_element: &[usize],
    zone_tensors: &[VoigtMat],
) -> Result<MacroSolution> {
    let dim = ctx.problem.dim;
    assert_eq!(zone_of_element.len(), ctx.elem_nodes.len());
    let kes: Vec<Vec<Vec<f64>>> = zone_tensors
        .iter()
        .map(|c| element_stiffness(dim, &ctx.gauss, c))
        .collect();
    solve_with_element_stiffness(ctx, |e| &kes[zone_of_element[e]], false)
}

/// Shared assembly/solve path: `ke_of(e)` yields the element stiffness.
/// `tolerant` relaxes the residual and work/energy checks for
/// extreme-contrast validation meshes.
fn solve_with_element_stiffness<'a>(
    ctx: &'a MacroContext,
    ke_of: impl Fn(usize) -> &'a Vec<Vec<f64>>,
    tolerant: bool,
) -> Result<MacroSolution> {
    let dim = ctx.problem.dim;
    let mut mat = SpdMatrix::new(ctx.pattern.clone()).with_symbolic(ctx.symbolic.clone());
    let mut slot_k = 0usize;
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let ke = ke_of(e);
        for (la, &na) in ids.iter().enumerate() {
            for ca in 0..dim {
                let ra = ctx.dof_map[na as usize * dim + ca];
                if ra == usize::MAX {
                    continue;
                }
                for (lb, &nb) in ids.iter().enumerate() {
                    for cb in 0..dim {
                        let rb = ctx.dof_map[nb as usize * dim + cb];
                        if rb == usize::MAX {
                            continue;
                        }
                        mat.values[ctx.slots[slot_k] as usize] += ke[la * dim + ca][lb * dim + cb];
                        slot_k += 1;
                    }
                }
            }
        }
    }
    debug_assert_eq!(slot_k, ctx.slots.len());

    let solved = if tolerant {
        mat.solve_refined_accept(&[ctx.load.clone()], RESIDUAL_TOL, 1e-5)?
    } else {
        mat.solve_refined(&[ctx.load.clone()], RESIDUAL_TOL)?
    };
    let ur = &solved[0];
    let compliance: f64 = ur.iter().zip(&ctx.load).map(|(u, f)| u * f).sum();
    let mut ku = vec![0.0; ctx.n_reduced];
    mat.matvec(ur, &mut ku);
    let energy: f64 = ur.iter().zip(&ku).map(|(u, k)| u * k).sum();
    let rel = (compliance - energy).abs() / compliance.abs().max(f64::MIN_POSITIVE);
    let energy_tol = if tolerant { 1e-5 } else { 1e-8 };
    if rel > energy_tol {
        return Err(Error::Numerical(format!(
            "work/energy compliance mismatch: {compliance} vs {energy} (rel {rel:.3e})"
        )));
    }

    let mut u = vec![0.0; ctx.dof_map.len()];
    for (d, &rd) in ctx.dof_map.iter().enumerate() {
        if rd != usize::MAX {
            u[d] = ur[rd];
        }
    }
    Ok(MacroSolution { u, compliance, energy })
}

/// Integral of the eng-Voigt strain outer product over each zone,
/// evaluated from a macro solution. Contracting a zone's integral with
/// its stiffness reproduces the compliance.
pub fn zone_strain_integrals(
    ctx: &MacroContext,
    u: &[f64],
    zone_of_element: &[usize],
    n_zones: usize,
) -> Vec<VoigtMat> {
    let dim = ctx.problem.dim;
    let vdim = voigt_dim(dim);
    let mut out = vec![VoigtMat::zero(vdim); n_zones];
    for (e, ids) in ctx.elem_nodes.iter().enumerate() {
        let z = zone_of_element[e];
        for g in &ctx.gauss {
            let mut eps = [0.0; 6];
            for (a, &nd) in ids.iter().enumerate() {
                for c in 0..dim {
                    let uv = u[nd as usize * dim + c];
                    for i in 0..vdim {
                        eps[i] += g.bcols[a * dim + c][i] * uv;
                    }
                }
            }
            let m = &mut out[z];
            for i in 0..vdim {
                for j in 0..vdim {
                    m.a[i][j] += eps[i] * eps[j] * g.weight;
                }
            }
        }
    }
    out
}

/// Fine-scale validation: one element per raster pixel (solid carries the
/// base material, void the ersatz scale), same boundary conditions.
/// Returns the fine-scale compliance.
pub fn fine_scale_solve(
    raster: &RasterGrid,
    fixed_faces: Vec<Face>,
    tractions: Vec<Traction>,
    material: &BaseMaterial,
    micro_h: f64,
) -> Result<f64> {
    let dim = raster.dim;
    let px = raster.spacing()[0];
    if micro_h / px < 8.0 {
        log::warn!(
            "fine-scale mesh resolves h = {micro_h} with only {:.1} pixels",
            micro_h / px
        );
    }
    let problem = MacroProblem {
        dim,
        domain: raster.domain,
        nelem: raster.resolution,
        fixed_faces,
        tractions,
        body_force: [0.0; 3],
    };
    let ctx = MacroContext::new(problem)?;
    let cmat = material.stiffness();
    let ke_solid = element_stiffness(dim, &ctx.gauss, &cmat);
    let ke_void = element_stiffness(dim, &ctx.gauss, &cmat.scaled(material.ersatz));
    let sol = solve_with_element_stiffness(
        &ctx,
        |e| if raster.solid[e] { &ke_solid } else { &ke_void },
        true,
    )?;
    Ok(sol.compliance)
}
