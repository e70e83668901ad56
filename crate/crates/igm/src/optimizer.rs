//! The outer compliance-minimization loop: zoning, per-zone warped cell
//! solves feeding effective tensors, the homogenized macro solve,
//! analytic gradients, and MMA updates with a delayed level-indicator
//! schedule and a Jacobian-degeneracy guard.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::elasticity::{BaseMaterial, VoigtMat};
use crate::macrofe::{solve_macro, zone_strain_integrals, MacroContext, MacroProblem, MacroSolution};
use crate::mapping::{
    det_n, pack, unpack, LevelIndicator, PolynomialMap,
};
use crate::menu::CellMenu;
use crate::microcell::{
    discretize_cell, effective_tensor, effective_tensor_jacobian_derivative,
    effective_tensor_material_derivative, solve_cell_problems, zeta_stiffness_density,
    CellContext, CellGrid, CellSolution,
};
use crate::mma::{MmaOptions, MmaState};
use crate::sensitivity::{compliance_gradient, volume_gradient, ZoneSensitivity};
use crate::{Error, Result};

/// Uniform rectangular zoning of the macro mesh.
#[derive(Debug, Clone)]
pub struct Zoning {
    pub counts: [usize; 3],
    pub n_zones: usize,
    pub zone_of_element: Vec<usize>,
    /// Representative point of each zone (the zone center).
    pub reps: Vec<[f64; 3]>,
}

/// Partition the macro mesh into uniform zones; the zone counts must
/// divide the mesh resolution.
pub fn partition_zones(problem: &MacroProblem, counts: [usize; 3]) -> Result<Zoning> {
    let dim = problem.dim;
    let counts = [counts[0], counts[1], if dim == 3 { counts[2] } else { 1 }];
    for a in 0..dim {
        if counts[a] == 0 || problem.nelem[a] % counts[a] != 0 {
            return Err(Error::Config(format!(
                "zone count {} does not divide mesh resolution {} on axis {a}",
                counts[a], problem.nelem[a]
            )));
        }
    }
    let per = [
        problem.nelem[0] / counts[0],
        problem.nelem[1] / counts[1],
        if dim == 3 { problem.nelem[2] / counts[2] } else { 1 },
    ];
    let n_zones = counts[0] * counts[1] * counts[2];
    let layers = if dim == 3 { problem.nelem[2] } else { 1 };
    let mut zone_of_element = Vec::with_capacity(problem.n_elements());
    for k in 0..layers {
        for j in 0..problem.nelem[1] {
            for i in 0..problem.nelem[0] {
                let z = ((k / per[2]) * counts[1] + j / per[1]) * counts[0] + i / per[0];
                zone_of_element.push(z);
            }
        }
    }
    let mut reps = Vec::with_capacity(n_zones);
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                let mut rep = [0.0; 3];
                let idx = [i, j, k];
                for a in 0..dim {
                    rep[a] = problem.domain.origin[a]
                        + (idx[a] as f64 + 0.5) * problem.domain.extents[a] / counts[a] as f64;
                }
                reps.push(rep);
            }
        }
    }
    Ok(Zoning { counts, n_zones, zone_of_element, reps })
}

/// Optimization settings (defaults follow the short-beam studies).
#[derive(Debug, Clone)]
pub struct OptimizationConfig {
    pub max_iters: usize,
    pub volume_budget: f64,
    /// Iteration from which the level-indicator variables may move.
    pub zeta_activation_iter: usize,
    /// Relative compliance change below which an iteration counts as
    /// stalled; five consecutive stalled iterations terminate the run.
    pub conv_tol: f64,
    pub cell_resolution: usize,
    pub enable_map: bool,
    pub enable_zeta: bool,
    /// Freeze the map coefficients that rotate cells out of the 1-2
    /// plane (3D visualization constraint).
    pub freeze_out_of_plane: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Step rejection threshold: min det J over zones must stay above
    /// `detj_floor * h^dim`.
    pub detj_floor: f64,
    pub move_frac: f64,
}

impl OptimizationConfig {
    pub fn default_2d() -> Self {
        Self {
            max_iters: 200,
            volume_budget: 0.3,
            zeta_activation_iter: 30,
            conv_tol: 1e-5,
            cell_resolution: 64,
            enable_map: true,
            enable_zeta: true,
            freeze_out_of_plane: false,
            checkpoint_every: 0,
            seed: 0,
            detj_floor: 0.05,
            move_frac: 0.5,
        }
    }

    pub fn default_3d() -> Self {
        Self { cell_resolution: 24, freeze_out_of_plane: true, ..Self::default_2d() }
    }
}

/// Shared solver scaffolding for one optimization problem.
pub struct Pipeline {
    pub menu: Arc<CellMenu>,
    pub material: BaseMaterial,
    pub h: f64,
    pub macro_ctx: MacroContext,
    pub zoning: Zoning,
    pub cell_ctx: CellContext,
    pub cell_resolution: usize,
}

/// Everything produced by one design evaluation.
pub struct Evaluation {
    pub compliance: f64,
    pub volume: f64,
    pub clamp_fraction: f64,
    pub min_det_j: f64,
    pub zone_tensors: Vec<VoigtMat>,
    pub zone_grids: Vec<CellGrid>,
    pub zone_solutions: Vec<Arc<CellSolution>>,
    pub zone_zetas: Vec<f64>,
    pub macro_solution: MacroSolution,
}

impl Pipeline {
    pub fn new(
        menu: Arc<CellMenu>,
        material: BaseMaterial,
        h: f64,
        problem: MacroProblem,
        zone_counts: [usize; 3],
        cell_resolution: usize,
    ) -> Result<Self> {
        if menu.dim != problem.dim {
            return Err(Error::Config(format!(
                "menu dimension {} does not match problem dimension {}",
                menu.dim, problem.dim
            )));
        }
        let zoning = partition_zones(&problem, zone_counts)?;
        let macro_ctx = MacroContext::new(problem)?;
        let cell_ctx = CellContext::new(menu.dim, cell_resolution)?;
        Ok(Self { menu, material, h, macro_ctx, zoning, cell_ctx, cell_resolution })
    }

    pub fn dim(&self) -> usize {
        self.menu.dim
    }

    /// Volume fraction by the macro midpoint quadrature (one point per
    /// element), which depends only on the level indicator.
    pub fn volume_fraction(&self, indicator: &LevelIndicator) -> (f64, f64) {
        let p = &self.macro_ctx.problem;
        let dim = p.dim;
        let nz = if dim == 3 { p.nelem[2] } else { 1 };
        let total = (p.nelem[0] * p.nelem[1] * nz) as f64;
        let mut vol = 0.0;
        let mut clamped_count = 0usize;
        for k in 0..nz {
            for j in 0..p.nelem[1] {
                for i in 0..p.nelem[0] {
                    let mut x = [0.0; 3];
                    let idx = [i, j, k];
                    for a in 0..dim {
                        x[a] = p.domain.origin[a]
                            + (idx[a] as f64 + 0.5) * p.domain.extents[a] / p.nelem[a] as f64;
                    }
                    let (z, clamped) = indicator.eval(&x, self.menu.zeta_range);
                    vol += self.menu.volume_law.fraction(z);
                    clamped_count += clamped as usize;
                }
            }
        }
        (vol / total, clamped_count as f64 / total)
    }

    /// Evaluate a design: per-zone warped cell problems (solved in
    /// parallel, identical zones deduplicated), effective tensors, the
    /// homogenized macro solve, and the volume quadrature.
    pub fn evaluate(&self, design: &[f64]) -> Result<Evaluation> {
        let dim = self.dim();
        let (map, indicator) = unpack(dim, design)?;
        let zr = self.menu.zeta_range;

        // zone keys: quantized (zeta, J) so identical zones share a solve
        let mut zone_zetas = Vec::with_capacity(self.zoning.n_zones);
        let mut zone_jacs = Vec::with_capacity(self.zoning.n_zones);
        let mut min_det_j = f64::INFINITY;
        for rep in &self.zoning.reps {
            let (z, _) = indicator.eval(rep, zr);
            let jac = map.jacobian(rep);
            min_det_j = min_det_j.min(det_n(&jac, dim));
            zone_zetas.push(z);
            zone_jacs.push(jac);
        }
        let mut unique: Vec<usize> = Vec::new();
        let mut key_of: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut share: Vec<usize> = Vec::with_capacity(self.zoning.n_zones);
        for z in 0..self.zoning.n_zones {
            let mut key = Vec::with_capacity(1 + dim * dim);
            key.push(zone_zetas[z].to_bits());
            for r in 0..dim {
                for c in 0..dim {
                    key.push(zone_jacs[z][r][c].to_bits());
                }
            }
            let idx = *key_of.entry(key).or_insert_with(|| {
                unique.push(z);
                unique.len() - 1
            });
            share.push(idx);
        }

        let solved: Vec<Result<(CellGrid, Arc<CellSolution>, VoigtMat)>> = unique
            .par_iter()
            .map(|&z| {
                let grid = discretize_cell(
                    &self.menu,
                    zone_zetas[z],
                    self.cell_resolution,
                    self.material,
                );
                let sol = solve_cell_problems(&self.cell_ctx, &grid, &zone_jacs[z])?;
                let ch = effective_tensor(&self.cell_ctx, &grid, &sol)?;
                Ok((grid, Arc::new(sol), ch))
            })
            .collect();
        let mut solved_ok = Vec::with_capacity(solved.len());
        for s in solved {
            solved_ok.push(s?);
        }

        let mut zone_tensors = Vec::with_capacity(self.zoning.n_zones);
        let mut zone_grids = Vec::with_capacity(self.zoning.n_zones);
        let mut zone_solutions = Vec::with_capacity(self.zoning.n_zones);
        for z in 0..self.zoning.n_zones {
            let (grid, sol, ch) = &solved_ok[share[z]];
            zone_tensors.push(*ch);
            zone_grids.push(grid.clone());
            zone_solutions.push(sol.clone());
        }

        let macro_solution = solve_macro(&self.macro_ctx, &self.zoning.zone_of_element, &zone_tensors)?;
        let (volume, clamp_fraction) = self.volume_fraction(&indicator);
        Ok(Evaluation {
            compliance: macro_solution.compliance,
            volume,
            clamp_fraction,
            min_det_j,
            zone_tensors,
            zone_grids,
            zone_solutions,
            zone_zetas,
            macro_solution,
        })
    }

    /// Analytic compliance and volume gradients at an evaluated design.
    pub fn gradients(&self, design: &[f64], ev: &Evaluation) -> Result<(Vec<f64>, Vec<f64>)> {
        let dim = self.dim();
        let (map, indicator) = unpack(dim, design)?;
        let strain = zone_strain_integrals(
            &self.macro_ctx,
            &ev.macro_solution.u,
            &self.zoning.zone_of_element,
            self.zoning.n_zones,
        );
        let zones: Vec<ZoneSensitivity> = (0..self.zoning.n_zones)
            .into_par_iter()
            .map(|z| {
                let grid = &ev.zone_grids[z];
                let sol = &ev.zone_solutions[z];
                let dch_djac = effective_tensor_jacobian_derivative(&self.cell_ctx, grid, sol);
                let density = zeta_stiffness_density(
                    &self.menu,
                    ev.zone_zetas[z],
                    self.cell_resolution,
                    &self.material,
                    2.0,
                );
                let dch_dzeta =
                    effective_tensor_material_derivative(&self.cell_ctx, grid, sol, &density);
                ZoneSensitivity { rep: self.zoning.reps[z], dch_djac, dch_dzeta, strain: strain[z] }
            })
            .collect();
        let dc = compliance_gradient(&map, &indicator, self.menu.zeta_range, &zones);
        let dv = volume_gradient(
            &map,
            &indicator,
            self.menu.zeta_range,
            &self.menu.volume_law,
            self.macro_ctx.problem.domain,
            self.macro_ctx.problem.nelem,
        );
        Ok((dc, dv))
    }

    /// Initial design: `a = h I`, `b = c = beta = gamma = 0`, `alpha`
    /// chosen by bisection on the volume law to meet the budget. The map
    /// block receives a tiny deterministic perturbation: the exactly
    /// symmetric periodic start is a stationary saddle of the compliance
    /// in the map variables (every cell-symmetry direction is extremal
    /// there), which would leave a gradient-based update with nothing to
    /// follow.
    pub fn initial_design(&self, budget: f64) -> Vec<f64> {
        let dim = self.dim();
        let map = PolynomialMap::scaled_identity(dim, self.h);
        let (lo, hi) = self.menu.zeta_range;
        let law = &self.menu.volume_law;
        let alpha = if law.fraction(lo) <= budget {
            log::warn!("menu cannot reach the volume budget; starting at the densest cell");
            lo
        } else if law.fraction(hi) >= budget {
            hi
        } else {
            let (mut a, mut b) = (lo, hi);
            for _ in 0..200 {
                let mid = 0.5 * (a + b);
                if law.fraction(mid) > budget {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            0.5 * (a + b)
        };
        let indicator = LevelIndicator::constant(dim, alpha);
        let mut d = pack(&map, &indicator);
        let (blo, bhi) = self.design_bounds();
        let n_map = PolynomialMap::n_coeffs(dim);
        for j in 0..n_map {
            // fixed pseudo-pattern in (-0.5, 0.5)
            let s = ((j as u64).wrapping_mul(2654435761).wrapping_add(12345) % 1000) as f64
                / 1000.0
                - 0.5;
            d[j] = (d[j] + 1e-3 * s * (bhi[j] - blo[j])).clamp(blo[j], bhi[j]);
        }
        d
    }

    /// Per-variable bounds: the linear block stays near the `h` scale,
    /// the quadratic/cubic blocks are budgeted so their Jacobian
    /// contribution cannot swamp the linear part over the domain, and
    /// the indicator coefficients can sweep (and saturate) the zeta
    /// range.
    pub fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.dim();
        let h = self.h;
        let p = &self.macro_ctx.problem;
        // largest coordinate magnitudes over the domain box
        let mut span = 0.0;
        let mut lmax: f64 = 0.0;
        for a in 0..dim {
            let m = p.domain.origin[a].abs().max((p.domain.origin[a] + p.domain.extents[a]).abs());
            span += m;
            lmax = lmax.max(m);
        }
        let t = crate::mapping::sym_tables(dim);
        let bmax = 0.4 * h / span;
        let cmax = 0.4 * h / (span * span);
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for i in 0..dim {
            for j in 0..dim {
                if i == j {
                    lo.push(0.2 * h);
                    hi.push(5.0 * h);
                } else {
                    lo.push(-2.0 * h);
                    hi.push(2.0 * h);
                }
            }
        }
        for _ in 0..dim * t.pairs.len() {
            lo.push(-bmax);
            hi.push(bmax);
        }
        for _ in 0..dim * t.triples.len() {
            lo.push(-cmax);
            hi.push(cmax);
        }
        let (zlo, zhi) = self.menu.zeta_range;
        let w = zhi - zlo;
        lo.push(zlo - 0.5 * w);
        hi.push(zhi + 0.5 * w);
        for _ in 0..dim {
            lo.push(-2.0 * w / lmax);
            hi.push(2.0 * w / lmax);
        }
        for _ in 0..t.pairs.len() {
            lo.push(-4.0 * w / (lmax * lmax));
            hi.push(4.0 * w / (lmax * lmax));
        }
        (lo, hi)
    }

    /// Frozen-variable mask for the current iteration.
    pub fn frozen_mask(&self, config: &OptimizationConfig, iter: usize) -> Vec<bool> {
        let dim = self.dim();
        let n_map = PolynomialMap::n_coeffs(dim);
        let n_ind = LevelIndicator::n_coeffs(dim);
        let t = crate::mapping::sym_tables(dim);
        let mut frozen = vec![false; n_map + n_ind];
        if !config.enable_map {
            for f in frozen.iter_mut().take(n_map) {
                *f = true;
            }
        } else if config.freeze_out_of_plane && dim == 3 {
            let mut idx = 0;
            for i in 0..dim {
                for j in 0..dim {
                    let in_plane = (i < 2 && j < 2) || (i == 2 && j == 2);
                    if !in_plane {
                        frozen[idx] = true;
                    }
                    idx += 1;
                }
            }
            for i in 0..dim {
                for (pi, &(j, k)) in t.pairs.iter().enumerate() {
                    if i == 2 || j == 2 || k == 2 {
                        frozen[dim * dim + i * t.pairs.len() + pi] = true;
                    }
                }
            }
            let c0 = dim * dim + dim * t.pairs.len();
            for i in 0..dim {
                for (ti, &(j, k, l)) in t.triples.iter().enumerate() {
                    if i == 2 || j == 2 || k == 2 || l == 2 {
                        frozen[c0 + i * t.triples.len() + ti] = true;
                    }
                }
            }
        }
        let zeta_live = config.enable_zeta && iter > config.zeta_activation_iter;
        if !zeta_live {
            for f in frozen.iter_mut().skip(n_map).take(n_ind) {
                *f = true;
            }
        }
        frozen
    }
}

/// One history row per iteration.
#[derive(Debug, Clone, Copy)]
pub struct HistoryRow {
    pub iter: usize,
    pub compliance: f64,
    pub volume: f64,
    pub clamp_fraction: f64,
    pub min_det_j: f64,
}

impl HistoryRow {
    pub fn csv_header() -> &'static str {
        "iter,compliance,volume,clamp_fraction,min_det_j"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iter, self.compliance, self.volume, self.clamp_fraction, self.min_det_j
        )
    }
}

/// Serializable optimizer state for checkpoint/restart.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iter: usize,
    pub design: Vec<f64>,
    pub initial_compliance: f64,
    pub diverged_count: usize,
    pub stalled_count: usize,
    pub last_compliance: f64,
    pub move_frac: f64,
    pub mma_iter: usize,
    pub mma_low: Vec<f64>,
    pub mma_upp: Vec<f64>,
    pub mma_xprev: Vec<f64>,
    pub mma_xprev2: Vec<f64>,
}

impl Snapshot {
    pub fn to_text(&self, dim: usize) -> String {
        let mut s = String::new();
        s.push_str("# igm checkpoint\n");
        s.push_str(&format!("iter {}\n", self.iter));
        s.push_str(&format!("initial_compliance {}\n", self.initial_compliance));
        s.push_str(&format!("diverged_count {}\n", self.diverged_count));
        s.push_str(&format!("stalled_count {}\n", self.stalled_count));
        s.push_str(&format!("last_compliance {}\n", self.last_compliance));
        s.push_str(&format!("move_frac {}\n", self.move_frac));
        s.push_str(&format!("mma_iter {}\n", self.mma_iter));
        for (name, vals) in [
            ("design", &self.design),
            ("mma_low", &self.mma_low),
            ("mma_upp", &self.mma_upp),
            ("mma_xprev", &self.mma_xprev),
            ("mma_xprev2", &self.mma_xprev2),
        ] {
            s.push_str(&format!("section {name} {}\n", vals.len()));
            for v in vals {
                s.push_str(&format!("{v}\n"));
            }
        }
        s.push_str(&format!("n {dim}\n"));
        s
    }

    pub fn from_text(text: &str) -> Result<(usize, Self)> {
        let mut snap = Snapshot {
            iter: 0,
            design: Vec::new(),
            initial_compliance: 0.0,
            diverged_count: 0,
            stalled_count: 0,
            last_compliance: 0.0,
            move_frac: 0.5,
            mma_iter: 0,
            mma_low: Vec::new(),
            mma_upp: Vec::new(),
            mma_xprev: Vec::new(),
            mma_xprev2: Vec::new(),
        };
        let mut dim = None;
        let mut lines = text.lines().peekable();
        let parse_err = |line: &str| Error::Design(format!("bad checkpoint line `{line}`"));
        while let Some(line) = lines.next() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            match key {
                "iter" | "diverged_count" | "stalled_count" | "mma_iter" => {
                    let v: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(line))?;
                    match key {
                        "iter" => snap.iter = v,
                        "diverged_count" => snap.diverged_count = v,
                        "stalled_count" => snap.stalled_count = v,
                        _ => snap.mma_iter = v,
                    }
                }
                "initial_compliance" | "last_compliance" | "move_frac" => {
                    let v: f64 = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(line))?;
                    match key {
                        "initial_compliance" => snap.initial_compliance = v,
                        "last_compliance" => snap.last_compliance = v,
                        _ => snap.move_frac = v,
                    }
                }
                "n" => {
                    dim = parts.next().and_then(|s| s.parse().ok());
                }
                "section" => {
                    let name = parts.next().ok_or_else(|| parse_err(line))?.to_string();
                    let count: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(line))?;
                    let mut vals = Vec::with_capacity(count);
                    for _ in 0..count {
                        let vline = lines.next().ok_or_else(|| parse_err(line))?;
                        vals.push(
                            vline
                                .trim()
                                .parse::<f64>()
                                .map_err(|_| parse_err(vline))?,
                        );
                    }
                    match name.as_str() {
                        "design" => snap.design = vals,
                        "mma_low" => snap.mma_low = vals,
                        "mma_upp" => snap.mma_upp = vals,
                        "mma_xprev" => snap.mma_xprev = vals,
                        "mma_xprev2" => snap.mma_xprev2 = vals,
                        _ => return Err(Error::Design(format!("unknown section `{name}`"))),
                    }
                }
                _ => return Err(parse_err(line)),
            }
        }
        let dim = dim.ok_or_else(|| Error::Design("checkpoint missing dimension".into()))?;
        Ok((dim, snap))
    }
}

/// Outcome of an optimization run.
pub struct Outcome {
    pub design: Vec<f64>,
    pub history: Vec<HistoryRow>,
    pub final_compliance: f64,
    pub final_volume: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Run the compliance minimization. `resume` continues a checkpointed
/// run bit-identically; `on_iter` observes every accepted iteration (for
/// history streaming and checkpoint writing).
pub fn optimize(
    pipeline: &Pipeline,
    config: &OptimizationConfig,
    resume: Option<Snapshot>,
    mut on_iter: impl FnMut(&HistoryRow, &[f64], &Snapshot) -> Result<()>,
) -> Result<Outcome> {
    let dim = pipeline.dim();
    let n_vars = crate::mapping::design_len(dim);
    let (lo, hi) = pipeline.design_bounds();

    let mut mma = MmaState::new(
        n_vars,
        MmaOptions { move_frac: config.move_frac, ..MmaOptions::default() },
    );
    let mut design;
    let mut start_iter = 1usize;
    let mut initial_compliance = f64::NAN;
    let mut diverged_count = 0usize;
    let mut stalled_count = 0usize;
    let mut last_compliance = f64::NAN;
    // a resumed run redoes the checkpointed iteration's update (its
    // bookkeeping already happened before the snapshot was written), so
    // the continued history matches an uninterrupted run row for row
    let mut skip_bookkeeping = false;
    if let Some(snap) = resume {
        design = snap.design.clone();
        start_iter = snap.iter;
        skip_bookkeeping = true;
        initial_compliance = snap.initial_compliance;
        diverged_count = snap.diverged_count;
        stalled_count = snap.stalled_count;
        last_compliance = snap.last_compliance;
        mma.opts.move_frac = snap.move_frac;
        mma.iter = snap.mma_iter;
        mma.low = snap.mma_low;
        mma.upp = snap.mma_upp;
        mma.x_prev = snap.mma_xprev;
        mma.x_prev2 = snap.mma_xprev2;
        if snap.iter >= config.max_iters {
            let final_eval = pipeline.evaluate(&design)?;
            return Ok(Outcome {
                design,
                final_compliance: final_eval.compliance,
                final_volume: final_eval.volume,
                history: Vec::new(),
                converged: false,
                iterations: snap.iter,
            });
        }
    } else {
        design = pipeline.initial_design(config.volume_budget);
        // clamp the start into the bounds
        for j in 0..n_vars {
            design[j] = design[j].clamp(lo[j], hi[j]);
        }
    }

    let mut history = Vec::new();
    let mut converged = false;
    let mut ev = pipeline.evaluate(&design)?;
    if initial_compliance.is_nan() {
        initial_compliance = ev.compliance;
    }
    let mut iter = start_iter;
    while iter <= config.max_iters {
        if !skip_bookkeeping {
            let row = HistoryRow {
                iter,
                compliance: ev.compliance,
                volume: ev.volume,
                clamp_fraction: ev.clamp_fraction,
                min_det_j: ev.min_det_j,
            };
            history.push(row);

            // convergence and divergence accounting
            if !last_compliance.is_nan() {
                let rel =
                    (ev.compliance - last_compliance).abs() / last_compliance.abs().max(1e-300);
                if rel < config.conv_tol {
                    stalled_count += 1;
                } else {
                    stalled_count = 0;
                }
            }
            last_compliance = ev.compliance;
            if ev.compliance > 10.0 * initial_compliance {
                diverged_count += 1;
            } else {
                diverged_count = 0;
            }

            let snap = Snapshot {
                iter,
                design: design.clone(),
                initial_compliance,
                diverged_count,
                stalled_count,
                last_compliance,
                move_frac: mma.opts.move_frac,
                mma_iter: mma.iter,
                mma_low: mma.low.clone(),
                mma_upp: mma.upp.clone(),
                mma_xprev: mma.x_prev.clone(),
                mma_xprev2: mma.x_prev2.clone(),
            };
            on_iter(&row, &design, &snap)?;

            if diverged_count >= 10 {
                return Err(Error::Numerical(format!(
                    "compliance diverged for 10 consecutive iterations \
                     (initial {initial_compliance}, current {}); design: {design:?}",
                    ev.compliance
                )));
            }
            if stalled_count >= 5 {
                converged = true;
                break;
            }
            if iter == config.max_iters {
                break;
            }
        }
        skip_bookkeeping = false;

        // gradients and the MMA update (objective scaled by the initial
        // compliance, constraint normalized by the budget)
        let (dc, dv) = pipeline.gradients(&design, &ev)?;
        let scale = 1.0 / initial_compliance.abs().max(1e-300);
        let df0: Vec<f64> = dc.iter().map(|g| g * scale).collect();
        let gval = vec![ev.volume / config.volume_budget - 1.0];
        let dg = vec![dv.iter().map(|g| g / config.volume_budget).collect::<Vec<f64>>()];
        let frozen = pipeline.frozen_mask(config, iter);

        // step with the degenerate-Jacobian guard: rejected steps halve
        // the move limits and retry from the saved optimizer state
        let detj_min = config.detj_floor * pipeline.h.powi(dim as i32);
        let mut accepted = None;
        for _attempt in 0..8 {
            let saved = mma.clone();
            let step = mma.step(&design, &df0, &gval, &dg, &lo, &hi, &frozen)?;
            if let Some(slack) = step.infeasible_slack {
                log::warn!("iteration {iter}: volume subproblem relaxed with slack {slack:.3e}");
            }
            let (cand_map, _) = unpack(dim, &step.x)?;
            let mut ok = true;
            for rep in &pipeline.zoning.reps {
                if det_n(&cand_map.jacobian(rep), dim) <= detj_min {
                    ok = false;
                    break;
                }
            }
            if ok {
                accepted = Some(step.x);
                break;
            }
            mma = saved;
            mma.halve_move_limit();
            log::warn!(
                "iteration {iter}: step rejected (det J floor), move limit halved to {}",
                mma.opts.move_frac
            );
        }
        let next = accepted.ok_or_else(|| {
            Error::Numerical(format!(
                "iteration {iter}: could not find a step keeping det J above {detj_min:.3e}"
            ))
        })?;
        design = next;
        ev = pipeline.evaluate(&design)?;
        iter += 1;
    }

    let final_eval = pipeline.evaluate(&design)?;
    Ok(Outcome {
        design,
        final_compliance: final_eval.compliance,
        final_volume: final_eval.volume,
        history,
        converged,
        iterations: iter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macrofe::{Face, Traction};
    use crate::menu;
    use crate::tdf::DomainBox;

    fn beam_problem(nx: usize, ny: usize) -> MacroProblem {
        MacroProblem {
            dim: 2,
            domain: DomainBox::new_2d([0.0, 0.0], [2.0, 1.0]),
            nelem: [nx, ny, 1],
            fixed_faces: vec![Face::XMax],
            tractions: vec![Traction { face: Face::YMax, direction: 1, magnitude: -1.0 }],
            body_force: [0.0; 3],
        }
    }

    #[test]
    fn zone_partition_examples() {
        let z = partition_zones(&beam_problem(400, 200), [16, 8, 1]).unwrap();
        assert_eq!(z.n_zones, 128);
        // 25x25 elements per zone
        assert_eq!(z.zone_of_element[0], 0);
        assert_eq!(z.zone_of_element[24], 0);
        assert_eq!(z.zone_of_element[25], 1);
        assert_eq!(z.reps[0], [2.0 / 32.0, 1.0 / 16.0, 0.0]);

        let p3 = MacroProblem {
            dim: 3,
            domain: DomainBox::new_3d([0.0; 3], [2.0, 1.0, 0.1]),
            nelem: [40, 20, 2],
            fixed_faces: vec![Face::XMax],
            tractions: vec![Traction { face: Face::ZMax, direction: 2, magnitude: -1.0 }],
            body_force: [0.0; 3],
        };
        let z3 = partition_zones(&p3, [8, 4, 1]).unwrap();
        assert_eq!(z3.n_zones, 32);
        // 5x5x2 elements per zone
        let per_layer = 40 * 20;
        assert_eq!(z3.zone_of_element[0], z3.zone_of_element[per_layer]);

        // centroid containment on a small mesh
        let z = partition_zones(&beam_problem(4, 4), [2, 2, 1]).unwrap();
        assert_eq!(z.zone_of_element, vec![0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);

        // non-dividing counts are rejected
        assert!(partition_zones(&beam_problem(10, 10), [3, 2, 1]).is_err());
    }

    #[test]
    fn initial_design_meets_budget() {
        let pipeline = Pipeline::new(
            Arc::new(menu::x_cell()),
            BaseMaterial::new(1.0, 0.3, 2, 1e-6).unwrap(),
            0.05,
            beam_problem(40, 20),
            [4, 2, 1],
            24,
        )
        .unwrap();
        let d = pipeline.initial_design(0.3);
        let (_, ind) = unpack(2, &d).unwrap();
        let (vol, clamp) = pipeline.volume_fraction(&ind);
        assert!((vol - 0.3).abs() < 1e-9, "initial volume {vol}");
        assert_eq!(clamp, 0.0);
        // alpha solves 1 - 8 a^2 = 0.3
        assert!((ind.alpha - (0.7f64 / 8.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn snapshot_roundtrip() {
        let snap = Snapshot {
            iter: 17,
            design: vec![0.05, -1.25e-7, 3.0],
            initial_compliance: 1234.5,
            diverged_count: 1,
            stalled_count: 2,
            last_compliance: 321.0987654321,
            move_frac: 0.25,
            mma_iter: 17,
            mma_low: vec![-0.5, 0.0, 1.0],
            mma_upp: vec![0.5, 1.0, 2.0],
            mma_xprev: vec![0.04, 0.0, 2.9],
            mma_xprev2: vec![0.03, 0.1, 2.8],
        };
        let text = snap.to_text(2);
        let (dim, back) = Snapshot::from_text(&text).unwrap();
        assert_eq!(dim, 2);
        assert_eq!(back.iter, snap.iter);
        assert_eq!(back.design, snap.design);
        assert_eq!(back.last_compliance, snap.last_compliance);
        assert_eq!(back.mma_low, snap.mma_low);
        assert_eq!(back.mma_xprev2, snap.mma_xprev2);
        assert_eq!(back.move_frac, snap.move_frac);
    }

    #[test]
    fn short_optimization_makes_progress() {
        let pipeline = Pipeline::new(
            Arc::new(menu::x_cell()),
            BaseMaterial::new(1.0, 0.3, 2, 1e-6).unwrap(),
            0.05,
            beam_problem(40, 20),
            [4, 2, 1],
            24,
        )
        .unwrap();
        let config = OptimizationConfig {
            max_iters: 10,
            zeta_activation_iter: 5,
            cell_resolution: 24,
            ..OptimizationConfig::default_2d()
        };
        let out = optimize(&pipeline, &config, None, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.history.len(), 10);
        let first = out.history.first().unwrap().compliance;
        assert!(
            out.final_compliance < 0.6 * first,
            "insufficient progress: {} -> {}",
            first,
            out.final_compliance
        );
        assert!(out.final_volume <= config.volume_budget + 1e-3);
    }

    #[test]
    fn frozen_groups_stay_put() {
        let pipeline = Pipeline::new(
            Arc::new(menu::x_cell()),
            BaseMaterial::new(1.0, 0.3, 2, 1e-6).unwrap(),
            0.05,
            beam_problem(20, 10),
            [2, 1, 1],
            16,
        )
        .unwrap();
        let config = OptimizationConfig {
            max_iters: 3,
            enable_map: false,
            zeta_activation_iter: 0,
            cell_resolution: 16,
            ..OptimizationConfig::default_2d()
        };
        let out = optimize(&pipeline, &config, None, |_, _, _| Ok(())).unwrap();
        let d0 = pipeline.initial_design(config.volume_budget);
        let n_map = PolynomialMap::n_coeffs(2);
        assert_eq!(&out.design[..n_map], &d0[..n_map], "map group moved");
        assert_ne!(&out.design[n_map..], &d0[n_map..], "zeta group frozen");
    }
}
