//! Microstructure decoration of parametric surfaces: a planar cell menu
//! is carried onto a shell of finite thickness through the normal-offset
//! map `x = f(y1, y2) + n(y1, y2) y3`, inverted pointwise by Newton
//! iteration from coarse-grid seeds.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::mapping::LevelIndicator;
use crate::menu::{wrap_unit, CellMenu};
use crate::tdf::{DomainBox, RasterGrid};
use crate::{Error, Result};

type SurfaceFn = dyn Fn(f64, f64) -> [f64; 3] + Send + Sync;
type SurfacePartialsFn = dyn Fn(f64, f64) -> ([f64; 3], [f64; 3]) + Send + Sync;

/// A regular parametric surface patch.
#[derive(Clone)]
pub struct ParametricSurface {
    pub name: String,
    /// Parameter box `(u, v)`.
    pub u_range: (f64, f64),
    pub v_range: (f64, f64),
    /// The `u` coordinate is periodic (closed in `u`).
    pub u_periodic: bool,
    f: Arc<SurfaceFn>,
    partials: Option<Arc<SurfacePartialsFn>>,
}

impl fmt::Debug for ParametricSurface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ParametricSurface({}, u {:?}, v {:?})",
            self.name, self.u_range, self.v_range
        )
    }
}

impl ParametricSurface {
    pub fn new(
        name: &str,
        u_range: (f64, f64),
        v_range: (f64, f64),
        u_periodic: bool,
        f: impl Fn(f64, f64) -> [f64; 3] + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            u_range,
            v_range,
            u_periodic,
            f: Arc::new(f),
            partials: None,
        }
    }

    pub fn with_partials(
        mut self,
        partials: impl Fn(f64, f64) -> ([f64; 3], [f64; 3]) + Send + Sync + 'static,
    ) -> Self {
        self.partials = Some(Arc::new(partials));
        self
    }

    #[inline]
    pub fn eval(&self, u: f64, v: f64) -> [f64; 3] {
        (self.f)(u, v)
    }

    /// Partial derivatives (analytic when supplied, central differences
    /// otherwise).
    pub fn partials(&self, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
        if let Some(p) = &self.partials {
            return p(u, v);
        }
        let hu = 1e-6 * (self.u_range.1 - self.u_range.0).abs().max(1.0);
        let hv = 1e-6 * (self.v_range.1 - self.v_range.0).abs().max(1.0);
        let (fu_p, fu_m) = (self.eval(u + hu, v), self.eval(u - hu, v));
        let (fv_p, fv_m) = (self.eval(u, v + hv), self.eval(u, v - hv));
        let mut du = [0.0; 3];
        let mut dv = [0.0; 3];
        for a in 0..3 {
            du[a] = (fu_p[a] - fu_m[a]) / (2.0 * hu);
            dv[a] = (fv_p[a] - fv_m[a]) / (2.0 * hv);
        }
        (du, dv)
    }

    /// Unit surface normal `(f_u x f_v) / |f_u x f_v|`.
    pub fn normal(&self, u: f64, v: f64) -> Result<[f64; 3]> {
        let (du, dv) = self.partials(u, v);
        let n = [
            du[1] * dv[2] - du[2] * dv[1],
            du[2] * dv[0] - du[0] * dv[2],
            du[0] * dv[1] - du[1] * dv[0],
        ];
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if len < 1e-12 {
            return Err(Error::Geometry(format!(
                "degenerate surface normal at (u, v) = ({u}, {v})"
            )));
        }
        Ok([n[0] / len, n[1] / len, n[2] / len])
    }

    /// Offset map `x = f(y1, y2) + n(y1, y2) y3`.
    pub fn offset_map(&self, y: &[f64; 3]) -> Result<[f64; 3]> {
        let p = self.eval(y[0], y[1]);
        let n = self.normal(y[0], y[1])?;
        Ok([p[0] + n[0] * y[2], p[1] + n[1] * y[2], p[2] + n[2] * y[2]])
    }

    /// True if `(u, v)` lies in the parameter box (u modulo the period
    /// for closed surfaces).
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let u_ok = if self.u_periodic {
            true
        } else {
            u >= self.u_range.0 - 1e-12 && u <= self.u_range.1 + 1e-12
        };
        u_ok && v >= self.v_range.0 - 1e-12 && v <= self.v_range.1 + 1e-12
    }
}

/// Newton-inversion settings.
#[derive(Debug, Clone, Copy)]
pub struct InversionSettings {
    /// Seed-grid density per parameter axis.
    pub seeds: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self { seeds: 32, tol: 1e-10, max_iter: 40 }
    }
}

/// Cached seed grid for repeated inversions against one surface.
pub struct InversionSeeds {
    settings: InversionSettings,
    points: Vec<(f64, f64, [f64; 3])>,
    nu: usize,
    nv: usize,
}

impl InversionSeeds {
    pub fn new(surface: &ParametricSurface, settings: InversionSettings) -> Self {
        let (nu, nv) = (settings.seeds, settings.seeds);
        let mut points = Vec::with_capacity(nu * nv);
        for jv in 0..nv {
            let v = surface.v_range.0
                + (jv as f64 + 0.5) / nv as f64 * (surface.v_range.1 - surface.v_range.0);
            for ju in 0..nu {
                let u = surface.u_range.0
                    + (ju as f64 + 0.5) / nu as f64 * (surface.u_range.1 - surface.u_range.0);
                points.push((u, v, surface.eval(u, v)));
            }
        }
        Self { settings, points, nu, nv }
    }
}

/// Invert the offset map at `x`: Newton iteration from the best seed and
/// its neighbors, keeping the root with the smallest offset coordinate.
/// `None` means no seed converged (the point is outside the shell's
/// reach).
pub fn invert_map(
    surface: &ParametricSurface,
    seeds: &InversionSeeds,
    x: &[f64; 3],
) -> Option<[f64; 3]> {
    // nearest seed by surface distance
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, (_, _, p)) in seeds.points.iter().enumerate() {
        let d = (p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2) + (p[2] - x[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    let (bu, bv) = (best % seeds.nu, best / seeds.nu);
    let mut candidates: Vec<[f64; 3]> = Vec::new();
    for dv in -1i64..=1 {
        for du in -1i64..=1 {
            let ju = bu as i64 + du;
            let jv = bv as i64 + dv;
            let ju = if surface.u_periodic {
                ju.rem_euclid(seeds.nu as i64)
            } else {
                ju.clamp(0, seeds.nu as i64 - 1)
            } as usize;
            let jv = jv.clamp(0, seeds.nv as i64 - 1) as usize;
            let (u, v, p) = seeds.points[jv * seeds.nu + ju];
            let n = match surface.normal(u, v) {
                Ok(n) => n,
                Err(_) => continue,
            };
            let y3 = (x[0] - p[0]) * n[0] + (x[1] - p[1]) * n[1] + (x[2] - p[2]) * n[2];
            if let Some(root) = newton(surface, &seeds.settings, [u, v, y3], x) {
                candidates.push(root);
            }
        }
    }
    candidates
        .into_iter()
        .min_by(|a, b| a[2].abs().partial_cmp(&b[2].abs()).expect("finite roots"))
}

fn newton(
    surface: &ParametricSurface,
    settings: &InversionSettings,
    start: [f64; 3],
    x: &[f64; 3],
) -> Option<[f64; 3]> {
    let mut y = start;
    let residual = |y: &[f64; 3]| -> Option<Vector3<f64>> {
        let p = surface.offset_map(y).ok()?;
        Some(Vector3::new(p[0] - x[0], p[1] - x[1], p[2] - x[2]))
    };
    let u_span = surface.u_range.1 - surface.u_range.0;
    let v_span = surface.v_range.1 - surface.v_range.0;
    for _ in 0..settings.max_iter {
        let r = residual(&y)?;
        if r.norm() <= settings.tol {
            // wrap periodic u back into the box before reporting
            if surface.u_periodic {
                y[0] = surface.u_range.0 + (y[0] - surface.u_range.0).rem_euclid(u_span);
            }
            return Some(y);
        }
        // numeric Jacobian of the offset map
        let mut jac = Matrix3::<f64>::zeros();
        let steps = [1e-7 * u_span.max(1.0), 1e-7 * v_span.max(1.0), 1e-7];
        for c in 0..3 {
            let mut yp = y;
            let mut ym = y;
            yp[c] += steps[c];
            ym[c] -= steps[c];
            let (rp, rm) = (residual(&yp)?, residual(&ym)?);
            for rix in 0..3 {
                jac[(rix, c)] = (rp[rix] - rm[rix]) / (2.0 * steps[c]);
            }
        }
        let delta = jac.lu().solve(&(-r))?;
        y[0] += delta[0];
        y[1] += delta[1];
        y[2] += delta[2];
        // diverging far outside the patch means this seed is hopeless
        if !surface.u_periodic
            && (y[0] < surface.u_range.0 - u_span || y[0] > surface.u_range.1 + u_span)
        {
            return None;
        }
        if y[1] < surface.v_range.0 - v_span || y[1] > surface.v_range.1 + v_span {
            return None;
        }
    }
    None
}

/// A shell decorated with a planar cell menu.
pub struct ShellSpec {
    pub surface: ParametricSurface,
    /// Planar (2D) menu providing the cell pattern.
    pub menu: Arc<CellMenu>,
    /// Level indicator in ambient coordinates.
    pub indicator: LevelIndicator,
    pub h: f64,
    /// Shell thickness.
    pub h0: f64,
    /// Value assigned outside the shell (positive).
    pub delta: f64,
    pub inversion: InversionSettings,
}

impl ShellSpec {
    pub fn validate(&self) -> Result<()> {
        if self.menu.dim != 2 {
            return Err(Error::Config("shell menus must be two-dimensional".into()));
        }
        if !(self.h0 > 0.0) || !(self.delta > 0.0) || !(self.h > 0.0) {
            return Err(Error::Config(
                "shell thickness, h and delta must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Shell TDF: the planar indicator at the inverted surface coordinates
/// inside the thickness, `-delta` everywhere else (including inversion
/// failures).
pub fn shell_tdf(spec: &ShellSpec, seeds: &InversionSeeds, x: &[f64; 3]) -> f64 {
    let y = match invert_map(&spec.surface, seeds, x) {
        Some(y) => y,
        None => return -spec.delta,
    };
    if y[2].abs() >= 0.5 * spec.h0 || !spec.surface.contains(y[0], y[1]) {
        return -spec.delta;
    }
    let (zeta, _) = spec.indicator.eval(x, spec.menu.zeta_range);
    let ybar = [wrap_unit(y[0] / spec.h), wrap_unit(y[1] / spec.h), 0.0];
    spec.menu.cell_indicator(&ybar, zeta)
}

/// Voxelize a shell over a box; also returns the stored TDF values for
/// isosurface extraction.
pub fn voxelize_shell(
    spec: &ShellSpec,
    domain: DomainBox,
    resolution: [usize; 3],
) -> Result<(RasterGrid, Vec<f64>)> {
    spec.validate()?;
    let seeds = InversionSeeds::new(&spec.surface, spec.inversion);
    let (nx, ny, nz) = (resolution[0], resolution[1], resolution[2]);
    let spacing = [
        domain.extents[0] / nx as f64,
        domain.extents[1] / ny as f64,
        domain.extents[2] / nz as f64,
    ];
    let values: Vec<f64> = (0..ny * nz)
        .into_par_iter()
        .flat_map_iter(|jk| {
            let k = jk / ny;
            let j = jk % ny;
            let spec = &spec;
            let seeds = &seeds;
            (0..nx).map(move |i| {
                let x = [
                    domain.origin[0] + (i as f64 + 0.5) * spacing[0],
                    domain.origin[1] + (j as f64 + 0.5) * spacing[1],
                    domain.origin[2] + (k as f64 + 0.5) * spacing[2],
                ];
                shell_tdf(spec, seeds, &x)
            })
        })
        .collect();
    let solid = values.iter().map(|&v| v >= 0.0).collect();
    Ok((RasterGrid { dim: 3, domain, resolution, solid }, values))
}

// ---------------------------------------------------------------------------
// Built-in surfaces
// ---------------------------------------------------------------------------

/// Paraboloid `x3 = x1^2 + x2^2` over a square parameter patch.
pub fn paraboloid(extent: f64) -> ParametricSurface {
    ParametricSurface::new(
        "paraboloid",
        (-extent, extent),
        (-extent, extent),
        false,
        |u, v| [u, v, u * u + v * v],
    )
    .with_partials(|u, v| ([1.0, 0.0, 2.0 * u], [0.0, 1.0, 2.0 * v]))
}

/// Hyperboloid of one sheet as a surface of revolution:
/// `(cosh v cos u, cosh v sin u, sinh v)`.
pub fn hyperboloid_revolution(v_extent: f64) -> ParametricSurface {
    ParametricSurface::new(
        "hyperboloid_revolution",
        (0.0, std::f64::consts::TAU),
        (-v_extent, v_extent),
        true,
        |u, v| [v.cosh() * u.cos(), v.cosh() * u.sin(), v.sinh()],
    )
    .with_partials(|u, v| {
        (
            [-v.cosh() * u.sin(), v.cosh() * u.cos(), 0.0],
            [v.sinh() * u.cos(), v.sinh() * u.sin(), v.cosh()],
        )
    })
}

/// The same hyperboloid ruled by revolving a straight line:
/// `(cos u - v sin u, sin u + v cos u, v)`.
pub fn hyperboloid_ruled(v_extent: f64) -> ParametricSurface {
    ParametricSurface::new(
        "hyperboloid_ruled",
        (0.0, std::f64::consts::TAU),
        (-v_extent, v_extent),
        true,
        |u, v| [u.cos() - v * u.sin(), u.sin() + v * u.cos(), v],
    )
    .with_partials(|u, v| {
        (
            [-u.sin() - v * u.cos(), u.cos() - v * u.sin(), 0.0],
            [-u.sin(), u.cos(), 1.0],
        )
    })
}

pub fn builtin_surface(name: &str, extent: f64) -> Option<ParametricSurface> {
    match name {
        "paraboloid" => Some(paraboloid(extent)),
        "hyperboloid_revolution" => Some(hyperboloid_revolution(extent)),
        "hyperboloid_ruled" => Some(hyperboloid_ruled(extent)),
        _ => None,
    }
}
