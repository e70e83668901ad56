//! Continuous menus of generating cells.
//!
//! A menu stores a family of unit-cell structures swept by a level value
//! `zeta`: either the level sets of a single generating function, a
//! Lagrange interpolation between seminal cell functions, or a continuous
//! blend of a parameterized family. Each menu carries an admissible
//! `zeta` range and a volume law `g(zeta)` relating the level value to
//! the cell solid fraction.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::expr::Expr;
use crate::interp::MonotoneCubic;
use crate::{Error, Result};

/// Scalar field on the unit cell `[-1/2, 1/2]^n`; periodic extension is
/// implied (callers wrap coordinates with [`wrap_unit`]).
#[derive(Clone)]
pub struct GeneratingFunction {
    pub dim: usize,
    f: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>,
}

impl fmt::Debug for GeneratingFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GeneratingFunction(dim={})", self.dim)
    }
}

impl GeneratingFunction {
    pub fn new(dim: usize, f: impl Fn(&[f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        Self { dim, f: Arc::new(f) }
    }

    /// Build from a closed-form expression in `Y1..Y3`.
    pub fn from_expression(dim: usize, src: &str) -> Result<Self> {
        let expr = Expr::parse(src)?;
        if let Some(maxv) = expr.max_var() {
            if maxv >= dim {
                return Err(Error::Expr(format!(
                    "expression `{src}` references Y{} but dimension is {dim}",
                    maxv + 1
                )));
            }
        }
        Ok(Self::new(dim, move |y| expr.eval(&y[..])))
    }

    #[inline]
    pub fn eval(&self, y: &[f64; 3]) -> f64 {
        (self.f)(y)
    }
}

/// Wrap a coordinate into `[-1/2, 1/2]` (cell centered at lattice points).
#[inline]
pub fn wrap_unit(v: f64) -> f64 {
    v - v.round()
}

/// Volume law `g(zeta)`: solid fraction of the cell selected by `zeta`.
#[derive(Clone)]
pub enum VolumeLaw {
    Analytic {
        g: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        dg: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    },
    Tabulated(MonotoneCubic),
}

impl fmt::Debug for VolumeLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolumeLaw::Analytic { .. } => write!(f, "VolumeLaw::Analytic"),
            VolumeLaw::Tabulated(t) => write!(f, "VolumeLaw::Tabulated({:?})", t.domain()),
        }
    }
}

impl VolumeLaw {
    pub fn fraction(&self, zeta: f64) -> f64 {
        match self {
            VolumeLaw::Analytic { g, .. } => g(zeta),
            VolumeLaw::Tabulated(t) => t.eval(zeta),
        }
    }

    pub fn slope(&self, zeta: f64) -> f64 {
        match self {
            VolumeLaw::Analytic { dg, .. } => dg(zeta),
            VolumeLaw::Tabulated(t) => t.deriv(zeta),
        }
    }
}

/// How the menu composes its generating functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MenuKind {
    /// `chi = phi(Y) - zeta`, cells are the level sets of one function.
    SingleFunction,
    /// `chi = sum_i alpha_i(zeta) phi_i(Y)` with Lagrange weights over knots.
    SeminalLagrange,
    /// `chi = integral alpha(zeta; beta) phi(Y; beta) dbeta` over a family.
    ContinuousBlend,
}

/// Weight kernel for [`MenuKind::ContinuousBlend`].
#[derive(Clone)]
pub enum BlendKernel {
    /// Smooth kernel `alpha(zeta, beta)` integrated by the midpoint rule.
    Continuous(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
    /// Point masses `(beta_i, w_i(zeta))`; reduces the blend to a finite sum.
    PointMasses(Vec<(f64, Arc<dyn Fn(f64) -> f64 + Send + Sync>)>),
}

impl fmt::Debug for BlendKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlendKernel::Continuous(_) => write!(f, "BlendKernel::Continuous"),
            BlendKernel::PointMasses(v) => write!(f, "BlendKernel::PointMasses(n={})", v.len()),
        }
    }
}

/// Parameterized family `phi(Y; beta)` for continuous blends.
#[derive(Clone)]
pub struct BlendFamily {
    pub beta_range: (f64, f64),
    f: Arc<dyn Fn(&[f64; 3], f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for BlendFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlendFamily(beta in {:?})", self.beta_range)
    }
}

/// A continuous menu of generating cells.
#[derive(Debug, Clone)]
pub struct CellMenu {
    pub name: String,
    pub dim: usize,
    pub kind: MenuKind,
    pub functions: Vec<GeneratingFunction>,
    /// Interpolation knots (SeminalLagrange only), strictly increasing.
    pub knots: Vec<f64>,
    pub zeta_range: (f64, f64),
    pub volume_law: VolumeLaw,
    pub blend: Option<(BlendFamily, BlendKernel, usize)>,
}

/// Lagrange basis weights at `zeta` for the given pairwise-distinct knots.
/// The weights sum to 1 and weight `i` equals 1 exactly when `zeta` hits
/// knot `i`.
pub fn lagrange_coefficients(zeta: f64, knots: &[f64]) -> Vec<f64> {
    let m = knots.len();
    let mut w = vec![1.0; m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                w[i] *= (zeta - knots[j]) / (knots[i] - knots[j]);
            }
        }
    }
    w
}

/// Derivatives of the Lagrange weights with respect to `zeta`.
pub fn lagrange_coefficient_derivatives(zeta: f64, knots: &[f64]) -> Vec<f64> {
    let m = knots.len();
    let mut dw = vec![0.0; m];
    for i in 0..m {
        let denom: f64 = (0..m)
            .filter(|&j| j != i)
            .map(|j| knots[i] - knots[j])
            .product();
        let mut sum = 0.0;
        for k in 0..m {
            if k == i {
                continue;
            }
            let mut prod = 1.0;
            for j in 0..m {
                if j != i && j != k {
                    prod *= zeta - knots[j];
                }
            }
            sum += prod;
        }
        dw[i] = sum / denom;
    }
    dw
}

fn validate_knots(knots: &[f64], range: (f64, f64)) -> Result<()> {
    if knots.len() < 2 {
        return Err(Error::Menu("need at least two knots".into()));
    }
    for w in knots.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Menu(format!(
                "knots must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    for &k in knots {
        if k < range.0 || k > range.1 {
            return Err(Error::Menu(format!(
                "knot {k} lies outside the zeta range [{}, {}]",
                range.0, range.1
            )));
        }
    }
    Ok(())
}

/// Diagnostics from [`CellMenu::tabulate_volume_law`].
#[derive(Debug, Clone, Default)]
pub struct TabulationReport {
    /// Sample pairs that rose by more than the pixel-noise tolerance.
    pub nonmonotone_pairs: usize,
    pub max_violation: f64,
}

impl CellMenu {
    pub fn single_function(
        name: &str,
        function: GeneratingFunction,
        zeta_range: (f64, f64),
        volume_law: VolumeLaw,
    ) -> Result<Self> {
        if !(zeta_range.1 > zeta_range.0) {
            return Err(Error::Menu("zeta range must be nonempty".into()));
        }
        Ok(Self {
            name: name.to_string(),
            dim: function.dim,
            kind: MenuKind::SingleFunction,
            functions: vec![function],
            knots: Vec::new(),
            zeta_range,
            volume_law,
            blend: None,
        })
    }

    pub fn seminal_lagrange(
        name: &str,
        functions: Vec<GeneratingFunction>,
        knots: Vec<f64>,
        zeta_range: (f64, f64),
        volume_law: VolumeLaw,
    ) -> Result<Self> {
        if !(zeta_range.1 > zeta_range.0) {
            return Err(Error::Menu("zeta range must be nonempty".into()));
        }
        if functions.len() != knots.len() {
            return Err(Error::Menu(format!(
                "{} seminal functions but {} knots",
                functions.len(),
                knots.len()
            )));
        }
        validate_knots(&knots, zeta_range)?;
        let dim = functions[0].dim;
        if functions.iter().any(|f| f.dim != dim) {
            return Err(Error::Menu("seminal functions disagree on dimension".into()));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            kind: MenuKind::SeminalLagrange,
            functions,
            knots,
            zeta_range,
            volume_law,
            blend: None,
        })
    }

    pub fn continuous_blend(
        name: &str,
        dim: usize,
        family: impl Fn(&[f64; 3], f64) -> f64 + Send + Sync + 'static,
        beta_range: (f64, f64),
        kernel: BlendKernel,
        default_quadrature: usize,
        zeta_range: (f64, f64),
        volume_law: VolumeLaw,
    ) -> Result<Self> {
        if !(zeta_range.1 > zeta_range.0) {
            return Err(Error::Menu("zeta range must be nonempty".into()));
        }
        if !(beta_range.1 > beta_range.0) && !matches!(kernel, BlendKernel::PointMasses(_)) {
            return Err(Error::Menu("beta range must be nonempty".into()));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            kind: MenuKind::ContinuousBlend,
            functions: Vec::new(),
            knots: Vec::new(),
            zeta_range,
            volume_law,
            blend: Some((
                BlendFamily { beta_range, f: Arc::new(family) },
                kernel,
                default_quadrature,
            )),
        })
    }

    #[inline]
    pub fn clamp_zeta(&self, zeta: f64) -> f64 {
        zeta.clamp(self.zeta_range.0, self.zeta_range.1)
    }

    /// Indicator of the cell selected by `zeta` at the (wrapped) point
    /// `y`. Non-negative values are solid.
    pub fn cell_indicator(&self, y: &[f64; 3], zeta: f64) -> f64 {
        match self.kind {
            MenuKind::SingleFunction => self.functions[0].eval(y) - zeta,
            MenuKind::SeminalLagrange => {
                let w = lagrange_coefficients(zeta, &self.knots);
                w.iter()
                    .zip(&self.functions)
                    .map(|(wi, f)| wi * f.eval(y))
                    .sum()
            }
            MenuKind::ContinuousBlend => {
                let (_, _, quad) = self.blend.as_ref().expect("blend menu has family");
                self.blend_indicator(y, zeta, *quad)
                    .expect("stored blend kernel is finite")
            }
        }
    }

    /// Derivative of the indicator with respect to `zeta` at fixed `y`.
    pub fn indicator_zeta_derivative(&self, y: &[f64; 3], zeta: f64) -> f64 {
        match self.kind {
            MenuKind::SingleFunction => -1.0,
            MenuKind::SeminalLagrange => {
                let dw = lagrange_coefficient_derivatives(zeta, &self.knots);
                dw.iter()
                    .zip(&self.functions)
                    .map(|(wi, f)| wi * f.eval(y))
                    .sum()
            }
            MenuKind::ContinuousBlend => {
                let span = self.zeta_range.1 - self.zeta_range.0;
                let step = 1e-6 * span.max(1.0);
                let lo = (zeta - step).max(self.zeta_range.0);
                let hi = (zeta + step).min(self.zeta_range.1);
                let (a, b) = (self.cell_indicator(y, lo), self.cell_indicator(y, hi));
                (b - a) / (hi - lo)
            }
        }
    }

    /// Blend indicator with an explicit quadrature knot count (midpoint
    /// rule over the beta range). Point-mass kernels bypass quadrature.
    pub fn blend_indicator(&self, y: &[f64; 3], zeta: f64, quadrature: usize) -> Result<f64> {
        let (family, kernel, _) = self
            .blend
            .as_ref()
            .ok_or_else(|| Error::Menu("not a continuous-blend menu".into()))?;
        let value = match kernel {
            BlendKernel::PointMasses(masses) => masses
                .iter()
                .map(|(beta, w)| w(zeta) * (family.f)(y, *beta))
                .sum::<f64>(),
            BlendKernel::Continuous(alpha) => {
                let (lo, hi) = family.beta_range;
                let m = quadrature.max(1);
                let dbeta = (hi - lo) / m as f64;
                let mut acc = 0.0;
                for k in 0..m {
                    let beta = lo + (k as f64 + 0.5) * dbeta;
                    acc += alpha(zeta, beta) * (family.f)(y, beta);
                }
                acc * dbeta
            }
        };
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "blend kernel produced non-finite indicator at zeta={zeta}"
            )));
        }
        Ok(value)
    }

    /// Solid fraction of the cell at `zeta` by pixel-center counting at
    /// `resolution` pixels per side.
    pub fn volume_fraction_of_level(&self, zeta: f64, resolution: usize) -> f64 {
        assert!(resolution >= 2, "resolution must be at least 2");
        let n = resolution;
        let px = 1.0 / n as f64;
        let count: u64 = match self.dim {
            2 => (0..n)
                .into_par_iter()
                .map(|j| {
                    let yj = -0.5 + (j as f64 + 0.5) * px;
                    let mut c = 0u64;
                    for i in 0..n {
                        let yi = -0.5 + (i as f64 + 0.5) * px;
                        if self.cell_indicator(&[yi, yj, 0.0], zeta) >= 0.0 {
                            c += 1;
                        }
                    }
                    c
                })
                .sum(),
            3 => (0..n)
                .into_par_iter()
                .map(|k| {
                    let yk = -0.5 + (k as f64 + 0.5) * px;
                    let mut c = 0u64;
                    for j in 0..n {
                        let yj = -0.5 + (j as f64 + 0.5) * px;
                        for i in 0..n {
                            let yi = -0.5 + (i as f64 + 0.5) * px;
                            if self.cell_indicator(&[yi, yj, yk], zeta) >= 0.0 {
                                c += 1;
                            }
                        }
                    }
                    c
                })
                .sum(),
            d => panic!("unsupported dimension {d}"),
        };
        count as f64 / (n as f64).powi(self.dim as i32)
    }

    /// Pre-calculate a `(zeta, fraction)` table over the zeta range and
    /// fit a monotone cubic through it. Non-monotone rises beyond the
    /// pixel-noise tolerance are reported and flattened.
    pub fn tabulate_volume_law(
        &self,
        samples: usize,
        resolution: usize,
    ) -> (VolumeLaw, TabulationReport) {
        assert!(samples >= 8, "need at least 8 samples");
        let (lo, hi) = self.zeta_range;
        let xs: Vec<f64> = (0..samples)
            .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
            .collect();
        let mut ys: Vec<f64> = xs
            .par_iter()
            .map(|&z| self.volume_fraction_of_level(z, resolution))
            .collect();
        let tol = 4.0 / resolution as f64;
        let mut report = TabulationReport::default();
        for i in 1..ys.len() {
            if ys[i] > ys[i - 1] {
                let rise = ys[i] - ys[i - 1];
                if rise > tol {
                    report.nonmonotone_pairs += 1;
                    report.max_violation = report.max_violation.max(rise);
                    log::warn!(
                        "menu `{}`: volume samples rise by {rise:.3e} at zeta={}",
                        self.name,
                        xs[i]
                    );
                }
                ys[i] = ys[i - 1];
            }
        }
        (
            VolumeLaw::Tabulated(MonotoneCubic::new(xs, ys)),
            report,
        )
    }
}

// ---------------------------------------------------------------------------
// Built-in menus
// ---------------------------------------------------------------------------

/// X-shaped cells: diagonal bands of varying thickness. The generating
/// function is normalized so that the volume law is exactly `1 - 8 zeta^2`
/// on `zeta in [0, sqrt(2)/4]`.
pub fn x_cell() -> CellMenu {
    let f = GeneratingFunction::new(2, |y| {
        (0.5 - (y[0].abs() - y[1].abs()).abs()) / std::f64::consts::SQRT_2
    });
    let law = VolumeLaw::Analytic {
        g: Arc::new(|z| 1.0 - 8.0 * z * z),
        dg: Arc::new(|z| -16.0 * z),
    };
    CellMenu::single_function("x_cell", f, (0.0, std::f64::consts::SQRT_2 / 4.0), law)
        .expect("builtin")
}

fn disc_phi1() -> GeneratingFunction {
    GeneratingFunction::new(2, |y| y[0] * y[0] + y[1] * y[1])
}

fn disc_phi2() -> GeneratingFunction {
    GeneratingFunction::new(2, |y| y[0].powi(6) + y[1].powi(6) - 1.0 / 64.0)
}

/// Interpolation between a full-solid cell with a diminishing circular
/// hole and a cell with an inscribed hyperelliptic hole. The volume law
/// is tabulated by pixel counting (`samples` values at `resolution`
/// pixels per side).
pub fn disc_hyperellipse_with(samples: usize, resolution: usize) -> CellMenu {
    let mut menu = CellMenu::seminal_lagrange(
        "disc_hyperellipse",
        vec![disc_phi1(), disc_phi2()],
        vec![0.0, 1.0],
        (0.0, 1.0),
        VolumeLaw::Analytic {
            // placeholder replaced by the tabulated law below
            g: Arc::new(|_| 0.0),
            dg: Arc::new(|_| 0.0),
        },
    )
    .expect("builtin");
    let (law, _) = menu.tabulate_volume_law(samples, resolution);
    menu.volume_law = law;
    menu
}

pub fn disc_hyperellipse() -> CellMenu {
    disc_hyperellipse_with(33, 1024)
}

/// Seminal pair of ring cells (circular hole growing from radius 0.4 to
/// 0.45), a small demonstration menu for Lagrange interpolation with a
/// closed-form volume law.
pub fn ring2d() -> CellMenu {
    let phi1 = GeneratingFunction::new(2, |y| (y[0] * y[0] + y[1] * y[1]).sqrt() - 0.4);
    let phi2 = GeneratingFunction::new(2, |y| (y[0] * y[0] + y[1] * y[1]).sqrt() - 0.45);
    let law = VolumeLaw::Analytic {
        g: Arc::new(|z| {
            let r = 0.4 + 0.05 * z;
            1.0 - std::f64::consts::PI * r * r
        }),
        dg: Arc::new(|z| {
            let r = 0.4 + 0.05 * z;
            -2.0 * std::f64::consts::PI * r * 0.05
        }),
    };
    CellMenu::seminal_lagrange(
        "ring2d",
        vec![phi1, phi2],
        vec![0.0, 1.0],
        (0.0, 1.0),
        law,
    )
    .expect("builtin")
}

/// Three crossing pillars whose cross-section sweeps from fat circles
/// (`zeta = 0`) to diminishing hyperellipses (`zeta = 1`). The level
/// value is the threshold at which a point leaves the solid, so the cell
/// family is exactly the nested pillar family and the volume law is
/// monotone non-increasing.
pub fn pillars3d_with(samples: usize, resolution: usize) -> CellMenu {
    let f = GeneratingFunction::new(3, |y| {
        let mut best = f64::NEG_INFINITY;
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let a = y[i] * y[i] + y[j] * y[j];
            let b = y[i].powi(6) + y[j].powi(6);
            let q = 0.25 - a;
            let v = if q > 0.0 {
                1.0 - (b / (b + q)).powf(1.0 / 6.0)
            } else {
                q
            };
            best = best.max(v);
        }
        best
    });
    let mut menu = CellMenu::single_function(
        "pillars3d",
        f,
        (0.0, 1.0),
        VolumeLaw::Analytic { g: Arc::new(|_| 0.0), dg: Arc::new(|_| 0.0) },
    )
    .expect("builtin");
    let (law, _) = menu.tabulate_volume_law(samples, resolution);
    menu.volume_law = law;
    menu
}

pub fn pillars3d() -> CellMenu {
    pillars3d_with(33, 96)
}

/// Solid cube with three crossing cylindrical holes dug out; the hole
/// cross-section grows from a diminishing circle (`zeta = 0`) to a
/// hyperellipse spanning the cell (`zeta = 1`).
pub fn drilled_cube_with(samples: usize, resolution: usize) -> CellMenu {
    let f = GeneratingFunction::new(3, |y| {
        let mut worst = f64::INFINITY;
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let a = y[i] * y[i] + y[j] * y[j];
            let b = y[i].powi(6) + y[j].powi(6);
            let slope = b - 1.0 / 64.0 - a;
            let v = if slope < 0.0 { (a / -slope).min(2.0) } else { 2.0 };
            worst = worst.min(v);
        }
        worst
    });
    let mut menu = CellMenu::single_function(
        "drilled_cube",
        f,
        (0.0, 1.0),
        VolumeLaw::Analytic { g: Arc::new(|_| 0.0), dg: Arc::new(|_| 0.0) },
    )
    .expect("builtin");
    let (law, _) = menu.tabulate_volume_law(samples, resolution);
    menu.volume_law = law;
    menu
}

pub fn drilled_cube() -> CellMenu {
    drilled_cube_with(33, 96)
}

/// Seminal-Lagrange menu from expression strings, with a tabulated
/// volume law.
pub fn seminal_from_expressions(
    name: &str,
    dim: usize,
    exprs: &[String],
    knots: Vec<f64>,
    zeta_range: (f64, f64),
    law_samples: usize,
    law_resolution: usize,
) -> Result<CellMenu> {
    let functions = exprs
        .iter()
        .map(|s| GeneratingFunction::from_expression(dim, s))
        .collect::<Result<Vec<_>>>()?;
    let mut menu = CellMenu::seminal_lagrange(
        name,
        functions,
        knots,
        zeta_range,
        VolumeLaw::Analytic { g: Arc::new(|_| 0.0), dg: Arc::new(|_| 0.0) },
    )?;
    let (law, _) = menu.tabulate_volume_law(law_samples, law_resolution);
    menu.volume_law = law;
    Ok(menu)
}

/// Single-function menu from one expression string.
pub fn single_from_expression(
    name: &str,
    dim: usize,
    expr: &str,
    zeta_range: (f64, f64),
    law_samples: usize,
    law_resolution: usize,
) -> Result<CellMenu> {
    let function = GeneratingFunction::from_expression(dim, expr)?;
    let mut menu = CellMenu::single_function(
        name,
        function,
        zeta_range,
        VolumeLaw::Analytic { g: Arc::new(|_| 0.0), dg: Arc::new(|_| 0.0) },
    )?;
    let (law, _) = menu.tabulate_volume_law(law_samples, law_resolution);
    menu.volume_law = law;
    Ok(menu)
}

/// Look up a built-in menu by name.
pub fn builtin(name: &str) -> Option<CellMenu> {
    match name {
        "x_cell" => Some(x_cell()),
        "disc_hyperellipse" => Some(disc_hyperellipse()),
        "ring2d" => Some(ring2d()),
        "pillars3d" => Some(pillars3d()),
        "drilled_cube" => Some(drilled_cube()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn x_cell_indicator_at_origin() {
        let m = x_cell();
        let v = m.cell_indicator(&[0.0, 0.0, 0.0], 0.0);
        assert!((v - 0.353_553_390_593_273_8).abs() < 1e-12);
    }

    #[test]
    fn disc_endpoint_reduces_to_second_seminal() {
        let m = disc_hyperellipse_with(8, 64);
        // void at the hole center when the hyperellipse endpoint is active
        let v = m.cell_indicator(&[0.0, 0.0, 0.0], 1.0);
        assert!((v - (-1.0 / 64.0)).abs() < 1e-15);
        // knot hit reproduces each seminal function exactly
        for y in [[0.1, -0.3, 0.0], [0.45, 0.2, 0.0], [-0.5, 0.5, 0.0]] {
            assert_eq!(m.cell_indicator(&y, 0.0), m.functions[0].eval(&y));
            assert_eq!(m.cell_indicator(&y, 1.0), m.functions[1].eval(&y));
            let f1 = y[0] * y[0] + y[1] * y[1];
            assert!((m.cell_indicator(&y, 0.0) - f1).abs() < 1e-15);
            let f2 = y[0].powi(6) + y[1].powi(6) - 1.0 / 64.0;
            assert!((m.cell_indicator(&y, 1.0) - f2).abs() < 1e-15);
        }
    }

    #[test]
    fn lagrange_weight_examples() {
        assert_eq!(lagrange_coefficients(0.0, &[0.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(
            lagrange_coefficients(0.5, &[0.0, 0.5, 1.0]),
            vec![0.0, 1.0, 0.0]
        );
        let w = lagrange_coefficients(0.25, &[0.0, 1.0]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lagrange_weight_derivatives_match_fd() {
        let knots = [0.0, 0.3, 0.7, 1.0];
        for &z in &[0.1, 0.45, 0.9] {
            let d = lagrange_coefficient_derivatives(z, &knots);
            let h = 1e-6;
            let wp = lagrange_coefficients(z + h, &knots);
            let wm = lagrange_coefficients(z - h, &knots);
            for i in 0..knots.len() {
                let fd = (wp[i] - wm[i]) / (2.0 * h);
                assert!((d[i] - fd).abs() < 1e-7, "weight {i} at zeta {z}");
            }
        }
    }

    #[test]
    fn blend_point_masses_reduce_to_lagrange() {
        // family phi(Y; beta): beta=0 -> disc, beta=1 -> hyperellipse
        let fam = |y: &[f64; 3], beta: f64| {
            if beta < 0.5 {
                y[0] * y[0] + y[1] * y[1]
            } else {
                y[0].powi(6) + y[1].powi(6) - 1.0 / 64.0
            }
        };
        let w0: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(|z: f64| 1.0 - z);
        let w1: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(|z: f64| z);
        let blend = CellMenu::continuous_blend(
            "demo",
            2,
            fam,
            (0.0, 1.0),
            BlendKernel::PointMasses(vec![(0.0, w0), (1.0, w1)]),
            1,
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        )
        .unwrap();
        let reference = disc_hyperellipse_with(8, 64);
        for y in [[0.2, 0.1, 0.0], [-0.4, 0.33, 0.0]] {
            assert!(
                (blend.cell_indicator(&y, 0.0) - reference.cell_indicator(&y, 0.0)).abs() < 1e-15
            );
            let z = 0.37;
            assert!(
                (blend.cell_indicator(&y, z) - reference.cell_indicator(&y, z)).abs() < 1e-15
            );
        }
    }

    #[test]
    fn blend_uniform_kernel_of_constant_family() {
        let fam = |y: &[f64; 3], _beta: f64| 0.25 - y[0] * y[0] - y[1] * y[1];
        let kern: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> = Arc::new(|_, _| 1.0);
        let blend = CellMenu::continuous_blend(
            "uniform",
            2,
            fam,
            (0.0, 1.0),
            BlendKernel::Continuous(kern),
            64,
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        )
        .unwrap();
        let y = [0.3, -0.2, 0.0];
        let expect = 0.25 - 0.09 - 0.04;
        assert!((blend.blend_indicator(&y, 0.5, 64).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn blend_quadrature_refinement_converges() {
        // family and kernel are low-degree trigonometric polynomials in
        // beta over the full period, which the midpoint rule integrates
        // essentially exactly once the knot count exceeds the degree
        use std::f64::consts::TAU;
        let fam = |y: &[f64; 3], beta: f64| {
            0.3 - (y[0] * y[0] + y[1] * y[1]) + 0.1 * (TAU * beta).cos()
        };
        let kern: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> =
            Arc::new(|z: f64, beta: f64| 1.0 + (TAU * (beta - z)).cos());
        let blend = CellMenu::continuous_blend(
            "trig",
            2,
            fam,
            (0.0, 1.0),
            BlendKernel::Continuous(kern),
            64,
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        )
        .unwrap();
        let y = [0.21, 0.13, 0.0];
        let v64 = blend.blend_indicator(&y, 0.4, 64).unwrap();
        let v128 = blend.blend_indicator(&y, 0.4, 128).unwrap();
        assert!((v64 - v128).abs() < 1e-6, "quadrature drift {}", v64 - v128);
    }

    #[test]
    fn blend_rejects_non_finite_kernel() {
        let fam = |_: &[f64; 3], _: f64| 1.0;
        let kern: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> = Arc::new(|_, _| f64::NAN);
        let blend = CellMenu::continuous_blend(
            "bad",
            2,
            fam,
            (0.0, 1.0),
            BlendKernel::Continuous(kern),
            8,
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        )
        .unwrap();
        assert!(blend.blend_indicator(&[0.0; 3], 0.5, 8).is_err());
    }

    #[test]
    fn menu_construction_errors() {
        // duplicate knots
        let r = CellMenu::seminal_lagrange(
            "dup",
            vec![disc_phi1(), disc_phi2()],
            vec![0.5, 0.5],
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        );
        assert!(r.is_err());
        // knot outside range
        let r = CellMenu::seminal_lagrange(
            "out",
            vec![disc_phi1(), disc_phi2()],
            vec![0.0, 2.0],
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        );
        assert!(r.is_err());
        // count mismatch
        let r = CellMenu::seminal_lagrange(
            "mismatch",
            vec![disc_phi1()],
            vec![0.0, 1.0],
            (0.0, 1.0),
            VolumeLaw::Analytic { g: Arc::new(|_| 0.5), dg: Arc::new(|_| 0.0) },
        );
        assert!(r.is_err());
    }

    #[test]
    fn periodicity_via_wrap() {
        let m = x_cell();
        // dyadic points shift exactly under +-1, so the identity is exact
        for p in [[0.125, -0.375], [0.5, 0.25], [-0.375, 0.0625]] {
            let a = m.cell_indicator(&[wrap_unit(p[0]), wrap_unit(p[1]), 0.0], 0.1);
            let b = m.cell_indicator(&[wrap_unit(p[0] + 1.0), wrap_unit(p[1] - 2.0), 0.0], 0.1);
            assert_eq!(a, b);
        }
        // general points agree to rounding
        for p in [[0.13, -0.41], [0.77, 0.31]] {
            let a = m.cell_indicator(&[wrap_unit(p[0]), wrap_unit(p[1]), 0.0], 0.1);
            let b = m.cell_indicator(&[wrap_unit(p[0] + 1.0), wrap_unit(p[1] - 2.0), 0.0], 0.1);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn x_cell_volume_examples() {
        let m = x_cell();
        assert!((m.volume_fraction_of_level(0.0, 2048) - 1.0).abs() <= 1e-3);
        assert!((m.volume_fraction_of_level(0.25, 2048) - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn disc_volume_at_full_hole() {
        let m = disc_hyperellipse_with(8, 64);
        let g1 = m.volume_fraction_of_level(1.0, 2048);
        assert!(
            (g1 - 0.038).abs() <= 0.002,
            "hyperellipse endpoint fraction {g1}"
        );
    }

    #[test]
    fn x_cell_tabulated_matches_analytic() {
        let m = x_cell();
        let (law, report) = m.tabulate_volume_law(33, 2048);
        assert_eq!(report.nonmonotone_pairs, 0);
        let mut max_err: f64 = 0.0;
        for i in 0..=64 {
            let z = m.zeta_range.1 * i as f64 / 64.0;
            let exact = 1.0 - 8.0 * z * z;
            max_err = max_err.max((law.fraction(z) - exact).abs());
        }
        assert!(max_err < 2e-3, "max error {max_err}");
        // endpoint: the diagonal line of pixels is all that remains
        assert!(law.fraction(m.zeta_range.1) <= 1e-3);
    }

    #[test]
    fn disc_tabulated_matches_pixel_oracle() {
        // The printed closed-form fit (1-zeta)^1.35 is inconsistent with
        // the seminal pair itself; the tabulated law must follow the
        // pixel-count oracle instead.
        let m = disc_hyperellipse_with(17, 512);
        let oracle = m.volume_fraction_of_level(0.5, 2048);
        assert!((m.volume_law.fraction(0.5) - oracle).abs() < 0.01);
        // independent near-disc estimate: hole radius ~ sqrt(1/64) = 1/8
        let hole = std::f64::consts::PI / 64.0;
        assert!((oracle - (1.0 - hole)).abs() < 5e-3, "oracle {oracle}");
    }

    #[test]
    fn builtin_menus_have_monotone_volume() {
        for (menu, res) in [
            (x_cell(), 256usize),
            (disc_hyperellipse_with(9, 128), 256),
            (ring2d(), 256),
            (pillars3d_with(9, 48), 48),
            (drilled_cube_with(9, 48), 48),
        ] {
            let mut prev = f64::INFINITY;
            for i in 0..64 {
                let z = menu.zeta_range.0
                    + (menu.zeta_range.1 - menu.zeta_range.0) * i as f64 / 63.0;
                let g = menu.volume_fraction_of_level(z, res);
                assert!(
                    g <= prev + 1e-12,
                    "menu {} not monotone at zeta={z}: {g} > {prev}",
                    menu.name
                );
                assert!((0.0..=1.0).contains(&g));
                prev = g;
            }
        }
    }

    #[test]
    fn pixel_count_convergence() {
        for menu in [x_cell(), ring2d()] {
            for &z in &[0.05, 0.2] {
                let g1 = menu.volume_fraction_of_level(z, 256);
                let g2 = menu.volume_fraction_of_level(z, 512);
                assert!(
                    (g1 - g2).abs() < 4.0 / 256.0,
                    "menu {} at zeta {z}: {g1} vs {g2}",
                    menu.name
                );
            }
        }
    }

    #[test]
    fn ring_volume_law_is_exact() {
        let m = ring2d();
        for &z in &[0.0, 0.5, 1.0] {
            let pix = m.volume_fraction_of_level(z, 1024);
            let exact = m.volume_law.fraction(z);
            assert!((pix - exact).abs() < 3e-3, "zeta {z}: {pix} vs {exact}");
        }
    }

    #[test]
    fn expression_menu_roundtrip() {
        let m = seminal_from_expressions(
            "custom",
            2,
            &[
                "Y1^2 + Y2^2".to_string(),
                "Y1^6 + Y2^6 - 1/64".to_string(),
            ],
            vec![0.0, 1.0],
            (0.0, 1.0),
            8,
            128,
        )
        .unwrap();
        let reference = disc_hyperellipse_with(8, 128);
        for y in [[0.2, 0.1, 0.0], [0.47, -0.3, 0.0]] {
            for &z in &[0.0, 0.4, 1.0] {
                assert!(
                    (m.cell_indicator(&y, z) - reference.cell_indicator(&y, z)).abs() < 1e-12
                );
            }
        }
    }

    #[test]
    fn indicator_zeta_derivative_matches_fd() {
        for menu in [x_cell(), disc_hyperellipse_with(8, 64)] {
            let y = [0.21, -0.34, 0.0];
            let z0 = 0.5 * (menu.zeta_range.0 + menu.zeta_range.1);
            let h = 1e-6;
            let fd = (menu.cell_indicator(&y, z0 + h) - menu.cell_indicator(&y, z0 - h))
                / (2.0 * h);
            let an = menu.indicator_zeta_derivative(&y, z0);
            assert!((an - fd).abs() < 1e-6, "menu {}: {an} vs {fd}", menu.name);
        }
    }

    proptest::proptest! {
        #[test]
        fn lagrange_weights_sum_to_one(
            frac in 0.0f64..1.0,
            base in proptest::collection::vec(0.05f64..0.5, 2..6)
        ) {
            // knots built from positive gaps so they are distinct and
            // reasonably separated; zeta within the knot span (callers
            // clamp into the menu range)
            let mut knots = Vec::with_capacity(base.len());
            let mut acc = 0.0;
            for g in &base {
                acc += g;
                knots.push(acc);
            }
            let zeta = knots[0] + frac * (knots[knots.len() - 1] - knots[0]);
            let w = lagrange_coefficients(zeta, &knots);
            let sum: f64 = w.iter().sum();
            let scale = w.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12 * scale);
        }
    }
}
