//! Run configuration: sectioned key-value files (TOML), strictly
//! validated on load (unknown keys rejected, required keys enforced,
//! cross-field checks), with a canonical serialization and content hash
//! stamped into run logs.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elasticity::BaseMaterial;
use crate::macrofe::{Face, MacroProblem, Traction};
use crate::menu::{self, CellMenu};
use crate::optimizer::OptimizationConfig;
use crate::tdf::DomainBox;
use crate::{Error, Result};

fn default_one() -> f64 {
    1.0
}
fn default_poisson() -> f64 {
    0.3
}
fn default_ersatz() -> f64 {
    1e-6
}
fn default_budget() -> f64 {
    0.3
}
fn default_max_iters() -> usize {
    200
}
fn default_activation() -> usize {
    30
}
fn default_conv_tol() -> f64 {
    1e-5
}
fn default_true() -> bool {
    true
}
fn default_move_frac() -> f64 {
    0.5
}
fn default_law_samples() -> usize {
    33
}
fn default_law_resolution() -> usize {
    1024
}
fn default_gallery() -> usize {
    128
}
fn default_gallery_count() -> usize {
    5
}
fn default_seeds() -> usize {
    32
}
fn default_newton_tol() -> f64 {
    1e-10
}
fn default_delta() -> f64 {
    1.0
}
fn default_surface_extent() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TractionConfig {
    pub face: Face,
    pub direction: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dim: usize,
    pub origin: Vec<f64>,
    pub extents: Vec<f64>,
    pub mesh: Vec<usize>,
    pub zones: Vec<usize>,
    pub fixed_faces: Vec<Face>,
    #[serde(default)]
    pub tractions: Vec<TractionConfig>,
    #[serde(default = "default_one")]
    pub youngs: f64,
    #[serde(default = "default_poisson")]
    pub poisson: f64,
    #[serde(default = "default_ersatz")]
    pub ersatz: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MenuConfig {
    /// Built-in menu name, or `expressions` for user-defined seminal
    /// functions.
    pub name: String,
    #[serde(default)]
    pub expressions: Vec<String>,
    #[serde(default)]
    pub knots: Vec<f64>,
    #[serde(default)]
    pub zeta_min: Option<f64>,
    #[serde(default)]
    pub zeta_max: Option<f64>,
    #[serde(default = "default_law_samples")]
    pub law_samples: usize,
    #[serde(default = "default_law_resolution")]
    pub law_resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_budget")]
    pub budget: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_activation")]
    pub zeta_activation: usize,
    #[serde(default = "default_conv_tol")]
    pub conv_tol: f64,
    pub cell_resolution: usize,
    #[serde(default = "default_true")]
    pub enable_map: bool,
    #[serde(default = "default_true")]
    pub enable_zeta: bool,
    #[serde(default)]
    pub freeze_out_of_plane: bool,
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_move_frac")]
    pub move_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    #[serde(default)]
    pub raster: Vec<usize>,
    #[serde(default = "default_gallery")]
    pub gallery_resolution: usize,
    #[serde(default = "default_gallery_count")]
    pub gallery_count: usize,
    #[serde(default = "default_law_samples")]
    pub law_samples: usize,
    #[serde(default = "default_law_resolution")]
    pub law_resolution: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Fine-scale raster resolution per axis.
    pub raster: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecorateConfig {
    pub surface: String,
    #[serde(default = "default_surface_extent")]
    pub surface_extent: f64,
    pub h: f64,
    pub h0: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub voxel_origin: Vec<f64>,
    pub voxel_extents: Vec<f64>,
    pub voxel_resolution: Vec<usize>,
    #[serde(default)]
    pub stl: bool,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    /// Constant level value over the shell.
    #[serde(default)]
    pub zeta: f64,
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Option<ProblemConfig>,
    pub menu: Option<MenuConfig>,
    pub optimizer: Option<OptimizerConfig>,
    pub output: OutputConfig,
    pub validate: Option<ValidateConfig>,
    pub decorate: Option<DecorateConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialization (used for the config hash and round-trip
    /// checks).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Content hash stamped into logs.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    fn validate_fields(&self) -> Result<()> {
        if let Some(p) = &self.problem {
            if p.dim != 2 && p.dim != 3 {
                return Err(Error::Config(format!("dimension must be 2 or 3, got {}", p.dim)));
            }
            for (name, v) in [("origin", &p.origin), ("extents", &p.extents)] {
                if v.len() != p.dim {
                    return Err(Error::Config(format!(
                        "problem.{name} must have {} entries, got {}",
                        p.dim,
                        v.len()
                    )));
                }
            }
            if p.mesh.len() != p.dim || p.zones.len() != p.dim {
                return Err(Error::Config(format!(
                    "problem.mesh and problem.zones must have {} entries",
                    p.dim
                )));
            }
            if p.extents.iter().any(|&e| !(e > 0.0)) {
                return Err(Error::Config("problem.extents must be positive".into()));
            }
            if p.mesh.iter().any(|&m| m == 0) || p.zones.iter().any(|&z| z == 0) {
                return Err(Error::Config("mesh and zone counts must be positive".into()));
            }
            for (m, z) in p.mesh.iter().zip(&p.zones) {
                if m % z != 0 {
                    return Err(Error::Config(format!(
                        "zone count {z} does not divide mesh resolution {m}"
                    )));
                }
            }
            if p.fixed_faces.is_empty() {
                return Err(Error::Config("at least one fixed face is required".into()));
            }
            if !(p.h > 0.0) {
                return Err(Error::Config("problem.h must be positive".into()));
            }
            BaseMaterial::new(p.youngs, p.poisson, p.dim, p.ersatz)?;
            for t in &p.tractions {
                if t.direction >= p.dim {
                    return Err(Error::Config(format!(
                        "traction direction {} out of range for dimension {}",
                        t.direction, p.dim
                    )));
                }
                if !t.magnitude.is_finite() {
                    return Err(Error::Config("traction magnitude must be finite".into()));
                }
            }
        }
        if let Some(m) = &self.menu {
            if m.name == "expressions" {
                if m.expressions.is_empty() {
                    return Err(Error::Config(
                        "menu.expressions must be provided for expression menus".into(),
                    ));
                }
                if m.expressions.len() >= 2 && m.knots.len() != m.expressions.len() {
                    return Err(Error::Config(format!(
                        "{} expressions need {} knots, got {}",
                        m.expressions.len(),
                        m.expressions.len(),
                        m.knots.len()
                    )));
                }
            } else if menu::builtin(&m.name).is_none() {
                return Err(Error::Config(format!("unknown menu `{}`", m.name)));
            }
        }
        if let Some(o) = &self.optimizer {
            if !(o.budget > 0.0 && o.budget <= 1.0) {
                return Err(Error::Config(format!(
                    "volume budget must be in (0, 1], got {}",
                    o.budget
                )));
            }
            if !(o.conv_tol > 0.0) {
                return Err(Error::Config("convergence tolerance must be positive".into()));
            }
            if o.cell_resolution < 4 {
                return Err(Error::Config("cell resolution must be at least 4".into()));
            }
        }
        if let Some(d) = &self.decorate {
            if d.voxel_origin.len() != 3
                || d.voxel_extents.len() != 3
                || d.voxel_resolution.len() != 3
            {
                return Err(Error::Config("decorate voxel box must be three-dimensional".into()));
            }
            if crate::manifold::builtin_surface(&d.surface, d.surface_extent).is_none() {
                return Err(Error::Config(format!("unknown surface `{}`", d.surface)));
            }
            if !(d.h > 0.0 && d.h0 > 0.0 && d.delta > 0.0) {
                return Err(Error::Config("decorate h, h0 and delta must be positive".into()));
            }
        }
        Ok(())
    }

    /// Build the cell menu. Expression menus honor the configured
    /// dimension; built-ins carry their own.
    pub fn build_menu(&self, dim: usize) -> Result<Arc<CellMenu>> {
        let m = self
            .menu
            .as_ref()
            .ok_or_else(|| Error::Config("missing [menu] section".into()))?;
        let built = if m.name == "expressions" {
            if m.expressions.len() == 1 {
                let (zlo, zhi) = (
                    m.zeta_min
                        .ok_or_else(|| Error::Config("zeta_min required".into()))?,
                    m.zeta_max
                        .ok_or_else(|| Error::Config("zeta_max required".into()))?,
                );
                menu::single_from_expression(
                    "custom",
                    dim,
                    &m.expressions[0],
                    (zlo, zhi),
                    m.law_samples,
                    m.law_resolution,
                )?
            } else {
                let zlo = m.zeta_min.unwrap_or(m.knots[0]);
                let zhi = m.zeta_max.unwrap_or(*m.knots.last().expect("validated"));
                menu::seminal_from_expressions(
                    "custom",
                    dim,
                    &m.expressions,
                    m.knots.clone(),
                    (zlo, zhi),
                    m.law_samples,
                    m.law_resolution,
                )?
            }
        } else {
            menu::builtin(&m.name).expect("validated at load")
        };
        if built.dim != dim {
            return Err(Error::Config(format!(
                "menu `{}` is {}-dimensional but the problem is {}-dimensional",
                m.name, built.dim, dim
            )));
        }
        Ok(Arc::new(built))
    }

    pub fn build_problem(&self) -> Result<MacroProblem> {
        let p = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?;
        let mut origin = [0.0; 3];
        let mut extents = [0.0; 3];
        let mut nelem = [1usize; 3];
        for a in 0..p.dim {
            origin[a] = p.origin[a];
            extents[a] = p.extents[a];
            nelem[a] = p.mesh[a];
        }
        Ok(MacroProblem {
            dim: p.dim,
            domain: DomainBox { origin, extents },
            nelem,
            fixed_faces: p.fixed_faces.clone(),
            tractions: p
                .tractions
                .iter()
                .map(|t| Traction { face: t.face, direction: t.direction, magnitude: t.magnitude })
                .collect(),
            body_force: [0.0; 3],
        })
    }

    pub fn build_material(&self) -> Result<BaseMaterial> {
        let p = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?;
        BaseMaterial::new(p.youngs, p.poisson, p.dim, p.ersatz)
    }

    pub fn zone_counts(&self) -> Result<[usize; 3]> {
        let p = self
            .problem
            .as_ref()
            .ok_or_else(|| Error::Config("missing [problem] section".into()))?;
        let mut z = [1usize; 3];
        for a in 0..p.dim {
            z[a] = p.zones[a];
        }
        Ok(z)
    }

    pub fn build_optimizer(&self) -> Result<OptimizationConfig> {
        let o = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Config("missing [optimizer] section".into()))?;
        Ok(OptimizationConfig {
            max_iters: o.max_iters,
            volume_budget: o.budget,
            zeta_activation_iter: o.zeta_activation,
            conv_tol: o.conv_tol,
            cell_resolution: o.cell_resolution,
            enable_map: o.enable_map,
            enable_zeta: o.enable_zeta,
            freeze_out_of_plane: o.freeze_out_of_plane,
            checkpoint_every: o.checkpoint_every,
            seed: o.seed,
            detj_floor: 0.05,
            move_frac: o.move_frac,
        })
    }
}
