//! The composed topology description function: menu + mapping + level
//! indicator, with rasterization and global volume accounting.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::mapping::{LevelIndicator, PolynomialMap};
use crate::menu::{wrap_unit, CellMenu, VolumeLaw};
use crate::Result;

/// Axis-aligned box: origin and extents per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainBox {
    pub origin: [f64; 3],
    pub extents: [f64; 3],
}

impl DomainBox {
    pub fn new_2d(origin: [f64; 2], extents: [f64; 2]) -> Self {
        Self {
            origin: [origin[0], origin[1], 0.0],
            extents: [extents[0], extents[1], 0.0],
        }
    }

    pub fn new_3d(origin: [f64; 3], extents: [f64; 3]) -> Self {
        Self { origin, extents }
    }
}

/// The global TDF `chi(x) = indicator(wrap(y(x)/h), clamp(zeta(x)))`.
#[derive(Debug, Clone)]
pub struct TdfField {
    pub menu: Arc<CellMenu>,
    pub map: PolynomialMap,
    pub indicator: LevelIndicator,
    /// Microscale length; cells in the actual space have size ~`h` when
    /// the Jacobian is near identity.
    pub h: f64,
}

impl TdfField {
    pub fn new(menu: Arc<CellMenu>, map: PolynomialMap, indicator: LevelIndicator, h: f64) -> Self {
        assert!(h > 0.0, "microscale length must be positive");
        Self { menu, map, indicator, h }
    }

    /// Evaluate the TDF at a macroscopic point. Non-negative is solid.
    pub fn evaluate(&self, x: &[f64; 3]) -> f64 {
        let y = self.map.eval(x);
        let mut ybar = [0.0; 3];
        for i in 0..self.menu.dim {
            ybar[i] = wrap_unit(y[i] / self.h);
        }
        let (zeta, _) = self.indicator.eval(x, self.menu.zeta_range);
        self.menu.cell_indicator(&ybar, zeta)
    }
}

/// Rasterized occupancy over a box.
#[derive(Debug, Clone)]
pub struct RasterGrid {
    pub dim: usize,
    pub domain: DomainBox,
    /// Pixels per axis (third entry 1 in 2D).
    pub resolution: [usize; 3],
    /// Occupancy at pixel centers, x fastest, then y, then z.
    pub solid: Vec<bool>,
}

impl RasterGrid {
    pub fn len(&self) -> usize {
        self.resolution[0] * self.resolution[1] * self.resolution[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution[1] + j) * self.resolution[0] + i
    }

    /// Pixel sizes per axis.
    pub fn spacing(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for a in 0..self.dim {
            s[a] = self.domain.extents[a] / self.resolution[a] as f64;
        }
        s
    }

    /// Pixel center coordinate.
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        let s = self.spacing();
        let mut c = [0.0; 3];
        let idx = [i, j, k];
        for a in 0..self.dim {
            c[a] = self.domain.origin[a] + (idx[a] as f64 + 0.5) * s[a];
        }
        c
    }

    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.len() as f64
    }

    /// Binary PGM (P5), 2D only: solid pixels black, void white, row 0 at
    /// the top of the image (matching plot orientation with y up).
    pub fn write_pgm(&self, w: &mut dyn Write) -> Result<()> {
        assert_eq!(self.dim, 2, "PGM export is two-dimensional");
        let (nx, ny) = (self.resolution[0], self.resolution[1]);
        write!(w, "P5\n{nx} {ny}\n255\n")?;
        let mut row = vec![0u8; nx];
        for j in (0..ny).rev() {
            for i in 0..nx {
                row[i] = if self.solid[self.index(i, j, 0)] { 0 } else { 255 };
            }
            w.write_all(&row)?;
        }
        Ok(())
    }

    /// Little-endian binary voxel format: 8-byte magic `IGMVOXEL`,
    /// u32 version, u32 reserved, three u32 dims, f64 voxel size, then
    /// bit-packed occupancy (x fastest; LSB first within each byte).
    pub fn write_voxel(&self, w: &mut dyn Write) -> Result<()> {
        w.write_all(b"IGMVOXEL")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for a in 0..3 {
            w.write_all(&(self.resolution[a] as u32).to_le_bytes())?;
        }
        let voxel = self.spacing()[0];
        w.write_all(&voxel.to_le_bytes())?;
        let mut byte = 0u8;
        let mut nbits = 0u8;
        for &s in &self.solid {
            if s {
                byte |= 1 << nbits;
            }
            nbits += 1;
            if nbits == 8 {
                w.write_all(&[byte])?;
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            w.write_all(&[byte])?;
        }
        Ok(())
    }
}

/// Read back the binary voxel format.
pub fn read_voxel(data: &[u8]) -> Result<RasterGrid> {
    use crate::Error;
    if data.len() < 36 || &data[..8] != b"IGMVOXEL" {
        return Err(Error::Geometry("not an IGMVOXEL file".into()));
    }
    let dims: Vec<usize> = (0..3)
        .map(|a| {
            let off = 16 + 4 * a;
            u32::from_le_bytes(data[off..off + 4].try_into().expect("sized")) as usize
        })
        .collect();
    let voxel = f64::from_le_bytes(data[28..36].try_into().expect("sized"));
    let n = dims[0] * dims[1] * dims[2];
    let mut solid = Vec::with_capacity(n);
    for bit in 0..n {
        let byte = data
            .get(36 + bit / 8)
            .ok_or_else(|| Error::Geometry("voxel payload truncated".into()))?;
        solid.push(byte >> (bit % 8) & 1 == 1);
    }
    let dim = if dims[2] > 1 { 3 } else { 2 };
    Ok(RasterGrid {
        dim,
        domain: DomainBox {
            origin: [0.0; 3],
            extents: [
                voxel * dims[0] as f64,
                voxel * dims[1] as f64,
                voxel * dims[2] as f64,
            ],
        },
        resolution: [dims[0], dims[1], dims[2]],
        solid,
    })
}

/// Rasterize a field over a box: `chi` evaluated at pixel centers.
pub fn rasterize(field: &TdfField, domain: DomainBox, resolution: [usize; 3]) -> RasterGrid {
    let dim = field.menu.dim;
    for a in 0..dim {
        assert!(domain.extents[a] > 0.0, "box extents must be positive");
        assert!(resolution[a] >= 1);
    }
    let res = [
        resolution[0],
        resolution[1],
        if dim == 3 { resolution[2] } else { 1 },
    ];
    let mut grid = RasterGrid {
        dim,
        domain,
        resolution: res,
        solid: vec![false; res[0] * res[1] * res[2]],
    };
    let nx = res[0];
    let plane = res[0] * res[1];
    let spacing = grid.spacing();
    let solid: Vec<bool> = (0..res[2] * res[1])
        .into_par_iter()
        .flat_map_iter(|jk| {
            let k = jk / res[1];
            let j = jk % res[1];
            let mut rowvals = Vec::with_capacity(nx);
            for i in 0..nx {
                let mut x = [0.0; 3];
                let idx = [i, j, k];
                for a in 0..dim {
                    x[a] = domain.origin[a] + (idx[a] as f64 + 0.5) * spacing[a];
                }
                rowvals.push(field.evaluate(&x) >= 0.0);
            }
            rowvals
        })
        .collect();
    debug_assert_eq!(solid.len(), plane * res[2]);
    grid.solid = solid;
    grid
}

/// Overall volume fraction by the macroscopic quadrature of the volume
/// law: midpoint rule with one point per element of an `nelem` grid. The
/// result depends only on the level indicator, not on the map.
pub fn global_volume_fraction(
    field: &TdfField,
    domain: DomainBox,
    law: &VolumeLaw,
    nelem: [usize; 3],
) -> f64 {
    let dim = field.menu.dim;
    let n3 = if dim == 3 { nelem[2] } else { 1 };
    let total = nelem[0] * nelem[1] * n3;
    let sum: f64 = (0..nelem[1] * n3)
        .into_par_iter()
        .map(|jk| {
            let k = jk / nelem[1];
            let j = jk % nelem[1];
            let mut acc = 0.0;
            for i in 0..nelem[0] {
                let mut x = [0.0; 3];
                let idx = [i, j, k];
                for a in 0..dim {
                    x[a] = domain.origin[a]
                        + (idx[a] as f64 + 0.5) * domain.extents[a] / nelem[a] as f64;
                }
                let (z, _) = field.indicator.eval(&x, field.menu.zeta_range);
                acc += law.fraction(z);
            }
            acc
        })
        .sum();
    sum / total as f64
}

/// CSV export of `chi` samples (`x,y[,z],chi`) on a regular grid.
pub fn write_chi_csv(
    field: &TdfField,
    domain: DomainBox,
    resolution: [usize; 3],
    w: &mut dyn Write,
) -> Result<()> {
    let dim = field.menu.dim;
    if dim == 2 {
        writeln!(w, "x,y,chi")?;
    } else {
        writeln!(w, "x,y,z,chi")?;
    }
    let res = [
        resolution[0],
        resolution[1],
        if dim == 3 { resolution[2] } else { 1 },
    ];
    for k in 0..res[2] {
        for j in 0..res[1] {
            for i in 0..res[0] {
                let mut x = [0.0; 3];
                let idx = [i, j, k];
                for a in 0..dim {
                    x[a] = domain.origin[a]
                        + (idx[a] as f64 + 0.5) * domain.extents[a] / res[a] as f64;
                }
                let chi = field.evaluate(&x);
                if dim == 2 {
                    writeln!(w, "{},{},{}", x[0], x[1], chi)?;
                } else {
                    writeln!(w, "{},{},{},{}", x[0], x[1], x[2], chi)?;
                }
            }
        }
    }
    Ok(())
}
