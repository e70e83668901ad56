//! Isosurface extraction on voxel value grids and binary STL export.
//!
//! The 256-case cube table is generated once at startup: for every
//! corner-sign configuration the isoline segments are built per face
//! (marching-squares with a fixed "separate solid corners" rule on
//! ambiguous faces, solid kept to the left viewed from outside) and
//! chained into closed loops. The same face rule on both sides of a
//! shared face keeps the extracted mesh watertight across cubes.

use std::io::Write;
use std::sync::LazyLock;

use crate::tdf::DomainBox;
use crate::Result;

/// Corner index bit layout: bit 0 = x, bit 1 = y, bit 2 = z.
fn corner_pos(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

/// The 12 cube edges as corner pairs.
const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

fn edge_index(a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    EDGES
        .iter()
        .position(|&(p, q)| (p, q) == (a, b))
        .expect("valid cube edge")
}

/// Faces: 4 corners in CCW order viewed from outside the cube.
fn faces() -> [[usize; 4]; 6] {
    let mut out = [[0usize; 4]; 6];
    let mut f = 0;
    for axis in 0..3 {
        let (b, c) = match axis {
            0 => (1, 2),
            1 => (2, 0),
            _ => (0, 1),
        };
        for side in 0..2 {
            let corner = |vb: usize, vc: usize| -> usize {
                let mut bits = [0usize; 3];
                bits[axis] = side;
                bits[b] = vb;
                bits[c] = vc;
                bits[0] | (bits[1] << 1) | (bits[2] << 2)
            };
            out[f] = if side == 1 {
                [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]
            } else {
                [corner(0, 0), corner(0, 1), corner(1, 1), corner(1, 0)]
            };
            f += 1;
        }
    }
    out
}

/// Loops of edge indices per corner configuration.
static CUBE_TABLE: LazyLock<Vec<Vec<Vec<u8>>>> = LazyLock::new(|| {
    let faces = faces();
    (0..256usize)
        .map(|config| {
            let solid = |c: usize| config >> c & 1 == 1;
            // directed segments: from-edge -> to-edge
            let mut seg_to = [usize::MAX; 12];
            for face in &faces {
                // crossings in CCW order: (boundary slot, edge, is_from)
                let mut crossings = Vec::new();
                for k in 0..4 {
                    let (a, b) = (face[k], face[(k + 1) % 4]);
                    if solid(a) != solid(b) {
                        crossings.push((edge_index(a, b), solid(a)));
                    }
                }
                match crossings.len() {
                    0 => {}
                    2 => {
                        let (e0, from0) = crossings[0];
                        let (e1, _) = crossings[1];
                        if from0 {
                            seg_to[e0] = e1;
                        } else {
                            seg_to[e1] = e0;
                        }
                    }
                    4 => {
                        // pair every `from` with the `to` immediately
                        // before it: cuts off each solid corner separately
                        for k in 0..4 {
                            let (e, is_from) = crossings[k];
                            if is_from {
                                let (prev, _) = crossings[(k + 3) % 4];
                                seg_to[e] = prev;
                            }
                        }
                    }
                    _ => unreachable!("faces have 0, 2 or 4 crossings"),
                }
            }
            // chain into loops
            let mut loops = Vec::new();
            let mut visited = [false; 12];
            for start in 0..12 {
                if seg_to[start] == usize::MAX || visited[start] {
                    continue;
                }
                let mut walk = Vec::new();
                let mut cur = start;
                loop {
                    visited[cur] = true;
                    walk.push(cur as u8);
                    cur = seg_to[cur];
                    if cur == start {
                        break;
                    }
                }
                loops.push(walk);
            }
            loops
        })
        .collect()
});

/// A triangle mesh in raw soup form.
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    /// Flat triangle list, 3 vertices each.
    pub triangles: Vec<[[f64; 3]; 3]>,
}

impl TriMesh {
    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let u = sub(t[1], t[0]);
                let v = sub(t[2], t[0]);
                0.5 * norm(cross(u, v))
            })
            .sum()
    }

    /// Binary STL.
    pub fn write_stl(&self, w: &mut dyn Write) -> Result<()> {
        let mut header = [0u8; 80];
        header[..14].copy_from_slice(b"igm isosurface");
        w.write_all(&header)?;
        w.write_all(&(self.triangles.len() as u32).to_le_bytes())?;
        for t in &self.triangles {
            let n = {
                let u = sub(t[1], t[0]);
                let v = sub(t[2], t[0]);
                let c = cross(u, v);
                let len = norm(c).max(f64::MIN_POSITIVE);
                [c[0] / len, c[1] / len, c[2] / len]
            };
            for val in n {
                w.write_all(&(val as f32).to_le_bytes())?;
            }
            for vtx in t {
                for val in vtx {
                    w.write_all(&(*val as f32).to_le_bytes())?;
                }
            }
            w.write_all(&0u16.to_le_bytes())?;
        }
        Ok(())
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Extract the zero isosurface of values sampled on a regular grid
/// (`values[(k * ny + j) * nx + i]`, nodes at voxel centers of `domain`
/// with resolution `res`). Non-negative values are solid; triangles are
/// oriented with outward (solid-to-void) normals.
pub fn extract_isosurface(
    values: &[f64],
    res: [usize; 3],
    domain: DomainBox,
) -> TriMesh {
    let (nx, ny, nz) = (res[0], res[1], res[2]);
    assert_eq!(values.len(), nx * ny * nz);
    let spacing = [
        domain.extents[0] / nx as f64,
        domain.extents[1] / ny as f64,
        domain.extents[2] / nz as f64,
    ];
    let node = |i: usize, j: usize, k: usize| -> [f64; 3] {
        [
            domain.origin[0] + (i as f64 + 0.5) * spacing[0],
            domain.origin[1] + (j as f64 + 0.5) * spacing[1],
            domain.origin[2] + (k as f64 + 0.5) * spacing[2],
        ]
    };
    let val = |i: usize, j: usize, k: usize| values[(k * ny + j) * nx + i];
    let mut mesh = TriMesh::default();
    for k in 0..nz.saturating_sub(1) {
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx.saturating_sub(1) {
                let mut config = 0usize;
                let mut vals = [0.0f64; 8];
                let mut pos = [[0.0f64; 3]; 8];
                for c in 0..8 {
                    let p = corner_pos(c);
                    let (ci, cj, ck) = (i + p[0], j + p[1], k + p[2]);
                    vals[c] = val(ci, cj, ck);
                    pos[c] = node(ci, cj, ck);
                    if vals[c] >= 0.0 {
                        config |= 1 << c;
                    }
                }
                if config == 0 || config == 255 {
                    continue;
                }
                for walk in &CUBE_TABLE[config] {
                    let vertices: Vec<[f64; 3]> = walk
                        .iter()
                        .map(|&e| {
                            let (a, b) = EDGES[e as usize];
                            let (va, vb) = (vals[a], vals[b]);
                            let t = va / (va - vb);
                            let t = t.clamp(0.0, 1.0);
                            [
                                pos[a][0] + t * (pos[b][0] - pos[a][0]),
                                pos[a][1] + t * (pos[b][1] - pos[a][1]),
                                pos[a][2] + t * (pos[b][2] - pos[a][2]),
                            ]
                        })
                        .collect();
                    for t in 1..vertices.len() - 1 {
                        // fan order reversed so normals point out of the solid
                        mesh.triangles
                            .push([vertices[0], vertices[t + 1], vertices[t]]);
                    }
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn sphere_grid(n: usize, r: f64) -> (Vec<f64>, DomainBox) {
        let domain = DomainBox::new_3d([-1.0, -1.0, -1.0], [2.0, 2.0, 2.0]);
        let mut values = Vec::with_capacity(n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let x = -1.0 + (i as f64 + 0.5) * 2.0 / n as f64;
                    let y = -1.0 + (j as f64 + 0.5) * 2.0 / n as f64;
                    let z = -1.0 + (k as f64 + 0.5) * 2.0 / n as f64;
                    values.push(r - (x * x + y * y + z * z).sqrt());
                }
            }
        }
        (values, domain)
    }

    #[test]
    fn table_loops_are_consistent() {
        // every configuration's loops visit each crossed edge exactly once
        for config in 0..256usize {
            let loops = &CUBE_TABLE[config];
            let mut seen = [0usize; 12];
            for walk in loops {
                assert!(walk.len() >= 3, "config {config} has a degenerate loop");
                for &e in walk {
                    seen[e as usize] += 1;
                }
            }
            for (e, &(a, b)) in EDGES.iter().enumerate() {
                let crossed = (config >> a & 1) != (config >> b & 1);
                assert_eq!(
                    seen[e],
                    crossed as usize,
                    "config {config} edge {e} visited {} times",
                    seen[e]
                );
            }
        }
    }

    #[test]
    fn sphere_mesh_quality() {
        let n = 48;
        let r = 0.7;
        let (values, domain) = sphere_grid(n, r);
        let mesh = extract_isosurface(&values, [n, n, n], domain);
        assert!(!mesh.triangles.is_empty());
        // vertices near the sphere
        for t in &mesh.triangles {
            for v in t {
                let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                assert!((d - r).abs() < 0.08, "vertex at radius {d}");
            }
        }
        // area close to the analytic value
        let area = mesh.area();
        let exact = 4.0 * std::f64::consts::PI * r * r;
        assert!(
            (area - exact).abs() / exact < 0.05,
            "area {area} vs {exact}"
        );
        // outward orientation: normals point away from the center
        let mut bad = 0;
        for t in &mesh.triangles {
            let c = [
                (t[0][0] + t[1][0] + t[2][0]) / 3.0,
                (t[0][1] + t[1][1] + t[2][1]) / 3.0,
                (t[0][2] + t[1][2] + t[2][2]) / 3.0,
            ];
            let nvec = cross(sub(t[1], t[0]), sub(t[2], t[0]));
            let dot = c[0] * nvec[0] + c[1] * nvec[1] + c[2] * nvec[2];
            if dot <= 0.0 {
                bad += 1;
            }
        }
        assert_eq!(bad, 0, "{bad} of {} triangles point inward", mesh.triangles.len());
    }

    #[test]
    fn sphere_mesh_is_watertight() {
        let n = 24;
        let (values, domain) = sphere_grid(n, 0.6);
        let mesh = extract_isosurface(&values, [n, n, n], domain);
        // every undirected edge (by position bits) borders exactly two
        // triangles
        let key = |p: [f64; 3]| -> [u64; 3] { [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()] };
        let mut counts: HashMap<([u64; 3], [u64; 3]), usize> = HashMap::new();
        for t in &mesh.triangles {
            for e in 0..3 {
                let (a, b) = (key(t[e]), key(t[(e + 1) % 3]));
                let k = if a <= b { (a, b) } else { (b, a) };
                *counts.entry(k).or_insert(0) += 1;
            }
        }
        for (k, c) in counts {
            assert_eq!(c, 2, "edge {k:?} has {c} incident triangles");
        }
    }

    #[test]
    fn stl_bytes_shape() {
        let (values, domain) = sphere_grid(12, 0.5);
        let mesh = extract_isosurface(&values, [12, 12, 12], domain);
        let mut buf = Vec::new();
        mesh.write_stl(&mut buf).unwrap();
        assert_eq!(buf.len(), 84 + 50 * mesh.triangles.len());
        let count = u32::from_le_bytes(buf[80..84].try_into().unwrap());
        assert_eq!(count as usize, mesh.triangles.len());
    }
}
