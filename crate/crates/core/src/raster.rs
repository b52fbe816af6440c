//! Pinhole projection and a deterministic software silhouette rasterizer.
//!
//! Rendering is silhouette-only (binary masks, no depth buffer): the reward
//! stack consumes nothing but masks. Determinism is guaranteed by snapping
//! projected vertices to a 1/256-pixel integer grid and evaluating integer
//! edge functions at pixel centers with a top-left ownership rule for
//! boundary ties, so identical inputs give bit-identical masks on any
//! platform.
//!
//! Fill rule, exactly: pixel `(px, py)` samples at `(256*px + 128,
//! 256*py + 128)` in subpixel units. With vertices ordered so that
//! `orient2d(v0, v1, v2) > 0` (y grows downward), the pixel is covered when
//! every edge function `orient2d(a, b, s)` is `> 0`, or `== 0` on an edge
//! that is "top" (`a.y == b.y && b.x > a.x`) or "left" (`b.y < a.y`).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::Error;
use crate::pose::Pose;
use crate::Result;

/// Subpixel grid resolution used when snapping projected vertices.
pub const SUBPIXEL: i64 = 256;
/// Minimum camera-frame depth accepted by projection.
pub const MIN_DEPTH: f64 = 1e-6;

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64
            && self.width > 0
            && self.height > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid camera intrinsics: fx={} fy={} cx={} cy={} {}x{}",
                self.fx, self.fy, self.cx, self.cy, self.width, self.height
            )))
        }
    }
}

/// Triangle mesh in object frame (meters).
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[u32; 3]>,
    center: Vector3<f64>,
}

impl Mesh {
    /// Validates counts and indices; desk scenes are closed solids, so at
    /// least 4 vertices and 4 triangles are required.
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[u32; 3]>) -> Result<Mesh> {
        if vertices.len() < 4 {
            return Err(Error::Mesh(format!(
                "need at least 4 vertices, got {}",
                vertices.len()
            )));
        }
        if triangles.len() < 4 {
            return Err(Error::Mesh(format!(
                "need at least 4 triangles, got {}",
                triangles.len()
            )));
        }
        for (i, tri) in triangles.iter().enumerate() {
            for &idx in tri {
                if idx as usize >= vertices.len() {
                    return Err(Error::Mesh(format!(
                        "triangle {i} references vertex {idx} of {}",
                        vertices.len()
                    )));
                }
            }
        }
        let mut center = Vector3::zeros();
        for v in &vertices {
            center += v;
        }
        center /= vertices.len() as f64;
        Ok(Mesh {
            vertices,
            triangles,
            center,
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    /// Mean vertex, object frame.
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Translates all vertices so the mean vertex sits at the origin.
    pub fn recentered(mut self) -> Mesh {
        let c = self.center;
        for v in &mut self.vertices {
            *v -= c;
        }
        self.center = Vector3::zeros();
        self
    }

    /// Axis-aligned box with half-extents `(hx, hy, hz)`, 12 triangles.
    pub fn axis_box(hx: f64, hy: f64, hz: f64) -> Mesh {
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let verts = vec![
            v(-hx, -hy, -hz),
            v(hx, -hy, -hz),
            v(hx, hy, -hz),
            v(-hx, hy, -hz),
            v(-hx, -hy, hz),
            v(hx, -hy, hz),
            v(hx, hy, hz),
            v(-hx, hy, hz),
        ];
        let tris = vec![
            [0, 1, 2],
            [0, 2, 3],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [2, 3, 7],
            [2, 7, 6],
            [1, 2, 6],
            [1, 6, 5],
            [0, 3, 7],
            [0, 7, 4],
        ];
        Mesh::new(verts, tris).expect("box mesh is valid")
    }

    /// Box with one corner truncated by a triangular facet; convex and
    /// asymmetric, the default object for generated scenes. `cut` is the
    /// fraction (0, 1) of each adjacent edge removed at the `(+x, +y, +z)`
    /// corner. The result is recentered on its mean vertex.
    pub fn corner_cut_box(hx: f64, hy: f64, hz: f64, cut: f64) -> Mesh {
        assert!(cut > 0.0 && cut < 1.0, "cut fraction must be in (0, 1)");
        let v = |x: f64, y: f64, z: f64| Vector3::new(x, y, z);
        let cx = 2.0 * hx * cut;
        let cy = 2.0 * hy * cut;
        let cz = 2.0 * hz * cut;
        // 0..7 box corners except index 6 (+,+,+) which is replaced by
        // a (on +x+y edge), b (on +x+z edge), c (on +y+z edge).
        let verts = vec![
            v(-hx, -hy, -hz), // 0
            v(hx, -hy, -hz),  // 1
            v(hx, hy, -hz),   // 2
            v(-hx, hy, -hz),  // 3
            v(-hx, -hy, hz),  // 4
            v(hx, -hy, hz),   // 5
            v(-hx, hy, hz),   // 6 (was box corner 7)
            v(hx, hy, hz - cz), // 7 = a
            v(hx, hy - cy, hz), // 8 = b
            v(hx - cx, hy, hz), // 9 = c
        ];
        let tris = vec![
            // bottom z = -hz
            [0, 1, 2],
            [0, 2, 3],
            // top z = +hz: pentagon 4,5,8,9,6
            [4, 5, 8],
            [4, 8, 9],
            [4, 9, 6],
            // front y = -hy
            [0, 1, 5],
            [0, 5, 4],
            // right x = +hx: pentagon 1,2,7,8,5
            [1, 2, 7],
            [1, 7, 8],
            [1, 8, 5],
            // back y = +hy: pentagon 3,2,7,9,6
            [3, 2, 7],
            [3, 7, 9],
            [3, 9, 6],
            // left x = -hx
            [0, 3, 6],
            [0, 6, 4],
            // cut facet
            [7, 8, 9],
        ];
        Mesh::new(verts, tris).expect("corner-cut box is valid").recentered()
    }

    /// Parses the OBJ subset: `v x y z` and `f i j k` lines (1-based
    /// indices, triangles only); any other line type is ignored. Face
    /// tokens may carry `/...` suffixes, which are dropped.
    pub fn parse_obj(text: &str) -> Result<Mesh> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let n = lineno + 1;
            if let Some(rest) = line.strip_prefix("v ") {
                let nums: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| Error::Parse {
                            line: n,
                            msg: format!("bad vertex coordinate `{t}`"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if nums.len() != 3 {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("vertex line needs 3 coordinates, got {}", nums.len()),
                    });
                }
                vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
            } else if let Some(rest) = line.strip_prefix("f ") {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.len() != 3 {
                    return Err(Error::Parse {
                        line: n,
                        msg: format!("faces must be triangles, got {} indices", toks.len()),
                    });
                }
                let mut tri = [0u32; 3];
                for (slot, tok) in tri.iter_mut().zip(&toks) {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = head.parse().map_err(|_| Error::Parse {
                        line: n,
                        msg: format!("bad face index `{tok}`"),
                    })?;
                    if idx < 1 {
                        return Err(Error::Parse {
                            line: n,
                            msg: format!("face index {idx} must be >= 1"),
                        });
                    }
                    *slot = (idx - 1) as u32;
                }
                triangles.push(tri);
            }
        }
        Mesh::new(vertices, triangles)
    }

    pub fn load_obj(path: &Path) -> Result<Mesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Mesh::parse_obj(&text)
    }

    pub fn to_obj_string(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

/// Binary occupancy bitmap, row-major, with a cached set-pixel count.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    width: u32,
    height: u32,
    words: Vec<u64>,
    area: u32,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Mask {
        let bits = width as usize * height as usize;
        Mask {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
            area: 0,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Number of set pixels.
    pub fn area(&self) -> u32 {
        self.area
    }

    pub fn is_empty(&self) -> bool {
        self.area == 0
    }

    #[inline]
    fn bit_index(&self, u: u32, v: u32) -> usize {
        debug_assert!(u < self.width && v < self.height);
        v as usize * self.width as usize + u as usize
    }

    #[inline]
    pub fn get(&self, u: u32, v: u32) -> bool {
        let idx = self.bit_index(u, v);
        (self.words[idx / 64] >> (idx % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, u: u32, v: u32) {
        let idx = self.bit_index(u, v);
        let word = &mut self.words[idx / 64];
        let bit = 1u64 << (idx % 64);
        if *word & bit == 0 {
            *word |= bit;
            self.area += 1;
        }
    }

    /// Pixel count of the intersection with `other` (equal dimensions).
    pub fn intersection_area(&self, other: &Mask) -> u32 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask dimension mismatch"
        );
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones())
            .sum()
    }

    /// Pixel count of the union with `other` (equal dimensions).
    pub fn union_area(&self, other: &Mask) -> u32 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask dimension mismatch"
        );
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones())
            .sum()
    }

    /// Row-major list of set pixels.
    pub fn set_pixels(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.area as usize);
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Binary PGM (P5) bytes: 0 background, 255 object.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.width as usize * self.height as usize);
        for v in 0..self.height {
            for u in 0..self.width {
                out.push(if self.get(u, v) { 255 } else { 0 });
            }
        }
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Set pixels with at least one unset (or out-of-image) 8-neighbor,
    /// row-major order.
    pub fn boundary_pixels(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for v in 0..self.height {
            for u in 0..self.width {
                if !self.get(u, v) {
                    continue;
                }
                let mut boundary = false;
                'scan: for dv in -1i64..=1 {
                    for du in -1i64..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let nu = u as i64 + du;
                        let nv = v as i64 + dv;
                        if nu < 0
                            || nv < 0
                            || nu >= self.width as i64
                            || nv >= self.height as i64
                            || !self.get(nu as u32, nv as u32)
                        {
                            boundary = true;
                            break 'scan;
                        }
                    }
                }
                if boundary {
                    out.push((u, v));
                }
            }
        }
        out
    }
}

/// Tight axis-aligned pixel bounds, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub u_min: u32,
    pub v_min: u32,
    pub u_max: u32,
    pub v_max: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.u_max - self.u_min + 1
    }

    pub fn height(&self) -> u32 {
        self.v_max - self.v_min + 1
    }

    pub fn contains(&self, u: u32, v: u32) -> bool {
        u >= self.u_min && u <= self.u_max && v >= self.v_min && v <= self.v_max
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            u_min: self.u_min.min(other.u_min),
            v_min: self.v_min.min(other.v_min),
            u_max: self.u_max.max(other.u_max),
            v_max: self.v_max.max(other.v_max),
        }
    }
}

/// Projects object-frame points to continuous pixel coordinates.
///
/// `u = fx * X/Z + cx`, `v = fy * Y/Z + cy` with `(X, Y, Z) = R x + t`.
/// Points at or behind the camera plane report the offending index.
pub fn project_points(
    k: &CameraIntrinsics,
    pose: &Pose,
    points: &[Vector3<f64>],
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let cam = pose.transform_point(p);
        if !(cam.z > MIN_DEPTH) {
            return Err(Error::BehindCamera { index, z: cam.z });
        }
        out.push((
            k.fx * cam.x / cam.z + k.cx,
            k.fy * cam.y / cam.z + k.cy,
        ));
    }
    Ok(out)
}

/// 2D orientation test on subpixel integer coordinates.
///
/// Positive when `c` lies counter-clockwise of `a -> b` in a y-down frame.
/// i128 keeps the products exact even for far off-screen vertices.
#[inline]
pub fn orient2d(a: (i64, i64), b: (i64, i64), c: (i64, i64)) -> i128 {
    (b.0 - a.0) as i128 * (c.1 - a.1) as i128 - (b.1 - a.1) as i128 * (c.0 - a.0) as i128
}

/// Boundary ownership: edges that are horizontal-going-right ("top") or
/// going up ("left") own their pixels, under the positive-area ordering
/// produced by [`orient2d`].
#[inline]
pub fn is_top_left(a: (i64, i64), b: (i64, i64)) -> bool {
    (a.1 == b.1 && b.0 > a.0) || (b.1 < a.1)
}

/// Snaps a continuous pixel coordinate to the 1/256 subpixel grid.
#[inline]
pub fn snap(x: f64) -> i64 {
    (x * SUBPIXEL as f64).round() as i64
}

fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

fn ceil_div(a: i64, b: i64) -> i64 {
    (a + b - 1).div_euclid(b)
}

/// Renders the binary silhouette of `mesh` under `pose`.
///
/// Errors if any vertex lands at or behind the camera plane (no clipping);
/// meshes that project entirely outside the image yield an empty mask.
pub fn render_mask(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> Result<Mask> {
    let projected = project_points(k, pose, mesh.vertices())?;
    let snapped: Vec<(i64, i64)> = projected
        .iter()
        .map(|&(u, v)| (snap(u), snap(v)))
        .collect();

    let mut mask = Mask::new(k.width, k.height);
    for tri in mesh.triangles() {
        let mut v0 = snapped[tri[0] as usize];
        let mut v1 = snapped[tri[1] as usize];
        let v2 = snapped[tri[2] as usize];
        let area = orient2d(v0, v1, v2);
        if area == 0 {
            continue;
        }
        if area < 0 {
            std::mem::swap(&mut v0, &mut v1);
        }

        let min_x = v0.0.min(v1.0).min(v2.0);
        let max_x = v0.0.max(v1.0).max(v2.0);
        let min_y = v0.1.min(v1.1).min(v2.1);
        let max_y = v0.1.max(v1.1).max(v2.1);
        // Pixel p samples at 256*p + 128; restrict to samples inside the
        // triangle bounds and the image.
        let px_min = ceil_div(min_x - 128, SUBPIXEL).max(0);
        let px_max = floor_div(max_x - 128, SUBPIXEL).min(k.width as i64 - 1);
        let py_min = ceil_div(min_y - 128, SUBPIXEL).max(0);
        let py_max = floor_div(max_y - 128, SUBPIXEL).min(k.height as i64 - 1);
        if px_min > px_max || py_min > py_max {
            continue;
        }

        let bias0: i128 = if is_top_left(v1, v2) { 0 } else { -1 };
        let bias1: i128 = if is_top_left(v2, v0) { 0 } else { -1 };
        let bias2: i128 = if is_top_left(v0, v1) { 0 } else { -1 };

        for py in py_min..=py_max {
            for px in px_min..=px_max {
                let s = (px * SUBPIXEL + 128, py * SUBPIXEL + 128);
                if orient2d(v1, v2, s) + bias0 >= 0
                    && orient2d(v2, v0, s) + bias1 >= 0
                    && orient2d(v0, v1, s) + bias2 >= 0
                {
                    mask.set(px as u32, py as u32);
                }
            }
        }
    }
    Ok(mask)
}

/// Tight bounds of the set pixels; empty masks are an error.
pub fn mask_bbox(m: &Mask) -> Result<BBox> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut u_min, mut v_min, mut u_max, mut v_max) = (u32::MAX, u32::MAX, 0u32, 0u32);
    for v in 0..m.height() {
        for u in 0..m.width() {
            if m.get(u, v) {
                u_min = u_min.min(u);
                v_min = v_min.min(v);
                u_max = u_max.max(u);
                v_max = v_max.max(v);
            }
        }
    }
    Ok(BBox {
        u_min,
        v_min,
        u_max,
        v_max,
    })
}

/// Arithmetic mean of the set-pixel coordinates; empty masks are an error.
pub fn mask_centroid(m: &Mask) -> Result<(f64, f64)> {
    if m.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut sum_u: u64 = 0;
    let mut sum_v: u64 = 0;
    for v in 0..m.height() {
        for u in 0..m.width() {
            if m.get(u, v) {
                sum_u += u as u64;
                sum_v += v as u64;
            }
        }
    }
    let n = m.area() as f64;
    Ok((sum_u as f64 / n, sum_v as f64 / n))
}
