//! Z-buffer rendering of posed body meshes into an unoccluded depth map and
//! silhouette, plus the plain-text triangle-list mesh format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::SkipReason;
use crate::error::{Error, Result};
use crate::imaging::{affine_to_signed, mask_from_silhouette, BBox, BinaryMask, DepthMap, Normalization};

/// Camera-space depth written to pixels no triangle covers.
pub const BACKGROUND_DEPTH: f64 = 0.0;

/// Triangles are clipped against this camera-space depth (meters).
pub const NEAR_PLANE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshSource {
    Fitted,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMesh {
    vertices: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    source: MeshSource,
}

impl BodyMesh {
    pub fn new(vertices: Vec<[f64; 3]>, faces: Vec<[usize; 3]>, source: MeshSource) -> Result<Self> {
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("mesh has non-finite vertex coordinates"));
        }
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= vertices.len())) {
            return Err(Error::validation(format!(
                "face {f:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        let non_degenerate = faces.iter().any(|f| {
            let [a, b, c] = f.map(|i| vertices[i]);
            norm(cross(sub(b, a), sub(c, a))) > 1e-12
        });
        if !non_degenerate {
            return Err(Error::validation("mesh has no non-degenerate triangle"));
        }
        Ok(Self {
            vertices,
            faces,
            source,
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn source(&self) -> MeshSource {
        self.source
    }

    pub fn with_source(mut self, source: MeshSource) -> Self {
        self.source = source;
        self
    }

    pub fn transformed(&self, scale: f64, offset: [f64; 3]) -> BodyMesh {
        BodyMesh {
            vertices: self
                .vertices
                .iter()
                .map(|v| {
                    [
                        v[0] * scale + offset[0],
                        v[1] * scale + offset[1],
                        v[2] * scale + offset[2],
                    ]
                })
                .collect(),
            faces: self.faces.clone(),
            source: self.source,
        }
    }

    /// Axis-aligned bounds `(min, max)` in camera space.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Parses `v x y z` and `f a b c` lines (1-based indices, `#` comments).
    pub fn parse(text: &str) -> Result<BodyMesh> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or("");
            let fields: Vec<&str> = parts.collect();
            let bad = |what: &str| Error::validation(format!("mesh line {}: {what}", lineno + 1));
            match tag {
                "v" => {
                    if fields.len() != 3 {
                        return Err(bad("vertex needs 3 coordinates"));
                    }
                    let mut v = [0.0; 3];
                    for (slot, f) in v.iter_mut().zip(&fields) {
                        *slot = f.parse().map_err(|_| bad("bad coordinate"))?;
                    }
                    vertices.push(v);
                }
                "f" => {
                    if fields.len() != 3 {
                        return Err(bad("face needs 3 indices"));
                    }
                    let mut face = [0usize; 3];
                    for (slot, f) in face.iter_mut().zip(&fields) {
                        let idx: usize = f.parse().map_err(|_| bad("bad index"))?;
                        *slot = idx.checked_sub(1).ok_or_else(|| bad("indices are 1-based"))?;
                    }
                    faces.push(face);
                }
                other => return Err(bad(&format!("unknown record `{other}`"))),
            }
        }
        BodyMesh::new(vertices, faces, MeshSource::Fitted)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.vertices {
            let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
        }
        for f in &self.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
        out
    }

    pub fn load(path: &Path) -> Result<BodyMesh> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        BodyMesh::parse(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraSpec {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            height,
            width,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Square-pixel camera centered on the image with focal length `1.2 · width`.
    pub fn centered(height: usize, width: usize) -> Self {
        Self {
            fx: 1.2 * width as f64,
            fy: 1.2 * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("focal lengths must be positive"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("camera image size must be positive"));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(Error::validation("principal point outside image"));
        }
        Ok(())
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }

    /// Direction (with unit z) of the ray through image point `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }
}

/// Z-buffer output: raw camera-space depth and the coverage silhouette.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub depth: DepthMap,
    pub silhouette: BinaryMask,
}

/// Clips a camera-space triangle to `z >= NEAR_PLANE` (Sutherland–Hodgman).
fn clip_near(tri: [[f64; 3]; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let a_in = a[2] >= NEAR_PLANE;
        let b_in = b[2] >= NEAR_PLANE;
        if a_in {
            out.push(a);
        }
        if a_in != b_in {
            let t = (NEAR_PLANE - a[2]) / (b[2] - a[2]);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), NEAR_PLANE]);
        }
    }
    out
}

pub fn render_body_depth(mesh: &BodyMesh, cam: &CameraSpec) -> Result<Rendering> {
    cam.validate()?;
    let (h, w) = (cam.height, cam.width);
    let mut zbuf = Array2::from_elem((h, w), f64::INFINITY);

    for face in &mesh.faces {
        let poly = clip_near(face.map(|i| mesh.vertices[i]));
        if poly.len() < 3 {
            continue;
        }
        let screen: Vec<([f64; 2], f64)> = poly.iter().map(|&p| (cam.project(p), 1.0 / p[2])).collect();
        for k in 1..screen.len() - 1 {
            raster_triangle(&mut zbuf, [screen[0], screen[k], screen[k + 1]]);
        }
    }

    let silhouette = BinaryMask::from_fn(h, w, |y, x| zbuf[[y, x]].is_finite());
    if silhouette.count_ones() == 0 {
        return Err(Error::Skipped(SkipReason::EmptySilhouette));
    }
    let depth = DepthMap::raw(zbuf.mapv(|z| if z.is_finite() { z } else { BACKGROUND_DEPTH }))?;
    Ok(Rendering { depth, silhouette })
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Rasterizes one screen-space triangle `(point, 1/z)`; strict depth test so
/// earlier faces win ties.
fn raster_triangle(zbuf: &mut Array2<f64>, tri: [([f64; 2], f64); 3]) {
    let [(p0, iz0), (p1, iz1), (p2, iz2)] = tri;
    let area = edge(p0, p1, p2);
    if area.abs() < 1e-14 {
        return;
    }
    let (h, w) = zbuf.dim();
    let min_x = p0[0].min(p1[0]).min(p2[0]);
    let max_x = p0[0].max(p1[0]).max(p2[0]);
    let min_y = p0[1].min(p1[1]).min(p2[1]);
    let max_y = p0[1].max(p1[1]).max(p2[1]);
    // pixel x covers [x, x+1) with its sample at x + 0.5
    let x_lo = (min_x - 0.5).ceil().max(0.0) as usize;
    let y_lo = (min_y - 0.5).ceil().max(0.0) as usize;
    let x_hi = ((max_x - 0.5).floor() + 1.0).clamp(0.0, w as f64) as usize;
    let y_hi = ((max_y - 0.5).floor() + 1.0).clamp(0.0, h as f64) as usize;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let l0 = edge(p1, p2, p) / area;
            let l1 = edge(p2, p0, p) / area;
            let l2 = edge(p0, p1, p) / area;
            if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                continue;
            }
            let z = 1.0 / (l0 * iz0 + l1 * iz1 + l2 * iz2);
            if z < zbuf[[y, x]] {
                zbuf[[y, x]] = z;
            }
        }
    }
}

/// Pose conditioning derived from a mesh: normalized depth and insertion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseInputs {
    pub pose_depth: DepthMap,
    pub mask: BinaryMask,
    pub silhouette: BinaryMask,
}

/// Normalizes body depth so the nearest body point reads `+1` and the
/// farthest `-1`; background pixels are set to `-1`.
pub fn normalize_body_depth(raw: &DepthMap, silhouette: &BinaryMask) -> Result<DepthMap> {
    if !silhouette.same_size(raw.height(), raw.width()) {
        return Err(Error::validation("silhouette size does not match depth map"));
    }
    let body: Vec<f64> = raw
        .data()
        .indexed_iter()
        .filter(|(idx, _)| silhouette.data()[*idx] == 1)
        .map(|(_, &z)| -z)
        .collect();
    if body.is_empty() {
        return Err(Error::Skipped(SkipReason::EmptySilhouette));
    }
    let (lo, hi) = body.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let data = Array2::from_shape_fn(raw.data().dim(), |idx| {
        if silhouette.data()[idx] == 1 {
            affine_to_signed(-raw.data()[idx], lo, hi)
        } else {
            -1.0
        }
    });
    DepthMap::new(data, Normalization::MinMax)
}

pub fn build_pose_inputs(mesh: &BodyMesh, cam: &CameraSpec, dilation_radius: usize) -> Result<PoseInputs> {
    let Rendering { depth, silhouette } = render_body_depth(mesh, cam)?;
    let pose_depth = normalize_body_depth(&depth, &silhouette)?;
    let mask = mask_from_silhouette(&silhouette, dilation_radius)?;
    Ok(PoseInputs {
        pose_depth,
        mask,
        silhouette,
    })
}

/// Scales and translates `mesh` so its projection roughly fills `bbox`.
pub fn place_in_bbox(mesh: &BodyMesh, cam: &CameraSpec, bbox: BBox) -> BodyMesh {
    let (lo, hi) = mesh.bounds();
    let mesh_h = (hi[1] - lo[1]).max(1e-6);
    let mesh_w = (hi[0] - lo[0]).max(1e-6);
    let depth_h = cam.fy * mesh_h / bbox.height().max(1) as f64;
    let depth_w = cam.fx * mesh_w / bbox.width().max(1) as f64;
    let z = depth_h.max(depth_w);
    let (u, v) = bbox.center();
    let cx = (lo[0] + hi[0]) / 2.0;
    let cy = (lo[1] + hi[1]) / 2.0;
    let cz = (lo[2] + hi[2]) / 2.0;
    BodyMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|p| {
                [
                    p[0] - cx + (u - cam.cx) * z / cam.fx,
                    p[1] - cy + (v - cam.cy) * z / cam.fy,
                    p[2] - cz + z,
                ]
            })
            .collect(),
        faces: mesh.faces.clone(),
        source: MeshSource::Fitted,
    }
}

#[derive(Debug, Clone, Copy)]
struct Part {
    center: [f64; 3],
    half: [f64; 3],
    /// rotation about the camera z axis, radians
    angle: f64,
}

fn push_box(vertices: &mut Vec<[f64; 3]>, faces: &mut Vec<[usize; 3]>, part: Part) {
    let base = vertices.len();
    let (s, c) = part.angle.sin_cos();
    for &(sx, sy, sz) in &[
        (-1.0, -1.0, -1.0),
        (1.0, -1.0, -1.0),
        (1.0, 1.0, -1.0),
        (-1.0, 1.0, -1.0),
        (-1.0, -1.0, 1.0),
        (1.0, -1.0, 1.0),
        (1.0, 1.0, 1.0),
        (-1.0, 1.0, 1.0),
    ] {
        let (lx, ly, lz) = (sx * part.half[0], sy * part.half[1], sz * part.half[2]);
        vertices.push([
            part.center[0] + c * lx - s * ly,
            part.center[1] + s * lx + c * ly,
            part.center[2] + lz,
        ]);
    }
    for q in [
        [0, 1, 2, 3],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [3, 2, 6, 7],
        [0, 3, 7, 4],
        [1, 2, 6, 5],
    ] {
        faces.push([base + q[0], base + q[1], base + q[2]]);
        faces.push([base + q[0], base + q[2], base + q[3]]);
    }
}

/// A limb hanging from `joint` at `angle` from straight down.
fn limb(joint: [f64; 2], length: f64, thickness: f64, angle: f64, z: f64) -> Part {
    Part {
        center: [
            joint[0] - angle.sin() * length / 2.0,
            joint[1] + angle.cos() * length / 2.0,
            z,
        ],
        half: [thickness, length / 2.0, thickness],
        angle,
    }
}

/// Canned box-figure bodies (about 1.7 m tall, y down, centered at the
/// origin) in a handful of poses. Used by the synthetic fixtures and the
/// body-fitter test double.
pub fn body_library() -> Vec<BodyMesh> {
    let poses: [(f64, f64, f64, f64, f64); 4] = [
        // (left arm, right arm, left leg, right leg, leg depth offset)
        (0.15, -0.15, 0.05, -0.05, 0.0),
        (1.2, -1.2, 0.1, -0.1, 0.0),
        (2.6, -0.3, 0.35, -0.2, 0.12),
        (0.4, -2.4, -0.05, -0.4, -0.1),
    ];
    poses
        .iter()
        .map(|&(la, ra, ll, rl, dz)| {
            let mut v = Vec::new();
            let mut f = Vec::new();
            push_box(
                &mut v,
                &mut f,
                Part {
                    center: [0.0, -0.7, 0.0],
                    half: [0.11, 0.13, 0.11],
                    angle: 0.0,
                },
            );
            push_box(
                &mut v,
                &mut f,
                Part {
                    center: [0.0, -0.27, 0.0],
                    half: [0.2, 0.3, 0.12],
                    angle: 0.0,
                },
            );
            push_box(&mut v, &mut f, limb([0.22, -0.52], 0.62, 0.055, la, 0.0));
            push_box(&mut v, &mut f, limb([-0.22, -0.52], 0.62, 0.055, ra, 0.0));
            push_box(&mut v, &mut f, limb([0.1, 0.03], 0.82, 0.075, ll, dz));
            push_box(&mut v, &mut f, limb([-0.1, 0.03], 0.82, 0.075, rl, -dz));
            BodyMesh::new(v, f, MeshSource::Synthetic).expect("library mesh is well-formed")
        })
        .collect()
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

#[cfg(test)]
mod tests {
    use super::*;

    fn tri_mesh(tris: &[[[f64; 3]; 3]]) -> BodyMesh {
        let vertices: Vec<[f64; 3]> = tris.iter().flatten().copied().collect();
        let faces = (0..tris.len()).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        BodyMesh::new(vertices, faces, MeshSource::Synthetic).unwrap()
    }

    fn cam() -> CameraSpec {
        CameraSpec::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap()
    }

    #[test]
    fn constant_z_triangle_reads_its_depth() {
        let mesh = tri_mesh(&[[[-1.0, -1.0, 4.0], [1.0, -1.0, 4.0], [0.0, 1.0, 4.0]]]);
        let r = render_body_depth(&mesh, &cam()).unwrap();
        assert!(r.silhouette.get(16, 16));
        assert_eq!(r.depth.data()[[16, 16]], 4.0);
        // uncovered corner
        assert!(!r.silhouette.get(0, 0));
        assert_eq!(r.depth.data()[[0, 0]], BACKGROUND_DEPTH);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let far = [[-1.0, -1.0, 3.0], [1.0, -1.0, 3.0], [0.0, 1.0, 3.0]];
        let near = [[-0.5, -0.5, 1.5], [0.5, -0.5, 1.5], [0.0, 0.5, 1.5]];
        for order in [[far, near], [near, far]] {
            let r = render_body_depth(&tri_mesh(&order), &cam()).unwrap();
            assert_eq!(r.depth.data()[[16, 16]], 1.5);
        }
    }

    #[test]
    fn fully_clipped_mesh_is_an_empty_silhouette() {
        let mesh = tri_mesh(&[[[-1.0, -1.0, -2.0], [1.0, -1.0, -2.0], [0.0, 1.0, -2.0]]]);
        assert!(matches!(
            render_body_depth(&mesh, &cam()),
            Err(Error::Skipped(SkipReason::EmptySilhouette))
        ));
    }

    #[test]
    fn mesh_validation() {
        assert!(BodyMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 3]], MeshSource::Fitted).is_err());
        assert!(BodyMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 2]], MeshSource::Fitted).is_err());
        assert!(CameraSpec::new(-1.0, 1.0, 0.0, 0.0, 4, 4).is_err());
        assert!(CameraSpec::new(1.0, 1.0, 9.0, 0.0, 4, 4).is_err());
    }

    #[test]
    fn text_format_roundtrip() {
        let mesh = body_library().remove(1);
        let back = BodyMesh::parse(&mesh.to_text()).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.faces(), mesh.faces());
        assert!(BodyMesh::parse("v 0 0 1\nf 0 1 2\n").is_err());
        assert!(BodyMesh::parse("x 1 2 3").is_err());
    }

    #[test]
    fn pose_inputs_span_and_background() {
        let tilted = tri_mesh(&[[[-1.0, -1.0, 2.0], [1.0, -1.0, 3.0], [0.0, 1.0, 2.5]]]);
        let p = build_pose_inputs(&tilted, &cam(), 2).unwrap();
        let body: Vec<f64> = p
            .pose_depth
            .data()
            .indexed_iter()
            .filter(|(i, _)| p.silhouette.data()[*i] == 1)
            .map(|(_, &v)| v)
            .collect();
        let lo = body.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = body.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (-1.0, 1.0));
        for ((y, x), &v) in p.pose_depth.data().indexed_iter() {
            if !p.silhouette.get(y, x) {
                assert_eq!(v, -1.0);
            } else {
                assert!(!p.mask.get(y, x));
            }
        }

        let flat = tri_mesh(&[[[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]]]);
        let p = build_pose_inputs(&flat, &cam(), 0).unwrap();
        for ((y, x), &v) in p.pose_depth.data().indexed_iter() {
            if p.silhouette.get(y, x) {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mesh = body_library().remove(2);
        let c = CameraSpec::centered(64, 64);
        let placed = place_in_bbox(&mesh, &c, BBox::new(16, 8, 48, 60));
        let a = render_body_depth(&placed, &c).unwrap();
        let b = render_body_depth(&placed, &c).unwrap();
        assert_eq!(a, b);
        let bb = a.silhouette.bbox_of(true).unwrap();
        assert!(bb.width() > 10 && bb.height() > 30, "{bb:?}");
    }
}
