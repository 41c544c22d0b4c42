//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use scene_insert::backends::{Backends, DoubleParams, PersonSegmenter};
use scene_insert::dataset::{build_record, prepare_dataset, DatasetConfig, FramePair, SkipReason};
use scene_insert::imaging::{BinaryMask, ImageRGB, ValueRange};
use scene_insert::render::{render_body_depth, BodyMesh, CameraSpec, MeshSource};
use scene_insert::synthetic::{scene_texture, SyntheticSpec, SyntheticVideo};
use scene_insert::{seeds, Error, Result};

// ---- rasterizer ----

/// Pixels whose center lies this close to a triangle edge, in barycentric
/// units, are excluded from the exact coverage comparison.
pub const EDGE_BAND: f64 = 1e-6;

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

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Möller–Trumbore from the origin: `(t, min barycentric)` when the ray meets
/// the triangle's plane in front of the camera.
pub fn intersect(dir: [f64; 3], tri: [[f64; 3]; 3]) -> Option<(f64, f64)> {
    let e1 = sub(tri[1], tri[0]);
    let e2 = sub(tri[2], tri[0]);
    let p = cross(dir, e2);
    let det = dot(e1, p);
    if det.abs() < 1e-14 {
        return None;
    }
    let s = sub([0.0; 3], tri[0]);
    let u = dot(s, p) / det;
    let q = cross(s, e1);
    let v = dot(dir, q) / det;
    let t = dot(e2, q) / det;
    (t > 0.0).then_some((t, u.min(v).min(1.0 - u - v)))
}

/// Up to 20 independent triangles in front of the camera.
pub fn random_mesh(rng: &mut impl Rng) -> BodyMesh {
    let triangles = rng.random_range(1..=20);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for i in 0..triangles {
        let center = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(2.5..6.0),
        ];
        for _ in 0..3 {
            vertices.push([
                center[0] + rng.random_range(-0.8..0.8),
                center[1] + rng.random_range(-0.8..0.8),
                center[2] + rng.random_range(-0.8..0.8),
            ]);
        }
        faces.push([3 * i, 3 * i + 1, 3 * i + 2]);
    }
    BodyMesh::new(vertices, faces, MeshSource::Synthetic).expect("random triangles are non-degenerate")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RasterStats {
    pub compared: usize,
    pub edge_pixels: usize,
    pub max_depth_error: f64,
}

/// Renders `meshes` random meshes at `size × size` and compares every
/// off-edge pixel with brute-force nearest ray intersection.
pub fn rasterizer_check(meshes: usize, size: usize, seed: u64) -> std::result::Result<RasterStats, String> {
    let cam = CameraSpec::centered(size, size);
    let mut rng = seeds::stream(seed, "rasterizer-oracle");
    let mut stats = RasterStats::default();
    for m in 0..meshes {
        let mesh = random_mesh(&mut rng);
        let tris: Vec<[[f64; 3]; 3]> = mesh.faces().iter().map(|f| f.map(|i| mesh.vertices()[i])).collect();
        let rendering = match render_body_depth(&mesh, &cam) {
            Ok(r) => Some(r),
            Err(Error::Skipped(_)) => None,
            Err(e) => return Err(format!("mesh {m}: {e}")),
        };
        for y in 0..size {
            for x in 0..size {
                let dir = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
                let hits: Vec<(f64, f64)> = tris.iter().filter_map(|&t| intersect(dir, t)).collect();
                if hits.iter().any(|&(_, b)| b.abs() < EDGE_BAND) {
                    stats.edge_pixels += 1;
                    continue;
                }
                let nearest = hits
                    .iter()
                    .filter(|&&(_, b)| b > 0.0)
                    .map(|&(t, _)| t)
                    .fold(f64::INFINITY, f64::min);
                let covered = nearest.is_finite();
                stats.compared += 1;
                match &rendering {
                    None if covered => return Err(format!("mesh {m}: empty render but a ray hits at ({x}, {y})")),
                    None => {}
                    Some(r) => {
                        if r.silhouette.get(y, x) != covered {
                            return Err(format!("mesh {m}: coverage differs at ({x}, {y})"));
                        }
                        if covered {
                            let err = (r.depth.data()[[y, x]] - nearest).abs();
                            stats.max_depth_error = stats.max_depth_error.max(err);
                        }
                    }
                }
            }
        }
    }
    Ok(stats)
}

// ---- metrics ----

fn gaussian_window() -> Vec<f64> {
    let g: Vec<f64> = (0..11)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-d * d / (2.0 * 1.5 * 1.5)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM with every 11×11 window summed directly.
pub fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let k = gaussian_window();
    let (h, w) = a.dim();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut total, mut count) = (0.0, 0.0);
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let g = k[i] * k[j];
                    let (p, q) = (a[[y0 + i, x0 + j]], b[[y0 + i, x0 + j]]);
                    ma += g * p;
                    mb += g * q;
                    saa += g * p * p;
                    sbb += g * q * q;
                    sab += g * p * q;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

pub fn mse_oracle(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let mut s = 0.0;
    for (p, q) in a.data().iter().zip(b.data()) {
        s += (p - q) * (p - q);
    }
    s / a.data().len() as f64
}

pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    let mut d = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        d += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    d / (nu.sqrt() * nv.sqrt())
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageRGB {
    ImageRGB::from_fn(h, w, ValueRange::Unit, |_, _| {
        [
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
            rng.random_range(0.0..1.0),
        ]
    })
    .unwrap()
}

// ---- dataset ----

pub fn desk_data_config() -> DatasetConfig {
    DatasetConfig {
        resolution: 64,
        frames_per_video: 12,
        ..DatasetConfig::default()
    }
}

pub fn double_backends() -> Backends {
    Backends::doubles(&DoubleParams::default()).unwrap()
}

/// Drops every person pixel, as a segmenter failing on a crop would.
pub struct LosesPerson;

impl PersonSegmenter for LosesPerson {
    fn segment_person(&self, x: &ImageRGB) -> Result<BinaryMask> {
        Ok(BinaryMask::filled(x.height(), x.width(), false))
    }
}

fn scene_only() -> ImageRGB {
    scene_texture(96, 96, [0.3, 1.1, 2.0, 0.7]).unwrap()
}

fn paint(base: &ImageRGB, mut on: impl FnMut(usize, usize) -> bool) -> ImageRGB {
    ImageRGB::from_fn(96, 96, ValueRange::Unit, |y, x| {
        if on(y, x) {
            [0.8, 0.3, 0.2]
        } else {
            base.pixel(y, x)
        }
    })
    .unwrap()
}

fn skip_of(label: &str, pair: &FramePair, backends: &Backends) -> std::result::Result<SkipReason, String> {
    match build_record(pair, backends, &desk_data_config()) {
        Err(Error::Skipped(r)) => Ok(r),
        Err(e) => Err(format!("{label}: unexpected error {e}")),
        Ok(_) => Err(format!("{label}: fixture was not skipped")),
    }
}

/// Skip reasons produced by one corrupted fixture per failure mode, keyed by
/// fixture label.
pub fn skip_fixture_reasons() -> std::result::Result<Vec<(&'static str, SkipReason)>, String> {
    let b = double_backends();
    let person = SyntheticVideo::new(0, SyntheticSpec::default(), 1).map_err(|e| e.to_string())?;
    let good = person.frame(2).map_err(|e| e.to_string())?;
    let pair = |id: &str, gt: ImageRGB| FramePair::new(id, 0, 1, good.clone(), gt).map_err(|e| e.to_string());
    let mut out = Vec::new();

    out.push((
        "no person in frame",
        skip_of("empty", &pair("empty", scene_only())?, &b)?,
    ));
    let speck = paint(&scene_only(), |y, x| (y, x) == (40, 40));
    out.push(("one-pixel detection", skip_of("speck", &pair("speck", speck)?, &b)?));
    let blind = Backends {
        segmenter: Arc::new(LosesPerson),
        ..b.clone()
    };
    let gt = person.frame(3).map_err(|e| e.to_string())?;
    out.push(("segmenter loses person", skip_of("blind", &pair("blind", gt)?, &blind)?));
    let stripes = paint(&scene_only(), |y, x| {
        (20..76).contains(&y) && (30..60).contains(&x) && x % 4 == 0
    });
    out.push((
        "striped non-body blob",
        skip_of("stripes", &pair("stripes", stripes)?, &b)?,
    ));

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let short = tmp.path().join("videos/short");
    std::fs::create_dir_all(&short).map_err(|e| e.to_string())?;
    good.save_png(&short.join("frame_0000.png"))
        .map_err(|e| e.to_string())?;
    let summary = prepare_dataset(
        &tmp.path().join("videos"),
        &tmp.path().join("out"),
        &desk_data_config(),
        0,
        &b,
    )
    .map_err(|e| e.to_string())?;
    match summary.skipped.as_slice() {
        [(_, r)] if summary.written == 0 => out.push(("one-frame video", *r)),
        other => return Err(format!("one-frame video: unexpected summary {other:?}")),
    }
    Ok(out)
}

pub fn all_skip_reasons() -> BTreeSet<SkipReason> {
    SkipReason::ALL.into_iter().collect()
}
