//! Image, embedding and depth-consistency metrics and the report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::dataset::TrainingRecord;
use crate::error::{Error, Result};
use crate::imaging::{normalize_depth, BBox, ImageRGB, NormalizeMode};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// File name of a method output inside `<pred>/<method>/<record_id>/`.
pub const COMPOSITE_FILE: &str = "composite.png";

pub const CSV_HEADER: &str = "method,SSIM,MSE,sim,depth_SSIM,depth_MSE";

/// Published full-scale scores, reproduced as static annotation rows:
/// (method, SSIM, MSE, sim, depth SSIM, depth MSE).
pub const PUBLISHED_ROWS: [(&str, &str, &str, &str, &str, &str); 4] = [
    ("published:baseline", "0.681", "0.0319", "0.854", "0.833", "0.0315"),
    ("published:two-stage", "0.710", "0.0176", "0.881", "0.880", "0.0200"),
    ("published:direct", "0.723", "0.0177", "0.893", "0.896", "0.0141"),
    ("published:direct-sd1.5", "0.723", "0.0174", "0.883", "0.893", "0.0144"),
];

fn check_pair(a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::validation(format!(
            "metric inputs differ in size: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Mean squared difference over all pixels and channels of unit-range images.
pub fn mse(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_pair(a, b)?;
    let (a, b) = (a.to_unit(), b.to_unit());
    let sq: Vec<f64> = Zip::from(a.data())
        .and(b.data())
        .map_collect(|p, q| (p - q) * (p - q))
        .into_iter()
        .collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

pub fn mse_plane(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation("metric inputs differ in size"));
    }
    let sq: Vec<f64> = Zip::from(a)
        .and(b)
        .map_collect(|p, q| (p - q) * (p - q))
        .into_iter()
        .collect();
    Ok(pairwise_sum(&sq) / sq.len() as f64)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter, valid windows only.
fn filter_valid(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let rows = Array2::from_shape_fn((h, ow), |(y, x0)| {
        (0..SSIM_WINDOW).map(|j| k[j] * x[[y, x0 + j]]).sum::<f64>()
    });
    Array2::from_shape_fn((oh, ow), |(y0, x0)| {
        (0..SSIM_WINDOW).map(|i| k[i] * rows[[y0 + i, x0]]).sum::<f64>()
    })
}

/// Mean local SSIM of two single-channel maps with values in `[0, 1]`.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::validation("metric inputs differ in size"));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::validation(format!(
            "SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}"
        )));
    }
    let k = gaussian_kernel();
    let (c1, c2) = ((SSIM_K1 * SSIM_K1), (SSIM_K2 * SSIM_K2));
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut map = Vec::with_capacity(mu_a.len());
    for (i, &ma) in mu_a.indexed_iter() {
        let mb = mu_b[i];
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        map.push(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
    }
    Ok(pairwise_sum(&map) / map.len() as f64)
}

/// SSIM on the luminance of unit-range images.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_pair(a, b)?;
    ssim_plane(&a.to_unit().luminance(), &b.to_unit().luminance())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::validation("cosine: vectors differ in length"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::validation("cosine of a zero-norm embedding"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine similarity of pooled reference-encoder embeddings.
pub fn embedding_similarity(a: &ImageRGB, b: &ImageRGB, backends: &Backends) -> Result<f64> {
    let ea = backends.reference_encoder.embed(a)?.pooled();
    let eb = backends.reference_encoder.embed(b)?.pooled();
    cosine(&ea, &eb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthScores {
    pub ssim: f64,
    pub mse: f64,
}

/// Estimates and percentile-normalizes depth on both images, then compares
/// the maps brought to `[0, 1]`.
pub fn depth_consistency(generated: &ImageRGB, ground_truth: &ImageRGB, backends: &Backends) -> Result<DepthScores> {
    check_pair(generated, ground_truth)?;
    let unit = |x: &ImageRGB| -> Result<Array2<f64>> {
        let d = normalize_depth(&backends.depth.estimate_depth(x)?, NormalizeMode::percentile())?;
        Ok(d.data().mapv(|v| (v + 1.0) / 2.0))
    };
    let (g, t) = (unit(generated)?, unit(ground_truth)?);
    Ok(DepthScores {
        ssim: ssim_plane(&g, &t)?,
        mse: mse_plane(&g, &t)?,
    })
}

/// Pairwise (tree) summation; fixed association for a given input order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    #[default]
    Full,
    /// The record's insertion box, grown to at least one SSIM window.
    Bbox,
}

impl std::str::FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Region::Full),
            "bbox" => Ok(Region::Bbox),
            _ => Err(Error::validation(format!(
                "unknown region `{s}` (expected full or bbox)"
            ))),
        }
    }
}

fn eval_box(record: &TrainingRecord) -> BBox {
    let (h, w) = (record.height(), record.width());
    let b = record.mask.zero_region().unwrap_or(BBox::new(0, 0, w, h));
    let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
        let need = SSIM_WINDOW.min(n);
        if hi - lo >= need {
            return (lo, hi);
        }
        let lo = lo.saturating_sub((need - (hi - lo)).div_ceil(2)).min(n - need);
        (lo, lo + need)
    };
    let (x0, x1) = grow(b.x0, b.x1, w);
    let (y0, y1) = grow(b.y0, b.y1, h);
    BBox::new(x0, y0, x1, y1)
}

/// Per-record scores of one method output against its record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub ssim: f64,
    pub mse: f64,
    pub sim: f64,
    pub depth: DepthScores,
}

pub fn score_pair(
    output: &ImageRGB,
    record: &TrainingRecord,
    backends: &Backends,
    region: Region,
) -> Result<PairScores> {
    let (gen, gt) = match region {
        Region::Full => (output.to_unit(), record.gt.clone()),
        Region::Bbox => {
            let b = eval_box(record);
            (output.to_unit().crop(b)?, record.gt.crop(b)?)
        }
    };
    Ok(PairScores {
        ssim: ssim(&gen, &gt)?,
        mse: mse(&gen, &gt)?,
        sim: embedding_similarity(output, &record.gt, backends)?,
        depth: depth_consistency(&gen, &gt, backends)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub evaluated: usize,
    pub missing: usize,
    pub ssim: Option<f64>,
    pub mse: Option<f64>,
    pub sim: Option<f64>,
    pub depth_ssim: Option<f64>,
    pub depth_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_id: String,
    pub config_hash: String,
    pub region: Region,
    pub records: usize,
    pub rows: Vec<MethodRow>,
}

/// Method name → record id → composite.
pub type MethodOutputs = BTreeMap<String, BTreeMap<String, ImageRGB>>;

/// Scores every method on every record. Records without an output are
/// counted as missing; a method with no outputs gets NA cells.
pub fn evaluate(
    records: &[&TrainingRecord],
    outputs: &MethodOutputs,
    backends: &Backends,
    region: Region,
    dataset_id: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut sorted: Vec<&TrainingRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::new();
    for (method, outs) in outputs {
        let mut scores = Vec::new();
        let mut missing = 0;
        for r in &sorted {
            match outs.get(&r.id) {
                Some(img) => scores.push(score_pair(img, r, backends, region)?),
                None => missing += 1,
            }
        }
        if missing > 0 {
            log::warn!("stage=evaluate method={method} missing={missing}");
        }
        let mean = |f: fn(&PairScores) -> f64| -> Option<f64> {
            (!scores.is_empty()).then(|| pairwise_sum(&scores.iter().map(f).collect::<Vec<_>>()) / scores.len() as f64)
        };
        rows.push(MethodRow {
            method: method.clone(),
            evaluated: scores.len(),
            missing,
            ssim: mean(|s| s.ssim),
            mse: mean(|s| s.mse),
            sim: mean(|s| s.sim),
            depth_ssim: mean(|s| s.depth.ssim),
            depth_mse: mean(|s| s.depth.mse),
        });
    }
    Ok(EvalReport {
        dataset_id: dataset_id.to_string(),
        config_hash: config_hash.to_string(),
        region,
        records: sorted.len(),
        rows,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{CSV_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.method,
                cell(r.ssim),
                cell(r.mse),
                cell(r.sim),
                cell(r.depth_ssim),
                cell(r.depth_mse)
            );
        }
        for (m, a, b, c, d, e) in PUBLISHED_ROWS {
            let _ = writeln!(s, "{m},{a},{b},{c},{d},{e}");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "dataset {}  config_hash {}  region {:?}  records {}",
            self.dataset_id, self.config_hash, self.region, self.records
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "Composites");
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>8} {:>9}",
            "method", "SSIM", "MSE", "sim", "evaluated"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>8} {:>8} {:>9}",
                r.method,
                cell(r.ssim),
                cell(r.mse),
                cell(r.sim),
                format!("{}/{}", r.evaluated, r.evaluated + r.missing)
            );
        }
        for (m, a, b, c, _, _) in PUBLISHED_ROWS {
            let _ = writeln!(s, "{m:<24} {a:>8} {b:>8} {c:>8}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "Depth of composites");
        let _ = writeln!(s, "{:<24} {:>8} {:>8}", "method", "SSIM", "MSE");
        for r in &self.rows {
            let _ = writeln!(s, "{:<24} {:>8} {:>8}", r.method, cell(r.depth_ssim), cell(r.depth_mse));
        }
        for (m, _, _, _, d, e) in PUBLISHED_ROWS {
            let _ = writeln!(s, "{m:<24} {d:>8} {e:>8}");
        }
        s
    }

    /// Writes the text table to `path` and the CSV next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let csv = path.with_extension("csv");
        for (p, body) in [(path.to_path_buf(), self.to_text()), (csv, self.to_csv())] {
            let tmp = p.with_extension("tmp");
            std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Reads `<pred>/<method>/<record_id>/composite.png` for the given records.
pub fn load_method_outputs(pred_dir: &Path, record_ids: &[&str]) -> Result<MethodOutputs> {
    let mut out = MethodOutputs::new();
    let entries = std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))?;
    let mut methods: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    methods.sort();
    for m in methods {
        let name = m.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut per = BTreeMap::new();
        for id in record_ids {
            let p = m.join(id).join(COMPOSITE_FILE);
            if p.is_file() {
                per.insert(id.to_string(), ImageRGB::load_png(&p)?);
            }
        }
        out.insert(name, per);
    }
    Ok(out)
}
