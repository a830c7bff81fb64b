//! Deterministic synthetic scenes: sampled poses, projected 3D box corners,
//! amodal boxes and jittered RoIs.
//!
//! # Random stream
//!
//! All randomness comes from [`SplitMix64`] (Steele, Lea and Flood's
//! SplitMix64: increment `0x9E3779B97F4A7C15`, mix constants
//! `0xBF58476D1CE4E5B9`, `0x94D049BB133111EB`, shifts 30/27/31).
//! Derived draws:
//!
//! - `uniform01 = (next_u64 >> 11) * 2^-53`, in `[0, 1)`;
//! - `uniform(a, b) = a + (b - a) * uniform01`;
//! - `gaussian`: Box-Muller cosine branch from two draws,
//!   `u1 = 1 - uniform01`, `u2 = uniform01`,
//!   `sqrt(-2 ln u1) * cos(2 pi u2)`;
//! - rotation: four gaussians `(w, x, y, z)` normalized to a unit quaternion.
//!
//! Per placement attempt the sampler draws, in order: rotation, depth
//! `uniform(d_min, d_max)`, center pixel `u = uniform(0, W)`,
//! `v = uniform(0, H)`. Once an instance is placed it draws four more
//! uniforms in `[-1, 1)` for the RoI jitter `(dx, dy, dw, dh)`.

use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::error::{PoseError, Result};
use crate::geometry::{bbox2d_of, project_points, CameraIntrinsics, Pose, Quaternion, Rect2D};
use crate::metrics::ModelPoints;

/// Placement attempts per instance before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Largest RoI jitter fraction.
pub const MAX_JITTER: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniformly distributed rotation (normalized 4D gaussian).
    pub fn uniform_rotation(&mut self) -> Quaternion {
        loop {
            let q = [self.gaussian(), self.gaussian(), self.gaussian(), self.gaussian()];
            if let Ok(q) = Quaternion::from_array(q) {
                return q;
            }
        }
    }

    /// Uniformly distributed direction on the unit sphere.
    pub fn unit_vector(&mut self) -> Vector3<f64> {
        loop {
            let v = Vector3::new(self.gaussian(), self.gaussian(), self.gaussian());
            let n = v.norm();
            if n > 1e-12 {
                return v / n;
            }
        }
    }
}

/// A model point set together with the corners of its axis-aligned 3D box.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub id: String,
    pub points: ModelPoints,
    pub bbox_corners: [Vector3<f64>; 8],
}

impl ObjectModel {
    pub fn from_points(id: impl Into<String>, points: Vec<Vector3<f64>>) -> Result<Self> {
        let points = ModelPoints::new(points)?;
        let bbox_corners = box_corners(points.points());
        Ok(Self {
            id: id.into(),
            points,
            bbox_corners,
        })
    }

    /// Built-in fixtures: `cube`, `box` and `icosahedron`.
    pub fn builtin(name: &str) -> Option<Self> {
        let pts = match name {
            "cube" => cube_corners(1.0).to_vec(),
            "box" => box_corners(&[Vector3::new(-0.1, -0.05, -0.025), Vector3::new(0.1, 0.05, 0.025)]).to_vec(),
            "icosahedron" => icosahedron_vertices(),
            _ => return None,
        };
        Some(Self::from_points(name, pts).expect("built-in models are valid"))
    }

    pub fn diameter(&self) -> f64 {
        self.points.diameter()
    }
}

pub const BUILTIN_MODELS: [&str; 3] = ["cube", "box", "icosahedron"];

/// Corners of an axis-aligned cube of the given side, centered at the origin.
pub fn cube_corners(side: f64) -> [Vector3<f64>; 8] {
    let h = 0.5 * side;
    box_corners(&[Vector3::new(-h, -h, -h), Vector3::new(h, h, h)])
}

/// Corners of the axis-aligned box spanned by `pts`, ordered by the bits
/// `(x, y, z)` of the corner index (bit set = max side).
pub fn box_corners(pts: &[Vector3<f64>]) -> [Vector3<f64>; 8] {
    let lo = pts.iter().fold(Vector3::repeat(f64::INFINITY), |a, p| a.inf(p));
    let hi = pts.iter().fold(Vector3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
    std::array::from_fn(|i| {
        Vector3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        )
    })
}

fn icosahedron_vertices() -> Vec<Vector3<f64>> {
    let phi = 0.5 * (1.0 + 5f64.sqrt());
    let mut v = Vec::with_capacity(12);
    for a in [-1.0, 1.0] {
        for b in [-phi, phi] {
            v.push(Vector3::new(0.0, a, b));
            v.push(Vector3::new(a, b, 0.0));
            v.push(Vector3::new(b, 0.0, a));
        }
    }
    // circumradius 0.1
    let r = (1.0 + phi * phi).sqrt();
    v.into_iter().map(|p| p * (0.1 / r)).collect()
}

/// Loads a model from an ASCII PLY file (`.ply`) or JSON (`{"points": [[x, y, z], ...]}`).
pub fn load_model(path: &Path) -> Result<ObjectModel> {
    let text = std::fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"))
        || text.starts_with("ply");
    let points = if is_ply {
        parse_ply(&text)?
    } else {
        parse_json_points(&text)?
    };
    ObjectModel::from_points(id, points)
}

pub fn parse_json_points(text: &str) -> Result<Vec<Vector3<f64>>> {
    #[derive(serde::Deserialize)]
    struct PointsFile {
        points: Vec<[f64; 3]>,
    }
    let file: PointsFile = serde_json::from_str(text).map_err(|e| PoseError::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if file.points.is_empty() {
        return Err(PoseError::Validation("model has no points".into()));
    }
    Ok(file.points.into_iter().map(Vector3::from).collect())
}

/// Minimal ASCII PLY reader: returns the `x y z` properties of every vertex.
/// Other elements and properties are skipped.
pub fn parse_ply(text: &str) -> Result<Vec<Vector3<f64>>> {
    let err = |line: usize, message: String| PoseError::Parse { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing 'ply' magic line".into())),
    }

    // (name, count, properties)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut format_seen = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(err(n, format!("unsupported format '{line}' (only ascii)")));
                }
                format_seen = true;
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| err(n, "element without a name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(n, format!("element '{name}' has no valid count")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let (_, _, props) = elements
                    .last_mut()
                    .ok_or_else(|| err(n, "property before any element".into()))?;
                let name = tok
                    .last()
                    .ok_or_else(|| err(n, "property without a name".into()))?;
                // list properties still occupy one named slot; their extra
                // tokens only matter for elements we skip
                props.push(name.to_string());
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            Some(other) => return Err(err(n, format!("unexpected header keyword '{other}'"))),
        }
    }
    let last_line = text.lines().count();
    let header_end = header_end.ok_or_else(|| err(last_line, "truncated header: missing 'end_header'".into()))?;
    if !format_seen {
        return Err(err(header_end, "header is missing the 'format' line".into()));
    }
    let vertex_pos = elements
        .iter()
        .position(|(name, _, _)| name == "vertex")
        .ok_or_else(|| err(header_end, "header is missing element 'vertex'".into()))?;

    let mut points = Vec::new();
    for (idx, (name, count, props)) in elements.iter().enumerate() {
        let axis = |a: &str| props.iter().position(|p| p == a);
        let cols = if idx == vertex_pos {
            match (axis("x"), axis("y"), axis("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => {
                    return Err(err(
                        header_end,
                        "element 'vertex' lacks an x, y or z property".into(),
                    ))
                }
            }
        } else {
            None
        };
        for k in 0..*count {
            let (n, line) = lines.next().ok_or_else(|| {
                err(last_line, format!("file ends after {k} of {count} '{name}' rows"))
            })?;
            let Some(cols) = cols else { continue };
            let values: Vec<&str> = line.split_whitespace().collect();
            let mut p = [0.0; 3];
            for (slot, &c) in p.iter_mut().zip(&cols) {
                *slot = values
                    .get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(n, format!("bad vertex row '{line}'")))?;
            }
            points.push(Vector3::from(p));
        }
        if idx == vertex_pos && points.is_empty() {
            return Err(PoseError::Validation("model has no vertices".into()));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub jitter: f64,
    pub camera: CameraIntrinsics,
    pub image_width: f64,
    pub image_height: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 10,
            depth_min: 2.0,
            depth_max: 8.0,
            jitter: 0.1,
            camera: CameraIntrinsics {
                fx: 500.0,
                fy: 500.0,
                px: 320.0,
                py: 240.0,
            },
            image_width: 640.0,
            image_height: 480.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max && self.depth_max.is_finite()) {
            return Err(PoseError::Validation(format!(
                "depth range must satisfy 0 < min < max (got [{}, {}])",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return Err(PoseError::Validation(format!(
                "jitter must lie in [0, {MAX_JITTER}] (got {})",
                self.jitter
            )));
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return Err(PoseError::Validation("image extent must be positive".into()));
        }
        Ok(())
    }

    fn inside_image(&self, p: &Vector2<f64>) -> bool {
        (0.0..=self.image_width).contains(&p.x) && (0.0..=self.image_height).contains(&p.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneInstance {
    pub id: usize,
    pub model_id: String,
    pub pose: Pose,
    pub box8: [Vector2<f64>; 8],
    pub amodal_box: Rect2D,
    pub roi: Rect2D,
}

pub fn sample_scene(cfg: &SynthConfig, model: &ObjectModel) -> Result<Vec<SceneInstance>> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);
    let mut out = Vec::with_capacity(cfg.count);
    for id in 0..cfg.count {
        let (pose, box8) = place_instance(cfg, model, &mut rng).ok_or_else(|| {
            PoseError::Generation(format!(
                "instance {id}: no in-image placement in {MAX_PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        let amodal_box = bbox2d_of(&box8)?;
        let roi = jitter_roi(cfg, &amodal_box, &mut rng)?;
        out.push(SceneInstance {
            id,
            model_id: model.id.clone(),
            pose,
            box8,
            amodal_box,
            roi,
        });
    }
    Ok(out)
}

fn place_instance(
    cfg: &SynthConfig,
    model: &ObjectModel,
    rng: &mut SplitMix64,
) -> Option<(Pose, [Vector2<f64>; 8])> {
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let rotation = rng.uniform_rotation();
        let depth = rng.uniform(cfg.depth_min, cfg.depth_max);
        let center = Vector2::new(rng.uniform(0.0, cfg.image_width), rng.uniform(0.0, cfg.image_height));
        let pose = Pose::new(rotation, cfg.camera.back_project(&center) * depth);
        let Ok(uv) = project_points(&cfg.camera, &pose, &model.bbox_corners) else {
            continue;
        };
        if uv.iter().all(|p| cfg.inside_image(p)) {
            return Some((pose, std::array::from_fn(|i| uv[i])));
        }
    }
    None
}

fn jitter_roi(cfg: &SynthConfig, amodal: &Rect2D, rng: &mut SplitMix64) -> Result<Rect2D> {
    let j = cfg.jitter;
    let (dx, dy, dw, dh) = (
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
        rng.uniform(-1.0, 1.0),
    );
    if j == 0.0 {
        return Ok(*amodal);
    }
    let x = amodal.x + j * dx * amodal.w;
    let y = amodal.y + j * dy * amodal.h;
    let w = amodal.w * (1.0 + j * dw);
    let h = amodal.h * (1.0 + j * dh);
    let x0 = x.max(0.0);
    let y0 = y.max(0.0);
    let x1 = (x + w).min(cfg.image_width);
    let y1 = (y + h).min(cfg.image_height);
    Rect2D::new(x0, y0, x1 - x0, y1 - y0)
        .map_err(|e| PoseError::Generation(format!("jittered RoI collapsed: {e}")))
}
