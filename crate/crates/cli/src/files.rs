//! On-disk formats: scene / pose JSON, run manifests and number formatting.
//!
//! Every real number is written with 17 significant digits so that parsing
//! it back yields the identical `f64`.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use roipose_core::synth::{ObjectModel, SceneInstance};
use roipose_core::{CameraIntrinsics, Pose, Quaternion, Rect2D};

/// Formats a real with 17 significant digits. The JSON formatter writes
/// non-finite values as `null` instead.
pub fn fmt_real(v: f64) -> String {
    if v == 0.0 {
        // drops the sign of -0.0
        return "0.0".into();
    }
    format!("{v:.16e}")
}

/// Compact JSON formatter writing reals through [`fmt_real`].
struct RealFormatter;

impl Formatter for RealFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(fmt_real(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, RealFormatter);
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, to_json_string(value)?)
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl From<CameraIntrinsics> for CameraJson {
    fn from(k: CameraIntrinsics) -> Self {
        Self { fx: k.fx, fy: k.fy, px: k.px, py: k.py }
    }
}

impl CameraJson {
    pub fn intrinsics(&self) -> anyhow::Result<CameraIntrinsics> {
        Ok(CameraIntrinsics::new(self.fx, self.fy, self.px, self.py)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub id: String,
    pub points: Vec<[f64; 3]>,
}

impl ModelJson {
    pub fn from_model(m: &ObjectModel) -> Self {
        Self {
            id: m.id.clone(),
            points: m.points.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    pub fn to_model(&self) -> anyhow::Result<ObjectModel> {
        let pts = self.points.iter().map(|p| Vector3::from(*p)).collect();
        Ok(ObjectModel::from_points(self.id.clone(), pts)?)
    }
}

/// Scalar-first quaternion and translation `[x, y, d]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseJson {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        let t = p.translation;
        Self { q: p.rotation.to_array(), t: [t.x, t.y, t.z] }
    }
}

impl PoseJson {
    pub fn pose(&self) -> anyhow::Result<Pose> {
        if !self.q.iter().chain(&self.t).all(|v| v.is_finite()) {
            bail!("pose has a non-finite component");
        }
        Ok(Pose::new(Quaternion::from_array(self.q)?, Vector3::from(self.t)))
    }
}

fn rect_array(r: &Rect2D) -> [f64; 4] {
    [r.x, r.y, r.w, r.h]
}

pub fn rect_from(a: &[f64; 4]) -> anyhow::Result<Rect2D> {
    Ok(Rect2D::new(a[0], a[1], a[2], a[3])?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceJson {
    pub id: usize,
    pub model_id: String,
    pub pose: PoseJson,
    pub roi: [f64; 4],
    pub amodal: [f64; 4],
    pub box8: [[f64; 2]; 8],
}

impl From<&SceneInstance> for InstanceJson {
    fn from(s: &SceneInstance) -> Self {
        Self {
            id: s.id,
            model_id: s.model_id.clone(),
            pose: PoseJson::from(&s.pose),
            roi: rect_array(&s.roi),
            amodal: rect_array(&s.amodal_box),
            box8: s.box8.map(|p: Vector2<f64>| [p.x, p.y]),
        }
    }
}

/// Self-contained scene: camera, image extent and model travel with the instances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFile {
    pub seed: u64,
    pub camera: CameraJson,
    /// Image width and height in pixels.
    pub image: [f64; 2],
    pub model: ModelJson,
    pub instances: Vec<InstanceJson>,
}

/// Any file carrying `{"instances": [{"id", "pose"}]}`: scenes and refine reports.
#[derive(Debug, Clone, Deserialize)]
pub struct PoseFile {
    pub model: Option<ModelJson>,
    pub instances: Vec<PoseEntry>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct PoseEntry {
    pub id: usize,
    pub pose: PoseJson,
}

/// Resolves `--model`: a built-in name or a model file path.
pub fn resolve_model(name: &str) -> anyhow::Result<ObjectModel> {
    if let Some(m) = ObjectModel::builtin(name) {
        return Ok(m);
    }
    let path = Path::new(name);
    if !path.exists() {
        bail!(
            "model '{name}' is neither a built-in ({}) nor an existing file",
            roipose_core::synth::BUILTIN_MODELS.join(", ")
        );
    }
    roipose_core::synth::load_model(path).with_context(|| format!("cannot load model {name}"))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            duration_s: 0.0,
        }
    }

    /// Writes the manifest next to the first output as `<stem>.manifest.json`.
    pub fn finish(mut self, elapsed: Duration) -> anyhow::Result<()> {
        self.duration_s = elapsed.as_secs_f64();
        let Some(first) = self.outputs.first() else {
            return Ok(());
        };
        write_json(&manifest_path(first), &self)
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    output.with_extension("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reals_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 1e-9] {
            let s = fmt_real(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_real(-0.0), "0.0");
    }

    #[test]
    fn json_uses_17_digits() {
        let s = to_json_string(&serde_json::json!({"a": 0.1, "b": [1.5, 2]})).unwrap();
        assert_eq!(s, "{\"a\":1.0000000000000001e-1,\"b\":[1.5000000000000000e0,2]}\n");
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path(Path::new("out/s.json")), PathBuf::from("out/s.manifest.json"));
    }
}
