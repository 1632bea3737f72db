//! Scene manifests, correspondence files and image/depth IO.
//!
//! A scene directory holds `scene.json` plus the files it references by
//! relative path. Color images are 8-bit PNG; depth maps are little-endian
//! PFM, or 16-bit PNG in millimeter-style fixed point.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ::image::ImageEncoder;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, CorrespondenceSet, DEFAULT_NEAR};
use crate::error::{Error, Result};
use crate::image::{quantize_u8, Image};

pub const MANIFEST_NAME: &str = "scene.json";
pub const FORMAT_VERSION: u32 = 1;
/// Fixed-point units per scene unit in 16-bit PNG depth maps.
pub const DEPTH_PNG_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major world-to-camera rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
}

impl CameraEntry {
    pub fn from_camera(id: &str, cam: &CameraModel) -> Self {
        let r = cam.rotation;
        Self {
            id: id.to_string(),
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            translation: cam.translation.into(),
            near: (cam.near != DEFAULT_NEAR).then_some(cam.near),
        }
    }

    pub fn to_camera(&self) -> CameraModel {
        CameraModel {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            near: self.near.unwrap_or(DEFAULT_NEAR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub cameras: Vec<CameraEntry>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub images: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_ply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correspondences: Option<String>,
}

/// A validated scene with resolved paths. Images are not decoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub root: PathBuf,
    pub cameras: BTreeMap<String, CameraModel>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub images: BTreeMap<String, PathBuf>,
    pub depths: BTreeMap<String, PathBuf>,
    pub init_ply: Option<PathBuf>,
    pub correspondences: Option<PathBuf>,
}

impl SceneBundle {
    pub fn camera(&self, id: &str) -> Result<&CameraModel> {
        self.cameras.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        let path = self.images.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        load_png(path)
    }

    pub fn load_images(&self, ids: &[String]) -> Result<BTreeMap<String, Image>> {
        ids.iter().map(|id| Ok((id.clone(), self.load_image(id)?))).collect()
    }

    /// Ground-truth depth of a view, if the scene has one.
    pub fn load_depth(&self, id: &str) -> Result<Option<Image>> {
        self.depths.get(id).map(|p| load_depth(p)).transpose()
    }

    pub fn load_correspondences(&self) -> Result<Option<Vec<CorrespondenceSet>>> {
        self.correspondences.as_deref().map(load_correspondences).transpose()
    }
}

/// Parses and validates `dir/scene.json`. Only image headers are read.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    resolve_manifest(dir, manifest)
}

fn resolve_manifest(dir: &Path, m: Manifest) -> Result<SceneBundle> {
    if m.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!("unsupported version {} (expected {FORMAT_VERSION})", m.version)));
    }
    let mut cameras = BTreeMap::new();
    for entry in &m.cameras {
        let cam = entry.to_camera();
        cam.validate().map_err(|e| Error::Manifest(format!("camera `{}`: {e}", entry.id)))?;
        if cameras.insert(entry.id.clone(), cam).is_some() {
            return Err(Error::DuplicateId(entry.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for id in m.train.iter().chain(&m.test) {
        if !cameras.contains_key(id) {
            return Err(Error::UnknownId(id.clone()));
        }
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    if m.train.is_empty() {
        return Err(Error::Manifest("no training views".into()));
    }

    let resolve = |p: &str| dir.join(p);
    let mut images = BTreeMap::new();
    for id in m.train.iter().chain(&m.test) {
        let path = m.images.get(id).map(|p| resolve(p)).ok_or_else(|| Error::MissingImage {
            id: id.clone(),
            path: PathBuf::from("<not listed>"),
        })?;
        if !path.is_file() {
            return Err(Error::MissingImage { id: id.clone(), path });
        }
        let (w, h) = ::image::image_dimensions(&path)?;
        let cam = &cameras[id];
        if (w as usize, h as usize) != (cam.width, cam.height) {
            return Err(Error::ImageDimensions {
                id: id.clone(),
                expected_w: cam.width,
                expected_h: cam.height,
                actual_w: w as usize,
                actual_h: h as usize,
            });
        }
        images.insert(id.clone(), path);
    }
    for id in m.images.keys() {
        if !cameras.contains_key(id) {
            return Err(Error::UnknownId(id.clone()));
        }
    }
    let mut depths = BTreeMap::new();
    for (id, p) in m.depths.iter().flatten() {
        if !cameras.contains_key(id) {
            return Err(Error::UnknownId(id.clone()));
        }
        let path = resolve(p);
        if !path.is_file() {
            return Err(Error::Manifest(format!("depth map for `{id}` not found: {}", path.display())));
        }
        depths.insert(id.clone(), path);
    }
    let optional_file = |p: &Option<String>, what: &str| -> Result<Option<PathBuf>> {
        match p {
            None => Ok(None),
            Some(p) => {
                let path = resolve(p);
                if !path.is_file() {
                    return Err(Error::Manifest(format!("{what} not found: {}", path.display())));
                }
                Ok(Some(path))
            }
        }
    };
    Ok(SceneBundle {
        root: dir.to_path_buf(),
        init_ply: optional_file(&m.init_ply, "init_ply")?,
        correspondences: optional_file(&m.correspondences, "correspondence file")?,
        cameras,
        train: m.train,
        test: m.test,
        images,
        depths,
    })
}

/// Everything needed to write a scene directory.
#[derive(Debug, Clone, Default)]
pub struct SceneContents {
    /// Cameras in manifest order.
    pub cameras: Vec<(String, CameraModel)>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub images: BTreeMap<String, Image>,
    pub depths: BTreeMap<String, Image>,
    pub correspondences: Option<Vec<CorrespondenceSet>>,
    pub init_ply: Option<Vec<u8>>,
}

/// Writes `contents` under `dir` and returns the parsed bundle.
pub fn write_scene(dir: &Path, contents: &SceneContents) -> Result<SceneBundle> {
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut images = BTreeMap::new();
    for (id, img) in &contents.images {
        let rel = format!("images/{id}.png");
        save_png(&dir.join(&rel), img)?;
        images.insert(id.clone(), rel);
    }
    let depths = if contents.depths.is_empty() {
        None
    } else {
        fs::create_dir_all(dir.join("depths")).map_err(|e| Error::io(dir, e))?;
        let mut out = BTreeMap::new();
        for (id, d) in &contents.depths {
            let rel = format!("depths/{id}.pfm");
            save_pfm(&dir.join(&rel), d)?;
            out.insert(id.clone(), rel);
        }
        Some(out)
    };
    let correspondences = match &contents.correspondences {
        Some(sets) => {
            save_correspondences(&dir.join("correspondences.json"), sets)?;
            Some("correspondences.json".to_string())
        }
        None => None,
    };
    let init_ply = match &contents.init_ply {
        Some(bytes) => {
            write_file(&dir.join("init.ply"), bytes)?;
            Some("init.ply".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        version: FORMAT_VERSION,
        cameras: contents.cameras.iter().map(|(id, c)| CameraEntry::from_camera(id, c)).collect(),
        train: contents.train.clone(),
        test: contents.test.clone(),
        images,
        depths,
        init_ply,
        correspondences,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(MANIFEST_NAME), text.as_bytes())?;
    load_scene(dir)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrespondenceFile {
    version: u32,
    pairs: Vec<CorrespondenceSet>,
}

pub fn load_correspondences(path: &Path) -> Result<Vec<CorrespondenceSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CorrespondenceFile = serde_json::from_str(&text)?;
    if file.version != FORMAT_VERSION {
        return Err(Error::Manifest(format!("correspondence file version {} unsupported", file.version)));
    }
    Ok(file.pairs)
}

pub fn save_correspondences(path: &Path, sets: &[CorrespondenceSet]) -> Result<()> {
    let file = CorrespondenceFile { version: FORMAT_VERSION, pairs: sets.to_vec() };
    let mut text = serde_json::to_string(&file)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Writes `bytes`, creating parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a PNG as RGB in `[0, 1]`. Gray and alpha inputs are converted.
pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Image::from_vec(w as usize, h as usize, 3, data)
}

/// Writes an 8-bit PNG from a 1- or 3-channel image, clamping to `[0, 1]`.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let color = match img.channels {
        1 => ::image::ExtendedColorType::L8,
        3 => ::image::ExtendedColorType::Rgb8,
        c => return Err(Error::Dimension(format!("cannot write a {c}-channel PNG"))),
    };
    let mut out = Vec::new();
    ::image::codecs::png::PngEncoder::new(&mut out).write_image(&bytes, img.width as u32, img.height as u32, color)?;
    write_file(path, &out)
}

/// Depth map from a `.pfm` or 16-bit `.png` file.
pub fn load_depth(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => load_depth_png16(path),
        _ => load_pfm(path),
    }
}

pub fn save_depth(path: &Path, depth: &Image) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => save_depth_png16(path, depth),
        _ => save_pfm(path, depth),
    }
}

/// Single-channel little-endian PFM. Rows are stored bottom to top.
pub fn save_pfm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Pfm(format!("expected a 1-channel image, got {}", img.channels)));
    }
    let mut out = Vec::with_capacity(img.data.len() * 4 + 32);
    write!(out, "Pf\n{} {}\n-1.0\n", img.width, img.height).unwrap();
    for r in (0..img.height).rev() {
        for c in 0..img.width {
            out.extend_from_slice(&(img.get(r, c, 0) as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn load_pfm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes)
}

fn parse_pfm(bytes: &[u8]) -> Result<Image> {
    // three whitespace-terminated header tokens
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Pfm("truncated header".into()));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Pfm("header is not text".into()))?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(Error::Pfm(format!("bad magic `{t}`"))),
    };
    let parse = |t: &str| t.parse::<usize>().map_err(|_| Error::Pfm(format!("bad dimension `{t}`")));
    let (w, h) = (parse(tokens[1])?, parse(tokens[2])?);
    let scale: f64 = tokens[3].parse().map_err(|_| Error::Pfm(format!("bad scale `{}`", tokens[3])))?;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != need {
        return Err(Error::Pfm(format!("expected {need} data bytes, found {}", body.len())));
    }
    let mut img = Image::new(w, h, 1);
    for (k, chunk) in body.chunks_exact(4 * channels).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (h - 1 - k / w, k % w);
        img.set(r, c, 0, f64::from(v));
    }
    Ok(img)
}

fn save_depth_png16(path: &Path, depth: &Image) -> Result<()> {
    if depth.channels != 1 {
        return Err(Error::Dimension("depth PNG needs a 1-channel image".into()));
    }
    let buf: ::image::ImageBuffer<::image::Luma<u16>, Vec<u16>> = ::image::ImageBuffer::from_fn(
        depth.width as u32,
        depth.height as u32,
        |x, y| ::image::Luma([(depth.get(y as usize, x as usize, 0) * DEPTH_PNG_SCALE).round().clamp(0.0, 65535.0) as u16]),
    );
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ::image::ImageFormat::Png)?;
    write_file(path, out.get_ref())
}

fn load_depth_png16(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / DEPTH_PNG_SCALE).collect();
    Image::from_vec(w as usize, h as usize, 1, data)
}
