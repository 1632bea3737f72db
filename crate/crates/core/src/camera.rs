//! Pinhole cameras, projection, stereo baselines and two-view triangulation.
//!
//! Camera frame convention: +x right, +y down, +z forward. Image columns grow
//! with +x and rows with +y; pixel centers sit on integer coordinates.

use nalgebra::{Matrix2x3, Matrix3, Matrix3x4, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation.
    pub translation: Vector3<f64>,
    pub near: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    /// Camera at the world origin looking down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            near: DEFAULT_NEAR,
        }
    }

    /// Camera centered at `eye` looking at `target`. World +y is treated as image-down.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let down = Vector3::new(0.0, 1.0, 0.0);
        let right = down.cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self { fx, fy, cx, cy, width, height, rotation, translation, near: DEFAULT_NEAR }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        if !(orth < 1e-9) || !(self.rotation.determinant() > 0.0) {
            return Err(Error::Config("camera rotation is not a proper rotation".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0) {
            return Err(Error::Config("near plane must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image dimensions must be at least 1".into()));
        }
        Ok(())
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// 3×4 projection matrix `K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let k = Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0);
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        k * rt
    }

    #[inline]
    pub fn project_camera_point(&self, p_cam: &Vector3<f64>) -> Projection {
        let z = p_cam.z;
        Projection {
            pixel: Vector2::new(self.fx * p_cam.x / z + self.cx, self.fy * p_cam.y / z + self.cy),
            depth: z,
            valid: z > self.near,
        }
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Projection {
        self.project_camera_point(&self.to_camera(p))
    }

    /// Jacobian of the pixel coordinates with respect to the camera-space point.
    pub fn projection_jacobian(&self, p_cam: &Vector3<f64>) -> Matrix2x3<f64> {
        assert!(p_cam.z > self.near, "projection_jacobian called at or behind the near plane");
        let iz = 1.0 / p_cam.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p_cam.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p_cam.y * iz2,
        )
    }

    /// Moves the optical center by `d_cam` along the camera's own +x axis.
    pub fn translate(&self, d_cam: f64) -> CameraModel {
        let mut out = self.clone();
        if d_cam != 0.0 {
            out.translation.x -= d_cam;
        }
        out
    }

    pub fn contains_pixel(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64
    }
}

/// One pixel match between two views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Match {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub confidence: f64,
}

impl From<[f64; 5]> for Match {
    fn from(v: [f64; 5]) -> Self {
        Match { xa: v[0], ya: v[1], xb: v[2], yb: v[3], confidence: v[4] }
    }
}

impl From<Match> for [f64; 5] {
    fn from(m: Match) -> Self {
        [m.xa, m.ya, m.xb, m.yb, m.confidence]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub view_a: String,
    pub view_b: String,
    pub matches: Vec<Match>,
}

impl CorrespondenceSet {
    pub fn validate(&self, cam_a: &CameraModel, cam_b: &CameraModel) -> Result<()> {
        for (i, m) in self.matches.iter().enumerate() {
            if !cam_a.contains_pixel(m.xa, m.ya) || !cam_b.contains_pixel(m.xb, m.yb) {
                return Err(Error::Manifest(format!(
                    "match {i} of pair {}/{} lies outside its image",
                    self.view_a, self.view_b
                )));
            }
            if !(0.0..=1.0).contains(&m.confidence) {
                return Err(Error::Manifest(format!(
                    "match {i} of pair {}/{} has confidence {} outside [0, 1]",
                    self.view_a, self.view_b, m.confidence
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulated {
    pub point: Vector3<f64>,
    /// Larger of the two per-view reprojection errors, in pixels.
    pub reproj_error: f64,
    pub valid: bool,
}

/// Linear (DLT) two-view triangulation.
pub fn triangulate(cam_a: &CameraModel, cam_b: &CameraModel, m: &Match, max_reproj_px: f64) -> Triangulated {
    let pa = cam_a.projection_matrix();
    let pb = cam_b.projection_matrix();
    let mut a = Matrix4::zeros();
    let rows = [
        pa.row(2) * m.xa - pa.row(0),
        pa.row(2) * m.ya - pa.row(1),
        pb.row(2) * m.xb - pb.row(0),
        pb.row(2) * m.yb - pb.row(1),
    ];
    for (i, row) in rows.iter().enumerate() {
        // Row scaling does not change the solution but keeps the system balanced.
        let n = row.norm();
        let row = if n > 0.0 { row / n } else { *row };
        a.set_row(i, &row);
    }

    let invalid = Triangulated { point: Vector3::zeros(), reproj_error: f64::INFINITY, valid: false };
    let svd = a.svd(false, true);
    let Some(v_t) = svd.v_t else { return invalid };
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &s)| if s < best.1 { (i, s) } else { best });
    let h = v_t.row(imin);
    let w = h[3];
    if !w.is_finite() || w.abs() < 1e-12 * h.norm() {
        return invalid;
    }
    let point = Vector3::new(h[0] / w, h[1] / w, h[2] / w);
    if !point.iter().all(|v| v.is_finite()) {
        return invalid;
    }

    let proj_a = cam_a.project_point(&point);
    let proj_b = cam_b.project_point(&point);
    let err_a = (proj_a.pixel - Vector2::new(m.xa, m.ya)).norm();
    let err_b = (proj_b.pixel - Vector2::new(m.xb, m.yb)).norm();
    let reproj_error = err_a.max(err_b);
    let valid = proj_a.valid && proj_b.valid && reproj_error <= max_reproj_px;
    Triangulated { point, reproj_error, valid }
}
