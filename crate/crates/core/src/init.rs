//! Initial Gaussian clouds: dense triangulation, sparse point PLY, or random.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{triangulate, CameraModel, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::gaussian::{logit, rgb_to_feature, GaussianCloud};
use crate::image::Image;
use crate::ply::load_point_ply;

pub const INITIAL_OPACITY: f64 = 0.1;
/// Neighbors averaged for the isotropic initial scale.
pub const SCALE_NEIGHBORS: usize = 3;
/// Scale of a Gaussian that has no neighbor to measure against.
pub const LONE_POINT_SCALE: f64 = 0.01;
const MIN_NEIGHBOR_DISTANCE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationGates {
    pub max_reproj_px: f64,
    pub min_confidence: f64,
}

impl Default for TriangulationGates {
    fn default() -> Self {
        Self { max_reproj_px: 2.0, min_confidence: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum InitSpec {
    DenseTriangulated {
        correspondences: PathBuf,
        #[serde(default)]
        gates: TriangulationGates,
    },
    SparsePly {
        path: PathBuf,
    },
    Random {
        count: usize,
        min: [f64; 3],
        max: [f64; 3],
        seed: u64,
    },
}

impl InitSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            InitSpec::Random { count, min, max, .. } => {
                if *count == 0 {
                    return Err(Error::Config("random init needs at least one point".into()));
                }
                check_box(min, max)
            }
            InitSpec::DenseTriangulated { gates, .. } => {
                if !(gates.max_reproj_px > 0.0) {
                    return Err(Error::Config("reprojection gate must be positive".into()));
                }
                Ok(())
            }
            InitSpec::SparsePly { .. } => Ok(()),
        }
    }
}

fn check_box(min: &[f64; 3], max: &[f64; 3]) -> Result<()> {
    if (0..3).any(|k| !(max[k] > min[k]) || !min[k].is_finite() || !max[k].is_finite()) {
        return Err(Error::Config(format!("degenerate bounding box {min:?}..{max:?}")));
    }
    Ok(())
}

/// Triangulates every correspondence set and unions the surviving points.
///
/// Sets are processed in `(view_a, view_b)` order so the result does not
/// depend on the order they are given in.
pub fn init_dense(
    cameras: &BTreeMap<String, CameraModel>,
    images: &BTreeMap<String, Image>,
    sets: &[CorrespondenceSet],
    gates: &TriangulationGates,
) -> Result<GaussianCloud> {
    if cameras.len() < 2 {
        return Err(Error::Init("dense initialization needs at least two cameras".into()));
    }
    let mut order: Vec<&CorrespondenceSet> = sets.iter().collect();
    order.sort_by(|a, b| (&a.view_a, &a.view_b).cmp(&(&b.view_a, &b.view_b)));

    let mut positions = Vec::new();
    let mut colors = Vec::new();
    for set in order {
        let lookup = |id: &String| -> Result<(&CameraModel, &Image)> {
            let cam = cameras.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            let img = images.get(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
            Ok((cam, img))
        };
        let (cam_a, img_a) = lookup(&set.view_a)?;
        let (cam_b, img_b) = lookup(&set.view_b)?;
        let found: Vec<Option<([f64; 3], [f64; 3])>> = set
            .matches
            .par_iter()
            .map(|m| {
                if m.confidence < gates.min_confidence {
                    return None;
                }
                let t = triangulate(cam_a, cam_b, m, gates.max_reproj_px);
                if !t.valid {
                    return None;
                }
                let mut rgb = [0.0; 3];
                for (k, v) in rgb.iter_mut().enumerate() {
                    *v = 0.5 * (img_a.sample_bilinear(m.xa, m.ya, k) + img_b.sample_bilinear(m.xb, m.yb, k));
                }
                Some((t.point.into(), rgb))
            })
            .collect();
        for (p, c) in found.into_iter().flatten() {
            positions.push(p);
            colors.push(c);
        }
    }
    if positions.is_empty() {
        return Err(Error::Init("no correspondence survived the confidence and reprojection gates".into()));
    }
    Ok(cloud_from_points(&positions, &colors))
}

/// Uniform positions in the box and uniform colors in `[0, 1]`.
pub fn init_random<R: Rng + ?Sized>(count: usize, min: [f64; 3], max: [f64; 3], rng: &mut R) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::Config("random init needs at least one point".into()));
    }
    check_box(&min, &max)?;
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        positions.push([0, 1, 2].map(|k| rng.random_range(min[k]..max[k])));
        colors.push([0, 1, 2].map(|_| rng.random_range(0.0..=1.0)));
    }
    Ok(cloud_from_points(&positions, &colors))
}

/// One Gaussian per vertex of a point PLY; missing colors default to mid-gray.
pub fn init_sparse(path: &Path) -> Result<GaussianCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = load_point_ply(&bytes)?;
    if points.positions.is_empty() {
        return Err(Error::Init(format!("{} contains no points", path.display())));
    }
    let colors = points.colors.unwrap_or_else(|| vec![[0.5; 3]; points.positions.len()]);
    Ok(cloud_from_points(&points.positions, &colors))
}

/// Builds a cloud with identity rotations, opacity 0.1 and isotropic scales
/// equal to the mean distance to the nearest neighbors.
pub fn cloud_from_points(positions: &[[f64; 3]], rgb: &[[f64; 3]]) -> GaussianCloud {
    assert_eq!(positions.len(), rgb.len());
    let scales = neighbor_scales(positions, SCALE_NEIGHBORS);
    let mut cloud = GaussianCloud::with_capacity(positions.len());
    for i in 0..positions.len() {
        let ls = scales[i].ln();
        cloud.push(positions[i], [1.0, 0.0, 0.0, 0.0], [ls; 3], logit(INITIAL_OPACITY), rgb[i].map(rgb_to_feature));
    }
    cloud
}

/// Mean distance from each point to its `k` nearest neighbors (brute force).
pub fn neighbor_scales(positions: &[[f64; 3]], k: usize) -> Vec<f64> {
    if positions.len() < 2 {
        return vec![LONE_POINT_SCALE; positions.len()];
    }
    positions
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let p = Vector3::from(*p);
            let mut best = vec![f64::INFINITY; k];
            for (j, q) in positions.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (Vector3::from(*q) - p).norm();
                if d < best[k - 1] {
                    let at = best.partition_point(|&b| b <= d);
                    best.insert(at, d);
                    best.pop();
                }
            }
            let found: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
            (found.iter().sum::<f64>() / found.len() as f64).max(MIN_NEIGHBOR_DISTANCE)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Match;
    use crate::gaussian::sigmoid;
    use crate::ply::{save_point_ply, PointSet};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_views() -> BTreeMap<String, CameraModel> {
        let a = CameraModel::identity(100.0, 100.0, 50.0, 50.0, 100, 100);
        let b = a.translate(0.5);
        BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)])
    }

    fn gray_images(cams: &BTreeMap<String, CameraModel>) -> BTreeMap<String, Image> {
        cams.iter().map(|(id, c)| (id.clone(), Image::filled(c.width, c.height, 3, 0.25))).collect()
    }

    fn exact_set(cams: &BTreeMap<String, CameraModel>, points: &[Vector3<f64>]) -> CorrespondenceSet {
        let (a, b) = (&cams["a"], &cams["b"]);
        let matches = points
            .iter()
            .map(|p| {
                let pa = a.project_point(p).pixel;
                let pb = b.project_point(p).pixel;
                Match { xa: pa.x, ya: pa.y, xb: pb.x, yb: pb.y, confidence: 0.9 }
            })
            .collect();
        CorrespondenceSet { view_a: "a".into(), view_b: "b".into(), matches }
    }

    #[test]
    fn neighbor_scale_oracle() {
        let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 4.0], [10.0, 0.0, 0.0]];
        let s = neighbor_scales(&pts, 3);
        assert!((s[0] - (1.0 + 2.0 + 4.0) / 3.0).abs() < 1e-12);
        let d12 = 5f64.sqrt();
        assert!((s[1] - (1.0 + d12 + 17f64.sqrt()) / 3.0).abs() < 1e-12);
        assert_eq!(neighbor_scales(&pts[..1], 3), vec![LONE_POINT_SCALE]);
        let s = neighbor_scales(&pts[..2], 3);
        assert_eq!(s, vec![1.0, 1.0]);
        let s = neighbor_scales(&[[1.0; 3], [1.0; 3]], 3);
        assert!(s.iter().all(|v| v.ln().is_finite()));
    }

    #[test]
    fn dense_round_trip() {
        let cams = two_views();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(2.0..4.0)))
            .collect();
        let cloud = init_dense(&cams, &gray_images(&cams), &[exact_set(&cams, &points)], &TriangulationGates::default()).unwrap();
        assert_eq!(cloud.len(), 500);
        for (p, q) in cloud.positions.iter().zip(&points) {
            assert!((Vector3::from(*p) - q).norm() < 1e-6);
        }
        for i in 0..cloud.len() {
            assert!((sigmoid(cloud.opacity_logits[i]) - 0.1).abs() < 1e-9);
            assert_eq!(cloud.rotations[i], [1.0, 0.0, 0.0, 0.0]);
            assert!((cloud.activated(i).rgb - Vector3::repeat(0.25)).norm() < 1e-12);
        }
        assert!(cloud.all_finite());
    }

    #[test]
    fn corrupted_matches_fail_the_reprojection_gate() {
        let cams = two_views();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let points: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(2.0..4.0)))
            .collect();
        let mut set = exact_set(&cams, &points);
        for m in set.matches.iter_mut().step_by(5) {
            // off the epipolar line, so no 3D point explains the pair
            m.yb += 50.0;
        }
        let cloud = init_dense(&cams, &gray_images(&cams), &[set], &TriangulationGates::default()).unwrap();
        assert_eq!(cloud.len(), 400);
    }

    #[test]
    fn all_low_confidence_is_an_error() {
        let cams = two_views();
        let mut set = exact_set(&cams, &[Vector3::new(0.0, 0.0, 3.0)]);
        set.matches[0].confidence = 0.0;
        let err = init_dense(&cams, &gray_images(&cams), &[set], &TriangulationGates::default()).unwrap_err();
        assert!(matches!(err, Error::Init(_)));
    }

    #[test]
    fn unknown_view_is_reported() {
        let cams = two_views();
        let mut set = exact_set(&cams, &[Vector3::new(0.0, 0.0, 3.0)]);
        set.view_b = "zzz".into();
        let err = init_dense(&cams, &gray_images(&cams), &[set], &TriangulationGates::default()).unwrap_err();
        assert!(matches!(err, Error::UnknownId(id) if id == "zzz"));
    }

    #[test]
    fn set_order_does_not_matter() {
        let mut cams = two_views();
        cams.insert("c".into(), cams["a"].translate(-0.5));
        let images = gray_images(&cams);
        let p = [Vector3::new(0.1, 0.0, 3.0), Vector3::new(-0.2, 0.1, 2.5)];
        let ab = exact_set(&cams, &p);
        let mut ac = exact_set(&cams, &p[..1]);
        ac.view_b = "c".into();
        for (m, q) in ac.matches.iter_mut().zip(&p) {
            let pc = cams["c"].project_point(q).pixel;
            m.xb = pc.x;
            m.yb = pc.y;
        }
        let g = TriangulationGates::default();
        let one = init_dense(&cams, &images, &[ab.clone(), ac.clone()], &g).unwrap();
        let two = init_dense(&cams, &images, &[ac, ab], &g).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn random_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = init_random(1000, [0.0; 3], [1.0; 3], &mut rng).unwrap();
        assert!(c.positions.iter().flatten().all(|v| (0.0..1.0).contains(v)));
        for i in 0..c.len() {
            let rgb = c.activated(i).rgb;
            assert!(rgb.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        }
        let mut a = ChaCha8Rng::seed_from_u64(8);
        let mut b = ChaCha8Rng::seed_from_u64(8);
        assert_eq!(init_random(50, [0.0; 3], [1.0; 3], &mut a).unwrap(), init_random(50, [0.0; 3], [1.0; 3], &mut b).unwrap());
        let one = init_random(1, [0.0; 3], [1.0; 3], &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        assert!(one.all_finite());
        assert!(init_random(10, [0.0; 3], [1.0, 0.0, 1.0], &mut rng).is_err());
        assert!(init_random(0, [0.0; 3], [1.0; 3], &mut rng).is_err());
    }

    #[test]
    fn sparse_from_ply() {
        let dir = tempfile::tempdir().unwrap();
        let colors: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 / 10.0, 0.5, 1.0 - i as f64 / 20.0]).collect();
        let pts = PointSet { positions: (0..10).map(|i| [i as f64, 0.0, 1.0]).collect(), colors: Some(colors.clone()) };
        let path = dir.path().join("points.ply");
        std::fs::write(&path, save_point_ply(&pts)).unwrap();
        let c = init_sparse(&path).unwrap();
        assert_eq!(c.len(), 10);
        for i in 0..10 {
            let rgb = c.activated(i).rgb;
            for k in 0..3 {
                assert!((rgb[k] - colors[i][k]).abs() <= 1.0 / 255.0);
            }
        }

        let gray = PointSet { positions: vec![[0.0; 3], [1.0; 3]], colors: None };
        std::fs::write(&path, save_point_ply(&gray)).unwrap();
        let c = init_sparse(&path).unwrap();
        assert!(c.colors.iter().flatten().all(|&f| f == 0.0));

        let empty = PointSet { positions: vec![], colors: None };
        std::fs::write(&path, save_point_ply(&empty)).unwrap();
        assert!(init_sparse(&path).is_err());
        assert!(init_sparse(&dir.path().join("missing.ply")).is_err());
    }
}
