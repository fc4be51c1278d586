//! Posed RGBD view sets and their on-disk layout.
//!
//! A dataset directory holds one `scene_NNNN` folder per scene with
//! `scene.json` (primitives, caption, cameras) and per-view
//! `view_NNN.rgb.imgf` / `view_NNN.depth.imgf` files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, CoreError, Result};
use crate::geometry::{CameraPose, CameraRecord, Intrinsics, Vec3};
use crate::nn::{derive_seed, seeded};
use crate::raster::Image;
use crate::renderer::RenderConfig;
use crate::scene::{render_analytic, SceneSpec};

pub const CAMERA_RADIUS: f64 = 2.0;
pub const CAMERA_FOV_DEG: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: Image,
    /// Distance along each pixel ray to the first surface; 0 is background.
    pub depth: Image,
    pub pose: CameraPose,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiViewSet {
    pub views: Vec<View>,
}

impl MultiViewSet {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.views.first() else {
            return Err(CoreError::Empty("view set has no views"));
        };
        let (w, h) = (first.intrinsics.width, first.intrinsics.height);
        for (i, v) in self.views.iter().enumerate() {
            let dims_ok = (v.intrinsics.width, v.intrinsics.height) == (w, h)
                && (v.image.width(), v.image.height(), v.image.channels()) == (w, h, 3)
                && (v.depth.width(), v.depth.height(), v.depth.channels()) == (w, h, 1);
            if !dims_ok {
                return Err(invalid("view set", format!("view {i} does not match {w}x{h}")));
            }
            if v.depth.data().iter().any(|&d| !(d >= 0.0)) {
                return Err(invalid("view set", format!("view {i} has negative depth")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Views at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> MultiViewSet {
        MultiViewSet { views: idx.iter().map(|&i| self.views[i].clone()).collect() }
    }
}

/// Look-at cameras at `CAMERA_RADIUS` with uniformly random directions.
pub fn random_cameras(rng: &mut impl Rng, count: usize, width: usize, height: usize) -> Result<Vec<(CameraPose, Intrinsics)>> {
    let k = Intrinsics::new(CAMERA_FOV_DEG, width, height)?;
    (0..count)
        .map(|_| {
            let dir = loop {
                let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                if v.norm() > 1e-6 {
                    break v.normalize();
                }
            };
            Ok((CameraPose::look_at(dir * CAMERA_RADIUS, Vec3::zeros(), Vec3::y())?, k))
        })
        .collect()
}

/// Analytic RGBD renders; view `i` jitters with seed `derive_seed(cfg.seed, i)`.
pub fn render_views(scene: &SceneSpec, cameras: &[(CameraPose, Intrinsics)], cfg: &RenderConfig) -> Result<MultiViewSet> {
    let mut views = Vec::with_capacity(cameras.len());
    for (i, (pose, k)) in cameras.iter().enumerate() {
        let vcfg = RenderConfig { seed: derive_seed(cfg.seed, i as u64), ..cfg.clone() };
        let r = render_analytic(scene, pose, k, &vcfg)?;
        views.push(View { image: r.rgb, depth: r.depth, pose: *pose, intrinsics: *k });
    }
    Ok(MultiViewSet { views })
}

/// Scene with cameras and caption, rendered with `views_per_scene` random views.
pub fn synthesize(scene: &SceneSpec, views: usize, width: usize, height: usize, seed: u64, cfg: &RenderConfig) -> Result<MultiViewSet> {
    let cams = random_cameras(&mut seeded(seed), views, width, height)?;
    render_views(scene, &cams, &RenderConfig { seed: derive_seed(seed, u64::MAX), ..cfg.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub caption: String,
    #[serde(flatten)]
    pub scene: SceneSpec,
    pub cameras: Vec<CameraRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub views_per_scene: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

fn view_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("view_{i:03}.rgb.imgf")), dir.join(format!("view_{i:03}.depth.imgf")))
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:04}"))
}

/// Renders and writes every scene; returns the scene directories.
pub fn make_dataset(scenes: &[SceneSpec], cfg: &DatasetConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.views_per_scene == 0 {
        return Err(invalid("views_per_scene", "must be at least 1"));
    }
    if scenes.is_empty() {
        return Err(CoreError::Empty("no scenes to render"));
    }
    let mut dirs = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        scene.validate()?;
        let dir = scene_dir(out, si);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let set = synthesize(scene, cfg.views_per_scene, cfg.width, cfg.height, derive_seed(cfg.seed, si as u64), &cfg.render)?;
        for (vi, v) in set.views.iter().enumerate() {
            let (rgb, depth) = view_paths(&dir, vi);
            v.image.save(rgb)?;
            v.depth.save(depth)?;
        }
        let file = SceneFile {
            caption: scene.caption(),
            scene: scene.clone(),
            cameras: set.views.iter().map(|v| CameraRecord::new(&v.pose, &v.intrinsics)).collect(),
        };
        let path = dir.join("scene.json");
        let text = serde_json::to_string_pretty(&file).map_err(|source| CoreError::Json { path: path.clone(), source })?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn load_scene_dir(dir: &Path) -> Result<(SceneFile, MultiViewSet)> {
    let path = dir.join("scene.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|source| CoreError::Json { path: path.clone(), source })?;
    let mut views = Vec::with_capacity(file.cameras.len());
    for (i, cam) in file.cameras.iter().enumerate() {
        let (pose, intrinsics) = cam.decode()?;
        let (rgb, depth) = view_paths(dir, i);
        views.push(View { image: Image::load(rgb)?, depth: Image::load(depth)?, pose, intrinsics });
    }
    let set = MultiViewSet { views };
    set.validate()?;
    Ok((file, set))
}

/// Every `scene_*` directory under `root`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("scene_")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CoreError::Empty("dataset directory has no scene_* folders"));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::scene_gen;

    #[test]
    fn depth_bounds_for_inscribed_objects() {
        let scenes = scene_gen(2, 3, 2).unwrap();
        let cfg = RenderConfig { samples_per_ray: 16, ..Default::default() };
        for (i, s) in scenes.iter().enumerate() {
            let set = synthesize(s, 4, 16, 16, i as u64, &cfg).unwrap();
            set.validate().unwrap();
            let lo = CAMERA_RADIUS - 3f64.sqrt();
            let hi = CAMERA_RADIUS + 3f64.sqrt();
            let mut hits = 0;
            for v in &set.views {
                for &d in v.depth.data() {
                    if d > 0.0 {
                        hits += 1;
                        assert!((lo as f32..=hi as f32).contains(&d), "{d}");
                    }
                }
            }
            assert!(hits > 0);
        }
    }

    #[test]
    fn cameras_sit_on_the_sphere_and_face_the_origin() {
        let cams = random_cameras(&mut seeded(1), 20, 8, 8).unwrap();
        for (p, _) in cams {
            assert!((p.position().norm() - CAMERA_RADIUS).abs() < 1e-12);
            let fwd = -p.rotation().column(2);
            assert!((fwd + p.position().normalize()).norm() < 1e-9);
        }
    }

    #[test]
    fn dataset_round_trip_on_disk() {
        let tmp = tempfile::tempdir().unwrap();
        let scenes = scene_gen(4, 2, 1).unwrap();
        let cfg = DatasetConfig { views_per_scene: 1, width: 8, height: 6, seed: 3, render: RenderConfig { samples_per_ray: 8, ..Default::default() } };
        let dirs = make_dataset(&scenes, &cfg, tmp.path()).unwrap();
        assert_eq!(list_scene_dirs(tmp.path()).unwrap(), dirs);
        let (file, set) = load_scene_dir(&dirs[1]).unwrap();
        assert_eq!(file.scene, scenes[1]);
        assert_eq!(file.caption, scenes[1].caption());
        assert_eq!(set.len(), 1);
        let again = synthesize(&scenes[1], 1, 8, 6, derive_seed(3, 1), &cfg.render).unwrap();
        assert_eq!(again.views[0].image, set.views[0].image);
    }
}
