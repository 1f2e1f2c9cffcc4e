//! Synthetic benchmark generation: analytic shapes with exact ground-truth
//! normals, Gaussian noise at percent-of-bounding-box levels, and stripe /
//! gradient density variants.

mod io;
mod shapes;

pub use io::{read_cloud, read_normals, write_cloud, write_normals, write_scalar_column};
pub use shapes::{sample_shape, DensityMode, ShapeKind, ShapeSpec};

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{bbox_diagonal, PointCloud};

/// Adds isotropic Gaussian noise with sigma = `noise_pct`/100 of the clean
/// cloud's bounding-box diagonal. Annotated normals are copied verbatim (kept
/// deliberately stale) and `clean_ref` is set to the clean cloud's name.
pub fn add_noise(clean: &PointCloud, noise_pct: f64, seed: u64) -> Result<PointCloud> {
    if noise_pct < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise percentage must be nonnegative, got {}",
            noise_pct
        )));
    }
    if clean.gt_normals.is_none() {
        return Err(Error::InvalidArgument(
            "add_noise requires a cloud with ground-truth normals".into(),
        ));
    }
    let mut noisy = clean.clone();
    noisy.clean_ref = Some(clean.name.clone());
    if noise_pct == 0.0 {
        return Ok(noisy);
    }
    let sigma = noise_pct / 100.0 * bbox_diagonal(&clean.points)?;
    let dist = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise distribution: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut noisy.points {
        *p += Vector3::new(
            dist.sample(&mut rng),
            dist.sample(&mut rng),
            dist.sample(&mut rng),
        );
    }
    Ok(noisy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One benchmark cloud: a noisy file, its clean twin, and the (stale)
/// annotated normals of the noisy cloud. Paths are relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub clean: String,
    pub noisy: String,
    pub normals: String,
    pub category: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {}", e)))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    /// Loads one entry's noisy and clean clouds, with `clean_ref` wired up.
    pub fn load_entry(&self, root: &Path, entry: &ManifestEntry) -> Result<(PointCloud, PointCloud)> {
        let clean = read_cloud(&root.join(&entry.clean))?;
        let mut noisy = read_cloud(&root.join(&entry.noisy))?;
        noisy.clean_ref = Some(clean.name.clone());
        clean.validate()?;
        noisy.validate()?;
        if noisy.len() != clean.len() {
            return Err(Error::LengthMismatch {
                what: format!("noisy '{}' vs clean '{}'", entry.noisy, entry.clean),
                left: noisy.len(),
                right: clean.len(),
            });
        }
        Ok((noisy, clean))
    }
}

/// What to generate: shapes x noise levels (uniform density) plus one
/// noise-free entry per non-uniform density variant.
#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub shapes: Vec<ShapeKind>,
    pub noise_levels: Vec<f64>,
    pub densities: Vec<DensityMode>,
    pub sample_count: usize,
    pub seed: u64,
    pub split: Split,
}

pub fn noise_category(noise_pct: f64) -> String {
    if noise_pct == 0.0 {
        "none".to_string()
    } else {
        format!("noise_{}", noise_pct)
    }
}

fn density_category(mode: DensityMode) -> &'static str {
    match mode {
        DensityMode::Uniform => "none",
        DensityMode::Stripes => "stripe",
        DensityMode::Gradient => "gradient",
    }
}

/// Generates every cloud of the benchmark under `output_dir` and writes
/// `manifest.json`. Fully determined by (spec, seed).
pub fn build_benchmark(output_dir: &Path, spec: &BenchmarkSpec) -> Result<DatasetManifest> {
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut entries = Vec::new();
    let mut sub_seed = spec.seed;
    let mut next_seed = || {
        sub_seed = sub_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        sub_seed
    };

    for kind in &spec.shapes {
        for &density in &spec.densities {
            let clean_name = format!("{}_{}_clean", kind.label(), density.label());
            let shape_spec = ShapeSpec {
                kind: kind.clone(),
                sample_count: spec.sample_count,
                density_mode: density,
                noise_pct: 0.0,
                seed: next_seed(),
            };
            let mut clean = sample_shape(&shape_spec)?;
            clean.name = clean_name.clone();
            write_cloud(&clean, &output_dir.join(&clean_name))?;

            let levels: &[f64] = match density {
                DensityMode::Uniform => &spec.noise_levels,
                // Density variants probe sampling alone; keep them noise-free.
                _ => &[0.0],
            };
            for &level in levels {
                let noisy_name = format!("{}_{}_n{}", kind.label(), density.label(), level);
                let mut noisy = add_noise(&clean, level, next_seed())?;
                noisy.name = noisy_name.clone();
                write_cloud(&noisy, &output_dir.join(&noisy_name))?;
                let category = match density {
                    DensityMode::Uniform => noise_category(level),
                    _ => density_category(density).to_string(),
                };
                entries.push(ManifestEntry {
                    clean: format!("{}", clean_name),
                    noisy: format!("{}", noisy_name),
                    normals: format!("{}.normals", noisy_name),
                    category,
                    split: spec.split,
                });
            }
        }
    }

    let manifest = DatasetManifest {
        split: spec.split,
        entries,
    };
    manifest.save(&manifest_path(output_dir))?;
    Ok(manifest)
}

pub fn manifest_path(output_dir: &Path) -> PathBuf {
    output_dir.join("manifest.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::SpatialIndex;

    fn sphere_spec(n: usize, seed: u64) -> ShapeSpec {
        ShapeSpec {
            kind: ShapeKind::Sphere { radius: 1.0 },
            sample_count: n,
            density_mode: DensityMode::Uniform,
            noise_pct: 0.0,
            seed,
        }
    }

    #[test]
    fn noise_zero_is_identity() {
        let clean = sample_shape(&sphere_spec(200, 1)).unwrap();
        let noisy = add_noise(&clean, 0.0, 99).unwrap();
        assert_eq!(noisy.points, clean.points);
        assert_eq!(noisy.gt_normals, clean.gt_normals);
        assert_eq!(noisy.clean_ref.as_deref(), Some(clean.name.as_str()));
    }

    #[test]
    fn noise_statistics_match_sigma() {
        // Sphere r=1 has bbox diagonal ~ 2*sqrt(3); at 0.6% the per-axis
        // displacement stddev should be ~ 0.006 * diag within 5%.
        let clean = sample_shape(&sphere_spec(100_000, 2)).unwrap();
        let diag = bbox_diagonal(&clean.points).unwrap();
        let noisy = add_noise(&clean, 0.6, 7).unwrap();
        let expected = 0.006 * diag;
        for axis in 0..3 {
            let mut sum2 = 0.0;
            for (p, q) in clean.points.iter().zip(&noisy.points) {
                let d = q[axis] - p[axis];
                sum2 += d * d;
            }
            let std = (sum2 / clean.len() as f64).sqrt();
            assert!(
                (std - expected).abs() / expected < 0.05,
                "axis {}: std {} vs {}",
                axis,
                std,
                expected
            );
        }
    }

    #[test]
    fn noise_deterministic_under_seed() {
        let clean = sample_shape(&sphere_spec(500, 3)).unwrap();
        let a = add_noise(&clean, 1.2, 42).unwrap();
        let b = add_noise(&clean, 1.2, 42).unwrap();
        assert_eq!(a.points, b.points);
    }

    #[test]
    fn negative_noise_rejected() {
        let clean = sample_shape(&sphere_spec(200, 1)).unwrap();
        assert!(add_noise(&clean, -0.1, 0).is_err());
    }

    #[test]
    fn cloud_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clean = sample_shape(&sphere_spec(300, 5)).unwrap();
        let prefix = dir.path().join("sphere");
        write_cloud(&clean, &prefix).unwrap();
        let back = read_cloud(&prefix).unwrap();
        assert_eq!(back.len(), clean.len());
        for (a, b) in clean.points.iter().zip(&back.points) {
            assert!((a - b).norm() < 1e-8);
        }
        for (a, b) in clean
            .gt_normals
            .as_ref()
            .unwrap()
            .iter()
            .zip(back.gt_normals.as_ref().unwrap())
        {
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn mismatched_normals_count_errors() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("bad");
        std::fs::write(prefix.with_extension("xyz"), "0 0 0\n1 0 0\n").unwrap();
        std::fs::write(prefix.with_extension("normals"), "0 0 1\n").unwrap();
        let err = read_cloud(&prefix).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('1'), "{}", msg);
    }

    #[test]
    fn nan_coordinate_errors_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("nan");
        std::fs::write(prefix.with_extension("xyz"), "0 0 0\n0 nan 0\n").unwrap();
        let err = read_cloud(&prefix).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {:?}", other),
        }
    }

    #[test]
    fn benchmark_layout_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let spec = BenchmarkSpec {
            shapes: vec![
                ShapeKind::Sphere { radius: 1.0 },
                ShapeKind::Cube { edge: 2.0 },
                ShapeKind::Torus {
                    major: 1.0,
                    minor: 0.3,
                },
            ],
            noise_levels: vec![0.0, 0.12, 0.6, 1.2],
            densities: vec![DensityMode::Uniform],
            sample_count: 300,
            seed: 77,
            split: Split::Train,
        };
        let manifest = build_benchmark(dir.path(), &spec).unwrap();
        assert_eq!(manifest.entries.len(), 12);

        let reread = DatasetManifest::load(&manifest_path(dir.path())).unwrap();
        assert_eq!(reread, manifest);

        // Every noisy entry resolves to an index-aligned clean twin.
        for entry in &manifest.entries {
            let (noisy, clean) = manifest.load_entry(dir.path(), entry).unwrap();
            assert_eq!(noisy.len(), clean.len());
            assert_eq!(noisy.clean_ref.as_deref(), Some(clean.name.as_str()));
        }
    }

    #[test]
    fn zero_noise_correspondence_is_identity() {
        // For a noise-free pair each point's nearest clean twin is itself.
        let clean = sample_shape(&sphere_spec(500, 11)).unwrap();
        let noisy = add_noise(&clean, 0.0, 0).unwrap();
        let index = SpatialIndex::build(&clean.points).unwrap();
        for (i, p) in noisy.points.iter().enumerate() {
            let nn = index.knn(p, 1).unwrap();
            assert_eq!(nn[0].0, i);
            assert_eq!(nn[0].1, 0.0);
        }
    }
}
