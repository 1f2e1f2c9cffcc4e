//! Analytic surface samplers with exact outward normals.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::PointCloud;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere { radius: f64 },
    Torus { major: f64, minor: f64 },
    Cube { edge: f64 },
    Cylinder { radius: f64, height: f64 },
    /// Parallel square sheets stacked along z, `gap` apart (thin-sheet
    /// stress case). All sheet normals point +z.
    Sheets { edge: f64, gap: f64, count: usize },
}

impl ShapeKind {
    pub fn label(&self) -> &'static str {
        match self {
            ShapeKind::Sphere { .. } => "sphere",
            ShapeKind::Torus { .. } => "torus",
            ShapeKind::Cube { .. } => "cube",
            ShapeKind::Cylinder { .. } => "cylinder",
            ShapeKind::Sheets { .. } => "sheets",
        }
    }

    /// Analytic x extent, used by the gradient density ramp.
    fn x_extent(&self) -> (f64, f64) {
        match *self {
            ShapeKind::Sphere { radius } => (-radius, radius),
            ShapeKind::Torus { major, minor } => (-(major + minor), major + minor),
            ShapeKind::Cube { edge } => (-edge / 2.0, edge / 2.0),
            ShapeKind::Cylinder { radius, .. } => (-radius, radius),
            ShapeKind::Sheets { edge, .. } => (-edge / 2.0, edge / 2.0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShapeKind::Sphere { radius } => radius > 0.0,
            ShapeKind::Torus { major, minor } => major > 0.0 && minor > 0.0 && minor < major,
            ShapeKind::Cube { edge } => edge > 0.0,
            ShapeKind::Cylinder { radius, height } => radius > 0.0 && height > 0.0,
            ShapeKind::Sheets { edge, gap, count } => edge > 0.0 && gap > 0.0 && count >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "invalid shape parameters: {:?}",
                self
            )))
        }
    }

    /// One surface sample: (point, unit outward normal, stripe parameter in
    /// [0, 1)). May consume a variable number of rng draws (rejection).
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vector3<f64>, Vector3<f64>, f64) {
        match *self {
            ShapeKind::Sphere { radius } => loop {
                let v = Vector3::new(
                    gauss(rng),
                    gauss(rng),
                    gauss(rng),
                );
                if v.norm() > 1e-6 {
                    let dir = v.normalize();
                    let u = (dir.y.atan2(dir.x) / TAU).rem_euclid(1.0);
                    return (dir * radius, dir, u);
                }
            },
            ShapeKind::Torus { major, minor } => loop {
                let theta = rng.random::<f64>() * TAU;
                let phi = rng.random::<f64>() * TAU;
                // Area element scales with (R + r cos phi); rejection keeps
                // the surface sampling uniform.
                let accept = (major + minor * phi.cos()) / (major + minor);
                if rng.random::<f64>() > accept {
                    continue;
                }
                let p = Vector3::new(
                    (major + minor * phi.cos()) * theta.cos(),
                    (major + minor * phi.cos()) * theta.sin(),
                    minor * phi.sin(),
                );
                let n = Vector3::new(
                    phi.cos() * theta.cos(),
                    phi.cos() * theta.sin(),
                    phi.sin(),
                );
                return (p, n.normalize(), theta / TAU);
            },
            ShapeKind::Cube { edge } => {
                let h = edge / 2.0;
                let face = rng.random_range(0..6u8);
                let a = (rng.random::<f64>() * 2.0 - 1.0) * h;
                let b = (rng.random::<f64>() * 2.0 - 1.0) * h;
                let (p, n) = match face {
                    0 => (Vector3::new(h, a, b), Vector3::x()),
                    1 => (Vector3::new(-h, a, b), -Vector3::x()),
                    2 => (Vector3::new(a, h, b), Vector3::y()),
                    3 => (Vector3::new(a, -h, b), -Vector3::y()),
                    4 => (Vector3::new(a, b, h), Vector3::z()),
                    _ => (Vector3::new(a, b, -h), -Vector3::z()),
                };
                let u = (p.x / edge + 0.5).clamp(0.0, 1.0 - 1e-12);
                (p, n, u)
            }
            ShapeKind::Cylinder { radius, height } => {
                let side_area = TAU * radius * height;
                let cap_area = std::f64::consts::PI * radius * radius;
                let total = side_area + 2.0 * cap_area;
                let pick = rng.random::<f64>() * total;
                let theta = rng.random::<f64>() * TAU;
                let u = theta / TAU;
                if pick < side_area {
                    let z = (rng.random::<f64>() - 0.5) * height;
                    (
                        Vector3::new(radius * theta.cos(), radius * theta.sin(), z),
                        Vector3::new(theta.cos(), theta.sin(), 0.0),
                        u,
                    )
                } else {
                    let r = radius * rng.random::<f64>().sqrt();
                    let z = if pick < side_area + cap_area {
                        height / 2.0
                    } else {
                        -height / 2.0
                    };
                    (
                        Vector3::new(r * theta.cos(), r * theta.sin(), z),
                        Vector3::new(0.0, 0.0, z.signum()),
                        u,
                    )
                }
            }
            ShapeKind::Sheets { edge, gap, count } => {
                let h = edge / 2.0;
                let sheet = rng.random_range(0..count);
                let x = (rng.random::<f64>() * 2.0 - 1.0) * h;
                let y = (rng.random::<f64>() * 2.0 - 1.0) * h;
                let z = (sheet as f64 - (count as f64 - 1.0) / 2.0) * gap;
                let u = (x / edge + 0.5).clamp(0.0, 1.0 - 1e-12);
                (Vector3::new(x, y, z), Vector3::z(), u)
            }
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityMode {
    Uniform,
    Stripes,
    Gradient,
}

impl DensityMode {
    pub fn label(&self) -> &'static str {
        match self {
            DensityMode::Uniform => "uniform",
            DensityMode::Stripes => "stripes",
            DensityMode::Gradient => "gradient",
        }
    }
}

/// Stripe removal: four periodic parameter bands covering 30% of the domain.
pub const STRIPE_PERIOD: f64 = 0.25;
pub const STRIPE_BAND_WIDTH: f64 = 0.075;

fn stripe_removed(u: f64) -> bool {
    u.rem_euclid(STRIPE_PERIOD) >= STRIPE_PERIOD - STRIPE_BAND_WIDTH
}

/// Gradient density: acceptance ramps linearly along x from 1.0 down to 0.05.
pub const GRADIENT_MIN_ACCEPT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub sample_count: usize,
    pub density_mode: DensityMode,
    /// Percent of the bounding-box diagonal; applied separately by
    /// [`super::add_noise`], recorded here for manifest bookkeeping.
    pub noise_pct: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        self.kind.validate()?;
        if self.sample_count < 100 {
            return Err(Error::InvalidArgument(format!(
                "sample_count must be >= 100, got {}",
                self.sample_count
            )));
        }
        if !(0.0..=5.0).contains(&self.noise_pct) {
            return Err(Error::InvalidArgument(format!(
                "noise_pct must be in [0, 5], got {}",
                self.noise_pct
            )));
        }
        Ok(())
    }
}

/// Samples a clean cloud with exact analytic normals. `sample_count` surface
/// samples are drawn; stripe and gradient modes then drop a subset, so those
/// clouds come out smaller.
pub fn sample_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (x_min, x_max) = spec.kind.x_extent();
    let mut points = Vec::with_capacity(spec.sample_count);
    let mut normals = Vec::with_capacity(spec.sample_count);
    for _ in 0..spec.sample_count {
        let (p, n, u) = spec.kind.sample(&mut rng);
        let keep = match spec.density_mode {
            DensityMode::Uniform => true,
            DensityMode::Stripes => !stripe_removed(u),
            DensityMode::Gradient => {
                let t = ((p.x - x_min) / (x_max - x_min)).clamp(0.0, 1.0);
                let accept = 1.0 - (1.0 - GRADIENT_MIN_ACCEPT) * t;
                rng.random::<f64>() < accept
            }
        };
        if keep {
            points.push(p);
            normals.push(n);
        }
    }
    if points.is_empty() {
        return Err(Error::Degenerate(
            "density filtering removed every sample".into(),
        ));
    }
    let mut cloud = PointCloud::new(
        format!("{}_{}", spec.kind.label(), spec.density_mode.label()),
        points,
    );
    cloud.gt_normals = Some(normals);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ShapeKind, n: usize, mode: DensityMode, seed: u64) -> ShapeSpec {
        ShapeSpec {
            kind,
            sample_count: n,
            density_mode: mode,
            noise_pct: 0.0,
            seed,
        }
    }

    #[test]
    fn sphere_points_on_surface_with_radial_normals() {
        let cloud = sample_shape(&spec(
            ShapeKind::Sphere { radius: 1.0 },
            1000,
            DensityMode::Uniform,
            4,
        ))
        .unwrap();
        let normals = cloud.gt_normals.as_ref().unwrap();
        for (p, n) in cloud.points.iter().zip(normals) {
            assert!((p.norm() - 1.0).abs() < 1e-9);
            assert!((p - n).norm() < 1e-9);
        }
    }

    #[test]
    fn analytic_normals_unit_for_all_shapes() {
        let kinds = vec![
            ShapeKind::Sphere { radius: 2.5 },
            ShapeKind::Torus {
                major: 1.0,
                minor: 0.3,
            },
            ShapeKind::Cube { edge: 1.7 },
            ShapeKind::Cylinder {
                radius: 0.8,
                height: 2.0,
            },
            ShapeKind::Sheets {
                edge: 1.0,
                gap: 0.05,
                count: 3,
            },
        ];
        for kind in kinds {
            let cloud = sample_shape(&spec(kind, 500, DensityMode::Uniform, 9)).unwrap();
            for n in cloud.gt_normals.as_ref().unwrap() {
                assert!((n.norm() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn torus_normal_matches_finite_difference_oracle() {
        // Differentiate the parametrization numerically and compare the cross
        // product of the tangents against the analytic normal.
        let (major, minor) = (1.0, 0.3);
        let surf = |theta: f64, phi: f64| {
            Vector3::new(
                (major + minor * phi.cos()) * theta.cos(),
                (major + minor * phi.cos()) * theta.sin(),
                minor * phi.sin(),
            )
        };
        let h = 1e-6;
        for i in 0..50 {
            let theta = i as f64 * 0.13;
            let phi = i as f64 * 0.29;
            let dt = (surf(theta + h, phi) - surf(theta - h, phi)) / (2.0 * h);
            let dp = (surf(theta, phi + h) - surf(theta, phi - h)) / (2.0 * h);
            let fd_normal = dt.cross(&dp).normalize();
            let analytic = Vector3::new(
                phi.cos() * theta.cos(),
                phi.cos() * theta.sin(),
                phi.sin(),
            );
            let aligned = if fd_normal.dot(&analytic) < 0.0 {
                -fd_normal
            } else {
                fd_normal
            };
            assert!((aligned - analytic).norm() < 1e-5);
        }
    }

    #[test]
    fn stripes_remove_bands() {
        let uniform = sample_shape(&spec(
            ShapeKind::Sphere { radius: 1.0 },
            5000,
            DensityMode::Uniform,
            21,
        ))
        .unwrap();
        let striped = sample_shape(&spec(
            ShapeKind::Sphere { radius: 1.0 },
            5000,
            DensityMode::Stripes,
            21,
        ))
        .unwrap();
        assert!(striped.len() < uniform.len());

        // Histogram oracle: the removed azimuth bands must be empty.
        let mut hist = [0usize; 40];
        for p in &striped.points {
            let u = (p.y.atan2(p.x) / TAU).rem_euclid(1.0);
            hist[(u * 40.0) as usize % 40] += 1;
        }
        for (bin, &count) in hist.iter().enumerate() {
            let u = (bin as f64 + 0.5) / 40.0;
            if stripe_removed(u) {
                assert_eq!(count, 0, "bin {} should be empty", bin);
            } else {
                assert!(count > 0, "bin {} should be populated", bin);
            }
        }
    }

    #[test]
    fn gradient_thins_high_x() {
        let cloud = sample_shape(&spec(
            ShapeKind::Cube { edge: 2.0 },
            20_000,
            DensityMode::Gradient,
            8,
        ))
        .unwrap();
        let low = cloud.points.iter().filter(|p| p.x < -0.5).count();
        let high = cloud.points.iter().filter(|p| p.x > 0.5).count();
        assert!(
            (high as f64) < 0.5 * low as f64,
            "low {} vs high {}",
            low,
            high
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let a = sample_shape(&spec(
            ShapeKind::Torus {
                major: 1.0,
                minor: 0.3,
            },
            500,
            DensityMode::Gradient,
            123,
        ))
        .unwrap();
        let b = sample_shape(&spec(
            ShapeKind::Torus {
                major: 1.0,
                minor: 0.3,
            },
            500,
            DensityMode::Gradient,
            123,
        ))
        .unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.gt_normals, b.gt_normals);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(sample_shape(&spec(
            ShapeKind::Sphere { radius: 1.0 },
            50,
            DensityMode::Uniform,
            0
        ))
        .is_err());
        assert!(sample_shape(&ShapeSpec {
            kind: ShapeKind::Sheets {
                edge: 1.0,
                gap: 0.0,
                count: 3
            },
            sample_count: 200,
            density_mode: DensityMode::Uniform,
            noise_pct: 0.0,
            seed: 0,
        })
        .is_err());
        assert!(sample_shape(&ShapeSpec {
            kind: ShapeKind::Sphere { radius: 1.0 },
            sample_count: 200,
            density_mode: DensityMode::Uniform,
            noise_pct: 9.0,
            seed: 0,
        })
        .is_err());
    }
}
