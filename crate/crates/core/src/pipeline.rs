//! End-to-end estimation and evaluation: classical baseline, network
//! inference with frame back-mapping, refinement of externally supplied
//! normals, and benchmark report generation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{extract_patch, PointCloud, SpatialIndex};
use crate::metrics::{self, CategoryRecord, EvalReport};
use crate::net::NormalNet;
use crate::orient::{init_oriented_normals, NormalSource, OrientedNormalField};
use crate::synthdata::{self, DatasetManifest};
use crate::train::{self, apply_rotation_transpose, sample_input};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationMode {
    BaselinePcaMst,
    Network,
    RefineExternal,
}

/// Wall-clock decomposition of one estimation run.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Timing {
    pub init_seconds: f64,
    pub inference_seconds: f64,
}

/// Record of one estimation invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationRun {
    pub input: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub mode: EstimationMode,
    pub init_normals: Option<PathBuf>,
    pub output: PathBuf,
    pub timing: Timing,
}

impl EstimationRun {
    pub fn validate(&self) -> Result<()> {
        if matches!(
            self.mode,
            EstimationMode::Network | EstimationMode::RefineExternal
        ) && self.checkpoint.is_none()
        {
            return Err(Error::InvalidArgument(
                "network and refinement modes require a checkpoint".into(),
            ));
        }
        if self.mode == EstimationMode::RefineExternal && self.init_normals.is_none() {
            return Err(Error::InvalidArgument(
                "refinement mode requires an initial normals file".into(),
            ));
        }
        if self.timing.init_seconds < 0.0 || self.timing.inference_seconds < 0.0 {
            return Err(Error::InvalidArgument("timings must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A refinement model: either a trained network or a pass-through stub that
/// predicts the local PCA normal with an always-positive sign decision
/// (plumbing identity checks).
pub enum Model {
    Learned(NormalNet),
    Stub,
}

impl Model {
    /// Loads a trained model from a checkpoint, frozen for inference.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let loaded = train::load_checkpoint(checkpoint)?;
        let net = NormalNet::new(loaded.model_config)?;
        net.load_snapshot(&loaded.params)?;
        net.set_trainable(false);
        Ok(Model::Learned(net))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    /// Neighborhood sizes of the classical initialization.
    pub k_pca: usize,
    pub k_graph: usize,
    /// Sampling seed of the cloud-branch subsample.
    pub seed: u64,
    /// Only estimate the first N points (quick runs); None = all points.
    pub subset: Option<usize>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        Self {
            k_pca: 16,
            k_graph: 8,
            seed: 0,
            subset: None,
        }
    }
}

/// Classical PCA + MST estimation.
pub fn estimate_baseline(
    cloud: &PointCloud,
    k_pca: usize,
    k_graph: usize,
) -> Result<OrientedNormalField> {
    init_oriented_normals(cloud, k_pca, k_graph)
}

fn query_count(cloud: &PointCloud, subset: Option<usize>) -> usize {
    subset.map_or(cloud.len(), |n| n.min(cloud.len()))
}

/// Shared refinement loop: per query point, extract the patch and cloud
/// inputs, run the model, and map the prediction back to the world frame
/// with the initialization's sign and the model's sign decision.
fn refine_with_init(
    cloud: &PointCloud,
    index: &SpatialIndex,
    init: &[Vector3<f64>],
    model: &Model,
    opts: &EstimateOptions,
    source: NormalSource,
) -> Result<OrientedNormalField> {
    if init.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "initial normals vs cloud".into(),
            left: init.len(),
            right: cloud.len(),
        });
    }
    let n_queries = query_count(cloud, opts.subset);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut warned = false;
    let mut normals = Vec::with_capacity(n_queries);
    let mut signs = Vec::with_capacity(n_queries);

    for i in 0..n_queries {
        let (n_world, sign) = match model {
            Model::Stub => {
                let patch = extract_patch(cloud, index, i, opts.k_pca.min(cloud.len()))?;
                let n_pca = patch.pca_normal();
                let s: f64 = if n_pca.dot(&init[i]) < 0.0 { -1.0 } else { 1.0 };
                (s * n_pca, s)
            }
            Model::Learned(net) => {
                let input = sample_input(
                    cloud,
                    index,
                    i,
                    net.config.n_p.min(cloud.len()),
                    net.config.n_d,
                    &mut rng,
                    &mut warned,
                )?;
                let n_init_local = input.patch.direction_to_local(&init[i]);
                let out = net.forward(&input.patch_local, &input.cloud_local, Some(n_init_local))?;
                let r = out.r_qstn.to_vec();
                let nh = out.n_hat_u.to_vec();
                let n_local =
                    apply_rotation_transpose(&r, &Vector3::new(nh[0], nh[1], nh[2]));
                let s_plus = out.s_plus.item()?;
                let s_minus = out.s_minus.item()?;
                let s_hat = if s_plus >= s_minus { 1.0 } else { -1.0 };
                let sign = out.sgn_init * s_hat;
                (sign * input.patch.direction_to_world(&n_local), sign)
            }
        };
        normals.push(n_world);
        signs.push(if sign < 0.0 { -1i8 } else { 1i8 });
    }
    Ok(OrientedNormalField {
        normals,
        signs,
        source,
    })
}

/// Network estimation: classical initialization followed by per-point
/// refinement. Returns the field and the init/inference timing split.
pub fn estimate_network(
    cloud: &PointCloud,
    model: &Model,
    opts: &EstimateOptions,
) -> Result<(OrientedNormalField, Timing)> {
    let t0 = Instant::now();
    let index = SpatialIndex::build(&cloud.points)?;
    let init = estimate_baseline(cloud, opts.k_pca, opts.k_graph)?;
    let init_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let field = refine_with_init(cloud, &index, &init.normals, model, opts, NormalSource::Network)?;
    Ok((
        field,
        Timing {
            init_seconds,
            inference_seconds: t1.elapsed().as_secs_f64(),
        },
    ))
}

/// Renormalizes near-unit vectors; rejects anything off by more than 1e-3.
fn normalize_init(init: &mut [Vector3<f64>]) -> Result<()> {
    for (i, n) in init.iter_mut().enumerate() {
        let norm = n.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidArgument(format!(
                "initial normal {} is not unit length (|n| = {})",
                i, norm
            )));
        }
        *n /= norm;
    }
    Ok(())
}

/// Refinement of externally estimated normals read from `init_path`.
pub fn refine_external(
    cloud: &PointCloud,
    init_path: &Path,
    model: &Model,
    opts: &EstimateOptions,
) -> Result<(OrientedNormalField, Timing)> {
    let t0 = Instant::now();
    let mut init = synthdata::read_normals(init_path)?;
    normalize_init(&mut init)?;
    let index = SpatialIndex::build(&cloud.points)?;
    let init_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let field = refine_with_init(cloud, &index, &init, model, opts, NormalSource::External)?;
    Ok((
        field,
        Timing {
            init_seconds,
            inference_seconds: t1.elapsed().as_secs_f64(),
        },
    ))
}

fn rms_deg(angles_deg: &[f64]) -> f64 {
    let sum: f64 = angles_deg.iter().map(|a| a * a).sum();
    (sum / angles_deg.len() as f64).sqrt()
}

struct CategoryPool {
    rmse: Vec<f64>,
    cnd: Vec<f64>,
    o_rmse: Vec<f64>,
    o_cnd: Vec<f64>,
    agree: usize,
    total: usize,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    /// Entries whose prediction file was absent.
    pub missing: Vec<String>,
}

/// Evaluates predictions (`<noisy>.normals` under `pred_dir`) against the
/// manifest. Per-point unoriented nearest-clean angle errors are exported
/// next to each prediction as `<noisy>.err`. Entries without a prediction
/// are reported and skipped.
pub fn evaluate(
    manifest: &DatasetManifest,
    data_root: &Path,
    pred_dir: &Path,
    model_id: &str,
) -> Result<EvalOutcome> {
    use std::collections::BTreeMap;

    let mut pools: BTreeMap<String, CategoryPool> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut missing = Vec::new();

    for entry in &manifest.entries {
        let pred_path = pred_dir.join(format!("{}.normals", entry.noisy));
        if !pred_path.exists() {
            eprintln!(
                "warning: no prediction for '{}' (expected {})",
                entry.noisy,
                pred_path.display()
            );
            missing.push(entry.noisy.clone());
            continue;
        }
        let (noisy, clean) = manifest.load_entry(data_root, entry)?;
        let pred = synthdata::read_normals(&pred_path)?;
        if pred.len() != noisy.len() {
            return Err(Error::LengthMismatch {
                what: format!("prediction '{}' vs cloud", entry.noisy),
                left: pred.len(),
                right: noisy.len(),
            });
        }
        let stale = noisy
            .gt_normals
            .as_ref()
            .ok_or(Error::EmptyInput("evaluated cloud has no annotated normals"))?;
        let clean_gt = clean
            .gt_normals
            .as_ref()
            .ok_or(Error::EmptyInput("clean cloud has no annotated normals"))?;

        let cnd_u = metrics::cnd_angles(&pred, &noisy, &clean, false)?;
        let cnd_o = metrics::cnd_angles(&pred, &noisy, &clean, true)?;
        synthdata::write_scalar_column(&cnd_u, &pred_dir.join(format!("{}.err", entry.noisy)))?;

        let corr = metrics::nearest_clean(&noisy, &clean)?;
        if !order.contains(&entry.category) {
            order.push(entry.category.clone());
        }
        let pool = pools.entry(entry.category.clone()).or_insert(CategoryPool {
            rmse: Vec::new(),
            cnd: Vec::new(),
            o_rmse: Vec::new(),
            o_cnd: Vec::new(),
            agree: 0,
            total: 0,
        });
        for (i, p) in pred.iter().enumerate() {
            let p = p / p.norm();
            let cos = stale[i].dot(&p);
            pool.rmse.push(cos.abs().clamp(-1.0, 1.0).acos().to_degrees());
            pool.o_rmse.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
            if p.dot(&clean_gt[corr.clean_index[i]]) > 0.0 {
                pool.agree += 1;
            }
            pool.total += 1;
        }
        pool.cnd.extend(cnd_u);
        pool.o_cnd.extend(cnd_o);
    }

    let categories: Vec<CategoryRecord> = order
        .iter()
        .map(|cat| {
            let p = &pools[cat];
            CategoryRecord {
                category: cat.clone(),
                rmse_deg: rms_deg(&p.rmse),
                cnd_deg: rms_deg(&p.cnd),
                oriented_rmse_deg: rms_deg(&p.o_rmse),
                oriented_cnd_deg: rms_deg(&p.o_cnd),
                sign_agreement_ratio: p.agree as f64 / p.total as f64,
            }
        })
        .collect();
    let dataset_id = match manifest.split {
        synthdata::Split::Train => "train",
        synthdata::Split::Test => "test",
    };
    // Empty timestamp keeps reports byte-reproducible.
    let report = EvalReport::from_categories(model_id, dataset_id, "", categories)?;
    Ok(EvalOutcome { report, missing })
}
