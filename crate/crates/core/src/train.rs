//! Desk-scale training loop: per-cloud query sampling, batched gradient
//! accumulation, AdamW with cosine annealing, checkpointing, and
//! deterministic resumption.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{extract_patch, Patch, PointCloud, SpatialIndex};
use crate::loss::{self, LossConfig, LossParts};
use crate::metrics::{nearest_clean, Correspondence};
use crate::net::{ForwardOutput, ModelConfig, NormalNet};
use crate::orient::init_oriented_normals;
use crate::synthdata::DatasetManifest;
use crate::tensor::{
    adamw_step, clip_grad_norm, load_arrays, save_arrays, ArrayMap, OptimizerState,
};

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Query points drawn per cloud per epoch.
    pub queries_per_shape: usize,
    pub seed: u64,
    /// Checkpoint cadence in epochs (the final epoch always checkpoints).
    pub checkpoint_every: usize,
    /// Neighborhood sizes of the classical initializer.
    pub init_k_pca: usize,
    pub init_k_graph: usize,
    /// Feed the classical initialization's sign to the sign head; off feeds
    /// a fixed +1 context.
    pub use_mst_init: bool,
    /// Train the flipped-feature sample (the negative head and the
    /// contrastive part); off drops both from the loss graph.
    pub use_feature_augmentation: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            base_lr: 5e-4,
            weight_decay: 1e-4,
            queries_per_shape: 64,
            seed: 0,
            checkpoint_every: 10,
            init_k_pca: 16,
            init_k_graph: 8,
            use_mst_init: true,
            use_feature_augmentation: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("queries_per_shape", self.queries_per_shape),
            ("checkpoint_every", self.checkpoint_every),
            ("init_k_pca", self.init_k_pca),
            ("init_k_graph", self.init_k_graph),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{} must be positive", name)));
            }
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and weight decay nonnegative".into(),
            ));
        }
        self.loss.validate()
    }
}

/// Network inputs for one query point, all in the patch's normalized PCA
/// frame with points sorted ascending by distance to the query.
pub struct SampledInput {
    pub patch: Patch,
    pub patch_local: Vec<Vector3<f64>>,
    pub cloud_local: Vec<Vector3<f64>>,
}

/// Column-vector rotation by a row-major 3x3 matrix.
pub fn apply_rotation(r: &[f64], v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        r[0] * v.x + r[1] * v.y + r[2] * v.z,
        r[3] * v.x + r[4] * v.y + r[5] * v.z,
        r[6] * v.x + r[7] * v.y + r[8] * v.z,
    )
}

pub fn apply_rotation_transpose(r: &[f64], v: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(
        r[0] * v.x + r[3] * v.y + r[6] * v.z,
        r[1] * v.x + r[4] * v.y + r[7] * v.z,
        r[2] * v.x + r[5] * v.y + r[8] * v.z,
    )
}

/// Extracts the patch-branch and cloud-branch inputs for one query point.
/// The cloud subsample always contains the query; clouds smaller than `n_d`
/// are sampled with replacement (warned once per `warned` flag).
pub fn sample_input(
    cloud: &PointCloud,
    index: &SpatialIndex,
    query: usize,
    n_p: usize,
    n_d: usize,
    rng: &mut ChaCha8Rng,
    warned: &mut bool,
) -> Result<SampledInput> {
    let patch = extract_patch(cloud, index, query, n_p)?;
    let patch_local = patch.local_points(cloud);

    let len = cloud.len();
    let mut picks: Vec<usize> = Vec::with_capacity(n_d);
    picks.push(query);
    if len - 1 >= n_d - 1 {
        // Distinct indices, skipping over the query index.
        for raw in rand::seq::index::sample(rng, len - 1, n_d - 1) {
            picks.push(if raw >= query { raw + 1 } else { raw });
        }
    } else {
        if !*warned {
            eprintln!(
                "warning: cloud '{}' has {} points, sampling {} with replacement",
                cloud.name, len, n_d
            );
            *warned = true;
        }
        for _ in 0..n_d - 1 {
            picks.push(rng.random_range(0..len));
        }
    }

    let origin = cloud.points[query];
    let rt = patch.pca_rotation.transpose();
    let mut local: Vec<Vector3<f64>> = picks
        .iter()
        .map(|&i| rt * (cloud.points[i] - origin))
        .collect();
    let scale = local.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    if scale <= 0.0 {
        return Err(Error::Degenerate(format!(
            "cloud subsample around point {} has zero extent",
            query
        )));
    }
    for p in &mut local {
        *p /= scale;
    }
    local.sort_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()));
    Ok(SampledInput {
        patch,
        patch_local,
        cloud_local: local,
    })
}

/// One cloud with everything precomputed for repeated query sampling.
pub struct PreparedCloud {
    pub noisy: PointCloud,
    pub clean: PointCloud,
    pub index: SpatialIndex,
    pub correspondence: Correspondence,
    /// Oriented world-frame initialization normals (absent when the
    /// initializer ablation is off).
    pub init_normals: Option<Vec<Vector3<f64>>>,
}

impl PreparedCloud {
    pub fn prepare(
        noisy: PointCloud,
        clean: PointCloud,
        init_k_pca: usize,
        init_k_graph: usize,
        use_mst_init: bool,
    ) -> Result<Self> {
        let index = SpatialIndex::build(&noisy.points)?;
        let correspondence = nearest_clean(&noisy, &clean)?;
        let init_normals = if use_mst_init {
            Some(init_oriented_normals(&noisy, init_k_pca, init_k_graph)?.normals)
        } else {
            None
        };
        Ok(Self {
            noisy,
            clean,
            index,
            correspondence,
            init_normals,
        })
    }
}

/// A sampled query with its ground truth, ready for the forward pass.
pub struct TrainingItem {
    pub input: SampledInput,
    /// Clean-twin normal (annotation-drift corrected), world frame.
    pub n_gt_cnd_world: Vector3<f64>,
    /// The noisy cloud's own annotation, world frame.
    pub n_gt_stale_world: Vector3<f64>,
    pub n_init_world: Option<Vector3<f64>>,
    pub query: usize,
}

pub fn sample_training_item(
    prep: &PreparedCloud,
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
    warned: &mut bool,
) -> Result<TrainingItem> {
    let query = rng.random_range(0..prep.noisy.len());
    let input = sample_input(
        &prep.noisy,
        &prep.index,
        query,
        model.n_p.min(prep.noisy.len()),
        model.n_d,
        rng,
        warned,
    )?;
    let stale = prep
        .noisy
        .gt_normals
        .as_ref()
        .ok_or(Error::EmptyInput("training cloud has no annotated normals"))?[query];
    let clean_normals = prep
        .clean
        .gt_normals
        .as_ref()
        .ok_or(Error::EmptyInput("clean cloud has no annotated normals"))?;
    let cnd = clean_normals[prep.correspondence.clean_index[query]];
    let init = prep.init_normals.as_ref().map(|n| n[query]);
    Ok(TrainingItem {
        input,
        n_gt_cnd_world: cnd,
        n_gt_stale_world: stale,
        n_init_world: init,
        query,
    })
}

/// Loss parts of one item's forward pass, with ground truth rotated into
/// the network's canonicalized frame.
pub fn item_loss(
    net: &NormalNet,
    item: &TrainingItem,
    config: &TrainConfig,
) -> Result<(ForwardOutput, LossParts)> {
    let patch = &item.input.patch;
    let n_init_local = item
        .n_init_world
        .as_ref()
        .map(|n| patch.direction_to_local(n));
    let out = net.forward(&item.input.patch_local, &item.input.cloud_local, n_init_local)?;

    let gt_world = if config.loss.use_cnd_gt {
        item.n_gt_cnd_world
    } else {
        item.n_gt_stale_world
    };
    let gt_local = patch.direction_to_local(&gt_world);
    let r = out.r_qstn.to_vec();
    let gt_head = apply_rotation(&r, &gt_local);

    let m = out.weights_hat.numel();
    let head_pts: Vec<Vector3<f64>> = item.input.patch_local[..m]
        .iter()
        .map(|p| apply_rotation(&r, p))
        .collect();

    let n_hat = out.n_hat_u.to_vec();
    let dot = n_hat[0] * gt_head.x + n_hat[1] * gt_head.y + n_hat[2] * gt_head.z;
    let sgn_gt = if dot >= 0.0 { 1.0 } else { -1.0 };

    let l1 = loss::l1_sine(&gt_head, &out.n_hat_u)?;
    let l2 = config
        .loss
        .use_l2
        .then(|| loss::l2_z(&gt_local, &out.r_qstn))
        .transpose()?;
    let l3 = loss::l3_weights(&head_pts, &gt_head, &out.weights_hat)?;
    let (l4, l5) = if config.use_feature_augmentation {
        let l4 = loss::l4_sign_bce(&out.s_plus, Some(&out.s_minus), out.sgn_init, sgn_gt)?;
        let l5 = config
            .loss
            .use_l5
            .then(|| loss::l5_contrastive(&out.s_plus, &out.s_minus))
            .transpose()?;
        (l4, l5)
    } else {
        (
            loss::l4_sign_bce(&out.s_plus, None, out.sgn_init, sgn_gt)?,
            None,
        )
    };
    Ok((
        out,
        LossParts {
            l1,
            l2,
            l3,
            l4,
            l5,
        },
    ))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub losses_csv: PathBuf,
    /// Per trained epoch: [total, l1, l2, l3, l4, l5] means.
    pub epoch_losses: Vec<(usize, [f64; 6])>,
}

fn optimizer_arrays(state: &OptimizerState) -> ArrayMap {
    let mut out = ArrayMap::new();
    for (name, (m, v)) in &state.moments {
        out.insert(format!("optim.m.{}", name), (vec![m.len()], m.clone()));
        out.insert(format!("optim.v.{}", name), (vec![v.len()], v.clone()));
    }
    out
}

fn save_checkpoint(
    path: &Path,
    net: &NormalNet,
    train_config: &TrainConfig,
    state: &OptimizerState,
    epoch: usize,
) -> Result<()> {
    let mut arrays = net.snapshot();
    arrays.extend(optimizer_arrays(state));
    let meta = serde_json::json!({
        "model_config": net.config,
        "train_config": train_config,
        "epoch": epoch,
        "optimizer": {
            "step": state.step,
            "base_lr": state.base_lr,
            "weight_decay": state.weight_decay,
            "total_steps": state.total_steps,
        },
    });
    save_arrays(path, meta, &arrays)
}

pub struct LoadedCheckpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub params: ArrayMap,
    pub optimizer: Option<OptimizerState>,
    pub epoch: usize,
}

/// Reads a checkpoint written by [`train`], separating model parameters
/// from optimizer moments.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (meta, arrays) = load_arrays(path)?;
    let model_config: ModelConfig = serde_json::from_value(
        meta.get("model_config")
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing model_config", path.display())))?,
    )
    .map_err(|e| Error::Checkpoint(format!("{}: model_config: {}", path.display(), e)))?;
    let train_config = meta
        .get("train_config")
        .and_then(|v| serde_json::from_value(v.clone()).ok());
    let epoch = meta.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;

    let mut params = ArrayMap::new();
    let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (name, (shape, values)) in arrays {
        if let Some(rest) = name.strip_prefix("optim.m.") {
            moments.entry(rest.to_string()).or_default().0 = values;
        } else if let Some(rest) = name.strip_prefix("optim.v.") {
            moments.entry(rest.to_string()).or_default().1 = values;
        } else {
            params.insert(name, (shape, values));
        }
    }
    let optimizer = meta.get("optimizer").map(|o| {
        let mut state = OptimizerState::new(
            o.get("base_lr").and_then(|v| v.as_f64()).unwrap_or(5e-4),
            o.get("weight_decay").and_then(|v| v.as_f64()).unwrap_or(0.0),
            o.get("total_steps").and_then(|v| v.as_u64()).unwrap_or(0),
        );
        state.step = o.get("step").and_then(|v| v.as_u64()).unwrap_or(0);
        state.moments = moments;
        state
    });
    Ok(LoadedCheckpoint {
        model_config,
        train_config,
        params,
        optimizer,
        epoch,
    })
}

/// Trains on every entry of the manifest and writes `losses.csv`, periodic
/// `epoch_<k>` checkpoints, a `final` checkpoint, and a `model.json`
/// sidecar into `out_dir`. `resume` continues from a saved checkpoint with
/// the identical item sequence.
pub fn train(
    manifest: &DatasetManifest,
    data_root: &Path,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyInput("manifest has no entries"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut clouds = Vec::new();
    for entry in &manifest.entries {
        let (noisy, clean) = manifest.load_entry(data_root, entry)?;
        clouds.push(PreparedCloud::prepare(
            noisy,
            clean,
            config.init_k_pca,
            config.init_k_graph,
            config.use_mst_init,
        )?);
    }

    let items_per_epoch = clouds.len() * config.queries_per_shape;
    let steps_per_epoch = items_per_epoch.div_ceil(config.batch_size);
    let total_steps = (config.epochs * steps_per_epoch) as u64;

    let net = NormalNet::new(model_config.clone())?;
    let mut state = OptimizerState::new(config.base_lr, config.weight_decay, total_steps);
    let mut start_epoch = 0usize;
    if let Some(resume_path) = resume {
        let loaded = load_checkpoint(resume_path)?;
        if loaded.model_config != *model_config {
            return Err(Error::Checkpoint(format!(
                "{}: model configuration differs from the requested one",
                resume_path.display()
            )));
        }
        net.load_snapshot(&loaded.params)?;
        if let Some(opt) = loaded.optimizer {
            state = opt;
        }
        start_epoch = loaded.epoch + 1;
    }

    let model_json = serde_json::to_string_pretty(&net.config)
        .map_err(|e| Error::Checkpoint(format!("model config encode: {}", e)))?;
    let sidecar = out_dir.join("model.json");
    std::fs::write(&sidecar, model_json).map_err(|e| Error::io(&sidecar, e))?;

    let losses_csv = out_dir.join("losses.csv");
    let mut csv = std::io::BufWriter::new(
        std::fs::File::create(&losses_csv).map_err(|e| Error::io(&losses_csv, e))?,
    );
    writeln!(csv, "epoch,mean_total,mean_l1,mean_l2,mean_l3,mean_l4,mean_l5")
        .map_err(|e| Error::io(&losses_csv, e))?;

    let mut warned = false;
    let mut epoch_losses = Vec::new();
    for epoch in start_epoch..config.epochs {
        let mut rng = epoch_rng(config.seed, epoch);
        let mut items = Vec::with_capacity(items_per_epoch);
        for prep in &clouds {
            for _ in 0..config.queries_per_shape {
                items.push(sample_training_item(prep, model_config, &mut rng, &mut warned)?);
            }
        }

        let mut sums = [0.0f64; 6];
        for (batch_id, batch) in items.chunks(config.batch_size).enumerate() {
            net.zero_gradients();
            for item in batch {
                let (_, parts) = item_loss(&net, item, config)?;
                let total = loss::total(&parts, &config.loss).map_err(|e| {
                    Error::NonFinite(format!("epoch {} batch {}: {}", epoch, batch_id, e))
                })?;
                let vals = parts.values()?;
                sums[0] += total.item()?;
                for i in 0..5 {
                    sums[i + 1] += vals[i];
                }
                total
                    .scale(1.0 / batch.len() as f64)
                    .backward()
                    .map_err(|e| {
                        Error::NonFinite(format!("epoch {} batch {}: {}", epoch, batch_id, e))
                    })?;
            }
            let mut grads = net.gradients();
            clip_grad_norm(&mut grads, GRAD_CLIP_NORM);
            let mut params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = net.snapshot();
            adamw_step(&mut state, &mut params, &grads)?;
            net.load_snapshot(&params)?;
        }

        let n = items.len() as f64;
        let means = [
            sums[0] / n,
            sums[1] / n,
            sums[2] / n,
            sums[3] / n,
            sums[4] / n,
            sums[5] / n,
        ];
        writeln!(
            csv,
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            epoch, means[0], means[1], means[2], means[3], means[4], means[5]
        )
        .map_err(|e| Error::io(&losses_csv, e))?;
        csv.flush().map_err(|e| Error::io(&losses_csv, e))?;
        epoch_losses.push((epoch, means));

        let last = epoch + 1 == config.epochs;
        if (epoch + 1) % config.checkpoint_every == 0 && !last {
            save_checkpoint(
                &out_dir.join(format!("epoch_{}", epoch)),
                &net,
                config,
                &state,
                epoch,
            )?;
        }
        if last {
            save_checkpoint(&out_dir.join("final"), &net, config, &state, epoch)?;
        }
    }
    // Resuming past the last epoch still produces a final checkpoint.
    if start_epoch >= config.epochs {
        save_checkpoint(
            &out_dir.join("final"),
            &net,
            config,
            &state,
            config.epochs.saturating_sub(1),
        )?;
    }

    Ok(TrainOutcome {
        final_checkpoint: out_dir.join("final"),
        losses_csv,
        epoch_losses,
    })
}
