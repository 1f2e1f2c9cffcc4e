//! Learned oriented-normal estimator: quaternion frame canonicalization,
//! dual-branch multi-scale local feature aggregation, hierarchical global
//! fusion over a patch branch and a cloud branch, a weighted unoriented
//! normal head, and a dual-logit sign refinement head.

mod layers;
#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::SpatialIndex;
use crate::tensor::{ArrayMap, Tensor};
use layers::{tile_rows, Linear, Mlp, SkipBlock};

/// Architecture and sampling hyperparameters. Defaults are desk-scale.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Patch cardinality fed to the patch branch.
    pub n_p: usize,
    /// Cloud subsample cardinality fed to the cloud branch.
    pub n_d: usize,
    /// Per-stage patch downsampling factors.
    pub rho_p: Vec<f64>,
    /// Per-stage cloud downsampling factors.
    pub rho_d: Vec<f64>,
    /// Neighborhood scales of the two patch-branch local feature extractors.
    pub lfe_scales: [usize; 2],
    /// Per-stage neighborhood scales of the patch-branch fusion stages.
    pub hgif_scales: Vec<usize>,
    /// Per-stage neighborhood scales of the cloud-branch fusion stages.
    pub hgif_scales_d: Vec<usize>,
    /// Neighborhood scale of the cloud-branch local feature extractor.
    pub lfe_scale_d: usize,
    /// Neighborhood scale of the normal head's coordinate fusion.
    pub pff_neighbors: usize,
    /// Channel width of all intermediate features.
    pub channels: usize,
    /// Dimension of the pooled normal feature.
    pub feature_dim: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_p: 256,
            n_d: 512,
            rho_p: vec![2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0],
            rho_d: vec![0.5, 0.5, 1.0],
            lfe_scales: [16, 32],
            hgif_scales: vec![32, 32, 16, 16],
            hgif_scales_d: vec![8, 8, 8],
            lfe_scale_d: 8,
            pff_neighbors: 16,
            channels: 64,
            feature_dim: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks and smoke tests.
    pub fn toy(seed: u64) -> Self {
        Self {
            n_p: 32,
            n_d: 24,
            rho_p: vec![0.75, 0.75],
            rho_d: vec![0.5],
            lfe_scales: [4, 6],
            hgif_scales: vec![6, 4],
            hgif_scales_d: vec![4],
            lfe_scale_d: 4,
            pff_neighbors: 6,
            channels: 8,
            feature_dim: 16,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rho_list) in [("rho_p", &self.rho_p), ("rho_d", &self.rho_d)] {
            if rho_list.is_empty() {
                return Err(Error::InvalidArgument(format!("{} must be non-empty", name)));
            }
            for &r in rho_list.iter() {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "{} entry {} outside (0, 1]",
                        name, r
                    )));
                }
            }
        }
        if self.rho_p.len() != self.hgif_scales.len() {
            return Err(Error::InvalidArgument(format!(
                "rho_p has {} stages but hgif_scales has {}",
                self.rho_p.len(),
                self.hgif_scales.len()
            )));
        }
        if self.rho_d.len() != self.hgif_scales_d.len() {
            return Err(Error::InvalidArgument(format!(
                "rho_d has {} stages but hgif_scales_d has {}",
                self.rho_d.len(),
                self.hgif_scales_d.len()
            )));
        }
        for (name, v) in [
            ("n_p", self.n_p),
            ("n_d", self.n_d),
            ("lfe_scale_d", self.lfe_scale_d),
            ("pff_neighbors", self.pff_neighbors),
            ("channels", self.channels),
            ("feature_dim", self.feature_dim),
            ("lfe scale 1", self.lfe_scales[0]),
            ("lfe scale 2", self.lfe_scales[1]),
        ] {
            if v < 2 {
                return Err(Error::InvalidArgument(format!("{} must be >= 2, got {}", name, v)));
            }
        }
        if self.final_patch_size() < self.pff_neighbors {
            return Err(Error::InvalidArgument(format!(
                "downsampled patch size {} below pff_neighbors {}",
                self.final_patch_size(),
                self.pff_neighbors
            )));
        }
        Ok(())
    }

    /// Patch cardinality after all downsampling stages (repeated ceil).
    pub fn final_patch_size(&self) -> usize {
        let mut n = self.n_p;
        for &r in &self.rho_p {
            n = (n as f64 * r).ceil() as usize;
        }
        n
    }
}

/// Flattened `[n, k]` neighbor lists over a point set, self included.
fn knn_indices(points: &[Vector3<f64>], k: usize) -> Result<Vec<usize>> {
    let k = k.min(points.len());
    let index = SpatialIndex::build(points)?;
    let mut out = Vec::with_capacity(points.len() * k);
    for p in points {
        for (i, _) in index.knn(p, k)? {
            out.push(i);
        }
    }
    Ok(out)
}

fn points_tensor(points: &[Vector3<f64>]) -> Result<Tensor> {
    let mut values = Vec::with_capacity(points.len() * 3);
    for p in points {
        values.extend_from_slice(&[p.x, p.y, p.z]);
    }
    Tensor::from_vec(vec![points.len(), 3], values)
}

/// Row indices `[n, k]` where every entry of row i is i; pairs a gathered
/// neighbor tensor with its center point.
fn self_indices(n: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(n * k);
    for i in 0..n {
        out.extend(std::iter::repeat(i).take(k));
    }
    out
}

struct Qstn {
    point_mlp: Mlp,
    pool_mlp: Mlp,
    quat: Linear,
}

impl Qstn {
    fn new(rng: &mut ChaCha8Rng, c: usize) -> Self {
        Self {
            point_mlp: Mlp::new(rng, "qstn.point", &[3, c, c], true),
            pool_mlp: Mlp::new(rng, "qstn.pool", &[c, c], true),
            quat: Linear::with_fixed_bias(rng, "qstn.quat", c, &[1.0, 0.0, 0.0, 0.0]),
        }
    }

    /// Rotation matrix tensor plus a flag marking the degenerate-input
    /// identity fallback.
    fn forward(&self, pts: &Tensor) -> Result<(Tensor, bool)> {
        if pts.values().iter().all(|&v| v == 0.0) {
            eprintln!("warning: frame canonicalization saw an all-zero patch; using identity");
            let eye = Tensor::from_vec(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )?;
            return Ok((eye, true));
        }
        let h = self.point_mlp.forward(pts)?;
        let pooled = h.maxpool(0)?;
        let h2 = self.pool_mlp.forward(&pooled)?;
        let q = self.quat.forward(&h2)?;
        Ok((q.normalize_vec()?.unit_quat_to_rotmat()?, false))
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.point_mlp.collect(out);
        self.pool_mlp.collect(out);
        self.quat.collect(out);
    }
}

/// Graph feature extractor at one neighborhood scale: embed, compare each
/// point with its neighbors, fuse through a skip block, pool over neighbors.
struct LfeBlock {
    embed: Linear,
    fuse: SkipBlock,
}

impl LfeBlock {
    fn new(rng: &mut ChaCha8Rng, name: &str, in_dim: usize, c: usize) -> Self {
        Self {
            embed: Linear::new(rng, &format!("{}.embed", name), in_dim, c, true),
            fuse: SkipBlock::new(rng, &format!("{}.fuse", name), 3 * c, c),
        }
    }

    fn forward(&self, x: &Tensor, idx: &[usize], k: usize) -> Result<Tensor> {
        let n = x.shape()[0];
        let e = self.embed.forward(x)?.relu();
        let ei = e.gather(0, &self_indices(n, k), &[n, k])?;
        let ej = e.gather(0, idx, &[n, k])?;
        let diff = ei.sub(&ej)?;
        let cat = Tensor::concat(&[ei, ej, diff], 2)?;
        self.fuse.forward(&cat)?.maxpool(1)
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.embed.collect(out);
        self.fuse.collect(out);
    }
}

/// Sigmoid-gated fusion of two equally shaped feature maps; the gate is a
/// per-channel global statistic of their sum.
struct AffFuse {
    gate: Linear,
    project: Linear,
}

impl AffFuse {
    fn new(rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        Self {
            gate: Linear::new(rng, &format!("{}.gate", name), c, c, true),
            project: Linear::new(rng, &format!("{}.project", name), c, c, true),
        }
    }

    fn forward(&self, f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
        if f1.shape() != f2.shape() {
            return Err(Error::ShapeMismatch {
                op: "attention fuse",
                lhs: f1.shape(),
                rhs: f2.shape(),
            });
        }
        let pooled = f1.add(f2)?.maxpool(0)?;
        let m = self.gate.forward(&pooled)?.sigmoid();
        let m_inv = m.neg().add_scalar(1.0);
        let mixed = f1.mul(&m)?.add(&f2.mul(&m_inv)?)?;
        Ok(self.project.forward(&mixed)?.relu())
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.gate.collect(out);
        self.project.collect(out);
    }
}

/// One hierarchical fusion stage: global feature extraction, parity-dependent
/// local geometry encoding, residual feature update, then nearest-first
/// downsampling.
struct HgifStage {
    global_embed: Linear,
    global_project: Linear,
    local_embed: Linear,
    pos_embed: Option<Linear>,
    fuse: Linear,
    rho: f64,
    scale: usize,
    odd: bool,
}

struct StageState {
    coords: Tensor,
    coord_values: Vec<Vector3<f64>>,
    feats: Tensor,
    g_res: Tensor,
}

impl HgifStage {
    fn new(rng: &mut ChaCha8Rng, name: &str, c: usize, rho: f64, scale: usize, odd: bool) -> Self {
        Self {
            global_embed: Linear::new(rng, &format!("{}.gembed", name), c, c, true),
            global_project: Linear::new(rng, &format!("{}.gproj", name), c, c, true),
            local_embed: Linear::new(rng, &format!("{}.local", name), 6 + c, c, true),
            pos_embed: odd.then(|| Linear::new(rng, &format!("{}.pos", name), 3, c, true)),
            fuse: Linear::new(rng, &format!("{}.fuse", name), 3 * c, c, true),
            rho,
            scale,
            odd,
        }
    }

    fn forward(&self, state: StageState, g_prev_global: Option<&Tensor>) -> Result<(StageState, Tensor)> {
        let n = state.coord_values.len();
        let keep = (n as f64 * self.rho).ceil() as usize;
        if keep < 2 {
            return Err(Error::InvalidArgument(format!(
                "fusion stage would downsample {} points to {}",
                n, keep
            )));
        }
        let g_cur = self
            .global_project
            .forward(&self.global_embed.forward(&state.feats)?.relu().maxpool(0)?)?
            .relu();
        let g_prev = g_prev_global.unwrap_or(&g_cur);

        let k = self.scale.min(n);
        let idx = knn_indices(&state.coord_values, k)?;
        let selfs = self_indices(n, k);
        let p_i = state.coords.gather(0, &selfs, &[n, k])?;
        let p_j = state.coords.gather(0, &idx, &[n, k])?;
        let p_diff = p_i.sub(&p_j)?;
        let third = if self.odd {
            self.pos_embed.as_ref().unwrap().forward(&p_diff)?.relu()
        } else {
            let f_i = state.feats.gather(0, &selfs, &[n, k])?;
            let f_j = state.feats.gather(0, &idx, &[n, k])?;
            f_i.sub(&f_j)?
        };
        let local = Tensor::concat(&[p_i, p_diff, third], 2)?;
        let g_new = self
            .local_embed
            .forward(&local)?
            .relu()
            .maxpool(1)?
            .add(&state.g_res)?;

        let ctx = Tensor::concat(
            &[tile_rows(&g_cur, n)?, tile_rows(g_prev, n)?, g_new.clone()],
            1,
        )?;
        let f_new = self.fuse.forward(&ctx)?.relu().add(&state.feats)?;

        let keep_idx: Vec<usize> = (0..keep).collect();
        let next = StageState {
            coords: state.coords.gather(0, &keep_idx, &[keep])?,
            coord_values: state.coord_values[..keep].to_vec(),
            feats: f_new.gather(0, &keep_idx, &[keep])?,
            g_res: g_new.gather(0, &keep_idx, &[keep])?,
        };
        Ok((next, g_cur))
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.global_embed.collect(out);
        self.global_project.collect(out);
        self.local_embed.collect(out);
        if let Some(p) = &self.pos_embed {
            p.collect(out);
        }
        self.fuse.collect(out);
    }
}

/// Predicts the unoriented normal from the final patch features: coordinate
/// fusion, softmax point weighting, pooled feature, bias-free projection.
struct NormalHead {
    pos_lfe: LfeBlock,
    merge: SkipBlock,
    score: Linear,
    lift: Linear,
    project: Linear,
}

impl NormalHead {
    fn new(rng: &mut ChaCha8Rng, c: usize, dim: usize) -> Self {
        Self {
            pos_lfe: LfeBlock::new(rng, "head.poslfe", 3, c),
            merge: SkipBlock::new(rng, "head.merge", 2 * c, c),
            score: Linear::new(rng, "head.score", c, 1, true),
            lift: Linear::new(rng, "head.lift", c, dim, true),
            project: Linear::new(rng, "head.project", dim, 3, false),
        }
    }

    fn forward(
        &self,
        feats: &Tensor,
        coords: &Tensor,
        coord_values: &[Vector3<f64>],
        pff_k: usize,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let m = coord_values.len();
        if m < pff_k {
            return Err(Error::InvalidArgument(format!(
                "normal head needs >= {} points, got {}",
                pff_k, m
            )));
        }
        let idx = knn_indices(coord_values, pff_k)?;
        let posf = self.pos_lfe.forward(coords, &idx, pff_k)?;
        let f2 = self
            .merge
            .forward(&Tensor::concat(&[feats.clone(), posf], 1)?)?;
        let weights = self.score.forward(&f2)?.softmax(0)?;
        let lifted = self.lift.forward(&f2.mul(&weights)?)?.relu();
        let f_normal = lifted.maxpool(0)?;
        let n_hat = self.project_normal(&f_normal)?;
        Ok((n_hat, weights.reshape(vec![m])?, f_normal))
    }

    /// Bias-free projection plus normalization; negating the feature negates
    /// the output exactly.
    fn project_normal(&self, f_normal: &Tensor) -> Result<Tensor> {
        self.project.forward(f_normal)?.normalize_vec()
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.pos_lfe.collect(out);
        self.merge.collect(out);
        self.score.collect(out);
        self.lift.collect(out);
        self.project.collect(out);
    }
}

/// Scores the initialized sign and its inverse from the normal feature plus
/// both branches' global stacks.
struct SignHead {
    patch_proj: Linear,
    cloud_proj: Linear,
    head_pos: Mlp,
    head_neg: Mlp,
}

impl SignHead {
    fn new(rng: &mut ChaCha8Rng, c: usize, dim: usize, n_patch_stages: usize, n_cloud_stages: usize) -> Self {
        Self {
            patch_proj: Linear::new(rng, "sign.patchproj", n_patch_stages * c, c, true),
            cloud_proj: Linear::new(rng, "sign.cloudproj", n_cloud_stages * c, c, true),
            head_pos: Mlp::new(rng, "sign.pos", &[dim + 2 * c, c, 1], false),
            head_neg: Mlp::new(rng, "sign.neg", &[dim + 2 * c, c, 1], false),
        }
    }

    fn forward(
        &self,
        f_normal: &Tensor,
        sgn_init: f64,
        g_patch: &[Tensor],
        g_cloud: &[Tensor],
    ) -> Result<(Tensor, Tensor)> {
        if g_patch.is_empty() || g_cloud.is_empty() {
            return Err(Error::EmptyInput("sign head requires both branch feature stacks"));
        }
        let f_p = self.patch_proj.forward(&Tensor::concat(g_patch, 0)?)?.relu();
        let f_d = self.cloud_proj.forward(&Tensor::concat(g_cloud, 0)?)?.relu();
        let signed = f_normal.scale(sgn_init);
        let flipped = f_normal.scale(-sgn_init);
        let s_plus = self
            .head_pos
            .forward(&Tensor::concat(&[signed, f_d.clone(), f_p.clone()], 0)?)?;
        let s_minus = self
            .head_neg
            .forward(&Tensor::concat(&[flipped, f_d, f_p], 0)?)?;
        Ok((s_plus, s_minus))
    }

    fn collect(&self, out: &mut Vec<(String, Tensor)>) {
        self.patch_proj.collect(out);
        self.cloud_proj.collect(out);
        self.head_pos.collect(out);
        self.head_neg.collect(out);
    }
}

/// Everything produced by one forward pass. Normal and logits live in the
/// canonicalized patch frame (input frame rotated by the predicted
/// quaternion).
pub struct ForwardOutput {
    pub n_hat_u: Tensor,
    pub r_qstn: Tensor,
    pub qstn_fallback: bool,
    pub weights_hat: Tensor,
    pub f_normal: Tensor,
    pub s_plus: Tensor,
    pub s_minus: Tensor,
    /// Agreement sign between the predicted unoriented normal and the
    /// supplied initialization (+1 when no initialization is used).
    pub sgn_init: f64,
    pub g_patch: Vec<Tensor>,
    pub g_cloud: Vec<Tensor>,
}

pub struct NormalNet {
    pub config: ModelConfig,
    qstn: Qstn,
    lfe_p1: LfeBlock,
    lfe_p2: LfeBlock,
    aff: AffFuse,
    lfe_d: LfeBlock,
    hgif_p: Vec<HgifStage>,
    hgif_d: Vec<HgifStage>,
    head: NormalHead,
    sign: SignHead,
}

impl NormalNet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let hgif_p = config
            .rho_p
            .iter()
            .zip(&config.hgif_scales)
            .enumerate()
            .map(|(h, (&rho, &scale))| {
                HgifStage::new(&mut rng, &format!("hgif_p.{}", h), c, rho, scale, h % 2 == 0)
            })
            .collect();
        let hgif_d = config
            .rho_d
            .iter()
            .zip(&config.hgif_scales_d)
            .enumerate()
            .map(|(h, (&rho, &scale))| {
                HgifStage::new(&mut rng, &format!("hgif_d.{}", h), c, rho, scale, h % 2 == 0)
            })
            .collect();
        Ok(Self {
            qstn: Qstn::new(&mut rng, c),
            lfe_p1: LfeBlock::new(&mut rng, "lfe_p1", 3, c),
            lfe_p2: LfeBlock::new(&mut rng, "lfe_p2", 3, c),
            aff: AffFuse::new(&mut rng, "aff", c),
            lfe_d: LfeBlock::new(&mut rng, "lfe_d", 3, c),
            hgif_p,
            hgif_d,
            head: NormalHead::new(&mut rng, c, config.feature_dim),
            sign: SignHead::new(
                &mut rng,
                c,
                config.feature_dim,
                config.rho_p.len(),
                config.rho_d.len(),
            ),
            config,
        })
    }

    /// Runs the full network. Inputs are expected in the patch's normalized
    /// PCA frame; `n_init` (same frame) supplies the sign context.
    pub fn forward(
        &self,
        patch_pts: &[Vector3<f64>],
        cloud_pts: &[Vector3<f64>],
        n_init: Option<Vector3<f64>>,
    ) -> Result<ForwardOutput> {
        if patch_pts.len() < 4 {
            return Err(Error::InvalidArgument(format!(
                "patch branch needs >= 4 points, got {}",
                patch_pts.len()
            )));
        }
        if cloud_pts.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cloud branch needs >= 2 points, got {}",
                cloud_pts.len()
            )));
        }
        let n = patch_pts.len();
        let nd = cloud_pts.len();

        // Neighborhoods are rotation invariant; compute them on the raw
        // coordinates once.
        let k1 = self.config.lfe_scales[0].min(n);
        let k2 = self.config.lfe_scales[1].min(n);
        let kd = self.config.lfe_scale_d.min(nd);
        let idx_p1 = knn_indices(patch_pts, k1)?;
        let idx_p2 = knn_indices(patch_pts, k2)?;
        let idx_d = knn_indices(cloud_pts, kd)?;

        let p0 = points_tensor(patch_pts)?;
        let d0 = points_tensor(cloud_pts)?;
        let (r, qstn_fallback) = self.qstn.forward(&p0)?;
        let rt = r.transpose2()?;
        let p = p0.matmul2(&rt)?;
        let d = d0.matmul2(&rt)?;

        let f_p = self.aff.forward(
            &self.lfe_p1.forward(&p, &idx_p1, k1)?,
            &self.lfe_p2.forward(&p, &idx_p2, k2)?,
        )?;
        let f_d = self.lfe_d.forward(&d, &idx_d, kd)?;

        let mut state_p = StageState {
            coords: p,
            coord_values: patch_pts.to_vec(),
            feats: f_p,
            g_res: Tensor::zeros(vec![n, self.config.channels]),
        };
        let mut g_patch = Vec::new();
        for stage in &self.hgif_p {
            let (next, g) = stage.forward(state_p, g_patch.last())?;
            state_p = next;
            g_patch.push(g);
        }

        let mut state_d = StageState {
            coords: d,
            coord_values: cloud_pts.to_vec(),
            feats: f_d,
            g_res: Tensor::zeros(vec![nd, self.config.channels]),
        };
        let mut g_cloud = Vec::new();
        for stage in &self.hgif_d {
            let (next, g) = stage.forward(state_d, g_cloud.last())?;
            state_d = next;
            g_cloud.push(g);
        }

        let (n_hat_u, weights_hat, f_normal) = self.head.forward(
            &state_p.feats,
            &state_p.coords,
            &state_p.coord_values,
            self.config.pff_neighbors,
        )?;

        let sgn_init = match n_init {
            None => 1.0,
            Some(ni) => {
                // Rotate the initialization into the canonicalized frame.
                let rv = r.to_vec();
                let nh = [
                    rv[0] * ni.x + rv[1] * ni.y + rv[2] * ni.z,
                    rv[3] * ni.x + rv[4] * ni.y + rv[5] * ni.z,
                    rv[6] * ni.x + rv[7] * ni.y + rv[8] * ni.z,
                ];
                let nv = n_hat_u.to_vec();
                if nv[0] * nh[0] + nv[1] * nh[1] + nv[2] * nh[2] >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };

        let (s_plus, s_minus) = self
            .sign
            .forward(&f_normal, sgn_init, &g_patch, &g_cloud)?;

        Ok(ForwardOutput {
            n_hat_u,
            r_qstn: r,
            qstn_fallback,
            weights_hat,
            f_normal,
            s_plus,
            s_minus,
            sgn_init,
            g_patch,
            g_cloud,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.qstn.collect(&mut out);
        self.lfe_p1.collect(&mut out);
        self.lfe_p2.collect(&mut out);
        self.aff.collect(&mut out);
        self.lfe_d.collect(&mut out);
        for s in &self.hgif_p {
            s.collect(&mut out);
        }
        for s in &self.hgif_d {
            s.collect(&mut out);
        }
        self.head.collect(&mut out);
        self.sign.collect(&mut out);
        out
    }

    /// Copies all parameters into a named-array map (checkpoint payload).
    pub fn snapshot(&self) -> ArrayMap {
        self.named_params()
            .into_iter()
            .map(|(name, t)| (name, (t.shape(), t.to_vec())))
            .collect()
    }

    /// Overwrites parameters from a snapshot; every parameter must be
    /// present with a matching shape.
    pub fn load_snapshot(&self, arrays: &ArrayMap) -> Result<()> {
        for (name, t) in self.named_params() {
            let Some((shape, values)) = arrays.get(&name) else {
                return Err(Error::Checkpoint(format!("missing parameter {}", name)));
            };
            if *shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} shape {:?} does not match stored {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            t.set_values(values)?;
        }
        Ok(())
    }

    /// Accumulated gradients of all parameters that received any.
    pub fn gradients(&self) -> BTreeMap<String, Vec<f64>> {
        self.named_params()
            .into_iter()
            .filter_map(|(name, t)| t.grad().map(|g| (name, g)))
            .collect()
    }

    pub fn zero_gradients(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Switches gradient tracking on or off for every parameter (off makes
    /// inference cheaper).
    pub fn set_trainable(&self, trainable: bool) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(trainable);
        }
    }

    /// Exposes the bias-free normal projection for property checks.
    pub fn project_normal(&self, f_normal: &Tensor) -> Result<Tensor> {
        self.head.project_normal(f_normal)
    }
}
