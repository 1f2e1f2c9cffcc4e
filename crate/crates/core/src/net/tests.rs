use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::tile_rows;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

/// Points sorted ascending by distance to the first point, mimicking patch
/// extraction order.
fn sorted_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    let mut pts = random_points(rng, n);
    let q = pts[0];
    pts.sort_by(|a, b| (a - q).norm_squared().total_cmp(&(b - q).norm_squared()));
    pts
}

fn toy_forward(seed: u64) -> (NormalNet, ForwardOutput) {
    let config = ModelConfig::toy(seed);
    let net = NormalNet::new(config.clone()).unwrap();
    let mut r = rng(seed ^ 77);
    let patch = sorted_points(&mut r, config.n_p);
    let cloud = sorted_points(&mut r, config.n_d);
    let out = net
        .forward(&patch, &cloud, Some(Vector3::new(0.0, 0.0, 1.0)))
        .unwrap();
    (net, out)
}

#[test]
fn qstn_identity_at_init() {
    let config = ModelConfig::toy(3);
    let net = NormalNet::new(config).unwrap();
    let mut r = rng(4);
    let pts = points_tensor(&random_points(&mut r, 10)).unwrap();
    let (rot, fallback) = net.qstn.forward(&pts).unwrap();
    assert!(!fallback);
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    assert_eq!(rot.to_vec(), eye);
}

#[test]
fn qstn_zero_input_falls_back_to_identity() {
    let config = ModelConfig::toy(3);
    let net = NormalNet::new(config).unwrap();
    let pts = Tensor::zeros(vec![8, 3]);
    let (rot, fallback) = net.qstn.forward(&pts).unwrap();
    assert!(fallback);
    assert_eq!(rot.to_vec()[0], 1.0);
}

#[test]
fn qstn_output_is_proper_rotation() {
    let config = ModelConfig::toy(5);
    let net = NormalNet::new(config).unwrap();
    // Randomize the final quaternion layer so the rotation is nontrivial.
    let mut r = rng(6);
    for (name, t) in net.named_params() {
        if name.starts_with("qstn.quat") {
            let vals: Vec<f64> = (0..t.numel()).map(|_| r.random_range(-0.5..0.5)).collect();
            t.set_values(&vals).unwrap();
        }
    }
    for trial in 0..10 {
        let pts = points_tensor(&random_points(&mut rng(trial), 12)).unwrap();
        let (rot, _) = net.qstn.forward(&pts).unwrap();
        let m = rot.to_vec();
        // R Rᵀ = I
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[i * 3 + k] * m[j * 3 + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6, "RRt[{}][{}] = {}", i, j, dot);
            }
        }
        let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6]);
        assert!((det - 1.0).abs() < 1e-6);
    }
}

#[test]
fn lfe_identical_points_ignore_neighbor_choice() {
    let config = ModelConfig::toy(7);
    let net = NormalNet::new(config).unwrap();
    // All rows identical: the difference channel vanishes and any neighbor
    // assignment yields the same output.
    let x = Tensor::from_vec(vec![5, 3], [0.3, -0.2, 0.9].repeat(5)).unwrap();
    let idx_a = vec![0, 1, 1, 2, 2, 3, 3, 4, 4, 0];
    let idx_b = vec![4, 4, 0, 0, 1, 1, 2, 2, 3, 3];
    let a = net.lfe_p1.forward(&x, &idx_a, 2).unwrap().to_vec();
    let b = net.lfe_p1.forward(&x, &idx_b, 2).unwrap().to_vec();
    assert_eq!(a, b);
}

#[test]
fn lfe_neighbor_order_is_irrelevant() {
    let config = ModelConfig::toy(8);
    let net = NormalNet::new(config).unwrap();
    let mut r = rng(9);
    let x = points_tensor(&random_points(&mut r, 6)).unwrap();
    let idx = vec![1, 2, 3, 0, 2, 4, 5, 1, 0, 3, 4, 5, 0, 1, 2, 5, 4, 3];
    let mut permuted = idx.clone();
    permuted[0..3].reverse();
    permuted[9..12].rotate_left(1);
    let a = net.lfe_p1.forward(&x, &idx, 3).unwrap().to_vec();
    let b = net.lfe_p1.forward(&x, &permuted, 3).unwrap().to_vec();
    for (a, b) in a.iter().zip(&b) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn aff_saturated_gate_selects_first_input() {
    let config = ModelConfig::toy(10);
    let net = NormalNet::new(config.clone()).unwrap();
    // Huge gate bias saturates the sigmoid at exactly 1.0.
    for (name, t) in net.named_params() {
        if name == "aff.gate.b" {
            t.set_values(&vec![1e4; t.numel()]).unwrap();
        }
    }
    let mut r = rng(11);
    let c = config.channels;
    let f1 = Tensor::from_vec(vec![6, c], (0..6 * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let f2 = Tensor::from_vec(vec![6, c], (0..6 * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let fused = net.aff.forward(&f1, &f2).unwrap().to_vec();
    let direct = net.aff.project.forward(&f1).unwrap().relu().to_vec();
    assert_eq!(fused, direct);
}

#[test]
fn aff_equal_inputs_reduce_to_projection() {
    let config = ModelConfig::toy(12);
    let net = NormalNet::new(config.clone()).unwrap();
    let mut r = rng(13);
    let c = config.channels;
    let f = Tensor::from_vec(vec![5, c], (0..5 * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let fused = net.aff.forward(&f, &f).unwrap().to_vec();
    let direct = net.aff.project.forward(&f).unwrap().relu().to_vec();
    for (a, b) in fused.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn hgif_unit_rho_preserves_count_and_residual_path() {
    let mut r = rng(14);
    let stage = HgifStage::new(&mut rng(15), "t", 8, 1.0, 4, true);
    // Zero the fusion layer: the feature update reduces to the residual.
    stage.fuse.w.set_values(&vec![0.0; stage.fuse.w.numel()]).unwrap();
    if let Some(b) = &stage.fuse.b {
        b.set_values(&vec![0.0; b.numel()]).unwrap();
    }
    let pts = random_points(&mut r, 10);
    let feats = Tensor::from_vec(vec![10, 8], (0..80).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let state = StageState {
        coords: points_tensor(&pts).unwrap(),
        coord_values: pts,
        feats: feats.clone(),
        g_res: Tensor::zeros(vec![10, 8]),
    };
    let (next, _) = stage.forward(state, None).unwrap();
    assert_eq!(next.coord_values.len(), 10);
    assert_eq!(next.feats.to_vec(), feats.to_vec());
}

#[test]
fn hgif_even_stage_feature_differences_vanish_for_identical_features() {
    let mut r = rng(16);
    let stage = HgifStage::new(&mut rng(17), "t", 8, 1.0, 3, false);
    let pts = random_points(&mut r, 9);
    let mk_state = |fill: f64| StageState {
        coords: points_tensor(&pts).unwrap(),
        coord_values: pts.clone(),
        feats: Tensor::from_vec(vec![9, 8], vec![fill; 72]).unwrap(),
        g_res: Tensor::zeros(vec![9, 8]),
    };
    // With identical per-point features, the feature-difference channel is
    // identically zero, so the local geometry code cannot depend on the fill.
    let (a, _) = stage.forward(mk_state(0.3), None).unwrap();
    let (b, _) = stage.forward(mk_state(-1.7), None).unwrap();
    assert_eq!(a.g_res.to_vec(), b.g_res.to_vec());
}

#[test]
fn hgif_rejects_collapse_below_two_points() {
    let mut r = rng(18);
    let stage = HgifStage::new(&mut rng(19), "t", 8, 0.1, 3, true);
    let pts = random_points(&mut r, 5);
    let state = StageState {
        coords: points_tensor(&pts).unwrap(),
        coord_values: pts,
        feats: Tensor::zeros(vec![5, 8]),
        g_res: Tensor::zeros(vec![5, 8]),
    };
    assert!(stage.forward(state, None).is_err());
}

#[test]
fn forward_output_shapes_desk_config() {
    let config = ModelConfig::default();
    assert_eq!(config.final_patch_size(), 76);
    config.validate().unwrap();

    let net = NormalNet::new(config.clone()).unwrap();
    net.set_trainable(false);
    let mut r = rng(20);
    let patch = sorted_points(&mut r, config.n_p);
    let cloud = sorted_points(&mut r, config.n_d);
    let out = net
        .forward(&patch, &cloud, Some(Vector3::new(0.3, -0.2, 0.9)))
        .unwrap();
    assert_eq!(out.n_hat_u.shape(), vec![3]);
    assert_eq!(out.weights_hat.shape(), vec![76]);
    assert_eq!(out.s_plus.numel(), 1);
    assert_eq!(out.s_minus.numel(), 1);
    assert_eq!(out.f_normal.shape(), vec![config.feature_dim]);
    assert_eq!(out.g_patch.len(), 4);
    assert_eq!(out.g_cloud.len(), 3);
    let n = out.n_hat_u.to_vec();
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    assert!((len - 1.0).abs() < 1e-9);
    // Softmax point weights form a distribution.
    let w = out.weights_hat.to_vec();
    assert!(w.iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn normal_head_negation_is_exact() {
    let (net, out) = toy_forward(21);
    let pos = net.project_normal(&out.f_normal).unwrap().to_vec();
    let neg = net.project_normal(&out.f_normal.neg()).unwrap().to_vec();
    for (p, n) in pos.iter().zip(&neg) {
        assert_eq!(p.to_bits(), (-n).to_bits());
    }
}

#[test]
fn forward_is_deterministic() {
    let a = toy_forward(22).1;
    let b = toy_forward(22).1;
    assert_eq!(a.n_hat_u.to_vec(), b.n_hat_u.to_vec());
    assert_eq!(a.s_plus.to_vec(), b.s_plus.to_vec());
    assert_eq!(a.weights_hat.to_vec(), b.weights_hat.to_vec());
}

#[test]
fn permutation_of_points_within_stage_segments_is_invariant() {
    let config = ModelConfig::toy(23);
    let net = NormalNet::new(config.clone()).unwrap();
    let mut r = rng(24);
    let patch = sorted_points(&mut r, config.n_p);
    let cloud = sorted_points(&mut r, config.n_d);
    let base = net.forward(&patch, &cloud, None).unwrap();

    // Stage survivor sets are prefixes (32 -> 24 -> 18); permuting inside
    // each segment keeps every pooled set identical.
    let mut permuted = patch.clone();
    permuted[0..18].reverse();
    permuted[18..24].rotate_left(2);
    permuted[24..32].reverse();
    let mut cloud_perm = cloud.clone();
    cloud_perm[0..12].rotate_left(3);
    cloud_perm[12..24].reverse();
    let alt = net.forward(&permuted, &cloud_perm, None).unwrap();

    for (a, b) in base.n_hat_u.to_vec().iter().zip(alt.n_hat_u.to_vec()) {
        assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
    for (a, b) in base.s_plus.to_vec().iter().zip(alt.s_plus.to_vec()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn tied_sign_heads_swap_logits_under_init_flip() {
    let config = ModelConfig::toy(25);
    let net = NormalNet::new(config.clone()).unwrap();
    // Tie the two head MLPs.
    let params: std::collections::BTreeMap<String, Tensor> =
        net.named_params().into_iter().collect();
    for (name, t) in &params {
        if let Some(rest) = name.strip_prefix("sign.pos") {
            let neg = &params[&format!("sign.neg{}", rest)];
            neg.set_values(&t.to_vec()).unwrap();
        }
    }
    let mut r = rng(26);
    let patch = sorted_points(&mut r, config.n_p);
    let cloud = sorted_points(&mut r, config.n_d);
    let init = Vector3::new(0.1, 0.4, 0.9).normalize();
    let a = net.forward(&patch, &cloud, Some(init)).unwrap();
    let b = net.forward(&patch, &cloud, Some(-init)).unwrap();
    assert_eq!(a.sgn_init, -b.sgn_init);
    assert_eq!(a.s_plus.to_vec(), b.s_minus.to_vec());
    assert_eq!(a.s_minus.to_vec(), b.s_plus.to_vec());
}

#[test]
fn sgn_init_matches_dot_product_sign() {
    let (_, out) = toy_forward(27);
    let n = out.n_hat_u.to_vec();
    let rv = out.r_qstn.to_vec();
    let ni = Vector3::new(0.0, 0.0, 1.0);
    let rotated = [
        rv[0] * ni.x + rv[1] * ni.y + rv[2] * ni.z,
        rv[3] * ni.x + rv[4] * ni.y + rv[5] * ni.z,
        rv[6] * ni.x + rv[7] * ni.y + rv[8] * ni.z,
    ];
    let dot = n[0] * rotated[0] + n[1] * rotated[1] + n[2] * rotated[2];
    assert_eq!(out.sgn_init, if dot >= 0.0 { 1.0 } else { -1.0 });
}

#[test]
fn invalid_configs_rejected() {
    let mut c = ModelConfig::default();
    c.rho_p = vec![0.0, 1.0];
    assert!(c.validate().is_err());

    let mut c = ModelConfig::default();
    c.rho_p = vec![0.5];
    assert!(c.validate().is_err());

    let mut c = ModelConfig::default();
    c.pff_neighbors = 500;
    assert!(c.validate().is_err());
}

#[test]
fn tile_rows_repeats_vector() {
    let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let tiled = tile_rows(&t, 4).unwrap();
    assert_eq!(tiled.shape(), vec![4, 3]);
    assert_eq!(tiled.to_vec(), [1.0, 2.0, 3.0].repeat(4));
}

/// Central-difference spot check of the end-to-end gradient on sampled
/// parameter coordinates.
#[test]
fn end_to_end_gradient_spot_check() {
    let config = ModelConfig::toy(30);
    let net = NormalNet::new(config.clone()).unwrap();
    let mut r = rng(31);
    let patch = sorted_points(&mut r, config.n_p);
    let cloud = sorted_points(&mut r, config.n_d);
    let init = Vector3::new(0.2, -0.3, 0.9).normalize();

    let loss_of = |net: &NormalNet| -> Tensor {
        let out = net.forward(&patch, &cloud, Some(init)).unwrap();
        // Mix every output so all heads contribute gradient.
        let wn = Tensor::from_vec(vec![3], vec![0.3, -1.1, 0.7]).unwrap();
        let wr = Tensor::from_vec(vec![3, 3], (0..9).map(|i| ((i * 7) as f64 * 0.13).sin()).collect()).unwrap();
        out.n_hat_u
            .mul(&wn)
            .unwrap()
            .sum_all()
            .add(&out.s_plus.sum_all())
            .unwrap()
            .add(&out.s_minus.scale(0.5).sum_all())
            .unwrap()
            .add(&out.weights_hat.square().sum_all())
            .unwrap()
            .add(&out.r_qstn.mul(&wr).unwrap().sum_all())
            .unwrap()
    };

    net.zero_gradients();
    loss_of(&net).backward().unwrap();
    let grads = net.gradients();
    let params = net.named_params();

    let h = 1e-6;
    let mut checked = 0;
    let mut max_err: f64 = 0.0;
    while checked < 40 {
        let (name, t) = &params[r.random_range(0..params.len())];
        let ci = r.random_range(0..t.numel());
        let mut vals = t.to_vec();
        let orig = vals[ci];
        vals[ci] = orig + h;
        t.set_values(&vals).unwrap();
        let plus = loss_of(&net).item().unwrap();
        vals[ci] = orig - h;
        t.set_values(&vals).unwrap();
        let minus = loss_of(&net).item().unwrap();
        vals[ci] = orig;
        t.set_values(&vals).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads.get(name).map(|g| g[ci]).unwrap_or(0.0);
        let err = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-2);
        assert!(err < 1e-4, "{}[{}]: ad {} fd {} err {}", name, ci, ad, fd, err);
        max_err = max_err.max(err);
        checked += 1;
    }
    assert!(max_err < 1e-4);
}

#[test]
fn snapshot_round_trip_and_gradient_bookkeeping() {
    let config = ModelConfig::toy(33);
    let net = NormalNet::new(config.clone()).unwrap();
    let snap = net.snapshot();
    // Unique names, all finite.
    assert_eq!(snap.len(), net.named_params().len());

    let net2 = NormalNet::new(ModelConfig::toy(34)).unwrap();
    assert_ne!(net2.snapshot(), snap);
    net2.load_snapshot(&snap).unwrap();
    assert_eq!(net2.snapshot(), snap);

    let mut broken = snap.clone();
    broken.remove(broken.keys().next().unwrap().clone().as_str());
    assert!(net2.load_snapshot(&broken).is_err());
}
