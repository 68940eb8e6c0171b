use std::io::Write as _;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crowdnet::backbone::FeatureMap;
use crowdnet::body_model::{BodyLayer, BodyModel, BodyModelConfig, NUM_BETAS};
use crowdnet::harness::{
    ablation_run, activation_contrast, evaluate, evaluate_samples, train, train_on,
    AblationReport, TrainConfig,
};
use crowdnet::joints::{COMMON_EDGES, NUM_COMMON, NUM_SUPERSET, ROOT};
use crowdnet::losses::{
    loss_coord_shape, loss_param, loss_pose, total_loss, JointMask, LossParts, LossWeights,
    ParamMask, ParamSet,
};
use crowdnet::metrics::{bbox_iou, crowd_index, mpjpe, mpvpe, pa_mpjpe};
use crowdnet::model::{collate, prepare_input, prepare_person, Batch, CrowdNet, ModelConfig, Variant};
use crowdnet::nn::ParamStore;
use crowdnet::pose2d::{make_heatmaps, BBox, Pose2D};
use crowdnet::posenet::{soft_argmax3d, Heatmap3D};
use crowdnet::scene::{generate_dataset, generate_scene, Dataset, DatasetSpec, SceneConfig, SceneSample, SplitSpec};
use crowdnet::shapenet::{build_skeleton_graph, sample_joint_features, GraphConv};

/// Writes straight to the process stderr so the line shows even when the
/// test passes and output is captured.
fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} [{name}]: {verdict} ({detail})");
    assert!(pass, "criterion {n} [{name}] failed: {detail}");
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_tree(rng: &mut impl Rng, n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i, rng.random_range(0..i))).collect()
}

fn randomize_affine_params(store: &ParamStore, rng: &mut impl Rng) {
    for (name, var) in store.named_params() {
        if name.ends_with("gamma") || name.ends_with("beta") {
            let t = var.as_tensor();
            let v: Vec<f64> = (0..t.elem_count()).map(|_| 1.0 + 0.5 * normal(rng)).collect();
            var.set(&Tensor::from_vec(v, t.shape(), t.device()).unwrap()).unwrap();
        }
    }
}

fn graph_conv_oracle(
    x: &[Vec<Vec<f64>>],
    w: &[Vec<Vec<f64>>],
    gamma: &[f64],
    beta: &[f64],
    edges: &[(usize, usize)],
) -> Vec<Vec<Vec<f64>>> {
    let b = x.len();
    let j = w.len();
    let cout = w[0].len();
    let connected = |a: usize, c: usize| a == c || edges.iter().any(|&(p, q)| (p == a && q == c) || (p == c && q == a));
    let degree: Vec<f64> = (0..j).map(|a| (0..j).filter(|&c| connected(a, c)).count() as f64).collect();
    let mut y = vec![vec![vec![0.0; cout]; j]; b];
    for s in 0..b {
        for i in 0..j {
            for o in 0..cout {
                y[s][i][o] = (0..w[i][o].len()).map(|c| w[i][o][c] * x[s][i][c]).sum();
            }
        }
    }
    let mut normed = y.clone();
    for i in 0..j {
        for o in 0..cout {
            let mean = (0..b).map(|s| y[s][i][o]).sum::<f64>() / b as f64;
            let var = (0..b).map(|s| (y[s][i][o] - mean).powi(2)).sum::<f64>() / b as f64;
            for s in 0..b {
                normed[s][i][o] = (y[s][i][o] - mean) / (var + 1e-5).sqrt() * gamma[i * cout + o] + beta[i * cout + o];
            }
        }
    }
    let mut out = vec![vec![vec![0.0; cout]; j]; b];
    for s in 0..b {
        for a in 0..j {
            for o in 0..cout {
                let mut acc = 0.0;
                for i in 0..j {
                    if connected(a, i) {
                        acc += normed[s][i][o] / (degree[a] * degree[i]).sqrt();
                    }
                }
                out[s][a][o] = acc.max(0.0);
            }
        }
    }
    out
}

fn bilinear_oracle(f: &[f64], c: usize, h: usize, w: usize, stride: f64, x: f64, y: f64) -> Vec<f64> {
    let u = (x / stride - 0.5).clamp(0.0, (w - 1) as f64);
    let v = (y / stride - 0.5).clamp(0.0, (h - 1) as f64);
    (0..c)
        .map(|ch| {
            let mut acc = 0.0;
            for r in 0..h {
                for col in 0..w {
                    let k = (1.0 - (u - col as f64).abs()).max(0.0) * (1.0 - (v - r as f64).abs()).max(0.0);
                    acc += k * f[(ch * h + r) * w + col];
                }
            }
            acc
        })
        .collect()
}

fn random_pose(rng: &mut impl Rng, n: usize, extent: f64) -> Pose2D {
    let joints = (0..n).map(|_| [rng.random_range(0.0..extent), rng.random_range(0.0..extent)]).collect();
    let confidence = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.01..1.0) })
        .collect();
    Pose2D::new(joints, confidence, "superset").unwrap()
}

fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x0 = rng.random_range(0.0..extent);
    let y0 = rng.random_range(0.0..extent);
    BBox::new(x0, y0, x0 + rng.random_range(1.0..extent), y0 + rng.random_range(1.0..extent)).unwrap()
}

fn rasterized_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let x0 = a.x_min.min(b.x_min);
    let y0 = a.y_min.min(b.y_min);
    let dx = (a.x_max.max(b.x_max) - x0) / n as f64;
    let dy = (a.y_max.max(b.y_max) - y0) / n as f64;
    let (mut inter, mut union) = (0usize, 0usize);
    for r in 0..n {
        for c in 0..n {
            let p = [x0 + (c as f64 + 0.5) * dx, y0 + (r as f64 + 0.5) * dy];
            let (ia, ib) = (a.contains(p), b.contains(p));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
    }
    inter as f64 / union as f64
}

#[test]
fn criterion_01_kernel_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let dev = Device::Cpu;
    let cases = 100;

    let mut gc_err = 0.0f64;
    for case in 0..cases {
        let j = if case % 4 == 0 { NUM_COMMON } else { rng.random_range(2..8) };
        let edges = if j == NUM_COMMON { COMMON_EDGES.to_vec() } else { random_tree(&mut rng, j) };
        let (b, cin, cout) = (rng.random_range(2..5), rng.random_range(1..6), rng.random_range(1..6));
        let graph = build_skeleton_graph(j, &edges).unwrap();
        let mut store = ParamStore::new(case as u64, DType::F64, &dev);
        let gc = GraphConv::new(&mut store, "g", &graph, cin, cout).unwrap();
        randomize_affine_params(&store, &mut rng);
        let x = randn(&mut rng, &[b, j, cin]);
        let got = flat(&gc.forward(&x, true).unwrap());
        let want = graph_conv_oracle(
            &x.to_vec3::<f64>().unwrap(),
            &gc.weight.to_vec3::<f64>().unwrap(),
            &flat(&gc.bn.gamma),
            &flat(&gc.bn.beta),
            &edges,
        );
        let want: Vec<f64> = want.into_iter().flatten().flatten().collect();
        gc_err = gc_err.max(max_abs_diff(&got, &want));
    }

    let mut bl_err = 0.0f64;
    for _ in 0..cases {
        let (b, c, h, w) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..7));
        let stride = [4usize, 8, 16][rng.random_range(0..3)];
        let nj = rng.random_range(1..6);
        let data = randn(&mut rng, &[b, c, h, w]);
        let fm = FeatureMap { data: data.clone(), stride };
        let xy: Vec<f64> = (0..b * nj * 2)
            .map(|k| {
                let size = if k % 2 == 0 { w } else { h } as f64 * stride as f64;
                rng.random_range(-0.2 * size..1.2 * size)
            })
            .collect();
        let got = sample_joint_features(&fm, &Tensor::from_vec(xy.clone(), (b, nj, 2), &dev).unwrap()).unwrap();
        let got = flat(&got);
        let fv = flat(&data);
        let mut want = Vec::new();
        for s in 0..b {
            let fs = &fv[s * c * h * w..(s + 1) * c * h * w];
            for q in 0..nj {
                let k = (s * nj + q) * 2;
                want.extend(bilinear_oracle(fs, c, h, w, stride as f64, xy[k], xy[k + 1]));
            }
        }
        bl_err = bl_err.max(max_abs_diff(&got, &want));
    }

    let mut metric_err = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..40);
        let pts = |rng: &mut ChaCha8Rng| -> Vec<Vector3<f64>> {
            (0..n).map(|_| Vector3::new(300.0 * normal(rng), 300.0 * normal(rng), 300.0 * normal(rng))).collect()
        };
        let (p, g) = (pts(&mut rng), pts(&mut rng));
        let mut sum = 0.0;
        for k in 0..n {
            let mut sq = 0.0;
            for a in 0..3 {
                sq += (p[k][a] - g[k][a]) * (p[k][a] - g[k][a]);
            }
            sum += sq.sqrt();
        }
        let want = sum / n as f64;
        metric_err = metric_err.max((mpjpe(&p, &g).unwrap() - want).abs());
        metric_err = metric_err.max((mpvpe(&p, &g).unwrap() - want).abs());
    }

    let mut ci_err = 0.0f64;
    let mut ci_undefined_ok = true;
    for _ in 0..cases {
        let target = random_pose(&mut rng, NUM_SUPERSET, 100.0);
        let others: Vec<Pose2D> = (0..rng.random_range(0..4)).map(|_| random_pose(&mut rng, NUM_SUPERSET, 100.0)).collect();
        let bbox = random_box(&mut rng, 60.0);
        let count = |p: &Pose2D| {
            let mut k = 0;
            for (q, &conf) in p.joints.iter().zip(&p.confidence) {
                if conf > 0.0 && q[0] >= bbox.x_min && q[0] <= bbox.x_max && q[1] >= bbox.y_min && q[1] <= bbox.y_max {
                    k += 1;
                }
            }
            k
        };
        let own = count(&target);
        let other: usize = others.iter().map(count).sum();
        match crowd_index(&target, &others, &bbox) {
            Ok(v) if own > 0 => ci_err = ci_err.max((v - other as f64 / own as f64).abs()),
            Err(_) if own == 0 => {}
            _ => ci_undefined_ok = false,
        }
    }

    let mut iou_err = 0.0f64;
    for _ in 0..cases {
        let a = random_box(&mut rng, 50.0);
        let b = random_box(&mut rng, 50.0);
        iou_err = iou_err.max((bbox_iou(&a, &b) - rasterized_iou(&a, &b, 400)).abs());
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = gc_err < 1e-6 && bl_err < 1e-6 && metric_err < 1e-6 && ci_err < 1e-6 && ci_undefined_ok && iou_err < 1e-2 && secs < 60.0;
    report(
        1,
        "kernels vs brute-force oracles",
        pass,
        &format!(
            "{cases} cases each; graph conv {gc_err:.2e}, bilinear {bl_err:.2e}, MPJPE/MPVPE {metric_err:.2e}, crowd index {ci_err:.2e}, IoU vs raster {iou_err:.2e}; {secs:.1}s"
        ),
    );
}

const FD_STEP: f64 = 1e-6;

/// Max relative error between the backprop gradient of `loss` w.r.t.
/// `var` and central differences on up to `n` random entries.
fn grad_check(var: &Var, loss: &dyn Fn() -> Tensor, n: usize, rng: &mut impl Rng) -> f64 {
    let base = var.as_tensor().copy().unwrap();
    let shape = base.shape().clone();
    let values = flat(&base);
    let grads = loss().backward().unwrap();
    let analytic = grads.get(var.as_tensor()).map_or_else(|| vec![0.0; values.len()], flat);
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if idx.len() > n {
        idx = (0..n).map(|_| rng.random_range(0..values.len())).collect();
    }
    let eval_at = |k: usize, delta: f64| {
        let mut v = values.clone();
        v[k] += delta;
        var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
        scalar(&loss())
    };
    let mut worst = 0.0f64;
    for k in idx {
        let numeric = (eval_at(k, FD_STEP) - eval_at(k, -FD_STEP)) / (2.0 * FD_STEP);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    var.set(&base).unwrap();
    worst
}

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

fn u8_mask(rng: &mut impl Rng, shape: &[usize], p: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn joint_mask(rng: &mut impl Rng, b: usize, j: usize) -> JointMask {
    let xy = u8_mask(rng, &[b, j], 0.8);
    let z = (&xy * &u8_mask(rng, &[b, j], 0.7)).unwrap();
    JointMask::new(xy, z).unwrap()
}

fn small_model_config(variant: Variant) -> ModelConfig {
    let mut cfg = ModelConfig { variant, ..ModelConfig::default() };
    cfg.backbone.early_channels = 8;
    cfg.backbone.late_channels = vec![16, 32];
    cfg.backbone.blocks_per_stage = 1;
    cfg.graph.channels = 16;
    cfg.graph.residual_blocks = 2;
    cfg.hmr_hidden = 32;
    cfg
}

fn scene(seed: u64, n_persons: usize) -> (BodyModel, SceneSample) {
    let model = BodyModel::build(0, BodyModelConfig::default()).unwrap();
    let cfg = SceneConfig { n_persons, ..SceneConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = generate_scene(&mut rng, &model, &cfg, "acc", seed).unwrap();
    (model, s)
}

fn two_person_batch(cfg: &ModelConfig, dtype: DType) -> Batch {
    let (_, s) = scene(5, 2);
    let items: Vec<_> = (0..2).map(|i| prepare_person(&s, i, cfg, None).unwrap()).collect();
    collate(&items, dtype, &Device::Cpu).unwrap()
}

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let dev = Device::Cpu;
    let mut parts: Vec<(String, f64)> = Vec::new();

    let volume = var(randn(&mut rng, &[2, 3, 4, 3, 5]));
    let wj = randn(&mut rng, &[2, 3, 3]);
    let wc = randn(&mut rng, &[2, 3]);
    let f = || {
        let p = soft_argmax3d(&Heatmap3D { volume: volume.as_tensor().clone() }, 16, 1000.0).unwrap();
        ((&p.joints * &wj).unwrap().sum_all().unwrap() + (&p.confidence * &wc).unwrap().sum_all().unwrap()).unwrap()
    };
    parts.push(("soft_argmax3d".into(), grad_check(&volume, &f, 60, &mut rng)));

    let model = BodyModel::build(0, BodyModelConfig::default()).unwrap();
    let layer = BodyLayer::new(&model, DType::F64, &dev).unwrap();
    let kp = model.num_pose_joints();
    let tg = var((randn(&mut rng, &[2, 3]) * 0.5).unwrap());
    let th = var((randn(&mut rng, &[2, kp, 3]) * 0.4).unwrap());
    let be = var(randn(&mut rng, &[2, NUM_BETAS]));
    let wv = randn(&mut rng, &[2, model.num_vertices(), 3]);
    let wr = randn(&mut rng, &[2, NUM_SUPERSET, 3]);
    let decode_loss = || {
        let v = layer.decode(tg.as_tensor(), th.as_tensor(), be.as_tensor()).unwrap();
        let j = layer.regress_joints(&v).unwrap();
        ((&v * &wv).unwrap().sum_all().unwrap() + (&j * &wr).unwrap().sum_all().unwrap()).unwrap()
    };
    for (name, v) in [("decode/regress wrt global rotation", &tg), ("decode/regress wrt pose", &th), ("decode/regress wrt shape", &be)] {
        parts.push((name.into(), grad_check(v, &decode_loss, 30, &mut rng)));
    }

    let graph = build_skeleton_graph(NUM_COMMON, &COMMON_EDGES).unwrap();
    let mut store = ParamStore::new(3, DType::F64, &dev);
    let gc = GraphConv::new(&mut store, "g", &graph, 5, 4).unwrap();
    randomize_affine_params(&store, &mut rng);
    let x = var(randn(&mut rng, &[3, NUM_COMMON, 5]));
    let wg = randn(&mut rng, &[3, NUM_COMMON, 4]);
    let gc_loss = || (gc.forward(x.as_tensor(), true).unwrap() * &wg).unwrap().sum_all().unwrap();
    parts.push(("graph conv wrt input".into(), grad_check(&x, &gc_loss, 40, &mut rng)));
    for (name, v) in store.named_params() {
        parts.push((format!("graph conv wrt {name}"), grad_check(v, &gc_loss, 30, &mut rng)));
    }

    let (b, j) = (3, NUM_SUPERSET);
    let pred = var(randn(&mut rng, &[b, NUM_COMMON, 3]));
    let gt = randn(&mut rng, &[b, NUM_COMMON, 3]);
    let pm = joint_mask(&mut rng, b, NUM_COMMON);
    let f = || loss_pose(pred.as_tensor(), &gt, &pm).unwrap().value;
    parts.push(("pose loss".into(), grad_check(&pred, &f, 60, &mut rng)));

    let ptg = var(randn(&mut rng, &[b, 3]));
    let pth = var(randn(&mut rng, &[b, kp, 3]));
    let pbe = var(randn(&mut rng, &[b, NUM_BETAS]));
    let (gtg, gth, gbe) = (randn(&mut rng, &[b, 3]), randn(&mut rng, &[b, kp, 3]), randn(&mut rng, &[b, NUM_BETAS]));
    let mask = ParamMask { theta_g: u8_mask(&mut rng, &[b], 0.7), theta: u8_mask(&mut rng, &[b], 0.7), beta: u8_mask(&mut rng, &[b], 0.7) };
    let f = || {
        let p = ParamSet { theta_g: ptg.as_tensor(), theta: pth.as_tensor(), beta: pbe.as_tensor() };
        let g = ParamSet { theta_g: &gtg, theta: &gth, beta: &gbe };
        loss_param(&p, &g, &mask).unwrap().value
    };
    for v in [&ptg, &pth, &pbe] {
        parts.push(("param loss".into(), grad_check(v, &f, 30, &mut rng)));
    }

    let p3 = var(randn(&mut rng, &[b, j, 3]));
    let p2 = var(randn(&mut rng, &[b, j, 2]));
    let (g3, g2) = (randn(&mut rng, &[b, j, 3]), randn(&mut rng, &[b, j, 2]));
    let mut sm = joint_mask(&mut rng, b, j);
    sm.z = sm.z.slice_assign(&[0..b, ROOT..ROOT + 1], &sm.xy.narrow(1, ROOT, 1).unwrap()).unwrap();
    let sm = JointMask::new(sm.xy, sm.z).unwrap();
    let f = || loss_coord_shape(p3.as_tensor(), p2.as_tensor(), &g3, &g2, &sm).unwrap().value;
    parts.push(("coord loss wrt 3D".into(), grad_check(&p3, &f, 40, &mut rng)));
    parts.push(("coord loss wrt 2D".into(), grad_check(&p2, &f, 40, &mut rng)));

    let terms = var(randn(&mut rng, &[3]));
    let weights = LossWeights { pose: 0.7, param: 1.3, coord: 2.0 };
    let f = || {
        let t = terms.as_tensor();
        let p = LossParts { pose: t.get(0).unwrap(), param: t.get(1).unwrap(), coord: t.get(2).unwrap() };
        total_loss(&p, &weights).unwrap()
    };
    parts.push(("total loss".into(), grad_check(&terms, &f, 3, &mut rng)));
    let kernel_worst = parts.iter().map(|p| p.1).fold(0.0, f64::max);

    let mut composite = Vec::new();
    for variant in [Variant::Guided, Variant::HmrStyle] {
        let cfg = small_model_config(variant);
        let net = CrowdNet::new(&cfg, 11, DType::F64, &dev).unwrap();
        let batch = two_person_batch(&cfg, DType::F64);
        let f = || {
            let out = net.forward(&batch, true).unwrap();
            net.loss(&out, &batch).unwrap().0
        };
        let mut worst = 0.0f64;
        for (name, v) in net.store().named_params() {
            if name.ends_with("weight") || name.ends_with("bias") {
                let e = grad_check(v, &f, 2, &mut rng);
                worst = worst.max(e);
            }
        }
        composite.push((variant.name(), worst));
    }
    let composite_worst = composite.iter().map(|c| c.1).fold(0.0, f64::max);

    let secs = start.elapsed().as_secs_f64();
    let worst_part = parts.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let pass = kernel_worst < 1e-4 && composite_worst < 1e-3 && secs < 300.0;
    report(
        2,
        "analytic vs finite-difference gradients",
        pass,
        &format!(
            "{} kernel checks, worst rel err {:.2e} ({}); full network {:?}; {secs:.1}s",
            parts.len(),
            kernel_worst,
            worst_part.0,
            composite.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn criterion_03_procrustes_invariance() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut min_reflection = f64::INFINITY;
    for _ in 0..100 {
        let gt: Vec<Vector3<f64>> = (0..NUM_COMMON)
            .map(|_| Vector3::new(300.0 * normal(&mut rng), 300.0 * normal(&mut rng), 300.0 * normal(&mut rng)))
            .collect();
        let q = nalgebra::Quaternion::new(normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng));
        let rot = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let scale = rng.random_range(0.1..10.0);
        let t = Vector3::new(1000.0 * normal(&mut rng), 1000.0 * normal(&mut rng), 1000.0 * normal(&mut rng));
        let moved: Vec<Vector3<f64>> = gt.iter().map(|p| rot * p * scale + t).collect();
        worst = worst.max(pa_mpjpe(&moved, &gt).unwrap());
        let mirror = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let reflected: Vec<Vector3<f64>> = gt.iter().map(|p| rot * mirror * p * scale + t).collect();
        min_reflection = min_reflection.min(pa_mpjpe(&reflected, &gt).unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "Procrustes invariance",
        worst < 1e-6 && min_reflection > 0.0 && secs < 10.0,
        &format!("100 similarity transforms, max PA-MPJPE {worst:.2e} mm; reflections min {min_reflection:.1} mm; {secs:.2}s"),
    );
}

#[test]
fn criterion_04_soft_argmax_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let range = 1000.0;
    let mut peak_err = 0.0f64;
    let mut center_err = 0.0f64;
    let mut shift_err = 0.0f64;
    for _ in 0..100 {
        let (j, d, h, w) = (rng.random_range(1..4), rng.random_range(2..10), rng.random_range(1..9), rng.random_range(1..9));
        let stride = [4usize, 16][rng.random_range(0..2)];
        let n = d * h * w;
        let mut v: Vec<f64> = (0..j * n).map(|_| normal(&mut rng)).collect();
        let peaks: Vec<usize> = (0..j).map(|_| rng.random_range(0..n)).collect();
        for (q, &p) in peaks.iter().enumerate() {
            v[q * n + p] += 25.0;
        }
        let hm = |v: Vec<f64>| Heatmap3D { volume: Tensor::from_vec(v, (1, j, d, h, w), &Device::Cpu).unwrap() };
        let out = soft_argmax3d(&hm(v.clone()), stride, range).unwrap();
        let xyz = out.joints.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (q, &p) in peaks.iter().enumerate() {
            let (k, r, c) = (p / (h * w), (p / w) % h, p % w);
            let gx = xyz[q][0] / stride as f64 - 0.5;
            let gy = xyz[q][1] / stride as f64 - 0.5;
            let gz = (xyz[q][2] / (2.0 * range) + 0.5) * (d - 1) as f64;
            peak_err = peak_err.max((gx - c as f64).abs()).max((gy - r as f64).abs()).max((gz - k as f64).abs());
        }

        let level = 10.0 * normal(&mut rng);
        let out = soft_argmax3d(&hm(vec![level; j * n]), stride, range).unwrap();
        let center = [w as f64 * stride as f64 / 2.0, h as f64 * stride as f64 / 2.0, 0.0];
        for row in out.joints.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            for a in 0..3 {
                center_err = center_err.max((row[a] - center[a]).abs());
            }
        }

        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = soft_argmax3d(&hm(shifted), stride, range).unwrap();
        let a = soft_argmax3d(&hm(v), stride, range).unwrap();
        shift_err = shift_err
            .max(max_abs_diff(&flat(&a.joints), &flat(&b.joints)))
            .max(max_abs_diff(&flat(&a.confidence), &flat(&b.confidence)));
    }
    report(
        4,
        "soft-argmax fidelity",
        peak_err <= 0.25 && center_err < 1e-9 && shift_err < 1e-6,
        &format!("peak offset {peak_err:.2e} cells, uniform-volume center error {center_err:.2e}, logit-shift change {shift_err:.2e}"),
    );
}

/// Replaces entries of `t` where `mask` is zero with `junk`.
fn scramble(t: &Tensor, mask: &Tensor, junk: f64) -> Tensor {
    let noise = (t.ones_like().unwrap() * junk).unwrap();
    mask.broadcast_as(t.shape()).unwrap().ne(0u8).unwrap().where_cond(t, &noise).unwrap()
}

#[test]
fn criterion_05_masking_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let keep = 0.1;
    let mut heatmap_violations = 0;
    let mut dropped = 0;
    for _ in 0..100 {
        let mut pose = random_pose(&mut rng, NUM_SUPERSET, 64.0);
        for c in pose.confidence.iter_mut() {
            *c = rng.random_range(0.0..0.3);
        }
        let hm = make_heatmaps(&pose, (64, 64), 16, 16, 2.0, keep);
        for (j, &c) in pose.confidence.iter().enumerate() {
            let channel = hm.maps.index_axis(ndarray::Axis(0), j);
            let zero = channel.iter().all(|&v| v == 0.0);
            if c < keep {
                dropped += 1;
            }
            if (c < keep) != zero {
                heatmap_violations += 1;
            }
        }
    }
    let (_, s) = scene(9, 2);
    let cfg = ModelConfig::default();
    for _ in 0..20 {
        let mut pose = s.persons[0].pose2d();
        for c in pose.confidence.iter_mut() {
            *c = rng.random_range(0.0..0.5);
        }
        pose.confidence[0] = 1.0;
        pose.confidence[1] = 1.0;
        let p = prepare_input(s.image.view(), &pose, &cfg).unwrap();
        for (j, &c) in pose.confidence.iter().enumerate() {
            let zero = p.heatmaps.index_axis(ndarray::Axis(0), j).iter().all(|&v| v == 0.0);
            if (c < keep) != zero {
                heatmap_violations += 1;
            }
        }
    }

    let mut loss_changes = 0;
    let mut checks = 0;
    for _ in 0..50 {
        let b = rng.random_range(1..4);
        let kp = 15;
        let junk = if rng.random_bool(0.5) { 1e6 * normal(&mut rng) } else { f64::NAN };
        let pm = joint_mask(&mut rng, b, NUM_COMMON);
        let (pred, gt) = (randn(&mut rng, &[b, NUM_COMMON, 3]), randn(&mut rng, &[b, NUM_COMMON, 3]));
        let z3 = Tensor::cat(&[&pm.xy.unsqueeze(2).unwrap(), &pm.xy.unsqueeze(2).unwrap(), &pm.z.unsqueeze(2).unwrap()], 2).unwrap();
        let a = loss_pose(&pred, &gt, &pm).unwrap().scalar().unwrap();
        let bb = loss_pose(&pred, &scramble(&gt, &z3, junk), &pm).unwrap().scalar().unwrap();
        loss_changes += usize::from(a.to_bits() != bb.to_bits());

        let mask = ParamMask { theta_g: u8_mask(&mut rng, &[b], 0.6), theta: u8_mask(&mut rng, &[b], 0.6), beta: u8_mask(&mut rng, &[b], 0.6) };
        let (ptg, pth, pbe) = (randn(&mut rng, &[b, 3]), randn(&mut rng, &[b, kp, 3]), randn(&mut rng, &[b, NUM_BETAS]));
        let (gtg, gth, gbe) = (randn(&mut rng, &[b, 3]), randn(&mut rng, &[b, kp, 3]), randn(&mut rng, &[b, NUM_BETAS]));
        let pset = ParamSet { theta_g: &ptg, theta: &pth, beta: &pbe };
        let a = loss_param(&pset, &ParamSet { theta_g: &gtg, theta: &gth, beta: &gbe }, &mask).unwrap().scalar().unwrap();
        let (sg, st, sb) = (
            scramble(&gtg, &mask.theta_g.reshape((b, 1)).unwrap(), junk),
            scramble(&gth, &mask.theta.reshape((b, 1, 1)).unwrap(), junk),
            scramble(&gbe, &mask.beta.reshape((b, 1)).unwrap(), junk),
        );
        let bb = loss_param(&pset, &ParamSet { theta_g: &sg, theta: &st, beta: &sb }, &mask).unwrap().scalar().unwrap();
        loss_changes += usize::from(a.to_bits() != bb.to_bits());

        let sm = joint_mask(&mut rng, b, NUM_SUPERSET);
        let (p3, p2) = (randn(&mut rng, &[b, NUM_SUPERSET, 3]), randn(&mut rng, &[b, NUM_SUPERSET, 2]));
        let (g3, g2) = (randn(&mut rng, &[b, NUM_SUPERSET, 3]), randn(&mut rng, &[b, NUM_SUPERSET, 2]));
        let a = loss_coord_shape(&p3, &p2, &g3, &g2, &sm).unwrap().scalar().unwrap();
        let bb = loss_coord_shape(&p3, &p2, &scramble(&g3, &sm.z.unsqueeze(2).unwrap(), junk), &scramble(&g2, &sm.xy.unsqueeze(2).unwrap(), junk), &sm)
            .unwrap()
            .scalar()
            .unwrap();
        loss_changes += usize::from(a.to_bits() != bb.to_bits());
        checks += 3;
    }

    let cfg = small_model_config(Variant::Guided);
    let net = CrowdNet::new(&cfg, 2, DType::F64, &Device::Cpu).unwrap();
    let mut batch = two_person_batch(&cfg, DType::F64);
    for _ in 0..5 {
        let t = batch.targets.as_mut().unwrap();
        t.mask.pose = joint_mask(&mut rng, 2, NUM_COMMON);
        t.mask.shape = joint_mask(&mut rng, 2, NUM_SUPERSET);
        t.mask.params = ParamMask { theta_g: u8_mask(&mut rng, &[2], 0.5), theta: u8_mask(&mut rng, &[2], 0.5), beta: u8_mask(&mut rng, &[2], 0.5) };
        let out = net.forward(&batch, false).unwrap();
        let (_, before) = net.loss(&out, &batch).unwrap();
        let t = batch.targets.as_ref().unwrap();
        let m = &t.mask;
        let pose_m = Tensor::cat(&[&m.pose.xy.unsqueeze(2).unwrap(), &m.pose.xy.unsqueeze(2).unwrap(), &m.pose.z.unsqueeze(2).unwrap()], 2).unwrap();
        let mut scrambled = batch.clone();
        let st = scrambled.targets.as_mut().unwrap();
        st.pose = scramble(&t.pose, &pose_m, 777.0);
        st.joints3d_mm = scramble(&t.joints3d_mm, &m.shape.z.unsqueeze(2).unwrap(), -5e5);
        st.joints2d = scramble(&t.joints2d, &m.shape.xy.unsqueeze(2).unwrap(), f64::NAN);
        st.theta_g = scramble(&t.theta_g, &m.params.theta_g.reshape((2, 1)).unwrap(), 9.0);
        st.theta = scramble(&t.theta, &m.params.theta.reshape((2, 1, 1)).unwrap(), 9.0);
        st.beta = scramble(&t.beta, &m.params.beta.reshape((2, 1)).unwrap(), 9.0);
        let (_, after) = net.loss(&out, &scrambled).unwrap();
        for (x, y) in [(before.pose, after.pose), (before.param, after.param), (before.coord, after.coord), (before.total, after.total)] {
            loss_changes += usize::from(x.to_bits() != y.to_bits());
            checks += 1;
        }
    }
    report(
        5,
        "masking semantics",
        heatmap_violations == 0 && loss_changes == 0 && dropped > 0,
        &format!("{heatmap_violations} heatmap channel violations ({dropped} sub-threshold joints); {loss_changes} of {checks} losses changed by masked GT"),
    );
}

fn single_person_dataset(root: &std::path::Path) -> Dataset {
    let spec = DatasetSpec {
        splits: vec![SplitSpec { name: "single".into(), scenes: 16, overlap_target: 0.0, n_persons: Some(1) }],
        ..DatasetSpec::desk(7)
    };
    generate_dataset(root, &spec).unwrap()
}

#[test]
fn criterion_06_overfit() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    single_person_dataset(&data);
    let mut cfg = TrainConfig::desk();
    cfg.dataset = data.clone();
    cfg.split = "single".into();
    cfg.output_dir = tmp.path().join("run");
    cfg.epochs = 500;
    cfg.lr_decay_epochs = vec![];
    cfg.error_prob = 0.0;
    cfg.checkpoint_every_epoch = false;
    cfg.eval.split = "single".into();
    cfg.eval.synthesize_errors = false;
    let outcome = train(&cfg).unwrap();
    let totals = outcome.log.totals();
    let (first, last) = (totals[0], *totals.last().unwrap());
    let untrained = evaluate(&outcome.initial_checkpoint, &data, &cfg.eval).unwrap().report.mpjpe_mm;
    let trained = evaluate(&outcome.final_checkpoint, &data, &cfg.eval).unwrap().report.mpjpe_mm;
    let secs = start.elapsed().as_secs_f64();
    report(
        6,
        "overfit 16 single-person samples",
        totals.len() == 500 && last <= first / 5.0 && trained <= untrained / 5.0 && secs < 600.0,
        &format!(
            "{} steps, loss {first:.4} -> {last:.4} (ratio {:.1}); train MPJPE {untrained:.1} -> {trained:.1} mm (ratio {:.1}); {secs:.0}s",
            totals.len(),
            first / last,
            untrained / trained
        ),
    );
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct AblationRun {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    out: PathBuf,
    report: AblationReport,
    seconds: f64,
}

fn ablation() -> &'static AblationRun {
    static RUN: OnceLock<AblationRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        generate_dataset(&data, &DatasetSpec::desk(2024)).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.dataset = data.clone();
        cfg.output_dir = tmp.path().join("ablation");
        cfg.checkpoint_every_epoch = false;
        let variants = [Variant::Guided, Variant::Unguided, Variant::HmrStyle];
        let report = ablation_run(&cfg, &variants, &ABLATION_SEEDS).unwrap();
        let _ = writeln!(std::io::stderr(), "{}", report.to_table());
        AblationRun {
            out: cfg.output_dir.clone(),
            _tmp: tmp,
            data,
            report,
            seconds: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn criterion_07_toy_ablation() {
    let run = ablation();
    let (guided, total) = run.report.wins(Variant::Guided, Variant::Unguided);
    let (joint, total_h) = run.report.wins(Variant::Guided, Variant::HmrStyle);
    let mean = |v| run.report.rows_for(v).map(|r| r.mpjpe_mm).sum::<f64>() / ABLATION_SEEDS.len() as f64;
    report(
        7,
        "toy ablation on the overlap split",
        total == 5 && total_h == 5 && guided >= 4 && joint >= 3 && run.seconds < 7200.0,
        &format!(
            "guided < unguided in {guided}/{total} seeds, joint-based < HMR-style in {joint}/{total_h}; mean MPJPE guided {:.1}, unguided {:.1}, hmr_style {:.1} mm; {:.0}s",
            mean(Variant::Guided),
            mean(Variant::Unguided),
            mean(Variant::HmrStyle),
            run.seconds
        ),
    );
}

#[test]
fn criterion_08_guided_activation() {
    let run = ablation();
    let ckpt = run.out.join("guided").join("seed_0").join("checkpoints").join("final");
    let net = CrowdNet::load(&ckpt, &Device::Cpu).unwrap();
    let cfg = TrainConfig::desk();
    let ds = Dataset::open(&run.data).unwrap();
    let samples: Vec<SceneSample> = ds
        .load_split(&cfg.eval.split)
        .unwrap()
        .into_iter()
        .filter(|s| s.persons.len() == 2)
        .collect();
    let stats = activation_contrast(&net, &samples, &cfg.eval).unwrap();
    let wins = stats.iter().filter(|s| s.target_mean > s.other_mean).count();
    let frac = wins as f64 / stats.len().max(1) as f64;
    report(
        8,
        "guided activation contrast",
        !stats.is_empty() && frac >= 0.8,
        &format!("target > other in {wins}/{} (scene, target) pairs over {} two-person scenes = {:.1}%", stats.len(), samples.len(), 100.0 * frac),
    );
}

#[test]
fn criterion_09_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = DatasetSpec {
        splits: vec![SplitSpec { name: "train".into(), scenes: 16, overlap_target: 0.4, n_persons: None }],
        ..DatasetSpec::desk(9)
    };
    let ds = generate_dataset(&data, &spec).unwrap();
    let samples = ds.load_split("train").unwrap();
    let body = ds.body_model().unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.dataset = data;
    cfg.epochs = 2;
    cfg.lr_decay_epochs = vec![1];
    cfg.checkpoint_every_epoch = false;
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        cfg.output_dir = tmp.path().join(name);
        runs.push(train_on(&cfg, &samples, &body).unwrap());
    }
    let (a, b) = (runs[0].log.totals(), runs[1].log.totals());
    let curve_diff = max_abs_diff(&a, &b);

    let net = &runs[0].net;
    let probe: Vec<_> = (0..2).map(|i| prepare_person(&samples[0], i, net.config(), None).unwrap()).collect();
    let batch = collate(&probe, net.dtype(), &Device::Cpu).unwrap();
    let before = net.forward(&batch, false).unwrap();
    let dir = tmp.path().join("roundtrip");
    net.save(&dir).unwrap();
    let loaded = CrowdNet::load(&dir, &Device::Cpu).unwrap();
    let after = loaded.forward(&batch, false).unwrap();
    let bits = |t: &Tensor| flat(t).into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let exact = [
        (&before.vertices, &after.vertices),
        (&before.joints3d, &after.joints3d),
        (&before.pose3d.joints, &after.pose3d.joints),
        (&before.theta, &after.theta),
        (&before.beta, &after.beta),
        (&before.k, &after.k),
    ]
    .iter()
    .all(|(x, y)| bits(x) == bits(y));
    let from_disk = evaluate_samples(&loaded, &samples, &body, &cfg.eval, "train").unwrap();
    let in_memory = evaluate_samples(net, &samples, &body, &cfg.eval, "train").unwrap();
    let same_eval = from_disk.report == in_memory.report;
    report(
        9,
        "reproducibility",
        a.len() == b.len() && curve_diff <= 1e-5 && exact && same_eval,
        &format!("{} steps, max loss-curve difference {curve_diff:.1e}; eval-mode forward bit-exact after reload: {exact}; identical eval report: {same_eval}", a.len()),
    );
}

#[test]
fn criterion_10_schedule_fidelity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = DatasetSpec {
        splits: vec![SplitSpec { name: "train".into(), scenes: 2, overlap_target: 0.4, n_persons: Some(2) }],
        ..DatasetSpec::desk(10)
    };
    let ds = generate_dataset(&data, &spec).unwrap();
    let mut cfg = TrainConfig::desk();
    cfg.dataset = data;
    cfg.output_dir = tmp.path().join("run");
    cfg.batch_size = 2;
    cfg.checkpoint_every_epoch = false;
    cfg.model = small_model_config(Variant::Guided);
    let outcome = train_on(&cfg, &ds.load_split("train").unwrap(), &ds.body_model().unwrap()).unwrap();
    let expected = |epoch: usize| match epoch {
        0..=2 => 1e-4,
        3 | 4 => 1e-5,
        _ => 1e-6,
    };
    let rel = |got: f64, want: f64| ((got - want) / want).abs();
    let mut worst = 0.0f64;
    for (e, rec) in outcome.log.epochs.iter().enumerate() {
        worst = worst.max(rel(rec.lr, expected(e)));
    }
    for s in &outcome.log.steps {
        worst = worst.max(rel(s.lr, expected(s.epoch)));
    }
    let lrs: Vec<String> = outcome.log.epochs.iter().map(|e| format!("{:e}", e.lr)).collect();
    report(
        10,
        "learning-rate schedule",
        cfg.lr_decay_epochs == vec![3, 5] && outcome.log.epochs.len() == 6 && worst < 1e-12,
        &format!("per-epoch lr [{}], decay after epochs {:?}, max relative deviation {worst:.1e}", lrs.join(", "), cfg.lr_decay_epochs),
    );
}
