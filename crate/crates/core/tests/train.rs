use std::time::Instant;

use endogede_core::losses::retinex_loss;
use endogede_core::report::to_json;
use endogede_core::synth::{gen_scene, SceneConfig};
use endogede_core::train::{
    decomposer_name, flow_name, mole_toy_task, run_training, DepthInit, InitConfig, PoseInit, Stage, StageSteps,
    ToyConfig, TrainConfig, Trainer,
};
use endogede_core::{Tape, Tensor};

fn pair_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.scene.frames = 2;
    cfg.frame_interval = 1;
    cfg
}

fn crop(t: &Tensor, ox: usize, oy: usize) -> Tensor {
    Tensor::image(64, 80, t.shape()[2], |y, x, c| t.at3(y + oy, x + ox, c))
}

/// Mean endpoint error of the target→source flow against a constant shift,
/// over pixels at least 4 px from the border.
fn interior_epe(flow: &Tensor, sx: f64, sy: f64) -> f64 {
    let (mut sum, mut n) = (0.0, 0.0);
    for y in 4..60 {
        for x in 4..76 {
            sum += (flow.at3(y, x, 0) - sx).hypot(flow.at3(y, x, 1) - sy);
            n += 1.0;
        }
    }
    sum / n
}

#[test]
fn static_pair_flow_stays_at_zero() {
    let mut cfg = pair_config();
    cfg.scene.max_step_translation = 0.0;
    cfg.scene.max_step_rotation_deg = 0.0;
    let mut tr = Trainer::new(cfg).unwrap();
    assert_eq!(tr.scene.frames[0], tr.scene.frames[1]);
    let s = tr.samples()[0].clone();
    tr.run_stage1(&s, 100).unwrap();
    let epe = interior_epe(tr.params.get(&flow_name(0, 1)).unwrap(), 0.0, 0.0);
    assert!(epe < 0.1, "static epe {epe}");
}

#[test]
fn integer_shift_flow_is_recovered_and_loss_decreases() {
    let big = gen_scene(
        3,
        &SceneConfig {
            height: 70,
            width: 86,
            frames: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let (dx, dy) = (2, 1);
    let cfg = pair_config();
    let mut scene = gen_scene(3, &cfg.scene).unwrap();
    // the source sees the target content displaced by (dx, dy)
    scene.frames = vec![crop(&big.frames[0], 3, 3), crop(&big.frames[0], 3 - dx, 3 - dy)];
    let mut tr = Trainer::with_scene(cfg, scene).unwrap();
    let s = tr.samples()[0].clone();
    let trace = tr.run_stage1(&s, 300).unwrap();
    let epe = interior_epe(tr.params.get(&flow_name(0, 1)).unwrap(), dx as f64, dy as f64);
    assert!(epe < 0.25, "shift epe {epe}");
    let back = interior_epe(tr.params.get(&flow_name(1, 0)).unwrap(), -(dx as f64), -(dy as f64));
    assert!(back < 0.25, "backward epe {back}");
    let smooth = trace.smoothed(10);
    for w in smooth.windows(2) {
        assert!(w[1] <= w[0], "smoothed stage-1 loss rose: {smooth:?}");
    }
}

fn ground_truth_stage2(shading_range: (f64, f64)) -> (f64, f64) {
    // default learning rate: the desk rates move every pixel by a visible step
    let mut cfg = TrainConfig::default();
    cfg.scene.shading_range = shading_range;
    cfg.init.ground_truth_decomposition = true;
    let mut tr = Trainer::new(cfg).unwrap();
    let s = tr.samples()[0].clone();
    // no mask ground truth exists; attribute every image gradient to albedo
    for f in [0, 4, 8] {
        tr.params
            .tensors
            .insert(decomposer_name("mask_bias", f), Tensor::full(&[64, 80, 1], 10.0));
    }
    let trace = tr.run_stage2(&s, 100).unwrap();
    let worst = trace.losses.iter().fold(0.0f64, |m, v| m.max(*v));
    (trace.first(), worst)
}

#[test]
fn ground_truth_decomposition_is_a_near_minimiser_under_unit_shading() {
    let (first, worst) = ground_truth_stage2((0.85, 1.0));
    assert!(first < 1e-3, "loss at ground truth {first}");
    assert!(worst - first < 2e-3, "drift {}", worst - first);
}

#[test]
#[ignore = "retinex term penalises ground truth when shading is well below 1"]
fn ground_truth_decomposition_is_a_near_minimiser_on_default_scenes() {
    let (first, worst) = ground_truth_stage2(SceneConfig::default().shading_range);
    assert!(first < 1e-3, "loss at ground truth {first}");
    assert!(worst - first < 2e-3, "drift {}", worst - first);
}

#[test]
fn stage2_from_random_init_recomposes_the_image() {
    let mut tr = Trainer::new(TrainConfig::desk()).unwrap();
    let s = tr.samples()[0].clone();
    let trace = tr.run_stage2(&s, 300).unwrap();
    let rec = trace.breakdown.get("recomposition").unwrap();
    assert!(rec < 0.02, "final recomposition loss {rec}");
    assert!(trace.last() < trace.first());
}

#[test]
fn unit_mask_makes_retinex_penalise_shading_variation() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::image(8, 8, 3, |y, x, c| 0.3 + 0.05 * ((x + y + c) % 3) as f64));
    let i = tape.constant(Tensor::image(8, 8, 3, |y, x, _| 0.2 + 0.03 * (x * y % 5) as f64));
    let m = tape.constant(Tensor::ones(&[8, 8, 1]));
    let flat = tape.constant(Tensor::full(&[8, 8, 1], 0.7));
    let ramp = tape.constant(Tensor::image(8, 8, 1, |_, x, _| 0.5 + 0.05 * x as f64));
    let base = retinex_loss(a, flat, m, i, 0.85).unwrap().item();
    let varied = retinex_loss(a, ramp, m, i, 0.85).unwrap().item();
    assert!(varied > base + 1e-3, "flat {base} vs ramp {varied}");
}

#[test]
fn stage3_is_stationary_at_ground_truth() {
    let norm_at = |depth: DepthInit, pose: PoseInit| {
        let mut cfg = TrainConfig::desk();
        cfg.seed = 7;
        cfg.init = InitConfig {
            depth,
            pose,
            ground_truth_flows: true,
            ground_truth_decomposition: true,
        };
        let tr = Trainer::new(cfg).unwrap();
        let s = tr.samples()[0].clone();
        let frozen = tr.frozen_inputs(&s).unwrap();
        let tape = Tape::new();
        let (loss, _, leaves) = tr.alignment_objective(&tape, &s, &frozen).unwrap();
        let g = tape.backward(loss).unwrap();
        leaves
            .iter()
            .filter(|(n, _)| !n.starts_with("appearance"))
            .map(|(_, v)| g.wrt(*v).data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    };
    // the loss is a per-pixel mean, so its gradient is already normalised
    // by the pixel count
    let at_gt = norm_at(DepthInit::ScaledGroundTruth(1.0), PoseInit::GroundTruth);
    let perturbed = norm_at(
        DepthInit::ScaledGroundTruth(1.3),
        PoseInit::Perturbed {
            rotation_deg: 1.0,
            translation: 0.03,
        },
    );
    assert!(at_gt < 1e-3, "gradient norm at ground truth {at_gt}");
    assert!(at_gt < 0.1 * perturbed, "{at_gt} vs perturbed {perturbed}");
}

fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.seed = 11;
    cfg.scene.height = 32;
    cfg.scene.width = 40;
    cfg.steps = StageSteps {
        flow: 60,
        decomposition: 60,
        alignment: 100,
    };
    cfg
}

#[test]
fn one_epoch_smoke_run_is_fast_and_well_formed() {
    let start = Instant::now();
    let report = run_training(&smoke_config()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let json: serde_json::Value = serde_json::from_str(&to_json(&report).unwrap()).unwrap();
    assert_eq!(json["schema"], "endogede-train/1");
    let sample = &json["epochs"][0]["samples"][0];
    for stage in ["stage1", "stage2", "stage3"] {
        assert!(sample[stage]["last_loss"].as_f64().unwrap().is_finite());
    }
    assert!(json["metrics"][0]["depth"]["abs_rel"].as_f64().unwrap() >= 0.0);
    assert!(json["routing"].is_null());
}

#[test]
fn same_seed_gives_identical_reports() {
    let mut cfg = smoke_config();
    cfg.steps = StageSteps {
        flow: 10,
        decomposition: 10,
        alignment: 10,
    };
    let a = to_json(&run_training(&cfg).unwrap()).unwrap();
    let b = to_json(&run_training(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stages_leave_foreign_parameters_bit_identical() {
    let mut tr = Trainer::new(smoke_config()).unwrap();
    let s = tr.samples()[0].clone();
    let decomposition = tr.params.owned_by(Stage::Decomposition);
    tr.run_stage1(&s, 5).unwrap();
    let flows = tr.params.owned_by(Stage::Flow);
    let alignment = tr.params.owned_by(Stage::Alignment);
    tr.run_stage3(&s, 5).unwrap();
    assert_eq!(tr.params.owned_by(Stage::Decomposition), decomposition);
    assert_eq!(tr.params.owned_by(Stage::Flow), flows);
    assert_ne!(tr.params.owned_by(Stage::Alignment), alignment);
}

#[test]
fn intrinsics_are_optimised_only_when_enabled() {
    for enabled in [false, true] {
        let mut cfg = smoke_config();
        cfg.optimize_intrinsics = enabled;
        let mut tr = Trainer::new(cfg).unwrap();
        let s = tr.samples()[0].clone();
        let before = tr.params.get("intrinsics").unwrap().clone();
        tr.run_stage3(&s, 3).unwrap();
        assert_eq!(tr.params.get("intrinsics").unwrap() != &before, enabled);
    }
}

#[test]
fn untrained_adapters_reproduce_the_frozen_baseline() {
    let cfg = ToyConfig {
        train_adapters: false,
        ..Default::default()
    };
    let r = mole_toy_task(None, &cfg).unwrap();
    assert_eq!(r.adapted_rmse, r.baseline_rmse);
    assert_eq!(r.adapted_rmse_by_family, r.baseline_rmse_by_family);
    assert_eq!(r.relative_reduction, 0.0);
}

#[test]
fn toy_rejects_bad_plans() {
    let plan = endogede_core::spectral::allocate_experts(&[2.0; 5], 10).unwrap();
    assert!(mole_toy_task(Some(&plan), &ToyConfig::default()).is_err());
    assert!(mole_toy_task(None, &ToyConfig { blocks: 1, ..Default::default() }).is_err());
}
