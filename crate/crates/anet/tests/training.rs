use filament_anet::gradcheck::random_targets;
use filament_anet::{predict_tile, train_samples, AnetConfig, AnetModel, LossReduction, Mode, Sample, Tensor4, TrainConfig};
use filament_core::imgcore::{Image2D, SourceDepth};

fn toy_set() -> Vec<Sample> {
    (0..4)
        .map(|k| {
            let (h, w) = (16, 16);
            let truth: Vec<f64> = (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    let on = match k {
                        0 => c == 5 || c == 6,
                        1 => r == 9,
                        2 => r == c || r == c + 1,
                        _ => c == 12 || r == 3,
                    };
                    if on {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let input: Vec<f64> = truth
                .iter()
                .enumerate()
                .map(|(i, t)| 0.7 * t + 0.1 * ((i * 13 + k) % 7) as f64 / 7.0)
                .collect();
            Sample {
                input: Tensor4::from_vec(1, 1, h, w, input).unwrap(),
                truth: Tensor4::from_vec(1, 1, h, w, truth).unwrap(),
                weight: Tensor4::from_vec(1, 1, h, w, vec![1.0; h * w]).unwrap(),
            }
        })
        .collect()
}

#[test]
fn overfits_a_toy_set() {
    let samples = toy_set();
    let tc = TrainConfig {
        epochs: 200,
        lr: 1e-3,
        seed: 11,
        ..TrainConfig::default()
    };
    let out = train_samples(&samples, AnetConfig::new(2, 4), &tc).unwrap();
    let means = out.epoch_means();
    assert_eq!(means.len(), 200);
    assert!(means[199] < 0.1 * means[0], "first {} last {}", means[0], means[199]);
    assert_eq!(out.adam.t, 800);

    // Evaluation-mode prediction on a training tile favours the true class.
    let s = &samples[0];
    let tile = Image2D::new(16, 16, s.input.data.clone(), 62.5, SourceDepth::F32).unwrap();
    let p = predict_tile(&out.model, &tile).unwrap();
    let mean_pg = p
        .values()
        .iter()
        .zip(&s.truth.data)
        .map(|(p, g)| if *g == 1.0 { *p } else { 1.0 - p })
        .sum::<f64>()
        / 256.0;
    assert!(mean_pg > 0.9, "mean P_g {mean_pg}");
}

#[test]
fn training_log_is_deterministic() {
    let samples = toy_set();
    let tc = TrainConfig {
        epochs: 5,
        lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train_samples(&samples, AnetConfig::new(2, 2), &tc).unwrap();
    let b = train_samples(&samples, AnetConfig::new(2, 2), &tc).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.model, b.model);
    let c = train_samples(&samples, AnetConfig::new(2, 2), &TrainConfig { seed: 4, ..tc }).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn zero_weights_give_zero_gradients() {
    let model = AnetModel::init(AnetConfig::new(2, 2), 5).unwrap();
    let (x, truth, _) = random_targets(6, 8, 8);
    let zero = Tensor4::zeros(1, 1, 8, 8);
    let b = model.loss_and_gradients(&x, &truth, &zero, LossReduction::WeightNormalized).unwrap();
    assert!(b.grads.iter().all(|g| *g == 0.0));
}

#[test]
fn duplicated_batch_doubles_summed_gradient() {
    let model = AnetModel::init(AnetConfig::new(2, 2), 7).unwrap();
    let (x, truth, weight) = random_targets(8, 8, 8);
    let twice = |t: &Tensor4| {
        let mut data = t.data.clone();
        data.extend_from_slice(&t.data);
        Tensor4::from_vec(2, t.c, t.h, t.w, data).unwrap()
    };
    let one = model.loss_and_gradients(&x, &truth, &weight, LossReduction::Sum).unwrap();
    let two = model
        .loss_and_gradients(&twice(&x), &twice(&truth), &twice(&weight), LossReduction::Sum)
        .unwrap();
    assert!((two.value - 2.0 * one.value).abs() <= 1e-10 * one.value);
    let scale = one.grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for (a, b) in one.grads.iter().zip(&two.grads) {
        assert!((b - 2.0 * a).abs() <= 1e-9 * scale);
    }
}

#[test]
fn skip_connections_never_need_cropping() {
    for depth in 1..=4 {
        let cfg = AnetConfig::new(depth, 2);
        let model = AnetModel::init(cfg, 1).unwrap();
        for k in 1..=3 {
            let side = k << depth;
            let x = Tensor4::zeros(1, 1, side, side + (1 << depth));
            let (s, _) = model.forward(&x, Mode::Train).unwrap();
            assert_eq!(s.dims(), (1, 2, side, side + (1 << depth)));
        }
    }
}

#[test]
fn full_size_tile_keeps_its_size() {
    // Channel width does not affect the spatial contract; a narrow model keeps this fast.
    let model = AnetModel::init(AnetConfig::new(4, 1), 2).unwrap();
    let x = Tensor4::zeros(1, 1, 512, 512);
    let (s, _) = model.forward(&x, Mode::Eval).unwrap();
    assert_eq!(s.dims(), (1, 2, 512, 512));
}

#[test]
fn desk_scale_scores_shape() {
    let model = AnetModel::init(AnetConfig::new(3, 8), 2).unwrap();
    let (s, _) = model.forward(&Tensor4::zeros(1, 1, 64, 64), Mode::Eval).unwrap();
    assert_eq!(s.dims(), (1, 2, 64, 64));
}
