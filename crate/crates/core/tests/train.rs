//! Optimizer and training loop behavior on small networks.

mod common;

use common::{rng, small_cls_spec, small_config, small_seg_spec};
use dtnet_core::data::{synth_classification, synth_segmentation, Example, SynthConfig};
use dtnet_core::model::Task;
use dtnet_core::optim::{store_grads, Adam, AdamConfig, StepSchedule};
use dtnet_core::param::Param;
use dtnet_core::train::{augment, evaluate, predict, AugmentConfig, EpochRecord, Trainer, LOG_SCHEMA};
use dtnet_core::{Error, Module, Tape, Tensor};

fn cls_data(seed: u64) -> Vec<Example> {
    synth_classification(&SynthConfig { points: 32, train: 4, test: 1, seed }).unwrap().train
}

fn seg_data(seed: u64) -> Vec<Example> {
    synth_segmentation(&SynthConfig { points: 32, train: 8, test: 2, seed }).unwrap().0.train
}

fn values(t: &Trainer<f64>, trainable: bool) -> Vec<(String, Tensor<f64>)> {
    let mut out = Vec::new();
    t.model.visit("", &mut |n, p| {
        if p.is_trainable() == trainable {
            out.push((n.to_string(), p.value.clone()));
        }
    });
    out
}

fn run(t: &mut Trainer<f64>, data: &[Example]) -> Vec<EpochRecord> {
    let mut log = Vec::new();
    t.fit(data, &mut |r| {
        log.push(r.clone());
        Ok(())
    })
    .unwrap();
    log
}

#[test]
fn zero_learning_rate_leaves_weights_but_updates_running_stats() {
    let mut cfg = small_config(Task::Classification, 1);
    cfg.schedule.lr0 = 0.0;
    let mut t = Trainer::<f64>::new(small_cls_spec(), cfg).unwrap();
    let (w0, b0) = (values(&t, true), values(&t, false));
    run(&mut t, &cls_data(1));
    assert_eq!(values(&t, true), w0);
    assert_ne!(values(&t, false), b0);
    assert_eq!(t.adam.step, 3);
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let data = cls_data(2);
    let mut a = Trainer::<f64>::new(small_cls_spec(), small_config(Task::Classification, 2)).unwrap();
    let mut b = a.clone();
    let (la, lb) = (run(&mut a, &data), run(&mut b, &data));
    assert_eq!(la, lb);
    assert_eq!(values(&a, true), values(&b, true));
    assert_eq!(a.adam, b.adam);

    let mut cfg = small_config(Task::Classification, 2);
    cfg.seed = 4;
    let mut c = Trainer::<f64>::new(small_cls_spec(), cfg).unwrap();
    assert_ne!(run(&mut c, &data), la);
}

#[test]
fn repeated_steps_on_one_batch_drive_the_loss_down() {
    let data = cls_data(5);
    let mut cfg = small_config(Task::Classification, 50);
    cfg.batch_size = data.len();
    cfg.augment = AugmentConfig::NONE;
    let mut spec = small_cls_spec();
    spec.dropout = 0.0;
    let mut t = Trainer::<f32>::new(spec, cfg).unwrap();
    let mut losses = Vec::new();
    t.fit(&data, &mut |r| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < 0.25 * losses[0], "{losses:?}");
    assert_eq!(evaluate(&t.model, &data).unwrap().metrics.overall_accuracy, 1.0);
}

#[test]
fn segmentation_records_carry_instance_iou() {
    let data = seg_data(6);
    let mut t = Trainer::<f64>::new(small_seg_spec(), small_config(Task::Segmentation, 1)).unwrap();
    let log = run(&mut t, &data);
    let r = &log[0];
    assert_eq!((r.schema, r.epoch), (LOG_SCHEMA, 0));
    let miou = r.train_miou.unwrap();
    assert!((0.0..=1.0).contains(&miou));
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert!(json.get("eval").is_none());
    assert_eq!(json["train_miou"].as_f64(), Some(miou));
    let preds = predict(&t.model, &data).unwrap();
    assert!(preds.iter().all(|p| p.len() == 32));
}

#[test]
fn early_stop_checks_the_eval_score_each_epoch() {
    let mut cfg = small_config(Task::Classification, 10);
    cfg.stop_at = Some(0.0);
    let mut t = Trainer::<f64>::new(small_cls_spec(), cfg).unwrap();
    let log = run(&mut t, &cls_data(7));
    assert_eq!(log.len(), 1);
    assert_eq!(t.epoch, 1);
    assert!(log[0].eval.is_some());
}

#[test]
fn learning_rate_follows_the_step_schedule() {
    let mut cfg = small_config(Task::Classification, 3);
    cfg.schedule = StepSchedule { lr0: 0.01, factor: 0.5, period: 2 };
    let mut t = Trainer::<f64>::new(small_cls_spec(), cfg).unwrap();
    let lrs: Vec<f64> = run(&mut t, &cls_data(8)).iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![0.01, 0.01, 0.005]);
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let mut cfg = small_config(Task::Classification, 20);
    cfg.schedule.lr0 = 1e30;
    cfg.adam.weight_decay = 0.0;
    let mut t = Trainer::<f32>::new(small_cls_spec(), cfg).unwrap();
    let err = t.fit(&cls_data(9), &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
}

#[test]
fn mismatched_examples_are_rejected() {
    let mut t = Trainer::<f64>::new(small_cls_spec(), small_config(Task::Classification, 1)).unwrap();
    let wrong_size = synth_classification(&SynthConfig { points: 48, train: 1, test: 1, seed: 0 }).unwrap().train;
    assert!(matches!(t.run_epoch(&wrong_size), Err(Error::Input(_))));
    assert!(matches!(t.run_epoch(&seg_data(0)), Err(Error::Input(_))));
    assert!(matches!(t.run_epoch(&cls_data(0)[..1]), Err(Error::Input(_))));
}

/// One Adam update against the textbook recurrence with coupled L2.
#[test]
fn adam_step_matches_hand_computation() {
    struct One(Param<f64>);
    impl Module<f64> for One {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<f64>)) {
            f(&format!("{prefix}w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<f64>)) {
            f(&format!("{prefix}w"), &mut self.0);
        }
    }
    let cfg = AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 };
    let mut m = One(Param::new(Tensor::new([2], vec![1.0, -2.0]).unwrap()));
    let mut adam = Adam::new(cfg);
    let (mut mom, mut vel, mut p) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
    for step in 1..=3 {
        let tape = Tape::new();
        let w = tape.param(&m.0);
        let loss = w.mul(w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        store_grads(&mut m, &tape);
        adam.step(&mut m, 0.05);
        for i in 0..2 {
            let g = 2.0 * p[i] + 0.1 * p[i];
            mom[i] = 0.9 * mom[i] + 0.1 * g;
            vel[i] = 0.999 * vel[i] + 0.001 * g * g;
            let mhat = mom[i] / (1.0 - 0.9f64.powi(step));
            let vhat = vel[i] / (1.0 - 0.999f64.powi(step));
            p[i] -= 0.05 * mhat / (vhat.sqrt() + 1e-8);
        }
    }
    for (a, b) in m.0.value.data().iter().zip(p) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn augmentation_keeps_labels_attached_to_points() {
    let mut r = rng(10);
    let cfg = AugmentConfig { dropout_max_ratio: 0.9, scale_range: (1.0, 1.0), shift_range: 0.0 };
    let coords: Vec<f64> = (0..60).map(|i| i as f64).collect();
    let labels: Vec<usize> = (0..20).collect();
    for _ in 0..20 {
        let (mut c, mut l) = (coords.clone(), labels.clone());
        augment(&mut c, Some(&mut l), &cfg, &mut r);
        for (p, &lab) in c.chunks(3).zip(&l) {
            assert_eq!(p, &coords[3 * lab..3 * lab + 3]);
        }
        assert_eq!(l[0], 0);
    }
}
