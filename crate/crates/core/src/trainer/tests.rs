use super::*;
use crate::data::toy;

const H: usize = 32;
const W: usize = 16;

fn toy_set(ids: u32) -> TrainSet {
    TrainSet::in_memory(toy::corpus(ids, 4, H, W, 11), H, W).unwrap()
}

fn cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::small(H, W)
    }
}

fn params_with_prefix(store: &ParamStore, prefix: &str) -> BTreeMap<String, Tensor> {
    store
        .params()
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

#[test]
fn batch_layout() {
    let set = toy_set(6);
    let batch = cfg().sampler().sample(&set).unwrap();
    let bt = BatchTensors::new(&batch, 3).unwrap();
    assert_eq!(bt.input.shape(), &[50, 3, H, W]);
    assert_eq!(bt.mse_rows, 40);
    assert_eq!(bt.hr_targets.shape(), &[40, 3, H, W]);
    assert_eq!(bt.dffn_rows.len(), 20);
    assert_eq!(&bt.dffn_rows[..10], &[0, 4, 8, 12, 16, 20, 24, 28, 32, 36]);
    assert_eq!(&bt.dffn_rows[10..], &(40..50).collect::<Vec<_>>()[..]);
    let s = &batch.persons[0].hr[0];
    assert_eq!(bt.input.row(0), s.hr.tensor().data());
    assert_eq!(bt.input.row(2), s.lr_variants[1].tensor().data());
    assert_eq!(bt.lr_targets.row(3), s.variant(3).tensor().data());
    let two = BatchTensors::new(&batch, 2).unwrap();
    assert_eq!(two.lr_targets.row(0), s.variant(2).tensor().data());
    assert_eq!(two.hr_targets, bt.hr_targets);
    for (k, p) in batch.persons.iter().enumerate() {
        assert_eq!(&bt.labels[2 * k..2 * k + 2], &[p.label, p.label]);
        assert_eq!(&bt.labels[10 + 2 * k..12 + 2 * k], &[p.label, p.label]);
    }
}

#[test]
fn zero_weights_and_rates_leave_parameters_unchanged() {
    let set = toy_set(6);
    let c = TrainConfig {
        lambda: 0.0,
        gamma: 0.0,
        lr_mse: 0.0,
        lr_reid: 0.0,
        ..cfg()
    };
    let mut st = TrainState::new(c, set.num_classes()).unwrap();
    let before = params_with_prefix(&st.store, "");
    let batch = st.sampler.sample(&set).unwrap();
    st.train_step(&batch).unwrap();
    assert_eq!(params_with_prefix(&st.store, ""), before);
}

#[test]
fn identical_seeds_give_identical_traces() {
    let set = toy_set(6);
    let trace = || {
        let mut st = TrainState::new(cfg(), set.num_classes()).unwrap();
        (0..3)
            .map(|_| {
                let b = st.sampler.sample(&set).unwrap();
                st.train_step(&b).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = trace();
    assert_eq!(a, trace());
    assert!(a.iter().all(|r| r.is_finite() && r.total > 0.0));
}

#[test]
fn ablations_freeze_the_unused_side() {
    let set = toy_set(6);
    for (ablation, frozen, trained) in [
        (Ablation::HrOnly, ["rrn.lr_decoder.", "dffn.lr.", "heads.lr."], ["rrn.hr_decoder.", "dffn.hr.", "heads.hr."]),
        (Ablation::LrOnly, ["rrn.hr_decoder.", "dffn.hr.", "heads.hr."], ["rrn.lr_decoder.", "dffn.lr.", "heads.lr."]),
    ] {
        let mut st = TrainState::new(TrainConfig { ablation, ..cfg() }, set.num_classes()).unwrap();
        let init = st.store.clone();
        for _ in 0..2 {
            let b = st.sampler.sample(&set).unwrap();
            st.train_step(&b).unwrap();
        }
        for p in frozen {
            assert_eq!(params_with_prefix(&st.store, p), params_with_prefix(&init, p), "{ablation:?} {p}");
        }
        for p in trained.iter().chain(&["rrn.encoder."]) {
            assert_ne!(params_with_prefix(&st.store, p), params_with_prefix(&init, p), "{ablation:?} {p}");
        }
    }
}

#[test]
fn detach_recon_keeps_reid_gradients_out_of_the_rrn() {
    let set = toy_set(6);
    let batch = cfg().sampler().sample(&set).unwrap();
    let bt = BatchTensors::new(&batch, 3).unwrap();
    let grads_of = |detach: bool| {
        let c = TrainConfig {
            detach_recon: detach,
            ..cfg()
        };
        let (model, store) = Mrjl::new(c.model_config(set.num_classes()), 1).unwrap();
        let mut g = Graph::new(&store, true);
        let l = build_losses(&model, &mut g, &bt, &c).unwrap();
        let grads = g.backward(l.reid).unwrap();
        let id = store.find("rrn.encoder.branch0.conv0.weight").unwrap();
        grads.get(id).cloned()
    };
    assert!(grads_of(true).is_none());
    assert!(grads_of(false).is_some());
}

#[test]
fn non_finite_loss_aborts_with_breakdown() {
    let set = toy_set(6);
    let mut st = TrainState::new(cfg(), set.num_classes()).unwrap();
    let id = st.store.find("heads.hr.0.weight").unwrap();
    st.store.value_mut(id).data_mut()[0] = f64::INFINITY;
    let b = st.sampler.sample(&set).unwrap();
    match st.train_step(&b) {
        Err(Error::NonFiniteLoss { step, breakdown }) => {
            assert_eq!(step, 0);
            assert!(breakdown.contains("L_ce="));
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
}

#[test]
fn run_writes_metrics_trace_and_checkpoint() {
    let set = toy_set(6);
    let dir = tempfile::tempdir().unwrap();
    let mut st = TrainState::new(
        TrainConfig {
            epochs: 3,
            lr_decay_epoch: 2,
            checkpoint_every: 1,
            ..cfg()
        },
        set.num_classes(),
    )
    .unwrap();
    let summary = run(&mut st, &set, dir.path(), |_| {}).unwrap();
    assert_eq!((summary.epochs, summary.steps), (3, 6));
    let trace = read_lr_trace(&dir.path().join(LR_TRACE_FILE)).unwrap();
    assert_eq!(trace.len(), 3);
    assert_eq!((trace[1].1, trace[1].2), (3e-3, 3e-4));
    assert!((trace[2].1 - 3e-4).abs() < 1e-18 && (trace[2].2 - 3e-5).abs() < 1e-18);
    let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step\tL_mse_H\tL_mse_L\tL_ce\tL_trip\ttotal");
    assert_eq!(lines.iter().filter(|l| l.starts_with("#epoch")).count(), 3);
    assert_eq!(lines.iter().filter(|l| !l.starts_with('#')).count(), 7);
    assert!(dir.path().join("checkpoint_epoch1.mrjl").exists());
    let ck = Checkpoint::load(&summary.checkpoint).unwrap();
    assert_eq!(ck.train.as_ref().unwrap().epochs, 3);
    let (_, store) = ck.restore().unwrap();
    assert_eq!(store.named(), st.store.named());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let set = toy_set(6);
    let c = TrainConfig { epochs: 2, ..cfg() };
    let full_dir = tempfile::tempdir().unwrap();
    let mut full = TrainState::new(c.clone(), set.num_classes()).unwrap();
    run(&mut full, &set, full_dir.path(), |_| {}).unwrap();

    let part_dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::new(TrainConfig { epochs: 1, ..c.clone() }, set.num_classes()).unwrap();
    run(&mut first, &set, part_dir.path(), |_| {}).unwrap();
    let ck = Checkpoint::load(&part_dir.path().join(FINAL_CHECKPOINT)).unwrap();
    let mut resumed = TrainState::resume(&ck).unwrap();
    resumed.cfg.epochs = 2;
    run(&mut resumed, &set, part_dir.path(), |_| {}).unwrap();
    assert_eq!(resumed.store.named(), full.store.named());
    assert_eq!(resumed.step, full.step);
    let strip = |d: &Path| std::fs::read_to_string(d.join(METRICS_FILE)).unwrap();
    assert_eq!(strip(part_dir.path()), strip(full_dir.path()));
}

#[test]
fn loss_decreases_on_toy_identities() {
    let set = toy_set(8);
    let mut st = TrainState::new(cfg(), set.num_classes()).unwrap();
    let mut totals = Vec::new();
    for _ in 0..40 {
        let b = st.sampler.sample(&set).unwrap();
        totals.push(st.train_step(&b).unwrap().total);
    }
    let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = totals[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn head_count_must_match_identities() {
    let set = toy_set(6);
    let mut st = TrainState::new(cfg(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(run(&mut st, &set, dir.path(), |_| {}), Err(Error::Config(_))));
}
