use semg_t2v::augment::augment_set;
use semg_t2v::checkpoint::CheckpointStage;
use semg_t2v::dataset::{Dataset, SyntheticSpec};
use semg_t2v::encoder::{ModelConfig, ModelParams};
use semg_t2v::evaluation::evaluate;
use semg_t2v::training::{
    adam_step, fine_tune_adapt, init_checkpoint, source_windows, strided_subset, train_loop, train_stage, AdamState,
    FoldData, LoopSpec, OptimizerConfig, Stage, TrainConfig,
};
use semg_t2v::windowing::{plan_folds, FoldPlan, Role, Window};
use semg_t2v::Error;

fn dataset() -> (Dataset, Vec<FoldPlan>) {
    let ds = SyntheticSpec::with_subjects(3, 5).generate_in_memory().unwrap();
    let folds = plan_folds(&ds.manifest).unwrap();
    (ds, folds)
}

fn quick() -> TrainConfig {
    let mut tc = TrainConfig::desk();
    tc.stage1.epochs_max = 2;
    tc.stage2.epochs_max = 1;
    tc.adapt.epochs_max = 1;
    tc.max_batches_per_epoch = Some(3);
    tc.max_val_windows = Some(60);
    tc
}

fn spec(seed: u64, epochs: usize) -> LoopSpec<'static> {
    LoopSpec {
        tag: "test",
        learning_rate: 1e-3,
        epochs_max: epochs,
        patience: epochs.max(1),
        batch_size: 32,
        seed,
        head_only: false,
    }
}

fn mean_loss(p: &ModelParams<f32>, cfg: &ModelConfig, ws: &[Window]) -> f64 {
    let refs: Vec<&Window> = ws.iter().collect();
    semg_t2v::training::compute_gradients(p, cfg, &refs, None).unwrap().loss
}

#[test]
fn fixed_batch_loss_decreases_for_most_seeds() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let train = strided_subset(&source_windows(&folds[0], Role::MsTrain, &ds, &cfg).unwrap(), Some(32));
    let opt = OptimizerConfig::default();
    let mut wins = 0;
    for seed in 0..5 {
        let mut p = semg_t2v::encoder::build_variant::<f32>(&cfg, seed).unwrap();
        let before = mean_loss(&p, &cfg, &train);
        let mut state = AdamState::new(&p);
        let refs: Vec<&Window> = train.iter().collect();
        for _ in 0..10 {
            let g = semg_t2v::training::compute_gradients(&p, &cfg, &refs, None).unwrap();
            adam_step(&mut p, &g.grads, &mut state, 1e-3, &opt);
        }
        if mean_loss(&p, &cfg, &train) < before {
            wins += 1;
        }
    }
    assert!(wins >= 3, "loss decreased for only {wins} of 5 seeds");
}

#[test]
fn zero_epochs_return_input_unchanged() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let mut tc = quick();
    let init = init_checkpoint(&cfg, &tc).unwrap();
    let (p, log) = train_loop(init.params.clone(), &cfg, &tc, &data.ms_train, &data.ms_val, &spec(1, 0)).unwrap();
    assert_eq!(p, init.params);
    assert!(log.records.is_empty() && log.best_epoch.is_none());

    tc.stage1.epochs_max = 0;
    let s1 = train_stage(Stage::One, &folds[0], &data, &init, &tc).unwrap();
    assert_eq!(s1.checkpoint.params, init.params);
    assert!(s1.checkpoint.exposed_subjects.is_empty());
}

#[test]
fn best_epoch_is_the_validation_maximum() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let tc = quick();
    let val = strided_subset(&data.ms_val, Some(60));
    let init = init_checkpoint(&cfg, &tc).unwrap();
    let (p, log) = train_loop(init.params, &cfg, &tc, &data.ms_train, &val, &spec(2, 4)).unwrap();
    let epochs: Vec<usize> = log.records.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (0..epochs.len()).collect::<Vec<_>>());
    let max = log.records.iter().map(|r| r.val_macro_f1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.best_val_f1(), Some(max));
    let best = log.best_epoch.unwrap();
    assert_eq!(log.records[best].val_macro_f1, max);
    // Strict improvement: the first epoch reaching the maximum wins.
    assert!(log.records[..best].iter().all(|r| r.val_macro_f1 < max));
    assert_eq!(evaluate(&p, &cfg, &val).unwrap().macro_f1, max);
}

#[test]
fn patience_stops_after_stale_epochs() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let tc = quick();
    let init = init_checkpoint(&cfg, &tc).unwrap();
    let val = strided_subset(&data.ms_val, Some(30));
    let s = LoopSpec { learning_rate: 1e-9, patience: 1, ..spec(3, 6) };
    let (_, log) = train_loop(init.params, &cfg, &tc, &data.ms_train, &val, &s).unwrap();
    // A vanishing rate cannot improve validation, so epoch 1 is stale.
    assert_eq!(log.records.len(), 2);
    assert_eq!(log.best_epoch, Some(0));
}

#[test]
fn stage_one_trains_on_twice_the_windows() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    // 2 source subjects x 10 gestures x 4 trials x 39 windows.
    assert_eq!(data.ms_train.len(), 3120);
    let aug = augment_set(&data.ms_train, &quick().stage1.augment).unwrap();
    assert_eq!(aug.len(), 2 * data.ms_train.len());
    assert_eq!(aug.iter().filter(|w| w.is_augmented).count(), data.ms_train.len());
}

#[test]
fn adaptation_windows_come_from_two_held_out_trials() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let f = &folds[1];
    let calib = source_windows(f, Role::AdaptCalib, &ds, &cfg).unwrap();
    let val = source_windows(f, Role::AdaptVal, &ds, &cfg).unwrap();
    assert_eq!(calib.len() + val.len(), 780);
    assert!(calib.iter().chain(&val).all(|w| w.provenance.subject == f.held_out_subject));
    assert!(calib.iter().all(|w| w.provenance.trial_index == 1));
    assert!(val.iter().all(|w| w.provenance.trial_index == 2));
}

#[test]
fn stage_two_requires_stage_one_checkpoint() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let tc = quick();
    let init = init_checkpoint(&cfg, &tc).unwrap();
    assert!(matches!(train_stage(Stage::Two, &folds[0], &data, &init, &tc), Err(Error::Config(_))));
}

#[test]
fn exposure_to_held_out_subject_is_leakage() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let tc = quick();
    let mut ck = init_checkpoint(&cfg, &tc).unwrap();
    ck.exposed_subjects = vec![folds[0].held_out_subject];
    assert!(matches!(train_stage(Stage::One, &folds[0], &data, &ck, &tc), Err(Error::Leakage(_))));
    ck.stage = CheckpointStage::Stage2;
    assert!(matches!(fine_tune_adapt(&folds[0], &ds, &ck, &tc), Err(Error::Leakage(_))));
}

#[test]
fn zero_adapt_epochs_leave_report_unchanged() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let mut tc = quick();
    tc.adapt.epochs_max = 0;
    let mut ck = init_checkpoint(&cfg, &tc).unwrap();
    ck.stage = CheckpointStage::Stage2;
    let out = fine_tune_adapt(&folds[2], &ds, &ck, &tc).unwrap();
    assert_eq!(out.pre, out.post);
    assert_eq!(out.checkpoint.params, ck.params);
    assert!(out.log.records.is_empty());
    assert_eq!(out.pre.n_windows, 4 * 10 * 39);
}

#[test]
fn two_stage_runs_are_deterministic_and_track_exposure() {
    let (ds, folds) = dataset();
    let cfg = ModelConfig::desk();
    let data = FoldData::load(&folds[0], &ds, &cfg).unwrap();
    let tc = quick();
    let init = init_checkpoint(&cfg, &tc).unwrap();
    let run = || {
        let s1 = train_stage(Stage::One, &folds[0], &data, &init, &tc).unwrap();
        let s2 = train_stage(Stage::Two, &folds[0], &data, &s1.checkpoint, &tc).unwrap();
        (s1, s2)
    };
    let (a1, a2) = run();
    let (b1, b2) = run();
    assert_eq!(a1.checkpoint.to_bytes().unwrap(), b1.checkpoint.to_bytes().unwrap());
    assert_eq!(a2.checkpoint.to_bytes().unwrap(), b2.checkpoint.to_bytes().unwrap());
    assert_eq!(a2.checkpoint.stage, CheckpointStage::Stage2);
    assert_ne!(a1.checkpoint.params, init.params);
    let mut sources = folds[0].source_subjects.clone();
    sources.sort_unstable();
    assert_eq!(a2.checkpoint.exposed_subjects, sources);
    assert!(a2.log.records.iter().all(|r| r.stage == "stage2" && r.learning_rate == tc.stage2.learning_rate));
}
