mod common;

use std::fs;

use common::*;
use headlab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, OPTIM, PARAMS};
use headlab::exec::Exec;
use headlab::train::{params_equal, Phase, TrainSchedule, Trainer};

fn meta(t: &Trainer) -> CheckpointMeta {
    CheckpointMeta {
        schedule: Some(t.schedule.clone()),
        phase: Some(t.phase()),
        trainer: Some(t.state.clone()),
        ..Default::default()
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let (cfg, p) = prepared(SMALL_IAT);
    let mut t = trainer(&p, cfg.schedule.clone(), Exec::default());
    t.run_until(5, |_| {}).unwrap();
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    save_checkpoint(&a, &t.model, Some(&t.optim), &meta(&t)).unwrap();
    let back = load_checkpoint(&a).unwrap();
    save_checkpoint(&b, &back.model, back.optim.as_ref(), &back.meta).unwrap();
    for f in [PARAMS, OPTIM, "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn resume_mid_iat_matches_uninterrupted_run() {
    let (cfg, p) = prepared(SMALL_IAT);
    let mut full = trainer(&p, cfg.schedule.clone(), Exec::Parallel);
    let mut full_log = Vec::new();
    full.run(|r| full_log.push(r.clone())).unwrap();

    let mut first = trainer(&p, cfg.schedule.clone(), Exec::Sequential);
    let stop = first.iat_start() + 3;
    let mut log = Vec::new();
    first.run_until(stop, |r| log.push(r.clone())).unwrap();
    assert_eq!(first.phase(), Phase::Iat);

    let d = tempfile::tempdir().unwrap();
    save_checkpoint(d.path(), &first.model, Some(&first.optim), &meta(&first)).unwrap();
    drop(first);
    let ck = load_checkpoint(d.path()).unwrap();
    assert_eq!(ck.meta.phase, Some(Phase::Iat));
    let state = ck.meta.trainer.unwrap();
    assert!(state.masks.is_some());
    let mut resumed = Trainer::resume(ck.model, ck.optim.unwrap(), p.tasks.clone(), ck.meta.schedule.unwrap(), state, Exec::Parallel).unwrap();
    resumed.run(|r| log.push(r.clone())).unwrap();

    assert_eq!(log, full_log);
    assert!(params_equal(resumed.model.params(), full.model.params()));
    assert_eq!(resumed.state, full.state);
}

#[test]
fn no_iat_when_delta_zero_or_alpha_one() {
    let (cfg, p) = prepared(SMALL_IAT);
    let vanilla = TrainSchedule { delta: 0.0, ..cfg.schedule.clone() };
    let mut base = trainer(&p, vanilla, Exec::default());
    base.run(|_| {}).unwrap();
    let all_heads = TrainSchedule { alpha: 1.0, ..cfg.schedule.clone() };
    let mut t = trainer(&p, all_heads, Exec::default());
    t.run(|_| {}).unwrap();
    assert!(params_equal(base.model.params(), t.model.params()));
    let iat = cfg.schedule.clone();
    let mut t = trainer(&p, iat, Exec::default());
    t.run(|_| {}).unwrap();
    assert!(!params_equal(base.model.params(), t.model.params()));
}
