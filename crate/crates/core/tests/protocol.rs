mod common;

use std::fs;

use mcp::protocol::{run_protocol, CopySpec, ProtocolPlan, StageSpec};
use mcp::training::TrainConfig;
use mcp::Error;

fn plan(epochs: usize) -> ProtocolPlan {
    ProtocolPlan {
        stages: vec![
            StageSpec::new("MC{O=sig,L=sig}"),
            StageSpec::new("MC{O=sig,L=sig:con}").child_of("MC_O-sig_L-sig", CopySpec::All),
            StageSpec::new("MC{O=sig,L=sig:con,MR=tanh}").child_of("MC_O-sig_L-sig-con", CopySpec::All),
        ],
        train: TrainConfig {
            seeds: vec![3, 7],
            epochs,
            jobs: 1,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn stages_persist_inherit_and_resume() {
    let (fs, mask) = common::sig_data(8);
    let dir = tempfile::tempdir().unwrap();
    let p = plan(15);
    let first = run_protocol(&p, &fs, &mask, Some(dir.path()), false).unwrap();
    assert_eq!(first.stages.len(), 3);

    let child = first.stage("MC_O-sig_L-sig-con").unwrap();
    let parent = first.stage("MC_O-sig_L-sig").unwrap();
    let entry = &first.ledger.stages["MC_O-sig_L-sig-con"];
    assert_eq!(entry.parents, vec!["MC_O-sig_L-sig"]);
    assert_eq!(entry.copied.len(), 7);
    assert!(entry.fresh.is_empty());
    // fully inherited stages only need one run
    assert_eq!(child.outcome.runs.len(), 1);
    for run in &child.outcome.runs {
        assert_eq!(run.history.len(), 15);
    }
    assert!(parent.outcome.runs.len() == 2);
    let mr = &first.ledger.stages["MC_O-sig_L-sig-con_MR-tanh"];
    assert_eq!(mr.fresh, vec!["mr.kappa", "mr.a", "mr.c"]);

    for stage in &first.stages {
        let sdir = dir.path().join("runs").join(&stage.id);
        assert!(sdir.join("best.json").is_file());
        for run in &stage.outcome.runs {
            let rdir = sdir.join(run.seed.to_string());
            for f in ["params.json", "history.csv", "trace.csv", "meta.json"] {
                assert!(rdir.join(f).is_file(), "{} missing {f}", stage.id);
            }
            let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(rdir.join("meta.json")).unwrap()).unwrap();
            assert_eq!(meta["config_hash"], stage.config_hash.as_str());
            assert_eq!(meta["adam_restarted"], true);
        }
    }

    let again = run_protocol(&p, &fs, &mask, Some(dir.path()), true).unwrap();
    assert!(again.stages.iter().all(|s| s.resumed));
    for (a, b) in first.stages.iter().zip(&again.stages) {
        assert_eq!(a.best().params, b.best().params);
        assert_eq!(a.config_hash, b.config_hash);
    }

    // changing the epochs invalidates every stage
    let changed = run_protocol(&plan(16), &fs, &mask, Some(dir.path()), true).unwrap();
    assert!(changed.stages.iter().all(|s| !s.resumed));
}

#[test]
fn partial_copy_leaves_the_rest_fresh() {
    let (fs, mask) = common::sig_data(8);
    let p = ProtocolPlan {
        stages: vec![
            StageSpec::new("MC{O=sig,L=sig}"),
            StageSpec::new("MC{O=ann:1,L=sig:con}").child_of("MC_O-sig_L-sig", CopySpec::Except(vec!["out.".into()])),
        ],
        train: TrainConfig {
            seeds: vec![1, 2],
            epochs: 5,
            jobs: 1,
            ..TrainConfig::default()
        },
    };
    let r = run_protocol(&p, &fs, &mask, None, false).unwrap();
    let e = &r.ledger.stages["MC_O-ann-1_L-sig-con"];
    assert!(e.copied.keys().all(|k| !k.starts_with("out.")));
    assert!(e.copied.contains_key("loss.a") && e.copied.contains_key("rem.c"));
    assert!(e.fresh.iter().all(|k| k.starts_with("out.")));
    assert_eq!(r.stages[1].outcome.runs.len(), 2);
    let parent_best = r.stages[0].best();
    let child_runs = &r.stages[1].outcome.runs;
    // inherited values are the parent's best before training moves them
    assert!(child_runs.iter().all(|c| c.params.len() == 8));
    assert!(parent_best.params.get("loss.a").is_some());
}

#[test]
fn bad_plan_fails_before_training() {
    let (fs, mask) = common::sig_data(8);
    let dir = tempfile::tempdir().unwrap();
    let p = ProtocolPlan {
        stages: vec![StageSpec::new("MC{O=sig,L=sig:con}").child_of("nowhere", CopySpec::All)],
        train: TrainConfig::default(),
    };
    assert!(matches!(run_protocol(&p, &fs, &mask, Some(dir.path()), false), Err(Error::Plan(_))));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn persisted_params_are_bitwise_reproducible() {
    let (fs, mask) = common::sig_data(8);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let p = plan(10);
    let ra = run_protocol(&p, &fs, &mask, Some(a.path()), false).unwrap();
    run_protocol(&p, &fs, &mask, Some(b.path()), false).unwrap();
    for stage in &ra.stages {
        for run in &stage.outcome.runs {
            let rel = format!("runs/{}/{}/params.json", stage.id, run.seed);
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
        }
    }
}
