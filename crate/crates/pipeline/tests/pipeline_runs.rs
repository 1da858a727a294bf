use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use dvc_core::dataset::{save_annotations, save_features};
use dvc_core::synth::{synth_corpus, SynthConfig};
use dvc_pipeline::artifacts::hash_tree;
use dvc_pipeline::report::parse_kv;
use dvc_pipeline::*;

fn snapshot(run: &RunDir) -> BTreeMap<String, BTreeMap<String, String>> {
    Stage::ALL
        .iter()
        .map(|s| {
            (
                s.name().to_string(),
                hash_tree(&run.stage(*s), &[]).unwrap(),
            )
        })
        .collect()
}

#[test]
fn toy_pipeline_runs_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::toy(tmp.path().join("run"));
    let report = run_all(&cfg).unwrap();
    assert_eq!(report.bleu_gt.len(), 4);
    assert_eq!(report.proposals_at.len(), 4);
    assert!((0.0..=1.0).contains(&report.proposals.f1));
    let run = RunDir::new(&cfg.paths.out_dir);
    let kv = parse_kv(&fs::read_to_string(run.stage(Stage::Eval).join("report.kv")).unwrap());
    assert!(kv.contains_key("proposals.f1"));
    assert!(kv.contains_key("captions_learned.bleu4"));
    let proposals = fs::read_to_string(run.stage(Stage::Propose).join("proposals.txt")).unwrap();
    let first = proposals.lines().next().unwrap();
    assert_eq!(first.split(' ').count(), 5, "{first}");

    let before = snapshot(&run);
    for s in Stage::ALL {
        run_stage(s, &cfg).unwrap();
        assert_eq!(
            snapshot(&run)[s.name()],
            before[s.name()],
            "{s} changed on rerun"
        );
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(run.stage(Stage::Embed).join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["stage"], "embed");
    assert!(manifest["inputs"]["cooccur"].as_str().unwrap().len() == 64);
}

#[test]
fn proposing_before_training_heads_names_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::toy(tmp.path());
    for s in &Stage::ALL[..5] {
        run_stage(*s, &cfg).unwrap();
    }
    let err = run_stage(Stage::Propose, &cfg).unwrap_err();
    assert!(
        matches!(
            err,
            PipelineError::MissingArtifact {
                stage: "train-proposals",
                ..
            }
        ),
        "{err}"
    );
    let err = run_stage(Stage::Eval, &cfg).unwrap_err();
    assert!(err.to_string().contains("`propose`"), "{err}");
}

#[test]
fn sweep_emits_one_row_per_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::toy(tmp.path());
    assert!(matches!(
        sweep(&cfg, &[10, 20], &[1, 2]),
        Err(PipelineError::MissingArtifact { stage: "synth", .. })
    ));
    run_stage(Stage::Synth, &cfg).unwrap();
    assert!(matches!(
        sweep(&cfg, &[], &[1]),
        Err(PipelineError::EmptyGrid)
    ));
    let a = sweep(&cfg, &[10, 20], &[1, 2]).unwrap();
    let pairs: Vec<(usize, usize)> = a.rows.iter().map(|r| (r.vocab_size, r.window)).collect();
    assert_eq!(pairs, [(10, 1), (10, 2), (20, 1), (20, 2)]);
    let text = fs::read_to_string(tmp.path().join("sweep/table.txt")).unwrap();
    assert_eq!(text.lines().count(), 5);
    let b = sweep(&cfg, &[10, 20], &[1, 2]).unwrap();
    assert_eq!(a, b);
}

fn write_corpus(dir: &Path) {
    let corpus = synth_corpus(&SynthConfig {
        num_videos: 10,
        clips_per_video_range: (8, 10),
        feature_dim: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    fs::create_dir_all(dir.join("features")).unwrap();
    for seq in &corpus.sequences {
        save_features(&dir.join(format!("features/{}.dvcf", seq.video_id)), seq).unwrap();
    }
    save_annotations(&dir.join("ann.json"), &corpus.annotations).unwrap();
}

#[test]
fn cli_runs_on_ingested_features() {
    let tmp = tempfile::tempdir().unwrap();
    write_corpus(tmp.path());
    let mut cfg = PipelineConfig::toy(tmp.path().join("out"));
    cfg.paths.features_dir = Some(tmp.path().join("features"));
    cfg.paths.annotations = Some(tmp.path().join("ann.json"));
    let cfg_path = tmp.path().join("cfg.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let dvc = env!("CARGO_BIN_EXE_dvc");

    let out = Command::new(dvc)
        .args(["all", "--config"])
        .arg(&cfg_path)
        .args(["--seed", "3"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("BLEU@4"));
    let manifest = fs::read_to_string(tmp.path().join("out/synth/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 3"));
    assert_eq!(
        fs::read_dir(tmp.path().join("out/synth/features"))
            .unwrap()
            .count(),
        10
    );

    let other = tmp.path().join("other");
    let out = Command::new(dvc)
        .args(["caption", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&other)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));

    fs::write(&cfg_path, "[cooccur]\nwindow = 0\n").unwrap();
    let out = Command::new(dvc)
        .args(["synth", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));
}
