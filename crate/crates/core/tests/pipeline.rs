use coda::backbone::TrainConfig;
use coda::checkpoint;
use coda::data::{load_dataset, LoadOptions};
use coda::denoise::Role;
use coda::encoder::load_embeddings;
use coda::experiment::{export_trace, run_experiment, sparsity_sweep, train_seed, ExperimentConfig};
use coda::synth::{generate, load_truth, write_generated, SynthConfig, DATASET_FILE, EMBEDDINGS_FILE, TRUTH_FILE};
use coda::trainer::{inductive_trace, zeroed_coda_params, TuneConfig};

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        synth: Some(SynthConfig { learners: 40, mean_length: 12, ..SynthConfig::default() }),
        backbone: TrainConfig { epochs: 4, ..TrainConfig::default() },
        coda: TuneConfig { epochs: 2, ..TuneConfig::default() },
        ..ExperimentConfig::default()
    }
}

#[test]
fn generated_benchmark_round_trips_through_files() {
    let g = generate(&SynthConfig { learners: 30, ..SynthConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_generated(&g, dir.path()).unwrap();

    let opts = LoadOptions {
        question_count: Some(g.dataset.question_count),
        concept_count: Some(g.dataset.concept_count),
        ..LoadOptions::default()
    };
    assert_eq!(load_dataset(&dir.path().join(DATASET_FILE), &opts).unwrap(), g.dataset);

    let table = load_embeddings(&dir.path().join(EMBEDDINGS_FILE), Some(g.provider.dim())).unwrap();
    for (code, row) in &g.rows {
        assert_eq!(table.lookup(code).unwrap(), row.as_slice());
    }
    assert_eq!(load_truth(&dir.path().join(TRUTH_FILE)).unwrap(), g.truth.learners);
}

#[test]
fn report_covers_every_seed_and_embeds_its_config() {
    let cfg = ExperimentConfig { seeds: vec![1, 2], ..small_config() };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![1, 2]);
    for s in &report.seeds {
        assert!(s.backbone.count > 0 && s.coda.count == s.backbone.count);
        assert!(s.identification.is_some());
    }
    assert_eq!(report.config, cfg);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["backbone_auc", "coda_auc", "auc_gain"] {
        assert!(json["aggregate"][key]["mean"].is_number(), "{key}");
    }
    assert!(json["reference"]["note"].as_str().unwrap().contains("not reproduced"));
}

#[test]
fn sweep_has_one_row_per_value_with_growing_graphs() {
    let values = [0.2, 0.5, 0.8];
    let rows = sparsity_sweep(&small_config(), &values).unwrap();
    assert_eq!(rows.iter().map(|r| r.sparsity).collect::<Vec<_>>(), values);
    assert!(rows.windows(2).all(|w| w[0].mean_edges <= w[1].mean_edges));
}

#[test]
fn trace_is_bounded_pure_and_steadier_on_weak_steps() {
    let cfg = ExperimentConfig {
        synth: Some(SynthConfig { learners: 100, ..SynthConfig::default() }),
        coda: TuneConfig { epochs: 3, ..TuneConfig::default() },
        ..ExperimentConfig::default()
    };
    let tr = train_seed(&cfg, 1).unwrap();
    // Selection must have moved off the identity adaptor, or the comparison is vacuous.
    assert!(tr.tune_log.best > 0);
    let before = checkpoint::to_bytes(&"coda", &tr.coda).unwrap();
    let hidden = tr.samples[2][0].states[0].len();
    let concepts = tr.stage.train.concept_count.min(hidden);

    let (mut raw_change, mut corrected_change, mut weak_steps) = (0.0, 0.0, 0usize);
    for s in &tr.samples[2] {
        for c in 0..concepts {
            let pts = export_trace(&tr.backbone, &tr.coda, &tr.stage.bank, s, c, &cfg.coda).unwrap();
            assert_eq!(pts.len(), s.seq.len());
            assert!(pts.iter().all(|p| p.raw > 0.0 && p.raw < 1.0 && p.corrected > 0.0 && p.corrected < 1.0));
            for w in pts.windows(2).filter(|w| w[1].role == "weak") {
                raw_change += (w[1].raw - w[0].raw).abs();
                corrected_change += (w[1].corrected - w[0].corrected).abs();
                weak_steps += 1;
            }
        }
    }
    assert!(weak_steps > 0);
    assert!(
        corrected_change <= raw_change,
        "weak-step change corrected {:.5} vs raw {:.5}",
        corrected_change / weak_steps as f64,
        raw_change / weak_steps as f64
    );
    assert_eq!(checkpoint::to_bytes(&"coda", &tr.coda).unwrap(), before);
    assert!(export_trace(&tr.backbone, &tr.coda, &tr.stage.bank, &tr.samples[2][0], hidden, &cfg.coda).is_err());
}

#[test]
fn zeroed_adaptor_trace_matches_raw_states() {
    let cfg = small_config();
    let tr = train_seed(&cfg, 2).unwrap();
    let s = &tr.samples[2][0];
    let d = s.seq.embeddings[0].len();
    let zero = zeroed_coda_params(d, s.states[0].len(), cfg.coda.bottleneck_for(d));
    let t = inductive_trace(&tr.backbone, &zero, &tr.stage.bank, s, &cfg.coda.pass_config()).unwrap();
    assert_eq!(t.raw, t.corrected);
    assert!(t.roles.iter().all(|r| matches!(r, Role::Unwanted | Role::Core { .. } | Role::Weak { .. })));
}
