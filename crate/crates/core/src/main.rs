use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use coda::backbone::{evaluate, train_backbone, BackboneConfig, TrainConfig, TrainLog};
use coda::checkpoint;
use coda::data::{encode_dataset, load_dataset};
use coda::denoise::annotate;
use coda::encoder::{load_embeddings, EmbeddingProvider};
use coda::experiment::{
    export_trace, identification, run_experiment, sparsity_sweep, stage, sweep_csv, trace_csv, ExperimentConfig, SPARSITY_GRID,
};
use coda::numerics::ParamStore;
use coda::synth::{generate, write_generated, SynthConfig};
use coda::trainer::{coda_evaluate, prepare, tune_coda, TuneConfig, TuneLog};

#[derive(Parser)]
#[command(name = "coda", version, about = "Code-aware denoising for programming knowledge tracing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (dataset, embeddings, truth).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference backbone on the configured data.
    TrainBackbone {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune the adaptor against a frozen backbone checkpoint.
    Tune {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test metrics as JSON (backbone alone without --coda).
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        coda: Option<PathBuf>,
        /// Dataset to score; defaults to the configured test split.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Embedding table for --dataset when the configured provider is file-based.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Write per-step roles for the test learners as JSONL.
    IdentifyNoise {
        #[arg(long)]
        coda: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write each learner's denoised code graph as `<learner>.edges` here.
        #[arg(long)]
        dump_graphs: Option<PathBuf>,
    },
    /// Tuned test metrics per sparsity value, as CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Raw and corrected proficiency of one learner on one state coordinate, as CSV.
    Trace {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        coda: PathBuf,
        #[arg(long)]
        learner: String,
        #[arg(long)]
        concept: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline over all configured seeds; writes a JSON report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize, Deserialize)]
struct BackboneMeta {
    config: ExperimentConfig,
    seed: u64,
    backbone: BackboneConfig,
    log: TrainLog,
}

#[derive(Serialize, Deserialize)]
struct CodaMeta {
    config: ExperimentConfig,
    seed: u64,
    tune: TuneConfig,
    log: TuneLog,
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_backbone(path: &Path) -> Result<(BackboneMeta, ParamStore<f64>)> {
    let c = checkpoint::load::<BackboneMeta>(path).with_context(|| format!("loading backbone {}", path.display()))?;
    let mut params = c.params;
    params.freeze_all();
    Ok((c.metadata, params))
}

fn load_coda(path: &Path) -> Result<(CodaMeta, ParamStore<f64>)> {
    let c = checkpoint::load::<CodaMeta>(path).with_context(|| format!("loading adaptor {}", path.display()))?;
    Ok((c.metadata, c.params))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let mut sc = match config {
                Some(p) => serde_json::from_str::<SynthConfig>(&std::fs::read_to_string(&p)?)?,
                None => SynthConfig::default(),
            };
            if let Ok(v) = std::env::var(coda::experiment::SEED_ENV) {
                sc.seed = v.trim().parse().map_err(|_| anyhow!("CODA_SEED is not an integer"))?;
            }
            let g = generate(&sc)?;
            write_generated(&g, &out)?;
            eprintln!("wrote {} learners to {}", g.dataset.learner_count(), out.display());
        }
        Command::TrainBackbone { config, out } => {
            let cfg = load_config(&config)?;
            let seed = cfg.seeds[0];
            let st = stage(&cfg, seed)?;
            let (params, log) = train_backbone(&st.backbone_config, &st.encoded[0], &st.encoded[1], &TrainConfig { seed, ..cfg.backbone })?;
            let meta = BackboneMeta { config: cfg, seed, backbone: st.backbone_config, log };
            checkpoint::save(&out, &meta, &params)?;
            eprintln!("best valid AUC {:.4} at epoch {}", meta.log.best_valid_auc, meta.log.best_epoch);
        }
        Command::Tune { backbone, config, out } => {
            let cfg = load_config(&config)?;
            let (bmeta, params) = load_backbone(&backbone)?;
            let seed = bmeta.seed;
            let st = stage(&cfg, seed)?;
            let train = prepare(&params, &st.encoded[0]);
            let valid = prepare(&params, &st.encoded[1]);
            let tc = TuneConfig { seed, ..cfg.coda };
            let (coda, log) = tune_coda(&params, &st.bank, &train, &valid, &tc)?;
            eprintln!("selected valid AUC {:.4} (entry {})", log.valid_auc[log.best], log.best);
            checkpoint::save(&out, &CodaMeta { config: cfg, seed, tune: tc, log }, &coda)?;
        }
        Command::Eval { backbone, coda, dataset, embeddings } => {
            let (bmeta, params) = load_backbone(&backbone)?;
            let adaptor = coda.as_deref().map(load_coda).transpose()?;
            let cfg = adaptor.as_ref().map_or(&bmeta.config, |(m, _)| &m.config);
            let st = stage(cfg, bmeta.seed)?;
            let encoded = match dataset {
                None => st.encoded[2].clone(),
                Some(path) => {
                    let d = load_dataset(&path, &cfg.load)?;
                    let provider = match embeddings.or_else(|| cfg.embeddings.clone()) {
                        Some(e) => EmbeddingProvider::File(load_embeddings(&e, Some(st.backbone_config.code_dim))?),
                        None if cfg.synth.is_some() => {
                            let sibling = path.with_file_name(coda::synth::EMBEDDINGS_FILE);
                            EmbeddingProvider::File(load_embeddings(&sibling, Some(st.backbone_config.code_dim))?)
                        }
                        None => EmbeddingProvider::hash(st.backbone_config.code_dim)?,
                    };
                    encode_dataset(&d, &provider)?
                }
            };
            let metrics = match &adaptor {
                None => evaluate(&params, &encoded)?,
                Some((m, p)) => coda_evaluate(&params, p, &st.bank, &prepare(&params, &encoded), &m.tune.pass_config())?,
            };
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::IdentifyNoise { coda, out, dump_graphs } => {
            let (meta, p) = load_coda(&coda)?;
            let st = stage(&meta.config, meta.seed)?;
            let mut lines = String::new();
            for s in &st.encoded[2] {
                let ann = annotate(&s.embeddings, &s.questions, &st.bank, &p, &meta.tune.denoise)?;
                lines.push_str(&serde_json::to_string(&serde_json::json!({ "learner": s.learner, "roles": ann.roles }))?);
                lines.push('\n');
                if let Some(dir) = &dump_graphs {
                    let mut buf = Vec::new();
                    ann.graph.write_edge_list(&mut buf)?;
                    write(&dir.join(format!("{}.edges", s.learner)), std::str::from_utf8(&buf)?)?;
                }
            }
            write(&out, &lines)?;
            if let Some(truth) = &st.truth {
                let scores = identification(&p, &st.bank, &st.encoded[2], truth, &meta.tune)?;
                println!("{}", serde_json::to_string_pretty(&scores)?);
            }
        }
        Command::Sweep { config, out, values } => {
            let cfg = load_config(&config)?;
            let values = values.unwrap_or_else(|| SPARSITY_GRID.to_vec());
            if values.is_empty() {
                bail!("no sparsity values given");
            }
            let rows = sparsity_sweep(&cfg, &values)?;
            write(&out, &sweep_csv(&rows))?;
        }
        Command::Trace { backbone, coda, learner, concept, out } => {
            let (bmeta, params) = load_backbone(&backbone)?;
            let (meta, p) = load_coda(&coda)?;
            let st = stage(&meta.config, bmeta.seed)?;
            let seq = st.encoded.iter().flatten().find(|s| s.learner == learner).ok_or_else(|| anyhow!("unknown learner {learner}"))?;
            let sample = prepare(&params, std::slice::from_ref(seq)).remove(0);
            let points = export_trace(&params, &p, &st.bank, &sample, concept, &meta.tune)?;
            write(&out, &trace_csv(&points))?;
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let report = run_experiment(&cfg)?;
            write(&out, &serde_json::to_string_pretty(&report)?)?;
            let a = &report.aggregate;
            eprintln!(
                "backbone AUC {:.4}±{:.4}, coda AUC {:.4}±{:.4}",
                a.backbone_auc.mean, a.backbone_auc.std, a.coda_auc.mean, a.coda_auc.std
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
