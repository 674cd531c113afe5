use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use etrack_core::analysis::{ablate, attribute, AblationSpec, RelevanceKind};
use etrack_core::baselines::BaselineKind;
use etrack_core::corpus::{load_corpus, save_corpus, tokenize, Process, TaskKind};
use etrack_core::crf::LatticeDump;
use etrack_core::harness::synthetic::{synthetic_propara, synthetic_recipes};
use etrack_core::harness::{
    evaluate, evaluate_baseline, finetune, lm_documents, pretrain_lm, Checkpoint, RunManifest,
    TrainConfig,
};
use etrack_core::model::VariantChoice;
use etrack_core::templating::Templater;

#[derive(Parser)]
#[command(
    name = "etrack",
    version,
    about = "Entity tracking over procedural text"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON training configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<VariantChoice>,
    #[arg(long, global = true, value_parser = parse_task)]
    task: Option<TaskKind>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<VariantChoice, String> {
    s.parse().map_err(|e: etrack_core::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: etrack_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune a tracker on a labeled corpus.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        /// Checkpoint whose encoder (and vocabulary) initializes the model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Next-token pre-training on unlabeled text.
    Pretrain {
        /// A JSON Lines corpus, or plain text with one document per line.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Print every encoding fed to the model.
        #[arg(long)]
        show_encodings: bool,
        /// Write per-entity CRF lattices and decodes (ProPara).
        #[arg(long)]
        dump_lattices: bool,
    },
    /// Score a rule-based baseline.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineArg,
        #[arg(long)]
        data: PathBuf,
        /// Corpus supplying the majority label.
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Remove verbs and/or other entities' tokens from a corpus.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        drop_verbs: bool,
        #[arg(long)]
        drop_other_entities: bool,
        /// Also evaluate this checkpoint on the ablated corpus.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Gradient attribution for one (entity, step) prediction.
    Attribute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Process id; defaults to the first process.
        #[arg(long)]
        process: Option<String>,
        /// 0-based entity index.
        #[arg(long, default_value_t = 0)]
        entity: usize,
        /// 1-based step.
        #[arg(long, default_value_t = 1)]
        step: usize,
        /// Target class; defaults to the gold label.
        #[arg(long)]
        target: Option<usize>,
        #[arg(long, value_enum, default_value_t = KindArg::GradNorm)]
        relevance: KindArg,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Write the deterministic synthetic corpora.
    GenSynthetic {
        #[arg(long, default_value_t = 100)]
        train_size: usize,
        #[arg(long, default_value_t = 20)]
        dev_size: usize,
        #[arg(long, default_value_t = 50)]
        test_size: usize,
        /// Recipes labels that ignore the entity.
        #[arg(long)]
        entity_blind: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    Majority,
    ExactMatch,
    FirstOcc,
}

impl From<BaselineArg> for BaselineKind {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Majority => BaselineKind::Majority,
            BaselineArg::ExactMatch => BaselineKind::ExactMatch,
            BaselineArg::FirstOcc => BaselineKind::FirstOcc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    GradNorm,
    GradTimesInput,
}

impl From<KindArg> for RelevanceKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::GradNorm => RelevanceKind::GradNorm,
            KindArg::GradTimesInput => RelevanceKind::GradTimesInput,
        }
    }
}

fn resolve_config(c: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = c.variant {
        cfg.set_variant(v);
    }
    if let Some(t) = c.task {
        cfg.task = t;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Missing inputs are user errors, not internal failures.
fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(
            etrack_core::Error::Validation(format!("no such file: {}", path.display())).into(),
        );
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path)?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load(path: &Path, task: TaskKind) -> anyhow::Result<Vec<Process>> {
    require_file(path)?;
    Ok(load_corpus(path, task)?)
}

/// The task of an existing checkpoint, checked against `--task`.
fn checkpoint_task(ckpt: &Checkpoint, c: &Common) -> anyhow::Result<TaskKind> {
    let task = ckpt.model.spec.task;
    if let Some(t) = c.task {
        if t != task {
            return Err(etrack_core::Error::Incompatible(format!(
                "checkpoint is a {task} model, --task is {t}"
            ))
            .into());
        }
    }
    Ok(task)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    match cli.command {
        Command::Train { train, dev, init } => {
            let cfg = resolve_config(c)?;
            let train_set = load(&train, cfg.task)?;
            let dev_set = dev.as_deref().map(|d| load(d, cfg.task)).transpose()?;
            let init_ckpt = init.as_deref().map(load_checkpoint).transpose()?;
            let outcome = finetune(&cfg, &train_set, dev_set.as_deref(), init_ckpt.as_ref())?;
            let ckpt_path = c.out.join("model.ckpt");
            outcome.checkpoint.save(&ckpt_path)?;
            let mut manifest = RunManifest::new("train", &cfg);
            manifest.record_corpus(&train)?;
            if let Some(d) = &dev {
                manifest.record_corpus(d)?;
            }
            manifest.init_checkpoint = init;
            manifest.checkpoint = Some(ckpt_path);
            manifest.epochs = outcome.history;
            manifest.best_epoch = Some(outcome.best_epoch);
            if let Some(d) = &dev_set {
                let ck = &outcome.checkpoint;
                let (report, _) = evaluate(&ck.model, &ck.vocab, d, &Templater::new(cfg.max_len))?;
                print!("{}", report.table());
                manifest.final_report = Some(report);
            }
            manifest.save(&c.out.join("manifest.json"))?;
        }
        Command::Pretrain { data } => {
            let cfg = resolve_config(c)?;
            require_file(&data)?;
            let docs = if data.extension().is_some_and(|e| e == "jsonl") {
                lm_documents(&load(&data, cfg.task)?)
            } else {
                fs::read_to_string(&data)?
                    .lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(tokenize)
                    .collect()
            };
            let outcome = pretrain_lm(&cfg, &docs)?;
            let ckpt_path = c.out.join("lm.ckpt");
            outcome.checkpoint.save(&ckpt_path)?;
            let mut manifest = RunManifest::new("pretrain", &cfg);
            manifest.record_corpus(&data)?;
            manifest.checkpoint = Some(ckpt_path);
            manifest.epochs = outcome.history;
            manifest.best_epoch = Some(outcome.best_epoch);
            manifest.save(&c.out.join("manifest.json"))?;
            if let Some(last) = manifest.epochs.last() {
                println!("final lm loss {:.6}", last.lm_loss);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            show_encodings,
            dump_lattices,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let task = checkpoint_task(&ckpt, c)?;
            let corpus = load(&data, task)?;
            let max_len = ckpt.model.config.max_positions;
            let templater = Templater::new(max_len);
            if show_encodings {
                for p in &corpus {
                    for enc in
                        templater.instances_for_task(p, ckpt.model.spec.variant, &ckpt.vocab)?
                    {
                        println!("{}\t{}", p.id, enc.render(&ckpt.vocab));
                    }
                }
            }
            let (report, preds) = evaluate(&ckpt.model, &ckpt.vocab, &corpus, &templater)?;
            print!("{}", report.table());
            write_json(&c.out.join("report.json"), &report)?;
            let mut f = std::io::BufWriter::new(fs::File::create(c.out.join("predictions.jsonl"))?);
            for (p, pred) in corpus.iter().zip(&preds) {
                writeln!(f, "{}", serde_json::json!({"id": p.id, "prediction": pred}))?;
            }
            f.flush()?;
            if dump_lattices {
                let mut dumps = Vec::new();
                for p in &corpus {
                    for (e, lat) in ckpt
                        .model
                        .lattices(p, &ckpt.vocab, &templater)?
                        .iter()
                        .enumerate()
                    {
                        dumps.push(serde_json::json!({
                            "id": p.id,
                            "entity": p.entities[e].name,
                            "lattice": LatticeDump::new(lat),
                        }));
                    }
                }
                write_json(&c.out.join("lattices.json"), &dumps)?;
            }
        }
        Command::Baseline { kind, data, train } => {
            if c.task == Some(TaskKind::ProPara) {
                return Err(etrack_core::Error::Validation(
                    "baselines are defined for recipes only".into(),
                )
                .into());
            }
            let corpus = load(&data, TaskKind::Recipes)?;
            let train_set = match &train {
                Some(t) => load(t, TaskKind::Recipes)?,
                None => corpus.clone(),
            };
            let report = evaluate_baseline(kind.into(), &train_set, &corpus)?;
            print!("{}", report.table());
            write_json(&c.out.join("report.json"), &report)?;
        }
        Command::Ablate {
            data,
            drop_verbs,
            drop_other_entities,
            checkpoint,
        } => {
            let spec = AblationSpec::new(drop_verbs, drop_other_entities)?;
            let ckpt = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let task = match &ckpt {
                Some(k) => checkpoint_task(k, c)?,
                None => c.task.unwrap_or(TaskKind::Recipes),
            };
            let corpus = load(&data, task)?;
            let out = ablate(&corpus, spec)?;
            let path = c.out.join("ablated.jsonl");
            save_corpus(&out, &path)?;
            println!("wrote {} processes to {}", out.len(), path.display());
            if let Some(k) = ckpt {
                let templater = Templater::new(k.model.config.max_positions);
                let (report, _) = evaluate(&k.model, &k.vocab, &out, &templater)?;
                print!("{}", report.table());
                write_json(&c.out.join("report.json"), &report)?;
            }
        }
        Command::Attribute {
            checkpoint,
            data,
            process,
            entity,
            step,
            target,
            relevance,
            top_k,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let task = checkpoint_task(&ckpt, c)?;
            let corpus = load(&data, task)?;
            let p = match &process {
                Some(id) => corpus.iter().find(|p| &p.id == id),
                None => corpus.first(),
            }
            .ok_or_else(|| etrack_core::Error::Validation("no such process".into()))?;
            let track = p.entities.get(entity).ok_or_else(|| {
                etrack_core::Error::Validation(format!("process `{}` has no entity {entity}", p.id))
            })?;
            if step == 0 || step > p.num_steps() {
                return Err(
                    etrack_core::Error::Validation(format!("step {step} out of range")).into(),
                );
            }
            let model = &ckpt.model;
            let templater = Templater::new(model.config.max_positions);
            let encs = templater.instances_for_task(p, model.spec.variant, &ckpt.vocab)?;
            let (enc, anchor) = encs
                .iter()
                .find_map(|enc| {
                    enc.anchors
                        .iter()
                        .position(|a| a.step == step && a.entity.is_none_or(|e| e == entity))
                        .map(|i| (enc, i))
                })
                .context("no anchor for this (entity, step)")?;
            let gold = match (track.labels.presence(), track.labels.tags()) {
                (Some(l), _) => usize::from(l[step - 1]),
                (_, Some(t)) => t[step - 1].index(),
                _ => bail!("entity has no labels"),
            };
            let ids = ckpt.vocab.ids(&track.name_tokens);
            let ent = (model.spec.head != etrack_core::heads::HeadKind::Conditioned)
                .then_some(ids.as_slice());
            let attr = attribute(
                model,
                enc,
                anchor,
                target.unwrap_or(gold),
                ent,
                relevance.into(),
            )?;
            println!("{}", enc.render(&ckpt.vocab));
            print!("{}", attr.top_k_table(&ckpt.vocab, top_k));
            write_json(&c.out.join("attribution.json"), &attr.dump(&ckpt.vocab))?;
        }
        Command::GenSynthetic {
            train_size,
            dev_size,
            test_size,
            entity_blind,
        } => {
            let task = c.task.unwrap_or(TaskKind::Recipes);
            let seed = c.seed.unwrap_or(0);
            if entity_blind && task != TaskKind::Recipes {
                return Err(etrack_core::Error::Validation(
                    "--entity-blind applies to recipes only".into(),
                )
                .into());
            }
            let gen = |n: usize, s: u64| match task {
                TaskKind::Recipes => synthetic_recipes(n, s, entity_blind),
                TaskKind::ProPara => synthetic_propara(n, s),
            };
            for (name, n, offset) in [
                ("train", train_size, 0),
                ("dev", dev_size, 1),
                ("test", test_size, 2),
            ] {
                let path = c.out.join(format!("{name}.jsonl"));
                save_corpus(&gen(n, seed.wrapping_mul(3).wrapping_add(offset)), &path)?;
                println!("wrote {n} {task} processes to {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .filter_map(|c| c.downcast_ref::<etrack_core::Error>())
                .any(|c| c.is_validation());
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
