use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use uvlm_core::data::{gen_corpus, load_corpus, read_payload, write_corpus, write_payload, Conversation, Corpus, Split};
use uvlm_core::data::{build_round_input, glyph};
use uvlm_core::eval::{
    append_metrics, eval_gap, eval_qa, pope_build, pope_predict, pope_score, AblationAxis, AblationRunner,
    EvalConfig, MetricRow, PopeStrategy,
};
use uvlm_core::gradcheck::run_gradcheck;
use uvlm_core::lm::{generate, Decoding, Vocabulary, DEFAULT_MAX_NEW};
use uvlm_core::train::{
    encode_visual, load_checkpoint, run_align, run_mae, save_checkpoint, train_stage, ModelState, Phase,
    PipelineConfig, Representation, Stage, StageData, IMAGE_TOWER, LM, PROJECTION,
};

/// Checkpoint trained by the default pipeline; used by `generate` when no
/// other checkpoint is available.
const DEMO_CHECKPOINT: &[u8] = include_bytes!("../../../assets/demo.uvck");

#[derive(Parser, Debug)]
#[command(name = "uvlm", version, about = "Unified image/video language model toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root (defaults to $UVLM_OUT, then ./uvlm-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Starting point that the config file and flags are applied to.
    #[arg(long, value_enum, default_value_t = Preset::Default, global = true)]
    preset: Preset,
    /// Override one config value, e.g. `--set pipeline.stage2.lr=0.001`.
    #[arg(long = "set", value_name = "PATH=JSON", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Contrastively align the image, video and caption towers.
    Align {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train an image tower by masked patch reconstruction.
    MaePretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run instruction stage 1 or 2.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Input checkpoint (defaults to the previous phase's output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image tower from `mae-pretrain`, used by the separated representation.
        #[arg(long)]
        image_tower: Option<PathBuf>,
        /// Stop after this many optimizer steps; rerun on the output to resume.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Write a metrics row every this many steps.
        #[arg(long, default_value_t = 10)]
        log_every: u64,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        strategy: Option<PopeStrategy>,
        #[arg(long)]
        questions: Option<usize>,
    },
    /// Train and evaluate the arms of an ablation across seeds.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Use an existing corpus instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check every autodiff primitive against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Answer one prompt about one image or video payload.
    Generate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a rendered scene payload, for trying `generate`.
    RenderScene {
        #[arg(long)]
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// The full desk-scale run.
    Default,
    /// Smaller corpus and shorter stage 2, for multi-seed ablations.
    Compact,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Suite {
    Qa,
    Pope,
    Gap,
}

/// Everything a run reads from configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    pipeline: PipelineConfig,
    eval: EvalConfig,
}

/// Errors that are the caller's fault: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use uvlm_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::MissingPrerequisite(_)
                | E::InvalidConfig(_)
                | E::UnknownStrategy(_)
                | E::ArmMismatch(_)
                | E::UnknownGroup(_)
                | E::EmptySplit(_)
                | E::VisualSlot(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one key");
    for k in parents {
        node = node
            .get_mut(*k)
            .ok_or_else(|| usage(format!("unknown config key `{path}`")))?;
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| usage(format!("`{path}` does not name an object field")))?;
    if !obj.contains_key(*last) {
        return Err(usage(format!("unknown config key `{path}`")));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Overlays `top` onto `base`, recursing into objects.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    match (base, top) {
        (serde_json::Value::Object(b), serde_json::Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then the config file, then `--set` and `--seed`.
fn resolve_config(g: &Global) -> Result<RunConfig> {
    let base = RunConfig {
        pipeline: match g.preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Compact => PipelineConfig::compact(),
        },
        eval: EvalConfig::default(),
    };
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = &g.config {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        merge(&mut value, file);
    }
    for s in &g.sets {
        let (path, raw) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects PATH=VALUE, got `{s}`")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        set_path(&mut value, path, v)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(seed) = g.seed {
        cfg.pipeline = cfg.pipeline.seeded(seed);
        cfg.pipeline.corpus.seed = seed;
        cfg.eval.seed = seed;
    }
    Ok(cfg)
}

struct Ctx {
    out: PathBuf,
    cfg: RunConfig,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self, data: &Option<PathBuf>) -> PathBuf {
        data.clone().unwrap_or_else(|| self.path("data"))
    }

    fn corpus(&self, data: &Option<PathBuf>) -> Result<Corpus> {
        let dir = self.data_dir(data);
        if !dir.join("manifest.jsonl").exists() {
            return Err(uvlm_core::Error::MissingPrerequisite(format!(
                "no corpus at {} (run gen-data first)",
                dir.display()
            ))
            .into());
        }
        Ok(load_corpus(&dir)?)
    }

    fn metrics(&self, rows: &[MetricRow]) -> Result<()> {
        append_metrics(&self.path("metrics.csv"), rows)?;
        Ok(())
    }

    fn snapshot(&self, name: &str, argv: &[String]) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let snap = serde_json::json!({ "argv": argv, "config": self.cfg });
        let path = self.path(&format!("{name}.config.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&snap)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn checkpoint_or(path: &Option<PathBuf>, default: PathBuf, what: &str) -> Result<ModelState> {
    let p = path.clone().unwrap_or(default);
    if !p.exists() {
        return Err(uvlm_core::Error::MissingPrerequisite(format!("{what} not found at {}", p.display())).into());
    }
    Ok(load_checkpoint(&p)?)
}

fn loss_rows(trace: &[(u64, f32)], stage: &str, every: u64) -> Vec<MetricRow> {
    let every = every.max(1);
    let last = trace.last().map(|t| t.0);
    trace
        .iter()
        .filter(|(s, _)| s % every == 0 || Some(*s) == last)
        .map(|&(step, v)| MetricRow {
            step,
            stage: stage.into(),
            split: "train".into(),
            metric: "loss".into(),
            value: v as f64,
        })
        .collect()
}

fn run(cli: Cli, argv: &[String]) -> Result<()> {
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| std::env::var_os("UVLM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("uvlm-out"));
    let ctx = Ctx {
        cfg: resolve_config(&cli.global)?,
        out,
    };
    let p = &ctx.cfg.pipeline;
    match cli.command {
        Command::GenData => {
            ctx.snapshot("gen-data", argv)?;
            let corpus = gen_corpus(&p.corpus)?;
            let manifest = write_corpus(&corpus, &ctx.path("data"))?;
            println!("wrote {} records to {}", corpus.records.len(), manifest.display());
        }
        Command::Align { data } => {
            ctx.snapshot("align", argv)?;
            let corpus = ctx.corpus(&data)?;
            let mut state = ModelState::init(p.dims, p.seed);
            let trace = run_align(&mut state, &corpus, &p.encode, &p.align)?;
            let mut rows = Vec::new();
            for (name, losses) in [("align_image", &trace.image), ("align_video", &trace.video)] {
                rows.extend(losses.iter().enumerate().map(|(i, &v)| MetricRow {
                    step: i as u64,
                    stage: name.into(),
                    split: "train".into(),
                    metric: "loss".into(),
                    value: v as f64,
                }));
            }
            ctx.metrics(&rows)?;
            let path = ctx.path("aligned.uvck");
            save_checkpoint(&state, &path)?;
            println!("aligned towers written to {}", path.display());
        }
        Command::MaePretrain { data } => {
            ctx.snapshot("mae-pretrain", argv)?;
            let corpus = ctx.corpus(&data)?;
            let (tower, losses) = run_mae(&p.dims, &corpus, &p.mae)?;
            let rows: Vec<MetricRow> = losses
                .iter()
                .enumerate()
                .map(|(i, &v)| MetricRow {
                    step: i as u64,
                    stage: "mae".into(),
                    split: "train".into(),
                    metric: "loss".into(),
                    value: v as f64,
                })
                .collect();
            ctx.metrics(&rows)?;
            let mut state = ModelState::init(p.dims, p.seed);
            *state.group_mut(IMAGE_TOWER)? = tower;
            state.phase = Phase::Mae;
            let path = ctx.path("mae.uvck");
            save_checkpoint(&state, &path)?;
            println!("reconstruction tower written to {}", path.display());
        }
        Command::Train {
            stage,
            data,
            checkpoint,
            image_tower,
            until,
            epochs,
            lr,
            batch_size,
            log_every,
        } => {
            let mut ctx = ctx;
            let (stage, prev, name) = match stage {
                1 => (Stage::One, "aligned.uvck", "an aligned-encoder checkpoint"),
                _ => (Stage::Two, "stage1.uvck", "a stage-1 checkpoint"),
            };
            let sc = match stage {
                Stage::One => &mut ctx.cfg.pipeline.stage1,
                Stage::Two => &mut ctx.cfg.pipeline.stage2,
            };
            if let Some(e) = epochs {
                sc.epochs = e;
            }
            if let Some(l) = lr {
                sc.lr = l;
            }
            if let Some(b) = batch_size {
                sc.batch_size = b;
            }
            let tag = format!("train-stage{}", stage.number());
            ctx.snapshot(&tag, argv)?;
            let p = &ctx.cfg.pipeline;
            let mut state = checkpoint_or(&checkpoint, ctx.path(prev), name)?;
            if stage == Stage::One && state.phase == Phase::Aligned && p.representation == Representation::Separated {
                let mae = checkpoint_or(&image_tower, ctx.path("mae.uvck"), "a reconstruction image tower")?;
                *state.group_mut(IMAGE_TOWER)? = mae.group(IMAGE_TOWER)?.clone();
                state.set_trainable(&[])?;
            }
            let corpus = ctx.corpus(&data)?;
            let vocab = Vocabulary::glyph_world();
            let sd = StageData::prepare(&state, &corpus, stage.number(), Split::Train, p.mix, &p.encode, &vocab)?;
            let cfg = match stage {
                Stage::One => &p.stage1,
                Stage::Two => &p.stage2,
            };
            let trace = train_stage(&mut state, stage, &sd, cfg, until)?;
            ctx.metrics(&loss_rows(&trace, &format!("stage{}", stage.number()), log_every))?;
            let path = ctx.path(&format!("stage{}.uvck", stage.number()));
            save_checkpoint(&state, &path)?;
            let last = trace.last().map_or(f32::NAN, |t| t.1);
            println!("stage {} at step {}, last loss {last:.4}; wrote {}", stage.number(), state.step, path.display());
        }
        Command::Eval {
            suite,
            data,
            checkpoint,
            split,
            strategy,
            questions,
        } => {
            let mut ctx = ctx;
            if let Some(s) = split {
                ctx.cfg.eval.split = s;
            }
            if let Some(s) = strategy {
                ctx.cfg.eval.pope = Some(s);
            }
            if let Some(n) = questions {
                ctx.cfg.eval.pope_questions = n;
            }
            let suite_name = format!("{suite:?}").to_lowercase();
            ctx.snapshot(&format!("eval-{suite_name}"), argv)?;
            let state = checkpoint_or(&checkpoint, ctx.path("stage2.uvck"), "a stage-2 checkpoint")?;
            let corpus = ctx.corpus(&data)?;
            let (ec, enc) = (&ctx.cfg.eval, &ctx.cfg.pipeline.encode);
            let mut metrics: Vec<(String, f64)> = Vec::new();
            let detail = match suite {
                Suite::Qa => {
                    let r = eval_qa(&state, &corpus, ec.split, enc)?;
                    metrics.push(("qa_accuracy".into(), r.accuracy()));
                    metrics.extend(r.image.accuracy().map(|a| ("qa_image".into(), a)));
                    metrics.extend(r.video.accuracy().map(|a| ("qa_video".into(), a)));
                    serde_json::to_value(&r)?
                }
                Suite::Pope => {
                    let strategy = ec.pope.unwrap_or(PopeStrategy::Random);
                    let idx = corpus.select(2, ec.split);
                    let records: Vec<_> = idx.iter().map(|&i| corpus.records[i].clone()).collect();
                    let set = pope_build(&records, strategy, ec.pope_questions, ec.seed)?;
                    let preds = pope_predict(&state, &corpus, &idx, &set, enc)?;
                    let labels: Vec<bool> = set.items.iter().map(|i| i.label).collect();
                    let s = pope_score(&preds, &labels)?;
                    metrics.push(("pope_accuracy".into(), s.accuracy));
                    metrics.push(("pope_f1".into(), s.f1));
                    metrics.push(("pope_yes_rate".into(), s.yes_rate));
                    serde_json::to_value(s)?
                }
                Suite::Gap => {
                    let g = eval_gap(&state, &corpus, ec.split, enc)?;
                    metrics.push(("alignment_gap".into(), g));
                    serde_json::json!({ "alignment_gap": g })
                }
            };
            let rows: Vec<MetricRow> = metrics
                .iter()
                .map(|(m, v)| MetricRow {
                    step: state.step,
                    stage: "eval".into(),
                    split: ec.split.as_str().into(),
                    metric: m.clone(),
                    value: *v,
                })
                .collect();
            ctx.metrics(&rows)?;
            let path = ctx.path(&format!("eval-{suite_name}.json"));
            std::fs::write(&path, serde_json::to_string_pretty(&detail)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            for (m, v) in &metrics {
                println!("{m}\t{v:.3}");
            }
        }
        Command::Ablate { axis, seeds, data } => {
            ctx.snapshot(&format!("ablate-{}", axis.as_str()), argv)?;
            let corpus = match data {
                Some(_) => ctx.corpus(&data)?,
                None => gen_corpus(&p.corpus)?,
            };
            let mut runner = AblationRunner::new(&corpus, ctx.cfg.eval.clone());
            let report = runner.run(axis, p, &seeds)?;
            let dir = ctx.path(&format!("ablation-{}", axis.as_str()));
            report.write(&dir)?;
            print!("{}", report.to_markdown());
        }
        Command::Gradcheck { cases } => {
            ctx.snapshot("gradcheck", argv)?;
            let seed = cli.global.seed.unwrap_or(0);
            let reports = run_gradcheck(seed, cases)?;
            let mut csv = String::from("primitive,cases,max_rel_error\n");
            println!("{:<24}{:>8}{:>16}", "primitive", "cases", "max rel error");
            for r in &reports {
                println!("{:<24}{:>8}{:>16.3e}", r.primitive, r.cases, r.max_rel_error);
                csv.push_str(&format!("{},{},{:e}\n", r.primitive, r.cases, r.max_rel_error));
            }
            let path = ctx.path("gradcheck.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.primitive).collect();
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
        }
        Command::Generate {
            input,
            prompt,
            checkpoint,
        } => {
            let state = match checkpoint {
                Some(path) => load_checkpoint(&path)?,
                None if ctx.path("stage2.uvck").exists() => load_checkpoint(&ctx.path("stage2.uvck"))?,
                None => uvlm_core::train::decode_checkpoint(DEMO_CHECKPOINT)?,
            };
            let visual = read_payload(&input)?;
            let feats = encode_visual(&state, &visual, &p.encode)?;
            let vocab = Vocabulary::glyph_world();
            let conv = Conversation::single(&prompt, "");
            let ids = build_round_input(&conv, 1)?.prompt_ids(&vocab, true);
            let out = generate(
                Some(&feats),
                &ids,
                state.group(PROJECTION)?,
                state.group(LM)?,
                &state.dims.lm,
                DEFAULT_MAX_NEW,
                Decoding::Greedy,
            )?;
            println!("{}", vocab.detokenize(&out)?);
        }
        Command::RenderScene { path } => {
            let scene = demo_scene(ctx.cfg.pipeline.seed);
            write_payload(&path, &glyph::render(&scene))?;
            println!("{}\t{}", path.display(), scene.objects().join(", "));
        }
    }
    Ok(())
}

fn demo_scene(seed: u64) -> glyph::Scene {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    glyph::random_still(&mut rng)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {e:#}");
            if code == 1 {
                eprintln!("usage: uvlm [--config PATH] [--out DIR] [--seed N] [--set PATH=VALUE] <COMMAND>");
            }
            info!("exiting with status {code}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn global(sets: &[&str]) -> Global {
        Global {
            config: None,
            out: None,
            seed: None,
            preset: Preset::Default,
            sets: sets.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn merge_recurses_and_replaces_leaves() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, json!({"a": {"c": 5}, "d": [9]}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 5}, "d": [9]}));
    }

    #[test]
    fn set_path_rejects_unknown_keys() {
        let mut v = json!({"a": {"b": 1}});
        set_path(&mut v, "a.b", json!(3)).unwrap();
        assert_eq!(v["a"]["b"], 3);
        for bad in ["a.x", "x.b", "a.b.c"] {
            let err = set_path(&mut v, bad, json!(0)).unwrap_err();
            assert_eq!(exit_code(&err), 1, "{bad}");
        }
    }

    #[test]
    fn bare_words_in_set_are_strings() {
        let cfg = resolve_config(&global(&["pipeline.representation=separated", "eval.pope=null"])).unwrap();
        assert_eq!(cfg.pipeline.representation, Representation::Separated);
        assert_eq!(cfg.eval.pope, None);
    }

    #[test]
    fn seed_reaches_every_trainer() {
        let mut g = global(&[]);
        g.seed = Some(11);
        let cfg = resolve_config(&g).unwrap();
        let p = &cfg.pipeline;
        assert_eq!(
            [p.seed, p.corpus.seed, p.align.seed, p.mae.seed, p.stage1.seed, p.stage2.seed, cfg.eval.seed],
            [11; 7]
        );
    }

    #[test]
    fn compact_preset_shrinks_stage_two() {
        let mut g = global(&[]);
        g.preset = Preset::Compact;
        let c = resolve_config(&g).unwrap().pipeline;
        let d = PipelineConfig::default();
        assert!(c.corpus.stage2_train.images < d.corpus.stage2_train.images);
        assert_eq!(c.dims, d.dims);
    }

    #[test]
    fn runtime_errors_map_to_two() {
        let e: anyhow::Error = uvlm_core::Error::MissingPrerequisite("x".into()).into();
        assert_eq!(exit_code(&e), 1);
        let e = anyhow::anyhow!("disk on fire");
        assert_eq!(exit_code(&e), 2);
    }
}
