//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Duration;

use ctrlgen::adapters::AdapterKind;
use ctrlgen::checkpoint::Checkpoint;
use ctrlgen::data::{gen_synthetic, load_jsonl, to_pointwise, DataKind, Dataset, SyntheticTask};
use ctrlgen::eval::{read_dump, sweep_csv, temperature_sweep, winrate, write_dump, InputArtifact, RemoteJudge, TemplateId, WinRateReport};
use ctrlgen::model::{ModelState, Tokenizer};
use ctrlgen::pipeline::{generate_eval_dump, resolve_choice, run_variant, validation_prompts, AdapterSpec, RunKind, RunRecord, RunSpec};

use crate::config::RunConfig;
use crate::{table, AdapterFlags, CliError, Command, Common};

type Result<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    let out = cfg.out_dir(common.out.as_deref());
    Ok((cfg, out))
}

fn apply_adapter(cfg: &mut RunConfig, flags: &AdapterFlags) -> Result<()> {
    if let Some(k) = &flags.kind {
        cfg.adapter.kind = match k.as_str() {
            "handcrafted" => AdapterKind::Handcrafted,
            "soft_prompt" | "soft" => AdapterKind::SoftPrompt,
            "lora" => AdapterKind::Lora,
            other => return Err(usage(format!("unknown adapter kind {other:?}"))),
        };
    }
    if let Some(l) = flags.length {
        cfg.adapter.length = l;
    }
    if let Some(r) = flags.rank {
        cfg.adapter.rank = r;
    }
    if let Some(b) = flags.batch_size {
        cfg.train.batch_size = b;
    }
    Ok(())
}

fn task_of(cfg: &RunConfig) -> Result<SyntheticTask> {
    cfg.data.task()
}

/// The run's dataset: the configured JSONL file, else the synthetic task
/// generated with `seed`.
fn dataset(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    if let Some(path) = &cfg.data.path {
        let tok = Tokenizer::new(cfg.model.vocab_size)?;
        return Ok(load_jsonl(path, cfg.data.format, cfg.data.max_tokens, &tok)?);
    }
    let task = task_of(cfg)?;
    let ds = gen_synthetic(task, cfg.data.examples, seed)?;
    Ok(match cfg.data.format {
        DataKind::Pairwise => ds,
        DataKind::Pointwise => to_pointwise(&ds, task),
    })
}

fn base(cfg: &RunConfig, out: &Path, explicit: Option<&Path>) -> Result<ModelState> {
    if let Some(p) = explicit {
        return Ok(Checkpoint::load(p)?.state);
    }
    let spec = cfg.base_spec()?;
    let path = out.join("base").join(format!("base-{}.bin", &spec.hash()[..16]));
    if !path.exists() {
        eprintln!("pretraining base model -> {}", path.display());
    }
    Ok(spec.load_or_build(&path)?)
}

fn train_one(cfg: &RunConfig, kind: RunKind, seed: u64, ds: &Dataset, base: &ModelState, dir: &Path) -> Result<RunRecord> {
    let spec = RunSpec {
        kind,
        adapter: cfg.adapter.for_kind(kind),
        train: cfg.train.clone(),
        seed,
        levels: if ds.kind == DataKind::Pointwise { cfg.data.levels } else { 0 },
    };
    let rec = run_variant(&spec, ds, base, Some(dir))?;
    for s in &rec.manifest.summaries {
        let last = s.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
        eprintln!("{kind} seed {seed}: stage {} done, {} steps, last-epoch loss {last:.4}", s.name, s.steps);
    }
    Ok(rec)
}

fn dump_for(cfg: &RunConfig, rec: &RunRecord, kind: RunKind, prompts: &[String], path: &Path) -> Result<()> {
    let rows = generate_eval_dump(&rec.checkpoint(), prompts, kind.eval_choice(), cfg.eval.temperature, cfg.eval.max_len, cfg.eval.sample_seed)?;
    write_dump(path, &rows)?;
    Ok(())
}

fn compare_files(a: &Path, b: &Path, task: SyntheticTask, candidate: &str, baseline: &str) -> Result<WinRateReport> {
    let mut r = winrate(&read_dump(a)?, &read_dump(b)?, &task, candidate, baseline)?;
    r.inputs = vec![InputArtifact::of(a)?, InputArtifact::of(b)?];
    Ok(r)
}

fn write_reports(out: &Path, stem: &str, reports: &[WinRateReport]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(format!("{stem}.csv")), WinRateReport::to_csv(reports))?;
    std::fs::write(out.join(format!("{stem}.json")), serde_json::to_string_pretty(reports).map_err(ctrlgen::Error::from)?)?;
    print!("{}", table::render(reports));
    Ok(())
}

fn label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { task, examples, seed, pointwise, common } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(t) = task {
                cfg.data.task = t;
            }
            if let Some(n) = examples {
                cfg.data.examples = n;
            }
            if pointwise {
                cfg.data.format = DataKind::Pointwise;
            }
            cfg.data.path = None;
            let ds = dataset(&cfg, seed.unwrap_or(cfg.run.seed))?;
            ds.save(&out)?;
            let m = ds.manifest();
            println!("wrote {} train / {} validation records to {} (sha256 {})", m.counts.train, m.counts.validation, out.display(), m.content_hash);
            Ok(())
        }
        Command::Train { kind, seed, task, data, base: base_path, adapter, common } => {
            let (mut cfg, out) = load(&common)?;
            apply_adapter(&mut cfg, &adapter)?;
            if let Some(k) = kind {
                cfg.run.kind = k.parse().map_err(usage)?;
            }
            if let Some(t) = task {
                cfg.data.task = t;
            }
            if data.is_some() {
                cfg.data.path = data;
            }
            let seed = seed.unwrap_or(cfg.run.seed);
            let ds = dataset(&cfg, seed)?;
            let base = base(&cfg, &out, base_path.as_deref())?;
            let dir = out.join(format!("{}-seed{seed}", cfg.run.kind));
            let rec = train_one(&cfg, cfg.run.kind, seed, &ds, &base, &dir)?;
            println!("{}", dir.join("manifest.json").display());
            println!("config {}  checkpoint sha256 {}", rec.manifest.config_hash, rec.manifest.checkpoint_sha256);
            Ok(())
        }
        Command::Generate { checkpoint, adapter, temperature, seed, task, data, dump, common } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(t) = task {
                cfg.data.task = t;
            }
            if data.is_some() {
                cfg.data.path = data;
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            resolve_choice(ckpt.controls.as_ref(), &adapter)?;
            let ds = dataset(&cfg, seed.unwrap_or(cfg.run.seed))?;
            let rows = generate_eval_dump(
                &ckpt,
                &validation_prompts(&ds),
                &adapter,
                temperature.unwrap_or(cfg.eval.temperature),
                cfg.eval.max_len,
                cfg.eval.sample_seed,
            )?;
            let path = dump.unwrap_or_else(|| out.join("dump.jsonl"));
            write_dump(&path, &rows)?;
            println!("wrote {} generations to {}", rows.len(), path.display());
            Ok(())
        }
        Command::Eval { a, b, rewarder, judge, template, csv, common } => {
            let (cfg, _) = load(&common)?;
            let (candidate, baseline) = (label(&a), label(&b));
            let mut report = match (rewarder, judge) {
                (_, Some(url)) => {
                    let template: TemplateId = template.parse().map_err(usage)?;
                    let j = RemoteJudge::new(&url, template, Duration::from_secs(cfg.eval.timeout_secs), cfg.eval.concurrency)?;
                    j.winrate(&read_dump(&a)?, &read_dump(&b)?, &candidate, &baseline)?
                }
                (Some(r), None) => {
                    let task: SyntheticTask = r.parse().map_err(usage)?;
                    winrate(&read_dump(&a)?, &read_dump(&b)?, &task, &candidate, &baseline)?
                }
                (None, None) => return Err(usage("eval needs --rewarder or --judge")),
            };
            report.inputs = vec![InputArtifact::of(&a)?, InputArtifact::of(&b)?];
            if let Some(path) = csv {
                std::fs::write(path, WinRateReport::to_csv(std::slice::from_ref(&report)))?;
            }
            print!("{}", table::render(&[report]));
            Ok(())
        }
        Command::Ablate { task, seed, adapter, common } => {
            let (mut cfg, out) = load(&common)?;
            apply_adapter(&mut cfg, &adapter)?;
            if let Some(t) = task {
                cfg.data.task = t;
            }
            let seed = seed.unwrap_or(cfg.run.seed);
            let task = task_of(&cfg)?;
            let ds = dataset(&cfg, seed)?;
            let base = base(&cfg, &out, None)?;
            let root = out.join(format!("ablate-{}-seed{seed}", cfg.data.task));
            let prompts = validation_prompts(&ds);
            for kind in RunKind::ALL {
                let dir = root.join(kind.name());
                let rec = train_one(&cfg, kind, seed, &ds, &base, &dir)?;
                dump_for(&cfg, &rec, kind, &prompts, &dir.join("dump.jsonl"))?;
            }
            let meet = root.join("meet").join("dump.jsonl");
            let reports = RunKind::ALL[1..]
                .iter()
                .map(|k| compare_files(&meet, &root.join(k.name()).join("dump.jsonl"), task, "meet", k.name()))
                .collect::<Result<Vec<_>>>()?;
            write_reports(&root, "report", &reports)
        }
        Command::SweepTemp { checkpoint, adapter, baseline, temps, rewarder, seed, common } => {
            let (cfg, out) = load(&common)?;
            let task: SyntheticTask = rewarder.parse().map_err(usage)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ad = resolve_choice(ckpt.controls.as_ref(), &adapter)?;
            let base_rows = read_dump(&baseline)?;
            let tok = Tokenizer::new(ckpt.state.config.vocab_size)?;
            let rows = temperature_sweep(
                &ckpt.state,
                ad,
                &tok,
                &temps,
                &task,
                &base_rows,
                cfg.eval.max_len,
                seed.unwrap_or(cfg.eval.sample_seed),
                &label(&checkpoint),
                &label(&baseline),
            )?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("sweep_temp.csv");
            std::fs::write(&path, sweep_csv(&rows))?;
            for r in &rows {
                println!("{:>6.2}  {}", r.temperature, table::delta_cell(r.delta, 7));
            }
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::SweepCapacity { task, seeds, lengths, ranks, common } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(t) = task {
                cfg.data.task = t;
            }
            let task = task_of(&cfg)?;
            let base = base(&cfg, &out, None)?;
            let root = out.join(format!("capacity-{}", cfg.data.task));
            let grid: Vec<AdapterSpec> = lengths
                .iter()
                .map(|&length| AdapterSpec::SoftPrompt { length })
                .chain(ranks.iter().map(|&rank| AdapterSpec::Lora { rank, alpha: rank as f64 }))
                .collect();
            let mut csv = String::from("adapter,size,seed,delta\n");
            let mut reports = Vec::new();
            for &seed in &seeds {
                let ds = dataset(&cfg, seed)?;
                let prompts = validation_prompts(&ds);
                let coh_dir = root.join(format!("seed{seed}")).join("coh");
                let coh = train_one(&cfg, RunKind::Coh, seed, &ds, &base, &coh_dir)?;
                dump_for(&cfg, &coh, RunKind::Coh, &prompts, &coh_dir.join("dump.jsonl"))?;
                for spec in &grid {
                    let (name, size) = match *spec {
                        AdapterSpec::SoftPrompt { length } => ("soft_prompt", length),
                        AdapterSpec::Lora { rank, .. } => ("lora", rank),
                        AdapterSpec::Handcrafted { .. } => unreachable!("grid holds trainable adapters"),
                    };
                    let mut c = cfg.clone();
                    c.adapter.kind = spec_kind(spec);
                    c.adapter.length = size;
                    c.adapter.rank = size;
                    c.adapter.alpha = None;
                    let dir = root.join(format!("seed{seed}")).join(format!("{name}-{size}"));
                    let rec = train_one(&c, RunKind::Meet, seed, &ds, &base, &dir)?;
                    dump_for(&c, &rec, RunKind::Meet, &prompts, &dir.join("dump.jsonl"))?;
                    let r = compare_files(&dir.join("dump.jsonl"), &coh_dir.join("dump.jsonl"), task, &format!("meet-{name}-{size}"), "coh")?;
                    csv.push_str(&format!("{name},{size},{seed},{}\n", r.delta));
                    reports.push(r);
                }
            }
            std::fs::create_dir_all(&root)?;
            std::fs::write(root.join("capacity.csv"), csv)?;
            write_reports(&root, "report", &reports)
        }
    }
}

fn spec_kind(spec: &AdapterSpec) -> AdapterKind {
    spec.kind()
}
