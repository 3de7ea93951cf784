use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use ponderlm::analysis::{
    analyze, capture_trace, flops_estimate, load_trace, save_trace, write_report,
};
use ponderlm::config::{load_config, Manifest};
use ponderlm::data::{
    read_shard_for, synth_corpus, train_bpe, write_shard, DataPosition, TokenShard, Tokenizer,
};
use ponderlm::eval::{perplexity, step_sweep, sweep_csv, trace_inference};
use ponderlm::mechanism::Mechanism;
use ponderlm::ponder::{trace_records, PonderConfig};
use ponderlm::train::checkpoint::checkpoint_hash;
use ponderlm::train::{
    load_checkpoint, save_checkpoint, Checkpoint, MetricsLog, TrainState, Trainer,
};

use crate::overrides::parse_step_list;
use crate::{
    AnalyzeArgs, Command, DataCmd, EvalCmd, EvalData, FlopsArgs, TokenizerCmd, TraceArgs, TrainArgs,
};

pub fn run(cmd: Command, argv: Vec<String>) -> Result<()> {
    match cmd {
        Command::Tokenizer(TokenizerCmd::Train {
            input,
            vocab_size,
            out,
        }) => tokenizer_train(&input, vocab_size, &out, argv),
        Command::Data(DataCmd::Synth {
            out,
            bytes,
            world_seed,
            sample_seed,
        }) => {
            let text = synth_corpus(world_seed, sample_seed, bytes);
            write(&out, text.as_bytes())?;
            info!("wrote {} bytes to {}", text.len(), out.display());
            Ok(())
        }
        Command::Data(DataCmd::Encode {
            tokenizer,
            input,
            out,
            valid_fraction,
            valid_out,
        }) => data_encode(
            &tokenizer,
            &input,
            &out,
            valid_fraction,
            valid_out.as_deref(),
            argv,
        ),
        Command::Train(args) => train(args, argv),
        Command::Eval(EvalCmd::Ppl { data, steps, out }) => {
            eval_ppl(&data, steps, out.as_deref(), argv)
        }
        Command::Eval(EvalCmd::Sweep { data, steps, out }) => {
            eval_sweep(&data, &steps, out.as_deref(), argv)
        }
        Command::Trace(args) => trace(args, argv),
        Command::Analyze(args) => analyze_cmd(args, argv),
        Command::Flops(args) => flops(args),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn manifest(argv: Vec<String>, config: serde_json::Value, inputs: &[&Path]) -> Result<Manifest> {
    let mut m = Manifest::new(argv, config);
    for p in inputs {
        m.hash_input(p)?;
    }
    m.git_commit = git_commit();
    Ok(m)
}

/// `<out>.manifest.json` beside a single-file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn tokenizer_train(
    input: &[PathBuf],
    vocab_size: usize,
    out: &Path,
    argv: Vec<String>,
) -> Result<()> {
    let mut corpus = Vec::new();
    for p in input {
        corpus.extend(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
    }
    let tok = train_bpe(&corpus, vocab_size)?;
    write(out, tok.to_json().as_bytes())?;
    let inputs: Vec<&Path> = input.iter().map(PathBuf::as_path).collect();
    manifest(argv, json!({"vocab_size": vocab_size}), &inputs)?.save(&sidecar(out))?;
    info!(
        "trained {} merges; vocab size {}",
        tok.merges().len(),
        tok.vocab_size()
    );
    Ok(())
}

fn data_encode(
    tokenizer: &Path,
    input: &[PathBuf],
    out: &Path,
    valid_fraction: Option<f64>,
    valid_out: Option<&Path>,
    argv: Vec<String>,
) -> Result<()> {
    let tok = Tokenizer::load(tokenizer)?;
    let mut ids = Vec::new();
    for p in input {
        ids.extend(tok.encode(&fs::read(p).with_context(|| format!("reading {}", p.display()))?));
    }
    let vocab = tok.vocab_size() as u32;
    let split = match valid_fraction {
        Some(f) if !(0.0..1.0).contains(&f) => {
            bail!("--valid-fraction must lie in [0, 1), got {f}")
        }
        Some(f) => ids.len() - (ids.len() as f64 * f).round() as usize,
        None => ids.len(),
    };
    if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_shard(out, &ids[..split], vocab)?;
    info!("{} tokens -> {}", split, out.display());
    if let Some(v) = valid_out {
        write_shard(v, &ids[split..], vocab)?;
        info!("{} tokens -> {}", ids.len() - split, v.display());
    }
    let mut inputs: Vec<&Path> = vec![tokenizer];
    inputs.extend(input.iter().map(PathBuf::as_path));
    manifest(argv, json!({"valid_fraction": valid_fraction}), &inputs)?.save(&sidecar(out))?;
    Ok(())
}

fn load_shards(paths: &[PathBuf], vocab: usize) -> Result<Vec<TokenShard>> {
    paths
        .iter()
        .map(|p| read_shard_for(p, vocab).with_context(|| format!("loading shard {}", p.display())))
        .collect()
}

fn train(args: TrainArgs, argv: Vec<String>) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    cfg.train.mechanism = args.mechanism.apply(&cfg.train.mechanism)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = args.total_steps {
        cfg.train.total_steps = t;
    }
    if args.warm_start.is_some() {
        cfg.train.warm_start = args.warm_start.clone();
    }
    cfg.validate()?;

    let name = match &args.name {
        Some(n) => n.clone(),
        None => args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into()),
    };
    let run_dir = args.runs_dir.join(name);
    let ckpt_dir = run_dir.join("ckpt");
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;

    let shards = load_shards(&cfg.data.train, cfg.model.vocab_size)?;
    let tokenizer_hash = match &cfg.data.tokenizer {
        Some(p) => Some(Tokenizer::load(p)?.hash()),
        None => None,
    };
    let metrics_path = run_dir.join("metrics.csv");
    let (state, position, log) = if args.resume {
        let ckpt = load_checkpoint(&ckpt_dir)?;
        let state = TrainState::resume(&ckpt, &cfg.train)?;
        let log = MetricsLog::resume(&metrics_path, ckpt.meta.step)?;
        info!("resuming at step {}", ckpt.meta.step);
        (state, ckpt.meta.data, log)
    } else {
        let state = match &cfg.train.warm_start {
            Some(w) => {
                let ckpt = load_checkpoint(w)?;
                info!("warm start from {} (step {})", w.display(), ckpt.meta.step);
                TrainState::warm_start(&ckpt, &cfg.model, &cfg.train)?
            }
            None => TrainState::fresh(&cfg.model, &cfg.train)?,
        };
        (
            state,
            DataPosition::default(),
            MetricsLog::create(&metrics_path)?,
        )
    };

    let mut inputs: Vec<&Path> = vec![&args.config];
    inputs.extend(
        cfg.data
            .train
            .iter()
            .chain(&cfg.data.valid)
            .map(PathBuf::as_path),
    );
    if let Some(t) = &cfg.data.tokenizer {
        inputs.push(t);
    }
    if let Some(w) = &cfg.train.warm_start {
        inputs.push(w);
    }
    manifest(argv, serde_json::to_value(&cfg)?, &inputs)?.save(&run_dir.join("manifest.json"))?;

    let mut trainer = Trainer::new(state, cfg.train.clone(), &shards, position)?
        .with_log(log)
        .with_dump_dir(&run_dir);
    trainer.tokenizer_hash = tokenizer_hash;
    let keep_optim = !args.no_optimizer_state;
    info!(
        "training {} for {} steps ({} parameters)",
        cfg.train.mechanism.label(),
        cfg.train.total_steps,
        trainer.state.model.params.count()
    );
    let every = cfg.train.total_steps.div_ceil(20).max(1);
    let stop = args.stop_at.unwrap_or(u64::MAX);
    while !trainer.done() && trainer.state.step < stop {
        let row = trainer.step()?;
        if row.step % every == 0 || row.step == cfg.train.total_steps {
            info!(
                "step {} loss {:.4} lr {:.2e} grad_norm {:.3} s={}",
                row.step, row.loss, row.lr, row.grad_norm, row.resolved_ponder_steps
            );
        }
        if args
            .checkpoint_every
            .is_some_and(|n| n > 0 && row.step % n == 0)
        {
            save_checkpoint(&ckpt_dir, &trainer.checkpoint(true))?;
        }
    }
    let ckpt = trainer.checkpoint(keep_optim);
    save_checkpoint(&ckpt_dir, &ckpt)?;

    if !trainer.done() {
        info!(
            "stopped at step {}; continue with --resume",
            trainer.state.step
        );
        return Ok(());
    }
    if !cfg.data.valid.is_empty() {
        let valid = load_shards(&cfg.data.valid, cfg.model.vocab_size)?;
        let steps = cfg.train.mechanism.default_eval_steps();
        let p = perplexity(
            &trainer.state.model,
            &cfg.train.mechanism,
            &valid,
            cfg.train.batch.context_len,
            cfg.data.eval_windows_per_batch,
            steps,
        )?;
        info!(
            "validation loss {:.4} ppl {:.3} ({} tokens)",
            p.loss, p.ppl, p.tokens
        );
        let report = run_dir.join("report");
        fs::create_dir_all(&report)?;
        let body = json!({"steps": steps, "loss": p.loss, "ppl": p.ppl, "tokens": p.tokens});
        write(
            &report.join("eval.json"),
            serde_json::to_string_pretty(&body)?.as_bytes(),
        )?;
    }
    Ok(())
}

/// Window length used when evaluating `ckpt` without an explicit one.
fn eval_context(ckpt: &Checkpoint, requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| match &ckpt.config.train {
        Some(t) => t.batch.context_len,
        None => ckpt.config.model.context_len / ckpt.config.mechanism.required_context(1),
    })
}

fn eval_ppl(
    d: &EvalData,
    steps: Option<usize>,
    out: Option<&Path>,
    argv: Vec<String>,
) -> Result<()> {
    let ckpt = load_checkpoint(&d.checkpoint)?;
    let shards = load_shards(&d.data, ckpt.config.model.vocab_size)?;
    let mech = &ckpt.config.mechanism;
    let steps = steps.unwrap_or_else(|| mech.default_eval_steps());
    let ctx = eval_context(&ckpt, d.context_len);
    let p = perplexity(
        &ckpt.model(),
        mech,
        &shards,
        ctx,
        d.windows_per_batch,
        steps,
    )?;
    let body = json!({"steps": steps, "context_len": ctx, "loss": p.loss, "ppl": p.ppl, "tokens": p.tokens});
    let text = serde_json::to_string_pretty(&body)?;
    println!("{text}");
    if let Some(out) = out {
        write(out, text.as_bytes())?;
        let mut inputs: Vec<&Path> = vec![&d.checkpoint];
        inputs.extend(d.data.iter().map(PathBuf::as_path));
        manifest(argv, body, &inputs)?.save(&sidecar(out))?;
    }
    Ok(())
}

fn eval_sweep(d: &EvalData, steps: &str, out: Option<&Path>, argv: Vec<String>) -> Result<()> {
    let list = parse_step_list(steps)?;
    let ckpt = load_checkpoint(&d.checkpoint)?;
    if !matches!(ckpt.config.mechanism, Mechanism::Ponder(_)) {
        bail!(
            "step sweeps need a pondering checkpoint, got {}",
            ckpt.config.mechanism.label()
        );
    }
    let shards = load_shards(&d.data, ckpt.config.model.vocab_size)?;
    let ctx = eval_context(&ckpt, d.context_len);
    let rows = step_sweep(
        &ckpt.model(),
        &ckpt.config.mechanism,
        &shards,
        ctx,
        d.windows_per_batch,
        &list,
    )?;
    let csv = sweep_csv(&rows);
    match out {
        Some(out) => {
            write(out, csv.as_bytes())?;
            let mut inputs: Vec<&Path> = vec![&d.checkpoint];
            inputs.extend(d.data.iter().map(PathBuf::as_path));
            manifest(argv, json!({"steps": list, "context_len": ctx}), &inputs)?
                .save(&sidecar(out))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// The pondering settings a checkpoint is traced with: its own when it was
/// trained with pondering, the defaults otherwise.
fn ponder_of(ckpt: &Checkpoint) -> PonderConfig {
    match &ckpt.config.mechanism {
        Mechanism::Ponder(p) => p.clone(),
        _ => PonderConfig {
            top_k: PonderConfig::default()
                .top_k
                .min(ckpt.config.model.vocab_size),
            ..PonderConfig::default()
        },
    }
}

fn trace(args: TraceArgs, argv: Vec<String>) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let tok = Tokenizer::load(&args.tokenizer)?;
    if let Some(h) = &ckpt.meta.tokenizer_hash {
        if *h != tok.hash() {
            bail!(
                "tokenizer {} does not match the checkpoint's tokenizer",
                args.tokenizer.display()
            );
        }
    }
    let ponder = ponder_of(&ckpt);
    let steps = args.steps.unwrap_or_else(|| ponder.schedule.max_steps());
    let cs = trace_inference(
        &ckpt.model(),
        &tok,
        &ponder,
        &args.prompt,
        steps,
        args.display_k,
    )?;
    print!("{}", cs.table());
    if let Some(dir) = &args.out_dir {
        fs::create_dir_all(dir)?;
        write(&dir.join("trace.jsonl"), cs.jsonl().as_bytes())?;
        write(&dir.join("table.txt"), cs.table().as_bytes())?;
        let steps_jsonl: String = trace_records(&cs.trace, args.display_k)
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<Result<_, _>>()?;
        write(&dir.join("steps.jsonl"), steps_jsonl.as_bytes())?;
        save_trace(&dir.join("trace.bin"), &cs.trace)?;
        let cfg = json!({"prompt": args.prompt, "steps": steps, "display_k": args.display_k, "ponder": ponder});
        manifest(argv, cfg, &[&args.checkpoint, &args.tokenizer])?
            .save(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn analyze_cmd(args: AnalyzeArgs, argv: Vec<String>) -> Result<()> {
    let (trace, cfg, inputs): (_, _, Vec<&Path>) = match (&args.trace, &args.checkpoint) {
        (Some(path), _) => (
            load_trace(path)?,
            json!({"trace": path, "top_m": args.top_m}),
            vec![path],
        ),
        (None, Some(ck)) => {
            let ckpt = load_checkpoint(ck)?;
            let shards = load_shards(&args.data, ckpt.config.model.vocab_size)?;
            let ponder = ponder_of(&ckpt);
            let steps = args.steps.unwrap_or_else(|| ponder.schedule.max_steps());
            let ctx = eval_context(&ckpt, args.context_len);
            let trace = capture_trace(&ckpt.model(), &ponder, &shards, ctx, args.sequences, steps)?;
            let cfg = json!({
                "checkpoint_hash": checkpoint_hash(ck)?,
                "steps": steps,
                "sequences": args.sequences,
                "context_len": ctx,
                "top_m": args.top_m,
            });
            let mut inputs: Vec<&Path> = vec![ck];
            inputs.extend(args.data.iter().map(PathBuf::as_path));
            (trace, cfg, inputs)
        }
        (None, None) => bail!("analyze needs --trace or --checkpoint with --data"),
    };
    let report = analyze(&trace, args.top_m, None)?;
    write_report(&args.out, &report)?;
    if args.trace.is_none() {
        save_trace(&args.out.join("trace.bin"), &trace)?;
    }
    manifest(argv, cfg, &inputs)?.save(&args.out.join("manifest.json"))?;
    for (i, (c, k)) in report
        .cosine_series
        .iter()
        .zip(&report.kl_series)
        .enumerate()
    {
        println!("step {}: cosine {c:.4} kl {k:.4}", i + 1);
    }
    for s in &report.spectral {
        println!(
            "state {}: effective rank {:.3} top-{} variance {:.4}",
            s.step, s.effective_rank, args.top_m, s.cumulative_variance_top_m
        );
    }
    Ok(())
}

fn flops(args: FlopsArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let mech = args.mechanism.apply(&cfg.train.mechanism)?;
    mech.validate(cfg.model.vocab_size)?;
    let count = mech.compute_count(mech.default_eval_steps());
    let est = flops_estimate(&cfg.model, &mech, count);
    let vanilla = flops_estimate(&cfg.model, &Mechanism::Vanilla, 0);
    let body = json!({
        "mechanism": mech.label(),
        "count": count,
        "forward_per_token": est.forward_per_token,
        "train_per_token": est.train_per_token,
        "mixture_per_token": est.mixture_per_token,
        "ratio_to_vanilla": est.forward_per_token / vanilla.forward_per_token,
    });
    println!("{}", serde_json::to_string_pretty(&body)?);
    Ok(())
}
