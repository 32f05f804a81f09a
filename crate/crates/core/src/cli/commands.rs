use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::manifest::RunManifest;
use super::{
    CliError, Command, EvalArgs, ExportArgs, GradcheckArgs, ReportFlags, ReportFormat, SynthArgs,
    TrainArgs, EXIT_FAILURE, EXIT_OK,
};
use crate::embedding::{normalize_rows, EmbeddingBatch, MultimodalBatch};
use crate::io::{
    read_embeddings_jsonl, read_gfb, read_json, write_atomic, write_embeddings_jsonl, write_gfb,
};
use crate::losses::gradcheck::{run_suite, GradLoss};
use crate::losses::Objective;
use crate::metrics::{
    alignment_report, csv_row, AlignmentReport, GapMode, ReportOptions, CSV_HEADER,
};
use crate::train::{
    encode_split, generate_synthetic, load_dataset, save_dataset, train_run, Checkpoint,
    SyntheticDataset, SyntheticDatasetSpec, TrainConfig,
};

type CliResult<T> = Result<T, CliError>;

pub(super) fn dispatch(command: Command, argv: Vec<String>) -> CliResult<i32> {
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a, argv),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Overlays `patch` onto `base`; keys missing from `base` are rejected.
fn merge(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(k)
                    .ok_or_else(|| CliError::usage(format!("unknown config key '{here}'")))?;
                merge(slot, v, &here)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>) -> CliResult<T> {
    let Some(file) = file else {
        return Ok(
            serde_json::from_value(serde_json::to_value(defaults).expect("serializable"))
                .expect("round-trips"),
        );
    };
    let mut v = serde_json::to_value(defaults).expect("serializable");
    merge(&mut v, file, "")?;
    serde_json::from_value(v).map_err(|e| CliError::usage(format!("config file: {e}")))
}

fn read_config_file(path: Option<&Path>) -> CliResult<Option<Value>> {
    let Some(path) = path else { return Ok(None) };
    let v: Value = read_json(path)?;
    if !v.is_object() {
        return Err(CliError::usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    }
    Ok(Some(v))
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn synth_flag(field: &str) -> &str {
    match field {
        "n_pairs" => "--n",
        "d_semantic" => "--d-semantic",
        "d_feat" => "--d-feat",
        "noise_sigma" => "--noise",
        "jitter_sigma" => "--jitter",
        "n_clusters" => "--clusters",
        "test_fraction" => "--test-fraction",
        other => other,
    }
}

pub(super) fn resolve_spec(a: &SynthArgs) -> CliResult<SyntheticDatasetSpec> {
    let file = read_config_file(a.config.as_deref())?;
    let mut spec: SyntheticDatasetSpec = layered(&SyntheticDatasetSpec::default(), file.as_ref())?;
    if let Some(n) = a.n {
        spec.n_pairs = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = a.d_semantic {
        spec.d_semantic = d;
    }
    if let Some(d) = &a.d_feat {
        spec.d_feat = d.clone();
    }
    if let Some(x) = a.noise {
        spec.noise_sigma = x;
    }
    if let Some(x) = a.jitter {
        spec.jitter_sigma = x;
    }
    if let Some(c) = a.clusters {
        spec.n_clusters = c;
    }
    if let Some(f) = a.test_fraction {
        spec.test_fraction = f;
    }
    spec.validate().map_err(|e| {
        let msg = e.to_string();
        let body = msg.strip_prefix("invalid argument: ").unwrap_or(&msg);
        match body.split_once(": ") {
            Some((field, why)) => {
                CliError::usage(format!("invalid value for {}: {why}", synth_flag(field)))
            }
            None => CliError::usage(body.to_owned()),
        }
    })?;
    Ok(spec)
}

fn synth(a: SynthArgs, argv: Vec<String>) -> CliResult<i32> {
    let started = Instant::now();
    let spec = resolve_spec(&a)?;
    let data = generate_synthetic(&spec)?;
    let mut manifest = RunManifest::new("synth", argv, spec.seed, to_json(&spec));
    manifest.artifacts = save_dataset(&a.out, &data)?;
    manifest.finish(&a.out, started.elapsed())?;
    println!(
        "wrote {} pairs ({} train / {} test, {} modalities) to {}",
        spec.n_pairs,
        data.train.len(),
        data.test.len(),
        spec.num_modalities(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn apply_report_flags(opts: &mut ReportOptions, f: &ReportFlags) {
    if let Some(d) = f.direction {
        opts.direction = d;
    }
    if let Some(ks) = &f.ks {
        opts.ks = ks.clone();
    }
    if f.gap_sum {
        opts.gap_mode = GapMode::Sum;
    }
}

pub(super) fn resolve_train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let file = read_config_file(a.config.as_deref())?;
    let file_objective = match file.as_ref().and_then(|f| f.get("objective")) {
        Some(v) => Some(
            serde_json::from_value::<Objective>(v.clone())
                .map_err(|e| CliError::usage(format!("config file objective: {e}")))?,
        ),
        None => None,
    };
    let objective = a.objective.or(file_objective).unwrap_or(Objective::Gap);
    let base = if a.full_scale {
        TrainConfig::full_scale(objective)
    } else {
        TrainConfig::desk(objective)
    };
    let mut cfg: TrainConfig = layered(&base, file.as_ref())?;
    cfg.objective = objective;

    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set! {
        epochs => epochs,
        batch_size => batch_size,
        lr => lr,
        weight_decay => weight_decay,
        tau_init => tau_init,
        learnable_tau => learnable_tau,
        w_atp => weights.w_atp,
        w_cu => weights.w_cu,
        w_contrastive => weights.w_contrastive,
        seed => seed,
        eval_every => eval_every,
        hidden => hidden,
        embed_dim => embed_dim,
        bias_std => init.bias_std,
        weight_gain => init.weight_gain,
        anchor => anchor,
    }
    if a.atp_unnormalized {
        cfg.atp_unnormalized = true;
    }
    apply_report_flags(&mut cfg.report, &a.report);
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

fn train(a: TrainArgs, argv: Vec<String>) -> CliResult<i32> {
    let started = Instant::now();
    let cfg = resolve_train_config(&a)?;
    let data = load_dataset(&a.data)?;
    if cfg.anchor >= data.spec.num_modalities() {
        return Err(CliError::usage(format!(
            "--anchor {} out of range for {} modalities",
            cfg.anchor,
            data.spec.num_modalities()
        )));
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| format!("runs/{}-s{}", cfg.objective, cfg.seed).into());

    let result = train_run(&cfg, &data)?;
    for r in &result.history.records {
        eprintln!(
            "epoch {:>4} step {:>6} loss {} gap {:.4} cos {:.4} tau {:.4}",
            r.epoch,
            r.step,
            r.train_loss
                .map(|l| format!("{l:.5}"))
                .unwrap_or_else(|| "-".into()),
            r.report.gap,
            r.report.cos_true_pairs,
            r.tau
        );
    }

    let config = serde_json::json!({
        "train": cfg,
        "data": a.data.to_string_lossy(),
        "dataset": data.spec,
    });
    let mut manifest = RunManifest::new("train", argv, cfg.seed, config);
    Checkpoint::from_state(&result.state, Some(&data.spec)).save(&out.join("checkpoint.json"))?;
    write_atomic(
        &out.join("history.jsonl"),
        result.history.to_jsonl()?.as_bytes(),
    )?;
    manifest.artifacts = vec!["checkpoint.json".into(), "history.jsonl".into()];
    manifest.finish(&out, started.elapsed())?;
    println!("wrote {}", out.display());
    Ok(EXIT_OK)
}

/// Loads a checkpoint and a dataset and checks that they fit together.
fn checkpoint_and_data(ck: &Path, data: &Path) -> CliResult<(Checkpoint, SyntheticDataset)> {
    let ck = Checkpoint::load(ck)?;
    let data = load_dataset(data)?;
    let encoders = ck.encoders()?;
    if encoders.len() != data.spec.num_modalities() {
        return Err(CliError::usage(format!(
            "checkpoint has {} encoders, dataset has {} modalities",
            encoders.len(),
            data.spec.num_modalities()
        )));
    }
    for (m, (e, &w)) in encoders.iter().zip(&data.spec.d_feat).enumerate() {
        if e.input_dim() != w {
            return Err(CliError::usage(format!(
                "checkpoint encoder {m} expects {} input features, dataset modality {m} has {w}",
                e.input_dim()
            )));
        }
    }
    if data.test.is_empty() {
        return Err(CliError::usage("dataset has an empty test split"));
    }
    Ok((ck, data))
}

fn encode_test(ck: &Checkpoint, data: &SyntheticDataset) -> CliResult<MultimodalBatch> {
    Ok(encode_split(&ck.encoders()?, &data.test, ck.config.anchor)?)
}

fn read_exported(dir: &Path, binary: bool) -> CliResult<MultimodalBatch> {
    let mut mods = Vec::new();
    let mut first_ids: Option<Vec<String>> = None;
    for m in 0..2 {
        let matrix = if binary {
            read_gfb(&dir.join(format!("m{m}.gfb")))?
        } else {
            let path = dir.join(format!("m{m}.jsonl"));
            let (ids, _, matrix) = read_embeddings_jsonl(&path)?;
            match &first_ids {
                None => first_ids = Some(ids),
                Some(f) if *f != ids => {
                    return Err(CliError::usage(format!(
                        "{}: pair ids differ from m0.jsonl",
                        path.display()
                    )))
                }
                Some(_) => {}
            }
            matrix
        };
        mods.push(normalize_rows(&EmbeddingBatch::new(matrix)?)?);
    }
    let b = mods.pop().expect("two modalities");
    let a = mods.pop().expect("two modalities");
    Ok(MultimodalBatch::pair(a, b)?)
}

fn emit(text: &str, out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError {
                code: super::EXIT_IO,
                message: format!("stdout: {e}"),
            })?;
        }
    }
    Ok(())
}

pub(super) fn render_report(report: &AlignmentReport, format: ReportFormat, label: &str) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("serializable");
            s.push('\n');
            s
        }
        ReportFormat::Csv => format!("{CSV_HEADER}\n{}\n", csv_row(label, report)),
    }
}

fn eval(a: EvalArgs) -> CliResult<i32> {
    let (batch, mut opts, default_label) = match (&a.embeddings, &a.checkpoint, &a.data) {
        (Some(dir), _, _) => (
            read_exported(dir, a.binary)?,
            ReportOptions::default(),
            "embeddings".to_owned(),
        ),
        (None, Some(ck), Some(data)) => {
            let (ck, data) = checkpoint_and_data(ck, data)?;
            let full = encode_test(&ck, &data)?;
            let pair = MultimodalBatch::pair(full.modality(0).clone(), full.modality(1).clone())?;
            (
                pair,
                ck.config.report.clone(),
                ck.config.objective.to_string(),
            )
        }
        _ => {
            return Err(CliError::usage(
                "eval needs CHECKPOINT DATA or --embeddings DIR",
            ))
        }
    };
    apply_report_flags(&mut opts, &a.report);
    let report = alignment_report(&batch, &opts)?;
    let label = a.label.clone().unwrap_or(default_label);
    emit(&render_report(&report, a.format, &label), a.out.as_deref())?;
    Ok(EXIT_OK)
}

fn export(a: ExportArgs, argv: Vec<String>) -> CliResult<i32> {
    let started = Instant::now();
    let (ck, data) = checkpoint_and_data(&a.checkpoint, &a.data)?;
    let batch = encode_test(&ck, &data)?;
    let config = serde_json::json!({
        "checkpoint": a.checkpoint.to_string_lossy(),
        "data": a.data.to_string_lossy(),
        "split": "test",
        "pairs": data.test.len(),
    });
    let mut manifest = RunManifest::new("export", argv, ck.config.seed, config);
    for (m, unit) in batch.modalities().iter().enumerate() {
        let name = format!("m{m}");
        write_embeddings_jsonl(
            &a.out.join(format!("{name}.jsonl")),
            &data.test.ids,
            &name,
            unit.data(),
        )?;
        write_gfb(&a.out.join(format!("{name}.gfb")), unit.data())?;
        manifest.artifacts.push(format!("{name}.jsonl"));
        manifest.artifacts.push(format!("{name}.gfb"));
    }
    manifest.finish(&a.out, started.elapsed())?;
    println!("exported {} pairs to {}", data.test.len(), a.out.display());
    Ok(EXIT_OK)
}

fn gradcheck(a: GradcheckArgs) -> CliResult<i32> {
    if !(1e-6..=1e-2).contains(&a.step) {
        return Err(CliError::usage(format!(
            "--step must lie in [1e-6, 1e-2], got {}",
            a.step
        )));
    }
    if !(a.tol > 0.0) {
        return Err(CliError::usage(format!(
            "--tol must be positive, got {}",
            a.tol
        )));
    }
    if a.configs == 0 {
        return Err(CliError::usage("--configs must be >= 1"));
    }
    let losses = a.losses.clone().unwrap_or_else(|| GradLoss::ALL.to_vec());
    let rows = run_suite(&losses, a.configs, a.seed, a.tol, a.step)?;
    println!(
        "{:<10} {:>6} {:>12}  {:<22} status",
        "loss", "cases", "max_rel_err", "worst (B,d,M,seed)"
    );
    for r in &rows {
        let c = r.worst_case;
        println!(
            "{:<10} {:>6} {:>12.3e}  {:<22} {}",
            r.loss.name(),
            r.cases,
            r.max_rel_err,
            format!("({},{},{},{})", c.batch, c.dim, c.modalities, c.seed),
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    Ok(if rows.iter().all(|r| r.passed) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
