use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use reid_core::data::{filter_single_camera_ids, query_gallery_split, split_by_person};
use reid_core::gradcheck;
use reid_core::optim::LrSchedule;
use reid_core::{
    build_cooccurrence, evaluate_model, finetune, finetune_two_stage, generate_synthetic,
    load_checkpoint, load_features, mine_target, save_checkpoint, save_features, train,
    CooccurrenceScope, Dataset, Exclusion, FinetuneConfig, MarginMode, MiningConfig, MiningReport,
    PairSelection, ProtocolConfig, Reduction, SwitchPolicy, SynthConfig, TrainConfig, TrainMode,
};

use crate::config::Resolved;
use crate::CliError;

type CliResult<T = ()> = Result<T, CliError>;

pub fn execute(name: &str, mut r: Resolved) -> CliResult {
    r.default("threads", 0);
    let threads: usize = r.parse("threads")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| match name {
        "synth" => synth(r),
        "train" => train_cmd(r),
        "finetune" => finetune_cmd(r),
        "eval" => eval_cmd(r),
        "mine" => mine_cmd(r),
        "gradcheck" => gradcheck_cmd(r),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    })
}

fn write_out(dir: &Path, name: &str, contents: &str) -> CliResult {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| CliError::Io { path, source })
}

/// Creates `--out` and records the resolved configuration in it.
fn prepare_out(r: &Resolved, command: &str) -> CliResult<PathBuf> {
    let dir = r.path("out")?;
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.clone(),
        source,
    })?;
    write_out(&dir, &format!("{command}_config.txt"), &r.echo())?;
    Ok(dir)
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn parse_margin(s: &str) -> Result<MarginMode, String> {
    if s == "softplus" {
        return Ok(MarginMode::Softplus);
    }
    let m = s
        .strip_prefix("hinge:")
        .ok_or("expected softplus or hinge:<m>")?
        .parse::<f64>()
        .map_err(|e| e.to_string())?;
    if m.is_finite() && m >= 0.0 {
        Ok(MarginMode::Hinge(m))
    } else {
        Err("hinge margin must be non-negative".into())
    }
}

fn margin_text(m: MarginMode) -> String {
    match m {
        MarginMode::Softplus => "softplus".into(),
        MarginMode::Hinge(v) => format!("hinge:{v}"),
    }
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "mean" => Ok(Reduction::Mean),
        "sum" => Ok(Reduction::Sum),
        _ => Err("expected mean or sum".into()),
    }
}

fn reduction_text(r: Reduction) -> &'static str {
    match r {
        Reduction::Mean => "mean",
        Reduction::Sum => "sum",
    }
}

fn parse_selection(s: &str) -> Result<PairSelection, String> {
    match s {
        "greedy" => Ok(PairSelection::Greedy),
        "raw-top-n" => Ok(PairSelection::RawTopN),
        _ => Err("expected greedy or raw-top-n".into()),
    }
}

fn parse_scope(s: &str) -> Result<CooccurrenceScope, String> {
    match s {
        "both" => Ok(CooccurrenceScope::Both),
        "same-camera" => Ok(CooccurrenceScope::SameCamera),
        "cross-camera" => Ok(CooccurrenceScope::CrossCamera),
        _ => Err("expected both, same-camera or cross-camera".into()),
    }
}

fn load(path: &str) -> CliResult<Dataset> {
    Ok(load_features(path)?)
}

fn synth(mut r: Resolved) -> CliResult {
    let d = SynthConfig::default();
    r.default("seed", d.seed);
    r.default("num_datasets", d.num_datasets);
    r.default("cameras_per_dataset", d.cameras_per_dataset);
    r.default("ids_per_dataset", d.ids_per_dataset);
    r.default("tracklets_per_id_per_camera", d.tracklets_per_id_per_camera);
    r.default("images_per_tracklet", d.images_per_tracklet);
    r.default("latent_dim", d.latent_dim);
    r.default("feature_dim", d.feature_dim);
    r.default("camera_transform_scale", d.camera_transform_scale);
    r.default("dataset_shift_scale", d.dataset_shift_scale);
    r.default("noise_sigma", d.noise_sigma);
    r.default("cross_camera_id_fraction", d.cross_camera_id_fraction);
    r.default("splits", true);
    r.default("test_fraction", 0.5);
    let cfg = SynthConfig {
        num_datasets: r.parse("num_datasets")?,
        cameras_per_dataset: r.parse("cameras_per_dataset")?,
        ids_per_dataset: r.parse("ids_per_dataset")?,
        tracklets_per_id_per_camera: r.parse("tracklets_per_id_per_camera")?,
        images_per_tracklet: r.parse("images_per_tracklet")?,
        latent_dim: r.parse("latent_dim")?,
        feature_dim: r.parse("feature_dim")?,
        camera_transform_scale: r.parse("camera_transform_scale")?,
        dataset_shift_scale: r.parse("dataset_shift_scale")?,
        noise_sigma: r.parse("noise_sigma")?,
        cross_camera_id_fraction: r.parse("cross_camera_id_fraction")?,
        seed: r.parse("seed")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let splits = r.with("splits", parse_bool)?;
    let test_fraction: f64 = r.parse("test_fraction")?;
    let out = prepare_out(&r, "synth")?;
    let datasets = generate_synthetic(&cfg)?;
    for (s, ds) in datasets.iter().enumerate() {
        save_features(ds, out.join(format!("ds{s}.feat")))?;
        if splits {
            let (train, test) = split_by_person(ds, test_fraction, cfg.seed)?;
            let (query, gallery) =
                query_gallery_split(&filter_single_camera_ids(&test)?, cfg.seed)?;
            save_features(&train, out.join(format!("ds{s}_train.feat")))?;
            save_features(&test, out.join(format!("ds{s}_test.feat")))?;
            save_features(&query, out.join(format!("ds{s}_query.feat")))?;
            save_features(&gallery, out.join(format!("ds{s}_gallery.feat")))?;
        }
        println!(
            "ds{s}: {} samples, {} identities",
            ds.len(),
            ds.num_persons()
        );
    }
    Ok(())
}

/// Hold epoch scaled from the preset to the requested epoch count.
fn scaled_hold(base: &LrSchedule, base_epochs: u32, epochs: u32) -> u32 {
    let hold = u64::from(base.hold_until) * u64::from(epochs) / u64::from(base_epochs.max(1));
    (hold as u32).min(epochs.max(2) - 1)
}

fn schedule_from(r: &Resolved) -> CliResult<LrSchedule> {
    LrSchedule::new(
        r.parse("lr0")?,
        r.parse("lr1")?,
        r.parse("lr_hold")?,
        r.parse("lr_end")?,
    )
    .map_err(|e| CliError::Usage(e.to_string()))
}

fn train_cmd(mut r: Resolved) -> CliResult {
    r.default("preset", "full");
    let base = match r.require("preset")? {
        "full" => TrainConfig::default(),
        "desk" => TrainConfig::desk_scale(),
        other => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };
    r.default("seed", base.seed);
    r.default("mode", base.mode);
    r.default("p", base.p);
    r.default("k", base.k);
    r.default("margin", margin_text(base.margin));
    r.default("reduction", reduction_text(base.reduction));
    r.default("epochs", base.epochs);
    let epochs: u32 = r.parse("epochs")?;
    r.default("lr0", base.schedule.lr0);
    r.default("lr1", base.schedule.lr1);
    r.default("lr_hold", scaled_hold(&base.schedule, base.epochs, epochs));
    r.default("lr_end", epochs.max(2));
    r.default("hidden_dim", base.hidden_dim);
    r.default("embedding_dim", base.embedding_dim);
    r.default("dropout_rate", base.dropout_rate);
    r.default("bn_momentum", base.bn_momentum);
    r.default("switch_policy", "round-robin");
    let cfg = TrainConfig {
        mode: r.with("mode", |s| {
            s.parse::<TrainMode>().map_err(|e| e.to_string())
        })?,
        p: r.parse("p")?,
        k: r.parse("k")?,
        margin: r.with("margin", parse_margin)?,
        reduction: r.with("reduction", parse_reduction)?,
        epochs,
        schedule: schedule_from(&r)?,
        hidden_dim: r.parse("hidden_dim")?,
        embedding_dim: r.parse("embedding_dim")?,
        dropout_rate: r.parse("dropout_rate")?,
        bn_momentum: r.parse("bn_momentum")?,
        switch_policy: r.with("switch_policy", |s| match s {
            "round-robin" => Ok(SwitchPolicy::RoundRobin),
            "proportional" => Ok(SwitchPolicy::Proportional),
            _ => Err("expected round-robin or proportional".to_string()),
        })?,
        seed: r.parse("seed")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let files: Vec<String> = r
        .require("data")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let out = prepare_out(&r, "train")?;
    let datasets = files
        .iter()
        .map(|f| load(f))
        .collect::<CliResult<Vec<_>>>()?;
    let (model, log) = train(&datasets, &cfg)?;
    save_checkpoint(&model, out.join("model.ckpt"))?;
    write_out(&out, "train_log.csv", &log.to_csv())?;
    write_out(&out, "train_epochs.csv", &log.epochs_csv())?;
    if let Some(last) = log.epochs.last() {
        println!(
            "trained {} epochs, final mean loss {:.6}",
            last.epoch, last.mean_loss
        );
    }
    Ok(())
}

fn mining_from(r: &mut Resolved) -> CliResult<(MiningConfig, CooccurrenceScope)> {
    let d = MiningConfig::default();
    r.default("alpha", d.alpha);
    r.default("negatives_per_pair", d.negatives_per_pair);
    r.default("selection", "greedy");
    r.default("cooccurrence", "both");
    let cfg = MiningConfig {
        alpha: r.parse("alpha")?,
        negatives_per_pair: r.parse("negatives_per_pair")?,
        selection: r.with("selection", parse_selection)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((cfg, r.with("cooccurrence", parse_scope)?))
}

fn write_mining(out: &Path, suffix: &str, report: &MiningReport) -> CliResult {
    write_out(
        out,
        &format!("pairs{suffix}.txt"),
        &reid_core::mining::pair_report(&report.sets),
    )?;
    write_out(out, &format!("purity{suffix}.txt"), &report.purity_text())?;
    let mut line = format!("mined {} pairs", report.num_pairs());
    if let Some(p) = report.mean_purity {
        let _ = write!(line, ", mean purity {p:.6}");
    }
    println!("{line}");
    Ok(())
}

fn finetune_cmd(mut r: Resolved) -> CliResult {
    r.default("preset", "full");
    let base = match r.require("preset")? {
        "full" => FinetuneConfig::default(),
        "desk" => FinetuneConfig::desk_scale(),
        other => return Err(CliError::Usage(format!("unknown preset `{other}`"))),
    };
    let (mining, scope) = mining_from(&mut r)?;
    r.default("seed", base.seed);
    r.default("p", base.p);
    r.default("k", base.k);
    r.default("epochs", base.epochs);
    let epochs: u32 = r.parse("epochs")?;
    let sched = base.effective_schedule();
    r.default("lr0", sched.lr0);
    r.default("lr1", sched.lr1);
    r.default("lr_hold", sched.hold_until.min(epochs.max(2) - 1));
    r.default("lr_end", epochs.max(2));
    r.default("margin", margin_text(base.margin));
    r.default("reduction", reduction_text(base.reduction));
    r.default("update_bn", base.update_bn_stats);
    let cfg = FinetuneConfig {
        mining,
        p: r.parse("p")?,
        k: r.parse("k")?,
        epochs,
        schedule: Some(schedule_from(&r)?),
        margin: r.with("margin", parse_margin)?,
        reduction: r.with("reduction", parse_reduction)?,
        update_bn_stats: r.with("update_bn", parse_bool)?,
        seed: r.parse("seed")?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model_path = r.path("model")?;
    let target_path = r.require("target")?.to_string();
    let stage2 = r.get("stage2_target").map(str::to_string);
    let out = prepare_out(&r, "finetune")?;
    let model = load_checkpoint(&model_path)?;
    let target = load(&target_path)?;
    let coocc = build_cooccurrence(&target, scope);
    let tuned = match stage2 {
        None => {
            let (tuned, report, log) = finetune(&model, &target, &coocc, &cfg)?;
            write_mining(&out, "", &report)?;
            write_out(&out, "finetune_log.csv", &log.to_csv())?;
            tuned
        }
        Some(path) => {
            let second = load(&path)?;
            let coocc2 = build_cooccurrence(&second, scope);
            let (tuned, [r1, r2]) =
                finetune_two_stage(&model, (&target, &coocc), (&second, &coocc2), &cfg, &cfg)?;
            write_mining(&out, "", &r1)?;
            write_mining(&out, "_stage2", &r2)?;
            tuned
        }
    };
    save_checkpoint(&tuned, out.join("model.ckpt"))?;
    Ok(())
}

fn eval_cmd(mut r: Resolved) -> CliResult {
    let d = ProtocolConfig::default();
    r.default("k_max", d.k_max);
    r.default("exclusion", "same-camera-same-id");
    r.default("tracklet_level", d.tracklet_level);
    let protocol = ProtocolConfig {
        k_max: r.parse("k_max")?,
        exclusion: r.with("exclusion", |s| match s {
            "same-camera-same-id" => Ok(Exclusion::SameCameraSameId),
            "none" => Ok(Exclusion::None),
            _ => Err("expected same-camera-same-id or none".to_string()),
        })?,
        tracklet_level: r.with("tracklet_level", parse_bool)?,
    };
    let model_path = r.path("model")?;
    let (query, gallery) = (
        r.require("query")?.to_string(),
        r.require("gallery")?.to_string(),
    );
    let out = if r.get("out").is_some() {
        Some(prepare_out(&r, "eval")?)
    } else {
        None
    };
    let model = load_checkpoint(&model_path)?;
    let report = evaluate_model(&model, &load(&query)?, &load(&gallery)?, &protocol)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = out {
        write_out(&out, "report.txt", &text)?;
        write_out(&out, "per_query.csv", &report.per_query_csv())?;
    }
    Ok(())
}

fn mine_cmd(mut r: Resolved) -> CliResult {
    let (mining, scope) = mining_from(&mut r)?;
    r.default("seed", 0);
    r.default("k", 4);
    let seed: u64 = r.parse("seed")?;
    let k: usize = r.parse("k")?;
    let model_path = r.path("model")?;
    let target_path = r.require("target")?.to_string();
    let out = prepare_out(&r, "mine")?;
    let model = load_checkpoint(&model_path)?;
    let target = load(&target_path)?;
    let coocc = build_cooccurrence(&target, scope);
    let report = mine_target(&model, &target, &coocc, &mining, k, seed)?;
    write_mining(&out, "", &report)
}

fn gradcheck_cmd(mut r: Resolved) -> CliResult {
    r.default("seed", 0);
    r.default("instances", 20);
    let seed: u64 = r.parse("seed")?;
    let instances: usize = r.parse("instances")?;
    let out = if r.get("out").is_some() {
        Some(prepare_out(&r, "gradcheck")?)
    } else {
        None
    };
    let suites = gradcheck::run_all(seed, instances)?;
    let mut text = String::new();
    for s in &suites {
        let _ = writeln!(
            text,
            "{} {} instances worst {:.3e} tol {:.0e} {}",
            s.name,
            s.instances,
            s.worst,
            s.tolerance,
            if s.passed() { "pass" } else { "FAIL" }
        );
    }
    print!("{text}");
    if let Some(out) = out {
        write_out(&out, "gradcheck.txt", &text)?;
    }
    let failed: Vec<&str> = suites
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}
