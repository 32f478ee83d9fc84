use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use i2x_core::artifact::{read_run, record_training, validate, write_run, RunArchive, RunReader};
use i2x_core::datasets::{
    gen_glyphs, load_idx, sample_explanation_set, write_idx, GlyphSpec, LabeledDataset,
};
use i2x_core::density::HdbscanParams;
use i2x_core::explain::{explain, render_csv, render_dot, ExplainError, ExplainParams, SampleView};
use i2x_core::guidance::{
    compare_runs, curate_samples, run_experiment, CurationPlan, CurationSource, GuidanceError,
    Schedule,
};
use i2x_core::prototypes::{
    assign, exemplars, fit_prototypes, presence, prototype_name, stack_features, PrototypeBook,
    PrototypeConfig, PrototypeError,
};
use i2x_core::refnet::{
    evaluate, init_model, ConfusionMatrix, ModelSpec, ModelState, Optimizer, TrainHyper,
};
use i2x_core::trajectory::{
    analyze_run, ResponsibilityTrajectory, TrajectoryError, TrajectoryParams,
};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::args::*;
use crate::{user, Failure, Outcome};

pub const RUN_FILE: &str = "run.i2x";
pub const MODEL_FILE: &str = "model.i2xm";
pub const BOOK_FILE: &str = "prototypes.i2xp";
pub const TRAJECTORY_FILE: &str = "trajectory.i2xt";
pub const PLAN_FILE: &str = "plan.json";

pub fn dispatch(cli: &Cli) -> Outcome<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Prototypes(a) => prototypes(cli, a),
        Command::Analyze(a) => analyze(cli, a),
        Command::Explain(a) => explain_cmd(cli, a),
        Command::Curate(a) => curate(cli, a),
        Command::Finetune(a) => finetune(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Validate(a) => validate_cmd(cli, a),
        Command::Glyphs(a) => glyphs(cli, a),
    }
}

/// A directory argument resolves to the default file inside it.
fn resolve(path: &Path, default_name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    }
}

fn prepare_out(out: &Path) -> Outcome<()> {
    fs::create_dir_all(out)
        .map_err(|e| user("--out", format!("cannot create {}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text)
        .map_err(|e| Failure::Internal(anyhow::anyhow!("writing {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Echo of the parsed command line plus values resolved at run time.
fn write_config(out: &Path, cli: &Cli, resolved: Value) -> Outcome<()> {
    let mut config = Map::new();
    config.insert("i2x_version".into(), json!(env!("CARGO_PKG_VERSION")));
    config.insert("threads".into(), json!(cli.threads));
    config.insert("command".into(), serde_json::to_value(&cli.command)?);
    config.insert("resolved".into(), resolved);
    write_json(&out.join("config.json"), &config)
}

fn load_split(dir: &Path, prefix: &str, flag: &'static str) -> Outcome<LabeledDataset> {
    let find = |kind: &str, magic: &str| -> Outcome<PathBuf> {
        let base = dir.join(format!("{prefix}-{kind}-{magic}-ubyte"));
        let gz = PathBuf::from(format!("{}.gz", base.display()));
        if gz.exists() {
            Ok(gz)
        } else if base.exists() {
            Ok(base)
        } else {
            Err(user(
                flag,
                format!(
                    "{} has no {prefix} {kind} file ({}[.gz])",
                    dir.display(),
                    base.display()
                ),
            ))
        }
    };
    let images = find("images", "idx3")?;
    let labels = find("labels", "idx1")?;
    load_idx(&images, &labels).map_err(|e| user(flag, e))
}

fn open_run(path: &Path) -> Outcome<RunArchive> {
    let file = resolve(path, RUN_FILE);
    read_run(&file).map_err(|e| user("--artifacts", format!("{}: {e}", file.display())))
}

fn open_book(path: &Path) -> Outcome<PrototypeBook> {
    let file = resolve(path, BOOK_FILE);
    PrototypeBook::load(&file).map_err(|e| user("--protos", format!("{}: {e}", file.display())))
}

fn open_model(path: &Path) -> Outcome<ModelState> {
    let file = resolve(path, MODEL_FILE);
    ModelState::load(&file).map_err(|e| user("--artifacts", format!("{}: {e}", file.display())))
}

fn optimizer(o: OptimizerArg) -> Optimizer {
    match o {
        OptimizerArg::Adam => Optimizer::Adam,
        OptimizerArg::Sgd => Optimizer::Sgd,
    }
}

fn check_positive(flag: &'static str, value: f64) -> Outcome<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(user(
            flag,
            format!("must be a positive number, got {value}"),
        ))
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome<()> {
    check_positive("--lr", a.lr)?;
    if a.epochs == 0 {
        return Err(user("--epochs", "must be at least 1"));
    }
    if a.batch == 0 {
        return Err(user("--batch", "must be at least 1"));
    }
    if a.ckpt_every == 0 {
        return Err(user("--ckpt-every", "must be at least 1"));
    }
    let data = load_split(&a.data, "train", "--data")?;
    let explain_set = sample_explanation_set(&data, a.explain_fraction, a.explain_seed)
        .map_err(|e| user("--explain-fraction", e))?;
    let (h, w, c) = data.image_shape();
    let spec = ModelSpec::reference(h, w, c, data.class_count());
    spec.validate().map_err(|e| user("--data", e))?;
    prepare_out(&a.out)?;

    let hyper = TrainHyper {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        ckpt_every: a.ckpt_every,
        seed: a.seed,
        optimizer: optimizer(a.optimizer),
    };
    let mut provenance = Map::new();
    provenance.insert("train_dataset".into(), json!(data.id()));
    provenance.insert("train_samples".into(), json!(data.len()));
    provenance.insert("hyper".into(), serde_json::to_value(&hyper)?);
    provenance.insert("explain_fraction".into(), json!(a.explain_fraction));
    provenance.insert("explain_seed".into(), json!(a.explain_seed));
    info!(
        "training on {} samples ({} iterations), recording {} explanation samples",
        data.len(),
        hyper.total_iterations(data.len()),
        explain_set.len()
    );
    let model = init_model(&spec, a.seed)?;
    let (outcome, archive) = record_training(model, &data, &explain_set, &hyper, provenance)?;
    write_run(&archive, a.out.join(RUN_FILE))?;
    outcome.state.save(a.out.join(MODEL_FILE))?;
    let mut losses = String::from("iteration,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        let _ = writeln!(losses, "{},{l}", i + 1);
    }
    write_text(&a.out.join("losses.csv"), &losses)?;
    info!("checkpoints {:?}", archive.manifest.checkpoints);
    write_config(
        &a.out,
        cli,
        json!({
            "checkpoints": archive.manifest.checkpoints,
            "explain_samples": explain_set.len(),
            "model": spec,
        }),
    )
}

fn prototype_failure(e: PrototypeError) -> Failure {
    match e {
        PrototypeError::BadVarianceTarget(_) => user("--pca-var", e),
        PrototypeError::TooFewPoints { .. } => user("--k", e),
        PrototypeError::DegenerateData => user("--artifacts", e),
        other => Failure::Internal(other.into()),
    }
}

fn prototypes(cli: &Cli, a: &PrototypesArgs) -> Outcome<()> {
    if a.k == 0 {
        return Err(user("--k", "must be at least 1"));
    }
    if a.n_init == 0 {
        return Err(user("--n-init", "must be at least 1"));
    }
    let archive = open_run(&a.artifacts)?;
    prepare_out(&a.out)?;
    let shape = archive.manifest.feature_shape;
    let stacked = stack_features(&archive.features, shape.2).map_err(prototype_failure)?;
    let cfg = PrototypeConfig {
        k: a.k,
        variance_target: a.pca_var,
        seed: a.seed,
        n_init: a.n_init,
        ..Default::default()
    };
    info!(
        "clustering {} feature vectors of dimension {}",
        stacked.rows(),
        stacked.cols()
    );
    let book = fit_prototypes(&stacked, &cfg).map_err(prototype_failure)?;
    book.save(a.out.join(BOOK_FILE))?;
    let mut csv = String::from("prototype,sample_id,row,col,distance\n");
    for ex in exemplars(&archive.features, shape, &book)? {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            ex.prototype, archive.manifest.sample_ids[ex.sample_index], ex.row, ex.col, ex.distance
        );
    }
    write_text(&a.out.join("exemplars.csv"), &csv)?;
    info!(
        "K = {}, PCA dimension {}, inertia {:.4}",
        book.k(),
        book.pca.dim(),
        book.inertia
    );
    write_config(
        &a.out,
        cli,
        json!({ "prototype_config": cfg, "pca_dim": book.pca.dim() }),
    )
}

fn trajectory_failure(e: TrajectoryError) -> Failure {
    match e {
        TrajectoryError::Singular => user("--lambda", e),
        TrajectoryError::BadParam(ref m) if m.starts_with("sigma") => user("--sigma", e),
        TrajectoryError::BadParam(_) => user("--lambda", e),
        TrajectoryError::Prototype(PrototypeError::ShapeMismatch(_)) => user("--protos", e),
        other => Failure::Internal(other.into()),
    }
}

fn analyze(cli: &Cli, a: &AnalyzeArgs) -> Outcome<()> {
    if !(0.0..=1.0).contains(&a.sigma) {
        return Err(user(
            "--sigma",
            format!("must lie in [0, 1], got {}", a.sigma),
        ));
    }
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(user("--lambda", format!("must be >= 0, got {}", a.lambda)));
    }
    let archive = open_run(&a.artifacts)?;
    let book = open_book(&a.protos)?;
    let defaults = HdbscanParams::defaults_for(archive.manifest.sample_count());
    let hdbscan = HdbscanParams {
        min_samples: a.min_samples.unwrap_or(defaults.min_samples),
        min_cluster_size: a.min_cluster_size.unwrap_or(defaults.min_cluster_size),
    };
    if hdbscan.min_samples == 0 {
        return Err(user("--min-samples", "must be at least 1"));
    }
    if hdbscan.min_cluster_size < 2 {
        return Err(user("--min-cluster-size", "must be at least 2"));
    }
    prepare_out(&a.out)?;
    let params = TrajectoryParams {
        sigma: a.sigma,
        lambda: a.lambda,
        hdbscan: Some(hdbscan),
    };
    let traj = analyze_run(&archive, &book, &params).map_err(trajectory_failure)?;
    traj.save(a.out.join(TRAJECTORY_FILE))?;
    let mut csv = String::from("from,to,clusters,noise,empty\n");
    for t in &traj.transitions {
        let _ = writeln!(csv, "{},{},{},{},{}", t.from, t.to, t.q(), t.noise, t.empty);
    }
    write_text(&a.out.join("transitions.csv"), &csv)?;
    let empty = traj.transitions.iter().filter(|t| t.empty).count();
    info!(
        "{} transitions, {empty} without clusters",
        traj.transitions.len()
    );
    write_config(&a.out, cli, json!({ "params": params }))
}

fn explain_failure(e: ExplainError) -> Failure {
    match e {
        ExplainError::BadParam(ref m) if m.starts_with("eps_conf") => user("--eps-conf", e),
        ExplainError::BadParam(ref m) if m.starts_with("rho") => user("--rho", e),
        ExplainError::BadParam(ref m) if m.starts_with("subgroup_k") => user("--subgroup-k", e),
        ExplainError::EmptyClass(_) => user("--class", e),
        other => Failure::Internal(other.into()),
    }
}

fn explain_cmd(cli: &Cli, a: &ExplainArgs) -> Outcome<()> {
    let archive = open_run(&a.artifacts)?;
    let book = open_book(&a.protos)?;
    let traj_file = resolve(&a.trajectory, TRAJECTORY_FILE);
    let traj = ResponsibilityTrajectory::load(&traj_file)
        .map_err(|e| user("--trajectory", format!("{}: {e}", traj_file.display())))?;
    let man = &archive.manifest;
    if traj.k != book.k() || traj.sample_ids != man.sample_ids || traj.m != man.class_count {
        return Err(user(
            "--trajectory",
            "was not computed from these artifacts and prototypes",
        ));
    }
    let m = man.class_count;
    let classes: Vec<usize> = if a.classes.is_empty() {
        (0..m).collect()
    } else {
        a.classes.clone()
    };
    if let Some(&c) = classes.iter().find(|&&c| c >= m) {
        return Err(user(
            "--class",
            format!("class {c} does not exist ({m} classes)"),
        ));
    }
    if let Some((x, y)) = a.pair {
        if x >= m || y >= m {
            return Err(user("--pair", format!("classes must be below {m}")));
        }
    }
    if a.flip_min == 0 {
        return Err(user("--flip-min", "must be at least 1"));
    }
    let params = ExplainParams {
        eps_conf: a.eps_conf,
        rho: a.rho,
        flip_min: a.flip_min,
        subgroup_k: a.subgroup_k,
        seed: a.seed,
    };
    params.validate().map_err(explain_failure)?;
    prepare_out(&a.out)?;
    let assignments = assign(&archive.features, man.feature_shape, &book)?;
    let pres = presence(&assignments);
    let view = SampleView {
        labels: &man.labels,
        sample_ids: &man.sample_ids,
        presence: &pres,
    };
    let report = explain(&traj, view, &classes, a.pair, &params).map_err(explain_failure)?;
    let mut formats = a.format.clone();
    if formats.is_empty() {
        formats = vec![Format::Dot, Format::Json, Format::Csv];
    }
    formats.sort();
    formats.dedup();
    for f in &formats {
        match f {
            Format::Json => write_json(&a.out.join("report.json"), &report)?,
            Format::Dot => {
                for c in &report.classes {
                    write_text(
                        &a.out.join(format!("graph-class-{}.dot", c.class)),
                        &render_dot(&c.graph),
                    )?;
                }
            }
            Format::Csv => {
                for c in &report.classes {
                    write_text(
                        &a.out.join(format!("matrix-class-{}.csv", c.class)),
                        &render_csv(&c.matrix),
                    )?;
                }
                let mut csv = String::from("a,b,prototype,flip_count,supported\n");
                for u in &report.uncertain {
                    let _ = writeln!(
                        csv,
                        "{},{},{},{},{}",
                        u.pair.0,
                        u.pair.1,
                        prototype_name(u.prototype),
                        u.flip_count,
                        u.supported
                    );
                }
                write_text(&a.out.join("uncertain.csv"), &csv)?;
            }
        }
    }
    for u in &report.uncertain {
        info!(
            "uncertain {} for pair ({}, {}): {} flips{}",
            prototype_name(u.prototype),
            u.pair.0,
            u.pair.1,
            u.flip_count,
            if u.supported { ", supported" } else { "" }
        );
    }
    write_config(
        &a.out,
        cli,
        json!({ "classes": classes, "params": params, "formats": formats }),
    )
}

fn guidance_failure(e: GuidanceError) -> Failure {
    match e {
        GuidanceError::EmptyCuration => user("--uncertain", e),
        GuidanceError::BadPrototype(..) => user("--uncertain", e),
        GuidanceError::BadPair(..) => user("--pair", e),
        GuidanceError::UnknownSchedule(_) => user("--schedule", e),
        other => Failure::Internal(other.into()),
    }
}

fn curate(cli: &Cli, a: &CurateArgs) -> Outcome<()> {
    let archive = open_run(&a.artifacts)?;
    let book = open_book(&a.protos)?;
    let man = &archive.manifest;
    let assignments = assign(&archive.features, man.feature_shape, &book)?;
    let pres = presence(&assignments);
    let source = CurationSource {
        id: &man.dataset_id,
        labels: &man.labels,
        sample_ids: &man.sample_ids,
        class_count: man.class_count,
    };
    let plan =
        curate_samples(source, &pres, a.uncertain, book.k(), a.pair).map_err(guidance_failure)?;
    prepare_out(&a.out)?;
    write_json(&a.out.join(PLAN_FILE), &plan)?;
    info!(
        "excluding {} of {} samples containing {}",
        plan.excluded.len(),
        plan.source_count,
        prototype_name(plan.prototype)
    );
    write_config(
        &a.out,
        cli,
        json!({ "excluded": plan.excluded.len(), "retained": plan.retained }),
    )
}

fn finetune(cli: &Cli, a: &FinetuneArgs) -> Outcome<()> {
    check_positive("--finetune-lr", a.lr)?;
    if a.repeats == 0 {
        return Err(user("--repeats", "must be at least 1"));
    }
    if a.epochs == 0 {
        return Err(user("--epochs", "must be at least 1"));
    }
    if a.batch == 0 {
        return Err(user("--batch", "must be at least 1"));
    }
    let base = open_model(&a.artifacts)?;
    let run_file = resolve(&a.artifacts, RUN_FILE);
    let reader = RunReader::open(&run_file)
        .map_err(|e| user("--artifacts", format!("{}: {e}", run_file.display())))?;
    let manifest = reader.manifest().clone();
    let train = load_split(&a.data, "train", "--data")?;
    let test = load_split(&a.data, "t10k", "--data")?;
    let full = train
        .select_ids(&manifest.sample_ids, "explain-full")
        .map_err(|e| user("--data", e))?;
    if full.len() != manifest.sample_count() {
        return Err(user(
            "--data",
            "does not contain every explanation sample of the run",
        ));
    }
    let schedules: Vec<String> = if a.schedules.is_empty() {
        vec!["full".into(), "curated".into(), "curated,full".into()]
    } else {
        a.schedules.clone()
    };
    let curated = if schedules.iter().any(|s| s.contains("curated")) {
        let path = a
            .plan
            .as_ref()
            .ok_or_else(|| user("--plan", "curated schedules need a curation plan"))?;
        let file = resolve(path, PLAN_FILE);
        let text = fs::read_to_string(&file)
            .map_err(|e| user("--plan", format!("{}: {e}", file.display())))?;
        let plan: CurationPlan = serde_json::from_str(&text).map_err(|e| user("--plan", e))?;
        Some(plan.apply(&full).map_err(|e| user("--plan", e))?)
    } else {
        None
    };
    let base_cm = evaluate(&base, &test).map_err(|e| user("--data", e))?;
    let pair = match a.pair {
        Some(p) => p,
        None => base_cm
            .most_confused_pair()
            .ok_or_else(|| user("--pair", "model has fewer than two classes"))?,
    };
    prepare_out(&a.out)?;
    let named: Vec<Schedule<'_>> = schedules
        .iter()
        .map(|name| Schedule {
            name: name.clone(),
            stages: name
                .split(',')
                .map(|stage| {
                    if stage == "curated" {
                        curated.as_ref().expect("curated set")
                    } else {
                        &full
                    }
                })
                .collect(),
        })
        .collect();
    let hyper = TrainHyper {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        ckpt_every: u64::MAX,
        seed: a.seed,
        optimizer: optimizer(a.optimizer),
    };
    info!(
        "fine-tuning {} schedules x {} repeats on pair ({}, {}); base accuracy {:.2}%",
        named.len(),
        a.repeats,
        pair.0,
        pair.1,
        100.0 * base_cm.accuracy()
    );
    let stats = run_experiment(&base, &named, &hyper, a.repeats, a.seed, &test, pair)
        .map_err(guidance_failure)?;
    write_json(&a.out.join("stats.json"), &stats)?;
    write_text(&a.out.join("stats.csv"), &stats.to_csv())?;
    write_text(&a.out.join("stats.md"), &stats.to_markdown())?;
    if schedules.iter().any(|s| s == "full") {
        let comparisons = schedules
            .iter()
            .filter(|s| *s != "full")
            .map(|s| compare_runs(&stats, "full", s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(guidance_failure)?;
        write_json(&a.out.join("comparison.json"), &comparisons)?;
    }
    eprint!("{}", stats.to_markdown());
    write_config(
        &a.out,
        cli,
        json!({
            "schedules": schedules,
            "pair": pair,
            "base_accuracy": 100.0 * base_cm.accuracy(),
            "full_samples": full.len(),
            "curated_samples": curated.as_ref().map(|c| c.len()),
        }),
    )
}

fn confusion_csv(cm: &ConfusionMatrix) -> String {
    let m = cm.classes();
    let mut s = String::from("truth\\predicted");
    for c in 0..m {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for t in 0..m {
        let _ = write!(s, "{t}");
        for p in 0..m {
            let _ = write!(s, ",{}", cm.get(t, p));
        }
        s.push('\n');
    }
    s
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome<()> {
    let model = open_model(&a.artifacts)?;
    let test = load_split(&a.data, "t10k", "--data")?;
    let cm = evaluate(&model, &test).map_err(|e| user("--data", e))?;
    prepare_out(&a.out)?;
    write_text(&a.out.join("confusion.csv"), &confusion_csv(&cm))?;
    let metrics = json!({
        "samples": cm.total(),
        "accuracy": cm.accuracy(),
        "most_confused_pair": cm.most_confused_pair(),
    });
    write_json(&a.out.join("metrics.json"), &metrics)?;
    info!(
        "accuracy {:.2}% on {} samples",
        100.0 * cm.accuracy(),
        cm.total()
    );
    write_config(&a.out, cli, json!({}))
}

fn validate_cmd(cli: &Cli, a: &ValidateArgs) -> Outcome<()> {
    let file = resolve(&a.artifacts, RUN_FILE);
    let report = validate(&file);
    print!("{}", report.render());
    if let Some(out) = &a.out {
        prepare_out(out)?;
        write_json(&out.join("validation.json"), &report)?;
        write_config(out, cli, json!({ "file": file }))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(user(
            "--artifacts",
            format!("{} failed validation", file.display()),
        ))
    }
}

fn glyphs(cli: &Cli, a: &GlyphsArgs) -> Outcome<()> {
    let spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| user("--spec", format!("{}: {e}", path.display())))?;
            GlyphSpec::from_json(&text).map_err(|e| user("--spec", e))?
        }
        None => GlyphSpec::shared_stroke_demo(),
    };
    if a.per_class == 0 {
        return Err(user("--per-class", "must be at least 1"));
    }
    if a.test_per_class == 0 {
        return Err(user("--test-per-class", "must be at least 1"));
    }
    prepare_out(&a.out)?;
    let (train, truth) = gen_glyphs(&spec, a.per_class, a.seed).map_err(|e| user("--spec", e))?;
    let (test, _) = gen_glyphs(&spec, a.test_per_class, a.seed.wrapping_add(1))
        .map_err(|e| user("--spec", e))?;
    write_idx(
        &train,
        a.out.join("train-images-idx3-ubyte.gz"),
        a.out.join("train-labels-idx1-ubyte.gz"),
    )?;
    write_idx(
        &test,
        a.out.join("t10k-images-idx3-ubyte.gz"),
        a.out.join("t10k-labels-idx1-ubyte.gz"),
    )?;
    write_json(&a.out.join("spec.json"), &spec)?;
    write_json(&a.out.join("truth.json"), &truth)?;
    info!("{} training and {} test glyphs", train.len(), test.len());
    write_config(&a.out, cli, json!({ "test_seed": a.seed.wrapping_add(1) }))
}
