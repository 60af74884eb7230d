use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mag_core::align::align_jsonl;
use mag_core::data::{generate_synthetic, load_dataset, save_dataset, MultimodalExample, SynthConfig};
use mag_core::encoder::{checkpoint, EncoderConfig, EncoderModel};
use mag_core::experiment::{layer_preference, run_sweep, to_tsv, Variant};
use mag_core::gradcheck::check_model;
use mag_core::results::{config_hash, result_path, sha256_hex, write_json};
use mag_core::train::{evaluate, train, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::failure::Failure;
use crate::settings::{GradcheckSettings, Settings};
use crate::{Command, Common, VERSION};

pub const RESULTS_ENV: &str = "MAG_RESULTS_DIR";

#[derive(Debug, Serialize)]
struct InputRecord {
    role: String,
    path: String,
    sha256: String,
}

/// Everything needed to re-run a subcommand; written before any output.
#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    config_path: Option<String>,
    seed: u64,
    output_dir: String,
    version: String,
    config_hash: String,
    settings: Settings,
    inputs: Vec<InputRecord>,
}

struct Run {
    dir: PathBuf,
    settings: Settings,
    seed: u64,
    hash: String,
}

fn results_root() -> PathBuf {
    std::env::var_os(RESULTS_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}

fn prepare(sub: &str, common: &Common, inputs: &[(&str, &Path)]) -> Result<Run, Failure> {
    let mut settings = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    settings.apply_pairs(&common.set)?;
    if let Some(s) = common.seed {
        settings.set("seed", &s.to_string())?;
    }
    let seed = settings.seed()?;
    validate_all(&settings)?;
    let mut records = Vec::new();
    for (role, path) in inputs {
        let bytes = fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
        records.push(InputRecord {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let hash = config_hash(&(sub, settings.entries(), &records))?;
    let dir = common
        .out_dir
        .clone()
        .unwrap_or_else(|| results_root().join(format!("{sub}-{hash}")));
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    let manifest = RunManifest {
        subcommand: sub.to_string(),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        seed,
        output_dir: dir.display().to_string(),
        version: VERSION.to_string(),
        config_hash: hash.clone(),
        settings: settings.clone(),
        inputs: records,
    };
    write_json(dir.join("manifest.json"), &manifest)?;
    Ok(Run {
        dir,
        settings,
        seed,
        hash,
    })
}

/// Check every section, so a bad key fails even in a subcommand that
/// ignores that section, and before anything is written.
fn validate_all(settings: &Settings) -> Result<(), Failure> {
    settings.section::<SynthConfig>("data")?.validate()?;
    settings.section::<EncoderConfig>("model")?.validate()?;
    settings.section::<TrainConfig>("train")?.validate()?;
    settings.section::<GradcheckSettings>("gradcheck")?;
    settings.test_examples()?;
    Ok(())
}

fn synth_config(run: &Run) -> Result<SynthConfig, Failure> {
    let mut cfg: SynthConfig = run.settings.section("data")?;
    cfg.seed = run.seed;
    Ok(cfg)
}

fn train_config(run: &Run) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = run.settings.section("train")?;
    cfg.seed = run.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(run: &Run) -> Result<EncoderConfig, Failure> {
    let cfg: EncoderConfig = run.settings.section("model")?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_dims(cfg: &EncoderConfig, data: &[MultimodalExample], what: &str) -> Result<(), Failure> {
    if let Some(ex) = data.first() {
        if ex.d_a() != cfg.d_a || ex.d_v() != cfg.d_v {
            return Err(Failure::Config(format!(
                "{what} has feature widths {}/{} but model.d_a/model.d_v are {}/{}",
                ex.d_a(),
                ex.d_v(),
                cfg.d_a,
                cfg.d_v
            )));
        }
    }
    Ok(())
}

/// Synthetic train/test pair drawn from one stream: the first
/// `data.n_examples` for training, the next `test_examples` for testing.
fn synthetic_split(run: &Run) -> Result<(Vec<MultimodalExample>, Vec<MultimodalExample>), Failure> {
    let mut cfg = synth_config(run)?;
    let n_train = cfg.n_examples;
    cfg.n_examples += run.settings.test_examples()?;
    let mut all = generate_synthetic(&cfg)?;
    let test = all.split_off(n_train);
    Ok((all, test))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

pub fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Align { common, input } => align(&common, &input),
        Command::Train { common, data, valid } => train_cmd(&common, &data, valid.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            data,
        } => eval(&common, &checkpoint, &data),
        Command::Gradcheck { common } => gradcheck(&common),
        Command::Ablate {
            common,
            train,
            test,
        } => ablate(&common, train.as_deref(), test.as_deref()),
    }
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let run = prepare("gen-data", common, &[])?;
    let (train, test) = synthetic_split(&run)?;
    let train_path = run.dir.join("data.jsonl");
    save_dataset(&train_path, &train)?;
    println!("{}\t{}", train_path.display(), train.len());
    if !test.is_empty() {
        let test_path = run.dir.join("test.jsonl");
        save_dataset(&test_path, &test)?;
        println!("{}\t{}", test_path.display(), test.len());
    }
    Ok(())
}

fn align(common: &Common, input: &Path) -> Result<(), Failure> {
    let run = prepare("align", common, &[("input", input)])?;
    let text = fs::read_to_string(input).map_err(|e| Failure::Io(format!("{}: {e}", input.display())))?;
    let records = align_jsonl(&text)?;
    let examples: Vec<MultimodalExample> = records.iter().map(|r| r.example.clone()).collect();
    let out = run.dir.join("data.jsonl");
    save_dataset(&out, &examples)?;
    let empty: Vec<_> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r.acoustic_empty.is_empty() && r.visual_empty.is_empty()))
        .map(|(i, r)| json!({"record": i, "acoustic": r.acoustic_empty, "visual": r.visual_empty}))
        .collect();
    write_json(
        run.dir.join("alignment.json"),
        &json!({"records": records.len(), "empty_spans": empty}),
    )?;
    println!("{}\t{}", out.display(), examples.len());
    Ok(())
}

fn train_cmd(common: &Common, data: &Path, valid: Option<&Path>) -> Result<(), Failure> {
    let mut inputs = vec![("data", data)];
    if let Some(v) = valid {
        inputs.push(("valid", v));
    }
    let run = prepare("train", common, &inputs)?;
    let mcfg = model_config(&run)?;
    let tcfg = train_config(&run)?;
    let train_data = load_dataset(data)?;
    check_dims(&mcfg, &train_data, "training data")?;
    let valid_data = valid.map(load_dataset).transpose()?;
    if let Some(v) = &valid_data {
        check_dims(&mcfg, v, "validation data")?;
    }
    let mut model = EncoderModel::new(mcfg, run.seed)?;
    let history = train(&mut model, &train_data, &tcfg, valid_data.as_deref())?;
    checkpoint::save(&model, run.dir.join("checkpoint.json"))?;
    write_json(run.dir.join("history.json"), &history)?;
    write_json(
        result_path(&run.dir, "train", &run.hash),
        &json!({
            "model": model.config(),
            "train": tcfg,
            "seed": run.seed,
            "history": history,
        }),
    )?;
    if let Some(last) = history.epochs.last() {
        println!("epochs\t{}\ttrain_loss\t{:.6}", last.epoch, last.train_loss);
    }
    println!("{}", run.dir.join("checkpoint.json").display());
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, data: &Path) -> Result<(), Failure> {
    let run = prepare("eval", common, &[("checkpoint", ckpt), ("data", data)])?;
    let model = checkpoint::load(ckpt)?;
    let examples = load_dataset(data)?;
    check_dims(model.config(), &examples, "evaluation data")?;
    let metrics = evaluate(&model, &examples)?;
    write_json(result_path(&run.dir, "eval", &run.hash), &metrics)?;
    println!("{}", serde_json::to_string(&metrics).expect("metrics serialize"));
    Ok(())
}

fn gradcheck(common: &Common) -> Result<(), Failure> {
    let run = prepare("gradcheck", common, &[])?;
    let mcfg = model_config(&run)?;
    let gc: GradcheckSettings = run.settings.section("gradcheck")?;
    let start = Instant::now();
    let result = check_model(&mcfg, run.seed, gc.tokens, gc.step, gc.kink_margin, gc.max_attempts)?;
    let elapsed = start.elapsed().as_secs_f64();
    let report = &result.report;
    println!("parameter\tcount\tmax_rel_error\tmax_abs_error");
    for e in &report.entries {
        println!("{}\t{}\t{:.3e}\t{:.3e}", e.name, e.count, e.max_rel_error, e.max_abs_error);
    }
    let total: usize = report.entries.iter().map(|e| e.count).sum();
    let max_rel = report.max_rel_error();
    println!("max\t{total}\t{max_rel:.3e}\t-");
    write_json(
        result_path(&run.dir, "gradcheck", &run.hash),
        &json!({
            "model": mcfg,
            "settings": gc,
            "sample_seed": result.seed,
            "rejected_samples": result.rejected,
            "kink_margin": report.kink_margin,
            "seconds": elapsed,
            "max_rel_error": max_rel,
            "entries": report.entries,
        }),
    )?;
    eprintln!("gradcheck: {total} scalars in {elapsed:.1}s, max relative error {max_rel:.3e}");
    if max_rel > gc.tolerance {
        return Err(Failure::CheckFailed(format!(
            "max relative error {max_rel:.3e} exceeds {:.1e}",
            gc.tolerance
        )));
    }
    Ok(())
}

fn ablate(common: &Common, train_path: Option<&Path>, test_path: Option<&Path>) -> Result<(), Failure> {
    let mut inputs = Vec::new();
    match (train_path, test_path) {
        (Some(a), Some(b)) => inputs.extend([("train", a), ("test", b)]),
        (None, None) => {}
        _ => return Err(Failure::Usage("--train and --test must be given together".into())),
    }
    let run = prepare("ablate", common, &inputs)?;
    let mcfg = model_config(&run)?;
    let tcfg = train_config(&run)?;
    let (train_data, test_data) = match (train_path, test_path) {
        (Some(a), Some(b)) => (load_dataset(a)?, load_dataset(b)?),
        _ => synthetic_split(&run)?,
    };
    check_dims(&mcfg, &train_data, "training data")?;
    check_dims(&mcfg, &test_data, "test data")?;
    let variants = Variant::sweep(mcfg.n_layers);
    let outcomes = run_sweep(&mcfg, &variants, run.seed, &tcfg, &train_data, &test_data)?;
    let tsv = to_tsv(&outcomes);
    write_text(&run.dir.join("ablation.tsv"), &tsv)?;
    let preference = layer_preference(&outcomes, mcfg.n_layers);
    write_json(
        result_path(&run.dir, "ablate", &run.hash),
        &json!({
            "model": mcfg,
            "train": tcfg,
            "seed": run.seed,
            "outcomes": outcomes,
            "layer_preference": preference,
        }),
    )?;
    print!("{tsv}");
    if let Some(p) = preference {
        eprintln!(
            "layer preference: early {:?} ba_excl_zero {:.4}, late {:?} ba_excl_zero {:.4}, early >= late: {}",
            p.early_layers, p.early_ba, p.late_layers, p.late_ba, p.early_at_least_late
        );
    }
    Ok(())
}
