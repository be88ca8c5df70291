use std::fs;
use std::path::{Path, PathBuf};

use pdml::data::{
    load_cube, load_labels, save_cube, save_labels, stratified_split, synth_cube, DatasetSplit,
    HsiCube, LabelMap, PatchBatch, SynthSpec,
};
use pdml::grad::{finite_diff_check, Checkpoint};
use pdml::metrics::{default_palette, dump_embeddings, evaluate, predict_raster, render_map};
use pdml::model::EmbeddingModel;
use pdml::rng::rng_from_seed;
use pdml::train::{history_jsonl, model_from_checkpoint, PdmlObjective, TrainConfig};
use pdml::{Checkpoint64, ParamStore64, PdmlError, Trainer64};
use serde_json::json;

use crate::config::{env_seed, RunConfig};
use crate::CliError;

type Outcome = Result<u8, CliError>;

fn at(path: &Path) -> impl FnOnce(PdmlError) -> CliError + '_ {
    move |e| {
        let mapped = CliError::from(e);
        match mapped {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serializes")
    );
}

fn standardized(cube: HsiCube) -> Result<HsiCube, CliError> {
    if cube.is_standardized() {
        Ok(cube)
    } else {
        Ok(cube.standardize()?)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn synth(
    out: &Path,
    classes: u16,
    (height, width): (usize, usize),
    bands: usize,
    seed: Option<u64>,
    mixing: f64,
    noise: f64,
    grid: Option<(usize, usize)>,
) -> Outcome {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut spec = SynthSpec::new(classes, height, width, bands, seed);
    spec.mixing = mixing;
    spec.noise = noise;
    if let Some((rows, cols)) = grid {
        spec.grid_rows = rows;
        spec.grid_cols = cols;
    }
    let (cube, labels) = synth_cube(&spec)?;
    create_dir(out)?;
    let (cube_path, labels_path, spec_path) = (
        out.join("cube.hsc"),
        out.join("labels.hsl"),
        out.join("synth.json"),
    );
    save_cube(&cube, &cube_path).map_err(at(&cube_path))?;
    save_labels(&labels, &labels_path).map_err(at(&labels_path))?;
    write(
        &spec_path,
        serde_json::to_string_pretty(&spec).expect("spec serializes"),
    )?;
    eprintln!(
        "synthetic cube {height}x{width}x{bands}, {classes} classes, grid {}x{}",
        spec.grid_rows, spec.grid_cols
    );
    print_json(&json!({
        "cube": cube_path,
        "labels": labels_path,
        "spec": spec,
    }));
    Ok(0)
}

fn required(
    flag: Option<PathBuf>,
    file: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| file.clone())
        .ok_or_else(|| CliError::Usage(format!("--{name} is required (flag or config key)")))
}

fn load_pair(cube: &Path, labels: &Path) -> Result<(HsiCube, LabelMap), CliError> {
    let cube = standardized(load_cube(cube).map_err(at(cube))?)?;
    let labels = load_labels(labels).map_err(at(labels))?;
    if !labels.matches(&cube) {
        return Err(CliError::Usage("cube and label map sizes differ".into()));
    }
    Ok((cube, labels))
}

pub fn train(
    cube: Option<PathBuf>,
    labels: Option<PathBuf>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    resume: Option<PathBuf>,
) -> Outcome {
    let mut run = match &config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    run.resolve_seed(seed)?;
    let cube_path = required(cube, &run.cube, "cube")?;
    let labels_path = required(labels, &run.labels, "labels")?;
    let out = required(out, &run.out, "out")?;
    let (cube, labels) = load_pair(&cube_path, &labels_path)?;

    let split = stratified_split(&labels, run.split, run.seed)?;
    let mut trainer = match &resume {
        Some(path) => {
            let ck = Checkpoint::load(path).map_err(at(path))?;
            let trainer = Trainer64::from_checkpoint(&ck)?;
            eprintln!("resuming after epoch {}", trainer.epochs_done());
            trainer
        }
        None => Trainer64::new(run.train_config(cube.bands(), labels.classes() as usize))?,
    };
    let cfg: TrainConfig = trainer.config().clone();
    eprintln!(
        "training on {} pixels ({} val, {} test), {} epochs",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        cfg.epochs
    );
    while trainer.epochs_done() < cfg.epochs {
        let record = trainer.run_epoch(&cube, &labels, &split)?;
        match record.val_oa {
            Some(oa) => eprintln!(
                "epoch {:>4}  loss {:.6}  val OA {:.4}",
                record.epoch, record.train_loss, oa
            ),
            None => eprintln!("epoch {:>4}  loss {:.6}", record.epoch, record.train_loss),
        }
    }

    create_dir(&out)?;
    let mut model = trainer.model_checkpoint()?;
    model.meta["split"] = serde_json::to_value(&split).expect("split serializes");
    let paths = [
        out.join("model.pdc"),
        out.join("state.pdc"),
        out.join("history.jsonl"),
        out.join("split.json"),
        out.join("config.json"),
    ];
    model.save(&paths[0]).map_err(at(&paths[0]))?;
    trainer
        .checkpoint()?
        .save(&paths[1])
        .map_err(at(&paths[1]))?;
    write(&paths[2], history_jsonl(trainer.history()))?;
    write(
        &paths[3],
        serde_json::to_string_pretty(&split).expect("split serializes"),
    )?;
    write(
        &paths[4],
        serde_json::to_string_pretty(&cfg).expect("config serializes"),
    )?;

    let last = trainer.history().last().expect("at least one epoch");
    let best = trainer
        .history()
        .iter()
        .filter_map(|r| r.val_oa)
        .fold(None, |b: Option<f64>, x| Some(b.map_or(x, |b| b.max(x))));
    print_json(&json!({
        "out": out,
        "epochs": trainer.epochs_done(),
        "final_train_loss": last.train_loss,
        "best_val_oa": best,
        "seed": cfg.seed,
    }));
    Ok(0)
}

fn load_model(path: &Path) -> Result<(Checkpoint64, EmbeddingModel), CliError> {
    let ck: Checkpoint64 = Checkpoint::load(path).map_err(at(path))?;
    let (model, _) = model_from_checkpoint(&ck).map_err(at(path))?;
    Ok((ck, model))
}

pub fn eval(
    checkpoint: &Path,
    cube: &Path,
    labels: &Path,
    test: bool,
    split_file: Option<&Path>,
    embeddings: Option<&Path>,
) -> Outcome {
    let (ck, model) = load_model(checkpoint)?;
    let split: DatasetSplit = match split_file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => serde_json::from_value(ck.meta.get("split").cloned().ok_or_else(|| {
            CliError::Usage("checkpoint carries no split record; pass --split-file".into())
        })?)
        .map_err(|e| CliError::Io(format!("{}: bad split record: {e}", checkpoint.display())))?,
    };
    let (cube, labels) = load_pair(cube, labels)?;
    let (name, coords) = if test {
        ("test", &split.test)
    } else {
        ("val", &split.val)
    };
    let (matrix, metrics) = evaluate(&model, &ck.params, &cube, &labels, coords)?;
    eprintln!("{name}: {} pixels", coords.len());
    eprintln!(
        "  OA    {:.4}\n  AA    {:.4}\n  kappa {:.4}",
        metrics.oa, metrics.aa, metrics.kappa
    );
    for (k, acc) in metrics.per_class.iter().enumerate() {
        match acc {
            Some(a) => eprintln!("  class {:>3}  {:.4}", k + 1, a),
            None => eprintln!("  class {:>3}  -", k + 1),
        }
    }
    if let Some(path) = embeddings {
        dump_embeddings(&model, &ck.params, &cube, &labels, coords, path).map_err(at(path))?;
    }
    print_json(&json!({
        "split": name,
        "pixels": coords.len(),
        "oa": metrics.oa,
        "aa": metrics.aa,
        "kappa": metrics.kappa,
        "per_class": metrics.per_class,
        "confusion": matrix.rows(),
    }));
    Ok(0)
}

pub fn predict_map(checkpoint: &Path, cube: &Path, out: &Path) -> Outcome {
    let (ck, model) = load_model(checkpoint)?;
    let cube = standardized(load_cube(cube).map_err(at(cube))?)?;
    let classes = predict_raster(&model, &ck.params, &cube)?;
    let palette = default_palette(model.config().classes + 1);
    let image = render_map(&classes, cube.height(), cube.width(), &palette)?;
    write(out, image)?;
    print_json(&json!({
        "out": out,
        "height": cube.height(),
        "width": cube.width(),
    }));
    Ok(0)
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(config: Option<&Path>, eps: f64, coords: usize, seed: Option<u64>) -> Outcome {
    let mut run = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    run.resolve_seed(seed)?;
    if !(eps > 0.0) {
        return Err(CliError::Usage(format!("--eps must be > 0, got {eps}")));
    }
    let (raw, labels) = synth_cube(&SynthSpec::new(4, 16, 16, 8, run.seed))?;
    let cube = raw.standardize()?;
    // two patches with different center classes
    let all = labels.labeled_coords();
    let first = all[0];
    let other = *all
        .iter()
        .find(|&&(r, c)| labels.get(r, c) != labels.get(first.0, first.1))
        .expect("synthetic cube has several classes");
    let batch = PatchBatch::<f64>::from_coords(&cube, Some(&labels), &[first, other], run.patch)?;
    let model = EmbeddingModel::new(run.backbone(8, 4))?;
    let params: ParamStore64 = model.init_params(run.seed);
    let loss = run.loss();
    loss.validate()?;
    let lap = pdml::data::lap_index(run.patch)?;
    let objective = PdmlObjective {
        model: &model,
        batch: &batch,
        lap: &lap,
        loss: &loss,
    };
    let report = finite_diff_check(
        &objective,
        &params,
        &rng_from_seed(run.seed),
        eps,
        coords,
        run.seed,
    )?;
    for t in &report.tags {
        eprintln!(
            "{:<15} {:>5} coords ({} skipped at kinks)  max rel error {:.3e}",
            t.tag.as_str(),
            t.checked,
            t.skipped,
            t.max_rel_error
        );
    }
    let pass = report.passes(GRADCHECK_TOLERANCE);
    eprintln!(
        "{}",
        if pass {
            "gradient check passed"
        } else {
            "gradient check FAILED"
        }
    );
    print_json(&json!({
        "report": report,
        "tolerance": GRADCHECK_TOLERANCE,
        "pass": pass,
    }));
    Ok(if pass { 0 } else { 4 })
}
