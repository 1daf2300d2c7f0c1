use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use stac_core::augment::{AugMode, ImageBuffer};
use stac_core::data::{
    gen_synthetic, labeled_indices, load_annotations, load_dataset, read_ppm, save_annotations, write_subset,
    AnnotatedImage, CocoFile, SynthConfig,
};
use stac_core::detector::{checkpoint, DetectorModel};
use stac_core::pipeline::{
    ablate_grid, ablate_unlabeled_size, evaluate_model, generate_pseudo_labels, loss_csv, par_map, predict_all,
    run_stac, train_student, train_teacher, LossRecord, PoolSize, TrainConfig,
};
use stac_core::pseudolabel::{filter_by_confidence, pooled_quality, read_pseudo_labels, write_pseudo_labels};
use stac_core::sslzoo::{ssl_demo, ConsistencyConfig, DemoConfig, Method};
use stac_core::{Error, Result};

use crate::run::{dataset_hash, io_err, sha256_file, RunDir};
use crate::settings::Settings;
use crate::{Command, Common, TrainFlags};

const QUALITY_IOU: f64 = 0.5;

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn settings(common: &Common, flags: &[(&str, Option<String>)]) -> Result<Settings> {
    let mut s = Settings::load(common.config.as_deref())?;
    let mut all = vec![("seed", opt(&common.seed))];
    all.extend_from_slice(flags);
    s.override_with(&common.sets, &all)?;
    Ok(s)
}

fn train_flags(t: &TrainFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("steps", opt(&t.steps)),
        ("lr", opt(&t.lr)),
        ("batch_size", opt(&t.batch_size)),
        ("aug_mode", t.aug_mode.clone()),
    ]
}

fn open_run(common: &Common, command: &str, s: &Settings) -> Result<RunDir> {
    if common.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    RunDir::create(&common.out, common.overwrite, command, common.config.as_deref(), s)
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, n } => gen_data(&common, n),
        Command::Split {
            common,
            data,
            fraction,
            fold,
        } => split(&common, &data, fraction, fold),
        Command::TrainTeacher {
            common,
            train,
            labeled,
            eval,
        } => train_teacher_cmd(&common, &train, &labeled, eval.as_deref()),
        Command::PseudoLabel {
            common,
            teacher,
            unlabeled,
            tau,
        } => pseudo_label(&common, &teacher, &unlabeled, tau),
        Command::TrainStudent {
            common,
            train,
            labeled,
            pseudo,
            lambda_u,
            teacher,
            eval,
        } => train_student_cmd(&common, &train, lambda_u, &labeled, &pseudo, teacher.as_deref(), eval.as_deref()),
        Command::Eval { common, model, data } => eval_cmd(&common, &model, &data),
        Command::Ablate {
            common,
            train,
            kind,
            labeled,
            unlabeled,
            teacher,
            eval,
            taus,
            lambda_us,
            pool,
            modes,
        } => {
            let mut flags = train_flags(&train);
            flags.extend([
                ("kind", kind),
                ("taus", taus),
                ("lambda_us", lambda_us),
                ("pool", pool),
                ("modes", modes),
            ]);
            let s = settings(&common, &flags)?;
            ablate(&common, s, &labeled, &unlabeled, &teacher, eval.as_deref())
        }
        Command::SslDemo { common, method } => ssl_demo_cmd(&common, method),
    }
}

// ---------------------------------------------------------------------------
// data

fn gen_data(common: &Common, n: Option<usize>) -> Result<()> {
    let s = settings(common, &[("n", opt(&n))])?;
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        width: s.get("width", d.width)?,
        height: s.get("height", d.height)?,
        classes: s.get("classes", d.classes)?,
        objects_per_image: (
            s.get("min_objects", d.objects_per_image.0)?,
            s.get("max_objects", d.objects_per_image.1)?,
        ),
        size_range: (s.get("min_size", d.size_range.0)?, s.get("max_size", d.size_range.1)?),
        exposure_range: (
            s.get("exposure_min", d.exposure_range.0)?,
            s.get("exposure_max", d.exposure_range.1)?,
        ),
    };
    cfg.validate()?;
    let n: usize = s.get("n", 500)?;
    let seed: u64 = s.get("seed", 0)?;
    let mut run = open_run(common, "gen-data", &s)?;
    let data = gen_synthetic(seed, n, &cfg)?;
    let ann = save_annotations(&data, &run.path, cfg.classes)?;
    let hash = dataset_hash(&ann)?;
    let boxes: usize = data.iter().map(|d| d.gt.len()).sum();
    println!("wrote {n} images with {boxes} boxes to {}", ann.display());
    println!("dataset_hash {hash}");
    run.record("annotations", &ann);
    run.record("dataset_hash", &hash);
    run.record("synth_config", &cfg);
    run.finish()
}

/// Load an annotation file with its images and class count.
fn load(path: &Path) -> Result<(Vec<AnnotatedImage>, usize)> {
    let classes = CocoFile::read(path)?.categories.len();
    let data = load_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no images", path.display())));
    }
    Ok((data, classes))
}

fn image_size(data: &[AnnotatedImage]) -> Result<(usize, usize)> {
    let (w, h) = (data[0].image.width(), data[0].image.height());
    if let Some(bad) = data.iter().find(|d| d.image.width() != w || d.image.height() != h) {
        return Err(Error::Data(format!(
            "image id {}: size {}x{} differs from {w}x{h}",
            bad.id,
            bad.image.width(),
            bad.image.height()
        )));
    }
    Ok((w, h))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    fs::canonicalize(p).map_err(|e| io_err(p, e))
}

fn split(common: &Common, data_path: &Path, fraction: Option<f64>, fold: Option<u64>) -> Result<()> {
    let s = settings(common, &[("fraction", opt(&fraction)), ("fold", opt(&fold))])?;
    let fraction: f64 = s.get("fraction", 0.05)?;
    let fold: u64 = s.get("fold", 0)?;
    let (data, classes) = load(data_path)?;
    let paths = load_annotations(data_path)?
        .iter()
        .map(|r| absolute(&r.path))
        .collect::<Result<Vec<_>>>()?;
    let chosen = labeled_indices(data.len(), fraction, fold)?;
    let mut is_labeled = vec![false; data.len()];
    chosen.iter().for_each(|&i| is_labeled[i] = true);
    let pick = |want: bool| -> (Vec<AnnotatedImage>, Vec<PathBuf>) {
        data.iter()
            .zip(&paths)
            .zip(&is_labeled)
            .filter(|(_, &l)| l == want)
            .map(|((d, p), _)| (d.clone(), p.clone()))
            .unzip()
    };
    let (lab, lab_paths) = pick(true);
    let (unl, unl_paths) = pick(false);
    let mut run = open_run(common, "split", &s)?;
    write_subset(&lab, &lab_paths, &run.join("labeled.json"), classes)?;
    write_subset(&unl, &unl_paths, &run.join("unlabeled.json"), classes)?;
    println!("labeled {} of {}, unlabeled {}", lab.len(), data.len(), unl.len());
    run.record("source", absolute(data_path)?);
    run.record("labeled", lab.len());
    run.record("unlabeled", unl.len());
    run.record("labeled_ids", lab.iter().map(|d| d.id).collect::<Vec<_>>());
    run.finish()
}

// ---------------------------------------------------------------------------
// training

fn write_training(run: &mut RunDir, name: &str, model: &DetectorModel, cfg: &TrainConfig, log: &[LossRecord]) -> Result<()> {
    run.write_json("config.json", &json!({ "train": cfg, "detector": model.config }))?;
    run.write_text("loss.csv", &loss_csv(log))?;
    let ckpt = run.join(&format!("checkpoints/{name}.ckpt"));
    fs::create_dir_all(run.join("checkpoints")).map_err(|e| io_err(&run.path, e))?;
    checkpoint::save(model, &ckpt, Some(name))?;
    if let Some(last) = log.last() {
        println!(
            "step {} l_s {:.4} l_u {:.4} total {:.4}",
            last.step, last.l_s, last.l_u, last.total
        );
    }
    println!("checkpoint {}", ckpt.display());
    run.record("checkpoint", &ckpt);
    run.record("checkpoint_sha256", sha256_file(&ckpt)?);
    Ok(())
}

fn write_eval(run: &mut RunDir, model: &DetectorModel, eval: Option<&Path>, nms: f64, jobs: usize) -> Result<()> {
    let Some(path) = eval else {
        return Ok(());
    };
    let (data, _) = load(path)?;
    let r = evaluate_model(model, &data, nms, jobs)?;
    let out = run.write_text("eval.json", &r.to_json())?;
    print!("{}", r.to_table());
    run.record("eval", &out);
    run.record("map", r.map);
    Ok(())
}

fn train_teacher_cmd(common: &Common, train: &TrainFlags, labeled: &Path, eval: Option<&Path>) -> Result<()> {
    let s = settings(common, &train_flags(train))?;
    let cfg = s.train_config()?;
    let (data, classes) = load(labeled)?;
    let (w, h) = image_size(&data)?;
    let model_cfg = s.detector_config(w, h, classes)?;
    let mut run = open_run(common, "train-teacher", &s)?;
    let (model, log) = train_teacher(&data, &model_cfg, &cfg)?;
    write_training(&mut run, "teacher", &model, &cfg, &log)?;
    write_eval(&mut run, &model, eval, cfg.nms_threshold, common.jobs)?;
    run.finish()
}

fn load_checkpoint(path: &Path) -> Result<(DetectorModel, String)> {
    let (model, _) = checkpoint::load(path)?;
    let tag = sha256_file(path)?[..16].to_string();
    Ok((model, tag))
}

fn pseudo_label(common: &Common, teacher: &Path, unlabeled: &Path, tau: Option<f64>) -> Result<()> {
    let s = settings(common, &[("tau", opt(&tau))])?;
    let cfg = s.train_config()?;
    let (model, tag) = load_checkpoint(teacher)?;
    let (data, classes) = load(unlabeled)?;
    let paths = load_annotations(unlabeled)?
        .iter()
        .map(|r| absolute(&r.path))
        .collect::<Result<Vec<_>>>()?;
    let mut run = open_run(common, "pseudo-label", &s)?;
    let images: Vec<(u64, &ImageBuffer)> = data.iter().map(|d| (d.id, &d.image)).collect();
    let sets = generate_pseudo_labels(&model, &images, cfg.tau, cfg.nms_threshold, &tag, common.jobs)?;
    let meta: Vec<(String, usize, usize)> = data
        .iter()
        .zip(&paths)
        .map(|(d, p)| (p.to_string_lossy().into_owned(), d.image.width(), d.image.height()))
        .collect();
    let out = run.join("pseudo_labels.json");
    write_pseudo_labels(&out, &sets, &meta, classes)?;
    let boxes: usize = sets.iter().map(|p| p.boxes.len()).sum();
    let (p, r) = pooled_quality(
        sets.iter().zip(&data).map(|(p, d)| (p.boxes.as_slice(), d.gt.as_slice())),
        QUALITY_IOU,
    );
    println!("{boxes} pseudo boxes on {} images at tau {}", sets.len(), cfg.tau);
    println!("against stored annotations: precision {p:.4} recall {r:.4}");
    run.record("pseudo_labels", &out);
    run.record("teacher_tag", &tag);
    run.record("boxes", boxes);
    run.finish()
}

fn train_student_cmd(
    common: &Common,
    train: &TrainFlags,
    lambda_u: Option<f64>,
    labeled: &Path,
    pseudo: &Path,
    teacher: Option<&Path>,
    eval: Option<&Path>,
) -> Result<()> {
    let mut flags = train_flags(train);
    flags.push(("lambda_u", opt(&lambda_u)));
    let s = settings(common, &flags)?;
    let mut cfg = s.train_config()?;
    let (data, classes) = load(labeled)?;
    let (records, sets) = read_pseudo_labels(pseudo)?;
    if let Some(first) = sets.first() {
        cfg.tau = first.tau;
    }
    let images = records.iter().map(|r| read_ppm(&r.path)).collect::<Result<Vec<_>>>()?;
    let model_cfg = match teacher {
        Some(t) => load_checkpoint(t)?.0.config,
        None => {
            let (w, h) = image_size(&data)?;
            s.detector_config(w, h, classes)?
        }
    };
    let mut run = open_run(common, "train-student", &s)?;
    let refs: Vec<&ImageBuffer> = images.iter().collect();
    let (model, log) = train_student(&data, &refs, &sets, &model_cfg, &cfg, None)?;
    write_training(&mut run, "student", &model, &cfg, &log)?;
    write_eval(&mut run, &model, eval, cfg.nms_threshold, common.jobs)?;
    run.finish()
}

fn eval_cmd(common: &Common, model: &Path, data: &Path) -> Result<()> {
    let s = settings(common, &[])?;
    let cfg = s.train_config()?;
    let (m, _) = load_checkpoint(model)?;
    let mut run = open_run(common, "eval", &s)?;
    write_eval(&mut run, &m, Some(data), cfg.nms_threshold, common.jobs)?;
    run.finish()
}

// ---------------------------------------------------------------------------
// ablations

fn need<'a>(p: Option<&'a Path>, kind: &str) -> Result<&'a Path> {
    p.ok_or_else(|| Error::Config(format!("ablate kind '{kind}' needs --eval")))
}

fn ablate(
    common: &Common,
    s: Settings,
    labeled: &Path,
    unlabeled: &Path,
    teacher_path: &Path,
    eval: Option<&Path>,
) -> Result<()> {
    let kind: String = s.get("kind", "grid".to_string())?;
    let cfg = s.train_config()?;
    let (lab, _) = load(labeled)?;
    let (unl, _) = load(unlabeled)?;
    let (teacher, _) = load_checkpoint(teacher_path)?;
    let unl_imgs: Vec<&ImageBuffer> = unl.iter().map(|d| &d.image).collect();
    let mut csv = String::new();
    let rel = format!("ablate_{kind}.csv");
    match kind.as_str() {
        "grid" => {
            let taus = s.get_list("taus", &[0.0, 0.3, 0.5, 0.7, 0.9])?;
            let lambdas = s.get_list("lambda_us", &[0.1, 0.5, 1.0, 2.0, 4.0])?;
            let (test, _) = load(need(eval, &kind)?)?;
            let mut run = open_run(common, "ablate", &s)?;
            let cells = ablate_grid(&lab, &unl_imgs, &teacher, &lambdas, &taus, &cfg, &test, common.jobs)?;
            csv.push_str("lambda_u,tau,map,ap50\n");
            for c in &cells {
                let _ = writeln!(csv, "{},{},{:.6},{:.6}", c.lambda_u, c.tau, c.map, c.ap50);
            }
            write_table(&mut run, &rel, &csv)?;
            run.finish()
        }
        "pool" => {
            let sizes: Vec<PoolSize> = s.get_list(
                "pool",
                &[
                    PoolSize::Times(1),
                    PoolSize::Times(2),
                    PoolSize::Times(4),
                    PoolSize::Times(8),
                    PoolSize::Full,
                ],
            )?;
            let (test, _) = load(need(eval, &kind)?)?;
            let mut run = open_run(common, "ablate", &s)?;
            let rows = ablate_unlabeled_size(&lab, &unl_imgs, &teacher, &sizes, &cfg, &test, common.jobs)?;
            csv.push_str("multiplier,pool_size,clamped,map,ap50\n");
            for r in &rows {
                if r.clamped {
                    eprintln!("warning: multiplier {} exceeds the pool; using all {} images", r.multiplier, r.pool_size);
                }
                let _ = writeln!(csv, "{},{},{},{:.6},{:.6}", r.multiplier, r.pool_size, r.clamped, r.map, r.ap50);
            }
            write_table(&mut run, &rel, &csv)?;
            run.finish()
        }
        "aug" => {
            let modes: Vec<AugMode> = s.get_list("modes", &AugMode::ALL)?;
            let (test, _) = load(need(eval, &kind)?)?;
            let mut run = open_run(common, "ablate", &s)?;
            let cells: Vec<(AugMode, bool)> = modes.iter().flat_map(|&m| [(m, false), (m, true)]).collect();
            let rows = par_map(&cells, common.jobs, |&(mode, stac)| {
                let c = TrainConfig { aug_mode: mode, ..cfg.clone() };
                let (model, _) = if stac {
                    run_stac(&lab, &unl_imgs, &teacher, &teacher.config, &c)?
                } else {
                    train_teacher(&lab, &teacher.config, &c)?
                };
                evaluate_model(&model, &test, c.nms_threshold, 1)
            })?;
            csv.push_str("mode,model,map,ap50\n");
            for ((mode, stac), r) in cells.iter().zip(&rows) {
                let model = if *stac { "stac" } else { "supervised" };
                let _ = writeln!(csv, "{mode},{model},{:.6},{:.6}", r.map, r.ap50);
            }
            write_table(&mut run, &rel, &csv)?;
            run.finish()
        }
        "quality" => {
            let taus = s.get_list("taus", &[0.0, 0.3, 0.5, 0.7, 0.9])?;
            let mut run = open_run(common, "ablate", &s)?;
            let dets = predict_all(&teacher, &unl_imgs, cfg.nms_threshold, common.jobs)?;
            csv.push_str("tau,precision,recall,boxes\n");
            for &tau in &taus {
                let sets: Vec<_> = dets
                    .iter()
                    .zip(&unl)
                    .map(|(d, u)| filter_by_confidence(u.id, "teacher", d, tau))
                    .collect();
                let (p, r) = pooled_quality(
                    sets.iter().zip(&unl).map(|(p, u)| (p.boxes.as_slice(), u.gt.as_slice())),
                    QUALITY_IOU,
                );
                let n: usize = sets.iter().map(|p| p.boxes.len()).sum();
                let _ = writeln!(csv, "{tau},{p:.6},{r:.6},{n}");
            }
            write_table(&mut run, &rel, &csv)?;
            run.finish()
        }
        other => Err(Error::Config(format!(
            "unknown ablate kind '{other}' (expected grid, pool, aug or quality)"
        ))),
    }
}

fn write_table(run: &mut RunDir, rel: &str, csv: &str) -> Result<()> {
    let path = run.write_text(rel, csv)?;
    print!("{csv}");
    run.record("table", &path);
    Ok(())
}

// ---------------------------------------------------------------------------
// ssl demo

fn ssl_demo_cmd(common: &Common, method: Option<String>) -> Result<()> {
    let s = settings(common, &[("method", method)])?;
    let d = DemoConfig::default();
    let demo = DemoConfig {
        labeled: s.get("labeled", d.labeled)?,
        unlabeled: s.get("unlabeled", d.unlabeled)?,
        test: d.test,
        steps: s.get("steps", d.steps)?,
        lr: s.get("lr", d.lr)?,
        lambda_u: s.get("lambda_u", d.lambda_u)?,
        seed: s.get("seed", d.seed)?,
    };
    let which: String = s.get("method", "all".to_string())?;
    let methods: Vec<Method> = if which == "all" {
        Method::ALL.to_vec()
    } else {
        which.split(',').map(str::parse).collect::<Result<_>>()?
    };
    let mut run = open_run(common, "ssl-demo", &s)?;
    let reports = par_map(&methods, common.jobs, |&m| ssl_demo(&ConsistencyConfig::for_method(m), &demo))?;
    let mut csv = String::from("method,supervised_accuracy,ssl_accuracy,final_unsup_loss\n");
    for r in &reports {
        let _ = writeln!(
            csv,
            "{},{:.4},{:.4},{:.6}",
            r.method, r.supervised_accuracy, r.ssl_accuracy, r.final_unsup_loss
        );
    }
    print!("{csv}");
    run.write_text("ssl_demo.csv", &csv)?;
    run.write_json("ssl_demo.json", &reports)?;
    run.record("demo", &demo);
    run.finish()
}
