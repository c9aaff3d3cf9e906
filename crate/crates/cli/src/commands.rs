//! Subcommand implementations. Each resolves its configuration, writes the
//! resolved snapshot into its output directory, then calls into the library.

use std::path::{Path, PathBuf};

use sseg::config::KvConfig;
use sseg::data::manifest::{load_rgb, read_records};
use sseg::data::{load_labeled, load_pairs, read_class_list, write_dataset, ClassPalette, LabelMap, SynthConfig};
use sseg::evalmod::EvalReport;
use sseg::inference::{
    parse_legend, write_prediction, ClassVocabulary, Palette, PredictionFiles, Predictor, SegmentationMap,
    BACKGROUND_NAME,
};
use sseg::pseudomask::{backbone_from_spec, oracle_miou, PseudoMaskCache};
use sseg::segmodel::checkpoint::Checkpoint;
use sseg::selftrain::{
    generate_labels, label_class_names, load_label_set, train_student, Student, LABELS_MANIFEST, STUDENT_CHECKPOINT,
    STUDENT_KIND, STUDENT_LOG,
};
use sseg::train::{train, TrainConfig, CHECKPOINT_KIND};
use sseg::{Error, Result};

use crate::configs::{EvalConfig, InferConfig, PseudoConfig, SelfTrainConfig};
use crate::{Command, Common};

/// Name of the resolved configuration written into every output directory.
pub const SNAPSHOT: &str = "config.cfg";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Pseudomask(a) => pseudomask(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Selftrain(a) => selftrain(a),
    }
}

/// Applies `--config`, then `--set`, then the dedicated flags (`flags`, in order).
fn resolve<C: KvConfig>(mut config: C, common: &Common, flags: &[(&str, Option<String>)]) -> Result<C> {
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k.trim(), v.trim())?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            config.set(k, v)?;
        }
    }
    Ok(config)
}

fn write_snapshot(dir: &Path, name: &str, config: &dyn KvConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, config.to_kv_string()).map_err(|e| Error::io(&path, e))
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn synth(a: crate::SynthArgs) -> Result<()> {
    let config = resolve(
        SynthConfig::default(),
        &a.common,
        &[
            ("seed", s(&a.seed)),
            ("n_images", s(&a.n_images)),
            ("image_size", s(&a.image_size)),
            ("max_shapes", s(&a.max_shapes)),
        ],
    )?;
    let (pairs, labeled) = config.generate(&ClassPalette::default())?;
    write_dataset(&a.out, &pairs, &labeled)?;
    write_snapshot(&a.out, SNAPSHOT, &config)?;
    log::info!("wrote {} images to {}", pairs.len(), a.out.display());
    Ok(())
}

/// `(id, path)` for an image file, a directory of PNGs (sorted by name) or a JSONL manifest.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files.into_iter().map(|p| (stem(&p), p)));
        } else if input.extension().is_some_and(|x| x == "jsonl") {
            let base = input.parent().unwrap_or(Path::new("."));
            for rec in read_records(input)? {
                let (_, rec) = rec?;
                let p = Path::new(&rec.image);
                let p = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
                out.push((rec.resolved_id(), p));
            }
        } else {
            out.push((stem(input), input.clone()));
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some((dup, _)) = out.iter().find(|(id, _)| !seen.insert(id.clone())) {
        return Err(Error::Input(format!("image id `{dup}` appears twice")));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn background_of(names: &[String]) -> Option<usize> {
    names.iter().position(|n| n == BACKGROUND_NAME)
}

fn pseudomask(a: crate::PseudomaskArgs) -> Result<()> {
    let config = resolve(
        PseudoConfig::default(),
        &a.common,
        &[("k", s(&a.k)), ("backbone", a.backbone.clone()), ("seed", s(&a.seed))],
    )?;
    write_snapshot(&a.out_dir, SNAPSHOT, &config)?;
    let backbone = backbone_from_spec(&config.backbone, config.stride, config.position_weight)?;
    let cache = PseudoMaskCache::open(&a.out_dir, &backbone.id(), config.k, config.seed)?;
    let images = collect_images(std::slice::from_ref(&a.manifest))?;
    let mut failed = 0usize;
    for (id, path) in &images {
        let r = load_rgb(id, path).and_then(|img| cache.get_or_generate(id, &img, backbone.as_ref(), config.seed));
        if let Err(e) = r {
            log::warn!("skipping `{id}`: {e}");
            failed += 1;
        }
    }
    println!("pseudo-masks: {} written or cached, {failed} failed", images.len() - failed);
    if let Some(classes) = &a.oracle_classes {
        let names = read_class_list(classes)?;
        let labeled = load_labeled(&a.manifest, &names, background_of(&names))?;
        let mut scores = Vec::new();
        for gt in &labeled {
            if let Some(p) = cache.get(&gt.id)? {
                scores.push(oracle_miou(&p, gt)?);
            }
        }
        if scores.is_empty() {
            return Err(Error::Input("no labeled image has a pseudo-mask".into()));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("oracle mIoU over {} images: {mean:.4}", scores.len());
        let path = a.out_dir.join("oracle.json");
        let json = serde_json::json!({ "images": scores.len(), "mean_oracle_miou": mean, "k": config.k });
        std::fs::write(&path, json.to_string()).map_err(|e| Error::io(&path, e))?;
    }
    if failed > 0 {
        return Err(Error::Input(format!("{failed} images failed")));
    }
    Ok(())
}

fn train_cmd(a: crate::TrainArgs) -> Result<()> {
    let base = match a.preset.as_str() {
        "default" => TrainConfig::default(),
        "tiny" => TrainConfig::tiny(),
        other => return Err(Error::Config(format!("unknown preset `{other}` (default, tiny)"))),
    };
    let config = resolve(
        base,
        &a.common,
        &[
            ("seed", s(&a.seed)),
            ("epochs", s(&a.epochs)),
            ("batch_size", s(&a.batch_size)),
            ("base_lr", s(&a.lr)),
        ],
    )?;
    let pairs = load_pairs(&a.manifest)?.collect::<Result<Vec<_>>>()?;
    let outcome = train(config, &pairs, &a.out_dir, a.resume.as_deref())?;
    if let Some(last) = outcome.records.last() {
        println!("step {} {}", last.step, last.loss);
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    Ok(())
}

enum Segmenter {
    Open(Predictor),
    Student(Student),
}

fn load_segmenter(path: &Path) -> Result<Segmenter> {
    let ck = Checkpoint::load(path)?;
    match ck.kind() {
        CHECKPOINT_KIND => Ok(Segmenter::Open(Predictor::load(path)?)),
        STUDENT_KIND => Ok(Segmenter::Student(Student::load(path)?)),
        other => Err(Error::Checkpoint(format!("{}: unknown checkpoint kind `{other}`", path.display()))),
    }
}

fn infer(a: crate::InferArgs) -> Result<()> {
    let config = resolve(
        InferConfig::default(),
        &a.common,
        &[("tau", s(&a.tau)), ("template", a.template.clone())],
    )?;
    let images = collect_images(&a.image)?;
    let segmenter = load_segmenter(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_snapshot(&a.out, SNAPSHOT, &config)?;
    let mut failed = 0usize;
    match &segmenter {
        Segmenter::Open(p) => {
            let classes = a
                .classes
                .as_deref()
                .ok_or_else(|| Error::Input("--classes is required for open-vocabulary checkpoints".into()))?;
            let vocab = ClassVocabulary::parse_arg(classes, &config.template)?;
            let embs = p.encode_classes(&vocab)?;
            let palette = Palette::generate(vocab.len());
            for (id, path) in &images {
                let r = load_rgb(id, path)
                    .and_then(|img| p.predict(&img, &vocab, &embs, config.tau))
                    .and_then(|seg| write_prediction(&seg, &palette, &PredictionFiles::for_stem(&a.out, id)));
                if let Err(e) = r {
                    log::warn!("skipping `{id}`: {e}");
                    failed += 1;
                }
            }
        }
        Segmenter::Student(st) => {
            if a.classes.is_some() {
                log::warn!("--classes ignored: a student predicts its own closed class list");
            }
            // With no threshold the student argmax is restricted to foreground classes.
            let foreground_only = config.tau.is_none();
            let n = st.class_names.len();
            let palette = Palette::generate(n);
            for (id, path) in &images {
                let r = load_rgb(id, path)
                    .and_then(|img| st.predict(&img, foreground_only))
                    .and_then(|seg| write_prediction(&seg, &palette, &PredictionFiles::for_stem(&a.out, id)));
                if let Err(e) = r {
                    log::warn!("skipping `{id}`: {e}");
                    failed += 1;
                }
            }
        }
    }
    println!("predictions: {} written, {failed} failed", images.len() - failed);
    if failed > 0 {
        return Err(Error::Input(format!("{failed} images failed")));
    }
    Ok(())
}

/// Rebuilds a prediction from its label PNG and legend.
pub fn read_prediction(dir: &Path, id: &str) -> Result<SegmentationMap> {
    let files = PredictionFiles::for_stem(dir, id);
    let labels = LabelMap::load_png(&files.labels)?;
    let text = std::fs::read_to_string(&files.legend).map_err(|e| Error::io(&files.legend, e))?;
    let mut entries = parse_legend(&text)?;
    entries.sort_by_key(|e| e.0);
    if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
        return Err(Error::Input(format!("{}: legend indices are not 0..n", files.legend.display())));
    }
    // `render` writes background as the last line, after the class entries.
    let background = (entries.len() >= 2 && text.lines().filter(|l| !l.trim().is_empty()).last().is_some_and(|l| {
        l.split('\t').nth(1) == Some(BACKGROUND_NAME)
    }))
    .then(|| entries.len() - 1);
    let names: Vec<String> = entries
        .iter()
        .filter(|e| Some(e.0) != background)
        .map(|e| e.1.clone())
        .collect();
    SegmentationMap::new(labels, ClassVocabulary::new(names, "{}")?, background)
}

fn eval(a: crate::EvalArgs) -> Result<()> {
    let config = resolve(EvalConfig::default(), &a.common, &[("protocol", a.protocol.clone())])?;
    let manifest = if a.gt.is_dir() { a.gt.join("manifest.jsonl") } else { a.gt.clone() };
    let classes_path = manifest.parent().unwrap_or(Path::new(".")).join("classes.txt");
    let names = read_class_list(&classes_path)?;
    let gts = load_labeled(&manifest, &names, background_of(&names))?;
    let tau = read_tau(&a.pred);
    let mut report = EvalReport::new(names.clone(), background_of(&names), config.protocol, tau)?;
    for gt in &gts {
        let pred = read_prediction(&a.pred, &gt.id).map_err(|e| Error::Record {
            id: gt.id.clone(),
            message: e.to_string(),
        })?;
        report.accumulate(&pred, gt)?;
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.pred.clone());
    let stem = format!("eval_{}", config.protocol);
    write_snapshot(&out_dir, &format!("{stem}.cfg"), &config)?;
    let miou = report.miou()?;
    let json = serde_json::json!({
        "protocol": config.protocol.to_string(),
        "tau": tau,
        "miou": miou,
        "pixel_accuracy": report.pixel_accuracy(),
        "per_class_iou": names.iter().zip(report.iou_per_class()).map(|(n, v)| (n.clone(), v)).collect::<Vec<_>>(),
        "report": report,
    });
    let json_path = out_dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&json).expect("report serializes"))
        .map_err(|e| Error::io(&json_path, e))?;
    let table = report.to_table();
    let txt_path = out_dir.join(format!("{stem}.txt"));
    std::fs::write(&txt_path, &table).map_err(|e| Error::io(&txt_path, e))?;
    print!("{table}");
    Ok(())
}

/// Threshold recorded by `infer` in the prediction directory, if any.
fn read_tau(pred_dir: &Path) -> Option<f64> {
    let mut c = InferConfig::default();
    c.apply_file(&pred_dir.join(SNAPSHOT)).ok()?;
    c.tau
}

fn selftrain(a: crate::SelftrainArgs) -> Result<()> {
    let config = resolve(
        SelfTrainConfig::default(),
        &a.common,
        &[
            ("tau", s(&a.tau)),
            ("student.seed", s(&a.seed)),
            ("student.epochs", s(&a.epochs)),
        ],
    )?;
    config.student.validate()?;
    write_snapshot(&a.out_dir, SNAPSHOT, &config)?;
    let teacher = Predictor::load(&a.checkpoint)?;
    let vocab = ClassVocabulary::parse_arg(&a.classes, &config.template)?;
    let images = collect_images(&a.images)?;
    let summary = generate_labels(&teacher, &images, &vocab, config.tau, &a.out_dir)?;
    println!("pseudo-labels: {} written, {} failed", summary.written, summary.failures.len());
    let (samples, names) = load_label_set(&a.out_dir.join(LABELS_MANIFEST))?;
    debug_assert_eq!(names, label_class_names(&vocab));
    let background = Some(names.len() - 1);
    let (student, log) = train_student(&samples, names, background, config.student.clone())?;
    let ck = a.out_dir.join(STUDENT_CHECKPOINT);
    student.save(&ck)?;
    let log_path = a.out_dir.join(STUDENT_LOG);
    let text: String = log
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect();
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    println!("student: {}", ck.display());
    Ok(())
}
