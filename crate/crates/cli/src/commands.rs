use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use facade_core::config::RunConfig;
use facade_core::data::{
    generate_dataset, load_split, read_label_set, write_dataset, write_gray_png, write_label_png, write_rgb_png,
    LabelSet, LabeledSample, SceneParams,
};
use facade_core::detect::detections_to_jsonl;
use facade_core::eval::MetricsReport;
use facade_core::experiment::{rows_to_csv, transform_variants, Sweep, SweepSetup, DEFAULT_ALPHAS, DEFAULT_THRESHOLDS};
use facade_core::model::{evaluate_with, train as train_model, FacadeRcnn};
use facade_core::transconv::transform_kernel;
use facade_core::Tensor;

use crate::manifest::{input_hash, RunManifest};
use crate::{AblateArgs, DemoArgs, EvalArgs, Failure, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::io(path, e))
}

pub fn synth(a: &SynthArgs) -> CmdResult {
    let params = SceneParams {
        width: a.width,
        height: a.height,
        facades: a.facades,
        shear_range: a.shear_range,
        decay: a.decay,
        binary: a.binary,
        seed: a.seed,
        ..SceneParams::default()
    };
    params.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let config = format!("{}\ncount = {}", serde_json::to_string(&params).expect("params serialize"), a.count);
    RunManifest {
        command: "synth".into(),
        config: config.clone(),
        seed: a.seed,
        input_hash: input_hash(&[], &config)?,
        outputs: ["classes.txt", "images", "semantic", "instances", "splits"].map(PathBuf::from).to_vec(),
    }
    .write(&a.out)?;
    let scenes = generate_dataset(&params, a.count)?;
    let skipped: usize = scenes.iter().map(|s| s.skipped).sum();
    let samples: Vec<LabeledSample> = scenes.into_iter().map(|s| s.sample).collect();
    write_dataset(&a.out, &samples, &params.label_set())?;
    log::info!("wrote {} samples to {} ({skipped} instances skipped)", samples.len(), a.out.display());
    Ok(())
}

/// Config from `path` (or defaults adapted to `labels`) with overrides applied.
fn resolve_config(path: Option<&Path>, overrides: &[(String, String)], labels: &LabelSet) -> Result<RunConfig, Failure> {
    let cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Failure {
                    code: 2,
                    message: format!("missing config file {}", p.display()),
                },
                _ => Failure::io(p, e),
            })?;
            RunConfig::parse_with_overrides(&text, overrides)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?
        }
        None => {
            let mut base = RunConfig::default();
            base.adapt_to_labels(labels);
            RunConfig::parse_with_overrides(&base.to_text(), overrides)?
        }
    };
    if cfg.model.classes != labels.len() {
        return Err(Failure::usage(format!(
            "config has {} classes but the dataset defines {}",
            cfg.model.classes,
            labels.len()
        )));
    }
    Ok(cfg)
}

fn optional_split(root: &Path, name: &str) -> Result<Vec<LabeledSample>, Failure> {
    if root.join("splits").join(format!("{name}.txt")).exists() {
        Ok(load_split(root, name)?)
    } else {
        Ok(Vec::new())
    }
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    split: &'a str,
    samples: usize,
    /// `null` when the detection branch is disabled.
    threshold: Option<f64>,
    classes: &'a [String],
    /// Final output: fused when detections exist, semantic otherwise.
    metrics: &'a MetricsReport,
    semantic: &'a MetricsReport,
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let labels = read_label_set(&a.data)?;
    let cfg = resolve_config(a.config.as_deref(), &a.overrides, &labels)?;
    let checkpoint = a.out.join("model.bin");
    let log_path = a.out.join("train_log.jsonl");
    let metrics_path = a.out.join("metrics.json");
    let config_text = cfg.to_text();
    RunManifest {
        command: "train".into(),
        config: config_text.clone(),
        seed: cfg.model.seed,
        input_hash: input_hash(&[&a.data], &config_text)?,
        outputs: vec![
            checkpoint.clone(),
            facade_core::model::config_path(&checkpoint),
            log_path.clone(),
            metrics_path.clone(),
        ],
    }
    .write(&a.out)?;
    let train_set = load_split(&a.data, "train")?;
    if train_set.is_empty() {
        return Err(Failure::usage(format!("{}: the train split is empty", a.data.display())));
    }
    let test_set = optional_split(&a.data, "test")?;
    let eval_set = (!test_set.is_empty()).then_some(test_set.as_slice());
    let mut model = FacadeRcnn::new(cfg)?;
    let file = File::create(&log_path).map_err(|e| Failure::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut io_error = None;
    let result = train_model(&mut model, &train_set, eval_set, |rec| {
        let line = serde_json::to_string(rec).expect("epoch record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_error = Some(e);
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(Failure::io(&log_path, e));
    }
    result?;
    model.save(&checkpoint)?;
    let (split, samples) = if test_set.is_empty() { ("train", &train_set) } else { ("test", &test_set) };
    let summary_json = eval_summary(&model, samples, split, None, &labels, |_, _| Ok(()))?;
    write_text(&metrics_path, &(summary_json.clone() + "\n"))?;
    println!("{summary_json}");
    Ok(())
}

fn eval_summary(
    model: &FacadeRcnn,
    samples: &[LabeledSample],
    split: &str,
    threshold: Option<f64>,
    labels: &LabelSet,
    visit: impl FnMut(&LabeledSample, &facade_core::model::Prediction) -> facade_core::Result<()>,
) -> Result<String, Failure> {
    let t = threshold.unwrap_or(model.config().model.fuse_threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(Failure::usage(format!("fusion threshold {t} outside [0, 1]")));
    }
    let thresholds: Vec<f64> = if model.has_detection() { vec![t] } else { Vec::new() };
    let report = evaluate_with(model, samples, &thresholds, visit)?;
    Ok(to_json(&EvalSummary {
        split,
        samples: report.samples,
        threshold: model.has_detection().then_some(t),
        classes: &labels.names,
        metrics: report.at(t),
        semantic: &report.semantic,
    }))
}

fn overlay(sample: &LabeledSample, labels: &[u8], palette: &[[u8; 3]]) -> Vec<u8> {
    let rgb = sample.rgb();
    let mut out = vec![0u8; rgb.len()];
    for (p, &l) in labels.iter().enumerate() {
        let c = palette[l as usize];
        for k in 0..3 {
            out[p * 3 + k] = ((rgb[p * 3 + k] as u16 + c[k] as u16) / 2) as u8;
        }
    }
    out
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    let model = FacadeRcnn::load(&a.checkpoint)?;
    let labels = read_label_set(&a.data)?;
    if labels.len() != model.classes() {
        return Err(Failure::usage(format!(
            "checkpoint predicts {} classes but the dataset defines {}",
            model.classes(),
            labels.len()
        )));
    }
    let samples = load_split(&a.data, &a.split)?;
    let t = a.fuse_threshold.unwrap_or(model.config().model.fuse_threshold);
    let json = match &a.out {
        None => eval_summary(&model, &samples, &a.split, Some(t), &labels, |_, _| Ok(()))?,
        Some(out) => {
            let config_text = model.config().to_text();
            RunManifest {
                command: "eval".into(),
                config: config_text.clone(),
                seed: model.config().model.seed,
                input_hash: input_hash(&[&a.checkpoint, &a.data], &config_text)?,
                outputs: ["metrics.json", "detections.jsonl", "fused", "overlay"].map(|p| out.join(p)).to_vec(),
            }
            .write(out)?;
            for d in ["fused", "overlay"] {
                create_dir(&out.join(d))?;
            }
            let palette = labels.palette();
            let det_path = out.join("detections.jsonl");
            let mut dets = BufWriter::new(File::create(&det_path).map_err(|e| Failure::io(&det_path, e))?);
            let json = eval_summary(&model, &samples, &a.split, Some(t), &labels, |s, pred| {
                let fused = pred.fused(if model.has_detection() { t } else { 1.0 })?;
                write_label_png(&out.join("fused").join(format!("{}.png", s.id)), &fused.labels, &palette)?;
                let rgb = overlay(s, &fused.labels.labels, &palette);
                write_rgb_png(&out.join("overlay").join(format!("{}.png", s.id)), s.width(), s.height(), &rgb)?;
                writeln!(dets, "{}", detections_to_jsonl(&s.id, &pred.detections))
                    .map_err(|e| facade_core::Error::InvalidArgument(format!("{}: {e}", det_path.display())))
            })?;
            dets.flush().map_err(|e| Failure::io(&det_path, e))?;
            write_text(&out.join("metrics.json"), &(json.clone() + "\n"))?;
            json
        }
    };
    println!("{json}");
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CmdResult {
    let labels = read_label_set(&a.data)?;
    let base = resolve_config(a.config.as_deref(), &a.overrides, &labels)?;
    if a.sweep == Sweep::Transconv && !a.values.is_empty() {
        return Err(Failure::usage("--values applies to the alpha and threshold sweeps only"));
    }
    if let Some(out) = &a.out {
        let config_text = base.to_text();
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("ablation");
        let manifest = RunManifest {
            command: format!("ablate {:?}", a.sweep).to_lowercase(),
            config: config_text.clone(),
            seed: a.seeds.first().copied().unwrap_or(0),
            input_hash: input_hash(&[&a.data], &config_text)?,
            outputs: vec![out.clone()],
        };
        create_dir(dir)?;
        let path = dir.join(format!("{stem}.manifest.json"));
        write_text(&path, &(to_json(&manifest) + "\n"))?;
    }
    let train_set = load_split(&a.data, "train")?;
    let test_set = load_split(&a.data, "test")?;
    let setup = SweepSetup {
        base,
        seeds: a.seeds.clone(),
        train: &train_set,
        test: &test_set,
    };
    let values = |defaults: &[f64]| if a.values.is_empty() { defaults.to_vec() } else { a.values.clone() };
    let rows = match a.sweep {
        Sweep::Transconv => setup.transconv(&transform_variants())?,
        Sweep::Alpha => setup.alpha(&values(&DEFAULT_ALPHAS))?,
        Sweep::Threshold => setup.threshold(&values(&DEFAULT_THRESHOLDS))?,
    };
    let csv = rows_to_csv(&rows);
    match &a.out {
        Some(out) => write_text(out, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Asymmetric marker: a horizontal bar through the centre plus a stub above its right end.
pub fn marker_kernel(size: usize) -> Tensor {
    let c = size / 2;
    Tensor::from_fn(&[1, 1, size, size], |i| {
        let (r, col) = (i / size, i % size);
        if r == c && col > 0 && col + 1 < size {
            1.0
        } else if col == size - 2 && r < c && r + 2 >= c {
            0.6
        } else {
            0.0
        }
    })
}

fn kernel_png(path: &Path, k: &Tensor, peak: f64, scale: usize) -> CmdResult {
    let size = k.shape()[3];
    let side = size * scale;
    let mut gray = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            let v = k.data()[(y / scale) * size + x / scale] / peak;
            gray[y * side + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_gray_png(path, side, side, &gray).map_err(Failure::from)
}

#[derive(Serialize)]
struct KernelDump {
    name: String,
    phi: Option<f64>,
    flip: bool,
    values: Vec<Vec<f64>>,
}

fn rows_of(k: &Tensor) -> Vec<Vec<f64>> {
    k.data().chunks(k.shape()[3]).map(<[f64]>::to_vec).collect()
}

pub fn demo_kernels(a: &DemoArgs) -> CmdResult {
    if a.size % 2 == 0 || a.size < 3 || a.scale == 0 {
        return Err(Failure::usage("--size must be odd and at least 3, --scale positive"));
    }
    let base = marker_kernel(a.size);
    let mut kernels = vec![("base".to_string(), None, false, base.clone())];
    for &phi in &a.phi {
        for flip in [false, true] {
            let k = transform_kernel(&base, phi, flip).map_err(|e| Failure::usage(e.to_string()))?;
            kernels.push((format!("phi{phi}_m{}", flip as u8), Some(phi), flip, k));
        }
    }
    let config = format!("phi = {:?}\nsize = {}\nscale = {}", a.phi, a.size, a.scale);
    let mut outputs: Vec<PathBuf> = kernels.iter().map(|k| PathBuf::from(format!("{}.png", k.0))).collect();
    outputs.push("kernels.json".into());
    RunManifest {
        command: "demo-kernels".into(),
        config: config.clone(),
        seed: 0,
        input_hash: input_hash(&[], &config)?,
        outputs,
    }
    .write(&a.out)?;
    let peak = base.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut dump = Vec::new();
    for (name, phi, flip, k) in &kernels {
        kernel_png(&a.out.join(format!("{name}.png")), k, peak, a.scale)?;
        dump.push(KernelDump {
            name: name.clone(),
            phi: *phi,
            flip: *flip,
            values: rows_of(k),
        });
    }
    write_text(&a.out.join("kernels.json"), &(to_json(&dump) + "\n"))?;
    log::info!("wrote {} kernels to {}", kernels.len(), a.out.display());
    Ok(())
}
