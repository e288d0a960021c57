use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use gt360_core::data::synthetic::gaze_dataset;
use gt360_core::data::{
    convert, ec_distance, label_ec_mpii, load_unified, sample_eyediap_frames, write_manifest,
    Gaze3dRecord, LoadOptions, SampleLabel,
};
use gt360_core::detect::DetectorHandle;
use gt360_core::eval::{evaluate_suite, pair_records, save_heatmap, PredictionRecord};
use gt360_core::eyecontact::{EcModel, EyeContactScorer};
use gt360_core::gazenet::GazeModel;
use gt360_core::pipeline::{render_overlay, Gt360System};
use gt360_core::train::{run_stage, ImageSource, Stage, TrainItem};
use gt360_core::{FrameImage, GazeVerdict};
use toml::Value;

use crate::config::{resolve, CliConfig, Layers};
use crate::{Cli, Command, DataCommand, EvalArgs, InferArgs, TrainArgs};

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

/// Flag values that override configuration keys.
pub fn flag_overrides(cli: &Cli) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    if let Some(seed) = cli.seed {
        // TOML integers are i64; larger seeds wrap to the same bit pattern
        out.push(("seed".into(), Value::Integer(seed as i64)));
    }
    if let Command::Infer(a) = &cli.command {
        if let Some(s) = a.sigma {
            out.push(("pipeline.sigma".into(), Value::Float(s)));
        }
        if let Some(p) = &a.ec_weights {
            out.push(("models.ec_weights".into(), path_value(p)));
        }
        if let Some(p) = &a.gaze_weights {
            out.push(("models.gaze_weights".into(), path_value(p)));
        }
        if let Some(p) = &a.detections {
            out.push(("detector.sidecar".into(), path_value(p)));
        }
    }
    out
}

pub fn load_config(cli: &Cli) -> Result<CliConfig> {
    let layers = Layers::from_process(cli.config.as_deref(), flag_overrides(cli))?;
    resolve(&layers)
}

pub fn dispatch(cli: &Cli, cfg: &CliConfig) -> Result<()> {
    match &cli.command {
        Command::Infer(a) => infer(a, cfg),
        Command::Train(a) => train(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Data(d) => data(d, cfg.seed),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

/// Builds the inference system from configuration.
pub fn build_system(cfg: &CliConfig) -> Result<Gt360System> {
    let detector = DetectorHandle::from_config(&cfg.detector)?;
    let mut ec = EcModel::new(cfg.models.ec.clone(), cfg.seed)?;
    match &cfg.models.ec_weights {
        Some(p) => ec
            .load_weights(p)
            .with_context(|| format!("loading eye-contact weights {}", p.display()))?,
        None => log::warn!("no eye-contact weights given; using the untrained stand-in"),
    }
    let gaze = match &cfg.models.gaze_weights {
        Some(dir) => GazeModel::load(dir)
            .with_context(|| format!("loading gaze checkpoint {}", dir.display()))?,
        None => {
            log::warn!("no gaze checkpoint given; using a freshly initialized decoder");
            GazeModel::new(cfg.models.gazenet.clone(), cfg.seed)?
        }
    };
    let mut pipeline = cfg.pipeline.clone();
    let s = gaze.config.input_size;
    if pipeline.input_size != (s, s) {
        log::info!("pipeline input size follows the gaze encoder: {s}x{s}");
        pipeline.input_size = (s, s);
    }
    let ec: Box<dyn EyeContactScorer> = Box::new(ec);
    Ok(Gt360System::new(detector, ec, gaze, pipeline)?)
}

/// Runs the pipeline on one image and returns the prediction records in
/// head order. Heads whose processing failed are reported and left out.
pub fn predict(
    sys: &Gt360System,
    image_arg: &Path,
    heatmap_dir: Option<&Path>,
) -> Result<(FrameImage, Vec<GazeVerdict>, Vec<PredictionRecord>)> {
    let img =
        FrameImage::open(image_arg).with_context(|| format!("opening {}", image_arg.display()))?;
    let image = image_arg.to_string_lossy().into_owned();
    let stem = image_arg
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    if let Some(dir) = heatmap_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut verdicts = Vec::new();
    let mut records = Vec::new();
    for (i, outcome) in sys.infer_frame(&img)?.into_iter().enumerate() {
        let v = match outcome.result {
            Ok(v) => v,
            Err(e) => {
                log::warn!("head {i} {:?} skipped: {e}", outcome.head.corners());
                continue;
            }
        };
        let hm_path = match (heatmap_dir, &outcome.heatmap) {
            (Some(dir), Some(hm)) => {
                let p = dir.join(format!("{stem}_head{i}.safetensors"));
                save_heatmap(&p, hm)?;
                Some(p.to_string_lossy().into_owned())
            }
            _ => None,
        };
        records.push(PredictionRecord::from_verdict(&image, &v, hm_path));
        verdicts.push(v);
    }
    Ok((img, verdicts, records))
}

fn infer(a: &InferArgs, cfg: &CliConfig) -> Result<()> {
    let sys = build_system(cfg)?;
    let (img, verdicts, records) = predict(&sys, &a.image, a.heatmap_dir.as_deref())?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for r in &records {
        if a.json {
            serde_json::to_writer(&mut out, r)?;
            writeln!(out)?;
        } else {
            let [x0, y0, x1, y1] = r.bbox;
            write!(
                out,
                "[{x0:.3} {y0:.3} {x1:.3} {y1:.3}] {} p_ec={:.3}",
                r.class.as_str(),
                r.p_ec
            )?;
            if let Some(p) = r.p_ift {
                write!(out, " p_ift={p:.3}")?;
            }
            if let Some([x, y]) = r.target {
                write!(out, " target=({x:.3}, {y:.3})")?;
            }
            writeln!(out)?;
        }
    }
    if !a.json && records.is_empty() {
        writeln!(out, "no heads detected")?;
    }
    if let Some(p) = &a.out {
        render_overlay(&img, &verdicts)
            .save(p)
            .with_context(|| format!("writing overlay {}", p.display()))?;
    }
    Ok(())
}

fn train(a: &TrainArgs, cfg: &CliConfig) -> Result<()> {
    let tcfg = cfg.train.for_stage(a.stage)?;
    let data = load_unified(
        &a.manifest,
        LoadOptions {
            require_images: true,
        },
    )?;
    let total = data.samples.len();
    let items: Vec<TrainItem> = data
        .samples
        .iter()
        .filter(|s| match a.stage {
            Stage::Pretrain => s.label == SampleLabel::IFT && s.target.is_some(),
            Stage::Finetune => s.label != SampleLabel::UNKNOWN,
        })
        .map(|s| TrainItem {
            image: ImageSource::File(data.resolve(&s.image_ref)),
            sample: s.clone(),
        })
        .collect();
    if items.len() < total {
        log::warn!(
            "{} uses {} of {total} samples (the rest lack the labels this stage needs)",
            a.stage.as_str(),
            items.len()
        );
    }
    let mut model = match &a.init {
        Some(dir) => GazeModel::load(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => GazeModel::new(cfg.models.gazenet.clone(), cfg.seed)?,
    };
    let report = run_stage(&mut model, &items, &tcfg, cfg.seed, Some(&a.out))?;
    let last = report.epochs.last().expect("at least one epoch");
    println!(
        "{}: {} samples, {} epochs, {} steps, final loss {:.5} (hm {:.5}, io {:.5}); checkpoint in {}",
        a.stage.as_str(),
        items.len(),
        report.epochs.len(),
        report.steps,
        last.loss_total,
        last.loss_hm,
        last.loss_io,
        a.out.display()
    );
    Ok(())
}

fn canonical(p: &Path) -> String {
    p.canonicalize()
        .unwrap_or_else(|_| p.to_path_buf())
        .to_string_lossy()
        .into_owned()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn eval(a: &EvalArgs, cfg: &CliConfig) -> Result<()> {
    let base = a.pred.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut preds = Vec::new();
    for (n, line) in read_lines(&a.pred)? {
        let rec: PredictionRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{n}: bad prediction record", a.pred.display()))?;
        let mut pred = rec
            .load(&base)
            .with_context(|| format!("{}:{n}", a.pred.display()))?;
        pred.image = canonical(Path::new(&rec.image));
        preds.push(pred);
    }
    let data = load_unified(&a.truth, LoadOptions::default())?;
    let truths: Vec<_> = data
        .samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.image_ref = canonical(&data.resolve(&s.image_ref));
            s
        })
        .collect();
    let (records, unmatched) = pair_records(&preds, &truths, cfg.eval.min_iou);
    if records.is_empty() {
        bail!(
            "no prediction matched any of the {} annotations",
            truths.len()
        );
    }
    if unmatched > 0 {
        log::warn!("{unmatched} annotations have no matching prediction");
    }
    let mut report = evaluate_suite(&records, &cfg.eval)?;
    report.unmatched = unmatched;
    let mut w = create(&a.report)?;
    serde_json::to_writer_pretty(&mut w, &report)?;
    writeln!(w)?;
    w.flush()?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let o = &report.overall;
    println!(
        "{} matched, {} unmatched: AUC {} L2 {} AP {} EC-F1 {}",
        records.len(),
        unmatched,
        fmt(o.auc),
        fmt(o.mean_l2),
        fmt(o.ap_in_out),
        fmt(o.ec.map(|e| e.f1))
    );
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GazeLine {
    face_center: [f64; 3],
    gaze_target: [f64; 3],
}

fn data(cmd: &DataCommand, seed: u64) -> Result<()> {
    match cmd {
        DataCommand::Convert { source, input, out } => {
            let conv = convert(*source, input)?;
            for reason in &conv.skipped {
                log::warn!("skipped: {reason}");
            }
            write_manifest(out, &conv.samples)?;
            let counts: Vec<String> = conv
                .label_counts()
                .iter()
                .map(|(k, v)| format!("{k} {v}"))
                .collect();
            println!(
                "{} samples ({}), {} skipped -> {}",
                conv.samples.len(),
                counts.join(", "),
                conv.skipped.len(),
                out.display()
            );
        }
        DataCommand::LabelEc {
            input,
            out,
            threshold_mm,
        } => {
            let mut w = create(out)?;
            let mut ec = 0;
            let lines = read_lines(input)?;
            for (n, line) in &lines {
                let g: GazeLine = serde_json::from_str(line)
                    .with_context(|| format!("{}:{n}: bad gaze record", input.display()))?;
                let rec = Gaze3dRecord::new(g.face_center, g.gaze_target)
                    .with_context(|| format!("{}:{n}", input.display()))?;
                let label = label_ec_mpii(&rec, *threshold_mm)?;
                ec += (label == gt360_core::data::EcLabel::EC) as usize;
                let obj = serde_json::json!({
                    "face_center": g.face_center,
                    "gaze_target": g.gaze_target,
                    "distance_mm": ec_distance(&rec)?,
                    "label": label,
                });
                serde_json::to_writer(&mut w, &obj)?;
                writeln!(w)?;
            }
            w.flush()?;
            println!(
                "{} records, {ec} eye contact -> {}",
                lines.len(),
                out.display()
            );
        }
        DataCommand::SampleEyediap {
            index,
            out,
            per_video,
        } => {
            let mut videos = Vec::new();
            for (n, line) in read_lines(index)? {
                let (id, count) = line.rsplit_once(',').with_context(|| {
                    format!("{}:{n}: expected `video_id,frame_count`", index.display())
                })?;
                let count: usize = count
                    .trim()
                    .parse()
                    .with_context(|| format!("{}:{n}: bad frame count", index.display()))?;
                videos.push((id.trim().to_string(), count));
            }
            let pairs = sample_eyediap_frames(&videos, *per_video)?;
            let mut w = create(out)?;
            for (video, frame) in &pairs {
                serde_json::to_writer(
                    &mut w,
                    &serde_json::json!({ "video": video, "frame": frame }),
                )?;
                writeln!(w)?;
            }
            w.flush()?;
            println!(
                "{} videos -> {} frames -> {}",
                videos.len(),
                pairs.len(),
                out.display()
            );
        }
        DataCommand::Synth {
            count,
            size,
            in_frame,
            out,
        } => {
            if !(0.0..=1.0).contains(in_frame) {
                bail!("--in-frame must lie in [0, 1], got {in_frame}");
            }
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let scenes = gaze_dataset(*count, *size, *in_frame, seed);
            let mut samples = Vec::with_capacity(scenes.len());
            for (i, s) in scenes.iter().enumerate() {
                let name = format!("scene{i:05}.png");
                s.image.save(out.join(&name))?;
                samples.push(s.to_sample(name, "synthetic"));
            }
            let manifest = out.join("manifest.jsonl");
            write_manifest(&manifest, &samples)?;
            println!("{} scenes -> {}", samples.len(), manifest.display());
        }
    }
    Ok(())
}
