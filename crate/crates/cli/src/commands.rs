use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use defectforge::augment::{build_augmented_dataset, patch_training_set, AugmentPlan};
use defectforge::datakit::{
    export_coco, import_coco, import_voc, kfold_split, load_canonical, make_imbalanced, seg_to_bbox, AnnotatedImage,
    Annotation, BinaryMask, CocoFile, DataError, DatasetManifest,
};
use defectforge::detectkit::{
    detect_all, import_predictions, shapes_dataset, toy_detector_train, FoldPipeline, MinorityExperiment, ShapesSpec,
    ToyDetector, ToyDetectorConfig,
};
use defectforge::evalkit::{evaluate, export_predictions, run_sensitivity, EvalConfig, GridSpec};
use defectforge::gpwgan::{synthesize_patches, train_gpwgan, GanConfig, GeneratorNet, Postprocess};
use defectforge::raster::GrayImage;
use serde_json::json;

use crate::args::*;
use crate::support::*;

struct Ctx<'a> {
    g: &'a Global,
    file: toml::Table,
}

impl Ctx<'_> {
    fn out(&self) -> Result<&Path> {
        let out = required_out(&self.g.out)?;
        guard(out, self.g.force)?;
        Ok(out)
    }

    fn section<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        from_table(config_section(&self.file, name), name)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let file = match &cli.global.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            text.parse::<toml::Table>()
                .map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let ctx = Ctx { g: &cli.global, file };
    match &cli.command {
        Command::Dataset { action } => dataset(&ctx, action),
        Command::TrainGan(a) => train_gan(&ctx, a),
        Command::Synthesize(a) => synthesize(&ctx, a),
        Command::Augment(a) => augment(&ctx, a),
        Command::Detect { action } => detect(&ctx, action),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Sensitivity(a) => sensitivity(&ctx, a),
    }
}

fn load_with_pixels(path: &Path) -> Result<DatasetManifest> {
    let mut m = load_canonical(path).with_context(|| format!("loading {}", path.display()))?;
    m.load_pixels()?;
    Ok(m)
}

fn parent_dir(p: &Path) -> std::path::PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn dataset(ctx: &Ctx, action: &DatasetAction) -> Result<()> {
    let seed = ctx.g.seed;
    match action {
        DatasetAction::Convert {
            input,
            from,
            to,
            image_prefix,
        } => {
            let out = ctx.out()?;
            let m = match from {
                Format::Canonical => load_canonical(input)?,
                Format::Coco => {
                    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
                    let coco: CocoFile = serde_json::from_str(&text)
                        .map_err(|e| DataError::ParseError {
                            file: input.display().to_string(),
                            line: e.line(),
                            message: e.to_string(),
                        })?;
                    let mut m = import_coco(&coco, &input.display().to_string())?;
                    m.root = Some(parent_dir(input));
                    m
                }
                Format::Voc => {
                    let mut m = import_voc(input, image_prefix)?;
                    m.root = Some(input.clone());
                    m
                }
            };
            match to {
                Format::Canonical => write_manifest(&m, out)?,
                Format::Coco => {
                    let mut rebased = m.clone();
                    rebase(&mut rebased, &parent_dir(out))?;
                    create_parent(out)?;
                    let mut text = serde_json::to_string_pretty(&export_coco(&rebased))?;
                    text.push('\n');
                    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
                }
                Format::Voc => return Err(config_error("VOC is supported as an input format only")),
            }
            log::info!("converted {} images", m.len());
            let cfg = json!({"input": input, "from": format!("{from:?}"), "to": format!("{to:?}"), "image_prefix": image_prefix});
            write_run_record(&run_record_path(out, false), "dataset convert", seed, &cfg)
        }
        DatasetAction::Seg2bbox { images, masks, class } => {
            let out = ctx.out()?;
            let mut names: Vec<String> = std::fs::read_dir(images)
                .with_context(|| format!("reading {}", images.display()))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                .collect();
            names.sort();
            let mut m = DatasetManifest::new(vec![class.clone()]);
            m.root = Some(images.clone());
            for (id, name) in names.iter().enumerate() {
                let mask = GrayImage::load_png(&masks.join(name))?;
                let annotations = match seg_to_bbox(&BinaryMask::from_gray(&mask)) {
                    Ok(bbox) => vec![Annotation {
                        class_label: class.clone(),
                        bbox,
                    }],
                    Err(DataError::EmptyMask) => Vec::new(),
                    Err(e) => return Err(e.into()),
                };
                m.images.push(AnnotatedImage {
                    id: id as u64,
                    file: name.clone(),
                    width: mask.width() as u32,
                    height: mask.height() as u32,
                    annotations,
                    pixels: None,
                });
            }
            m.validate()?;
            write_manifest(&m, out)?;
            let cfg = json!({"images": images, "masks": masks, "class": class});
            write_run_record(&run_record_path(out, false), "dataset seg2bbox", seed, &cfg)
        }
        DatasetAction::MakeImbalanced { input, class, drop } => {
            let out = ctx.out()?;
            let m = load_canonical(input)?;
            let reduced = make_imbalanced(&m, class, *drop, seed)?;
            log::info!("{} of {} images kept", reduced.len(), m.len());
            write_manifest(&reduced, out)?;
            let cfg = json!({"input": input, "class": class, "drop": drop});
            write_run_record(&run_record_path(out, false), "dataset make-imbalanced", seed, &cfg)
        }
        DatasetAction::Split { input, k } => {
            let out = ctx.out()?;
            let m = load_canonical(input)?;
            let folds = kfold_split(&m, *k, seed)?;
            for (i, f) in folds.iter().enumerate() {
                write_manifest(&f.train, &out.join(format!("fold{i}-train.json")))?;
                write_manifest(&f.test, &out.join(format!("fold{i}-test.json")))?;
            }
            let cfg = json!({"input": input, "k": k});
            write_run_record(&run_record_path(out, true), "dataset split", seed, &cfg)
        }
        DatasetAction::Shapes {
            per_class,
            beds,
            image_size,
        } => {
            let out = ctx.out()?;
            let spec = ShapesSpec {
                per_class: *per_class,
                beds: *beds,
                image_size: *image_size,
                ..ShapesSpec::default()
            };
            if spec.max_side > spec.image_size {
                return Err(config_error(format!("--image-size must be at least {}", spec.max_side)));
            }
            let (mut m, bed_images) = shapes_dataset(&spec, seed);
            std::fs::create_dir_all(out.join("shapes"))?;
            std::fs::create_dir_all(out.join("beds"))?;
            for img in &m.images {
                img.pixels()?.save_png(&out.join(&img.file))?;
            }
            for b in &bed_images {
                b.pixels.save_png(&out.join("beds").join(format!("{}.png", b.source_id)))?;
            }
            m.root = Some(out.to_path_buf());
            write_manifest(&m, &out.join("manifest.json"))?;
            write_run_record(&run_record_path(out, true), "dataset shapes", seed, &spec)
        }
    }
}

fn gan_config(ctx: &Ctx) -> Result<GanConfig> {
    // a config file without tables holds the GAN keys at top level
    let table = if ctx.file.values().any(|v| v.is_table()) {
        config_section(&ctx.file, "gan")
    } else {
        ctx.file.clone()
    };
    from_table(table, "gan")
}

fn train_gan(ctx: &Ctx, a: &TrainGanArgs) -> Result<()> {
    let mut cfg = gan_config(ctx)?;
    cfg.seed = ctx.g.seed;
    if let Some(it) = a.iterations {
        cfg.iterations = it;
    }
    cfg.validate()?;
    let out = ctx.out()?;
    let rows = match (&a.beds, &a.input, &a.class) {
        (Some(dir), _, _) => load_beds(dir)?
            .iter()
            .map(|b| b.pixels.resize(cfg.patch_w, cfg.patch_h).into_data())
            .collect(),
        (None, Some(input), Some(class)) => {
            let m = load_with_pixels(input)?;
            patch_training_set(&m, class, cfg.patch_h, cfg.patch_w)?
        }
        _ => return Err(config_error("either --beds or both --input and --class are required")),
    };
    log::info!("training on {} samples for {} steps", rows.len(), cfg.iterations);
    let (mut gen, report) = train_gpwgan(cfg.clone(), &rows)?;
    gen.class_label = a.class.clone();
    create_parent(out)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    gen.write_to(BufWriter::new(file))?;
    let losses = out.with_extension("losses.csv");
    std::fs::write(&losses, report.to_csv()).with_context(|| format!("writing {}", losses.display()))?;
    let run = json!({"input": a.input, "class": a.class, "beds": a.beds, "gan": cfg});
    write_run_record(&run_record_path(out, false), "train-gan", ctx.g.seed, &run)
}

fn synthesize(ctx: &Ctx, a: &SynthesizeArgs) -> Result<()> {
    if a.count == 0 {
        return Err(config_error("--count must be at least 1"));
    }
    let out = ctx.out()?;
    let file = File::open(&a.model).with_context(|| format!("opening {}", a.model.display()))?;
    let gen = GeneratorNet::read_from(file)?;
    let patches = synthesize_patches(&gen, a.count, ctx.g.seed, Postprocess { rescale: a.rescale })?;
    std::fs::create_dir_all(out.join("masks"))?;
    for (i, p) in patches.iter().enumerate() {
        p.pixels.save_png(&out.join(format!("patch-{i:05}.png")))?;
        p.mask.save_png(&out.join("masks").join(format!("mask-{i:05}.png")))?;
    }
    let cfg = json!({"model": a.model, "count": a.count, "rescale": a.rescale});
    write_run_record(&run_record_path(out, true), "synthesize", ctx.g.seed, &cfg)
}

fn augment(ctx: &Ctx, a: &AugmentArgs) -> Result<()> {
    let mut plan: AugmentPlan = ctx.section("augment")?;
    plan.seed = ctx.g.seed;
    if let Some(m_g) = a.m_g {
        plan.m_g = m_g;
    }
    if let Some(f) = a.real_fraction {
        plan.real_fraction = f;
    }
    if !(0.0..=1.0).contains(&plan.real_fraction) {
        return Err(config_error("real_fraction must lie in [0, 1]"));
    }
    let out = ctx.out()?;
    let out_dir = parent_dir(out);
    let real = if plan.m_g == 0 {
        load_canonical(&a.input)?
    } else {
        load_with_pixels(&a.input)?
    };
    let beds = match (&a.beds, plan.m_g) {
        (_, 0) => Vec::new(),
        (Some(dir), _) => load_beds(dir)?,
        (None, _) => return Err(config_error("--beds is required when --m-g is positive")),
    };
    let generators = load_generators(&a.generators)?;
    let mut m = build_augmented_dataset(&real, &beds, &generators, &plan)?;

    let synthetic: BTreeSet<u64> = m.provenance.iter().map(|p| p.image_id).collect();
    let old_root = m.root.clone().unwrap_or_default();
    for img in &mut m.images {
        if synthetic.contains(&img.id) {
            let path = out_dir.join(&img.file);
            create_parent(&path)?;
            img.pixels()?.save_png(&path)?;
        } else {
            img.file = relative_path(&old_root.join(&img.file), &out_dir)?
                .to_string_lossy()
                .replace('\\', "/");
        }
    }
    m.root = Some(out_dir.clone());
    create_parent(out)?;
    defectforge::datakit::save_canonical(&m, out)?;
    log::info!("{} synthetic images added", synthetic.len());
    let cfg = json!({"input": a.input, "beds": a.beds, "generators": a.generators, "augment": plan});
    write_run_record(&run_record_path(out, false), "augment", ctx.g.seed, &cfg)
}

fn detect(ctx: &Ctx, action: &DetectAction) -> Result<()> {
    match action {
        DetectAction::Train { input } => {
            let mut cfg: ToyDetectorConfig = ctx.section("detector")?;
            cfg.seed = ctx.g.seed;
            let out = ctx.out()?;
            let m = load_with_pixels(input)?;
            let (det, trace) = toy_detector_train(&m, &cfg)?;
            if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
                log::info!("training loss {first:.4} -> {last:.4}");
            }
            create_parent(out)?;
            let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
            det.write_to(BufWriter::new(file))?;
            let run = json!({"input": input, "detector": cfg});
            write_run_record(&run_record_path(out, false), "detect train", ctx.g.seed, &run)
        }
        DetectAction::Infer { model, input } => {
            let out = ctx.out()?;
            let file = File::open(model).with_context(|| format!("opening {}", model.display()))?;
            let det = ToyDetector::read_from(std::io::BufReader::new(file))?;
            let m = load_with_pixels(input)?;
            let dets = detect_all(&det, &m)?;
            create_parent(out)?;
            std::fs::write(out, export_predictions(&dets)).with_context(|| format!("writing {}", out.display()))?;
            let run = json!({"model": model, "input": input});
            write_run_record(&run_record_path(out, false), "detect infer", ctx.g.seed, &run)
        }
    }
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let mut cfg: EvalConfig = ctx.section("eval")?;
    if let Some(t) = a.iou {
        cfg.iou_threshold = t;
    }
    if !(cfg.iou_threshold > 0.0 && cfg.iou_threshold <= 1.0) {
        return Err(config_error("IoU threshold must lie in (0, 1]"));
    }
    let out = ctx.out()?;
    let gt = load_canonical(&a.gt)?;
    let dets = import_predictions(&a.predictions, Some(&gt))?;
    let report = evaluate(&gt, &dets, &cfg)?;
    create_parent(out)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    std::fs::write(out.with_extension("csv"), report.to_csv())?;
    println!("mAP {:.4} over {} classes", report.map, report.class_count);
    let run = json!({"gt": a.gt, "predictions": a.predictions, "eval": cfg});
    write_run_record(&run_record_path(out, false), "evaluate", ctx.g.seed, &run)
}

fn sensitivity(ctx: &Ctx, a: &SensitivityArgs) -> Result<()> {
    let plan: AugmentPlan = ctx.section("augment")?;
    let detector: ToyDetectorConfig = ctx.section("detector")?;
    let eval: EvalConfig = ctx.section("eval")?;
    let out = ctx.out()?;
    let m = load_with_pixels(&a.input)?;
    if !m.classes.contains(&a.minority) {
        return Err(config_error(format!("class `{}` is not in the dataset", a.minority)));
    }
    let beds = match &a.beds {
        Some(dir) => load_beds(dir)?,
        None if a.m_g.iter().all(|&g| g == 0) => Vec::new(),
        None => return Err(config_error("--beds is required when any --m-g value is positive")),
    };
    let folds = kfold_split(&m, a.folds, ctx.g.seed)?;
    let pipeline = FoldPipeline {
        experiment: MinorityExperiment {
            minority: a.minority.clone(),
            beds,
            generators: load_generators(&a.generators)?,
            plan: plan.clone(),
            detector: detector.clone(),
            eval,
        },
        folds,
    };
    let spec = GridSpec {
        m_r: a.m_r.clone(),
        m_g: a.m_g.clone(),
    };
    let grid = run_sensitivity(&spec, &pipeline, a.folds, ctx.g.seed)?;
    create_parent(out)?;
    std::fs::write(out, grid.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    let mut text = serde_json::to_string_pretty(&grid)?;
    text.push('\n');
    std::fs::write(out.with_extension("json"), text)?;
    std::fs::write(out.with_extension("svg"), grid.to_svg())?;
    let failed = grid.cells.iter().flatten().filter(|c| c.ap().is_none()).count();
    println!("{} cells, {failed} failed", grid.cell_count());
    let run = json!({
        "input": a.input, "minority": a.minority, "m_r": a.m_r, "m_g": a.m_g, "folds": a.folds,
        "beds": a.beds, "generators": a.generators, "augment": plan, "detector": detector, "eval": eval,
    });
    write_run_record(&run_record_path(out, false), "sensitivity", ctx.g.seed, &run)
}
