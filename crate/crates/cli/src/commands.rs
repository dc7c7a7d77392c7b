use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cxrinf_annotate::campaign::DEFAULT_LOCK_TTL;
use cxrinf_annotate::{
    create_stage1, create_stage2, default_stage1_configs, default_stage2_configs, export_ground_truth, import_ground_truth,
    Campaign, CampaignOptions, StageOptions, SystemClock,
};
use cxrinf_core::dataset::synth::{disk_corpus, file_stem, read_corpus, write_corpus, SynthConfig};
use cxrinf_core::dataset::{ingest_source, make_folds, normalize, Catalog, CxrImage, FoldPlan, Label, Provenance, Sample, SegMask, SourceFormat};
use cxrinf_core::gradcam::{compare_explanations, grad_cam, render_activation};
use cxrinf_core::infermap::{detect, write_outputs, ProbMask, RenderOptions};
use cxrinf_core::metrics::{compute_metrics, confusion_pixel_batch, confusion_sample, ConfusionMatrix, Level, Metric, MetricReport};
use cxrinf_core::pngio;
use cxrinf_core::segmodel::{build_classifier, build_segmentation_model, DecoderKind, EncoderKind, ModelConfig, ModelHandle, Scale, WeightSource};
use cxrinf_core::trainer::{
    predict_masks, read_prediction_dump, run_cross_validation, train_classifier, train_segmentation, write_prediction_dump, CvOptions,
    TrainConfig,
};

use crate::args::*;
use crate::{CliError, CliResult, Ctx};

pub fn dispatch(ctx: &mut Ctx, cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Ingest(a) => ingest(ctx, a),
        Command::Folds(a) => folds(ctx, a),
        Command::TrainSeg(a) => train_seg(ctx, a),
        Command::TrainCls(a) => train_cls(ctx, a),
        Command::Cv(a) => cv(ctx, a),
        Command::Infer(a) => infer(ctx, a),
        Command::RenderMap(a) => render_map(ctx, a),
        Command::Detect(a) => detect_cmd(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Gradcam(a) => gradcam(ctx, a),
        Command::CompareMaps(a) => compare_maps(ctx, a),
        Command::AnnotateCreate(a) => annotate_create(ctx, a),
        Command::AnnotateServe(a) => annotate_serve(ctx, a),
        Command::AnnotateExport(a) => annotate_export(ctx, a),
        Command::SynthCorpus(a) => synth(ctx, a),
        Command::Replay(_) => unreachable!("handled before dispatch"),
    }
}

fn label(l: LabelArg) -> Label {
    match l {
        LabelArg::Covid => Label::Covid,
        LabelArg::Control => Label::Control,
    }
}

fn mkdir(p: &Path) -> CliResult<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn out_file_manifest(ctx: &mut Ctx, out: &Path) {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    ctx.manifest_default = Some(out.with_file_name(name));
}

fn out_dir_manifest(ctx: &mut Ctx, out: &Path) {
    ctx.manifest_default = Some(out.join("manifest.json"));
}

fn read_image(path: &Path) -> CliResult<CxrImage> {
    let pixels = pngio::read_gray(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    Ok(CxrImage {
        id,
        pixels,
        source: "file".into(),
        label: Label::Covid,
        original_format: SourceFormat::Png,
    })
}

fn read_prob(path: &Path, id: &str) -> CliResult<ProbMask> {
    Ok(ProbMask::new(id, pngio::read_gray(path)?)?)
}

fn render_options(ctx: &mut Ctx, r: &RenderOpts) -> RenderOptions {
    let d = RenderOptions::default();
    let c = &ctx.config.render;
    let opts = RenderOptions {
        tau_vis: r.tau_vis.or(c.tau_vis).unwrap_or(d.tau_vis),
        threshold: r.threshold.or(c.threshold).unwrap_or(d.threshold),
        min_area_px: r.min_area.or(c.min_area_px).unwrap_or(d.min_area_px),
    };
    ctx.setting("tau_vis", opts.tau_vis);
    ctx.setting("threshold", opts.threshold);
    ctx.setting("min_area_px", opts.min_area_px);
    opts
}

fn check_threshold(t: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("threshold {t} is outside [0, 1]")))
    }
}

fn parse<T: std::str::FromStr<Err = cxrinf_core::Error>>(s: &str) -> CliResult<T> {
    Ok(s.parse()?)
}

fn model_config(ctx: &mut Ctx, m: &ModelArgs) -> CliResult<ModelConfig> {
    let c = ctx.config.model.clone();
    let decoder: DecoderKind = parse(m.decoder.as_deref().or(c.decoder.as_deref()).unwrap_or("unet"))?;
    let encoder: EncoderKind = parse(m.encoder.as_deref().or(c.encoder.as_deref()).unwrap_or("densenet121"))?;
    let scale: Scale = parse(m.scale.as_deref().or(c.scale.as_deref()).unwrap_or("desk"))?;
    let frozen = m.frozen.or(c.frozen).unwrap_or(false);
    let mut cfg = ModelConfig::new(decoder, encoder, frozen, scale);
    if let Some(s) = m.input_size.or(c.input_size) {
        cfg.input_size = s;
    }
    cfg.seed = m.model_seed.or(c.seed).unwrap_or(0);
    let weights = m.weights.clone().or(c.weights.map(PathBuf::from));
    if let Some(w) = weights {
        let path = ctx.input(&w)?;
        cfg.pretrained = Some(WeightSource {
            name: encoder.as_str().into(),
            path,
            sha256: None,
        });
    }
    cfg.validate()?;
    ctx.seed("model", cfg.seed);
    ctx.setting("model", &cfg);
    Ok(cfg)
}

fn train_config(ctx: &mut Ctx, t: &TrainArgs, base: TrainConfig) -> CliResult<TrainConfig> {
    let c = ctx.config.train.clone();
    let mut cfg = base;
    if let Some(e) = t.epochs.or(c.epochs) {
        cfg.epochs = e;
    }
    if let Some(b) = t.batch_size.or(c.batch_size) {
        cfg.batch_size = b;
    }
    if let Some(lr) = t.lr.or(c.learning_rate) {
        cfg.optimizer.learning_rate = lr;
    }
    if let Some(s) = t.seed.or(c.seed) {
        cfg.seed = s;
    }
    if let Some(m) = c.memory_budget {
        cfg.memory_budget = m;
    }
    cfg.validate()?;
    ctx.seed("train", cfg.seed);
    ctx.setting("train", &cfg);
    Ok(cfg)
}

fn corpus(ctx: &mut Ctx, dir: &Path) -> CliResult<Vec<Sample>> {
    let dir = ctx.input(dir)?;
    if !dir.join("catalog.jsonl").exists() {
        return Err(CliError::Usage(format!("{} has no catalog.jsonl", dir.display())));
    }
    Ok(read_corpus(&dir)?)
}

fn synth(ctx: &mut Ctx, a: SynthArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.covid_fraction) {
        return Err(CliError::Usage(format!("covid fraction {} is outside [0, 1]", a.covid_fraction)));
    }
    if a.size < 16 {
        return Err(CliError::Usage(format!("size {} is below the 16 px minimum", a.size)));
    }
    let cfg = SynthConfig {
        n: a.n,
        size: a.size,
        seed: a.seed,
        covid_fraction: a.covid_fraction,
        max_radius: SynthConfig::default().max_radius.min(a.size as f64 / 4.0),
        min_radius: SynthConfig::default().min_radius.min(a.size as f64 / 8.0),
        ..Default::default()
    };
    ctx.seed("corpus", a.seed);
    ctx.setting("synth", cfg);
    let out = ctx.output(&a.out);
    let rows = write_corpus(&out, &disk_corpus(&cfg))?;
    out_dir_manifest(ctx, &out);
    println!("wrote {} samples to {}", rows.len(), out.display());
    Ok(())
}

fn ingest(ctx: &mut Ctx, a: IngestArgs) -> CliResult<()> {
    let source = ctx.input(&a.source)?;
    let tag = a
        .tag
        .clone()
        .or_else(|| source.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "source".into());
    let catalog_path = ctx.output(&a.catalog);
    if let Some(p) = catalog_path.parent() {
        mkdir(p)?;
    }
    let mut catalog = Catalog::open(&catalog_path)?;
    let report = ingest_source(&source, label(a.label), &tag, &mut catalog)?;
    ctx.setting("label", label(a.label));
    ctx.setting("tag", &tag);
    out_file_manifest(ctx, &catalog_path);
    let dups = report.rows.iter().filter(|r| r.duplicate_of.is_some()).count();
    println!("ingested {} images ({} flagged duplicates, {} errors)", report.rows.len(), dups, report.errors.len());
    for e in &report.errors {
        eprintln!("skipped {}: {}", e.path.display(), e.reason);
    }
    Ok(())
}

fn folds(ctx: &mut Ctx, a: FoldsArgs) -> CliResult<()> {
    let catalog = Catalog::open(ctx.input(&a.catalog)?)?;
    let k = a.k.or(ctx.config.folds.k).unwrap_or(5);
    let seed = a.seed.or(ctx.config.folds.seed).unwrap_or(0);
    if k < 2 {
        return Err(CliError::Usage(format!("k = {k} must be at least 2")));
    }
    ctx.seed("folds", seed);
    ctx.setting("k", k);
    let plan = make_folds(&catalog.labels(), k, (k - 1) as f64 / k as f64, seed)?;
    let out = ctx.output(&a.out);
    plan.save(&out)?;
    out_file_manifest(ctx, &out);
    let labels: HashMap<String, Label> = catalog.labels().into_iter().collect();
    for f in 0..k {
        let ids = plan.test_ids(f);
        let covid = ids.iter().filter(|id| labels[**id] == Label::Covid).count();
        println!("fold {f}: {} test ({} covid, {} control)", ids.len(), covid, ids.len() - covid);
    }
    Ok(())
}

fn train_seg(ctx: &mut Ctx, a: TrainSegArgs) -> CliResult<()> {
    let mcfg = model_config(ctx, &a.model)?;
    let tcfg = train_config(ctx, &a.train, TrainConfig::segmentation())?;
    let mut samples = corpus(ctx, &a.data)?;
    if let (Some(fold), Some(plan)) = (a.fold, &a.plan) {
        let plan = FoldPlan::load(&ctx.input(plan)?)?;
        if fold >= plan.k {
            return Err(CliError::Usage(format!("fold {fold} >= k = {}", plan.k)));
        }
        let train: std::collections::HashSet<&str> = plan.train_ids(fold).into_iter().collect();
        samples.retain(|s| train.contains(s.image.id.as_str()));
        ctx.setting("fold", fold);
    }
    let out = ctx.output(&a.out);
    if let Some(p) = out.parent() {
        mkdir(p)?;
    }
    let mut model = build_segmentation_model(&mcfg)?;
    let record = train_segmentation(&mut model, &samples, &tcfg, Some(&out))?;
    out_file_manifest(ctx, &out);
    println!(
        "trained {} for {} epochs on {} samples; final loss {:.6}",
        mcfg.label(),
        record.epochs_done,
        record.train_samples,
        record.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn train_cls(ctx: &mut Ctx, a: TrainClsArgs) -> CliResult<()> {
    let m = ModelArgs {
        decoder: None,
        encoder: a.encoder.clone(),
        frozen: Some(false),
        scale: a.scale.clone(),
        input_size: a.input_size,
        model_seed: a.model_seed,
        weights: a.weights.clone(),
    };
    let mcfg = model_config(ctx, &m)?;
    let tcfg = train_config(ctx, &a.train, TrainConfig::classifier())?;
    let samples = corpus(ctx, &a.data)?;
    let out = ctx.output(&a.out);
    if let Some(p) = out.parent() {
        mkdir(p)?;
    }
    let mut model = build_classifier(mcfg.encoder, mcfg.scale, mcfg.pretrained.clone(), mcfg.seed)?;
    if model.input_size() != mcfg.input_size {
        return Err(CliError::Usage(format!(
            "classifier input size is fixed by the scale ({}); got {}",
            model.input_size(),
            mcfg.input_size
        )));
    }
    let record = train_classifier(&mut model, &samples, &tcfg, Some(&out))?;
    out_file_manifest(ctx, &out);
    println!(
        "trained {} classifier for {} epochs; final loss {:.6}",
        mcfg.encoder,
        record.epochs_done,
        record.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn print_report(r: &MetricReport) {
    println!("level: {} (n = {})", match r.level {
        Level::Pixel => "pixel",
        Level::Sample => "sample",
    }, r.n);
    println!("{:<12} {:>8} {:>8}", "metric", "percent", "ci95");
    for m in Metric::ALL {
        let ci = r.ci.get(&m).copied().flatten();
        println!(
            "{:<12} {:>8} {:>8}",
            m.name(),
            r.percent[&m],
            ci.map(|c| format!("±{:.2}", c * 100.0)).unwrap_or_else(|| "-".into())
        );
    }
    let row: Vec<&str> = Metric::ALL.iter().map(|m| r.percent[m].as_str()).collect();
    println!("row: {}", row.join(" / "));
}

fn cv(ctx: &mut Ctx, a: CvArgs) -> CliResult<()> {
    let mcfg = model_config(ctx, &a.model)?;
    let tcfg = train_config(ctx, &a.train, TrainConfig::segmentation())?;
    let samples = corpus(ctx, &a.data)?;
    let plan = match &a.plan {
        Some(p) => FoldPlan::load(&ctx.input(p)?)?,
        None => {
            let k = a.k.or(ctx.config.folds.k).unwrap_or(5);
            let seed = a.fold_seed.or(ctx.config.folds.seed).unwrap_or(0);
            if k < 2 {
                return Err(CliError::Usage(format!("k = {k} must be at least 2")));
            }
            ctx.seed("folds", seed);
            let labels: Vec<_> = samples.iter().map(|s| (s.image.id.clone(), s.label())).collect();
            make_folds(&labels, k, (k - 1) as f64 / k as f64, seed)?
        }
    };
    let out = ctx.output(&a.out);
    mkdir(&out)?;
    plan.save(&out.join("folds.json"))?;
    let opts = CvOptions {
        out_dir: Some(out.clone()),
        folds: a.folds.clone(),
    };
    let outcome = run_cross_validation(&plan, &samples, &mcfg, &tcfg, &opts)?;
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.image.id.as_str(), s)).collect();
    let threshold = ctx.config.render.threshold.unwrap_or(RenderOptions::default().threshold);
    let reports = evaluate(&outcome.predictions.iter().map(|p| p.mask.clone()).collect::<Vec<_>>(), &by_id, threshold)?;
    write_json(&out.join("metrics.json"), &reports)?;
    out_dir_manifest(ctx, &out);
    for r in &reports {
        print_report(r);
    }
    Ok(())
}

/// Pixel-level metrics over COVID samples with masks, and sample-level
/// detection metrics over everything.
fn evaluate(preds: &[ProbMask], truth: &HashMap<&str, &Sample>, threshold: f64) -> CliResult<Vec<MetricReport>> {
    let mut pairs = Vec::new();
    let mut gts = Vec::new();
    let mut labels = Vec::new();
    let mut detections = Vec::new();
    for p in preds {
        let s = truth
            .get(p.image_id.as_str())
            .ok_or_else(|| CliError::Usage(format!("no ground truth for `{}`", p.image_id)))?;
        labels.push(s.label());
        detections.push(detect(p, threshold, 1));
        if let Some(m) = &s.mask {
            let m = if m.pixels.dim() == p.pixels.dim() {
                m.clone()
            } else {
                SegMask {
                    pixels: cxrinf_core::dataset::resize_bilinear(&m.pixels, p.pixels.nrows(), p.pixels.ncols())
                        .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
                    ..m.clone()
                }
            };
            gts.push((m, p));
        }
    }
    for (m, p) in &gts {
        pairs.push((m, *p));
    }
    let mut out = Vec::new();
    if !pairs.is_empty() {
        let cm = confusion_pixel_batch(&pairs, threshold)?;
        out.push(compute_metrics(&cm, &[1.0, 2.0], Level::Pixel));
    }
    let cm = confusion_sample(&labels, &detections)?;
    out.push(compute_metrics(&cm, &[1.0, 2.0], Level::Sample));
    Ok(out)
}

fn infer(ctx: &mut Ctx, a: InferArgs) -> CliResult<()> {
    let model_path = ctx.input(&a.model)?;
    let model = ModelHandle::load(&model_path)?;
    if a.batch == 0 {
        return Err(CliError::Usage("batch must be at least 1".into()));
    }
    let (images, labels): (Vec<CxrImage>, Vec<Option<Label>>) = match &a.data {
        Some(d) => corpus(ctx, d)?.into_iter().map(|s| (s.image.clone(), Some(s.label()))).unzip(),
        None => {
            let mut v = Vec::new();
            for p in &a.image {
                let p = ctx.input(p)?;
                v.push((read_image(&p)?, None));
            }
            v.into_iter().unzip()
        }
    };
    let refs: Vec<&CxrImage> = images.iter().collect();
    let (masks, ms) = predict_masks(&model, &refs, a.batch)?;
    let out = ctx.output(&a.out);
    let items: Vec<_> = masks.iter().cloned().zip(labels).map(|(m, l)| (m, None, l)).collect();
    write_prediction_dump(&out, &items)?;
    if a.render {
        let opts = render_options(ctx, &a.render_opts);
        check_threshold(opts.threshold)?;
        let maps = out.join("maps");
        for (img, m) in images.iter().zip(&masks) {
            let img = if img.pixels.dim() == m.pixels.dim() {
                img.clone()
            } else {
                normalize(img, m.pixels.nrows())?
            };
            write_outputs(&maps, &img, m, opts)?;
        }
    }
    out_dir_manifest(ctx, &out);
    println!("predicted {} images ({ms:.1} ms per image)", masks.len());
    Ok(())
}

fn render_map(ctx: &mut Ctx, a: RenderMapArgs) -> CliResult<()> {
    let opts = render_options(ctx, &a.render_opts);
    check_threshold(opts.threshold)?;
    let image = read_image(&ctx.input(&a.image)?)?;
    let prob = read_prob(&ctx.input(&a.prob)?, &image.id)?;
    let out = ctx.output(&a.out);
    let rec = write_outputs(&out, &image, &prob, opts)?;
    out_dir_manifest(ctx, &out);
    println!("{}: {}", rec.id, if rec.detected { "positive" } else { "negative" });
    Ok(())
}

fn detect_cmd(ctx: &mut Ctx, a: DetectArgs) -> CliResult<()> {
    let opts = render_options(ctx, &a.render_opts);
    check_threshold(opts.threshold)?;
    match (&a.prob, &a.predictions) {
        (Some(p), _) => {
            let prob = read_prob(&ctx.input(p)?, "input")?;
            println!("{}", if detect(&prob, opts.threshold, opts.min_area_px) { "positive" } else { "negative" });
        }
        (None, Some(dir)) => {
            for (entry, prob) in read_prediction_dump(&ctx.input(dir)?)? {
                let hit = detect(&prob, opts.threshold, opts.min_area_px);
                println!("{}\t{}", entry.id, if hit { "positive" } else { "negative" });
            }
        }
        (None, None) => unreachable!("clap requires one"),
    }
    Ok(())
}

fn eval(ctx: &mut Ctx, a: EvalArgs) -> CliResult<()> {
    if let Some(b) = a.beta.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(CliError::Usage(format!("beta {b} must be positive")));
    }
    ctx.setting("beta", &a.beta);
    let reports = match (&a.confusion, &a.predictions, &a.data) {
        (Some(c), _, _) => {
            let cm: ConfusionMatrix = c.parse().map_err(|e: cxrinf_core::Error| CliError::Usage(e.to_string()))?;
            ctx.setting("confusion", cm);
            let level = match a.level {
                LevelArg::Pixel => Level::Pixel,
                LevelArg::Sample => Level::Sample,
            };
            vec![compute_metrics(&cm, &a.beta, level)]
        }
        (None, Some(p), Some(d)) => {
            let opts = render_options(ctx, &a.render_opts);
            check_threshold(opts.threshold)?;
            let preds: Vec<ProbMask> = read_prediction_dump(&ctx.input(p)?)?.into_iter().map(|(_, m)| m).collect();
            let samples = corpus(ctx, d)?;
            let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.image.id.as_str(), s)).collect();
            evaluate(&preds, &by_id, opts.threshold)?
        }
        _ => return Err(CliError::Usage("give --confusion, or --predictions with --data".into())),
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports).map_err(|e| CliError::Runtime(e.to_string()))?);
    } else {
        for r in &reports {
            print_report(r);
        }
    }
    Ok(())
}

fn classifier_input(model: &ModelHandle, path: &Path) -> CliResult<CxrImage> {
    let img = read_image(path)?;
    let s = model.input_size();
    Ok(if img.pixels.dim() == (s, s) { img } else { normalize(&img, s)? })
}

fn gradcam(ctx: &mut Ctx, a: GradcamArgs) -> CliResult<()> {
    let model = ModelHandle::load(&ctx.input(&a.model)?)?;
    let image = classifier_input(&model, &ctx.input(&a.image)?)?;
    let layer = a.layer.clone().unwrap_or_else(|| model.default_cam_layer());
    ctx.setting("layer", &layer);
    ctx.setting("class", label(a.class));
    let act = grad_cam(&model, &image, label(a.class).index(), &layer)?;
    let tau = a.tau_vis.or(ctx.config.render.tau_vis).unwrap_or(RenderOptions::default().tau_vis);
    let map = render_activation(&image, &act, tau)?;
    let out = ctx.output(&a.out);
    mkdir(&out)?;
    let stem = file_stem(&image.id);
    pngio::write_rgb8(&out.join(format!("{stem}_gradcam.png")), &map.rgb)?;
    pngio::write_gray16(&out.join(format!("{stem}_activation.png")), &act.values)?;
    write_json(
        &out.join(format!("{stem}_gradcam.json")),
        &serde_json::json!({
            "image_id": act.image_id,
            "class_index": act.class_index,
            "source_layer": act.source_layer,
            "weights": act.weights,
        }),
    )?;
    out_dir_manifest(ctx, &out);
    println!("grad-cam of class {} at {} written to {}", act.class_index, act.source_layer, out.display());
    Ok(())
}

fn compare_maps(ctx: &mut Ctx, a: CompareMapsArgs) -> CliResult<()> {
    let model = ModelHandle::load(&ctx.input(&a.model)?)?;
    let image = classifier_input(&model, &ctx.input(&a.image)?)?;
    let layer = a.layer.clone().unwrap_or_else(|| model.default_cam_layer());
    ctx.setting("layer", &layer);
    let act = grad_cam(&model, &image, Label::Covid.index(), &layer)?;
    let (h, w) = image.pixels.dim();
    let fit = |f: ndarray::Array2<f64>| {
        if f.dim() == (h, w) {
            f
        } else {
            cxrinf_core::dataset::resize_bilinear(&f, h, w)
        }
    };
    let prob = ProbMask::new(&image.id, fit(pngio::read_gray(&ctx.input(&a.prob)?)?))?;
    let gt = SegMask {
        image_id: image.id.clone(),
        pixels: fit(pngio::read_gray(&ctx.input(&a.gt)?)?).mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        provenance: Provenance::Manual,
    };
    let cmp = compare_explanations(&act, &prob, &gt)?;
    let text = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(o) = &a.out {
        let o = ctx.output(o);
        if let Some(p) = o.parent() {
            mkdir(p)?;
        }
        std::fs::write(&o, &text).map_err(|e| CliError::io(&o, e))?;
        out_file_manifest(ctx, &o);
    }
    println!("{text}");
    Ok(())
}

fn stage_configs(ctx: &Ctx, names: Option<&Vec<String>>, defaults: Vec<ModelConfig>, input_size: Option<usize>) -> CliResult<Vec<ModelConfig>> {
    let mut cfgs = match names {
        None => defaults,
        Some(names) => {
            let scale = defaults[0].scale;
            names
                .iter()
                .map(|n| {
                    let (d, e) = n
                        .split_once('-')
                        .ok_or_else(|| CliError::Usage(format!("config `{n}` is not <decoder>-<encoder>")))?;
                    Ok(ModelConfig::new(parse(d)?, parse(e)?, false, scale))
                })
                .collect::<CliResult<Vec<_>>>()?
        }
    };
    for c in &mut cfgs {
        if let Some(s) = input_size.or(ctx.config.model.input_size) {
            c.input_size = s;
        }
        c.validate()?;
    }
    Ok(cfgs)
}

fn open_or_create(ctx: &Ctx, dir: &Path) -> CliResult<Campaign> {
    let clock = Arc::new(SystemClock);
    if dir.join(cxrinf_annotate::campaign::EVENT_LOG).exists() {
        Ok(Campaign::open(dir, clock)?)
    } else {
        let a = &ctx.config.annotate;
        let opts = CampaignOptions {
            seed: a.seed.unwrap_or(0),
            lock_ttl: a.lock_ttl_minutes.map(|m| Duration::from_secs(m * 60)).unwrap_or(DEFAULT_LOCK_TTL),
            ..Default::default()
        };
        Ok(Campaign::create(dir, opts, clock)?)
    }
}

fn annotate_create(ctx: &mut Ctx, a: AnnotateCreateArgs) -> CliResult<()> {
    let scale: Scale = parse(a.scale.as_deref().or(ctx.config.model.scale.as_deref()).unwrap_or("desk"))?;
    let train = train_config(ctx, &a.train, TrainConfig::segmentation())?;
    let seed = ctx.config.annotate.seed.unwrap_or(0);
    ctx.seed("campaign", seed);
    let opts = StageOptions {
        train,
        fold_k: a.k.or(ctx.config.folds.k).unwrap_or(5),
        seed,
        ..Default::default()
    };
    let data = corpus(ctx, &a.data)?;
    let dir = ctx.output(&a.campaign);
    let ids = match a.stage {
        StageArg::One => {
            let cfgs = stage_configs(ctx, ctx.config.annotate.stage1_configs.as_ref(), default_stage1_configs(scale), a.input_size)?;
            ctx.setting("configs", cfgs.iter().map(|c| c.label()).collect::<Vec<_>>());
            let mut campaign = open_or_create(ctx, &dir)?;
            create_stage1(&mut campaign, &data, &cfgs, &opts)?
        }
        StageArg::Two => {
            let collab_dir = a
                .collab
                .as_ref()
                .ok_or_else(|| CliError::Usage("stage 2 needs --collab".into()))?;
            let unannotated_dir = a
                .unannotated
                .as_ref()
                .ok_or_else(|| CliError::Usage("stage 2 needs --unannotated".into()))?;
            let (_, masks) = import_ground_truth(&ctx.input(collab_dir)?)?;
            let images: HashMap<&str, &CxrImage> = data.iter().map(|s| (s.image.id.as_str(), &s.image)).collect();
            let collab = masks
                .into_iter()
                .map(|m| {
                    let img = images
                        .get(m.image_id.as_str())
                        .ok_or_else(|| CliError::Usage(format!("`{}` is not in {}", m.image_id, a.data.display())))?;
                    Ok(Sample {
                        image: (*img).clone(),
                        mask: Some(m),
                    })
                })
                .collect::<CliResult<Vec<_>>>()?;
            let unannotated: Vec<CxrImage> = corpus(ctx, unannotated_dir)?.into_iter().map(|s| s.image).collect();
            let cfgs = stage_configs(ctx, ctx.config.annotate.stage2_configs.as_ref(), default_stage2_configs(scale), a.input_size)?;
            ctx.setting("configs", cfgs.iter().map(|c| c.label()).collect::<Vec<_>>());
            let mut campaign = open_or_create(ctx, &dir)?;
            create_stage2(&mut campaign, &collab, &unannotated, &cfgs, &opts)?
        }
    };
    ctx.manifest_default = Some(dir.join("runs").join(format!(
        "create-stage{}.manifest.json",
        if a.stage == StageArg::One { 1 } else { 2 }
    )));
    println!("created {} tasks in {}", ids.len(), dir.display());
    Ok(())
}

fn annotate_serve(ctx: &mut Ctx, a: AnnotateServeArgs) -> CliResult<()> {
    let dir = ctx.resolve(&a.campaign);
    if !dir.join(cxrinf_annotate::campaign::EVENT_LOG).exists() {
        return Err(CliError::Usage(format!("{} holds no campaign", dir.display())));
    }
    let campaign = Campaign::open(&dir, Arc::new(SystemClock))?;
    ctx.setting("addr", a.addr.to_string());
    ctx.manifest_default = Some(dir.join("runs").join("serve.manifest.json"));
    ctx.write_manifest()?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("serving {} on http://{}", dir.display(), a.addr);
    rt.block_on(cxrinf_annotate::http::serve(Arc::new(Mutex::new(campaign)), a.addr))
        .map_err(|e| CliError::Runtime(format!("serve {}: {e}", a.addr)))
}

fn annotate_export(ctx: &mut Ctx, a: AnnotateExportArgs) -> CliResult<()> {
    let dir = ctx.resolve(&a.campaign);
    if !dir.join(cxrinf_annotate::campaign::EVENT_LOG).exists() {
        return Err(CliError::Usage(format!("{} holds no campaign", dir.display())));
    }
    let mut campaign = Campaign::open(&dir, Arc::new(SystemClock))?;
    for spec in &a.import_fallback {
        let (id, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("`{spec}` is not <image-id>=<mask.png>")))?;
        let mask = pngio::read_gray(&ctx.input(Path::new(path))?)?;
        campaign.import_fallback(id, &mask)?;
    }
    let out = ctx.output(&a.out);
    let manifest = export_ground_truth(&campaign, &out)?;
    campaign.snapshot()?;
    ctx.manifest_default = Some(out.join("run_manifest.json"));
    println!("exported {} masks; {} images pending a manual mask", manifest.entries.len(), manifest.pending.len());
    for p in &manifest.pending {
        println!("pending\t{p}");
    }
    Ok(())
}
