use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use codemae::data::{load_image_dir, NormStats, Registry, Sample, SynthConfig};
use codemae::diagnostics::report::{alignment_table, curve_table, num, spectrum_table, summary_block};
use codemae::diagnostics::{
    alignment_vs_heterogeneity, gray_plane, heterogeneity_curve, linear_probe, pca_project, pooled_matrix,
    singular_spectrum, spearman, svg_chart, token_matrix, Mark, Matrix, ProbeConfig, Series, SsimConfig, Table,
};
use codemae::experiment::Variant;
use codemae::gradsuite::{parse_groups, run_suite, summarize, SuiteConfig};
use codemae::model::{Modality, ModelState};
use codemae::numcore::OpKind;
use codemae::trainer::metrics::{read_metrics, write_metrics};
use codemae::trainer::{load_registry, load_teacher, Checkpoint, TrainConfig, Trainer};

use crate::manifest::RunManifest;
use crate::{DiagnoseArgs, Exit, GenDataArgs, GradcheckArgs, PretrainArgs, ProbeArgs, Which, EXIT_NUMERICAL, EXIT_USAGE};

fn usage(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: EXIT_USAGE,
        message: message.into(),
    }
    .into()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut c = match path {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        c.set(k.trim(), v.trim())?;
    }
    c.validate()?;
    Ok(c)
}

fn load_dataset(dir: &Path) -> Result<Registry> {
    load_image_dir(dir, &dir.join("manifest.tsv")).with_context(|| format!("loading dataset {}", dir.display()))
}

fn norm_for(config: &TrainConfig, registry: &Registry) -> Result<Option<NormStats>> {
    Ok(if config.normalize { Some(registry.fit_norm()?) } else { None })
}

pub fn gen_data(a: &GenDataArgs, args: Vec<String>, threads: usize) -> Result<()> {
    let cfg = SynthConfig {
        dataset: a.dataset.clone(),
        scenes: a.scenes,
        size: a.size,
        regions: a.regions,
        seed: a.seed,
        unpaired_fraction: a.unpaired_fraction,
        asynchrony: a.asynchrony,
        class_coherence: a.class_coherence,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let mut m = RunManifest::new("gen-data", args, &a.out, threads);
    m.config = format!(
        "dataset = {}\nscenes = {}\nsize = {}\nregions = {}\nseed = {}\nunpaired_fraction = {}\nasynchrony = {}\nclass_coherence = {}\n",
        cfg.dataset, cfg.scenes, cfg.size, cfg.regions, cfg.seed, cfg.unpaired_fraction, cfg.asynchrony, cfg.class_coherence
    );
    let reg = cfg.write(&a.out)?;
    println!(
        "wrote {} samples ({} paired) to {}",
        reg.len(),
        reg.paired_count(),
        a.out.display()
    );
    m.finish()
}

pub fn pretrain(a: &PretrainArgs, args: Vec<String>, threads: usize) -> Result<()> {
    create_dir(&a.out)?;
    let mut m = RunManifest::new("pretrain", args, &a.out, threads);
    let metrics_path = a.out.join("metrics.csv");
    let mut trainer = match &a.resume {
        Some(ck) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                return Err(usage("--resume takes its config from the checkpoint; drop --config and --set"));
            }
            let ckpt = Checkpoint::read(ck).with_context(|| format!("reading {}", ck.display()))?;
            let config = ckpt.config()?;
            let mut t = Trainer::resume(&ckpt, load_registry(&config)?, load_teacher(&config)?)?;
            if metrics_path.exists() {
                let mut earlier = read_metrics(&metrics_path)?;
                earlier.retain(|r| r.step < t.step);
                t.metrics = earlier;
            }
            t
        }
        None => {
            let config = resolve_config(a.config.as_deref(), &a.overrides)?;
            Trainer::new(config.clone(), load_registry(&config)?, load_teacher(&config)?)?
        }
    };
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    m.config = trainer.config.to_text();
    write_text(&a.out.join("config.txt"), &m.config)?;
    let ckpt_dir = a.out.join("checkpoints");
    let every = trainer.config.checkpoint_every;
    let total_epochs = trainer.config.epochs;
    let result = trainer.run(|t, epoch| {
        let last = t.metrics.last().map(|r| r.total).unwrap_or(f64::NAN);
        eprintln!("epoch {epoch}/{total_epochs} step {} total {last:.5}", t.step);
        if every > 0 && epoch % every == 0 {
            std::fs::create_dir_all(&ckpt_dir)?;
            t.checkpoint().write(&ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        write_metrics(&metrics_path, &t.metrics)
    });
    write_metrics(&metrics_path, &trainer.metrics)?;
    if let Err(e) = result {
        m.finish()?;
        return Err(anyhow::Error::new(e).context(format!("training aborted at step {}", trainer.step)));
    }
    trainer.checkpoint().write(&a.out.join("final.ckpt"))?;
    println!("trained {} steps; final checkpoint {}", trainer.step, a.out.join("final.ckpt").display());
    m.finish()
}

struct Loaded {
    label: String,
    config: TrainConfig,
    model: ModelState<f32>,
}

fn load_checkpoints(paths: &[PathBuf], labels: &[String]) -> Result<Vec<Loaded>> {
    if !labels.is_empty() && labels.len() != paths.len() {
        return Err(usage(format!("{} labels for {} checkpoints", labels.len(), paths.len())));
    }
    let mut out: Vec<Loaded> = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        let ckpt = Checkpoint::read(p).with_context(|| format!("reading {}", p.display()))?;
        let config = ckpt.config()?;
        let model = ckpt.model(&config)?;
        let mut label = match labels.get(i) {
            Some(l) => l.clone(),
            None => Variant::of(&config)
                .map(|v| v.name().to_string())
                .unwrap_or_else(|| p.file_stem().unwrap_or_default().to_string_lossy().into_owned()),
        };
        if out.iter().any(|l| l.label == label) {
            label = format!("{label}-{i}");
        }
        out.push(Loaded { label, config, model });
    }
    Ok(out)
}

fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn paired(samples: &[Sample<f32>]) -> Vec<&Sample<f32>> {
    samples.iter().filter(|s| s.optical.is_some() && s.sar.is_some()).collect()
}

pub fn diagnose(a: &DiagnoseArgs, args: Vec<String>, threads: usize) -> Result<()> {
    if a.which != Which::Curve && a.checkpoints.is_empty() {
        return Err(usage("this diagnostic needs at least one --checkpoint"));
    }
    let registry = load_dataset(&a.data)?;
    let samples = registry.samples()?;
    let models = load_checkpoints(&a.checkpoints, &a.labels)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("diagnose", args, &a.out, threads);
    m.config = format!("which = {:?}\nimages = {}\nlevels = {}\n", a.which, a.images, a.levels).to_lowercase();
    let mut summary: Vec<(String, String)> = Vec::new();
    match a.which {
        Which::Spectrum => {
            let head = &samples[..a.images.min(samples.len())];
            let mut series = Vec::new();
            for l in &models {
                let norm = norm_for(&l.config, &registry)?;
                let mut rows = Vec::new();
                for modality in Modality::BOTH {
                    let t = token_matrix(&l.model, head, modality, norm.as_ref())?;
                    rows.extend((0..t.rows).map(|r| t.row(r).to_vec()));
                }
                if rows.is_empty() {
                    bail!(usage("no images to build a spectrum from"));
                }
                let rep = singular_spectrum(&Matrix::from_rows(&rows), true, &l.label)?;
                spectrum_table(std::slice::from_ref(&rep)).write(&a.out.join(format!("spectrum_{}.csv", file_label(&l.label))))?;
                summary.push((format!("effective_rank[{}]", l.label), num(rep.effective_rank)));
                series.push(Series {
                    name: l.label.clone(),
                    points: rep.values.iter().enumerate().map(|(i, v)| (i as f64, *v)).collect(),
                    mark: Mark::Line,
                });
            }
            write_text(
                &a.out.join("spectrum.svg"),
                &svg_chart("Token singular spectrum", "index", "singular_value", &series),
            )?;
        }
        Which::Curve => {
            let pairs: Vec<(Matrix, Matrix)> = paired(&samples)
                .into_iter()
                .map(|s| (gray_plane(s.optical.as_ref().unwrap()), gray_plane(s.sar.as_ref().unwrap())))
                .collect();
            if pairs.is_empty() {
                bail!(usage("the SSIM curve needs paired samples"));
            }
            let rows = heterogeneity_curve(&pairs, a.levels, &SsimConfig::default())?;
            curve_table(&rows).write(&a.out.join("curve.csv"))?;
            summary.push(("pairs".into(), pairs.len().to_string()));
            for r in &rows {
                summary.push((format!("mean_ssim[level {}]", r.level), num(r.mean)));
            }
            let series = [Series {
                name: "mean_ssim".into(),
                points: rows.iter().map(|r| (r.scale, r.mean)).collect(),
                mark: Mark::Line,
            }];
            write_text(
                &a.out.join("curve.svg"),
                &svg_chart("Optical/SAR SSIM by resolution", "scale", "mean_ssim", &series),
            )?;
        }
        Which::Alignment => {
            let mut series = Vec::new();
            for l in &models {
                let norm = norm_for(&l.config, &registry)?;
                let pts = alignment_vs_heterogeneity(&l.model, &samples, norm.as_ref(), &SsimConfig::default())?;
                alignment_table(&pts).write(&a.out.join(format!("alignment_{}.csv", file_label(&l.label))))?;
                let x: Vec<f64> = pts.iter().map(|p| p.ssim).collect();
                let y: Vec<f64> = pts.iter().map(|p| p.cosine).collect();
                let rho = spearman(&x, &y).map(num).unwrap_or_else(|| "undefined".into());
                summary.push((format!("points[{}]", l.label), pts.len().to_string()));
                summary.push((format!("spearman[{}]", l.label), rho));
                series.push(Series {
                    name: l.label.clone(),
                    points: x.into_iter().zip(y).collect(),
                    mark: Mark::Scatter,
                });
            }
            write_text(
                &a.out.join("alignment.svg"),
                &svg_chart("Token agreement against patch SSIM", "ssim", "cosine", &series),
            )?;
        }
        Which::Pca => {
            let head: Vec<Sample<f32>> = samples.iter().take(a.images).cloned().collect();
            for l in &models {
                let norm = norm_for(&l.config, &registry)?;
                let mut rows = Vec::new();
                let mut tags = Vec::new();
                for modality in Modality::BOTH {
                    for (r, id) in pooled_unlabeled(&l.model, &head, modality, norm.as_ref())? {
                        rows.push(r);
                        tags.push((id, modality));
                    }
                }
                if rows.len() < 2 {
                    bail!(usage("PCA needs at least two images"));
                }
                let pca = pca_project(&Matrix::from_rows(&rows), 2)?;
                let mut t = Table::new(&["sample", "modality", "pc1", "pc2"]);
                let mut series = vec![
                    Series { name: "optical".into(), points: Vec::new(), mark: Mark::Scatter },
                    Series { name: "sar".into(), points: Vec::new(), mark: Mark::Scatter },
                ];
                for (i, (id, modality)) in tags.iter().enumerate() {
                    let p = pca.projection.row(i);
                    let (x, y) = (p[0], p.get(1).copied().unwrap_or(0.0));
                    t.push(vec![id.clone(), modality.to_string(), num(x), num(y)]);
                    series[usize::from(*modality == Modality::Sar)].points.push((x, y));
                }
                let stem = file_label(&l.label);
                t.write(&a.out.join(format!("pca_{stem}.csv")))?;
                for (k, v) in pca.variance.iter().enumerate() {
                    summary.push((format!("variance[{}][pc{}]", l.label, k + 1), num(*v)));
                }
                write_text(
                    &a.out.join(format!("pca_{stem}.svg")),
                    &svg_chart(&format!("Pooled features, {}", l.label), "pc1", "pc2", &series),
                )?;
            }
        }
    }
    let text = summary_block(&summary);
    print!("{text}");
    write_text(&a.out.join("summary.txt"), &text)?;
    m.finish()
}

/// Pooled features of every image of one modality, labeled or not.
fn pooled_unlabeled(
    model: &ModelState<f32>,
    samples: &[Sample<f32>],
    modality: Modality,
    norm: Option<&NormStats>,
) -> Result<Vec<(Vec<f64>, String)>> {
    let mut out = Vec::new();
    for s in samples {
        let img = match modality {
            Modality::Optical => s.optical.as_ref(),
            Modality::Sar => s.sar.as_ref(),
        };
        let Some(img) = img else { continue };
        let img = match norm {
            Some(n) => n.normalize(img, &s.dataset, modality)?,
            None => img.clone(),
        };
        out.push((model.pooled_features(&img, modality)?, s.id.clone()));
    }
    Ok(out)
}

pub const PROBE_HEADER: [&str; 4] = ["modality", "seed", "accuracy", "train_accuracy"];

pub fn probe(a: &ProbeArgs, args: Vec<String>, threads: usize) -> Result<()> {
    let (config, model) = match (&a.checkpoint, a.random) {
        (Some(p), false) => {
            if a.config.is_some() || !a.overrides.is_empty() {
                return Err(usage("--config and --set apply to --random only"));
            }
            let ckpt = Checkpoint::read(p).with_context(|| format!("reading {}", p.display()))?;
            let config = ckpt.config()?;
            let model = ckpt.model(&config)?;
            (config, model)
        }
        (None, true) => {
            let config = resolve_config(a.config.as_deref(), &a.overrides)?;
            let model = ModelState::init(&config.model, config.seed)?;
            (config, model)
        }
        _ => return Err(usage("give exactly one of --checkpoint or --random")),
    };
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let registry = load_dataset(&a.data)?;
    let samples = registry.samples()?;
    let norm = norm_for(&config, &registry)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("probe", args, &a.out, threads);
    m.config_path = a.config.as_ref().map(|p| p.display().to_string());
    m.config = config.to_text();
    let mut t = Table::new(&PROBE_HEADER);
    let mut summary = Vec::new();
    for modality in Modality::BOTH {
        let (x, y) = pooled_matrix(&model, &samples, modality, norm.as_ref())?;
        if y.is_empty() {
            return Err(usage(format!("no labeled {modality} images in {}", a.data.display())));
        }
        let (mut acc, mut tr) = (0.0, 0.0);
        for seed in 0..a.seeds {
            let r = linear_probe(&x, &y, &ProbeConfig { seed, ..Default::default() })?;
            t.push(vec![modality.to_string(), seed.to_string(), num(r.accuracy), num(r.train_accuracy)]);
            acc += r.accuracy / a.seeds as f64;
            tr += r.train_accuracy / a.seeds as f64;
        }
        t.push(vec![modality.to_string(), "mean".into(), num(acc), num(tr)]);
        summary.push((format!("accuracy[{modality}]"), num(acc)));
    }
    t.write(&a.out.join("probe.csv"))?;
    let text = summary_block(&summary);
    print!("{text}");
    write_text(&a.out.join("summary.txt"), &text)?;
    m.finish()
}

pub fn gradcheck(a: &GradcheckArgs, args: Vec<String>, threads: usize) -> Result<()> {
    let sign_flip = match &a.inject_sign_flip {
        None => None,
        Some(s) => Some(OpKind::parse(s).ok_or_else(|| usage(format!("unknown op {s:?}")))?),
    };
    let cfg = SuiteConfig {
        groups: parse_groups(&a.component)?,
        seeds: (0..a.seeds).collect(),
        sign_flip,
    };
    let rows = run_suite(&cfg)?;
    let worst = summarize(&rows);
    let mut t = Table::new(&["group", "name", "max_rel_err", "worst_seed", "worst_param", "tolerance", "passed"]);
    for r in &worst {
        println!(
            "{:<7} {:<24} {:>10.3e}  {}",
            r.group.name(),
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
        t.push(vec![
            r.group.name().into(),
            r.name.clone(),
            num(r.max_rel_err),
            r.seed.to_string(),
            r.worst.clone(),
            num(r.group.tolerance()),
            r.passed().to_string(),
        ]);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let mut m = RunManifest::new("gradcheck", args, out, threads);
        m.config = format!("component = {}\nseeds = {}\n", a.component, a.seeds);
        t.write(&out.join("gradcheck.csv"))?;
        m.finish()?;
    }
    let failed = worst.iter().filter(|r| !r.passed()).count();
    println!("{} checks over {} seeds, {failed} failed", worst.len(), a.seeds);
    if failed > 0 {
        bail!(Exit {
            code: EXIT_NUMERICAL,
            message: format!("{failed} gradient checks exceeded tolerance"),
        });
    }
    Ok(())
}
