use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fusediff_core::datasim::{load_samples, synth_dataset, FusionSample};
use fusediff_core::metrics::{evaluate, METRIC_NAMES};
use fusediff_core::sampler::sample_batch;
use fusediff_core::tensorio::{load_manifest, read_tensor, write_tensor};
use fusediff_core::trainer::{self, CHECKPOINT_FILE};
use fusediff_core::{
    CheckpointManifest, ConditionBundle, Denoiser, MetricConfig, MetricReport, SamplerPlan, Split,
};
use serde::Serialize;

use crate::config::{out_root, usage, RunConfig, RESOLVED_FILE};
use crate::preview;
use crate::{EvalArgs, SampleArgs, SynthArgs, TrainArgs};

pub const SAMPLE_FILE: &str = "sample.json";

fn split_manifest(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str()).join("manifest.json")
}

fn load_split(root: &Path, split: Split) -> anyhow::Result<Vec<FusionSample>> {
    let path = split_manifest(root, split);
    let m = load_manifest(&path).with_context(|| format!("loading dataset split {}", split.as_str()))?;
    let samples = load_samples(&m)?;
    if samples.is_empty() {
        bail!("{} lists no images", path.display());
    }
    Ok(samples)
}

fn positive(v: Option<usize>, flag: &str) -> anyhow::Result<Option<usize>> {
    match v {
        Some(0) => Err(usage(format!("{flag} must be positive"))),
        v => Ok(v),
    }
}

pub fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let s = &mut cfg.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = positive(a.count, "--count")? {
        s.test = v;
    }
    if let Some(v) = positive(a.train_count, "--train-count")? {
        s.train = v;
    }
    if let Some(v) = a.bands {
        s.bands = v;
    }
    if let Some(v) = a.patch {
        s.patch = v;
    }
    s.validate().map_err(|e| usage(e.to_string()))?;
    let out = a.out.unwrap_or_else(|| out_root().join("data"));
    cfg.record(&out.join(RESOLVED_FILE))?;
    for m in synth_dataset(&cfg.synth, &out)? {
        println!("{} ({} images)", split_manifest(&out, m.split).display(), m.entries.len());
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let m = &mut cfg.model;
    if let Some(o) = a.objective {
        m.prediction_kind = o.into();
    }
    for (on, off, field) in [
        (a.residual, a.no_residual, &mut m.residual),
        (a.style_mod, a.no_style_mod, &mut m.style_mod),
        (a.wavelet_mod, a.no_wavelet_mod, &mut m.wavelet_mod),
    ] {
        if on {
            *field = true;
        }
        if off {
            *field = false;
        }
    }
    if let Some(v) = positive(a.base_channels, "--base-channels")? {
        m.base_channels = v;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.iterations {
        t.iterations = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    cfg.model.validate().map_err(|e| usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;

    let data = load_split(&a.data, Split::Train)?;
    let bands = data[0].lrms_up.bands();
    if bands != cfg.model.in_bands {
        bail!("dataset has {bands} bands but the model expects {}", cfg.model.in_bands);
    }
    let (h, w) = (data[0].lrms_up.height(), data[0].lrms_up.width());
    cfg.model.check_input(h, w)?;

    let out = a.out.unwrap_or_else(|| out_root().join("train"));
    cfg.record(&out.join(RESOLVED_FILE))?;
    let res = trainer::train(&data, cfg.model.clone(), cfg.train.clone(), &out, a.resume)?;
    let objective = serde_json::to_value(res.manifest.model.prediction_kind)?;
    println!("checkpoint {}", res.checkpoint.display());
    println!("objective {}", objective.as_str().unwrap_or_default());
    println!("step {}", res.manifest.step);
    if let Some(r) = res.records.last() {
        println!("final loss {:.6}", r.loss);
    }
    Ok(())
}

/// Accepts either a run directory or the checkpoint directory inside it.
pub fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join("checkpoint");
    if nested.join(CHECKPOINT_FILE).is_file() {
        nested
    } else {
        p.to_path_buf()
    }
}

pub fn read_checkpoint(dir: &Path) -> anyhow::Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn config_has_key(path: Option<&Path>, key: &str) -> anyhow::Result<bool> {
    let Some(path) = path else {
        return Ok(false);
    };
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(v.get(key).is_some())
}

#[derive(Serialize)]
struct SampledImage {
    index: usize,
    seed: u64,
    fused: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    preview: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_map: Option<PathBuf>,
}

#[derive(Serialize)]
struct SampleRecord {
    checkpoint: PathBuf,
    step: u64,
    data: PathBuf,
    split: Split,
    plan: SamplerPlan,
    seed: u64,
    denoiser_calls_per_image: usize,
    images: Vec<SampledImage>,
}

pub fn fused_name(index: usize) -> String {
    format!("{index:04}_fused.ten")
}

pub fn sample(a: SampleArgs) -> anyhow::Result<()> {
    let config_path = a.config.config.as_deref();
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(k) = a.sampler {
        cfg.sampler.kind = k.into();
    }
    if let Some(v) = a.steps {
        cfg.sampler.steps = Some(v);
    }
    if let Some(v) = a.eta {
        cfg.sampler.eta = v;
    }
    if a.batch == 0 {
        return Err(usage("--batch must be positive"));
    }

    let ckpt = checkpoint_dir(&a.checkpoint);
    let manifest = read_checkpoint(&ckpt)?;
    let model = Denoiser::load(ckpt.join("model")).context("loading model weights")?;
    if model.cfg != manifest.model {
        bail!("{}: model weights and checkpoint manifest disagree", ckpt.display());
    }
    if config_has_key(config_path, "model")? && cfg.model != manifest.model {
        bail!("model section of the config does not match the checkpoint");
    }
    if config_has_key(config_path, "train")? && (cfg.train.diffusion_steps, cfg.train.schedule_offset)
        != (manifest.train.diffusion_steps, manifest.train.schedule_offset) {
        bail!("noise schedule of the config does not match the checkpoint");
    }
    cfg.model = manifest.model.clone();
    cfg.train = manifest.train.clone();
    let sch = manifest.train.schedule()?;
    let plan = cfg.sampler.plan(sch.steps())?;

    let split: Split = a.split.into();
    let data = load_split(&a.data, split)?;
    for (i, s) in data.iter().enumerate() {
        if s.lrms_up.bands() != model.cfg.in_bands {
            bail!("image {i} has {} bands; checkpoint expects {}", s.lrms_up.bands(), model.cfg.in_bands);
        }
        model.cfg.check_input(s.lrms_up.height(), s.lrms_up.width())?;
    }

    let out = a.out.unwrap_or_else(|| out_root().join("samples"));
    cfg.record(&out.join(RESOLVED_FILE))?;
    let conds: Vec<ConditionBundle> = data.iter().map(|s| s.bundle()).collect::<Result<_, _>>()?;
    let mut images = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        // Batches must share dimensions; full-scene splits may not.
        let dims = conds[start].lrms_up.dims();
        let mut end = start + 1;
        while end < data.len() && end - start < a.batch && conds[end].lrms_up.dims() == dims {
            end += 1;
        }
        let refs: Vec<&ConditionBundle> = conds[start..end].iter().collect();
        let seeds: Vec<u64> = (start..end).map(|i| a.seed.wrapping_add(i as u64)).collect();
        let fused = sample_batch(&model, &refs, &plan, &sch, &seeds)?;
        for (k, f) in fused.iter().enumerate() {
            let i = start + k;
            let path = out.join(fused_name(i));
            write_tensor(f, &path)?;
            let mut rec = SampledImage {
                index: i,
                seed: seeds[k],
                fused: path,
                preview: None,
                error_map: None,
            };
            if !a.no_preview {
                let p = out.join(format!("{i:04}_fused.png"));
                let (colour, bytes) = preview::colour(f);
                preview::write_png(&p, f.width(), f.height(), colour, &bytes)?;
                rec.preview = Some(p);
                if let Some(gt) = &data[i].gt {
                    let p = out.join(format!("{i:04}_error.png"));
                    let bytes = preview::error_map(f, gt);
                    preview::write_png(&p, f.width(), f.height(), png::ColorType::Grayscale, &bytes)?;
                    rec.error_map = Some(p);
                }
            }
            log::info!("image {i} done");
            images.push(rec);
        }
        start = end;
    }

    let record = SampleRecord {
        checkpoint: ckpt,
        step: manifest.step,
        data: a.data,
        split,
        denoiser_calls_per_image: plan.transitions().len(),
        plan,
        seed: a.seed,
        images,
    };
    let path = out.join(SAMPLE_FILE);
    fs::write(&path, serde_json::to_string_pretty(&record)?)?;
    println!("{} images written to {}", record.images.len(), out.display());
    println!("denoiser calls per image {}", record.denoiser_calls_per_image);
    Ok(())
}

/// What `eval` writes; described by `docs/eval_report.schema.json`.
#[derive(Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub fused_dir: PathBuf,
    pub metrics: MetricConfig,
    /// Interpolation baseline first, then the fused images.
    pub reports: Vec<MetricReport>,
}

pub fn comparison_table(reports: &[MetricReport]) -> String {
    let mut out = format!("{:<10}", "method");
    for n in METRIC_NAMES {
        out.push_str(&format!(" {n:>9}"));
    }
    out.push('\n');
    for r in reports {
        out.push_str(&format!("{:<10}", r.label));
        for v in r.values() {
            let cell = match v {
                None => "-".to_string(),
                Some(x) if x.is_infinite() => "inf".to_string(),
                Some(x) => format!("{x:.4}"),
            };
            out.push_str(&format!(" {cell:>9}"));
        }
        out.push('\n');
    }
    out
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    if let Some(v) = a.scale_ratio {
        cfg.metrics.scale_ratio = v;
    }
    cfg.metrics.validate().map_err(|e| usage(e.to_string()))?;
    let split: Split = a.split.into();
    let data = load_split(&a.data, split)?;
    let out = a.out.unwrap_or_else(|| a.fused.join("eval.json"));
    cfg.record(&out.with_extension("config.json"))?;

    let mut base = Vec::with_capacity(data.len());
    let mut fused = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let path = a.fused.join(fused_name(i));
        let f = read_tensor(&path).with_context(|| format!("missing fused image {}", path.display()))?;
        base.push(evaluate(i, s, &s.lrms_up, &cfg.metrics)?);
        fused.push(evaluate(i, s, &f, &cfg.metrics)?);
    }
    let report = EvalReport {
        split,
        fused_dir: a.fused.clone(),
        metrics: cfg.metrics.clone(),
        reports: vec![
            MetricReport::from_images("lrms_up", base),
            MetricReport::from_images("fused", fused),
        ],
    };
    fs::write(&out, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", comparison_table(&report.reports));
    println!();
    print!("{}", report.reports[1].to_table());
    println!("report {}", out.display());
    Ok(())
}
