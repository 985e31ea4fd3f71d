use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use encnet::checks::{gradient_suite, syncbn_shard_check, GRADIENT_TOLERANCE};
use encnet::data::cifar::{ingest_cifar10, ClassSample, Standardize};
use encnet::data::synth::{self, ambiguous_miou, SynthSpec};
use encnet::data::{SegSample, IGNORE_LABEL};
use encnet::nn::backbone::BackboneConfig;
use encnet::nn::checkpoint::{load_into_store, save_store, Container};
use encnet::nn::cifar::{build_cifar_net, CifarConfig, CifarNet, CifarVariant};
use encnet::nn::seg::{build_encnet, build_fcn, multi_scale_eval, SegConfig, SegNet};
use encnet::nn::{Forward, Mode, ParamStore};
use encnet::train::classify::{evaluate_classifier, train_classifier};
use encnet::train::seg::{argmax_classes, train_seg, SegTrainSettings};
use encnet::train::{stream_rng, AugmentConfig, ConfusionMatrix, Convention, EpochRecord, Schedule, Stream, TrainConfig};
use encnet::{Error, Real, Result, Tensor};
use serde_json::{json, Value};

use crate::config::RunConfig;

pub const RESOLVED_CONFIG: &str = "resolved.cfg";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const SUMMARY: &str = "summary.json";

pub const SYNCBN_TOLERANCE_F64: f64 = 1e-10;
pub const SYNCBN_TOLERANCE_F32: f64 = 1e-5;
pub const HEAD_BUDGET: f64 = 1.05;

/// Printable outcome of a command that ran to completion.
#[derive(Clone, Debug)]
pub struct Report {
    pub text: String,
    /// False when a check inside the command failed.
    pub passed: bool,
}

impl Report {
    fn ok(text: String) -> Self {
        Report { text, passed: true }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(cfg.get("out.dir"));
    std::fs::create_dir_all(&dir)?;
    cfg.write(&dir.join(RESOLVED_CONFIG))?;
    Ok(dir)
}

fn precision(cfg: &RunConfig) -> Result<usize> {
    match cfg.usize("precision")? {
        p @ (32 | 64) => Ok(p),
        p => Err(Error::Config(format!("precision must be 32 or 64, got {p}"))),
    }
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn gradcheck(seed: u64) -> Result<Report> {
    let start = Instant::now();
    let reports = gradient_suite(seed)?;
    let mut text = String::new();
    let mut passed = true;
    for r in &reports {
        let ok = r.report.passed();
        passed &= ok;
        text += &format!("{:<28} max rel error {:.3e}  {}\n", r.name, r.report.max_rel_error(), if ok { "ok" } else { "FAIL" });
    }
    let worst = reports.iter().map(|r| r.report.max_rel_error()).fold(0.0, f64::max);
    text += &format!(
        "{} checks, worst {:.3e} (tolerance {:.0e}), {:.1}s\n",
        reports.len(),
        worst,
        GRADIENT_TOLERANCE,
        start.elapsed().as_secs_f64()
    );
    Ok(Report { text, passed })
}

pub fn syncbn_verify(max_devices: usize, seed: u64) -> Result<Report> {
    if max_devices == 0 {
        return Err(Error::Config("syncbn-verify needs at least one device".into()));
    }
    let batch = (2 * max_devices).max(4);
    let mut text = String::new();
    let mut passed = true;
    let mut worst = [0.0f64; 2];
    for (slot, (label, tolerance)) in [("f64", SYNCBN_TOLERANCE_F64), ("f32", SYNCBN_TOLERANCE_F32)].into_iter().enumerate() {
        let reports = if slot == 0 {
            syncbn_shard_check::<f64>(batch, 3, 4, max_devices, seed)?
        } else {
            syncbn_shard_check::<f32>(batch, 3, 4, max_devices, seed)?
        };
        for r in &reports {
            let ok = r.passed(tolerance);
            passed &= ok;
            worst[slot] = worst[slot].max(r.forward_error).max(r.backward_error);
            text += &format!(
                "{label} shards {:?}: forward {:.3e} backward {:.3e} syncs {}/{}  {}\n",
                r.sizes,
                r.forward_error,
                r.backward_error,
                r.forward_syncs,
                r.backward_syncs,
                if ok { "ok" } else { "FAIL" }
            );
        }
    }
    text += &format!("max divergence vs monolithic: f64 {:.3e} (< {SYNCBN_TOLERANCE_F64:.0e}), f32 {:.3e} (< {SYNCBN_TOLERANCE_F32:.0e})\n", worst[0], worst[1]);
    Ok(Report { text, passed })
}

pub fn synth_spec(cfg: &RunConfig) -> Result<SynthSpec> {
    let spec = SynthSpec {
        size: cfg.usize("synth.size")?,
        shapes_min: cfg.usize("synth.shapes_min")?,
        shapes_max: cfg.usize("synth.shapes_max")?,
        radius_min: cfg.usize("synth.radius_min")?,
        radius_max: cfg.usize("synth.radius_max")?,
        noise: cfg.f64("synth.noise")? as f32,
        cue: cfg.f64("synth.cue")? as f32,
        seed: cfg.u64("seed")?,
        train: cfg.usize("synth.train")?,
        val: cfg.usize("synth.val")?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Sidecar JSON written next to a generated dataset.
pub fn audit_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

pub fn synth_gen(cfg: &RunConfig) -> Result<Report> {
    let spec = synth_spec(cfg)?;
    out_dir(cfg)?;
    let data = synth::generate(&spec)?;
    let path = PathBuf::from(cfg.get("data.path"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    synth::write_dataset(&data, &path)?;
    let audit = synth::audit(&data)?;
    write_json(&audit_path(&path), &json!({ "spec": spec, "audit": audit }))?;
    let text = format!(
        "wrote {} ({} train, {} val, {}x{})\nambiguous pair balance {:.3} / {:.3}\ncontext oracle ambiguous mIoU {:.3}, without context {:.3}\nlocal context ceilings {:?}, whole image {:.4}\n",
        path.display(),
        spec.train,
        spec.val,
        spec.size,
        spec.size,
        audit.pair_balance[0],
        audit.pair_balance[1],
        audit.oracle_with_context,
        audit.oracle_without_context,
        audit.local_ceilings,
        audit.global_ceiling
    );
    Ok(Report::ok(text))
}

pub fn seg_config(cfg: &RunConfig) -> Result<SegConfig> {
    let backbone = match cfg.get("model.backbone") {
        "mini" => {
            let w = cfg.usize("model.width")?;
            BackboneConfig::basic([w, 2 * w, 4 * w, 4 * w], w)
        }
        "desk" => BackboneConfig::desk(),
        "resnet50" => BackboneConfig::resnet50(),
        other => return Err(Error::Config(format!("model.backbone '{other}' is not mini | desk | resnet50"))),
    };
    let head_width = cfg.usize("model.head_width")?;
    let config = SegConfig {
        k: cfg.usize("model.k")?,
        se_weight: cfg.f64("loss.alpha")?,
        stage3_branch: cfg.bool("model.stage3_branch")?,
        head_width: (head_width > 0).then_some(head_width),
        ..SegConfig::new(backbone, synth::NUM_CLASSES)
    };
    config.validate()?;
    Ok(config)
}

pub fn build_seg<T: Real>(cfg: &RunConfig, store: &mut ParamStore<T>) -> Result<SegNet> {
    let config = seg_config(cfg)?;
    let mut rng = stream_rng(cfg.u64("seed")?, Stream::Init, 0, 0);
    match cfg.get("model.variant") {
        "fcn" => build_fcn(store, &config, &mut rng),
        "encnet" => build_encnet(store, &config, &mut rng),
        other => Err(Error::Config(format!("model.variant '{other}' is not fcn | encnet"))),
    }
}

pub fn cifar_config(cfg: &RunConfig) -> Result<CifarConfig> {
    let variant: CifarVariant = cfg.get("model.variant").parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let config = CifarConfig {
        k: cfg.usize("model.k")?,
        se_reduction: cfg.usize("model.se_reduction")?,
        stochastic: cfg.bool("model.stochastic")?,
        ..CifarConfig::new(variant, cfg.usize("model.width")?)
    };
    config.validate()?;
    Ok(config)
}

pub fn build_cifar<T: Real>(cfg: &RunConfig, store: &mut ParamStore<T>) -> Result<CifarNet> {
    let config = cifar_config(cfg)?;
    build_cifar_net(store, &config, &mut stream_rng(cfg.u64("seed")?, Stream::Init, 0, 0))
}

fn train_config(cfg: &RunConfig, out: &Path) -> Result<TrainConfig> {
    let mut schedule = Schedule::parse(cfg.get("optim.schedule")).map_err(|e| Error::Config(e.to_string()))?;
    if let Schedule::Poly { power } = &mut schedule {
        *power = cfg.f64("optim.power")?;
    }
    let mut t = TrainConfig::new(
        cfg.usize("optim.epochs")?,
        cfg.usize("optim.batch_size")?,
        cfg.f64("optim.base_lr")?,
        schedule,
        cfg.f64("optim.weight_decay")?,
    );
    t.momentum = cfg.f64("optim.momentum")?;
    t.devices = cfg.usize("syncbn.devices")?;
    t.seed = cfg.u64("seed")?;
    t.eval_batch = cfg.usize("eval.batch")?;
    t.wall_clock = cfg.bool("log.wall_clock")?;
    t.snapshot = Some(out.join("diverged.bin"));
    Ok(t)
}

fn limit<S>(mut v: Vec<S>, n: usize) -> Vec<S> {
    if n > 0 {
        v.truncate(n);
    }
    v
}

fn seg_samples<T: Real>(items: &[synth::SynthItem]) -> Vec<SegSample<T>> {
    items.iter().map(|it| SegSample { image: it.sample.image.cast(), mask: it.sample.mask.clone() }).collect()
}

fn load_synth(cfg: &RunConfig) -> Result<synth::SynthDataset> {
    let path = PathBuf::from(cfg.get("data.path"));
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset {} not found; run synth-gen with the same data.path first", path.display()),
        )));
    }
    synth::read_dataset(&path)
}

fn checkpoint_metadata(cfg: &RunConfig, command: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("command".to_string(), command.to_string()),
        // the output location is not part of the run's identity
        ("config".to_string(), cfg.render().lines().filter(|l| !l.starts_with("out.dir ")).map(|l| format!("{l}\n")).collect()),
        ("precision".to_string(), cfg.get("precision").to_string()),
    ])
}

fn iou_json(cm: &ConfusionMatrix) -> Vec<Value> {
    (0..cm.num_classes).map(|c| cm.iou(c).map_or(Value::Null, |v| json!(v))).collect()
}

fn seg_summary(cm: &ConfusionMatrix, convention: Convention) -> Result<Value> {
    Ok(json!({
        "pixAcc": cm.pixel_accuracy().ok_or(Error::EmptyEvaluation)?,
        "mIoU": cm.mean_iou(convention).ok_or(Error::EmptyEvaluation)?,
        "ambiguous_mIoU": ambiguous_miou(cm),
        "per_class_iou": iou_json(cm),
    }))
}

fn record_json(rec: &EpochRecord) -> Value {
    json!({
        "epoch": rec.epoch,
        "iter": rec.iter,
        "lr": rec.lr,
        "seg_loss": rec.losses.seg,
        "se_loss": rec.losses.se,
        "total_loss": rec.losses.total,
    })
}

fn run_seg<T: Real>(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let data = load_synth(cfg)?;
    let train: Vec<SegSample<T>> = limit(seg_samples(&data.train), cfg.usize("data.train_limit")?);
    let val: Vec<SegSample<T>> = limit(seg_samples(&data.val), cfg.usize("data.test_limit")?);
    let mut store = ParamStore::new();
    let net = build_seg(cfg, &mut store)?;
    let convention = Convention::parse(cfg.get("eval.convention")).map_err(|e| Error::Config(e.to_string()))?;
    let settings = SegTrainSettings {
        train: train_config(cfg, out)?,
        augment: if cfg.bool("data.augment")? { Some(AugmentConfig::new(cfg.usize("data.crop")?)) } else { None },
        ignore_label: IGNORE_LABEL,
        convention,
    };
    let mut csv = BufWriter::new(File::create(out.join(METRICS_CSV))?);
    let records = train_seg(&net, &mut store, &train, &val, &settings, Some(&mut csv))?;
    drop(csv);
    save_store(&store, &checkpoint_metadata(cfg, "train-seg"), &out.join(CHECKPOINT))?;
    let last = records.last().expect("at least one epoch");
    let mut summary = seg_summary(&last.confusion, convention)?;
    summary["final"] = record_json(last);
    summary["parameters"] = json!(store.num_parameters());
    summary["epochs"] = Value::Array(records.iter().map(record_json).collect());
    Ok(summary)
}

pub fn train_seg_command(cfg: &RunConfig) -> Result<Report> {
    let out = out_dir(cfg)?;
    let summary = match precision(cfg)? {
        32 => run_seg::<f32>(cfg, &out)?,
        _ => run_seg::<f64>(cfg, &out)?,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(Report::ok(format!(
        "{} {}: val mIoU {:.4}, pixAcc {:.4}, ambiguous mIoU {}\noutputs in {}\n",
        cfg.get("model.variant"),
        cfg.get("model.backbone"),
        summary["mIoU"].as_f64().unwrap_or(f64::NAN),
        summary["pixAcc"].as_f64().unwrap_or(f64::NAN),
        summary["ambiguous_mIoU"],
        out.display()
    )))
}

fn cifar_samples<T: Real>(cfg: &RunConfig) -> Result<(Vec<ClassSample<T>>, Vec<ClassSample<T>>)> {
    let (train, test) = ingest_cifar10(Path::new(cfg.get("data.path")))?;
    let (mean, std) = (cfg.f64_list("data.mean")?, cfg.f64_list("data.std")?);
    if mean.len() != 3 || std.len() != 3 || std.iter().any(|s| *s <= 0.0) {
        return Err(Error::Config("data.mean and data.std need three values, std positive".into()));
    }
    let norm = Standardize { mean: [mean[0], mean[1], mean[2]], std: [std[0], std[1], std[2]] };
    let train = limit(train, cfg.usize("data.train_limit")?);
    let test = limit(test, cfg.usize("data.test_limit")?);
    Ok((train.iter().map(|r| r.to_sample(&norm)).collect(), test.iter().map(|r| r.to_sample(&norm)).collect()))
}

fn run_cifar<T: Real>(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let (train, test) = cifar_samples::<T>(cfg)?;
    let mut store = ParamStore::new();
    let net = build_cifar(cfg, &mut store)?;
    let tc = train_config(cfg, out)?;
    let mut csv = BufWriter::new(File::create(out.join(METRICS_CSV))?);
    let records = train_classifier(&net, &mut store, &train, &test, &tc, cfg.bool("data.augment")?, Some(&mut csv))?;
    drop(csv);
    save_store(&store, &checkpoint_metadata(cfg, "train-cifar"), &out.join(CHECKPOINT))?;
    let last = records.last().expect("at least one epoch");
    Ok(json!({
        "test_error": 1.0 - last.pix_acc,
        "final": record_json(last),
        "parameters": store.num_parameters(),
        "epochs": records.iter().map(record_json).collect::<Vec<_>>(),
    }))
}

pub fn train_cifar_command(cfg: &RunConfig) -> Result<Report> {
    let out = out_dir(cfg)?;
    let summary = match precision(cfg)? {
        32 => run_cifar::<f32>(cfg, &out)?,
        _ => run_cifar::<f64>(cfg, &out)?,
    };
    write_json(&out.join(SUMMARY), &summary)?;
    Ok(Report::ok(format!(
        "{} width {}: test error {:.4}\noutputs in {}\n",
        cfg.get("model.variant"),
        cfg.get("model.width"),
        summary["test_error"].as_f64().unwrap_or(f64::NAN),
        out.display()
    )))
}

fn eval_seg<T: Real>(cfg: &RunConfig, container: &Container) -> Result<Value> {
    let data = load_synth(cfg)?;
    let val: Vec<SegSample<T>> = limit(seg_samples(&data.val), cfg.usize("data.test_limit")?);
    let mut store = ParamStore::new();
    let net = build_seg(cfg, &mut store)?;
    load_into_store(container, &mut store)?;
    let scales = cfg.f64_list("eval.scales")?;
    let flip = cfg.bool("eval.flip")?;
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    for chunk in val.chunks(cfg.usize("eval.batch")?.max(1)) {
        let images = encnet::data::stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let probs = multi_scale_eval(&net, &mut store, &images, &scales, flip)?;
        let gt: Vec<i32> = chunk.iter().flat_map(|s| s.mask.labels.iter().copied()).collect();
        cm.add(&argmax_classes(&probs), &gt, IGNORE_LABEL)?;
    }
    let convention = Convention::parse(cfg.get("eval.convention")).map_err(|e| Error::Config(e.to_string()))?;
    let mut v = seg_summary(&cm, convention)?;
    v["scales"] = json!(scales);
    v["flip"] = json!(flip);
    Ok(v)
}

fn eval_cifar<T: Real>(cfg: &RunConfig, container: &Container) -> Result<Value> {
    let (_, test) = cifar_samples::<T>(cfg)?;
    let mut store = ParamStore::new();
    let net = build_cifar(cfg, &mut store)?;
    load_into_store(container, &mut store)?;
    let cm = evaluate_classifier(&net, &mut store, &test, cfg.usize("eval.batch")?)?;
    let acc = cm.pixel_accuracy().ok_or(Error::EmptyEvaluation)?;
    Ok(json!({ "accuracy": acc, "test_error": 1.0 - acc }))
}

/// Rebuilds the model recorded in `checkpoint` and evaluates it. Keys in
/// `overrides` are applied on top of the configuration stored with the
/// checkpoint.
pub fn eval(checkpoint: &Path, overrides: &[String]) -> Result<Report> {
    let container = Container::read(checkpoint)?;
    let meta = &container.manifest.metadata;
    let stored = meta.get("config").ok_or_else(|| Error::Format(format!("{}: no configuration in checkpoint", checkpoint.display())))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(stored, &format!("{}:config", checkpoint.display()))?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    let p = precision(&cfg)?;
    let value = match (meta.get("command").map(String::as_str), p) {
        (Some("train-seg"), 32) => eval_seg::<f32>(&cfg, &container)?,
        (Some("train-seg"), _) => eval_seg::<f64>(&cfg, &container)?,
        (Some("train-cifar"), 32) => eval_cifar::<f32>(&cfg, &container)?,
        (Some("train-cifar"), _) => eval_cifar::<f64>(&cfg, &container)?,
        (other, _) => return Err(Error::Format(format!("checkpoint was written by {other:?}, not a training command"))),
    };
    Ok(Report::ok(serde_json::to_string_pretty(&value)? + "\n"))
}

fn time_forward(net: &SegNet, store: &mut ParamStore<f32>, input: &Tensor<f32>, iters: usize) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..iters.max(1) {
        let start = Instant::now();
        let mut f = Forward::new(store, Mode::Eval).without_grads();
        let x = f.input(input.clone());
        net.forward(&mut f, x)?;
        best = best.min(start.elapsed().as_secs_f64());
    }
    Ok(best * 1e3)
}

/// Parameter counts of both heads on one backbone; `(fcn, encnet)`.
pub fn head_parameters(config: &SegConfig) -> Result<(usize, usize)> {
    let mut fcn = ParamStore::<f32>::new();
    build_fcn(&mut fcn, config, &mut stream_rng(0, Stream::Init, 0, 0))?;
    let mut enc = ParamStore::<f32>::new();
    build_encnet(&mut enc, config, &mut stream_rng(0, Stream::Init, 0, 0))?;
    Ok((fcn.num_parameters(), enc.num_parameters()))
}

pub fn bench(cfg: &RunConfig) -> Result<Report> {
    let out = out_dir(cfg)?;
    let mut text = String::new();
    let mut rows = Vec::new();
    let mut passed = true;
    for (name, config) in [("desk", SegConfig::new(BackboneConfig::desk(), synth::NUM_CLASSES)), ("resnet50", SegConfig::resnet50(59))] {
        let (fcn, enc) = head_parameters(&config)?;
        let ratio = enc as f64 / fcn as f64;
        // the budget applies to the desk-scale backbone
        if name == "desk" {
            passed &= ratio < HEAD_BUDGET;
        }
        text += &format!("{name:<9} params FCN {fcn:>10}  EncNet {enc:>10}  EncNet/FCN ratio {ratio:.4}\n");
        rows.push(json!({ "backbone": name, "fcn_params": fcn, "encnet_params": enc, "ratio": ratio }));
    }
    let (batch, crop, iters) = (cfg.usize("bench.batch")?, cfg.usize("data.crop")?, cfg.usize("bench.iters")?);
    let config = SegConfig::new(BackboneConfig::desk(), synth::NUM_CLASSES);
    let mut rng = stream_rng(cfg.u64("seed")?, Stream::Data, 9, 0);
    let input = encnet::nn::init::uniform::<f32>(&[batch, 3, crop, crop], 1.0, &mut rng);
    let mut times = Vec::new();
    for (label, build) in [("FCN", build_fcn::<f32> as fn(&mut _, &_, &mut _) -> _), ("EncNet", build_encnet::<f32>)] {
        let mut store = ParamStore::new();
        let net = build(&mut store, &config, &mut stream_rng(0, Stream::Init, 0, 0))?;
        let ms = time_forward(&net, &mut store, &input, iters)?;
        text += &format!("desk {label:<7} forward {ms:>9.2} ms (batch {batch}, {crop}x{crop}, best of {iters})\n");
        times.push(ms);
    }
    text += &format!("EncNet/FCN forward time ratio {:.3}\n", times[1] / times[0]);
    write_json(
        &out.join("bench.json"),
        &json!({ "parameters": rows, "forward_ms": { "fcn": times[0], "encnet": times[1] }, "batch": batch, "crop": crop }),
    )?;
    Ok(Report { text, passed })
}
