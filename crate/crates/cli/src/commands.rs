use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use painvit::dataset::{self, ingest, Dataset};
use painvit::fusion::{calibrate_extractor, read_embedding_dump, write_embedding_dump, DiagramSamples, SampleEmbeddings};
use painvit::model::{accounting, checkpoint, PainViT, PainViTConfig};
use painvit::training::{evaluate, train_with, Metrics};
use painvit::waveform::{self, Modality, Series};
use painvit::{Error, Tensor};

use crate::config::RunConfig;
use crate::{Cli, Command, PipelineArgs};

/// Command failure with its exit-code category.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::Data(_)) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult {
    let mut cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    let root = cli.global.run_root.as_deref();
    match cli.command {
        Command::SynthData {
            out,
            per_class,
            noise,
            fnirs_len,
            exclude,
        } => {
            let mut spec = cfg.synthetic.clone();
            spec.seed = cfg.seed;
            if let Some(n) = per_class {
                spec.per_class = n;
            }
            if let Some(n) = noise {
                spec.noise = n;
            }
            if let Some(n) = fnirs_len {
                spec.fnirs_len = n;
            }
            if !exclude.is_empty() {
                spec.excluded = exclude;
            }
            dataset::synth(&spec, &out)?;
            println!(
                "wrote {} samples ({} per class) to {}",
                spec.per_class * dataset::NUM_CLASSES,
                spec.per_class,
                out.display()
            );
            Ok(())
        }
        Command::RenderWaveform {
            input,
            channel,
            with,
            out,
            text,
        } => render_waveform(&cfg, root, &input, &channel, with.as_deref(), out, text),
        Command::ExtractEmbeddings { data, model1, out } => {
            cfg.validate()?;
            let dir = cfg.prepare_run_dir(root)?;
            let ds = load_dataset(&data)?;
            let m1 = extractor(&cfg, model1.as_deref(), &ds, &dir)?;
            let emb = extract_all(&ds, &m1)?;
            let path = out.unwrap_or_else(|| dir.join("embeddings.csv"));
            write_embedding_dump(fs::File::create(&path)?, &emb)?;
            println!("wrote embeddings of {} samples to {}", emb.len(), path.display());
            Ok(())
        }
        Command::Fuse {
            embeddings,
            data,
            pipeline,
            out_dir,
        } => {
            let labels = dataset::read_labels(&data)?;
            let emb = read_embedding_dump(fs::File::open(&embeddings)?, &labels)?;
            let dir = match out_dir {
                Some(d) => d,
                None => cfg.prepare_run_dir(root)?.join("diagrams"),
            };
            fs::create_dir_all(&dir)?;
            for e in &emb {
                let img = e.diagram_input(pipeline.modality, pipeline.fusion)?.render()?;
                img.save_png(dir.join(format!("{}.png", e.id)))?;
            }
            println!("wrote {} diagrams to {}", emb.len(), dir.display());
            Ok(())
        }
        Command::Train {
            data,
            val_data,
            pipeline,
            model1,
            epochs,
            lr,
            batch_size,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(e / 2);
                cfg.train.cooldown_epochs = cfg.train.cooldown_epochs.min(e / 2);
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            train_cmd(&cfg, root, &data, val_data.as_deref(), &pipeline, model1.as_deref())
        }
        Command::Eval {
            data,
            model1,
            model2,
            pipeline,
            out,
        } => {
            let ds = load_dataset(&data)?;
            let m1 = checkpoint::load(&model1)?;
            let m2 = checkpoint::load(&model2)?;
            let emb = extract_all(&ds, &m1)?;
            let samples = DiagramSamples::build(&emb, pipeline.modality, pipeline.fusion, m2.config().in_channels)?;
            let metrics = evaluate(&m2, &samples, 16)?;
            let path = match out {
                Some(p) => p,
                None => cfg.prepare_run_dir(root)?.join("metrics.csv"),
            };
            write_metrics(&path, &metrics, samples.labels.len())?;
            println!(
                "accuracy {:.4}  macro P {:.4}  macro R {:.4}  macro F1 {:.4}  -> {}",
                metrics.accuracy,
                metrics.macro_precision,
                metrics.macro_recall,
                metrics.macro_f1,
                path.display()
            );
            Ok(())
        }
        Command::AttentionMap {
            checkpoint: ckpt,
            image,
            data,
            sample,
            stage,
            depth,
            out_dir,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let img = match (image, data, sample) {
                (Some(p), _, _) => load_png(&p, model.config())?,
                (None, Some(d), Some(id)) => {
                    let ds = load_dataset(&d)?;
                    let s = ds
                        .samples
                        .iter()
                        .find(|s| s.id == id)
                        .ok_or_else(|| Error::Data(format!("sample {id} not in {}", d.display())))?;
                    load_png(&s.frame_paths[0], model.config())?
                }
                _ => return Err(CliError::Usage("give --image or --data with --sample".into())),
            };
            let dir = match out_dir {
                Some(d) => d,
                None => cfg.prepare_run_dir(root)?.join("attention"),
            };
            attention_map(&model, &img, stage, depth, &dir)
        }
        Command::CountParams { image_size } => count_params(&cfg, image_size),
    }
}

fn load_dataset(root: &Path) -> CliResult<Dataset> {
    let ds = ingest(root)?;
    let c = ds.class_counts();
    eprintln!(
        "{}: {} samples (per class {:?}), {} excluded channels",
        root.display(),
        ds.len(),
        c,
        ds.excluded.len()
    );
    Ok(ds)
}

fn render_waveform(
    cfg: &RunConfig,
    root: Option<&Path>,
    input: &Path,
    channel: &str,
    with: Option<&str>,
    out: Option<PathBuf>,
    text: Option<PathBuf>,
) -> CliResult {
    let cols = dataset::read_fnirs(input, &input.display().to_string())?;
    let names = dataset::channel_names();
    let column = |name: &str| -> CliResult<Series> {
        let i = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::Usage(format!("unknown channel {name:?}")))?;
        let kind = if i < dataset::CHANNELS_PER_GROUP { Modality::FnirsHbo } else { Modality::FnirsHbr };
        Ok(Series::new(cols[i].clone(), kind)?)
    };
    let a = column(channel)?;
    let img = match with {
        Some(b) => waveform::render_single_diagram(&a, &column(b)?)?,
        None => waveform::render(&a)?,
    };
    let path = match out {
        Some(p) => p,
        None => cfg.prepare_run_dir(root)?.join(format!("waveform_{channel}.png")),
    };
    img.save_png(&path)?;
    if let Some(t) = text {
        img.save_pnm(&t)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

/// Loads the extractor, or builds one from the config and calibrates its
/// batch norms on a few frames and channels of `ds` (saved to the run dir).
fn extractor(cfg: &RunConfig, ckpt: Option<&Path>, ds: &Dataset, dir: &Path) -> CliResult<PainViT> {
    if let Some(p) = ckpt {
        return Ok(checkpoint::load(p)?);
    }
    let mut m = PainViT::new(cfg.model1.clone(), cfg.seed)?;
    let mut frames = Vec::new();
    let mut channels = Vec::new();
    for s in ds.samples.iter().take(8) {
        let n = s.frame_paths.len();
        frames.push(dataset::load_frame(&s.frame_paths[0])?);
        frames.push(dataset::load_frame(&s.frame_paths[n / 2])?);
        channels.extend(s.hbo.first().map(|c| c.1.clone()));
        channels.extend(s.hbr.first().map(|c| c.1.clone()));
    }
    calibrate_extractor(&mut m, &frames, &channels)?;
    checkpoint::save(&m, dir.join("model1.ckpt"))?;
    Ok(m)
}

fn extract_all(ds: &Dataset, m1: &PainViT) -> CliResult<Vec<SampleEmbeddings>> {
    let t = Instant::now();
    let mut out = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let frames = s.load_frames()?;
        out.push(SampleEmbeddings::extract(
            s.id.clone(),
            s.label,
            &frames,
            &s.hbo_series(),
            &s.hbr_series(),
            m1,
        )?);
    }
    eprintln!("extracted {} samples in {:.1}s", out.len(), t.elapsed().as_secs_f64());
    Ok(out)
}

fn train_cmd(
    cfg: &RunConfig,
    root: Option<&Path>,
    data: &Path,
    val: Option<&Path>,
    pipeline: &PipelineArgs,
    model1: Option<&Path>,
) -> CliResult {
    cfg.validate()?;
    let dir = cfg.prepare_run_dir(root)?;
    let ds = load_dataset(data)?;
    let m1 = extractor(cfg, model1, &ds, &dir)?;
    let emb = extract_all(&ds, &m1)?;
    write_embedding_dump(fs::File::create(dir.join("embeddings.csv"))?, &emb)?;
    let ch = cfg.model2.in_channels;
    let train_set = DiagramSamples::build(&emb, pipeline.modality, pipeline.fusion, ch)?;
    let val_set = match val {
        Some(v) => {
            let vds = load_dataset(v)?;
            let vemb = extract_all(&vds, &m1)?;
            Some(DiagramSamples::build(&vemb, pipeline.modality, pipeline.fusion, ch)?)
        }
        None => None,
    };
    let mut m2 = PainViT::new(cfg.model2.clone(), cfg.seed.wrapping_add(1))?;
    let mut history = csv::Writer::from_path(dir.join("history.csv"))?;
    history.write_record([
        "epoch",
        "lr",
        "train_loss",
        "steps",
        "val_accuracy",
        "val_macro_precision",
        "val_macro_recall",
        "val_macro_f1",
    ])?;
    let mut log = |r: &painvit::training::EpochRecord, _: &PainViT| -> painvit::Result<()> {
        let v = |f: fn(&Metrics) -> f64| r.val.as_ref().map_or(String::new(), |m| f(m).to_string());
        history.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.steps.to_string(),
            v(|m| m.accuracy),
            v(|m| m.macro_precision),
            v(|m| m.macro_recall),
            v(|m| m.macro_f1),
        ])?;
        history.flush()?;
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}{}",
            r.epoch,
            r.lr,
            r.train_loss,
            r.val.as_ref().map_or(String::new(), |m| format!("  val acc {:.4}", m.accuracy))
        );
        Ok(())
    };
    let outcome = train_with(
        &mut m2,
        &train_set,
        val_set.as_ref().map(|v| v as &dyn painvit::training::Samples),
        &cfg.train,
        &cfg.augment,
        cfg.seed,
        &mut log,
    )?;
    checkpoint::save(&m1, dir.join("model1.ckpt"))?;
    checkpoint::save(&m2, dir.join("model2.ckpt"))?;
    match outcome.best_val_accuracy {
        Some(a) => println!(
            "best val accuracy {a:.4} at epoch {}; checkpoints in {}",
            outcome.best_epoch,
            dir.display()
        ),
        None => println!("trained {} epochs; checkpoints in {}", cfg.train.epochs, dir.display()),
    }
    Ok(())
}

fn write_metrics(path: &Path, m: &Metrics, n: usize) -> CliResult {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "accuracy", "macro_precision", "macro_recall", "macro_f1"])?;
    w.write_record([
        n.to_string(),
        m.accuracy.to_string(),
        m.macro_precision.to_string(),
        m.macro_recall.to_string(),
        m.macro_f1.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn load_png(path: &Path, cfg: &PainViTConfig) -> CliResult<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != cfg.image_size || h != cfg.image_size {
        return Err(Error::Data(format!(
            "{}: image is {w}x{h}, model expects {s}x{s}",
            path.display(),
            s = cfg.image_size
        ))
        .into());
    }
    let plane = w * h;
    let c = cfg.in_channels;
    let mut data = vec![0.0; c * plane];
    for (p, px) in img.pixels().enumerate() {
        if c == 1 {
            data[p] = (f64::from(px[0]) + f64::from(px[1]) + f64::from(px[2])) / (3.0 * 255.0);
        } else {
            for ch in 0..c.min(3) {
                data[ch * plane + p] = f64::from(px[ch]) / 255.0;
            }
        }
    }
    Ok(Tensor::new(&[1, c, h, w], data)?)
}

fn attention_map(model: &PainViT, img: &Tensor, stage: Option<usize>, depth: Option<usize>, dir: &Path) -> CliResult {
    let stage = stage.unwrap_or(2);
    if stage > 2 {
        return Err(CliError::Usage(format!("stage {stage} out of range 0..=2")));
    }
    let depth = depth.unwrap_or(model.config().depths[stage] - 1);
    let weights = model.attention_weights(img, stage, depth)?;
    let w = &weights[0];
    let (heads, n) = (w.shape()[0], w.shape()[1]);
    let grid = model.config().stages()[stage].grid;
    fs::create_dir_all(dir)?;
    let size = model.config().image_size;
    let plane = size * size;
    for h in 0..heads {
        let a = &w.data()[h * n * n..(h + 1) * n * n];
        let mut dump = csv::Writer::from_path(dir.join(format!("head_{h}.csv")))?;
        for row in a.chunks(n) {
            dump.write_record(row.iter().map(f64::to_string))?;
        }
        dump.flush()?;
        // attention each key token receives, averaged over queries
        let mut heat: Vec<f64> = (0..n).map(|k| (0..n).map(|q| a[q * n + k]).sum::<f64>() / n as f64).collect();
        let (lo, hi) = heat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
        for v in &mut heat {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
        let mut buf = Vec::with_capacity(3 * plane);
        for y in 0..size {
            for x in 0..size {
                let t = heat[(y * grid.0 / size) * grid.1 + x * grid.1 / size];
                let base: Vec<f64> = (0..3)
                    .map(|c| img.data()[(c.min(img.shape()[1] - 1)) * plane + y * size + x])
                    .collect();
                let overlay = [t, 0.0, 1.0 - t];
                for c in 0..3 {
                    let v = 0.5 * base[c] + 0.5 * overlay[c];
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        image::save_buffer(
            dir.join(format!("head_{h}.png")),
            &buf,
            size as u32,
            size as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(Error::from)?;
    }
    println!(
        "stage {stage} block {depth}: {heads} heads over {n} tokens ({}x{}) -> {}",
        grid.0,
        grid.1,
        dir.display()
    );
    Ok(())
}

fn count_params(cfg: &RunConfig, image_size: Option<usize>) -> CliResult {
    let mut total_p = 0;
    let mut total_m = 0u64;
    println!("{:<10} {:>12} {:>10} {:>10}", "model", "params", "GMACs", "GFLOPs");
    for (name, c) in [("PainViT-1", &cfg.model1), ("PainViT-2", &cfg.model2)] {
        let size = image_size.unwrap_or(c.image_size);
        let p = accounting::count_params(c)?;
        let m = accounting::count_macs(c, size)?;
        total_p += p;
        total_m += m;
        println!("{name:<10} {p:>12} {:>10.3} {:>10.3}", m as f64 / 1e9, 2.0 * m as f64 / 1e9);
    }
    println!(
        "{:<10} {total_p:>12} {:>10.3} {:>10.3}",
        "total",
        total_m as f64 / 1e9,
        2.0 * total_m as f64 / 1e9
    );
    println!("(1 MAC = 2 FLOPs; reference figures count MACs)");
    println!();
    println!("breakdown (PainViT-1)");
    println!("{:<16} {:>12} {:>14}", "component", "params", "MACs");
    let size = image_size.unwrap_or(cfg.model1.image_size);
    for row in accounting::breakdown(&cfg.model1, size)? {
        println!("{:<16} {:>12} {:>14}", row.name, row.params, row.macs);
    }
    Ok(())
}
