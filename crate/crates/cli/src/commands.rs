use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use stereo_translate::data::{self, io, toy, DatasetDomain, DatasetManifest, ManifestEntry};
use stereo_translate::eval;
use stereo_translate::imageops;
use stereo_translate::model::{self, init_model, NetConfig};
use stereo_translate::train::{self, Ablation, FitOptions, TrainState, LATEST_CHECKPOINT};
use stereo_translate::{DisparitySign, Error, ImageTensor, Result};

use crate::config::{RunConfig, RUN_DIR_ENV};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

pub fn edges(input: &Path, output: &Path) -> Result<()> {
    let img = io::load_image(input)?;
    io::save_image(output, &imageops::sobel_edges(&img)?)
}

fn default_mask_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}_mask.png"))
}

pub fn warp(left: &Path, disparity: &Path, output: &Path, sign: &str, mask: Option<&Path>) -> Result<()> {
    let sign = DisparitySign::parse(sign).ok_or_else(|| Error::Config(vec![format!("--sign must be +1 or -1, got {sign:?}")]))?;
    let img = io::load_image(left)?;
    let disp = io::load_disparity(disparity)?;
    let (warped, valid) = imageops::warp_horizontal(&img, &disp, sign)?;
    io::save_image(output, &warped)?;
    let bytes: Vec<u8> = valid.data().iter().map(|&v| if v { 255 } else { 0 }).collect();
    let mask_path = mask.map_or_else(|| default_mask_path(output), Path::to_path_buf);
    io::save_png_bytes(&mask_path, &bytes, 1, valid.rows(), valid.cols())
}

/// Flag overrides for `train`.
#[derive(Debug, Default)]
pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub ablation: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<usize>,
    pub workers: Option<usize>,
    pub synthetic: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

pub fn train(opts: TrainOptions) -> Result<()> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut problems = Vec::new();
    if let Some(a) = &opts.ablation {
        match Ablation::parse(a) {
            Some(a) => cfg.train.ablation = a,
            None => problems.push(format!("--ablation must be none, edge, disp or edge+disp, got {a:?}")),
        }
    }
    if let Some(v) = opts.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = opts.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = opts.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = opts.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = opts.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if let Some(v) = opts.workers {
        cfg.data.workers = v;
    }
    if opts.synthetic.is_some() {
        cfg.data.synthetic_manifest = opts.synthetic.clone();
    }
    if opts.real.is_some() {
        cfg.data.real_manifest = opts.real.clone();
    }
    if opts.run_dir.is_some() {
        cfg.output.run_dir = opts.run_dir.clone();
    }
    problems.extend(cfg.problems(true));
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let env = std::env::var(RUN_DIR_ENV).ok();
    let run_dir = absolute(cfg.run_dir(env.as_deref()));
    cfg.output.run_dir = Some(run_dir.clone());
    cfg.data.synthetic_manifest = cfg.data.synthetic_manifest.map(absolute);
    cfg.data.real_manifest = cfg.data.real_manifest.map(absolute);
    mkdir(&run_dir)?;

    let ms = DatasetManifest::load(cfg.data.synthetic_manifest.as_deref().expect("validated"))?;
    let mr = DatasetManifest::load(cfg.data.real_manifest.as_deref().expect("validated"))?;
    let dataset = data::Dataset::load(&ms, &mr, cfg.data.workers)?;
    let dims = match cfg.data.crop {
        Some([r, c]) => (r, c),
        None => dataset.synthetic[0].dims(),
    };
    model::check_divisible(&cfg.net, dims.0, dims.1)?;

    let latest = run_dir.join(LATEST_CHECKPOINT);
    let state = if opts.resume && latest.exists() {
        let ck = train::load_checkpoint(&latest)?;
        if ck.state.model.config != cfg.net || ck.state.model.seed != cfg.train.seed {
            return Err(Error::Config(vec![format!(
                "{} was written with a different net config or seed",
                latest.display()
            )]));
        }
        eprintln!("resuming from step {}", ck.state.step);
        ck.state
    } else {
        TrainState::init(&cfg.net, cfg.train.seed)?
    };
    write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;

    let fit_opts = FitOptions {
        run_dir: Some(run_dir.clone()),
        crop: cfg.data.crop.map(|[r, c]| (r, c)),
        stop_after: opts.stop_after,
    };
    let total = cfg.train.epochs as u64 * dataset.steps_per_epoch(cfg.train.batch_size) as u64;
    let verbose = opts.verbose;
    let out = train::fit_with(state, &dataset, &cfg.train, &fit_opts, |r| {
        if verbose && r.step % cfg.train.log_every as u64 == 0 {
            eprintln!(
                "step {}/{total} total_g {:.5} total_d {:.5} rec_aa {:.5} warp {:.5}",
                r.step + 1,
                r.losses.total_g,
                r.losses.total_d,
                r.losses.rec_aa,
                r.losses.warp
            );
        }
    })?;
    println!("completed {} of {} steps in {}", out.state.step, total, run_dir.display());
    if let Some(r) = out.records.last() {
        println!("{}", r.log_line());
    }
    Ok(())
}

pub fn translate(checkpoint: &Path, manifest: &Path, out: &Path, edges: Option<&str>, workers: usize) -> Result<()> {
    let ck = train::load_checkpoint(checkpoint)?;
    let use_edges = match edges {
        Some("on") => true,
        Some("off") => false,
        Some(other) => return Err(Error::Config(vec![format!("--edges must be on or off, got {other:?}")])),
        None => ck.train.as_ref().is_none_or(|t| t.ablation.use_edges),
    };
    let model = ck.state.model;
    let m = DatasetManifest::load(manifest)?;
    if m.domain != DatasetDomain::Synthetic {
        return Err(Error::Manifest(format!("{}: translate needs a synthetic manifest", manifest.display())));
    }
    let tuples = data::load_synthetic(&m, workers.max(1))?;
    mkdir(out)?;
    let out = absolute(out.to_path_buf());
    let mut translated = DatasetManifest {
        entries: Vec::new(),
        ..m.clone()
    };
    translated.building_classes.clear();
    for t in &tuples {
        let (rows, cols) = t.dims();
        model::check_divisible(&model.config, rows, cols)?;
        let edge_maps = if use_edges {
            Some((imageops::sobel_edges(&t.left)?, imageops::sobel_edges(&t.right)?))
        } else {
            None
        };
        let (l, r) = model::translate_pair(&model, &t.left, &t.right, edge_maps.as_ref().map(|(a, b)| (a, b)))?;
        let lp = out.join(format!("{}_left.png", t.id));
        let rp = out.join(format!("{}_right.png", t.id));
        io::save_image(&lp, &l)?;
        io::save_image(&rp, &r)?;
        let src = m.entries.iter().find(|e| e.id == t.id).expect("loaded from this manifest");
        translated.entries.push(ManifestEntry {
            id: t.id.clone(),
            images: vec![lp, rp],
            disparity: src.disparity.clone().map(absolute),
            labels: None,
        });
    }
    translated.save(&out.join("translated.tsv"))?;
    println!("translated {} pairs into {}", tuples.len(), out.display());
    Ok(())
}

fn ground_truth(m: &DatasetManifest) -> Result<BTreeMap<String, ImageTensor>> {
    let mut out = BTreeMap::new();
    for e in &m.entries {
        let p = e
            .disparity
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("entry {} has no ground-truth disparity", e.id)))?;
        let mut d = io::load_disparity(p)?;
        if let Some((r, c)) = m.resize_to {
            d = data::resize_disparity(&d, r, c)?;
        }
        out.insert(e.id.clone(), d);
    }
    Ok(out)
}

fn predictions(dir: &Path) -> Result<BTreeMap<String, ImageTensor>> {
    let rd = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: dir.to_path_buf() },
        _ => Error::Io {
            path: dir.to_path_buf(),
            source: e,
        },
    })?;
    let mut paths: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("pfm") || e.eq_ignore_ascii_case("dsp"))
        })
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let id = p.file_stem().expect("has extension").to_string_lossy().into_owned();
        let d = io::load_disparity(&p)?;
        if out.insert(id.clone(), d).is_some() {
            return Err(Error::Manifest(format!("two predictions for id {id:?}")));
        }
    }
    Ok(out)
}

pub fn eval(pred_dir: &Path, gt: &Path, out: Option<&Path>) -> Result<()> {
    let m = DatasetManifest::load(gt)?;
    let gts = ground_truth(&m)?;
    let preds = predictions(pred_dir)?;
    let report = eval::evaluate(&preds, &gts)?;
    let out = out.unwrap_or(pred_dir);
    mkdir(out)?;
    write_text(&out.join("report.txt"), &report.to_text())?;
    write_text(&out.join("report.jsonl"), &report.to_jsonl())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn params(config: Option<&Path>, base_channels: Option<usize>) -> Result<()> {
    let mut net = match config {
        Some(p) => RunConfig::load(p)?.net,
        None => NetConfig::default(),
    };
    if let Some(b) = base_channels {
        net.base_channels = b;
    }
    net.validate()?;
    let s = init_model(&net, 0)?;
    println!("encoder {}", s.encoder.numel());
    println!("decoder {}", s.decoder.numel());
    println!("discriminator_a {}", s.dis_a.numel());
    println!("discriminator_b {}", s.dis_b.numel());
    println!("total {}", model::count_params(&s));
    Ok(())
}

pub fn gen_toy(out: &Path, synthetic: usize, real: usize, rows: usize, cols: usize, seed: u64) -> Result<()> {
    let mut p = Vec::new();
    if synthetic == 0 {
        p.push("--synthetic must be >= 1".to_string());
    }
    if real == 0 {
        p.push("--real must be >= 1".to_string());
    }
    if rows < 3 || cols < 3 {
        p.push("--rows and --cols must be >= 3".to_string());
    }
    if !p.is_empty() {
        return Err(Error::Config(p));
    }
    let ds = toy::write_toy_dataset(out, synthetic, real, rows, cols, seed)?;
    println!("{}", ds.synthetic_manifest.display());
    println!("{}", ds.real_manifest.display());
    Ok(())
}
