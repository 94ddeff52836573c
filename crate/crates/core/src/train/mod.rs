//! Alternating adversarial optimization with ablation toggles, run logs and
//! resumable checkpoints.

mod checkpoint;
mod optim;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::image::{DisparitySign, ImageTensor, ValueDomain};
use crate::imageops;
use crate::losses::{self, GeneratorParts, LossBreakdown, LossWeights, WarpTarget};
use crate::model::{self, init_model, Bound, ModelState, NetConfig, StyleCode};

pub use checkpoint::{load_checkpoint, load_model, save_checkpoint, save_model, Checkpoint, CHECKPOINT_VERSION};
pub use optim::Adam;

pub const RUN_LOG: &str = "run_log.jsonl";
pub const TIMING_LOG: &str = "timing.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Which of the two stereo-specific additions are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_edges: bool,
    pub use_warp: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_edges: true,
            use_warp: true,
        }
    }
}

impl Ablation {
    /// Parses `none`, `edge`, `disp` or `edge+disp`.
    pub fn parse(s: &str) -> Option<Self> {
        let (use_edges, use_warp) = match s {
            "none" => (false, false),
            "edge" => (true, false),
            "disp" => (false, true),
            "edge+disp" | "disp+edge" => (true, true),
            _ => return None,
        };
        Some(Self { use_edges, use_warp })
    }

    pub fn label(&self) -> &'static str {
        match (self.use_edges, self.use_warp) {
            (false, false) => "none",
            (true, false) => "edge",
            (false, true) => "disp",
            (true, true) => "edge+disp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 4,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 0,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("train.epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            p.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.log_every == 0 {
            p.push("train.log_every must be >= 1".to_string());
        }
        p.extend(self.weights.problems());
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    /// Seed of the data order, kept apart from the initialization stream.
    pub fn data_seed(&self) -> u64 {
        self.seed ^ 0x9e37_79b9_7f4a_7c15
    }
}

/// Model plus optimizer state; everything a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: ModelState) -> Self {
        let opt_g = Adam::for_params(model.encoder.tensors().iter().chain(model.decoder.tensors()));
        let opt_d = Adam::for_params(model.dis_a.tensors().iter().chain(model.dis_b.tensors()));
        Self {
            model,
            opt_g,
            opt_d,
            step: 0,
        }
    }

    pub fn init(net: &NetConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(init_model(net, seed)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Zero-based index of the step.
    pub step: u64,
    pub epoch: u64,
    pub losses: LossBreakdown,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
    /// Wall time of the step; not part of the deterministic run log.
    pub wall_ms: f64,
}

impl StepRecord {
    /// Deterministic run-log line (no timing).
    pub fn log_line(&self) -> String {
        let mut v = serde_json::json!({ "step": self.step, "epoch": self.epoch });
        for (k, x) in self.losses.fields() {
            v[k] = x.into();
        }
        v["grad_norm_g"] = self.grad_norm_g.into();
        v["grad_norm_d"] = self.grad_norm_d.into();
        v.to_string()
    }

    pub fn timing_line(&self) -> String {
        serde_json::json!({ "step": self.step, "wall_ms": self.wall_ms }).to_string()
    }
}

fn stack(images: &[&ImageTensor]) -> Result<Tensor> {
    Tensor::stack(images)
}

fn edge_tensor(edges: &[ImageTensor], channels: usize) -> Result<Tensor> {
    let rep: Vec<ImageTensor> = edges
        .iter()
        .map(|e| if e.channels() == channels { Ok(e.clone()) } else { e.replicate_channels(channels) })
        .collect::<Result<_>>()?;
    stack(&rep.iter().collect::<Vec<_>>())
}

/// Sobel edges of generated images, as a detached encoder input.
fn edges_of(g: &Graph, x: Var, channels: usize) -> Result<Tensor> {
    let imgs = g.value(x).to_images(ValueDomain::Signed)?;
    let edges: Vec<ImageTensor> = imgs.iter().map(imageops::sobel_edges).collect::<Result<_>>()?;
    edge_tensor(&edges, channels)
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

fn collect_grads(g: &Graph, grads: &mut crate::autograd::Gradients, bounds: &[&Bound]) -> Vec<Tensor> {
    bounds
        .iter()
        .flat_map(|b| b.vars().iter())
        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect()
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item() as f64
}

/// One discriminator update on detached fakes followed by one generator
/// update. On error the state may hold the discriminator update of the
/// failed step and should be discarded.
pub fn train_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, sign: DisparitySign) -> Result<StepRecord> {
    let started = Instant::now();
    let net = st.model.config.clone();
    let (rows, cols) = batch.dims();
    model::check_divisible(&net, rows, cols)?;
    if batch.edge_count() != batch.image_count() {
        return Err(Error::Contract("batch edge maps do not match its images".into()));
    }
    let ch = net.input_channels;
    let w = &cfg.weights;
    let ab = cfg.ablation;
    let (style_a, style_b): (StyleCode, StyleCode) = (st.model.style_a.clone(), st.model.style_b.clone());

    // Generator forward.
    let mut g = Graph::new();
    let enc = st.model.encoder.bind(&mut g, true);
    let dec = st.model.decoder.bind(&mut g, true);
    let lefts: Vec<&ImageTensor> = batch.synthetic.iter().map(|t| &t.left).collect();
    let xa_t = stack(&lefts)?;
    let xb_t = stack(&batch.real.iter().collect::<Vec<_>>())?;
    let xa = g.constant(xa_t.clone());
    let xb = g.constant(xb_t.clone());
    let ea = if ab.use_edges { Some(g.constant(edge_tensor(&batch.left_edges, ch)?)) } else { None };
    let eb = if ab.use_edges { Some(g.constant(edge_tensor(&batch.real_edges, ch)?)) } else { None };

    let ce_a = model::content_edge_graph(&net, &mut g, &enc, xa, ea)?;
    let ce_b = model::content_edge_graph(&net, &mut g, &enc, xb, eb)?;
    let x_aa = model::decode_graph(&net, &mut g, &dec, ce_a, &style_a)?;
    let x_bb = model::decode_graph(&net, &mut g, &dec, ce_b, &style_b)?;
    let x_ab = model::decode_graph(&net, &mut g, &dec, ce_a, &style_b)?;
    let x_ba = model::decode_graph(&net, &mut g, &dec, ce_b, &style_a)?;

    let e_ab = if ab.use_edges { Some(g.constant(edges_of(&g, x_ab, ch)?)) } else { None };
    let e_ba = if ab.use_edges { Some(g.constant(edges_of(&g, x_ba, ch)?)) } else { None };
    let ce_ab = model::content_edge_graph(&net, &mut g, &enc, x_ab, e_ab)?;
    let ce_ba = model::content_edge_graph(&net, &mut g, &enc, x_ba, e_ba)?;
    let x_aba = model::decode_graph(&net, &mut g, &dec, ce_ab, &style_a)?;
    let x_bab = model::decode_graph(&net, &mut g, &dec, ce_ba, &style_b)?;

    let rec_aa = losses::l1_graph(&mut g, x_aa, xa)?;
    let rec_bb = losses::l1_graph(&mut g, x_bb, xb)?;
    let cyc_aba = losses::l1_graph(&mut g, x_aba, xa)?;
    let cyc_bab = losses::l1_graph(&mut g, x_bab, xb)?;

    let warp = if ab.use_warp {
        let rights: Vec<&ImageTensor> = batch.synthetic.iter().map(|t| &t.right).collect();
        let xr = g.constant(stack(&rights)?);
        let er = if ab.use_edges { Some(g.constant(edge_tensor(&batch.right_edges, ch)?)) } else { None };
        let ce_r = model::content_edge_graph(&net, &mut g, &enc, xr, er)?;
        let x_rb = model::decode_graph(&net, &mut g, &dec, ce_r, &style_b)?;
        let disps: Vec<&ImageTensor> = batch.synthetic.iter().map(|t| &t.disparity).collect();
        let target = WarpTarget::new(&disps, sign)?;
        Some(losses::warp_loss_graph(&mut g, x_ab, x_rb, &target, w)?.total)
    } else {
        None
    };

    let mut parts = GeneratorParts {
        rec_aa: scalar(&g, rec_aa),
        rec_bb: scalar(&g, rec_bb),
        cyc_aba: scalar(&g, cyc_aba),
        cyc_bab: scalar(&g, cyc_bab),
        adv_a: 0.0,
        adv_b: 0.0,
        warp: warp.map_or(0.0, |v| scalar(&g, v)),
    };
    losses::total_generator_loss(&parts, w)?;

    // Discriminator update on detached fakes.
    let fake_ab = g.value(x_ab).clone();
    let fake_ba = g.value(x_ba).clone();
    let (total_d, grad_norm_d) = discriminator_step(st, cfg, xa_t, xb_t, fake_ba, fake_ab)?;

    // Generator adversarial terms against the updated discriminators.
    let dis_a = st.model.dis_a.bind(&mut g, false);
    let dis_b = st.model.dis_b.bind(&mut g, false);
    let la = model::discriminate_graph(&net, &mut g, &dis_a, x_ba)?;
    let lb = model::discriminate_graph(&net, &mut g, &dis_b, x_ab)?;
    let adv_a = losses::adversarial_g_graph(&mut g, la);
    let adv_b = losses::adversarial_g_graph(&mut g, lb);
    parts.adv_a = scalar(&g, adv_a);
    parts.adv_b = scalar(&g, adv_b);
    let total_g = losses::total_generator_loss(&parts, w)?;
    let root = losses::total_generator_graph(&mut g, (rec_aa, rec_bb), (cyc_aba, cyc_bab), (adv_a, adv_b), warp, w)?;

    let mut grads = g.backward(root)?;
    let gg = collect_grads(&g, &mut grads, &[&enc, &dec]);
    let grad_norm_g = grad_norm(&gg);
    if !grad_norm_g.is_finite() {
        return Err(Error::Divergence {
            component: "generator gradient".into(),
        });
    }
    {
        let m = &mut st.model;
        let mut params: Vec<&mut Tensor> = m.encoder.tensors_mut().iter_mut().chain(m.decoder.tensors_mut()).collect();
        st.opt_g.step(&mut params, &gg, cfg.learning_rate, cfg.beta1, cfg.beta2)?;
    }

    let losses = LossBreakdown {
        rec_aa: parts.rec_aa,
        rec_bb: parts.rec_bb,
        cyc_aba: parts.cyc_aba,
        cyc_bab: parts.cyc_bab,
        adv_a: parts.adv_a,
        adv_b: parts.adv_b,
        warp: parts.warp,
        total_g,
        total_d,
    };
    losses.check_finite()?;
    let record = StepRecord {
        step: st.step,
        epoch: 0,
        losses,
        grad_norm_g,
        grad_norm_d,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    st.step += 1;
    Ok(record)
}

fn discriminator_step(
    st: &mut TrainState,
    cfg: &TrainConfig,
    real_a: Tensor,
    real_b: Tensor,
    fake_a: Tensor,
    fake_b: Tensor,
) -> Result<(f64, f64)> {
    let net = &st.model.config;
    let mut g = Graph::new();
    let da = st.model.dis_a.bind(&mut g, true);
    let db = st.model.dis_b.bind(&mut g, true);
    let side = |g: &mut Graph, dis: &Bound, real: Tensor, fake: Tensor| -> Result<Var> {
        let r = g.constant(real);
        let f = g.constant(fake);
        let lr = model::discriminate_graph(net, g, dis, r)?;
        let lf = model::discriminate_graph(net, g, dis, f)?;
        Ok(losses::adversarial_d_graph(g, lr, lf))
    };
    let la = side(&mut g, &da, real_a, fake_a)?;
    let lb = side(&mut g, &db, real_b, fake_b)?;
    let total = losses::total_discriminator_loss(scalar(&g, la), scalar(&g, lb))?;
    let root = g.add(la, lb)?;
    let mut grads = g.backward(root)?;
    let gd = collect_grads(&g, &mut grads, &[&da, &db]);
    let norm = grad_norm(&gd);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            component: "discriminator gradient".into(),
        });
    }
    let m = &mut st.model;
    let mut params: Vec<&mut Tensor> = m.dis_a.tensors_mut().iter_mut().chain(m.dis_b.tensors_mut()).collect();
    st.opt_d.step(&mut params, &gd, cfg.learning_rate, cfg.beta1, cfg.beta2)?;
    Ok((total, norm))
}

/// Where and how [`fit`] persists its progress.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Run directory for logs and checkpoints; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    /// Random crop `(rows, cols)` applied to every batch item.
    pub crop: Option<(usize, usize)>,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub total_steps: u64,
}

fn verify_styles(state: &ModelState, expected: &(StyleCode, StyleCode)) -> Result<()> {
    if state.style_a != expected.0 || state.style_b != expected.1 {
        return Err(Error::Contract("style codes changed during training".into()));
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.ckpt"))
}

/// Keeps the log lines of steps before `step`, so a resumed run appends
/// exactly what an uninterrupted one would have written.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Runs `epochs x steps_per_epoch` steps starting from `state.step`.
pub fn fit(state: TrainState, data: &Dataset, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitOutput> {
    fit_with(state, data, cfg, opts, |_| {})
}

/// [`fit`] with a callback invoked after every step.
pub fn fit_with(
    mut state: TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &FitOptions,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<FitOutput> {
    cfg.validate()?;
    state.model.check_layout()?;
    let initial = init_model(&state.model.config, state.model.seed)?;
    let expected = (initial.style_a, initial.style_b);
    verify_styles(&state.model, &expected)?;

    let spe = data.steps_per_epoch(cfg.batch_size) as u64;
    let total = cfg.epochs as u64 * spe;
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    if let Some(dir) = &opts.run_dir {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir, e))?;
        truncate_log(&dir.join(RUN_LOG), state.step)?;
        truncate_log(&dir.join(TIMING_LOG), state.step)?;
    }

    let mut records = Vec::new();
    let mut plan: Option<(u64, crate::data::EpochPlan<'_>)> = None;
    while state.step < end {
        let step = state.step;
        let epoch = step / spe;
        if plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            plan = Some((epoch, data.epoch(cfg.batch_size, opts.crop, cfg.data_seed(), epoch)?));
        }
        let batch = plan.as_ref().expect("plan set above").1.batch((step % spe) as usize)?;
        let mut rec = train_step(&mut state, &batch, cfg, data.disparity_sign)?;
        rec.epoch = epoch;
        let done = state.step;
        if let Some(dir) = &opts.run_dir {
            if step % cfg.log_every as u64 == 0 || done == total {
                append(&dir.join(RUN_LOG), &rec.log_line())?;
                append(&dir.join(TIMING_LOG), &rec.timing_line())?;
            }
            let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every as u64 == 0;
            if periodic || done == end {
                verify_styles(&state.model, &expected)?;
                let ck = Checkpoint {
                    state: state.clone(),
                    train: Some(cfg.clone()),
                };
                save_checkpoint(&checkpoint_path(dir, done), &ck)?;
                save_checkpoint(&dir.join(LATEST_CHECKPOINT), &ck)?;
            }
        }
        on_step(&rec);
        records.push(rec);
    }
    verify_styles(&state.model, &expected)?;
    Ok(FitOutput {
        state,
        records,
        total_steps: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{toy, RealImage};

    fn tiny_net() -> NetConfig {
        NetConfig {
            base_channels: 4,
            downsample_count: 1,
            residual_blocks: 1,
            input_channels: 3,
            discriminator_layers: 2,
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let syn = (0..n).map(|i| toy::toy_tuple(8, 8, i as u64, format!("s{i}")).unwrap()).collect();
        let real = (0..n)
            .map(|i| RealImage {
                image: toy::toy_real(8, 8, i as u64).unwrap(),
                id: format!("r{i}"),
            })
            .collect();
        Dataset::new(syn, real, DisparitySign::Positive).unwrap()
    }

    #[test]
    fn config_problems_are_listed() {
        let cfg = TrainConfig {
            epochs: 0,
            batch_size: 0,
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn ablation_labels_round_trip() {
        for s in ["none", "edge", "disp", "edge+disp"] {
            assert_eq!(Ablation::parse(s).unwrap().label(), s);
        }
        assert!(Ablation::parse("warp").is_none());
    }

    #[test]
    fn step_partitions_parameters() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let start = TrainState::init(&tiny_net(), 3).unwrap();
        let mut st = start.clone();
        let batch = data.epoch(2, None, 0, 0).unwrap().batch(0).unwrap();
        let rec = train_step(&mut st, &batch, &cfg, DisparitySign::Positive).unwrap();
        assert_ne!(st.model.encoder, start.model.encoder);
        assert_ne!(st.model.decoder, start.model.decoder);
        assert_ne!(st.model.dis_a, start.model.dis_a);
        assert_eq!(st.model.style_a, start.model.style_a);
        assert_eq!(st.model.style_b, start.model.style_b);
        let sum = rec.losses.weighted_generator_sum(&cfg.weights);
        assert!((sum - rec.losses.total_g).abs() <= 1e-6 * sum.abs());

        let mut again = start.clone();
        let rec2 = train_step(&mut again, &batch, &cfg, DisparitySign::Positive).unwrap();
        assert_eq!(again, st);
        assert_eq!(rec.log_line(), rec2.log_line());
    }

    #[test]
    fn discriminator_steps_reduce_its_loss() {
        let data = tiny_data(1);
        let batch = data.epoch(1, None, 0, 0).unwrap().batch(0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut st = TrainState::init(&tiny_net(), 2).unwrap();
        let real_a = Tensor::from_image(&batch.synthetic[0].left);
        let real_b = Tensor::from_image(&batch.real[0]);
        let fake = |t: &Tensor| Tensor::from_vec(t.shape(), t.data().iter().map(|v| -v * 0.5).collect()).unwrap();
        let (fa, fb) = (fake(&real_b), fake(&real_a));
        let mut losses = Vec::new();
        for _ in 0..20 {
            let (l, _) = discriminator_step(&mut st, &cfg, real_a.clone(), real_b.clone(), fa.clone(), fb.clone()).unwrap();
            losses.push(l);
        }
        assert!(losses[19] < losses[0] - 0.1, "{losses:?}");
    }

    #[test]
    fn warp_off_records_zero() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            ablation: Ablation::parse("none").unwrap(),
            ..TrainConfig::default()
        };
        let out = fit(TrainState::init(&tiny_net(), 1).unwrap(), &data, &cfg, &FitOptions::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records.iter().all(|r| r.losses.warp == 0.0));
    }
}
