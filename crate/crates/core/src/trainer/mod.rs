//! Staged training: DHLN pretraining, FPTN pretraining on ground-truth
//! heatmaps, joint finetuning and weakly supervised finetuning.
//!
//! Batches are `batch_size / 2` pairs laid out as `[j_0 … j_{P-1}, k_0 … k_{P-1}]`,
//! so swapping the halves turns every `j → k` transfer into `k → j`. Each
//! pair is drawn from its own RNG seeded by `(seed, phase, step, index)`;
//! a resumed run therefore sees exactly the batches of an uninterrupted one.

mod adam;
mod pairs;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ShtConfig;
use crate::data::{load_image_dataset, load_video_dataset, AnnotatedFace, LoadOptions, VideoSequence};
use crate::dhln::Dhln;
use crate::error::{Result, ShtError};
use crate::fptn::Fptn;
use crate::heatmap::HeatmapStack;
use crate::image::ImageTensor;
use crate::losses::{gan_loss_per_sample, l1_per_sample, loss_dh_batch, GanRole, LossBreakdown, LossTerms, PerceptualExtractor};
use crate::nn::{derive_seed, ParamStore};

pub use adam::{scheduled_lr, Adam};
pub use pairs::{
    crop_for, draw_augmentation, draw_frame_indices, labeled_view, sample_identity_pair, sample_image_pair,
    sample_video_pair, Provenance, TrainingPair, View, MAX_ATTEMPTS, MAX_OUT_OF_FRAME,
};

/// Consecutive non-finite batches after which a phase gives up.
pub const MAX_CONSECUTIVE_ABORTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainDhln,
    PretrainFptn,
    FinetuneSht,
    WeakFinetune,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Self::PretrainDhln, Self::PretrainFptn, Self::FinetuneSht, Self::WeakFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Self::PretrainDhln => "pretrain_dhln",
            Self::PretrainFptn => "pretrain_fptn",
            Self::FinetuneSht => "finetune_sht",
            Self::WeakFinetune => "weak_finetune",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }

    pub fn is_joint(self) -> bool {
        matches!(self, Self::FinetuneSht | Self::WeakFinetune)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = ShtError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ShtError::InvalidConfig(format!("unknown phase `{s}`")))
    }
}

/// Discriminator score extremes and means over one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub min: f64,
    pub max: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: Phase,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: Option<Phase>,
    /// Steps completed in the current phase.
    pub step: usize,
    pub seed: u64,
    pub completed: Vec<Phase>,
    history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self { phase: None, step: 0, seed, completed: Vec::new(), history: Vec::new() }
    }

    /// Moves to `phase`. Re-entering the current phase resumes it; earlier
    /// phases are rejected, later ones may skip intermediate phases.
    pub fn enter(&mut self, phase: Phase) -> Result<()> {
        if let Some(cur) = self.phase {
            if phase < cur {
                return Err(ShtError::PhaseViolation(format!("cannot return to {phase} after {cur}")));
            }
            if phase == cur {
                return Ok(());
            }
        }
        if let Some(done) = self.completed.iter().find(|&&d| d > phase) {
            return Err(ShtError::PhaseViolation(format!("cannot run {phase} after {done}")));
        }
        if phase.is_joint() {
            for need in [Phase::PretrainDhln, Phase::PretrainFptn] {
                if !self.completed.contains(&need) {
                    return Err(ShtError::PhaseViolation(format!("{phase} requires a completed {need} checkpoint")));
                }
            }
        }
        self.phase = Some(phase);
        self.step = 0;
        Ok(())
    }

    pub fn complete(&mut self, phase: Phase) {
        if !self.completed.contains(&phase) {
            self.completed.push(phase);
            self.completed.sort();
        }
    }

    pub fn record(&mut self, r: StepRecord) {
        self.history.push(r);
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }
}

/// Sources for batch sampling.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<AnnotatedFace>,
    /// Annotated-format faces whose labels are ignored.
    pub unlabeled: Vec<AnnotatedFace>,
    pub videos: Vec<VideoSequence>,
}

impl TrainData {
    pub fn labeled(faces: Vec<AnnotatedFace>) -> Self {
        Self { labeled: faces, ..Default::default() }
    }

    fn unlabeled_sources(&self) -> usize {
        self.unlabeled.len() + self.videos.len()
    }
}

/// Batched tensors in `[j…, k…]` order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
    /// Zero maps stand in for unlabeled entries.
    pub heatmaps: Option<Tensor>,
    pub labeled: Vec<bool>,
}

impl Batch {
    pub fn from_pairs(pairs: &[TrainingPair], cfg: &ShtConfig, device: &Device) -> Result<Self> {
        let views: Vec<&View> = pairs.iter().map(|p| &p.j).chain(pairs.iter().map(|p| &p.k)).collect();
        let labeled: Vec<bool> = pairs.iter().chain(pairs).map(|p| p.labeled).collect();
        let lr = ImageTensor::stack(&views.iter().map(|v| &v.lr).collect::<Vec<_>>(), device)?;
        let hr = ImageTensor::stack(&views.iter().map(|v| &v.hr).collect::<Vec<_>>(), device)?;
        let heatmaps = if labeled.iter().any(|&l| l) {
            let hm = cfg.heatmap_size;
            let zero = HeatmapStack::new(vec![0.0; cfg.num_landmarks * hm * hm], cfg.num_landmarks, hm, hm)?;
            let maps: Vec<&HeatmapStack> = views.iter().map(|v| v.heatmaps.as_ref().unwrap_or(&zero)).collect();
            Some(HeatmapStack::stack(&maps, device)?)
        } else {
            None
        };
        Ok(Self { lr, hr, heatmaps, labeled })
    }

    pub fn len(&self) -> usize {
        self.labeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labeled.is_empty()
    }
}

/// `[a…, b…]` → `[b…, a…]`.
pub fn swap_halves(t: &Tensor) -> Result<Tensor> {
    let n = t.dim(0)? / 2;
    Ok(Tensor::cat(&[&t.narrow(0, n, n)?, &t.narrow(0, 0, n)?], 0)?)
}

fn vars_of(ps: &ParamStore, prefix: &str) -> Vec<(String, Var)> {
    ps.vars().map(|(n, v)| (format!("{prefix}{n}"), v.clone())).collect()
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn mean(t: &Tensor) -> Result<Tensor> {
    Ok(t.mean_all()?)
}

fn stats(real: &[&Tensor], fake: &[&Tensor]) -> Result<ScoreStats> {
    let collect = |ts: &[&Tensor]| -> Result<Vec<f64>> {
        Ok(ts.iter().map(|t| t.to_vec1::<f64>()).collect::<candle_core::Result<Vec<_>>>()?.concat())
    };
    let (r, f) = (collect(real)?, collect(fake)?);
    let all = r.iter().chain(&f);
    Ok(ScoreStats {
        min: all.clone().copied().fold(f64::INFINITY, f64::min),
        max: all.copied().fold(f64::NEG_INFINITY, f64::max),
        real_mean: r.iter().sum::<f64>() / r.len() as f64,
        fake_mean: f.iter().sum::<f64>() / f.len() as f64,
    })
}

/// Generator-side transfer tensors for one batch.
struct Transfer {
    i_con: Tensor,
    h_tar: Tensor,
    target: Tensor,
    fake: Tensor,
}

/// Options for [`Trainer::run_phase`].
#[derive(Default)]
pub struct RunOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log: Option<&'a mut dyn Write>,
    /// Stop (without completing the phase) once this many steps are done.
    pub stop_after: Option<usize>,
}

pub struct Trainer {
    cfg: ShtConfig,
    device: Device,
    dhln: Dhln,
    fptn: Fptn,
    phi: Option<PerceptualExtractor>,
    phi_resolved: bool,
    opt_dhln: Adam,
    opt_gen: Adam,
    opt_disc: Adam,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: ShtConfig, device: &Device) -> Result<Self> {
        let cfg = cfg.validate()?;
        let dhln = Dhln::new(&cfg, derive_seed(cfg.seed, 10), device)?;
        let fptn = Fptn::new(&cfg, derive_seed(cfg.seed, 11), device)?;
        let o = &cfg.optim;
        let opt_dhln = Adam::new(vars_of(dhln.params(), ""), o.betas_dhln, o.eps);
        let opt_gen = Adam::new(vars_of(fptn.generator.params(), ""), o.betas_fptn, o.eps);
        let mut disc = vars_of(fptn.d_appearance.params(), "d_appearance.");
        disc.extend(vars_of(fptn.d_shape.params(), "d_shape."));
        let opt_disc = Adam::new(disc, o.betas_fptn, o.eps);
        Ok(Self {
            state: TrainState::new(cfg.seed),
            cfg,
            device: device.clone(),
            dhln,
            fptn,
            phi: None,
            phi_resolved: false,
            opt_dhln,
            opt_gen,
            opt_disc,
        })
    }

    pub fn config(&self) -> &ShtConfig {
        &self.cfg
    }

    pub fn dhln(&self) -> &Dhln {
        &self.dhln
    }

    pub fn fptn(&self) -> &Fptn {
        &self.fptn
    }

    pub fn perceptual(&self) -> Option<&PerceptualExtractor> {
        self.phi.as_ref()
    }

    /// Uses `phi` instead of the configured extractor.
    pub fn set_perceptual(&mut self, phi: Option<PerceptualExtractor>) {
        self.phi = phi;
        self.phi_resolved = true;
    }

    fn resolve_perceptual(&mut self) -> Result<()> {
        if !self.phi_resolved {
            self.phi = PerceptualExtractor::from_config(&self.cfg.perceptual, &self.device)?;
            self.phi_resolved = true;
        }
        Ok(())
    }

    /// Draws the pairs of `step` in `phase`.
    pub fn sample_batch(&self, phase: Phase, step: usize, data: &TrainData) -> Result<Vec<TrainingPair>> {
        let n_pairs = self.cfg.batch_size / 2;
        if data.labeled.is_empty() && phase != Phase::WeakFinetune {
            return Err(ShtError::MissingAnnotation(format!("{phase} needs labeled faces")));
        }
        let n_labeled = match phase {
            Phase::WeakFinetune => {
                if data.unlabeled_sources() == 0 {
                    return Err(ShtError::InvalidConfig("weak_finetune needs unlabeled images or videos".into()));
                }
                if data.labeled.is_empty() {
                    0
                } else {
                    (n_pairs as f64 * self.cfg.labeled_fraction).round() as usize
                }
            }
            _ => n_pairs,
        };
        let base = derive_seed(derive_seed(self.state.seed, 100 + phase.index()), step as u64);
        (0..n_pairs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(base, i as u64));
                if i < n_labeled {
                    let identity = phase == Phase::PretrainFptn && rng.random_bool(self.cfg.fptn.identity_fraction);
                    self.labeled_pair(data, identity, &mut rng)
                } else {
                    let src = rng.random_range(0..data.unlabeled_sources());
                    match data.unlabeled.get(src) {
                        Some(face) => Ok(sample_image_pair(face, &self.cfg, &mut rng)?.unlabeled()),
                        None => sample_video_pair(&data.videos[src - data.unlabeled.len()], &self.cfg, &mut rng),
                    }
                }
            })
            .collect()
    }

    fn labeled_pair(&self, data: &TrainData, identity: bool, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        let mut last = None;
        for _ in 0..MAX_ATTEMPTS {
            let face = &data.labeled[rng.random_range(0..data.labeled.len())];
            let r = if identity { sample_identity_pair(face, &self.cfg, rng) } else { sample_image_pair(face, &self.cfg, rng) };
            match r {
                Err(e @ ShtError::LandmarkOutOfFrame(_)) => {
                    log::warn!("{}: {e}; drawing another face", face.name);
                    last = Some(e);
                }
                other => return other,
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn check_finite(b: &LossBreakdown) -> Result<()> {
        match b.non_finite() {
            Some(c) => Err(ShtError::NonFiniteLoss(c.to_string())),
            None => Ok(()),
        }
    }

    fn transfer(&self, i_con: &Tensor, h_con: &Tensor, target: &Tensor) -> Result<Transfer> {
        let h_tar = swap_halves(h_con)?;
        let fake = self.fptn.generator.forward(i_con, h_con, &h_tar)?;
        Ok(Transfer { i_con: i_con.clone(), h_tar, target: swap_halves(target)?, fake })
    }

    /// Discriminator update on detached generator-side inputs; returns the loss and score stats.
    fn discriminator_step(&mut self, t: &Transfer, lr: f64) -> Result<(f64, ScoreStats)> {
        let ns = self.cfg.non_saturating_gan;
        let (i_con, h_tar) = (t.i_con.detach(), t.h_tar.detach());
        let (ra, rs) = self.fptn.scores(&i_con, &h_tar, &t.target)?;
        let (fa, fs) = self.fptn.scores(&i_con, &h_tar, &t.fake.detach())?;
        let loss = mean(&gan_loss_per_sample(Some((&ra, &rs)), (&fa, &fs), GanRole::Discriminator, ns)?)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(ShtError::NonFiniteLoss("discriminator".into()));
        }
        self.opt_disc.step(&loss.backward()?, lr)?;
        Ok((value, stats(&[&ra, &rs], &[&fa, &fs])?))
    }

    /// Generator-side `λ₁·GAN + λ₂·L1 + λ₃·perceptual`, batch-averaged.
    fn transfer_terms(&self, t: &Transfer) -> Result<LossTerms> {
        let l = self.cfg.lambda;
        let (fa, fs) = self.fptn.scores(&t.i_con, &t.h_tar, &t.fake)?;
        let gan = mean(&gan_loss_per_sample(None, (&fa, &fs), GanRole::Generator, self.cfg.non_saturating_gan)?)?;
        let l1 = mean(&l1_per_sample(&t.fake, &t.target)?)?;
        let mut total = (gan.affine(l[0], 0.0)? + l1.affine(l[1], 0.0)?.to_dtype(gan.dtype())?)?;
        let mut breakdown = LossBreakdown::default();
        breakdown.add("gan", l[0], scalar(&gan)?);
        breakdown.add("l1_transfer", l[1], scalar(&l1)?);
        if let Some(phi) = &self.phi {
            let p = mean(&phi.per_sample(&t.fake, &t.target)?)?;
            breakdown.add("perceptual", l[2], scalar(&p)?);
            total = (total + p.affine(l[2], 0.0)?.to_dtype(gan.dtype())?)?;
        }
        breakdown.total = scalar(&total)?;
        Ok(LossTerms { total, breakdown })
    }

    fn dhln_terms(&self, b: &Batch) -> Result<(LossTerms, crate::dhln::DhlnTensors)> {
        let out = self.dhln.forward(&b.lr)?;
        let terms = loss_dh_batch(&out.heatmaps, b.heatmaps.as_ref(), &b.labeled, &out.sr, &b.hr, self.cfg.gamma)?;
        Ok((terms, out))
    }

    fn sht_transfer(&self, out: &crate::dhln::DhlnTensors, b: &Batch) -> Result<Transfer> {
        let h = out.last_heatmaps().clamp(0f32, 1f32)?;
        self.transfer(&out.sr, &h, &b.hr)
    }

    /// The joint objective on `pairs` without touching any weights.
    pub fn evaluate_sht(&self, pairs: &[TrainingPair]) -> Result<LossBreakdown> {
        let b = Batch::from_pairs(pairs, &self.cfg, &self.device)?;
        let (dh, out) = self.dhln_terms(&b)?;
        let pt = self.transfer_terms(&self.sht_transfer(&out, &b)?)?;
        Ok(dh.breakdown.merge(&pt.breakdown))
    }

    /// One optimization step of `phase` on `pairs`.
    pub fn train_step(&mut self, phase: Phase, pairs: &[TrainingPair], step: usize, total_steps: usize) -> Result<StepRecord> {
        let o = self.cfg.optim.clone();
        let lr_d = scheduled_lr(o.lr_dhln, step, total_steps, &o.decay_at);
        let lr_f = scheduled_lr(o.lr_fptn, step, total_steps, &o.decay_at);
        let b = Batch::from_pairs(pairs, &self.cfg, &self.device)?;
        let mut record = StepRecord { phase, step, lr: lr_d, loss: LossBreakdown::default(), disc_loss: None, scores: None };
        match phase {
            Phase::PretrainDhln => {
                let (terms, _) = self.dhln_terms(&b)?;
                Self::check_finite(&terms.breakdown)?;
                self.opt_dhln.step(&terms.total.backward()?, lr_d)?;
                record.loss = terms.breakdown;
            }
            Phase::PretrainFptn => {
                let h = b.heatmaps.as_ref().ok_or_else(|| ShtError::MissingAnnotation("pretrain_fptn needs ground-truth heatmaps".into()))?;
                let t = self.transfer(&b.hr, h, &b.hr)?;
                let (d, s) = self.discriminator_step(&t, lr_f)?;
                let terms = self.transfer_terms(&t)?;
                Self::check_finite(&terms.breakdown)?;
                self.opt_gen.step(&terms.total.backward()?, lr_f)?;
                record = StepRecord { lr: lr_f, loss: terms.breakdown, disc_loss: Some(d), scores: Some(s), ..record };
            }
            Phase::FinetuneSht | Phase::WeakFinetune => {
                if phase == Phase::FinetuneSht && b.labeled.iter().any(|l| !l) {
                    return Err(ShtError::PhaseViolation("finetune_sht is labeled-only".into()));
                }
                let (dh, out) = self.dhln_terms(&b)?;
                let t = self.sht_transfer(&out, &b)?;
                let (d, s) = self.discriminator_step(&t, lr_f)?;
                let pt = self.transfer_terms(&t)?;
                let breakdown = dh.breakdown.merge(&pt.breakdown);
                Self::check_finite(&breakdown)?;
                let total = (dh.total.to_dtype(pt.total.dtype())? + &pt.total)?;
                let grads = total.backward()?;
                self.opt_dhln.step(&grads, lr_d)?;
                self.opt_gen.step(&grads, lr_f)?;
                record = StepRecord { loss: breakdown, disc_loss: Some(d), scores: Some(s), ..record };
            }
        }
        Ok(record)
    }

    /// Runs `phase` until `steps` steps are done, resuming from the current state.
    pub fn run_phase(&mut self, phase: Phase, data: &TrainData, steps: usize, opts: &mut RunOptions) -> Result<()> {
        self.state.enter(phase)?;
        if phase != Phase::PretrainDhln {
            self.resolve_perceptual()?;
        }
        let mut aborts = 0;
        while self.state.step < steps {
            if opts.stop_after.is_some_and(|s| self.state.step >= s) {
                return Ok(());
            }
            let step = self.state.step;
            let pairs = self.sample_batch(phase, step, data)?;
            match self.train_step(phase, &pairs, step, steps) {
                Ok(rec) => {
                    aborts = 0;
                    if let Some(w) = opts.log.as_deref_mut() {
                        writeln!(w, "{}", serde_json::to_string(&rec).expect("records serialize"))?;
                    }
                    self.state.record(rec);
                }
                Err(ShtError::NonFiniteLoss(c)) => {
                    aborts += 1;
                    log::warn!("{phase} step {step}: non-finite `{c}`, batch skipped ({aborts}/{MAX_CONSECUTIVE_ABORTS})");
                    if aborts >= MAX_CONSECUTIVE_ABORTS {
                        return Err(ShtError::NonFiniteLoss(format!(
                            "{c} in {MAX_CONSECUTIVE_ABORTS} consecutive batches ({phase}, step {step})"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
            self.state.step += 1;
            if let Some(dir) = &opts.checkpoint_dir {
                if opts.checkpoint_every > 0 && self.state.step % opts.checkpoint_every == 0 && self.state.step < steps {
                    self.save_checkpoint(&dir.join(format!("{phase}_{:06}.safetensors", self.state.step)))?;
                }
            }
        }
        self.state.complete(phase);
        if let Some(dir) = &opts.checkpoint_dir {
            self.save_checkpoint(&dir.join(format!("{phase}.safetensors")))?;
        }
        Ok(())
    }

    /// Whether training has touched the network `pretrain` pretrains.
    fn trained(&self, pretrain: Phase) -> bool {
        match self.state.phase {
            None => true,
            Some(p) => p == pretrain || p.is_joint() || self.state.completed.contains(&pretrain),
        }
    }

    /// Snapshot of the trained networks, their optimizer state and the
    /// training state. A network no phase has trained yet is left out, so
    /// checkpoints of separate pretraining runs merge cleanly.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.cfg.clone());
        if self.trained(Phase::PretrainDhln) {
            ck.insert_params("dhln", self.dhln.params())?;
            ck.insert("adam_dhln", self.opt_dhln.state()?);
        }
        if self.trained(Phase::PretrainFptn) {
            ck.insert_params("generator", self.fptn.generator.params())?;
            ck.insert_params("d_appearance", self.fptn.d_appearance.params())?;
            ck.insert_params("d_shape", self.fptn.d_shape.params())?;
            ck.insert("adam_generator", self.opt_gen.state()?);
            ck.insert("adam_disc", self.opt_disc.state()?);
        }
        ck.metadata.insert("state".into(), serde_json::to_string(&self.state).expect("state serializes"));
        if let Some(phi) = &self.phi {
            ck.metadata.insert("perceptual".into(), phi.identity().to_string());
        }
        Ok(ck)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        log::info!("writing checkpoint {}", path.display());
        self.checkpoint()?.save(path)
    }

    /// Restores every section present in `ck` and merges its training state.
    /// Networks missing from the checkpoint keep their current weights.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.config.num_landmarks != self.cfg.num_landmarks
            || ck.config.input_size != self.cfg.input_size
            || ck.config.sr_output_size != self.cfg.sr_output_size
        {
            return Err(ShtError::InvalidConfig("checkpoint landmarks/resolution differ from the configuration".into()));
        }
        let nets: [(&str, &ParamStore); 4] = [
            ("dhln", self.dhln.params()),
            ("generator", self.fptn.generator.params()),
            ("d_appearance", self.fptn.d_appearance.params()),
            ("d_shape", self.fptn.d_shape.params()),
        ];
        for (name, ps) in nets {
            if ck.section(name).is_some() {
                ck.restore(name, ps)?;
            }
        }
        for (name, opt) in [("adam_dhln", &mut self.opt_dhln), ("adam_generator", &mut self.opt_gen), ("adam_disc", &mut self.opt_disc)] {
            if let Some(s) = ck.section(name) {
                opt.load_state(s)?;
            }
        }
        if let Some(s) = ck.metadata.get("state") {
            let saved: TrainState = serde_json::from_str(s).map_err(|e| ShtError::Checkpoint(format!("bad state: {e}")))?;
            for p in &saved.completed {
                self.state.complete(*p);
            }
            if self.state.phase.is_none() || saved.phase > self.state.phase {
                self.state.phase = saved.phase;
                self.state.step = saved.step;
                self.state.history = saved.history;
            }
        }
        Ok(())
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), device)?;
        t.load_checkpoint(ck)?;
        Ok(t)
    }
}

fn default_every() -> usize {
    100
}

/// Training manifest: data roots, per-phase step counts and checkpoint cadence.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    #[serde(default)]
    pub image_roots: Vec<PathBuf>,
    #[serde(default)]
    pub unlabeled_roots: Vec<PathBuf>,
    #[serde(default)]
    pub video_roots: Vec<PathBuf>,
    #[serde(default)]
    pub steps: BTreeMap<Phase, usize>,
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
    pub checkpoint_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics_log: Option<PathBuf>,
}

impl TrainManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Self = toml::from_str(&text).map_err(|e| ShtError::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        m.config.as_mut().map(fix);
        m.image_roots.iter_mut().chain(&mut m.unlabeled_roots).chain(&mut m.video_roots).for_each(fix);
        fix(&mut m.checkpoint_dir);
        m.metrics_log.as_mut().map(fix);
        Ok(m)
    }

    /// Loads every dataset root listed in the manifest.
    pub fn load_data(&self, cfg: &ShtConfig) -> Result<TrainData> {
        let opts = LoadOptions { num_landmarks: cfg.num_landmarks, interocular: cfg.interocular, strict: false };
        let mut data = TrainData::default();
        for r in &self.image_roots {
            data.labeled.extend(load_image_dataset(r, &opts)?.0);
        }
        for r in &self.unlabeled_roots {
            data.unlabeled.extend(load_image_dataset(r, &opts)?.0);
        }
        for r in &self.video_roots {
            data.videos.extend(load_video_dataset(r)?);
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_order() {
        let mut s = TrainState::new(0);
        s.enter(Phase::PretrainDhln).unwrap();
        s.complete(Phase::PretrainDhln);
        s.enter(Phase::PretrainFptn).unwrap();
        s.complete(Phase::PretrainFptn);
        s.enter(Phase::FinetuneSht).unwrap();
        s.enter(Phase::WeakFinetune).unwrap();
        assert!(matches!(s.enter(Phase::PretrainDhln), Err(ShtError::PhaseViolation(_))));
    }

    #[test]
    fn joint_phases_need_pretraining() {
        let mut s = TrainState::new(0);
        assert!(matches!(s.enter(Phase::FinetuneSht), Err(ShtError::PhaseViolation(_))));
        s.enter(Phase::PretrainFptn).unwrap();
        assert!(matches!(s.enter(Phase::PretrainDhln), Err(ShtError::PhaseViolation(_))));
    }

    #[test]
    fn phase_names_round_trip() {
        for p in Phase::ALL {
            assert_eq!(p.name().parse::<Phase>().unwrap(), p);
        }
        assert!("finetune".parse::<Phase>().is_err());
    }

    #[test]
    fn manifest_paths_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        std::fs::write(&p, "image_roots = [\"faces\"]\ncheckpoint_dir = \"ck\"\n[steps]\npretrain_dhln = 5\n").unwrap();
        let m = TrainManifest::load(&p).unwrap();
        assert_eq!(m.image_roots[0], dir.path().join("faces"));
        assert_eq!(m.steps[&Phase::PretrainDhln], 5);
        assert_eq!(m.checkpoint_every, 100);
        std::fs::write(&p, "checkpoint_dir = \"ck\"\nbogus = 1\n").unwrap();
        assert!(TrainManifest::load(&p).is_err());
    }
}
