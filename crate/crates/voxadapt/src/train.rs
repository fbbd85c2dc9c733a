//! The three-phase schedule: pretrain the 2D autoencoder pair, train the
//! voxel pair with the image network frozen, then train everything
//! jointly.
//!
//! Every step updates the generator side first, then the discriminator
//! side on the generator's pre-update outputs, then the balance scalars.
//! Discriminators participate in generator passes as constants, so
//! discriminator weights only ever move from their own update, and the
//! discriminator loss can never reach generator parameters.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::data::{Batch, BatchStream, DataError, Dataset};
use crate::loss::{
    adv_mean_3d, convergence_measure, d2_losses, d3_losses, g2_coeffs, g2_loss, g3_coeffs,
    g3_loss, total_losses, EquilibriumState, LossConfig, LossError, LossReport,
};
use crate::nn::checkpoint::{
    push_adam, push_params, read_adam, read_params, Archive, CheckpointError,
};
use crate::nn::{topology, Mode, NetError, NetPreset, NetSession, NetworkPlan};
use crate::rng::{self, derive_seed};
use crate::tensor::params::{adam_step, AdamState, ParameterSet};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stage {expected} step invoked while phase {actual} is active")]
    WrongPhase { expected: usize, actual: usize },
    #[error("training diverged at phase {phase} step {step}: {detail}")]
    Diverged {
        phase: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: NetPreset,
    pub batch_size: usize,
    /// Step budgets for the three phases.
    pub steps: [usize; 3],
    pub loss: LossConfig,
    pub lr_g: f64,
    pub decay_g: f64,
    pub lr_d: f64,
    pub decay_d: f64,
    pub seed: u64,
    /// Checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub literal_s_update: bool,
    /// Baseline mode: substitute the synth batch for the real batch, so
    /// the 2D pair never sees the real-style domain.
    pub synth_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            preset: NetPreset::Desk,
            batch_size: 32,
            steps: [5000, 5000, 5000],
            loss: LossConfig::default(),
            lr_g: 0.005,
            decay_g: 0.995,
            lr_d: 0.001,
            decay_d: 0.995,
            seed: 0,
            checkpoint_every: 0,
            literal_s_update: false,
            synth_only: false,
        }
    }
}

const TRAIN_KEYS: [&str; 15] = [
    "preset",
    "batch",
    "steps1",
    "steps2",
    "steps3",
    "phi2",
    "phi3",
    "lr_g",
    "decay_g",
    "lr_d",
    "decay_d",
    "seed",
    "checkpoint_every",
    "literal_s_update",
    "synth_only",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        for d in [self.decay_g, self.decay_d] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(TrainError::Config(format!("decay {d} outside (0, 1]")));
            }
        }
        self.loss
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.steps.iter().sum()
    }

    /// Which phase a given completed-step count falls in.
    pub fn phase_at(&self, step: usize) -> usize {
        if step < self.steps[0] {
            1
        } else if step < self.steps[0] + self.steps[1] {
            2
        } else {
            3
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("preset", self.preset.as_str());
        kv.set("batch", &self.batch_size.to_string());
        kv.set("steps1", &self.steps[0].to_string());
        kv.set("steps2", &self.steps[1].to_string());
        kv.set("steps3", &self.steps[2].to_string());
        kv.set("phi2", &self.loss.phi2.to_string());
        kv.set("phi3", &self.loss.phi3.to_string());
        kv.set("lr_g", &self.lr_g.to_string());
        kv.set("decay_g", &self.decay_g.to_string());
        kv.set("lr_d", &self.lr_d.to_string());
        kv.set("decay_d", &self.decay_d.to_string());
        kv.set("seed", &self.seed.to_string());
        kv.set("checkpoint_every", &self.checkpoint_every.to_string());
        kv.set("literal_s_update", &self.literal_s_update.to_string());
        kv.set("synth_only", &self.synth_only.to_string());
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self, TrainError> {
        let bad = |e: ConfigError| TrainError::Config(e.to_string());
        kv.check_known(&TRAIN_KEYS).map_err(bad)?;
        let d = TrainConfig::default();
        let preset = match kv.get("preset") {
            None => d.preset,
            Some(text) => NetPreset::parse(text)
                .ok_or_else(|| TrainError::Config(format!("unknown preset {text:?}")))?,
        };
        let config = TrainConfig {
            preset,
            batch_size: kv.get_usize("batch").map_err(bad)?.unwrap_or(d.batch_size),
            steps: [
                kv.get_usize("steps1").map_err(bad)?.unwrap_or(d.steps[0]),
                kv.get_usize("steps2").map_err(bad)?.unwrap_or(d.steps[1]),
                kv.get_usize("steps3").map_err(bad)?.unwrap_or(d.steps[2]),
            ],
            loss: LossConfig {
                phi2: kv.get_f64("phi2").map_err(bad)?.unwrap_or(d.loss.phi2),
                phi3: kv.get_f64("phi3").map_err(bad)?.unwrap_or(d.loss.phi3),
            },
            lr_g: kv.get_f64("lr_g").map_err(bad)?.unwrap_or(d.lr_g),
            decay_g: kv.get_f64("decay_g").map_err(bad)?.unwrap_or(d.decay_g),
            lr_d: kv.get_f64("lr_d").map_err(bad)?.unwrap_or(d.lr_d),
            decay_d: kv.get_f64("decay_d").map_err(bad)?.unwrap_or(d.decay_d),
            seed: kv.get_u64("seed").map_err(bad)?.unwrap_or(d.seed),
            checkpoint_every: kv
                .get_usize("checkpoint_every")
                .map_err(bad)?
                .unwrap_or(d.checkpoint_every),
            literal_s_update: kv
                .get_bool("literal_s_update")
                .map_err(bad)?
                .unwrap_or(d.literal_s_update),
            synth_only: kv.get_bool("synth_only").map_err(bad)?.unwrap_or(d.synth_only),
        };
        config.validate()?;
        Ok(config)
    }
}

/// One network's plan, weights, and optimizer.
pub struct NetState {
    pub plan: NetworkPlan,
    pub params: ParameterSet,
    pub adam: AdamState,
}

impl NetState {
    fn new(plan: NetworkPlan, seed: u64, rate: f64, decay: f64) -> Self {
        let params = plan.init_params(seed);
        let adam = AdamState::new(&params, rate, decay);
        NetState { plan, params, adam }
    }
}

/// One logged step.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub step: usize,
    pub phase: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub report: LossReport,
}

pub const LOG_HEADER: &str =
    "step,phase,L_rec2_w,L_rec2_wV,L_G2,L_D2,k,L_rec3,L_G3,L_D3,s,L_G,L_D,M2,M3,lr_G,lr_D";

pub fn csv_row(row: &LogRow) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "0".into());
    let r = &row.report;
    let mut line = String::new();
    write!(
        line,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.step,
        row.phase,
        opt(r.rec2_w),
        opt(r.rec2_wv),
        opt(r.g2),
        opt(r.d2),
        r.k,
        opt(r.rec3),
        opt(r.g3),
        opt(r.d3),
        r.s,
        r.g_total,
        r.d_total,
        opt(r.m2),
        opt(r.m3),
        row.lr_g,
        row.lr_d,
    )
    .expect("string write");
    line
}

pub struct TrainState {
    pub config: TrainConfig,
    pub g2: NetState,
    pub d2: NetState,
    pub g3: NetState,
    pub d3: NetState,
    pub eq: EquilibriumState,
    pub phase: usize,
    pub step: usize,
    pub history: Vec<LogRow>,
}

fn scalar(tape: &Tape, id: NodeId) -> Result<f64, TrainError> {
    Ok(tape.value(id).item()?)
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let nets = topology(config.preset);
        let seed = config.seed;
        let g = (config.lr_g, config.decay_g);
        let d = (config.lr_d, config.decay_d);
        Ok(TrainState {
            g2: NetState::new(nets.g2, derive_seed(seed, rng::stream::INIT_G2, 0), g.0, g.1),
            d2: NetState::new(nets.d2, derive_seed(seed, rng::stream::INIT_D2, 0), d.0, d.1),
            g3: NetState::new(nets.g3, derive_seed(seed, rng::stream::INIT_G3, 0), g.0, g.1),
            d3: NetState::new(nets.d3, derive_seed(seed, rng::stream::INIT_D3, 0), d.0, d.1),
            eq: EquilibriumState {
                literal_s_update: config.literal_s_update,
                ..EquilibriumState::default()
            },
            phase: 1,
            step: 0,
            history: Vec::new(),
            config: config.clone(),
        })
    }

    fn check_phase(&self, expected: usize) -> Result<(), TrainError> {
        if self.phase != expected {
            return Err(TrainError::WrongPhase {
                expected,
                actual: self.phase,
            });
        }
        Ok(())
    }

    fn record(
        &mut self,
        phase: usize,
        report: LossReport,
        lr_g: f64,
        lr_d: f64,
    ) -> Result<LossReport, TrainError> {
        if !report.all_finite() {
            return Err(TrainError::Diverged {
                phase,
                step: self.step + 1,
                detail: "a logged loss is non-finite".into(),
            });
        }
        if report.max_magnitude() > 1e3 {
            return Err(TrainError::Diverged {
                phase,
                step: self.step + 1,
                detail: format!("a logged loss reached {}", report.max_magnitude()),
            });
        }
        self.step += 1;
        self.history.push(LogRow {
            step: self.step,
            phase,
            lr_g,
            lr_d,
            report: report.clone(),
        });
        Ok(report)
    }

    /// Phase 1: update the 2D generator on both domains, then the 2D
    /// discriminator on the pre-update outputs, then the balance scalar.
    /// The two domains go through the generator as one batch so its
    /// normalization statistics blend them; separate passes would normalize
    /// each domain on its own and hide the gap the shared latent must close.
    pub fn train_step_stage1(&mut self, batch: &Batch) -> Result<LossReport, TrainError> {
        self.check_phase(1)?;
        let lr_g = self.g2.adam.effective_rate();
        let lr_d = self.d2.adam.effective_rate();
        let (w_rec, w_adv) = g2_coeffs(self.config.loss.phi2);

        let real_rows = batch.real.shape()[0];
        let mut tape = Tape::new();
        let w = tape.constant(batch.real.clone());
        let wv = tape.constant(batch.synth.clone());
        let both = tape.constant(batch.real.concat_batch(&batch.synth)?);
        let (g2_grads, rec_w, rec_wv, adv_w, g2_val, fake_out, synth_out) = {
            let mut g2 = NetSession::new(&self.g2.plan, &mut self.g2.params, Mode::Train, true);
            let out = g2.autoencode(&mut tape, both)?;
            let out_w = tape.slice_batch(out, 0, real_rows)?;
            let out_wv = tape.slice_batch(out, real_rows, batch.synth.shape()[0])?;
            let rec_w_n = tape.l1(out_w, w)?;
            let rec_wv_n = tape.l1(out_wv, wv)?;
            let mut d2 = NetSession::new(&self.d2.plan, &mut self.d2.params, Mode::Train, false);
            let d2_out = d2.autoencode(&mut tape, out_w)?;
            let adv_n = tape.l1(d2_out, out_w)?;
            let rec_sum = tape.add(rec_w_n, rec_wv_n)?;
            let rec_term = tape.scale(rec_sum, w_rec)?;
            let adv_term = tape.scale(adv_n, w_adv)?;
            let loss = tape.add(rec_term, adv_term)?;
            let grads = tape.backward(loss)?;
            (
                g2.gradient_map(&grads),
                scalar(&tape, rec_w_n)?,
                scalar(&tape, rec_wv_n)?,
                scalar(&tape, adv_n)?,
                scalar(&tape, loss)?,
                tape.value(out_w).clone(),
                tape.value(out_wv).clone(),
            )
        };
        let g2_direct = g2_loss(rec_w, rec_wv, adv_w, &self.config.loss)?;
        debug_assert_eq!(g2_val.to_bits(), g2_direct.to_bits());
        adam_step(&mut self.g2.params, &g2_grads, &mut self.g2.adam)?;

        let mut tape_d = Tape::new();
        let fake = tape_d.constant(fake_out);
        let synth = tape_d.constant(synth_out);
        let (d2_grads, score_fake, score_synth, d2_val) = {
            let mut d2 = NetSession::new(&self.d2.plan, &mut self.d2.params, Mode::Train, true);
            let fr = d2.autoencode(&mut tape_d, fake)?;
            let fake_score = tape_d.l1(fr, fake)?;
            let sr = d2.autoencode(&mut tape_d, synth)?;
            let synth_score = tape_d.l1(sr, synth)?;
            let weighted = tape_d.scale(fake_score, -self.eq.k)?;
            let loss = tape_d.add(synth_score, weighted)?;
            let grads = tape_d.backward(loss)?;
            (
                d2.gradient_map(&grads),
                scalar(&tape_d, fake_score)?,
                scalar(&tape_d, synth_score)?,
                scalar(&tape_d, loss)?,
            )
        };
        adam_step(&mut self.d2.params, &d2_grads, &mut self.d2.adam)?;
        let (d2_direct, next_k) = d2_losses(score_fake, score_synth, &self.eq)?;
        debug_assert_eq!(d2_val.to_bits(), d2_direct.to_bits());
        self.eq.k = next_k;

        let report = LossReport {
            rec2_w: Some(rec_w),
            rec2_wv: Some(rec_wv),
            adv2: Some(adv_w),
            g2: Some(g2_direct),
            d2: Some(d2_direct),
            k: self.eq.k,
            s: self.eq.s,
            g_total: g2_direct,
            d_total: d2_direct,
            m2: Some(convergence_measure(score_synth, score_fake, self.eq.gamma2)),
            ..LossReport::default()
        };
        self.record(1, report, lr_g, lr_d)
    }

    /// Phase 2: the 2D network runs frozen in inference mode; the voxel
    /// generator and discriminator train.
    pub fn train_step_stage2(&mut self, batch: &Batch) -> Result<LossReport, TrainError> {
        self.check_phase(2)?;
        let lr_g = self.g3.adam.effective_rate();
        let lr_d = self.d3.adam.effective_rate();
        let report = self.voxel_pair_step(batch, Mode::Infer)?;
        self.record(2, report, lr_g, lr_d)
    }

    /// Phase 3: both generators update from the summed generator loss,
    /// both discriminators from the summed discriminator loss.
    pub fn train_step_joint(&mut self, batch: &Batch) -> Result<LossReport, TrainError> {
        self.check_phase(3)?;
        let lr_g = self.g2.adam.effective_rate();
        let lr_d = self.d2.adam.effective_rate();
        let (w_rec2, w_adv2) = g2_coeffs(self.config.loss.phi2);
        let (w_rec3, w_adv3) = g3_coeffs(self.config.loss.phi3);

        let real_rows = batch.real.shape()[0];
        let synth_rows = batch.synth.shape()[0];
        let mut tape = Tape::new();
        let w = tape.constant(batch.real.clone());
        let wv = tape.constant(batch.synth.clone());
        let both = tape.constant(batch.real.concat_batch(&batch.synth)?);
        let v = tape.constant(batch.voxels.clone());
        let (
            g2_grads,
            g3_grads,
            rec_w,
            rec_wv,
            adv_w,
            rec3,
            adv3,
            g2_val,
            g3_val,
            g_val,
            fake_out,
            synth_out,
            gen_w_out,
            gen_wv_out,
        ) = {
            let mut g2 = NetSession::new(&self.g2.plan, &mut self.g2.params, Mode::Train, true);
            let lat = g2.encode(&mut tape, both)?;
            let out = g2.decode(&mut tape, lat)?;
            let out_w = tape.slice_batch(out, 0, real_rows)?;
            let out_wv = tape.slice_batch(out, real_rows, synth_rows)?;
            let rec_w_n = tape.l1(out_w, w)?;
            let rec_wv_n = tape.l1(out_wv, wv)?;
            let mut d2 = NetSession::new(&self.d2.plan, &mut self.d2.params, Mode::Train, false);
            let d2_out = d2.autoencode(&mut tape, out_w)?;
            let adv2_n = tape.l1(d2_out, out_w)?;
            let rec_sum = tape.add(rec_w_n, rec_wv_n)?;
            let rec_term = tape.scale(rec_sum, w_rec2)?;
            let adv_term = tape.scale(adv2_n, w_adv2)?;
            let loss_g2 = tape.add(rec_term, adv_term)?;

            let mut g3 = NetSession::new(&self.g3.plan, &mut self.g3.params, Mode::Train, true);
            let gen = g3.decode(&mut tape, lat)?;
            let gen_w = tape.slice_batch(gen, 0, real_rows)?;
            let gen_wv = tape.slice_batch(gen, real_rows, synth_rows)?;
            let rec3_n = tape.l1(gen_wv, v)?;
            let mut d3 = NetSession::new(&self.d3.plan, &mut self.d3.params, Mode::Train, false);
            let dw = d3.autoencode(&mut tape, gen_w)?;
            let score_w = tape.l1(dw, gen_w)?;
            let dwv = d3.autoencode(&mut tape, gen_wv)?;
            let score_wv = tape.l1(dwv, gen_wv)?;
            let pair = tape.add(score_w, score_wv)?;
            let adv3_n = tape.scale(pair, 0.5)?;
            let rec3_term = tape.scale(rec3_n, w_rec3)?;
            let adv3_term = tape.scale(adv3_n, w_adv3)?;
            let loss_g3 = tape.add(rec3_term, adv3_term)?;

            let loss = tape.add(loss_g2, loss_g3)?;
            let grads = tape.backward(loss)?;
            (
                g2.gradient_map(&grads),
                g3.gradient_map(&grads),
                scalar(&tape, rec_w_n)?,
                scalar(&tape, rec_wv_n)?,
                scalar(&tape, adv2_n)?,
                scalar(&tape, rec3_n)?,
                scalar(&tape, adv3_n)?,
                scalar(&tape, loss_g2)?,
                scalar(&tape, loss_g3)?,
                scalar(&tape, loss)?,
                tape.value(out_w).clone(),
                tape.value(out_wv).clone(),
                tape.value(gen_w).clone(),
                tape.value(gen_wv).clone(),
            )
        };
        let g2_direct = g2_loss(rec_w, rec_wv, adv_w, &self.config.loss)?;
        let g3_direct = g3_loss(rec3, adv3, &self.config.loss)?;
        debug_assert_eq!(g2_val.to_bits(), g2_direct.to_bits());
        debug_assert_eq!(g3_val.to_bits(), g3_direct.to_bits());
        adam_step(&mut self.g2.params, &g2_grads, &mut self.g2.adam)?;
        adam_step(&mut self.g3.params, &g3_grads, &mut self.g3.adam)?;

        let mut tape_d = Tape::new();
        let fake = tape_d.constant(fake_out);
        let synth = tape_d.constant(synth_out);
        let gw = tape_d.constant(gen_w_out);
        let gwv = tape_d.constant(gen_wv_out);
        let real_v = tape_d.constant(batch.voxels.clone());
        let (d2_grads, d3_grads, s_fake, s_synth, s_real, s_gw, s_gwv, d2_val, d3_val, d_val) = {
            let mut d2 = NetSession::new(&self.d2.plan, &mut self.d2.params, Mode::Train, true);
            let fr = d2.autoencode(&mut tape_d, fake)?;
            let fake_score = tape_d.l1(fr, fake)?;
            let sr = d2.autoencode(&mut tape_d, synth)?;
            let synth_score = tape_d.l1(sr, synth)?;
            let weighted2 = tape_d.scale(fake_score, -self.eq.k)?;
            let loss_d2 = tape_d.add(synth_score, weighted2)?;

            let mut d3 = NetSession::new(&self.d3.plan, &mut self.d3.params, Mode::Train, true);
            let rr = d3.autoencode(&mut tape_d, real_v)?;
            let real_score = tape_d.l1(rr, real_v)?;
            let gr = d3.autoencode(&mut tape_d, gw)?;
            let gw_score = tape_d.l1(gr, gw)?;
            let gvr = d3.autoencode(&mut tape_d, gwv)?;
            let gwv_score = tape_d.l1(gvr, gwv)?;
            let gen_pair = tape_d.add(gw_score, gwv_score)?;
            let weighted3 = tape_d.scale(gen_pair, -0.5 * self.eq.s)?;
            let loss_d3 = tape_d.add(real_score, weighted3)?;

            let loss = tape_d.add(loss_d2, loss_d3)?;
            let grads = tape_d.backward(loss)?;
            (
                d2.gradient_map(&grads),
                d3.gradient_map(&grads),
                scalar(&tape_d, fake_score)?,
                scalar(&tape_d, synth_score)?,
                scalar(&tape_d, real_score)?,
                scalar(&tape_d, gw_score)?,
                scalar(&tape_d, gwv_score)?,
                scalar(&tape_d, loss_d2)?,
                scalar(&tape_d, loss_d3)?,
                scalar(&tape_d, loss)?,
            )
        };
        adam_step(&mut self.d2.params, &d2_grads, &mut self.d2.adam)?;
        adam_step(&mut self.d3.params, &d3_grads, &mut self.d3.adam)?;
        let (d2_direct, next_k) = d2_losses(s_fake, s_synth, &self.eq)?;
        let (d3_direct, next_s) = d3_losses(s_real, s_gw, s_gwv, &self.eq)?;
        debug_assert_eq!(d2_val.to_bits(), d2_direct.to_bits());
        debug_assert_eq!(d3_val.to_bits(), d3_direct.to_bits());
        self.eq.k = next_k;
        self.eq.s = next_s;

        let mut report = LossReport {
            rec2_w: Some(rec_w),
            rec2_wv: Some(rec_wv),
            adv2: Some(adv_w),
            g2: Some(g2_direct),
            d2: Some(d2_direct),
            rec3: Some(rec3),
            adv3: Some(adv3),
            g3: Some(g3_direct),
            d3: Some(d3_direct),
            k: self.eq.k,
            s: self.eq.s,
            m2: Some(convergence_measure(s_synth, s_fake, self.eq.gamma2)),
            m3: Some(convergence_measure(s_real, adv_mean_3d(s_gw, s_gwv), self.eq.gamma3)),
            ..LossReport::default()
        };
        let (g_total, d_total) = total_losses(&report)?;
        debug_assert_eq!(g_val.to_bits(), g_total.to_bits());
        debug_assert_eq!(d_val.to_bits(), d_total.to_bits());
        report.g_total = g_total;
        report.d_total = d_total;
        self.record(3, report, lr_g, lr_d)
    }

    /// The voxel-pair update shared by phase 2. `g2_mode` controls how the
    /// frozen image network is run.
    fn voxel_pair_step(&mut self, batch: &Batch, g2_mode: Mode) -> Result<LossReport, TrainError> {
        let (w_rec, w_adv) = g3_coeffs(self.config.loss.phi3);
        let mut tape = Tape::new();
        let w = tape.constant(batch.real.clone());
        let wv = tape.constant(batch.synth.clone());
        let v = tape.constant(batch.voxels.clone());
        let (g3_grads, rec3, adv3, g3_val, gen_w_out, gen_wv_out) = {
            let mut g2 = NetSession::new(&self.g2.plan, &mut self.g2.params, g2_mode, false);
            let lat_w = g2.encode(&mut tape, w)?;
            let lat_wv = g2.encode(&mut tape, wv)?;
            let mut g3 = NetSession::new(&self.g3.plan, &mut self.g3.params, Mode::Train, true);
            let gen_w = g3.decode(&mut tape, lat_w)?;
            let gen_wv = g3.decode(&mut tape, lat_wv)?;
            let rec3_n = tape.l1(gen_wv, v)?;
            let mut d3 = NetSession::new(&self.d3.plan, &mut self.d3.params, Mode::Train, false);
            let dw = d3.autoencode(&mut tape, gen_w)?;
            let score_w = tape.l1(dw, gen_w)?;
            let dwv = d3.autoencode(&mut tape, gen_wv)?;
            let score_wv = tape.l1(dwv, gen_wv)?;
            let pair = tape.add(score_w, score_wv)?;
            let adv_n = tape.scale(pair, 0.5)?;
            let rec_term = tape.scale(rec3_n, w_rec)?;
            let adv_term = tape.scale(adv_n, w_adv)?;
            let loss = tape.add(rec_term, adv_term)?;
            let grads = tape.backward(loss)?;
            (
                g3.gradient_map(&grads),
                scalar(&tape, rec3_n)?,
                scalar(&tape, adv_n)?,
                scalar(&tape, loss)?,
                tape.value(gen_w).clone(),
                tape.value(gen_wv).clone(),
            )
        };
        let g3_direct = g3_loss(rec3, adv3, &self.config.loss)?;
        debug_assert_eq!(g3_val.to_bits(), g3_direct.to_bits());
        adam_step(&mut self.g3.params, &g3_grads, &mut self.g3.adam)?;

        let mut tape_d = Tape::new();
        let gw = tape_d.constant(gen_w_out);
        let gwv = tape_d.constant(gen_wv_out);
        let real_v = tape_d.constant(batch.voxels.clone());
        let (d3_grads, s_real, s_gw, s_gwv, d3_val) = {
            let mut d3 = NetSession::new(&self.d3.plan, &mut self.d3.params, Mode::Train, true);
            let rr = d3.autoencode(&mut tape_d, real_v)?;
            let real_score = tape_d.l1(rr, real_v)?;
            let gr = d3.autoencode(&mut tape_d, gw)?;
            let gw_score = tape_d.l1(gr, gw)?;
            let gvr = d3.autoencode(&mut tape_d, gwv)?;
            let gwv_score = tape_d.l1(gvr, gwv)?;
            let pair = tape_d.add(gw_score, gwv_score)?;
            let weighted = tape_d.scale(pair, -0.5 * self.eq.s)?;
            let loss = tape_d.add(real_score, weighted)?;
            let grads = tape_d.backward(loss)?;
            (
                d3.gradient_map(&grads),
                scalar(&tape_d, real_score)?,
                scalar(&tape_d, gw_score)?,
                scalar(&tape_d, gwv_score)?,
                scalar(&tape_d, loss)?,
            )
        };
        adam_step(&mut self.d3.params, &d3_grads, &mut self.d3.adam)?;
        let (d3_direct, next_s) = d3_losses(s_real, s_gw, s_gwv, &self.eq)?;
        debug_assert_eq!(d3_val.to_bits(), d3_direct.to_bits());
        self.eq.s = next_s;

        Ok(LossReport {
            rec3: Some(rec3),
            adv3: Some(adv3),
            g3: Some(g3_direct),
            d3: Some(d3_direct),
            k: self.eq.k,
            s: self.eq.s,
            g_total: g3_direct,
            d_total: d3_direct,
            m3: Some(convergence_measure(s_real, adv_mean_3d(s_gw, s_gwv), self.eq.gamma3)),
            ..LossReport::default()
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut a = Archive::new();
        a.push_u64("train/phase", self.phase as u64);
        a.push_u64("train/step", self.step as u64);
        a.push_u64(
            "train/preset",
            match self.config.preset {
                NetPreset::Desk => 0,
                NetPreset::Full => 1,
            },
        );
        a.push_f64("eq/k", self.eq.k);
        a.push_f64("eq/s", self.eq.s);
        for (prefix, net) in [
            ("g2", &self.g2),
            ("d2", &self.d2),
            ("g3", &self.g3),
            ("d3", &self.d3),
        ] {
            push_params(&mut a, &format!("{prefix}/"), &net.params);
            push_adam(&mut a, &format!("{prefix}.adam/"), &net.adam);
        }
        a.save(path)?;
        Ok(())
    }

    pub fn load_checkpoint(config: &TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let a = Archive::load(path)?;
        let preset = a.require("train/preset")?.as_u64()?;
        let expected = match config.preset {
            NetPreset::Desk => 0,
            NetPreset::Full => 1,
        };
        if preset != expected {
            return Err(TrainError::Config(format!(
                "checkpoint was trained with preset {} but config asks for {}",
                if preset == 0 { "desk" } else { "full" },
                config.preset.as_str()
            )));
        }
        let mut state = TrainState::new(config)?;
        state.phase = a.require("train/phase")?.as_u64()? as usize;
        state.step = a.require("train/step")?.as_u64()? as usize;
        state.eq.k = a.require("eq/k")?.as_f64()?;
        state.eq.s = a.require("eq/s")?.as_f64()?;
        for (prefix, net) in [
            ("g2", &mut state.g2),
            ("d2", &mut state.d2),
            ("g3", &mut state.g3),
            ("d3", &mut state.d3),
        ] {
            net.params = read_params(&a, &format!("{prefix}/"))?;
            net.adam = read_adam(&a, &format!("{prefix}.adam/"))?;
        }
        Ok(state)
    }
}

/// Run the configured phases from scratch, logging to `out_dir/log.csv`
/// and checkpointing there when an output directory is given.
pub fn run_schedule(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainState, TrainError> {
    let state = TrainState::new(config)?;
    resume_schedule(state, data, out_dir)
}

/// Continue a schedule from wherever `state` left off.
pub fn resume_schedule(
    mut state: TrainState,
    data: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainState, TrainError> {
    let config = state.config.clone();
    check_dataset(&config, data)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("train.cfg"), config.to_kv().render())?;
            let path = dir.join("log.csv");
            let fresh = state.step == 0 || !path.exists();
            let mut file = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            if fresh {
                writeln!(file, "{LOG_HEADER}")?;
            }
            Some(file)
        }
        None => None,
    };

    let mut stream = BatchStream::new(data, config.batch_size, config.seed)?;
    stream.seek(state.step as u64);
    let boundaries = [
        (1, 0, config.steps[0]),
        (2, config.steps[0], config.steps[0] + config.steps[1]),
        (3, config.steps[0] + config.steps[1], config.total_steps()),
    ];
    for (phase, start, end) in boundaries {
        if state.step >= end {
            continue;
        }
        state.phase = phase;
        while state.step < end {
            debug_assert!(state.step >= start);
            let mut batch = stream.next_batch()?;
            if config.synth_only {
                batch.real = batch.synth.clone();
            }
            match phase {
                1 => state.train_step_stage1(&batch)?,
                2 => state.train_step_stage2(&batch)?,
                _ => state.train_step_joint(&batch)?,
            };
            if let Some(file) = log.as_mut() {
                let row = state.history.last().expect("step was just recorded");
                writeln!(file, "{}", csv_row(row))?;
            }
            if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) {
                if let Some(dir) = out_dir {
                    state.save_checkpoint(&dir.join(format!("step{:06}.ckpt", state.step)))?;
                }
            }
        }
    }
    if let Some(dir) = out_dir {
        state.save_checkpoint(&dir.join("final.ckpt"))?;
    }
    Ok(state)
}

fn check_dataset(config: &TrainConfig, data: &Dataset) -> Result<(), TrainError> {
    if data.config.image_size != config.preset.image_size()
        || data.config.resolution != config.preset.voxel_resolution()
    {
        return Err(TrainError::Config(format!(
            "dataset is {}x{} images with {}^3 voxels but preset {:?} needs {}x{} and {}^3",
            data.config.image_size,
            data.config.image_size,
            data.config.resolution,
            config.preset.as_str(),
            config.preset.image_size(),
            config.preset.image_size(),
            config.preset.voxel_resolution(),
        )));
    }
    Ok(())
}
