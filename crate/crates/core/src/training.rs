//! Optimisation loop: patch batches, dual-head losses, uncertainty or static
//! loss combination, Adam updates, logging and checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::checkpoint::{AdamState, Checkpoint, RngState, ScalarAdam};
use crate::config::{Config, EpochUnit, LossMode, TrainConfig};
use crate::datasets::{self, FundusSample, LabelMask, PatchBatch, PreparedSample};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::lerf;
use crate::network::{Mode, Model, NetworkSpec};
use crate::tensor::Tensor;
use crate::uncertainty::{self, LossBreakdown, UncertaintyParams};

pub const LOG_HEADER: &str = "step,lr,l_main,l_aux,sigma_main,sigma_aux,combined";

/// Learning rate halved every `lr_halving_period` epochs.
pub fn lr_at(epoch: u64, t: &TrainConfig) -> Result<f64> {
    if epoch >= t.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} is past the {}-epoch schedule",
            t.total_epochs
        )));
    }
    let halvings = (epoch / t.lr_halving_period).min(1023) as i32;
    Ok(t.lr * 2f64.powi(-halvings))
}

/// Steps making up one epoch.
pub fn steps_per_epoch(t: &TrainConfig, train_pixels: u64, patch_size: usize) -> u64 {
    match t.epoch_unit {
        EpochUnit::Step => 1,
        EpochUnit::Pass => {
            let per_step = (patch_size * patch_size * t.batch_size) as u64;
            train_pixels.div_ceil(per_step).max(1)
        }
    }
}

pub struct Trainer {
    pub model: Model,
    pub config: Config,
    pub uncertainty: UncertaintyParams,
    pub adam: AdamState,
    pub scalar_adam: ScalarAdam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub steps_per_epoch: u64,
    pub best_auc: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model, config: Config) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        Ok(Self {
            model,
            config,
            uncertainty: UncertaintyParams::default(),
            adam: AdamState::default(),
            scalar_adam: ScalarAdam::default(),
            step: 0,
            rng,
            steps_per_epoch: 1,
            best_auc: None,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.config.train.total_epochs * self.steps_per_epoch
    }

    pub fn lr(&self) -> Result<f64> {
        lr_at(self.epoch(), &self.config.train)
    }

    /// Loss factors for the main and auxiliary objectives.
    fn loss_weights(&self) -> (f64, f64) {
        match self.config.train.loss_mode {
            LossMode::Uncertainty => self.uncertainty.loss_weights(),
            LossMode::Static => (1.0, self.config.train.lambda.unwrap_or(1.0)),
            LossMode::MainOnly => (1.0, 0.0),
        }
    }

    /// One forward/backward pass and Adam update; returns the losses of the
    /// batch before the update.
    pub fn train_step(&mut self, batch: &PatchBatch) -> Result<LossBreakdown> {
        let tc = self.config.train.clone();
        let lr = self.lr()?;
        let mut g = Graph::new();
        let mut bound = self.model.bind(&mut g, Mode::Train);
        let x = g.constant(batch.images.clone());
        let out = self.model.forward(&mut g, &mut bound, x)?;
        let lm = g.weighted_cross_entropy(out.y_main, &batch.labels, &batch.main_weights())?;
        let la = g.weighted_cross_entropy(out.y_aux, &batch.labels, &batch.aux_weights(tc.use_weight_map))?;
        let l_main = g.value(lm).item() as f64;
        let l_aux = g.value(la).item() as f64;
        let breakdown = match tc.loss_mode {
            LossMode::Uncertainty => uncertainty::combined_loss(l_main, l_aux, &self.uncertainty),
            LossMode::Static => LossBreakdown {
                l_main,
                l_aux,
                combined: uncertainty::static_combined_loss(l_main, l_aux, tc.lambda.unwrap_or(1.0))?,
                sigma_main: 1.0,
                sigma_aux: 1.0,
            },
            LossMode::MainOnly => LossBreakdown {
                l_main,
                l_aux,
                combined: l_main,
                sigma_main: 1.0,
                sigma_aux: 1.0,
            },
        };
        if !(breakdown.combined.is_finite() && l_main.is_finite() && l_aux.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                batch: batch.ids.join(" "),
                l_main,
                l_aux,
                sigma_main: breakdown.sigma_main,
                sigma_aux: breakdown.sigma_aux,
            });
        }

        let (wm, wa) = self.loss_weights();
        let mut total = g.scale(lm, wm as f32);
        if wa != 0.0 {
            let aux = g.scale(la, wa as f32);
            total = g.add(total, aux)?;
        }
        let mut grads = g.backward(total)?;
        let mut named = Vec::new();
        for (name, &v) in bound.vars() {
            let gr = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.model.params.get(name).expect("bound from model").shape()));
            named.push((name.clone(), gr));
        }
        if let Some(clip) = tc.grad_clip {
            let norm = named
                .iter()
                .flat_map(|(_, t)| t.data())
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let k = (clip / norm) as f32;
                for (_, t) in &mut named {
                    t.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        self.adam_update(named, lr);
        if tc.loss_mode == LossMode::Uncertainty {
            let (gm, ga) = self.uncertainty.grad(l_main, l_aux);
            let s = &mut self.scalar_adam;
            s.t += 1;
            let c1 = 1.0 - tc.adam_beta1.powi(s.t as i32);
            let c2 = 1.0 - tc.adam_beta2.powi(s.t as i32);
            let params = [&mut self.uncertainty.s_main, &mut self.uncertainty.s_aux];
            for (i, (p, g)) in params.into_iter().zip([gm, ga]).enumerate() {
                s.m[i] = tc.adam_beta1 * s.m[i] + (1.0 - tc.adam_beta1) * g;
                s.v[i] = tc.adam_beta2 * s.v[i] + (1.0 - tc.adam_beta2) * g * g;
                *p -= lr * (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + tc.adam_eps);
            }
        }
        let stats = bound.take_stats();
        self.model.update_running_stats(&stats, tc.bn_momentum as f32)?;
        self.step += 1;
        Ok(breakdown)
    }

    fn adam_update(&mut self, grads: Vec<(String, Tensor)>, lr: f64) {
        let tc = &self.config.train;
        let a = &mut self.adam;
        a.t += 1;
        let c1 = 1.0 - tc.adam_beta1.powi(a.t as i32);
        let c2 = 1.0 - tc.adam_beta2.powi(a.t as i32);
        let (b1, b2) = (tc.adam_beta1 as f32, tc.adam_beta2 as f32);
        let step = (lr / c1) as f32;
        let c2s = c2.sqrt() as f32;
        let eps = tc.adam_eps as f32;
        for (name, g) in grads {
            let p = self.model.params.get_mut(&name).expect("gradient for a known parameter");
            let m = a.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = a.v.entry(name).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() / c2s + eps);
            }
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            config: self.config.clone(),
            step: self.step,
            uncertainty: self.uncertainty,
            adam: self.adam.clone(),
            scalar_adam: self.scalar_adam,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            best_auc: self.best_auc,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let mut rng = ChaCha8Rng::from_seed(ck.rng.seed);
        rng.set_stream(ck.rng.stream);
        rng.set_word_pos(ck.rng.word_pos);
        let mut t = Self::new(ck.model, ck.config)?;
        t.uncertainty = ck.uncertainty;
        t.adam = ck.adam;
        t.scalar_adam = ck.scalar_adam;
        t.step = ck.step;
        t.rng = rng;
        t.best_auc = ck.best_auc;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }
}

pub fn format_log_row(step: u64, lr: f64, b: &LossBreakdown) -> String {
    format!(
        "{step},{lr:e},{:.8},{:.8},{:.8},{:.8},{:.8}",
        b.l_main, b.l_aux, b.sigma_main, b.sigma_aux, b.combined
    )
}

/// Auxiliary-head placement from the vessel widths of the training labels.
pub fn choose_preeminent(config: &Config, labels: &[&LabelMask]) -> Result<(lerf::PreeminentLayer, lerf::VesselWidthStats)> {
    let probe = config.network.to_spec(None)?;
    let stats = lerf::vessel_width_stats(labels)?;
    let rfs = probe.receptive_fields()?;
    Ok((lerf::select_preeminent_layer(&rfs, stats.mean_width)?, stats))
}

/// Network spec for `config`, placing the auxiliary head by vessel width
/// unless the configuration pins it.
pub fn resolve_spec(config: &Config, labels: &[&LabelMask]) -> Result<(NetworkSpec, Option<lerf::VesselWidthStats>)> {
    if config.network.preeminent_layer.is_some() {
        return Ok((config.network.to_spec(None)?, None));
    }
    let (p, stats) = choose_preeminent(config, labels)?;
    Ok((config.network.to_spec(Some((p.layer_index, p.stage)))?, Some(stats)))
}

pub struct FitOutput {
    pub model: Model,
    pub uncertainty: UncertaintyParams,
    pub best_auc: Option<f64>,
    pub steps: u64,
    pub log_path: PathBuf,
}

/// Runs the configured schedule on `train`, evaluating on `test` every
/// `eval_interval` steps. Writes `config.toml`, `train_log.csv`,
/// `eval_log.csv` and the `best`, `last` and `final` checkpoints into
/// `out_dir`. With `resume`, continues from `out_dir/last.ckpt` if present.
pub fn fit(train: &[FundusSample], test: &[FundusSample], config: &Config, out_dir: &Path, resume: bool) -> Result<FitOutput> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.toml"))?;
    let labels: Vec<&LabelMask> = train.iter().map(|s| &s.label).collect();
    let (spec, widths) = resolve_spec(config, &labels)?;
    let mut report = spec_report(&spec)?;
    if let Some(w) = &widths {
        report.push_str(&format!("mean vessel width: {:.3}\n", w.mean_width));
    }
    fs::write(out_dir.join("network.txt"), report)?;

    let cw = datasets::class_balance_weights(&labels)?;
    let class_weights = [cw[0] as f32, cw[1] as f32];
    let prepared = train
        .iter()
        .map(|s| PreparedSample::new(s.clone(), config.data.alpha, config.data.beta))
        .collect::<Result<Vec<_>>>()?;
    let opts = config.data.patch_options();
    let pixels: u64 = train.iter().map(|s| s.label.mask().len() as u64).sum();

    let last = out_dir.join("last.ckpt");
    let mut trainer = if resume && last.is_file() {
        let ck = Checkpoint::load(&last)?;
        if ck.config.hash() != config.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                last.display()
            )));
        }
        log::info!("resuming from step {}", ck.step);
        Trainer::from_checkpoint(ck)?
    } else {
        Trainer::new(Model::build(spec, config.train.seed)?, config.clone())?
    };
    trainer.steps_per_epoch = steps_per_epoch(&config.train, pixels, opts.patch_size);
    let total = trainer.total_steps();
    let resuming = trainer.step > 0;

    let log_path = out_dir.join("train_log.csv");
    let eval_path = out_dir.join("eval_log.csv");
    let open = |p: &Path, header: &str| -> Result<BufWriter<File>> {
        if resuming && p.is_file() {
            Ok(BufWriter::new(OpenOptions::new().append(true).open(p)?))
        } else {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{header}")?;
            Ok(w)
        }
    };
    let mut log = open(&log_path, LOG_HEADER)?;
    let mut eval_log = open(&eval_path, "step,auc,acc,spe,sen")?;

    while trainer.step < total {
        let lr = trainer.lr()?;
        let batch = datasets::sample_batch(&prepared, config.train.batch_size, &opts, class_weights, &mut trainer.rng)?;
        let step = trainer.step;
        let b = match trainer.train_step(&batch) {
            Ok(b) => b,
            Err(e) => {
                log.flush()?;
                return Err(e);
            }
        };
        writeln!(log, "{}", format_log_row(step, lr, &b))?;
        let done = trainer.step;
        if config.train.eval_interval > 0 && !test.is_empty() && (done % config.train.eval_interval == 0 || done == total) {
            log.flush()?;
            let m = evaluation::evaluate(&trainer.model, test, config)?.pooled;
            writeln!(eval_log, "{done},{:.6},{:.6},{:.6},{:.6}", m.auc, m.acc, m.spe, m.sen)?;
            eval_log.flush()?;
            log::info!("step {done}: held-out AUC {:.4}", m.auc);
            if trainer.best_auc.is_none_or(|b| m.auc > b) {
                trainer.best_auc = Some(m.auc);
                trainer.save(&out_dir.join("best.ckpt"))?;
            }
        }
        if done % config.train.checkpoint_interval == 0 || done == total {
            log.flush()?;
            trainer.save(&last)?;
        }
    }
    log.flush()?;
    trainer.save(&out_dir.join("final.ckpt"))?;
    Ok(FitOutput {
        steps: trainer.step,
        uncertainty: trainer.uncertainty,
        best_auc: trainer.best_auc,
        model: trainer.model,
        log_path,
    })
}

/// Layer table for a spec without building its weights.
pub fn spec_report(spec: &NetworkSpec) -> Result<String> {
    let rfs = spec.receptive_fields()?;
    let mut s = lerf::format_rf_table(&rfs);
    let p = spec.preeminent_layer;
    s.push_str(&format!(
        "preeminent layer: {} (stage {}, rf {})\ntarget stage: {}\nilc mode: {}\n",
        p,
        spec.layer_stage(p),
        rfs[p - 1].rf,
        spec.target_stage,
        spec.ilc_mode
    ));
    Ok(s)
}
