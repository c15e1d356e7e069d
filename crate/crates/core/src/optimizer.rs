//! Two-stage curriculum training and frozen-metric registration.
//!
//! Stage one fits every pair's momentum under the global multi-Gaussian
//! kernel. Stage two continues from those momenta and jointly fits the
//! momenta and the regressor. Both use SGD with Nesterov momentum, separate
//! gradient clipping for the shared and individual parameters and a
//! plateau learning-rate schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::io::{decode_raw, encode_raw};
use crate::field::VectorField;
use crate::kernels::MultiGaussianSpec;
use crate::regressor::RegressorParams;
use crate::vsvf::{
    energy_gradient_at, register_output, EnergyBreakdown, EnergyGradient, EnergyParams, RegistrationOutput,
    RegistrationTask, Stage,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub nesterov_momentum: f64,
    pub lr_individual: f64,
    pub lr_shared: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs_global: usize,
    pub epochs_local: usize,
    pub test_iters_global: usize,
    pub test_iters_local: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            nesterov_momentum: 0.9,
            lr_individual: 0.1,
            lr_shared: 0.025,
            clip_norm: 1.0,
            batch_size: 100,
            inner_steps: 5,
            plateau_factor: 0.5,
            plateau_patience: 10,
            epochs_global: 50,
            epochs_local: 100,
            test_iters_global: 250,
            test_iters_local: 500,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_individual > 0.0 && self.lr_shared > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::param("learning rates and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.nesterov_momentum) {
            return Err(Error::param("Nesterov momentum must lie in [0,1)"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.plateau_patience == 0 {
            return Err(Error::param("plateau factor must lie in (0,1) and patience be >= 1"));
        }
        if self.batch_size == 0 || self.inner_steps == 0 {
            return Err(Error::param("batch size and inner steps must be positive"));
        }
        Ok(())
    }
}

/// `v <- mu v + g; p <- p - lr (g + mu v)`.
pub fn sgd_nesterov_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
}

/// Scales `grads` in place to norm `max_norm` if it is larger; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Reduce-on-plateau schedule for a minimized quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> PlateauScheduler {
        PlateauScheduler {
            factor,
            patience,
            threshold: 1e-8,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records one monitored value; returns the factor to apply to the
    /// learning rates (1 or `factor`).
    pub fn step(&mut self, value: f64) -> f64 {
        if value < self.best * (1.0 - self.threshold.copysign(self.best)) || self.best.is_infinite() {
            self.best = value;
            self.bad = 0;
            return 1.0;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            return self.factor;
        }
        1.0
    }
}

/// Momentum and optimizer velocity of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskState {
    pub momentum: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl TaskState {
    fn zeros(len: usize) -> TaskState {
        TaskState {
            momentum: vec![0.0; len],
            velocity: vec![0.0; len],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: RegressorParams,
    pub theta_velocity: Vec<f64>,
    pub tasks: Vec<TaskState>,
    pub stage: Stage,
    /// Epochs completed within the current stage.
    pub epoch: usize,
    pub lr_individual: f64,
    pub lr_shared: f64,
    pub plateau: PlateauScheduler,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: Stage,
    pub lr_shared: f64,
    pub lr_individual: f64,
    /// Mean over the corpus of the energies at each pair's first step of
    /// the epoch.
    pub energy: EnergyBreakdown,
}

pub const LOG_HEADER: &str = "epoch,stage,lr_shared,lr_individual,total,reg,sim,omt,tv,input_range,weight_decay";

impl LogRow {
    pub fn csv(&self) -> String {
        let e = &self.energy;
        let stage = match self.stage {
            Stage::Global => "global",
            Stage::Local => "local",
        };
        format!(
            "{},{stage},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.lr_shared,
            self.lr_individual,
            e.total,
            e.reg,
            e.sim,
            e.omt,
            e.tv,
            e.input_range,
            e.weight_decay
        )
    }
}

/// CSV text with a `# config_hash=` comment line and a header row.
pub fn log_csv(rows: &[LogRow], config_hash: &str) -> String {
    let mut out = format!("# config_hash={config_hash}\n{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv());
    }
    out
}

fn mean_breakdown(parts: &[EnergyBreakdown]) -> EnergyBreakdown {
    let n = parts.len() as f64;
    let mut m = EnergyBreakdown::default();
    for p in parts {
        m.total += p.total / n;
        m.reg += p.reg / n;
        m.sim += p.sim / n;
        m.omt += p.omt / n;
        m.tv += p.tv / n;
        m.input_range += p.input_range / n;
        m.weight_decay += p.weight_decay / n;
    }
    m
}

/// Joint training over a fixed corpus.
pub struct Trainer<'a> {
    pub tasks: &'a [RegistrationTask],
    pub spec: &'a MultiGaussianSpec,
    pub energy: &'a EnergyParams,
    pub config: &'a OptimizerConfig,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Trainer<'a> {
    /// Fresh training state: zero momenta, stage one.
    pub fn new(
        tasks: &'a [RegistrationTask],
        theta: RegressorParams,
        spec: &'a MultiGaussianSpec,
        energy: &'a EnergyParams,
        config: &'a OptimizerConfig,
        jobs: usize,
    ) -> Result<Trainer<'a>> {
        config.validate()?;
        energy.validate()?;
        spec.validate()?;
        if tasks.is_empty() {
            return Err(Error::param("training needs at least one pair"));
        }
        let state = TrainState {
            theta_velocity: vec![0.0; theta.num_params()],
            theta,
            tasks: tasks.iter().map(|t| TaskState::zeros(t.momentum.values.len())).collect(),
            stage: Stage::Global,
            epoch: 0,
            lr_individual: config.lr_individual,
            lr_shared: config.lr_shared,
            plateau: PlateauScheduler::new(config.plateau_factor, config.plateau_patience),
        };
        let pool = if jobs > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(jobs)
                    .build()
                    .map_err(|e| Error::param(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Trainer {
            tasks,
            spec,
            energy,
            config,
            state,
            log: Vec::new(),
            pool,
        })
    }

    fn stage_epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Global => self.config.epochs_global,
            Stage::Local => self.config.epochs_local,
        }
    }

    pub fn finished(&self) -> bool {
        self.state.stage == Stage::Local && self.state.epoch >= self.config.epochs_local
    }

    /// Switches to stage two: velocities and schedule start afresh.
    fn enter_local(&mut self) {
        let s = &mut self.state;
        s.stage = Stage::Local;
        s.epoch = 0;
        s.tasks.iter_mut().for_each(|t| t.velocity.iter_mut().for_each(|v| *v = 0.0));
        s.theta_velocity.iter_mut().for_each(|v| *v = 0.0);
        s.lr_individual = self.config.lr_individual;
        s.lr_shared = self.config.lr_shared;
        s.plateau = PlateauScheduler::new(self.config.plateau_factor, self.config.plateau_patience);
    }

    fn batch_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let stage = match self.state.stage {
            Stage::Global => 0,
            Stage::Local => 1,
        };
        rng.set_stream(1 + stage * (1 << 32) + self.state.epoch as u64);
        rng
    }

    fn gradients(&self, batch: &[usize], stage: Stage) -> Result<Vec<EnergyGradient>> {
        let theta = (stage == Stage::Local).then_some(&self.state.theta);
        let eval = |&i: &usize| {
            energy_gradient_at(
                &self.tasks[i],
                &self.state.tasks[i].momentum,
                theta,
                self.spec,
                self.energy,
                stage,
                stage == Stage::Local,
            )
        };
        match &self.pool {
            Some(pool) => pool.install(|| batch.par_iter().map(eval).collect()),
            None => batch.iter().map(eval).collect(),
        }
    }

    /// Runs one epoch of the current stage and appends a log row.
    pub fn run_epoch(&mut self) -> Result<LogRow> {
        if self.state.stage == Stage::Global && self.state.epoch >= self.config.epochs_global {
            self.enter_local();
        }
        if self.finished() {
            return Err(Error::param("training already finished"));
        }
        let stage = self.state.stage;
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        order.shuffle(&mut self.batch_rng());
        let bs = self.config.batch_size.min(order.len());
        let mut first = vec![EnergyBreakdown::default(); self.tasks.len()];
        let mu = self.config.nesterov_momentum;
        for batch in order.chunks(bs) {
            for step in 0..self.config.inner_steps {
                let grads = self.gradients(batch, stage)?;
                let mut shared: Option<Vec<f64>> = None;
                for (&i, g) in batch.iter().zip(&grads) {
                    if !g.energy.total.is_finite() {
                        return Err(Error::Divergence {
                            step: self.state.epoch,
                            what: format!("non-finite energy for pair {}", self.tasks[i].id),
                        });
                    }
                    if step == 0 {
                        first[i] = g.energy;
                    }
                    if let Some(tg) = &g.theta {
                        match &mut shared {
                            None => shared = Some(tg.clone()),
                            Some(acc) => acc.iter_mut().zip(tg).for_each(|(a, b)| *a += b),
                        }
                    }
                }
                for (&i, g) in batch.iter().zip(grads) {
                    let mut gm = g.momentum;
                    clip_gradients(&mut gm, self.config.clip_norm);
                    let ts = &mut self.state.tasks[i];
                    sgd_nesterov_step(&mut ts.momentum, &gm, &mut ts.velocity, self.state.lr_individual, mu);
                }
                if let Some(mut gs) = shared {
                    clip_gradients(&mut gs, self.config.clip_norm);
                    let mut flat = self.state.theta.to_flat();
                    sgd_nesterov_step(&mut flat, &gs, &mut self.state.theta_velocity, self.state.lr_shared, mu);
                    self.state.theta.set_flat(&flat)?;
                }
            }
        }
        let energy = mean_breakdown(&first);
        let row = LogRow {
            epoch: self.log.len(),
            stage,
            lr_shared: self.state.lr_shared,
            lr_individual: self.state.lr_individual,
            energy,
        };
        let f = self.state.plateau.step(energy.total);
        self.state.lr_individual *= f;
        self.state.lr_shared *= f;
        self.state.epoch += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs all remaining epochs of both stages. On divergence the last
    /// good state is written to `checkpoint` (if given) before the error is
    /// returned.
    pub fn run(&mut self, checkpoint: Option<&Path>, config_hash: &str) -> Result<()> {
        while !self.finished() {
            if self.state.stage == Stage::Global
                && self.state.epoch >= self.stage_epochs(Stage::Global)
                && self.config.epochs_local == 0
            {
                break;
            }
            let good = (self.state.clone(), self.log.len());
            match self.run_epoch() {
                Ok(_) => {}
                Err(e @ Error::Divergence { .. }) => {
                    self.state = good.0;
                    self.log.truncate(good.1);
                    if let Some(dir) = checkpoint {
                        self.save(dir, config_hash)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(dir) = checkpoint {
            self.save(dir, config_hash)?;
        }
        Ok(())
    }

    pub fn momenta(&self) -> Result<Vec<VectorField>> {
        self.tasks
            .iter()
            .zip(&self.state.tasks)
            .map(|(t, s)| VectorField::new(t.comp_grid, s.momentum.clone()))
            .collect()
    }

    /// Writes `theta.bin`, `task_<id>.bin`, `state.txt` and `log.csv`.
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.state.theta.save(dir.join("theta.bin"))?;
        let grid_d = |t: &RegistrationTask| t.comp_grid.ndim();
        for (t, s) in self.tasks.iter().zip(&self.state.tasks) {
            let mut values = s.momentum.clone();
            values.extend_from_slice(&s.velocity);
            fs::write(
                dir.join(format!("task_{}.bin", t.id)),
                encode_raw(&t.comp_grid, 2 * grid_d(t), &values),
            )?;
        }
        let mut theta_v = Vec::new();
        for v in &self.state.theta_velocity {
            theta_v.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("theta_velocity.bin"), theta_v)?;
        let s = &self.state;
        let stage = match s.stage {
            Stage::Global => "global",
            Stage::Local => "local",
        };
        fs::write(
            dir.join("state.txt"),
            format!(
                "stage {stage}\nepoch {}\nlr_individual {:?}\nlr_shared {:?}\nplateau_best {:?}\nplateau_bad {}\n",
                s.epoch, s.lr_individual, s.lr_shared, s.plateau.best, s.plateau.bad
            ),
        )?;
        fs::write(dir.join("log.csv"), log_csv(&self.log, config_hash))?;
        Ok(())
    }

    /// Restores a state written by [`Trainer::save`] (the log is restored
    /// from `log.csv`).
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let theta = RegressorParams::load(dir.join("theta.bin"))?;
        let tv = fs::read(dir.join("theta_velocity.bin"))?;
        if tv.len() != theta.num_params() * 8 {
            return Err(bad("theta velocity length"));
        }
        let theta_velocity = tv.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for t in self.tasks {
            let (grid, channels, values) = decode_raw(&fs::read(dir.join(format!("task_{}.bin", t.id)))?)?;
            if grid != t.comp_grid || channels != 2 * grid.ndim() {
                return Err(bad("task state shape"));
            }
            let half = values.len() / 2;
            tasks.push(TaskState {
                momentum: values[..half].to_vec(),
                velocity: values[half..].to_vec(),
            });
        }
        let text = fs::read_to_string(dir.join("state.txt"))?;
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(' ') {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(k));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k)) };
        let int = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| bad(k)) };
        let stage = match get("stage")?.as_str() {
            "global" => Stage::Global,
            "local" => Stage::Local,
            _ => return Err(bad("stage")),
        };
        let mut plateau = PlateauScheduler::new(self.config.plateau_factor, self.config.plateau_patience);
        plateau.best = num("plateau_best")?;
        plateau.bad = int("plateau_bad")?;
        self.state = TrainState {
            theta,
            theta_velocity,
            tasks,
            stage,
            epoch: int("epoch")?,
            lr_individual: num("lr_individual")?,
            lr_shared: num("lr_shared")?,
            plateau,
        };
        self.log = parse_log(&fs::read_to_string(dir.join("log.csv"))?)?;
        Ok(())
    }
}

fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let bad = || Error::Format("malformed log.csv".into());
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad());
        }
        let x = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        rows.push(LogRow {
            epoch: f[0].parse().map_err(|_| bad())?,
            stage: match f[1] {
                "global" => Stage::Global,
                "local" => Stage::Local,
                _ => return Err(bad()),
            },
            lr_shared: x(2)?,
            lr_individual: x(3)?,
            energy: EnergyBreakdown {
                total: x(4)?,
                reg: x(5)?,
                sim: x(6)?,
                omt: x(7)?,
                tv: x(8)?,
                input_range: x(9)?,
                weight_decay: x(10)?,
            },
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub theta: RegressorParams,
    pub momenta: Vec<VectorField>,
    pub log: Vec<LogRow>,
}

/// Runs both curriculum stages from scratch.
pub fn train_curriculum(
    tasks: &[RegistrationTask],
    theta: RegressorParams,
    spec: &MultiGaussianSpec,
    energy: &EnergyParams,
    config: &OptimizerConfig,
    jobs: usize,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(tasks, theta, spec, energy, config, jobs)?;
    trainer.run(None, "")?;
    Ok(TrainOutput {
        momenta: trainer.momenta()?,
        theta: trainer.state.theta.clone(),
        log: trainer.log,
    })
}

/// Result of optimizing one pair with a fixed regressor.
#[derive(Clone, Debug)]
pub struct FrozenRegistration {
    pub momentum_global: VectorField,
    pub momentum: VectorField,
    pub global: RegistrationOutput,
    pub local: RegistrationOutput,
    /// Energy at every iteration of both stages.
    pub trace: Vec<(Stage, EnergyBreakdown)>,
}

/// Momentum-only optimization: global-stage iterations from zero, then
/// local-stage iterations with `theta` frozen.
pub fn register_with_frozen_metric(
    task: &RegistrationTask,
    theta: &RegressorParams,
    spec: &MultiGaussianSpec,
    energy: &EnergyParams,
    config: &OptimizerConfig,
) -> Result<FrozenRegistration> {
    config.validate()?;
    let mut task = task.clone();
    let mut trace = Vec::new();
    let mut momentum = vec![0.0; task.momentum.values.len()];
    for (stage, iters) in [(Stage::Global, config.test_iters_global), (Stage::Local, config.test_iters_local)] {
        let mut velocity = vec![0.0; momentum.len()];
        let mut lr = config.lr_individual;
        let mut plateau = PlateauScheduler::new(config.plateau_factor, config.plateau_patience);
        for it in 0..iters {
            let g = energy_gradient_at(&task, &momentum, Some(theta), spec, energy, stage, false)?;
            if !g.energy.total.is_finite() {
                return Err(Error::Divergence {
                    step: it,
                    what: format!("non-finite energy for pair {}", task.id),
                });
            }
            trace.push((stage, g.energy));
            let mut gm = g.momentum;
            clip_gradients(&mut gm, config.clip_norm);
            sgd_nesterov_step(&mut momentum, &gm, &mut velocity, lr, config.nesterov_momentum);
            lr *= plateau.step(g.energy.total);
        }
        if stage == Stage::Global {
            task.set_momentum(VectorField::new(task.comp_grid, momentum.clone())?)?;
        }
    }
    let momentum_global = task.momentum.clone();
    let global = register_output(&task, Some(theta), spec, energy, Stage::Global)?;
    task.set_momentum(VectorField::new(task.comp_grid, momentum)?)?;
    let local = register_output(&task, Some(theta), spec, energy, Stage::Local)?;
    Ok(FrozenRegistration {
        momentum_global,
        momentum: task.momentum,
        global,
        local,
        trace,
    })
}
