//! Finite-difference check of the full registration energy on small random
//! instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_difference_check, rel_error, Shape, Tape, Var};
use crate::error::Result;
use crate::field::{gaussian_smooth, gaussian_smooth_vector, Grid, ScalarField, VectorField};
use crate::kernels::MultiGaussianSpec;
use crate::regressor::{RegressorConfig, RegressorParams};
use crate::vsvf::{record_energy, warp, EnergyParams, EnergyVars, RegistrationTask, Stage, TapeModel};

/// Energy terms in report order.
pub const TERMS: [&str; 7] = ["total", "reg", "sim", "omt", "tv", "input_range", "weight_decay"];

/// Tensors whose entries only shift a batch-normalized channel; the energy
/// is invariant to them.
const BN_SHADOWED: [usize; 2] = [1, 5];

#[derive(Clone, Debug)]
pub struct TermCheck {
    pub term: &'static str,
    /// `"momentum"` or `"theta"`.
    pub wrt: &'static str,
    /// Largest per-coordinate relative error.
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Largest relative error of directional derivatives along random unit
    /// directions.
    pub directional_rel_error: f64,
    /// `(coordinate, finite difference, analytic)` with the largest error.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub stage: Stage,
    pub energy: f64,
    pub checks: Vec<TermCheck>,
    /// Largest `|fd|` or `|analytic|` over the conv biases that feed a batch
    /// normalization (both must vanish).
    pub shadowed_max_abs: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn max_directional_error(&self) -> f64 {
        self.checks.iter().map(|c| c.directional_rel_error).fold(0.0, f64::max)
    }

    pub fn total(&self, wrt: &str) -> Option<&TermCheck> {
        self.checks.iter().find(|c| c.term == "total" && c.wrt == wrt)
    }
}

/// Random smooth image and a smoothly deformed copy on a `2*size` image grid with an `size` computation
/// grid, random momentum and a perturbed regressor.
pub struct Instance {
    pub task: RegistrationTask,
    pub theta: RegressorParams,
    pub spec: MultiGaussianSpec,
    pub params: EnergyParams,
}

impl Instance {
    pub fn random(size: usize, seed: u64) -> Result<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid::square(2 * size)?;
        let raw = ScalarField::new(grid, (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let source = gaussian_smooth(&raw, 0.05)?;
        let bump = VectorField::new(grid, (0..2 * grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let bump = gaussian_smooth_vector(&bump, 0.1)?;
        let scale = 0.03 / bump.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut map = VectorField::identity(grid);
        map.values.iter_mut().zip(&bump.values).for_each(|(p, b)| *p += scale * b);
        let target = warp(&source, &map)?;
        let mut task = RegistrationTask::new(0, source, target, 0.5)?;
        let comp = task.comp_grid;
        let m = (0..comp.len() * comp.ndim()).map(|_| rng.gen_range(-0.2..0.2)).collect();
        task.set_momentum(VectorField::new(comp, m)?)?;

        let spec = MultiGaussianSpec::default();
        let mut theta = RegressorParams::init(RegressorConfig::new(spec.n()), rng.gen())?;
        for b in &mut theta.tensors[1] {
            *b = rng.gen_range(-0.1..0.1);
        }
        for s in &mut theta.tensors[2] {
            *s *= rng.gen_range(0.7..1.3);
        }
        for o in &mut theta.tensors[3] {
            *o = rng.gen_range(-0.1..0.1);
        }
        for b in &mut theta.tensors[5] {
            *b = rng.gen_range(-0.1..0.1);
        }
        for s in &mut theta.tensors[6] {
            *s *= rng.gen_range(0.7..1.3);
        }
        for o in &mut theta.tensors[7] {
            *o = rng.gen_range(-0.02..0.02);
        }
        Ok(Instance {
            task,
            theta,
            spec,
            params: EnergyParams::default(),
        })
    }
}

fn term_var(e: &EnergyVars, term: &str) -> Option<Var> {
    match term {
        "total" => Some(e.total),
        "reg" => Some(e.reg),
        "sim" => Some(e.sim),
        "omt" => e.omt,
        "tv" => e.tv,
        "input_range" => e.input_range,
        "weight_decay" => e.weight_decay,
        _ => None,
    }
}

fn term_value(inst: &Instance, stage: Stage, m: &[f64], theta: &RegressorParams, term: &str) -> Result<f64> {
    let grid = inst.task.comp_grid;
    let mut tape = Tape::new();
    let mv = tape.constant(m.to_vec(), Shape::field(grid, grid.ndim()))?;
    let tv = theta.record(&mut tape, false)?;
    let model = TapeModel {
        params: theta,
        vars: &tv,
    };
    let e = record_energy(&mut tape, &inst.task, mv, Some(model), &inst.spec, &inst.params, stage)?;
    match term_var(&e, term) {
        Some(v) => tape.scalar(v),
        None => Ok(0.0),
    }
}

/// Analytic gradients of one term with respect to momentum and the
/// flattened parameters.
fn term_gradient(inst: &Instance, stage: Stage, term: &str) -> Result<Option<(f64, Vec<f64>, Vec<f64>)>> {
    let grid = inst.task.comp_grid;
    let mut tape = Tape::new();
    let m = tape.leaf(inst.task.momentum.values.clone(), Shape::field(grid, grid.ndim()))?;
    let tv = inst.theta.record(&mut tape, stage == Stage::Local)?;
    let model = TapeModel {
        params: &inst.theta,
        vars: &tv,
    };
    let e = record_energy(&mut tape, &inst.task, m, Some(model), &inst.spec, &inst.params, stage)?;
    let Some(var) = term_var(&e, term) else { return Ok(None) };
    let value = tape.scalar(var)?;
    let g = tape.backward(var)?;
    let gm = g.get(m, grid.len() * grid.ndim())?;
    let mut gt = Vec::new();
    if stage == Stage::Local {
        for (v, t) in tv.iter().zip(&inst.theta.tensors) {
            gt.extend(g.get(*v, t.len())?);
        }
    }
    Ok(Some((value, gm, gt)))
}

/// Central differences of `loss` along `count` random unit directions,
/// compared with `grad . d`.
fn directional_check(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    grad: &[f64],
    h: f64,
    count: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let mut d: Vec<f64> = (0..point.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
        d.iter_mut().for_each(|x| *x /= norm);
        let shifted = |s: f64| -> Vec<f64> { point.iter().zip(&d).map(|(p, q)| p + s * q).collect() };
        let fd = (loss(&shifted(h))? - loss(&shifted(-h))?) / (2.0 * h);
        let ad: f64 = grad.iter().zip(&d).map(|(g, q)| g * q).sum();
        worst = worst.max(rel_error(fd, ad));
    }
    Ok(worst)
}

/// Checks every energy term of `stage` against central differences with
/// step `h` at all momentum and parameter coordinates.
pub fn energy_gradcheck(inst: &Instance, stage: Stage, h: f64, directions: usize) -> Result<GradcheckReport> {
    let point_m = inst.task.momentum.values.clone();
    let point_t = inst.theta.to_flat();
    let mut shadowed = Vec::new();
    let mut off = 0;
    for (k, t) in inst.theta.tensors.iter().enumerate() {
        if BN_SHADOWED.contains(&k) {
            shadowed.extend(off..off + t.len());
        }
        off += t.len();
    }
    let free: Vec<usize> = (0..point_t.len()).filter(|i| !shadowed.contains(i)).collect();

    let mut checks = Vec::new();
    let mut energy = 0.0;
    let mut shadowed_max_abs: f64 = 0.0;
    for term in TERMS {
        let Some((value, gm, gt)) = term_gradient(inst, stage, term)? else { continue };
        if term == "total" {
            energy = value;
        }
        let all_m: Vec<usize> = (0..point_m.len()).collect();
        let loss_m = |x: &[f64]| term_value(inst, stage, x, &inst.theta, term);
        let r = finite_difference_check(loss_m, &point_m, &gm, h, &all_m)?;
        let dir = directional_check(loss_m, &point_m, &gm, h, directions, 1)?;
        checks.push(TermCheck {
            term,
            wrt: "momentum",
            max_rel_error: r.max_rel_error,
            coordinates: all_m.len(),
            directional_rel_error: dir,
            worst: r.worst(),
        });
        if stage == Stage::Global {
            continue;
        }
        let mut theta = inst.theta.clone();
        let mut eval = |x: &[f64]| -> Result<f64> {
            theta.set_flat(x)?;
            term_value(inst, stage, &inst.task.momentum.values, &theta, term)
        };
        let r = finite_difference_check(&mut eval, &point_t, &gt, h, &free)?;
        let dir = directional_check(&mut eval, &point_t, &gt, h, directions, 2)?;
        checks.push(TermCheck {
            term,
            wrt: "theta",
            max_rel_error: r.max_rel_error,
            coordinates: free.len(),
            directional_rel_error: dir,
            worst: r.worst(),
        });
        let s = finite_difference_check(&mut eval, &point_t, &gt, h, &shadowed)?;
        for (_, fd, ad) in s.samples {
            shadowed_max_abs = shadowed_max_abs.max(ad.abs()).max(fd.abs());
        }
    }
    Ok(GradcheckReport {
        stage,
        energy,
        checks,
        shadowed_max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_energy_gradients_match_finite_differences() {
        let inst = Instance::random(8, 7).unwrap();
        for stage in [Stage::Global, Stage::Local] {
            let r = energy_gradcheck(&inst, stage, 1e-5, 16).unwrap();
            for c in &r.checks {
                assert!(
                    c.directional_rel_error < 1e-4,
                    "{stage:?} {} wrt {}: {:.3e}",
                    c.term,
                    c.wrt,
                    c.directional_rel_error
                );
                if c.wrt == "momentum" {
                    assert!(c.max_rel_error < 1e-4, "{stage:?} {}: {:.3e} {:?}", c.term, c.max_rel_error, c.worst);
                }
            }
            assert!(r.total("momentum").is_some());
            assert_eq!(r.total("theta").is_some(), stage == Stage::Local);
            assert!(r.shadowed_max_abs < 1e-6, "{}", r.shadowed_max_abs);
        }
    }
}
