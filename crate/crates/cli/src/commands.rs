use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use metreg::field::io::{read_image, read_scalar_raw, read_vector_raw, write_heatmap, write_pgm, write_scalar_raw, write_vector_raw};
use metreg::field::{resample, Grid, ScalarField, VectorField};
use metreg::gradcheck::{energy_gradcheck, Instance};
use metreg::optimizer::{register_with_frozen_metric, Trainer};
use metreg::regressor::RegressorParams;
use metreg::synth::{
    displacement_error_field, generate_corpus, masked_mean, read_case, stddev_of, write_case, ErrorStats, Region,
};
use metreg::vsvf::{jacobian_determinant_stats, EnergyBreakdown, RegistrationTask, Stage};

use crate::config::RunConfig;
use crate::CliError;

fn csv_head(hash: &str, header: &str) -> String {
    format!("# config_hash={hash}\n{header}\n")
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Global => "global",
        Stage::Local => "local",
    }
}

fn energy_cols(e: &EnergyBreakdown) -> String {
    format!(
        "{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
        e.total, e.reg, e.sim, e.omt, e.tv, e.input_range, e.weight_decay
    )
}

const ENERGY_COLS: &str = "total,reg,sim,omt,tv,input_range,weight_decay";

pub fn synth_gen(
    out: &Path,
    n: usize,
    seed: u64,
    size: Option<usize>,
    config: Option<&Path>,
    jobs: usize,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = size {
        cfg.run.size = s;
    }
    if n == 0 {
        return Err(CliError::Config("--n must be at least 1".into()));
    }
    let grid = Grid::square(cfg.run.size)?;
    let corpus = generate_corpus(n, seed, grid, &cfg.kernels, &cfg.synth, jobs)?;
    fs::create_dir_all(out)?;
    for (i, case) in corpus.cases.iter().enumerate() {
        write_case(&out.join(format!("case_{i:04}")), case, &corpus.manifest)?;
    }
    fs::write(out.join("manifest.txt"), &corpus.manifest)?;
    cfg.echo(out)?;
    println!("wrote {n} cases to {}", out.display());
    Ok(())
}

/// Case directories below `root` holding `marker`, sorted by name.
fn case_dirs(root: &Path, marker: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(marker).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Io(format!("no case directories with {marker} in {}", root.display())));
    }
    Ok(dirs)
}

fn load_image(dir: &Path, stem: &str) -> Result<ScalarField, CliError> {
    let raw = dir.join(format!("{stem}.bin"));
    let path = if raw.is_file() { raw } else { dir.join(format!("{stem}.pgm")) };
    Ok(read_image(path)?)
}

pub fn train(corpus: &Path, out: &Path, config: Option<&Path>, resume: bool, jobs: usize) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = cfg.hash();
    let mut tasks = Vec::new();
    for (i, dir) in case_dirs(corpus, "manifest.txt")?.iter().enumerate() {
        let source = load_image(dir, "source")?;
        let target = load_image(dir, "target")?;
        tasks.push(RegistrationTask::new(i, source, target, cfg.run.comp_factor)?);
    }
    let theta = RegressorParams::init(cfg.regressor.build(cfg.kernels.n()), cfg.optimizer.seed)?;
    let mut trainer = Trainer::new(&tasks, theta, &cfg.kernels, &cfg.energy, &cfg.optimizer, jobs)?;
    if resume {
        trainer.restore(out)?;
    }
    cfg.echo(out)?;
    trainer.run(Some(out), &hash)?;
    if let Some(last) = trainer.log.last() {
        println!(
            "trained {} pairs: stage {} epoch {} energy {:e}",
            tasks.len(),
            stage_name(last.stage),
            last.epoch,
            last.energy.total
        );
    }
    Ok(())
}

fn write_fields(out: &Path, stem: &str, fields: &[ScalarField], grid: Grid) -> Result<Vec<ScalarField>, CliError> {
    let mut up = Vec::new();
    for (i, f) in fields.iter().enumerate() {
        let g = resample(f, grid)?;
        write_scalar_raw(out.join(format!("{stem}_{i}.bin")), &g)?;
        write_pgm(out.join(format!("{stem}_{i}.pgm")), &g, false)?;
        up.push(g);
    }
    Ok(up)
}

pub fn register(theta: &Path, source: &Path, target: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = cfg.hash();
    let theta = RegressorParams::load(theta)?;
    let source = read_image(source)?;
    let target = read_image(target)?;
    let task = RegistrationTask::new(0, source, target, cfg.run.comp_factor)?;
    let r = register_with_frozen_metric(&task, &theta, &cfg.kernels, &cfg.energy, &cfg.optimizer)?;
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    write_vector_raw(out.join("phi_inv.bin"), &r.local.phi_inv)?;
    write_vector_raw(out.join("phi_inv_global.bin"), &r.global.phi_inv)?;
    write_vector_raw(out.join("momentum.bin"), &r.momentum)?;
    write_scalar_raw(out.join("warped.bin"), &r.local.warped)?;
    write_pgm(out.join("warped.pgm"), &r.local.warped, true)?;

    let mut csv = csv_head(&hash, &format!("iteration,stage,{ENERGY_COLS}"));
    for (i, (stage, e)) in r.trace.iter().enumerate() {
        let _ = writeln!(csv, "{i},{},{}", stage_name(*stage), energy_cols(e));
    }
    for (name, o) in [("final_global", &r.global), ("final_local", &r.local)] {
        let _ = writeln!(csv, "{name},{name},{}", energy_cols(&o.energy));
    }
    fs::write(out.join("energy.csv"), csv)?;

    let grid = task.source.grid;
    if let Some(w) = &r.local.weights {
        let up = write_fields(out, "weights", w, grid)?;
        let sd = stddev_of(&up, &cfg.kernels)?;
        write_scalar_raw(out.join("stddev.bin"), &sd)?;
        write_heatmap(out.join("stddev.pgm"), &sd)?;
    }
    if let Some(p) = &r.local.preweights {
        write_fields(out, "preweights", p, grid)?;
    }
    let first = r.trace.first().map(|(_, e)| e.sim).unwrap_or(f64::NAN);
    println!(
        "registered: sim {:e} -> {:e}, total {:e}",
        first, r.local.energy.sim, r.local.energy.total
    );
    Ok(())
}

fn stats_cols(s: &Option<ErrorStats>) -> String {
    match s {
        Some(s) => format!("{:e},{:e},{:e},{:e},{}", s.median, s.q1, s.q3, s.mean, s.count),
        None => ",,,,0".to_string(),
    }
}

/// Weight fields of a run, or ground-truth weights when absent.
fn load_weights(run: &Path, truth: &Path) -> Result<Option<Vec<ScalarField>>, CliError> {
    for (dir, stem) in [(run, "weights"), (truth, "gt_weights")] {
        let mut w = Vec::new();
        while dir.join(format!("{stem}_{}.bin", w.len())).is_file() {
            w.push(read_scalar_raw(dir.join(format!("{stem}_{}.bin", w.len())))?);
        }
        if !w.is_empty() {
            return Ok(Some(w));
        }
    }
    Ok(None)
}

pub fn evaluate(runs: &Path, truth: &Path, out: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let hash = cfg.hash();
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let mut errors = csv_head(&hash, "case,region,median,q1,q3,mean,count");
    let mut jac = csv_head(&hash, "case,min,p1,p5,p50,p95,p99,mean,std");
    let mut sd_csv = csv_head(&hash, "case,background,inner,outer");
    let mut pooled = [Vec::new(), Vec::new()];
    let mut evaluated = 0;
    for dir in case_dirs(truth, "gt_map.bin")? {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("case").to_string();
        let run = runs.join(&name);
        let est_path = if run.join("phi_inv.bin").is_file() {
            run.join("phi_inv.bin")
        } else if run.join("gt_map.bin").is_file() {
            run.join("gt_map.bin")
        } else {
            continue;
        };
        let case = read_case(&dir)?;
        let est: VectorField = read_vector_raw(est_path)?;
        let e = displacement_error_field(&est, &case.gt_map)?;
        for (k, region) in [Region::Inner, Region::Outer].into_iter().enumerate() {
            let vals: Vec<f64> = e
                .values
                .iter()
                .zip(case.target_masks.get(region))
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .collect();
            let _ = writeln!(errors, "{name},{},{}", region.name(), stats_cols(&ErrorStats::of(&vals)));
            pooled[k].extend(vals);
        }
        let j = jacobian_determinant_stats(&est, None)?;
        let _ = writeln!(
            jac,
            "{name},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            j.min, j.p1, j.p5, j.p50, j.p95, j.p99, j.mean, j.std
        );
        write_heatmap(out.join(format!("{name}_error.pgm")), &e)?;
        if let Some(w) = load_weights(&run, &dir)? {
            let grid = case.gt_map.grid;
            let w: Vec<ScalarField> = w.iter().map(|f| resample(f, grid)).collect::<Result<_, _>>()?;
            let sd = stddev_of(&w, &cfg.kernels)?;
            write_heatmap(out.join(format!("{name}_stddev.pgm")), &sd)?;
            for (i, f) in w.iter().enumerate() {
                write_pgm(out.join(format!("{name}_w{i}.pgm")), f, false)?;
            }
            let m = |r: Region| masked_mean(&sd, case.masks.get(r)).map_or(String::new(), |v| format!("{v:e}"));
            let _ = writeln!(
                sd_csv,
                "{name},{},{},{}",
                m(Region::Background),
                m(Region::Inner),
                m(Region::Outer)
            );
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(CliError::Io(format!("no run directories in {} match the truth cases", runs.display())));
    }
    for (k, region) in [Region::Inner, Region::Outer].into_iter().enumerate() {
        let _ = writeln!(errors, "all,{},{}", region.name(), stats_cols(&ErrorStats::of(&pooled[k])));
    }
    fs::write(out.join("displacement_error.csv"), errors)?;
    fs::write(out.join("jacobian.csv"), jac)?;
    fs::write(out.join("stddev.csv"), sd_csv)?;
    let med = |k: usize| ErrorStats::of(&pooled[k]).map_or(f64::NAN, |s| s.median);
    println!(
        "evaluated {evaluated} cases: median error inner {:.4} px, outer {:.4} px",
        med(0),
        med(1)
    );
    Ok(())
}

pub fn gradcheck(size: usize, seed: u64, step: f64) -> Result<(), CliError> {
    if size < 4 {
        return Err(CliError::Config("--size must be at least 4".into()));
    }
    let inst = Instance::random(size, seed)?;
    let mut ok = true;
    println!("stage,term,wrt,coordinates,max_rel_error,directional_rel_error");
    for stage in [Stage::Global, Stage::Local] {
        let r = energy_gradcheck(&inst, stage, step, 32)?;
        for c in &r.checks {
            println!(
                "{},{},{},{},{:e},{:e}",
                stage_name(stage),
                c.term,
                c.wrt,
                c.coordinates,
                c.max_rel_error,
                c.directional_rel_error
            );
            ok &= c.directional_rel_error < 1e-4 && (c.wrt != "momentum" || c.max_rel_error < 1e-4);
        }
        ok &= r.shadowed_max_abs < 1e-6;
        println!("# {} batch-norm shadowed bias gradients max |g| {:e}", stage_name(stage), r.shadowed_max_abs);
    }
    println!("# verdict {}", if ok { "pass" } else { "fail" });
    Ok(())
}
