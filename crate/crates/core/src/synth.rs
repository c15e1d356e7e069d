//! Synthetic concentric-ring pairs with known deformations and known
//! regularizer weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::io::{read_raw, read_scalar_raw, read_vector_raw, write_pgm, write_raw, write_scalar_raw, write_vector_raw};
use crate::field::{gaussian_smooth, gaussian_smooth_vector, gradient, Grid, ScalarField, VectorField};
use crate::kernels::{localized_smooth, LocalWeights, MultiGaussianSpec};
use crate::vsvf::{advect_inverse_map, compose, jacobian_determinant_stats, percentile, warp};

/// Region labels, in mask-channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Inner,
    Outer,
    Background,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Inner, Region::Outer, Region::Background];

    pub fn name(self) -> &'static str {
        match self {
            Region::Inner => "inner",
            Region::Outer => "outer",
            Region::Background => "background",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Inner disk radius range.
    pub inner_radius: (f64, f64),
    /// Outer ring width range.
    pub ring_width: (f64, f64),
    /// Maximal offset of the common center from the domain center.
    pub center_jitter: f64,
    /// Intensities of inner disk, outer ring and background.
    pub intensities: [f64; 3],
    /// Pre-weights of inner disk, outer ring and background.
    pub region_weights: [Vec<f64>; 3],
    pub sectors: usize,
    pub momentum_amplitude: f64,
    /// Smoothing of the image whose gradient gives boundary normals.
    pub edge_sigma: f64,
    pub momentum_sigma: f64,
    pub noise_amplitude: f64,
    pub noise_sigma: f64,
    pub rk4_steps: usize,
    pub max_attempts: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            inner_radius: (0.12, 0.18),
            ring_width: (0.08, 0.14),
            center_jitter: 0.03,
            intensities: [0.5, 0.9, 0.1],
            region_weights: [
                vec![0.0, 0.0, 0.0, 1.0],
                vec![0.05, 0.55, 0.3, 0.1],
                vec![0.0, 0.0, 0.0, 1.0],
            ],
            sectors: 10,
            momentum_amplitude: 1.0,
            edge_sigma: 0.01,
            momentum_sigma: 0.02,
            noise_amplitude: 0.05,
            noise_sigma: 0.01,
            rk4_steps: 20,
            max_attempts: 10,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, spec: &MultiGaussianSpec) -> Result<()> {
        for w in &self.region_weights {
            if w.len() != spec.n() || w.iter().any(|&x| !(x >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidWeights("region weights must lie on the simplex".into()));
            }
        }
        let (r0, r1) = self.inner_radius;
        let (w0, w1) = self.ring_width;
        if !(0.0 < r0 && r0 <= r1 && 0.0 < w0 && w0 <= w1 && r1 + w1 + self.center_jitter < 0.5) {
            return Err(Error::param("ring radii must fit inside the unit domain"));
        }
        if self.sectors == 0 || self.rk4_steps == 0 || self.max_attempts == 0 {
            return Err(Error::param("sectors, RK4 steps and attempts must be positive"));
        }
        if !(self.momentum_amplitude >= 0.0 && self.noise_amplitude >= 0.0) {
            return Err(Error::param("amplitudes must be non-negative"));
        }
        if !(self.edge_sigma > 0.0 && self.momentum_sigma > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::param("smoothing widths must be positive"));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "inner_radius {:?} {:?}", self.inner_radius.0, self.inner_radius.1);
        let _ = writeln!(s, "ring_width {:?} {:?}", self.ring_width.0, self.ring_width.1);
        let _ = writeln!(s, "center_jitter {:?}", self.center_jitter);
        let _ = writeln!(s, "intensities {:?}", self.intensities);
        for (r, w) in Region::ALL.iter().zip(&self.region_weights) {
            let _ = writeln!(s, "weights_{} {:?}", r.name(), w);
        }
        let _ = writeln!(s, "sectors {}", self.sectors);
        let _ = writeln!(s, "momentum_amplitude {:?}", self.momentum_amplitude);
        let _ = writeln!(s, "edge_sigma {:?}", self.edge_sigma);
        let _ = writeln!(s, "momentum_sigma {:?}", self.momentum_sigma);
        let _ = writeln!(s, "noise_amplitude {:?}", self.noise_amplitude);
        let _ = writeln!(s, "noise_sigma {:?}", self.noise_sigma);
        let _ = writeln!(s, "rk4_steps {}", self.rk4_steps);
        s
    }
}

/// Boolean region masks over one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    pub grid: Grid,
    pub inner: Vec<bool>,
    pub outer: Vec<bool>,
    pub background: Vec<bool>,
}

impl Masks {
    pub fn get(&self, r: Region) -> &[bool] {
        match r {
            Region::Inner => &self.inner,
            Region::Outer => &self.outer,
            Region::Background => &self.background,
        }
    }

    /// Masks from a per-node label; nodes next to a label change or on the
    /// domain border belong to no mask.
    fn from_labels(grid: Grid, labels: &[Region]) -> Masks {
        let d = grid.ndim();
        let mut keep = vec![true; grid.len()];
        for (i, k) in keep.iter_mut().enumerate() {
            let ix = grid.unravel(i);
            for a in 0..d {
                let n = grid.dims()[a];
                if ix[a] == 0 || ix[a] + 1 == n {
                    *k = false;
                    break;
                }
                let s = grid.stride(a);
                if labels[i - s] != labels[i] || labels[i + s] != labels[i] {
                    *k = false;
                    break;
                }
            }
        }
        let pick = |r: Region| labels.iter().zip(&keep).map(|(l, &k)| k && *l == r).collect();
        Masks {
            grid,
            inner: pick(Region::Inner),
            outer: pick(Region::Outer),
            background: pick(Region::Background),
        }
    }

    fn to_values(&self) -> Vec<f64> {
        Region::ALL
            .iter()
            .flat_map(|&r| self.get(r).iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect()
    }

    fn from_values(grid: Grid, values: &[f64]) -> Result<Masks> {
        if values.len() != 3 * grid.len() {
            return Err(Error::Format("mask file needs three channels".into()));
        }
        let ch = |c: usize| values[c * grid.len()..(c + 1) * grid.len()].iter().map(|&v| v > 0.5).collect();
        Ok(Masks {
            grid,
            inner: ch(0),
            outer: ch(1),
            background: ch(2),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rings {
    pub center: [f64; 2],
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Rings {
    pub fn label(&self, p: &[f64]) -> Region {
        let r = ((p[0] - self.center[0]).powi(2) + (p[1] - self.center[1]).powi(2)).sqrt();
        if r < self.inner_radius {
            Region::Inner
        } else if r < self.outer_radius {
            Region::Outer
        } else {
            Region::Background
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub seed: u64,
    /// Generation attempts consumed (1 unless the guards rejected a draw).
    pub attempts: usize,
    pub rings: Rings,
    /// Noisy source image.
    pub source: ScalarField,
    pub target: ScalarField,
    /// Source without noise.
    pub source_clean: ScalarField,
    /// Inverse map of the source-to-target step: `target = source o gt_map`.
    pub gt_map: VectorField,
    /// Ground-truth smoothed weights in source coordinates.
    pub gt_weights: LocalWeights,
    /// Masks in source coordinates.
    pub masks: Masks,
    /// Masks in target coordinates, where `gt_map` is defined.
    pub target_masks: Masks,
}

fn unit_coords(grid: &Grid, i: usize) -> [f64; 2] {
    let ix = grid.unravel(i);
    [grid.coord(0, ix[0]), grid.coord(1, ix[1])]
}

/// Radially oriented momentum on image edges with one random sign per
/// angular sector, smoothed.
fn sector_momentum(
    image: &ScalarField,
    center: [f64; 2],
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<VectorField> {
    let grid = image.grid;
    let mut cuts: Vec<f64> = (0..params.sectors).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    cuts.sort_by(f64::total_cmp);
    let signs: Vec<f64> = (0..params.sectors).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
    let g = gradient(&gaussian_smooth(image, params.edge_sigma)?);
    let n = grid.len();
    let peak = (0..n)
        .map(|i| (g.values[i].powi(2) + g.values[n + i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    if peak == 0.0 || params.momentum_amplitude == 0.0 {
        return Ok(VectorField::zeros(grid));
    }
    let mut m = VectorField::zeros(grid);
    for i in 0..n {
        let p = unit_coords(&grid, i);
        let angle = (p[1] - center[1]).atan2(p[0] - center[0]).rem_euclid(std::f64::consts::TAU);
        // sector k spans [cuts[k], cuts[k+1]); the last one wraps around
        let k = cuts.partition_point(|&c| c <= angle);
        let sign = signs[(k + params.sectors - 1) % params.sectors];
        let s = sign * params.momentum_amplitude / peak;
        m.values[i] = s * g.values[i];
        m.values[n + i] = s * g.values[n + i];
    }
    gaussian_smooth_vector(&m, params.momentum_sigma)
}

fn deformation(
    image: &ScalarField,
    center: [f64; 2],
    weights: &LocalWeights,
    spec: &MultiGaussianSpec,
    params: &SynthParams,
    rng: &mut ChaCha8Rng,
) -> Result<VectorField> {
    let m = sector_momentum(image, center, params, rng)?;
    let v = localized_smooth(&m, weights, spec)?;
    advect_inverse_map(&v, params.rk4_steps)
}

fn attempt(grid: Grid, spec: &MultiGaussianSpec, params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<Option<SyntheticCase>> {
    let (r0, r1) = params.inner_radius;
    let (w0, w1) = params.ring_width;
    let j = params.center_jitter;
    let center = [0.5 + rng.gen_range(-j..=j), 0.5 + rng.gen_range(-j..=j)];
    let inner_radius = rng.gen_range(r0..=r1);
    let rings = Rings {
        center,
        inner_radius,
        outer_radius: inner_radius + rng.gen_range(w0..=w1),
    };
    let h = grid.spacing(0).max(grid.spacing(1));
    if rings.inner_radius < 3.0 * h || rings.outer_radius - rings.inner_radius < 3.0 * h {
        return Ok(None);
    }
    let n = grid.len();
    let labels: Vec<Region> = (0..n).map(|i| rings.label(&unit_coords(&grid, i))).collect();
    let idx = |r: Region| Region::ALL.iter().position(|&x| x == r).unwrap();
    let clean = ScalarField::new(grid, labels.iter().map(|&r| params.intensities[idx(r)]).collect())?;
    let pre: Vec<ScalarField> = (0..spec.n())
        .map(|c| ScalarField::new(grid, labels.iter().map(|&r| params.region_weights[idx(r)][c]).collect()))
        .collect::<Result<_>>()?;

    let phi1 = match deformation(&clean, center, &LocalWeights::from_preweights(&pre, spec)?, spec, params, rng) {
        Ok(p) => p,
        Err(Error::Divergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut noise = ScalarField::new(grid, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    noise = gaussian_smooth(&noise, params.noise_sigma)?;
    let peak = noise.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        noise.values.iter_mut().for_each(|v| *v *= params.noise_amplitude / peak);
    }
    let noisy = ScalarField::new(grid, clean.values.iter().zip(&noise.values).map(|(a, b)| a + b).collect())?;
    let source = warp(&noisy, &phi1)?;
    let source_clean = warp(&clean, &phi1)?;
    let pre_source: Vec<ScalarField> = pre.iter().map(|p| warp(p, &phi1)).collect::<Result<_>>()?;
    let gt_weights = LocalWeights::from_preweights(&renormalize(pre_source), spec)?;

    let phi2 = match deformation(&source_clean, center, &gt_weights, spec, params, rng) {
        Ok(p) => p,
        Err(Error::Divergence { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    for phi in [&phi1, &phi2] {
        if !(jacobian_determinant_stats(phi, None)?.min > 0.0) {
            return Ok(None);
        }
    }
    let target = warp(&source, &phi2)?;
    let src_labels: Vec<Region> = (0..n).map(|i| rings.label(&[phi1.values[i], phi1.values[n + i]])).collect();
    let both = compose(&phi1, &phi2)?;
    let tgt_labels: Vec<Region> = (0..n).map(|i| rings.label(&[both.values[i], both.values[n + i]])).collect();
    Ok(Some(SyntheticCase {
        seed: 0,
        attempts: 0,
        rings,
        source,
        target,
        source_clean,
        gt_map: phi2,
        gt_weights,
        masks: Masks::from_labels(grid, &src_labels),
        target_masks: Masks::from_labels(grid, &tgt_labels),
    }))
}

/// Interpolated simplex fields can drift from sum one by roundoff.
fn renormalize(mut fields: Vec<ScalarField>) -> Vec<ScalarField> {
    let n = fields[0].values.len();
    for i in 0..n {
        let s: f64 = fields.iter().map(|f| f.values[i]).sum();
        fields.iter_mut().for_each(|f| f.values[i] /= s);
    }
    fields
}

/// One synthetic pair. Draws rejected by the ring-thickness, divergence or
/// Jacobian guards are redrawn from the next sub-stream of `seed`.
pub fn generate_case(seed: u64, grid: Grid, spec: &MultiGaussianSpec, params: &SynthParams) -> Result<SyntheticCase> {
    spec.validate()?;
    params.validate(spec)?;
    if grid.ndim() != 2 || grid.dims()[0] != grid.dims()[1] || grid.dims()[0] < 64 {
        return Err(Error::param("synthetic cases need a square 2D grid of at least 64 nodes per side"));
    }
    for a in 0..params.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(a as u64);
        if let Some(mut case) = attempt(grid, spec, params, &mut rng)? {
            case.seed = seed;
            case.attempts = a + 1;
            return Ok(case);
        }
    }
    Err(Error::Divergence {
        step: params.max_attempts,
        what: format!("no valid synthetic case for seed {seed}"),
    })
}

/// Seed of case `index` derived from a root seed.
pub fn case_seed(root: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(1 << 40);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub cases: Vec<SyntheticCase>,
    pub manifest: String,
}

pub fn generate_corpus(
    n_cases: usize,
    root_seed: u64,
    grid: Grid,
    spec: &MultiGaussianSpec,
    params: &SynthParams,
    jobs: usize,
) -> Result<Corpus> {
    let run = |i: usize| generate_case(case_seed(root_seed, i), grid, spec, params);
    let cases: Vec<SyntheticCase> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::param(e.to_string()))?;
        pool.install(|| (0..n_cases).into_par_iter().map(run).collect::<Result<_>>())?
    } else {
        (0..n_cases).map(run).collect::<Result<_>>()?
    };
    let mut manifest = format!("root_seed {root_seed}\ncases {n_cases}\ngrid {}\n", grid.dims()[0]);
    manifest.push_str(&params.describe());
    for (i, c) in cases.iter().enumerate() {
        let _ = writeln!(manifest, "case {i} seed {} attempts {}", c.seed, c.attempts);
    }
    Ok(Corpus { cases, manifest })
}

/// Writes a case directory. Images are stored both as 16-bit PGM and as
/// raw float64 (`source.bin`, `target.bin`).
pub fn write_case(dir: &Path, case: &SyntheticCase, manifest: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_pgm(dir.join("source.pgm"), &case.source, true)?;
    write_pgm(dir.join("target.pgm"), &case.target, true)?;
    write_scalar_raw(dir.join("source.bin"), &case.source)?;
    write_scalar_raw(dir.join("target.bin"), &case.target)?;
    write_vector_raw(dir.join("gt_map.bin"), &case.gt_map)?;
    for (i, w) in case.gt_weights.weights.iter().enumerate() {
        write_scalar_raw(dir.join(format!("gt_weights_{i}.bin")), w)?;
    }
    write_raw(dir.join("masks.bin"), &case.masks.grid, 3, &case.masks.to_values())?;
    write_raw(dir.join("target_masks.bin"), &case.target_masks.grid, 3, &case.target_masks.to_values())?;
    fs::write(dir.join("manifest.txt"), format!("{manifest}seed {}\nattempts {}\n", case.seed, case.attempts))?;
    Ok(())
}

/// Files of a case directory needed for evaluation.
#[derive(Clone, Debug)]
pub struct StoredCase {
    pub source: ScalarField,
    pub target: ScalarField,
    pub gt_map: VectorField,
    pub gt_weights: Vec<ScalarField>,
    pub masks: Masks,
    pub target_masks: Masks,
}

pub fn read_case(dir: &Path) -> Result<StoredCase> {
    let masks = |name: &str| -> Result<Masks> {
        let (grid, _, values) = read_raw(dir.join(name))?;
        Masks::from_values(grid, &values)
    };
    let mut gt_weights = Vec::new();
    while dir.join(format!("gt_weights_{}.bin", gt_weights.len())).exists() {
        gt_weights.push(read_scalar_raw(dir.join(format!("gt_weights_{}.bin", gt_weights.len())))?);
    }
    Ok(StoredCase {
        source: read_scalar_raw(dir.join("source.bin"))?,
        target: read_scalar_raw(dir.join("target.bin"))?,
        gt_map: read_vector_raw(dir.join("gt_map.bin"))?,
        gt_weights,
        masks: masks("masks.bin")?,
        target_masks: masks("target_masks.bin")?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub count: usize,
}

impl ErrorStats {
    pub fn of(values: &[f64]) -> Option<ErrorStats> {
        if values.is_empty() {
            return None;
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(ErrorStats {
            median: percentile(&s, 50.0),
            q1: percentile(&s, 25.0),
            q3: percentile(&s, 75.0),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            count: s.len(),
        })
    }
}

/// Pointwise `|estimated - truth|` in pixels (node spacing of axis 0).
pub fn displacement_error_field(estimated: &VectorField, truth: &VectorField) -> Result<ScalarField> {
    estimated.grid.check_same(&truth.grid)?;
    let grid = truth.grid;
    let (n, d) = (grid.len(), grid.ndim());
    let h: Vec<f64> = (0..d).map(|a| grid.spacing(a)).collect();
    let values = (0..n)
        .map(|i| {
            (0..d)
                .map(|c| ((estimated.values[c * n + i] - truth.values[c * n + i]) / h[c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    ScalarField::new(grid, values)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplacementErrors {
    pub inner: Option<ErrorStats>,
    pub outer: Option<ErrorStats>,
}

/// Error statistics over the inner and outer masks.
pub fn displacement_error(estimated: &VectorField, truth: &VectorField, masks: &Masks) -> Result<DisplacementErrors> {
    truth.grid.check_same(&masks.grid)?;
    let e = displacement_error_field(estimated, truth)?;
    let pick = |m: &[bool]| -> Vec<f64> { e.values.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| *v).collect() };
    Ok(DisplacementErrors {
        inner: ErrorStats::of(&pick(&masks.inner)),
        outer: ErrorStats::of(&pick(&masks.outer)),
    })
}

/// `sqrt(sum_i w_i sigma_i^2)` per node.
pub fn stddev_map(lw: &LocalWeights, spec: &MultiGaussianSpec) -> Result<ScalarField> {
    stddev_of(&lw.weights, spec)
}

pub fn stddev_of(weights: &[ScalarField], spec: &MultiGaussianSpec) -> Result<ScalarField> {
    if weights.len() != spec.n() {
        return Err(Error::shape(format!("{} weight fields for {} Gaussians", weights.len(), spec.n())));
    }
    let grid = weights[0].grid;
    let values = (0..grid.len())
        .map(|i| {
            weights
                .iter()
                .zip(&spec.sigmas)
                .map(|(w, s)| w.values[i] * s * s)
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    ScalarField::new(grid, values)
}

/// Mean of `f` over a mask, `None` for an empty mask.
pub fn masked_mean(f: &ScalarField, mask: &[bool]) -> Option<f64> {
    let (s, c) = f
        .values
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    (c > 0).then(|| s / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::square(64).unwrap()
    }

    #[test]
    fn zero_amplitude_gives_identity_ground_truth() {
        let spec = MultiGaussianSpec::default();
        let params = SynthParams {
            momentum_amplitude: 0.0,
            ..SynthParams::default()
        };
        let c = generate_case(3, grid(), &spec, &params).unwrap();
        assert_eq!(c.gt_map, VectorField::identity(grid()));
        assert_eq!(c.source, c.target);
        let clean_gap = c.source.max_abs_diff(&c.source_clean);
        assert!(clean_gap > 0.0 && clean_gap <= params.noise_amplitude + 1e-12);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = MultiGaussianSpec::default();
        let params = SynthParams::default();
        let a = generate_case(11, grid(), &spec, &params).unwrap();
        let b = generate_case(11, grid(), &spec, &params).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.gt_map, b.gt_map);
        assert_eq!(a.masks, b.masks);
        let c = generate_case(12, grid(), &spec, &params).unwrap();
        assert_ne!(a.target, c.target);
    }

    #[test]
    fn ground_truth_maps_do_not_fold() {
        let spec = MultiGaussianSpec::default();
        let params = SynthParams::default();
        for seed in 0..20 {
            let c = generate_case(seed, grid(), &spec, &params).unwrap();
            assert!(jacobian_determinant_stats(&c.gt_map, None).unwrap().min > 0.0);
        }
    }

    #[test]
    fn noise_stays_on_the_source_lineage() {
        let spec = MultiGaussianSpec::default();
        let noisy = generate_case(5, grid(), &spec, &SynthParams::default()).unwrap();
        let quiet = generate_case(
            5,
            grid(),
            &spec,
            &SynthParams {
                noise_amplitude: 0.0,
                ..SynthParams::default()
            },
        )
        .unwrap();
        assert_eq!(noisy.gt_map, quiet.gt_map);
        assert_eq!(noisy.source_clean, quiet.source_clean);
        assert_ne!(noisy.source, quiet.source);
    }

    #[test]
    fn default_region_table() {
        let p = SynthParams::default();
        assert_eq!(p.region_weights[0], vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.region_weights[1], vec![0.05, 0.55, 0.3, 0.1]);
        assert_eq!(p.region_weights[2], vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn masks_exclude_label_boundaries() {
        let c = generate_case(2, grid(), &MultiGaussianSpec::default(), &SynthParams::default()).unwrap();
        let m = &c.masks;
        for i in 0..grid().len() {
            let k = [m.inner[i], m.outer[i], m.background[i]].iter().filter(|&&b| b).count();
            assert!(k <= 1);
        }
        assert!(m.inner.iter().any(|&b| b) && m.outer.iter().any(|&b| b));
        let band = (0..grid().len()).filter(|&i| !(m.inner[i] || m.outer[i] || m.background[i])).count();
        assert!(band > 0);
    }

    #[test]
    fn displacement_error_examples() {
        let g = grid();
        let truth = VectorField::from_fn(g, |x, out| {
            out[0] = x[0] + 0.02 * (6.0 * x[1]).sin();
            out[1] = x[1];
        });
        let masks = Masks {
            grid: g,
            inner: vec![true; g.len()],
            outer: vec![true; g.len()],
            background: vec![false; g.len()],
        };
        let same = displacement_error(&truth, &truth, &masks).unwrap();
        assert_eq!(same.inner.unwrap().median, 0.0);
        let mut shifted = truth.clone();
        let h = g.spacing(0);
        shifted.component_mut(0).iter_mut().for_each(|v| *v += h);
        let e = displacement_error_field(&shifted, &truth).unwrap();
        assert!(e.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let id = displacement_error_field(&VectorField::identity(g), &truth).unwrap();
        for i in 0..g.len() {
            let x1 = g.coord(1, g.unravel(i)[1]);
            let expected = (0.02 * (6.0 * x1).sin()).abs() / h;
            assert!((id.values[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn stddev_examples() {
        let spec = MultiGaussianSpec::default();
        let g = Grid::square(8).unwrap();
        let one = |w: &[f64]| {
            let f: Vec<ScalarField> = w.iter().map(|&x| ScalarField::constant(g, x)).collect();
            stddev_of(&f, &spec).unwrap().values[0]
        };
        assert!((one(&[0.0, 0.0, 0.0, 1.0]) - 0.2).abs() < 1e-15);
        let s2: Vec<f64> = spec.sigmas.iter().map(|s| s * s).collect();
        let tot: f64 = s2.iter().sum();
        let setpoint: Vec<f64> = s2.iter().map(|x| x / tot).collect();
        let expected = (s2.iter().map(|x| x * x).sum::<f64>() / tot).sqrt();
        assert!((one(&setpoint) - expected).abs() < 1e-15);
        let direct = (0.05 * 1e-4 + 0.55 * 25e-4 + 0.3 * 1e-2 + 0.1 * 4e-2f64).sqrt();
        assert!((one(&[0.05, 0.55, 0.3, 0.1]) - direct).abs() < 1e-15);
    }

    #[test]
    fn case_files_round_trip() {
        let spec = MultiGaussianSpec::default();
        let c = generate_case(4, grid(), &spec, &SynthParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_case(dir.path(), &c, "").unwrap();
        let back = read_case(dir.path()).unwrap();
        assert_eq!(back.source, c.source);
        assert_eq!(back.gt_map, c.gt_map);
        assert_eq!(back.masks, c.masks);
        assert_eq!(back.gt_weights.len(), 4);
    }
}
