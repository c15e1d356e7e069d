//! Finite-difference audit of every primitive's adjoint on 8x8 inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_check, sample_coordinates, Primitive, Shape, Tape, Var};
use crate::error::Result;
use crate::field::{Grid, ScalarField, VectorField};
use crate::kernels::{channel_normalize, omt_integral, tv_penalty_tape, MultiGaussianSpec};

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<(Vec<f64>, Shape)>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Scalar loss `<out, r>` for a fixed random `r` (or `out` itself when scalar).
fn loss(tape: &mut Tape, case: &Case, values: &[Vec<f64>], leaves: bool, weights: &[f64]) -> Result<(Var, Vec<Var>)> {
    let vars = case
        .inputs
        .iter()
        .zip(values)
        .map(|((_, shape), v)| {
            if leaves {
                tape.leaf(v.clone(), *shape)
            } else {
                tape.constant(v.clone(), *shape)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = (case.build)(tape, &vars)?;
    if tape.shape(out)?.len() == 1 {
        return Ok((out, vars));
    }
    let w = tape.constant(weights[..tape.shape(out)?.len()].to_vec(), tape.shape(out)?)?;
    Ok((tape.dot(out, w)?, vars))
}

fn max_error(case: Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = uniform(&mut rng, 4096, -1.0, 1.0);
    let point: Vec<Vec<f64>> = case.inputs.iter().map(|(v, _)| v.clone()).collect();
    let mut tape = Tape::new();
    let (l, vars) = loss(&mut tape, &case, &point, true, &weights).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (j, var) in vars.iter().enumerate() {
        let g = grads.get(*var, point[j].len()).unwrap();
        let coords = sample_coordinates(point[j].len(), 24, seed + j as u64);
        let report = finite_difference_check(
            |x| {
                let mut vals = point.clone();
                vals[j] = x.to_vec();
                let mut t = Tape::new();
                let (l, _) = loss(&mut t, &case, &vals, false, &weights)?;
                t.scalar(l)
            },
            &point[j],
            &g,
            1e-5,
            &coords,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

fn case_for(prim: Primitive, rng: &mut ChaCha8Rng) -> Case {
    let grid = Grid::square(8).unwrap();
    let n = grid.len();
    let f = |c| Shape::field(grid, c);
    let one = |b: fn(&mut Tape, Var) -> Result<Var>| -> Build { Box::new(move |t, v| b(t, v[0])) };
    let two = |b: fn(&mut Tape, Var, Var) -> Result<Var>| -> Build { Box::new(move |t, v| b(t, v[0], v[1])) };
    let r = |rng: &mut ChaCha8Rng, c: usize| uniform(rng, n * c, -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, c: usize| uniform(rng, n * c, 0.2, 1.0);
    match prim {
        Primitive::Leaf | Primitive::Constant => unreachable!("not an operation"),
        Primitive::Add => Case {
            inputs: vec![(r(rng, 2), f(2)), (r(rng, 2), f(2))],
            build: two(|t, a, b| t.add(a, b)),
        },
        Primitive::Sub => Case {
            inputs: vec![(r(rng, 2), f(2)), (r(rng, 2), f(2))],
            build: two(|t, a, b| t.sub(a, b)),
        },
        Primitive::Scale => Case {
            inputs: vec![(r(rng, 1), f(1))],
            build: one(|t, a| t.scale(a, -1.7)),
        },
        Primitive::Affine => Case {
            inputs: vec![(r(rng, 1), f(1))],
            build: one(|t, a| t.affine(a, 0.3, 2.0)),
        },
        Primitive::Mul => Case {
            inputs: vec![(r(rng, 2), f(2)), (r(rng, 2), f(2))],
            build: two(|t, a, b| t.mul(a, b)),
        },
        Primitive::MulBroadcast => Case {
            inputs: vec![(r(rng, 2), f(2)), (r(rng, 1), f(1))],
            build: two(|t, a, b| t.mul_broadcast(a, b)),
        },
        Primitive::Div => Case {
            inputs: vec![(r(rng, 1), f(1)), (pos(rng, 1), f(1))],
            build: two(|t, a, b| t.div(a, b)),
        },
        Primitive::Sqrt => Case {
            inputs: vec![(pos(rng, 1), f(1))],
            build: one(|t, a| t.sqrt(a)),
        },
        Primitive::LeakyRelu => Case {
            inputs: vec![(r(rng, 2), f(2))],
            build: one(|t, a| t.leaky_relu(a, 0.01)),
        },
        Primitive::SelectChannel => Case {
            inputs: vec![(r(rng, 3), f(3))],
            build: one(|t, a| t.select_channel(a, 1)),
        },
        Primitive::Concat => Case {
            inputs: vec![(r(rng, 1), f(1)), (r(rng, 2), f(2))],
            build: Box::new(|t, v| t.concat(&[v[0], v[1]])),
        },
        Primitive::Dot => Case {
            inputs: vec![(r(rng, 2), f(2)), (r(rng, 2), f(2))],
            build: two(|t, a, b| t.dot(a, b)),
        },
        Primitive::Sum => Case {
            inputs: vec![(r(rng, 2), f(2))],
            build: one(|t, a| {
                let s = t.sum(a)?;
                t.mul(s, s)
            }),
        },
        Primitive::Smooth => Case {
            inputs: vec![(r(rng, 2), f(2))],
            build: one(|t, a| t.smooth(a, 0.15)),
        },
        Primitive::Resample => Case {
            inputs: vec![(r(rng, 2), f(2))],
            build: one(|t, a| t.resample(a, Grid::square(11).unwrap())),
        },
        Primitive::ChannelNormalize => Case {
            inputs: vec![(pos(rng, 4), f(4))],
            build: one(channel_normalize),
        },
        Primitive::OmtIntegral => Case {
            inputs: vec![(pos(rng, 4), f(4))],
            build: one(|t, a| {
                let o = omt_integral(t, a, &MultiGaussianSpec::default())?;
                t.mul(o, o)
            }),
        },
        Primitive::TvPenalty => {
            let img = ScalarField::new(grid, uniform(rng, n, 0.0, 1.0)).unwrap();
            let gamma = crate::kernels::edge_indicator(&img, 10.0).unwrap();
            Case {
                inputs: vec![(pos(rng, 3), f(3))],
                build: Box::new(move |t, v| tv_penalty_tape(t, v[0], &gamma, 1e-6)),
            }
        }
        Primitive::Conv2d => Case {
            inputs: vec![
                (r(rng, 2), f(2)),
                (uniform(rng, 3 * 2 * 25, -1.0, 1.0), Shape::flat(150)),
                (uniform(rng, 3, -1.0, 1.0), Shape::flat(3)),
            ],
            build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 5)),
        },
        Primitive::BatchNorm => Case {
            inputs: vec![
                (r(rng, 3), f(3)),
                (uniform(rng, 3, 0.5, 1.5), Shape::flat(3)),
                (uniform(rng, 3, -1.0, 1.0), Shape::flat(3)),
            ],
            build: Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5)),
        },
        Primitive::WeightedLinearSoftmax => Case {
            inputs: vec![(uniform(rng, 4 * n, -0.3, 0.3), f(4))],
            build: one(|t, a| t.weighted_linear_softmax(a, &[0.1, 0.2, 0.3, 0.4])),
        },
        Primitive::InputRangePenalty => Case {
            inputs: vec![(uniform(rng, 4 * n, -2.0, 2.0), f(4))],
            build: one(|t, a| t.input_range_penalty(a, &[0.1, 0.2, 0.3, 0.4], 1e-3)),
        },
        Primitive::Rk4Step => {
            let id = VectorField::identity(grid).values;
            let phi: Vec<f64> = id.iter().map(|x| x + rng.gen_range(-0.05..0.05)).collect();
            Case {
                inputs: vec![(phi, f(2)), (uniform(rng, 2 * n, -0.5, 0.5), f(2))],
                build: two(|t, p, v| t.rk4_step(p, v, 0.05, 0)),
            }
        }
        Primitive::Warp => {
            let fine = Grid::square(12).unwrap();
            Case {
                inputs: vec![
                    (uniform(rng, fine.len(), 0.0, 1.0), Shape::field(fine, 1)),
                    (uniform(rng, 2 * n, 0.02, 0.98), f(2)),
                ],
                build: two(|t, i, p| t.warp(i, p)),
            }
        }
        Primitive::Ncc => Case {
            inputs: vec![(r(rng, 1), f(1)), (r(rng, 1), f(1))],
            build: two(|t, a, b| t.ncc(a, b)),
        },
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for (i, prim) in Primitive::OPERATIONS.iter().enumerate() {
        let err = max_error(case_for(*prim, &mut rng), i as u64);
        if !(err < 1e-4) {
            failures.push(format!("{prim:?}: {err:.3e}"));
        }
    }
    assert!(failures.is_empty(), "adjoint mismatches: {failures:?}");
}

#[test]
fn audit_covers_every_recorded_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for prim in Primitive::OPERATIONS {
        let case = case_for(prim, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<Var> = case
            .inputs
            .iter()
            .map(|(v, s)| tape.leaf(v.clone(), *s).unwrap())
            .collect();
        let out = (case.build)(&mut tape, &vars).unwrap();
        // the output node, or the node feeding the final product/square
        let p = tape.primitive(out).unwrap();
        assert!(p == prim || p == Primitive::Mul, "{prim:?} recorded as {p:?}");
    }
}
