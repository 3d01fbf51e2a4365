//! Central-difference gradient oracle. Every backward rule on the tape and
//! the full training objective are validated against f64 finite differences;
//! a weighted sum with fixed random weights turns tensor outputs into a
//! scalar so that permutation or sign mistakes in a backward rule cannot
//! cancel out. Run functions return the number of random seeds exercised.

use fdse_core::data::derive_rng;
use fdse_core::model::{DecomposedModel, DseBlockSpec, ForwardMode, ModelArch};
use fdse_core::regularizer::total_con_loss_on_tape;
use fdse_core::tape::{Tape, ValueId};
use fdse_core::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;
pub const TOL_F64: f64 = 1e-6;
pub const TOL_F32_VS_F64: f64 = 1e-3;

pub fn close(a: f64, n: f64, tol: f64) -> bool {
    (a - n).abs() <= tol * a.abs().max(n.abs()).max(1.0)
}

/// Reduce an arbitrary tensor value to a scalar with fixed random weights.
fn weighted_sum(tape: &mut Tape<f64>, y: ValueId, rng: &mut ChaCha8Rng) -> ValueId {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(y, w).unwrap();
    tape.sum(prod).unwrap()
}

pub struct Check {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Keep inputs away from relu/abs kinks.
    pub avoid_kinks: bool,
    pub build: Box<dyn Fn(&mut Tape<f64>, &[ValueId], &mut ChaCha8Rng) -> ValueId>,
}

fn sample_inputs(shapes: &[Vec<usize>], avoid_kinks: bool, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    if avoid_kinks {
                        v + if v >= 0.0 { 0.05 } else { -0.05 }
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(s.clone(), data).unwrap()
        })
        .collect()
}

fn eval_loss(c: &Check, inputs: &[Tensor<f64>], aux_seed: u64) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut aux = derive_rng(aux_seed, &[98]);
    let loss = (c.build)(&mut tape, &ids, &mut aux);
    assert_eq!(tape.shape(loss), &[1], "{}: loss must be scalar", c.name);
    tape.value(loss).item()
}

fn analytic_grads(c: &Check, inputs: &[Tensor<f64>], aux_seed: u64) -> Vec<Tensor<f64>> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let mut aux = derive_rng(aux_seed, &[98]);
    let loss = (c.build)(&mut tape, &ids, &mut aux);
    tape.backward(loss).unwrap();
    ids.iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad_tensor(id)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect()
}

pub fn run_check(c: &Check, seeds: u64) -> usize {
    for seed in 0..seeds {
        let mut rng = derive_rng(seed, &[97]);
        let inputs = sample_inputs(&c.shapes, c.avoid_kinks, &mut rng);
        let grads = analytic_grads(c, &inputs, seed);
        for (ti, t) in inputs.iter().enumerate() {
            for j in 0..t.numel() {
                let orig = t.data()[j];
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[j] = orig + H;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[j] = orig - H;
                let num = (eval_loss(c, &plus, seed) - eval_loss(c, &minus, seed)) / (2.0 * H);
                let ana = grads[ti].data()[j];
                assert!(
                    close(ana, num, TOL_F64),
                    "{} seed {} input {} elem {}: analytic {} vs numeric {}",
                    c.name,
                    seed,
                    ti,
                    j,
                    ana,
                    num
                );
            }
        }
    }
    seeds as usize
}

pub fn elementwise_checks() -> Vec<Check> {
    vec![
        Check {
            name: "add",
            shapes: vec![vec![3, 4], vec![3, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.add(ids[0], ids[1]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "sub",
            shapes: vec![vec![3, 4], vec![3, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.sub(ids[0], ids[1]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "mul",
            shapes: vec![vec![3, 4], vec![3, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.mul(ids[0], ids[1]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "scale_and_sum",
            shapes: vec![vec![2, 3, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, _| {
                let y = t.scale(ids[0], 1.7).unwrap();
                let s = t.sum(y).unwrap();
                t.scale(s, -0.3).unwrap()
            }),
        },
        Check {
            name: "abs",
            shapes: vec![vec![3, 4]],
            avoid_kinks: true,
            build: Box::new(|t, ids, rng| {
                let y = t.abs(ids[0]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "reshape",
            shapes: vec![vec![2, 6]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.reshape(ids[0], vec![3, 4]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "relu",
            shapes: vec![vec![3, 4]],
            avoid_kinks: true,
            build: Box::new(|t, ids, rng| {
                let y = t.relu(ids[0]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
    ]
}

pub fn matmul_checks() -> Vec<Check> {
    vec![
        Check {
            name: "matmul",
            shapes: vec![vec![3, 4], vec![4, 5]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.matmul(ids[0], ids[1]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "linear",
            shapes: vec![vec![4, 6], vec![3, 6], vec![3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.linear(ids[0], ids[1], ids[2]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
    ]
}

pub fn conv_checks() -> Vec<Check> {
    vec![
        Check {
            name: "conv2d_pad1",
            shapes: vec![vec![2, 3, 5, 5], vec![4, 3, 3, 3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.conv2d(ids[0], ids[1], None, 1, 1, 1).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "conv2d_stride2_bias",
            shapes: vec![vec![2, 3, 6, 6], vec![2, 3, 3, 3], vec![2]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 0, 1).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "conv2d_depthwise",
            shapes: vec![vec![2, 4, 5, 5], vec![4, 1, 3, 3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.conv2d(ids[0], ids[1], None, 1, 1, 4).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "conv2d_groups2",
            shapes: vec![vec![2, 4, 5, 5], vec![6, 2, 3, 3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.conv2d(ids[0], ids[1], None, 1, 1, 2).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
    ]
}

pub fn channel_pool_checks() -> Vec<Check> {
    vec![
        Check {
            name: "gather_channels_with_duplicates",
            shapes: vec![vec![2, 5, 4, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.gather_channels(ids[0], vec![0, 2, 2, 4]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "concat_channels",
            shapes: vec![vec![2, 3, 4, 4], vec![2, 2, 4, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.concat_channels(ids[0], ids[1]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "maxpool2d",
            shapes: vec![vec![2, 3, 6, 6]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.maxpool2d(ids[0], 2, 2).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "adaptive_avgpool_1x1",
            shapes: vec![vec![2, 3, 6, 6]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.adaptive_avgpool2d(ids[0], 1, 1).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "adaptive_avgpool_2x2",
            shapes: vec![vec![2, 3, 6, 6]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.adaptive_avgpool2d(ids[0], 2, 2).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
    ]
}

pub fn batchnorm_checks() -> Vec<Check> {
    vec![
        Check {
            name: "channel_mean",
            shapes: vec![vec![2, 3, 4, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.channel_mean(ids[0]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "channel_var",
            shapes: vec![vec![2, 3, 4, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let y = t.channel_var(ids[0]).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "batchnorm_train_mode",
            shapes: vec![vec![4, 3, 5, 5], vec![3], vec![3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let mean = t.channel_mean(ids[0]).unwrap();
                let var = t.channel_var(ids[0]).unwrap();
                let y = t.batchnorm_apply(ids[0], mean, var, ids[1], ids[2], 1e-5).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "batchnorm_frozen_stats",
            shapes: vec![vec![4, 3, 5, 5], vec![3], vec![3]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let mean = t.constant(Tensor::new(vec![3], vec![0.1, -0.2, 0.05]).unwrap());
                let var = t.constant(Tensor::new(vec![3], vec![0.9, 1.1, 0.4]).unwrap());
                let y = t.batchnorm_apply(ids[0], mean, var, ids[1], ids[2], 1e-5).unwrap();
                weighted_sum(t, y, rng)
            }),
        },
        Check {
            name: "softmax_cross_entropy",
            shapes: vec![vec![5, 4]],
            avoid_kinks: false,
            build: Box::new(|t, ids, rng| {
                let labels: Vec<u32> = (0..5).map(|_| rng.gen_range(0..4u32)).collect();
                t.softmax_cross_entropy(ids[0], &labels).unwrap()
            }),
        },
    ]
}

pub fn run_group(checks: &[Check], seeds: u64) -> usize {
    checks.iter().map(|c| run_check(c, seeds)).sum()
}

pub fn tiny_arch() -> ModelArch {
    ModelArch {
        input: (1, 6, 6),
        blocks: vec![
            DseBlockSpec {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
                expansion: 2,
                cheap_kernel: 3,
                maxpool: None,
            },
            DseBlockSpec {
                in_channels: 4,
                out_channels: 6,
                kernel: 3,
                stride: 1,
                padding: 1,
                expansion: 3,
                cheap_kernel: 3,
                maxpool: Some((2, 2)),
            },
        ],
        head_pool: (1, 1),
        num_classes: 3,
    }
}

/// Loss of the full training objective as a pure function of the parameters,
/// starting every evaluation from the same model state.
fn objective_loss(
    proto: &DecomposedModel<f64>,
    x: &Tensor<f64>,
    labels: &[u32],
    globals: &[(Vec<f64>, Vec<f64>)],
    lambda: f64,
    mode: ForwardMode,
) -> f64 {
    let mut model = proto.clone();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, x, mode).unwrap();
    let (con, _) = total_con_loss_on_tape(&mut tape, &fwd.dfe_stats, globals, 0.9, 0.001).unwrap();
    match mode {
        ForwardMode::AdaptDse => tape.value(con).item(),
        _ => {
            let task = tape.softmax_cross_entropy(fwd.logits, labels).unwrap();
            let weighted = tape.scale(con, lambda).unwrap();
            let loss = tape.add(task, weighted).unwrap();
            tape.value(loss).item()
        }
    }
}

fn objective_grads(
    proto: &DecomposedModel<f64>,
    x: &Tensor<f64>,
    labels: &[u32],
    globals: &[(Vec<f64>, Vec<f64>)],
    lambda: f64,
    mode: ForwardMode,
) -> Vec<(String, Tensor<f64>)> {
    let mut model = proto.clone();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, x, mode).unwrap();
    let (con, _) = total_con_loss_on_tape(&mut tape, &fwd.dfe_stats, globals, 0.9, 0.001).unwrap();
    let loss = match mode {
        ForwardMode::AdaptDse => con,
        _ => {
            let task = tape.softmax_cross_entropy(fwd.logits, labels).unwrap();
            let weighted = tape.scale(con, lambda).unwrap();
            tape.add(task, weighted).unwrap()
        }
    };
    tape.backward(loss).unwrap();
    fwd.leaves
        .iter()
        .filter_map(|(name, id)| tape.grad_tensor(*id).map(|g| (name.clone(), g)))
        .collect()
}

pub fn check_objective(mode: ForwardMode, seed: u64, lambda: f64) -> usize {
    let mut rng = derive_rng(seed, &[96]);
    let model = DecomposedModel::<f64>::build(tiny_arch(), 0.9, &mut rng).unwrap();
    let x = Tensor::from_fn(vec![4, 1, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<u32> = (0..4).map(|_| rng.gen_range(0..3u32)).collect();
    let globals: Vec<(Vec<f64>, Vec<f64>)> = [4usize, 6]
        .iter()
        .map(|&c| {
            let m = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let v = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
            (m, v)
        })
        .collect();

    let grads = objective_grads(&model, &x, &labels, &globals, lambda, mode);
    assert!(!grads.is_empty());
    if mode == ForwardMode::AdaptDse {
        for (name, _) in &grads {
            assert!(
                name.contains(".dse.") || name.contains(".bn_dse."),
                "AdaptDse must only train eraser parameters, saw {}",
                name
            );
        }
    }

    let mut checked = 0usize;
    for (name, g) in &grads {
        let base = model.get_tensor(name).unwrap().clone();
        for j in 0..base.numel() {
            let orig = base.data()[j];
            let mut m2 = model.clone();
            let mut t2 = base.clone();
            t2.data_mut()[j] = orig + H;
            m2.set_tensor(name, &t2).unwrap();
            let lp = objective_loss(&m2, &x, &labels, &globals, lambda, mode);
            let mut m2 = model.clone();
            let mut t2 = base.clone();
            t2.data_mut()[j] = orig - H;
            m2.set_tensor(name, &t2).unwrap();
            let lm = objective_loss(&m2, &x, &labels, &globals, lambda, mode);
            let num = (lp - lm) / (2.0 * H);
            let ana = g.data()[j];
            assert!(
                close(ana, num, 2e-5),
                "objective {:?} seed {} {}[{}]: analytic {} vs numeric {}",
                mode,
                seed,
                name,
                j,
                ana,
                num
            );
            checked += 1;
        }
    }
    let min = if mode == ForwardMode::AdaptDse { 30 } else { 100 };
    assert!(checked > min, "expected a real parameter count, checked {}", checked);
    1
}

/// The backward rules are shared generic code; validate the f32
/// instantiation against the f64 gradients on the full objective.
pub fn check_f32_tracks_f64(seed: u64) -> usize {
    let mut rng = derive_rng(seed, &[95]);
    let model64 = DecomposedModel::<f64>::build(tiny_arch(), 0.9, &mut rng).unwrap();
    let x64 = Tensor::from_fn(vec![4, 1, 6, 6], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<u32> = (0..4).map(|_| rng.gen_range(0..3u32)).collect();
    let globals64: Vec<(Vec<f64>, Vec<f64>)> = [4usize, 6]
        .iter()
        .map(|&c| {
            let m = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let v = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
            (m, v)
        })
        .collect();
    let g64 = objective_grads(&model64, &x64, &labels, &globals64, 0.3, ForwardMode::Train);

    let mut model32 = DecomposedModel::<f32>::build(tiny_arch(), 0.9, &mut derive_rng(0, &[1])).unwrap();
    for (name, t) in model64.export() {
        model32.set_tensor(&name, &t.to_f32()).unwrap();
    }
    let mut tape = Tape::<f32>::new();
    let fwd = model32.forward(&mut tape, &x64.to_f32(), ForwardMode::Train).unwrap();
    let globals32: Vec<(Vec<f32>, Vec<f32>)> = globals64
        .iter()
        .map(|(m, v)| {
            (m.iter().map(|&x| x as f32).collect(), v.iter().map(|&x| x as f32).collect())
        })
        .collect();
    let task = tape.softmax_cross_entropy(fwd.logits, &labels).unwrap();
    let (con, _) =
        total_con_loss_on_tape(&mut tape, &fwd.dfe_stats, &globals32, 0.9, 0.001).unwrap();
    let weighted = tape.scale(con, 0.3).unwrap();
    let loss = tape.add(task, weighted).unwrap();
    tape.backward(loss).unwrap();

    let g32: Vec<(String, Tensor<f32>)> = fwd
        .leaves
        .iter()
        .filter_map(|(name, id)| tape.grad_tensor(*id).map(|g| (name.clone(), g)))
        .collect();
    assert_eq!(g64.len(), g32.len());
    for ((n64, t64), (n32, t32)) in g64.iter().zip(&g32) {
        assert_eq!(n64, n32);
        for (a, b) in t64.data().iter().zip(t32.data()) {
            assert!(
                close(*a, *b as f64, TOL_F32_VS_F64),
                "{}: f64 {} vs f32 {}",
                n64,
                a,
                b
            );
        }
    }
    1
}
