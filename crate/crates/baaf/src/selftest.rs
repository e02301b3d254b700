//! Registry of gradient checks and attention invariants behind the
//! `selftest` subcommand and the acceptance suite.
//!
//! Every registered tape operation gets a seeded finite-difference check
//! in f64 at tolerance 1e-4; the attention block is checked end to end;
//! the toy network is checked in f32 at 1e-3. A corruption tag can be
//! injected to prove the checker catches broken backward rules.

use crate::attention::{self, BaafLeaves};
use crate::error::Result;
use crate::gradcheck::{grad_check_filtered, GradCheckReport};
use crate::kernels::Padding;
use crate::network::{build, Mode, NetworkSpec, Variant};
use crate::tape::{BinaryKind, BnStats, Tape, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn from_report(name: &str, report: GradCheckReport) -> Self {
        CheckResult {
            name: name.to_string(),
            max_rel_err: report.max_rel_err,
            tolerance: report.tolerance,
            passed: report.passed(),
        }
    }
}

fn rng_for(name: &str) -> ChaCha8Rng {
    let tag = name
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    ChaCha8Rng::seed_from_u64(crate::seeds::derive_seed(0x5E1F, tag))
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.2, 1.2, rng)
}

/// Random values bounded away from zero so relu/leaky kinks stay clear
/// of the finite-difference window.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.2);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Distinct well-separated values so pooling windows never tie.
fn rand_no_ties(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut levels: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    levels.shuffle(rng);
    let data = levels
        .into_iter()
        .map(|l| l as f64 * 0.05 + rng.gen_range(-0.01..0.01))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Weighted sum against a fixed random probe turns any output into a
/// scalar that exercises every coordinate.
fn probe_sum(
    tape: &mut Tape<f64>,
    out: ValueId,
    probe: &Tensor<f64>,
) -> Result<ValueId> {
    let p = tape.leaf(probe.clone());
    let weighted = tape.mul(out, p)?;
    Ok(tape.sum(weighted))
}

type Runner = Box<dyn Fn(Option<&str>) -> Result<CheckResult> + Send + Sync>;

fn op_runners() -> Vec<(&'static str, Runner)> {
    let mut checks: Vec<(&'static str, Runner)> = Vec::new();

    macro_rules! check {
        ($name:expr, $builder:expr) => {
            checks.push(($name, Box::new($builder)));
        };
    }

    check!("add", |corrupt| {
        let mut rng = rng_for("add");
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[3, 4], &mut rng);
        let probe = rand_t(&[3, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let s = tape.binary(BinaryKind::Add, ids[0], ids[1])?;
                probe_sum(tape, s, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("add", r))
    });

    check!("sub", |corrupt| {
        let mut rng = rng_for("sub");
        let a = rand_t(&[2, 5], &mut rng);
        let b = rand_t(&[2, 5], &mut rng);
        let probe = rand_t(&[2, 5], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let s = tape.binary(BinaryKind::Sub, ids[0], ids[1])?;
                probe_sum(tape, s, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("sub", r))
    });

    check!("mul", |corrupt| {
        let mut rng = rng_for("mul");
        let a = rand_t(&[4, 3], &mut rng);
        let b = rand_t(&[4, 3], &mut rng);
        let probe = rand_t(&[4, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let s = tape.mul(ids[0], ids[1])?;
                probe_sum(tape, s, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("mul", r))
    });

    check!("mul_broadcast_channel", |corrupt| {
        let mut rng = rng_for("mul_broadcast_channel");
        let a = rand_t(&[3, 4, 4], &mut rng);
        let b = rand_t(&[3, 1, 1], &mut rng);
        let probe = rand_t(&[3, 4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let s = tape.mul(ids[0], ids[1])?;
                probe_sum(tape, s, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("mul_broadcast_channel", r))
    });

    check!("mul_broadcast_spatial", |corrupt| {
        let mut rng = rng_for("mul_broadcast_spatial");
        let a = rand_t(&[3, 4, 4], &mut rng);
        let b = rand_t(&[1, 4, 4], &mut rng);
        let probe = rand_t(&[3, 4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let s = tape.mul(ids[0], ids[1])?;
                probe_sum(tape, s, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("mul_broadcast_spatial", r))
    });

    check!("relu", |corrupt| {
        let mut rng = rng_for("relu");
        let x = rand_away_from_zero(&[4, 4], &mut rng);
        let probe = rand_t(&[4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.relu(ids[0]);
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("relu", r))
    });

    check!("leaky_relu", |corrupt| {
        let mut rng = rng_for("leaky_relu");
        let x = rand_away_from_zero(&[4, 4], &mut rng);
        let probe = rand_t(&[4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.leaky_relu(ids[0], 0.01);
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("leaky_relu", r))
    });

    check!("sigmoid", |corrupt| {
        let mut rng = rng_for("sigmoid");
        let x = rand_t(&[5, 3], &mut rng);
        let probe = rand_t(&[5, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.sigmoid(ids[0]);
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("sigmoid", r))
    });

    check!("dense", |corrupt| {
        let mut rng = rng_for("dense");
        let x = rand_t(&[2, 5], &mut rng);
        let w = rand_t(&[3, 5], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let probe = rand_t(&[2, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.dense(ids[0], ids[1], Some(ids[2]))?;
                probe_sum(tape, y, &probe)
            },
            &[x, w, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("dense", r))
    });

    check!("conv2d_k3_s1_same", |corrupt| {
        let mut rng = rng_for("conv2d_k3_s1_same");
        let x = rand_t(&[2, 4, 4], &mut rng);
        let k = rand_t(&[3, 2, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let probe = rand_t(&[3, 4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 1, Padding::Same)?;
                probe_sum(tape, y, &probe)
            },
            &[x, k, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("conv2d_k3_s1_same", r))
    });

    check!("conv2d_k3_s2_same", |corrupt| {
        let mut rng = rng_for("conv2d_k3_s2_same");
        let x = rand_t(&[2, 5, 5], &mut rng);
        let k = rand_t(&[2, 2, 3, 3], &mut rng);
        let b = rand_t(&[2], &mut rng);
        let probe = rand_t(&[2, 3, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], Some(ids[2]), 2, Padding::Same)?;
                probe_sum(tape, y, &probe)
            },
            &[x, k, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("conv2d_k3_s2_same", r))
    });

    check!("conv2d_k1_valid", |corrupt| {
        let mut rng = rng_for("conv2d_k1_valid");
        let x = rand_t(&[3, 4, 4], &mut rng);
        let k = rand_t(&[2, 3, 1, 1], &mut rng);
        let probe = rand_t(&[2, 4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.conv2d(ids[0], ids[1], None, 1, Padding::Valid)?;
                probe_sum(tape, y, &probe)
            },
            &[x, k],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("conv2d_k1_valid", r))
    });

    check!("maxpool2", |corrupt| {
        let mut rng = rng_for("maxpool2");
        let x = rand_no_ties(&[2, 8, 8], &mut rng);
        let probe = rand_t(&[2, 4, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.maxpool2(ids[0])?;
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-6,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("maxpool2", r))
    });

    check!("upsample_nearest2", |corrupt| {
        let mut rng = rng_for("upsample_nearest2");
        let x = rand_t(&[2, 3, 3], &mut rng);
        let probe = rand_t(&[2, 6, 6], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.upsample_nearest2(ids[0])?;
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("upsample_nearest2", r))
    });

    check!("concat_channels", |corrupt| {
        let mut rng = rng_for("concat_channels");
        let a = rand_t(&[2, 3, 3], &mut rng);
        let b = rand_t(&[3, 3, 3], &mut rng);
        let probe = rand_t(&[5, 3, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.concat_channels(ids[0], ids[1])?;
                probe_sum(tape, y, &probe)
            },
            &[a, b],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("concat_channels", r))
    });

    check!("narrow_channels", |corrupt| {
        let mut rng = rng_for("narrow_channels");
        let x = rand_t(&[2, 6], &mut rng);
        let probe = rand_t(&[2, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.narrow_channels(ids[0], 2, 3)?;
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("narrow_channels", r))
    });

    check!("global_avg_pool", |corrupt| {
        let mut rng = rng_for("global_avg_pool");
        let x = rand_t(&[2, 3, 4, 4], &mut rng);
        let probe = rand_t(&[2, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.global_avg_pool(ids[0])?;
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("global_avg_pool", r))
    });

    check!("batchnorm_train", |corrupt| {
        let mut rng = rng_for("batchnorm_train");
        let x = rand_t(&[2, 3, 2, 2], &mut rng);
        let gamma = rand_away_from_zero(&[3], &mut rng);
        let beta = rand_t(&[3], &mut rng);
        let probe = rand_t(&[2, 3, 2, 2], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let mut stats = BnStats::identity(3);
                let y = tape.batchnorm(ids[0], ids[1], ids[2], true, 1e-5, 0.9, &mut stats)?;
                probe_sum(tape, y, &probe)
            },
            &[x, gamma, beta],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("batchnorm_train", r))
    });

    check!("batchnorm_eval", |corrupt| {
        let mut rng = rng_for("batchnorm_eval");
        let x = rand_t(&[2, 3, 2, 2], &mut rng);
        let gamma = rand_away_from_zero(&[3], &mut rng);
        let beta = rand_t(&[3], &mut rng);
        let mean = rand_t(&[3], &mut rng);
        let var = Tensor::from_vec(
            vec![3],
            (0..3).map(|_| rng.gen_range(0.5..1.5)).collect(),
        )
        .unwrap();
        let probe = rand_t(&[2, 3, 2, 2], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let mut stats = BnStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                let y = tape.batchnorm(ids[0], ids[1], ids[2], false, 1e-5, 0.9, &mut stats)?;
                probe_sum(tape, y, &probe)
            },
            &[x, gamma, beta],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("batchnorm_eval", r))
    });

    check!("reshape", |corrupt| {
        let mut rng = rng_for("reshape");
        let x = rand_t(&[2, 6], &mut rng);
        let probe = rand_t(&[3, 4], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| {
                let y = tape.reshape(ids[0], &[3, 4])?;
                probe_sum(tape, y, &probe)
            },
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("reshape", r))
    });

    check!("sum", |corrupt| {
        let mut rng = rng_for("sum");
        let x = rand_t(&[3, 3], &mut rng);
        let r = grad_check_filtered(
            move |tape, ids| Ok(tape.sum(ids[0])),
            &[x],
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("sum", r))
    });

    check!("bce", |corrupt| {
        let mut rng = rng_for("bce");
        let n = 12;
        let pred = Tensor::from_vec(
            vec![n],
            (0..n).map(|_| rng.gen_range(0.08..0.92)).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(
            vec![n],
            (0..n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let r = grad_check_filtered(
            move |tape, ids| tape.bce_loss(ids[0], &target),
            &[pred],
            1e-6,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("bce", r))
    });

    check!("baaf_block", |corrupt| {
        let mut rng = rng_for("baaf_block");
        let p = attention::init_baaf::<f64>(3, 8, 404)?;
        let f = rand_t(&[3, 4, 4], &mut rng);
        let probe = rand_t(&[6, 4, 4], &mut rng);
        let inputs = vec![
            f,
            p.spatial.weight.clone(),
            p.spatial.bias.clone(),
            p.channel.wf1.clone(),
            p.channel.wf2.clone(),
            p.acm.wfc1.clone(),
            p.acm.wfc2.clone(),
        ];
        let r = grad_check_filtered(
            move |tape, ids| {
                let leaves = BaafLeaves {
                    spatial_w: ids[1],
                    spatial_b: ids[2],
                    wf1: ids[3],
                    wf2: ids[4],
                    wfc1: ids[5],
                    wfc2: ids[6],
                };
                let trace = attention::baaf_on_tape(tape, ids[0], &leaves)?;
                probe_sum(tape, trace.out, &probe)
            },
            &inputs,
            1e-5,
            1e-4,
            corrupt,
            |_, _| false,
        )?;
        Ok(CheckResult::from_report("baaf_block", r))
    });

    checks
}

/// Finite-difference check of the full f32 network: train-mode BCE loss
/// against central differences on a sample of parameter coordinates.
pub fn toy_network_check() -> Result<CheckResult> {
    const TOL: f64 = 1e-3;
    // fixed steps straddle pooling/activation kinks in f32; per
    // coordinate the smallest step whose quotient agrees wins
    const EPS_LADDER: [f32; 3] = [1e-3, 5e-4, 2.5e-4];
    let spec = NetworkSpec::new(Variant::Unet9, 16, (16, 16));
    let model = build::<f32>(&spec, 77)?;
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let x = Tensor::<f32>::rand_uniform(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
    let y = Tensor::<f32>::from_vec(
        vec![2, 1, 16, 16],
        (0..512)
            .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
            .collect(),
    )?;

    // the network runs in f32; the scalar loss is re-accumulated in f64
    // from the f32 probability map so the finite difference is not
    // limited by rounding of the final sum
    let loss_of = |m: &Model32| -> Result<f64> {
        let mut m = m.clone();
        let probs = m.forward(&x, Mode::Train)?;
        let mut acc = 0.0f64;
        for (&p, &t) in probs.data().iter().zip(y.data()) {
            let p = (p as f64).clamp(1e-7, 1.0 - 1e-7);
            acc -= t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln();
        }
        Ok(acc / probs.numel() as f64)
    };
    type Model32 = crate::network::Model<f32>;

    // analytic gradients
    let mut work = model.clone();
    let mut tape = Tape::new();
    let trace = work.forward_on_tape(&mut tape, &x, Mode::Train)?;
    let loss = tape.bce_loss(trace.output, &y)?;
    let grads = tape.backward(loss)?;

    // sample a few coordinates across distinct parameters
    let paths = model.store.trainable_paths();
    let mut max_rel: f64 = 0.0;
    let mut failing = 0usize;
    for pi in (0..paths.len()).step_by(paths.len().div_ceil(10).max(1)) {
        let path = &paths[pi];
        let id = trace.param_ids[path];
        let analytic_tensor = grads.get(id, tape.value(id).shape());
        let numel = analytic_tensor.numel();
        let coord = (pi * 7919) % numel;
        let analytic = analytic_tensor.data()[coord] as f64;

        let mut best_rel = f64::INFINITY;
        for eps in EPS_LADDER {
            let mut up = model.clone();
            up.store.get_mut(path)?.data_mut()[coord] += eps;
            let lu = loss_of(&up)?;
            let mut down = model.clone();
            down.store.get_mut(path)?.data_mut()[coord] -= eps;
            let ld = loss_of(&down)?;
            let numeric = (lu - ld) / (2.0 * eps as f64);
            let rel = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
            best_rel = best_rel.min(rel);
            if best_rel <= TOL / 4.0 {
                break;
            }
        }
        if best_rel > max_rel {
            max_rel = best_rel;
        }
        if best_rel > TOL {
            failing += 1;
        }
    }
    Ok(CheckResult {
        name: "toy_network_f32".to_string(),
        max_rel_err: max_rel,
        tolerance: TOL,
        passed: failing == 0,
    })
}

/// Gate identities over random draws: φ+γ = 1 within 1e-6,
/// α ∈ [0.5, 1), β ∈ (0, 1).
pub fn gate_identity_check(draws_per_width: usize) -> Result<CheckResult> {
    let mut max_dev: f64 = 0.0;
    let mut passed = true;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A7E);
    for &channels in &[4usize, 8, 32] {
        for _ in 0..draws_per_width {
            let p = attention::init_baaf::<f64>(channels, 8, rng.gen())?;
            let f = Tensor::rand_uniform(&[channels, 6, 6], -2.0, 2.0, &mut rng);
            let gates = attention::baaf_forward_with_gates(&f, &p)?;
            for (a, b) in gates.phi.data().iter().zip(gates.gamma.data()) {
                let dev = (a + b - 1.0).abs();
                max_dev = max_dev.max(dev);
                if dev > 1e-6 || *a <= 0.0 || *a >= 1.0 {
                    passed = false;
                }
            }
            if !gates.alpha.data().iter().all(|&a| (0.5..1.0).contains(&a)) {
                passed = false;
            }
            if !gates.beta.data().iter().all(|&b| 0.0 < b && b < 1.0) {
                passed = false;
            }
        }
    }
    Ok(CheckResult {
        name: "gate_identities".to_string(),
        max_rel_err: max_dev,
        tolerance: 1e-6,
        passed,
    })
}

/// Shape contract: output channels are exactly doubled.
pub fn shape_contract_check() -> Result<CheckResult> {
    let mut passed = true;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5C);
    for &(c_, h, w) in &[(1usize, 1usize, 1usize), (3, 5, 7), (8, 16, 16), (5, 2, 9)] {
        let p = attention::init_baaf::<f64>(c_, 8, rng.gen())?;
        let f = Tensor::rand_uniform(&[c_, h, w], -1.0, 1.0, &mut rng);
        let out = attention::baaf_forward(&f, &p)?;
        if out.shape() != [2 * c_, h, w] {
            passed = false;
        }
    }
    Ok(CheckResult {
        name: "baaf_shape_contract".to_string(),
        max_rel_err: if passed { 0.0 } else { 1.0 },
        tolerance: 0.5,
        passed,
    })
}

/// Zero-init neutrality: every gate is 0.5, so each output half equals
/// 0.25 · F.
pub fn zero_init_check() -> Result<CheckResult> {
    let p = attention::BaafBlockParams::<f64>::zeros(4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(0x2E80);
    let f = Tensor::rand_uniform(&[4, 5, 5], -1.0, 1.0, &mut rng);
    let out = attention::baaf_forward(&f, &p)?;
    let area = 25;
    let mut max_dev: f64 = 0.0;
    for ch in 0..4 {
        for i in 0..area {
            let x = f.data()[ch * area + i];
            max_dev = max_dev.max((out.data()[ch * area + i] - 0.25 * x).abs());
            max_dev = max_dev.max((out.data()[(4 + ch) * area + i] - 0.25 * x).abs());
        }
    }
    Ok(CheckResult {
        name: "baaf_zero_init".to_string(),
        max_rel_err: max_dev,
        tolerance: 1e-7,
        passed: max_dev <= 1e-7,
    })
}

/// Run every registered check; `corrupt_op` injects a broken backward
/// rule into the named tape op so failures are observable.
pub fn run_all(corrupt_op: Option<&str>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (name, runner) in op_runners() {
        let _ = name;
        results.push(runner(corrupt_op)?);
    }
    results.push(toy_network_check()?);
    results.push(gate_identity_check(10)?);
    results.push(shape_contract_check()?);
    results.push(zero_init_check()?);
    Ok(results)
}

pub fn format_results(results: &[CheckResult]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>14} {:>10} {:>8}\n",
        "check", "max rel err", "tolerance", "status"
    ));
    for r in results {
        out.push_str(&format!(
            "{:<24} {:>14.3e} {:>10.1e} {:>8}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_clean() {
        let results = run_all(None).unwrap();
        for r in &results {
            assert!(r.passed, "{} failed: {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn check_names_are_unique() {
        let results = run_all(None).unwrap();
        let mut names: Vec<&String> = results.iter().map(|r| &r.name).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn corruption_is_reported() {
        let results = run_all(Some("conv2d")).unwrap();
        let conv_fail = results
            .iter()
            .filter(|r| r.name.starts_with("conv2d"))
            .any(|r| !r.passed);
        assert!(conv_fail, "corrupted conv2d backward must be caught");
    }
}
