//! Attention block: a spatial gate and a channel gate applied to the same
//! input in parallel, then an adaptive per-channel softmax selection that
//! concatenates the two calibrated maps.
//!
//! Shapes follow the channel-first convention; every function accepts
//! C×H×W or N×C×H×W inputs.

use crate::error::{Error, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{c, Elem, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hidden width of the selection bottleneck: max(⌊C/r⌋, 32).
pub fn squeezed_dim(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(32)
}

/// Hidden width of the channel-gate bottleneck: max(⌊C/r⌋, 1).
pub fn channel_hidden_dim(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

#[derive(Debug, Clone)]
pub struct SpatialAttentionParams<T> {
    /// 1×1 convolution collapsing C channels to a single map, [1×C×1×1].
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ChannelAttentionParams<T> {
    /// [hidden×C]
    pub wf1: Tensor<T>,
    /// [C×hidden]
    pub wf2: Tensor<T>,
    pub reduction: usize,
}

#[derive(Debug, Clone)]
pub struct AcmParams<T> {
    /// [d×C]
    pub wfc1: Tensor<T>,
    /// [2C×d]
    pub wfc2: Tensor<T>,
    pub reduction: usize,
    pub squeezed: usize,
}

/// Learnable state of one attention block.
#[derive(Debug, Clone)]
pub struct BaafBlockParams<T> {
    pub channels: usize,
    pub spatial: SpatialAttentionParams<T>,
    pub channel: ChannelAttentionParams<T>,
    pub acm: AcmParams<T>,
}

impl<T: Elem> BaafBlockParams<T> {
    /// All-zero weights; gates sit at their neutral 0.5 value.
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let hidden = channel_hidden_dim(channels, reduction);
        let d = squeezed_dim(channels, reduction);
        BaafBlockParams {
            channels,
            spatial: SpatialAttentionParams {
                weight: Tensor::zeros(&[1, channels, 1, 1]),
                bias: Tensor::zeros(&[1]),
            },
            channel: ChannelAttentionParams {
                wf1: Tensor::zeros(&[hidden, channels]),
                wf2: Tensor::zeros(&[channels, hidden]),
                reduction,
            },
            acm: AcmParams {
                wfc1: Tensor::zeros(&[d, channels]),
                wfc2: Tensor::zeros(&[2 * channels, d]),
                reduction,
                squeezed: d,
            },
        }
    }
}

/// Fan-in-scaled uniform draw, bound √(6/fan_in).
pub fn he_uniform<T: Elem>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, c(-bound), c(bound), rng)
}

/// Deterministic block initialization for a given (channels, reduction, seed).
pub fn init_baaf<T: Elem>(channels: usize, reduction: usize, seed: u64) -> Result<BaafBlockParams<T>> {
    if channels == 0 || reduction == 0 {
        return Err(Error::invalid("init_baaf needs channels ≥ 1 and reduction ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = channel_hidden_dim(channels, reduction);
    let d = squeezed_dim(channels, reduction);
    Ok(BaafBlockParams {
        channels,
        spatial: SpatialAttentionParams {
            weight: he_uniform(&[1, channels, 1, 1], channels, &mut rng),
            bias: Tensor::zeros(&[1]),
        },
        channel: ChannelAttentionParams {
            wf1: he_uniform(&[hidden, channels], channels, &mut rng),
            wf2: he_uniform(&[channels, hidden], hidden, &mut rng),
            reduction,
        },
        acm: AcmParams {
            wfc1: he_uniform(&[d, channels], channels, &mut rng),
            wfc2: he_uniform(&[2 * channels, d], d, &mut rng),
            reduction,
            squeezed: d,
        },
    })
}

/// Parameter leaves of one block registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BaafLeaves {
    pub spatial_w: ValueId,
    pub spatial_b: ValueId,
    pub wf1: ValueId,
    pub wf2: ValueId,
    pub wfc1: ValueId,
    pub wfc2: ValueId,
}

impl<T: Elem> BaafBlockParams<T> {
    pub fn leaves(&self, tape: &mut Tape<T>) -> BaafLeaves {
        BaafLeaves {
            spatial_w: tape.leaf(self.spatial.weight.clone()),
            spatial_b: tape.leaf(self.spatial.bias.clone()),
            wf1: tape.leaf(self.channel.wf1.clone()),
            wf2: tape.leaf(self.channel.wf2.clone()),
            wfc1: tape.leaf(self.acm.wfc1.clone()),
            wfc2: tape.leaf(self.acm.wfc2.clone()),
        }
    }
}

/// Node ids of the block output and its gates.
#[derive(Debug, Clone, Copy)]
pub struct BaafTrace {
    pub out: ValueId,
    pub alpha: ValueId,
    pub beta: ValueId,
    pub phi: ValueId,
    pub gamma: ValueId,
}

fn gate_to_channel_shape<T: Elem>(
    tape: &mut Tape<T>,
    gate: ValueId,
    f_rank: usize,
) -> Result<ValueId> {
    let gs = tape.value(gate).shape().to_vec();
    match (f_rank, gs.len()) {
        (3, 1) => tape.reshape(gate, &[gs[0], 1, 1]),
        (4, 2) => tape.reshape(gate, &[gs[0], gs[1], 1, 1]),
        _ => Err(Error::invalid(format!(
            "gate rank {} does not fit feature rank {}",
            gs.len(),
            f_rank
        ))),
    }
}

/// α = σ(relu(conv1×1(F))); F_S = α ⊗ F with the single map shared by
/// every channel. Returns (F_S, α).
pub fn spatial_attention_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    f: ValueId,
    weight: ValueId,
    bias: ValueId,
) -> Result<(ValueId, ValueId)> {
    let pre = tape.conv2d(f, weight, Some(bias), 1, crate::kernels::Padding::Same)?;
    let rectified = tape.relu(pre);
    let alpha = tape.sigmoid(rectified);
    let f_s = tape.mul(f, alpha)?;
    Ok((f_s, alpha))
}

/// β = σ(W_f2 · relu(W_f1 · GAP(F))); F_C = β ⊗ F. Returns (F_C, β).
pub fn channel_attention_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    f: ValueId,
    wf1: ValueId,
    wf2: ValueId,
) -> Result<(ValueId, ValueId)> {
    let squeezed = tape.global_avg_pool(f)?;
    let h = tape.dense(squeezed, wf1, None)?;
    let h = tape.relu(h);
    let pre = tape.dense(h, wf2, None)?;
    let beta = tape.sigmoid(pre);
    let f_rank = tape.value(f).shape().len();
    let beta_col = gate_to_channel_shape(tape, beta, f_rank)?;
    let f_c = tape.mul(f, beta_col)?;
    Ok((f_c, beta))
}

/// Adaptive selection: squeeze both branches, produce the paired gates
/// (φ, γ) with φ_i + γ_i = 1, and concatenate φ⊗F_C with γ⊗F_S.
/// Returns (F_A, φ, γ).
///
/// φ = e^K/(e^K+e^V) is evaluated as σ(K−V), which is the max-subtracted
/// form of the pairwise softmax.
pub fn acm_fuse_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    f_s: ValueId,
    f_c: ValueId,
    wfc1: ValueId,
    wfc2: ValueId,
) -> Result<(ValueId, ValueId, ValueId)> {
    if tape.value(f_s).shape() != tape.value(f_c).shape() {
        return Err(Error::shape_mismatch(
            "acm_fuse branches",
            tape.value(f_s).shape(),
            tape.value(f_c).shape(),
        ));
    }
    let rank = tape.value(f_s).shape().len();
    let channels = if rank == 3 {
        tape.value(f_s).shape()[0]
    } else {
        tape.value(f_s).shape()[1]
    };

    let g_s = tape.global_avg_pool(f_s)?;
    let g_c = tape.global_avg_pool(f_c)?;
    let s_c = tape.add(g_s, g_c)?;
    let h = tape.dense(s_c, wfc1, None)?;
    let h = tape.relu(h);
    let z = tape.dense(h, wfc2, None)?;

    let k = tape.narrow_channels(z, 0, channels)?;
    let v = tape.narrow_channels(z, channels, channels)?;
    let k_minus_v = tape.sub(k, v)?;
    let v_minus_k = tape.sub(v, k)?;
    let phi = tape.sigmoid(k_minus_v);
    let gamma = tape.sigmoid(v_minus_k);

    let phi_col = gate_to_channel_shape(tape, phi, rank)?;
    let gamma_col = gate_to_channel_shape(tape, gamma, rank)?;
    let c_gated = tape.mul(f_c, phi_col)?;
    let s_gated = tape.mul(f_s, gamma_col)?;
    let f_a = tape.concat_channels(c_gated, s_gated)?;
    Ok((f_a, phi, gamma))
}

/// Full block: both branches on the same input, then adaptive fusion.
/// Output has 2C channels.
pub fn baaf_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    f: ValueId,
    leaves: &BaafLeaves,
) -> Result<BaafTrace> {
    let (f_s, alpha) = spatial_attention_on_tape(tape, f, leaves.spatial_w, leaves.spatial_b)?;
    let (f_c, beta) = channel_attention_on_tape(tape, f, leaves.wf1, leaves.wf2)?;
    let (out, phi, gamma) = acm_fuse_on_tape(tape, f_s, f_c, leaves.wfc1, leaves.wfc2)?;
    Ok(BaafTrace {
        out,
        alpha,
        beta,
        phi,
        gamma,
    })
}

/// Ablation variant: both branches fused by plain addition, preserving C.
pub fn pham_add_on_tape<T: Elem>(
    tape: &mut Tape<T>,
    f: ValueId,
    leaves: &BaafLeaves,
) -> Result<ValueId> {
    let (f_s, _) = spatial_attention_on_tape(tape, f, leaves.spatial_w, leaves.spatial_b)?;
    let (f_c, _) = channel_attention_on_tape(tape, f, leaves.wf1, leaves.wf2)?;
    tape.add(f_s, f_c)
}

/// Eager wrapper around [`spatial_attention_on_tape`].
pub fn spatial_attention<T: Elem>(
    f: &Tensor<T>,
    p: &SpatialAttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let fid = tape.leaf(f.clone());
    let w = tape.leaf(p.weight.clone());
    let b = tape.leaf(p.bias.clone());
    let (f_s, alpha) = spatial_attention_on_tape(&mut tape, fid, w, b)?;
    Ok((tape.value(f_s).clone(), tape.value(alpha).clone()))
}

/// Eager wrapper around [`channel_attention_on_tape`].
pub fn channel_attention<T: Elem>(
    f: &Tensor<T>,
    p: &ChannelAttentionParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let fid = tape.leaf(f.clone());
    let wf1 = tape.leaf(p.wf1.clone());
    let wf2 = tape.leaf(p.wf2.clone());
    let (f_c, beta) = channel_attention_on_tape(&mut tape, fid, wf1, wf2)?;
    Ok((tape.value(f_c).clone(), tape.value(beta).clone()))
}

/// Eager wrapper around [`acm_fuse_on_tape`].
pub fn acm_fuse<T: Elem>(
    f_s: &Tensor<T>,
    f_c: &Tensor<T>,
    p: &AcmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let sid = tape.leaf(f_s.clone());
    let cid = tape.leaf(f_c.clone());
    let wfc1 = tape.leaf(p.wfc1.clone());
    let wfc2 = tape.leaf(p.wfc2.clone());
    let (f_a, phi, gamma) = acm_fuse_on_tape(&mut tape, sid, cid, wfc1, wfc2)?;
    Ok((
        tape.value(f_a).clone(),
        tape.value(phi).clone(),
        tape.value(gamma).clone(),
    ))
}

/// Gate values recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct BaafGates<T> {
    pub output: Tensor<T>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    pub phi: Tensor<T>,
    pub gamma: Tensor<T>,
}

/// Eager full block; output channel count is 2C.
pub fn baaf_forward<T: Elem>(f: &Tensor<T>, p: &BaafBlockParams<T>) -> Result<Tensor<T>> {
    Ok(baaf_forward_with_gates(f, p)?.output)
}

pub fn baaf_forward_with_gates<T: Elem>(
    f: &Tensor<T>,
    p: &BaafBlockParams<T>,
) -> Result<BaafGates<T>> {
    let mut tape = Tape::new();
    let fid = tape.leaf(f.clone());
    let leaves = p.leaves(&mut tape);
    let trace = baaf_on_tape(&mut tape, fid, &leaves)?;
    Ok(BaafGates {
        output: tape.value(trace.out).clone(),
        alpha: tape.value(trace.alpha).clone(),
        beta: tape.value(trace.beta).clone(),
        phi: tape.value(trace.phi).clone(),
        gamma: tape.value(trace.gamma).clone(),
    })
}

/// Eager ablation fusion; output keeps C channels.
pub fn pham_fuse_add<T: Elem>(f: &Tensor<T>, p: &BaafBlockParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let fid = tape.leaf(f.clone());
    let leaves = p.leaves(&mut tape);
    let out = pham_add_on_tape(&mut tape, fid, &leaves)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(c_: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(&[c_, h, w], -1.5, 1.5, &mut rng)
    }

    #[test]
    fn zero_weights_give_half_gates() {
        let p = BaafBlockParams::<f64>::zeros(4, 8);
        let f = random_input(4, 5, 5, 1);
        let (f_s, alpha) = spatial_attention(&f, &p.spatial).unwrap();
        assert!(alpha.data().iter().all(|&a| (a - 0.5).abs() < 1e-12));
        for (s, x) in f_s.data().iter().zip(f.data()) {
            assert!((s - 0.5 * x).abs() < 1e-12);
        }
        let (f_c, beta) = channel_attention(&f, &p.channel).unwrap();
        assert!(beta.data().iter().all(|&b| (b - 0.5).abs() < 1e-12));
        for (cv, x) in f_c.data().iter().zip(f.data()) {
            assert!((cv - 0.5 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_confined_to_upper_half() {
        // relu ≥ 0 entering the sigmoid pins α to [0.5, 1)
        let p = init_baaf::<f64>(6, 8, 42).unwrap();
        for seed in 0..5 {
            let f = random_input(6, 7, 7, seed);
            let (_, alpha) = spatial_attention(&f, &p.spatial).unwrap();
            assert!(alpha.data().iter().all(|&a| (0.5..1.0).contains(&a)));
        }
    }

    #[test]
    fn spatial_gate_is_channel_shared() {
        let p = init_baaf::<f64>(5, 8, 7).unwrap();
        let f = random_input(5, 4, 4, 3);
        let (f_s, _) = spatial_attention(&f, &p.spatial).unwrap();
        // ratio F_S/F at one pixel is identical across channels
        for pix in 0..16 {
            let r0 = f_s.data()[pix] / f.data()[pix];
            for ch in 1..5 {
                let idx = ch * 16 + pix;
                let r = f_s.data()[idx] / f.data()[idx];
                assert!((r - r0).abs() < 1e-10, "pixel {pix} channel {ch}");
            }
        }
    }

    #[test]
    fn beta_in_open_unit_interval() {
        let p = init_baaf::<f64>(8, 8, 11).unwrap();
        for seed in 0..5 {
            let f = random_input(8, 6, 6, 100 + seed);
            let (_, beta) = channel_attention(&f, &p.channel).unwrap();
            assert_eq!(beta.shape(), &[8]);
            assert!(beta.data().iter().all(|&b| 0.0 < b && b < 1.0));
        }
    }

    #[test]
    fn channel_permutation_equivariance() {
        let channels = 6;
        let p = init_baaf::<f64>(channels, 8, 5).unwrap();
        let f = random_input(channels, 4, 4, 9);
        let (_, beta) = channel_attention(&f, &p.channel).unwrap();

        // rotate channels by one and permute the weight matrices to match
        let perm: Vec<usize> = (0..channels).map(|i| (i + 1) % channels).collect();
        let mut f_p = Tensor::zeros(&[channels, 4, 4]);
        for (new_c, &old_c) in perm.iter().enumerate() {
            f_p.data_mut()[new_c * 16..(new_c + 1) * 16]
                .copy_from_slice(&f.data()[old_c * 16..(old_c + 1) * 16]);
        }
        let hidden = p.channel.wf1.shape()[0];
        let mut wf1_p = Tensor::zeros(&[hidden, channels]);
        for h in 0..hidden {
            for (new_c, &old_c) in perm.iter().enumerate() {
                wf1_p.data_mut()[h * channels + new_c] = p.channel.wf1.data()[h * channels + old_c];
            }
        }
        let mut wf2_p = Tensor::zeros(&[channels, hidden]);
        for (new_c, &old_c) in perm.iter().enumerate() {
            wf2_p.data_mut()[new_c * hidden..(new_c + 1) * hidden]
                .copy_from_slice(&p.channel.wf2.data()[old_c * hidden..(old_c + 1) * hidden]);
        }
        let p_perm = ChannelAttentionParams {
            wf1: wf1_p,
            wf2: wf2_p,
            reduction: 8,
        };
        let (_, beta_p) = channel_attention(&f_p, &p_perm).unwrap();
        for (new_c, &old_c) in perm.iter().enumerate() {
            assert!((beta_p.data()[new_c] - beta.data()[old_c]).abs() < 1e-12);
        }
    }

    #[test]
    fn acm_symmetric_when_k_equals_v() {
        // zero wfc2 forces K = V = 0
        let mut p = init_baaf::<f64>(4, 8, 13).unwrap();
        p.acm.wfc2 = Tensor::zeros(p.acm.wfc2.shape());
        let f_s = random_input(4, 3, 3, 21);
        let f_c = random_input(4, 3, 3, 22);
        let (f_a, phi, gamma) = acm_fuse(&f_s, &f_c, &p.acm).unwrap();
        assert!(phi.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(gamma.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let area = 9;
        for ch in 0..4 {
            for i in 0..area {
                let got_c = f_a.data()[ch * area + i];
                let got_s = f_a.data()[(4 + ch) * area + i];
                assert!((got_c - 0.5 * f_c.data()[ch * area + i]).abs() < 1e-12);
                assert!((got_s - 0.5 * f_s.data()[ch * area + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_softmax_closed_form() {
        // K = ln 3, V = 0 → φ = 0.75, γ = 0.25
        let mut tape = Tape::<f64>::new();
        let k = tape.leaf(Tensor::from_vec(vec![1], vec![3.0f64.ln()]).unwrap());
        let v = tape.leaf(Tensor::zeros(&[1]));
        let kv = tape.sub(k, v).unwrap();
        let vk = tape.sub(v, k).unwrap();
        let phi = tape.sigmoid(kv);
        let gamma = tape.sigmoid(vk);
        assert!((tape.value(phi).data()[0] - 0.75).abs() < 1e-12);
        assert!((tape.value(gamma).data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gates_partition_unity() {
        for seed in 0..20 {
            let p = init_baaf::<f64>(8, 8, 1000 + seed).unwrap();
            let f_s = random_input(8, 4, 4, 2000 + seed);
            let f_c = random_input(8, 4, 4, 3000 + seed);
            let (_, phi, gamma) = acm_fuse(&f_s, &f_c, &p.acm).unwrap();
            for (a, b) in phi.data().iter().zip(gamma.data()) {
                assert!((a + b - 1.0).abs() < 1e-6);
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
    }

    #[test]
    fn block_doubles_channels() {
        let p = init_baaf::<f64>(8, 8, 3).unwrap();
        let f = random_input(8, 16, 16, 4);
        let out = baaf_forward(&f, &p).unwrap();
        assert_eq!(out.shape(), &[16, 16, 16]);

        // batched input keeps the batch axis
        let fb = f.reshape(&[1, 8, 16, 16]).unwrap();
        let out_b = baaf_forward(&fb, &p).unwrap();
        assert_eq!(out_b.shape(), &[1, 16, 16, 16]);
        assert_eq!(out_b.data(), out.data());
    }

    #[test]
    fn zero_init_block_quarters_input() {
        // every gate sits at 0.5: each half is 0.5·(0.5·F) = 0.25·F
        let p = BaafBlockParams::<f64>::zeros(3, 8);
        let f = random_input(3, 4, 4, 8);
        let out = baaf_forward(&f, &p).unwrap();
        let area = 16;
        for ch in 0..3 {
            for i in 0..area {
                let x = f.data()[ch * area + i];
                assert!((out.data()[ch * area + i] - 0.25 * x).abs() < 1e-7);
                assert!((out.data()[(3 + ch) * area + i] - 0.25 * x).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn pham_add_preserves_shape_and_recomposes() {
        let p = init_baaf::<f64>(4, 8, 17).unwrap();
        let f = random_input(4, 5, 5, 18);
        let out = pham_fuse_add(&f, &p).unwrap();
        assert_eq!(out.shape(), f.shape());

        let (f_s, _) = spatial_attention(&f, &p.spatial).unwrap();
        let (f_c, _) = channel_attention(&f, &p.channel).unwrap();
        for i in 0..out.numel() {
            assert_eq!(out.data()[i], f_s.data()[i] + f_c.data()[i]);
        }

        // zero-init: 0.5·F + 0.5·F = F
        let pz = BaafBlockParams::<f64>::zeros(4, 8);
        let out_z = pham_fuse_add(&f, &pz).unwrap();
        for (o, x) in out_z.data().iter().zip(f.data()) {
            assert!((o - x).abs() < 1e-12);
        }
    }

    #[test]
    fn squeezed_dim_formula() {
        assert_eq!(squeezed_dim(256, 8), 32);
        assert_eq!(squeezed_dim(512, 8), 64);
        assert_eq!(squeezed_dim(8, 8), 32); // floor clamp, d may exceed C
        let p = init_baaf::<f64>(8, 8, 0).unwrap();
        assert_eq!(p.acm.squeezed, 32);
        assert_eq!(p.acm.wfc1.shape(), &[32, 8]);
        assert_eq!(p.acm.wfc2.shape(), &[16, 32]);
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_baaf::<f64>(16, 8, 99).unwrap();
        let b = init_baaf::<f64>(16, 8, 99).unwrap();
        assert_eq!(a.spatial.weight.data(), b.spatial.weight.data());
        assert_eq!(a.acm.wfc1.data(), b.acm.wfc1.data());
        let c_ = init_baaf::<f64>(16, 8, 100).unwrap();
        assert_ne!(a.spatial.weight.data(), c_.spatial.weight.data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let p = init_baaf::<f64>(3, 8, 31).unwrap();
        let f = random_input(3, 4, 4, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let probe: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe = Tensor::from_vec(vec![6, 4, 4], probe).unwrap();

        let inputs = vec![
            f,
            p.spatial.weight.clone(),
            p.channel.wf1.clone(),
            p.channel.wf2.clone(),
            p.acm.wfc1.clone(),
            p.acm.wfc2.clone(),
        ];
        let report = crate::gradcheck::grad_check(
            move |tape, ids| {
                let leaves = BaafLeaves {
                    spatial_w: ids[1],
                    spatial_b: tape.leaf(Tensor::zeros(&[1])),
                    wf1: ids[2],
                    wf2: ids[3],
                    wfc1: ids[4],
                    wfc2: ids[5],
                };
                let trace = baaf_on_tape(tape, ids[0], &leaves)?;
                let probe_id = tape.leaf(probe.clone());
                let weighted = tape.mul(trace.out, probe_id)?;
                Ok(tape.sum(weighted))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(
            report.passed(),
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
