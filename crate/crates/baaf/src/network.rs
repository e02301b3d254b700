//! Declarative U-shaped encoder–decoder construction.
//!
//! A [`NetworkSpec`] names the variant, the per-stage filter schedule and a
//! scale divisor; [`build`] turns it into a [`Model`] holding a parameter
//! store plus an explicit layer wiring that the forward pass interprets.
//!
//! Encoder stages are double 3×3 conv + batch-norm + LeakyReLU; the deep
//! variants pool seven times down to the bottleneck and mirror back up with
//! nearest-neighbor upsampling, skip concatenation and the same double-conv
//! blocks. Attention variants insert their block after each decoder stage's
//! convolutions; the channel-doubling variant restores the stage width with
//! a 1×1 projection so the printed filter schedule stays meaningful.

use crate::attention::{self, BaafLeaves};
use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::params::ParameterStore;
use crate::tape::{BnStats, Tape, ValueId};
use crate::tensor::{c, Elem, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::str::FromStr;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Full-scale stage widths of the depth-15 network.
pub const DEEP15_FILTERS: [usize; 15] = [
    64, 128, 128, 256, 256, 512, 512, 1024, 512, 512, 256, 256, 128, 128, 64,
];
/// Full-scale stage widths of the classic depth-9 baseline.
pub const UNET9_FILTERS: [usize; 9] = [64, 128, 256, 512, 1024, 512, 256, 128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Unet9,
    Deep15,
    Deep15Pham,
    Deep15Baaf,
}

impl Variant {
    pub fn depth(self) -> usize {
        match self {
            Variant::Unet9 => 9,
            _ => 15,
        }
    }

    pub fn pools(self) -> usize {
        match self {
            Variant::Unet9 => 4,
            _ => 7,
        }
    }

    pub fn attention(self) -> Option<AttentionKind> {
        match self {
            Variant::Deep15Pham => Some(AttentionKind::PhamAdd),
            Variant::Deep15Baaf => Some(AttentionKind::Baaf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet9 => "unet9",
            Variant::Deep15 => "deep15",
            Variant::Deep15Pham => "deep15_pham",
            Variant::Deep15Baaf => "deep15_baaf",
        }
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::Unet9,
            Variant::Deep15,
            Variant::Deep15Pham,
            Variant::Deep15Baaf,
        ]
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet9" => Ok(Variant::Unet9),
            "deep15" => Ok(Variant::Deep15),
            "deep15_pham" => Ok(Variant::Deep15Pham),
            "deep15_baaf" => Ok(Variant::Deep15Baaf),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected unet9|deep15|deep15_pham|deep15_baaf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// Additive fusion of the two calibrated maps, C → C.
    PhamAdd,
    /// Adaptive selection with concatenation, C → 2C, followed by a 1×1
    /// projection back to C.
    Baaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn default_attention_reduction() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Full-scale stage widths; scaled down by `divisor`.
    pub filters: Vec<usize>,
    pub divisor: usize,
    /// (height, width)
    pub input_size: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub input_channels: usize,
    #[serde(default = "default_in_channels")]
    pub output_channels: usize,
    #[serde(default = "default_attention_reduction")]
    pub attention_reduction: usize,
}

fn default_in_channels() -> usize {
    1
}

impl NetworkSpec {
    /// Variant with its stock filter schedule.
    pub fn new(variant: Variant, divisor: usize, input_size: (usize, usize)) -> Self {
        let filters = match variant {
            Variant::Unet9 => UNET9_FILTERS.to_vec(),
            _ => DEEP15_FILTERS.to_vec(),
        };
        NetworkSpec {
            variant,
            filters,
            divisor,
            input_size,
            input_channels: 1,
            output_channels: 1,
            attention_reduction: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters.len() != self.variant.depth() {
            return Err(Error::invalid(format!(
                "variant {} needs {} stage widths, got {}",
                self.variant.name(),
                self.variant.depth(),
                self.filters.len()
            )));
        }
        if self.divisor == 0 {
            return Err(Error::invalid("divisor must be ≥ 1"));
        }
        for &f in &self.filters {
            if f % self.divisor != 0 {
                return Err(Error::invalid(format!(
                    "divisor {} does not divide stage width {f}",
                    self.divisor
                )));
            }
            if f / self.divisor < 4 {
                return Err(Error::invalid(format!(
                    "scaled width {}/{} < 4",
                    f, self.divisor
                )));
            }
        }
        let down = 1usize << self.variant.pools();
        let (h, w) = self.input_size;
        if h % down != 0 || w % down != 0 {
            return Err(Error::invalid(format!(
                "input size {h}×{w} must be divisible by {down} for {}",
                self.variant.name()
            )));
        }
        Ok(())
    }

    pub fn scaled_filters(&self) -> Vec<usize> {
        self.filters.iter().map(|f| f / self.divisor).collect()
    }

    pub fn encoder_stages(&self) -> usize {
        self.variant.pools() + 1
    }

    pub fn decoder_stages(&self) -> usize {
        self.variant.depth() - self.encoder_stages()
    }
}

/// One element of the interpreted layer sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    EncoderBlock {
        stage: usize,
        in_ch: usize,
        out_ch: usize,
    },
    Pool,
    /// Nearest ×2 followed by a 3×3 conv block.
    Upsample {
        stage: usize,
        in_ch: usize,
        out_ch: usize,
    },
    SkipConcat {
        encoder_stage: usize,
    },
    DecoderBlock {
        stage: usize,
        in_ch: usize,
        out_ch: usize,
    },
    Attention {
        stage: usize,
        kind: AttentionKind,
        channels: usize,
    },
    OutputHead {
        in_ch: usize,
        out_ch: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: NetworkSpec,
    pub store: ParameterStore<T>,
    pub wiring: Vec<LayerDesc>,
}

/// Per-attention-layer gate node ids from one forward pass.
#[derive(Debug, Clone)]
pub struct LayerGates {
    pub layer: String,
    pub channels: usize,
    pub alpha: ValueId,
    pub beta: ValueId,
    pub phi: Option<ValueId>,
    pub gamma: Option<ValueId>,
}

/// Result of recording one forward pass on a tape.
#[derive(Debug)]
pub struct ForwardTrace {
    pub output: ValueId,
    /// Leaf node of every trainable parameter, by path.
    pub param_ids: BTreeMap<String, ValueId>,
    pub gates: Vec<LayerGates>,
}

fn init_conv<T: Elem>(
    store: &mut ParameterStore<T>,
    rng: &mut ChaCha8Rng,
    path: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> Result<()> {
    let fan_in = in_ch * k * k;
    store.insert(
        &format!("{path}.weight"),
        attention::he_uniform(&[out_ch, in_ch, k, k], fan_in, rng),
        true,
    )?;
    store.insert(&format!("{path}.bias"), Tensor::zeros(&[out_ch]), true)
}

fn init_bn<T: Elem>(store: &mut ParameterStore<T>, path: &str, ch: usize) -> Result<()> {
    store.insert(&format!("{path}.gamma"), Tensor::full(&[ch], T::one()), true)?;
    store.insert(&format!("{path}.beta"), Tensor::zeros(&[ch]), true)?;
    store.insert(&format!("{path}.running_mean"), Tensor::zeros(&[ch]), false)?;
    store.insert(
        &format!("{path}.running_var"),
        Tensor::full(&[ch], T::one()),
        false,
    )
}

fn init_attention<T: Elem>(
    store: &mut ParameterStore<T>,
    rng: &mut ChaCha8Rng,
    base: &str,
    channels: usize,
    reduction: usize,
    kind: AttentionKind,
) -> Result<()> {
    store.insert(
        &format!("{base}.spatial.weight"),
        attention::he_uniform(&[1, channels, 1, 1], channels, rng),
        true,
    )?;
    store.insert(&format!("{base}.spatial.bias"), Tensor::zeros(&[1]), true)?;
    let hidden = attention::channel_hidden_dim(channels, reduction);
    store.insert(
        &format!("{base}.channel.wf1"),
        attention::he_uniform(&[hidden, channels], channels, rng),
        true,
    )?;
    store.insert(
        &format!("{base}.channel.wf2"),
        attention::he_uniform(&[channels, hidden], hidden, rng),
        true,
    )?;
    if kind == AttentionKind::Baaf {
        let d = attention::squeezed_dim(channels, reduction);
        store.insert(
            &format!("{base}.acm.wfc1"),
            attention::he_uniform(&[d, channels], channels, rng),
            true,
        )?;
        store.insert(
            &format!("{base}.acm.wfc2"),
            attention::he_uniform(&[2 * channels, d], d, rng),
            true,
        )?;
        init_conv(store, rng, &format!("{base}.proj"), 2 * channels, channels, 1)?;
    }
    Ok(())
}

/// Instantiate a model with deterministic fan-in-scaled init.
pub fn build<T: Elem>(spec: &NetworkSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let f = spec.scaled_filters();
    let n_enc = spec.encoder_stages();
    let n_dec = spec.decoder_stages();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let mut wiring = Vec::new();

    // encoder ladder: spatial size halves after every stage except the
    // bottleneck, then mirrors back up
    let (mut h, mut w) = spec.input_size;
    let mut size_ladder = Vec::new();
    let mut in_ch = spec.input_channels;
    for (i, &width) in f.iter().take(n_enc).enumerate() {
        init_conv(&mut store, &mut rng, &format!("enc{i}.conv0"), in_ch, width, 3)?;
        init_bn(&mut store, &format!("enc{i}.bn0"), width)?;
        init_conv(&mut store, &mut rng, &format!("enc{i}.conv1"), width, width, 3)?;
        init_bn(&mut store, &format!("enc{i}.bn1"), width)?;
        wiring.push(LayerDesc::EncoderBlock {
            stage: i,
            in_ch,
            out_ch: width,
        });
        in_ch = width;
        if i < n_enc - 1 {
            size_ladder.push((h, w));
            wiring.push(LayerDesc::Pool);
            h /= 2;
            w /= 2;
        }
    }

    for j in 0..n_dec {
        let width = f[n_enc + j];
        let skip_stage = n_enc - 2 - j;
        let skip_width = f[skip_stage];
        init_conv(&mut store, &mut rng, &format!("dec{j}.up.conv"), in_ch, width, 3)?;
        init_bn(&mut store, &format!("dec{j}.up.bn"), width)?;
        wiring.push(LayerDesc::Upsample {
            stage: j,
            in_ch,
            out_ch: width,
        });
        h *= 2;
        w *= 2;
        let expect = size_ladder
            .pop()
            .expect("decoder deeper than encoder ladder");
        assert_eq!(
            (h, w),
            expect,
            "skip connection joins unequal spatial sizes"
        );
        wiring.push(LayerDesc::SkipConcat {
            encoder_stage: skip_stage,
        });
        init_conv(
            &mut store,
            &mut rng,
            &format!("dec{j}.conv0"),
            skip_width + width,
            width,
            3,
        )?;
        init_bn(&mut store, &format!("dec{j}.bn0"), width)?;
        init_conv(&mut store, &mut rng, &format!("dec{j}.conv1"), width, width, 3)?;
        init_bn(&mut store, &format!("dec{j}.bn1"), width)?;
        wiring.push(LayerDesc::DecoderBlock {
            stage: j,
            in_ch: skip_width + width,
            out_ch: width,
        });
        if let Some(kind) = spec.variant.attention() {
            init_attention(
                &mut store,
                &mut rng,
                &format!("dec{j}.att"),
                width,
                spec.attention_reduction,
                kind,
            )?;
            wiring.push(LayerDesc::Attention {
                stage: j,
                kind,
                channels: width,
            });
        }
        in_ch = width;
    }
    assert_eq!((h, w), spec.input_size, "decoder does not mirror encoder");

    init_conv(&mut store, &mut rng, "head", in_ch, spec.output_channels, 1)?;
    wiring.push(LayerDesc::OutputHead {
        in_ch,
        out_ch: spec.output_channels,
    });

    Ok(Model {
        spec: spec.clone(),
        store,
        wiring,
    })
}

impl<T: Elem> Model<T> {
    /// Sum of trainable tensor sizes.
    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable_values()
    }

    /// Replace this model's parameters from a loaded store, verifying
    /// that paths and shapes line up with the built architecture.
    pub fn load_params(&mut self, loaded: ParameterStore<T>) -> Result<()> {
        for (path, param) in self.store.iter() {
            let other = loaded.get(path).map_err(|_| {
                Error::CheckpointMismatch(format!("checkpoint is missing `{path}`"))
            })?;
            if other.shape() != param.tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "`{path}` has shape {:?} in checkpoint but {:?} in model",
                    other.shape(),
                    param.tensor.shape()
                )));
            }
        }
        if loaded.len() != self.store.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} entries, model expects {}",
                loaded.len(),
                self.store.len()
            )));
        }
        self.store = loaded;
        Ok(())
    }

    fn leaf_param(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ForwardTrace,
        path: &str,
    ) -> Result<ValueId> {
        let tensor = self.store.get(path)?.clone();
        let id = tape.leaf(tensor);
        trace.param_ids.insert(path.to_string(), id);
        Ok(id)
    }

    /// conv3×3 (or 1×1) → batch-norm → LeakyReLU.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn_block(
        &mut self,
        tape: &mut Tape<T>,
        trace: &mut ForwardTrace,
        x: ValueId,
        conv_path: &str,
        bn_path: &str,
        mode: Mode,
    ) -> Result<ValueId> {
        let w = self.leaf_param(tape, trace, &format!("{conv_path}.weight"))?;
        let b = self.leaf_param(tape, trace, &format!("{conv_path}.bias"))?;
        let y = tape.conv2d(x, w, Some(b), 1, Padding::Same)?;
        let gamma = self.leaf_param(tape, trace, &format!("{bn_path}.gamma"))?;
        let beta = self.leaf_param(tape, trace, &format!("{bn_path}.beta"))?;
        let mut stats = BnStats {
            mean: self.store.get(&format!("{bn_path}.running_mean"))?.clone(),
            var: self.store.get(&format!("{bn_path}.running_var"))?.clone(),
        };
        let y = tape.batchnorm(
            y,
            gamma,
            beta,
            mode == Mode::Train,
            c(BN_EPS),
            c(BN_MOMENTUM),
            &mut stats,
        )?;
        if mode == Mode::Train {
            self.store
                .set(&format!("{bn_path}.running_mean"), stats.mean)?;
            self.store
                .set(&format!("{bn_path}.running_var"), stats.var)?;
        }
        Ok(tape.leaky_relu(y, c(LEAKY_SLOPE)))
    }

    fn attention_leaves(
        &self,
        tape: &mut Tape<T>,
        trace: &mut ForwardTrace,
        base: &str,
        kind: AttentionKind,
    ) -> Result<BaafLeaves> {
        let spatial_w = self.leaf_param(tape, trace, &format!("{base}.spatial.weight"))?;
        let spatial_b = self.leaf_param(tape, trace, &format!("{base}.spatial.bias"))?;
        let wf1 = self.leaf_param(tape, trace, &format!("{base}.channel.wf1"))?;
        let wf2 = self.leaf_param(tape, trace, &format!("{base}.channel.wf2"))?;
        let (wfc1, wfc2) = if kind == AttentionKind::Baaf {
            (
                self.leaf_param(tape, trace, &format!("{base}.acm.wfc1"))?,
                self.leaf_param(tape, trace, &format!("{base}.acm.wfc2"))?,
            )
        } else {
            // additive fusion has no selection bottleneck; dummy ids
            (spatial_w, spatial_w)
        };
        Ok(BaafLeaves {
            spatial_w,
            spatial_b,
            wf1,
            wf2,
            wfc1,
            wfc2,
        })
    }

    /// Record one forward pass. Train mode uses batch statistics (and
    /// updates the stored running averages); eval mode is read-only in
    /// effect, using the stored statistics.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        mode: Mode,
    ) -> Result<ForwardTrace> {
        let s = batch.shape();
        if s.len() != 4
            || s[1] != self.spec.input_channels
            || (s[2], s[3]) != self.spec.input_size
        {
            return Err(Error::shape_mismatch(
                "network input",
                s,
                &[
                    0,
                    self.spec.input_channels,
                    self.spec.input_size.0,
                    self.spec.input_size.1,
                ],
            ));
        }
        let mut trace = ForwardTrace {
            output: ValueId(0),
            param_ids: BTreeMap::new(),
            gates: Vec::new(),
        };
        let mut x = tape.leaf(batch.clone());
        let mut skips: Vec<ValueId> = Vec::new();
        let wiring = self.wiring.clone();
        for layer in &wiring {
            match layer {
                LayerDesc::EncoderBlock { stage, .. } => {
                    x = self.conv_bn_block(
                        tape,
                        &mut trace,
                        x,
                        &format!("enc{stage}.conv0"),
                        &format!("enc{stage}.bn0"),
                        mode,
                    )?;
                    x = self.conv_bn_block(
                        tape,
                        &mut trace,
                        x,
                        &format!("enc{stage}.conv1"),
                        &format!("enc{stage}.bn1"),
                        mode,
                    )?;
                }
                LayerDesc::Pool => {
                    skips.push(x);
                    x = tape.maxpool2(x)?;
                }
                LayerDesc::Upsample { stage, .. } => {
                    x = tape.upsample_nearest2(x)?;
                    x = self.conv_bn_block(
                        tape,
                        &mut trace,
                        x,
                        &format!("dec{stage}.up.conv"),
                        &format!("dec{stage}.up.bn"),
                        mode,
                    )?;
                }
                LayerDesc::SkipConcat { .. } => {
                    let skip = skips.pop().expect("skip stack underflow");
                    x = tape.concat_channels(skip, x)?;
                }
                LayerDesc::DecoderBlock { stage, .. } => {
                    x = self.conv_bn_block(
                        tape,
                        &mut trace,
                        x,
                        &format!("dec{stage}.conv0"),
                        &format!("dec{stage}.bn0"),
                        mode,
                    )?;
                    x = self.conv_bn_block(
                        tape,
                        &mut trace,
                        x,
                        &format!("dec{stage}.conv1"),
                        &format!("dec{stage}.bn1"),
                        mode,
                    )?;
                }
                LayerDesc::Attention {
                    stage,
                    kind,
                    channels,
                } => {
                    let base = format!("dec{stage}.att");
                    let leaves = self.attention_leaves(tape, &mut trace, &base, *kind)?;
                    match kind {
                        AttentionKind::PhamAdd => {
                            let (f_s, alpha) = attention::spatial_attention_on_tape(
                                tape,
                                x,
                                leaves.spatial_w,
                                leaves.spatial_b,
                            )?;
                            let (f_c, beta) = attention::channel_attention_on_tape(
                                tape,
                                x,
                                leaves.wf1,
                                leaves.wf2,
                            )?;
                            x = tape.add(f_s, f_c)?;
                            trace.gates.push(LayerGates {
                                layer: base,
                                channels: *channels,
                                alpha,
                                beta,
                                phi: None,
                                gamma: None,
                            });
                        }
                        AttentionKind::Baaf => {
                            let t = attention::baaf_on_tape(tape, x, &leaves)?;
                            let pw =
                                self.leaf_param(tape, &mut trace, &format!("{base}.proj.weight"))?;
                            let pb =
                                self.leaf_param(tape, &mut trace, &format!("{base}.proj.bias"))?;
                            x = tape.conv2d(t.out, pw, Some(pb), 1, Padding::Same)?;
                            trace.gates.push(LayerGates {
                                layer: base,
                                channels: *channels,
                                alpha: t.alpha,
                                beta: t.beta,
                                phi: Some(t.phi),
                                gamma: Some(t.gamma),
                            });
                        }
                    }
                }
                LayerDesc::OutputHead { .. } => {
                    let w = self.leaf_param(tape, &mut trace, "head.weight")?;
                    let b = self.leaf_param(tape, &mut trace, "head.bias")?;
                    let logits = tape.conv2d(x, w, Some(b), 1, Padding::Same)?;
                    x = tape.sigmoid(logits);
                }
            }
        }
        trace.output = x;
        Ok(trace)
    }

    /// Convenience forward on a throwaway tape.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, batch, mode)?;
        Ok(tape.value(trace.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_schedules_match_depths() {
        let spec = NetworkSpec::new(Variant::Deep15, 8, (128, 128));
        assert_eq!(spec.filters, DEEP15_FILTERS);
        spec.validate().unwrap();
        let spec9 = NetworkSpec::new(Variant::Unet9, 16, (64, 64));
        assert_eq!(spec9.filters.len(), 9);
        spec9.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        let mut spec = NetworkSpec::new(Variant::Deep15, 8, (100, 128));
        assert!(spec.validate().is_err()); // 100 not divisible by 128
        spec.input_size = (128, 128);
        spec.filters.pop();
        assert!(spec.validate().is_err()); // schedule length
        let spec = NetworkSpec::new(Variant::Deep15, 32, (128, 128));
        assert!(spec.validate().is_err()); // 64/32 = 2 < 4
    }

    #[test]
    fn unet9_forward_shape_contract() {
        let spec = NetworkSpec::new(Variant::Unet9, 16, (64, 64));
        let mut model = build::<f32>(&spec, 7).unwrap();
        let x = Tensor::zeros(&[1, 1, 64, 64]);
        let y = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 64, 64]);
    }

    #[test]
    fn deep15_baaf_outputs_probabilities() {
        let spec = NetworkSpec::new(Variant::Deep15Baaf, 8, (128, 128));
        let mut model = build::<f32>(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::rand_uniform(&[1, 1, 128, 128], 0.0, 1.0, &mut rng);
        let y = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 128, 128]);
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let spec = NetworkSpec::new(Variant::Deep15Pham, 16, (128, 128));
        let mut model = build::<f32>(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::rand_uniform(&[2, 1, 128, 128], 0.0, 1.0, &mut rng);
        let y1 = model.forward(&x, Mode::Eval).unwrap();
        let y2 = model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn zero_input_eval_gives_half_everywhere() {
        // fresh BN stats (mean 0, var 1), zero biases: every conv output
        // of a zero input is zero, so the head sigmoid sits at 0.5
        let spec = NetworkSpec::new(Variant::Deep15Baaf, 16, (128, 128));
        let mut model = build::<f32>(&spec, 3).unwrap();
        let x = Tensor::zeros(&[1, 1, 128, 128]);
        let y = model.forward(&x, Mode::Eval).unwrap();
        for &v in y.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn parameter_count_ordering_and_conv_arithmetic() {
        let mut store = ParameterStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_conv(&mut store, &mut rng, "c", 1, 4, 3).unwrap();
        assert_eq!(store.num_trainable_values(), 1 * 4 * 9 + 4);

        let base = build::<f32>(&NetworkSpec::new(Variant::Deep15, 8, (128, 128)), 0)
            .unwrap()
            .count_parameters();
        let pham = build::<f32>(&NetworkSpec::new(Variant::Deep15Pham, 8, (128, 128)), 0)
            .unwrap()
            .count_parameters();
        let baaf = build::<f32>(&NetworkSpec::new(Variant::Deep15Baaf, 8, (128, 128)), 0)
            .unwrap()
            .count_parameters();
        assert!(baaf > pham && pham > base, "{baaf} > {pham} > {base}");
    }

    #[test]
    fn structural_diff_baaf_vs_pham() {
        // removing the selection bottleneck and the projection conv from
        // the baaf variant leaves exactly the pham parameter set
        let baaf = build::<f32>(&NetworkSpec::new(Variant::Deep15Baaf, 8, (128, 128)), 0).unwrap();
        let pham = build::<f32>(&NetworkSpec::new(Variant::Deep15Pham, 8, (128, 128)), 0).unwrap();
        let baaf_paths: Vec<&String> = baaf
            .store
            .iter()
            .map(|(k, _)| k)
            .filter(|k| !k.contains(".acm.") && !k.contains(".proj."))
            .collect();
        let pham_paths: Vec<&String> = pham.store.iter().map(|(k, _)| k).collect();
        assert_eq!(baaf_paths, pham_paths);

        let strip = |m: &Model<f32>| {
            m.wiring
                .iter()
                .map(|l| match l {
                    LayerDesc::Attention { stage, channels, .. } => LayerDesc::Attention {
                        stage: *stage,
                        kind: AttentionKind::PhamAdd,
                        channels: *channels,
                    },
                    other => other.clone(),
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&baaf), strip(&pham));
    }

    #[test]
    fn deep15_wiring_counts() {
        let model = build::<f32>(&NetworkSpec::new(Variant::Deep15, 8, (128, 128)), 0).unwrap();
        let pools = model
            .wiring
            .iter()
            .filter(|l| matches!(l, LayerDesc::Pool))
            .count();
        let ups = model
            .wiring
            .iter()
            .filter(|l| matches!(l, LayerDesc::Upsample { .. }))
            .count();
        assert_eq!((pools, ups), (7, 7));
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = NetworkSpec::new(Variant::Deep15Baaf, 8, (128, 128));
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"deep15_baaf\""));
        let back: NetworkSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back.variant, Variant::Deep15Baaf);
        assert_eq!(back.input_size, (128, 128));
    }
}
