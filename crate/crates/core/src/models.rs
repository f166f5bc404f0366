//! The three encoder-decoder networks (TDL, LRS, FFS), their assembly, and
//! checkpoint serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array4, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LtdError, Result};
use crate::exec;
use crate::imagery::{Frame, ProbabilityMap, Sample, FD_OFFSET};
use crate::nn::{AdamState, NodeId, Tape};

pub const CHECKPOINT_HEADER: &str = "dsa-ltd-ckpt/1";
/// Frames per TDL input stack: `k - 9 ..= k`.
pub const TDL_STACK: usize = FD_OFFSET + 1;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalActivation {
    Sigmoid,
    None,
}

/// Shape of one U-Net: a symmetric encoder-decoder with skip connections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub final_activation: FinalActivation,
}

impl BackboneConfig {
    pub fn new(in_channels: usize, out_channels: usize, base_width: usize, depth: usize) -> Self {
        BackboneConfig {
            in_channels,
            out_channels,
            base_width,
            depth,
            final_activation: FinalActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(LtdError::Config(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.base_width < 4 {
            return Err(LtdError::Config(format!(
                "base_width must be at least 4, got {}",
                self.base_width
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(LtdError::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

pub type ParamId = usize;

pub struct ParamEntry {
    pub name: String,
    pub value: Array4<f64>,
    pub adam: AdamState,
    pub trainable: bool,
}

/// Flat storage for every parameter and buffer of a bundle, in registration
/// order. Checkpoints serialize entries in this order.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn register(&mut self, name: String, value: Array4<f64>, trainable: bool) -> ParamId {
        let adam = AdamState {
            m: Array4::zeros(value.dim()),
            v: Array4::zeros(value.dim()),
        };
        self.entries.push(ParamEntry {
            name,
            value,
            adam,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of scalar values across trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    channels: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

/// A U-Net over a shared [`ParamStore`]. Layer structs hold parameter
/// handles; the store owns the data.
pub struct UNet {
    pub config: BackboneConfig,
    enc: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    dec: Vec<ConvBlock>,
    head: Conv,
}

fn register_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
) -> Conv {
    // He initialization for ReLU stacks.
    let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
    let w = Array4::from_shape_fn((c_out, c_in, kernel, kernel), |_| {
        // Box-Muller from two uniforms keeps us independent of distribution
        // crates and identical across rand versions.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let w = store.register(format!("{name}.weight"), w, true);
    let b = store.register(format!("{name}.bias"), Array4::zeros((1, c_out, 1, 1)), true);
    Conv { w, b, kernel }
}

fn register_norm(store: &mut ParamStore, name: &str, channels: usize) -> Norm {
    Norm {
        gamma: store.register(
            format!("{name}.gamma"),
            Array4::from_elem((1, channels, 1, 1), 1.0),
            true,
        ),
        beta: store.register(format!("{name}.beta"), Array4::zeros((1, channels, 1, 1)), true),
        run_mean: store.register(
            format!("{name}.running_mean"),
            Array4::zeros((1, channels, 1, 1)),
            false,
        ),
        run_var: store.register(
            format!("{name}.running_var"),
            Array4::from_elem((1, channels, 1, 1), 1.0),
            false,
        ),
        channels,
    }
}

fn register_block(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> ConvBlock {
    ConvBlock {
        conv1: register_conv(store, rng, &format!("{name}.conv1"), c_in, c_out, 3),
        norm1: register_norm(store, &format!("{name}.norm1"), c_out),
        conv2: register_conv(store, rng, &format!("{name}.conv2"), c_out, c_out, 3),
        norm2: register_norm(store, &format!("{name}.norm2"), c_out),
    }
}

/// Parameter leaves created during one forward pass, mapping store entries
/// to tape nodes so gradients can be routed back after `backward`.
pub type ParamBinding = Vec<(ParamId, NodeId)>;

impl UNet {
    pub fn new(
        config: BackboneConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut enc = Vec::with_capacity(config.depth);
        let mut c_in = config.in_channels;
        for level in 0..config.depth {
            let c_out = config.width_at(level);
            enc.push(register_block(
                store,
                rng,
                &format!("{prefix}.enc{level}"),
                c_in,
                c_out,
            ));
            c_in = c_out;
        }
        let bottleneck = register_block(
            store,
            rng,
            &format!("{prefix}.bottleneck"),
            config.width_at(config.depth - 1),
            config.width_at(config.depth),
        );
        let mut dec = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c_up = config.width_at(level + 1);
            let c_skip = config.width_at(level);
            dec.push(register_block(
                store,
                rng,
                &format!("{prefix}.dec{level}"),
                c_up + c_skip,
                c_skip,
            ));
        }
        let head = register_conv(
            store,
            rng,
            &format!("{prefix}.head"),
            config.base_width,
            config.out_channels,
            1,
        );
        Ok(UNet {
            config,
            enc,
            bottleneck,
            dec,
            head,
        })
    }

    fn forward_conv(
        &self,
        conv: &Conv,
        store: &ParamStore,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = tape.leaf(store.get(conv.w).value.clone());
        let b = tape.leaf(store.get(conv.b).value.clone());
        binding.push((conv.w, w));
        binding.push((conv.b, b));
        tape.conv(x, w, b, conv.kernel)
    }

    fn forward_norm(
        &self,
        norm: &Norm,
        store: &mut ParamStore,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        x: NodeId,
        train: bool,
    ) -> NodeId {
        let batch = tape.value(x).dim().0;
        if train {
            // Batch statistics; identity at batch size 1 where they are
            // undefined for variance purposes.
            if batch == 1 {
                return x;
            }
            let gamma = tape.leaf(store.get(norm.gamma).value.clone());
            let beta = tape.leaf(store.get(norm.beta).value.clone());
            binding.push((norm.gamma, gamma));
            binding.push((norm.beta, beta));
            let (out, mean, var) = tape.batch_norm(x, gamma, beta, BN_EPS);
            for c in 0..norm.channels {
                let rm = &mut store.get_mut(norm.run_mean).value[[0, c, 0, 0]];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                let rv = &mut store.get_mut(norm.run_var).value[[0, c, 0, 0]];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c];
            }
            out
        } else {
            let mut scale = Vec::with_capacity(norm.channels);
            let mut shift = Vec::with_capacity(norm.channels);
            for c in 0..norm.channels {
                let g = store.get(norm.gamma).value[[0, c, 0, 0]];
                let b = store.get(norm.beta).value[[0, c, 0, 0]];
                let m = store.get(norm.run_mean).value[[0, c, 0, 0]];
                let v = store.get(norm.run_var).value[[0, c, 0, 0]];
                let inv = 1.0 / (v + BN_EPS).sqrt();
                scale.push(g * inv);
                shift.push(b - g * m * inv);
            }
            tape.channel_affine(x, scale, shift)
        }
    }

    fn forward_block(
        &self,
        block: &ConvBlock,
        store: &mut ParamStore,
        tape: &mut Tape,
        binding: &mut ParamBinding,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let c1 = self.forward_conv(&block.conv1, store, tape, binding, x)?;
        let n1 = self.forward_norm(&block.norm1, store, tape, binding, c1, train);
        let a1 = tape.relu(n1);
        let c2 = self.forward_conv(&block.conv2, store, tape, binding, a1)?;
        let n2 = self.forward_norm(&block.norm2, store, tape, binding, c2, train);
        Ok(tape.relu(n2))
    }

    /// Run the network on a tape node of shape `[batch, in_channels, h, w]`.
    pub fn forward(
        &self,
        store: &mut ParamStore,
        tape: &mut Tape,
        x: NodeId,
        train: bool,
        binding: &mut ParamBinding,
    ) -> Result<NodeId> {
        let (_, c, h, w) = tape.value(x).dim();
        if c != self.config.in_channels {
            return Err(LtdError::shape(
                format!("{} input channels", self.config.in_channels),
                format!("{c}"),
            ));
        }
        let div = 1 << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(LtdError::shape(
                format!("spatial dims divisible by {div}"),
                format!("{h}x{w}"),
            ));
        }

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut cur = x;
        for block in &self.enc {
            cur = self.forward_block(block, store, tape, binding, cur, train)?;
            skips.push(cur);
            cur = tape.maxpool2(cur)?;
        }
        cur = self.forward_block(&self.bottleneck, store, tape, binding, cur, train)?;
        for (block, skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = tape.upsample2(cur);
            let cat = tape.concat_channels(&[up, *skip])?;
            cur = self.forward_block(block, store, tape, binding, cat, train)?;
        }
        let out = self.forward_conv(&self.head, store, tape, binding, cur)?;
        Ok(match self.config.final_activation {
            FinalActivation::Sigmoid => tape.sigmoid(out),
            FinalActivation::None => out,
        })
    }
}

/// The three networks plus shared parameter storage. Variants may omit TDL
/// or LRS; the fusion network is always present.
pub struct ModelBundle {
    pub store: ParamStore,
    pub tdl: Option<UNet>,
    pub lrs: Option<UNet>,
    pub ffs: UNet,
    pub step: u64,
    configs: BundleConfigs,
}

/// Which inputs feed the fusion network and whether the auxiliary networks
/// exist and are supervised. The full model is the plan with TDL
/// (supervised) plus LRS; ablation variants trim or swap pieces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPlan {
    pub use_tdl: bool,
    pub tdl_supervised: bool,
    pub use_lrs: bool,
    /// A raw motion map fed directly as a fusion channel; mutually
    /// exclusive with the TDL output.
    pub motion_input: Option<crate::motion::MotionKind>,
}

impl ModelPlan {
    pub fn full() -> Self {
        ModelPlan {
            use_tdl: true,
            tdl_supervised: true,
            use_lrs: true,
            motion_input: None,
        }
    }

    /// Key frame alone.
    pub fn baseline() -> Self {
        ModelPlan {
            use_tdl: false,
            tdl_supervised: false,
            use_lrs: false,
            motion_input: None,
        }
    }

    pub fn ffs_in_channels(&self) -> usize {
        1 + usize::from(self.use_tdl)
            + usize::from(self.motion_input.is_some())
            + usize::from(self.use_lrs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_tdl && self.motion_input.is_some() {
            return Err(LtdError::Config(
                "TDL output and a raw motion map are mutually exclusive fusion inputs".into(),
            ));
        }
        if self.tdl_supervised && !self.use_tdl {
            return Err(LtdError::Config(
                "tdl_supervised requires use_tdl".into(),
            ));
        }
        Ok(())
    }
}

fn default_plan() -> ModelPlan {
    ModelPlan::full()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleConfigs {
    #[serde(default = "default_plan")]
    pub plan: ModelPlan,
    pub tdl: Option<BackboneConfig>,
    pub lrs: Option<BackboneConfig>,
    pub ffs: BackboneConfig,
    pub seed: u64,
}

impl ModelBundle {
    /// Canonical full-model assembly: TDL over a 10-frame stack, LRS
    /// over the key frame, FFS over the 3-channel fusion.
    pub fn build(
        tdl: BackboneConfig,
        lrs: BackboneConfig,
        ffs: BackboneConfig,
        seed: u64,
    ) -> Result<Self> {
        if tdl.in_channels != TDL_STACK {
            return Err(LtdError::Config(format!(
                "TDL must take {TDL_STACK} input channels, got {}",
                tdl.in_channels
            )));
        }
        if lrs.in_channels != 1 {
            return Err(LtdError::Config(format!(
                "LRS must take 1 input channel, got {}",
                lrs.in_channels
            )));
        }
        if ffs.in_channels != 3 {
            return Err(LtdError::Config(format!(
                "FFS must take 3 input channels, got {}",
                ffs.in_channels
            )));
        }
        Self::build_custom(BundleConfigs {
            plan: ModelPlan::full(),
            tdl: Some(tdl),
            lrs: Some(lrs),
            ffs,
            seed,
        })
    }

    /// Build the bundle a plan calls for, at the given capacity.
    pub fn for_plan(
        plan: ModelPlan,
        base_width: usize,
        depth: usize,
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        Self::build_custom(BundleConfigs {
            plan,
            tdl: plan
                .use_tdl
                .then(|| BackboneConfig::new(TDL_STACK, 1, base_width, depth)),
            lrs: plan
                .use_lrs
                .then(|| BackboneConfig::new(1, 1, base_width, depth)),
            ffs: BackboneConfig::new(plan.ffs_in_channels(), 1, base_width, depth),
            seed,
        })
    }

    /// Default desk-scale full bundle.
    pub fn build_default(base_width: usize, depth: usize, seed: u64) -> Result<Self> {
        Self::build(
            BackboneConfig::new(TDL_STACK, 1, base_width, depth),
            BackboneConfig::new(1, 1, base_width, depth),
            BackboneConfig::new(3, 1, base_width, depth),
            seed,
        )
    }

    /// Assembly with an arbitrary subset of auxiliary networks, for ablation
    /// variants whose fusion input channel count differs.
    pub fn build_custom(configs: BundleConfigs) -> Result<Self> {
        configs.plan.validate()?;
        if configs.plan.use_tdl != configs.tdl.is_some()
            || configs.plan.use_lrs != configs.lrs.is_some()
            || configs.plan.ffs_in_channels() != configs.ffs.in_channels
        {
            return Err(LtdError::Config(
                "plan and network configs disagree".into(),
            ));
        }
        for cfg in [&configs.tdl, &configs.lrs]
            .into_iter()
            .flatten()
            .chain([&configs.ffs])
        {
            cfg.validate()?;
            if cfg.out_channels != 1 {
                return Err(LtdError::Config(format!(
                    "all networks emit 1 channel, got {}",
                    cfg.out_channels
                )));
            }
        }
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(configs.seed);
        let tdl = configs
            .tdl
            .map(|c| UNet::new(c, &mut store, "tdl", &mut rng))
            .transpose()?;
        let lrs = configs
            .lrs
            .map(|c| UNet::new(c, &mut store, "lrs", &mut rng))
            .transpose()?;
        let ffs = UNet::new(configs.ffs, &mut store, "ffs", &mut rng)?;
        Ok(ModelBundle {
            store,
            tdl,
            lrs,
            ffs,
            step: 0,
            configs,
        })
    }

    pub fn configs(&self) -> &BundleConfigs {
        &self.configs
    }

    /// Split borrows for forward passes that need the store mutable while
    /// reading network definitions.
    pub fn parts_mut(&mut self) -> (&mut ParamStore, Option<&UNet>, Option<&UNet>, &UNet) {
        (
            &mut self.store,
            self.tdl.as_ref(),
            self.lrs.as_ref(),
            &self.ffs,
        )
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_len()
    }
}

/// Stack frames `k - 9 ..= k` into a `[1, 10, h, w]` TDL input.
pub fn tdl_input_stack(sample: &Sample, k: usize) -> Result<Array4<f64>> {
    if k < FD_OFFSET || k >= sample.video.frame_count() {
        return Err(LtdError::InvalidArgument(format!(
            "key frame {k} cannot anchor a {TDL_STACK}-frame stack"
        )));
    }
    let (h, w) = sample.video.dim();
    let mut stack = Array4::zeros((1, TDL_STACK, h, w));
    for (c, idx) in (k - FD_OFFSET..=k).enumerate() {
        stack
            .index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), c)
            .assign(sample.video.frame(idx).pixels());
    }
    Ok(stack)
}

fn frame_input(frame: &Frame) -> Array4<f64> {
    let (h, w) = frame.dim();
    frame
        .pixels()
        .clone()
        .into_shape_with_order((1, 1, h, w))
        .expect("contiguous frame")
}

fn map_from_output(out: &Array4<f64>) -> ProbabilityMap {
    let (_, _, h, w) = out.dim();
    let plane: Array2<f64> = out
        .index_axis(Axis(0), 0)
        .index_axis(Axis(0), 0)
        .to_owned();
    let _ = (h, w);
    ProbabilityMap::new(plane.mapv(|v| v.clamp(0.0, 1.0))).expect("sigmoid output in range")
}

/// Inference-mode TDL pass over a prepared 10-frame stack.
pub fn tdl_forward(bundle: &mut ModelBundle, stack: &Array4<f64>) -> Result<ProbabilityMap> {
    let net = bundle
        .tdl
        .as_ref()
        .ok_or_else(|| LtdError::Config("bundle has no TDL network".into()))?;
    let mut tape = Tape::new(exec::default_mode());
    let x = tape.leaf(stack.clone());
    let mut binding = ParamBinding::new();
    let out = net.forward(&mut bundle.store, &mut tape, x, false, &mut binding)?;
    Ok(map_from_output(tape.value(out)))
}

/// Inference-mode LRS pass over a key frame.
pub fn lrs_forward(bundle: &mut ModelBundle, key_frame: &Frame) -> Result<ProbabilityMap> {
    let net = bundle
        .lrs
        .as_ref()
        .ok_or_else(|| LtdError::Config("bundle has no LRS network".into()))?;
    let mut tape = Tape::new(exec::default_mode());
    let x = tape.leaf(frame_input(key_frame));
    let mut binding = ParamBinding::new();
    let out = net.forward(&mut bundle.store, &mut tape, x, false, &mut binding)?;
    Ok(map_from_output(tape.value(out)))
}

/// Inference-mode FFS pass over the (key frame, temporal difference, liver
/// map) fusion.
pub fn ffs_forward(
    bundle: &mut ModelBundle,
    key_frame: &Frame,
    temporal_diff: &ProbabilityMap,
    liver_map: &ProbabilityMap,
) -> Result<ProbabilityMap> {
    let dims = key_frame.dim();
    if temporal_diff.dim() != dims || liver_map.dim() != dims {
        return Err(LtdError::shape(
            format!("{}x{}", dims.0, dims.1),
            "fusion inputs with mixed dimensions".to_string(),
        ));
    }
    let (h, w) = dims;
    let mut input = Array4::zeros((1, 3, h, w));
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(key_frame.pixels());
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 1)
        .assign(temporal_diff.pixels());
    input
        .index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 2)
        .assign(liver_map.pixels());
    let mut tape = Tape::new(exec::default_mode());
    let x = tape.leaf(input);
    let mut binding = ParamBinding::new();
    let out = bundle
        .ffs
        .forward(&mut bundle.store, &mut tape, x, false, &mut binding)?;
    Ok(map_from_output(tape.value(out)))
}

/// End-to-end inference on a sample's key frame: TDL on the trailing stack,
/// LRS on the key frame, then the fusion.
pub fn full_forward(
    bundle: &mut ModelBundle,
    sample: &Sample,
) -> Result<(ProbabilityMap, ProbabilityMap, ProbabilityMap)> {
    full_forward_at(bundle, sample, sample.key_frame_index)
}

/// As [`full_forward`] but anchored at an arbitrary frame index.
pub fn full_forward_at(
    bundle: &mut ModelBundle,
    sample: &Sample,
    k: usize,
) -> Result<(ProbabilityMap, ProbabilityMap, ProbabilityMap)> {
    let violations = crate::imagery::validate_sample(sample);
    if !violations.is_empty() {
        return Err(LtdError::InvalidSample {
            sample_id: sample.sample_id.clone(),
            violations,
        });
    }
    let stack = tdl_input_stack(sample, k)?;
    let i_ltd = tdl_forward(bundle, &stack)?;
    let key = sample.video.frame(k);
    let i_lrs = lrs_forward(bundle, key)?;
    let i_seg = ffs_forward(bundle, key, &i_ltd, &i_lrs)?;
    Ok((i_ltd, i_lrs, i_seg))
}

/// Write the bundle (configs, step counter, every parameter and buffer) to a
/// versioned archive.
pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct ParamMeta<'a> {
        name: &'a str,
        shape: [usize; 4],
        trainable: bool,
    }
    #[derive(Serialize)]
    struct Meta<'a> {
        configs: &'a BundleConfigs,
        step: u64,
        params: Vec<ParamMeta<'a>>,
    }
    let meta = Meta {
        configs: &bundle.configs,
        step: bundle.step,
        params: bundle
            .store
            .entries()
            .iter()
            .map(|e| {
                let d = e.value.dim();
                ParamMeta {
                    name: &e.name,
                    shape: [d.0, d.1, d.2, d.3],
                    trainable: e.trainable,
                }
            })
            .collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    let file = File::create(path).map_err(|e| LtdError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| LtdError::io(path.display().to_string(), e);
    out.write_all(CHECKPOINT_HEADER.as_bytes()).map_err(io_err)?;
    out.write_all(b"\n").map_err(io_err)?;
    out.write_u64::<LittleEndian>(meta_bytes.len() as u64)
        .map_err(io_err)?;
    out.write_all(&meta_bytes).map_err(io_err)?;
    for entry in bundle.store.entries() {
        for &v in entry.value.iter() {
            out.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Load a bundle archive written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    #[derive(Deserialize)]
    struct ParamMeta {
        name: String,
        shape: [usize; 4],
        #[allow(dead_code)]
        trainable: bool,
    }
    #[derive(Deserialize)]
    struct Meta {
        configs: BundleConfigs,
        step: u64,
        params: Vec<ParamMeta>,
    }
    let file = File::open(path).map_err(|e| LtdError::io(path.display().to_string(), e))?;
    let mut input = BufReader::new(file);
    let io_err = |e| LtdError::io(path.display().to_string(), e);

    let mut header = vec![0u8; CHECKPOINT_HEADER.len() + 1];
    input.read_exact(&mut header).map_err(io_err)?;
    if header != [CHECKPOINT_HEADER.as_bytes(), b"\n"].concat() {
        return Err(LtdError::Checkpoint(format!(
            "bad header, expected {CHECKPOINT_HEADER:?}"
        )));
    }
    let meta_len = input.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    input.read_exact(&mut meta_bytes).map_err(io_err)?;
    let meta: Meta = serde_json::from_slice(&meta_bytes)?;

    let mut bundle = ModelBundle::build_custom(meta.configs)?;
    bundle.step = meta.step;
    if meta.params.len() != bundle.store.entries().len() {
        return Err(LtdError::Checkpoint(format!(
            "parameter count mismatch: archive has {}, model has {}",
            meta.params.len(),
            bundle.store.entries().len()
        )));
    }
    for (pm, entry) in meta.params.iter().zip(bundle.store.entries_mut()) {
        let d = entry.value.dim();
        if pm.name != entry.name || pm.shape != [d.0, d.1, d.2, d.3] {
            return Err(LtdError::Checkpoint(format!(
                "parameter mismatch: archive {}:{:?} vs model {}:{:?}",
                pm.name, pm.shape, entry.name, d
            )));
        }
        for v in entry.value.iter_mut() {
            *v = input.read_f64::<LittleEndian>().map_err(io_err)?;
        }
    }
    Ok(bundle)
}

/// Zero the fusion head so the bundle emits uniform 0.5 maps; test hook.
pub fn zero_ffs_head(bundle: &mut ModelBundle) {
    for suffix in ["ffs.head.weight", "ffs.head.bias"] {
        let id = bundle.store.find(suffix).expect("head params exist");
        bundle.store.get_mut(id).value.fill(0.0);
    }
}
