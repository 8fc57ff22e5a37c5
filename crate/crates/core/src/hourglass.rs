//! Stacked contextual hourglass network.
//!
//! Each module is a symmetric encoder-decoder over `depth` pooling levels
//! with additive skips. Two encoding layers, one on each path at the same
//! reduced resolution, share a codebook and rescale their featuremaps
//! channel-wise. Every module emits a prediction; the network output is the
//! sum of all module predictions.

use crate::autodiff::{Record, Var};
use crate::encoding::{encoding_layer, EncodingCodebook, EncodingHeads, DEFAULT_CODEWORDS};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ResidualBlock};
use crate::params::{BatchNormState, Mode, NormUpdates, ParamGroup, ParamStore, Scope};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HourglassConfig {
    pub num_modules: usize,
    /// Pooling levels per module.
    pub depth: usize,
    /// Width after each resolution drop; `depth` entries.
    pub widths: Vec<usize>,
    pub stem_width: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    pub patch_size: usize,
    /// The encoding layers run at `patch_size / encoding_resolution_divisor`.
    pub encoding_resolution_divisor: usize,
    pub codewords: usize,
    /// Downsampling in the stem (by max pooling after the stem convolution).
    pub stem_stride: usize,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self {
            num_modules: 4,
            depth: 4,
            widths: vec![128, 128, 256, 256],
            stem_width: 64,
            num_classes: 6,
            input_channels: 5,
            patch_size: 256,
            encoding_resolution_divisor: 8,
            codewords: DEFAULT_CODEWORDS,
            stem_stride: 1,
        }
    }
}

impl HourglassConfig {
    /// Smallest configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            num_modules: 1,
            depth: 2,
            widths: vec![4, 4],
            stem_width: 4,
            num_classes: 2,
            input_channels: 3,
            patch_size: 16,
            encoding_resolution_divisor: 4,
            codewords: 2,
            stem_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let pow2 = |v: usize| v.is_power_of_two();
        if self.num_modules == 0 {
            return fail("num_modules must be positive".into());
        }
        if self.depth == 0 {
            return fail("depth must be positive".into());
        }
        if self.widths.len() != self.depth {
            return fail(format!(
                "widths has {} entries but depth is {}",
                self.widths.len(),
                self.depth
            ));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % 2 != 0) {
            return fail(format!("width {w} must be a positive even number"));
        }
        if self.stem_width == 0 || self.input_channels == 0 || self.codewords == 0 {
            return fail("stem_width, input_channels and codewords must be positive".into());
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return fail(format!("num_classes {} must be in 1..=255", self.num_classes));
        }
        if !pow2(self.patch_size) {
            return fail(format!("patch_size {} is not a power of two", self.patch_size));
        }
        if !pow2(self.stem_stride) {
            return fail(format!("stem_stride {} is not a power of two", self.stem_stride));
        }
        let reduction = self.stem_stride << self.depth;
        if self.patch_size % reduction != 0 {
            return fail(format!(
                "patch_size {} is not divisible by stem_stride * 2^depth = {reduction}",
                self.patch_size
            ));
        }
        let div = self.encoding_resolution_divisor;
        if !pow2(div) || div > 1 << self.depth || div < self.stem_stride {
            return fail(format!(
                "encoding_resolution_divisor {div} must be a power of two between stem_stride {} and 2^depth = {}",
                self.stem_stride,
                1 << self.depth
            ));
        }
        Ok(())
    }

    /// Width of the module featuremap at pooling level `level` (0 = module
    /// input resolution).
    pub fn width_at(&self, level: usize) -> usize {
        if level == 0 {
            self.widths[0]
        } else {
            self.widths[level - 1]
        }
    }

    /// Pooling level inside a module at which the encoding layers run.
    pub fn encoding_level(&self) -> usize {
        (self.encoding_resolution_divisor / self.stem_stride).trailing_zeros() as usize
    }
}

#[derive(Clone, Debug)]
struct Stem {
    conv: Conv2d,
    block: ResidualBlock,
}

#[derive(Clone, Debug)]
struct HourglassModule {
    /// Per level: skip branch, and the block after pooling into level+1.
    skips: Vec<ResidualBlock>,
    downs: Vec<ResidualBlock>,
    bottom: ResidualBlock,
    /// Per level: block applied to level+1 before upsampling into level.
    ups: Vec<ResidualBlock>,
    out: ResidualBlock,
    head: Conv2d,
    remap_features: Option<Conv2d>,
    remap_logits: Option<Conv2d>,
    codebook: EncodingCodebook,
    context_down: EncodingHeads,
    context_up: EncodingHeads,
}

/// Layer layout of a network; independent of the scalar type.
#[derive(Clone, Debug)]
pub struct Network {
    config: HourglassConfig,
    stem: Stem,
    modules: Vec<HourglassModule>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// When false the encoding layers are bypassed: attention is the
    /// identity and no presence predictions are made.
    pub encoding: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            encoding: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            encoding: true,
        }
    }

    pub fn with_encoding(mut self, encoding: bool) -> Self {
        self.encoding = encoding;
        self
    }
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// One prediction per module, B × D × H × W at input resolution.
    pub per_module_logits: Vec<Var>,
    pub fused_logits: Var,
    /// Two presence-probability vectors (B × D) per module; empty when the
    /// encoding layers are bypassed.
    pub se_probs: Vec<Var>,
    /// Channel scale factors of every encoding layer, in forward order.
    pub gammas: Vec<Var>,
}

impl Network {
    pub fn config(&self) -> &HourglassConfig {
        &self.config
    }

    pub fn forward<T: Real>(&self, s: &mut Scope<T>, image: Var, opts: ForwardOptions) -> Result<NetworkOutput> {
        let cfg = &self.config;
        let shape = s.rec.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[2] != cfg.patch_size || shape[3] != cfg.patch_size {
            return Err(Error::shape(
                "network_forward",
                &shape,
                &[0, cfg.input_channels, cfg.patch_size, cfg.patch_size],
            ));
        }
        let mut x = self.stem.conv.forward(s, image)?;
        for _ in 0..cfg.stem_stride.trailing_zeros() {
            x = s.rec.max_pool2d(x)?;
        }
        x = self.stem.block.forward(s, x)?;

        let mut out = NetworkOutput {
            per_module_logits: Vec::new(),
            fused_logits: x,
            se_probs: Vec::new(),
            gammas: Vec::new(),
        };
        for module in &self.modules {
            let (next, mut logits) = self.module_forward(s, module, x, opts, &mut out)?;
            if cfg.stem_stride > 1 {
                logits = s.rec.bilinear_upsample(logits, cfg.stem_stride)?;
            }
            out.per_module_logits.push(logits);
            x = next;
        }
        let mut fused = out.per_module_logits[0];
        for &l in &out.per_module_logits[1..] {
            fused = s.rec.add(fused, l)?;
        }
        out.fused_logits = fused;
        Ok(out)
    }

    /// Returns the input for the next module and this module's prediction.
    fn module_forward<T: Real>(
        &self,
        s: &mut Scope<T>,
        m: &HourglassModule,
        input: Var,
        opts: ForwardOptions,
        out: &mut NetworkOutput,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let level = cfg.encoding_level();
        let mut context = |s: &mut Scope<T>, x: Var, heads: &EncodingHeads| -> Result<Var> {
            if !opts.encoding {
                return Ok(x);
            }
            let enc = encoding_layer(s, x, &m.codebook, heads)?;
            out.se_probs.push(enc.presence);
            out.gammas.push(enc.gamma);
            Ok(enc.features)
        };

        let mut x = input;
        if level == 0 {
            x = context(s, x, &m.context_down)?;
        }
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            skips.push(m.skips[l].forward(s, x)?);
            let pooled = s.rec.max_pool2d(x)?;
            x = m.downs[l].forward(s, pooled)?;
            if l + 1 == level {
                x = context(s, x, &m.context_down)?;
            }
        }
        let mut y = m.bottom.forward(s, x)?;
        if level == cfg.depth {
            y = context(s, y, &m.context_up)?;
        }
        for l in (0..cfg.depth).rev() {
            let low = m.ups[l].forward(s, y)?;
            let up = s.rec.bilinear_upsample(low, 2)?;
            y = s.rec.add(skips[l], up)?;
            if l == level {
                y = context(s, y, &m.context_up)?;
            }
        }
        let features = m.out.forward(s, y)?;
        let logits = m.head.forward(s, features)?;
        let next = match (&m.remap_features, &m.remap_logits) {
            (Some(rf), Some(rl)) => {
                let a = rf.forward(s, features)?;
                let b = rl.forward(s, logits)?;
                let sum = s.rec.add(input, a)?;
                s.rec.add(sum, b)?
            }
            _ => features,
        };
        Ok((next, logits))
    }
}

/// A network layout with its parameters and normalization state.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub network: Network,
    pub params: ParamStore<T>,
    pub norms: Vec<BatchNormState<T>>,
}

/// Owned results of a forward pass.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub per_module_logits: Vec<Tensor<T>>,
    pub fused_logits: Tensor<T>,
    pub se_probs: Vec<Tensor<T>>,
}

impl<T: Real> Model<T> {
    /// Builds a network with parameters drawn deterministically from `seed`.
    pub fn build(config: &HourglassConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let mut rng = SplitMix64::new(seed);
        let mut b = Builder {
            params: &mut params,
            norms: &mut norms,
            rng: &mut rng,
            group: ParamGroup::Backbone,
        };
        let w0 = config.widths[0];
        let stem = Stem {
            conv: Conv2d::new(&mut b, "stem.conv", config.input_channels, config.stem_width, 3, 1),
            block: ResidualBlock::new(&mut b, "stem.block", config.stem_width, w0)?,
        };
        let mut modules = Vec::with_capacity(config.num_modules);
        for i in 0..config.num_modules {
            modules.push(build_module(&mut b, config, i)?);
        }
        Ok(Self {
            network: Network {
                config: config.clone(),
                stem,
                modules,
            },
            params,
            norms,
        })
    }

    pub fn config(&self) -> &HourglassConfig {
        &self.network.config
    }

    /// Records a forward pass of `image` into `rec`. Batch statistics from a
    /// training-mode pass are returned for the caller to apply.
    pub fn forward(&self, rec: &mut Record<T>, image: Var, opts: ForwardOptions) -> Result<(NetworkOutput, NormUpdates)> {
        let mut s = Scope::new(rec, &self.params, &self.norms, opts.mode);
        let out = self.network.forward(&mut s, image, opts)?;
        Ok((out, s.finish()))
    }

    /// Evaluation-mode inference; never mutates the model.
    pub fn predict(&self, image: &Tensor<T>, encoding: bool) -> Result<Prediction<T>> {
        let mut rec = Record::new();
        let x = rec.constant(image.clone());
        let (out, _) = self.forward(&mut rec, x, ForwardOptions::eval().with_encoding(encoding))?;
        let grab = |v: &Var| rec.value(*v).clone().with_requires_grad(false);
        Ok(Prediction {
            per_module_logits: out.per_module_logits.iter().map(grab).collect(),
            fused_logits: grab(&out.fused_logits),
            se_probs: out.se_probs.iter().map(grab).collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            network: self.network.clone(),
            params: self.params.cast(),
            norms: self.norms.iter().map(|n| n.cast()).collect(),
        }
    }
}

fn build_module<T: Real>(b: &mut Builder<T>, cfg: &HourglassConfig, index: usize) -> Result<HourglassModule> {
    let p = format!("hg{index}");
    let w = |l| cfg.width_at(l);
    let mut skips = Vec::new();
    let mut downs = Vec::new();
    let mut ups = Vec::new();
    for l in 0..cfg.depth {
        skips.push(ResidualBlock::new(b, &format!("{p}.skip{l}"), w(l), w(l))?);
        downs.push(ResidualBlock::new(b, &format!("{p}.down{l}"), w(l), w(l + 1))?);
        ups.push(ResidualBlock::new(b, &format!("{p}.up{l}"), w(l + 1), w(l))?);
    }
    let bottom = ResidualBlock::new(b, &format!("{p}.bottom"), w(cfg.depth), w(cfg.depth))?;
    let w0 = w(0);
    let out = ResidualBlock::new(b, &format!("{p}.out"), w0, w0)?;
    let head = Conv2d::new(b, &format!("{p}.head"), w0, cfg.num_classes, 1, 1);
    let last = index + 1 == cfg.num_modules;
    let remap_features = (!last).then(|| Conv2d::new(b, &format!("{p}.remap_features"), w0, w0, 1, 1));
    let remap_logits = (!last).then(|| Conv2d::new(b, &format!("{p}.remap_logits"), cfg.num_classes, w0, 1, 1));

    let ctx = w(cfg.encoding_level());
    b.group = ParamGroup::Encoding;
    let codebook = EncodingCodebook::new(b, &format!("{p}.codebook"), cfg.codewords, ctx);
    let context_down = EncodingHeads::new(b, &format!("{p}.context_down"), ctx, cfg.num_classes);
    let context_up = EncodingHeads::new(b, &format!("{p}.context_up"), ctx, cfg.num_classes);
    b.group = ParamGroup::Backbone;
    Ok(HourglassModule {
        skips,
        downs,
        bottom,
        ups,
        out,
        head,
        remap_features,
        remap_logits,
        codebook,
        context_down,
        context_up,
    })
}

/// Per-pixel argmax over the class axis of `B × D × H × W` logits; ties go
/// to the smallest class id.
pub fn predict_labels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] > 256 {
        return Err(Error::shape("predict_labels", s, &[0, 0, 0, 0]));
    }
    let (batch, classes, hw) = (s[0], s[1], s[2] * s[3]);
    let v = logits.values();
    let mut out = vec![0u8; batch * hw];
    for b in 0..batch {
        for p in 0..hw {
            let mut best = 0;
            for d in 1..classes {
                if v[(b * classes + d) * hw + p] > v[(b * classes + best) * hw + p] {
                    best = d;
                }
            }
            out[b * hw + p] = best as u8;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
