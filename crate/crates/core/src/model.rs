//! Model configuration, presets and the assembled network.
//!
//! Layout: stem → stages → classifier head. Every stage is a run of blocks
//! followed by a stride-2 downsample to the next stage width. The output of
//! the last MBConv stage (before its downsample) is projected by a stride-2
//! pointwise convolution and added to the input of the first attention stage.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    fuse_local_global, ClassifierHead, Conv, Ctx, Downsample, LayerKind, LayerSpec, MbConv3,
    MbConvOptions, MhsaBlock, ParamStore, Stem,
};
use crate::ops::{ConvParams, NormMode};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// 4 MBConv3 + 2 attention blocks.
    S,
    /// 4 MBConv3 + 4 attention blocks.
    L,
    /// MBConv3-only ablation with 8 blocks.
    #[serde(rename = "a8", alias = "A8")]
    A8,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::S, Preset::L, Preset::A8];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::S => "S",
            Preset::L => "L",
            Preset::A8 => "a8",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" | "s" => Ok(Preset::S),
            "L" | "l" => Ok(Preset::L),
            "a8" | "A8" | "a" => Ok(Preset::A8),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (valid presets: S, L, a8)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mbconv,
    Mhsa,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: BlockKind,
    pub blocks: usize,
    pub width: usize,
}

/// Number of groups in the attention projections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupPolicy {
    /// One channel per group (`g = c`).
    #[default]
    PerChannel,
    Fixed(usize),
}

impl GroupPolicy {
    pub fn groups(self, channels: usize) -> usize {
        match self {
            GroupPolicy::PerChannel => channels,
            GroupPolicy::Fixed(g) => g,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub heads: usize,
    pub group_policy: GroupPolicy,
    pub mbconv: MbConvOptions,
    pub input_size: usize,
    pub num_classes: usize,
}

/// Stage widths shared by every preset, tuned so that preset S lands near
/// 1.2M parameters.
pub const DEFAULT_STEM_WIDTH: usize = 16;
pub const DEFAULT_WIDTHS: [usize; 4] = [32, 64, 128, 256];

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        use BlockKind::*;
        let kinds_and_blocks: [(BlockKind, usize); 4] = match preset {
            Preset::S => [(Mbconv, 2), (Mbconv, 2), (Mhsa, 1), (Mhsa, 1)],
            Preset::L => [(Mbconv, 2), (Mbconv, 2), (Mhsa, 2), (Mhsa, 2)],
            Preset::A8 => [(Mbconv, 2), (Mbconv, 2), (Mbconv, 2), (Mbconv, 2)],
        };
        Self {
            variant: preset.to_string(),
            stem_width: DEFAULT_STEM_WIDTH,
            stages: kinds_and_blocks
                .iter()
                .zip(DEFAULT_WIDTHS)
                .map(|(&(kind, blocks), width)| StageConfig {
                    kind,
                    blocks,
                    width,
                })
                .collect(),
            heads: 4,
            group_policy: GroupPolicy::PerChannel,
            mbconv: MbConvOptions::default(),
            input_size: 112,
            num_classes: 2,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Replaces the stem and stage widths, keeping the block layout.
    pub fn with_widths(mut self, stem: usize, widths: &[usize]) -> Self {
        self.stem_width = stem;
        for (stage, &w) in self.stages.iter_mut().zip(widths) {
            stage.width = w;
        }
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn block_count(&self, kind: BlockKind) -> usize {
        self.stages
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.blocks)
            .sum()
    }

    /// Checks every structural invariant, listing all violations.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stages.is_empty() {
            problems.push("at least one stage is required".to_string());
        }
        if self.stem_width == 0 {
            problems.push("stem width must be positive".to_string());
        }
        if self.num_classes < 2 {
            problems.push("num_classes must be at least 2".to_string());
        }
        if self.input_size < 3 {
            problems.push("input_size must be at least 3".to_string());
        }
        if self.mbconv.expansion == 0 || self.mbconv.se_ratio == 0 {
            problems.push("expansion and se_ratio must be positive".to_string());
        }
        let mut prev = self.stem_width;
        let mut size = self.input_size;
        for (i, stage) in self.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            if stage.width == 0 {
                problems.push(format!("{name}: width must be positive"));
            }
            if stage.blocks == 0 {
                problems.push(format!("{name}: at least one block is required"));
            }
            if stage.kind == BlockKind::Mhsa {
                if prev != stage.width {
                    problems.push(format!(
                        "{name}: attention stage receives {prev} channels but has width {}",
                        stage.width
                    ));
                }
                if self.heads == 0 || stage.width % self.heads != 0 {
                    problems.push(format!(
                        "{name}: {} heads do not divide width {}",
                        self.heads, stage.width
                    ));
                }
                let g = self.group_policy.groups(stage.width);
                if g == 0 || stage.width % g != 0 {
                    problems.push(format!(
                        "{name}: {g} groups do not divide width {}",
                        stage.width
                    ));
                }
            }
            if size < 2 {
                problems.push(format!(
                    "{name}: spatial size {size} too small to downsample"
                ));
            }
            size = size.div_ceil(2);
            prev = self.stages.get(i + 1).map_or(stage.width, |s| s.width);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    MbConv(MbConv3),
    Mhsa(MhsaBlock),
}

impl Block {
    fn forward(&self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        match self {
            Block::MbConv(b) => b.forward(ctx, x),
            Block::Mhsa(b) => b.forward(ctx, x),
        }
    }

    fn describe(&self, input: Shape, out: &mut Vec<LayerSpec>) -> Result<Shape> {
        match self {
            Block::MbConv(b) => b.describe(input, out),
            Block::Mhsa(b) => b.describe(input, out),
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::MbConv(_) => BlockKind::Mbconv,
            Block::Mhsa(_) => BlockKind::Mhsa,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<Block>,
    pub downsample: Downsample,
}

/// Aligns the local-path output with the attention-path input, then adds.
#[derive(Clone, Debug)]
pub struct FusionBridge {
    /// Stage whose block output is the local operand.
    pub source: usize,
    /// Stage whose input receives the sum.
    pub target: usize,
    /// Present when the two shapes differ.
    pub projection: Option<Conv>,
}

impl FusionBridge {
    pub fn forward(&self, ctx: &mut Ctx, local: &Var, global: &Var) -> Result<Var> {
        let aligned = match &self.projection {
            Some(p) => p.forward(ctx, local)?,
            None => local.clone(),
        };
        fuse_local_global(ctx.tape, &aligned, global)
    }
}

/// Builds the alignment projection for `fusion_bridge`: `None` when the
/// shapes already match, else a pointwise convolution whose stride maps the
/// local spatial size onto the global one.
pub fn fusion_projection(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    local: Shape,
    global: Shape,
) -> Result<Option<Conv>> {
    if local == global {
        return Ok(None);
    }
    let (lh, gh) = (local[2], global[2]);
    let stride = (1..=lh.max(1))
        .find(|&s| crate::ops::conv_output_len(lh, 1, s, 0) == Some(gh))
        .ok_or_else(|| {
            Error::dim(
                "fusion_bridge",
                "spatial",
                format!("cannot map {lh} onto {gh}"),
            )
        })?;
    Conv::new(
        store,
        rng,
        name,
        local[1],
        global[1],
        1,
        ConvParams::new(stride, 0, 1),
        true,
    )
    .map(Some)
}

/// The assembled network and its parameters.
#[derive(Clone, Debug)]
pub struct M2ANet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stem: Stem,
    pub stages: Vec<Stage>,
    pub bridge: Option<FusionBridge>,
    pub head: ClassifierHead,
}

/// Result of a forward pass that also exposes one named activation.
pub struct TappedForward {
    pub logits: Var,
    pub tapped: Option<Var>,
}

impl M2ANet {
    /// Deterministic construction from `config` and `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, &mut rng, config.stem_width)?;
        let mut stages = Vec::with_capacity(config.stages.len());
        let mut prev = config.stem_width;
        let mut size = config.input_size;
        let mut bridge = None;
        let mut last_local: Option<(usize, Shape)> = None;
        for (i, sc) in config.stages.iter().enumerate() {
            let name = format!("stage{}", i + 1);
            if sc.kind == BlockKind::Mhsa && bridge.is_none() {
                if let Some((source, local_shape)) = last_local {
                    let global = [1, sc.width, size, size];
                    let projection = fusion_projection(
                        &mut store,
                        &mut rng,
                        "fusion.proj",
                        local_shape,
                        global,
                    )?;
                    bridge = Some(FusionBridge {
                        source,
                        target: i,
                        projection,
                    });
                }
            }
            let mut blocks = Vec::with_capacity(sc.blocks);
            for j in 0..sc.blocks {
                let bname = format!("{name}.block{j}");
                let c_in = if j == 0 { prev } else { sc.width };
                blocks.push(match sc.kind {
                    BlockKind::Mbconv => Block::MbConv(MbConv3::new(
                        &mut store,
                        &mut rng,
                        &bname,
                        c_in,
                        sc.width,
                        1,
                        config.mbconv,
                    )?),
                    BlockKind::Mhsa => Block::Mhsa(MhsaBlock::new(
                        &mut store,
                        &mut rng,
                        &bname,
                        sc.width,
                        config.heads,
                        config.group_policy.groups(sc.width),
                    )?),
                });
            }
            if sc.kind == BlockKind::Mbconv {
                last_local = Some((i, [1, sc.width, size, size]));
            }
            let next = config.stages.get(i + 1).map_or(sc.width, |s| s.width);
            let downsample = Downsample::new(
                &mut store,
                &mut rng,
                &format!("{name}.down"),
                sc.width,
                next,
            )?;
            stages.push(Stage {
                name,
                blocks,
                downsample,
            });
            prev = next;
            size = size.div_ceil(2);
        }
        let head = ClassifierHead::new(&mut store, &mut rng, prev, config.num_classes)?;
        Ok(Self {
            config,
            store,
            stem,
            stages,
            bridge,
            head,
        })
    }

    pub fn from_preset(preset: Preset, seed: u64) -> Result<Self> {
        Self::build(ModelConfig::preset(preset), seed)
    }

    /// Names accepted by [`M2ANet::forward_tapped`] and Grad-CAM.
    pub fn layer_names(&self) -> Vec<String> {
        std::iter::once("stem".to_string())
            .chain(self.stages.iter().map(|s| s.name.clone()))
            .collect()
    }

    /// Output of the last MBConv stage's blocks, the default Grad-CAM layer.
    pub fn last_local_layer(&self) -> String {
        self.stages
            .iter()
            .rev()
            .find(|s| {
                s.blocks
                    .first()
                    .is_some_and(|b| b.kind() == BlockKind::Mbconv)
            })
            .map_or_else(|| "stem".to_string(), |s| s.name.clone())
    }

    pub fn block_count(&self, kind: BlockKind) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter(|b| b.kind() == kind)
            .count()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        let s = self.config.input_size;
        if shape[1] != 3 {
            return Err(Error::dim(
                "forward",
                "channels",
                format!("expected 3 channels, got {}", shape[1]),
            ));
        }
        if shape[2] != s || shape[3] != s {
            return Err(Error::dim(
                "forward",
                "spatial",
                format!("expected {s}x{s} input, got {}x{}", shape[2], shape[3]),
            ));
        }
        if shape[0] == 0 {
            return Err(Error::dim("forward", "n", "empty batch"));
        }
        Ok(())
    }

    /// Forward pass; logits are `(n, num_classes, 1, 1)`.
    pub fn forward(&self, tape: &mut Tape, x: &Var, mode: NormMode) -> Result<Var> {
        self.forward_tapped(tape, x, mode, None).map(|f| f.logits)
    }

    /// Forward pass that marks the named layer's output as a gradient-carrying
    /// value and returns it alongside the logits.
    pub fn forward_tapped(
        &self,
        tape: &mut Tape,
        x: &Var,
        mode: NormMode,
        tap: Option<&str>,
    ) -> Result<TappedForward> {
        self.check_input(x.shape())?;
        if let Some(name) = tap {
            if !self.layer_names().iter().any(|n| n == name) {
                return Err(Error::Config(format!(
                    "unknown layer `{name}` (valid layers: {})",
                    self.layer_names().join(", ")
                )));
            }
        }
        let mut ctx = Ctx::new(tape, &self.store, mode);
        let mut tapped = None;
        let mut mark = |ctx: &mut Ctx, name: &str, y: Var| -> Var {
            if tap == Some(name) {
                let w = ctx.tape.watch(&y);
                tapped = Some(w.clone());
                w
            } else {
                y
            }
        };
        let y = self.stem.forward(&mut ctx, x)?;
        let mut y = mark(&mut ctx, "stem", y);
        let mut local = None;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(bridge) = self.bridge.as_ref().filter(|b| b.target == i) {
                let l: &Var = local
                    .as_ref()
                    .ok_or_else(|| Error::Config("fusion source produced no output".into()))?;
                y = bridge.forward(&mut ctx, l, &y)?;
            }
            for block in &stage.blocks {
                y = block.forward(&mut ctx, &y)?;
            }
            y = mark(&mut ctx, &stage.name, y);
            if self.bridge.as_ref().is_some_and(|b| b.source == i) {
                local = Some(y.clone());
            }
            y = stage.downsample.forward(&mut ctx, &y)?;
        }
        let logits = self.head.forward(&mut ctx, &y)?;
        Ok(TappedForward { logits, tapped })
    }

    /// Inference-mode logits without recording anything.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.constant(batch.clone());
        let logits = self.forward(&mut tape, &x, NormMode::Infer)?;
        Ok(logits.value().clone())
    }

    /// Layer-by-layer architecture description for a given input shape.
    pub fn describe(&self, input: Shape) -> Result<Vec<LayerSpec>> {
        let mut out = Vec::new();
        let mut s = self.stem.describe(input, &mut out)?;
        let mut local_shape = None;
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(bridge) = self.bridge.as_ref().filter(|b| b.target == i) {
                let ls: Shape =
                    local_shape.ok_or_else(|| Error::Config("fusion source missing".into()))?;
                if let Some(p) = &bridge.projection {
                    p.describe(ls, &mut out)?;
                }
                out.push(LayerSpec {
                    name: "fusion.add".into(),
                    kind: LayerKind::Elementwise,
                    input: s,
                    output: s,
                });
            }
            for block in &stage.blocks {
                s = block.describe(s, &mut out)?;
            }
            if self.bridge.as_ref().is_some_and(|b| b.source == i) {
                local_shape = Some(s);
            }
            s = stage.downsample.describe(s, &mut out)?;
        }
        self.head.describe(s, &mut out)?;
        Ok(out)
    }

    /// Spatial side after the stem and after each stage's downsample.
    pub fn spatial_schedule(&self) -> Result<Vec<usize>> {
        let size = self.config.input_size;
        let specs = self.describe([1, 3, size, size])?;
        let mut sched = Vec::new();
        for spec in &specs {
            if spec.name == "stem.conv" || spec.name.ends_with(".down.conv") {
                sched.push(spec.output[2]);
            }
        }
        Ok(sched)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_reported_block_counts() {
        let s = ModelConfig::preset(Preset::S);
        assert_eq!(
            (
                s.block_count(BlockKind::Mbconv),
                s.block_count(BlockKind::Mhsa)
            ),
            (4, 2)
        );
        let l = ModelConfig::preset(Preset::L);
        assert_eq!(
            (
                l.block_count(BlockKind::Mbconv),
                l.block_count(BlockKind::Mhsa)
            ),
            (4, 4)
        );
        let a = ModelConfig::preset(Preset::A8);
        assert_eq!(
            (
                a.block_count(BlockKind::Mbconv),
                a.block_count(BlockKind::Mhsa)
            ),
            (8, 0)
        );
    }

    #[test]
    fn preset_parsing() {
        assert_eq!("S".parse::<Preset>().unwrap(), Preset::S);
        assert_eq!("a8".parse::<Preset>().unwrap(), Preset::A8);
        let err = "X".parse::<Preset>().unwrap_err().to_string();
        assert!(err.contains("S, L, a8"), "{err}");
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = ModelConfig::preset(Preset::S).with_heads(5);
        cfg.stages[0].blocks = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stage1: at least one block"), "{err}");
        assert!(err.contains("stage3: 5 heads do not divide"), "{err}");
        assert!(err.contains("stage4: 5 heads do not divide"), "{err}");
    }

    #[test]
    fn attention_stage_needs_matching_input_width() {
        let mut cfg = ModelConfig::preset(Preset::S);
        cfg.stages.swap(0, 2);
        cfg.stages[0].width = 32;
        cfg.stem_width = 16;
        let err = M2ANet::build(cfg, 0).unwrap_err().to_string();
        assert!(
            err.contains("attention stage receives 16 channels"),
            "{err}"
        );
    }

    #[test]
    fn full_size_schedule() {
        let m = M2ANet::from_preset(Preset::S, 0).unwrap();
        assert_eq!(m.spatial_schedule().unwrap(), vec![112, 56, 28, 14, 7]);
    }

    #[test]
    fn fusion_bridge_wiring() {
        let m = M2ANet::from_preset(Preset::S, 0).unwrap();
        let b = m.bridge.as_ref().unwrap();
        assert_eq!((b.source, b.target), (1, 2));
        let p = b.projection.as_ref().unwrap();
        assert_eq!((p.c_in, p.c_out, p.params.stride), (64, 128, 2));
        assert!(M2ANet::from_preset(Preset::A8, 0).unwrap().bridge.is_none());
    }

    #[test]
    fn default_gradcam_layer_is_last_local_stage() {
        assert_eq!(
            M2ANet::from_preset(Preset::S, 0)
                .unwrap()
                .last_local_layer(),
            "stage2"
        );
        assert_eq!(
            M2ANet::from_preset(Preset::A8, 0)
                .unwrap()
                .last_local_layer(),
            "stage4"
        );
    }

    #[test]
    fn build_is_deterministic() {
        let a = M2ANet::from_preset(Preset::S, 9).unwrap();
        let b = M2ANet::from_preset(Preset::S, 9).unwrap();
        let c = M2ANet::from_preset(Preset::S, 10).unwrap();
        let same = a
            .store
            .iter()
            .zip(b.store.iter())
            .all(|((_, x), (_, y))| x == y);
        let differ = a
            .store
            .iter()
            .zip(c.store.iter())
            .any(|((_, x), (_, y))| x != y);
        assert!(same && differ);
    }
}
