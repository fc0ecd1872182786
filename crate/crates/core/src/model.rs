//! Model specification, the T/S/B variants and the assembled classifier.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    downsample, evss_block, inres_block, stage_rule, stem, BlockConfig, BlockKind, DownsampleWeights, EvssWeights,
    InResWeights, Layout, LocalConv, StemWeights,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamStore};
use crate::scan::{GroupScan, Merge};
use crate::tensor::{Precision, Tensor};

/// Total spatial reduction from input to the last stage.
pub const REDUCTION: usize = 32;
pub const INPUT_CHANNELS: usize = 3;

fn default_skip_step() -> usize {
    2
}
fn default_state_dim() -> usize {
    16
}
fn default_four() -> usize {
    4
}
fn yes() -> bool {
    true
}

/// Declarative description of a model; the JSON config mirrors it field by field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    #[serde(default)]
    pub layout: Layout,
    #[serde(default = "default_skip_step")]
    pub skip_step: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    #[serde(default = "default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "default_four")]
    pub se_reduction: usize,
    #[serde(default = "default_four")]
    pub expansion: usize,
    #[serde(default = "yes")]
    pub es2d: bool,
    #[serde(default = "yes")]
    pub fusion: bool,
    #[serde(default)]
    pub group_scan: GroupScan,
    #[serde(default)]
    pub merge: Merge,
    #[serde(default)]
    pub local_conv: LocalConv,
    #[serde(default)]
    pub outer_residual: bool,
}

impl ModelSpec {
    fn base(name: &str, dims: [usize; 4], depths: [usize; 4], num_classes: usize, input_resolution: usize) -> Self {
        ModelSpec {
            name: name.to_string(),
            dims,
            depths,
            layout: Layout::Inverted,
            skip_step: default_skip_step(),
            num_classes,
            input_resolution,
            state_dim: default_state_dim(),
            se_reduction: 4,
            expansion: 4,
            es2d: true,
            fusion: true,
            group_scan: GroupScan::Single,
            merge: Merge::Sum,
            local_conv: LocalConv::Depthwise,
            outer_residual: false,
        }
    }

    pub fn tiny() -> Self {
        Self::base("T", [48, 96, 192, 384], [2, 2, 4, 2], 1000, 224)
    }

    pub fn small() -> Self {
        Self::base("S", [96, 192, 384, 768], [2, 2, 4, 2], 1000, 224)
    }

    pub fn base_variant() -> Self {
        Self::base("B", [96, 192, 384, 768], [2, 2, 9, 2], 1000, 224)
    }

    /// Scaled-down spec: dims `[8, 16, 32, 64]`, one block per stage.
    pub fn toy(num_classes: usize, input_resolution: usize) -> Self {
        Self::base("toy", [8, 16, 32, 64], [1, 1, 1, 1], num_classes, input_resolution)
    }

    /// `T`, `S` or `B`.
    pub fn variant(name: &str) -> Result<Self> {
        match name {
            "T" | "t" => Ok(Self::tiny()),
            "S" | "s" => Ok(Self::small()),
            "B" | "b" => Ok(Self::base_variant()),
            other => Err(Error::Spec(format!("unknown variant `{other}`, expected T, S or B"))),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// A variant name or a path to a JSON config.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::variant(name_or_path) {
            Ok(spec) => Ok(spec),
            Err(_) if Path::new(name_or_path).exists() => Self::load(Path::new(name_or_path)),
            Err(e) => Err(e),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::Spec(reason));
        if self.dims[0] == 0 {
            return bad("dims must be positive".into());
        }
        for s in 1..4 {
            if self.dims[s] != 2 * self.dims[s - 1] {
                return bad(format!("dims must double per stage, got {:?}", self.dims));
            }
        }
        if self.depths.contains(&0) {
            return bad(format!("depths must be positive, got {:?}", self.depths));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(REDUCTION) {
            return bad(format!(
                "input_resolution {} must be a positive multiple of {REDUCTION}",
                self.input_resolution
            ));
        }
        if self.skip_step == 0 || self.state_dim == 0 || self.se_reduction == 0 || self.expansion == 0 {
            return bad("skip_step, state_dim, se_reduction and expansion must be positive".into());
        }
        Ok(())
    }

    /// Block kind of each stage.
    pub fn stage_kinds(&self) -> [BlockKind; 4] {
        // stage indices are always in range
        std::array::from_fn(|s| stage_rule(s + 1, self.layout).expect("stage in 1..=4"))
    }

    /// Configuration of the blocks in 1-based `stage`.
    pub fn block_config(&self, stage: usize) -> Result<BlockConfig> {
        let kind = stage_rule(stage, self.layout)?;
        let c = self.dims[stage - 1];
        Ok(BlockConfig {
            kind,
            channels_in: c,
            channels_out: c,
            stride: 1,
            skip_step: self.skip_step,
            se_reduction: self.se_reduction,
            expansion: self.expansion,
            state_dim: self.state_dim,
            es2d: self.es2d,
            group_scan: self.group_scan,
            merge: self.merge,
            fusion: self.fusion,
            local_conv: self.local_conv,
            outer_residual: self.outer_residual,
        })
    }

    /// Spatial extent after the stem and after each stage for a square input.
    pub fn extents(&self, input: usize) -> [usize; 5] {
        [input / 2, input / 4, input / 8, input / 16, input / 32]
    }
}

/// Parameter names used by the model.
pub mod names {
    pub const STEM: &str = "stem";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    /// Downsampler entering 1-based `stage`.
    pub fn downsample(stage: usize) -> String {
        format!("down{stage}")
    }

    pub fn block(stage: usize, index: usize) -> String {
        format!("stage{stage}.{index}")
    }
}

/// Output of a single-sample forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[num_classes]`
    pub logits: Var,
    /// `(H, W)` after the stem and after each of the four stages.
    pub extents: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
}

impl Model {
    /// Builds the model with parameters drawn from a seeded generator.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        StemWeights::init(&mut init, names::STEM, INPUT_CHANNELS, spec.dims[0])?;
        for stage in 1..=4 {
            let cin = if stage == 1 { spec.dims[0] } else { spec.dims[stage - 2] };
            DownsampleWeights::init(&mut init, &names::downsample(stage), cin, spec.dims[stage - 1])?;
            let cfg = spec.block_config(stage)?;
            for j in 0..spec.depths[stage - 1] {
                let prefix = names::block(stage, j);
                match cfg.kind {
                    BlockKind::Evss => EvssWeights::init(&mut init, &prefix, &cfg)?,
                    BlockKind::InRes => InResWeights::init(&mut init, &prefix, &cfg)?,
                }
            }
        }
        let c = spec.dims[3];
        init.fan_in(names::HEAD_WEIGHT.into(), &[spec.num_classes, c], c)?;
        init.constant(names::HEAD_BIAS.into(), &[spec.num_classes], 0.0)?;
        Ok(Model { spec, params: store })
    }

    /// Pairs a spec with existing parameters, which must match the spec's layout.
    pub fn with_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let reference = Model::new(spec, 0)?;
        reference.params.same_layout(&params).map_err(Error::Checkpoint)?;
        Ok(Model {
            spec: reference.spec,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Replaces all parameters; on a layout mismatch nothing changes.
    pub fn set_params(&mut self, params: ParamStore) -> Result<()> {
        self.params.same_layout(&params).map_err(Error::Checkpoint)?;
        self.params = params;
        Ok(())
    }

    pub fn num_params(&self) -> u64 {
        self.params.num_scalars()
    }

    /// Forward pass of one `[3, H, W]` image with parameters bound through `binder`.
    pub fn forward_sample(&self, binder: &Binder<'_>, x: &Var) -> Result<Forward> {
        let g = binder.graph();
        let [c, h, w] = x.shape() else {
            return Err(Error::invalid("forward", format!("expected [3, H, W], got {:?}", x.shape())));
        };
        if *c != INPUT_CHANNELS {
            return Err(Error::invalid("forward", format!("expected {INPUT_CHANNELS} input channels, got {c}")));
        }
        if h % REDUCTION != 0 || w % REDUCTION != 0 {
            return Err(Error::invalid(
                "forward",
                format!("spatial extents {h}x{w} must be divisible by {REDUCTION}"),
            ));
        }
        let spec = &self.spec;
        let mut extents = Vec::with_capacity(5);
        let mut y = stem(g, x, &StemWeights::bind(binder, names::STEM)?)?;
        extents.push((y.shape()[1], y.shape()[2]));
        for stage in 1..=4 {
            y = downsample(g, &y, &DownsampleWeights::bind(binder, &names::downsample(stage))?)?;
            let cfg = spec.block_config(stage)?;
            for j in 0..spec.depths[stage - 1] {
                let prefix = names::block(stage, j);
                y = match cfg.kind {
                    BlockKind::Evss => evss_block(g, &y, &cfg, &EvssWeights::bind(binder, &prefix, &cfg)?)?,
                    BlockKind::InRes => inres_block(g, &y, &cfg, &InResWeights::bind(binder, &prefix)?)?,
                };
            }
            extents.push((y.shape()[1], y.shape()[2]));
        }
        let channels = y.shape()[0];
        let pooled = g.global_avg_pool(&y)?;
        let pooled = g.reshape(&pooled, &[channels, 1])?;
        let logits = g.matmul(&binder.get(names::HEAD_WEIGHT)?, &pooled)?;
        let logits = g.reshape(&logits, &[spec.num_classes])?;
        let logits = g.add(&logits, &binder.get(names::HEAD_BIAS)?)?;
        Ok(Forward { logits, extents })
    }

    /// Inference on one `[3, H, W]` image: logits and the stage extents.
    pub fn infer(&self, image: &Tensor, precision: Precision) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let g = Graph::inference(precision);
        let binder = Binder::frozen(&g, &self.params);
        let x = g.constant(image.clone());
        let out = self.forward_sample(&binder, &x)?;
        Ok((out.logits.into_value(), out.extents))
    }

    /// Logits `[B, num_classes]` for a batch `[B, 3, H, W]`, samples evaluated in parallel.
    pub fn forward(&self, batch: &Tensor, precision: Precision) -> Result<Tensor> {
        if batch.rank() != 4 {
            return Err(Error::invalid("forward", format!("expected [B, 3, H, W], got {:?}", batch.shape())));
        }
        let rows = (0..batch.shape()[0])
            .into_par_iter()
            .map(|i| Ok(self.infer(&batch.index_first(i)?, precision)?.0))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&rows)
    }
}

/// Blocks summary of a spec: `(stage, kind, depth, channels, extent)` for a square input.
pub fn stage_table(spec: &ModelSpec) -> Vec<(usize, BlockKind, usize, usize, usize)> {
    let extents = spec.extents(spec.input_resolution);
    (1..=4)
        .map(|s| (s, spec.stage_kinds()[s - 1], spec.depths[s - 1], spec.dims[s - 1], extents[s]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;

    #[test]
    fn variant_tables() {
        let t = ModelSpec::variant("T").unwrap();
        assert_eq!(t.dims, [48, 96, 192, 384]);
        assert_eq!(t.depths, [2, 2, 4, 2]);
        let b = ModelSpec::variant("B").unwrap();
        assert_eq!(b.dims, [96, 192, 384, 768]);
        assert_eq!(b.depths[2], 9);
        assert!(ModelSpec::variant("XL").is_err());
        for s in [t, b, ModelSpec::small()] {
            s.validate().unwrap();
        }
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::toy(2, 32);
        s.dims = [8, 16, 24, 48];
        assert!(s.validate().is_err());
        let mut s = ModelSpec::toy(2, 32);
        s.depths[1] = 0;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::toy(2, 32);
        s.input_resolution = 48;
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let s = ModelSpec::tiny();
        assert_eq!(ModelSpec::from_json(&s.to_json().unwrap()).unwrap(), s);
        let minimal = r#"{"name":"m","dims":[8,16,32,64],"depths":[1,1,1,1],"num_classes":3,"input_resolution":32,"layout":"previous"}"#;
        let m = ModelSpec::from_json(minimal).unwrap();
        assert_eq!(m.layout, Layout::Previous);
        assert_eq!(m.skip_step, 2);
        assert!(m.fusion && m.es2d && !m.outer_residual);
        assert!(ModelSpec::from_json(r#"{"name":"m","bogus":1}"#).is_err());
    }

    #[test]
    fn toy_forward_shapes() {
        let model = Model::new(ModelSpec::toy(2, 32), 0).unwrap();
        let image = Tensor::from_fn(&[3, 32, 32], |i| ((i * 7) % 11) as f64 / 11.0).unwrap();
        let (logits, extents) = model.infer(&image, Precision::Double).unwrap();
        assert_eq!(logits.shape(), &[2]);
        let heights: Vec<usize> = extents.iter().map(|e| e.0).collect();
        assert_eq!(heights, vec![16, 8, 4, 2, 1]);
        let probs = softmax_rows(&logits);
        assert!((probs.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = Model::new(ModelSpec::toy(2, 32), 0).unwrap();
        let image = Tensor::zeros(&[3, 48, 48]).unwrap();
        assert!(model.infer(&image, Precision::Double).is_err());
    }

    #[test]
    fn deterministic_forward() {
        let model = Model::new(ModelSpec::toy(3, 32), 5).unwrap();
        let batch = Tensor::from_fn(&[2, 3, 32, 32], |i| (i as f64 * 0.013).sin()).unwrap();
        let a = model.forward(&batch, Precision::Double).unwrap();
        let b = model.forward(&batch, Precision::Double).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn all_layouts_build() {
        for layout in Layout::ALL {
            let mut spec = ModelSpec::toy(2, 32);
            spec.layout = layout;
            let model = Model::new(spec, 1).unwrap();
            let (logits, _) = model.infer(&Tensor::ones(&[3, 32, 32]).unwrap(), Precision::Double).unwrap();
            assert!(logits.all_finite());
        }
    }

    #[test]
    fn set_params_rejects_mismatch() {
        let mut a = Model::new(ModelSpec::toy(2, 32), 0).unwrap();
        let b = Model::new(ModelSpec::toy(3, 32), 0).unwrap();
        let before = a.params().clone();
        assert!(a.set_params(b.params().clone()).is_err());
        assert_eq!(a.params(), &before);
    }
}
