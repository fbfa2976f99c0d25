//! The two-stage enhancement network.
//!
//! Each stage is a three-scale encoder-decoder of seven interaction units
//! (three encoder units, a bottleneck and three decoder units) with channel
//! widths `C`, `2C`, `4C`. Stage 1 edits amplitudes and uses concatenation
//! skips at the two finer scales. Stage 2 edits phases, has no plain skips,
//! and receives stage-1 and stage-2 encoder information through the
//! information exchange module instead.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BranchMode, FsiBlock};
use crate::error::{shape_err, Error, Result};
use crate::fourier::{image_amplitude, image_phase, swap_amplitude};
use crate::iem::{apply_dynamic_filter, CrossScaleFuse, DynamicFilterBlock, ScalePyramid};
use crate::layers::{Conv2d, Downsample, Init, ParamStore, Parameter, Upsample};
use crate::tensor::{concat, Tensor};

pub const SCALES: usize = 3;
pub const UNITS_PER_STAGE: usize = 7;
pub const DEFAULT_SLOPE: f64 = 0.1;
/// Spatial dims must be multiples of this.
pub const DIVISOR: usize = 1 << (SCALES - 1);

/// Network variants of the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    #[default]
    Full,
    Model1SpatialOnly,
    Model2FrequencyOnly,
    Model3NoInteraction,
    Model4NoIem,
    Model5CrossStageOnly,
    Model6CrossScaleOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::Model1SpatialOnly,
        Ablation::Model2FrequencyOnly,
        Ablation::Model3NoInteraction,
        Ablation::Model4NoIem,
        Ablation::Model5CrossStageOnly,
        Ablation::Model6CrossScaleOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Model1SpatialOnly => "model1_spatial_only",
            Ablation::Model2FrequencyOnly => "model2_frequency_only",
            Ablation::Model3NoInteraction => "model3_no_interaction",
            Ablation::Model4NoIem => "model4_no_iem",
            Ablation::Model5CrossStageOnly => "model5_cross_stage_only",
            Ablation::Model6CrossScaleOnly => "model6_cross_scale_only",
        }
    }

    pub fn branch_mode(self) -> BranchMode {
        match self {
            Ablation::Model1SpatialOnly => BranchMode::SpatialOnly,
            Ablation::Model2FrequencyOnly => BranchMode::FrequencyOnly,
            _ => BranchMode::Both,
        }
    }

    pub fn interaction(self) -> bool {
        !matches!(
            self,
            Ablation::Model1SpatialOnly | Ablation::Model2FrequencyOnly | Ablation::Model3NoInteraction
        )
    }

    /// Whether the dynamic filter path from stage 1 into the stage-2 decoder exists.
    pub fn cross_stage(self) -> bool {
        !matches!(self, Ablation::Model4NoIem | Ablation::Model6CrossScaleOnly)
    }

    /// Whether the cross-scale pyramid fusion exists.
    pub fn cross_scale(self) -> bool {
        !matches!(self, Ablation::Model4NoIem | Ablation::Model5CrossStageOnly)
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.name().to_string()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts the full names as well as `model1`..`model6`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s || a.name().split('_').next() == Some(s.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub negative_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            ablation: Ablation::Full,
            seed: 0,
            negative_slope: DEFAULT_SLOPE,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be at least 1".into()));
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return Err(Error::Config(format!("negative_slope must be finite and nonnegative, got {}", self.negative_slope)));
        }
        self.block_config(1, true).validate()
    }

    fn block_config(&self, channels: usize, amplitude: bool) -> BlockConfig {
        let base = if amplitude {
            BlockConfig::fsia(channels)
        } else {
            BlockConfig::fsip(channels)
        };
        BlockConfig {
            interaction_enabled: self.ablation.interaction(),
            branch_mode: self.ablation.branch_mode(),
            ..base
        }
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

/// Unit names in evaluation order with their pyramid level.
const UNITS: [(&str, usize); UNITS_PER_STAGE] = [
    ("enc0", 0),
    ("enc1", 1),
    ("enc2", 2),
    ("bottleneck", 2),
    ("dec2", 2),
    ("dec1", 1),
    ("dec0", 0),
];

/// Encoder-decoder body shared by both stages.
#[derive(Clone, Debug)]
pub struct Stage {
    pub in_conv: Conv2d,
    /// Units in the order of [`UNITS`].
    pub units: Vec<FsiBlock>,
    pub down: [Downsample; SCALES - 1],
    pub up: [Upsample; SCALES - 1],
    /// Concatenation skips at the two finer scales (stage 1 only).
    pub skips: Option<[Conv2d; SCALES - 1]>,
    pub out_conv: Conv2d,
}

/// Outputs of one encoder-decoder pass.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub encoder: ScalePyramid,
    pub decoder: ScalePyramid,
    pub output: Tensor,
}

impl Stage {
    fn new(store: &mut ParamStore, prefix: &str, config: &NetworkConfig, amplitude: bool) -> Result<Self> {
        let ch = |s| config.channels(s);
        let in_conv = store.conv(&format!("{prefix}.in_conv"), 3, ch(0), 3, 1)?;
        let units = UNITS
            .iter()
            .map(|(name, s)| FsiBlock::new(store, &format!("{prefix}.{name}"), config.block_config(ch(*s), amplitude)))
            .collect::<Result<Vec<_>>>()?;
        let down = [
            Downsample::new(store, &format!("{prefix}.down0"), ch(0), ch(1))?,
            Downsample::new(store, &format!("{prefix}.down1"), ch(1), ch(2))?,
        ];
        let up = [
            Upsample::new(store, &format!("{prefix}.up0"), ch(1), ch(0))?,
            Upsample::new(store, &format!("{prefix}.up1"), ch(2), ch(1))?,
        ];
        let skips = if amplitude {
            Some([
                store.conv(&format!("{prefix}.skip0"), 2 * ch(0), ch(0), 1, 1)?,
                store.conv(&format!("{prefix}.skip1"), 2 * ch(1), ch(1), 1, 1)?,
            ])
        } else {
            None
        };
        let out_conv = store.conv_init(&format!("{prefix}.out_conv"), ch(0), 3, 3, 1, Init::Residual)?;
        Ok(Stage {
            in_conv,
            units,
            down,
            up,
            skips,
            out_conv,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<ScalePyramid> {
        let u = &self.units;
        let e0 = u[0].forward(&self.in_conv.forward(x)?)?;
        let e1 = u[1].forward(&self.down[0].forward(&e0)?)?;
        let e2 = u[2].forward(&self.down[1].forward(&e1)?)?;
        ScalePyramid::new([e0, e1, e2])
    }

    /// Runs the bottleneck and decoder on an encoder pyramid of input `x`.
    /// `refine(scale, feature)` is applied to every decoder unit output
    /// before it is passed on.
    pub fn decode(
        &self,
        x: &Tensor,
        encoder: ScalePyramid,
        refine: &dyn Fn(usize, Tensor) -> Result<Tensor>,
    ) -> Result<StageTrace> {
        let u = &self.units;
        let [e0, e1, e2] = &encoder.levels;
        let b = u[3].forward(e2)?;
        let d2 = refine(2, u[4].forward(&b)?)?;
        let mut up1 = self.up[1].forward(&d2)?;
        if let Some(skips) = &self.skips {
            up1 = skips[1].forward(&concat(&[&up1, e1], 1)?)?;
        }
        let d1 = refine(1, u[5].forward(&up1)?)?;
        let mut up0 = self.up[0].forward(&d1)?;
        if let Some(skips) = &self.skips {
            up0 = skips[0].forward(&concat(&[&up0, e0], 1)?)?;
        }
        let d0 = refine(0, u[6].forward(&up0)?)?;
        let output = x.add(&self.out_conv.forward(&d0)?)?;
        Ok(StageTrace {
            encoder,
            decoder: ScalePyramid::new([d0, d1, d2])?,
            output,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<StageTrace> {
        self.decode(x, self.encode(x)?, &|_, d| Ok(d))
    }
}

/// Cross-stage and cross-scale links between the two stages.
#[derive(Clone, Debug)]
pub struct ExchangeModule {
    /// Fuses the stage-1 decoder pyramid.
    pub cross_scale1: Option<CrossScaleFuse>,
    /// Fuses the stage-2 encoder pyramid.
    pub cross_scale2: Option<CrossScaleFuse>,
    /// One dynamic filter block per decoder scale.
    pub dfb: Vec<DynamicFilterBlock>,
}

impl ExchangeModule {
    fn new(store: &mut ParamStore, config: &NetworkConfig) -> Result<Option<Self>> {
        let a = config.ablation;
        if !a.cross_stage() && !a.cross_scale() {
            return Ok(None);
        }
        let c = config.base_channels;
        let cross_scale1 = if a.cross_stage() && a.cross_scale() {
            Some(CrossScaleFuse::new(store, "iem.cross_scale1", c)?)
        } else {
            None
        };
        let cross_scale2 = if a.cross_scale() {
            Some(CrossScaleFuse::new(store, "iem.cross_scale2", c)?)
        } else {
            None
        };
        // without the cross-stage path the filter sees only stage-2 features
        let inputs = if a.cross_stage() { 3 } else { 2 };
        let dfb = (0..SCALES)
            .map(|s| DynamicFilterBlock::new(store, &format!("iem.dfb{s}"), config.channels(s), inputs))
            .collect::<Result<_>>()?;
        Ok(Some(ExchangeModule {
            cross_scale1,
            cross_scale2,
            dfb,
        }))
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub y1: Tensor,
    pub stage2_input: Tensor,
    pub y2: Tensor,
    pub stage1_decoder: ScalePyramid,
    pub stage2_encoder: ScalePyramid,
    pub stage2_decoder: ScalePyramid,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    pub stage1: Stage,
    pub stage2: Stage,
    pub iem: Option<ExchangeModule>,
    parameters: Vec<Parameter>,
}

impl Network {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, config.negative_slope);
        let stage1 = Stage::new(&mut store, "stage1", &config, true)?;
        let stage2 = Stage::new(&mut store, "stage2", &config, false)?;
        let iem = ExchangeModule::new(&mut store, &config)?;
        Ok(Network {
            config,
            stage1,
            stage2,
            iem,
            parameters: store.into_parameters(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// All parameters sorted by name.
    pub fn parameters(&self) -> &[Parameter] {
        &self.parameters
    }

    pub fn parameter_names(&self) -> BTreeSet<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for p in &self.parameters {
            p.tensor.zero_grad();
        }
    }

    pub fn forward(&self, x_in: &Tensor) -> Result<ForwardTrace> {
        let (_, c, h, w) = x_in.dims4("network")?;
        if c != 3 {
            return shape_err("network", format!("expected a 3-channel image, got {c} channels"));
        }
        if h % DIVISOR != 0 || w % DIVISOR != 0 || h == 0 || w == 0 {
            return shape_err(
                "network",
                format!("height and width must be nonzero multiples of {DIVISOR}, got {h}x{w}; use pad_to_multiple for other sizes"),
            );
        }
        let s1 = self.stage1.forward(x_in)?;
        let y1 = s1.output;
        let stage2_input = swap_amplitude(&image_amplitude(&y1)?, &image_phase(x_in)?)?;
        let encoder = self.stage2.encode(&stage2_input)?;

        let s2 = match &self.iem {
            None => self.stage2.decode(&stage2_input, encoder, &|_, d| Ok(d))?,
            Some(iem) => {
                let d1 = match &iem.cross_scale1 {
                    Some(fuse) => fuse.forward(&s1.decoder)?,
                    None => s1.decoder.clone(),
                };
                let e2 = match &iem.cross_scale2 {
                    Some(fuse) => fuse.forward(&encoder)?,
                    None => encoder.clone(),
                };
                let cross_stage = self.config.ablation.cross_stage();
                let refine = |s: usize, d: Tensor| -> Result<Tensor> {
                    let field = if cross_stage {
                        iem.dfb[s].forward(&[&d1.levels[s], &e2.levels[s], &d])?
                    } else {
                        iem.dfb[s].forward(&[&e2.levels[s], &d])?
                    };
                    apply_dynamic_filter(&d, &field)
                };
                self.stage2.decode(&stage2_input, encoder, &refine)?
            }
        };
        Ok(ForwardTrace {
            y1,
            stage2_input,
            y2: s2.output,
            stage1_decoder: s1.decoder,
            stage2_encoder: s2.encoder,
            stage2_decoder: s2.decoder,
        })
    }
}

/// Reflect-pads height and width up to the next multiple of `multiple`.
/// Returns the padded image and the original `(h, w)` for [`crop`].
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let (n, c, h, w) = x.dims4("pad_to_multiple")?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph - h >= h.max(2) || pw - w >= w.max(2) {
        return shape_err("pad_to_multiple", format!("{h}x{w} is too small to reflect-pad to {ph}x{pw}"));
    }
    let reflect = |i: usize, len: usize| if i < len { i } else { 2 * (len - 1) - i };
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in src.chunks(h * w) {
        for y in 0..ph {
            let row = &plane[reflect(y, h) * w..][..w];
            out.extend((0..pw).map(|x| row[reflect(x, w)]));
        }
    }
    Ok((Tensor::new(&[n, c, ph, pw], out)?, (h, w)))
}

/// Crops the top-left `h x w` window.
pub fn crop(x: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    x.narrow(2, 0, h)?.narrow(3, 0, w)
}

/// Runs the network on arbitrary sizes by reflect-padding and cropping back.
pub fn forward_padded(net: &Network, x: &Tensor) -> Result<ForwardTrace> {
    let (padded, size) = pad_to_multiple(x, DIVISOR)?;
    let t = net.forward(&padded)?;
    Ok(ForwardTrace {
        y1: crop(&t.y1, size)?,
        stage2_input: crop(&t.stage2_input, size)?,
        y2: crop(&t.y2, size)?,
        ..t
    })
}
