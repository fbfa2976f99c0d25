//! Frequency-spatial interaction blocks.
//!
//! A block runs a spatial residual branch and a frequency branch side by
//! side, lets them exchange information through two 3x3 convolutions, runs a
//! second pair of branches and fuses the two streams with a 1x1 convolution.
//! The frequency branch edits either the amplitude (FSIA) or the phase (FSIP)
//! of the feature spectrum and leaves the other component untouched.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fourier::{decompose, fft2, ifft2_with, recompose, AmpPhase, Residue};
use crate::layers::{conv_param_count, Conv2d, Init, ParamStore};
use crate::tensor::{concat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    Both,
    SpatialOnly,
    FrequencyOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourierTarget {
    Amplitude,
    Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub interaction_enabled: bool,
    pub branch_mode: BranchMode,
    pub fourier_target: FourierTarget,
}

impl BlockConfig {
    pub fn fsia(channels: usize) -> Self {
        BlockConfig {
            channels,
            interaction_enabled: true,
            branch_mode: BranchMode::Both,
            fourier_target: FourierTarget::Amplitude,
        }
    }

    pub fn fsip(channels: usize) -> Self {
        BlockConfig {
            fourier_target: FourierTarget::Phase,
            ..BlockConfig::fsia(channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("block channels must be at least 1".into()));
        }
        if self.interaction_enabled && self.branch_mode != BranchMode::Both {
            return Err(Error::Config(format!(
                "branch mode {:?} has a single branch and cannot enable interaction",
                self.branch_mode
            )));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let spatial = 2 * conv_param_count(c, c, 3);
        let frequency = 3 * conv_param_count(c, c, 1);
        let (branches, fuse_in) = match self.branch_mode {
            BranchMode::Both => (2 * (spatial + frequency), 2 * c),
            BranchMode::SpatialOnly => (2 * spatial, c),
            BranchMode::FrequencyOnly => (2 * frequency, c),
        };
        let interaction = if self.interaction_enabled {
            2 * conv_param_count(c, c, 3)
        } else {
            0
        };
        branches + interaction + conv_param_count(fuse_in, c, 1)
    }
}

fn check_channels(op: &'static str, x: &Tensor, channels: usize) -> Result<()> {
    let (_, c, _, _) = x.dims4(op)?;
    if c != channels {
        return shape_err(op, format!("expected {channels} channels, got {c}"));
    }
    Ok(())
}

/// `x + conv3x3(act(conv3x3(x)))`.
#[derive(Clone, Debug)]
pub struct SpatialBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    slope: f64,
}

impl SpatialBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(SpatialBranch {
            conv1: store.conv_init(&format!("{prefix}.conv1"), channels, channels, 3, 1, Init::Leaky)?,
            conv2: store.conv_init(&format!("{prefix}.conv2"), channels, channels, 3, 1, Init::Residual)?,
            slope: store.slope(),
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        check_channels("spatial_branch", f, self.conv1.in_channels())?;
        let h = self.conv1.forward(f)?.leaky_relu(self.slope);
        f.add(&self.conv2.forward(&h)?)
    }
}

/// Intermediate values of one frequency-branch evaluation.
#[derive(Clone, Debug)]
pub struct FrequencyTrace {
    /// Output of the leading 1x1 convolution.
    pub pre: Tensor,
    /// Decomposition of the spectrum of `pre`.
    pub before: AmpPhase,
    /// Amplitude/phase pair handed to the recomposition.
    pub after: AmpPhase,
    pub output: Tensor,
}

/// 1x1 conv, FFT, learned map on one polar component, inverse FFT.
#[derive(Clone, Debug)]
pub struct FrequencyBranch {
    pub pre: Conv2d,
    pub op1: Conv2d,
    pub op2: Conv2d,
    pub target: FourierTarget,
    slope: f64,
}

impl FrequencyBranch {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, target: FourierTarget) -> Result<Self> {
        Ok(FrequencyBranch {
            pre: store.conv(&format!("{prefix}.pre"), channels, channels, 1, 1)?,
            op1: store.conv_init(&format!("{prefix}.op1"), channels, channels, 1, 1, Init::Leaky)?,
            op2: store.conv(&format!("{prefix}.op2"), channels, channels, 1, 1)?,
            target,
            slope: store.slope(),
        })
    }

    /// Makes the learned component map an exact identity: the first layer
    /// shifts every value above the activation kink and the second shifts it
    /// back.
    pub fn set_op_identity(&self) {
        const SHIFT: f64 = 16.0;
        self.op1.set_identity(0);
        self.op1.bias.update(|b| b.fill(SHIFT));
        self.op2.set_identity(0);
        self.op2.bias.update(|b| b.fill(-SHIFT));
    }

    fn op(&self, component: &Tensor) -> Result<Tensor> {
        let h = self.op1.forward(component)?.leaky_relu(self.slope);
        self.op2.forward(&h)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(f)?.output)
    }

    pub fn forward_traced(&self, f: &Tensor) -> Result<FrequencyTrace> {
        check_channels("frequency_branch", f, self.pre.in_channels())?;
        let pre = self.pre.forward(f)?;
        let before = decompose(&fft2(&pre)?)?;
        let after = match self.target {
            FourierTarget::Amplitude => AmpPhase {
                amplitude: self.op(&before.amplitude)?,
                phase: before.phase.clone(),
            },
            FourierTarget::Phase => AmpPhase {
                amplitude: before.amplitude.clone(),
                phase: self.op(&before.phase)?,
            },
        };
        // a learned phase map generally breaks Hermitian symmetry
        let output = ifft2_with(&recompose(&after)?, Residue::Discard)?;
        Ok(FrequencyTrace {
            pre,
            before,
            after,
            output,
        })
    }
}

/// Cross-branch residual exchange through two independent 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct Interaction {
    pub w1: Conv2d,
    pub w2: Conv2d,
}

impl Interaction {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Interaction {
            w1: store.conv_init(&format!("{prefix}.w1"), channels, channels, 3, 1, Init::Residual)?,
            w2: store.conv_init(&format!("{prefix}.w2"), channels, channels, 3, 1, Init::Residual)?,
        })
    }

    /// Returns `(f_s + W1(f_f), f_f + W2(f_s))`.
    pub fn forward(&self, f_s: &Tensor, f_f: &Tensor) -> Result<(Tensor, Tensor)> {
        if f_s.shape() != f_f.shape() {
            return shape_err(
                "interact",
                format!("spatial {:?} and frequency {:?} streams differ", f_s.shape(), f_f.shape()),
            );
        }
        let s = f_s.add(&self.w1.forward(f_f)?)?;
        let f = f_f.add(&self.w2.forward(f_s)?)?;
        Ok((s, f))
    }
}

/// Applies the optional interaction; a disabled interaction passes both
/// streams through unchanged.
pub fn interact(
    interaction: Option<&Interaction>,
    f_s: &Tensor,
    f_f: &Tensor,
) -> Result<(Tensor, Tensor)> {
    match interaction {
        Some(i) => i.forward(f_s, f_f),
        None => {
            if f_s.shape() != f_f.shape() {
                return shape_err("interact", "stream shapes differ");
            }
            Ok((f_s.clone(), f_f.clone()))
        }
    }
}

/// One FSIA (amplitude) or FSIP (phase) unit.
#[derive(Clone, Debug)]
pub struct FsiBlock {
    pub config: BlockConfig,
    pub spatial: Option<[SpatialBranch; 2]>,
    pub frequency: Option<[FrequencyBranch; 2]>,
    pub interaction: Option<Interaction>,
    pub fuse: Conv2d,
}

impl FsiBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, config: BlockConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let has_spatial = config.branch_mode != BranchMode::FrequencyOnly;
        let has_frequency = config.branch_mode != BranchMode::SpatialOnly;
        let spatial1 = has_spatial
            .then(|| SpatialBranch::new(store, &format!("{prefix}.spatial1"), c))
            .transpose()?;
        let frequency1 = has_frequency
            .then(|| FrequencyBranch::new(store, &format!("{prefix}.freq1"), c, config.fourier_target))
            .transpose()?;
        let interaction = config
            .interaction_enabled
            .then(|| Interaction::new(store, &format!("{prefix}.interact"), c))
            .transpose()?;
        let spatial2 = has_spatial
            .then(|| SpatialBranch::new(store, &format!("{prefix}.spatial2"), c))
            .transpose()?;
        let frequency2 = has_frequency
            .then(|| FrequencyBranch::new(store, &format!("{prefix}.freq2"), c, config.fourier_target))
            .transpose()?;
        let fuse_in = if config.branch_mode == BranchMode::Both { 2 * c } else { c };
        let fuse = store.conv(&format!("{prefix}.fuse"), fuse_in, c, 1, 1)?;
        Ok(FsiBlock {
            config,
            spatial: spatial1.zip(spatial2).map(|(a, b)| [a, b]),
            frequency: frequency1.zip(frequency2).map(|(a, b)| [a, b]),
            interaction,
            fuse,
        })
    }

    pub fn forward(&self, f_i: &Tensor) -> Result<Tensor> {
        check_channels("fsi_block", f_i, self.config.channels)?;
        match (&self.spatial, &self.frequency) {
            (Some([s1, s2]), Some([q1, q2])) => {
                let f_s1 = s1.forward(f_i)?;
                let f_f1 = q1.forward(f_i)?;
                let (f_s1, f_f1) = interact(self.interaction.as_ref(), &f_s1, &f_f1)?;
                let f_s2 = s2.forward(&f_s1)?;
                let f_f2 = q2.forward(&f_f1)?;
                self.fuse.forward(&concat(&[&f_s2, &f_f2], 1)?)
            }
            (Some([s1, s2]), None) => self.fuse.forward(&s2.forward(&s1.forward(f_i)?)?),
            (None, Some([q1, q2])) => self.fuse.forward(&q2.forward(&q1.forward(f_i)?)?),
            (None, None) => unreachable!("validated block has at least one branch"),
        }
    }
}
