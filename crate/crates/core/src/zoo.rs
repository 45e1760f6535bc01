//! Symbolic ResNet / ResNeXt backbones for parameter and MAC accounting.
//!
//! Topology follows the torchvision definitions (stride on the 3×3 conv of
//! each bottleneck, ResNeXt width `planes · base_width/64 · groups`). The
//! `psconv` variant differs only in the lattice tag on the 3×3 bottleneck
//! convolutions, so both variants count identically.
//!
//! MAC convention: one multiply-accumulate per weight per output position,
//! over convolution and linear layers only. BN, ReLU and pooling are free.
//! Under this convention ResNet-50 at 224×224 is 4,089,184,256 MACs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::lattice::DilationPattern;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    Psconv,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "psconv" => Ok(Variant::Psconv),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected standard or psconv)"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Standard => "standard",
            Variant::Psconv => "psconv",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    /// Global average pool to 1×1.
    GlobalAvg,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Op {
    Conv {
        spec: ConvSpec,
        bias: bool,
        /// Present on poly-scale layers.
        lattice: Option<DilationPatternTag>,
    },
    BatchNorm {
        channels: usize,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Pool {
        pool: PoolKind,
        kernel: usize,
        stride: usize,
    },
}

/// Serializable stand-in for a [`DilationPattern`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationPatternTag {
    pub rates: Vec<u32>,
}

impl From<&DilationPattern> for DilationPatternTag {
    fn from(p: &DilationPattern) -> Self {
        DilationPatternTag {
            rates: p.rates().to_vec(),
        }
    }
}

/// Which tensor a layer reads inside a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Main,
    /// Projection shortcut; reads the block input.
    Shortcut,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub stage: usize,
    pub block: Option<usize>,
    pub branch: Branch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub variant: Variant,
    pub input_hw: (usize, usize),
    pub input_channels: usize,
    pub layers: Vec<Layer>,
}

pub const ARCH_NAMES: [&str; 4] = [
    "resnet50",
    "resnet101",
    "resnext50_32x4d",
    "resnext101_32x4d",
];

impl ArchSpec {
    pub fn by_name(name: &str, variant: Variant) -> Result<Self> {
        match name {
            "resnet50" => Ok(resnet50(variant)),
            "resnet101" => Ok(resnet101(variant)),
            "resnext50_32x4d" => Ok(resnext50_32x4d(variant)),
            "resnext101_32x4d" => Ok(resnext101_32x4d(variant)),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = (&Layer, &ConvSpec)> {
        self.layers.iter().filter_map(|l| match &l.op {
            Op::Conv { spec, .. } => Some((l, spec)),
            _ => None,
        })
    }

    /// Convolutions carrying a poly-scale lattice.
    pub fn psconv_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers
            .iter()
            .filter(|l| matches!(l.op, Op::Conv { lattice: Some(_), .. }))
    }
}

struct Builder {
    layers: Vec<Layer>,
    stage: usize,
    block: Option<usize>,
    branch: Branch,
}

impl Builder {
    fn push(&mut self, name: String, op: Op) {
        self.layers.push(Layer {
            name,
            op,
            stage: self.stage,
            block: self.block,
            branch: self.branch,
        });
    }

    fn conv(&mut self, name: String, spec: ConvSpec, lattice: Option<&DilationPattern>) {
        self.push(
            name,
            Op::Conv {
                spec,
                bias: false,
                lattice: lattice.map(Into::into),
            },
        );
    }

    fn bn(&mut self, name: String, channels: usize) {
        self.push(name, Op::BatchNorm { channels });
    }
}

fn conv_spec(cin: usize, cout: usize, k: usize, s: usize, g: usize) -> ConvSpec {
    ConvSpec::new(cin, cout, k, s, g).expect("static architecture table is valid")
}

fn bottleneck_net(
    name: &str,
    blocks: [usize; 4],
    groups: usize,
    width_per_group: usize,
    variant: Variant,
) -> ArchSpec {
    let pattern = DilationPattern::default();
    let lattice = (variant == Variant::Psconv).then_some(&pattern);
    let mut b = Builder {
        layers: Vec::new(),
        stage: 1,
        block: None,
        branch: Branch::Main,
    };
    b.conv("conv1".into(), conv_spec(3, 64, 7, 2, 1), None);
    b.bn("bn1".into(), 64);
    b.push(
        "maxpool".into(),
        Op::Pool {
            pool: PoolKind::Max,
            kernel: 3,
            stride: 2,
        },
    );

    let mut cin = 64;
    let mut block_index = 0;
    for (si, (&count, planes)) in blocks.iter().zip([64usize, 128, 256, 512]).enumerate() {
        let width = planes * width_per_group / 64 * groups;
        let out = planes * 4;
        b.stage = si + 2;
        for bi in 0..count {
            let stride = if bi == 0 && si > 0 { 2 } else { 1 };
            let prefix = format!("layer{}.{}", si + 1, bi);
            b.block = Some(block_index);
            b.branch = Branch::Main;
            b.conv(format!("{prefix}.conv1"), conv_spec(cin, width, 1, 1, 1), None);
            b.bn(format!("{prefix}.bn1"), width);
            b.conv(
                format!("{prefix}.conv2"),
                conv_spec(width, width, 3, stride, groups),
                lattice,
            );
            b.bn(format!("{prefix}.bn2"), width);
            b.conv(format!("{prefix}.conv3"), conv_spec(width, out, 1, 1, 1), None);
            b.bn(format!("{prefix}.bn3"), out);
            if bi == 0 {
                b.branch = Branch::Shortcut;
                b.conv(
                    format!("{prefix}.downsample.0"),
                    conv_spec(cin, out, 1, stride, 1),
                    None,
                );
                b.bn(format!("{prefix}.downsample.1"), out);
            }
            cin = out;
            block_index += 1;
        }
    }

    b.stage = 6;
    b.block = None;
    b.branch = Branch::Main;
    b.push(
        "avgpool".into(),
        Op::Pool {
            pool: PoolKind::GlobalAvg,
            kernel: 0,
            stride: 1,
        },
    );
    b.push(
        "fc".into(),
        Op::Linear {
            inputs: cin,
            outputs: 1000,
        },
    );

    ArchSpec {
        name: name.into(),
        variant,
        input_hw: (224, 224),
        input_channels: 3,
        layers: b.layers,
    }
}

pub fn resnet50(variant: Variant) -> ArchSpec {
    bottleneck_net("resnet50", [3, 4, 6, 3], 1, 64, variant)
}

pub fn resnet101(variant: Variant) -> ArchSpec {
    bottleneck_net("resnet101", [3, 4, 23, 3], 1, 64, variant)
}

pub fn resnext50_32x4d(variant: Variant) -> ArchSpec {
    bottleneck_net("resnext50_32x4d", [3, 4, 6, 3], 32, 4, variant)
}

pub fn resnext101_32x4d(variant: Variant) -> ArchSpec {
    bottleneck_net("resnext101_32x4d", [3, 4, 23, 3], 32, 4, variant)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub stage: usize,
    pub psconv: bool,
    pub params: u64,
    pub macs: u64,
    /// `[C, H, W]` after this layer.
    pub output: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub schema: String,
    pub arch: String,
    pub variant: Variant,
    pub input_hw: (usize, usize),
    pub total_params: u64,
    pub total_macs: u64,
    /// `total_macs / 1e9`.
    pub gflops: f64,
    pub layers: Vec<LayerCount>,
}

pub const COUNT_SCHEMA: &str = "psconv.count/1";

impl CountReport {
    pub fn layers_csv(&self) -> String {
        let mut out = String::from("index,name,kind,stage,psconv,params,macs,out_c,out_h,out_w\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                l.index,
                l.name,
                l.kind,
                l.stage,
                l.psconv,
                l.params,
                l.macs,
                l.output[0],
                l.output[1],
                l.output[2]
            ));
        }
        out
    }
}

/// Walks the architecture at `input_hw`, checking channel chaining and
/// tallying parameters and MACs per layer.
pub fn count(arch: &ArchSpec, input_hw: (usize, usize)) -> Result<CountReport> {
    let mut cur = [arch.input_channels, input_hw.0, input_hw.1];
    let mut block_input = cur;
    let mut shortcut_out: Option<[usize; 3]> = None;
    let mut current_block = None;
    let mut layers = Vec::with_capacity(arch.layers.len());

    let close_block = |cur: [usize; 3], shortcut: Option<[usize; 3]>, block_input: [usize; 3]| {
        let skip = shortcut.unwrap_or(block_input);
        if skip != cur {
            return Err(Error::shape(format!(
                "residual mismatch: main branch {cur:?}, shortcut {skip:?}"
            )));
        }
        Ok(())
    };

    for (index, layer) in arch.layers.iter().enumerate() {
        if layer.block != current_block {
            if current_block.is_some() {
                close_block(cur, shortcut_out.take(), block_input)?;
            }
            current_block = layer.block;
            block_input = cur;
        }
        let src = match layer.branch {
            Branch::Main => cur,
            Branch::Shortcut => shortcut_out.unwrap_or(block_input),
        };
        let (params, macs, out, kind, psconv) = match &layer.op {
            Op::Conv {
                spec,
                bias,
                lattice,
            } => {
                if src[0] != spec.cin {
                    return Err(Error::shape(format!(
                        "layer {} expects {} channels, receives {}",
                        layer.name, spec.cin, src[0]
                    )));
                }
                let (ho, wo) = spec.output_hw(src[1], src[2]);
                let params = spec.params() + if *bias { spec.cout as u64 } else { 0 };
                let macs = spec.params() * (ho * wo) as u64;
                (params, macs, [spec.cout, ho, wo], "conv", lattice.is_some())
            }
            Op::BatchNorm { channels } => {
                if src[0] != *channels {
                    return Err(Error::shape(format!(
                        "layer {} normalizes {} channels, receives {}",
                        layer.name, channels, src[0]
                    )));
                }
                (2 * *channels as u64, 0, src, "batchnorm", false)
            }
            Op::Linear { inputs, outputs } => {
                let flat = src[0] * src[1] * src[2];
                if flat != *inputs {
                    return Err(Error::shape(format!(
                        "layer {} expects {} features, receives {}",
                        layer.name, inputs, flat
                    )));
                }
                let w = (*inputs * *outputs) as u64;
                (w + *outputs as u64, w, [*outputs, 1, 1], "linear", false)
            }
            Op::Pool { pool, stride, .. } => {
                let out = match pool {
                    PoolKind::Max => [src[0], src[1].div_ceil(*stride), src[2].div_ceil(*stride)],
                    PoolKind::GlobalAvg => [src[0], 1, 1],
                };
                (0, 0, out, "pool", false)
            }
        };
        match layer.branch {
            Branch::Main => cur = out,
            Branch::Shortcut => shortcut_out = Some(out),
        }
        layers.push(LayerCount {
            index,
            name: layer.name.clone(),
            kind: kind.into(),
            stage: layer.stage,
            psconv,
            params,
            macs,
            output: out,
        });
    }
    if current_block.is_some() {
        close_block(cur, shortcut_out, block_input)?;
    }

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs: u64 = layers.iter().map(|l| l.macs).sum();
    Ok(CountReport {
        schema: COUNT_SCHEMA.into(),
        arch: arch.name.clone(),
        variant: arch.variant,
        input_hw,
        total_params,
        total_macs,
        gflops: total_macs as f64 / 1e9,
        layers,
    })
}

/// Counts at the architecture's native input size.
pub fn count_params(arch: &ArchSpec) -> Result<CountReport> {
    count(arch, arch.input_hw)
}

pub fn count_flops(arch: &ArchSpec, input_hw: (usize, usize)) -> Result<CountReport> {
    count(arch, input_hw)
}
