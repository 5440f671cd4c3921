//! Declarative backbone description and analytic shape planning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-block output shapes `(t, h, w, c)` declared for the reference
/// architecture on an `80 x 224 x 224 x 3` input.
pub const DECLARED_BLOCK_SHAPES: [[usize; 4]; 5] = [
    [40, 56, 56, 64],
    [40, 28, 28, 162],
    [40, 14, 14, 480],
    [20, 7, 7, 832],
    [10, 4, 4, 1024],
];

pub const EMBEDDING_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Output extent `ceil(in / stride)`, padding split with the extra
    /// element after.
    Same,
    /// Symmetric zero padding per `(t, h, w)` axis.
    Explicit([usize; 3]),
}

/// Kernel and stride triples are ordered `(temporal, height, width)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    Conv(ConvSpec),
    MaxPool(PoolSpec),
}

/// Parallel branches whose outputs are concatenated along channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub name: String,
    pub branches: Vec<Vec<Op>>,
}

/// One backbone block: optional entry pool, optional branch set merged by
/// channel concatenation, optional exit pool, then a chain of inception
/// sub-blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pre_pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branches: Vec<Vec<Op>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_pool: Option<PoolSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sub_blocks: Vec<InceptionSpec>,
    /// Declared output channel count, checked against the branch sums.
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// `(depth, patch, patch, channels)` of the montage cube.
    pub input_shape: [usize; 4],
    pub blocks: Vec<BlockSpec>,
}

pub fn conv(out_channels: usize, kernel: [usize; 3], stride: [usize; 3]) -> Op {
    Op::Conv(ConvSpec {
        out_channels,
        kernel,
        stride,
        padding: Padding::Same,
        relu: true,
    })
}

pub fn pointwise(out_channels: usize) -> Op {
    conv(out_channels, [1, 1, 1], [1, 1, 1])
}

pub fn max_pool(kernel: [usize; 3], stride: [usize; 3]) -> PoolSpec {
    PoolSpec {
        kernel,
        stride,
        padding: Padding::Same,
    }
}

/// Standard four-branch inception module with 3x3x3 mixing convolutions.
pub fn inception(name: &str, b0: usize, b1: (usize, usize), b2: (usize, usize), b3: usize) -> InceptionSpec {
    InceptionSpec {
        name: name.to_string(),
        branches: vec![
            vec![pointwise(b0)],
            vec![pointwise(b1.0), conv(b1.1, [3, 3, 3], [1, 1, 1])],
            vec![pointwise(b2.0), conv(b2.1, [3, 3, 3], [1, 1, 1])],
            vec![Op::MaxPool(max_pool([3, 3, 3], [1, 1, 1])), pointwise(b3)],
        ],
    }
}

impl BackboneConfig {
    /// Five-block backbone on the `80 x 224 x 224 x 3` input.
    pub fn reference() -> Self {
        Self::reference_with_input([80, 224, 224, 3])
    }

    /// Same blocks on an arbitrary input; the plan may then diverge from
    /// [`DECLARED_BLOCK_SHAPES`].
    pub fn reference_with_input(input_shape: [usize; 4]) -> Self {
        let block1 = BlockSpec {
            name: "block1".into(),
            pre_pool: None,
            branches: vec![
                vec![
                    conv(32, [7, 3, 7], [2, 2, 2]),
                    conv(32, [7, 3, 7], [1, 1, 1]),
                ],
                vec![Op::MaxPool(max_pool([3, 3, 3], [2, 2, 2])), pointwise(32)],
            ],
            post_pool: Some(max_pool([1, 3, 3], [1, 2, 2])),
            sub_blocks: vec![],
            out_channels: 64,
        };
        let block2 = BlockSpec {
            name: "block2".into(),
            pre_pool: None,
            branches: vec![
                vec![pointwise(64), conv(81, [3, 3, 7], [1, 1, 1])],
                vec![conv(81, [3, 7, 3], [1, 1, 1])],
            ],
            post_pool: Some(max_pool([1, 3, 3], [1, 2, 2])),
            sub_blocks: vec![],
            out_channels: 162,
        };
        let block3 = BlockSpec {
            name: "block3".into(),
            pre_pool: Some(max_pool([1, 3, 3], [1, 2, 2])),
            branches: vec![],
            post_pool: None,
            sub_blocks: vec![
                inception("block3b", 64, (96, 128), (16, 32), 32),
                inception("block3c", 128, (128, 192), (32, 96), 64),
            ],
            out_channels: 480,
        };
        let block4 = BlockSpec {
            name: "block4".into(),
            pre_pool: Some(max_pool([3, 3, 3], [2, 2, 2])),
            branches: vec![],
            post_pool: None,
            sub_blocks: vec![
                inception("block4b", 192, (96, 208), (16, 48), 64),
                inception("block4c", 160, (112, 224), (24, 64), 64),
                inception("block4d", 128, (128, 256), (24, 64), 64),
                inception("block4e", 112, (144, 288), (32, 64), 64),
                inception("block4f", 256, (160, 320), (32, 128), 128),
            ],
            out_channels: 832,
        };
        let block5 = BlockSpec {
            name: "block5".into(),
            pre_pool: Some(max_pool([2, 2, 2], [2, 2, 2])),
            branches: vec![],
            post_pool: None,
            sub_blocks: vec![
                inception("block5b", 256, (160, 320), (32, 128), 128),
                inception("block5c", 384, (192, 384), (48, 128), 128),
            ],
            out_channels: 1024,
        };
        BackboneConfig {
            input_shape,
            blocks: vec![block1, block2, block3, block4, block5],
        }
    }

    /// A scaled-down backbone with the same block structure: a two-branch
    /// stem followed by `depth - 1` inception blocks. Embedding size is
    /// `2 * width`.
    pub fn reduced(input_shape: [usize; 4], width: usize, depth: usize) -> Self {
        let w = width.max(2);
        let mut blocks = vec![BlockSpec {
            name: "block1".into(),
            pre_pool: None,
            branches: vec![
                vec![conv(w, [3, 3, 3], [1, 2, 2])],
                vec![Op::MaxPool(max_pool([3, 3, 3], [1, 2, 2])), pointwise(w)],
            ],
            post_pool: Some(max_pool([1, 3, 3], [1, 2, 2])),
            sub_blocks: vec![],
            out_channels: 2 * w,
        }];
        for i in 1..depth.max(1) {
            let name = format!("block{}", i + 1);
            blocks.push(BlockSpec {
                name: name.clone(),
                pre_pool: (i > 1).then(|| max_pool([3, 3, 3], [2, 2, 2])),
                branches: vec![],
                post_pool: None,
                sub_blocks: vec![inception(
                    &format!("{name}b"),
                    w / 2,
                    (w / 2, w / 2),
                    ((w / 4).max(1), w / 2),
                    w / 2,
                )],
                out_channels: 0,
            });
        }
        let mut cfg = BackboneConfig { input_shape, blocks };
        for b in cfg.blocks.iter_mut().skip(1) {
            b.out_channels = b.sub_blocks[0]
                .branches
                .iter()
                .map(|br| branch_out_channels(br, 0))
                .sum();
        }
        cfg
    }

    pub fn embedding_dim(&self) -> usize {
        self.blocks
            .last()
            .map(|b| b.out_channels)
            .unwrap_or(self.input_shape[3])
    }

    pub fn validate(&self) -> Result<()> {
        shape_plan(self).map(|_| ())
    }

    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn branch_out_channels(branch: &[Op], input_channels: usize) -> usize {
    branch.iter().fold(input_channels, |c, op| match op {
        Op::Conv(spec) => spec.out_channels,
        Op::MaxPool(_) => c,
    })
}

/// Output extent and leading pad along one axis.
pub fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding, axis: usize) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidConfig("kernel and stride entries must be >= 1".into()));
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out.max(1) - 1) * stride + kernel).saturating_sub(input);
            Ok((out, needed / 2))
        }
        Padding::Explicit(p) => {
            let padded = input + 2 * p[axis];
            if padded < kernel {
                return Ok((0, p[axis]));
            }
            Ok(((padded - kernel) / stride + 1, p[axis]))
        }
    }
}

pub(crate) fn spatial_out(input: [usize; 4], kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> Result<([usize; 3], [usize; 3])> {
    let mut out = [0; 3];
    let mut pad = [0; 3];
    for a in 0..3 {
        let (o, p) = axis_geometry(input[a], kernel[a], stride[a], padding, a)?;
        out[a] = o;
        pad[a] = p;
    }
    Ok((out, pad))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub name: String,
    pub dims: [usize; 4],
}

/// Analytic per-block output shapes plus the pooled embedding length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShapePlan {
    pub stages: Vec<StageShape>,
    pub embedding_dim: usize,
}

/// A stage whose planned shape differs from a declared one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub stage: String,
    pub planned: [usize; 4],
    pub declared: [usize; 4],
}

impl ShapePlan {
    pub fn block_dims(&self) -> Vec<[usize; 4]> {
        self.stages.iter().map(|s| s.dims).collect()
    }

    /// Stages whose shape disagrees with `declared` (compared pairwise).
    pub fn divergence_from(&self, declared: &[[usize; 4]]) -> Vec<Divergence> {
        let mut out: Vec<Divergence> = self
            .stages
            .iter()
            .zip(declared)
            .filter(|(s, d)| s.dims != **d)
            .map(|(s, d)| Divergence {
                stage: s.name.clone(),
                planned: s.dims,
                declared: *d,
            })
            .collect();
        if self.stages.len() != declared.len() {
            out.push(Divergence {
                stage: format!("stage count {} vs {}", self.stages.len(), declared.len()),
                planned: [0; 4],
                declared: [0; 4],
            });
        }
        out
    }

    /// Divergence from [`DECLARED_BLOCK_SHAPES`].
    pub fn divergence_from_reference(&self) -> Vec<Divergence> {
        self.divergence_from(&DECLARED_BLOCK_SHAPES)
    }
}

fn apply_op(dims: [usize; 4], op: &Op) -> Result<[usize; 4]> {
    let (kernel, stride, padding, channels) = match op {
        Op::Conv(c) => {
            if c.out_channels == 0 {
                return Err(Error::InvalidConfig("conv with zero output channels".into()));
            }
            (c.kernel, c.stride, c.padding, c.out_channels)
        }
        Op::MaxPool(p) => (p.kernel, p.stride, p.padding, dims[3]),
    };
    let (s, _) = spatial_out(dims, kernel, stride, padding)?;
    let out = [s[0], s[1], s[2], channels];
    if out.contains(&0) {
        return Err(Error::InvalidConfig(format!("{op:?} on {dims:?} yields {out:?}")));
    }
    Ok(out)
}

pub(crate) fn apply_pool(dims: [usize; 4], pool: &PoolSpec) -> Result<[usize; 4]> {
    apply_op(dims, &Op::MaxPool(pool.clone()))
}

fn apply_branches(dims: [usize; 4], branches: &[Vec<Op>], name: &str) -> Result<[usize; 4]> {
    let mut merged: Option<[usize; 4]> = None;
    for branch in branches {
        let out = branch.iter().try_fold(dims, apply_op)?;
        merged = Some(match merged {
            None => out,
            Some(m) => {
                if m[..3] != out[..3] {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: branch extents {:?} and {:?} cannot be concatenated",
                        &m[..3],
                        &out[..3]
                    )));
                }
                [m[0], m[1], m[2], m[3] + out[3]]
            }
        });
    }
    merged.ok_or_else(|| Error::InvalidConfig(format!("{name}: no branches")))
}

/// Output shape of one block given its input shape.
pub fn block_output(dims: [usize; 4], block: &BlockSpec) -> Result<[usize; 4]> {
    let mut d = dims;
    if let Some(p) = &block.pre_pool {
        d = apply_pool(d, p)?;
    }
    if !block.branches.is_empty() {
        d = apply_branches(d, &block.branches, &block.name)?;
    }
    if let Some(p) = &block.post_pool {
        d = apply_pool(d, p)?;
    }
    for sub in &block.sub_blocks {
        d = apply_branches(d, &sub.branches, &sub.name)?;
    }
    if d[3] != block.out_channels {
        return Err(Error::InvalidConfig(format!(
            "{}: branches produce {} channels, declared {}",
            block.name, d[3], block.out_channels
        )));
    }
    Ok(d)
}

/// Compute every block's output shape without touching weights.
pub fn shape_plan(cfg: &BackboneConfig) -> Result<ShapePlan> {
    if cfg.input_shape.contains(&0) {
        return Err(Error::InvalidConfig(format!("input shape {:?}", cfg.input_shape)));
    }
    let mut dims = cfg.input_shape;
    let mut stages = Vec::with_capacity(cfg.blocks.len());
    for block in &cfg.blocks {
        dims = block_output(dims, block)?;
        stages.push(StageShape {
            name: block.name.clone(),
            dims,
        });
    }
    Ok(ShapePlan {
        stages,
        embedding_dim: dims[3],
    })
}

fn ops_params(ops: &[Op], mut channels: usize) -> (usize, usize) {
    let mut total = 0;
    for op in ops {
        if let Op::Conv(c) = op {
            let kvol: usize = c.kernel.iter().product();
            total += kvol * channels * c.out_channels + c.out_channels;
            channels = c.out_channels;
        }
    }
    (total, channels)
}

fn branches_params(branches: &[Vec<Op>], channels: usize) -> (usize, usize) {
    branches.iter().fold((0, 0), |(p, c), b| {
        let (bp, bc) = ops_params(b, channels);
        (p + bp, c + bc)
    })
}

/// Exact number of trainable scalars (weights and biases) in the backbone.
pub fn count_params(cfg: &BackboneConfig) -> usize {
    let mut channels = cfg.input_shape[3];
    let mut total = 0;
    for block in &cfg.blocks {
        if !block.branches.is_empty() {
            let (p, c) = branches_params(&block.branches, channels);
            total += p;
            channels = c;
        }
        for sub in &block.sub_blocks {
            let (p, c) = branches_params(&sub.branches, channels);
            total += p;
            channels = c;
        }
    }
    total
}
