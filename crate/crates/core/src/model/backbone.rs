//! The 3D inception backbone: compiled from a [`BackboneConfig`] into a
//! tree of layers with parameter slots, run forward with or without a tape,
//! and differentiated by reverse-mode accumulation.

use crate::error::{Error, Result};
use crate::tensor::Volume;

use super::config::{shape_plan, BackboneConfig, BlockSpec, ConvSpec, Op, PoolSpec, ShapePlan};
use super::embedding::EmbeddingVector;
use super::layers::{conv3d_backward, conv3d_forward, maxpool_backward, maxpool_forward, Geometry};
use super::params::{glorot_uniform, seeded_rng, Grads, ParamSet};

#[derive(Debug, Clone)]
enum Node {
    Conv {
        weight: usize,
        bias: usize,
        geom: Geometry,
        relu: bool,
    },
    Pool {
        geom: Geometry,
    },
    Concat {
        branches: Vec<Vec<Node>>,
    },
}

#[derive(Debug)]
enum Cache {
    Conv { input: Volume, output: Option<Volume> },
    Pool { argmax: Vec<u32>, in_dims: [usize; 4] },
    Concat { branches: Vec<Vec<Cache>>, channels: Vec<usize> },
}

/// Stored intermediates from a training-mode forward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
    final_dims: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub embedding: EmbeddingVector,
    /// Output dims recorded after each block.
    pub block_dims: Vec<[usize; 4]>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamSet,
    nodes: Vec<Node>,
    /// Index into `nodes` one past each block's last node.
    block_ends: Vec<usize>,
    plan: ShapePlan,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: Option<&'a mut rand_chacha::ChaCha8Rng>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, dims: [usize; 4], spec: &ConvSpec) -> Result<(Node, [usize; 4])> {
        let geom = Geometry::conv(dims, spec)?;
        let kvol: usize = spec.kernel.iter().product();
        let cin = dims[3];
        let n = kvol * cin * spec.out_channels;
        let w = match self.rng.as_deref_mut() {
            Some(rng) => glorot_uniform(rng, kvol * cin, kvol * spec.out_channels, n),
            None => vec![0.0; n],
        };
        let weight = self.params.push(
            format!("{name}/weight"),
            vec![spec.kernel[0], spec.kernel[1], spec.kernel[2], cin, spec.out_channels],
            w,
        );
        let bias = self.params.push(
            format!("{name}/bias"),
            vec![spec.out_channels],
            vec![0.0; spec.out_channels],
        );
        let out = geom.out_dims;
        Ok((
            Node::Conv {
                weight,
                bias,
                geom,
                relu: spec.relu,
            },
            out,
        ))
    }

    fn pool(dims: [usize; 4], spec: &PoolSpec) -> Result<(Node, [usize; 4])> {
        let geom = Geometry::pool(dims, spec)?;
        let out = geom.out_dims;
        Ok((Node::Pool { geom }, out))
    }

    fn branches(&mut self, name: &str, dims: [usize; 4], branches: &[Vec<Op>]) -> Result<(Node, [usize; 4])> {
        let mut nodes = Vec::with_capacity(branches.len());
        let mut out: Option<[usize; 4]> = None;
        for (bi, branch) in branches.iter().enumerate() {
            let mut d = dims;
            let mut seq = Vec::with_capacity(branch.len());
            for (oi, op) in branch.iter().enumerate() {
                let (node, nd) = match op {
                    Op::Conv(spec) => self.conv(&format!("{name}/branch{bi}/conv{oi}"), d, spec)?,
                    Op::MaxPool(spec) => Self::pool(d, spec)?,
                };
                seq.push(node);
                d = nd;
            }
            out = Some(match out {
                None => d,
                Some(o) => [o[0], o[1], o[2], o[3] + d[3]],
            });
            nodes.push(seq);
        }
        let out = out.ok_or_else(|| Error::InvalidConfig(format!("{name}: no branches")))?;
        Ok((Node::Concat { branches: nodes }, out))
    }

    fn block(&mut self, dims: [usize; 4], block: &BlockSpec, nodes: &mut Vec<Node>) -> Result<[usize; 4]> {
        let mut d = dims;
        if let Some(p) = &block.pre_pool {
            let (n, nd) = Self::pool(d, p)?;
            nodes.push(n);
            d = nd;
        }
        if !block.branches.is_empty() {
            let (n, nd) = self.branches(&block.name, d, &block.branches)?;
            nodes.push(n);
            d = nd;
        }
        if let Some(p) = &block.post_pool {
            let (n, nd) = Self::pool(d, p)?;
            nodes.push(n);
            d = nd;
        }
        for sub in &block.sub_blocks {
            let (n, nd) = self.branches(&format!("{}/{}", block.name, sub.name), d, &sub.branches)?;
            nodes.push(n);
            d = nd;
        }
        Ok(d)
    }
}

impl Backbone {
    /// Build with Glorot-uniform weights and zero biases.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, "backbone");
        Self::build(config, Some(&mut rng))
    }

    /// Build with every parameter set to zero.
    pub fn zeroed(config: BackboneConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: BackboneConfig, rng: Option<&mut rand_chacha::ChaCha8Rng>) -> Result<Self> {
        let plan = shape_plan(&config)?;
        let mut params = ParamSet::default();
        let mut builder = Builder {
            params: &mut params,
            rng,
        };
        let mut nodes = Vec::new();
        let mut block_ends = Vec::new();
        let mut dims = config.input_shape;
        for block in &config.blocks {
            dims = builder.block(dims, block, &mut nodes)?;
            block_ends.push(nodes.len());
        }
        debug_assert_eq!(plan.embedding_dim, dims[3]);
        Ok(Backbone {
            config,
            params,
            nodes,
            block_ends,
            plan,
        })
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    pub fn embedding_dim(&self) -> usize {
        self.plan.embedding_dim
    }

    fn check_input(&self, x: &Volume) -> Result<()> {
        if x.dims != self.config.input_shape {
            return Err(Error::shape(self.config.input_shape, x.dims));
        }
        Ok(())
    }

    /// Inference-mode forward pass.
    pub fn forward(&self, x: &Volume) -> Result<BackboneOutput> {
        self.check_input(x)?;
        let mut v = x.clone();
        let mut block_dims = Vec::with_capacity(self.block_ends.len());
        let mut start = 0;
        for &end in &self.block_ends {
            for node in &self.nodes[start..end] {
                v = self.run(node, v)?;
            }
            block_dims.push(v.dims);
            start = end;
        }
        let embedding = global_average(&v);
        Ok(BackboneOutput {
            embedding: EmbeddingVector::raw(embedding),
            block_dims,
        })
    }

    fn run(&self, node: &Node, x: Volume) -> Result<Volume> {
        Ok(match node {
            Node::Conv { weight, bias, geom, relu } => {
                let mut y = conv3d_forward(&x, &self.params.params[*weight].data, &self.params.params[*bias].data, geom);
                if *relu {
                    y.data.iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
                }
                finite(&y, "convolution")?;
                y
            }
            Node::Pool { geom } => maxpool_forward(&x, geom).0,
            Node::Concat { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                for branch in branches {
                    let mut v = x.clone();
                    for n in branch {
                        v = self.run(n, v)?;
                    }
                    outs.push(v);
                }
                concat_channels(&outs)
            }
        })
    }

    /// Training-mode forward pass keeping what the backward pass needs.
    pub fn forward_train(&self, x: &Volume) -> Result<(EmbeddingVector, Tape)> {
        self.check_input(x)?;
        let mut v = x.clone();
        let mut caches = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (out, cache) = self.run_train(node, v)?;
            caches.push(cache);
            v = out;
        }
        let embedding = global_average(&v);
        Ok((
            EmbeddingVector::raw(embedding),
            Tape {
                caches,
                final_dims: v.dims,
            },
        ))
    }

    fn run_train(&self, node: &Node, x: Volume) -> Result<(Volume, Cache)> {
        Ok(match node {
            Node::Conv { weight, bias, geom, relu } => {
                let mut y = conv3d_forward(&x, &self.params.params[*weight].data, &self.params.params[*bias].data, geom);
                if *relu {
                    y.data.iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
                }
                finite(&y, "convolution")?;
                let output = relu.then(|| y.clone());
                (y, Cache::Conv { input: x, output })
            }
            Node::Pool { geom } => {
                let (y, argmax) = maxpool_forward(&x, geom);
                (
                    y,
                    Cache::Pool {
                        argmax,
                        in_dims: x.dims,
                    },
                )
            }
            Node::Concat { branches } => {
                let mut outs = Vec::with_capacity(branches.len());
                let mut caches = Vec::with_capacity(branches.len());
                for branch in branches {
                    let mut v = x.clone();
                    let mut bc = Vec::with_capacity(branch.len());
                    for n in branch {
                        let (o, c) = self.run_train(n, v)?;
                        bc.push(c);
                        v = o;
                    }
                    outs.push(v);
                    caches.push(bc);
                }
                let channels = outs.iter().map(|o| o.dims[3]).collect();
                (
                    concat_channels(&outs),
                    Cache::Concat {
                        branches: caches,
                        channels,
                    },
                )
            }
        })
    }

    /// Parameter gradients of a scalar loss given `d loss / d embedding`.
    pub fn backward(&self, tape: &Tape, grad_embedding: &[f64]) -> Result<Grads> {
        if grad_embedding.len() != tape.final_dims[3] {
            return Err(Error::shape(tape.final_dims[3], grad_embedding.len()));
        }
        let mut grads = self.params.zeros_like();
        let positions = tape.final_dims[0] * tape.final_dims[1] * tape.final_dims[2];
        let mut dy = Volume::zeros(tape.final_dims);
        for row in dy.data.chunks_exact_mut(tape.final_dims[3]) {
            for (d, g) in row.iter_mut().zip(grad_embedding) {
                *d = g / positions as f64;
            }
        }
        for (node, cache) in self.nodes.iter().zip(&tape.caches).rev() {
            dy = self.back(node, cache, dy, &mut grads);
        }
        Ok(grads)
    }

    fn back(&self, node: &Node, cache: &Cache, mut dy: Volume, grads: &mut Grads) -> Volume {
        match (node, cache) {
            (Node::Conv { weight, bias, geom, .. }, Cache::Conv { input, output }) => {
                if let Some(out) = output {
                    for (d, o) in dy.data.iter_mut().zip(&out.data) {
                        if *o <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let (dw, db) = two_mut(&mut grads.0, *weight, *bias);
                conv3d_backward(input, &self.params.params[*weight].data, geom, &dy, dw, db)
            }
            (Node::Pool { .. }, Cache::Pool { argmax, in_dims }) => maxpool_backward(&dy, argmax, *in_dims),
            (Node::Concat { branches }, Cache::Concat { branches: caches, channels }) => {
                let parts = split_channels(&dy, channels);
                let mut dx: Option<Volume> = None;
                for ((branch, bc), part) in branches.iter().zip(caches).zip(parts) {
                    let mut g = part;
                    for (n, c) in branch.iter().zip(bc).rev() {
                        g = self.back(n, c, g, grads);
                    }
                    match dx.as_mut() {
                        None => dx = Some(g),
                        Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    }
                }
                dx.expect("concat has branches")
            }
            _ => unreachable!("tape does not match network"),
        }
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

fn finite(v: &Volume, what: &str) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn global_average(v: &Volume) -> Vec<f64> {
    let c = v.channels();
    let n = v.positions() as f64;
    let mut out = vec![0.0; c];
    for row in v.data.chunks_exact(c) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

fn concat_channels(parts: &[Volume]) -> Volume {
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let base = parts[0].dims;
    let total: usize = parts.iter().map(|p| p.dims[3]).sum();
    let dims = [base[0], base[1], base[2], total];
    let positions = base[0] * base[1] * base[2];
    let mut data = Vec::with_capacity(positions * total);
    for pos in 0..positions {
        for p in parts {
            let c = p.dims[3];
            data.extend_from_slice(&p.data[pos * c..(pos + 1) * c]);
        }
    }
    Volume { dims, data }
}

fn split_channels(v: &Volume, channels: &[usize]) -> Vec<Volume> {
    if channels.len() == 1 {
        return vec![v.clone()];
    }
    let [t, h, w, total] = v.dims;
    let positions = t * h * w;
    let mut outs: Vec<Volume> = channels
        .iter()
        .map(|&c| Volume {
            dims: [t, h, w, c],
            data: Vec::with_capacity(positions * c),
        })
        .collect();
    for row in v.data.chunks_exact(total) {
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.data.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    outs
}
