use std::path::{Path, PathBuf};

use super::config::ModelConfig;
use super::dge::{dge_block, DgeLayerOutput, FeatureMap, Selection};
use super::layers::{linear, BlockParams, Linear, Norm};
use crate::error::{DgeError, Result};
use crate::router::{partition, RegionPartition};
use crate::tensor::checkpoint;
use crate::tensor::{normal_tensor, Element, Graph, ParamId, ParamStore, RngStream, Tensor, Var};

/// Routing policy for a whole forward pass.
pub enum Routing<'a, T> {
    Infer,
    Train(&'a mut RngStream),
    /// One R×K noise tensor per layer.
    Noise(&'a [Tensor<T>]),
    /// One θ vector per layer.
    Forced(&'a [Vec<usize>]),
}

/// Observes, and optionally replaces, the spatial tokens entering each layer.
pub trait LayerInputHook<T> {
    fn visit(&mut self, layer: usize, spatial: &Tensor<T>, height: usize, width: usize) -> Result<Option<Tensor<T>>>;
}

/// Parameter handles bound to one graph.
pub struct BoundModel {
    embed: Linear<Var>,
    pos: Var,
    cls: Var,
    blocks: Vec<BlockParams<Var>>,
    norm: Norm<Var>,
    head: Linear<Var>,
}

pub struct ForwardOutput<T> {
    /// 1×classes.
    pub logits: Var,
    pub layers: Vec<DgeLayerOutput<T>>,
}

/// ViT-style classifier built from stacked DGE blocks.
#[derive(Debug, Clone)]
pub struct VitModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    embed: Linear<ParamId>,
    pos: ParamId,
    cls: ParamId,
    blocks: Vec<BlockParams<ParamId>>,
    norm: Norm<ParamId>,
    head: Linear<ParamId>,
    part: RegionPartition,
}

impl<T: Element> VitModel<T> {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder;
        let (c, grid) = (enc.channels, config.grid());
        let set = enc.granularity_set()?;
        let part = partition(grid, grid, c, &set)?;
        let mut params = ParamStore::new();
        let xavier = |a: usize, b: usize| (2.0 / (a + b) as f64).sqrt();

        let pd = config.patch_dim();
        let embed = Linear {
            weight: params.insert("embed.weight", normal_tensor(rng, &[pd, c], xavier(pd, c)))?,
            bias: params.insert("embed.bias", Tensor::zeros([1, c]))?,
        };
        let pos = params.insert("pos", normal_tensor(rng, &[config.tokens(), c], 0.02))?;
        let cls = params.insert("cls", normal_tensor(rng, &[1, c], 0.02))?;
        let mut blocks = Vec::with_capacity(enc.layers);
        for l in 0..enc.layers {
            blocks.push(BlockParams::init(&mut params, &format!("blocks.{l}"), c, enc.hidden(), set.k(), rng)?);
        }
        let norm = Norm {
            gain: params.insert("norm.gain", Tensor::ones([1, c]))?,
            bias: params.insert("norm.bias", Tensor::zeros([1, c]))?,
        };
        let nc = config.num_classes;
        let head = Linear {
            weight: params.insert("head.weight", normal_tensor(rng, &[c, nc], xavier(c, nc)))?,
            bias: params.insert("head.bias", Tensor::zeros([1, nc]))?,
        };
        Ok(Self {
            config,
            params,
            embed,
            pos,
            cls,
            blocks,
            norm,
            head,
            part,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn partition(&self) -> &RegionPartition {
        &self.part
    }

    pub fn block_params(&self, layer: usize) -> &BlockParams<ParamId> {
        &self.blocks[layer]
    }

    /// Pixels per image: channels × size × size.
    pub fn input_len(&self) -> usize {
        self.config.in_channels * self.config.image_size * self.config.image_size
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundModel {
        let p = &self.params;
        BoundModel {
            embed: Linear {
                weight: g.param(p, self.embed.weight),
                bias: g.param(p, self.embed.bias),
            },
            pos: g.param(p, self.pos),
            cls: g.param(p, self.cls),
            blocks: self.blocks.iter().map(|b| b.bind(g, p)).collect(),
            norm: Norm {
                gain: g.param(p, self.norm.gain),
                bias: g.param(p, self.norm.bias),
            },
            head: Linear {
                weight: g.param(p, self.head.weight),
                bias: g.param(p, self.head.bias),
            },
        }
    }

    /// Rearranges a `[channels, size, size]` image into one row per patch,
    /// each row ordered channel, then patch row, then patch column.
    pub fn patchify(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let (ch, size, ps) = (cfg.in_channels, cfg.image_size, cfg.patch_size);
        if image.numel() != self.input_len() {
            return Err(DgeError::Dimension {
                op: "patchify",
                lhs: image.shape().to_vec(),
                rhs: vec![ch, size, size],
            });
        }
        let grid = cfg.grid();
        let src = image.data();
        let mut out = Vec::with_capacity(src.len());
        for ty in 0..grid {
            for tx in 0..grid {
                for c in 0..ch {
                    for dy in 0..ps {
                        let row = (c * size + ty * ps + dy) * size + tx * ps;
                        out.extend_from_slice(&src[row..row + ps]);
                    }
                }
            }
        }
        Tensor::new([grid * grid, cfg.patch_dim()], out)
    }

    /// Tokens entering the first layer: `[cls; patches·W + b + pos]`.
    pub fn embed(&self, g: &mut Graph<T>, bound: &BoundModel, image: &Tensor<T>) -> Result<FeatureMap> {
        let patches = g.leaf(self.patchify(image)?);
        let e = linear(g, patches, &bound.embed)?;
        let e = g.add(e, bound.pos)?;
        let tokens = g.concat_rows(&[bound.cls, e])?;
        let grid = self.config.grid();
        Ok(FeatureMap {
            tokens,
            height: grid,
            width: grid,
            extra: self.config.extra_tokens(),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundModel,
        image: &Tensor<T>,
        mut routing: Routing<'_, T>,
        mut hook: Option<&mut dyn LayerInputHook<T>>,
    ) -> Result<ForwardOutput<T>> {
        let enc = &self.config.encoder;
        let mut x = self.embed(g, bound, image)?;
        let mut layers = Vec::with_capacity(enc.layers);
        for (l, p) in bound.blocks.iter().enumerate() {
            if let Some(h) = hook.as_deref_mut() {
                let spatial = x.spatial(g)?;
                let value = g.value(spatial).clone();
                if let Some(rep) = h.visit(l, &value, x.height, x.width)? {
                    if rep.shape() != value.shape() {
                        return Err(DgeError::Dimension {
                            op: "layer_input_hook",
                            lhs: rep.shape().to_vec(),
                            rhs: value.shape().to_vec(),
                        });
                    }
                    let extras = x.extras(g)?;
                    let rep = g.leaf(rep);
                    x.tokens = match extras {
                        Some(e) => g.concat_rows(&[e, rep])?,
                        None => rep,
                    };
                }
            }
            let selection = match &mut routing {
                Routing::Infer => Selection::Infer,
                Routing::Train(rng) => Selection::Train { rng, tau: enc.tau },
                Routing::Noise(noise) => Selection::Noise {
                    noise: layer_entry(noise, l)?.clone(),
                    tau: enc.tau,
                },
                Routing::Forced(theta) => Selection::Forced(layer_entry(theta, l)?.clone()),
            };
            let out = dge_block(g, x, p, enc.heads, &self.part, selection)?;
            x = out.y;
            layers.push(out);
        }
        let cls = g.slice_rows(x.tokens, 0, 1)?;
        let cls = g.layer_norm(cls, bound.norm.gain, bound.norm.bias)?;
        let logits = linear(g, cls, &bound.head)?;
        Ok(ForwardOutput { logits, layers })
    }

    /// Inference-mode logits and per-layer outputs for one image.
    pub fn classify(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Vec<DgeLayerOutput<T>>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, image, Routing::Infer, None)?;
        Ok((g.value(out.logits).clone(), out.layers))
    }

    /// Writes `<stem>.json` and `<stem>.bin`; returns the manifest path.
    pub fn save(&self, stem: &Path) -> Result<PathBuf> {
        checkpoint::save(stem, &self.params, serde_json::to_value(&self.config)?)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = checkpoint::read_manifest(manifest_path)?;
        let config: ModelConfig = serde_json::from_value(manifest.architecture.clone())
            .map_err(|e| DgeError::Checkpoint(format!("bad architecture record: {e}")))?;
        let mut model = Self::new(config, &mut RngStream::new(0, 0))?;
        let tensors = checkpoint::read_tensors(manifest_path, &manifest)?;
        checkpoint::restore(&mut model.params, tensors)?;
        Ok(model)
    }
}

fn layer_entry<X>(items: &[X], layer: usize) -> Result<&X> {
    items
        .get(layer)
        .ok_or_else(|| DgeError::Usage(format!("no routing given for layer {layer}")))
}
