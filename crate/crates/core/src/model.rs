//! The denoiser: a strided convolutional image encoder, sinusoidal timestep
//! embedding, and the cross-modality decoder (vertex blocks with farthest
//! point sampling, attention blocks, feature blocks). An optional
//! depth branch adds a pooled feature at the lift stage.
//!
//! Parameters live in a [`ParamStore`] under dotted path names; forward
//! passes bind them into a fresh [`Graph`] each call.

use std::io::{BufRead, Write};

use crate::diffusion::{Denoiser, Objective, VertexSet};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, nearest_assignment, Point};
use crate::kv::KeyValues;
use crate::numcore::{Graph, ParamStore, Rng, Tensor, Var};

pub const MODEL_MAGIC: &str = "DMM1";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vertex_count: usize,
    pub width: usize,
    pub heads: usize,
    pub image_size: usize,
    pub num_blocks: usize,
    pub timesteps: usize,
    /// When false the decoder starts from a learned query set at a pinned
    /// timestep instead of a noisy vertex set.
    pub use_diffusion: bool,
    /// When false the vertex blocks are replaced by plain self-attention over
    /// the lifted vertices (no image cross-attention, no sampling).
    pub cross_modality: bool,
    /// Learned positional table added to image tokens.
    pub image_pos_embed: bool,
    /// Learned per-vertex tables: one added to the lifted vertex features,
    /// one to the head output. Without them the decoder is
    /// permutation-equivariant and cannot tell vertices apart once noise has
    /// erased their positions.
    pub vertex_embed: bool,
    /// Whether the head outputs `x̂_0` or `ε̂`.
    pub objective: Objective,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vertex_count: 320,
            width: 64,
            heads: 4,
            image_size: 32,
            num_blocks: 3,
            timesteps: crate::diffusion::DEFAULT_TIMESTEPS,
            use_diffusion: true,
            cross_modality: true,
            image_pos_embed: false,
            vertex_embed: true,
            objective: Objective::CleanSignal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vertex_count < 16 {
            return fail(format!("vertex_count must be at least 16, got {}", self.vertex_count));
        }
        if self.width < 4 || self.width % 4 != 0 {
            return fail(format!("width must be a positive multiple of 4, got {}", self.width));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return fail(format!("image_size must be a multiple of 8, got {}", self.image_size));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be positive".into());
        }
        if self.timesteps < 2 {
            return fail(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        Ok(())
    }

    /// Image tokens per side after the encoder.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("vertex_count", self.vertex_count);
        kv.set("width", self.width);
        kv.set("heads", self.heads);
        kv.set("image_size", self.image_size);
        kv.set("num_blocks", self.num_blocks);
        kv.set("timesteps", self.timesteps);
        kv.set("use_diffusion", self.use_diffusion);
        kv.set("cross_modality", self.cross_modality);
        kv.set("image_pos_embed", self.image_pos_embed);
        kv.set("vertex_embed", self.vertex_embed);
        kv.set("objective", self.objective);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            vertex_count: kv.get_or("vertex_count", d.vertex_count)?,
            width: kv.get_or("width", d.width)?,
            heads: kv.get_or("heads", d.heads)?,
            image_size: kv.get_or("image_size", d.image_size)?,
            num_blocks: kv.get_or("num_blocks", d.num_blocks)?,
            timesteps: kv.get_or("timesteps", d.timesteps)?,
            use_diffusion: kv.get_or("use_diffusion", d.use_diffusion)?,
            cross_modality: kv.get_or("cross_modality", d.cross_modality)?,
            image_pos_embed: kv.get_or("image_pos_embed", d.image_pos_embed)?,
            vertex_embed: kv.get_or("vertex_embed", d.vertex_embed)?,
            objective: kv.get_or("objective", d.objective)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `E_t[2i] = sin(t / 10000^(2i/C))`, `E_t[2i+1] = cos(t / 10000^(2i/C))`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding width must be even, got {dim}")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let a = t as f64 / freq;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    Tensor::new(&[dim], out)
}

// ---------------------------------------------------------------------------
// Parameter construction

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<()> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.normal()).collect();
        self.store.insert(name, Tensor::new(shape, data)?)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<()> {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.normal(format!("{name}.w"), &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())?;
        self.zeros(format!("{name}.b"), &[fan_out])
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.zeros(format!("{name}.w"), &[fan_in, fan_out])?;
        self.zeros(format!("{name}.b"), &[fan_out])
    }

    fn layer_norm(&mut self, name: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{name}.g"), Tensor::ones(&[c]))?;
        self.zeros(format!("{name}.b"), &[c])
    }

    fn attention(&mut self, name: &str, c: usize, heads: usize) -> Result<()> {
        let d = c / heads;
        let std = 1.0 / (c as f64).sqrt();
        for h in 0..heads {
            for k in ["q", "k", "v"] {
                self.normal(format!("{name}.{k}{h}"), &[c, d], std)?;
            }
            self.normal(format!("{name}.o{h}"), &[d, c], std)?;
        }
        self.zeros(format!("{name}.bo"), &[c])
    }
}

/// Adds the parameters of one attention block under `prefix`.
pub fn init_attention_block(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    heads: usize,
    rng: &mut Rng,
) -> Result<()> {
    let mut init = Init { store, rng };
    init.layer_norm(&format!("{prefix}.ln1"), width)?;
    init.attention(&format!("{prefix}.sa"), width, heads)?;
    init.linear(&format!("{prefix}.eg"), width, width)?;
    init.layer_norm(&format!("{prefix}.ln2"), width)?;
    init.layer_norm(&format!("{prefix}.lnkv"), width)?;
    init.attention(&format!("{prefix}.ca"), width, heads)
}

pub fn init_feature_block(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut Rng) -> Result<()> {
    let mut init = Init { store, rng };
    init.layer_norm(&format!("{prefix}.ln"), width)?;
    init.linear(&format!("{prefix}.fc1"), width, 4 * width)?;
    init.linear(&format!("{prefix}.fc2"), 4 * width, width)
}

pub fn init_vertex_block(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    heads: usize,
    rng: &mut Rng,
) -> Result<()> {
    init_attention_block(store, &format!("{prefix}.att1"), width, heads, rng)?;
    init_attention_block(store, &format!("{prefix}.att2"), width, heads, rng)?;
    let mut init = Init { store, rng };
    for up in ["up1", "up0"] {
        init.linear(&format!("{prefix}.{up}.fc1"), width, width)?;
        init.linear(&format!("{prefix}.{up}.fc2"), width, width)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Layers

fn param<'g>(g: &'g Graph, p: &ParamStore, name: String) -> Result<Var<'g>> {
    g.param(p, &name)
}

pub fn linear<'g>(g: &'g Graph, p: &ParamStore, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    let w = param(g, p, format!("{name}.w"))?;
    let b = param(g, p, format!("{name}.b"))?;
    x.matmul(w)?.add(b)
}

fn layer_norm<'g>(g: &'g Graph, p: &ParamStore, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    x.layer_norm(param(g, p, format!("{name}.g"))?, param(g, p, format!("{name}.b"))?)
}

fn mlp<'g>(g: &'g Graph, p: &ParamStore, name: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = linear(g, p, &format!("{name}.fc1"), x)?.gelu();
    linear(g, p, &format!("{name}.fc2"), h)
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
/// Per-head projections are stored separately; summing the per-head output
/// projections equals projecting the concatenated heads.
pub fn multi_head_attention<'g>(
    g: &'g Graph,
    p: &ParamStore,
    name: &str,
    heads: usize,
    queries: Var<'g>,
    context: Var<'g>,
) -> Result<Var<'g>> {
    let c = queries.shape()[1];
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out: Option<Var<'g>> = None;
    for h in 0..heads {
        let q = queries.matmul(param(g, p, format!("{name}.q{h}"))?)?;
        let k = context.matmul(param(g, p, format!("{name}.k{h}"))?)?;
        let v = context.matmul(param(g, p, format!("{name}.v{h}"))?)?;
        let weights = q.matmul(k.t()?)?.scale(scale).softmax_rows();
        let head = weights.matmul(v)?.matmul(param(g, p, format!("{name}.o{h}"))?)?;
        out = Some(match out {
            Some(acc) => acc.add(head)?,
            None => head,
        });
    }
    out.expect("at least one head")
        .add(param(g, p, format!("{name}.bo"))?)
}

/// Self-attention over `x` plus a projection of the global embedding, then
/// cross-attention from the result to the image tokens. Both sub-blocks are
/// pre-normalized and residual.
pub fn attention_block<'g>(
    g: &'g Graph,
    p: &ParamStore,
    prefix: &str,
    heads: usize,
    x: Var<'g>,
    global: Var<'g>,
    tokens: Var<'g>,
) -> Result<Var<'g>> {
    let c = x.shape()[1];
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let sa = multi_head_attention(g, p, &format!("{prefix}.sa"), heads, h, h)?;
    let eg = linear(g, p, &format!("{prefix}.eg"), global)?.reshape(&[c])?;
    let y = x.add(sa)?.add(eg)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), y)?;
    let kv = layer_norm(g, p, &format!("{prefix}.lnkv"), tokens)?;
    let ca = multi_head_attention(g, p, &format!("{prefix}.ca"), heads, h, kv)?;
    y.add(ca)
}

/// Position-wise `C → 4C → C` MLP with pre-normalization and residual.
pub fn feature_block<'g>(g: &'g Graph, p: &ParamStore, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = layer_norm(g, p, &format!("{prefix}.ln"), x)?;
    x.add(mlp(g, p, prefix, h)?)
}

/// Sampling hierarchy of one vertex set: `n → ⌊n/4⌋ → ⌊n/16⌋`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Levels {
    /// Level-1 points as indices into level 0.
    pub select1: Vec<usize>,
    /// Level-2 points as indices into level 1.
    pub select2: Vec<usize>,
    /// For each level-1 point, its nearest level-2 point (row of level 2).
    pub up1: Vec<usize>,
    /// For each level-0 point, its nearest level-1 point (row of level 1).
    pub up0: Vec<usize>,
}

impl Levels {
    pub fn new(coords: &[Point]) -> Result<Self> {
        let n = coords.len();
        if n < 16 {
            return Err(Error::Config(format!("vertex block needs at least 16 points, got {n}")));
        }
        let select1 = farthest_point_sample(coords, n / 4)?;
        let coords1: Vec<Point> = select1.iter().map(|&i| coords[i]).collect();
        let select2 = farthest_point_sample(&coords1, n / 16)?;
        Ok(Self {
            up1: nearest_assignment(&coords1, &select2),
            up0: nearest_assignment(coords, &select1),
            select1,
            select2,
        })
    }
}

/// U-shaped block: two sampling stages each followed by attention, then two
/// upsampling stages (nearest-point copy and MLP) with additive laterals.
pub fn vertex_block<'g>(
    g: &'g Graph,
    p: &ParamStore,
    prefix: &str,
    heads: usize,
    x: Var<'g>,
    levels: &Levels,
    global: Var<'g>,
    tokens: Var<'g>,
) -> Result<Var<'g>> {
    let a1 = attention_block(
        g,
        p,
        &format!("{prefix}.att1"),
        heads,
        x.gather_rows(&levels.select1)?,
        global,
        tokens,
    )?;
    let a2 = attention_block(
        g,
        p,
        &format!("{prefix}.att2"),
        heads,
        a1.gather_rows(&levels.select2)?,
        global,
        tokens,
    )?;
    let u1 = mlp(g, p, &format!("{prefix}.up1"), a2.gather_rows(&levels.up1)?)?.add(a1)?;
    let u0 = mlp(g, p, &format!("{prefix}.up0"), u1.gather_rows(&levels.up0)?)?;
    u0.add(x)
}

/// 3×3 convolution with padding 1 over an `h×h` grid stored as `[h², cin]`,
/// via an im2col gather. Returns the activation and output side.
fn conv3x3<'g>(
    g: &'g Graph,
    p: &ParamStore,
    name: &str,
    x: Var<'g>,
    h: usize,
    stride: usize,
) -> Result<(Var<'g>, usize)> {
    let cin = x.shape()[1];
    let ho = (h - 1) / stride + 1;
    let mut index = Vec::with_capacity(ho * ho * 9);
    for oy in 0..ho {
        for ox in 0..ho {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    let ix = (ox * stride + kx) as isize - 1;
                    let inside = (0..h as isize).contains(&iy) && (0..h as isize).contains(&ix);
                    index.push(inside.then(|| iy as usize * h + ix as usize));
                }
            }
        }
    }
    let cols = x.gather_rows_padded(&index)?.reshape(&[ho * ho, 9 * cin])?;
    Ok((linear(g, p, name, cols)?.gelu(), ho))
}

/// Encoder output: `[G², C]` token grid and `[1, C]` embedding.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'g> {
    pub feature_map: Var<'g>,
    pub embedding: Var<'g>,
}

/// Image (and optional depth) condition, each `[H², 1]` in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub image: Tensor,
    pub depth: Option<Tensor>,
}

/// Encoder and depth outputs precomputed as plain values, for sampling loops
/// that call the decoder repeatedly on one image.
#[derive(Clone, Debug)]
pub struct CachedCondition {
    pub feature_map: Tensor,
    pub embedding: Tensor,
    pub depth_feature: Option<Tensor>,
}

const ENCODER_STRIDES: [usize; 4] = [1, 2, 2, 2];
const DEPTH_STRIDES: [usize; 3] = [2, 2, 2];
const QUERY_NAME: &str = "dec.query";
const VERTEX_EMBED_NAME: &str = "dec.vpos";
const VERTEX_EMBED_STD: f64 = 0.5;
const VERTEX_BIAS_NAME: &str = "dec.vbias";

/// Model configuration, parameters and training progress.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    trained_steps: u64,
    depth_branch: bool,
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let mut store = ParamStore::new();
        {
            let mut init = Init { store: &mut store, rng: &mut *rng };
            let mut cin = 1;
            for (k, cout) in [c / 4, c / 2, c, c].into_iter().enumerate() {
                init.linear(&format!("enc.s{k}"), 9 * cin, cout)?;
                cin = cout;
            }
            init.linear("enc.embed", c, c)?;
            if cfg.image_pos_embed {
                init.normal("enc.pos.w".into(), &[cfg.grid() * cfg.grid(), c], 0.02)?;
            }
            init.linear("dec.lift", 3, c)?;
            if cfg.vertex_embed {
                init.normal(VERTEX_EMBED_NAME.into(), &[cfg.vertex_count, c], VERTEX_EMBED_STD)?;
            }
            if !cfg.use_diffusion {
                init.normal(QUERY_NAME.into(), &[cfg.vertex_count, 3], 1.0)?;
            }
        }
        for b in 0..cfg.num_blocks {
            if cfg.cross_modality {
                init_vertex_block(&mut store, &format!("dec.b{b}.vb"), c, cfg.heads, rng)?;
            } else {
                let mut init = Init { store: &mut store, rng: &mut *rng };
                init.layer_norm(&format!("dec.b{b}.sa.ln"), c)?;
                init.attention(&format!("dec.b{b}.sa"), c, cfg.heads)?;
            }
            init_feature_block(&mut store, &format!("dec.b{b}.fb"), c, rng)?;
        }
        let mut init = Init { store: &mut store, rng };
        init.layer_norm("dec.ln_out", c)?;
        init.linear("dec.head", c, 3)?;
        if cfg.vertex_embed {
            init.zeros(VERTEX_BIAS_NAME.into(), &[cfg.vertex_count, 3])?;
        }
        Ok(Self {
            cfg,
            params: store,
            trained_steps: 0,
            depth_branch: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn trained_steps(&self) -> u64 {
        self.trained_steps
    }

    pub fn record_steps(&mut self, n: u64) {
        self.trained_steps += n;
    }

    /// Sets the per-vertex output bias, typically to a mean training shape so
    /// the decoder starts from a plausible mesh.
    pub fn set_output_bias(&mut self, shape: &[Point]) -> Result<()> {
        if !self.cfg.vertex_embed {
            return Err(Error::State("model has no per-vertex output bias".into()));
        }
        if shape.len() != self.cfg.vertex_count {
            return Err(Error::shape("set_output_bias", &[shape.len(), 3], &[self.cfg.vertex_count, 3]));
        }
        self.params.set_value(VERTEX_BIAS_NAME, Tensor::from_points(shape))
    }

    pub fn has_depth_branch(&self) -> bool {
        self.depth_branch
    }

    /// Adds the depth branch. Its output projection is all zeros, so the
    /// augmented model initially computes exactly what the base model does.
    /// Requires a trained base model.
    pub fn attach_depth_branch(&mut self, rng: &mut Rng) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::State("the depth branch is attached after base training".into()));
        }
        if self.depth_branch {
            return Err(Error::State("depth branch already attached".into()));
        }
        let c = self.cfg.width;
        let mut init = Init { store: &mut self.params, rng };
        let mut cin = 1;
        for (k, cout) in [c / 4, c / 2, c].into_iter().enumerate() {
            init.linear(&format!("depth.s{k}"), 9 * cin, cout)?;
            cin = cout;
        }
        init.zero_linear("depth.out", c, c)?;
        self.depth_branch = true;
        Ok(())
    }

    fn check_grid(&self, x: &Tensor, what: &str) -> Result<()> {
        let h = self.cfg.image_size;
        if x.shape() != [h * h, 1] {
            return Err(Error::Shape {
                op: if what == "image" { "encode_image" } else { "depth_branch" },
                lhs: x.shape().to_vec(),
                rhs: vec![h * h, 1],
            });
        }
        Ok(())
    }

    pub fn encode<'g>(&self, g: &'g Graph, image: &Tensor) -> Result<EncoderOutput<'g>> {
        self.check_grid(image, "image")?;
        let p = &self.params;
        let mut x = g.constant(image.clone());
        let mut h = self.cfg.image_size;
        for (k, &s) in ENCODER_STRIDES.iter().enumerate() {
            (x, h) = conv3x3(g, p, &format!("enc.s{k}"), x, h, s)?;
        }
        let pool = g.constant(Tensor::full(&[1, h * h], 1.0 / (h * h) as f64));
        let embedding = linear(g, p, "enc.embed", pool.matmul(x)?)?;
        Ok(EncoderOutput {
            feature_map: x,
            embedding,
        })
    }

    /// Pooled depth feature `[C]`, or `None` without a depth branch.
    pub fn depth_feature<'g>(&self, g: &'g Graph, depth: &Tensor) -> Result<Option<Var<'g>>> {
        if !self.depth_branch {
            return Ok(None);
        }
        self.check_grid(depth, "depth")?;
        let p = &self.params;
        let mut x = g.constant(depth.clone());
        let mut h = self.cfg.image_size;
        for (k, &s) in DEPTH_STRIDES.iter().enumerate() {
            (x, h) = conv3x3(g, p, &format!("depth.s{k}"), x, h, s)?;
        }
        let pool = g.constant(Tensor::full(&[1, h * h], 1.0 / (h * h) as f64));
        let f = linear(g, p, "depth.out", pool.matmul(x)?)?;
        Ok(Some(f.reshape(&[self.cfg.width])?))
    }

    /// `E_g = I_E + E_t` as a `[1, C]` row.
    pub fn global_embedding<'g>(&self, g: &'g Graph, image_embedding: Var<'g>, t: usize) -> Result<Var<'g>> {
        let c = self.cfg.width;
        let et = g.constant(sinusoidal_embed(t, c)?.reshape(&[1, c])?);
        image_embedding.add(et)
    }

    /// Timestep used in place of `t` when diffusion is disabled.
    pub fn pinned_timestep(&self) -> usize {
        self.cfg.timesteps
    }

    /// Current learned query set (only without diffusion).
    pub fn query(&self) -> Result<Vec<Point>> {
        self.params.value(QUERY_NAME)?.to_points()
    }

    /// Predicts `x̂_0` (`[N, 3]`) from `coords` at timestep `t`.
    ///
    /// `coords` are the noisy input `x_t`; without diffusion pass `None` and
    /// the learned query set is used.
    pub fn decode<'g>(
        &self,
        g: &'g Graph,
        coords: Option<&[Point]>,
        t: usize,
        image_embedding: Var<'g>,
        feature_map: Var<'g>,
        depth_feature: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        let p = &self.params;
        let cfg = &self.cfg;
        let (x_in, points): (Var<'g>, Vec<Point>) = match coords {
            Some(pts) if cfg.use_diffusion => (g.constant(Tensor::from_points(pts)), pts.to_vec()),
            None if !cfg.use_diffusion => (g.param(p, QUERY_NAME)?, self.query()?),
            _ => {
                return Err(Error::State(format!(
                    "decoder input does not match use_diffusion={}",
                    cfg.use_diffusion
                )))
            }
        };
        if points.len() != cfg.vertex_count {
            return Err(Error::shape("decode", &[points.len(), 3], &[cfg.vertex_count, 3]));
        }
        let global = self.global_embedding(g, image_embedding, t)?;
        let mut tokens = feature_map;
        if cfg.image_pos_embed {
            tokens = tokens.add(g.param(p, "enc.pos.w")?)?;
        }
        let mut x = linear(g, p, "dec.lift", x_in)?;
        if cfg.vertex_embed {
            x = x.add(g.param(p, VERTEX_EMBED_NAME)?)?;
        }
        if let Some(d) = depth_feature {
            x = x.add(d)?;
        }
        if cfg.cross_modality {
            let levels = Levels::new(&points)?;
            for b in 0..cfg.num_blocks {
                x = vertex_block(g, p, &format!("dec.b{b}.vb"), cfg.heads, x, &levels, global, tokens)?;
                x = feature_block(g, p, &format!("dec.b{b}.fb"), x)?;
            }
        } else {
            x = x.add(global.reshape(&[cfg.width])?)?;
            for b in 0..cfg.num_blocks {
                let h = layer_norm(g, p, &format!("dec.b{b}.sa.ln"), x)?;
                x = x.add(multi_head_attention(g, p, &format!("dec.b{b}.sa"), cfg.heads, h, h)?)?;
                x = feature_block(g, p, &format!("dec.b{b}.fb"), x)?;
            }
        }
        let x = layer_norm(g, p, "dec.ln_out", x)?;
        let out = linear(g, p, "dec.head", x)?;
        if cfg.vertex_embed {
            return out.add(g.param(p, VERTEX_BIAS_NAME)?);
        }
        Ok(out)
    }

    /// Encoder, optional depth branch and decoder in one graph.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        cond: &Conditioning,
        coords: Option<&[Point]>,
        t: usize,
    ) -> Result<Var<'g>> {
        let enc = self.encode(g, &cond.image)?;
        let depth = match (&cond.depth, self.depth_branch) {
            (Some(d), true) => self.depth_feature(g, d)?,
            (None, true) => return Err(Error::State("model has a depth branch but no depth was given".into())),
            _ => None,
        };
        self.decode(g, coords, t, enc.embedding, enc.feature_map, depth)
    }

    pub fn cache_condition(&self, cond: &Conditioning) -> Result<CachedCondition> {
        let g = Graph::new();
        let enc = self.encode(&g, &cond.image)?;
        let depth_feature = match (&cond.depth, self.depth_branch) {
            (Some(d), true) => self.depth_feature(&g, d)?.map(|v| (*v.value()).clone()),
            (None, true) => return Err(Error::State("model has a depth branch but no depth was given".into())),
            _ => None,
        };
        Ok(CachedCondition {
            feature_map: (*enc.feature_map.value()).clone(),
            embedding: (*enc.embedding.value()).clone(),
            depth_feature,
        })
    }

    /// Decoder only, against precomputed conditioning.
    pub fn predict_cached(&self, cache: &CachedCondition, coords: Option<&[Point]>, t: usize) -> Result<Vec<Point>> {
        let g = Graph::new();
        let out = self.decode(
            &g,
            coords,
            t,
            g.constant(cache.embedding.clone()),
            g.constant(cache.feature_map.clone()),
            cache.depth_feature.clone().map(|d| g.constant(d)),
        )?;
        let v = out.value();
        if !v.is_finite() {
            return Err(Error::NonFinite { index: 0, step: self.trained_steps });
        }
        v.to_points()
    }

    pub fn denoiser<'m>(&'m self, cond: &Conditioning) -> Result<ModelDenoiser<'m>> {
        Ok(ModelDenoiser {
            model: self,
            cache: self.cache_condition(cond)?,
        })
    }

    // -----------------------------------------------------------------------
    // Serialization: magic line, key=value header, `end`, parameter block,
    // optimizer block.

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut kv = self.cfg.to_kv();
        kv.set("trained_steps", self.trained_steps);
        kv.set("depth_branch", self.depth_branch);
        write!(w, "{MODEL_MAGIC}\n{}end\n", kv.to_text())?;
        self.params.write_to(w)?;
        self.params.write_optimizer_state(w)
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let bad = |m: &str| Error::format("<model>", m);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MODEL_MAGIC {
            return Err(bad("not a model file (bad magic)"));
        }
        let mut header = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            if line.trim_end() == "end" {
                break;
            }
            header.push_str(&line);
        }
        let kv = KeyValues::parse(&header)?;
        let cfg = ModelConfig::from_kv(&kv)?;
        let trained_steps = kv.require("trained_steps")?;
        let depth_branch = kv.require("depth_branch")?;
        let mut params = ParamStore::read_from(r)?;
        params.read_optimizer_state(r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after optimizer state"));
        }
        // Validate the parameter set against a freshly built model.
        let mut reference = Model::new(cfg.clone(), &mut Rng::new(0))?;
        if depth_branch {
            reference.trained_steps = 1;
            reference.attach_depth_branch(&mut Rng::new(0))?;
        }
        for (name, p) in reference.params.iter() {
            let got = params.value(name).map_err(|_| bad(&format!("missing parameter `{name}`")))?;
            if got.shape() != p.value.shape() {
                return Err(bad(&format!("parameter `{name}` has shape {:?}", got.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(bad("unexpected extra parameters"));
        }
        Ok(Self {
            cfg,
            params,
            trained_steps,
            depth_branch,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })
    }
}

/// A model bound to one image, usable by the sampling loop.
pub struct ModelDenoiser<'m> {
    model: &'m Model,
    cache: CachedCondition,
}

impl ModelDenoiser<'_> {
    /// One forward pass from the learned query set (no-diffusion variant).
    pub fn predict_direct(&self) -> Result<Vec<Point>> {
        self.model
            .predict_cached(&self.cache, None, self.model.pinned_timestep())
    }
}

impl Denoiser for ModelDenoiser<'_> {
    fn predict_x0(&self, x_t: &VertexSet) -> Result<Vec<Point>> {
        self.model.predict_cached(&self.cache, Some(&x_t.coords), x_t.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, grad_check_params};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vertex_count: 20,
            width: 16,
            heads: 2,
            image_size: 8,
            num_blocks: 1,
            timesteps: 50,
            ..ModelConfig::default()
        }
    }

    fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str, keep_ln: bool) {
        let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
        for n in names {
            if keep_ln && n.ends_with(".g") {
                continue;
            }
            let shape = store.value(&n).unwrap().shape().to_vec();
            store.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn sinusoid_cases() {
        let e0 = sinusoidal_embed(0, 8).unwrap();
        assert_eq!(e0.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(sinusoidal_embed(3, 7).is_err());
        let all: Vec<Tensor> = (0..=1000).map(|t| sinusoidal_embed(t, 64).unwrap()).collect();
        for (i, a) in all.iter().enumerate() {
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn encoder_shapes_and_distinct_outputs() {
        let cfg = ModelConfig::default();
        let model = Model::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let g = Graph::new();
        let zero = Tensor::zeros(&[32 * 32, 1]);
        let enc = model.encode(&g, &zero).unwrap();
        assert_eq!(enc.feature_map.shape(), vec![16, 64]);
        assert_eq!(enc.embedding.shape(), vec![1, 64]);
        assert!(enc.embedding.value().is_finite());
        let again = model.encode(&g, &zero).unwrap();
        assert_eq!(*again.embedding.value(), *enc.embedding.value());
        let mut img = zero.clone();
        img.data_mut()[100..300].iter_mut().for_each(|v| *v = 1.0);
        let other = model.encode(&g, &img).unwrap();
        assert_ne!(*other.feature_map.value(), *enc.feature_map.value());
        assert!(model.encode(&g, &Tensor::zeros(&[16 * 16, 1])).is_err());
    }

    fn block_store(c: usize, heads: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(2);
        init_attention_block(&mut store, "a", c, heads, &mut rng).unwrap();
        init_feature_block(&mut store, "f", c, &mut rng).unwrap();
        init_vertex_block(&mut store, "v", c, heads, &mut rng).unwrap();
        store
    }

    #[test]
    fn single_token_self_attention() {
        let c = 8;
        let store = block_store(c, 2);
        let mut rng = Rng::new(3);
        let g = Graph::new();
        let x = g.constant(random(&mut rng, &[1, c], -1.0, 1.0));
        let h = x.layer_norm(g.param(&store, "a.ln1.g").unwrap(), g.param(&store, "a.ln1.b").unwrap()).unwrap();
        let out = multi_head_attention(&g, &store, "a.sa", 2, h, h).unwrap();
        // With one key the attention weights are 1, leaving Σ_h (x W_V,h) W_O,h + b.
        let mut expect = store.value("a.sa.bo").unwrap().clone();
        let hv = h.value();
        for head in 0..2 {
            let v = hv.matmul(store.value(&format!("a.sa.v{head}")).unwrap()).unwrap();
            let o = v.matmul(store.value(&format!("a.sa.o{head}")).unwrap()).unwrap();
            expect.add_assign(&o.reshape(&[c]).unwrap());
        }
        for (a, b) in out.value().data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_ignores_token_order() {
        let c = 8;
        let store = block_store(c, 2);
        let mut rng = Rng::new(4);
        let x = random(&mut rng, &[5, c], -1.0, 1.0);
        let eg = random(&mut rng, &[1, c], -1.0, 1.0);
        let tokens = random(&mut rng, &[9, c], -1.0, 1.0);
        let perm = [4, 7, 0, 2, 8, 1, 5, 3, 6];
        let run = |tok: Tensor| {
            let g = Graph::new();
            let out = attention_block(&g, &store, "a", 2, g.constant(x.clone()), g.constant(eg.clone()), g.constant(tok))
                .unwrap();
            (*out.value()).clone()
        };
        let base = run(tokens.clone());
        let g = Graph::new();
        let permuted = (*g.constant(tokens).gather_rows(&perm).unwrap().value()).clone();
        let other = run(permuted);
        for (a, b) in base.data().iter().zip(other.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradient_checks() {
        let c = 8;
        let mut store = block_store(c, 2);
        let mut rng = Rng::new(5);
        // Random nonzero biases so every path is exercised.
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let mut v = store.value(&n).unwrap().clone();
            v.data_mut().iter_mut().for_each(|x| *x += 0.1 * rng.range(-1.0, 1.0));
            store.set_value(&n, v).unwrap();
        }
        let x = random(&mut rng, &[5, c], -2.0, 2.0);
        let eg = random(&mut rng, &[1, c], -2.0, 2.0);
        let tokens = random(&mut rng, &[4, c], -2.0, 2.0);
        let target = random(&mut rng, &[5, c], -1.0, 1.0);
        let err = grad_check(
            |g, v| attention_block(g, &store, "a", 2, v[0], v[1], v[2])?.mse(g.constant(target.clone())),
            &[x.clone(), eg.clone(), tokens.clone()],
        )
        .unwrap();
        assert!(err < 1e-5, "attention input grad error {err}");
        let err = grad_check_params(&store, 6, &mut Rng::new(6), |g, p| {
            attention_block(g, p, "a", 2, g.constant(x.clone()), g.constant(eg.clone()), g.constant(tokens.clone()))?
                .mse(g.constant(target.clone()))
        })
        .unwrap();
        assert!(err < 1e-5, "attention param grad error {err}");
        let err = grad_check(|g, v| feature_block(g, &store, "f", v[0])?.mse(g.constant(target.clone())), &[x.clone()])
            .unwrap();
        assert!(err < 1e-5, "feature block grad error {err}");
    }

    #[test]
    fn feature_block_is_positionwise_and_residual() {
        let c = 8;
        let mut store = block_store(c, 2);
        let mut rng = Rng::new(7);
        let row = random(&mut rng, &[1, c], -1.0, 1.0);
        let mut data = row.data().to_vec();
        data.extend_from_slice(row.data());
        let x = Tensor::new(&[2, c], data).unwrap();
        let g = Graph::new();
        let out = feature_block(&g, &store, "f", g.constant(x.clone())).unwrap().value();
        assert_eq!(out.row(0), out.row(1));
        zero_prefix(&mut store, "f.fc", false);
        let g = Graph::new();
        let out = feature_block(&g, &store, "f", g.constant(x.clone())).unwrap().value();
        assert_eq!(*out, x);
    }

    #[test]
    fn vertex_block_boundaries_identity_and_occupancy() {
        let c = 8;
        let mut store = block_store(c, 2);
        let mut rng = Rng::new(8);
        let coords = rng.normal_points(16);
        let levels = Levels::new(&coords).unwrap();
        assert_eq!((levels.select1.len(), levels.select2.len()), (4, 1));
        assert!(Levels::new(&coords[..15]).is_err());
        let x = random(&mut rng, &[16, c], -1.0, 1.0);
        let eg = random(&mut rng, &[1, c], -1.0, 1.0);
        let tokens = random(&mut rng, &[4, c], -1.0, 1.0);

        let g = Graph::new();
        let xv = g.variable(x.clone());
        let out = vertex_block(&g, &store, "v", 2, xv, &levels, g.constant(eg.clone()), g.constant(tokens.clone())).unwrap();
        assert_eq!(out.shape(), vec![16, c]);
        let w = g.constant(random(&mut rng, &[16, c], -1.0, 1.0));
        let loss = out.mul(w).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(xv).unwrap();
        for i in 0..16 {
            assert!(gx.row(i).iter().any(|v| *v != 0.0), "row {i} has no gradient");
        }

        for sub in ["v.att1", "v.att2", "v.up"] {
            zero_prefix(&mut store, sub, true);
        }
        let g = Graph::new();
        let out = vertex_block(&g, &store, "v", 2, g.constant(x.clone()), &levels, g.constant(eg), g.constant(tokens)).unwrap();
        assert_eq!(*out.value(), x);
    }

    fn conditioning(rng: &mut Rng, h: usize) -> Conditioning {
        Conditioning {
            image: random(rng, &[h * h, 1], 0.0, 1.0),
            depth: Some(random(rng, &[h * h, 1], 0.0, 1.0)),
        }
    }

    #[test]
    fn decode_shapes_and_zero_head() {
        let cfg = small_cfg();
        let mut model = Model::new(cfg.clone(), &mut Rng::new(9)).unwrap();
        let mut rng = Rng::new(10);
        let cond = conditioning(&mut rng, 8);
        let x = rng.normal_points(20);
        let g = Graph::new();
        let out = model.forward(&g, &cond, Some(&x), 7).unwrap();
        assert_eq!(out.shape(), vec![20, 3]);
        zero_prefix(model.params_mut(), "dec.head", false);
        let g = Graph::new();
        let out = model.forward(&g, &cond, Some(&x), 7).unwrap();
        assert!(out.value().data().iter().all(|v| *v == 0.0));
        assert!(model.forward(&g, &cond, None, 7).is_err());
    }

    #[test]
    fn variants_build_and_run() {
        let mut rng = Rng::new(11);
        let cond = conditioning(&mut rng, 8);
        for (diff, cross) in [(true, false), (false, true), (false, false)] {
            let cfg = ModelConfig { use_diffusion: diff, cross_modality: cross, image_pos_embed: true, ..small_cfg() };
            let model = Model::new(cfg, &mut Rng::new(12)).unwrap();
            let g = Graph::new();
            let x = rng.normal_points(20);
            let coords = diff.then_some(x.as_slice());
            let out = model.forward(&g, &cond, coords, 50).unwrap();
            assert_eq!(out.shape(), vec![20, 3]);
        }
    }

    #[test]
    fn depth_branch_requires_training_and_starts_inert() {
        let mut model = Model::new(small_cfg(), &mut Rng::new(13)).unwrap();
        assert!(matches!(model.attach_depth_branch(&mut Rng::new(1)), Err(Error::State(_))));
        model.record_steps(1);
        let base = model.clone();
        model.attach_depth_branch(&mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(14);
        for _ in 0..5 {
            let cond = conditioning(&mut rng, 8);
            let x = rng.normal_points(20);
            let a = base.forward(&Graph::new(), &cond, Some(&x), 3).unwrap().value();
            let b = model.forward(&Graph::new(), &cond, Some(&x), 3).unwrap().value();
            assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn decode_commutes_with_vertex_permutation() {
        let cfg = ModelConfig { vertex_embed: false, ..small_cfg() };
        let model = Model::new(cfg, &mut Rng::new(15)).unwrap();
        let mut rng = Rng::new(16);
        let cond = conditioning(&mut rng, 8);
        let x = rng.normal_points(20);
        // Keep index 0 fixed so the sampling seed is the same point.
        let mut perm: Vec<usize> = (0..20).collect();
        perm[1..].reverse();
        perm.swap(3, 11);
        let xp: Vec<Point> = perm.iter().map(|&i| x[i]).collect();
        let a = model.forward(&Graph::new(), &cond, Some(&x), 5).unwrap().value();
        let b = model.forward(&Graph::new(), &cond, Some(&xp), 5).unwrap().value();
        for (row, &src) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((b.at(row, k) - a.at(src, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn model_file_round_trip() {
        let mut model = Model::new(small_cfg(), &mut Rng::new(17)).unwrap();
        model.record_steps(3);
        model.attach_depth_branch(&mut Rng::new(2)).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        let back = Model::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.trained_steps(), 3);
        assert!(back.has_depth_branch());
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 10);
        assert!(Model::read_from(&mut truncated.as_slice()).is_err());
    }
}
