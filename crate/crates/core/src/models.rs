//! Generator G, reconstruction net R and the classifier used for both the
//! substitute S and the locally trained targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::{map_exec, Exec};
use crate::autodiff::{Graph, Tensor, Var};
use crate::nn::{init_weights, Bound, Conv2d, ConvTranspose2d, EmbeddingTable, Linear, NnError, ParamSet};
use crate::scalar::Scalar;

/// `[channels, height, width]` of one sample.
pub type ImageShape = [usize; 3];

/// Std of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

pub fn image_len(shape: ImageShape) -> usize {
    shape.iter().product()
}

/// How the class label reaches the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Per-block scale and shift from the label embedding.
    #[default]
    Modulated,
    /// One-hot label concatenated to the noise, no modulation.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Width N of both the noise and the label embedding.
    pub noise_dim: usize,
    pub blocks: usize,
    /// Feature channels of every hidden block.
    pub channels: usize,
    /// Spatial size of the first feature map; doubled by each upsampling
    /// block until the image size is reached.
    pub start_size: usize,
    #[serde(default)]
    pub conditioning: Conditioning,
    /// Std of the truncated-normal weight init.
    #[serde(default = "init_std")]
    pub init_std: f64,
}

fn init_std() -> f64 {
    INIT_STD
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            noise_dim: 128,
            blocks: 5,
            channels: 32,
            start_size: 4,
            conditioning: Conditioning::Modulated,
            init_std: INIT_STD,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

fn generator_blocks(cfg: &GeneratorConfig, image: ImageShape) -> Result<Vec<BlockSpec>, NnError> {
    let [c, h, w] = image;
    if h != w {
        return Err(NnError::Config(format!("generator needs square images, got {h}x{w}")));
    }
    if cfg.blocks == 0 || cfg.channels == 0 || cfg.noise_dim == 0 || cfg.start_size == 0 {
        return Err(NnError::Config("generator blocks, channels, noise_dim and start_size must be positive".into()));
    }
    let mut size = cfg.start_size;
    let mut ups = 0;
    while size < h {
        size *= 2;
        ups += 1;
    }
    if size != h || ups > cfg.blocks {
        return Err(NnError::Config(format!(
            "start_size {} cannot reach image size {h} by doubling within {} blocks",
            cfg.start_size, cfg.blocks
        )));
    }
    Ok((0..cfg.blocks)
        .map(|t| {
            let out_c = if t + 1 == cfg.blocks { c } else { cfg.channels };
            let (kernel, stride, pad) = if t < ups {
                (4, 2, 1)
            } else if h == 1 {
                (1, 1, 0)
            } else {
                (3, 1, 1)
            };
            BlockSpec {
                in_c: cfg.channels,
                out_c,
                kernel,
                stride,
                pad,
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
struct GenBlock {
    deconv: ConvTranspose2d,
    mu: Option<Linear>,
    sigma: Option<Linear>,
}

/// Label-conditioned generator; every output pixel lies in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GeneratorNet<T: Scalar> {
    pub config: GeneratorConfig,
    pub classes: usize,
    pub image: ImageShape,
    pub params: ParamSet<T>,
    embedding: EmbeddingTable,
    input: Linear,
    blocks: Vec<GenBlock>,
}

impl<T: Scalar> GeneratorNet<T> {
    /// Builds the layer stack with all parameters zero.
    pub fn zeroed(config: GeneratorConfig, classes: usize, image: ImageShape) -> Result<Self, NnError> {
        let specs = generator_blocks(&config, image)?;
        let n = config.noise_dim;
        let mut params = ParamSet::new();
        let embedding = EmbeddingTable::new(&mut params, "embed", classes, n)?;
        let in_dim = match config.conditioning {
            Conditioning::Modulated => n,
            Conditioning::Concat => n + classes,
        };
        let s = config.start_size;
        let input = Linear::new(&mut params, "input", in_dim, config.channels * s * s)?;
        let mut blocks = Vec::with_capacity(specs.len());
        for (t, b) in specs.iter().enumerate() {
            let deconv = ConvTranspose2d::new(&mut params, &format!("block{t}.deconv"), b.in_c, b.out_c, b.kernel, b.stride, b.pad)?;
            let (mu, sigma) = match config.conditioning {
                Conditioning::Modulated => (
                    Some(Linear::new(&mut params, &format!("block{t}.mu"), n, b.out_c)?),
                    Some(Linear::new(&mut params, &format!("block{t}.sigma"), n, b.out_c)?),
                ),
                Conditioning::Concat => (None, None),
            };
            blocks.push(GenBlock { deconv, mu, sigma });
        }
        Ok(GeneratorNet {
            config,
            classes,
            image,
            params,
            embedding,
            input,
            blocks,
        })
    }

    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, classes: usize, image: ImageShape, rng: &mut R) -> Result<Self, NnError> {
        let mut g = Self::zeroed(config, classes, image)?;
        let std = g.config.init_std;
        init_weights(&mut g.params, std, rng);
        Ok(g)
    }

    pub fn noise_dim(&self) -> usize {
        self.config.noise_dim
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.params.bind(graph, trainable)
    }

    pub fn embedding(&self) -> &EmbeddingTable {
        &self.embedding
    }

    /// `(μ, σ)` of block `t` for each label, both `[b, C_t]`, with
    /// `σ = 1 + tanh(head)` so zero heads give the identity.
    pub fn modulation_params<'g>(&self, p: &Bound<'g, T>, labels: &[usize], t: usize) -> Result<(Var<'g, T>, Var<'g, T>), NnError> {
        let block = self
            .blocks
            .get(t)
            .ok_or_else(|| NnError::Config(format!("block {t} out of range for {} blocks", self.blocks.len())))?;
        let (Some(mu), Some(sigma)) = (&block.mu, &block.sigma) else {
            return Err(NnError::Config("generator has no modulation heads".into()));
        };
        let e = self.embedding.lookup_batch(p, labels)?;
        Ok((mu.forward(p, e)?, sigma.forward(p, e)?.tanh().add_scalar(1.0)))
    }

    /// Images `[b, c, h, w]` for noise `z: [b, N]` and one label per row.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>, NnError> {
        self.run(p, z, labels, true)
    }

    /// The same stack with every modulation skipped.
    pub fn forward_unmodulated<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>, NnError> {
        self.run(p, z, labels, false)
    }

    fn run<'g>(&self, p: &Bound<'g, T>, z: Var<'g, T>, labels: &[usize], modulate: bool) -> Result<Var<'g, T>, NnError> {
        let n = self.config.noise_dim;
        let b = labels.len();
        if z.shape() != [b, n] {
            return Err(NnError::ShapeMismatch {
                name: "noise".into(),
                expected: vec![b, n],
                got: z.shape(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&i| i >= self.classes) {
            return Err(NnError::ClassOutOfRange {
                class: bad,
                classes: self.classes,
            });
        }
        let head_in = match self.config.conditioning {
            Conditioning::Modulated => z,
            Conditioning::Concat => {
                let onehot = z.graph().constant(&one_hot(labels, self.classes));
                Var::concat(&[z, onehot], 1)?
            }
        };
        let s = self.config.start_size;
        let mut x = self.input.forward(p, head_in)?.relu().reshape(&[b, self.config.channels, s, s])?;
        let last = self.blocks.len() - 1;
        for (t, block) in self.blocks.iter().enumerate() {
            let mut y = block.deconv.forward(p, x)?;
            if modulate && block.mu.is_some() {
                let (mu, sigma) = self.modulation_params(p, labels, t)?;
                y = y.channel_affine(sigma, mu)?;
            }
            x = if t == last { y.sigmoid() } else { y.relu() };
        }
        Ok(x)
    }

    /// Forward pass without gradient tracking.
    pub fn generate(&self, z: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>, NnError> {
        let g = Graph::new();
        let p = self.bind(&g, false);
        Ok(self.forward(&p, g.constant(z), labels)?.value())
    }
}

/// `[b, classes]` indicator rows.
pub fn one_hot<T: Scalar>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut v = vec![T::zero(); labels.len() * classes];
    for (r, &c) in labels.iter().enumerate() {
        v[r * classes + c] = T::one();
    }
    Tensor::new(&[labels.len(), classes], v).expect("nonempty batch")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructorConfig {
    pub hidden: usize,
}

impl Default for ReconstructorConfig {
    fn default() -> Self {
        ReconstructorConfig { hidden: 128 }
    }
}

/// Recovers `(z, e)` from a generated image via a shared trunk.
#[derive(Debug, Clone)]
pub struct ReconstructorNet<T: Scalar> {
    pub config: ReconstructorConfig,
    pub image: ImageShape,
    pub width: usize,
    pub params: ParamSet<T>,
    trunk: Linear,
    z_head: Linear,
    e_head: Linear,
}

impl<T: Scalar> ReconstructorNet<T> {
    pub fn zeroed(config: ReconstructorConfig, image: ImageShape, width: usize) -> Result<Self, NnError> {
        if config.hidden == 0 || width == 0 {
            return Err(NnError::Config("reconstructor hidden and width must be positive".into()));
        }
        let mut params = ParamSet::new();
        let trunk = Linear::new(&mut params, "trunk", image_len(image), config.hidden)?;
        let z_head = Linear::new(&mut params, "z_head", config.hidden, width)?;
        let e_head = Linear::new(&mut params, "e_head", config.hidden, width)?;
        Ok(ReconstructorNet {
            config,
            image,
            width,
            params,
            trunk,
            z_head,
            e_head,
        })
    }

    pub fn new<R: Rng + ?Sized>(config: ReconstructorConfig, image: ImageShape, width: usize, rng: &mut R) -> Result<Self, NnError> {
        let mut r = Self::zeroed(config, image, width)?;
        init_weights(&mut r.params, INIT_STD, rng);
        Ok(r)
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.params.bind(graph, trainable)
    }

    /// `(z_r, e_r)`, each `[b, N]`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>), NnError> {
        let flat = flatten_images(x, self.image)?;
        let h = self.trunk.forward(p, flat)?.relu();
        Ok((self.z_head.forward(p, h)?, self.e_head.forward(p, h)?))
    }
}

fn flatten_images<'g, T: Scalar>(x: Var<'g, T>, image: ImageShape) -> Result<Var<'g, T>, NnError> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != image {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(&image);
        return Err(NnError::ShapeMismatch {
            name: "image batch".into(),
            expected,
            got: shape,
        });
    }
    Ok(x.flatten()?)
}

/// Classifier body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    /// Fully connected hidden layers with relu.
    Mlp { hidden: Vec<usize> },
    /// 3×3 stride-2 convolutions with relu, then a linear read-out.
    Conv { channels: Vec<usize> },
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig::Conv { channels: vec![16, 32, 32] }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Mlp(Vec<Linear>),
    Conv(Vec<Conv2d>),
}

/// Image classifier producing `[b, M]` logits.
#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar> {
    pub config: ClassifierConfig,
    pub image: ImageShape,
    pub classes: usize,
    pub params: ParamSet<T>,
    body: Body,
    head: Linear,
}

/// The substitute S shares the classifier architecture.
pub type SubstituteNet<T> = Classifier<T>;

impl<T: Scalar> Classifier<T> {
    pub fn zeroed(config: ClassifierConfig, image: ImageShape, classes: usize) -> Result<Self, NnError> {
        if classes < 2 {
            return Err(NnError::Config(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        let mut params = ParamSet::new();
        let (body, feat) = match &config {
            ClassifierConfig::Mlp { hidden } => {
                let mut layers = Vec::new();
                let mut d = image_len(image);
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(Linear::new(&mut params, &format!("fc{i}"), d, h)?);
                    d = h;
                }
                (Body::Mlp(layers), d)
            }
            ClassifierConfig::Conv { channels } => {
                let [mut c, mut h, mut w] = image;
                let mut layers = Vec::new();
                for (i, &o) in channels.iter().enumerate() {
                    layers.push(Conv2d::new(&mut params, &format!("conv{i}"), c, o, 3, 2, 1)?);
                    c = o;
                    h = (h - 1) / 2 + 1;
                    w = (w - 1) / 2 + 1;
                }
                (Body::Conv(layers), c * h * w)
            }
        };
        let head = Linear::new(&mut params, "head", feat, classes)?;
        Ok(Classifier {
            config,
            image,
            classes,
            params,
            body,
            head,
        })
    }

    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, image: ImageShape, classes: usize, rng: &mut R) -> Result<Self, NnError> {
        let mut c = Self::zeroed(config, image, classes)?;
        init_weights(&mut c.params, INIT_STD, rng);
        Ok(c)
    }

    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        self.params.bind(graph, trainable)
    }

    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>, NnError> {
        let flat = match &self.body {
            Body::Mlp(layers) => {
                let mut h = flatten_images(x, self.image)?;
                for l in layers {
                    h = l.forward(p, h)?.relu();
                }
                h
            }
            Body::Conv(layers) => {
                flatten_images(x, self.image)?;
                let mut h = x;
                for l in layers {
                    h = l.forward(p, h)?.relu();
                }
                h.flatten()?
            }
        };
        self.head.forward(p, flat)
    }

    /// Logits for a batch without gradient tracking. Rows are split into
    /// chunks that may run concurrently; every row's arithmetic is the same
    /// either way, so results do not depend on `exec`.
    pub fn logits(&self, x: &Tensor<T>, exec: Exec) -> Result<Tensor<T>, NnError> {
        const CHUNK: usize = 64;
        let rows = x.rows();
        if rows <= CHUNK || exec == Exec::Sequential {
            return self.logits_one(x);
        }
        let chunks: Vec<Vec<usize>> = (0..rows).step_by(CHUNK).map(|s| (s..(s + CHUNK).min(rows)).collect()).collect();
        let parts = map_exec(exec, chunks, |idx| self.logits_one(&x.select_rows(&idx)?));
        let parts = parts.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?)
    }

    fn logits_one(&self, x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let g = Graph::new();
        let p = self.bind(&g, false);
        Ok(self.forward(&p, g.constant(x))?.value())
    }

    pub fn probabilities(&self, x: &Tensor<T>, exec: Exec) -> Result<Tensor<T>, NnError> {
        let g = Graph::new();
        Ok(g.constant(&self.logits(x, exec)?).softmax().value())
    }

    pub fn predict(&self, x: &Tensor<T>, exec: Exec) -> Result<Vec<usize>, NnError> {
        Ok(self.logits(x, exec)?.argmax_rows())
    }
}
