//! Building blocks of a PainViT stage.
//!
//! Every layer stores [`ParamId`]s into a [`ParamStore`] and runs inside a
//! [`Pass`], which binds the store's tensors into a fresh [`Graph`].

use rand::Rng;

use super::params::{Builder, NormId, ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{BatchMoments, Graph, Mode, NormStats, Tensor, Var};

/// Behaviour switches for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    pub mode: Mode,
    /// Bind parameters as differentiable leaves.
    pub track_grads: bool,
    pub residual: bool,
    pub bn_eps: f64,
    /// Record post-softmax attention matrices.
    pub capture_attention: bool,
}

impl PassOptions {
    pub fn eval() -> Self {
        PassOptions {
            mode: Mode::Eval,
            track_grads: false,
            residual: true,
            bn_eps: 1e-5,
            capture_attention: false,
        }
    }

    pub fn train() -> Self {
        PassOptions {
            mode: Mode::Train,
            track_grads: true,
            ..PassOptions::eval()
        }
    }
}

/// Post-softmax attention of one head, `[B, N, N]`.
#[derive(Clone, Debug)]
pub struct AttentionCapture {
    pub stage: usize,
    pub depth: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// Per-parameter gradients detached from a [`Pass`].
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    /// Adds the gradients into the `.grad` buffers of `store`.
    pub fn accumulate(&self, store: &mut ParamStore) -> Result<()> {
        for (p, g) in store.params_mut().iter_mut().zip(&self.0) {
            if let Some(g) = g {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// One forward evaluation over a [`ParamStore`].
pub struct Pass<'s> {
    store: &'s ParamStore,
    pub graph: Graph,
    bound: Vec<Var>,
    opts: PassOptions,
    moments: Vec<(NormId, BatchMoments)>,
    attention: Vec<AttentionCapture>,
    location: (usize, usize),
}

impl<'s> Pass<'s> {
    pub fn new(store: &'s ParamStore, opts: PassOptions) -> Self {
        let mut graph = Graph::new();
        let bound = store
            .params()
            .iter()
            .map(|p| {
                if opts.track_grads {
                    graph.leaf(&p.tensor)
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        Pass {
            store,
            graph,
            bound,
            opts,
            moments: Vec::new(),
            attention: Vec::new(),
            location: (0, 0),
        }
    }

    pub fn options(&self) -> &PassOptions {
        &self.opts
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.bound[id.0]
    }

    /// Graph variable bound to the `i`-th parameter of the store.
    pub fn bound(&self) -> &[Var] {
        &self.bound
    }

    pub fn moments(&self) -> &[(NormId, BatchMoments)] {
        &self.moments
    }

    pub fn take_moments(&mut self) -> Vec<(NormId, BatchMoments)> {
        std::mem::take(&mut self.moments)
    }

    pub fn attention(&self) -> &[AttentionCapture] {
        &self.attention
    }

    pub(crate) fn set_location(&mut self, stage: usize, depth: usize) {
        self.location = (stage, depth);
    }

    /// Reverse-mode gradient of `loss` for every parameter of the store, in
    /// store order. `None` marks parameters the loss does not depend on.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.graph.backward(loss)?;
        Ok(ParamGrads(
            self.bound.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec)).collect(),
        ))
    }

    /// `[B,N,d]` tokens to a `[B,d,r,c]` grid.
    pub fn tokens_to_grid(&mut self, x: Var, grid: (usize, usize)) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return dim_err(format!(
                "token tensor {s:?} does not match a {}x{} grid",
                grid.0, grid.1
            ));
        }
        let t = self.graph.permute(x, &[0, 2, 1])?;
        self.graph.reshape(t, &[s[0], s[2], grid.0, grid.1])
    }

    /// `[B,d,r,c]` grid to `[B,r·c,d]` tokens.
    pub fn grid_to_tokens(&mut self, x: Var) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let t = self.graph.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        self.graph.permute(t, &[0, 2, 1])
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        if self.opts.residual {
            self.graph.add(x, update)
        } else {
            Ok(update)
        }
    }
}

/// Batch norm over channel axis 1.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: NormId,
}

impl Norm {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, prefix: &str, channels: usize) -> Self {
        Norm {
            gamma: b.ones(format!("{prefix}.weight"), &[channels]),
            beta: b.zeros(format!("{prefix}.bias"), &[channels]),
            stats: b.store.add_norm(prefix.to_string(), channels),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let (g, b) = (pass.param(self.gamma), pass.param(self.beta));
        let eps = pass.opts.bn_eps;
        match pass.opts.mode {
            Mode::Train => {
                let (y, m) = pass.graph.batch_norm(x, g, b, eps, NormStats::Batch)?;
                pass.moments.push((self.stats, m.expect("batch moments")));
                Ok(y)
            }
            Mode::Eval => {
                let st = pass.store.norm(self.stats);
                if !st.initialized {
                    return Err(Error::State(format!(
                        "batch norm {} has no running statistics; run a train-mode pass first",
                        st.name
                    )));
                }
                let (y, _) = pass.graph.batch_norm(
                    x,
                    g,
                    b,
                    eps,
                    NormStats::Running {
                        mean: &st.mean,
                        var: &st.var,
                    },
                )?;
                Ok(y)
            }
        }
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, prefix: &str, inp: usize, out: usize) -> Self {
        Dense {
            weight: b.weight(format!("{prefix}.weight"), &[inp, out], inp),
            bias: Some(b.zeros(format!("{prefix}.bias"), &[out])),
        }
    }

    pub(crate) fn build_unbiased<R: Rng>(b: &mut Builder<'_, R>, prefix: &str, inp: usize, out: usize) -> Self {
        Dense {
            weight: b.weight(format!("{prefix}.weight"), &[inp, out], inp),
            bias: None,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let w = pass.param(self.weight);
        let b = self.bias.map(|b| pass.param(b));
        pass.graph.linear(x, w, b)
    }
}

/// 3×3 depthwise convolution with per-channel bias, padding 1.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl DwConv {
    pub(crate) fn build<R: Rng>(b: &mut Builder<'_, R>, prefix: &str, channels: usize, stride: usize) -> Self {
        DwConv {
            kernel: b.weight(format!("{prefix}.weight"), &[channels, 3, 3], 9),
            bias: b.zeros(format!("{prefix}.bias"), &[channels]),
            stride,
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        let (k, b) = (pass.param(self.kernel), pass.param(self.bias));
        pass.graph.depthwise_conv2d(x, k, Some(b), self.stride, 1)
    }
}

/// Depthwise conv + batch norm on the token grid, then an FFN, each wrapped
/// in a residual connection.
#[derive(Clone, Debug)]
pub struct TokenMixer {
    pub dw: DwConv,
    pub norm: Norm,
    pub fc1: Dense,
    pub fc2: Dense,
}

impl TokenMixer {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        ffn_ratio: usize,
    ) -> Self {
        let mut b = Builder { store, rng };
        TokenMixer {
            dw: DwConv::build(&mut b, &format!("{prefix}.dw"), dim, 1),
            norm: Norm::build(&mut b, &format!("{prefix}.bn"), dim),
            fc1: Dense::build(&mut b, &format!("{prefix}.ffn.fc1"), dim, dim * ffn_ratio),
            fc2: Dense::build(&mut b, &format!("{prefix}.ffn.fc2"), dim * ffn_ratio, dim),
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var, grid: (usize, usize)) -> Result<Var> {
        let g = pass.tokens_to_grid(x, grid)?;
        let y = self.dw.forward(pass, g)?;
        let z = self.norm.forward(pass, y)?;
        let z = pass.grid_to_tokens(z)?;
        let x1 = pass.residual(x, z)?;
        let h = self.fc1.forward(pass, x1)?;
        let h = pass.graph.relu(h);
        let f = self.fc2.forward(pass, h)?;
        pass.residual(x1, f)
    }
}

/// Q/K/V projections of one attention head plus the depthwise conv on Q.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub q_dw: DwConv,
    pub norm: Option<Norm>,
}

/// Multi-head attention where head `j` sees channel segment `j` of the input
/// plus the output of head `j-1`.
#[derive(Clone, Debug)]
pub struct CascadedAttention {
    pub heads: Vec<AttentionHead>,
    pub proj: Dense,
    pub dim: usize,
}

impl CascadedAttention {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
        qkv_norm: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        let s = dim / heads;
        let mut b = Builder { store, rng };
        let heads = (0..heads)
            .map(|j| {
                let p = format!("{prefix}.heads.{j}");
                AttentionHead {
                    q: Dense::build(&mut b, &format!("{p}.q"), s, s),
                    // A key bias only shifts each score row by a constant, which
                    // softmax ignores.
                    k: Dense::build_unbiased(&mut b, &format!("{p}.k"), s, s),
                    v: Dense::build(&mut b, &format!("{p}.v"), s, s),
                    q_dw: DwConv::build(&mut b, &format!("{p}.q_dw"), s, 1),
                    norm: qkv_norm.then(|| Norm::build(&mut b, &format!("{p}.norm"), s)),
                }
            })
            .collect();
        Ok(CascadedAttention {
            heads,
            proj: Dense::build(&mut b, &format!("{prefix}.proj"), dim, dim),
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.len()
    }

    pub fn forward(&self, pass: &mut Pass<'_>, x: Var, grid: (usize, usize)) -> Result<Var> {
        let shape = pass.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim || shape[1] != grid.0 * grid.1 {
            return dim_err(format!(
                "attention expects [B,{},{}] tokens, got {shape:?}",
                grid.0 * grid.1,
                self.dim
            ));
        }
        let s = self.head_dim();
        let scale = 1.0 / (s as f64).sqrt();
        let mut prev: Option<Var> = None;
        let mut outs = Vec::with_capacity(self.heads.len());
        for (j, head) in self.heads.iter().enumerate() {
            let seg = pass.graph.narrow(x, 2, j * s, s)?;
            let mut xin = match prev {
                Some(p) => pass.graph.add(seg, p)?,
                None => seg,
            };
            if let Some(norm) = &head.norm {
                let t = pass.graph.permute(xin, &[0, 2, 1])?;
                let t = norm.forward(pass, t)?;
                xin = pass.graph.permute(t, &[0, 2, 1])?;
            }
            let q = head.q.forward(pass, xin)?;
            let qg = pass.tokens_to_grid(q, grid)?;
            let qg = head.q_dw.forward(pass, qg)?;
            let q = pass.grid_to_tokens(qg)?;
            let k = head.k.forward(pass, xin)?;
            let v = head.v.forward(pass, xin)?;
            let kt = pass.graph.transpose_last(k)?;
            let scores = pass.graph.matmul(q, kt)?;
            let scores = pass.graph.scale(scores, scale);
            let attn = pass.graph.softmax(scores, 2)?;
            if pass.opts.capture_attention {
                let (stage, depth) = pass.location;
                pass.attention.push(AttentionCapture {
                    stage,
                    depth,
                    head: j,
                    weights: pass.graph.value(attn).clone(),
                });
            }
            let out = pass.graph.matmul(attn, v)?;
            outs.push(out);
            prev = Some(out);
        }
        let cat = pass.graph.concat(&outs, 2)?;
        let y = self.proj.forward(pass, cat)?;
        pass.residual(x, y)
    }
}

/// Token mixer, 2× spatial subsampling with channel change, token mixer.
#[derive(Clone, Debug)]
pub struct Subsample {
    pub pre: TokenMixer,
    pub expand: Dense,
    pub dw: DwConv,
    pub reduce: Dense,
    pub post: TokenMixer,
}

impl Subsample {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        ratio: usize,
        ffn_ratio: usize,
    ) -> Self {
        let hidden = d_in * ratio;
        let pre = TokenMixer::build(store, rng, &format!("{prefix}.pre"), d_in, ffn_ratio);
        let mut b = Builder {
            store: &mut *store,
            rng: &mut *rng,
        };
        let expand = Dense::build(&mut b, &format!("{prefix}.expand"), d_in, hidden);
        let dw = DwConv::build(&mut b, &format!("{prefix}.dw"), hidden, 2);
        let reduce = Dense::build(&mut b, &format!("{prefix}.reduce"), hidden, d_out);
        let post = TokenMixer::build(store, rng, &format!("{prefix}.post"), d_out, ffn_ratio);
        Subsample {
            pre,
            expand,
            dw,
            reduce,
            post,
        }
    }

    /// Returns the subsampled tokens and their grid.
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var, grid: (usize, usize)) -> Result<(Var, (usize, usize))> {
        let x = self.pre.forward(pass, x, grid)?;
        let h = self.expand.forward(pass, x)?;
        let h = pass.graph.relu(h);
        let g = pass.tokens_to_grid(h, grid)?;
        let g = self.dw.forward(pass, g)?;
        let g = pass.graph.relu(g);
        let s = pass.graph.shape(g).to_vec();
        let grid2 = (s[2], s[3]);
        let h = pass.grid_to_tokens(g)?;
        let y = self.reduce.forward(pass, h)?;
        let y = self.post.forward(pass, y, grid2)?;
        Ok((y, grid2))
    }
}

/// Four overlapping 3×3 stride-2 convolutions (16× downsampling).
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub convs: Vec<(ParamId, ParamId)>,
}

impl PatchEmbed {
    pub fn build<R: Rng>(store: &mut ParamStore, rng: &mut R, in_ch: usize, widths: [usize; 4]) -> Self {
        let mut b = Builder { store, rng };
        let mut cin = in_ch;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let w = b.weight(format!("patch_embed.{i}.weight"), &[cout, cin, 3, 3], cin * 9);
                let bias = b.zeros(format!("patch_embed.{i}.bias"), &[cout]);
                cin = cout;
                (w, bias)
            })
            .collect();
        PatchEmbed { convs }
    }

    /// `[B,ch,H,W]` image to `[B, grid², d]` tokens plus the grid.
    pub fn forward(&self, pass: &mut Pass<'_>, image: Var) -> Result<(Var, (usize, usize))> {
        let mut h = image;
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            let (w, b) = (pass.param(w), pass.param(b));
            h = pass.graph.conv2d(h, w, Some(b), 2, 1)?;
            if i + 1 < self.convs.len() {
                h = pass.graph.relu(h);
            }
        }
        let s = pass.graph.shape(h).to_vec();
        let tokens = pass.grid_to_tokens(h)?;
        Ok((tokens, (s[2], s[3])))
    }
}
