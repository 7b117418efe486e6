use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PainViTConfig;
use super::layers::{CascadedAttention, Dense, Pass, PassOptions, PatchEmbed, Subsample, TokenMixer};
use super::params::{Builder, NormId, ParamStore};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{dropout, BatchMoments, Mode, Tensor, Var};

/// Token mixer → cascaded attention → token mixer.
#[derive(Clone, Debug)]
pub struct Block {
    pub mixer_pre: TokenMixer,
    pub attn: CascadedAttention,
    pub mixer_post: TokenMixer,
}

/// Graph handles for a forward pass: the pooled embedding `[B, d]` and the
/// class logits `[B, num_classes]`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub embedding: Var,
    pub logits: Var,
}

/// Hierarchical vision transformer used for both embedding extraction and
/// final classification.
#[derive(Clone, Debug)]
pub struct PainViT {
    config: PainViTConfig,
    store: ParamStore,
    patch: PatchEmbed,
    stages: Vec<Vec<Block>>,
    subsamples: Vec<Subsample>,
    head: Dense,
}

impl PainViT {
    /// Builds a model with deterministic weights drawn from `seed`.
    pub fn new(config: PainViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let patch = PatchEmbed::build(&mut store, &mut rng, config.in_channels, config.stem_widths());
        let stage_cfgs = config.stages();
        let mut stages = Vec::with_capacity(3);
        let mut subsamples = Vec::with_capacity(2);
        for (s, st) in stage_cfgs.iter().enumerate() {
            let mut blocks = Vec::with_capacity(st.depth);
            for d in 0..st.depth {
                let p = format!("stages.{s}.{d}");
                blocks.push(Block {
                    mixer_pre: TokenMixer::build(&mut store, &mut rng, &format!("{p}.mixer_pre"), st.dim, config.ffn_ratio),
                    attn: CascadedAttention::build(&mut store, &mut rng, &format!("{p}.attn"), st.dim, st.heads, config.qkv_norm)?,
                    mixer_post: TokenMixer::build(&mut store, &mut rng, &format!("{p}.mixer_post"), st.dim, config.ffn_ratio),
                });
            }
            stages.push(blocks);
            if s + 1 < stage_cfgs.len() {
                subsamples.push(Subsample::build(
                    &mut store,
                    &mut rng,
                    &format!("subsample.{s}"),
                    st.dim,
                    stage_cfgs[s + 1].dim,
                    config.subsample_ratio,
                    config.ffn_ratio,
                ));
            }
        }
        let head = Dense::build(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "head",
            config.embed_dim(),
            config.num_classes,
        );
        Ok(PainViT {
            config,
            store,
            patch,
            stages,
            subsamples,
            head,
        })
    }

    pub fn config(&self) -> &PainViTConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn patch_embed(&self) -> &PatchEmbed {
        &self.patch
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn blocks(&self, stage: usize) -> &[Block] {
        &self.stages[stage]
    }

    pub fn subsamples(&self) -> &[Subsample] {
        &self.subsamples
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Pass options matching this model's residual and batch-norm settings.
    pub fn options(&self, mode: Mode, track_grads: bool) -> PassOptions {
        PassOptions {
            mode,
            track_grads,
            residual: self.config.residual,
            bn_eps: self.config.bn_eps,
            capture_attention: false,
        }
    }

    pub fn pass(&self, opts: PassOptions) -> Pass<'_> {
        Pass::new(&self.store, opts)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.image_size || shape[3] != c.image_size {
            return dim_err(format!(
                "expected [B,{},{},{}] input, got {shape:?}",
                c.in_channels, c.image_size, c.image_size
            ));
        }
        Ok(())
    }

    /// Full forward inside `pass`. `head_dropout` applies inverted dropout to
    /// the pooled embedding before the classifier (train mode only).
    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        image: Var,
        head_dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<Outputs> {
        self.check_input(pass.graph.shape(image))?;
        let (mut x, mut grid) = self.patch.forward(pass, image)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            for (d, block) in blocks.iter().enumerate() {
                pass.set_location(s, d);
                x = block.mixer_pre.forward(pass, x, grid)?;
                x = block.attn.forward(pass, x, grid)?;
                x = block.mixer_post.forward(pass, x, grid)?;
            }
            if let Some(sub) = self.subsamples.get(s) {
                (x, grid) = sub.forward(pass, x, grid)?;
            }
        }
        let embedding = pass.graph.mean_axis(x, 1)?;
        let pooled = match head_dropout {
            Some((p, rng)) => {
                let mode = pass.options().mode;
                dropout(&mut pass.graph, embedding, p, rng, mode)?
            }
            None => embedding,
        };
        let logits = self.head.forward(pass, pooled)?;
        Ok(Outputs { embedding, logits })
    }

    /// Eval-mode forward without gradient tracking; returns
    /// `(embedding [B,d], logits [B,classes])`.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut pass = self.pass(self.options(Mode::Eval, false));
        let x = pass.graph.constant(images.clone());
        let out = self.forward(&mut pass, x, None)?;
        Ok((
            pass.graph.value(out.embedding).clone(),
            pass.graph.value(out.logits).clone(),
        ))
    }

    /// Pre-head embeddings `[B, d]` in eval mode.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.infer(images)?.0)
    }

    /// Applies only the classification head to `[B, d]` embeddings.
    pub fn head_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut pass = self.pass(self.options(Mode::Eval, false));
        let x = pass.graph.constant(embeddings.clone());
        let y = self.head.forward(&mut pass, x)?;
        Ok(pass.graph.value(y).clone())
    }

    /// Post-softmax attention of every head in block `(stage, depth)`, one
    /// `[heads, N, N]` tensor per image of the batch.
    pub fn attention_weights(&self, images: &Tensor, stage: usize, depth: usize) -> Result<Vec<Tensor>> {
        if stage >= self.stages.len() || depth >= self.stages[stage].len() {
            return Err(Error::Config(format!(
                "no block at stage {stage}, depth {depth}"
            )));
        }
        let mut opts = self.options(Mode::Eval, false);
        opts.capture_attention = true;
        let mut pass = self.pass(opts);
        let x = pass.graph.constant(images.clone());
        self.forward(&mut pass, x, None)?;
        let caps: Vec<_> = pass
            .attention()
            .iter()
            .filter(|c| c.stage == stage && c.depth == depth)
            .collect();
        let shape = caps[0].weights.shape();
        let (b, n) = (shape[0], shape[1]);
        Ok((0..b)
            .map(|i| {
                let mut data = Vec::with_capacity(caps.len() * n * n);
                for c in &caps {
                    data.extend_from_slice(&c.weights.data()[i * n * n..(i + 1) * n * n]);
                }
                Tensor::new(&[caps.len(), n, n], data).expect("attention shape")
            })
            .collect())
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn apply_moments(&mut self, moments: &[(NormId, BatchMoments)]) {
        let m = self.config.bn_momentum;
        for (id, mo) in moments {
            self.store.update_running(*id, mo, m);
        }
    }

    /// Populates batch-norm running statistics from train-mode passes over
    /// `batches` without touching the weights.
    pub fn calibrate(&mut self, batches: &[Tensor]) -> Result<()> {
        for batch in batches {
            let moments = {
                let mut pass = self.pass(self.options(Mode::Train, false));
                let x = pass.graph.constant(batch.clone());
                self.forward(&mut pass, x, None)?;
                pass.take_moments()
            };
            self.apply_moments(&moments);
        }
        Ok(())
    }

    /// True once every batch norm has running statistics.
    pub fn is_calibrated(&self) -> bool {
        self.store.norms().iter().all(|n| n.initialized)
    }
}
