use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Window;
use crate::encoder::{self, EncoderConfig, ForwardPass, HiddenState, LstmParams};
use crate::error::{contract, Result};
use crate::heads::{nll_grad, Head, HeadCache, HeadConfig, HeadKind, ProjectionKind};
use crate::linalg::Matrix;
use crate::params::{prefixed, prefixed_mut, Parameters, View, ViewMut};

/// Encoder plus head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Input embedding shares the head's output embedding `W`.
    pub tied: bool,
}

impl ModelConfig {
    /// Ties embeddings whenever the widths allow it.
    pub fn new(
        vocab_size: usize,
        embed_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        head: HeadConfig,
    ) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size,
                embed_dim,
                hidden_dim,
                num_layers,
            },
            head,
            tied: embed_dim == head.d,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        contract!(
            !self.tied || self.encoder.embed_dim == self.head.d,
            "tied embeddings need embed_dim == d ({} vs {})",
            self.encoder.embed_dim,
            self.head.d
        );
        if self.head.kind == HeadKind::Softmax
            && self.head.projection == ProjectionKind::Identity
        {
            contract!(
                self.head.d == self.encoder.hidden_dim,
                "identity projection needs d == hidden_dim"
            );
        }
        Ok(())
    }

    /// Same config with the head kind swapped, keeping every width.
    pub fn with_head(&self, kind: HeadKind, k: usize) -> Self {
        let mut c = *self;
        c.head = HeadConfig {
            kind,
            k: if kind == HeadKind::Softmax { 1 } else { k },
            ..self.head
        };
        c
    }
}

/// Exact learnable scalar count of the full model.
pub fn count_params(config: &ModelConfig) -> usize {
    config.encoder.param_count(!config.tied)
        + config
            .head
            .param_count(config.encoder.vocab_size, config.encoder.hidden_dim)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: LstmParams,
    pub head: Head,
}

/// Forward results for one `B × L` window, log-prob rows ordered `t·B + b`.
pub struct WindowForward {
    pub encoder: ForwardPass,
    pub head: HeadCache,
}

impl WindowForward {
    pub fn logprobs(&self) -> &Matrix {
        self.head.logprobs()
    }
}

impl Model {
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let encoder = LstmParams::init(config.encoder, !config.tied, rng);
        let head = Head::init(
            &config.head,
            config.encoder.vocab_size,
            config.encoder.hidden_dim,
            rng,
        )?;
        Ok(Model {
            config,
            encoder,
            head,
        })
    }

    /// All-zero weights: the head predicts the uniform distribution.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::init(config, &mut rng)?;
        m.scale_all(0.0);
        Ok(m)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.scale_all(0.0);
        z
    }

    pub fn embedding_table(&self) -> &Matrix {
        match &self.encoder.embedding {
            Some(e) => e,
            None => self.head.output_embedding(),
        }
    }

    pub fn initial_state(&self, batch: usize) -> HiddenState {
        HiddenState::zeros(&self.config.encoder, batch)
    }

    pub fn forward(&self, ids: &[Vec<usize>], state: &HiddenState) -> Result<WindowForward> {
        let enc = encoder::forward(&self.encoder, self.embedding_table(), ids, state)?;
        let g = Matrix::vstack(&enc.outputs)?;
        let head = self.head.forward(&g)?;
        Ok(WindowForward { encoder: enc, head })
    }

    /// Gradients of `⟨grad_lp, logprobs⟩`; returns parameter gradients and
    /// the gradient with respect to the incoming state.
    pub fn backward(&self, fw: &WindowForward, grad_lp: &Matrix) -> Result<(Model, HiddenState)> {
        let (head_grads, grad_g) = self.head.backward(&fw.head, grad_lp)?;
        let batch = fw.encoder.state.batch_size();
        let hidden = self.config.encoder.hidden_dim;
        let steps: Vec<Matrix> = (0..grad_g.rows() / batch)
            .map(|t| {
                let idx: Vec<usize> = (t * batch..(t + 1) * batch).collect();
                grad_g.select_rows(&idx)
            })
            .collect();
        debug_assert!(steps.iter().all(|s| s.cols() == hidden));
        let bw = encoder::backward(&self.encoder, &fw.encoder.tape, &steps, None)?;
        let mut enc_grads = bw.grads;
        let mut head_grads = head_grads;
        if self.config.tied {
            let de = enc_grads.embedding.take().expect("dense embedding gradient");
            head_grads.output_embedding_mut().axpy(1.0, &de);
        }
        Ok((
            Model {
                config: self.config,
                encoder: enc_grads,
                head: head_grads,
            },
            bw.grad_state,
        ))
    }

    /// Mean NLL over the window's targets plus its gradients.
    pub fn window_loss(
        &self,
        window: &Window,
        state: &HiddenState,
        with_grads: bool,
    ) -> Result<(f64, Option<Model>, HiddenState)> {
        let fw = self.forward(&window.inputs, state)?;
        let targets = time_major_targets(window);
        let lp = fw.logprobs();
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -lp[(r, t)])
            .sum::<f64>()
            / targets.len() as f64;
        let grads = if with_grads {
            let g = nll_grad(&targets, self.config.vocab_size(), targets.len() as f64);
            Some(self.backward(&fw, &g)?.0)
        } else {
            None
        };
        Ok((nll, grads, fw.encoder.state))
    }
}

/// Targets in the `t·B + b` row order of [`Model::forward`].
pub fn time_major_targets(window: &Window) -> Vec<usize> {
    let (b, l) = (window.batch_size(), window.len());
    (0..l)
        .flat_map(|t| (0..b).map(move |s| (s, t)))
        .map(|(s, t)| window.targets[s][t])
        .collect()
}

impl Parameters for Model {
    fn views(&self) -> Vec<View<'_>> {
        prefixed("encoder", self.encoder.views())
            .chain(prefixed("head", self.head.views()))
            .collect()
    }

    fn views_mut(&mut self) -> Vec<ViewMut<'_>> {
        let mut out: Vec<ViewMut<'_>> = prefixed_mut("encoder", self.encoder.views_mut()).collect();
        out.extend(prefixed_mut("head", self.head.views_mut()));
        out
    }
}
