use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attended, Attention};
use crate::data::SampleRecord;
use crate::error::{AdsError, Result};
use crate::features::{EncodedBatch, FeatureEncoder};
use crate::nn::{Init, Linear};
use crate::params::ParameterStore;
use crate::pcrg::{shared_queries, Pcrg};
use crate::psrg::Psrg;
use crate::tensor::{kernels::PROB_EPS, Gradients, Graph, Var};

use super::config::ModelConfig;

/// Samples scored per graph when predicting.
const PREDICT_CHUNK: usize = 512;

/// The assembled ranker. Parameters live in a separate [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Ranker {
    config: ModelConfig,
    encoder: FeatureEncoder,
    psrg: Option<Psrg>,
    pcrg: Option<Pcrg>,
    attention: Attention,
    head: Vec<Linear>,
}

/// Embedded inputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Inputs {
    pub domain: Var,
    pub seq: Var,
    pub cand: Var,
    pub user: Var,
    pub other: Option<Var>,
}

/// Graph handles of interest after a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub inputs: Inputs,
    /// Sequence after personalization (or raw when disabled), `[B, T, d_S]`.
    pub seq: Var,
    /// Per-position queries, `[B, T, d_Q]`.
    pub queries: Var,
    pub attended: Attended,
    /// Concatenated head input, `[B, d_all]`.
    pub features: Var,
    /// Pre-sigmoid scores, `[B]`.
    pub logits: Var,
    /// Click probabilities, `[B]`.
    pub probs: Var,
}

impl Ranker {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let encoder = FeatureEncoder::new(c.features.clone(), c.seq_len, c.seq_dim, c.cand_dim)?;
        let d_d = c.domain_dim();
        let psrg = if c.ablation.uses_psrg() {
            Some(Psrg::new(d_d, c.seq_dim, c.gen_hidden, c.eta)?)
        } else {
            None
        };
        let pcrg = if c.ablation.uses_pcrg() {
            Some(Pcrg::new(d_d, c.cand_dim, c.gen_hidden, c.chunks, c.seq_len)?)
        } else {
            None
        };
        let attention = Attention::new(
            c.backbone,
            c.heads,
            c.attn_dim,
            c.cand_dim,
            c.seq_dim,
            c.seq_len,
            c.gen_hidden,
        )?;
        let mut input = attention.output_dim() + c.features.user_dim + c.cand_dim + c.features.other_dim();
        let mut head = Vec::with_capacity(c.mlp.len());
        for (i, &w) in c.mlp.iter().enumerate() {
            head.push(Linear::new(format!("head.{i}"), input, w));
            input = w;
        }
        Ok(Self {
            config,
            encoder,
            psrg,
            pcrg,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn psrg(&self) -> Option<&Psrg> {
        self.psrg.as_ref()
    }

    pub fn pcrg(&self) -> Option<&Pcrg> {
        self.pcrg.as_ref()
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn head(&self) -> &[Linear] {
        &self.head
    }

    pub fn head_input_dim(&self) -> usize {
        self.head[0].input
    }

    /// Fresh parameters drawn from the config seed. Each module draws from
    /// its own stream, so the parameters shared by all ablations start out
    /// identical for a given seed.
    pub fn init_params(&self) -> Result<ParameterStore> {
        let stream = |n: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(n);
            rng
        };
        let mut store = ParameterStore::new();
        self.encoder.register(&mut store, &mut stream(0))?;
        if let Some(p) = &self.psrg {
            p.register(&mut store, &mut stream(1))?;
        }
        if let Some(p) = &self.pcrg {
            p.register(&mut store, &mut stream(2))?;
        }
        self.attention.register(&mut store, &mut stream(3))?;
        let mut rng = stream(4);
        for layer in &self.head {
            layer.register(&mut store, &mut rng, Init::Uniform)?;
        }
        Ok(store)
    }

    pub fn encode(&self, records: &[SampleRecord]) -> Result<EncodedBatch> {
        self.encoder.encode(records)
    }

    pub fn forward(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Forward> {
        let e = self.encoder.embed(g, batch)?;
        let inputs = Inputs {
            domain: e.domain,
            seq: e.seq,
            cand: e.cand,
            user: e.user,
            other: e.other,
        };
        self.forward_inputs(g, inputs, &batch.mask)
    }

    /// Runs everything after the embedding lookups.
    pub fn forward_inputs(&self, g: &mut Graph, inputs: Inputs, mask: &[bool]) -> Result<Forward> {
        let seq = match &self.psrg {
            Some(p) => p.forward(g, inputs.domain, inputs.seq)?,
            None => inputs.seq,
        };
        let queries = match &self.pcrg {
            Some(p) => p.generate_queries(g, inputs.domain, inputs.cand)?,
            None => shared_queries(g, inputs.cand, self.config.seq_len)?,
        };
        let attended = self.attention.attend(g, queries, seq, mask)?;
        let mut parts = vec![attended.output, inputs.user, inputs.cand];
        parts.extend(inputs.other);
        let features = g.concat(&parts)?;
        if g.shape(features)[1] != self.head_input_dim() {
            return Err(AdsError::dim("head_input", g.shape(features), &[self.head_input_dim()]));
        }
        let mut x = features;
        for (i, layer) in self.head.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.head.len() {
                x = g.relu(x);
            }
        }
        let b = g.shape(x)[0];
        let logits = g.reshape(x, &[b])?;
        let probs = g.sigmoid(logits);
        Ok(Forward {
            inputs,
            seq,
            queries,
            attended,
            features,
            logits,
            probs,
        })
    }

    /// Mean binary cross-entropy of a batch and its parameter gradients.
    pub fn loss_and_grads(&self, store: &ParameterStore, batch: &EncodedBatch) -> Result<(f64, Gradients)> {
        let mut g = Graph::with_store(store, self.config.precision);
        let f = self.forward(&mut g, batch)?;
        let loss = g.bce(f.probs, &batch.labels)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            let probs = g.value(f.probs).data();
            let bad = probs.iter().filter(|p| !p.is_finite()).count();
            return Err(AdsError::NonFinite {
                what: "loss",
                detail: format!(
                    "batch of {} samples, {bad} non-finite predictions, domains {:?}",
                    batch.size,
                    &batch.domains[..batch.size.min(8)]
                ),
            });
        }
        let grads = g.backward(loss)?;
        Ok((value, grads))
    }

    /// Mean loss without gradients.
    pub fn loss(&self, store: &ParameterStore, batch: &EncodedBatch) -> Result<f64> {
        let mut g = Graph::with_store(store, self.config.precision);
        let f = self.forward(&mut g, batch)?;
        let loss = g.bce(f.probs, &batch.labels)?;
        Ok(g.value(loss).item())
    }

    /// Probabilities clamped into `[ε, 1-ε]`, in record order.
    pub fn predict(&self, store: &ParameterStore, records: &[SampleRecord]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(PREDICT_CHUNK) {
            let batch = self.encode(chunk)?;
            out.extend(self.predict_batch(store, &batch)?);
        }
        Ok(out)
    }

    pub fn predict_batch(&self, store: &ParameterStore, batch: &EncodedBatch) -> Result<Vec<f64>> {
        let mut g = Graph::with_store(store, self.config.precision);
        let f = self.forward(&mut g, batch)?;
        Ok(g.value(f.probs)
            .data()
            .iter()
            .map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect())
    }
}
