//! Personalized candidate representation: a hypernetwork turns the domain
//! features and the candidate embedding into one query per chunk of
//! adjacent sequence positions, added residually to the shared candidate.

use rand::Rng;

use crate::error::{AdsError, Result};
use crate::nn::{Init, Linear};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Pcrg {
    pub domain_dim: usize,
    pub cand_dim: usize,
    pub hidden: usize,
    pub chunks: usize,
    pub seq_len: usize,
    first: Linear,
    second: Linear,
}

impl Pcrg {
    pub fn new(domain_dim: usize, cand_dim: usize, hidden: usize, chunks: usize, seq_len: usize) -> Result<Self> {
        if chunks == 0 {
            return Err(AdsError::Config("pcrg chunk count must be at least 1".into()));
        }
        if !seq_len.is_multiple_of(chunks) {
            return Err(AdsError::Config(format!(
                "sequence length {seq_len} is not divisible by {chunks} chunks"
            )));
        }
        if domain_dim == 0 || cand_dim == 0 || hidden == 0 {
            return Err(AdsError::Config("pcrg dimensions must be positive".into()));
        }
        if hidden >= chunks * cand_dim {
            log::warn!(
                "pcrg hidden width {hidden} is not below G·d_Q = {}",
                chunks * cand_dim
            );
        }
        Ok(Self {
            domain_dim,
            cand_dim,
            hidden,
            chunks,
            seq_len,
            first: Linear::new("pcrg.query_gen.0", domain_dim + cand_dim, hidden),
            second: Linear::new("pcrg.query_gen.1", hidden, chunks * cand_dim),
        })
    }

    pub fn items_per_chunk(&self) -> usize {
        self.seq_len / self.chunks
    }

    /// The output layer starts at zero so every query begins as the plain
    /// candidate embedding.
    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.first.register(store, rng, Init::Uniform)?;
        self.second.register(store, rng, Init::Zero)
    }

    /// `domain: [B, d_D]`, `cand: [B, d_Q]` → queries `[B, T, d_Q]`; position
    /// `t` uses chunk `⌊t / (T/G)⌋`.
    pub fn generate_queries(&self, g: &mut Graph, domain: Var, cand: Var) -> Result<Var> {
        let (sd, sc) = (g.shape(domain).to_vec(), g.shape(cand).to_vec());
        if sd.len() != 2 || sc.len() != 2 || sd[0] != sc[0] || sd[1] != self.domain_dim || sc[1] != self.cand_dim {
            return Err(AdsError::dim("pcrg_queries", &sd, &sc));
        }
        let b = sd[0];
        let x = g.concat(&[domain, cand])?;
        let h = self.first.forward(g, x)?;
        let h = g.relu(h);
        let private = self.second.forward(g, h)?;
        let private = g.reshape(private, &[b, self.chunks, self.cand_dim])?;
        let private = g.repeat_rows(private, self.items_per_chunk())?;
        let shared = shared_queries(g, cand, self.seq_len)?;
        g.add(private, shared)
    }

    pub fn param_count(&self) -> usize {
        query_param_count(self.domain_dim, self.cand_dim, self.hidden, self.chunks)
    }

    /// Per-sample forward cost: both layers, the hidden ReLU and the
    /// residual addition over all `T` positions.
    pub fn flops(&self) -> usize {
        self.first.flops() + self.hidden + self.second.flops() + self.seq_len * self.cand_dim
    }
}

/// The candidate embedding repeated for every position, `[B, T, d_Q]`.
pub fn shared_queries(g: &mut Graph, cand: Var, seq_len: usize) -> Result<Var> {
    let s = g.shape(cand).to_vec();
    if s.len() != 2 {
        return Err(AdsError::dim("shared_queries", &s, &[seq_len]));
    }
    let c = g.reshape(cand, &[s[0], 1, s[1]])?;
    g.repeat_rows(c, seq_len)
}

/// Trainable scalars of the query generator.
pub fn query_param_count(domain_dim: usize, cand_dim: usize, hidden: usize, chunks: usize) -> usize {
    hidden * (domain_dim + cand_dim) + hidden + chunks * cand_dim * hidden + chunks * cand_dim
}
