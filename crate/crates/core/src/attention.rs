//! Position-wise target attention: query `t` is scored only against key `t`,
//! and the normalized scores pool the value rows. Two scoring backbones are
//! available: scaled dot products per head, or a small MLP over the
//! query/key interaction vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AdsError, Result};
use crate::nn::{uniform, Init, Linear};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Var};

pub const QUERY_PROJ: &str = "attn.w_q";
pub const KEY_PROJ: &str = "attn.w_k";
pub const VALUE_PROJ: &str = "attn.w_v";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    #[default]
    Mha,
    Din,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub backbone: Backbone,
    pub heads: usize,
    pub attn_dim: usize,
    pub cand_dim: usize,
    pub seq_dim: usize,
    pub seq_len: usize,
    score_in: Linear,
    score_out: Linear,
}

/// Handles into the graph for one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// Raw logits before masking, `[B, H, T]`.
    pub logits: Var,
    /// Normalized weights, `[B, H, T]`.
    pub weights: Var,
    /// Pooled output, `[B, output_dim]`.
    pub output: Var,
}

impl Attention {
    /// `hidden` is the width of the scoring MLP and is unused by the dot
    /// product backbone. The MLP backbone always uses one projection head.
    pub fn new(
        backbone: Backbone,
        heads: usize,
        attn_dim: usize,
        cand_dim: usize,
        seq_dim: usize,
        seq_len: usize,
        hidden: usize,
    ) -> Result<Self> {
        if heads == 0 || attn_dim == 0 || cand_dim == 0 || seq_dim == 0 || seq_len == 0 || hidden == 0 {
            return Err(AdsError::Config("attention dimensions must be positive".into()));
        }
        let heads = match backbone {
            Backbone::Mha => heads,
            Backbone::Din => 1,
        };
        Ok(Self {
            backbone,
            heads,
            attn_dim,
            cand_dim,
            seq_dim,
            seq_len,
            score_in: Linear::new("attn.din_score.0", 4 * attn_dim, hidden),
            score_out: Linear::new("attn.din_score.1", hidden, 1),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.heads * self.attn_dim
    }

    fn width(&self) -> usize {
        self.heads * self.attn_dim
    }

    /// Projections are stored with heads stacked along rows: head `h` owns
    /// rows `h·d_A .. (h+1)·d_A`.
    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let w = self.width();
        store.insert(QUERY_PROJ, uniform(rng, &[w, self.cand_dim], self.cand_dim))?;
        store.insert(KEY_PROJ, uniform(rng, &[w, self.seq_dim], self.seq_dim))?;
        store.insert(VALUE_PROJ, uniform(rng, &[w, self.seq_dim], self.seq_dim))?;
        if self.backbone == Backbone::Din {
            self.score_in.register(store, rng, Init::Uniform)?;
            self.score_out.register(store, rng, Init::Uniform)?;
        }
        Ok(())
    }

    /// `queries: [B, T, d_Q]`, `seq: [B, T, d_S]`, `mask: [B·T]`.
    pub fn attend(&self, g: &mut Graph, queries: Var, seq: Var, mask: &[bool]) -> Result<Attended> {
        let (sq, ss) = (g.shape(queries).to_vec(), g.shape(seq).to_vec());
        let t = self.seq_len;
        if sq.len() != 3 || ss.len() != 3 || sq[0] != ss[0] || sq[1] != t || ss[1] != t || sq[2] != self.cand_dim || ss[2] != self.seq_dim {
            return Err(AdsError::dim("attend", &sq, &ss));
        }
        let b = sq[0];
        if mask.len() != b * t {
            return Err(AdsError::dim("attend_mask", &[b, t], &[mask.len()]));
        }
        if let Some(i) = (0..b).find(|&i| !mask[i * t..(i + 1) * t].iter().any(|&m| m)) {
            return Err(AdsError::Degenerate(format!(
                "sample {i} has no valid sequence position"
            )));
        }
        let w = self.width();
        let q_rows = g.reshape(queries, &[b * t, self.cand_dim])?;
        let s_rows = g.reshape(seq, &[b * t, self.seq_dim])?;
        let wq = g.param(QUERY_PROJ)?;
        let wk = g.param(KEY_PROJ)?;
        let wv = g.param(VALUE_PROJ)?;
        let q = g.matmul_nt(q_rows, wq)?;
        let k = g.matmul_nt(s_rows, wk)?;
        let v = g.matmul_nt(s_rows, wv)?;
        let v = g.reshape(v, &[b, t, w])?;

        let logits = match self.backbone {
            Backbone::Mha => {
                let q = g.reshape(q, &[b, t, w])?;
                let k = g.reshape(k, &[b, t, w])?;
                let scale = 1.0 / (self.attn_dim as f64).sqrt();
                g.diag_logits(q, k, self.heads, scale)?
            }
            Backbone::Din => {
                let diff = g.sub(q, k)?;
                let prod = g.mul(q, k)?;
                let x = g.concat(&[q, k, diff, prod])?;
                let h = self.score_in.forward(g, x)?;
                let h = g.relu(h);
                let z = self.score_out.forward(g, h)?;
                g.reshape(z, &[b, 1, t])?
            }
        };
        let weights = g.masked_softmax(logits, mask)?;
        let output = g.attn_pool(weights, v)?;
        Ok(Attended {
            logits,
            weights,
            output,
        })
    }

    pub fn param_count(&self) -> usize {
        let proj = self.width() * (self.cand_dim + 2 * self.seq_dim);
        match self.backbone {
            Backbone::Mha => proj,
            Backbone::Din => proj + self.score_in.param_count() + self.score_out.param_count(),
        }
    }

    /// Per-sample forward cost: projections, scoring, softmax (counted as
    /// one op per entry for max, exp and divide) and pooling.
    pub fn flops(&self) -> usize {
        let t = self.seq_len;
        let w = self.width();
        let proj = t * w * (self.cand_dim + 2 * self.seq_dim);
        let score = match self.backbone {
            Backbone::Mha => t * w + t * self.heads,
            Backbone::Din => {
                t * (2 * w) + t * (self.score_in.flops() + self.score_in.output + self.score_out.flops())
            }
        };
        let softmax = 3 * t * self.heads;
        let pool = t * w;
        proj + score + softmax + pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DenseValue, Precision};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(backbone: Backbone, heads: usize, d_a: usize, d: usize, t: usize) -> (Attention, ParameterStore) {
        let m = Attention::new(backbone, heads, d_a, d, d, t, 3).unwrap();
        let mut store = ParameterStore::new();
        m.register(&mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        (m, store)
    }

    fn identity_store(store: &mut ParameterStore, d: usize) {
        for name in [QUERY_PROJ, KEY_PROJ, VALUE_PROJ] {
            *store.value_mut(name).unwrap() = DenseValue::identity(d);
        }
    }

    #[test]
    fn hand_softmax_example() {
        // Logits [ln 2, 0] from q·k/√2 with identity projections.
        let (m, mut store) = setup(Backbone::Mha, 1, 2, 2, 2);
        identity_store(&mut store, 2);
        let l = 2f64.ln() * 2f64.sqrt();
        let mut g = Graph::with_store(&store, Precision::F64);
        // k rows equal v rows; pick q so that q·k gives the target logits.
        let seq = g.constant(DenseValue::new(&[1, 2, 2], vec![3.0, 0.0, 0.0, 3.0]).unwrap());
        let q = g.constant(DenseValue::new(&[1, 2, 2], vec![l / 3.0, 0.0, 0.0, 0.0]).unwrap());
        let out = m.attend(&mut g, q, seq, &[true, true]).unwrap();
        let s = g.value(out.output).data();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12, "{s:?}");
    }

    #[test]
    fn single_valid_position_returns_its_value() {
        for backbone in [Backbone::Mha, Backbone::Din] {
            let (m, store) = setup(backbone, 2, 2, 3, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut g = Graph::with_store(&store, Precision::F64);
            let seq_val = uniform(&mut rng, &[1, 3, 3], 1);
            let seq = g.constant(seq_val.clone());
            let q = g.constant(uniform(&mut rng, &[1, 3, 3], 1));
            let out = m.attend(&mut g, q, seq, &[false, true, false]).unwrap();
            let wv = store.value(VALUE_PROJ).unwrap();
            let row = seq_val.row(1);
            for (o, w) in g.value(out.output).data().iter().zip(wv.data().chunks(3)) {
                let expect: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                assert!((o - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_values() {
        let (m, mut store) = setup(Backbone::Mha, 1, 2, 2, 4);
        identity_store(&mut store, 2);
        let mut g = Graph::with_store(&store, Precision::F64);
        let seq = g.constant(DenseValue::new(&[1, 4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let q = g.constant(DenseValue::zeros(&[1, 4, 2]));
        let out = m.attend(&mut g, q, seq, &[true; 4]).unwrap();
        assert_eq!(g.value(out.output).data(), &[4.0, 5.0]);
    }

    #[test]
    fn zero_scoring_mlp_gives_masked_mean() {
        let (m, mut store) = setup(Backbone::Din, 1, 2, 2, 3);
        identity_store(&mut store, 2);
        for n in ["attn.din_score.1.w", "attn.din_score.1.b"] {
            store.value_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::with_store(&store, Precision::F64);
        let seq = g.constant(DenseValue::new(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]).unwrap());
        let q = g.constant(DenseValue::filled(&[1, 3, 2], 0.3));
        let out = m.attend(&mut g, q, seq, &[true, true, false]).unwrap();
        let s = g.value(out.output).data();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let (m, store) = setup(Backbone::Mha, 1, 2, 2, 2);
        let mut g = Graph::with_store(&store, Precision::F64);
        let seq = g.constant(DenseValue::zeros(&[1, 2, 2]));
        let q = g.constant(DenseValue::zeros(&[1, 2, 2]));
        assert!(matches!(m.attend(&mut g, q, seq, &[false, false]), Err(AdsError::Degenerate(_))));
    }

    #[test]
    fn din_uses_one_head() {
        let m = Attention::new(Backbone::Din, 4, 3, 5, 5, 2, 2).unwrap();
        assert_eq!(m.output_dim(), 3);
        let mut store = ParameterStore::new();
        m.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), store.scalar_count(false));
        let m = Attention::new(Backbone::Mha, 4, 3, 5, 5, 2, 2).unwrap();
        let mut store = ParameterStore::new();
        m.register(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.param_count(), store.scalar_count(false));
        assert_eq!(m.output_dim(), 12);
    }
}
