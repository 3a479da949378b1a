//! Personalized sequence representation: a hypernetwork maps the domain
//! features of each sample to a private linear map that is applied to every
//! item embedding of its behavior sequence.

use rand::Rng;

use crate::error::{AdsError, Result};
use crate::nn::{Init, Linear};
use crate::params::ParameterStore;
use crate::tensor::{DenseValue, Graph, Var};

pub const SHARED_WEIGHT: &str = "psrg.w_shared";

#[derive(Clone, Debug, PartialEq)]
pub struct Psrg {
    pub domain_dim: usize,
    pub seq_dim: usize,
    pub hidden: usize,
    /// Scale applied to the gated shared weight.
    pub eta: f64,
    weight_in: Linear,
    weight_out: Linear,
    bias_in: Linear,
    bias_out: Linear,
}

impl Psrg {
    pub fn new(domain_dim: usize, seq_dim: usize, hidden: usize, eta: f64) -> Result<Self> {
        if domain_dim == 0 || seq_dim == 0 || hidden == 0 {
            return Err(AdsError::Config("psrg dimensions must be positive".into()));
        }
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(AdsError::Config(format!("eta must be positive, got {eta}")));
        }
        if hidden >= seq_dim * seq_dim {
            log::warn!(
                "psrg hidden width {hidden} is not below d_S² = {}; the generator is no cheaper than a full map",
                seq_dim * seq_dim
            );
        }
        Ok(Self {
            domain_dim,
            seq_dim,
            hidden,
            eta,
            weight_in: Linear::new("psrg.weight_gen.0", domain_dim, hidden),
            weight_out: Linear::new("psrg.weight_gen.1", hidden, seq_dim * seq_dim),
            bias_in: Linear::new("psrg.bias_gen.0", domain_dim, hidden),
            bias_out: Linear::new("psrg.bias_gen.1", hidden, seq_dim),
        })
    }

    /// Generator output layers start at zero and the shared weight at the
    /// identity, so with `η = 2` the initial map is the identity.
    pub fn register<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        self.weight_in.register(store, rng, Init::Uniform)?;
        self.weight_out.register(store, rng, Init::Zero)?;
        self.bias_in.register(store, rng, Init::Uniform)?;
        self.bias_out.register(store, rng, Init::Zero)?;
        let eye = DenseValue::identity(self.seq_dim).reshaped(&[self.seq_dim * self.seq_dim])?;
        store.insert(SHARED_WEIGHT, eye)?;
        Ok(())
    }

    /// Generated weight `η·(W_shared ⊙ σ(MLP(E_D)))`, `[B, d_S·d_S]`.
    pub fn generate_weight(&self, g: &mut Graph, domain: Var) -> Result<Var> {
        self.check_domain(g, domain)?;
        let h = self.weight_in.forward(g, domain)?;
        let h = g.relu(h);
        let private = self.weight_out.forward(g, h)?;
        let private = g.sigmoid(private);
        let shared = g.param(SHARED_WEIGHT)?;
        let gated = g.mul(private, shared)?;
        Ok(g.scale(gated, self.eta))
    }

    /// Generated bias `MLP'(E_D)`, `[B, d_S]`, without an output squashing.
    pub fn generate_bias(&self, g: &mut Graph, domain: Var) -> Result<Var> {
        self.check_domain(g, domain)?;
        let h = self.bias_in.forward(g, domain)?;
        let h = g.relu(h);
        self.bias_out.forward(g, h)
    }

    /// `E_S·reshape(W, d_S×d_S)ᵀ + b` per sample. `seq: [B, T, d_S]`,
    /// `weight: [B, d_S·d_S]`, `bias: [B, d_S]`. Padding rows are mapped too.
    pub fn personalize(&self, g: &mut Graph, seq: Var, weight: Var, bias: Var) -> Result<Var> {
        let s = g.shape(seq).to_vec();
        let d = self.seq_dim;
        if s.len() != 3 || s[2] != d {
            return Err(AdsError::dim("psrg_personalize", &s, &[d]));
        }
        let (b, t) = (s[0], s[1]);
        if g.shape(weight) != [b, d * d] || g.shape(bias) != [b, d] {
            return Err(AdsError::dim("psrg_personalize", g.shape(weight), &[b, d * d]));
        }
        let w = g.reshape(weight, &[b, d, d])?;
        let mapped = g.batch_matmul_nt(seq, w)?;
        let bias = g.reshape(bias, &[b, 1, d])?;
        let bias = g.repeat_rows(bias, t)?;
        g.add(mapped, bias)
    }

    /// Full module: `seq: [B, T, d_S]` personalized by `domain: [B, d_D]`.
    pub fn forward(&self, g: &mut Graph, domain: Var, seq: Var) -> Result<Var> {
        let w = self.generate_weight(g, domain)?;
        let b = self.generate_bias(g, domain)?;
        self.personalize(g, seq, w, b)
    }

    fn check_domain(&self, g: &Graph, domain: Var) -> Result<()> {
        let s = g.shape(domain);
        if s.len() != 2 || s[1] != self.domain_dim {
            return Err(AdsError::dim("psrg_domain", s, &[self.domain_dim]));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weight_in.param_count()
            + self.weight_out.param_count()
            + self.bias_in.param_count()
            + self.bias_out.param_count()
            + self.seq_dim * self.seq_dim
    }

    /// Per-sample forward cost for a sequence of `seq_len` items.
    pub fn flops(&self, seq_len: usize) -> usize {
        let d2 = self.seq_dim * self.seq_dim;
        // relu after each hidden layer, sigmoid + shared gate + η scale on the weight
        let weight = self.weight_in.flops() + self.hidden + self.weight_out.flops() + 3 * d2;
        let bias = self.bias_in.flops() + self.hidden + self.bias_out.flops();
        let apply = seq_len * d2 + seq_len * self.seq_dim;
        weight + bias + apply
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d_d: usize, d_s: usize, d_h: usize, eta: f64) -> (Psrg, ParameterStore) {
        let m = Psrg::new(d_d, d_s, d_h, eta).unwrap();
        let mut store = ParameterStore::new();
        m.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (m, store)
    }

    fn domain(rows: &[Vec<f64>]) -> DenseValue {
        DenseValue::matrix(rows).unwrap()
    }

    #[test]
    fn zero_generator_halves_shared_weight() {
        let (m, mut store) = setup(3, 2, 4, 1.7);
        store.value_mut("psrg.weight_gen.0.w").unwrap().data_mut().fill(0.0);
        let shared = vec![0.3, -1.2, 2.0, 0.7];
        store.value_mut(SHARED_WEIGHT).unwrap().data_mut().copy_from_slice(&shared);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![0.4, -0.2, 1.0]]));
        let w = m.generate_weight(&mut g, e).unwrap();
        let expect: Vec<f64> = shared.iter().map(|s| 0.5 * 1.7 * s).collect();
        assert_eq!(g.value(w).data(), &expect[..]);
    }

    #[test]
    fn eta_two_recovers_shared_weight_exactly() {
        let (m, store) = setup(3, 2, 4, 2.0);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![0.4, -0.2, 1.0]]));
        let w = m.generate_weight(&mut g, e).unwrap();
        assert_eq!(g.value(w).data(), store.value(SHARED_WEIGHT).unwrap().data());
    }

    #[test]
    fn bias_passthrough_and_zero() {
        let (m, mut store) = setup(2, 3, 4, 2.0);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![1.0, -3.0]]));
        let b = m.generate_bias(&mut g, e).unwrap();
        assert_eq!(g.value(b).data(), &[0.0; 3]);
        drop(g);
        store.value_mut("psrg.bias_gen.1.b").unwrap().data_mut().fill(0.25);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![1.0, -3.0]]));
        let b = m.generate_bias(&mut g, e).unwrap();
        assert_eq!(g.value(b).data(), &[0.25; 3]);
    }

    #[test]
    fn personalize_hand_example() {
        let m = Psrg::new(1, 2, 1, 2.0).unwrap();
        let mut g = Graph::new();
        let seq = g.constant(DenseValue::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(domain(&[vec![1.0, 0.0, 1.0, 1.0]]));
        let b = g.constant(domain(&[vec![0.5, -0.5]]));
        let out = m.personalize(&mut g, seq, w, b).unwrap();
        assert_eq!(g.value(out).data(), &[1.5, 2.5]);
    }

    #[test]
    fn initial_map_is_identity() {
        let (m, store) = setup(3, 4, 5, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let seq_val = crate::nn::uniform(&mut rng, &[2, 3, 4], 1);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(crate::nn::uniform(&mut rng, &[2, 3], 1));
        let seq = g.constant(seq_val.clone());
        let out = m.forward(&mut g, e, seq).unwrap();
        assert_eq!(g.value(out), &seq_val);
    }

    /// Scalar-loop evaluation of the weight and bias generators.
    fn reference(store: &ParameterStore, e: &[f64], d_s: usize, d_h: usize, eta: f64) -> (Vec<f64>, Vec<f64>) {
        let p = |n: &str| store.value(n).unwrap().data().to_vec();
        let hidden = |w: &[f64], b: &[f64]| -> Vec<f64> {
            (0..d_h)
                .map(|i| {
                    let mut acc = b[i];
                    for (j, x) in e.iter().enumerate() {
                        acc += w[i * e.len() + j] * x;
                    }
                    acc.max(0.0)
                })
                .collect()
        };
        let out = |w: &[f64], b: &[f64], h: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let mut acc = b[i];
                    for j in 0..d_h {
                        acc += w[i * d_h + j] * h[j];
                    }
                    acc
                })
                .collect()
        };
        let h = hidden(&p("psrg.weight_gen.0.w"), &p("psrg.weight_gen.0.b"));
        let raw = out(&p("psrg.weight_gen.1.w"), &p("psrg.weight_gen.1.b"), &h, d_s * d_s);
        let shared = p(SHARED_WEIGHT);
        let w = raw
            .iter()
            .zip(&shared)
            .map(|(r, s)| eta * (s * (1.0 / (1.0 + (-r).exp()))))
            .collect();
        let h = hidden(&p("psrg.bias_gen.0.w"), &p("psrg.bias_gen.0.b"));
        let b = out(&p("psrg.bias_gen.1.w"), &p("psrg.bias_gen.1.b"), &h, d_s);
        (w, b)
    }

    #[test]
    fn matches_scalar_reference() {
        let (m, mut store) = setup(3, 2, 3, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        store.randomize(&mut rng, 0.8);
        let e = vec![vec![0.2, -0.9, 0.5], vec![-0.3, 0.1, 0.7]];
        let mut g = Graph::with_store(&store, Precision::F64);
        let ev = g.constant(domain(&e));
        let w = m.generate_weight(&mut g, ev).unwrap();
        let b = m.generate_bias(&mut g, ev).unwrap();
        for (i, row) in e.iter().enumerate() {
            let (rw, rb) = reference(&store, row, 2, 3, 1.3);
            for (x, y) in g.value(w).row(i).iter().zip(&rw) {
                assert!((x - y).abs() < 1e-12);
            }
            for (x, y) in g.value(b).row(i).iter().zip(&rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn different_domains_personalize_differently() {
        let (m, mut store) = setup(2, 3, 4, 2.0);
        store.randomize(&mut ChaCha8Rng::seed_from_u64(5), 0.5);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let row = [0.3, -0.4, 0.8];
        let seq = g.constant(DenseValue::new(&[2, 1, 3], [row, row].concat()).unwrap());
        let out = m.forward(&mut g, e, seq).unwrap();
        assert_ne!(g.value(out).row(0), g.value(out).row(1));
    }

    #[test]
    fn rejects_bad_settings() {
        assert!(Psrg::new(2, 2, 3, 0.0).is_err());
        assert!(Psrg::new(2, 2, 3, f64::NAN).is_err());
        assert!(Psrg::new(0, 2, 3, 1.0).is_err());
        let (m, store) = setup(2, 2, 3, 2.0);
        let mut g = Graph::with_store(&store, Precision::F64);
        let e = g.constant(domain(&[vec![1.0, 2.0, 3.0]]));
        assert!(matches!(m.generate_weight(&mut g, e), Err(AdsError::Dimension { .. })));
    }

    #[test]
    fn param_count_matches_store() {
        let (m, store) = setup(3, 4, 5, 2.0);
        assert_eq!(m.param_count(), store.scalar_count(false));
    }

    proptest::proptest! {
        #[test]
        fn generated_weight_within_envelope(seed in 0u64..500, eta in 0.1f64..4.0) {
            let (m, mut store) = setup(3, 3, 4, eta);
            store.randomize(&mut ChaCha8Rng::seed_from_u64(seed), 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let mut g = Graph::with_store(&store, Precision::F64);
            let e = g.constant(crate::nn::uniform(&mut rng, &[4, 3], 1));
            let w = m.generate_weight(&mut g, e).unwrap();
            let shared = store.value(SHARED_WEIGHT).unwrap().data();
            for b in 0..4 {
                for (x, s) in g.value(w).row(b).iter().zip(shared) {
                    proptest::prop_assert!(x.abs() <= eta * s.abs());
                }
            }
        }
    }
}
