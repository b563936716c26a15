use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ContextSet;
use crate::numcore::nn::{Embedding, Init, Mlp, MultiHeadAttention};
use crate::numcore::{softmax, Bound, Parameters, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Per-element MLP, mean pooling and an MLP aggregator.
    Np,
    /// Per-element MLP, self-attention over the set, and query cross-attention.
    NpAttention,
}

impl EncoderVariant {
    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Np => "np",
            EncoderVariant::NpAttention => "np_attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub hidden: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self { embed_dim: 64, heads: 4, hidden: 64 }
    }
}

/// The expert embedding for a batch of queries. The NP variant yields one
/// row shared by every query; the attention variant yields one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEmbedding {
    pub expert_id: usize,
    pub rows: Vec<Vec<f64>>,
    pub query_specific: bool,
}

impl ExpertEmbedding {
    /// Embedding used for query `i`.
    pub fn for_query(&self, i: usize) -> &[f64] {
        if self.query_specific {
            &self.rows[i]
        } else {
            &self.rows[0]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Pooling {
    Mean { aggregator: Mlp },
    Attention { self_attn: MultiHeadAttention, cross_attn: MultiHeadAttention },
}

/// Context-set encoder plus binary correctness head.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorModel {
    variant: EncoderVariant,
    arch: ArchitectureConfig,
    classes: usize,
    feature_dim: usize,
    params: Parameters,
    true_label: Embedding,
    expert_label: Embedding,
    element: Mlp,
    pooling: Pooling,
    predictor: Mlp,
}

pub(crate) fn rows_tensor(rows: &[&[f64]], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::Structural(format!("expected {dim} features, got {}", r.len())));
        }
        data.extend_from_slice(r);
    }
    Tensor::matrix(rows.len(), dim, data)
}

impl BehaviorModel {
    pub fn new(
        variant: EncoderVariant,
        arch: ArchitectureConfig,
        feature_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = arch.embed_dim;
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("embedding width {d} must be even and ≥ 2")));
        }
        let mut rng = rng::stream(seed, "behavior-init");
        let mut params = Parameters::new();
        let true_label = Embedding::new(&mut params, "enc.label_y", classes, d / 2, &mut rng)?;
        let expert_label = Embedding::new(&mut params, "enc.label_h", classes, d / 2, &mut rng)?;
        let element = Mlp::new(
            &mut params,
            "enc.element",
            &[feature_dim + d, arch.hidden, d],
            Init::Xavier,
            &mut rng,
        )?;
        let pooling = match variant {
            EncoderVariant::Np => Pooling::Mean {
                aggregator: Mlp::new(&mut params, "enc.aggregate", &[d, arch.hidden, d], Init::Xavier, &mut rng)?,
            },
            EncoderVariant::NpAttention => Pooling::Attention {
                self_attn: MultiHeadAttention::new(&mut params, "enc.self", d, d, d, arch.heads, &mut rng)?,
                cross_attn: MultiHeadAttention::new(
                    &mut params,
                    "ex.cross",
                    feature_dim,
                    d,
                    d,
                    arch.heads,
                    &mut rng,
                )?,
            },
        };
        let predictor = Mlp::new(
            &mut params,
            "ex.head",
            &[feature_dim + d, arch.hidden, 2],
            Init::Zeros,
            &mut rng,
        )?;
        Ok(Self {
            variant,
            arch,
            classes,
            feature_dim,
            params,
            true_label,
            expert_label,
            element,
            pooling,
            predictor,
        })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.variant
    }

    pub fn arch(&self) -> ArchitectureConfig {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.arch.embed_dim
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Context-aware vector per context element, in input order (B×d).
    pub fn encode_context(&self, tape: &mut Tape, bound: &Bound, context: &ContextSet) -> Result<Var> {
        if context.is_empty() {
            return Err(Error::Config("context set is empty".into()));
        }
        let feats: Vec<&[f64]> = context.triplets.iter().map(|t| t.features.as_slice()).collect();
        let x = tape.constant(rows_tensor(&feats, self.feature_dim)?);
        let ys: Vec<usize> = context.triplets.iter().map(|t| t.label).collect();
        let hs: Vec<usize> = context.triplets.iter().map(|t| t.expert_label).collect();
        let ey = self.true_label.forward(tape, bound, &ys)?;
        let eh = self.expert_label.forward(tape, bound, &hs)?;
        let joined = tape.concat_cols(&[x, ey, eh]);
        let r = self.element.forward(tape, bound, joined);
        Ok(match &self.pooling {
            Pooling::Mean { .. } => r,
            Pooling::Attention { self_attn, .. } => {
                let mixed = self_attn.forward(tape, bound, r, r);
                tape.add(r, mixed)
            }
        })
    }

    /// ψ for a batch of query features (n×f). NP returns a single row.
    pub fn expert_embedding(&self, tape: &mut Tape, bound: &Bound, encoded: Var, queries: Var) -> Var {
        match &self.pooling {
            Pooling::Mean { aggregator } => {
                let pooled = tape.mean_rows(encoded);
                aggregator.forward(tape, bound, pooled)
            }
            Pooling::Attention { cross_attn, .. } => cross_attn.forward(tape, bound, queries, encoded),
        }
    }

    /// Two logits per query: index 1 means "the expert labels this query correctly".
    pub fn correctness_logits(&self, tape: &mut Tape, bound: &Bound, queries: Var, psi: Var) -> Var {
        let (n, _) = tape.shape(queries);
        let psi = if tape.shape(psi).0 == 1 && n > 1 { tape.repeat_rows(psi, n) } else { psi };
        let joined = tape.concat_cols(&[queries, psi]);
        self.predictor.forward(tape, bound, joined)
    }

    /// Correctness logits for raw query rows given a context set.
    pub fn logits_for(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        context: &ContextSet,
        queries: &[&[f64]],
    ) -> Result<Var> {
        let encoded = self.encode_context(tape, bound, context)?;
        let q = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let psi = self.expert_embedding(tape, bound, encoded, q);
        Ok(self.correctness_logits(tape, bound, q, psi))
    }

    /// ψ for each query, computed without recording gradients.
    pub fn embed(&self, context: &ContextSet, queries: &[&[f64]]) -> Result<ExpertEmbedding> {
        if queries.is_empty() {
            return Err(Error::Config("no queries".into()));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let encoded = self.encode_context(&mut tape, &bound, context)?;
        let q = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let psi = self.expert_embedding(&mut tape, &bound, encoded, q);
        tape.check_finite()?;
        let v = tape.value(psi);
        Ok(ExpertEmbedding {
            expert_id: context.expert_id,
            rows: (0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect(),
            query_specific: self.variant == EncoderVariant::NpAttention,
        })
    }

    /// Probability that the expert labels each query correctly.
    pub fn predict_correctness(&self, context: &ContextSet, queries: &[&[f64]]) -> Result<Vec<f64>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let logits = self.logits_for(&mut tape, &bound, context, queries)?;
        tape.check_finite()?;
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|r| softmax(v.row_slice(r))[1]).collect())
    }

    /// Correctness head applied to a precomputed embedding.
    pub fn predict_with_embedding(&self, queries: &[&[f64]], psi: &ExpertEmbedding) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let q = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let rows: Vec<&[f64]> = (0..queries.len()).map(|i| psi.for_query(i)).collect();
        let p = tape.constant(rows_tensor(&rows, self.arch.embed_dim)?);
        let logits = self.correctness_logits(&mut tape, &bound, q, p);
        let v = tape.value(logits);
        Ok((0..v.rows()).map(|r| softmax(v.row_slice(r))[1]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::Triplet;
    use rand::seq::SliceRandom;

    fn context(n: usize, f: usize, classes: usize, seed: u64) -> ContextSet {
        let triplets = (0..n)
            .map(|i| {
                let s = rng::hash2(seed, i as u64);
                Triplet {
                    instance_id: i,
                    features: (0..f).map(|j| ((s >> j) % 97) as f64 / 50.0 - 1.0).collect(),
                    label: (s % classes as u64) as usize,
                    expert_label: ((s >> 20) % classes as u64) as usize,
                }
            })
            .collect();
        ContextSet { expert_id: 0, triplets }
    }

    fn perturb(model: &mut BehaviorModel, seed: u64) {
        let mut r = rng::rng(seed);
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += 0.3 * rng::normal(&mut r);
            }
        }
    }

    fn tiny(variant: EncoderVariant) -> BehaviorModel {
        let arch = ArchitectureConfig { embed_dim: 8, heads: 2, hidden: 8 };
        BehaviorModel::new(variant, arch, 3, 4, 1).unwrap()
    }

    #[test]
    fn zero_head_predicts_half() {
        for variant in [EncoderVariant::Np, EncoderVariant::NpAttention] {
            let m = tiny(variant);
            let ctx = context(5, 3, 4, 2);
            let q = [0.3, -0.1, 0.7];
            let p = m.predict_correctness(&ctx, &[&q, &q]).unwrap();
            assert_eq!(p, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn embedding_is_permutation_invariant() {
        for variant in [EncoderVariant::Np, EncoderVariant::NpAttention] {
            let mut m = tiny(variant);
            perturb(&mut m, 9);
            let ctx = context(7, 3, 4, 5);
            let qs: [&[f64]; 2] = [&[0.2, 0.4, -0.3], &[1.0, 0.0, 0.5]];
            let base = m.embed(&ctx, &qs).unwrap();
            let mut r = rng::rng(3);
            for _ in 0..20 {
                let mut shuffled = ctx.clone();
                shuffled.triplets.shuffle(&mut r);
                let psi = m.embed(&shuffled, &qs).unwrap();
                for (a, b) in base.rows.iter().flatten().zip(psi.rows.iter().flatten()) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encoding_is_permutation_equivariant() {
        let mut m = tiny(EncoderVariant::NpAttention);
        perturb(&mut m, 4);
        let ctx = context(6, 3, 4, 8);
        let encode = |c: &ContextSet| {
            let mut tape = Tape::new();
            let b = tape.bind(m.params(), false);
            let v = m.encode_context(&mut tape, &b, c).unwrap();
            tape.value(v).clone()
        };
        let base = encode(&ctx);
        let mut rev = ctx.clone();
        rev.triplets.reverse();
        let out = encode(&rev);
        let n = ctx.len();
        for i in 0..n {
            for (a, b) in base.row_slice(i).iter().zip(out.row_slice(n - 1 - i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn singleton_context_shape() {
        let m = tiny(EncoderVariant::NpAttention);
        let ctx = context(1, 3, 4, 1);
        let mut tape = Tape::new();
        let b = tape.bind(m.params(), false);
        let v = m.encode_context(&mut tape, &b, &ctx).unwrap();
        assert_eq!(tape.shape(v), (1, 8));
    }

    #[test]
    fn duplicated_context_matches_singleton() {
        let mut m = tiny(EncoderVariant::NpAttention);
        perturb(&mut m, 2);
        let one = context(1, 3, 4, 6);
        let mut many = one.clone();
        for i in 1..6 {
            let mut t = one.triplets[0].clone();
            t.instance_id = i;
            many.triplets.push(t);
        }
        let q: &[f64] = &[0.1, 0.2, 0.3];
        let a = m.embed(&one, &[q]).unwrap();
        let b = m.embed(&many, &[q]).unwrap();
        for (x, y) in a.rows[0].iter().zip(&b.rows[0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn np_singleton_is_aggregator_of_element() {
        let mut m = tiny(EncoderVariant::Np);
        perturb(&mut m, 7);
        let ctx = context(1, 3, 4, 3);
        let q: &[f64] = &[0.0, 0.0, 0.0];
        let psi = m.embed(&ctx, &[q]).unwrap();
        let Pooling::Mean { aggregator } = &m.pooling else { unreachable!() };
        let mut tape = Tape::new();
        let b = tape.bind(m.params(), false);
        let r = m.encode_context(&mut tape, &b, &ctx).unwrap();
        let out = aggregator.forward(&mut tape, &b, r);
        assert_eq!(tape.value(out).data(), psi.rows[0].as_slice());
        assert!(!psi.query_specific);
    }

    #[test]
    fn feature_mismatch_is_structural() {
        let m = tiny(EncoderVariant::Np);
        let ctx = context(3, 2, 4, 1);
        assert!(matches!(m.embed(&ctx, &[&[0.0, 0.0, 0.0]]), Err(Error::Structural(_))));
    }

    #[test]
    fn self_attention_by_hand() {
        // d = 2, one head, B = 2. The self-attention weights are set by hand and the
        // element representations are read off with the output projection zeroed.
        let arch = ArchitectureConfig { embed_dim: 2, heads: 1, hidden: 4 };
        let mut m = BehaviorModel::new(EncoderVariant::NpAttention, arch, 2, 3, 5).unwrap();
        perturb(&mut m, 1);
        let ctx = context(2, 2, 3, 11);
        let set = |m: &mut BehaviorModel, name: &str, vals: &[f64]| {
            let id = m.params().id(name).unwrap();
            m.params_mut().get_mut(id).data_mut().copy_from_slice(vals);
        };
        let encode = |m: &BehaviorModel| {
            let mut tape = Tape::new();
            let b = tape.bind(m.params(), false);
            let v = m.encode_context(&mut tape, &b, &ctx).unwrap();
            tape.value(v).data().to_vec()
        };
        set(&mut m, "enc.self.o.weight", &[0.0; 4]);
        set(&mut m, "enc.self.o.bias", &[0.0; 2]);
        let r = encode(&m);
        let wq = [0.5, -1.0, 0.25, 2.0];
        let wk = [1.0, 0.0, -0.5, 1.5];
        let wv = [2.0, 1.0, 0.0, -1.0];
        let wo = [1.0, 0.5, -0.5, 1.0];
        let (bq, bk, bv, bo) = ([0.1, 0.0], [0.0, -0.2], [0.3, 0.3], [0.05, -0.05]);
        for (n, w) in [("q", &wq), ("k", &wk), ("v", &wv), ("o", &wo)] {
            set(&mut m, &format!("enc.self.{n}.weight"), w);
        }
        for (n, b) in [("q", &bq), ("k", &bk), ("v", &bv), ("o", &bo)] {
            set(&mut m, &format!("enc.self.{n}.bias"), b);
        }
        let out = encode(&m);
        let lin = |x: &[f64], w: &[f64; 4], b: &[f64; 2]| -> [f64; 2] {
            [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
        };
        let rows = [&r[0..2], &r[2..4]];
        let q: Vec<_> = rows.iter().map(|x| lin(x, &wq, &bq)).collect();
        let k: Vec<_> = rows.iter().map(|x| lin(x, &wk, &bk)).collect();
        let v: Vec<_> = rows.iter().map(|x| lin(x, &wv, &bv)).collect();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            let mix = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
            let o = lin(&mix, &wo, &bo);
            for c in 0..2 {
                assert!((out[2 * i + c] - (rows[i][c] + o[c])).abs() < 1e-8);
            }
        }
    }
}
