use serde::{Deserialize, Serialize};

use crate::behavior::{rows_tensor, BehaviorModel, EncoderVariant, ExpertEmbedding};
use crate::error::{Error, Result};
use crate::experts::ContextSet;
use crate::numcore::nn::{Init, Mlp};
use crate::numcore::{argmax, log_sum_exp, Bound, Parameters, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2dVariant {
    PopNp,
    PopNpAttention,
    /// Deferral score ignores expert identity.
    Single,
    /// Single, with the deferral head tuned per expert on its context set.
    Finetune,
}

impl L2dVariant {
    pub const ALL: [L2dVariant; 4] =
        [L2dVariant::PopNp, L2dVariant::PopNpAttention, L2dVariant::Single, L2dVariant::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            L2dVariant::PopNp => "l2d_pop_np",
            L2dVariant::PopNpAttention => "l2d_pop_np_attention",
            L2dVariant::Single => "single_l2d",
            L2dVariant::Finetune => "finetune",
        }
    }

    /// Encoder the variant conditions on, if any.
    pub fn encoder(self) -> Option<EncoderVariant> {
        match self {
            L2dVariant::PopNp => Some(EncoderVariant::Np),
            L2dVariant::PopNpAttention => Some(EncoderVariant::NpAttention),
            L2dVariant::Single | L2dVariant::Finetune => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeferralDecision {
    Classify(usize),
    Defer(usize),
}

/// Classify with the top class iff the deferral logit is strictly below the
/// best class logit; ties defer.
pub fn decide(g: &[f64], g_defer: f64, expert_id: usize) -> DeferralDecision {
    let best = argmax(g);
    if g_defer < g[best] {
        DeferralDecision::Classify(best)
    } else {
        DeferralDecision::Defer(expert_id)
    }
}

/// `−log softmax(g ⊕ g⊥)[y] − 1[m = y]·log softmax(g ⊕ g⊥)[⊥]`.
pub fn surrogate_loss(g: &[f64], g_defer: f64, y: usize, expert_label: usize) -> Result<f64> {
    if y >= g.len() {
        return Err(Error::Index { index: y, len: g.len() });
    }
    if !g_defer.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in surrogate loss".into()));
    }
    let mut all = g.to_vec();
    all.push(g_defer);
    let lse = log_sum_exp(&all);
    let mut loss = lse - g[y];
    if expert_label == y {
        loss += lse - g_defer;
    }
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Hidden width of the classifier trunk; kept small on purpose.
    pub trunk_width: usize,
    pub defer_hidden: usize,
    /// Feed the trunk a constant input so it can do no better than the class prior.
    pub blind_trunk: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { trunk_width: 8, defer_hidden: 64, blind_trunk: false }
    }
}

/// Classifier logits `g` plus a deferral logit `g⊥`, optionally conditioned
/// on an expert embedding from a frozen behavior encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DeferralModel {
    variant: L2dVariant,
    heads: HeadConfig,
    classes: usize,
    feature_dim: usize,
    params: Parameters,
    trunk: Mlp,
    defer: Mlp,
    encoder: Option<BehaviorModel>,
}

impl DeferralModel {
    pub fn new(
        variant: L2dVariant,
        heads: HeadConfig,
        feature_dim: usize,
        classes: usize,
        encoder: Option<BehaviorModel>,
        seed: u64,
    ) -> Result<Self> {
        match (variant.encoder(), &encoder) {
            (Some(want), Some(enc)) if enc.variant() == want => {
                if enc.feature_dim() != feature_dim || enc.classes() != classes {
                    return Err(Error::Structural("encoder dimensions disagree with the deferral model".into()));
                }
            }
            (None, None) => {}
            (Some(want), _) => {
                return Err(Error::Config(format!("{} needs a {} encoder", variant.name(), want.name())))
            }
            (None, Some(_)) => {
                return Err(Error::Config(format!("{} takes no encoder", variant.name())))
            }
        }
        let psi_dim = encoder.as_ref().map_or(0, |e| e.embed_dim());
        // Trunk and head draw from separate streams so every variant with the
        // same seed starts from the same trunk.
        let mut params = Parameters::new();
        let trunk = Mlp::new(
            &mut params,
            "trunk",
            &[feature_dim, heads.trunk_width, classes],
            Init::Zeros,
            &mut rng::stream(seed, "l2d-trunk"),
        )?;
        let defer = Mlp::new(
            &mut params,
            "defer",
            &[feature_dim + psi_dim, heads.defer_hidden, 1],
            Init::Zeros,
            &mut rng::stream(seed, "l2d-defer"),
        )?;
        Ok(Self { variant, heads, classes, feature_dim, params, trunk, defer, encoder })
    }

    pub fn variant(&self) -> L2dVariant {
        self.variant
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn encoder(&self) -> Option<&BehaviorModel> {
        self.encoder.as_ref()
    }

    pub fn uses_context(&self) -> bool {
        self.encoder.is_some()
    }

    pub(crate) fn with_variant(mut self, variant: L2dVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Expert embedding rows for `queries`, one per query. `None` for
    /// context-free variants.
    pub fn embed(&self, context: &ContextSet, queries: &[&[f64]]) -> Result<Option<ExpertEmbedding>> {
        match &self.encoder {
            None => Ok(None),
            Some(enc) => enc.embed(context, queries).map(Some),
        }
    }

    fn psi_tensor(&self, psi: Option<&ExpertEmbedding>, n: usize) -> Result<Option<Tensor>> {
        match (&self.encoder, psi) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::Config(format!("{} needs an expert embedding", self.variant.name()))),
            (Some(enc), Some(psi)) => {
                let rows: Vec<&[f64]> = (0..n).map(|i| psi.for_query(i)).collect();
                rows_tensor(&rows, enc.embed_dim()).map(Some)
            }
        }
    }

    /// `(g, g⊥)` as n×K and n×1 tape values.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        psi: Option<Var>,
    ) -> (Var, Var) {
        let trunk_in = if self.heads.blind_trunk {
            let (n, f) = tape.shape(x);
            tape.constant(Tensor::zeros(&[n, f]))
        } else {
            x
        };
        let g = self.trunk.forward(tape, bound, trunk_in);
        let defer_in = match psi {
            Some(p) => tape.concat_cols(&[x, p]),
            None => x,
        };
        let g_defer = self.defer.forward(tape, bound, defer_in);
        (g, g_defer)
    }

    /// Mean surrogate loss over a batch.
    pub fn surrogate_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        queries: &[&[f64]],
        psi: Option<&ExpertEmbedding>,
        labels: &[usize],
        expert_labels: &[usize],
    ) -> Result<Var> {
        let n = queries.len();
        if n == 0 || labels.len() != n || expert_labels.len() != n {
            return Err(Error::Structural("surrogate batch sizes disagree".into()));
        }
        let x = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let p = self.psi_tensor(psi, n)?.map(|t| tape.constant(t));
        let (g, g_defer) = self.forward(tape, bound, x, p);
        let all = tape.concat_cols(&[g, g_defer]);
        let w = vec![1.0 / n as f64; n];
        let class_term = tape.weighted_cross_entropy(all, labels, &w)?;
        let defer_targets = vec![self.classes; n];
        let defer_w: Vec<f64> = labels
            .iter()
            .zip(expert_labels)
            .map(|(y, m)| if y == m { 1.0 / n as f64 } else { 0.0 })
            .collect();
        let defer_term = tape.weighted_cross_entropy(all, &defer_targets, &defer_w)?;
        Ok(tape.add(class_term, defer_term))
    }

    /// Plain cross-entropy of the classifier trunk alone.
    pub fn classifier_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        queries: &[&[f64]],
        labels: &[usize],
    ) -> Result<Var> {
        let n = queries.len();
        let x = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let trunk_in = if self.heads.blind_trunk { tape.constant(Tensor::zeros(&[n, self.feature_dim])) } else { x };
        let g = self.trunk.forward(tape, bound, trunk_in);
        tape.weighted_cross_entropy(g, labels, &vec![1.0 / n as f64; n])
    }

    /// `(g, g⊥)` per query, without recording gradients.
    pub fn logits(
        &self,
        queries: &[&[f64]],
        psi: Option<&ExpertEmbedding>,
    ) -> Result<Vec<(Vec<f64>, f64)>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let x = tape.constant(rows_tensor(queries, self.feature_dim)?);
        let p = self.psi_tensor(psi, queries.len())?.map(|t| tape.constant(t));
        let (g, g_defer) = self.forward(&mut tape, &bound, x, p);
        tape.check_finite()?;
        let (gv, dv) = (tape.value(g), tape.value(g_defer));
        Ok((0..queries.len()).map(|r| (gv.row_slice(r).to_vec(), dv.row_slice(r)[0])).collect())
    }

    pub fn decide_batch(
        &self,
        queries: &[&[f64]],
        psi: Option<&ExpertEmbedding>,
        expert_id: usize,
    ) -> Result<Vec<DeferralDecision>> {
        Ok(self.logits(queries, psi)?.iter().map(|(g, d)| decide(g, *d, expert_id)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::ArchitectureConfig;
    use crate::numcore::grad_check;

    fn perturb(params: &mut Parameters, seed: u64) {
        let mut r = rng::rng(seed);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            for v in params.get_mut(id).data_mut() {
                *v += 0.5 * rng::normal(&mut r);
            }
        }
    }

    fn psi(v: f64, d: usize) -> ExpertEmbedding {
        ExpertEmbedding { expert_id: 0, rows: vec![vec![v; d]], query_specific: false }
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(&[2.0, 1.0], 1.5, 3), DeferralDecision::Classify(0));
        assert_eq!(decide(&[2.0, 1.0], 2.0, 3), DeferralDecision::Defer(3));
        assert_eq!(decide(&[1.0, 1.0], 0.0, 3), DeferralDecision::Classify(0));
    }

    #[test]
    fn surrogate_closed_forms() {
        assert!((surrogate_loss(&[0.0, 0.0], 0.0, 1, 1).unwrap() - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert!((surrogate_loss(&[0.0, 0.0], 0.0, 1, 0).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(surrogate_loss(&[0.0, 0.0], 0.0, 2, 0), Err(Error::Index { .. })));
        assert!(matches!(surrogate_loss(&[0.0, f64::NAN], 0.0, 0, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let m = DeferralModel::new(L2dVariant::Single, HeadConfig::default(), 3, 43, None, 0).unwrap();
        let out = m.logits(&[&[1.0, 2.0, 3.0]], None).unwrap();
        assert_eq!(out[0].0, vec![0.0; 43]);
        assert_eq!(out[0].1, 0.0);
    }

    #[test]
    fn single_ignores_embedding_and_pop_uses_it() {
        let mut single = DeferralModel::new(L2dVariant::Single, HeadConfig::default(), 3, 4, None, 0).unwrap();
        perturb(single.params_mut(), 1);
        let q: &[f64] = &[0.3, -0.2, 0.9];
        let a = single.logits(&[q], Some(&psi(1.0, 8))).unwrap();
        let b = single.logits(&[q], Some(&psi(-3.0, 8))).unwrap();
        assert_eq!(a, b);

        let arch = ArchitectureConfig { embed_dim: 8, heads: 2, hidden: 8 };
        let enc = BehaviorModel::new(EncoderVariant::Np, arch, 3, 4, 0).unwrap();
        let mut pop = DeferralModel::new(L2dVariant::PopNp, HeadConfig::default(), 3, 4, Some(enc), 0).unwrap();
        perturb(pop.params_mut(), 1);
        let a = pop.logits(&[q], Some(&psi(1.0, 8))).unwrap();
        let b = pop.logits(&[q], Some(&psi(-3.0, 8))).unwrap();
        assert_eq!(a[0].0, b[0].0);
        assert_ne!(a[0].1, b[0].1);
    }

    #[test]
    fn encoder_must_match_variant() {
        let arch = ArchitectureConfig { embed_dim: 4, heads: 2, hidden: 4 };
        let np = BehaviorModel::new(EncoderVariant::Np, arch, 3, 4, 0).unwrap();
        let h = HeadConfig::default();
        assert!(DeferralModel::new(L2dVariant::PopNpAttention, h, 3, 4, Some(np.clone()), 0).is_err());
        assert!(DeferralModel::new(L2dVariant::Single, h, 3, 4, Some(np), 0).is_err());
        assert!(DeferralModel::new(L2dVariant::PopNp, h, 3, 4, None, 0).is_err());
    }

    #[test]
    fn tape_surrogate_matches_scalar_and_gradients() {
        let arch = ArchitectureConfig { embed_dim: 4, heads: 2, hidden: 4 };
        let enc = BehaviorModel::new(EncoderVariant::NpAttention, arch, 3, 4, 0).unwrap();
        let mut m =
            DeferralModel::new(L2dVariant::PopNpAttention, HeadConfig::default(), 3, 4, Some(enc), 2).unwrap();
        perturb(m.params_mut(), 6);
        let qs: [&[f64]; 3] = [&[0.3, -0.2, 0.9], &[1.0, 0.5, -0.5], &[-0.7, 0.1, 0.2]];
        let e = ExpertEmbedding {
            expert_id: 1,
            rows: (0..3).map(|i| vec![0.1 * i as f64, -0.2, 0.4, 0.0]).collect(),
            query_specific: true,
        };
        let (ys, ms) = ([0, 2, 3], [0, 1, 3]);
        let mut tape = Tape::new();
        let b = tape.bind(m.params(), false);
        let v = m.surrogate_batch(&mut tape, &b, &qs, Some(&e), &ys, &ms).unwrap();
        let logits = m.logits(&qs, Some(&e)).unwrap();
        let expected: f64 = logits
            .iter()
            .zip(ys.iter().zip(&ms))
            .map(|((g, d), (y, mm))| surrogate_loss(g, *d, *y, *mm).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((tape.value(v).item() - expected).abs() < 1e-12);
        let err = grad_check(m.params(), 1e-5, |t, b| m.surrogate_batch(t, b, &qs, Some(&e), &ys, &ms)).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
