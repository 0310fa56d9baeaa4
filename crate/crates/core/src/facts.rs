//! Synthetic facts: edit keys averaged over perturbed contexts, target values
//! found by descent through the frozen upper part of the model, and the
//! preserved key set.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::feature::{FeatureMap, TanhMap};
use crate::rng;
use crate::solvers;
use crate::toymodel::{argmax, log_softmax, softmax, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRecord {
    pub fact_id: u64,
    #[serde(with = "b64_vector")]
    pub base_context: DVector<f64>,
    #[serde(with = "b64_vector")]
    pub edit_key: DVector<f64>,
    #[serde(with = "b64_vector")]
    pub target_value: DVector<f64>,
    #[serde(with = "b64_vectors")]
    pub paraphrase_keys: Vec<DVector<f64>>,
    #[serde(with = "b64_vectors", default)]
    pub paraphrase_contexts: Vec<DVector<f64>>,
    pub old_object: usize,
    pub new_object: usize,
}

impl FactRecord {
    pub fn validate(&self) -> Result<()> {
        let d_k = self.edit_key.len();
        if let Some(bad) = self.paraphrase_keys.iter().find(|k| k.len() != d_k) {
            return Err(Error::dim("paraphrase key", d_k, bad.len()));
        }
        let d_ctx = self.base_context.len();
        if let Some(bad) = self.paraphrase_contexts.iter().find(|c| c.len() != d_ctx) {
            return Err(Error::dim("paraphrase context", d_ctx, bad.len()));
        }
        let finite = std::iter::once(&self.base_context)
            .chain([&self.edit_key, &self.target_value])
            .chain(&self.paraphrase_keys)
            .chain(&self.paraphrase_contexts)
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite(format!("fact {}", self.fact_id)));
        }
        if self.old_object == self.new_object {
            return Err(Error::Precondition(format!(
                "fact {}: old and new object are both {}",
                self.fact_id, self.old_object
            )));
        }
        Ok(())
    }
}

/// Keys to preserve at one layer, plus held-out facts whose keys are among them.
#[derive(Debug, Clone)]
pub struct PreservationSet {
    keys: DMatrix<f64>,
    covariance: Option<DMatrix<f64>>,
    pub neighborhood_facts: Vec<FactRecord>,
}

impl PreservationSet {
    pub fn new(keys: DMatrix<f64>, neighborhood_facts: Vec<FactRecord>) -> Self {
        Self {
            keys,
            covariance: None,
            neighborhood_facts,
        }
    }

    pub fn keys(&self) -> &DMatrix<f64> {
        &self.keys
    }

    /// Computes and caches `C0 = K0 K0^T`.
    pub fn cache_covariance(&mut self) -> Result<&DMatrix<f64>> {
        if self.covariance.is_none() {
            self.covariance = Some(solvers::accumulate_covariance(&self.keys)?.matrix);
        }
        Ok(self.covariance.as_ref().expect("just cached"))
    }

    pub fn covariance(&self) -> Option<&DMatrix<f64>> {
        self.covariance.as_ref()
    }
}

/// Averaging parameters for edit keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeySynthesis {
    pub prefix_count: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for KeySynthesis {
    fn default() -> Self {
        Self {
            prefix_count: 50,
            noise_scale: 0.1,
            seed: 0x006b_6579,
        }
    }
}

/// Adapts a model's forward chain into a feature map onto one layer's keys.
pub struct LayerKeyMap<'a> {
    pub model: &'a ToyModel,
    pub layer: usize,
}

impl FeatureMap for LayerKeyMap<'_> {
    fn input_dim(&self) -> usize {
        self.model.d_ctx()
    }
    fn output_dim(&self) -> usize {
        self.model.d_k()
    }
    fn map(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        if input.len() != self.model.d_ctx() {
            return Err(Error::dim("context", self.model.d_ctx(), input.len()));
        }
        self.model.layer_key(self.layer, input)
    }
}

/// Mean of `feature_map(base + noise_scale * eps_j)` over `prefix_count`
/// draws. Draw `j` uses its own stream derived from `(rng_seed, j)`, so the
/// result does not depend on evaluation order.
pub fn synthesize_key(
    base_context: &DVector<f64>,
    prefix_count: usize,
    noise_scale: f64,
    feature_map: &dyn FeatureMap,
    rng_seed: u64,
) -> Result<DVector<f64>> {
    if prefix_count == 0 {
        return Err(Error::Precondition("prefix_count must be >= 1".into()));
    }
    if !(noise_scale >= 0.0) {
        return Err(Error::Precondition(format!(
            "noise_scale must be >= 0, got {noise_scale}"
        )));
    }
    if base_context.len() != feature_map.input_dim() {
        return Err(Error::dim("base context", feature_map.input_dim(), base_context.len()));
    }
    if noise_scale == 0.0 {
        return feature_map.map(base_context);
    }
    let mut sum = DVector::zeros(feature_map.output_dim());
    for j in 0..prefix_count {
        sum += feature_map.map(&perturbed(base_context, noise_scale, rng_seed, j as u64))?;
    }
    Ok(sum / prefix_count as f64)
}

/// The `j`-th perturbation of a context used by [`synthesize_key`].
pub fn perturbed(base: &DVector<f64>, noise_scale: f64, seed: u64, j: u64) -> DVector<f64> {
    let mut r = rng::rng(rng::derive_seed(seed, &[j]));
    base + rng::gaussian_vector(&mut r, base.len(), noise_scale)
}

/// Edit key for a fact at `layer`, seeded by the fact id.
pub fn fact_key(model: &ToyModel, layer: usize, fact: &FactRecord, synth: &KeySynthesis) -> Result<DVector<f64>> {
    synthesize_key(
        &fact.base_context,
        synth.prefix_count,
        synth.noise_scale,
        &LayerKeyMap { model, layer },
        rng::derive_seed(synth.seed, &[fact.fact_id]),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValueOptions {
    pub kl_weight: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            kl_weight: 0.0625,
            steps: 100,
            step_size: 1.0,
        }
    }
}

/// The fixed parts of the value objective for one `(layer, v_init)`.
pub struct ValueObjective<'a> {
    model: &'a ToyModel,
    layer: usize,
    new_object: usize,
    kl_weight: f64,
    v_init: DVector<f64>,
    probe_output: DVector<f64>,
    probe_log_probs: DVector<f64>,
}

impl<'a> ValueObjective<'a> {
    /// `v_init = W_layer k_e`. The KL term compares the readout on the
    /// model's probe context, with the same shift `v - v_init` applied to
    /// the probe's layer output, against the unshifted readout.
    pub fn new(
        model: &'a ToyModel,
        layer: usize,
        k_e: &DVector<f64>,
        new_object: usize,
        kl_weight: f64,
    ) -> Result<Self> {
        let w = model.weights(layer)?;
        if k_e.len() != w.ncols() {
            return Err(Error::dim("edit key", w.ncols(), k_e.len()));
        }
        if new_object >= model.vocab() {
            return Err(Error::Precondition(format!(
                "object {new_object} outside vocab {}",
                model.vocab()
            )));
        }
        if !(kl_weight >= 0.0) {
            return Err(Error::Precondition(format!("kl_weight must be >= 0, got {kl_weight}")));
        }
        let probe_output = model.layer_output(layer, model.probe_context())?;
        let (probe_logits, _) = model.logits_from_output(layer, &probe_output)?;
        Ok(Self {
            model,
            layer,
            new_object,
            kl_weight,
            v_init: w * k_e,
            probe_output,
            probe_log_probs: log_softmax(&probe_logits),
        })
    }

    pub fn initial_value(&self) -> &DVector<f64> {
        &self.v_init
    }

    pub fn target_probability(&self, v: &DVector<f64>) -> Result<f64> {
        let (z, _) = self.model.logits_from_output(self.layer, v)?;
        Ok(softmax(&z)[self.new_object])
    }

    /// Loss and its gradient with respect to `v`.
    pub fn loss_and_gradient(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (z, trace) = self.model.logits_from_output(self.layer, v)?;
        let logp = log_softmax(&z);
        let mut g_z = logp.map(f64::exp);
        g_z[self.new_object] -= 1.0;
        let mut loss = -logp[self.new_object];
        let mut grad = self.model.output_gradient(&trace, &g_z);

        if self.kl_weight > 0.0 {
            let shifted = &self.probe_output + (v - &self.v_init);
            let (zp, trace_p) = self.model.logits_from_output(self.layer, &shifted)?;
            let logp_p = log_softmax(&zp);
            let p = logp_p.map(f64::exp);
            let log_ratio = &logp_p - &self.probe_log_probs;
            let kl = p.dot(&log_ratio);
            // d KL / d z_j = p_j (log p_j - log q_j - KL)
            let g_zp = p.component_mul(&log_ratio.add_scalar(-kl));
            loss += self.kl_weight * kl;
            grad += self.model.output_gradient(&trace_p, &g_zp) * self.kl_weight;
        }
        Ok((loss, grad))
    }
}

#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub value: DVector<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_probability: f64,
    pub final_probability: f64,
}

/// Fixed-step gradient descent on the value objective from `W_layer k_e`.
pub fn solve_value_traced(
    model: &ToyModel,
    layer: usize,
    k_e: &DVector<f64>,
    new_object: usize,
    options: &ValueOptions,
) -> Result<ValueSolution> {
    if options.steps == 0 {
        return Err(Error::Precondition("steps must be >= 1".into()));
    }
    if !(options.step_size > 0.0) {
        return Err(Error::Precondition(format!(
            "step_size must be > 0, got {}",
            options.step_size
        )));
    }
    let objective = ValueObjective::new(model, layer, k_e, new_object, options.kl_weight)?;
    let mut v = objective.initial_value().clone();
    let initial_probability = objective.target_probability(&v)?;
    let mut initial_loss = f64::NAN;
    let mut loss = f64::NAN;
    for step in 0..=options.steps {
        let (l, g) = objective
            .loss_and_gradient(&v)
            .map_err(|_| Error::Divergence { step })?;
        if !l.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step });
        }
        if step == 0 {
            initial_loss = l;
        }
        loss = l;
        if step < options.steps {
            v -= g * options.step_size;
        }
    }
    let final_probability = objective.target_probability(&v)?;
    if !(final_probability > initial_probability) {
        return Err(Error::NoProgress {
            initial: initial_probability,
            final_prob: final_probability,
        });
    }
    Ok(ValueSolution {
        value: v,
        initial_loss,
        final_loss: loss,
        initial_probability,
        final_probability,
    })
}

pub fn solve_value(
    model: &ToyModel,
    layer: usize,
    k_e: &DVector<f64>,
    new_object: usize,
    kl_weight: f64,
    steps: usize,
    step_size: f64,
) -> Result<DVector<f64>> {
    let options = ValueOptions {
        kl_weight,
        steps,
        step_size,
    };
    Ok(solve_value_traced(model, layer, k_e, new_object, &options)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FactOptions {
    pub keys: KeySynthesis,
    pub paraphrases: usize,
    pub paraphrase_noise: f64,
}

impl Default for FactOptions {
    fn default() -> Self {
        Self {
            keys: KeySynthesis::default(),
            paraphrases: 5,
            paraphrase_noise: 0.1,
        }
    }
}

pub fn generate_fact_set(
    count: usize,
    d_ctx: usize,
    d_k: usize,
    d_v: usize,
    vocab: usize,
    rng_seed: u64,
) -> Result<Vec<FactRecord>> {
    generate_fact_set_with(count, d_ctx, d_k, d_v, vocab, 0, &FactOptions::default(), rng_seed)
}

/// Model-independent fact records. Keys come from a seed-derived stand-in
/// map and target values are gaussian placeholders; [`bind_to_model`]
/// replaces both for a concrete model. Fact ids are `first_id..first_id+count`.
#[allow(clippy::too_many_arguments)]
pub fn generate_fact_set_with(
    count: usize,
    d_ctx: usize,
    d_k: usize,
    d_v: usize,
    vocab: usize,
    first_id: u64,
    options: &FactOptions,
    rng_seed: u64,
) -> Result<Vec<FactRecord>> {
    if count == 0 {
        return Err(Error::Precondition("fact count must be >= 1".into()));
    }
    if vocab < 2 {
        return Err(Error::Precondition(format!(
            "vocab {vocab} cannot hold distinct old and new objects"
        )));
    }
    let mut map_rng = rng::rng(rng::derive_seed(rng_seed, &[u64::MAX]));
    let map = TanhMap::random(&mut map_rng, d_ctx, d_k, 1.5, 0.1);
    (0..count as u64)
        .map(|i| {
            let fact_id = first_id + i;
            let mut r = rng::rng(rng::derive_seed(rng_seed, &[fact_id]));
            let base_context = rng::gaussian_vector(&mut r, d_ctx, 1.0);
            let target_value = rng::gaussian_vector(&mut r, d_v, 1.0);
            let old_object = rand::Rng::random_range(&mut r, 0..vocab);
            let new_object = (old_object + rand::Rng::random_range(&mut r, 1..vocab)) % vocab;
            let paraphrase_contexts: Vec<_> = (0..options.paraphrases)
                .map(|_| &base_context + rng::gaussian_vector(&mut r, d_ctx, options.paraphrase_noise))
                .collect();
            let paraphrase_keys = paraphrase_contexts.iter().map(|c| map.map(c)).collect::<Result<_>>()?;
            let edit_key = synthesize_key(
                &base_context,
                options.keys.prefix_count,
                options.keys.noise_scale,
                &map,
                rng::derive_seed(options.keys.seed, &[fact_id]),
            )?;
            Ok(FactRecord {
                fact_id,
                base_context,
                edit_key,
                target_value,
                paraphrase_keys,
                paraphrase_contexts,
                old_object,
                new_object,
            })
        })
        .collect()
}

/// Rewrites facts against `model` at `layer`: edit and paraphrase keys come
/// from the model's forward chain, `old_object` becomes the model's current
/// prediction, and `target_value` is solved so the readout prefers
/// `new_object`.
pub fn bind_to_model(
    model: &ToyModel,
    layer: usize,
    facts: &mut [FactRecord],
    synth: &KeySynthesis,
    values: &ValueOptions,
    mode: Execution,
) -> Result<()> {
    let vocab = model.vocab();
    let bound = exec::try_map_indexed(mode, facts.len(), |i| {
        let mut f = facts[i].clone();
        f.old_object = argmax(&model.logits(&f.base_context)?);
        if f.new_object == f.old_object || f.new_object >= vocab {
            f.new_object = (f.old_object + 1 + f.new_object % (vocab - 1)) % vocab;
            if f.new_object == f.old_object {
                f.new_object = (f.old_object + 1) % vocab;
            }
        }
        f.edit_key = fact_key(model, layer, &f, synth)?;
        f.paraphrase_keys = f
            .paraphrase_contexts
            .iter()
            .map(|c| model.layer_key(layer, c))
            .collect::<Result<_>>()?;
        f.target_value = solve_value_traced(model, layer, &f.edit_key, f.new_object, values)?.value;
        Ok::<_, Error>(f)
    })?;
    facts.clone_from_slice(&bound);
    Ok(())
}

pub fn stack_keys(facts: &[FactRecord]) -> DMatrix<f64> {
    let cols: Vec<_> = facts.iter().map(|f| f.edit_key.clone()).collect();
    DMatrix::from_columns(&cols)
}

pub fn stack_values(facts: &[FactRecord]) -> DMatrix<f64> {
    let cols: Vec<_> = facts.iter().map(|f| f.target_value.clone()).collect();
    DMatrix::from_columns(&cols)
}

pub fn write_jsonl<W: Write>(mut out: W, facts: &[FactRecord]) -> Result<()> {
    for f in facts {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<FactRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fact: FactRecord = serde_json::from_str(&line)?;
        fact.validate()?;
        out.push(fact);
    }
    Ok(out)
}

/// Vectors as base64 of their little-endian `f64` bytes.
mod b64_vector {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use nalgebra::DVector;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn encode(v: &DVector<f64>) -> String {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode<E: de::Error>(s: &str) -> Result<DVector<f64>, E> {
        let bytes = STANDARD.decode(s).map_err(E::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(E::custom(format!(
                "vector byte length {} not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(DVector::from_iterator(
            bytes.len() / 8,
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))),
        ))
    }

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        decode(&String::deserialize(d)?)
    }
}

mod b64_vectors {
    use nalgebra::DVector;
    use serde::ser::SerializeSeq;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(vs.len()))?;
        for v in vs {
            seq.serialize_element(&super::b64_vector::encode(v))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| super::b64_vector::decode(s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::ModelConfig;

    fn map(seed: u64, d_in: usize, d_out: usize) -> TanhMap {
        TanhMap::random(&mut rng::rng(seed), d_in, d_out, 1.5, 0.1)
    }

    fn model() -> ToyModel {
        ToyModel::new(&ModelConfig {
            d_ctx: 12,
            d_k: 16,
            d_v: 10,
            vocab: 20,
            layers: 3,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_noise_collapses_to_the_map() {
        let f = map(1, 6, 4);
        let c = rng::gaussian_vector(&mut rng::rng(2), 6, 1.0);
        for n in [1, 7, 50] {
            assert_eq!(synthesize_key(&c, n, 0.0, &f, 99).unwrap(), f.map(&c).unwrap());
        }
    }

    #[test]
    fn synthesis_is_deterministic_and_order_free() {
        let f = map(3, 6, 4);
        let c = rng::gaussian_vector(&mut rng::rng(4), 6, 1.0);
        let a = synthesize_key(&c, 64, 0.3, &f, 17).unwrap();
        assert_eq!(a, synthesize_key(&c, 64, 0.3, &f, 17).unwrap());
        let mut rev = DVector::zeros(4);
        for j in (0..64u64).rev() {
            rev += f.map(&perturbed(&c, 0.3, 17, j)).unwrap();
        }
        assert!((a - rev / 64.0).amax() <= 1e-12);
    }

    #[test]
    fn synthesis_mean_agrees_with_independent_monte_carlo() {
        let f = map(5, 6, 4);
        let c = rng::gaussian_vector(&mut rng::rng(6), 6, 1.0);
        let n = 10_000;
        let got = synthesize_key(&c, n, 0.1, &f, 7).unwrap();
        // independent draws, a separate stream, and a two-pass accumulation
        let mut r = rng::rng(0xabcdef);
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| f.map(&(&c + rng::gaussian_vector(&mut r, 6, 0.1))).unwrap())
            .collect();
        for i in 0..4 {
            let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
            let mean = xs.iter().rev().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let bound = 3.0 * var.sqrt() / (n as f64).sqrt();
            assert!(
                (got[i] - mean).abs() <= bound,
                "coord {i}: {} vs {mean} (bound {bound})",
                got[i]
            );
        }
    }

    #[test]
    fn synthesis_rejects_bad_input() {
        let f = map(1, 6, 4);
        assert!(matches!(
            synthesize_key(&DVector::zeros(5), 3, 0.1, &f, 0),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            synthesize_key(&DVector::zeros(6), 0, 0.1, &f, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn value_descent_without_kl_reaches_target() {
        let m = model();
        let c = rng::gaussian_vector(&mut rng::rng(8), 12, 1.0);
        let k = m.layer_key(1, &c).unwrap();
        let z0 = m.logits(&c).unwrap();
        let target = (argmax(&z0) + 7) % 20;
        let sol = solve_value_traced(
            &m,
            1,
            &k,
            target,
            &ValueOptions {
                kl_weight: 0.0,
                steps: 500,
                step_size: 1.0,
            },
        )
        .unwrap();
        let (z, _) = m.logits_from_output(1, &sol.value).unwrap();
        assert_eq!(argmax(&z), target);
        assert!(sol.final_loss < sol.initial_loss);
        assert!(sol.final_probability > sol.initial_probability);
    }

    #[test]
    fn heavy_kl_keeps_a_satisfied_value_in_place() {
        let m = model();
        let c = rng::gaussian_vector(&mut rng::rng(9), 12, 1.0);
        let k = m.layer_key(2, &c).unwrap();
        // pick a target and first push v far enough that P(target) > 0.99
        let target = 3;
        let pushed = solve_value(&m, 2, &k, target, 0.0, 2000, 2.0).unwrap();
        let mut edited = m.clone();
        let w = m.weights(2).unwrap();
        let delta = (&pushed - w * &k) * k.transpose() / k.norm_squared();
        edited.apply_delta(2, &delta).unwrap();
        let v_init = edited.weights(2).unwrap() * &k;
        let obj = ValueObjective::new(&edited, 2, &k, target, 1e4).unwrap();
        assert!(obj.target_probability(&v_init).unwrap() > 0.99);

        let opts = ValueOptions {
            kl_weight: 1e4,
            steps: 100,
            step_size: 1e-5,
        };
        let v = solve_value_traced(&edited, 2, &k, target, &opts).unwrap().value;
        assert!((&v - &v_init).norm() <= 1e-3);
        let long = ValueOptions { steps: 1000, ..opts };
        let v_long = solve_value_traced(&edited, 2, &k, target, &long).unwrap().value;
        assert!((&v_long - &v_init).norm() <= 1e-3);
    }

    #[test]
    fn value_preconditions() {
        let m = model();
        let k = DVector::from_element(16, 0.1);
        assert!(matches!(
            solve_value(&m, 0, &k, 1, 0.0, 0, 0.1),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            solve_value(&m, 0, &k, 1, 0.0, 5, 0.0),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            solve_value(&m, 0, &k, 1, -1.0, 5, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn value_divergence_names_step() {
        let m = model();
        let c = rng::gaussian_vector(&mut rng::rng(10), 12, 1.0);
        let k = m.layer_key(2, &c).unwrap();
        let err = solve_value(&m, 2, &k, 1, 1.0, 50, f64::MAX).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
    }

    #[test]
    fn fact_generation_basics() {
        let one = generate_fact_set(1, 8, 6, 5, 2, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_ne!(one[0].old_object, one[0].new_object);
        one[0].validate().unwrap();
        assert!(matches!(
            generate_fact_set(3, 8, 6, 5, 1, 3),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn fact_generation_is_deterministic() {
        let a = generate_fact_set(64, 8, 6, 5, 10, 21).unwrap();
        let b = generate_fact_set(64, 8, 6, 5, 10, 21).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        write_jsonl(&mut x, &a).unwrap();
        write_jsonl(&mut y, &b).unwrap();
        assert_eq!(x, y);
        let ids: std::collections::BTreeSet<_> = a.iter().map(|f| f.fact_id).collect();
        assert_eq!(ids.len(), 64);
    }

    #[test]
    fn stacked_keys_are_full_rank() {
        let facts = generate_fact_set(256, 32, 32, 8, 10, 4).unwrap();
        let k = stack_keys(&facts);
        let s = k.clone().svd(false, false).singular_values;
        let rank = s.iter().filter(|&&x| x > 1e-10 * s.max()).count();
        assert_eq!(rank, 32);
    }

    #[test]
    fn jsonl_round_trip_is_bit_exact() {
        let facts = generate_fact_set(5, 4, 3, 2, 7, 1).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &facts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("\"edit_key\":\""));
        let back = read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, facts);
    }

    #[test]
    fn covariance_cache_matches_keys() {
        let k = rng::gaussian_matrix(&mut rng::rng(11), 6, 30, 1.0);
        let mut p = PreservationSet::new(k.clone(), vec![]);
        assert!(p.covariance().is_none());
        let c = p.cache_covariance().unwrap().clone();
        assert!((c.clone() - &k * k.transpose()).amax() <= 1e-10);
        assert!((c.clone() - c.transpose()).amax() == 0.0);
    }

    #[test]
    fn binding_sets_prediction_and_target() {
        let m = model();
        let mut facts = generate_fact_set_with(6, 12, 16, 10, 20, 0, &FactOptions::default(), 2).unwrap();
        bind_to_model(
            &m,
            1,
            &mut facts,
            &KeySynthesis::default(),
            &ValueOptions::default(),
            Execution::Parallel,
        )
        .unwrap();
        for f in &facts {
            f.validate().unwrap();
            let z = m.logits(&f.base_context).unwrap();
            assert_eq!(argmax(&z), f.old_object);
            let (zv, _) = m.logits_from_output(1, &f.target_value).unwrap();
            let p = softmax(&zv);
            assert!(p[f.new_object] > p[f.old_object]);
        }
        let mut again = generate_fact_set_with(6, 12, 16, 10, 20, 0, &FactOptions::default(), 2).unwrap();
        bind_to_model(
            &m,
            1,
            &mut again,
            &KeySynthesis::default(),
            &ValueOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(facts, again);
    }
}
