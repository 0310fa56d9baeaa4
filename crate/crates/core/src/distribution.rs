//! Spreading an edit over consecutive layers.
//!
//! Layers `L-(n-1) ..= L` are edited in ascending order. At layer `l` the
//! edit keys are re-derived from the partially edited model, the residual
//! `V_E^L - W^l K_E^l` is scaled by `1 / (L - l + 1)` (MEMIT schedule), and
//! the single-layer solver runs on that scaled residual. ROME's schedule
//! applies the full residual at every layer unless
//! `rome_residual_fraction` is set.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::{self, FactRecord, KeySynthesis};
use crate::solvers::{self, Method, UpdateResult};
use crate::toymodel::ToyModel;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlan {
    edit_layers: Vec<usize>,
    per_layer_covariance: BTreeMap<usize, DMatrix<f64>>,
}

impl LayerPlan {
    pub fn new(edit_layers: Vec<usize>, per_layer_covariance: BTreeMap<usize, DMatrix<f64>>) -> Result<Self> {
        let plan = Self {
            edit_layers,
            per_layer_covariance,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn single(layer: usize, c0: DMatrix<f64>) -> Self {
        Self {
            edit_layers: vec![layer],
            per_layer_covariance: BTreeMap::from([(layer, c0)]),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.edit_layers.is_empty() {
            return Err(Error::Config("layer plan has no layers".into()));
        }
        if self.edit_layers.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config(format!(
                "edit layers must be ascending and contiguous, got {:?}",
                self.edit_layers
            )));
        }
        if let Some(l) = self
            .edit_layers
            .iter()
            .find(|l| !self.per_layer_covariance.contains_key(l))
        {
            return Err(Error::Config(format!("no covariance for edit layer {l}")));
        }
        Ok(())
    }

    pub fn edit_layers(&self) -> &[usize] {
        &self.edit_layers
    }

    pub fn final_layer(&self) -> usize {
        *self.edit_layers.last().expect("validated non-empty")
    }

    pub fn covariance(&self, layer: usize) -> Option<&DMatrix<f64>> {
        self.per_layer_covariance.get(&layer)
    }

    /// Share of the residual assigned to `layer`: `1 / (L - l + 1)`.
    pub fn residual_fraction(&self, layer: usize) -> f64 {
        1.0 / (self.final_layer() - layer + 1) as f64
    }
}

/// When per-layer edit keys are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeySchedule {
    /// From the model as edited so far (the defined semantics).
    #[default]
    Recompute,
    /// Once, from the unedited model. Only useful for ablation.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistributionOptions {
    pub lambda: f64,
    pub alpha: f64,
    pub rome_residual_fraction: bool,
    pub schedule: KeySchedule,
    pub keys: KeySynthesis,
}

impl Default for DistributionOptions {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.1,
            rome_residual_fraction: false,
            schedule: KeySchedule::Recompute,
            keys: KeySynthesis::default(),
        }
    }
}

fn layer_keys(model: &ToyModel, layer: usize, facts: &[FactRecord], synth: &KeySynthesis) -> Result<DMatrix<f64>> {
    let cols = facts
        .iter()
        .map(|f| facts::fact_key(model, layer, f, synth))
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_columns(&cols))
}

/// Runs `method` over the plan's layers, applying each delta to `model`
/// before moving up. Returns the per-layer results in application order.
pub fn distribute(
    model: &mut ToyModel,
    plan: &LayerPlan,
    facts: &[FactRecord],
    method: Method,
    options: &DistributionOptions,
) -> Result<Vec<(usize, UpdateResult)>> {
    plan.validate()?;
    if facts.is_empty() {
        return Err(Error::Precondition("no facts to distribute".into()));
    }
    if method == Method::Rome && facts.len() != 1 {
        return Err(Error::Precondition(format!(
            "ROME distributes one fact at a time, got {}",
            facts.len()
        )));
    }
    if let Some(&l) = plan.edit_layers.iter().find(|&&l| l >= model.layer_count()) {
        return Err(Error::LayerOutOfRange {
            layer: l,
            count: model.layer_count(),
        });
    }
    let targets = facts::stack_values(facts);
    let frozen: Option<BTreeMap<usize, DMatrix<f64>>> = match options.schedule {
        KeySchedule::Recompute => None,
        KeySchedule::Frozen => Some(
            plan.edit_layers
                .iter()
                .map(|&l| Ok((l, layer_keys(model, l, facts, &options.keys)?)))
                .collect::<Result<_>>()?,
        ),
    };

    let mut out = Vec::with_capacity(plan.edit_layers.len());
    for &l in &plan.edit_layers {
        let step = || -> Result<UpdateResult> {
            let keys = match &frozen {
                Some(map) => map[&l].clone(),
                None => layer_keys(model, l, facts, &options.keys)?,
            };
            let c0 = plan.covariance(l).expect("validated");
            let w = model.weights(l)?;
            let scale = match method {
                Method::Rome if !options.rome_residual_fraction => 1.0,
                _ => (plan.final_layer() - l + 1) as f64,
            };
            let residual = (&targets - w * &keys) / scale;
            let (delta, cond) = match method {
                Method::Rome => (
                    solvers::rome_delta(c0, &keys.column(0).into_owned(), &residual.column(0).into_owned())?,
                    None,
                ),
                Method::Memit => (solvers::memit_delta(c0, &keys, &residual, options.lambda)?, None),
                Method::Emmet => {
                    let (d, cd, cr) = solvers::emmet_delta(c0, &keys, &residual, options.alpha)?;
                    (d, Some((cd, cr)))
                }
            };
            solvers::finish(w, c0, &keys, &targets, delta, cond)
        };
        let result = step().map_err(|e| e.at_layer(l))?;
        model.apply_delta(l, &result.delta).map_err(|e| e.at_layer(l))?;
        out.push((l, result));
    }
    Ok(out)
}

pub fn distribute_memit(
    model: &mut ToyModel,
    plan: &LayerPlan,
    facts: &[FactRecord],
    lambda: f64,
    keys: &KeySynthesis,
) -> Result<Vec<(usize, UpdateResult)>> {
    let options = DistributionOptions {
        lambda,
        keys: *keys,
        ..Default::default()
    };
    distribute(model, plan, facts, Method::Memit, &options)
}

pub fn distribute_rome(
    model: &mut ToyModel,
    plan: &LayerPlan,
    fact: &FactRecord,
    keys: &KeySynthesis,
    rome_residual_fraction: bool,
) -> Result<Vec<(usize, UpdateResult)>> {
    let options = DistributionOptions {
        rome_residual_fraction,
        keys: *keys,
        ..Default::default()
    };
    distribute(model, plan, std::slice::from_ref(fact), Method::Rome, &options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::facts::{bind_to_model, generate_fact_set_with, FactOptions, ValueOptions};
    use crate::rng;
    use crate::toymodel::ModelConfig;

    struct Setup {
        model: ToyModel,
        facts: Vec<FactRecord>,
        covs: BTreeMap<usize, DMatrix<f64>>,
        synth: KeySynthesis,
    }

    fn setup(seed: u64, edits: usize, final_layer: usize) -> Setup {
        let model = ToyModel::new(&ModelConfig {
            d_ctx: 16,
            d_k: 20,
            d_v: 12,
            vocab: 30,
            layers: 5,
            seed,
            ..Default::default()
        })
        .unwrap();
        let ctx = rng::gaussian_matrix(&mut rng::rng(seed ^ 1), 16, 100, 1.0);
        let covs = (0..5)
            .map(|l| {
                let k = model.layer_keys(l, &ctx).unwrap();
                (l, &k * k.transpose())
            })
            .collect();
        let synth = KeySynthesis::default();
        let mut facts = generate_fact_set_with(edits, 16, 20, 12, 30, 0, &FactOptions::default(), seed ^ 2).unwrap();
        bind_to_model(
            &model,
            final_layer,
            &mut facts,
            &synth,
            &ValueOptions::default(),
            Execution::Sequential,
        )
        .unwrap();
        Setup {
            model,
            facts,
            covs,
            synth,
        }
    }

    fn plan(s: &Setup, layers: std::ops::RangeInclusive<usize>) -> LayerPlan {
        let layers: Vec<usize> = layers.collect();
        let covs = layers.iter().map(|l| (*l, s.covs[l].clone())).collect();
        LayerPlan::new(layers, covs).unwrap()
    }

    fn final_residual(m: &ToyModel, s: &Setup, layer: usize) -> f64 {
        let k = layer_keys(m, layer, &s.facts, &s.synth).unwrap();
        (m.weights(layer).unwrap() * k - facts::stack_values(&s.facts)).norm()
    }

    #[test]
    fn plan_validation() {
        let c = DMatrix::identity(2, 2);
        assert!(LayerPlan::new(vec![], BTreeMap::new()).is_err());
        assert!(LayerPlan::new(vec![1, 3], BTreeMap::from([(1, c.clone()), (3, c.clone())])).is_err());
        assert!(LayerPlan::new(vec![2, 1], BTreeMap::from([(1, c.clone()), (2, c.clone())])).is_err());
        assert!(LayerPlan::new(vec![1, 2], BTreeMap::from([(1, c.clone())])).is_err());
        let p = LayerPlan::new(vec![1, 2, 3], (1..=3).map(|l| (l, c.clone())).collect()).unwrap();
        assert_eq!(p.final_layer(), 3);
        assert_eq!(p.residual_fraction(3), 1.0);
        assert_eq!(p.residual_fraction(2), 0.5);
        assert_eq!(p.residual_fraction(1), 1.0 / 3.0);
    }

    #[test]
    fn single_layer_memit_is_bitwise_memit_update() {
        let s = setup(1, 4, 3);
        let mut m = s.model.clone();
        let out = distribute_memit(&mut m, &plan(&s, 3..=3), &s.facts, 0.8, &s.synth).unwrap();
        let k = layer_keys(&s.model, 3, &s.facts, &s.synth).unwrap();
        let direct = solvers::memit_update(
            s.model.weights(3).unwrap(),
            &s.covs[&3],
            &k,
            &facts::stack_values(&s.facts),
            0.8,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1, direct);
        assert_eq!(m.weights(3).unwrap(), &direct.new_weights);
    }

    #[test]
    fn single_layer_rome_matches_rome_update() {
        let s = setup(2, 1, 2);
        let mut m = s.model.clone();
        let out = distribute_rome(&mut m, &plan(&s, 2..=2), &s.facts[0], &s.synth, false).unwrap();
        let k = layer_keys(&s.model, 2, &s.facts, &s.synth)
            .unwrap()
            .column(0)
            .into_owned();
        let direct =
            solvers::rome_update(s.model.weights(2).unwrap(), &s.covs[&2], &k, &s.facts[0].target_value).unwrap();
        assert_eq!(out[0].1, direct);
    }

    #[test]
    fn satisfied_targets_give_zero_deltas() {
        let mut s = setup(3, 3, 4);
        for f in &mut s.facts {
            f.target_value = s.model.weights(4).unwrap() * facts::fact_key(&s.model, 4, f, &s.synth).unwrap();
        }
        let mut m = s.model.clone();
        let out = distribute_memit(&mut m, &plan(&s, 4..=4), &s.facts, 1.0, &s.synth).unwrap();
        assert_eq!(out[0].1.delta, DMatrix::zeros(12, 20));
        let mut m = s.model.clone();
        let out = distribute_rome(&mut m, &plan(&s, 4..=4), &s.facts[0], &s.synth, false).unwrap();
        assert!(out[0].1.delta.amax() == 0.0);
    }

    #[test]
    fn multi_layer_memit_reduces_final_residual() {
        let s = setup(4, 6, 3);
        let before = final_residual(&s.model, &s, 3);
        let mut m = s.model.clone();
        let out = distribute_memit(&mut m, &plan(&s, 1..=3), &s.facts, 1.0, &s.synth).unwrap();
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(final_residual(&m, &s, 3) <= before);
    }

    #[test]
    fn multi_layer_rome_enforces_equality_at_last_layer() {
        let s = setup(5, 1, 3);
        let mut m = s.model.clone();
        distribute_rome(&mut m, &plan(&s, 2..=3), &s.facts[0], &s.synth, false).unwrap();
        let k = facts::fact_key(&m, 3, &s.facts[0], &s.synth).unwrap();
        let got = m.weights(3).unwrap() * k;
        assert!((got - &s.facts[0].target_value).norm() <= 1e-8);
    }

    #[test]
    fn rome_fraction_switch_changes_lower_layers_only_in_scale() {
        let s = setup(6, 1, 3);
        let mut a = s.model.clone();
        let mut b = s.model.clone();
        let full = distribute_rome(&mut a, &plan(&s, 2..=3), &s.facts[0], &s.synth, false).unwrap();
        let frac = distribute_rome(&mut b, &plan(&s, 2..=3), &s.facts[0], &s.synth, true).unwrap();
        // layer 2 sees the same keys; its delta is exactly halved
        assert!((&full[0].1.delta * 0.5 - &frac[0].1.delta).amax() <= 1e-14);
    }

    #[test]
    fn skipping_key_recomputation_changes_the_result() {
        let s = setup(7, 4, 3);
        let mut a = s.model.clone();
        let mut b = s.model.clone();
        let p = plan(&s, 1..=3);
        let opts = DistributionOptions {
            lambda: 1.0,
            keys: s.synth,
            ..Default::default()
        };
        distribute(&mut a, &p, &s.facts, Method::Memit, &opts).unwrap();
        let frozen = DistributionOptions {
            schedule: KeySchedule::Frozen,
            ..opts
        };
        distribute(&mut b, &p, &s.facts, Method::Memit, &frozen).unwrap();
        assert_eq!(a.weights(1).unwrap(), b.weights(1).unwrap());
        assert!((a.weights(3).unwrap() - b.weights(3).unwrap()).amax() > 1e-9);
    }

    #[test]
    fn distributed_residual_no_worse_than_top_layer_only() {
        // regression property at a memorization-dominated lambda; at
        // lambda = 1 the top-layer solve barely moves and the ordering flips
        // on roughly a quarter of seeds
        for seed in 0..20 {
            let s = setup(seed, 6, 3);
            let mut multi = s.model.clone();
            distribute_memit(&mut multi, &plan(&s, 1..=3), &s.facts, 0.1, &s.synth).unwrap();
            let mut single = s.model.clone();
            distribute_memit(&mut single, &plan(&s, 3..=3), &s.facts, 0.1, &s.synth).unwrap();
            let (rm, rs) = (final_residual(&multi, &s, 3), final_residual(&single, &s, 3));
            assert!(rm <= rs, "seed {seed}: distributed {rm} vs top-only {rs}");
        }
    }

    #[test]
    fn errors_are_tagged_with_layer() {
        let s = setup(8, 2, 3);
        let mut covs = BTreeMap::new();
        covs.insert(2, s.covs[&2].clone());
        covs.insert(3, DMatrix::zeros(20, 20));
        let p = LayerPlan::new(vec![2, 3], covs).unwrap();
        let mut m = s.model.clone();
        let err = distribute(&mut m, &p, &s.facts, Method::Emmet, &DistributionOptions::default()).unwrap_err();
        assert!(matches!(err, Error::AtLayer { layer: 3, .. }), "{err:?}");
    }
}
