use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::distribution::{self, DistributionOptions, KeySchedule, LayerPlan};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::facts::{self, FactRecord, PreservationSet};
use crate::metrics::{self, BatchTag, EditReport, REPORT_SCHEMA};
use crate::rng;
use crate::solvers::{self, Method, UpdateResult};
use crate::toymodel::{argmax, ToyModel};
use crate::weights;

const PRESERVED_STREAM: u64 = 0x7072_6573;
const HOLDOUT_STREAM: u64 = 0x686f_6c64;
const FACT_STREAM: u64 = 0x6661_6374;

/// Solver hyperparameters for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Params {
    pub lambda: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct BatchOutcome {
    pub report: EditReport,
    pub warnings: Vec<String>,
}

/// Everything shared by the runs of one configuration: the unedited model,
/// the preserved keys and their covariances, and the held-out contexts.
#[derive(Debug, Clone)]
pub struct Workbench {
    config: ExperimentConfig,
    model: ToyModel,
    base_hash: String,
    plan: LayerPlan,
    preserved_keys: DMatrix<f64>,
    neighbors: Vec<(DVector<f64>, usize)>,
    holdout: DMatrix<f64>,
    plan_hash: String,
    mode: Execution,
}

impl Workbench {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut model = ToyModel::new(&config.model)?;
        if let Some(path) = &config.weights {
            model.set_layers(weights::read_file(path)?)?;
        }
        Self::with_model(config, model)
    }

    pub fn with_model(config: &ExperimentConfig, model: ToyModel) -> Result<Self> {
        config.validate()?;
        let d_ctx = model.d_ctx();
        let preserved = rng::gaussian_matrix(
            &mut rng::rng(rng::derive_seed(config.seed, &[PRESERVED_STREAM])),
            d_ctx,
            config.preserved_keys,
            1.0,
        );
        let holdout = rng::gaussian_matrix(
            &mut rng::rng(rng::derive_seed(config.seed, &[HOLDOUT_STREAM])),
            d_ctx,
            config.holdout,
            1.0,
        );
        let layers = config.layers.layers();
        let mut covariances = BTreeMap::new();
        for &l in &layers {
            let keys = model.layer_keys(l, &preserved)?;
            covariances.insert(l, solvers::accumulate_covariance(&keys)?.matrix);
        }
        let plan = LayerPlan::new(layers.clone(), covariances)?;
        let final_layer = plan.final_layer();
        let preserved_keys = model.layer_keys(final_layer, &preserved)?;
        let neighbors = (0..config.neighborhood)
            .map(|j| {
                let c = preserved.column(j).into_owned();
                let original = argmax(&model.logits(&c)?);
                Ok((c, original))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut hasher = Sha256::new();
        for &l in &layers {
            hasher.update((l as u64).to_le_bytes());
        }
        let c0s: Vec<DMatrix<f64>> = layers
            .iter()
            .map(|&l| plan.covariance(l).expect("planned").clone())
            .collect();
        hasher.update(weights::encode(&c0s)?);
        let plan_hash: String = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();

        Ok(Self {
            config: config.clone(),
            base_hash: model.weights_hash()?,
            model,
            plan,
            preserved_keys,
            neighbors,
            holdout,
            plan_hash,
            mode: Execution::default(),
        })
    }

    pub fn with_execution(mut self, mode: Execution) -> Self {
        self.mode = mode;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn plan_hash(&self) -> &str {
        &self.plan_hash
    }

    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    /// The edit facts for `(size, batch)`, bound to the unedited model. They
    /// depend only on the master seed, never on the method or its parameters.
    pub fn facts(&self, size: usize, batch: usize) -> Result<Vec<FactRecord>> {
        let cfg = &self.config;
        let m = &self.model;
        let seed = rng::derive_seed(cfg.seed, &[FACT_STREAM, size as u64, batch as u64]);
        let mut facts = facts::generate_fact_set_with(
            size,
            m.d_ctx(),
            m.d_k(),
            m.d_v(),
            m.vocab(),
            (batch * size) as u64,
            &cfg.facts,
            seed,
        )?;
        facts::bind_to_model(
            m,
            self.plan.final_layer(),
            &mut facts,
            &cfg.facts.keys,
            &cfg.values,
            self.mode,
        )?;
        Ok(facts)
    }

    /// Neighborhood facts for a batch: each preserved context competes
    /// against an edit target that differs from its own prediction.
    pub fn preservation_set(&self, edits: &[FactRecord]) -> Result<PreservationSet> {
        let vocab = self.model.vocab();
        let final_layer = self.plan.final_layer();
        let neighborhood = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(j, (context, original))| {
                let competitor = (0..edits.len())
                    .map(|i| edits[(j + i) % edits.len()].new_object)
                    .find(|&o| o != *original)
                    .unwrap_or((original + 1) % vocab);
                let key = self.preserved_keys.column(j).into_owned();
                Ok(FactRecord {
                    fact_id: u64::MAX - j as u64,
                    base_context: context.clone(),
                    target_value: self.model.weights(final_layer)? * &key,
                    edit_key: key,
                    paraphrase_keys: Vec::new(),
                    paraphrase_contexts: Vec::new(),
                    old_object: *original,
                    new_object: competitor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreservationSet::new(self.preserved_keys.clone(), neighborhood))
    }

    /// Applies `method` to `facts` on a copy of the model. ROME takes the
    /// facts one at a time, each edit seeing the previous ones.
    pub fn apply(
        &self,
        method: Method,
        params: Params,
        facts: &[FactRecord],
    ) -> Result<(ToyModel, Vec<(usize, UpdateResult)>)> {
        let opts = DistributionOptions {
            lambda: params.lambda,
            alpha: params.alpha,
            rome_residual_fraction: self.config.rome_residual_fraction,
            schedule: KeySchedule::Recompute,
            keys: self.config.facts.keys,
        };
        let mut edited = self.model.clone();
        let results = match method {
            Method::Rome => {
                let mut all = Vec::new();
                for f in facts {
                    all.extend(distribution::distribute(
                        &mut edited,
                        &self.plan,
                        std::slice::from_ref(f),
                        method,
                        &opts,
                    )?);
                }
                all
            }
            _ => distribution::distribute(&mut edited, &self.plan, facts, method, &opts)?,
        };
        Ok((edited, results))
    }

    /// `||W_L K_L - V||_F` at the final layer with keys re-derived from the
    /// edited model.
    pub fn memorization_residual(&self, edited: &ToyModel, facts: &[FactRecord]) -> Result<f64> {
        let l = self.plan.final_layer();
        let keys = facts
            .iter()
            .map(|f| facts::fact_key(edited, l, f, &self.config.facts.keys))
            .collect::<Result<Vec<_>>>()?;
        let k = DMatrix::from_columns(&keys);
        Ok((edited.weights(l)? * k - facts::stack_values(facts)).norm())
    }

    pub fn run_facts(
        &self,
        method: Method,
        params: Params,
        size: usize,
        batch: usize,
        facts: &[FactRecord],
    ) -> Result<BatchOutcome> {
        if method == Method::Emmet && params.alpha == 0.0 && facts.len() > self.model.d_k() {
            return Err(Error::Config(format!(
                "EMMET with alpha = 0 needs batch size <= d_k = {}, got {}",
                self.model.d_k(),
                facts.len()
            )));
        }
        let snapshot = self.model.snapshot()?;
        let (mut edited, results) = self.apply(method, params, facts)?;
        let threshold = self.config.condition_warn_threshold;
        let warnings = results
            .iter()
            .flat_map(|(l, r)| {
                r.warnings(threshold)
                    .into_iter()
                    .map(move |w| format!("layer {l}: {w}"))
            })
            .collect();
        let last = &results.last().expect("at least one layer").1;

        let (es, em) = metrics::efficacy(&edited, facts)?;
        let (ps, pm) = metrics::paraphrase(&edited, facts)?;
        let (ns, nm) = metrics::neighborhood(&self.model, &edited, &self.preservation_set(facts)?)?;
        let drift = metrics::preservation_drift(&self.model, &edited, &self.holdout)?;
        let mem_residual = self.memorization_residual(&edited, facts)?;

        edited.restore(&snapshot)?;
        let restored = edited.weights_hash()?;
        if restored != self.base_hash {
            return Err(Error::Corruption {
                expected: self.base_hash.clone(),
                found: restored,
            });
        }

        let report = EditReport {
            method,
            batch_size: size,
            seed: self.config.seed,
            lambda: params.lambda,
            alpha: params.alpha,
            es,
            em,
            ps,
            pm,
            ns,
            nm,
            ge: None,
            s: metrics::composite_score(es, ps, ns).ok(),
            mem_residual,
            drift,
            cond_c0: last.condition_c0,
            cond_d: last.condition_d,
            batch: BatchTag::Index(batch),
            layers: self.config.layers.to_string(),
            plan_hash: self.plan_hash.clone(),
            schema: REPORT_SCHEMA,
        };
        Ok(BatchOutcome { report, warnings })
    }

    pub fn run_batch(&self, method: Method, params: Params, size: usize, batch: usize) -> Result<BatchOutcome> {
        let facts = self.facts(size, batch)?;
        self.run_facts(method, params, size, batch, &facts)
    }

    fn default_params(&self) -> Params {
        Params {
            lambda: self.config.lambda,
            alpha: self.config.alpha,
        }
    }

    /// Bound fact sets for every `(size, batch)` pair, computed once.
    fn fact_table(&self, sizes: &[usize]) -> Result<BTreeMap<(usize, usize), Vec<FactRecord>>> {
        let keys: Vec<(usize, usize)> = sizes
            .iter()
            .flat_map(|&s| (0..self.config.batches_for(s)).map(move |b| (s, b)))
            .collect();
        let sets = exec::try_map_indexed(self.mode, keys.len(), |i| self.facts(keys[i].0, keys[i].1))?;
        Ok(keys.into_iter().zip(sets).collect())
    }

    fn run_cells(
        &self,
        cells: &[(Method, Params, usize)],
        table: &BTreeMap<(usize, usize), Vec<FactRecord>>,
    ) -> Result<(Vec<EditReport>, Vec<String>)> {
        let jobs: Vec<(usize, usize)> = cells
            .iter()
            .enumerate()
            .flat_map(|(c, &(_, _, size))| (0..self.config.batches_for(size)).map(move |b| (c, b)))
            .collect();
        let outcomes = exec::try_map_indexed(self.mode, jobs.len(), |i| {
            let (c, b) = jobs[i];
            let (method, params, size) = cells[c];
            self.run_facts(method, params, size, b, &table[&(size, b)])
        })?;
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        let mut at = 0;
        for &(method, _, size) in cells {
            let n = self.config.batches_for(size);
            let group: Vec<EditReport> = outcomes[at..at + n].iter().map(|o| o.report.clone()).collect();
            for o in &outcomes[at..at + n] {
                warnings.extend(
                    o.warnings
                        .iter()
                        .map(|w| format!("{method} size {size} batch {}: {w}", batch_label(&o.report.batch))),
                );
            }
            at += n;
            let mean = EditReport::mean(&group)?;
            rows.extend(group);
            rows.push(mean);
        }
        Ok((rows, warnings))
    }
}

fn batch_label(tag: &BatchTag) -> String {
    match tag {
        BatchTag::Index(i) => i.to_string(),
        BatchTag::Label(s) => s.clone(),
    }
}

/// Per-batch rows of one edit configuration plus their mean.
#[derive(Debug, Clone)]
pub struct EditRun {
    pub rows: Vec<EditReport>,
    pub mean: EditReport,
    pub warnings: Vec<String>,
}

/// Runs the first configured method at the first configured batch size.
pub fn run_edit(config: &ExperimentConfig) -> Result<EditRun> {
    let method = config.methods[0];
    let size = config.batch_sizes[0];
    config.validate_edit(method, size)?;
    let bench = Workbench::new(config)?;
    let table = bench.fact_table(&[size])?;
    let (mut rows, warnings) = bench.run_cells(&[(method, bench.default_params(), size)], &table)?;
    let mean = rows.pop().expect("mean row");
    Ok(EditRun { rows, mean, warnings })
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    /// Per-batch rows, each group followed by its mean row.
    pub rows: Vec<EditReport>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

impl SweepReport {
    pub fn means(&self) -> impl Iterator<Item = &EditReport> {
        self.rows.iter().filter(|r| r.batch == BatchTag::mean())
    }
}

/// Every configured method at every batch size, on identical fact sets.
pub fn sweep_batch(config: &ExperimentConfig) -> Result<SweepReport> {
    let bench = Workbench::new(config)?;
    sweep_batch_on(&bench)
}

pub fn sweep_batch_on(bench: &Workbench) -> Result<SweepReport> {
    let config = bench.config();
    let params = bench.default_params();
    let mut notes = Vec::new();
    let mut cells = Vec::new();
    for &method in &config.methods {
        for &size in &config.batch_sizes {
            match config.emmet_cap(params.alpha).filter(|_| method == Method::Emmet) {
                Some(cap) if size > cap => notes.push(format!(
                    "emmet with alpha = 0 capped at d_k = {cap}; batch size {size} skipped"
                )),
                _ => cells.push((method, params, size)),
            }
        }
    }
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = cells.iter().map(|c| c.2).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let table = bench.fact_table(&sizes)?;
    let (rows, warnings) = bench.run_cells(&cells, &table)?;
    Ok(SweepReport { rows, notes, warnings })
}

/// The best grid point for one method, by composite score of the batch means.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Observation {
    pub method: Method,
    pub parameter: &'static str,
    pub best_value: f64,
    pub best_s: Option<f64>,
    /// `(value, s)` for every grid point, in grid order.
    pub curve: Vec<(f64, Option<f64>)>,
}

#[derive(Debug, Clone)]
pub struct HparamReport {
    pub sweep: SweepReport,
    pub observations: Vec<Observation>,
}

/// MEMIT over the lambda grid and EMMET over the alpha grid at
/// `hparam_batch_size`. The preferred setting is recorded, not asserted.
pub fn sweep_hparam(config: &ExperimentConfig) -> Result<HparamReport> {
    let bench = Workbench::new(config)?;
    sweep_hparam_on(&bench)
}

pub fn sweep_hparam_on(bench: &Workbench) -> Result<HparamReport> {
    let config = bench.config();
    let size = config.hparam_batch_size;
    let mut notes = Vec::new();
    let mut cells = Vec::new();
    for &method in &config.methods {
        match method {
            Method::Memit => cells.extend(config.lambda_grid.iter().map(|&lambda| {
                (
                    method,
                    Params {
                        lambda,
                        alpha: config.alpha,
                    },
                    size,
                )
            })),
            Method::Emmet => {
                for &alpha in &config.alpha_grid {
                    match config.emmet_cap(alpha) {
                        Some(cap) if size > cap => notes.push(format!(
                            "emmet alpha = 0 skipped: batch size {size} exceeds d_k = {cap}"
                        )),
                        _ => cells.push((
                            method,
                            Params {
                                lambda: config.lambda,
                                alpha,
                            },
                            size,
                        )),
                    }
                }
            }
            Method::Rome => notes.push("rome has no preservation hyperparameter; skipped".into()),
        }
    }
    let table = bench.fact_table(&[size])?;
    let (rows, warnings) = bench.run_cells(&cells, &table)?;

    let mut observations = Vec::new();
    for method in [Method::Memit, Method::Emmet] {
        let parameter = if method == Method::Memit { "lambda" } else { "alpha" };
        let curve: Vec<(f64, Option<f64>)> = rows
            .iter()
            .filter(|r| r.method == method && r.batch == BatchTag::mean())
            .map(|r| (if method == Method::Memit { r.lambda } else { r.alpha }, r.s))
            .collect();
        let score = |s: Option<f64>| s.unwrap_or(f64::NEG_INFINITY);
        let best = curve
            .iter()
            .copied()
            .reduce(|best, cur| if score(cur.1) > score(best.1) { cur } else { best });
        if let Some((best_value, best_s)) = best {
            notes.push(match best_s {
                Some(s) => format!("{method}: best {parameter} = {best_value} with S = {s:.2}"),
                None => format!("{method}: S undefined at every {parameter}"),
            });
            observations.push(Observation {
                method,
                parameter,
                best_value,
                best_s,
                curve,
            });
        }
    }
    Ok(HparamReport {
        sweep: SweepReport { rows, notes, warnings },
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::ModelConfig;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelConfig {
                d_ctx: 12,
                d_k: 10,
                d_v: 8,
                vocab: 20,
                layers: 4,
                ..Default::default()
            },
            batch_sizes: vec![2, 4],
            default_num_batches: 2,
            layers: "1".parse().unwrap(),
            preserved_keys: 40,
            neighborhood: 16,
            holdout: 10,
            hparam_batch_size: 4,
            values: crate::facts::ValueOptions {
                steps: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn facts_do_not_depend_on_method_or_mode() {
        let bench = Workbench::new(&small()).unwrap();
        let a = bench.facts(4, 1).unwrap();
        let b = bench.clone().with_execution(Execution::Sequential).facts(4, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, bench.facts(4, 0).unwrap());
        for f in &a {
            assert_ne!(f.old_object, f.new_object);
        }
    }

    #[test]
    fn competitors_differ_from_originals() {
        let bench = Workbench::new(&small()).unwrap();
        let facts = bench.facts(2, 0).unwrap();
        let set = bench.preservation_set(&facts).unwrap();
        assert_eq!(set.neighborhood_facts.len(), 16);
        for n in &set.neighborhood_facts {
            assert_ne!(n.old_object, n.new_object);
        }
    }

    #[test]
    fn run_restores_model_and_emmet_alpha_zero_memorizes() {
        let cfg = ExperimentConfig { alpha: 0.0, ..small() };
        let bench = Workbench::new(&cfg).unwrap();
        let out = bench
            .run_batch(
                Method::Emmet,
                Params {
                    lambda: 0.1,
                    alpha: 0.0,
                },
                4,
                0,
            )
            .unwrap();
        assert_eq!(bench.model().weights_hash().unwrap(), bench.base_hash());
        assert!(out.report.mem_residual <= 1e-8, "{}", out.report.mem_residual);
        assert!(out.report.es > 0.0);
        assert!(out.report.cond_d.is_some());
        assert!(bench
            .run_batch(
                Method::Emmet,
                Params {
                    lambda: 0.1,
                    alpha: 0.0
                },
                11,
                0
            )
            .is_err());
    }

    #[test]
    fn sweep_is_identical_across_execution_modes() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Rome, Method::Memit, Method::Emmet],
            ..small()
        };
        let par = sweep_batch_on(&Workbench::new(&cfg).unwrap()).unwrap();
        let seq = sweep_batch_on(&Workbench::new(&cfg).unwrap().with_execution(Execution::Sequential)).unwrap();
        assert_eq!(par.rows, seq.rows);
        assert_eq!(par.rows.len(), 3 * 2 * 3);
        assert_eq!(par.means().count(), 6);
    }

    #[test]
    fn alpha_zero_sizes_above_key_dim_are_capped_and_noted() {
        let cfg = ExperimentConfig {
            methods: vec![Method::Emmet],
            alpha: 0.0,
            batch_sizes: vec![4, 12],
            ..small()
        };
        let sweep = sweep_batch(&cfg).unwrap();
        assert_eq!(sweep.means().count(), 1);
        assert!(sweep.notes.iter().any(|n| n.contains("12")));
    }

    #[test]
    fn hparam_sweep_records_observations() {
        let report = sweep_hparam(&small()).unwrap();
        let methods: Vec<Method> = report.observations.iter().map(|o| o.method).collect();
        assert_eq!(methods, vec![Method::Memit, Method::Emmet]);
        assert_eq!(report.observations[0].curve.len(), small().lambda_grid.len());
        assert_eq!(report.observations[1].curve.len(), small().alpha_grid.len());
    }
}
