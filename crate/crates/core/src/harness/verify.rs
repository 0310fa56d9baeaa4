//! The `pmedit verify` suite: closed-form solvers against the independent
//! oracles, structural invariants, and one end-to-end toy edit. Instance
//! counts are smaller than the acceptance tests so a full run stays fast.
//!
//! The summary holds no timings, so two runs with the same options are
//! byte-identical.

use nalgebra::DMatrix;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{Params, Workbench};
use crate::distribution::{self, LayerPlan};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::facts::{self, ValueObjective};
use crate::metrics;
use crate::oracle;
use crate::rng;
use crate::solvers::{self, Method};
use crate::toymodel::{ModelConfig, ToyModel};
use crate::weights;

/// A random single-layer editing problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub w0: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub k_e: DMatrix<f64>,
    pub v_e: DMatrix<f64>,
}

impl Problem {
    pub fn random(seed: u64, d_v: usize, d_k: usize, n: usize, e: usize) -> Self {
        let mut r = rng::rng(seed);
        let w0 = rng::gaussian_matrix(&mut r, d_v, d_k, 1.0);
        let k0 = rng::gaussian_matrix(&mut r, d_k, n, 1.0);
        let k_e = rng::gaussian_matrix(&mut r, d_k, e, 1.0);
        let v_e = rng::gaussian_matrix(&mut r, d_v, e, 1.0);
        let c0 = &k0 * k0.transpose();
        Self { w0, k0, c0, k_e, v_e }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Added to every entry of the EMMET solution before it is checked.
    pub fault: Option<f64>,
    pub mode: Execution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// The worst observed value of the checked quantity.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub seed: u64,
    pub fault: Option<f64>,
    pub checks: Vec<Check>,
}

impl VerifySummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

fn below(name: &'static str, value: f64, threshold: f64, detail: String) -> Check {
    Check {
        name,
        passed: value <= threshold,
        value,
        threshold,
        detail,
    }
}

fn max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, |m, x| if x > m || x.is_nan() { x } else { m })
}

fn faulty(w: &DMatrix<f64>, fault: Option<f64>) -> DMatrix<f64> {
    match fault {
        Some(f) => w.add_scalar(f),
        None => w.clone(),
    }
}

const SHAPES: [(usize, usize); 6] = [(16, 1), (16, 4), (16, 16), (32, 1), (32, 4), (32, 16)];

fn kkt_agreement(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let per_shape = 6;
    let rows = exec::try_map_indexed(opts.mode, SHAPES.len() * per_shape, |i| {
        let (d_k, e) = SHAPES[i / per_shape];
        let p = Problem::random(rng::derive_seed(opts.seed, &[1, i as u64]), 8, d_k, 4 * d_k, e);
        let res = solvers::emmet_update(&p.w0, &p.c0, &p.k_e, &p.v_e, 0.0)?;
        let w = faulty(&res.new_weights, opts.fault);
        let kkt = oracle::kkt_solve(&p.w0, &p.k0, &p.k_e, &p.v_e)?;
        let agreement = (&w - &kkt.weights).norm() / (1.0 + kkt.weights.norm());
        let columns = max((0..e).map(|j| {
            let v = p.v_e.column(j);
            (&w * p.k_e.column(j) - v).norm() / (1.0 + v.norm())
        }));
        let lam = solvers::lagrange_multipliers(&p.w0, &p.c0, &p.k_e, &p.v_e)?;
        let multipliers = oracle::relative_error(&lam, kkt.multipliers.as_ref().expect("kkt multipliers"));
        Ok::<_, Error>((agreement, columns, multipliers))
    })?;
    let n = rows.len();
    Ok(vec![
        below(
            "emmet_matches_kkt_oracle",
            max(rows.iter().map(|r| r.0)),
            1e-7,
            format!("{n} instances, d_k in {{16, 32}}, E in {{1, 4, 16}}"),
        ),
        below(
            "emmet_satisfies_constraints",
            max(rows.iter().map(|r| r.1)),
            1e-8,
            format!("{n} instances, per-column relative residual"),
        ),
        below(
            "multipliers_match_kkt_oracle",
            max(rows.iter().map(|r| r.2)),
            1e-6,
            format!("{n} instances"),
        ),
    ])
}

fn emmet_minimality(opts: &VerifyOptions) -> Result<Check> {
    let p = Problem::random(rng::derive_seed(opts.seed, &[2]), 6, 12, 48, 4);
    let res = solvers::emmet_update(&p.w0, &p.c0, &p.k_e, &p.v_e, 0.0)?;
    let w = faulty(&res.new_weights, opts.fault);
    let best = oracle::preservation_objective(&w, &p.w0, &p.k0);
    // feasible directions vanish on the edit keys: X (I - K_E K_E^+)
    let proj = DMatrix::identity(12, 12)
        - &p.k_e
            * p.k_e
                .clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Precondition(e.into()))?;
    let mut r = rng::rng(rng::derive_seed(opts.seed, &[2, 1]));
    let worst = max((0..50).map(|_| {
        let x = rng::gaussian_matrix(&mut r, 6, 12, 0.1) * &proj;
        best - oracle::preservation_objective(&(&w + x), &p.w0, &p.k0)
    }));
    Ok(below(
        "emmet_is_minimal",
        worst,
        1e-9 * (1.0 + best),
        "50 feasible perturbations never lower the preservation cost".into(),
    ))
}

fn rome_reduction(opts: &VerifyOptions) -> Result<Check> {
    let errs = exec::try_map_indexed(opts.mode, 50, |i| {
        let p = Problem::random(rng::derive_seed(opts.seed, &[3, i as u64]), 8, 16, 64, 1);
        let k = p.k_e.column(0).into_owned();
        let v = p.v_e.column(0).into_owned();
        let rome = solvers::rome_update(&p.w0, &p.c0, &k, &v)?;
        let emmet = solvers::emmet_update(&p.w0, &p.c0, &p.k_e, &p.v_e, 0.0)?;
        let w = faulty(&emmet.new_weights, opts.fault);
        Ok::<_, Error>((&rome.new_weights - &w).norm() / (1.0 + rome.new_weights.norm()))
    })?;
    Ok(below(
        "rome_equals_single_edit_emmet",
        max(errs),
        1e-10,
        "50 seeds".into(),
    ))
}

fn memit_optimality(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let rows = exec::try_map_indexed(opts.mode, 12, |i| {
        let lambda = [0.1, 1.0, 10.0][i % 3];
        let p = Problem::random(rng::derive_seed(opts.seed, &[4, i as u64]), 4, 8, 32, 4);
        let res = solvers::memit_update(&p.w0, &p.c0, &p.k_e, &p.v_e, lambda)?;
        let grad = oracle::memit_gradient(&res.new_weights, &p.w0, &p.k0, &p.k_e, &p.v_e, lambda);
        let scale = 1.0 + p.c0.norm() * p.w0.norm() + (&p.v_e * p.k_e.transpose()).norm();
        let step = oracle::descent_step(&p.k0, &p.k_e, lambda);
        let gd = oracle::gd_minimize(&p.w0, &p.k0, &p.k_e, &p.v_e, lambda, 3000, step)?;
        let closed = oracle::memit_objective(&res.new_weights, &p.w0, &p.k0, &p.k_e, &p.v_e, lambda);
        let excess = (closed - gd.objective_value) / (1.0 + gd.objective_value.abs());
        Ok::<_, Error>((grad.norm() / scale, excess))
    })?;
    Ok(vec![
        below(
            "memit_stationary",
            max(rows.iter().map(|r| r.0)),
            1e-8,
            "12 instances, oracle gradient at the closed form".into(),
        ),
        below(
            "memit_not_worse_than_descent",
            max(rows.iter().map(|r| r.1)),
            1e-6,
            "12 instances, 3000 descent steps".into(),
        ),
    ])
}

fn small_model(seed: u64) -> Result<ToyModel> {
    ToyModel::new(&ModelConfig {
        d_ctx: 12,
        d_k: 10,
        d_v: 8,
        vocab: 20,
        layers: 4,
        seed,
        ..Default::default()
    })
}

fn distribution_reduction(opts: &VerifyOptions) -> Result<Check> {
    let mismatches = exec::try_map_indexed(opts.mode, 10, |i| {
        let seed = rng::derive_seed(opts.seed, &[5, i as u64]);
        let model = small_model(seed)?;
        let layer = 1 + i % 2;
        let contexts = rng::gaussian_matrix(&mut rng::rng(seed), 12, 40, 1.0);
        let c0 = solvers::accumulate_covariance(&model.layer_keys(layer, &contexts)?)?.matrix;
        let synth = facts::KeySynthesis::default();
        let mut fs = facts::generate_fact_set_with(3, 12, 10, 8, 20, 0, &facts::FactOptions::default(), seed)?;
        for f in &mut fs {
            f.edit_key = facts::fact_key(&model, layer, f, &synth)?;
        }
        let direct = solvers::memit_update(
            model.weights(layer)?,
            &c0,
            &facts::stack_keys(&fs),
            &facts::stack_values(&fs),
            1.0,
        )?;
        let mut edited = model.clone();
        let plan = LayerPlan::single(layer, c0);
        distribution::distribute_memit(&mut edited, &plan, &fs, 1.0, &synth)?;
        Ok::<_, Error>(usize::from(edited.weights(layer)? != &direct.new_weights))
    })?;
    Ok(below(
        "single_layer_distribution_is_plain_update",
        mismatches.iter().sum::<usize>() as f64,
        0.0,
        "10 seeds, bitwise".into(),
    ))
}

fn score_table() -> Result<Check> {
    let worst = max([
        (metrics::composite_score(100.0, 97.9, 75.31)? - 89.57).abs(),
        (metrics::composite_score(100.0, 97.25, 81.94)? - 92.34).abs(),
    ]);
    Ok(below(
        "composite_score_reference_rows",
        worst,
        0.01,
        "two reference rows".into(),
    ))
}

fn gradient_checks(opts: &VerifyOptions) -> Result<Check> {
    let mut worst: f64 = 0.0;
    for i in 0..5u64 {
        let p = Problem::random(rng::derive_seed(opts.seed, &[7, i]), 3, 5, 12, 2);
        let w = rng::gaussian_matrix(&mut rng::rng(rng::derive_seed(opts.seed, &[7, i, 1])), 3, 5, 1.0);
        let f = |x: &DMatrix<f64>| oracle::memit_objective(x, &p.w0, &p.k0, &p.k_e, &p.v_e, 0.5);
        let fd = oracle::finite_diff_gradient(&f, &w, 1e-5)?;
        let an = oracle::memit_gradient(&w, &p.w0, &p.k0, &p.k_e, &p.v_e, 0.5);
        worst = worst.max(oracle::relative_error(&an, &fd));
    }
    let model = small_model(opts.seed)?;
    for i in 0..5u64 {
        let mut r = rng::rng(rng::derive_seed(opts.seed, &[7, 100 + i]));
        let k = model.layer_key(2, &rng::gaussian_vector(&mut r, 12, 1.0))?;
        let obj = ValueObjective::new(&model, 2, &k, (i as usize * 7) % 20, 0.5)?;
        let v = obj.initial_value() + rng::gaussian_vector(&mut r, 8, 0.5);
        let (_, g) = obj.loss_and_gradient(&v)?;
        let f = |x: &DMatrix<f64>| {
            obj.loss_and_gradient(&x.column(0).into_owned())
                .map(|r| r.0)
                .unwrap_or(f64::NAN)
        };
        let fd = oracle::finite_diff_gradient(&f, &DMatrix::from_column_slice(8, 1, v.as_slice()), 1e-5)?;
        worst = worst.max(oracle::relative_error(
            &DMatrix::from_column_slice(8, 1, g.as_slice()),
            &fd,
        ));
    }
    Ok(below(
        "analytic_gradients_match_finite_differences",
        worst,
        1e-5,
        "5 points each for the MEMIT objective and the value loss".into(),
    ))
}

fn conditioning(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut p = Problem::random(rng::derive_seed(opts.seed, &[8]), 8, 32, 128, 6);
    let mut r = rng::rng(rng::derive_seed(opts.seed, &[8, 1]));
    let nudge = rng::gaussian_vector(&mut r, 32, 1e-5);
    let twin = p.k_e.column(0) + nudge;
    p.k_e.set_column(1, &twin);
    let exact = solvers::emmet_update(&p.w0, &p.c0, &p.k_e, &p.v_e, 0.0)?;
    let reg = solvers::emmet_update(&p.w0, &p.c0, &p.k_e, &p.v_e, 0.1)?;
    let cond_d = exact.condition_d.expect("emmet reports cond(D)");
    let cond_reg = reg.condition_d_regularized.expect("emmet reports cond(D~)");
    let threshold = 1e8;
    Ok(vec![
        Check {
            name: "near_parallel_keys_are_ill_conditioned",
            passed: cond_d > 1e6 && exact.is_ill_conditioned(threshold),
            value: cond_d,
            threshold: 1e6,
            detail: "cond(D) must exceed the threshold and be flagged".into(),
        },
        Check {
            name: "regularizer_restores_conditioning",
            passed: cond_reg < cond_d && !reg.is_ill_conditioned(threshold) && reg.delta.iter().all(|x| x.is_finite()),
            value: cond_reg,
            threshold,
            detail: format!("alpha = 0.1, cond(D) = {cond_d:.3e}"),
        },
    ])
}

fn end_to_end(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let config = ExperimentConfig {
        methods: vec![Method::Emmet],
        alpha: 0.0,
        seed: opts.seed,
        ..Default::default()
    };
    let bench = Workbench::new(&config)?.with_execution(opts.mode);
    let fs = bench.facts(16, 0)?;
    let (pre_es, _) = metrics::efficacy(bench.model(), &fs)?;
    let out = bench.run_facts(
        Method::Emmet,
        Params {
            lambda: config.lambda,
            alpha: 0.0,
        },
        16,
        0,
        &fs,
    )?;
    let r = &out.report;
    let intact = bench.model().weights_hash()? == bench.base_hash();
    Ok(vec![
        Check {
            name: "toy_edit_succeeds",
            passed: r.es == 100.0 && pre_es < 100.0,
            value: r.es,
            threshold: 100.0,
            detail: format!("16 edits, efficacy {pre_es} before"),
        },
        below(
            "toy_edit_neighborhood_drop",
            100.0 - r.ns,
            25.0,
            format!(
                "{} neighbors, {} preserved keys",
                config.neighborhood, config.preserved_keys
            ),
        ),
        below(
            "toy_edit_memorization_residual",
            r.mem_residual,
            1e-8,
            "final layer, recomputed keys".into(),
        ),
        Check {
            name: "toy_model_restored",
            passed: intact,
            value: f64::from(u8::from(intact)),
            threshold: 1.0,
            detail: "weights hash after the run equals the original".into(),
        },
    ])
}

fn weight_format(opts: &VerifyOptions) -> Result<Check> {
    let model = small_model(opts.seed)?;
    let bytes = weights::encode(model.layers())?;
    let back = weights::decode(&bytes)?;
    let exact = back.as_slice() == model.layers() && weights::encode(&back)? == bytes;
    Ok(Check {
        name: "weight_file_round_trip",
        passed: exact,
        value: f64::from(u8::from(exact)),
        threshold: 1.0,
        detail: format!("{} bytes", bytes.len()),
    })
}

/// Runs every check; a check that errors is recorded as failed rather than
/// aborting the suite.
pub fn verify(options: &VerifyOptions) -> VerifySummary {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, result: Result<Vec<Check>>| match result {
        Ok(cs) => checks.extend(cs),
        Err(e) => checks.push(Check {
            name,
            passed: false,
            value: f64::NAN,
            threshold: f64::NAN,
            detail: e.to_string(),
        }),
    };
    push("kkt_agreement", kkt_agreement(options));
    push("emmet_is_minimal", emmet_minimality(options).map(|c| vec![c]));
    push(
        "rome_equals_single_edit_emmet",
        rome_reduction(options).map(|c| vec![c]),
    );
    push("memit_optimality", memit_optimality(options));
    push(
        "single_layer_distribution_is_plain_update",
        distribution_reduction(options).map(|c| vec![c]),
    );
    push("composite_score_reference_rows", score_table().map(|c| vec![c]));
    push(
        "analytic_gradients_match_finite_differences",
        gradient_checks(options).map(|c| vec![c]),
    );
    push("conditioning", conditioning(options));
    push("toy_edit", end_to_end(options));
    push("weight_file_round_trip", weight_format(options).map(|c| vec![c]));
    VerifySummary {
        passed: checks.iter().all(|c| c.passed),
        seed: options.seed,
        fault: options.fault,
        checks,
    }
}
