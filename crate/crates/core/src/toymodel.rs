//! The editable synthetic model.
//!
//! A context vector flows through alternating fixed maps and editable
//! projection layers:
//!
//! ```text
//! key_0 = map_0(context)                 map_0: d_ctx -> d_k
//! out_l = W_l key_l                      W_l:   d_v x d_k
//! key_l = map_l(out_{l-1})  (l >= 1)     map_l: d_v -> d_k
//! logits = readout * out_last            readout: vocab x d_v
//! ```
//!
//! Only the `W_l` change after construction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, TanhMap};
use crate::rng;
use crate::weights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_ctx: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub vocab: usize,
    pub layers: usize,
    pub seed: u64,
    /// Pre-activation scale of the fixed maps.
    pub map_gain: f64,
    pub map_bias: f64,
    pub weight_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_ctx: 64,
            d_k: 64,
            d_v: 48,
            vocab: 100,
            layers: 6,
            seed: 0,
            map_gain: 1.5,
            map_bias: 0.1,
            weight_gain: 1.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.d_ctx == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::Config(format!("vocab must be >= 2, got {}", self.vocab)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: Vec<DMatrix<f64>>,
    maps: Vec<TanhMap>,
    readout: DMatrix<f64>,
    probe_context: DVector<f64>,
    seed: u64,
}

/// Intermediate values of a forward pass from some layer's output, kept for
/// the vector-Jacobian product.
#[derive(Debug, Clone)]
pub struct Trace {
    start_layer: usize,
    slopes: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub layers: Vec<DMatrix<f64>>,
    pub hash: String,
}

impl Snapshot {
    pub fn of(layers: &[DMatrix<f64>]) -> Result<Self> {
        Ok(Self {
            layers: layers.to_vec(),
            hash: weights_hash(layers)?,
        })
    }

    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        weights::write_file(path, &self.layers)
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::of(&weights::read_file(path)?)
    }
}

/// SHA-256 of the binary weight encoding, lower-case hex.
pub fn weights_hash(layers: &[DMatrix<f64>]) -> Result<String> {
    let digest = Sha256::digest(weights::encode(layers)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ToyModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(rng::derive_seed(config.seed, &[0x006d_6f64_656c]));
        let mut maps = Vec::with_capacity(config.layers);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input_dim = if l == 0 { config.d_ctx } else { config.d_v };
            maps.push(TanhMap::random(
                &mut r,
                input_dim,
                config.d_k,
                config.map_gain,
                config.map_bias,
            ));
            layers.push(rng::gaussian_matrix(
                &mut r,
                config.d_v,
                config.d_k,
                config.weight_gain / (config.d_k as f64).sqrt(),
            ));
        }
        let mut readout = rng::gaussian_matrix(&mut r, config.vocab, config.d_v, 1.0);
        for mut row in readout.row_iter_mut() {
            let n = row.norm();
            row /= n;
        }
        let probe_context = rng::gaussian_vector(&mut r, config.d_ctx, 1.0);
        Self::from_parts(layers, maps, readout, probe_context, config.seed)
    }

    pub fn from_parts(
        layers: Vec<DMatrix<f64>>,
        maps: Vec<TanhMap>,
        readout: DMatrix<f64>,
        probe_context: DVector<f64>,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() || layers.len() != maps.len() {
            return Err(Error::dim("layer/map count", layers.len(), maps.len()));
        }
        let d_v = layers[0].nrows();
        let d_k = layers[0].ncols();
        for (l, (w, m)) in layers.iter().zip(&maps).enumerate() {
            if w.shape() != (d_v, d_k) {
                return Err(Error::dim("layer shape", format!("{d_v}x{d_k}"), format!("{:?}", w.shape())).at_layer(l));
            }
            if m.output_dim() != d_k || (l > 0 && m.input_dim() != d_v) {
                return Err(Error::dim(
                    "inter-layer map",
                    format!("{}->{d_k}", if l == 0 { m.input_dim() } else { d_v }),
                    format!("{}->{}", m.input_dim(), m.output_dim()),
                )
                .at_layer(l));
            }
        }
        if readout.ncols() != d_v {
            return Err(Error::dim("readout columns", d_v, readout.ncols()));
        }
        if probe_context.len() != maps[0].input_dim() {
            return Err(Error::dim("probe context", maps[0].input_dim(), probe_context.len()));
        }
        Ok(Self {
            layers,
            maps,
            readout,
            probe_context,
            seed,
        })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
    pub fn d_ctx(&self) -> usize {
        self.maps[0].input_dim()
    }
    pub fn d_k(&self) -> usize {
        self.layers[0].ncols()
    }
    pub fn d_v(&self) -> usize {
        self.layers[0].nrows()
    }
    pub fn vocab(&self) -> usize {
        self.readout.nrows()
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }
    pub fn maps(&self) -> &[TanhMap] {
        &self.maps
    }
    pub fn readout(&self) -> &DMatrix<f64> {
        &self.readout
    }
    pub fn probe_context(&self) -> &DVector<f64> {
        &self.probe_context
    }

    pub fn weights(&self, layer: usize) -> Result<&DMatrix<f64>> {
        self.check_layer(layer)?;
        Ok(&self.layers[layer])
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::LayerOutOfRange {
                layer,
                count: self.layers.len(),
            });
        }
        Ok(())
    }

    fn check_finite(v: &DVector<f64>, layer: usize) -> Result<()> {
        if v.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric { layer })
        }
    }

    /// Input vector of `layer` for the given context.
    pub fn layer_key(&self, layer: usize, context: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_layer(layer)?;
        let mut key = self.maps[0].map(context)?;
        Self::check_finite(&key, 0)?;
        for l in 0..layer {
            let out = &self.layers[l] * &key;
            key = self.maps[l + 1].map(&out)?;
            Self::check_finite(&key, l + 1)?;
        }
        Ok(key)
    }

    /// Layer keys for every column of `contexts`.
    pub fn layer_keys(&self, layer: usize, contexts: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cols: Vec<DVector<f64>> = contexts
            .column_iter()
            .map(|c| self.layer_key(layer, &c.into_owned()))
            .collect::<Result<_>>()?;
        if cols.is_empty() {
            return Ok(DMatrix::zeros(self.d_k(), 0));
        }
        Ok(DMatrix::from_columns(&cols))
    }

    pub fn layer_output(&self, layer: usize, context: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.layers[layer] * self.layer_key(layer, context)?)
    }

    pub fn logits(&self, context: &DVector<f64>) -> Result<DVector<f64>> {
        let last = self.layers.len() - 1;
        let out = self.layer_output(last, context)?;
        Self::check_finite(&out, last)?;
        Ok(&self.readout * out)
    }

    /// Logits when the output of `layer` is replaced by `output`.
    pub fn logits_from_output(&self, layer: usize, output: &DVector<f64>) -> Result<(DVector<f64>, Trace)> {
        self.check_layer(layer)?;
        if output.len() != self.d_v() {
            return Err(Error::dim("layer output", self.d_v(), output.len()));
        }
        let mut h = output.clone();
        let mut slopes = Vec::with_capacity(self.layers.len() - layer - 1);
        for l in layer + 1..self.layers.len() {
            let (act, slope) = self.maps[l].forward_with_slope(&h);
            h = &self.layers[l] * act;
            Self::check_finite(&h, l)?;
            slopes.push(slope);
        }
        Ok((
            &self.readout * h,
            Trace {
                start_layer: layer,
                slopes,
            },
        ))
    }

    /// Pulls a logit-space gradient back to the output of the trace's start layer.
    pub fn output_gradient(&self, trace: &Trace, grad_logits: &DVector<f64>) -> DVector<f64> {
        let mut g = self.readout.tr_mul(grad_logits);
        for (i, slope) in trace.slopes.iter().enumerate().rev() {
            let l = trace.start_layer + 1 + i;
            let g_act = self.layers[l].tr_mul(&g);
            let g_pre = g_act.component_mul(slope);
            g = self.maps[l].weight.tr_mul(&g_pre);
        }
        g
    }

    pub fn apply_delta(&mut self, layer: usize, delta: &DMatrix<f64>) -> Result<()> {
        self.check_layer(layer)?;
        if delta.shape() != self.layers[layer].shape() {
            return Err(Error::dim(
                "delta shape",
                format!("{:?}", self.layers[layer].shape()),
                format!("{:?}", delta.shape()),
            ));
        }
        self.layers[layer] += delta;
        Ok(())
    }

    /// Replaces all layer weights, keeping maps and readout.
    pub fn set_layers(&mut self, layers: Vec<DMatrix<f64>>) -> Result<()> {
        if layers.len() != self.layers.len() {
            return Err(Error::dim("layer count", self.layers.len(), layers.len()));
        }
        for (l, (new, old)) in layers.iter().zip(&self.layers).enumerate() {
            if new.shape() != old.shape() {
                return Err(Error::dim(
                    "layer shape",
                    format!("{:?}", old.shape()),
                    format!("{:?}", new.shape()),
                )
                .at_layer(l));
            }
        }
        self.layers = layers;
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        Snapshot::of(&self.layers)
    }

    pub fn weights_hash(&self) -> Result<String> {
        weights_hash(&self.layers)
    }

    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<()> {
        let found = weights_hash(&snapshot.layers)?;
        if found != snapshot.hash {
            return Err(Error::Corruption {
                expected: snapshot.hash.clone(),
                found,
            });
        }
        self.set_layers(snapshot.layers.clone())
    }
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.max();
    let e = logits.map(|z| (z - m).exp());
    let s = e.sum();
    e / s
}

pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let m = logits.max();
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

pub fn argmax(v: &DVector<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyModel {
        ToyModel::new(&ModelConfig {
            d_ctx: 5,
            d_k: 6,
            d_v: 4,
            vocab: 7,
            layers: 3,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn contexts(n: usize, d: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut r = rng::rng(seed);
        (0..n).map(|_| rng::gaussian_vector(&mut r, d, 1.0)).collect()
    }

    /// Straight-line forward chain written without any model helpers.
    fn reference_key(m: &ToyModel, layer: usize, c: &DVector<f64>) -> DVector<f64> {
        let tanh_map = |map: &TanhMap, x: &DVector<f64>| {
            let mut y = DVector::zeros(map.weight.nrows());
            for i in 0..map.weight.nrows() {
                let mut s = map.bias[i];
                for j in 0..map.weight.ncols() {
                    s += map.weight[(i, j)] * x[j];
                }
                y[i] = s.tanh();
            }
            y
        };
        let mut k = tanh_map(&m.maps()[0], c);
        for l in 0..layer {
            let w = &m.layers()[l];
            let mut out = DVector::zeros(w.nrows());
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    out[i] += w[(i, j)] * k[j];
                }
            }
            k = tanh_map(&m.maps()[l + 1], &out);
        }
        k
    }

    #[test]
    fn layer_zero_key_ignores_weights() {
        let mut m = small();
        let c = &contexts(1, 5, 1)[0];
        let expected = m.maps()[0].map(c).unwrap();
        assert_eq!(m.layer_key(0, c).unwrap(), expected);
        m.apply_delta(0, &DMatrix::from_element(4, 6, 0.3)).unwrap();
        assert_eq!(m.layer_key(0, c).unwrap(), expected);
    }

    #[test]
    fn editing_changes_only_downstream_keys() {
        let mut m = small();
        let c = &contexts(1, 5, 2)[0];
        let before: Vec<_> = (0..3).map(|l| m.layer_key(l, c).unwrap()).collect();
        m.apply_delta(1, &DMatrix::from_element(4, 6, 0.2)).unwrap();
        assert_eq!(m.layer_key(0, c).unwrap(), before[0]);
        assert_eq!(m.layer_key(1, c).unwrap(), before[1]);
        assert_ne!(m.layer_key(2, c).unwrap(), before[2]);
    }

    #[test]
    fn matches_duplicate_forward_on_random_contexts() {
        let m = small();
        for c in contexts(50, 5, 3) {
            for l in 0..3 {
                let a = m.layer_key(l, &c).unwrap();
                let b = reference_key(&m, l, &c);
                assert!((a - b).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_layer() {
        let m = small();
        let c = &contexts(1, 5, 4)[0];
        assert!(matches!(
            m.layer_key(3, c),
            Err(Error::LayerOutOfRange { layer: 3, count: 3 })
        ));
    }

    #[test]
    fn zero_context_with_zero_bias_maps() {
        let m = ToyModel::new(&ModelConfig {
            d_ctx: 5,
            d_k: 6,
            d_v: 4,
            vocab: 7,
            layers: 3,
            map_bias: 0.0,
            ..Default::default()
        })
        .unwrap();
        let z = m.logits(&DVector::zeros(5)).unwrap();
        assert_eq!(z, DVector::zeros(7));
    }

    #[test]
    fn softmax_normalizes_and_is_shift_invariant() {
        let m = small();
        for c in contexts(20, 5, 5) {
            let z = m.logits(&c).unwrap();
            let p = softmax(&z);
            assert!((p.sum() - 1.0).abs() <= 1e-12);
            let shifted = z.add_scalar(123.0);
            assert_eq!(argmax(&z), argmax(&shifted));
            assert!((softmax(&shifted) - &p).amax() < 1e-12);
            assert!((log_softmax(&z).map(f64::exp) - &p).amax() < 1e-12);
        }
    }

    #[test]
    fn readout_rows_are_unit_norm() {
        let m = small();
        for row in m.readout().row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_delta_is_a_no_op() {
        let mut m = small();
        let probes = contexts(20, 5, 6);
        let before: Vec<_> = probes.iter().map(|c| m.logits(c).unwrap()).collect();
        m.apply_delta(2, &DMatrix::zeros(4, 6)).unwrap();
        for (c, b) in probes.iter().zip(before) {
            assert!((m.logits(c).unwrap() - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn delta_then_negation_restores_hash() {
        let mut m = small();
        let h = m.weights_hash().unwrap();
        // doubling and halving back are exact in binary floating point
        let d = m.layers()[1].clone();
        m.apply_delta(1, &d).unwrap();
        assert_ne!(m.weights_hash().unwrap(), h);
        m.apply_delta(1, &(-d)).unwrap();
        assert_eq!(m.weights_hash().unwrap(), h);
    }

    #[test]
    fn delta_shape_checked() {
        let mut m = small();
        assert!(matches!(
            m.apply_delta(0, &DMatrix::zeros(6, 4)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn snapshot_restore_after_edits() {
        let mut m = small();
        let snap = m.snapshot().unwrap();
        let probes = contexts(10, 5, 7);
        let before: Vec<_> = probes.iter().map(|c| m.logits(c).unwrap()).collect();
        let mut r = rng::rng(8);
        for i in 0..5 {
            m.apply_delta(i % 3, &rng::gaussian_matrix(&mut r, 4, 6, 0.5)).unwrap();
        }
        m.restore(&snap).unwrap();
        assert_eq!(m.weights_hash().unwrap(), snap.hash);
        for (c, b) in probes.iter().zip(before) {
            assert!((m.logits(c).unwrap() - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn tampered_snapshot_is_rejected() {
        let mut m = small();
        let mut snap = m.snapshot().unwrap();
        snap.layers[0][(0, 0)] += 1.0;
        assert!(matches!(m.restore(&snap), Err(Error::Corruption { .. })));
    }

    #[test]
    fn snapshot_file_round_trip() {
        let m = small();
        let snap = m.snapshot().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.pmed");
        snap.write(&path).unwrap();
        let back = Snapshot::read(&path).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn output_gradient_matches_finite_differences() {
        let m = small();
        let h = rng::gaussian_vector(&mut rng::rng(10), 4, 1.0);
        let target = 3;
        let f = |h: &DVector<f64>| log_softmax(&m.logits_from_output(0, h).unwrap().0)[target];
        let (z, trace) = m.logits_from_output(0, &h).unwrap();
        let mut gz = -softmax(&z);
        gz[target] += 1.0;
        let g = m.output_gradient(&trace, &gz);
        for i in 0..4 {
            let mut hp = h.clone();
            let mut hm = h.clone();
            hp[i] += 1e-6;
            hm[i] -= 1e-6;
            let fd = (f(&hp) - f(&hm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}
