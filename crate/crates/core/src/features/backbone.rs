//! The learnable part of the feature pipeline: two small perceptrons mapping
//! each point's geometric feature to a detector score and to the six
//! covariance parameters `(l1, l2, l3, d1, d2, d3)`.

use nalgebra::{SMatrix, SVector, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::{PointFeature, FEATURE_DIM};
use crate::error::{Error, Result};

pub const HIDDEN: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.1;

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// `FEATURE_DIM -> HIDDEN -> OUT` perceptron with a leaky-ReLU hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<const OUT: usize> {
    pub w1: SMatrix<f64, HIDDEN, FEATURE_DIM>,
    pub b1: SVector<f64, HIDDEN>,
    pub w2: SMatrix<f64, OUT, HIDDEN>,
    pub b2: SVector<f64, OUT>,
}

impl<const OUT: usize> Mlp<OUT> {
    pub const N_PARAMS: usize = HIDDEN * FEATURE_DIM + HIDDEN + OUT * HIDDEN + OUT;

    pub fn zeros() -> Self {
        Self {
            w1: SMatrix::zeros(),
            b1: SVector::zeros(),
            w2: SMatrix::zeros(),
            b2: SVector::zeros(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(rng: &mut impl Rng) -> Self {
        let a1 = (6.0 / (FEATURE_DIM + HIDDEN) as f64).sqrt();
        let a2 = (6.0 / (HIDDEN + OUT) as f64).sqrt();
        Self {
            w1: SMatrix::from_fn(|_, _| rng.random_range(-a1..a1)),
            b1: SVector::zeros(),
            w2: SMatrix::from_fn(|_, _| rng.random_range(-a2..a2)),
            b2: SVector::zeros(),
        }
    }

    /// Returns the output and the hidden pre-activation.
    pub fn forward(&self, x: &PointFeature) -> (SVector<f64, OUT>, SVector<f64, HIDDEN>) {
        let pre = self.w1 * x + self.b1;
        let h = pre.map(leaky);
        (self.w2 * h + self.b2, pre)
    }

    /// Accumulates parameter gradients for one sample into `grad`.
    pub fn backward_into(
        &self,
        x: &PointFeature,
        pre: &SVector<f64, HIDDEN>,
        upstream: &SVector<f64, OUT>,
        grad: &mut Mlp<OUT>,
    ) {
        let h = pre.map(leaky);
        grad.w2 += upstream * h.transpose();
        grad.b2 += upstream;
        let gh = self.w2.transpose() * upstream;
        let ga = gh.component_mul(&pre.map(leaky_grad));
        grad.w1 += ga * x.transpose();
        grad.b1 += ga;
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
    }

    fn read_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len(), Self::N_PARAMS);
        let (a, rest) = flat.split_at(HIDDEN * FEATURE_DIM);
        let (b, rest) = rest.split_at(HIDDEN);
        let (c, d) = rest.split_at(OUT * HIDDEN);
        Self {
            w1: SMatrix::from_column_slice(a),
            b1: SVector::from_column_slice(b),
            w2: SMatrix::from_column_slice(c),
            b2: SVector::from_column_slice(d),
        }
    }
}

/// Learnable parameters of the feature pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub detector: Mlp<1>,
    pub covariance: Mlp<6>,
}

impl ModelParams {
    pub const N_PARAMS: usize = Mlp::<1>::N_PARAMS + Mlp::<6>::N_PARAMS;

    pub fn zeros() -> Self {
        Self {
            detector: Mlp::zeros(),
            covariance: Mlp::zeros(),
        }
    }

    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            detector: Mlp::random(&mut rng),
            covariance: Mlp::random(&mut rng),
        }
    }

    /// Flat view, detector head first; within a head `w1, b1, w2, b2`, column-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::N_PARAMS);
        self.detector.write_flat(&mut v);
        self.covariance.write_flat(&mut v);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::N_PARAMS {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                Self::N_PARAMS,
                flat.len()
            )));
        }
        let (a, b) = flat.split_at(Mlp::<1>::N_PARAMS);
        Ok(Self {
            detector: Mlp::read_flat(a),
            covariance: Mlp::read_flat(b),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    /// Order-sensitive fingerprint used to detect records produced with other parameters.
    pub fn digest(&self) -> u64 {
        // FNV-1a over the raw bit patterns
        let mut h: u64 = 0xcbf29ce484222325;
        for v in self.to_flat() {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let mut a = self.to_flat();
        for (x, y) in a.iter_mut().zip(other.to_flat()) {
            *x += scale * y;
        }
        *self = ModelParams::from_flat(&a).expect("same layout");
    }
}

/// Cached activations of one forward pass over a frame.
#[derive(Clone, Debug)]
pub struct BackboneRecord {
    pub detector_pre: Vec<SVector<f64, HIDDEN>>,
    pub covariance_pre: Vec<SVector<f64, HIDDEN>>,
    pub params_digest: u64,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub scores: Vec<f64>,
    pub covparams: Vec<Vector6<f64>>,
    pub record: BackboneRecord,
}

pub fn backbone_forward(params: &ModelParams, feats: &[PointFeature]) -> BackboneOutput {
    let n = feats.len();
    let mut scores = Vec::with_capacity(n);
    let mut covparams = Vec::with_capacity(n);
    let mut detector_pre = Vec::with_capacity(n);
    let mut covariance_pre = Vec::with_capacity(n);
    for f in feats {
        let (s, a) = params.detector.forward(f);
        let (c, b) = params.covariance.forward(f);
        scores.push(s[0]);
        covparams.push(c);
        detector_pre.push(a);
        covariance_pre.push(b);
    }
    BackboneOutput {
        scores,
        covparams,
        record: BackboneRecord {
            detector_pre,
            covariance_pre,
            params_digest: params.digest(),
        },
    }
}

/// Per-point gradient of the heads' outputs back to the parameters.
pub fn heads_backward(
    params: &ModelParams,
    feats: &[PointFeature],
    record: &BackboneRecord,
    d_scores: &[(usize, f64)],
    d_covparams: &[(usize, Vector6<f64>)],
    grad: &mut ModelParams,
) -> Result<()> {
    if record.params_digest != params.digest() {
        return Err(Error::StaleRecords(
            "backbone record was produced with different parameters".into(),
        ));
    }
    if record.detector_pre.len() != feats.len() || record.covariance_pre.len() != feats.len() {
        return Err(Error::StaleRecords(
            "backbone record does not match the frame's features".into(),
        ));
    }
    for &(i, g) in d_scores {
        if g != 0.0 {
            params.detector.backward_into(
                &feats[i],
                &record.detector_pre[i],
                &SVector::<f64, 1>::new(g),
                &mut grad.detector,
            );
        }
    }
    for (i, g) in d_covparams {
        if g.iter().any(|v| *v != 0.0) {
            params.covariance.backward_into(
                &feats[*i],
                &record.covariance_pre[*i],
                g,
                &mut grad.covariance,
            );
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(seed: u64) -> PointFeature {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointFeature::from_fn(|_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_bias_outputs() {
        let mut p = ModelParams::zeros();
        p.detector.b2[0] = 0.7;
        p.covariance.b2 = Vector6::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0);
        let feats: Vec<_> = (0..5).map(feature).collect();
        let out = backbone_forward(&p, &feats);
        assert!(out.scores.iter().all(|s| *s == 0.7));
        assert!(out.covparams.iter().all(|c| *c == p.covariance.b2));
    }

    #[test]
    fn identical_inputs_give_identical_outputs() {
        let p = ModelParams::random(3);
        let f = feature(9);
        let out = backbone_forward(&p, &[f, f]);
        assert_eq!(out.scores[0], out.scores[1]);
        assert_eq!(out.covparams[0], out.covparams[1]);
        let again = backbone_forward(&p, &[f]);
        assert_eq!(again.scores[0], out.scores[0]);
    }

    #[test]
    fn flat_round_trip_and_digest() {
        let p = ModelParams::random(5);
        let q = ModelParams::from_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest(), q.digest());
        assert_ne!(p.digest(), ModelParams::random(6).digest());
        assert!(ModelParams::from_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let params = ModelParams::random(17);
        let feats: Vec<_> = (0..4).map(|s| feature(100 + s)).collect();
        // Objective: sum_i a_i * score_i + b_i . covparams_i with fixed random weights.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<Vector6<f64>> = (0..4)
            .map(|_| Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |p: &ModelParams| {
            let out = backbone_forward(p, &feats);
            (0..4)
                .map(|i| a[i] * out.scores[i] + b[i].dot(&out.covparams[i]))
                .sum::<f64>()
        };
        let out = backbone_forward(&params, &feats);
        let mut grad = ModelParams::zeros();
        let ds: Vec<(usize, f64)> = a.iter().copied().enumerate().collect();
        let dc: Vec<(usize, Vector6<f64>)> = b.iter().copied().enumerate().collect();
        heads_backward(&params, &feats, &out.record, &ds, &dc, &mut grad).unwrap();
        let flat = params.to_flat();
        let g = grad.to_flat();
        let step = 1e-6;
        for k in 0..ModelParams::N_PARAMS {
            let mut p = flat.clone();
            p[k] += step;
            let fp = objective(&ModelParams::from_flat(&p).unwrap());
            p[k] -= 2.0 * step;
            let fm = objective(&ModelParams::from_flat(&p).unwrap());
            let fd = (fp - fm) / (2.0 * step);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0),
                "param {k}: fd {fd} analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn stale_record_is_rejected() {
        let p = ModelParams::random(1);
        let feats = vec![feature(2)];
        let out = backbone_forward(&p, &feats);
        let q = ModelParams::random(2);
        let mut grad = ModelParams::zeros();
        let r = heads_backward(&q, &feats, &out.record, &[(0, 1.0)], &[], &mut grad);
        assert!(matches!(r, Err(Error::StaleRecords(_))));
    }
}
