//! Global and cluster-local prediction.
//!
//! A trained model carries the support vectors for the usual dual decision
//! function, and optionally the kmeans centers plus one sparse modification
//! vector per block. Local prediction looks up the test point's nearest
//! center `r` and applies block `r`'s modification, which reproduces the
//! pre-step local solution `alpha_t + (d_t)_<S_r>` exactly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SparseVector};
use crate::kernel::{kernel_eval, KernelSpec};
use crate::loss::LossKind;
use crate::partition::nearest_center_of;
use crate::{Error, Result};

/// A sample stored for the sake of local directions only (not a support vector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSample {
    pub index: u64,
    pub label: f64,
    pub features: SparseVector,
}

/// Trained model: support vectors, kernel, and optional local-prediction state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub loss: LossKind,
    pub c: f64,
    pub kernel: KernelSpec,
    /// Training-set indices of the support vectors (`alpha > 0`), ascending.
    pub support_indices: Vec<u64>,
    /// Dual values at the support indices; strictly positive.
    pub alpha: Vec<f64>,
    pub sv_labels: Vec<f64>,
    pub sv_features: Vec<SparseVector>,
    /// kmeans centers, present when training used kmeans partitioning.
    pub centers: Option<Vec<Vec<f64>>>,
    /// Per block: sparse `(training index, value)` modification entries; the
    /// local model for block `r` is `alpha + local_directions[r]`.
    pub local_directions: Option<Vec<Vec<(u64, f64)>>>,
    /// Samples referenced by `local_directions` that are not support vectors.
    pub direction_samples: Vec<DirectionSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictMode {
    Global,
    Local,
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let model: Model = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.support_indices.len();
        if self.alpha.len() != n || self.sv_labels.len() != n || self.sv_features.len() != n {
            return Err(Error::InvalidArgument(
                "support arrays differ in length".into(),
            ));
        }
        if self.alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::InvalidArgument(
                "support alphas must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn n_support(&self) -> usize {
        self.support_indices.len()
    }

    fn lookup(&self) -> HashMap<u64, (f64, &SparseVector)> {
        let mut map = HashMap::new();
        for i in 0..self.n_support() {
            map.insert(
                self.support_indices[i],
                (self.sv_labels[i], &self.sv_features[i]),
            );
        }
        for s in &self.direction_samples {
            map.insert(s.index, (s.label, &s.features));
        }
        map
    }
}

/// The dual decision function `sum_i alpha_i y_i K(x_i, x)`.
pub fn decision_value(model: &Model, x: &SparseVector) -> f64 {
    let mut v = 0.0;
    for i in 0..model.n_support() {
        v += model.alpha[i]
            * model.sv_labels[i]
            * kernel_eval(model.kernel, &model.sv_features[i], x);
    }
    v
}

fn sign_label(v: f64) -> f64 {
    // exact zero predicts +1
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Global prediction: the sign of the decision value.
pub fn predict_global(model: &Model, x: &SparseVector) -> f64 {
    sign_label(decision_value(model, x))
}

/// Local prediction: nearest-center lookup, then the decision value of the
/// modified dual vector for that block.
pub fn predict_local(model: &Model, x: &SparseVector) -> Result<f64> {
    Ok(sign_label(local_decision_value(model, x)?))
}

pub fn local_decision_value(model: &Model, x: &SparseVector) -> Result<f64> {
    let centers = model.centers.as_deref().ok_or(Error::MissingLocalModel)?;
    let directions = model
        .local_directions
        .as_deref()
        .ok_or(Error::MissingLocalModel)?;
    let r = nearest_center_of(centers, x);
    let mut v = decision_value(model, x);
    let table = model.lookup();
    for &(index, value) in &directions[r] {
        let (label, features) = table
            .get(&index)
            .ok_or_else(|| Error::InvalidArgument(format!("direction sample {index} missing")))?;
        v += value * label * kernel_eval(model.kernel, features, x);
    }
    Ok(v)
}

/// Predicted labels for every sample, in order. Large test sets are chunked
/// across `threads` independent workers.
pub fn predict_labels(
    model: &Model,
    test: &Dataset,
    mode: PredictMode,
    threads: usize,
) -> Result<Vec<f64>> {
    let n = test.n();
    let threads = threads.max(1).min(n);
    if threads == 1 || n < 64 {
        return (0..n)
            .map(|i| match mode {
                PredictMode::Global => Ok(predict_global(model, test.sample(i))),
                PredictMode::Local => predict_local(model, test.sample(i)),
            })
            .collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out = vec![0.0; n];
    let mut slices: Vec<&mut [f64]> = out.chunks_mut(chunk).collect();
    let result: Result<()> = std::thread::scope(|s| {
        let mut handles = Vec::new();
        for (t, slice) in slices.drain(..).enumerate() {
            handles.push(s.spawn(move || -> Result<()> {
                for (off, v) in slice.iter_mut().enumerate() {
                    let i = t * chunk + off;
                    *v = match mode {
                        PredictMode::Global => predict_global(model, test.sample(i)),
                        PredictMode::Local => predict_local(model, test.sample(i))?,
                    };
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("prediction worker panicked")?;
        }
        Ok(())
    });
    result?;
    Ok(out)
}

/// Fraction of correctly predicted labels.
pub fn accuracy(model: &Model, test: &Dataset, mode: PredictMode) -> Result<f64> {
    accuracy_with_threads(model, test, mode, 1)
}

pub fn accuracy_with_threads(
    model: &Model,
    test: &Dataset,
    mode: PredictMode,
    threads: usize,
) -> Result<f64> {
    let labels = predict_labels(model, test, mode, threads)?;
    let correct = labels
        .iter()
        .zip(test.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / test.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_libsvm;
    use approx::assert_relative_eq;

    fn toy_model() -> Model {
        Model {
            loss: LossKind::Hinge,
            c: 1.0,
            kernel: KernelSpec::Gaussian { gamma: 1.0 },
            support_indices: vec![],
            alpha: vec![],
            sv_labels: vec![],
            sv_features: vec![],
            centers: None,
            local_directions: None,
            direction_samples: vec![],
        }
    }

    #[test]
    fn empty_support_decides_zero_and_predicts_plus_one() {
        let m = toy_model();
        let x = SparseVector::new(vec![(1, 1.0)]).unwrap();
        assert_eq!(decision_value(&m, &x), 0.0);
        assert_eq!(predict_global(&m, &x), 1.0);
    }

    #[test]
    fn single_sv_at_itself() {
        let x = SparseVector::new(vec![(1, 2.0), (3, -1.0)]).unwrap();
        let mut m = toy_model();
        m.support_indices = vec![0];
        m.alpha = vec![1.0];
        m.sv_labels = vec![1.0];
        m.sv_features = vec![x.clone()];
        assert_relative_eq!(decision_value(&m, &x), 1.0);
    }

    #[test]
    fn decision_matches_dense_zero_padded_evaluation() {
        let d = crate::testutil::random_dataset(20, 5, 3);
        // fake alphas: support on even indices
        let mut m = toy_model();
        m.kernel = KernelSpec::Gaussian { gamma: 0.7 };
        let mut dense_alpha = vec![0.0; d.n()];
        for i in (0..d.n()).step_by(2) {
            dense_alpha[i] = 0.1 + i as f64 / 20.0;
            m.support_indices.push(i as u64);
            m.alpha.push(dense_alpha[i]);
            m.sv_labels.push(d.label(i));
            m.sv_features.push(d.sample(i).clone());
        }
        let x = SparseVector::new(vec![(1, 0.3), (2, -0.4)]).unwrap();
        let sparse = decision_value(&m, &x);
        let dense: f64 = (0..d.n())
            .map(|i| dense_alpha[i] * d.label(i) * kernel_eval(m.kernel, d.sample(i), &x))
            .sum();
        assert_relative_eq!(sparse, dense, epsilon = 1e-12);
    }

    #[test]
    fn zero_directions_match_global_exactly() {
        let d = crate::testutil::random_dataset(30, 4, 9);
        let mut m = toy_model();
        for i in 0..10 {
            m.support_indices.push(i as u64);
            m.alpha.push(0.2);
            m.sv_labels.push(d.label(i));
            m.sv_features.push(d.sample(i).clone());
        }
        m.centers = Some(vec![vec![1.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0]]);
        m.local_directions = Some(vec![vec![], vec![]]);
        for i in 10..30 {
            let g = predict_global(&m, d.sample(i));
            let l = predict_local(&m, d.sample(i)).unwrap();
            assert_eq!(g, l);
        }
    }

    #[test]
    fn local_mode_requires_centers() {
        let m = toy_model();
        let x = SparseVector::new(vec![(1, 1.0)]).unwrap();
        assert!(matches!(
            predict_local(&m, &x),
            Err(Error::MissingLocalModel)
        ));
    }

    #[test]
    fn local_and_global_can_disagree() {
        // two far clusters; the global model is dominated by cluster A's
        // big alpha, the local direction for cluster B flips its sign there
        let a = SparseVector::new(vec![(1, 10.0)]).unwrap();
        let b = SparseVector::new(vec![(1, -10.0)]).unwrap();
        let mut m = toy_model();
        m.kernel = KernelSpec::Gaussian { gamma: 0.05 };
        m.support_indices = vec![0];
        m.alpha = vec![1.0];
        m.sv_labels = vec![1.0];
        m.sv_features = vec![a.clone()];
        m.centers = Some(vec![vec![10.0], vec![-10.0]]);
        // block 1's direction adds weight on a negative sample at b
        m.local_directions = Some(vec![vec![], vec![(1, 2.0)]]);
        m.direction_samples = vec![DirectionSample {
            index: 1,
            label: -1.0,
            features: b.clone(),
        }];

        let probe = SparseVector::new(vec![(1, -9.0)]).unwrap();
        let g = predict_global(&m, &probe);
        let l = predict_local(&m, &probe).unwrap();
        assert_eq!(g, 1.0); // only positive mass globally
        assert_eq!(l, -1.0); // local direction dominates near cluster B
    }

    #[test]
    fn accuracy_cases() {
        let test = parse_libsvm("+1 1:10.0\n-1 1:-10.0\n+1 1:9.0\n-1 1:-9.0".as_bytes()).unwrap();
        // constant +1 predictor on a balanced set
        let constant = toy_model();
        assert_relative_eq!(
            accuracy(&constant, &test, PredictMode::Global).unwrap(),
            0.5
        );

        // one SV per class separates this toy set perfectly
        let mut m = toy_model();
        m.kernel = KernelSpec::Gaussian { gamma: 0.05 };
        m.support_indices = vec![0, 1];
        m.alpha = vec![1.0, 1.0];
        m.sv_labels = vec![1.0, -1.0];
        m.sv_features = vec![test.sample(0).clone(), test.sample(1).clone()];
        assert_relative_eq!(accuracy(&m, &test, PredictMode::Global).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_per_sample_loop() {
        let d = crate::testutil::random_dataset(100, 4, 12);
        let mut m = toy_model();
        m.kernel = KernelSpec::Gaussian { gamma: 0.4 };
        for i in 0..15 {
            m.support_indices.push(i as u64);
            m.alpha.push(0.3 + i as f64 * 0.01);
            m.sv_labels.push(d.label(i));
            m.sv_features.push(d.sample(i).clone());
        }
        let acc = accuracy_with_threads(&m, &d, PredictMode::Global, 4).unwrap();
        let mut correct = 0usize;
        for i in 0..d.n() {
            let v = decision_value(&m, d.sample(i));
            let label = if v >= 0.0 { 1.0 } else { -1.0 };
            if label == d.label(i) {
                correct += 1;
            }
        }
        assert_relative_eq!(acc, correct as f64 / d.n() as f64);
    }

    #[test]
    fn model_json_roundtrip() {
        let d = crate::testutil::random_dataset(6, 3, 1);
        let mut m = toy_model();
        m.support_indices = vec![2];
        m.alpha = vec![0.5];
        m.sv_labels = vec![d.label(2)];
        m.sv_features = vec![d.sample(2).clone()];
        m.centers = Some(vec![vec![0.0, 1.0, 0.0]]);
        m.local_directions = Some(vec![vec![(3, -0.25)]]);
        m.direction_samples = vec![DirectionSample {
            index: 3,
            label: d.label(3),
            features: d.sample(3).clone(),
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(m, back);
    }
}
