//! Small differentiable classifiers: forward passes, cross-entropy, per-example gradients,
//! penultimate features, Adam training with early stopping, and checkpoints.

mod checkpoint;
mod network;
mod optim;
mod spec;
mod train;

use rand::Rng as _;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use optim::AdamState;
pub use spec::{Activation, InputShape, Layout, ModelKind, ModelSpec, ParameterVector, TensorSlot};
pub use train::{
    evaluate, fit, train, BatchPlan, EpochRecord, EpochVerdict, Evaluation, FitOutcome, Metric,
    Penalty, TrainConfig, TrainOutcome,
};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: ParameterVector,
    pub optimizer: AdamState,
    pub seed: u64,
}

impl ModelState {
    /// He-style uniform fan-in initialisation, zero biases.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut values = vec![0.0; layout.total_len()];
        let mut rng = seed::rng(seed);
        for slot in layout.slots.iter().filter(|s| s.name.ends_with(".weight")) {
            let fan_in: usize = slot.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in &mut values[slot.range()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self::from_values(spec, values, seed)
    }

    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.layout().total_len();
        Self::from_values(spec, vec![0.0; n], 0)
    }

    pub fn from_values(spec: ModelSpec, values: Vec<f64>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ParameterVector::new(values, spec.layout())?;
        let optimizer = AdamState::new(params.len());
        Ok(ModelState {
            spec,
            params,
            optimizer,
            seed,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Clone of the parameters with a fresh optimizer state.
    pub fn reset_optimizer(&self) -> Self {
        let mut out = self.clone();
        out.optimizer = AdamState::new(self.params.len());
        out
    }

    pub fn forward<I: AsRef<[f64]>>(&self, batch: &[I]) -> Result<Vec<Vec<f64>>> {
        batch
            .iter()
            .map(|x| {
                network::forward(
                    &self.spec,
                    &self.params.layout,
                    &self.params.values,
                    x.as_ref(),
                )
                .map(|t| t.logits)
            })
            .collect()
    }

    pub fn predict(&self, input: &[f64]) -> Result<usize> {
        let trace = network::forward(&self.spec, &self.params.layout, &self.params.values, input)?;
        Ok(argmax(&trace.logits))
    }

    pub fn penultimate_features(&self, input: &[f64]) -> Result<Vec<f64>> {
        network::forward(&self.spec, &self.params.layout, &self.params.values, input)
            .map(|t| t.features)
    }

    /// Gradient of the single-example cross-entropy with respect to every parameter.
    pub fn gradient(&self, input: &[f64], label: usize) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.num_params()];
        self.accumulate_gradient(input, label, &mut grad)?;
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("grad:{}", self.params.layout.owner(i).unwrap_or("?")),
            });
        }
        Ok(grad)
    }

    pub fn per_example_gradient(&self, example: &Example) -> Result<Vec<f64>> {
        self.gradient(&example.input, example.label)
    }

    /// Adds this example's loss gradient to `grad`; returns the example's loss.
    pub(crate) fn accumulate_gradient(
        &self,
        input: &[f64],
        label: usize,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_label(label, self.spec.num_classes)?;
        let trace = network::forward(&self.spec, &self.params.layout, &self.params.values, input)?;
        Ok(network::backward(
            &self.spec,
            &self.params.layout,
            &self.params.values,
            input,
            &trace,
            label,
            grad,
        ))
    }
}

fn check_label(label: usize, num_classes: usize) -> Result<()> {
    if label >= num_classes {
        Err(Error::LabelOutOfRange { label, num_classes })
    } else {
        Ok(())
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    network::log_softmax(logits)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Mean cross-entropy of a batch of logits.
pub fn loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", logits.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if logits.is_empty() {
        return Err(Error::EmptySplit("loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        check_label(label, row.len())?;
        total += network::cross_entropy(row, label);
    }
    Ok(total / logits.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        let model = ModelState::zeros(ModelSpec::mlp(5, &[4, 3], 3)).unwrap();
        let logits = model.forward(&[rand_input(5, 1)]).unwrap();
        assert_eq!(logits[0], vec![0.0; 3]);
        for p in softmax(&logits[0]) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_batch_shape_and_duplicates() {
        let model = ModelState::init(ModelSpec::conv(1, 8, 8, &[4, 6], 2), 3).unwrap();
        let x = rand_input(64, 9);
        let y = rand_input(64, 10);
        let logits = model.forward(&[x.clone(), y, x]).unwrap();
        assert_eq!(logits.len(), 3);
        assert!(logits.iter().all(|r| r.len() == 2));
        assert_eq!(logits[0], logits[2]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let model = ModelState::init(ModelSpec::mlp(5, &[4], 2), 0).unwrap();
        let err = model.forward(&[vec![0.0; 4]]).unwrap_err().to_string();
        assert!(err.contains("(5)") && err.contains("4 values"), "{err}");
    }

    #[test]
    fn loss_hand_values() {
        let uniform = loss(&[vec![0.3, 0.3]], &[1]).unwrap();
        assert!((uniform - std::f64::consts::LN_2).abs() < 1e-12);
        // -ln(e^2 / (e^2 + 1))
        let l = loss(&[vec![2.0, 0.0]], &[0]).unwrap();
        assert!((l - 0.126_928_011_042_972_6).abs() < 1e-12);
        assert!(loss(&[vec![50.0, -50.0]], &[0]).unwrap() > 0.0);
        assert!(matches!(
            loss(&[vec![0.0, 0.0]], &[2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_classes: 2
            })
        ));
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        let spec = ModelSpec::mlp(2, &[2], 2);
        let mut values = vec![0.0; spec.layout().total_len()];
        // hidden unit 0 copies x0; head pushes class 0 hard.
        values[0] = 1.0;
        let head = spec.layout().slot("head.weight").unwrap().offset;
        values[head] = 100.0;
        values[head + 2] = -100.0;
        let model = ModelState::from_values(spec, values, 0).unwrap();
        let g = model.gradient(&[1.0, 0.0], 0).unwrap();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn constant_activation_map_averages_to_constant() {
        // One conv layer with zero kernels and bias c gives a constant map c.
        let spec = ModelSpec::conv(1, 4, 4, &[3], 2);
        let layout = spec.layout();
        let mut values = vec![0.0; layout.total_len()];
        let bias = layout.slot("conv0.bias").unwrap().range();
        values[bias].copy_from_slice(&[0.5, 1.25, 0.0]);
        let model = ModelState::from_values(spec, values, 0).unwrap();
        let f = model.penultimate_features(&rand_input(16, 4)).unwrap();
        assert_eq!(f, vec![0.5, 1.25, 0.0]);
    }
}
