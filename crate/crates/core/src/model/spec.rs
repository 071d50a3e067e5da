use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(d) => d,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            InputShape::Flat(d) => write!(f, "({d})"),
            InputShape::Image {
                channels,
                height,
                width,
            } => write!(f, "({channels}x{height}x{width})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Architecture descriptor.
///
/// `widths` are the hidden layer widths of an MLP, or the channel progression of the 3x3
/// convolution stack. Both kinds end in a linear classifier head; for `Conv` the head is a
/// 1x1 convolution followed by spatial averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub widths: Vec<usize>,
    pub input: InputShape,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, widths: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            widths: widths.to_vec(),
            input: InputShape::Flat(input_dim),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn conv(
        channels: usize,
        height: usize,
        width: usize,
        widths: &[usize],
        num_classes: usize,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Conv,
            widths: widths.to_vec(),
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::InvalidConfig(
                "model needs at least one hidden layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.input.is_empty() {
            return Err(Error::InvalidConfig("input shape must be non-empty".into()));
        }
        if self.kind == ModelKind::Conv && !matches!(self.input, InputShape::Image { .. }) {
            return Err(Error::InvalidConfig(
                "conv models need an image input shape".into(),
            ));
        }
        Ok(())
    }

    /// Length of the penultimate feature vector.
    pub fn feature_len(&self) -> usize {
        *self.widths.last().expect("validated spec")
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::default();
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input.len();
                for (i, &w) in self.widths.iter().enumerate() {
                    layout.push(format!("dense{i}.weight"), vec![w, fan_in]);
                    layout.push(format!("dense{i}.bias"), vec![w]);
                    fan_in = w;
                }
                layout.push("head.weight".into(), vec![self.num_classes, fan_in]);
                layout.push("head.bias".into(), vec![self.num_classes]);
            }
            ModelKind::Conv => {
                let InputShape::Image { channels, .. } = self.input else {
                    unreachable!("validated spec")
                };
                let mut c_in = channels;
                for (i, &c) in self.widths.iter().enumerate() {
                    layout.push(format!("conv{i}.weight"), vec![c, c_in, 3, 3]);
                    layout.push(format!("conv{i}.bias"), vec![c]);
                    c_in = c;
                }
                layout.push("head.weight".into(), vec![self.num_classes, c_in, 1, 1]);
                layout.push("head.bias".into(), vec![self.num_classes]);
            }
        }
        layout
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<TensorSlot>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>) {
        let offset = self.total_len();
        self.slots.push(TensorSlot {
            name,
            shape,
            offset,
        });
    }

    pub fn total_len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn slot(&self, name: &str) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Name of the tensor that owns flat index `idx`.
    pub fn owner(&self, idx: usize) -> Option<&str> {
        self.slots
            .iter()
            .find(|s| s.range().contains(&idx))
            .map(|s| s.name.as_str())
    }
}

/// Flat parameter vector with its tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", layout.total_len()),
                actual: format!("{} parameters", values.len()),
            });
        }
        let pv = ParameterVector { values, layout };
        pv.check_finite()?;
        Ok(pv)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.slot(name).map(|s| &self.values[s.range()])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite {
                tensor: self.layout.owner(i).unwrap_or("?").to_string(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_layout_is_contiguous() {
        let spec = ModelSpec::mlp(4, &[3, 5], 2);
        let layout = spec.layout();
        assert_eq!(layout.total_len(), 4 * 3 + 3 + 3 * 5 + 5 + 5 * 2 + 2);
        let mut next = 0;
        for slot in &layout.slots {
            assert_eq!(slot.offset, next);
            next += slot.len();
        }
        assert_eq!(layout.owner(12), Some("dense0.bias"));
    }

    #[test]
    fn conv_layout_ends_in_one_by_one_head() {
        let spec = ModelSpec::conv(1, 8, 8, &[8, 16, 32], 2);
        spec.validate().unwrap();
        let head = spec.layout().slot("head.weight").cloned().unwrap();
        assert_eq!(head.shape, vec![2, 32, 1, 1]);
        assert_eq!(spec.feature_len(), 32);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(ModelSpec::mlp(4, &[], 2).validate().is_err());
        assert!(ModelSpec::mlp(4, &[0], 2).validate().is_err());
        assert!(ModelSpec::mlp(4, &[3], 1).validate().is_err());
        let mut conv = ModelSpec::mlp(4, &[3], 2);
        conv.kind = ModelKind::Conv;
        assert!(conv.validate().is_err());
    }

    #[test]
    fn parameter_vector_rejects_non_finite() {
        let layout = ModelSpec::mlp(1, &[1], 2).layout();
        let mut values = vec![0.0; layout.total_len()];
        values[2] = f64::NAN;
        match ParameterVector::new(values, layout) {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "head.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
