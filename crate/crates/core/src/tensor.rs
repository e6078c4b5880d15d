//! Dense row-major tensors and the image-level label vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f64` tensor. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor after checking that `shape` accounts for every element.
    ///
    /// Extents must be positive. Finiteness is not enforced here; see
    /// [`validate_finite`].
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&s| s == 0) {
            return Err(Error::Dimension(format!(
                "axis {axis} of shape {shape:?} has zero extent"
            )));
        }
        let expected = element_count(&shape)?;
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_parts(self) -> (Vec<usize>, Vec<f64>) {
        (self.shape, self.data)
    }

    /// Row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::Dimension(format!(
                "index of rank {} into tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0usize;
        for (axis, (&i, &extent)) in index.iter().zip(&self.shape).enumerate() {
            if i >= extent {
                return Err(Error::Dimension(format!(
                    "index {i} out of range for axis {axis} (extent {extent})"
                )));
            }
            off = off * extent + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &s| {
        acc.checked_mul(s)
            .ok_or_else(|| Error::Dimension(format!("shape {shape:?} overflows usize")))
    })
}

/// True iff every entry of `t` is finite.
pub fn validate_finite(t: &Tensor) -> bool {
    t.data.iter().all(|v| v.is_finite())
}

/// Image-level multi-hot label vector over the foreground classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(y: Vec<u8>) -> Result<Self> {
        if let Some(bad) = y.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!("label entry {bad} is not 0 or 1")));
        }
        Ok(Self(y))
    }

    /// Builds a label vector of length `n` with the listed classes set.
    pub fn from_present(n: usize, present: &[usize]) -> Result<Self> {
        let mut y = vec![0u8; n];
        for &c in present {
            if c >= n {
                return Err(Error::Dimension(format!("class {c} out of range for {n} classes")));
            }
            y[c] = 1;
        }
        Ok(Self(y))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.0.get(class).copied() == Some(1)
    }

    /// Indices of the classes marked present, ascending.
    pub fn present(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }

    /// An image is trainable when at least one class is present.
    pub fn is_trainable(&self) -> bool {
        self.0.contains(&1)
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(y: LabelVector) -> Self {
        y.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn validate_finite_cases() {
        let zeros = Tensor::zeros(vec![3, 4]).unwrap();
        assert!(validate_finite(&zeros));
        let nan = Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap();
        assert!(!validate_finite(&nan));
        let inf = Tensor::new(vec![2], vec![f64::INFINITY, 1.0]).unwrap();
        assert!(!validate_finite(&inf));
    }

    #[test]
    fn row_major_offset_matches_scalar_loop() {
        let (a, b, c) = (3, 4, 5);
        let t = Tensor::new(vec![a, b, c], (0..a * b * c).map(|v| v as f64).collect()).unwrap();
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let expect = i * b * c + j * c + k;
                    assert_eq!(t.offset(&[i, j, k]).unwrap(), expect);
                    assert_eq!(t.get(&[i, j, k]).unwrap(), expect as f64);
                }
            }
        }
        assert!(t.offset(&[3, 0, 0]).is_err());
        assert!(t.offset(&[0, 0]).is_err());
    }

    #[test]
    fn label_vector_rules() {
        let y = LabelVector::new(vec![0, 1, 1]).unwrap();
        assert_eq!(y.present(), vec![1, 2]);
        assert!(y.is_trainable());
        assert!(!LabelVector::new(vec![0, 0]).unwrap().is_trainable());
        assert!(LabelVector::new(vec![2]).is_err());
        let parsed: std::result::Result<LabelVector, _> = serde_json::from_str("[0,3]");
        assert!(parsed.is_err());
    }
}
