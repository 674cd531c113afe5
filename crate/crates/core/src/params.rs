//! Flat views over named parameter tensors.
//!
//! Optimizers, gradient clipping, checkpoints and finite-difference checks
//! all walk parameters through [`Parameters`], in a fixed order.

/// A borrowed, named, row-major tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

pub trait Parameters {
    /// Every tensor in manifest order.
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    /// Mutable slices in the same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// `self += factor * other`.
    fn add_scaled(&mut self, other: &Self, factor: f64)
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other.tensors().iter().map(|t| t.data.to_vec()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .iter()
            .find(|t| t.data.iter().any(|x| !x.is_finite()))
            .map(|t| t.name.clone())
    }

    /// Rounds every value to the nearest `f32`.
    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

pub(crate) fn tensor_ref<D: ndarray::Dimension>(
    name: impl Into<String>,
    a: &ndarray::Array<f64, D>,
) -> TensorRef<'_> {
    TensorRef {
        name: name.into(),
        shape: a.shape(),
        data: slice_of(a),
    }
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

pub(crate) fn slice_mut_of<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}
