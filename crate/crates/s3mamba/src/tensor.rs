//! Dense row-major f64 tensors. Values only; gradients live on the tape
//! in [`crate::graph`].

/// A dense n-dimensional array, row-major with the innermost extent last.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Checks every stored value is finite. Used at graph boundaries when
    /// debug assertions are enabled.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output shape of a broadcast binary op under the trailing-dimension rule:
/// shapes align from the right, each pair of extents must be equal or 1.
/// A pure function of the input shapes; panics on incompatible extents.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

/// Left-pads `shape` with 1s to `nd` dimensions.
pub fn pad_shape(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut out = vec![1usize; nd];
    out[nd - shape.len()..].copy_from_slice(shape);
    out
}

/// Row-major strides for a shape, in elements.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_is_pure_function_of_inputs() {
        assert_eq!(broadcast_shape(&[3, 4], &[3, 4]), vec![3, 4]);
        assert_eq!(broadcast_shape(&[3, 1], &[4]), vec![3, 4]);
        assert_eq!(broadcast_shape(&[2, 3, 4], &[1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[5, 1, 4], &[1, 3, 1]), vec![5, 3, 4]);
    }

    #[test]
    #[should_panic(expected = "incompatible broadcast")]
    fn broadcast_rejects_mismatched_extents() {
        broadcast_shape(&[3, 4], &[5]);
    }

    #[test]
    #[should_panic(expected = "does not match data length")]
    fn tensor_shape_must_cover_data() {
        Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[7]), vec![1]);
    }
}
