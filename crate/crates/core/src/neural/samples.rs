use nalgebra::{DMatrix, DVector};

/// A `n × T` input window and the single-step target it should predict.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub input: DMatrix<f64>,
    pub target: DVector<f64>,
}

/// Indexed access to training samples without materialising every window.
///
/// Windows are column-major `n × T` slices, targets `n` slices.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn window(&self, index: usize) -> &[f64];

    fn target(&self, index: usize) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [WindowSample] {
    fn len(&self) -> usize {
        <[WindowSample]>::len(self)
    }

    fn window(&self, index: usize) -> &[f64] {
        self[index].input.as_slice()
    }

    fn target(&self, index: usize) -> &[f64] {
        self[index].target.as_slice()
    }
}

impl SampleSource for Vec<WindowSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn window(&self, index: usize) -> &[f64] {
        self[index].input.as_slice()
    }

    fn target(&self, index: usize) -> &[f64] {
        self[index].target.as_slice()
    }
}
