use std::fmt;

/// Shape of one activation tensor. Batch size is always one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorShape {
    Flat(usize),
    Spatial {
        height: usize,
        width: usize,
        channels: usize,
    },
}

impl TensorShape {
    pub fn spatial(height: usize, width: usize, channels: usize) -> Self {
        TensorShape::Spatial {
            height,
            width,
            channels,
        }
    }

    pub fn from_dims(dims: &[usize]) -> Option<Self> {
        if dims.contains(&0) {
            return None;
        }
        match *dims {
            [n] => Some(TensorShape::Flat(n)),
            [h, w, c] => Some(TensorShape::spatial(h, w, c)),
            _ => None,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            TensorShape::Flat(n) => vec![n],
            TensorShape::Spatial {
                height,
                width,
                channels,
            } => vec![height, width, channels],
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            TensorShape::Flat(_) => 1,
            TensorShape::Spatial { .. } => 3,
        }
    }

    pub fn element_count(&self) -> usize {
        match *self {
            TensorShape::Flat(n) => n,
            TensorShape::Spatial {
                height,
                width,
                channels,
            } => height * width * channels,
        }
    }

    /// Size of the last axis.
    pub fn channels(&self) -> usize {
        match *self {
            TensorShape::Flat(n) => n,
            TensorShape::Spatial { channels, .. } => channels,
        }
    }

    /// `(height, width, channels)`, treating a flat tensor as `1×1×n`.
    pub fn hwc(&self) -> (usize, usize, usize) {
        match *self {
            TensorShape::Flat(n) => (1, 1, n),
            TensorShape::Spatial {
                height,
                width,
                channels,
            } => (height, width, channels),
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TensorShape::Flat(n) => write!(f, "({n})"),
            TensorShape::Spatial {
                height,
                width,
                channels,
            } => write!(f, "({height}x{width}x{channels})"),
        }
    }
}

/// Dense row-major tensor: height, then width, then channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.element_count(),
            data.len(),
            "tensor data does not match {shape}"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.element_count()],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        let (_, w, ch) = self.shape.hwc();
        self.data[(y * w + x) * ch + c]
    }
}

/// Inference-form batch normalization: `scale[c] * x + offset[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }
}

/// One spatial axis of a sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowAxis {
    pub input: usize,
    pub kernel: usize,
    pub stride: usize,
    pub output: usize,
    /// Implicit zero rows (or columns) before the first input element.
    pub pad_before: usize,
}

impl WindowAxis {
    /// `same` gives `ceil(input / stride)` outputs with the extra padding
    /// element on the bottom/right; `valid` gives
    /// `floor((input - kernel) / stride) + 1`. `None` if `valid` and the
    /// kernel does not fit.
    pub fn new(
        input: usize,
        kernel: usize,
        stride: usize,
        padding: crate::model::Padding,
    ) -> Option<Self> {
        use crate::model::Padding;
        let (output, pad_before) = match padding {
            Padding::Same => {
                let output = input.div_ceil(stride);
                let total = ((output - 1) * stride + kernel).saturating_sub(input);
                (output, total / 2)
            }
            Padding::Valid => {
                if kernel > input {
                    return None;
                }
                ((input - kernel) / stride + 1, 0)
            }
        };
        Some(WindowAxis {
            input,
            kernel,
            stride,
            output,
            pad_before,
        })
    }

    /// Kernel taps of output position `o` that land inside the input.
    pub fn valid_taps(&self, o: usize) -> std::ops::Range<usize> {
        let start = (o * self.stride) as isize - self.pad_before as isize;
        let lo = (-start).max(0) as usize;
        let hi = (self.input as isize - start).clamp(0, self.kernel as isize) as usize;
        lo.min(hi)..hi
    }

    /// Input coordinate of tap 0 for output `o` (may be negative).
    pub fn origin(&self, o: usize) -> isize {
        (o * self.stride) as isize - self.pad_before as isize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Padding;

    #[test]
    fn window_shapes() {
        let a = WindowAxis::new(32, 3, 1, Padding::Valid).unwrap();
        assert_eq!(a.output, 30);
        let a = WindowAxis::new(5, 3, 2, Padding::Same).unwrap();
        assert_eq!((a.output, a.pad_before), (3, 1));
        let a = WindowAxis::new(6, 3, 2, Padding::Same).unwrap();
        // total pad 1: goes to the bottom
        assert_eq!((a.output, a.pad_before), (3, 0));
        assert!(WindowAxis::new(2, 3, 1, Padding::Valid).is_none());
    }

    #[test]
    fn taps_clip_at_borders() {
        let a = WindowAxis::new(4, 3, 1, Padding::Same).unwrap();
        assert_eq!(a.valid_taps(0), 1..3);
        assert_eq!(a.valid_taps(1), 0..3);
        assert_eq!(a.valid_taps(3), 0..2);
    }
}
