//! Temporal differential fields: adjacent-frame differences and their
//! cumulative (frame-1-relative) forms.

use crate::error::{Error, Result};
use crate::phantom::Video4D;
use crate::tensor::Tensor;

/// Per-frame differences `F_i = I_i − I_{i−1}`, with `F_1 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    fields: Vec<Tensor>,
}

/// Prefix sums of a [`FieldStack`]: `C_i = Σ_{j≤i} F_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeFieldStack {
    cum_fields: Vec<Tensor>,
}

impl FieldStack {
    /// Wraps raw field volumes. The first field is forced to zero.
    pub fn new(mut fields: Vec<Tensor>) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Empty("field stack".into()))?;
        let shape = first.shape().to_vec();
        for f in &fields {
            if f.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("field shape {:?} differs from {shape:?}", f.shape())));
            }
        }
        fields[0] = Tensor::zeros(&shape);
        Ok(Self { fields })
    }

    pub fn zeros(n: usize, dims: [usize; 3]) -> Self {
        Self { fields: vec![Tensor::zeros(&dims); n] }
    }

    pub fn fields(&self) -> &[Tensor] {
        &self.fields
    }

    pub fn frame_number(&self) -> usize {
        self.fields.len()
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.fields[0].shape();
        [s[0], s[1], s[2]]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { fields: self.fields.iter().map(|f| f.scale(s)).collect() }
    }

    /// `[N, L, H, W]` view of all fields.
    pub fn to_stacked(&self) -> Tensor {
        stack(&self.fields)
    }

    pub fn from_stacked(t: &Tensor) -> Result<Self> {
        Self::new(unstack(t)?)
    }

    /// Mean-pools every field by `factor`.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        Ok(Self { fields: self.fields.iter().map(|f| f.avg_pool3(factor)).collect::<Result<_>>()? })
    }
}

impl CumulativeFieldStack {
    pub fn cum_fields(&self) -> &[Tensor] {
        &self.cum_fields
    }

    pub fn frame_number(&self) -> usize {
        self.cum_fields.len()
    }

    pub fn to_stacked(&self) -> Tensor {
        stack(&self.cum_fields)
    }
}

fn stack(frames: &[Tensor]) -> Tensor {
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(frames[0].shape());
    let data = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("consistent frames")
}

fn unstack(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.rank() != 4 {
        return Err(Error::Shape(format!("stacked fields must be rank 4, got {:?}", t.shape())));
    }
    let n = t.shape()[0];
    (0..n)
        .map(|i| Ok(t.slice_axis(0, i, 1)?.reshape(&t.shape()[1..])?))
        .collect()
}

pub fn compute_fields(video: &Video4D) -> Result<FieldStack> {
    let frames = video.frames();
    let mut fields = vec![Tensor::zeros(frames[0].shape())];
    for pair in frames.windows(2) {
        fields.push(pair[1].sub(&pair[0])?);
    }
    Ok(FieldStack { fields })
}

pub fn cumulate(stack: &FieldStack) -> CumulativeFieldStack {
    let mut acc = Tensor::zeros(stack.fields[0].shape());
    let cum_fields = stack
        .fields
        .iter()
        .map(|f| {
            acc.add_assign(f);
            acc.clone()
        })
        .collect();
    CumulativeFieldStack { cum_fields }
}

/// Rebuilds `I_i = I_1 + C_i`, optionally clamped to `[0, 1]`.
pub fn reconstruct_video(first_frame: &Tensor, stack: &FieldStack, clamp: bool) -> Result<Video4D> {
    first_frame.check_same_shape(&stack.fields[0])?;
    let frames = cumulate(stack)
        .cum_fields
        .iter()
        .map(|c| {
            let f = first_frame.add(c)?;
            Ok(if clamp { f.clamp(0.0, 1.0) } else { f })
        })
        .collect::<Result<_>>()?;
    Video4D::new(frames)
}
