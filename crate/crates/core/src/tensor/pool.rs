use super::Tensor;
use crate::error::{Error, Result};

/// Winning position of every pooling window, kept for routing errors back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgmaxIndices {
    input_shape: Vec<usize>,
    pool: usize,
    /// Row-major offset of the maximum inside its window, `0..pool*pool`.
    window: Vec<u8>,
}

impl ArgmaxIndices {
    pub fn window_positions(&self) -> &[u8] {
        &self.window
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Flat index into the pooled input for output cell `i`.
    pub fn source_index(&self, i: usize) -> usize {
        let (h, w) = (self.input_shape[1], self.input_shape[2]);
        let (oh, ow) = (h / self.pool, w / self.pool);
        let c = i / (oh * ow);
        let oy = (i / ow) % oh;
        let ox = i % ow;
        let pos = self.window[i] as usize;
        let y = oy * self.pool + pos / self.pool;
        let x = ox * self.pool + pos % self.pool;
        (c * h + y) * w + x
    }
}

/// Non-overlapping max pooling of a `[C, H, W]` tensor. `H` and `W` must be
/// multiples of `pool`; ties go to the first element in row-major order.
pub fn maxpool2d(input: &Tensor, pool: usize) -> Result<(Tensor, ArgmaxIndices)> {
    let [c, h, w] = input.shape()[..] else {
        return Err(Error::Rank {
            op: "maxpool2d",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    };
    if pool == 0 || pool * pool > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("unsupported pool size {pool}")));
    }
    if h % pool != 0 || w % pool != 0 {
        return Err(Error::dim("maxpool2d", input.shape(), &[pool, pool]));
    }
    let (oh, ow) = (h / pool, w / pool);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut window = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_pos = 0u8;
                for dy in 0..pool {
                    for dx in 0..pool {
                        let v = src[(ci * h + oy * pool + dy) * w + ox * pool + dx];
                        if v > best {
                            best = v;
                            best_pos = (dy * pool + dx) as u8;
                        }
                    }
                }
                out.push(best);
                window.push(best_pos);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, oh, ow], out),
        ArgmaxIndices {
            input_shape: vec![c, h, w],
            pool,
            window,
        },
    ))
}

/// Routes each output gradient to the input cell that won its window.
pub fn maxpool2d_backward(grad_out: &Tensor, indices: &ArgmaxIndices) -> Result<Tensor> {
    if grad_out.len() != indices.window.len() {
        return Err(Error::dim(
            "maxpool2d_backward",
            grad_out.shape(),
            &[indices.window.len()],
        ));
    }
    let mut out = Tensor::zeros(&indices.input_shape);
    let dst = out.data_mut();
    for (i, &g) in grad_out.data().iter().enumerate() {
        dst[indices.source_index(i)] += g;
    }
    Ok(out)
}
