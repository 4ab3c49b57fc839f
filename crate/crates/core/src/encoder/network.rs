//! Batched forward and backward passes.
//!
//! Convolutions are lowered to matrix products with im2col, one sample at a
//! time; fully connected layers run as a single product over the batch.

use matrixmultiply::dgemm;

use super::{EncoderParams, Gradients, Layer, ParamSlot, Shape};
use crate::error::{Error, Result};
use crate::video_io::GrayImage;

/// Single-channel network input, `n` images of `side x side`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    n: usize,
    side: usize,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * side * side {
            return Err(Error::Shape(format!(
                "{} values for {n} images of side {side}",
                data.len()
            )));
        }
        Ok(Self { n, side, data })
    }

    /// Stacks square images; with `mean_subtract` each image is shifted to
    /// zero mean.
    pub fn from_images(images: &[&GrayImage], mean_subtract: bool) -> Result<Self> {
        let side = images.first().map_or(0, |im| im.height());
        let mut data = Vec::with_capacity(images.len() * side * side);
        for (i, im) in images.iter().enumerate() {
            if im.height() != side || im.width() != side {
                return Err(Error::Shape(format!(
                    "image {i} is {}x{}, expected {side}x{side}",
                    im.height(),
                    im.width()
                )));
            }
            let mean = if mean_subtract {
                im.data().iter().map(|&v| v as f64).sum::<f64>() / im.data().len() as f64
            } else {
                0.0
            };
            data.extend(im.data().iter().map(|&v| v as f64 - mean));
        }
        Ok(Self {
            n: images.len(),
            side,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn slice(&self, start: usize, end: usize) -> ImageBatch {
        let len = self.side * self.side;
        ImageBatch {
            n: end - start,
            side: self.side,
            data: self.data[start * len..end * len].to_vec(),
        }
    }
}

/// Row-major `n x dim` matrix of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub n: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            n,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    generation: u64,
    spec_hash: u64,
    n: usize,
    weights: Vec<f64>,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    /// Argmax input offsets for max-pool layers (empty for other layers).
    pool_argmax: Vec<Vec<u32>>,
}

impl Tape {
    pub fn batch_len(&self) -> usize {
        self.n
    }
}

fn check_input(params: &EncoderParams, batch: &ImageBatch) -> Result<()> {
    if batch.side != params.spec().input_side {
        return Err(Error::Shape(format!(
            "network expects {0}x{0} patches, got {1}x{1}",
            params.spec().input_side,
            batch.side
        )));
    }
    Ok(())
}

/// `c[m x n] += a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserted extents keep every strided access in bounds and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

struct ConvGeom {
    input: Shape,
    output: Shape,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.output.h * self.output.w
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (k, p) = (self.kernel, self.positions());
        let (ih, iw) = (self.input.h as isize, self.input.w as isize);
        for c in 0..self.input.c {
            let plane = &x[c * self.input.h * self.input.w..];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..self.output.h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut row[oy * self.output.w..][..self.output.w];
                        if iy < 0 || iy >= ih {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.input.w..];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= iw {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let (k, p) = (self.kernel, self.positions());
        let (ih, iw) = (self.input.h as isize, self.input.w as isize);
        for c in 0..self.input.c {
            let plane = &mut dx[c * self.input.h * self.input.w..];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &col[((c * k + ki) * k + kj) * p..][..p];
                    for oy in 0..self.output.h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.input.w..];
                        for ox in 0..self.output.w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < iw {
                                dst[ix as usize] += row[oy * self.output.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let (kdim, p) = (g.col_rows(), g.positions());
    let (in_len, out_len) = (g.input.len(), g.output.len());
    let mut col = vec![0.0; kdim * p];
    let mut y = vec![0.0; n * out_len];
    for s in 0..n {
        g.im2col(&x[s * in_len..(s + 1) * in_len], &mut col);
        let ys = &mut y[s * out_len..(s + 1) * out_len];
        for (oc, chunk) in ys.chunks_mut(p).enumerate() {
            chunk.fill(b[oc]);
        }
        gemm(g.output.c, kdim, p, w, kdim, 1, &col, p, 1, ys, p);
    }
    y
}

fn maxpool_forward(
    input: Shape,
    output: Shape,
    kernel: usize,
    stride: usize,
    x: &[f64],
    n: usize,
) -> (Vec<f64>, Vec<u32>) {
    let mut y = vec![0.0; n * output.len()];
    let mut arg = vec![0u32; n * output.len()];
    let mut o = 0;
    for s in 0..n {
        for c in 0..input.c {
            let base = s * input.len() + c * input.h * input.w;
            for oy in 0..output.h {
                for ox in 0..output.w {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ki in 0..kernel {
                        for kj in 0..kernel {
                            let i = base + (oy * stride + ki) * input.w + ox * stride + kj;
                            if x[i] > best {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    y[o] = best;
                    arg[o] = best_i as u32;
                    o += 1;
                }
            }
        }
    }
    (y, arg)
}

fn fc_forward(
    in_dim: usize,
    out_dim: usize,
    w: &[f64],
    b: &[f64],
    x: &[f64],
    n: usize,
) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * out_dim);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    // y[n x out] += x[n x in] * W^T[in x out]
    gemm(
        n, in_dim, out_dim, x, in_dim, 1, w, 1, in_dim, &mut y, out_dim,
    );
    y
}

fn slot_of(params: &EncoderParams, i: usize) -> &ParamSlot {
    params.slots()[i]
        .as_ref()
        .expect("parameterized layer has a slot")
}

fn run(
    params: &EncoderParams,
    weights: &[f64],
    batch: &ImageBatch,
    mut keep: impl FnMut(usize, &[f64], Option<Vec<u32>>),
) -> Result<Vec<f64>> {
    check_input(params, batch)?;
    let shapes = params.spec().shapes()?;
    let n = batch.n;
    let mut x = batch.data.clone();
    for (i, layer) in params.spec().layers.iter().enumerate() {
        let (input, output) = (shapes[i], shapes[i + 1]);
        let mut argmax = None;
        let y = match *layer {
            Layer::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let slot = slot_of(params, i);
                let g = ConvGeom {
                    input,
                    output,
                    kernel,
                    stride,
                    pad,
                };
                conv_forward(
                    &g,
                    &weights[slot.weight.clone()],
                    &weights[slot.bias.clone()],
                    &x,
                    n,
                )
            }
            Layer::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::MaxPool { kernel, stride } => {
                let (y, arg) = maxpool_forward(input, output, kernel, stride, &x, n);
                argmax = Some(arg);
                y
            }
            Layer::FullyConnected { out_dim } => {
                let slot = slot_of(params, i);
                fc_forward(
                    input.len(),
                    out_dim,
                    &weights[slot.weight.clone()],
                    &weights[slot.bias.clone()],
                    &x,
                    n,
                )
            }
        };
        keep(i, &x, argmax);
        x = y;
    }
    Ok(x)
}

/// Embeds every image of the batch and records what backward needs.
pub fn forward(params: &EncoderParams, batch: &ImageBatch) -> Result<(Embeddings, Tape)> {
    let weights: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    let layers = params.spec().layers.len();
    let mut acts = Vec::with_capacity(layers + 1);
    let mut pool_argmax = vec![Vec::new(); layers];
    let out = run(params, &weights, batch, |i, x, arg| {
        acts.push(x.to_vec());
        if let Some(a) = arg {
            pool_argmax[i] = a;
        }
    })?;
    acts.push(out.clone());
    let emb = Embeddings {
        n: batch.n,
        dim: params.embed_dim(),
        data: out,
    };
    let tape = Tape {
        generation: params.generation(),
        spec_hash: params.spec().hash(),
        n: batch.n,
        weights,
        acts,
        pool_argmax,
    };
    Ok((emb, tape))
}

/// Forward pass without a tape, in chunks to bound memory.
pub fn embed(params: &EncoderParams, batch: &ImageBatch) -> Result<Embeddings> {
    check_input(params, batch)?;
    const CHUNK: usize = 64;
    let weights: Vec<f64> = params.values().iter().map(|&v| v as f64).collect();
    let mut data = Vec::with_capacity(batch.n * params.embed_dim());
    let mut start = 0;
    while start < batch.n {
        let end = (start + CHUNK).min(batch.n);
        data.extend(run(
            params,
            &weights,
            &batch.slice(start, end),
            |_, _, _| {},
        )?);
        start = end;
    }
    Ok(Embeddings {
        n: batch.n,
        dim: params.embed_dim(),
        data,
    })
}

/// Parameter gradients of `sum(grad_embeddings * embeddings)`.
pub fn backward(
    params: &EncoderParams,
    tape: &Tape,
    grad_embeddings: &Embeddings,
) -> Result<Gradients> {
    if tape.generation != params.generation() || tape.spec_hash != params.spec().hash() {
        return Err(Error::StaleTape(format!(
            "tape generation {}, parameters generation {}",
            tape.generation,
            params.generation()
        )));
    }
    if grad_embeddings.n != tape.n || grad_embeddings.dim != params.embed_dim() {
        return Err(Error::Shape(format!(
            "gradient is {}x{}, embeddings are {}x{}",
            grad_embeddings.n,
            grad_embeddings.dim,
            tape.n,
            params.embed_dim()
        )));
    }
    let shapes = params.spec().shapes()?;
    let n = tape.n;
    let w = &tape.weights;
    let mut grads = Gradients::zeros(params.len());
    let mut dy = grad_embeddings.data.clone();

    for (i, layer) in params.spec().layers.iter().enumerate().rev() {
        let (input, output) = (shapes[i], shapes[i + 1]);
        let x = &tape.acts[i];
        let need_dx = i > 0;
        let dx = match *layer {
            Layer::Conv {
                kernel,
                stride,
                pad,
                ..
            } => {
                let slot = slot_of(params, i);
                let g = ConvGeom {
                    input,
                    output,
                    kernel,
                    stride,
                    pad,
                };
                let (kdim, p, oc) = (g.col_rows(), g.positions(), output.c);
                let mut col = vec![0.0; kdim * p];
                let mut dcol = vec![0.0; kdim * p];
                let mut dx = if need_dx {
                    vec![0.0; n * input.len()]
                } else {
                    Vec::new()
                };
                let (wr, br) = (slot.weight.clone(), slot.bias.clone());
                for s in 0..n {
                    let dys = &dy[s * output.len()..(s + 1) * output.len()];
                    for (o, chunk) in dys.chunks(p).enumerate() {
                        grads.values[br.start + o] += chunk.iter().sum::<f64>();
                    }
                    g.im2col(&x[s * input.len()..(s + 1) * input.len()], &mut col);
                    // dW[oc x kdim] += dY[oc x p] * col^T[p x kdim]
                    gemm(
                        oc,
                        p,
                        kdim,
                        dys,
                        p,
                        1,
                        &col,
                        1,
                        p,
                        &mut grads.values[wr.clone()],
                        kdim,
                    );
                    if need_dx {
                        dcol.fill(0.0);
                        // dcol[kdim x p] = W^T[kdim x oc] * dY[oc x p]
                        gemm(
                            kdim,
                            oc,
                            p,
                            &w[wr.clone()],
                            1,
                            kdim,
                            dys,
                            p,
                            1,
                            &mut dcol,
                            p,
                        );
                        g.col2im(&dcol, &mut dx[s * input.len()..(s + 1) * input.len()]);
                    }
                }
                dx
            }
            Layer::Relu => {
                if need_dx {
                    x.iter()
                        .zip(&dy)
                        .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                        .collect()
                } else {
                    Vec::new()
                }
            }
            Layer::MaxPool { .. } => {
                if need_dx {
                    let mut dx = vec![0.0; n * input.len()];
                    for (&src, &g) in tape.pool_argmax[i].iter().zip(&dy) {
                        dx[src as usize] += g;
                    }
                    dx
                } else {
                    Vec::new()
                }
            }
            Layer::FullyConnected { out_dim } => {
                let slot = slot_of(params, i);
                let in_dim = input.len();
                for s in 0..n {
                    for (o, &g) in dy[s * out_dim..(s + 1) * out_dim].iter().enumerate() {
                        grads.values[slot.bias.start + o] += g;
                    }
                }
                // dW[out x in] += dY^T[out x n] * X[n x in]
                gemm(
                    out_dim,
                    n,
                    in_dim,
                    &dy,
                    1,
                    out_dim,
                    x,
                    in_dim,
                    1,
                    &mut grads.values[slot.weight.clone()],
                    in_dim,
                );
                if need_dx {
                    let mut dx = vec![0.0; n * in_dim];
                    // dX[n x in] = dY[n x out] * W[out x in]
                    gemm(
                        n,
                        out_dim,
                        in_dim,
                        &dy,
                        out_dim,
                        1,
                        &w[slot.weight.clone()],
                        in_dim,
                        1,
                        &mut dx,
                        in_dim,
                    );
                    dx
                } else {
                    Vec::new()
                }
            }
        };
        dy = dx;
    }
    Ok(grads)
}
