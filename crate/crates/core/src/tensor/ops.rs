//! Differentiable primitives. All reductions run left to right in row-major
//! order so results are bitwise reproducible.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Rows below this Euclidean norm are rejected by [`l2_normalize`].
pub const L2_EPSILON: f64 = 1e-12;

fn expect_rank(t: &Tensor, rank: usize, op: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(shape_err!("{op} expects rank {rank}, got shape {:?}", t.shape()));
    }
    Ok(())
}

fn expect_same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    #[inline]
    fn in_idx(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c_in + c) * self.h + y) * self.w + x
    }

    /// Patch matrices of every sample, `[batch, c_in·kh·kw, oh·ow]`, with
    /// zeros where a tap falls in the padding.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p_len = self.oh * self.ow;
        let mut cols = vec![0.0; self.batch * self.c_in * self.kh * self.kw * p_len];
        let mut r = 0;
        for b in 0..self.batch {
            for c in 0..self.c_in {
                for i in 0..self.kh {
                    for j in 0..self.kw {
                        let row = &mut cols[r * p_len..(r + 1) * p_len];
                        for y in 0..self.oh {
                            let Some(sy) = self.src(y, i, self.h) else { continue };
                            for xo in 0..self.ow {
                                if let Some(sx) = self.src(xo, j, self.w) {
                                    row[y * self.ow + xo] = x[self.in_idx(b, c, sy, sx)];
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
        cols
    }

    /// Scatters one sample's patch-matrix gradient back onto the input.
    fn col2im_add(&self, dcol: &[f64], b: usize, dx: &mut [f64]) {
        let p_len = self.oh * self.ow;
        let mut r = 0;
        for c in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &dcol[r * p_len..(r + 1) * p_len];
                    for y in 0..self.oh {
                        let Some(sy) = self.src(y, i, self.h) else { continue };
                        for xo in 0..self.ow {
                            if let Some(sx) = self.src(xo, j, self.w) {
                                dx[self.in_idx(b, c, sy, sx)] += row[y * self.ow + xo];
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Input coordinate for output position `o` and kernel tap `k`, or
    /// `None` when it falls in the zero padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Output spatial extent of a convolution, or `None` if the padded input is
/// smaller than the kernel.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// 2-D cross-correlation of `input` `[B, C_in, H, W]` with `weight`
/// `[C_out, C_in, kH, kW]`, plus an optional per-output-channel bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(weight, 4, "conv2d weight")?;
    let (&[batch, c_in, h, w], &[c_out, wc_in, kh, kw]) = (input.shape(), weight.shape()) else {
        unreachable!()
    };
    if c_in != wc_in {
        return Err(shape_err!(
            "conv2d: input has {c_in} channels but weight expects {wc_in}"
        ));
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be positive".into()));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(shape_err!("conv2d bias must be [{c_out}], got {:?}", b.shape()));
        }
    }
    let (Some(oh), Some(ow)) = (
        conv_out_extent(h, kh, stride, padding),
        conv_out_extent(w, kw, stride, padding),
    ) else {
        return Err(shape_err!(
            "conv2d: padded input {h}x{w} (pad {padding}) smaller than kernel {kh}x{kw}"
        ));
    };
    let g = ConvGeom { batch, c_in, h, w, c_out, kh, kw, stride, pad: padding, oh, ow };

    // Each sample is unfolded into a [c_in·kh·kw, oh·ow] patch matrix so the
    // inner loops run over contiguous output positions.
    let cols = g.im2col(input.data());
    let wt = weight.data();
    let (k_len, p_len) = (g.c_in * g.kh * g.kw, g.oh * g.ow);
    let mut out = vec![0.0; batch * c_out * p_len];
    for b in 0..batch {
        let col = &cols[b * k_len * p_len..(b + 1) * k_len * p_len];
        for o in 0..c_out {
            let row = &mut out[(b * c_out + o) * p_len..(b * c_out + o + 1) * p_len];
            row.fill(bias.map_or(0.0, |t| t.data()[o]));
            for (k, wv) in wt[o * k_len..(o + 1) * k_len].iter().enumerate() {
                for (acc, xv) in row.iter_mut().zip(&col[k * p_len..(k + 1) * p_len]) {
                    *acc += wv * xv;
                }
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let wk = weight.clone();
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        out,
        vec![batch, c_out, oh, ow],
        parents,
        Box::new(move |go, needs| {
            let wt = wk.data();
            let mut dx = needs[0].then(|| vec![0.0; g.batch * g.c_in * g.h * g.w]);
            let mut dw = needs[1].then(|| vec![0.0; wt.len()]);
            let mut db = (has_bias && needs[2]).then(|| vec![0.0; g.c_out]);
            let mut dcol = vec![0.0; k_len * p_len];
            for b in 0..g.batch {
                let col = &cols[b * k_len * p_len..(b + 1) * k_len * p_len];
                dcol.fill(0.0);
                for o in 0..g.c_out {
                    let gr = &go[(b * g.c_out + o) * p_len..(b * g.c_out + o + 1) * p_len];
                    if let Some(db) = db.as_mut() {
                        db[o] += gr.iter().sum::<f64>();
                    }
                    for k in 0..k_len {
                        if let Some(dw) = dw.as_mut() {
                            let xs = &col[k * p_len..(k + 1) * p_len];
                            dw[o * k_len + k] += gr.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if dx.is_some() {
                            let wv = wt[o * k_len + k];
                            for (d, gv) in dcol[k * p_len..(k + 1) * p_len].iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    g.col2im_add(&dcol, b, dx);
                }
            }
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Mean over the spatial extents: `[B, C, H, W]` to `[B, C, 1, 1]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 4, "global_avg_pool")?;
    let &[b, c, h, w] = input.shape() else { unreachable!() };
    let area = h * w;
    let inv = 1.0 / area as f64;
    let out: Vec<f64> = input
        .data()
        .chunks_exact(area)
        .map(|plane| plane.iter().fold(0.0, |acc, v| acc + v) * inv)
        .collect();
    Ok(Tensor::from_op(
        out,
        vec![b, c, 1, 1],
        vec![input.clone()],
        Box::new(move |go, _| {
            let dx = go.iter().flat_map(|&g| std::iter::repeat_n(g * inv, area)).collect();
            vec![Some(dx)]
        }),
    ))
}

/// Same values, new shape.
pub fn reshape(input: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.iter().product::<usize>() != input.numel() || shape.contains(&0) {
        return Err(shape_err!("cannot reshape {:?} into {shape:?}", input.shape()));
    }
    Ok(Tensor::from_op(
        input.to_vec(),
        shape.to_vec(),
        vec![input.clone()],
        Box::new(|go, _| vec![Some(go.to_vec())]),
    ))
}

/// `input · weight + bias` for `input` `[B, n]`, `weight` `[n, k]`.
pub fn affine(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    expect_rank(input, 2, "affine input")?;
    expect_rank(weight, 2, "affine weight")?;
    let (&[rows, n], &[wn, k]) = (input.shape(), weight.shape()) else { unreachable!() };
    if n != wn {
        return Err(shape_err!("affine: input width {n} but weight is {wn}x{k}"));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(shape_err!("affine bias must be [{k}], got {:?}", b.shape()));
        }
    }
    let x = input.data();
    let w = weight.data();
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let row = &mut out[r * k..(r + 1) * k];
        if let Some(b) = bias {
            row.copy_from_slice(b.data());
        }
        for i in 0..n {
            let xv = x[r * n + i];
            for (o, wv) in row.iter_mut().zip(&w[i * k..(i + 1) * k]) {
                *o += xv * wv;
            }
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (xin, wk) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![rows, k],
        parents,
        Box::new(move |go, needs| {
            let x = xin.data();
            let w = wk.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![0.0; rows * n];
                for r in 0..rows {
                    let g = &go[r * k..(r + 1) * k];
                    for i in 0..n {
                        dx[r * n + i] = g.iter().zip(&w[i * k..(i + 1) * k]).fold(0.0, |a, (g, w)| a + g * w);
                    }
                }
                dx
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![0.0; n * k];
                for r in 0..rows {
                    let g = &go[r * k..(r + 1) * k];
                    for i in 0..n {
                        let xv = x[r * n + i];
                        for (d, gv) in dw[i * k..(i + 1) * k].iter_mut().zip(g) {
                            *d += xv * gv;
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![0.0; k];
                    for g in go.chunks_exact(k) {
                        db.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                    db
                }));
            }
            grads
        }),
    ))
}

/// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
pub fn relu(input: &Tensor) -> Tensor {
    let out = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let xin = input.clone();
    Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(move |go, _| {
            let dx = go
                .iter()
                .zip(xin.data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(dx)]
        }),
    )
}

/// Row-wise `log softmax(input / temperature)` for a `[B, c]` input.
pub fn log_softmax(input: &Tensor, temperature: f64) -> Result<Tensor> {
    expect_rank(input, 2, "log_softmax")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Parameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let c = input.shape()[1];
    let mut out = Vec::with_capacity(input.numel());
    for row in input.data().chunks_exact(c) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / temperature;
        let lse = row.iter().fold(0.0, |acc, &v| acc + (v / temperature - max).exp()).ln();
        out.extend(row.iter().map(|&v| v / temperature - max - lse));
    }
    let probs: Vec<f64> = out.iter().map(|v| v.exp()).collect();
    Ok(Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(move |go, _| {
            let mut dx = Vec::with_capacity(go.len());
            for (g, p) in go.chunks_exact(c).zip(probs.chunks_exact(c)) {
                let total = g.iter().fold(0.0, |a, v| a + v);
                dx.extend(g.iter().zip(p).map(|(g, p)| (g - p * total) / temperature));
            }
            vec![Some(dx)]
        }),
    ))
}

/// Scales every row of a `[B, d]` input to unit Euclidean norm.
///
/// Rows with norm below [`L2_EPSILON`] are an error.
pub fn l2_normalize(input: &Tensor) -> Result<Tensor> {
    expect_rank(input, 2, "l2_normalize")?;
    let d = input.shape()[1];
    let mut norms = Vec::with_capacity(input.shape()[0]);
    let mut out = Vec::with_capacity(input.numel());
    for (r, row) in input.data().chunks_exact(d).enumerate() {
        let norm = row.iter().fold(0.0, |a, v| a + v * v).sqrt();
        if !(norm >= L2_EPSILON) {
            return Err(Error::Degenerate(format!(
                "row {r} has norm {norm:e}, below {L2_EPSILON:e}"
            )));
        }
        out.extend(row.iter().map(|v| v / norm));
        norms.push(norm);
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(move |go, _| {
            let mut dx = Vec::with_capacity(go.len());
            for ((g, y), n) in go.chunks_exact(d).zip(y.chunks_exact(d)).zip(&norms) {
                let dot = g.iter().zip(y).fold(0.0, |a, (g, y)| a + g * y);
                dx.extend(g.iter().zip(y).map(|(g, y)| (g - y * dot) / n));
            }
            vec![Some(dx)]
        }),
    ))
}

/// Sum of all entries, as a rank-0 tensor.
pub fn sum(input: &Tensor) -> Tensor {
    let total = input.data().iter().fold(0.0, |a, v| a + v);
    let n = input.numel();
    Tensor::from_op(
        vec![total],
        Vec::new(),
        vec![input.clone()],
        Box::new(move |go, _| vec![Some(vec![go[0]; n])]),
    )
}

/// Arithmetic mean of all entries, as a rank-0 tensor.
pub fn mean(input: &Tensor) -> Tensor {
    let n = input.numel();
    let inv = 1.0 / n as f64;
    let total = input.data().iter().fold(0.0, |a, v| a + v);
    Tensor::from_op(
        vec![total * inv],
        Vec::new(),
        vec![input.clone()],
        Box::new(move |go, _| vec![Some(vec![go[0] * inv; n])]),
    )
}

pub fn scale(input: &Tensor, factor: f64) -> Tensor {
    let out = input.data().iter().map(|v| v * factor).collect();
    Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(move |go, _| vec![Some(go.iter().map(|g| g * factor).collect())]),
    )
}

pub fn add_scalar(input: &Tensor, offset: f64) -> Tensor {
    let out = input.data().iter().map(|v| v + offset).collect();
    Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(|go, _| vec![Some(go.to_vec())]),
    )
}

pub fn neg(input: &Tensor) -> Tensor {
    scale(input, -1.0)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape(a, b, "add")?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|go, needs| {
            vec![needs[0].then(|| go.to_vec()), needs[1].then(|| go.to_vec())]
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape(a, b, "sub")?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|go, needs| {
            vec![
                needs[0].then(|| go.to_vec()),
                needs[1].then(|| go.iter().map(|g| -g).collect()),
            ]
        }),
    ))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_same_shape(a, b, "mul")?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |go, needs| {
            vec![
                needs[0].then(|| go.iter().zip(bc.data()).map(|(g, y)| g * y).collect()),
                needs[1].then(|| go.iter().zip(ac.data()).map(|(g, x)| g * x).collect()),
            ]
        }),
    ))
}

/// Numerically stable elementwise `ln(1 + e^x)`.
pub fn softplus(input: &Tensor) -> Tensor {
    let out = input.data().iter().map(|&x| softplus_scalar(x)).collect();
    let xin = input.clone();
    Tensor::from_op(
        out,
        input.shape().to_vec(),
        vec![input.clone()],
        Box::new(move |go, _| {
            let dx = go.iter().zip(xin.data()).map(|(g, &x)| g * sigmoid(x)).collect();
            vec![Some(dx)]
        }),
    )
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-row dot products of `anchor` `[B, d]` against `others` `[B, K, d]`,
/// giving `[B, K]`.
pub fn batched_dot(anchor: &Tensor, others: &Tensor) -> Result<Tensor> {
    expect_rank(anchor, 2, "batched_dot anchor")?;
    expect_rank(others, 3, "batched_dot others")?;
    let (&[b, d], &[ob, k, od]) = (anchor.shape(), others.shape()) else { unreachable!() };
    if b != ob || d != od {
        return Err(shape_err!(
            "batched_dot: anchor {:?} incompatible with others {:?}",
            anchor.shape(),
            others.shape()
        ));
    }
    let a = anchor.data();
    let o = others.data();
    let mut out = Vec::with_capacity(b * k);
    for r in 0..b {
        let ar = &a[r * d..(r + 1) * d];
        for j in 0..k {
            let or = &o[(r * k + j) * d..(r * k + j + 1) * d];
            out.push(ar.iter().zip(or).fold(0.0, |acc, (x, y)| acc + x * y));
        }
    }
    let (ac, oc) = (anchor.clone(), others.clone());
    Ok(Tensor::from_op(
        out,
        vec![b, k],
        vec![anchor.clone(), others.clone()],
        Box::new(move |go, needs| {
            let a = ac.data();
            let o = oc.data();
            let da = needs[0].then(|| {
                let mut da = vec![0.0; b * d];
                for r in 0..b {
                    let dr = &mut da[r * d..(r + 1) * d];
                    for j in 0..k {
                        let g = go[r * k + j];
                        let or = &o[(r * k + j) * d..(r * k + j + 1) * d];
                        dr.iter_mut().zip(or).for_each(|(x, y)| *x += g * y);
                    }
                }
                da
            });
            let dother = needs[1].then(|| {
                let mut dother = vec![0.0; b * k * d];
                for r in 0..b {
                    let ar = &a[r * d..(r + 1) * d];
                    for j in 0..k {
                        let g = go[r * k + j];
                        let dr = &mut dother[(r * k + j) * d..(r * k + j + 1) * d];
                        dr.iter_mut().zip(ar).for_each(|(x, y)| *x = g * y);
                    }
                }
                dother
            });
            vec![da, dother]
        }),
    ))
}

/// Concatenates rank-2 tensors with equal row counts along the columns.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(shape_err!("concat_cols needs at least one tensor"));
    };
    for p in parts {
        expect_rank(p, 2, "concat_cols")?;
        if p.shape()[0] != first.shape()[0] {
            return Err(shape_err!("concat_cols: row counts differ"));
        }
    }
    let rows = first.shape()[0];
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![rows, total],
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(move |go, needs| {
            let mut offset = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&w, &need)| {
                    let grad = need.then(|| {
                        (0..rows)
                            .flat_map(|r| go[r * total + offset..r * total + offset + w].iter().copied())
                            .collect()
                    });
                    offset += w;
                    grad
                })
                .collect()
        }),
    ))
}

/// Picks `input[r, cols[r]]` for every row of a `[B, c]` input, giving `[B]`.
pub fn gather_cols(input: &Tensor, cols: &[usize]) -> Result<Tensor> {
    expect_rank(input, 2, "gather_cols")?;
    let &[rows, c] = input.shape() else { unreachable!() };
    if cols.len() != rows {
        return Err(shape_err!("gather_cols: {} indices for {rows} rows", cols.len()));
    }
    if let Some(bad) = cols.iter().find(|&&j| j >= c) {
        return Err(Error::Usage(format!("gather_cols: column {bad} out of range 0..{c}")));
    }
    let out = cols.iter().enumerate().map(|(r, &j)| input.data()[r * c + j]).collect();
    let cols = cols.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![rows],
        vec![input.clone()],
        Box::new(move |go, _| {
            let mut dx = vec![0.0; rows * c];
            for (r, (&j, &g)) in cols.iter().zip(go).enumerate() {
                dx[r * c + j] = g;
            }
            vec![Some(dx)]
        }),
    ))
}

/// Gathers rows of a `[n, d]` input by index, giving `[idx.len(), d]`.
/// Rows may repeat; their gradients add up.
pub fn index_rows(input: &Tensor, idx: &[usize]) -> Result<Tensor> {
    expect_rank(input, 2, "index_rows")?;
    let &[n, d] = input.shape() else { unreachable!() };
    if let Some(bad) = idx.iter().find(|&&i| i >= n) {
        return Err(Error::Usage(format!("index_rows: row {bad} out of range 0..{n}")));
    }
    if idx.is_empty() {
        return Err(shape_err!("index_rows: empty index list"));
    }
    let x = input.data();
    let out = idx.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
    let idx = idx.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![idx.len(), d],
        vec![input.clone()],
        Box::new(move |go, _| {
            let mut dx = vec![0.0; n * d];
            for (g, &i) in go.chunks_exact(d).zip(&idx) {
                dx[i * d..(i + 1) * d].iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            vec![Some(dx)]
        }),
    ))
}
