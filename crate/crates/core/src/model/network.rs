//! Forward and backward passes for the two supported architectures.
//!
//! Everything operates on a single example; batching is a loop in the caller. Parameters
//! are read straight from the flat vector through the layout offsets.

use super::spec::{InputShape, Layout, ModelKind, ModelSpec};
use crate::error::{Error, Result};

pub(crate) struct Trace {
    /// Post-activation output of each hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

struct Geometry {
    height: usize,
    width: usize,
    in_channels: usize,
}

fn geometry(spec: &ModelSpec) -> Geometry {
    match spec.input {
        InputShape::Image {
            channels,
            height,
            width,
        } => Geometry {
            height,
            width,
            in_channels: channels,
        },
        InputShape::Flat(d) => Geometry {
            height: 1,
            width: 1,
            in_channels: d,
        },
    }
}

fn ensure_finite(values: &[f64], tensor: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { tensor: tensor() })
    }
}

fn dense(weight: &[f64], bias: &[f64], input: &[f64]) -> Vec<f64> {
    let fan_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(r, b)| {
            let row = &weight[r * fan_in..(r + 1) * fan_in];
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        })
        .collect()
}

fn conv3x3(
    weight: &[f64],
    bias: &[f64],
    input: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let c_out = bias.len();
    let mut out = vec![0.0; c_out * h * w];
    for o in 0..c_out {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..c_in {
            let src = &input[i * h * w..(i + 1) * h * w];
            let k = &weight[(o * c_in + i) * 9..(o * c_in + i + 1) * 9];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += k[ky * 3 + kx] * src[yy as usize * w + xx as usize];
                        }
                    }
                    plane[y * w + x] += acc;
                }
            }
        }
    }
    out
}

fn relu_in_place(values: &mut [f64]) {
    values.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

pub(crate) fn check_input(spec: &ModelSpec, input: &[f64]) -> Result<()> {
    if input.len() != spec.input.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("input {} ({} values)", spec.input, spec.input.len()),
            actual: format!("{} values", input.len()),
        });
    }
    Ok(())
}

pub(crate) fn forward(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[f64],
    input: &[f64],
) -> Result<Trace> {
    check_input(spec, input)?;
    let slot = |i: usize| &params[layout.slots[i].range()];
    let depth = spec.widths.len();
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(depth);
    let features = match spec.kind {
        ModelKind::Mlp => {
            for i in 0..depth {
                let src = if i == 0 { input } else { &hidden[i - 1] };
                let mut z = dense(slot(2 * i), slot(2 * i + 1), src);
                relu_in_place(&mut z);
                ensure_finite(&z, || format!("dense{i}"))?;
                hidden.push(z);
            }
            hidden[depth - 1].clone()
        }
        ModelKind::Conv => {
            let g = geometry(spec);
            let mut c_in = g.in_channels;
            for i in 0..depth {
                let src = if i == 0 { input } else { &hidden[i - 1] };
                let mut z = conv3x3(slot(2 * i), slot(2 * i + 1), src, c_in, g.height, g.width);
                relu_in_place(&mut z);
                ensure_finite(&z, || format!("conv{i}"))?;
                hidden.push(z);
                c_in = spec.widths[i];
            }
            spatial_mean(&hidden[depth - 1], c_in, g.height * g.width)
        }
    };
    let logits = dense(slot(2 * depth), slot(2 * depth + 1), &features);
    ensure_finite(&logits, || "head".to_string())?;
    Ok(Trace {
        hidden,
        features,
        logits,
    })
}

pub(crate) fn spatial_mean(map: &[f64], channels: usize, area: usize) -> Vec<f64> {
    (0..channels)
        .map(|c| map[c * area..(c + 1) * area].iter().sum::<f64>() / area as f64)
        .collect()
}

/// Numerically stable log-softmax.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let top = super::argmax(logits);
    let max = logits[top];
    // ln_1p keeps tiny losses of saturated predictions strictly positive
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, z)| (z - max).exp())
        .sum();
    let lse = max + rest.ln_1p();
    logits.iter().map(|z| z - lse).collect()
}

/// Cross-entropy of one row, exact for saturated predictions.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let top = super::argmax(logits);
    let max = logits[top];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, z)| (z - max).exp())
        .sum();
    (max - logits[label]) + rest.ln_1p()
}

/// Accumulates the gradient of the cross-entropy loss for one example into `grad`
/// and returns the loss.
pub(crate) fn backward(
    spec: &ModelSpec,
    layout: &Layout,
    params: &[f64],
    input: &[f64],
    trace: &Trace,
    label: usize,
    grad: &mut [f64],
) -> f64 {
    let depth = spec.widths.len();
    let logp = log_softmax(&trace.logits);
    let loss = cross_entropy(&trace.logits, label);
    let dlogits: Vec<f64> = logp
        .iter()
        .enumerate()
        .map(|(k, lp)| lp.exp() - if k == label { 1.0 } else { 0.0 })
        .collect();

    let head_w = layout.slots[2 * depth].range();
    let head_b = layout.slots[2 * depth + 1].range();
    let n_feat = trace.features.len();
    let mut dfeat = vec![0.0; n_feat];
    for (k, dk) in dlogits.iter().enumerate() {
        grad[head_b.start + k] += dk;
        let row = head_w.start + k * n_feat;
        for j in 0..n_feat {
            grad[row + j] += dk * trace.features[j];
            dfeat[j] += params[row + j] * dk;
        }
    }

    match spec.kind {
        ModelKind::Mlp => {
            let mut da = dfeat;
            for i in (0..depth).rev() {
                let out = &trace.hidden[i];
                let src: &[f64] = if i == 0 { input } else { &trace.hidden[i - 1] };
                let w = layout.slots[2 * i].range();
                let b = layout.slots[2 * i + 1].range();
                let fan_in = src.len();
                let dz: Vec<f64> = da
                    .iter()
                    .zip(out)
                    .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                    .collect();
                let mut da_prev = if i > 0 { vec![0.0; fan_in] } else { Vec::new() };
                for (r, dr) in dz.iter().enumerate() {
                    if *dr == 0.0 {
                        continue;
                    }
                    grad[b.start + r] += dr;
                    let row = w.start + r * fan_in;
                    for c in 0..fan_in {
                        grad[row + c] += dr * src[c];
                    }
                    if i > 0 {
                        for c in 0..fan_in {
                            da_prev[c] += params[row + c] * dr;
                        }
                    }
                }
                da = da_prev;
            }
        }
        ModelKind::Conv => {
            let g = geometry(spec);
            let area = g.height * g.width;
            let last = spec.widths[depth - 1];
            let mut da = vec![0.0; last * area];
            for c in 0..last {
                let v = dfeat[c] / area as f64;
                da[c * area..(c + 1) * area].iter_mut().for_each(|x| *x = v);
            }
            for i in (0..depth).rev() {
                let out = &trace.hidden[i];
                let src: &[f64] = if i == 0 { input } else { &trace.hidden[i - 1] };
                let c_in = if i == 0 {
                    g.in_channels
                } else {
                    spec.widths[i - 1]
                };
                let c_out = spec.widths[i];
                let dz: Vec<f64> = da
                    .iter()
                    .zip(out)
                    .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                    .collect();
                let w = layout.slots[2 * i].range();
                let b = layout.slots[2 * i + 1].range();
                let mut da_prev = if i > 0 {
                    vec![0.0; c_in * area]
                } else {
                    Vec::new()
                };
                debug_assert_eq!(w.end, b.start);
                let (gw, gb) = grad[w.start..b.end].split_at_mut(w.len());
                conv3x3_backward(
                    &params[w.clone()],
                    src,
                    &dz,
                    (c_in, c_out, g.height, g.width),
                    gw,
                    gb,
                    if i > 0 { Some(&mut da_prev) } else { None },
                );
                da = da_prev;
            }
        }
    }
    loss
}

fn conv3x3_backward(
    weight: &[f64],
    input: &[f64],
    dz: &[f64],
    (c_in, c_out, h, w): (usize, usize, usize, usize),
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut Vec<f64>>,
) {
    let area = h * w;
    for o in 0..c_out {
        let dplane = &dz[o * area..(o + 1) * area];
        dbias[o] += dplane.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * area..(i + 1) * area];
            let base = (o * c_in + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let kw = weight[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in 0..h {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let d = dplane[y * w + x];
                            let si = yy as usize * w + xx as usize;
                            acc += d * src[si];
                            if let Some(din) = dinput.as_deref_mut() {
                                din[i * area + si] += kw * d;
                            }
                        }
                    }
                    dweight[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}
