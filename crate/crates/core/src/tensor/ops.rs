use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    let y = x.values().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_op(
        "relu",
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(|ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.parents[0].values())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(g)]
        }),
    )
}

fn logistic(v: Real) -> Real {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let y = x.values().iter().map(|&v| logistic(v)).collect();
    Tensor::from_op(
        "sigmoid",
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(|ctx| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.output)
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect();
            vec![Some(g)]
        }),
    )
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add requires identical shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let y = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        "add",
        a.shape().to_vec(),
        y,
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            vec![
                ctx.needs(0).then(|| ctx.grad.to_vec()),
                ctx.needs(1).then(|| ctx.grad.to_vec()),
            ]
        }),
    ))
}

pub fn mul_scalar(x: &Tensor, c: Real) -> Tensor {
    let y = x.values().iter().map(|v| v * c).collect();
    Tensor::from_op(
        "mul_scalar",
        x.shape().to_vec(),
        y,
        vec![x.clone()],
        Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|g| g * c).collect())]),
    )
}

/// Concatenates two `[N, C, ...]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::shape(format!(
            "concat_channels requires equal extents except axis C, got {sa:?} and {sb:?}"
        )));
    }
    let n = sa[0];
    let inner: usize = sa[2..].iter().product();
    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
    let mut y = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        y.extend_from_slice(&a.values()[i * ca..(i + 1) * ca]);
        y.extend_from_slice(&b.values()[i * cb..(i + 1) * cb]);
    }
    let mut shape = sa.to_vec();
    shape[1] = sa[1] + sb[1];
    Ok(Tensor::from_op(
        "concat_channels",
        shape,
        y,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let ga = ctx.needs(0).then(|| {
                (0..n)
                    .flat_map(|i| g[i * (ca + cb)..i * (ca + cb) + ca].iter().copied())
                    .collect()
            });
            let gb = ctx.needs(1).then(|| {
                (0..n)
                    .flat_map(|i| g[i * (ca + cb) + ca..(i + 1) * (ca + cb)].iter().copied())
                    .collect()
            });
            vec![ga, gb]
        }),
    ))
}

/// Per-(sample, channel) normalization over the spatial axes followed by a
/// per-channel affine map.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: Real) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(Error::shape(format!(
            "instance_norm expects [N, C, spatial...], got {s:?}"
        )));
    }
    let (n, c) = (s[0], s[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "instance_norm affine parameters must be [{c}], got {:?} and {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let vol: usize = s[2..].iter().product();
    let xv = x.values();
    let mut xhat = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; n * c];
    let mut y = vec![0.0; xv.len()];
    for slice in 0..n * c {
        let ch = slice % c;
        let src = &xv[slice * vol..(slice + 1) * vol];
        let mean = src.iter().sum::<Real>() / vol as Real;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / vol as Real;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[slice] = istd;
        let (gm, bt) = (gamma.values()[ch], beta.values()[ch]);
        let xh = &mut xhat[slice * vol..(slice + 1) * vol];
        let out = &mut y[slice * vol..(slice + 1) * vol];
        for ((h, o), v) in xh.iter_mut().zip(out.iter_mut()).zip(src) {
            *h = (v - mean) * istd;
            *o = *h * gm + bt;
        }
    }
    Ok(Tensor::from_op(
        "instance_norm",
        s.to_vec(),
        y,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |ctx| {
            let g = ctx.grad;
            let gamma = ctx.parents[1].values();
            let mut gx = ctx.needs(0).then(|| vec![0.0; g.len()]);
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let m = vol as Real;
            for slice in 0..n * c {
                let ch = slice % c;
                let gs = &g[slice * vol..(slice + 1) * vol];
                let xh = &xhat[slice * vol..(slice + 1) * vol];
                let sum_g: Real = gs.iter().sum();
                let sum_gx: Real = gs.iter().zip(xh).map(|(a, b)| a * b).sum();
                ggamma[ch] += sum_gx;
                gbeta[ch] += sum_g;
                if let Some(gx) = gx.as_mut() {
                    // d/dx of (x - mean) * istd, contracted with dL/dxhat = g * gamma
                    let scale = gamma[ch] * inv_std[slice] / m;
                    let dst = &mut gx[slice * vol..(slice + 1) * vol];
                    for ((d, &gi), &h) in dst.iter_mut().zip(gs).zip(xh) {
                        *d = scale * (m * gi - sum_g - h * sum_gx);
                    }
                }
            }
            vec![
                gx,
                ctx.needs(1).then_some(ggamma),
                ctx.needs(2).then_some(gbeta),
            ]
        }),
    ))
}

pub fn sum(x: &Tensor) -> Tensor {
    let total = x.values().iter().sum();
    let len = x.numel();
    Tensor::from_op(
        "sum",
        vec![1],
        vec![total],
        vec![x.clone()],
        Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; len])]),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let len = x.numel();
    let m = x.values().iter().sum::<Real>() / len as Real;
    Tensor::from_op(
        "mean",
        vec![1],
        vec![m],
        vec![x.clone()],
        Box::new(move |ctx| vec![Some(vec![ctx.grad[0] / len as Real; len])]),
    )
}

fn same_shape(pred: &Tensor, target: &Tensor, op: &str) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "{op}: prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// `1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth)`, pooled over every
/// element of the batch. Differentiable with respect to `pred` only.
pub fn soft_dice_loss(pred: &Tensor, target: &Tensor, smooth: Real) -> Result<Tensor> {
    same_shape(pred, target, "soft_dice_loss")?;
    let (p, t) = (pred.values(), target.values());
    let inter: Real = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<Real>() + t.iter().sum::<Real>() + smooth;
    let numer = 2.0 * inter + smooth;
    let loss = 1.0 - numer / denom;
    let target = target.values().to_vec();
    Ok(Tensor::from_op(
        "soft_dice_loss",
        vec![1],
        vec![loss],
        vec![pred.clone()],
        Box::new(move |ctx| {
            let g0 = ctx.grad[0];
            let d2 = denom * denom;
            let g = target
                .iter()
                .map(|&ti| -g0 * (2.0 * ti * denom - numer) / d2)
                .collect();
            vec![Some(g)]
        }),
    ))
}

/// Mean voxelwise binary cross-entropy; probabilities are clamped to
/// `[eps, 1 - eps]`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    const EPS: Real = 1e-7;
    same_shape(pred, target, "bce_loss")?;
    let (p, t) = (pred.values(), target.values());
    let len = p.len() as Real;
    let total: Real = p
        .iter()
        .zip(t)
        .map(|(&pi, &ti)| {
            let pc = pi.clamp(EPS, 1.0 - EPS);
            -(ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln())
        })
        .sum();
    let target = t.to_vec();
    Ok(Tensor::from_op(
        "bce_loss",
        vec![1],
        vec![total / len],
        vec![pred.clone()],
        Box::new(move |ctx| {
            let g0 = ctx.grad[0] / len;
            let g = ctx.parents[0]
                .values()
                .iter()
                .zip(&target)
                .map(|(&pi, &ti)| {
                    if pi <= EPS || pi >= 1.0 - EPS {
                        0.0
                    } else {
                        g0 * (pi - ti) / (pi * (1.0 - pi))
                    }
                })
                .collect();
            vec![Some(g)]
        }),
    ))
}
