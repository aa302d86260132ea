//! Independent oracles shared by the integration suites. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tumorseg::tensor::{Real, Tensor};

pub type Oracle3 = Vec<Vec<Vec<f64>>>;

/// Direct-summation 3D convolution, `[N, Cin, D, H, W]` input and
/// `[Cout, Cin, k, k, k]` weight, zero padding.
pub fn naive_conv3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [cout, _, k, _, _] = ws;
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * cout * od * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let iz = (z * stride + kd) as isize - pad as isize;
                                        let iy = (yy * stride + kh) as isize - pad as isize;
                                        let ix = (xx * stride + kw) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        acc += x[(((bi * cin + ci) * d + iz) * h + iy) * wd + ix]
                                            * w[(((co * cin + ci) * k + kd) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                        y[(((bi * cout + co) * od + z) * oh + yy) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (y, [n, cout, od, oh, ow])
}

/// Scatter-form transposed convolution, weight `[Cin, Cout, k, k, k]`.
pub fn naive_conv_transpose3d(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: usize,
) -> (Vec<f64>, [usize; 5]) {
    let [n, cin, d, h, wd] = xs;
    let [_, cout, k, _, _] = ws;
    let (od, oh, ow) = (
        (d - 1) * stride + k,
        (h - 1) * stride + k,
        (wd - 1) * stride + k,
    );
    let mut y = vec![0.0; n * cout * od * oh * ow];
    for bi in 0..n {
        for co in 0..cout {
            for v in &mut y[(bi * cout + co) * od * oh * ow..(bi * cout + co + 1) * od * oh * ow] {
                *v = b[co];
            }
        }
        for ci in 0..cin {
            for z in 0..d {
                for yy in 0..h {
                    for xx in 0..wd {
                        let xv = x[(((bi * cin + ci) * d + z) * h + yy) * wd + xx];
                        for co in 0..cout {
                            for kd in 0..k {
                                for kh in 0..k {
                                    for kw in 0..k {
                                        let (oz, oy, ox) =
                                            (z * stride + kd, yy * stride + kh, xx * stride + kw);
                                        y[(((bi * cout + co) * od + oz) * oh + oy) * ow + ox] +=
                                            xv * w[(((ci * cout + co) * k + kd) * k + kh) * k + kw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, [n, cout, od, oh, ow])
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Uniform values bounded away from zero by `gap` (keeps finite differences
/// off the ReLU kink).
pub fn uniform_away_from_zero(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compares analytic gradients of `sum(r * f(inputs))` for a random fixed
/// weighting `r` against central finite differences.
pub fn grad_check<F>(
    rng: &mut ChaCha8Rng,
    inputs: &[(Vec<usize>, Vec<f64>)],
    differentiable: &[bool],
    f: F,
) -> GradCheck
where
    F: Fn(&[Tensor]) -> Tensor,
{
    const H: f64 = 1e-5;
    let params: Vec<Tensor> = inputs
        .iter()
        .zip(differentiable)
        .map(|((shape, v), &d)| {
            let v: Vec<Real> = v.iter().map(|&x| x as Real).collect();
            if d {
                Tensor::parameter(shape, v).unwrap()
            } else {
                Tensor::from_vec(shape, v).unwrap()
            }
        })
        .collect();
    let out = f(&params);
    let weights = uniform(rng, out.numel(), -1.0, 1.0);
    out.backward_with(weights.iter().map(|&x| x as Real).collect())
        .unwrap();

    let objective = |vals: &[Vec<f64>]| -> f64 {
        let ts: Vec<Tensor> = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| {
                Tensor::from_vec(shape, v.iter().map(|&x| x as Real).collect()).unwrap()
            })
            .collect();
        let y = f(&ts);
        y.values()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| a as f64 * b)
            .sum()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, p) in params.iter().enumerate() {
        if !differentiable[i] {
            continue;
        }
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for j in 0..p.numel() {
            let mut plus = base.clone();
            plus[i][j] += H;
            let mut minus = base.clone();
            minus[i][j] -= H;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * H);
            let a = analytic[j] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    GradCheck {
        max_rel_error: worst,
        checked,
    }
}

pub type CaseFn = fn(&mut ChaCha8Rng) -> GradCheck;

fn shape5(n: usize, c: usize, d: usize, h: usize, w: usize) -> Vec<usize> {
    vec![n, c, d, h, w]
}

fn case_conv3d(rng: &mut ChaCha8Rng) -> GradCheck {
    use tumorseg::tensor::conv3d;
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1usize.min(k - 1));
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(k.max(2)..=4)).collect();
    let xs = shape5(n, cin, dims[0], dims[1], dims[2]);
    let ws = shape5(cout, cin, k, k, k);
    let inputs = vec![
        (xs.clone(), uniform(rng, xs.iter().product(), -1.0, 1.0)),
        (ws.clone(), uniform(rng, ws.iter().product(), -1.0, 1.0)),
        (vec![cout], uniform(rng, cout, -1.0, 1.0)),
    ];
    grad_check(rng, &inputs, &[true, true, true], |t| {
        conv3d(&t[0], &t[1], &t[2], stride, pad).unwrap()
    })
}

fn case_conv_transpose3d(rng: &mut ChaCha8Rng) -> GradCheck {
    use tumorseg::tensor::conv_transpose3d;
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(1..=3)).collect();
    let xs = shape5(n, cin, dims[0], dims[1], dims[2]);
    let ws = shape5(cin, cout, k, k, k);
    let inputs = vec![
        (xs.clone(), uniform(rng, xs.iter().product(), -1.0, 1.0)),
        (ws.clone(), uniform(rng, ws.iter().product(), -1.0, 1.0)),
        (vec![cout], uniform(rng, cout, -1.0, 1.0)),
    ];
    grad_check(rng, &inputs, &[true, true, true], |t| {
        conv_transpose3d(&t[0], &t[1], &t[2], stride).unwrap()
    })
}

fn random_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    shape5(
        n,
        c,
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=3),
    )
}

fn case_relu(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let v = uniform_away_from_zero(rng, s.iter().product(), 0.05);
    grad_check(rng, &[(s, v)], &[true], |t| tumorseg::tensor::relu(&t[0]))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let v = uniform(rng, s.iter().product(), -3.0, 3.0);
    grad_check(rng, &[(s, v)], &[true], |t| {
        tumorseg::tensor::sigmoid(&t[0])
    })
}

fn case_add(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let n = s.iter().product();
    let inputs = vec![
        (s.clone(), uniform(rng, n, -1.0, 1.0)),
        (s, uniform(rng, n, -1.0, 1.0)),
    ];
    grad_check(rng, &inputs, &[true, true], |t| {
        tumorseg::tensor::add(&t[0], &t[1]).unwrap()
    })
}

fn case_concat(rng: &mut ChaCha8Rng) -> GradCheck {
    let a = random_shape(rng);
    let mut b = a.clone();
    b[1] = rng.random_range(1..=3);
    let inputs = vec![
        (a.clone(), uniform(rng, a.iter().product(), -1.0, 1.0)),
        (b.clone(), uniform(rng, b.iter().product(), -1.0, 1.0)),
    ];
    grad_check(rng, &inputs, &[true, true], |t| {
        tumorseg::tensor::concat_channels(&t[0], &t[1]).unwrap()
    })
}

fn case_instance_norm(rng: &mut ChaCha8Rng) -> GradCheck {
    let mut s = random_shape(rng);
    s[2] = rng.random_range(2..=3);
    let c = s[1];
    let inputs = vec![
        (s.clone(), uniform(rng, s.iter().product(), -1.0, 1.0)),
        (vec![c], uniform(rng, c, 0.5, 1.5)),
        (vec![c], uniform(rng, c, -0.5, 0.5)),
    ];
    grad_check(rng, &inputs, &[true, true, true], |t| {
        tumorseg::tensor::instance_norm(&t[0], &t[1], &t[2], 1e-5).unwrap()
    })
}

fn binary_target(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
        .collect()
}

fn case_soft_dice(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let n = s.iter().product();
    let smooth = if rng.random_bool(0.5) { 1e-5 } else { 1.0 };
    let inputs = vec![
        (s.clone(), uniform(rng, n, 0.05, 0.95)),
        (s, binary_target(rng, n)),
    ];
    grad_check(rng, &inputs, &[true, false], move |t| {
        tumorseg::tensor::soft_dice_loss(&t[0], &t[1], smooth as Real).unwrap()
    })
}

fn case_bce(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let n = s.iter().product();
    let inputs = vec![
        (s.clone(), uniform(rng, n, 0.05, 0.95)),
        (s, binary_target(rng, n)),
    ];
    grad_check(rng, &inputs, &[true, false], |t| {
        tumorseg::tensor::bce_loss(&t[0], &t[1]).unwrap()
    })
}

fn case_reductions(rng: &mut ChaCha8Rng) -> GradCheck {
    let s = random_shape(rng);
    let v = uniform(rng, s.iter().product(), -1.0, 1.0);
    let c = rng.random_range(-2.0..2.0) as Real;
    grad_check(rng, &[(s, v)], &[true], move |t| {
        use tumorseg::tensor::{add, mean, mul_scalar, sum};
        add(&sum(&mul_scalar(&t[0], c)), &mean(&t[0])).unwrap()
    })
}

/// Pre-activation residual block with a projection shortcut.
fn case_residual_block(rng: &mut ChaCha8Rng) -> GradCheck {
    use tumorseg::tensor::{add, conv3d, instance_norm, relu};
    let cin = rng.random_range(1..=2);
    let cout = rng.random_range(1..=2);
    let xs = shape5(1, cin, 3, 3, 3);
    let inputs = vec![
        (xs.clone(), uniform(rng, 27 * cin, -1.0, 1.0)),
        (
            shape5(cout, cin, 3, 3, 3),
            uniform(rng, 27 * cin * cout, -0.5, 0.5),
        ),
        (vec![cout], uniform(rng, cout, -0.1, 0.1)),
        (
            shape5(cout, cin, 1, 1, 1),
            uniform(rng, cin * cout, -1.0, 1.0),
        ),
        (vec![cout], uniform(rng, cout, -0.1, 0.1)),
        (vec![cin], uniform(rng, cin, 0.5, 1.5)),
        (vec![cin], uniform(rng, cin, 0.2, 0.6)),
    ];
    grad_check(rng, &inputs, &[true; 7], |t| {
        let h = relu(&instance_norm(&t[0], &t[5], &t[6], 1e-5).unwrap());
        let h = conv3d(&h, &t[1], &t[2], 1, 1).unwrap();
        let skip = conv3d(&t[0], &t[3], &t[4], 1, 0).unwrap();
        add(&h, &skip).unwrap()
    })
}

/// Every differentiable engine operation with its finite-difference case.
pub fn gradient_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv3d", case_conv3d as CaseFn),
        ("conv_transpose3d", case_conv_transpose3d),
        ("relu", case_relu),
        ("sigmoid", case_sigmoid),
        ("add", case_add),
        ("concat_channels", case_concat),
        ("instance_norm", case_instance_norm),
        ("soft_dice_loss", case_soft_dice),
        ("bce_loss", case_bce),
        ("sum/mean/mul_scalar", case_reductions),
        ("residual_block", case_residual_block),
    ]
}

pub mod masks;
pub mod nifti;
