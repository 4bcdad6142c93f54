//! Grouped N-d convolution (cross-correlation, zero padding) for spatial rank 1, 2 and 3.
//!
//! Every rank is promoted to 3-D by prepending unit dimensions. Each sample and
//! group is lowered to a column matrix `[C_in/G * kd*kh*kw, D'*H'*W']` and
//! multiplied by the weight rows. Per output element the accumulation order is
//! fixed: input channel outermost, kernel offsets innermost, bias first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvParams {
    /// Unit stride, `padding` per spatial dim, one group.
    pub fn padded(padding: &[usize]) -> Self {
        ConvParams {
            stride: vec![1; padding.len()],
            padding: padding.to_vec(),
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: &[usize]) -> Self {
        self.stride = stride.to_vec();
        self
    }
}

/// Resolved geometry with every rank promoted to three spatial dims.
#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub out_shape: Vec<usize>,
}

impl Geometry {
    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    pub fn k_volume(&self) -> usize {
        self.kernel.iter().product()
    }
    pub fn in_volume(&self) -> usize {
        self.input.iter().product()
    }
    pub fn out_volume(&self) -> usize {
        self.output.iter().product()
    }
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }
}

const SPATIAL_NAMES: [&str; 3] = ["depth", "height", "width"];

fn promote(v: &[usize], fill: usize) -> [usize; 3] {
    let mut out = [fill; 3];
    out[3 - v.len()..].copy_from_slice(v);
    out
}

pub(crate) fn geometry(x_shape: &[usize], w_shape: &[usize], p: &ConvParams) -> Result<Geometry> {
    if !(3..=5).contains(&x_shape.len()) {
        return Err(Error::shape("conv", format!("input rank {} not in 3..=5 ({x_shape:?})", x_shape.len())));
    }
    if w_shape.len() != x_shape.len() {
        return Err(Error::shape(
            "conv",
            format!("weight rank {} does not match input rank {}", w_shape.len(), x_shape.len()),
        ));
    }
    let rank = x_shape.len() - 2;
    if p.stride.len() != rank || p.padding.len() != rank {
        return Err(Error::shape(
            "conv",
            format!("stride/padding must have {rank} entries, got {:?}/{:?}", p.stride, p.padding),
        ));
    }
    let g = p.groups;
    if g == 0 {
        return Err(Error::invalid("conv groups must be positive"));
    }
    let (c_in, c_out) = (x_shape[1], w_shape[0]);
    if c_in % g != 0 {
        return Err(Error::invalid(format!("conv: groups {g} does not divide input channels {c_in}")));
    }
    if c_out % g != 0 {
        return Err(Error::invalid(format!("conv: groups {g} does not divide output channels {c_out}")));
    }
    if w_shape[1] != c_in / g {
        return Err(Error::Dim {
            op: "conv",
            dim: "weight input channels (C_in/G)",
            expected: c_in / g,
            got: w_shape[1],
        });
    }
    if p.stride.contains(&0) {
        return Err(Error::invalid("conv stride must be positive"));
    }
    let input = promote(&x_shape[2..], 1);
    let kernel = promote(&w_shape[2..], 1);
    let stride = promote(&p.stride, 1);
    let pad = promote(&p.padding, 0);
    let mut output = [1; 3];
    for d in 0..3 {
        let padded = input[d] + 2 * pad[d];
        if kernel[d] > padded {
            return Err(Error::Dim {
                op: "conv kernel vs padded input",
                dim: SPATIAL_NAMES[d],
                expected: padded,
                got: kernel[d],
            });
        }
        output[d] = (padded - kernel[d]) / stride[d] + 1;
    }
    let mut out_shape = vec![x_shape[0], c_out];
    out_shape.extend_from_slice(&output[3 - rank..]);
    Ok(Geometry {
        batch: x_shape[0],
        c_in,
        c_out,
        groups: g,
        input,
        kernel,
        stride,
        pad,
        output,
        out_shape,
    })
}

/// Writes the column matrix for one sample/group; `x` is that group's `[cin_g, D, H, W]` block.
fn im2col<S: Scalar>(g: &Geometry, x: &[S], col: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut i = 0;
                    for zd in 0..od {
                        let d = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let h = (zh * sh + b) as isize - ph as isize;
                            let inside = d >= 0 && (d as usize) < id && h >= 0 && (h as usize) < ih;
                            if !inside {
                                dst[i..i + ow].fill(S::ZERO);
                                i += ow;
                                continue;
                            }
                            let base = (d as usize * ih + h as usize) * iw;
                            for zw in 0..ow {
                                let w = (zw * sw + e) as isize - pw as isize;
                                dst[i] = if w >= 0 && (w as usize) < iw { xc[base + w as usize] } else { S::ZERO };
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back into an input-shaped gradient block.
fn col2im<S: Scalar>(g: &Geometry, col: &[S], dx: &mut [S]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let [od, oh, ow] = g.output;
    let p = g.out_volume();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let xc = &mut dx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut i = 0;
                    for zd in 0..od {
                        let d = (zd * sd + a) as isize - pd as isize;
                        for zh in 0..oh {
                            let h = (zh * sh + b) as isize - ph as isize;
                            if !(d >= 0 && (d as usize) < id && h >= 0 && (h as usize) < ih) {
                                i += ow;
                                continue;
                            }
                            let base = (d as usize * ih + h as usize) * iw;
                            for zw in 0..ow {
                                let w = (zw * sw + e) as isize - pw as isize;
                                if w >= 0 && (w as usize) < iw {
                                    xc[base + w as usize] += src[i];
                                }
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y = conv(x, w) + b` with `x: [B, C_in, *S]`, `w: [C_out, C_in/G, *K]`.
pub fn conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: Option<&Tensor<S>>, p: &ConvParams) -> Result<Tensor<S>> {
    let g = geometry(x.shape(), w.shape(), p)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Dim {
                op: "conv bias",
                dim: "output channels",
                expected: g.c_out,
                got: b.len(),
            });
        }
    }
    let (cin_g, cout_g, kv, pv) = (g.cin_g(), g.cout_g(), g.k_volume(), g.out_volume());
    let rows = cin_g * kv;
    let in_block = cin_g * g.in_volume();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![S::ZERO; rows * pv] };
    let mut out = vec![S::ZERO; g.batch * g.c_out * pv];
    let wd = w.data();
    for bi in 0..g.batch {
        for gi in 0..g.groups {
            let xg = &x.data()[(bi * g.c_in + gi * cin_g) * g.in_volume()..][..in_block];
            let cols: &[S] = if pointwise {
                xg
            } else {
                im2col(&g, xg, &mut col);
                &col
            };
            for oc in 0..cout_g {
                let co = gi * cout_g + oc;
                let dst = &mut out[(bi * g.c_out + co) * pv..][..pv];
                let b0 = bias.map_or(S::ZERO, |b| b.data()[co]);
                dst.fill(b0);
                let wrow = &wd[co * rows..(co + 1) * rows];
                for (k, &wv) in wrow.iter().enumerate() {
                    axpy(wv, &cols[k * pv..(k + 1) * pv], dst);
                }
            }
        }
    }
    Tensor::new(g.out_shape, out)
}

pub struct ConvGrads<S> {
    pub dx: Option<Tensor<S>>,
    pub dw: Tensor<S>,
    pub db: Tensor<S>,
}

pub fn conv_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &Tensor<S>,
    p: &ConvParams,
    need_dx: bool,
) -> Result<ConvGrads<S>> {
    let g = geometry(x.shape(), w.shape(), p)?;
    if dout.shape() != g.out_shape.as_slice() {
        return Err(Error::shape("conv backward", format!("dout {:?} vs {:?}", dout.shape(), g.out_shape)));
    }
    let (cin_g, cout_g, kv, pv) = (g.cin_g(), g.cout_g(), g.k_volume(), g.out_volume());
    let rows = cin_g * kv;
    let in_block = cin_g * g.in_volume();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![S::ZERO; rows * pv] };
    let mut dcol = vec![S::ZERO; rows * pv];
    let mut dw = vec![S::ZERO; w.len()];
    let mut db = vec![S::ZERO; g.c_out];
    let mut dx = need_dx.then(|| vec![S::ZERO; x.len()]);
    let wd = w.data();
    let dd = dout.data();
    for bi in 0..g.batch {
        for gi in 0..g.groups {
            let x_off = (bi * g.c_in + gi * cin_g) * g.in_volume();
            let xg = &x.data()[x_off..][..in_block];
            let cols: &[S] = if pointwise {
                xg
            } else {
                im2col(&g, xg, &mut col);
                &col
            };
            for oc in 0..cout_g {
                let co = gi * cout_g + oc;
                let drow = &dd[(bi * g.c_out + co) * pv..][..pv];
                db[co] += drow.iter().copied().sum::<S>();
                let dwrow = &mut dw[co * rows..(co + 1) * rows];
                for (k, dwk) in dwrow.iter_mut().enumerate() {
                    *dwk += dot(drow, &cols[k * pv..(k + 1) * pv]);
                }
            }
            if let Some(dx) = dx.as_mut() {
                dcol.fill(S::ZERO);
                for oc in 0..cout_g {
                    let co = gi * cout_g + oc;
                    let drow = &dd[(bi * g.c_out + co) * pv..][..pv];
                    let wrow = &wd[co * rows..(co + 1) * rows];
                    for (k, &wv) in wrow.iter().enumerate() {
                        axpy(wv, drow, &mut dcol[k * pv..(k + 1) * pv]);
                    }
                }
                let dxg = &mut dx[x_off..][..in_block];
                if pointwise {
                    for (d, &c) in dxg.iter_mut().zip(&dcol) {
                        *d += c;
                    }
                } else {
                    col2im(&g, &dcol, dxg);
                }
            }
        }
    }
    Ok(ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new(vec![g.c_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depthwise_1d_example() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::<f64>::from_f64(&[1, 1, 3], &[1.0, 0.0, -1.0]).unwrap();
        let y = conv_forward(&x, &w, None, &ConvParams::padded(&[1])).unwrap();
        assert_eq!(y.to_f64_vec(), vec![-2.0, -2.0, 2.0]);
    }

    #[test]
    fn temporal_kernel_at_init() {
        // (3,1,1) kernel, one channel, weights 1/3, one spatial site.
        let x = Tensor::<f64>::from_f64(&[1, 1, 3, 1, 1], &[3.0, 6.0, 9.0]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 1, 1], 1.0 / 3.0);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv_forward(&x, &w, Some(&b), &ConvParams::padded(&[1, 0, 0])).unwrap();
        let expect = [3.0, 6.0, 5.0];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 2 * 2 * 2).map(|i| (i as f64).sin()).collect();
        let x = Tensor::<f64>::from_f64(&[2, 3, 2, 2, 2], &data).unwrap();
        let mut w = Tensor::<f64>::zeros(&[3, 1, 1, 1, 1]);
        w.data_mut().fill(1.0);
        let b = Tensor::zeros(&[3]);
        let p = ConvParams::padded(&[0, 0, 0]).with_groups(3);
        let y = conv_forward(&x, &w, Some(&b), &p).unwrap();
        assert!(y.bitwise_eq(&x));
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::<f32>::zeros(&[2, 4, 7, 9]);
        let w = Tensor::<f32>::zeros(&[6, 2, 3, 5]);
        let p = ConvParams::padded(&[1, 2]).with_groups(2);
        let y = conv_forward(&x, &w, None, &p).unwrap();
        assert_eq!(y.shape(), &[2, 6, 7 + 2 - 3 + 1, 9 + 4 - 5 + 1]);
        let y = conv_forward(&x, &w, None, &p.clone().with_stride(&[2, 2])).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 5]);
    }

    #[test]
    fn errors_name_the_problem() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4]);
        let w = Tensor::<f32>::zeros(&[4, 1, 3]);
        let e = conv_forward(&x, &w, None, &ConvParams::padded(&[1]).with_groups(2)).unwrap_err();
        assert!(e.to_string().contains("does not divide input channels"), "{e}");
        let w = Tensor::<f32>::zeros(&[4, 3, 7]);
        let e = conv_forward(&x, &w, None, &ConvParams::padded(&[1])).unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
        let w = Tensor::<f32>::zeros(&[4, 2, 3]);
        let e = conv_forward(&x, &w, None, &ConvParams::padded(&[1])).unwrap_err();
        assert!(e.to_string().contains("weight input channels"), "{e}");
    }
}
