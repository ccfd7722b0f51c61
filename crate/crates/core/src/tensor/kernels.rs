//! Raw numeric kernels on slices. The tape ops wrap these.

use super::{Result, Tensor, TensorError};
use serde::{Deserialize, Serialize};

/// `out[m×n] = a[m×k] · b[k×n]`, accumulated in i-k-j order.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k×n] = aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub(crate) fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

/// `out[m×k] = g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub(crate) fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Column-wise arithmetic mean of an `M×D` matrix.
pub fn mean_pool_columns(v: &Tensor) -> Result<Tensor> {
    let (m, d) = v.dims2()?;
    let mut out = vec![0.0; d];
    for r in 0..m {
        for (o, x) in out.iter_mut().zip(v.row(r)) {
            *o += x;
        }
    }
    let inv = 1.0 / m as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::vector(out)
}

/// Geometry of the region convolution: `filters` kernels of size
/// `regions × width` slide along the feature axis with `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub regions: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub stride: usize,
    pub filters: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| TensorError::InvalidShape {
            op: "conv",
            shape: vec![self.regions, self.feature_dim, self.width, self.stride, self.filters],
            reason,
        };
        if self.regions == 0 || self.filters == 0 || self.width == 0 || self.stride == 0 {
            return Err(bad("all conv dimensions must be positive".into()));
        }
        if self.width > self.feature_dim {
            return Err(bad("filter wider than feature map".into()));
        }
        if !(self.feature_dim - self.width).is_multiple_of(self.stride) {
            return Err(bad(format!(
                "(D1 - C1) = {} is not divisible by stride {}",
                self.feature_dim - self.width,
                self.stride
            )));
        }
        Ok(())
    }

    /// Output width of the valid convolution, `(D1 − C1)/C2 + 1`.
    pub fn out_width(&self) -> usize {
        (self.feature_dim - self.width) / self.stride + 1
    }

    pub fn filter_len(&self) -> usize {
        self.regions * self.width
    }
}

/// Valid strided convolution. `input` is `M×D1`, `filters` is `K×M×C1`
/// (flattened), `bias` has `K` entries; output is `K×D2`.
pub fn conv_forward(g: &ConvGeometry, input: &[f64], filters: &[f64], bias: &[f64]) -> Vec<f64> {
    let d2 = g.out_width();
    let mut out = vec![0.0; g.filters * d2];
    for k in 0..g.filters {
        let fk = &filters[k * g.filter_len()..(k + 1) * g.filter_len()];
        for j in 0..d2 {
            let mut acc = bias[k];
            let start = j * g.stride;
            for m in 0..g.regions {
                let frow = &fk[m * g.width..(m + 1) * g.width];
                let vrow = &input[m * g.feature_dim + start..m * g.feature_dim + start + g.width];
                acc += frow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[k * d2 + j] = acc;
        }
    }
    out
}

/// Transposed convolution with the same geometry: scatters each topic
/// entry back over its receptive field. `topics` is `K×D2`, `bias` has
/// `D1` entries shared by all rows; output is `M×D1`.
pub fn deconv_forward(g: &ConvGeometry, topics: &[f64], filters: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let d2 = g.out_width();
    let mut out = vec![0.0; g.regions * g.feature_dim];
    if let Some(b) = bias {
        for m in 0..g.regions {
            out[m * g.feature_dim..(m + 1) * g.feature_dim].copy_from_slice(b);
        }
    }
    for k in 0..g.filters {
        let fk = &filters[k * g.filter_len()..(k + 1) * g.filter_len()];
        for j in 0..d2 {
            let t = topics[k * d2 + j];
            if t == 0.0 {
                continue;
            }
            let start = j * g.stride;
            for m in 0..g.regions {
                let frow = &fk[m * g.width..(m + 1) * g.width];
                let orow = &mut out[m * g.feature_dim + start..m * g.feature_dim + start + g.width];
                for (o, f) in orow.iter_mut().zip(frow) {
                    *o += f * t;
                }
            }
        }
    }
    out
}

/// Gradient of the convolution output with respect to its filters:
/// `dF[k][m][c] = Σ_j V[m][j·C2 + c] · G[k][j]`.
pub(crate) fn conv_filter_grad(g: &ConvGeometry, input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let d2 = g.out_width();
    let mut df = vec![0.0; g.filters * g.filter_len()];
    for k in 0..g.filters {
        let dfk = &mut df[k * g.filter_len()..(k + 1) * g.filter_len()];
        for j in 0..d2 {
            let gv = grad_out[k * d2 + j];
            if gv == 0.0 {
                continue;
            }
            let start = j * g.stride;
            for m in 0..g.regions {
                let vrow = &input[m * g.feature_dim + start..m * g.feature_dim + start + g.width];
                for (d, v) in dfk[m * g.width..(m + 1) * g.width].iter_mut().zip(vrow) {
                    *d += v * gv;
                }
            }
        }
    }
    df
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul_naive(&i2, &x, 2, 2, 2), x.to_vec());
        assert_eq!(matmul_naive(&[1.0, 2.0], &[3.0, 4.0], 1, 2, 1), vec![11.0]);
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let g = [1.0, -1.0, 0.5, 2.0]; // 2x2
                                       // aᵀ (3x2) · g (2x2)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_at_b(&a, &g, 2, 3, 2), matmul_naive(&at, &g, 3, 2, 2));
        // g (2x2) · bᵀ where b is 3x2
        let b = [1.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let bt = [1.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        assert_eq!(matmul_a_bt(&g, &b, 2, 3, 2), matmul_naive(&g, &bt, 2, 2, 3));
    }

    #[test]
    fn geometry_rejects_indivisible_stride() {
        let g = ConvGeometry {
            regions: 2,
            feature_dim: 5,
            width: 2,
            stride: 2,
            filters: 1,
        };
        assert!(g.validate().is_err());
        let ok = ConvGeometry { feature_dim: 4, ..g };
        ok.validate().unwrap();
        assert_eq!(ok.out_width(), 2);
    }

    #[test]
    fn full_size_geometry_shapes() {
        let g = ConvGeometry {
            regions: 50,
            feature_dim: 1024,
            width: 26,
            stride: 2,
            filters: 6,
        };
        g.validate().unwrap();
        assert_eq!(g.out_width(), 500);
        assert_eq!((g.out_width() - 1) * g.stride + g.width, 1024);
    }

    #[test]
    fn mean_pool_rows() {
        let v = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 4.0]]).unwrap();
        assert_eq!(mean_pool_columns(&v).unwrap().data(), &[1.0, 2.0]);
        let single = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(mean_pool_columns(&single).unwrap().data(), &[3.0, -1.0]);
    }
}
