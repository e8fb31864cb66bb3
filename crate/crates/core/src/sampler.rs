//! Bilinear resampling expressed as a sparse linear operator, so the same
//! grid can run forward on pixels and transposed on pixel gradients.

use crate::image::ImagePlane;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    idx: Vec<[u32; 4]>,
    wts: Vec<[f32; 4]>,
}

impl SampleGrid {
    /// `coord(oy, ox)` returns the source position (y, x) in pixel-centre
    /// coordinates; positions outside the frame are clamped to the border.
    pub fn from_coords(
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        mut coord: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Self {
        let (max_y, max_x) = ((in_h - 1) as f64, (in_w - 1) as f64);
        let mut idx = Vec::with_capacity(out_h * out_w);
        let mut wts = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let (sy, sx) = coord(oy, ox);
                let sy = sy.max(0.0).min(max_y);
                let sx = sx.max(0.0).min(max_x);
                // Non-negative after clamping, so truncation is floor.
                let y0 = sy as usize;
                let x0 = sx as usize;
                let fy = (sy - y0 as f64) as f32;
                let fx = (sx - x0 as f64) as f32;
                let y1 = (y0 + 1).min(in_h - 1);
                let x1 = (x0 + 1).min(in_w - 1);
                idx.push([
                    (y0 * in_w + x0) as u32,
                    (y0 * in_w + x1) as u32,
                    (y1 * in_w + x0) as u32,
                    (y1 * in_w + x1) as u32,
                ]);
                wts.push([
                    (1.0 - fy) * (1.0 - fx),
                    (1.0 - fy) * fx,
                    fy * (1.0 - fx),
                    fy * fx,
                ]);
            }
        }
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            idx,
            wts,
        }
    }

    /// Half-pixel-aligned resize; an exact 2× reduction averages 2×2 blocks.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let ry = in_h as f64 / out_h as f64;
        let rx = in_w as f64 / out_w as f64;
        Self::from_coords(in_h, in_w, out_h, out_w, |oy, ox| {
            ((oy as f64 + 0.5) * ry - 0.5, (ox as f64 + 0.5) * rx - 0.5)
        })
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    pub fn apply(&self, img: &ImagePlane) -> ImagePlane {
        assert_eq!(img.dims(), (self.in_h, self.in_w), "grid/input size mismatch");
        let src = img.data();
        let mut out = vec![0.0f32; self.out_h * self.out_w * 3];
        for (o, (ix, w)) in self.idx.iter().zip(&self.wts).enumerate() {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for t in 0..4 {
                    acc += w[t] * src[ix[t] as usize * 3 + c];
                }
                out[o * 3 + c] = acc;
            }
        }
        ImagePlane::from_raw(self.out_h, self.out_w, out).expect("grid output shape")
    }

    /// Adjoint of [`apply`]: scatters output-space gradients back to the input.
    pub fn apply_transpose(&self, grad_out: &[f32]) -> Vec<f32> {
        assert_eq!(grad_out.len(), self.out_h * self.out_w * 3);
        let mut g = vec![0.0f32; self.in_h * self.in_w * 3];
        for (o, (ix, w)) in self.idx.iter().zip(&self.wts).enumerate() {
            for c in 0..3 {
                let go = grad_out[o * 3 + c];
                if go == 0.0 {
                    continue;
                }
                for t in 0..4 {
                    g[ix[t] as usize * 3 + c] += w[t] * go;
                }
            }
        }
        g
    }
}

pub fn resize_bilinear(img: &ImagePlane, height: usize, width: usize) -> ImagePlane {
    if img.dims() == (height, width) {
        return img.clone();
    }
    SampleGrid::resize(img.height(), img.width(), height, width).apply(img)
}
