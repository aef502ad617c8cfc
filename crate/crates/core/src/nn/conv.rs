//! Patch extraction for 2-D convolution.
//!
//! Every output location of every sample becomes one row of the patch
//! matrix; columns follow `(channel, ky, kx)` order and end with the
//! homogeneous 1 that carries the bias.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output locations per sample.
    pub fn locations(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Patch width including the bias column.
    pub fn patch_cols(&self) -> usize {
        self.in_ch * self.kh * self.kw + 1
    }

    pub fn fits(&self) -> bool {
        self.height + 2 * self.pad >= self.kh && self.width + 2 * self.pad >= self.kw
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// `input` is `batch x in_ch x height x width`; returns the
/// `(batch * locations) x patch_cols` patch matrix.
pub fn im2col(input: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = g.patch_cols();
    let plane = g.height * g.width;
    let mut out = vec![0.0; batch * ho * wo * cols];
    for n in 0..batch {
        let sample = &input[n * g.in_ch * plane..(n + 1) * g.in_ch * plane];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &mut out[((n * ho + oy) * wo + ox) * cols..][..cols];
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let Some(y) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(x) = g.source(ox, kx, g.width) {
                                row[(c * g.kh + ky) * g.kw + kx] = sample[c * plane + y * g.width + x];
                            }
                        }
                    }
                }
                row[cols - 1] = 1.0;
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input
/// layout, ignoring the bias column.
pub fn col2im(patches: &[f64], batch: usize, g: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let cols = g.patch_cols();
    let plane = g.height * g.width;
    let mut out = vec![0.0; batch * g.in_ch * plane];
    for n in 0..batch {
        let sample = &mut out[n * g.in_ch * plane..(n + 1) * g.in_ch * plane];
        for oy in 0..ho {
            for ox in 0..wo {
                let row = &patches[((n * ho + oy) * wo + ox) * cols..][..cols];
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        let Some(y) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            if let Some(x) = g.source(ox, kx, g.width) {
                                sample[c * plane + y * g.width + x] += row[(c * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
