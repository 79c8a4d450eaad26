//! Trainable parameter containers.
//!
//! Every container exposes a *flat view*: its fields concatenated into one
//! `f64` buffer in a fixed order (weight first, then bias / gamma then beta).
//! The gradient tape, the optimizer, and the checkpoint format all address
//! parameters through this layout, so it is part of the public contract.

use crate::error::{Error, Result};

/// One named sub-tensor of a parameter container (for checkpoints and
/// reporting). `offset`/`len` index into the container's flat view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPart {
    pub suffix: &'static str,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Common surface over parameter containers: flat-buffer access plus
/// named sub-tensor metadata.
pub trait FlatParam {
    fn flat_len(&self) -> usize;
    fn copy_to_flat(&self, out: &mut Vec<f64>);
    fn write_from_flat(&mut self, src: &[f64]);
    fn parts(&self) -> Vec<ParamPart>;

    fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        self.copy_to_flat(&mut v);
        v
    }
}

/// Dense per-position channel projection: `y = W x + b` with `W` of shape
/// `(out_features, in_features)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearWeights {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        assert!(in_features >= 1 && out_features >= 1);
        LinearWeights {
            in_features,
            out_features,
            weight: vec![0.0; out_features * in_features],
            bias: vec![0.0; out_features],
        }
    }

    /// Identity projection (square), zero bias.
    pub fn identity(features: usize) -> Self {
        let mut w = LinearWeights::zeros(features, features);
        for i in 0..features {
            w.weight[i * features + i] = 1.0;
        }
        w
    }

    pub fn from_parts(in_features: usize, out_features: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != out_features * in_features {
            return Err(Error::invalid_argument(format!(
                "linear weight length {} does not match ({out_features},{in_features})",
                weight.len()
            )));
        }
        if bias.len() != out_features {
            return Err(Error::invalid_argument(format!(
                "linear bias length {} does not match out_features {out_features}",
                bias.len()
            )));
        }
        Ok(LinearWeights {
            in_features,
            out_features,
            weight,
            bias,
        })
    }

    #[inline]
    pub fn w(&self, out: usize, inp: usize) -> f64 {
        self.weight[out * self.in_features + inp]
    }
}

impl FlatParam for LinearWeights {
    fn flat_len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn copy_to_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        out.extend_from_slice(&self.bias);
    }

    fn write_from_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.flat_len());
        let nw = self.weight.len();
        self.weight.copy_from_slice(&src[..nw]);
        self.bias.copy_from_slice(&src[nw..]);
    }

    fn parts(&self) -> Vec<ParamPart> {
        vec![
            ParamPart {
                suffix: "weight",
                shape: vec![self.out_features, self.in_features],
                offset: 0,
                len: self.weight.len(),
            },
            ParamPart {
                suffix: "bias",
                shape: vec![self.out_features],
                offset: self.weight.len(),
                len: self.bias.len(),
            },
        ]
    }
}

/// Per-channel square convolution filter bank: one `r x r` filter per channel,
/// no cross-channel mixing. `r` must be odd so a center tap exists.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    pub channels: usize,
    pub region: usize,
    /// `(channels, r, r)` row-major.
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl DepthwiseKernel {
    pub fn zeros(channels: usize, region: usize, with_bias: bool) -> Result<Self> {
        if region.is_multiple_of(2) || region == 0 {
            return Err(Error::invalid_argument(format!(
                "depthwise region size must be odd and >= 1, got {region}"
            )));
        }
        if channels == 0 {
            return Err(Error::invalid_argument("depthwise kernel needs >= 1 channel"));
        }
        Ok(DepthwiseKernel {
            channels,
            region,
            weight: vec![0.0; channels * region * region],
            bias: if with_bias { Some(vec![0.0; channels]) } else { None },
        })
    }

    /// Delta kernel: center tap 1, everything else 0, zero bias. Convolving
    /// with it is the identity, which the reduction tests rely on.
    pub fn delta(channels: usize, region: usize) -> Result<Self> {
        let mut k = DepthwiseKernel::zeros(channels, region, true)?;
        let mid = region / 2;
        for ch in 0..channels {
            k.weight[(ch * region + mid) * region + mid] = 1.0;
        }
        Ok(k)
    }

    #[inline]
    pub fn w(&self, ch: usize, u: usize, v: usize) -> f64 {
        self.weight[(ch * self.region + u) * self.region + v]
    }

    #[inline]
    pub fn pad(&self) -> usize {
        (self.region - 1) / 2
    }
}

impl FlatParam for DepthwiseKernel {
    fn flat_len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn copy_to_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    fn write_from_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.flat_len());
        let nw = self.weight.len();
        self.weight.copy_from_slice(&src[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&src[nw..]);
        }
    }

    fn parts(&self) -> Vec<ParamPart> {
        let mut parts = vec![ParamPart {
            suffix: "weight",
            shape: vec![self.channels, self.region, self.region],
            offset: 0,
            len: self.weight.len(),
        }];
        if let Some(b) = &self.bias {
            parts.push(ParamPart {
                suffix: "bias",
                shape: vec![self.channels],
                offset: self.weight.len(),
                len: b.len(),
            });
        }
        parts
    }
}

/// Full (cross-channel) square convolution: `(out_channels, in_channels, r, r)`.
/// Used by the non-depthwise operator variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FullKernel {
    pub in_channels: usize,
    pub out_channels: usize,
    pub region: usize,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl FullKernel {
    pub fn zeros(in_channels: usize, out_channels: usize, region: usize, with_bias: bool) -> Result<Self> {
        if region.is_multiple_of(2) || region == 0 {
            return Err(Error::invalid_argument(format!(
                "full-conv region size must be odd and >= 1, got {region}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid_argument("full-conv kernel needs >= 1 channel"));
        }
        Ok(FullKernel {
            in_channels,
            out_channels,
            region,
            weight: vec![0.0; out_channels * in_channels * region * region],
            bias: if with_bias { Some(vec![0.0; out_channels]) } else { None },
        })
    }

    #[inline]
    pub fn w(&self, co: usize, ci: usize, u: usize, v: usize) -> f64 {
        self.weight[((co * self.in_channels + ci) * self.region + u) * self.region + v]
    }

    #[inline]
    pub fn pad(&self) -> usize {
        (self.region - 1) / 2
    }
}

impl FlatParam for FullKernel {
    fn flat_len(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn copy_to_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.weight);
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
    }

    fn write_from_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.flat_len());
        let nw = self.weight.len();
        self.weight.copy_from_slice(&src[..nw]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&src[nw..]);
        }
    }

    fn parts(&self) -> Vec<ParamPart> {
        let mut parts = vec![ParamPart {
            suffix: "weight",
            shape: vec![self.out_channels, self.in_channels, self.region, self.region],
            offset: 0,
            len: self.weight.len(),
        }];
        if let Some(b) = &self.bias {
            parts.push(ParamPart {
                suffix: "bias",
                shape: vec![self.out_channels],
                offset: self.weight.len(),
                len: b.len(),
            });
        }
        parts
    }
}

/// Per-channel affine applied after normalization: `y = gamma * x_hat + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAffine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl NormAffine {
    /// gamma = 1, beta = 0: the normalization identity affine.
    pub fn unit(channels: usize) -> Self {
        NormAffine {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl FlatParam for NormAffine {
    fn flat_len(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    fn copy_to_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.beta);
    }

    fn write_from_flat(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.flat_len());
        let ng = self.gamma.len();
        self.gamma.copy_from_slice(&src[..ng]);
        self.beta.copy_from_slice(&src[ng..]);
    }

    fn parts(&self) -> Vec<ParamPart> {
        vec![
            ParamPart {
                suffix: "gamma",
                shape: vec![self.gamma.len()],
                offset: 0,
                len: self.gamma.len(),
            },
            ParamPart {
                suffix: "beta",
                shape: vec![self.beta.len()],
                offset: self.gamma.len(),
                len: self.beta.len(),
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_flat_roundtrip() {
        let mut w = LinearWeights::zeros(2, 3);
        w.weight = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        w.bias = vec![7.0, 8.0, 9.0];
        let flat = w.to_flat();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut w2 = LinearWeights::zeros(2, 3);
        w2.write_from_flat(&flat);
        assert_eq!(w, w2);
    }

    #[test]
    fn depthwise_requires_odd_region() {
        assert!(DepthwiseKernel::zeros(3, 2, true).is_err());
        assert!(DepthwiseKernel::zeros(3, 3, true).is_ok());
    }

    #[test]
    fn delta_kernel_center_tap() {
        let k = DepthwiseKernel::delta(2, 3).unwrap();
        assert_eq!(k.w(0, 1, 1), 1.0);
        assert_eq!(k.w(0, 0, 0), 0.0);
        assert_eq!(k.w(1, 1, 1), 1.0);
    }

    #[test]
    fn parts_cover_flat_exactly() {
        let k = DepthwiseKernel::zeros(4, 5, true).unwrap();
        let parts = k.parts();
        let total: usize = parts.iter().map(|p| p.len).sum();
        assert_eq!(total, k.flat_len());
        assert_eq!(parts[1].offset, parts[0].len);
    }
}
