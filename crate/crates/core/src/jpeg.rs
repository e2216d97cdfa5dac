//! JPEG degradation simulator.
//!
//! Reproduces the distortion of baseline JPEG at a given quality factor —
//! color conversion, optional 4:2:0 chroma averaging, blockwise DCT,
//! quantize/dequantize — without entropy coding, so the output is the
//! decompressed image the real codec would produce, bit-exactly and fast.
//! Quality-factor table scaling follows the IJG convention.

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tensor::{Scalar, Tensor};
use std::sync::OnceLock;

/// JPEG quality factor, 1 (harshest) to 100 (near lossless).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct QualityFactor(u8);

impl QualityFactor {
    pub fn new(value: u8) -> Result<Self> {
        if (1..=100).contains(&value) {
            Ok(QualityFactor(value))
        } else {
            Err(Error::domain(format!(
                "quality factor {} outside [1,100]",
                value
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

/// Chroma subsampling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Subsampling {
    /// 4:4:4, full-resolution chroma.
    S444,
    /// 4:2:0, chroma averaged 2×2.
    S420,
}

impl std::str::FromStr for Subsampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "444" => Ok(Subsampling::S444),
            "420" => Ok(Subsampling::S420),
            other => Err(Error::domain(format!(
                "subsampling must be 444 or 420, got {other}"
            ))),
        }
    }
}

/// 8×8 quantization table, entries in [1,255].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTable {
    entries: [u16; 64],
}

impl QuantTable {
    pub fn new(entries: [u16; 64]) -> Result<Self> {
        if entries.iter().any(|&e| !(1..=255).contains(&e)) {
            return Err(Error::domain("quant table entries must lie in [1,255]"));
        }
        Ok(QuantTable { entries })
    }

    pub fn entries(&self) -> &[u16; 64] {
        &self.entries
    }

    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.entries[row * 8 + col]
    }
}

/// ITU-T T.81 Annex K luminance reference table (row-major).
pub const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// ITU-T T.81 Annex K chrominance reference table (row-major).
pub const ANNEX_K_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

pub fn luma_base_table() -> QuantTable {
    QuantTable::new(ANNEX_K_LUMA).unwrap()
}

pub fn chroma_base_table() -> QuantTable {
    QuantTable::new(ANNEX_K_CHROMA).unwrap()
}

/// Scales a reference table by quality factor, IJG style:
/// `scale = 5000/qf` below 50 else `200 − 2·qf`, then
/// `entry' = clamp(⌊(entry·scale + 50)/100⌋, 1, 255)` in integer arithmetic.
pub fn scale_quant_table(base: &QuantTable, qf: QualityFactor) -> QuantTable {
    let q = qf.value() as u32;
    let scale: u32 = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut entries = [0u16; 64];
    for (out, &e) in entries.iter_mut().zip(base.entries.iter()) {
        let scaled = (e as u32 * scale + 50) / 100;
        *out = scaled.clamp(1, 255) as u16;
    }
    QuantTable { entries }
}

fn dct_matrix() -> &'static [f64; 64] {
    static M: OnceLock<[f64; 64]> = OnceLock::new();
    M.get_or_init(|| {
        let mut m = [0.0; 64];
        for k in 0..8 {
            let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
            for n in 0..8 {
                m[k * 8 + n] =
                    c * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D type-II DCT of a level-shifted 8×8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    // tmp = M · block
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += m[i * 8 + k] * block[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    // out = tmp · Mᵀ
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * m[j * 8 + k];
            }
            out[i * 8 + j] = acc;
        }
    }
    out
}

/// Inverse of [`dct8x8`]; round trip is identity to ~1e-10.
pub fn idct8x8(coeffs: &[f64; 64]) -> [f64; 64] {
    let m = dct_matrix();
    // tmp = Mᵀ · coeffs
    let mut tmp = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += m[k * 8 + i] * coeffs[k * 8 + j];
            }
            tmp[i * 8 + j] = acc;
        }
    }
    // out = tmp · M
    let mut out = [0.0; 64];
    for i in 0..8 {
        for j in 0..8 {
            let mut acc = 0.0;
            for k in 0..8 {
                acc += tmp[i * 8 + k] * m[k * 8 + j];
            }
            out[i * 8 + j] = acc;
        }
    }
    out
}

const CBCR_OFFSET: f64 = 128.0 / 255.0;

/// JFIF full-range RGB → YCbCr, channels clamped to [0,1].
pub fn rgb_to_ycbcr<F: Scalar>(img: &ImageTensor<F>) -> ImageTensor<F> {
    convert_color(img, |r, g, b| {
        let y = 0.299 * r + 0.587 * g + 0.114 * b;
        let cb = -0.168_735_891_6 * r - 0.331_264_108_4 * g + 0.5 * b + CBCR_OFFSET;
        let cr = 0.5 * r - 0.418_687_589_2 * g - 0.081_312_410_8 * b + CBCR_OFFSET;
        (y, cb, cr)
    })
}

/// Inverse of [`rgb_to_ycbcr`]; round trip error ≤ 2/255 per channel.
pub fn ycbcr_to_rgb<F: Scalar>(img: &ImageTensor<F>) -> ImageTensor<F> {
    convert_color(img, |y, cb, cr| {
        let cb = cb - CBCR_OFFSET;
        let cr = cr - CBCR_OFFSET;
        let r = y + 1.402 * cr;
        let g = y - 0.344_136_285_0 * cb - 0.714_136_285_0 * cr;
        let b = y + 1.772 * cb;
        (r, g, b)
    })
}

fn convert_color<F: Scalar>(
    img: &ImageTensor<F>,
    f: impl Fn(f64, f64, f64) -> (f64, f64, f64),
) -> ImageTensor<F> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![F::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (a, b, c) = f(
                img.get(0, y, x).to_f64c(),
                img.get(1, y, x).to_f64c(),
                img.get(2, y, x).to_f64c(),
            );
            data[y * w + x] = F::from_f64c(a.clamp(0.0, 1.0));
            data[(h + y) * w + x] = F::from_f64c(b.clamp(0.0, 1.0));
            data[(2 * h + y) * w + x] = F::from_f64c(c.clamp(0.0, 1.0));
        }
    }
    ImageTensor::new(Tensor::from_vec(&[3, h, w], data).unwrap()).unwrap()
}

/// Quantize/dequantize every 8×8 block of one plane in place.
fn degrade_plane(plane: &mut [f64], h: usize, w: usize, table: &QuantTable) {
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut block = [0.0f64; 64];
            for dy in 0..8 {
                for dx in 0..8 {
                    block[dy * 8 + dx] = plane[(by + dy) * w + bx + dx] * 255.0 - 128.0;
                }
            }
            let mut coeffs = dct8x8(&block);
            for (c, &q) in coeffs.iter_mut().zip(table.entries.iter()) {
                let q = q as f64;
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coeffs);
            for dy in 0..8 {
                for dx in 0..8 {
                    plane[(by + dy) * w + bx + dx] = (rec[dy * 8 + dx] + 128.0) / 255.0;
                }
            }
        }
    }
}

fn downsample2x(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (hh, hw) = (h / 2, w / 2);
    let mut out = vec![0.0; hh * hw];
    for y in 0..hh {
        for x in 0..hw {
            let s = plane[2 * y * w + 2 * x]
                + plane[2 * y * w + 2 * x + 1]
                + plane[(2 * y + 1) * w + 2 * x]
                + plane[(2 * y + 1) * w + 2 * x + 1];
            out[y * hw + x] = s * 0.25;
        }
    }
    out
}

fn upsample2x(plane: &[f64], hh: usize, hw: usize) -> Vec<f64> {
    let (h, w) = (hh * 2, hw * 2);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = plane[(y / 2) * hw + x / 2];
        }
    }
    out
}

/// Simulates JPEG compression at quality factor `qf`.
///
/// Deterministic: the same `(img, qf, subsampling)` always yields the
/// identical output.
pub fn degrade<F: Scalar>(
    img: &ImageTensor<F>,
    qf: QualityFactor,
    subsampling: Subsampling,
) -> ImageTensor<F> {
    let (h, w) = (img.height(), img.width());
    let luma_table = scale_quant_table(&luma_base_table(), qf);
    let chroma_table = scale_quant_table(&chroma_base_table(), qf);

    let ycbcr = rgb_to_ycbcr(img);
    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            (0..h * w)
                .map(|i| ycbcr.tensor().data()[c * h * w + i].to_f64c())
                .collect()
        })
        .collect();

    degrade_plane(&mut planes[0], h, w, &luma_table);
    for plane in planes.iter_mut().skip(1) {
        match subsampling {
            Subsampling::S444 => degrade_plane(plane, h, w, &chroma_table),
            Subsampling::S420 => {
                let mut half = downsample2x(plane, h, w);
                degrade_plane(&mut half, h / 2, w / 2, &chroma_table);
                *plane = upsample2x(&half, h / 2, w / 2);
            }
        }
    }

    let mut data = vec![F::zero(); 3 * h * w];
    for (c, plane) in planes.iter().enumerate() {
        for (i, &v) in plane.iter().enumerate() {
            data[c * h * w + i] = F::from_f64c(v.clamp(0.0, 1.0));
        }
    }
    let rec = ImageTensor::new(Tensor::from_vec(&[3, h, w], data).unwrap()).unwrap();
    ycbcr_to_rgb(&rec)
}
