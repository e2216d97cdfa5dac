//! Planar RGB images in `[0,1]` and the geometry helpers shared by the
//! dataset pipeline, the CLI, and the service.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::path::Path;

/// Block/subsampling alignment required of every image entering the pipeline.
pub const DIM_MULTIPLE: usize = 16;

/// A `3×H×W` image with values in `[0,1]`, H and W divisible by 16.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<F> {
    tensor: Tensor<F>,
}

impl<F: Scalar> ImageTensor<F> {
    /// Validates shape, range and finiteness.
    pub fn new(tensor: Tensor<F>) -> Result<Self> {
        if tensor.rank() != 3 || tensor.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "image must be 3×H×W, got {:?}",
                tensor.shape()
            )));
        }
        let (_, h, w) = tensor.dims3();
        if h == 0 || w == 0 || h % DIM_MULTIPLE != 0 || w % DIM_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "image dims {}×{} must be nonzero multiples of {}",
                h, w, DIM_MULTIPLE
            )));
        }
        if !tensor.all_finite() {
            return Err(Error::numeric("image contains non-finite values"));
        }
        let one = F::one();
        if tensor.data().iter().any(|&v| v < F::zero() || v > one) {
            return Err(Error::domain("image values must lie in [0,1]"));
        }
        Ok(ImageTensor { tensor })
    }

    /// Clamps into `[0,1]` before validating; for network outputs.
    pub fn from_tensor_clamped(tensor: Tensor<F>) -> Result<Self> {
        let clamped = tensor.map(|v| v.max(F::zero()).min(F::one()));
        ImageTensor::new(clamped)
    }

    pub fn filled(height: usize, width: usize, value: F) -> Result<Self> {
        ImageTensor::new(Tensor::filled(&[3, height, width], value))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> F {
        self.tensor.at3(c, y, x)
    }

    /// Converts from 8-bit RGB; dims must already be 16-aligned.
    pub fn from_rgb8(rgb: &image::RgbImage) -> Result<Self> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let scale = F::from_f64c(1.0 / 255.0);
        let mut data = vec![F::zero(); 3 * h * w];
        for (x, y, px) in rgb.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                data[(c * h + y) * w + x] = F::from_f64c(px.0[c] as f64) * scale;
            }
        }
        ImageTensor::new(Tensor::from_vec(&[3, h, w], data)?)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        let mut out = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    let v = self.get(c, y, x).to_f64c() * 255.0;
                    v.round().clamp(0.0, 255.0) as u8
                });
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// Decodes an image file into raw 8-bit RGB without any alignment demands.
pub fn decode_rgb8(path: &Path) -> Result<image::RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Center square crop followed by bilinear resize to `size×size`.
pub fn crop_resize_square<F: Scalar>(rgb: &image::RgbImage, size: usize) -> Result<ImageTensor<F>> {
    if size == 0 || size % DIM_MULTIPLE != 0 {
        return Err(Error::shape(format!(
            "target size {} must be a nonzero multiple of {}",
            size, DIM_MULTIPLE
        )));
    }
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::data("empty image"));
    }
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;

    let mut data = vec![F::zero(); 3 * size * size];
    let scale = side as f64 / size as f64;
    for y in 0..size {
        // Pixel-center sampling into the cropped square.
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y1 = sy.floor() as usize;
        let y2 = (y1 + 1).min(side - 1);
        let fy = sy - y1 as f64;
        for x in 0..size {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x1 = sx.floor() as usize;
            let x2 = (x1 + 1).min(side - 1);
            let fx = sx - x1 as f64;
            for c in 0..3 {
                let p = |yy: usize, xx: usize| {
                    rgb.get_pixel((x0 + xx) as u32, (y0 + yy) as u32).0[c] as f64 / 255.0
                };
                let top = p(y1, x1) * (1.0 - fx) + p(y1, x2) * fx;
                let bot = p(y2, x1) * (1.0 - fx) + p(y2, x2) * fx;
                data[(c * size + y) * size + x] = F::from_f64c(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[3, size, size], data)?)
}

/// Mirrors the image left-right.
pub fn flip_horizontal<F: Scalar>(img: &ImageTensor<F>) -> ImageTensor<F> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![F::zero(); 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                data[(c * h + y) * w + x] = img.get(c, y, w - 1 - x);
            }
        }
    }
    ImageTensor::new(Tensor::from_vec(&[3, h, w], data).unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(ImageTensor::<f32>::filled(15, 16, 0.5).is_err());
        assert!(ImageTensor::<f32>::filled(16, 16, 0.5).is_ok());
    }

    #[test]
    fn rejects_out_of_range() {
        let t = Tensor::<f32>::filled(&[3, 16, 16], 1.5);
        assert!(ImageTensor::new(t.clone()).is_err());
        assert!(ImageTensor::from_tensor_clamped(t).is_ok());
    }

    #[test]
    fn rgb8_round_trip() {
        let mut rgb = image::RgbImage::new(16, 16);
        for (i, px) in rgb.pixels_mut().enumerate() {
            *px = image::Rgb([(i % 256) as u8, (i * 7 % 256) as u8, (i * 13 % 256) as u8]);
        }
        let img = ImageTensor::<f64>::from_rgb8(&rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
    }

    #[test]
    fn crop_resize_shapes() {
        let rgb = image::RgbImage::from_pixel(320, 240, image::Rgb([100, 150, 200]));
        let img: ImageTensor<f64> = crop_resize_square(&rgb, 64).unwrap();
        assert_eq!((img.height(), img.width()), (64, 64));
        // Constant image stays constant under bilinear sampling.
        assert!((img.get(1, 10, 10) - 150.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn flip_is_involution() {
        let rgb = image::RgbImage::from_fn(16, 16, |x, y| {
            image::Rgb([(x * 16) as u8, (y * 16) as u8, 7])
        });
        let img = ImageTensor::<f64>::from_rgb8(&rgb).unwrap();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert!((flip_horizontal(&img).get(0, 0, 0) - img.get(0, 0, 15)).abs() < 1e-12);
    }
}
