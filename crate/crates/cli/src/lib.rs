//! Library surface of the CLI: command implementations and the HTTP
//! service, exposed for integration tests.

pub mod commands;
pub mod service;

/// Pads an image by edge replication to the next multiple of 16 per side,
/// runs `f` on it, and crops the result back to the original dimensions.
/// Lets arbitrarily sized inputs flow through the 16-aligned pipeline while
/// preserving their dimensions.
pub fn with_aligned<F>(
    rgb: &image::RgbImage,
    f: F,
) -> deblock_core::Result<image::RgbImage>
where
    F: FnOnce(&deblock_core::ImageTensor<f32>) -> deblock_core::Result<deblock_core::ImageTensor<f32>>,
{
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w == 0 || h == 0 {
        return Err(deblock_core::Error::data("empty image"));
    }
    let pad_to = |n: usize| n.div_ceil(16) * 16;
    let (pw, ph) = (pad_to(w), pad_to(h));
    let padded = image::RgbImage::from_fn(pw as u32, ph as u32, |x, y| {
        *rgb.get_pixel(x.min(rgb.width() - 1), y.min(rgb.height() - 1))
    });
    let tensor = deblock_core::ImageTensor::<f32>::from_rgb8(&padded)?;
    let out = f(&tensor)?;
    let full = out.to_rgb8();
    let mut cropped = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h as u32 {
        for x in 0..w as u32 {
            cropped.put_pixel(x, y, *full.get_pixel(x, y));
        }
    }
    Ok(cropped)
}
