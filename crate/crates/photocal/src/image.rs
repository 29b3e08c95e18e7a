//! 8-bit grayscale image container and per-frame metadata.

use crate::scalar::Scalar;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        assert_eq!(data.len(), width * height, "pixel count mismatch");
        GrayImage {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Image center in pixel coordinates, `((w-1)/2, (h-1)/2)`.
    pub fn center<S: Scalar>(&self) -> (S, S) {
        (
            S::cast((self.width as f64 - 1.0) / 2.0),
            S::cast((self.height as f64 - 1.0) / 2.0),
        )
    }

    /// Distance from the image center to the farthest corner, used to
    /// normalize pixel radii to `[0, 1]`.
    pub fn corner_radius<S: Scalar>(&self) -> S {
        corner_radius(self.width, self.height)
    }
}

/// Distance from the center of a `width x height` image to its farthest corner.
pub fn corner_radius<S: Scalar>(width: usize, height: usize) -> S {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    S::cast((cx * cx + cy * cy).sqrt())
}

/// One video frame: grayscale pixels plus sequence metadata.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Position in the loaded sequence, starting at 0.
    pub index: usize,
    pub image: GrayImage,
    /// Ground-truth exposure time in milliseconds, when the dataset provides one.
    pub gt_exposure: Option<f64>,
}

impl Frame {
    pub fn new(index: usize, image: GrayImage) -> Self {
        Frame {
            index,
            image,
            gt_exposure: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_and_radius() {
        let img = GrayImage::filled(320, 240, 0);
        let (cx, cy): (f64, f64) = img.center();
        assert_eq!(cx, 159.5);
        assert_eq!(cy, 119.5);
        let r: f64 = img.corner_radius();
        assert!((r - (159.5f64 * 159.5 + 119.5 * 119.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    #[should_panic]
    fn size_mismatch_panics() {
        let _ = GrayImage::new(4, 4, vec![0; 15]);
    }
}
