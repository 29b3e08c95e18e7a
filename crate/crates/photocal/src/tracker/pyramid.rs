//! Float image pyramid with cached gradient images.

use crate::image::GrayImage;
use crate::scalar::Scalar;

/// Row-major float image with bilinear sampling.
#[derive(Debug, Clone)]
pub struct ImageF<S: Scalar> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> ImageF<S> {
    pub fn from_gray(img: &GrayImage) -> Self {
        ImageF {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| S::cast(v as f64)).collect(),
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), width * height);
        ImageF {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> S {
        self.data[y * self.width + x]
    }

    /// Bilinear sample; caller keeps `(x, y)` inside `[0, w-1] x [0, h-1]`.
    #[inline]
    pub fn sample(&self, x: S, y: S) -> S {
        let xf = x.floor();
        let yf = y.floor();
        let mut ix = xf.to_usize().unwrap_or(0);
        let mut iy = yf.to_usize().unwrap_or(0);
        if ix >= self.width - 1 {
            ix = self.width - 2;
        }
        if iy >= self.height - 1 {
            iy = self.height - 2;
        }
        let fx = x - S::cast(ix as f64);
        let fy = y - S::cast(iy as f64);
        let i = iy * self.width + ix;
        let top = self.data[i] + fx * (self.data[i + 1] - self.data[i]);
        let bot = self.data[i + self.width]
            + fx * (self.data[i + self.width + 1] - self.data[i + self.width]);
        top + fy * (bot - top)
    }
}

/// One pyramid level: intensities plus central-difference gradients.
#[derive(Debug, Clone)]
pub struct PyramidLevel<S: Scalar> {
    pub image: ImageF<S>,
    pub gx: ImageF<S>,
    pub gy: ImageF<S>,
}

impl<S: Scalar> PyramidLevel<S> {
    fn from_image(image: ImageF<S>) -> Self {
        let (w, h) = (image.width, image.height);
        let mut gx = vec![S::zero(); w * h];
        let mut gy = vec![S::zero(); w * h];
        let half = S::cast(0.5);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                gx[i] = if x == 0 {
                    image.get(1, y) - image.get(0, y)
                } else if x == w - 1 {
                    image.get(w - 1, y) - image.get(w - 2, y)
                } else {
                    (image.get(x + 1, y) - image.get(x - 1, y)) * half
                };
                gy[i] = if y == 0 {
                    image.get(x, 1) - image.get(x, 0)
                } else if y == h - 1 {
                    image.get(x, h - 1) - image.get(x, h - 2)
                } else {
                    (image.get(x, y + 1) - image.get(x, y - 1)) * half
                };
            }
        }
        PyramidLevel {
            gx: ImageF::from_data(w, h, gx),
            gy: ImageF::from_data(w, h, gy),
            image,
        }
    }
}

/// Image pyramid, factor 2 per level, 5-tap binomial smoothing before each
/// decimation.
#[derive(Debug, Clone)]
pub struct Pyramid<S: Scalar> {
    levels: Vec<PyramidLevel<S>>,
}

impl<S: Scalar> Pyramid<S> {
    pub fn build(img: &GrayImage, levels: usize, min_dim: usize) -> Self {
        assert!(levels >= 1);
        let mut out = Vec::with_capacity(levels);
        let mut current = ImageF::from_gray(img);
        for level in 0..levels {
            let next = if level + 1 < levels
                && current.width / 2 >= min_dim
                && current.height / 2 >= min_dim
            {
                Some(downsample(&current))
            } else {
                None
            };
            out.push(PyramidLevel::from_image(current));
            match next {
                Some(n) => current = n,
                None => break,
            }
        }
        Pyramid { levels: out }
    }

    pub fn levels(&self) -> &[PyramidLevel<S>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &PyramidLevel<S> {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &PyramidLevel<S> {
        &self.levels[0]
    }
}

/// Binomial [1 4 6 4 1]/16 blur (replicated borders), then take every second
/// pixel.
fn downsample<S: Scalar>(img: &ImageF<S>) -> ImageF<S> {
    let (w, h) = (img.width, img.height);
    let kernel = [
        S::cast(1.0 / 16.0),
        S::cast(4.0 / 16.0),
        S::cast(6.0 / 16.0),
        S::cast(4.0 / 16.0),
        S::cast(1.0 / 16.0),
    ];

    let mut tmp = vec![S::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            for (k, coef) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - 2).clamp(0, w as isize - 1) as usize;
                acc += *coef * img.get(xx, y);
            }
            tmp[y * w + x] = acc;
        }
    }

    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![S::zero(); ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let x = ox * 2;
            let mut acc = S::zero();
            for (k, coef) in kernel.iter().enumerate() {
                let yy = (oy as isize * 2 + k as isize - 2).clamp(0, h as isize - 1) as usize;
                acc += *coef * tmp[yy * w + x];
            }
            out[oy * ow + ox] = acc;
        }
    }
    ImageF::from_data(ow, oh, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_dims_halve() {
        let img = GrayImage::filled(128, 96, 100);
        let pyr: Pyramid<f64> = Pyramid::build(&img, 4, 8);
        assert_eq!(pyr.num_levels(), 4);
        assert_eq!(pyr.level(0).image.width, 128);
        assert_eq!(pyr.level(3).image.width, 16);
        assert_eq!(pyr.level(3).image.height, 12);
        // Constant image stays constant through the blur.
        assert!((pyr.level(3).image.get(4, 4) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bilinear_sampling_interpolates() {
        let img = ImageF::<f64>::from_data(2, 2, vec![0.0, 10.0, 20.0, 30.0]);
        assert!((img.sample(0.5, 0.0) - 5.0).abs() < 1e-12);
        assert!((img.sample(0.0, 0.5) - 10.0).abs() < 1e-12);
        assert!((img.sample(0.5, 0.5) - 15.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_of_ramp() {
        // I(x, y) = 2x: central-difference x-gradient is 2 in the interior.
        let mut data = Vec::new();
        for _y in 0..8 {
            for x in 0..8 {
                data.push(2.0 * x as f64);
            }
        }
        let level = PyramidLevel::from_image(ImageF::from_data(8, 8, data));
        assert!((level.gx.get(4, 4) - 2.0).abs() < 1e-12);
        assert!(level.gy.get(4, 4).abs() < 1e-12);
    }
}
