use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("image dimensions must be positive, got {height}×{width}")]
    EmptyDimensions { height: usize, width: usize },
    #[error("{height}×{width} image needs {} pixels, got {len}", height * width)]
    PixelCount { height: usize, width: usize, len: usize },
    #[error("pixel {index} = {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Resolution of stored intensities. Pixels are multiples of `1 / PIXEL_GRID`,
/// which makes `1 - p` exact and inversion an exact involution.
pub const PIXEL_GRID: f64 = 4_294_967_296.0;

fn snap(p: f64) -> f64 {
    (p * PIXEL_GRID).round() / PIXEL_GRID
}

/// Grayscale raster, row-major, intensities in `[0, 1]` stored on the
/// [`PIXEL_GRID`] lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyDimensions { height, width });
        }
        if pixels.len() != height * width {
            return Err(ImageError::PixelCount {
                height,
                width,
                len: pixels.len(),
            });
        }
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange { index, value });
        }
        let pixels = pixels.into_iter().map(snap).collect();
        Ok(Self { height, width, pixels })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// Non-finite values become 0.
    pub fn from_clamped(height: usize, width: usize, mut pixels: Vec<f64>) -> Self {
        assert!(height > 0 && width > 0 && pixels.len() == height * width);
        for p in &mut pixels {
            *p = if p.is_finite() { snap(p.clamp(0.0, 1.0)) } else { 0.0 };
        }
        Self { height, width, pixels }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_clamped(height, width, vec![0.0; height * width])
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(height, width, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// Rounds every pixel to the nearest of 256 levels.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&p| quantize8(p)).collect()
    }

    /// Snaps pixels onto the 8-bit grid `k / 255`.
    pub fn quantized8(&self) -> Self {
        let px = self.pixels.iter().map(|&p| f64::from(quantize8(p)) / 255.0).collect();
        Self::from_clamped(self.height, self.width, px)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_clamped(self.height, self.width, self.pixels.iter().map(|&p| f(p)).collect())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut px = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            px.extend(row.iter().rev());
        }
        Self {
            height: self.height,
            width: self.width,
            pixels: px,
        }
    }

    /// Bilinear sample at fractional `(y, x)`; taps outside the raster read 0.
    pub fn sample_bilinear(&self, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let tap = |yy: f64, xx: f64| {
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                0.0
            } else {
                self.pixels[yy as usize * self.width + xx as usize]
            }
        };
        let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1.0) * fx;
        let bottom = tap(y0 + 1.0, x0) * (1.0 - fx) + tap(y0 + 1.0, x0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with pixel-center alignment and edge clamping.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut px = Vec::with_capacity(height * width);
        for i in 0..height {
            let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = y - y0 as f64;
            for j in 0..width {
                let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = x - x0 as f64;
                let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x1) * fx;
                let bottom = self.get(y1, x0) * (1.0 - fx) + self.get(y1, x1) * fx;
                px.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        Self::from_clamped(height, width, px)
    }
}

pub(crate) fn quantize8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}
