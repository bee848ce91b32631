use crate::error::{Error, Result};

/// Planar (channel-major) image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(channels: usize, height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamped(mut self) -> Self {
        self.clamp_in_place();
        self
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Sub-image of `h x w` pixels starting at row `y0`, column `x0`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Image::from_fn(self.channels, h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    /// Centered crop to the largest size divisible by `m` in both axes.
    pub fn crop_to_multiple(&self, m: usize) -> Result<Image> {
        let h = self.height - self.height % m;
        let w = self.width - self.width % m;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("{}x{} smaller than {m}", self.height, self.width)));
        }
        self.crop((self.height - h) / 2, (self.width - w) / 2, h, w)
    }

    /// Reflect-pads `ph` rows and `pw` columns on each side.
    pub fn reflect_pad(&self, ph: usize, pw: usize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        Image::from_fn(self.channels, self.height + 2 * ph, self.width + 2 * pw, |c, y, x| {
            let sy = reflect(y as isize - ph as isize, h);
            let sx = reflect(x as isize - pw as isize, w);
            self.get(c, sy, sx)
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Image {
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    /// Transpose of rows and columns.
    pub fn transpose(&self) -> Image {
        Image::from_fn(self.channels, self.width, self.height, |c, y, x| self.get(c, x, y))
    }

    /// Values quantized to 8 bits, `round(255 x)` after clamping.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| quantize_u8(v) as f32 / 255.0).collect();
        Image { data, ..*self }
    }
}

pub fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Whole-sample reflection (`d c b | a b c d | c b a`) of an index into `0..n`.
#[inline]
pub fn reflect(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}
