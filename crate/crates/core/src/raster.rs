//! Raw RGB rasters and PNG conversion.

use thiserror::Error;

use crate::manifest::Rgb;

#[derive(Debug, Error)]
pub enum ImageDecodeError {
    #[error("not a decodable PNG: {0}")]
    Png(#[from] png::DecodingError),
    #[error("unsupported PNG layout: {0}")]
    Unsupported(String),
    #[error("image is empty")]
    Empty,
}

/// 8-bit RGB raster, rows top to bottom, no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (width > 0 && height > 0 && data.len() == width as usize * height as usize * 3).then_some(
            RgbImage {
                width,
                height,
                data,
            },
        )
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        let data = color.0.repeat(width as usize * height as usize);
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        Rgb([self.data[i], self.data[i + 1], self.data[i + 2]])
    }

    pub fn put_pixel(&mut self, x: u32, y: u32, color: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color.0);
    }

    /// Fills the half-open pixel rectangle `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.put_pixel(x, y, color);
            }
        }
    }
}

/// Decodes an 8-bit PNG into RGB. Grayscale is expanded, alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ImageDecodeError> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or(ImageDecodeError::Empty)?];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width, info.height);
    if w == 0 || h == 0 {
        return Err(ImageDecodeError::Empty);
    }
    let px = w as usize * h as usize;
    let src = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => src.to_vec(),
        png::ColorType::Rgba => src
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => src.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => src
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        other => return Err(ImageDecodeError::Unsupported(format!("{other:?}"))),
    };
    if data.len() != px * 3 {
        return Err(ImageDecodeError::Unsupported(
            "unexpected buffer size".into(),
        ));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Encodes an RGB raster as an 8-bit PNG.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, image.width, image.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        // writing into a Vec cannot fail once the header is consistent
        let mut writer = encoder.write_header().expect("png header");
        writer.write_image_data(&image.data).expect("png data");
    }
    out
}
