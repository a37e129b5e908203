//! Binary netpbm codecs: PPM (P6) images and PGM (P5) masks, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{MqError, Result};

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl Image8 {
    pub fn new(w: usize, h: usize) -> Self {
        Image8 {
            w,
            h,
            rgb: vec![0; w * h * 3],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let o = (y * self.w + x) * 3;
        self.rgb[o..o + 3].copy_from_slice(&c);
    }
}

fn header_tokens(data: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // magic, width, height, maxval, separated by whitespace; '#' comments
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < 4 && i < data.len() {
        match data[i] {
            b'#' => {
                while i < data.len() && data[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < data.len() && !data[i].is_ascii_whitespace() && data[i] != b'#' {
                    i += 1;
                }
                tokens.push(std::str::from_utf8(&data[start..i]).map_err(|_| {
                    MqError::Io(format!("{}: non-ascii header", path.display()))
                })?);
            }
        }
    }
    if tokens.len() < 4 || tokens[0] != magic {
        return Err(MqError::Io(format!(
            "{}: malformed {} header",
            path.display(),
            magic
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| MqError::Io(format!("{}: bad header number {s}", path.display())))
    };
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(MqError::Io(format!(
            "{}: unsupported maxval {maxval}",
            path.display()
        )));
    }
    if w == 0 || h == 0 {
        return Err(MqError::Io(format!("{}: zero-sized image", path.display())));
    }
    // payload starts after the single whitespace byte following maxval
    Ok((w, h, i + 1))
}

pub fn write_ppm(path: &Path, img: &Image8) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.extend_from_slice(&img.rgb);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image8> {
    let data = fs::read(path)?;
    let (w, h, start) = header_tokens(&data, "P6", path)?;
    let need = w * h * 3;
    if data.len() < start + need {
        return Err(MqError::Io(format!(
            "{}: truncated pixel data ({} < {need})",
            path.display(),
            data.len().saturating_sub(start)
        )));
    }
    Ok(Image8 {
        w,
        h,
        rgb: data[start..start + need].to_vec(),
    })
}

pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(MqError::InvalidDimension {
            op: "write_pgm",
            detail: format!("{} bytes for {w}x{h}", gray.len()),
        });
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let data = fs::read(path)?;
    let (w, h, start) = header_tokens(&data, "P5", path)?;
    let need = w * h;
    if data.len() < start + need {
        return Err(MqError::Io(format!("{}: truncated pixel data", path.display())));
    }
    Ok((w, h, data[start..start + need].to_vec()))
}
