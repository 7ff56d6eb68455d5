//! Binary PPM (P6) and PGM (P5) images with 8-bit samples.

use std::fs;
use std::io;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Interleaved samples, row-major.
    pub pixels: Vec<u8>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn encode(img: &RawImage) -> io::Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(bad(format!("unsupported channel count {c}"))),
    };
    if img.pixels.len() != img.width * img.height * img.channels {
        return Err(bad("pixel buffer does not match dimensions"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    Ok(out)
}

pub fn write(path: &Path, img: &RawImage) -> io::Result<()> {
    fs::write(path, encode(img)?)
}

pub fn decode(bytes: &[u8]) -> io::Result<RawImage> {
    let mut pos = 0;
    let mut token = || -> io::Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(format!("unsupported magic {m:?}, expected P5 or P6"))),
    };
    let mut num = || -> io::Result<usize> {
        token()?
            .parse()
            .map_err(|_| bad("malformed header number"))
    };
    let width = num()?;
    let height = num()?;
    let maxval = num()?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let len = width * height * channels;
    if width == 0 || height == 0 || bytes.len() < start + len {
        return Err(bad("raster shorter than header dimensions"));
    }
    Ok(RawImage {
        width,
        height,
        channels,
        pixels: bytes[start..start + len].to_vec(),
    })
}

pub fn read(path: &Path) -> io::Result<RawImage> {
    decode(&fs::read(path)?)
}
