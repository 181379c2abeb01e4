//! Binary PPM (P6, maxval 255) image reader/writer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::Image;

pub fn read_ppm_from(r: &mut impl Read) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::Parse {
            detail: format!("expected P6 PPM, got magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let width = parse_dim(&next_token(&bytes, &mut pos)?)?;
    let height = parse_dim(&next_token(&bytes, &mut pos)?)?;
    let maxval = parse_dim(&next_token(&bytes, &mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Parse {
            detail: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    // Exactly one whitespace byte separates the header from the payload.
    pos += 1;
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse {
            detail: format!(
                "payload too short: need {need} bytes for {width}×{height}, have {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    Image::new(width, height, bytes[pos..pos + need].to_vec())
}

/// Advances past whitespace and `#` comments, returning the next token.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse {
            detail: "unexpected end of PPM header".to_string(),
        });
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_dim(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            detail: format!("bad PPM header token {:?}", String::from_utf8_lossy(token)),
        })
}

pub fn write_ppm_to(w: &mut impl Write, img: &Image) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    read_ppm_from(&mut BufReader::new(File::open(path)?))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm_to(&mut w, img)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_comment() {
        let img = Image::new(2, 1, vec![10, 20, 30, 40, 50, 60]).unwrap();
        let mut buf = Vec::new();
        write_ppm_to(&mut buf, &img).unwrap();
        let back = read_ppm_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.pixels, img.pixels);

        let commented = b"P6\n# a comment\n2 1\n255\n\x0a\x14\x1e\x28\x32\x3c".to_vec();
        let back = read_ppm_from(&mut commented.as_slice()).unwrap();
        assert_eq!(back.width, 2);
        assert_eq!(back.pixels, img.pixels);
    }

    #[test]
    fn rejects_p3_and_wrong_maxval() {
        assert!(read_ppm_from(&mut &b"P3\n1 1\n255\n"[..]).is_err());
        assert!(read_ppm_from(&mut &b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00"[..]).is_err());
    }
}
