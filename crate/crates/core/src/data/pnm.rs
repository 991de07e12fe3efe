//! Minimal binary PPM (P6) / PGM (P5) codec, 8-bit maxval 255.

use super::DataError;
use std::path::Path;

fn fmt_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

pub fn encode_ppm(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(gray: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Header tokens separated by whitespace, `#` comments allowed.
fn parse_header(bytes: &[u8], path: &Path, magic: &str) -> Result<(usize, usize, usize), DataError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(fmt_err(path, format!("not a {magic} file")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(fmt_err(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| fmt_err(path, "bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {}", fields[2])));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(fmt_err(path, "missing header terminator"));
    }
    pos += 1; // single whitespace after maxval
    Ok((fields[0], fields[1], pos))
}

/// Decode a P6 file to `(width, height, interleaved RGB)`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let (w, h, data_start) = parse_header(bytes, path, "P6")?;
    let need = 3 * w * h;
    let data = bytes
        .get(data_start..data_start + need)
        .ok_or_else(|| fmt_err(path, format!("expected {need} pixel bytes")))?;
    Ok((w, h, data.to_vec()))
}

/// Decode a P5 file to `(width, height, gray)`.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let (w, h, data_start) = parse_header(bytes, path, "P5")?;
    let need = w * h;
    let data = bytes
        .get(data_start..data_start + need)
        .ok_or_else(|| fmt_err(path, format!("expected {need} pixel bytes")))?;
    Ok((w, h, data.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("test.pnm")
    }

    #[test]
    fn ppm_round_trip() {
        let rgb: Vec<u8> = (0..3 * 4 * 2).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_ppm(&rgb, 4, 2);
        let (w, h, data) = decode_ppm(&bytes, &p()).unwrap();
        assert_eq!((w, h), (4, 2));
        assert_eq!(data, rgb);
    }

    #[test]
    fn pgm_round_trip() {
        let gray: Vec<u8> = (0..5 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let bytes = encode_pgm(&gray, 5, 3);
        let (w, h, data) = decode_pgm(&bytes, &p()).unwrap();
        assert_eq!((w, h), (5, 3));
        assert_eq!(data, gray);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# a comment\n2 2\n# more\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let (w, h, data) = decode_pgm(&bytes, &p()).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let bytes = encode_pgm(&[0; 4], 2, 2);
        let err = decode_ppm(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("not a P6 file"), "{err}");
    }

    #[test]
    fn truncated_pixels_are_rejected() {
        let mut bytes = encode_ppm(&vec![0; 3 * 4 * 4], 4, 4);
        bytes.truncate(bytes.len() - 5);
        assert!(decode_ppm(&bytes, &p()).is_err());
    }

    #[test]
    fn bad_maxval_is_rejected() {
        let bytes = b"P5\n2 2\n65535\n".to_vec();
        let err = decode_pgm(&bytes, &p()).unwrap_err();
        assert!(err.to_string().contains("maxval"), "{err}");
    }

    #[test]
    fn truncated_header_is_rejected() {
        assert!(decode_pgm(b"P5\n2 ", &p()).is_err());
    }
}
