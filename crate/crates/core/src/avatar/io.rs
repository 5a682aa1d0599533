//! Point-cloud text files and binary PNM images.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::body::PartId;
use super::surface::LabeledCloud;
use super::AvatarError;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AvatarError + '_ {
    move |source| AvatarError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> AvatarError {
    AvatarError::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Writes `PCP 1 <V>` followed by one `x y z part_id` line per vertex.
pub fn write_pcp(path: &Path, cloud: &LabeledCloud) -> Result<(), AvatarError> {
    let mut s = format!("PCP 1 {}\n", cloud.len());
    for (p, part) in cloud.points.iter().zip(&cloud.parts) {
        s.push_str(&format!("{:.6} {:.6} {:.6} {}\n", p[0], p[1], p[2], part.index()));
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_pcp(path: &Path) -> Result<LabeledCloud, AvatarError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(path, 1, "empty file"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "PCP" || fields[1] != "1" {
        return Err(format_err(path, 1, format!("bad header `{header}`")));
    }
    let n: usize = fields[2]
        .parse()
        .map_err(|_| format_err(path, 1, format!("bad vertex count `{}`", fields[2])))?;
    let mut cloud = LabeledCloud {
        points: Vec::with_capacity(n),
        parts: Vec::with_capacity(n),
    };
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(format_err(path, lineno, "expected `x y z part_id`"));
        }
        let mut xyz = [0.0; 3];
        for k in 0..3 {
            xyz[k] = f[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, lineno, format!("bad coordinate `{}`", f[k])))?;
        }
        let part = f[3]
            .parse::<u8>()
            .ok()
            .and_then(PartId::new)
            .ok_or_else(|| format_err(path, lineno, format!("bad part id `{}`", f[3])))?;
        cloud.points.push(xyz);
        cloud.parts.push(part);
    }
    if cloud.len() != n {
        return Err(format_err(path, 1, format!("header declares {n} vertices, found {}", cloud.len())));
    }
    Ok(cloud)
}

/// Raw 8-bit raster: `channels` is 1 (PGM) or 3 (PPM).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), AvatarError> {
    write_pnm(path, "P6", width, height, 3, rgb)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<(), AvatarError> {
    write_pnm(path, "P5", width, height, 1, gray)
}

fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, ch: usize, data: &[u8]) -> Result<(), AvatarError> {
    assert_eq!(data.len(), width * height * ch, "raster size mismatch");
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write!(f, "{magic}\n{width} {height}\n255\n")
        .and_then(|_| f.write_all(data))
        .map_err(io_err(path))
}

/// Reads a binary P5 or P6 file with maxval 255.
pub fn read_pnm(path: &Path) -> Result<Raster, AvatarError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, 1, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format_err(path, 1, format!("unsupported magic `{m}`"))),
    };
    let num = |t: &str| t.parse::<usize>().map_err(|_| format_err(path, 1, format!("bad header field `{t}`")));
    let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(format_err(path, 1, format!("maxval {maxval} is not 255")));
    }
    let len = width * height * channels;
    if bytes.len() < pos + len {
        return Err(format_err(path, 1, "truncated pixel data"));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: bytes[pos..pos + len].to_vec(),
    })
}
