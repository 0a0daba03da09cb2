//! Example pools: synthetic blobs, IDX image files and labeled CSV.

use std::path::Path;

use genagg_core::data::Dataset;
use genagg_core::rng::{self, tag};

use crate::config::{DataConfig, DataSource};
use crate::error::{Error, Result};

/// A labeled pool plus the `(channels, height, width)` shape its rows have
/// when viewed as images.
#[derive(Debug, Clone)]
pub struct Pool {
    pub data: Dataset,
    pub image: (usize, usize, usize),
}

pub fn load(cfg: &DataConfig, seed: u64) -> Result<Pool> {
    match cfg.source {
        DataSource::Blobs => {
            let data = cfg.blobs.generate(&mut rng::derive(seed, &[tag::DATA]))?;
            Ok(Pool {
                image: (1, 1, data.features()),
                data,
            })
        }
        DataSource::Idx => {
            let images = cfg.images.as_deref().expect("validated");
            let labels = cfg.labels.as_deref().expect("validated");
            load_idx(images, labels)
        }
        DataSource::Csv => {
            let path = cfg.path.as_deref().expect("validated");
            let data = load_csv(path, cfg.label_column.as_deref())?;
            let image = match cfg.image_shape {
                Some([c, h, w]) => {
                    if c * h * w != data.features() {
                        return Err(Error::Config(format!(
                            "data.image_shape {c}x{h}x{w} does not match {} features",
                            data.features()
                        )));
                    }
                    (c, h, w)
                }
                None => (1, 1, data.features()),
            };
            Ok(Pool { data, image })
        }
    }
}

/// Decoded IDX array: dimensions plus values as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
    /// Element type code from the header (0x08 = u8, ...).
    pub dtype: u8,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let bad = |d: String| Error::format("IDX file", d);
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(bad("missing magic".into()));
    }
    let dtype = bytes[2];
    let rank = bytes[3] as usize;
    let width = match dtype {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        t => return Err(bad(format!("unknown element type 0x{t:02x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != n * width {
        return Err(bad(format!("expected {} data bytes, found {}", n * width, body.len())));
    }
    let values = body
        .chunks_exact(width)
        .map(|c| match dtype {
            0x08 => c[0] as f64,
            0x09 => c[0] as i8 as f64,
            0x0B => i16::from_be_bytes([c[0], c[1]]) as f64,
            0x0C => i32::from_be_bytes(c.try_into().expect("4")) as f64,
            0x0D => f32::from_be_bytes(c.try_into().expect("4")) as f64,
            _ => f64::from_be_bytes(c.try_into().expect("8")),
        })
        .collect();
    Ok(IdxArray { dims, values, dtype })
}

/// Image file `[n, h, w]` or `[n, c, h, w]` plus a label file `[n]`.
/// Unsigned byte pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Pool> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    let image = match img.dims.as_slice() {
        [_, h, w] => (1, *h, *w),
        [_, c, h, w] => (*c, *h, *w),
        d => return Err(Error::format("IDX images", format!("expected rank 3 or 4, got {}", d.len()))),
    };
    let n = img.dims[0];
    if lab.dims != [n] {
        return Err(Error::format("IDX labels", format!("expected shape [{n}], got {:?}", lab.dims)));
    }
    let labels: Vec<usize> = lab
        .values
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::format("IDX labels", format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<_>>()?;
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let scale = if img.dtype == 0x08 { 1.0 / 255.0 } else { 1.0 };
    let x = img.values.into_iter().map(|v| v * scale).collect();
    let data = Dataset::new(image.0 * image.1 * image.2, classes, x, labels)?;
    Ok(Pool { data, image })
}

/// Numeric CSV with a header row. `label_column` names the integer label
/// column (default: the last one); every other column is a feature.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() < 2 {
        return Err(Error::format("CSV data", "need at least one feature and one label column"));
    }
    let label_idx = match label_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("data.label_column `{name}` not found in {}", path.display())))?,
        None => headers.len() - 1,
    };
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (i, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format("CSV data", format!("row {}: `{field}` is not a number", line + 2))
            })?;
            if i == label_idx {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(Error::format("CSV data", format!("row {}: label {v} is not a class index", line + 2)));
                }
                y.push(v as usize);
            } else {
                x.push(v);
            }
        }
    }
    let classes = y.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset::new(headers.len() - 1, classes, x, y)?)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format("CSV data", format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_u8_header_and_values() {
        let mut b = vec![0, 0, 0x08, 3];
        for d in [2u32, 1, 2] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(&[0, 255, 51, 102]);
        let a = parse_idx(&b).unwrap();
        assert_eq!(a.dims, vec![2, 1, 2]);
        assert_eq!(a.values, vec![0.0, 255.0, 51.0, 102.0]);
        b.pop();
        assert!(parse_idx(&b).is_err());
    }
}
