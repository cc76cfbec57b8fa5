//! Reading datasets and label files named on the command line.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use mvbfa::data::{read_idx_images, read_t3, IdxOptions};
use mvbfa::{DataSet3D, Error, Result};

const IDX_IMAGES_MAGIC: [u8; 4] = [0, 0, 8, 3];

pub struct IdxRequest<'a> {
    pub labels: Option<&'a Path>,
    pub digits: &'a [u8],
    pub raw: bool,
    pub seed: u64,
}

/// T3 text, or IDX images when the file starts with the IDX image magic number.
/// For IDX input `--labels` must name the IDX label file.
pub fn load_dataset(path: &Path, idx: IdxRequest<'_>) -> Result<DataSet3D> {
    let mut head = [0u8; 4];
    let is_idx = {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| io_error(path, e))?;
        f.read(&mut head).map_err(|e| io_error(path, e))? == 4 && head == IDX_IMAGES_MAGIC
    };
    if !is_idx {
        let data = read_t3(path)?;
        return match idx.labels {
            Some(labels) => data.set_labels(Some(read_label_file(labels)?)),
            None => Ok(data),
        };
    }
    let labels = idx.labels.ok_or_else(|| {
        Error::Input("IDX images need --labels pointing at the IDX label file".into())
    })?;
    let keep: BTreeSet<u8> = idx.digits.iter().copied().collect();
    let options = if idx.raw {
        IdxOptions::raw()
    } else {
        IdxOptions {
            seed: idx.seed,
            ..IdxOptions::default()
        }
    };
    read_idx_images(path, labels, &keep, options)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Nonnegative integers separated by commas and/or whitespace; a leading `labels:` is
/// accepted so the last line of a T3 file can be reused.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    let body = text.trim_start().strip_prefix("labels:").unwrap_or(text);
    body.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| {
            t.parse::<usize>().map_err(|_| Error::Parse {
                line: 1,
                message: format!("label {} (`{t}`) is not a nonnegative integer", i + 1),
            })
        })
        .collect()
}

pub fn read_label_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    parse_labels(&text)
}
