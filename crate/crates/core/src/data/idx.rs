use std::path::Path;

use super::{read_file, DataError, Dataset, LabeledSample};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    file: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(DataError::Truncated {
                file: self.file,
                offset: self.bytes.len(),
                needed: n - rest,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<(), DataError> {
        if self.bytes.is_empty() {
            return Err(DataError::Empty { file: self.file });
        }
        let found = self.u32()?;
        if found != expected {
            return Err(DataError::BadMagic { file: self.file, expected, found });
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), DataError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            extra => Err(DataError::TrailingBytes {
                file: self.file,
                offset: self.pos,
                extra,
            }),
        }
    }
}

/// Parses an IDX image file (`0x00000803`, count, rows, cols, then unsigned
/// bytes) and its IDX label file (`0x00000801`, count, then bytes). Pixels are
/// scaled by 1/255. With `num_classes = None` the class count is the largest
/// label plus one.
pub fn parse_idx(images: &[u8], labels: &[u8], num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let mut img = Reader { file: "images", bytes: images, pos: 0 };
    img.magic(IMAGE_MAGIC)?;
    let n = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("images: zero-sized {rows}x{cols} images")));
    }

    let mut lab = Reader { file: "labels", bytes: labels, pos: 0 };
    lab.magic(LABEL_MAGIC)?;
    let n_labels = lab.u32()? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch { images: n, labels: n_labels });
    }
    if n == 0 {
        return Err(DataError::Invalid("IDX files declare zero items".into()));
    }
    let pixels = img.take(n * rows * cols)?;
    img.finish()?;
    let label_bytes = lab.take(n)?;
    lab.finish()?;

    let num_classes = num_classes.unwrap_or_else(|| *label_bytes.iter().max().unwrap_or(&0) as usize + 1);
    let samples = pixels
        .chunks_exact(rows * cols)
        .zip(label_bytes)
        .map(|(px, &y)| LabeledSample {
            input: Tensor::from_parts(vec![1, rows, cols], px.iter().map(|&p| f64::from(p) / 255.0).collect()),
            label: y as usize,
            aux: None,
        })
        .collect();
    Dataset::new(samples, num_classes, None, "idx")
}

pub fn load_idx(images: &Path, labels: &Path, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let mut d = parse_idx(&read_file(images)?, &read_file(labels)?, num_classes)?;
    d.provenance = format!("idx {} {}", images.display(), labels.display());
    Ok(d)
}
