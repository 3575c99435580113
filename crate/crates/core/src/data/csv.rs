use std::path::Path;

use super::{read_file, DataError, Dataset, LabeledSample};
use crate::tensor::Tensor;

/// Parses comma-separated rows of `label, p_1, …, p_{side²}` with pixels in
/// `0..=255`, scaled by 1/255. Rows are numbered from 1 in diagnostics.
pub fn parse_csv(text: &[u8], image_side: usize, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    if image_side == 0 {
        return Err(DataError::Invalid("image side must be positive".into()));
    }
    let want = image_side * image_side;
    let mut reader = ::csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(::csv::Trim::All)
        .from_reader(text);
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Row { row, detail: e.to_string() })?;
        if record.len() != want + 1 {
            return Err(DataError::Row {
                row,
                detail: format!("expected 1 label and {want} pixels, found {} cells", record.len()),
            });
        }
        let label: usize = record[0].parse().map_err(|_| DataError::Row {
            row,
            detail: format!("label {:?} is not a non-negative integer", &record[0]),
        })?;
        let pixels = record
            .iter()
            .skip(1)
            .enumerate()
            .map(|(col, cell)| match cell.parse::<f64>() {
                Ok(v) if (0.0..=255.0).contains(&v) => Ok(v / 255.0),
                _ => Err(DataError::Row {
                    row,
                    detail: format!("pixel {} is {cell:?}, expected a number in 0..=255", col + 1),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((label, pixels));
    }
    if rows.is_empty() {
        return Err(DataError::Empty { file: "csv" });
    }
    let num_classes = num_classes.unwrap_or_else(|| rows.iter().map(|r| r.0).max().unwrap_or(0) + 1);
    if let Some(i) = rows.iter().position(|r| r.0 >= num_classes) {
        return Err(DataError::Row {
            row: i + 1,
            detail: format!("label {} outside 0..{num_classes}", rows[i].0),
        });
    }
    let samples = rows
        .into_iter()
        .map(|(label, px)| LabeledSample {
            input: Tensor::from_parts(vec![1, image_side, image_side], px),
            label,
            aux: None,
        })
        .collect();
    Dataset::new(samples, num_classes, None, "csv")
}

pub fn load_csv(path: &Path, image_side: usize, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let mut d = parse_csv(&read_file(path)?, image_side, num_classes)?;
    d.provenance = format!("csv {}", path.display());
    Ok(d)
}
