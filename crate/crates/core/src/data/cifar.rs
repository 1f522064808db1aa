use std::fs;
use std::path::Path;

use super::{DataError, Dataset};

/// One label byte followed by 1024 bytes each of red, green and blue.
pub const RECORD_LEN: usize = 1 + 3 * 32 * 32;
const RECORDS_PER_FILE: usize = 10_000;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Per-channel `(x - mean) / std` applied after scaling bytes to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
    /// Channel statistics of the CIFAR-10 training set.
    pub const CIFAR10: Normalization = Normalization {
        mean: [0.4914, 0.4822, 0.4465],
        std: [0.2470, 0.2435, 0.2616],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::CIFAR10
    }
}

/// Splits one record into its label and normalized `[3, 32, 32]` pixels.
pub fn parse_record(record: &[u8], norm: &Normalization) -> Result<(usize, Vec<f32>), String> {
    if record.len() != RECORD_LEN {
        return Err(format!(
            "record of {} bytes, expected {RECORD_LEN}",
            record.len()
        ));
    }
    let label = record[0] as usize;
    if label > 9 {
        return Err(format!("label byte {label} out of range"));
    }
    let pixels = record[1..]
        .chunks_exact(1024)
        .enumerate()
        .flat_map(|(ch, plane)| {
            plane
                .iter()
                .map(move |&b| (b as f32 / 255.0 - norm.mean[ch]) / norm.std[ch])
        })
        .collect();
    Ok((label, pixels))
}

/// Inverse of [`parse_record`].
pub fn encode_record(
    label: usize,
    pixels: &[f32],
    norm: &Normalization,
) -> Result<Vec<u8>, String> {
    if label > 9 || pixels.len() != RECORD_LEN - 1 {
        return Err(format!(
            "cannot encode label {label} with {} pixels",
            pixels.len()
        ));
    }
    let mut out = Vec::with_capacity(RECORD_LEN);
    out.push(label as u8);
    for (i, &p) in pixels.iter().enumerate() {
        let ch = i / 1024;
        let v = ((p * norm.std[ch] + norm.mean[ch]) * 255.0).round();
        out.push(v.clamp(0.0, 255.0) as u8);
    }
    Ok(out)
}

/// Reads one batch file; it must hold exactly `expected` records.
pub fn load_cifar10_file(
    path: &Path,
    expected: usize,
    norm: &Normalization,
) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_owned(),
        source,
    })?;
    let format = |detail: String| DataError::Format {
        path: path.to_owned(),
        detail,
    };
    if bytes.len() != expected * RECORD_LEN {
        return Err(format(format!(
            "{} bytes is not {expected} records of {RECORD_LEN} bytes",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(expected * (RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(expected);
    for (i, record) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let (label, px) =
            parse_record(record, norm).map_err(|e| format(format!("record {i}: {e}")))?;
        labels.push(label);
        pixels.extend(px);
    }
    Dataset::new([3, 32, 32], 10, pixels, labels)
}

/// Loads the five training batches and the test batch: `(train, test)`.
pub fn load_cifar10_binary(
    dir: &Path,
    norm: &Normalization,
) -> Result<(Dataset, Dataset), DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let part = load_cifar10_file(&dir.join(name), RECORDS_PER_FILE, norm)?;
        for i in 0..part.len() {
            pixels.extend_from_slice(part.pixels(i));
        }
        labels.extend_from_slice(part.labels());
    }
    let train = Dataset::new([3, 32, 32], 10, pixels, labels)?;
    let test = load_cifar10_file(&dir.join(TEST_FILE), RECORDS_PER_FILE, norm)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..RECORD_LEN - 1).map(|i| (i * 31 % 256) as u8));
        r
    }

    #[test]
    fn record_round_trip() {
        for norm in [Normalization::CIFAR10, Normalization::IDENTITY] {
            let raw = record(7);
            let (label, px) = parse_record(&raw, &norm).unwrap();
            assert_eq!(label, 7);
            assert_eq!(encode_record(label, &px, &norm).unwrap(), raw);
        }
    }

    #[test]
    fn identity_scales_to_unit_interval() {
        let (_, px) = parse_record(&record(0), &Normalization::IDENTITY).unwrap();
        assert_eq!(px[0], 0.0);
        assert_eq!(px[1], 31.0 / 255.0);
        assert!(px.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn bad_records_are_rejected() {
        assert!(parse_record(&record(10), &Normalization::IDENTITY).is_err());
        assert!(parse_record(&[0; 5], &Normalization::IDENTITY).is_err());
    }

    #[test]
    fn short_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, record(1)).unwrap();
        let err = load_cifar10_file(&path, 2, &Normalization::IDENTITY).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
        let ok = load_cifar10_file(&path, 1, &Normalization::IDENTITY).unwrap();
        assert_eq!((ok.len(), ok.label(0)), (1, 1));
        let missing = load_cifar10_binary(dir.path(), &Normalization::IDENTITY).unwrap_err();
        assert!(missing.to_string().contains("data_batch_1.bin"));
    }
}
