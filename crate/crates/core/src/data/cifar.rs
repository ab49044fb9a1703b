use std::path::Path;

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::substrate::Tensor;

/// Bytes per record: one label byte and 32·32·3 pixel bytes.
pub const RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;

/// Parses CIFAR-10 binary records. Pixels are scaled to [0, 1].
pub fn parse_cifar10(bytes: &[u8], origin: &str) -> Result<LabeledImages> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        let offset = bytes.len() - bytes.len() % RECORD_BYTES;
        return Err(Error::Dataset(format!(
            "{origin}: truncated record at byte offset {offset} (file length {} is not a multiple of {RECORD_BYTES})",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Dataset(format!(
                "{origin}: label byte {} > 9 at byte offset {}",
                rec[0],
                i * RECORD_BYTES
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    if n == 0 {
        return Err(Error::Dataset(format!("{origin}: no records")));
    }
    Ok(LabeledImages {
        images: Tensor::new(vec![n, 3, SIDE, SIDE], pixels)?,
        labels,
        classes: 10,
        source: format!("cifar10:{origin}"),
    })
}

/// Loads and concatenates CIFAR-10 binary files in the given order.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledImages> {
    let mut parts = Vec::new();
    let mut labels = Vec::new();
    let mut names = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes =
            std::fs::read(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
        let set = parse_cifar10(&bytes, &p.display().to_string())?;
        labels.extend(set.labels);
        parts.push(set.images);
        names.push(p.display().to_string());
    }
    Ok(LabeledImages {
        images: Tensor::cat_batch(&parts)?,
        labels,
        classes: 10,
        source: format!("cifar10:{}", names.join("+")),
    })
}

/// Re-quantizes one image back to its record bytes.
pub fn to_record(image: &[f64], label: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(RECORD_BYTES);
    out.push(label as u8);
    out.extend(
        image
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_records_from_30730_bytes() {
        let bytes = vec![0u8; 30730];
        let set = parse_cifar10(&bytes, "mem").unwrap();
        assert_eq!(set.len(), 10);
        assert_eq!(set.labels[0], 0);
        assert!(set.images.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn truncation_and_bad_label_report_offsets() {
        let err = parse_cifar10(&vec![0u8; 3073 + 5], "mem")
            .unwrap_err()
            .to_string();
        assert!(err.contains("offset 3073"), "{err}");
        let mut bytes = vec![0u8; 3073 * 3];
        bytes[3073 * 2] = 10;
        let err = parse_cifar10(&bytes, "mem").unwrap_err().to_string();
        assert!(err.contains("offset 6146"), "{err}");
    }
}
