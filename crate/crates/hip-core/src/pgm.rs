//! Binary 8-bit PGM (P5) output for visualizations.

use std::io::Write;
use std::path::Path;

use crate::Result;

/// Write `values` (row-major, any real range) as an 8-bit PGM, rescaled so
/// min maps to 0 and max to 255. A constant image maps to mid-gray.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), width * height, "pgm data length mismatch");
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| {
            if span <= 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(&bytes)?;
    Ok(())
}
