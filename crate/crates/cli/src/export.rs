//! Plain-text grayscale (P2) export of single token maps.

use std::fmt::Write as _;
use std::path::Path;

use conform_core::Tensor;

use crate::error::{CliError, CliResult};

/// Scale `map` so its minimum becomes 0 and its maximum 255, rounding half
/// away from zero. A constant map becomes all zeros.
pub fn quantize(map: &Tensor) -> CliResult<Vec<u8>> {
    let data = map.data();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numeric(
            "export_map: map has non-finite values".into(),
        ));
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(data
        .iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// P2 text for an `h × w` map.
pub fn to_pgm(map: &Tensor) -> CliResult<String> {
    let (h, w) = map.dims2("export_map").map_err(CliError::from)?;
    let pixels = quantize(map)?;
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in pixels.chunks(w) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        writeln!(out, "{}", line.join(" ")).expect("writing to a String");
    }
    Ok(out)
}

pub fn export_map(map: &Tensor, path: &Path) -> CliResult<()> {
    let text = to_pgm(map)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}
