//! ASCII rendering of a single sample, for checking pixel orientation.

use crate::data::{Dataset, IMAGE_SIDE};
use crate::error::{Error, Result};

const RAMP: &[u8] = b" .:-=+*#%@";

/// 28 text rows, darkest to brightest mapped onto a ten-step ramp after
/// min-max scaling, followed by the label line.
pub fn render(data: &Dataset, index: usize) -> Result<String> {
    if index >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "index {index} out of range for {} samples",
            data.len()
        )));
    }
    let img = data.image(index);
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = String::with_capacity(IMAGE_SIDE * (IMAGE_SIDE + 1) + 16);
    for row in img.chunks_exact(IMAGE_SIDE) {
        for &v in row {
            let level = (((v - lo) / span) * (RAMP.len() - 1) as f32).round() as usize;
            out.push(RAMP[level.min(RAMP.len() - 1)] as char);
        }
        out.push('\n');
    }
    out.push_str(&format!("label: {}\n", data.labels()[index]));
    Ok(out)
}
