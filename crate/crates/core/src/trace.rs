//! Attention traces and their grayscale heatmap rendering.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepWeights {
    pub visual: Vec<f64>,
    pub textual: Vec<f64>,
}

/// Visual and textual attention weights for every step `1..=K`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub steps: Vec<StepWeights>,
}

/// Pixel intensities `round(255 · w / max w)`. All-zero input maps to zeros.
pub fn heatmap_pixels(weights: &[f64]) -> Vec<u8> {
    let max = weights.iter().cloned().fold(0.0, f64::max);
    weights
        .iter()
        .map(|&w| {
            if max > 0.0 {
                (255.0 * w / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Binary portable graymap (P5) with one pixel per weight, laid out as
/// `height` rows of `width` pixels.
pub fn encode_pgm(weights: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(width * height, weights.len(), "heatmap layout");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(heatmap_pixels(weights));
    out
}

/// Splits a P5 image into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Option<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let pixels = bytes.get(pos + 1..)?.to_vec();
    (pixels.len() == width * height).then_some((width, height, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_weights_give_flat_image() {
        let px = heatmap_pixels(&[0.25; 4]);
        assert!(px.iter().all(|&p| p == 255));
    }

    #[test]
    fn pgm_round_trips() {
        let w = [0.1, 0.5, 0.3];
        let bytes = encode_pgm(&w, 3, 1);
        let (width, height, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((width, height), (3, 1));
        assert_eq!(px, vec![51, 255, 153]);
    }
}
