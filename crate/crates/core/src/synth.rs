//! Procedural training data: grids of colored shapes with template captions.
//!
//! Each image places two shapes in two distinct quadrants; the caption
//! enumerates color, shape and quadrant for both. The fixed template
//! vocabulary keeps runs reproducible and the captions fully determined by
//! the image.

use crate::error::Result;
use crate::frontend::{encode_with, FrontendConfig, Image, PatchTokens, StubEncoder};
use crate::lm::Vocab;
use crate::rng::SplitMix64;

pub const SYNTH_WORDS: [&str; 15] = [
    "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "in", "the", "top",
    "bottom", "left", "right", "and",
];

const COLORS: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 200, 60]),
    ("blue", [60, 90, 220]),
    ("yellow", [230, 220, 50]),
];

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

pub fn synth_vocab() -> Vocab {
    Vocab::from_words(SYNTH_WORDS)
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    /// Raw patch tokens from the frozen backbone (before the trainable
    /// final block).
    pub tokens: PatchTokens,
    /// Caption token ids, EOS-terminated.
    pub text_ids: Vec<usize>,
    pub caption: String,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub samples: Vec<SynthSample>,
    pub vocab: Vocab,
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    color: usize,
    shape: usize,
    quadrant: (usize, usize), // (qx, qy)
}

fn draw_shape(image: &mut Image, p: &Placement) {
    let half = image.width / 2;
    let cx = (p.quadrant.0 * half + half / 2) as f64;
    let cy = (p.quadrant.1 * half + half / 2) as f64;
    let radius = half as f64 * 0.32;
    let rgb = COLORS[p.color].1;
    for y in 0..image.height {
        for x in 0..image.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let inside = match SHAPES[p.shape] {
                "circle" => dx * dx + dy * dy <= radius * radius,
                "square" => dx.abs() <= radius * 0.85 && dy.abs() <= radius * 0.85,
                // Point-up triangle.
                _ => dy >= -radius && dy <= radius && dx.abs() <= (dy + radius) / 2.0,
            };
            if inside {
                image.set_pixel(x, y, rgb);
            }
        }
    }
}

fn caption_for(first: &Placement, second: &Placement) -> String {
    let pos = |q: (usize, usize)| {
        let v = if q.1 == 0 { "top" } else { "bottom" };
        let h = if q.0 == 0 { "left" } else { "right" };
        (v, h)
    };
    let (v1, h1) = pos(first.quadrant);
    let (v2, h2) = pos(second.quadrant);
    format!(
        "a {} {} in the {} {} and a {} {} in the {} {}",
        COLORS[first.color].0, SHAPES[first.shape], v1, h1,
        COLORS[second.color].0, SHAPES[second.shape], v2, h2,
    )
}

pub fn synth_image(rng: &mut SplitMix64, side: usize) -> (Image, String) {
    let mut image = Image::filled(side, side, [28, 32, 38]).expect("positive side");
    let first = Placement {
        color: rng.below(COLORS.len()),
        shape: rng.below(SHAPES.len()),
        quadrant: (rng.below(2), rng.below(2)),
    };
    let mut second = Placement {
        color: rng.below(COLORS.len()),
        shape: rng.below(SHAPES.len()),
        quadrant: (rng.below(2), rng.below(2)),
    };
    while second.quadrant == first.quadrant {
        second.quadrant = (rng.below(2), rng.below(2));
    }
    draw_shape(&mut image, &first);
    draw_shape(&mut image, &second);
    (image, caption_for(&first, &second))
}

/// Builds `count` (patch-token, caption) pairs with the backbone seeded from
/// `seed`; images are square at the configured encoder region size so the
/// slicing stays 1×1.
pub fn synth_dataset(count: usize, config: &FrontendConfig, seed: u64) -> Result<SynthDataset> {
    config.validate()?;
    let vocab = synth_vocab();
    let encoder = StubEncoder::seeded(config, seed);
    let mut rng = SplitMix64::new(seed ^ 0x7379_6e74_6864_6174);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let (image, caption) = synth_image(&mut rng, config.vit_region_w);
        let tokens = encode_with(&image, config, &encoder)?;
        let words: Vec<String> = caption.split(' ').map(|w| w.to_string()).collect();
        let mut text_ids = vocab.encode(&words)?;
        text_ids.push(vocab.eos());
        samples.push(SynthSample {
            tokens,
            text_ids,
            caption,
        });
    }
    Ok(SynthDataset { samples, vocab })
}
