//! Synthetic paired data: parametric images of colored rectangles with
//! deterministic caption or question-answer token targets. Each dataset is
//! a pure function of (kind, size, image size, seed).

use crate::pipeline::Sample;
use crate::tokenizer::{prompt_ids, target_ids};
use crate::vision::ImageInput;
use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Solid color field; target is "a {color} image".
    ColorCaption,
    /// One to four bright squares on a dark field; target is the count.
    CountVqa,
    /// A single square in one quadrant; target names the quadrant.
    PositionVqa,
    /// Round-robin over the three tasks.
    Mixed,
}

pub const CAPTION_PROMPT: &str = "caption:";
pub const COUNT_PROMPT: &str = "how many blocks?";
pub const POSITION_PROMPT: &str = "where is the block?";

const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.80, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.10]),
    ("blue", [0.10, 0.10, 0.80]),
    ("yellow", [0.80, 0.80, 0.10]),
    ("cyan", [0.10, 0.80, 0.80]),
    ("magenta", [0.80, 0.10, 0.80]),
    ("white", [0.90, 0.90, 0.90]),
    ("gray", [0.50, 0.50, 0.50]),
];

const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];

fn jitter<R: Rng>(base: [f64; 3], rng: &mut R) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (o, b) in out.iter_mut().zip(base) {
        *o = (b + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    out
}

fn fill_rect(img: &mut ImageInput, r0: usize, c0: usize, h: usize, w: usize, rgb: [f64; 3]) {
    for r in r0..(r0 + h).min(img.height) {
        for c in c0..(c0 + w).min(img.width) {
            img.set(r, c, rgb);
        }
    }
}

fn caption_sample<R: Rng>(size: usize, rng: &mut R) -> Sample {
    let (name, base) = COLORS[rng.gen_range(0..COLORS.len())];
    let image = ImageInput::filled(size, size, jitter(base, rng));
    Sample {
        image,
        prompt: prompt_ids(CAPTION_PROMPT),
        target: target_ids(&format!("a {name} image")),
    }
}

fn count_sample<R: Rng>(size: usize, rng: &mut R) -> Sample {
    let mut image = ImageInput::filled(size, size, [0.05, 0.05, 0.05]);
    let k = rng.gen_range(1..=4usize);
    let cell = size / 4;
    for idx in index_sample(rng, 16, k) {
        let (gr, gc) = (idx / 4, idx % 4);
        fill_rect(
            &mut image,
            gr * cell + 1,
            gc * cell + 1,
            cell - 2,
            cell - 2,
            [0.95, 0.95, 0.95],
        );
    }
    Sample {
        image,
        prompt: prompt_ids(COUNT_PROMPT),
        target: target_ids(&k.to_string()),
    }
}

fn position_sample<R: Rng>(size: usize, rng: &mut R) -> Sample {
    let mut image = ImageInput::filled(size, size, [0.05, 0.05, 0.05]);
    let q = rng.gen_range(0..4usize);
    let half = size / 2;
    let block = size / 4;
    let max_off = half - block;
    let r0 = (q / 2) * half + rng.gen_range(0..=max_off);
    let c0 = (q % 2) * half + rng.gen_range(0..=max_off);
    fill_rect(&mut image, r0, c0, block, block, [0.90, 0.60, 0.10]);
    Sample {
        image,
        prompt: prompt_ids(POSITION_PROMPT),
        target: target_ids(QUADRANTS[q]),
    }
}

/// Generates `n` samples; identical arguments give identical samples.
pub fn make_dataset(kind: TaskKind, n: usize, image_size: usize, seed: u64) -> Vec<Sample> {
    assert!(image_size >= 16, "blocks need at least a 16-pixel canvas");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| match kind {
            TaskKind::ColorCaption => caption_sample(image_size, &mut rng),
            TaskKind::CountVqa => count_sample(image_size, &mut rng),
            TaskKind::PositionVqa => position_sample(image_size, &mut rng),
            TaskKind::Mixed => match i % 3 {
                0 => caption_sample(image_size, &mut rng),
                1 => count_sample(image_size, &mut rng),
                _ => position_sample(image_size, &mut rng),
            },
        })
        .collect()
}
