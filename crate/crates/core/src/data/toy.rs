//! Procedurally generated "person" images: coloured head, torso, legs and
//! an optional bag, with per-image pose, lighting and background jitter.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{file_name, Split};
use crate::error::Result;
use crate::imaging::{self, ImageTensor, ResolutionTag, CHANNELS};
use crate::tensor::Tensor;

const PALETTE: [[f64; 3]; 12] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.55, 0.15],
    [0.12, 0.20, 0.80],
    [0.95, 0.80, 0.10],
    [0.60, 0.15, 0.65],
    [0.05, 0.65, 0.70],
    [0.95, 0.50, 0.05],
    [0.15, 0.15, 0.15],
    [0.92, 0.92, 0.92],
    [0.55, 0.35, 0.15],
    [0.95, 0.45, 0.65],
    [0.40, 0.50, 0.20],
];

const SKIN: [[f64; 3]; 3] = [[0.95, 0.80, 0.65], [0.75, 0.55, 0.40], [0.45, 0.30, 0.20]];

struct Look {
    torso: [f64; 3],
    legs: [f64; 3],
    skin: [f64; 3],
    bag: Option<(bool, [f64; 3])>,
    striped: bool,
}

fn look(identity: u32) -> Look {
    let id = identity as usize;
    let bag = match (id / 3) % 3 {
        0 => None,
        k => Some((k == 1, PALETTE[(id * 7 + 1) % PALETTE.len()])),
    };
    Look {
        torso: PALETTE[id % PALETTE.len()],
        legs: PALETTE[(id * 5 + 3) % PALETTE.len()],
        skin: SKIN[id % SKIN.len()],
        bag,
        striped: (id / 2) % 2 == 1,
    }
}

fn inside_rect(u: f64, v: f64, u0: f64, u1: f64, v0: f64, v1: f64) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

/// One image of `identity`; `variant` selects the jitter, `seed` the corpus.
pub fn person_image(identity: u32, variant: u32, height: usize, width: usize, seed: u64) -> ImageTensor {
    let mix = seed ^ ((identity as u64) << 32) ^ (variant as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    let l = look(identity);
    let du = rng.gen_range(-0.06..0.06);
    let dv = rng.gen_range(-0.03..0.03);
    let gain = rng.gen_range(0.85..1.1);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.7));
    let plane = height * width;
    let mut data = vec![0.0; CHANNELS * plane];
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 + 0.5) / width as f64 - du;
            let v = (y as f64 + 0.5) / height as f64 - dv;
            let head = ((u - 0.5) / 0.12).powi(2) + ((v - 0.12) / 0.08).powi(2) <= 1.0;
            let color = if head {
                l.skin
            } else if inside_rect(u, v, 0.3, 0.7, 0.21, 0.55) {
                if l.striped && ((v - 0.21) / 0.05) as i32 % 2 == 1 {
                    l.torso.map(|c| c * 0.45)
                } else {
                    l.torso
                }
            } else if inside_rect(u, v, 0.32, 0.48, 0.55, 0.95) || inside_rect(u, v, 0.52, 0.68, 0.55, 0.95) {
                l.legs
            } else if let Some(c) = l.bag.and_then(|(left, c)| {
                let (u0, u1) = if left { (0.14, 0.3) } else { (0.7, 0.86) };
                inside_rect(u, v, u0, u1, 0.35, 0.52).then_some(c)
            }) {
                c
            } else {
                bg
            };
            for c in 0..CHANNELS {
                let noise = rng.gen_range(-0.03..0.03);
                data[c * plane + y * width + x] = (color[c] * gain + noise).clamp(0.0, 1.0);
            }
        }
    }
    let t = Tensor::new(vec![CHANNELS, height, width], data).expect("sized buffer");
    ImageTensor::new(t, ResolutionTag::HR).expect("clamped pixels")
}

/// `identities × per_identity` images as `(image, identity, camera)`, the
/// camera alternating between 0 and 1.
pub fn corpus(identities: u32, per_identity: u32, height: usize, width: usize, seed: u64) -> Vec<(ImageTensor, u32, u32)> {
    (0..identities)
        .flat_map(|id| (0..per_identity).map(move |k| (id, k)))
        .map(|(id, k)| (person_image(id, k, height, width, seed), id, k % 2))
        .collect()
}

/// Writes a corpus as PNGs under `root/<split>/` using the standard naming.
pub fn write_split(root: &Path, split: Split, images: &[(ImageTensor, u32, u32)]) -> Result<()> {
    let dir = root.join(split.dir_name());
    std::fs::create_dir_all(&dir)?;
    let mut counters = std::collections::BTreeMap::new();
    for (img, id, cam) in images {
        let idx = counters.entry((*id, *cam)).or_insert(0u32);
        imaging::save_png(img, &dir.join(file_name(*id, *cam, *idx, "png")))?;
        *idx += 1;
    }
    Ok(())
}

/// A complete dataset under `root`: identities `0..train_ids` in the train
/// split, the next `test_ids` identities split by camera into gallery
/// (camera 0) and query (camera 1).
pub fn write_dataset(
    root: &Path,
    train_ids: u32,
    test_ids: u32,
    per_identity: u32,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    write_split(root, Split::Train, &corpus(train_ids, per_identity, height, width, seed))?;
    let (gallery, query): (Vec<_>, Vec<_>) = (train_ids..train_ids + test_ids)
        .flat_map(|id| (0..per_identity).map(move |k| (id, k)))
        .map(|(id, k)| (person_image(id, k, height, width, seed), id, k % 2))
        .partition(|(_, _, cam)| *cam == 0);
    write_split(root, Split::Gallery, &gallery)?;
    write_split(root, Split::Query, &query)
}
