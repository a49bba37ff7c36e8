//! Deterministic procedural textures keyed to a reference segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::uv_atlas::{SegmentationMap, TexelTable, TextureMap};

/// Texture families for the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TextureStyle {
    /// One flat color per label.
    Solid,
    /// Horizontal stripes of the given row period inside each label region.
    Stripes { period: usize },
    /// Random color patches, then symmetrized so tex(t) = tex(sym(t))
    /// exactly; exercises mirror completion.
    SymmetricPatches { patch: usize },
}

fn base_color(label: u8, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let base: [u8; 3] = match label {
        0 => [0, 0, 0],
        1 => [205, 170, 140], // skin
        2 => [60, 40, 25],    // hair
        3 => [40, 90, 170],   // upper garment
        4 => [50, 50, 60],    // lower garment
        5 => [120, 20, 20],   // shoes
        _ => [128, 128, 128],
    };
    let mut out = [0u8; 3];
    for c in 0..3 {
        let jitter: i16 = rng.gen_range(-18..=18);
        out[c] = (base[c] as i16 + jitter).clamp(0, 255) as u8;
    }
    out
}

/// Deterministic texture over the valid texels of the table.
pub fn procedural_texture(
    table: &TexelTable,
    seg: &SegmentationMap,
    style: &TextureStyle,
    seed: u64,
) -> TextureMap {
    let r = table.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[u8; 3]> = (0..seg.palette.len() as u8)
        .map(|l| base_color(l, &mut rng))
        .collect();
    let alt: Vec<[u8; 3]> = colors
        .iter()
        .map(|c| [c[0] ^ 0x5a, c[1] ^ 0x2c, c[2] ^ 0x4e])
        .collect();

    let mut tex = TextureMap::new(r);
    match style {
        TextureStyle::Solid => {
            for &t in table.valid_indices() {
                tex.pixels[t] = colors[seg.labels[t] as usize];
                tex.valid[t] = true;
            }
        }
        TextureStyle::Stripes { period } => {
            let period = (*period).max(1);
            for &t in table.valid_indices() {
                let row = t / r;
                let band = (row / period) % 2;
                let l = seg.labels[t] as usize;
                tex.pixels[t] = if band == 0 { colors[l] } else { alt[l] };
                tex.valid[t] = true;
            }
        }
        TextureStyle::SymmetricPatches { patch } => {
            let patch = (*patch).max(1);
            let mut patch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let patches_per_row = r.div_ceil(patch);
            let patch_colors: Vec<[u8; 3]> = (0..patches_per_row * patches_per_row)
                .map(|_| [patch_rng.gen(), patch_rng.gen(), patch_rng.gen()])
                .collect();
            for &t in table.valid_indices() {
                let (x, y) = (t % r, t / r);
                tex.pixels[t] = patch_colors[(y / patch) * patches_per_row + x / patch];
                tex.valid[t] = true;
            }
            // Symmetrize: each mutual pair copies from its lower index.
            for &t in table.valid_indices() {
                if let Some(m) = table.symmetric(t) {
                    if m > t {
                        tex.pixels[m] = tex.pixels[t];
                    }
                }
            }
        }
    }
    tex
}
