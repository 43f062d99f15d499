//! Side-by-side original / reconstruction grid.

use vae_anomaly::data::RawImage;

pub const SEPARATOR: usize = 2;

/// `(height, width)` of a grid of `n` rows of two `size`×`size` tiles.
pub fn grid_size(n: usize, size: usize) -> (usize, usize) {
    (n * size + n.saturating_sub(1) * SEPARATOR, 2 * size + SEPARATOR)
}

/// Originals in the left column, reconstructions in the right, white
/// separators between tiles.
pub fn build_grid(pairs: &[(RawImage, RawImage)]) -> RawImage {
    let size = pairs[0].0.height;
    let ch = pairs[0].0.channels;
    let (h, w) = grid_size(pairs.len(), size);
    let mut data = vec![255u8; h * w * ch];
    for (row, (orig, recon)) in pairs.iter().enumerate() {
        let top = row * (size + SEPARATOR);
        for (col, img) in [orig, recon].into_iter().enumerate() {
            let left = col * (size + SEPARATOR);
            for y in 0..size {
                let dst = ((top + y) * w + left) * ch;
                let src = y * size * ch;
                data[dst..dst + size * ch].copy_from_slice(&img.data[src..src + size * ch]);
            }
        }
    }
    RawImage::new(h, w, ch, data).expect("grid dimensions match")
}
