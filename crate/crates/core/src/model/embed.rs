//! Patch extraction, linear patch projection, learned positional embedding,
//! and grid resampling of positional embeddings.

use super::config::VitConfig;
use super::params::EmbedParams;
use crate::error::{dim_err, Result};
use crate::tensor::{add_row_vector, gather_rows, matmul, matmul_tn, Tensor};

/// Pixel-row indices (into the image viewed as `(H·W) × C`) in patch order:
/// patches row-major over the grid, pixels row-major within a patch.
pub fn patch_pixel_index(cfg: &VitConfig) -> Vec<usize> {
    let (p, g, side) = (cfg.patch, cfg.grid(), cfg.image);
    let mut idx = Vec::with_capacity(side * side);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                for px in 0..p {
                    idx.push((gy * p + py) * side + gx * p + px);
                }
            }
        }
    }
    idx
}

/// `tokens × (patch²·channels)` matrix of flattened non-overlapping patches.
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor> {
    match image.shape() {
        [h, w, c] if *h == cfg.image && *w == cfg.image && *c == cfg.channels => {}
        s => {
            return Err(dim_err!(
                "image shape {s:?}, expected [{0}, {0}, {1}]",
                cfg.image,
                cfg.channels
            ))
        }
    }
    if cfg.image % cfg.patch != 0 {
        return Err(dim_err!("image {} not divisible by patch {}", cfg.image, cfg.patch));
    }
    let pixels = image.clone().reshape(&[cfg.image * cfg.image, cfg.channels])?;
    gather_rows(&pixels, &patch_pixel_index(cfg))?.reshape(&[cfg.tokens(), cfg.patch_dim()])
}

/// Token embeddings of one `H × W × C` image.
pub fn embed(image: &Tensor, params: &EmbedParams, cfg: &VitConfig) -> Result<Tensor> {
    embed_patches(&patchify(image, cfg)?, params)
}

pub(crate) fn embed_patches(patches: &Tensor, params: &EmbedParams) -> Result<Tensor> {
    let mut tokens = add_row_vector(&matmul(patches, &params.patch_kernel)?, &params.patch_bias)?;
    tokens.add_assign(&params.pos_embed)?;
    Ok(tokens)
}

pub(crate) fn embed_backward(
    patches: &Tensor,
    dtokens: &Tensor,
    grads: &mut EmbedParams,
) -> Result<()> {
    grads.patch_kernel.add_assign(&matmul_tn(patches, dtokens)?)?;
    grads.patch_bias.add_assign(&dtokens.sum_rows())?;
    grads.pos_embed.add_assign(dtokens)?;
    Ok(())
}

/// Bilinear, corner-aligned resampling of a `g² × width` positional embedding
/// (rows laid out row-major on a `g × g` grid) to `new_grid² × width`.
pub fn interpolate_pos_embed(pos: &Tensor, new_grid: usize) -> Result<Tensor> {
    let (rows, width) = pos.dims2()?;
    let g = (rows as f64).sqrt().round() as usize;
    if g * g != rows {
        return Err(dim_err!("{rows} positional rows do not form a square grid"));
    }
    if new_grid == g {
        return Ok(pos.clone());
    }
    if new_grid == 0 {
        return Err(dim_err!("target grid must be positive"));
    }
    if new_grid > g && g < 2 {
        return Err(dim_err!("cannot upsample a {g}×{g} grid"));
    }
    let coord = |u: usize| -> (usize, usize, f64) {
        if new_grid == 1 || g == 1 {
            return (0, 0, 0.0);
        }
        let s = u as f64 * (g - 1) as f64 / (new_grid - 1) as f64;
        let lo = (s.floor() as usize).min(g - 1);
        let hi = (lo + 1).min(g - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Tensor::zeros(&[new_grid * new_grid, width]);
    for uy in 0..new_grid {
        let (y0, y1, fy) = coord(uy);
        for ux in 0..new_grid {
            let (x0, x1, fx) = coord(ux);
            let (a, b) = (pos.row(y0 * g + x0), pos.row(y0 * g + x1));
            let (c, d) = (pos.row(y1 * g + x0), pos.row(y1 * g + x1));
            for (ch, o) in out.row_mut(uy * new_grid + ux).iter_mut().enumerate() {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                *o = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn default_resolution_gives_256_tokens() {
        let cfg = VitConfig::vit_22b();
        assert_eq!(cfg.tokens(), 256);
        assert_eq!(patch_pixel_index(&cfg).len(), 224 * 224);
    }

    #[test]
    fn zero_image_embeds_to_bias() {
        let mut cfg = VitConfig::tiny(8, 1, 16, 2);
        cfg.image = 4;
        cfg.patch = 2;
        let mut rng = Rng::new(0);
        let p = EmbedParams {
            patch_kernel: Tensor::randn(&[cfg.patch_dim(), 8], 1.0, &mut rng),
            patch_bias: Tensor::randn(&[8], 1.0, &mut rng),
            pos_embed: Tensor::zeros(&[cfg.tokens(), 8]),
        };
        let t = embed(&Tensor::zeros(&[4, 4, 3]), &p, &cfg).unwrap();
        for i in 0..t.rows() {
            assert_eq!(t.row(i), p.patch_bias.data());
        }
    }

    #[test]
    fn checkerboard_patches_match_hand_flattening() {
        // 4×4 single-channel checkerboard, 2×2 patches.
        let mut cfg = VitConfig::tiny(8, 1, 16, 2);
        cfg.image = 4;
        cfg.patch = 2;
        cfg.channels = 1;
        let img = Tensor::from_fn(&[4, 4, 1], |i| ((i / 4 + i % 4) % 2) as f64 + (i as f64) * 100.0);
        let px = |y: usize, x: usize| img.data()[y * 4 + x];
        let patches = patchify(&img, &cfg).unwrap();
        assert_eq!(patches.shape(), &[4, 4]);
        for (t, (gy, gx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let expect = [
                px(2 * gy, 2 * gx),
                px(2 * gy, 2 * gx + 1),
                px(2 * gy + 1, 2 * gx),
                px(2 * gy + 1, 2 * gx + 1),
            ];
            assert_eq!(patches.row(t), &expect);
        }
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = VitConfig::tiny(8, 1, 16, 2);
        assert!(patchify(&Tensor::zeros(&[6, 6, 3]), &cfg).is_err());
    }

    #[test]
    fn interpolation_cases() {
        let mut rng = Rng::new(4);
        let pos = Tensor::randn(&[9, 5], 1.0, &mut rng);
        assert_eq!(interpolate_pos_embed(&pos, 3).unwrap(), pos);

        let c = Tensor::full(&[4, 3], 2.5);
        let up = interpolate_pos_embed(&c, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));

        // Ramp on a 2×2 grid; with aligned corners the 3×3 value at (y, x)
        // is the bilinear surface f(y, x) = 2y + x sampled at halves.
        let ramp = Tensor::new(&[4, 1], vec![0., 1., 2., 3.]).unwrap();
        let r = interpolate_pos_embed(&ramp, 3).unwrap();
        for uy in 0..3 {
            for ux in 0..3 {
                let expect = 2.0 * (uy as f64 / 2.0) + ux as f64 / 2.0;
                assert!((r.at(uy * 3 + ux, 0) - expect).abs() < 1e-15);
            }
        }

        let single = Tensor::full(&[1, 2], 1.0);
        assert!(interpolate_pos_embed(&single, 2).is_err());
        assert!(interpolate_pos_embed(&Tensor::zeros(&[3, 2]), 2).is_err());
    }
}
