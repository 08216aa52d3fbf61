use crate::raster::GrayImage;

/// Ramp width, in pixels, of feathered mask edges.
pub const FEATHER_WIDTH: usize = 3;

/// Otsu threshold over a 256-bin histogram of `[0, 1]` intensities.
///
/// Returns `None` for images with a single intensity level.
pub fn otsu_threshold(img: &GrayImage) -> Option<f64> {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = img.data().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best: Option<(usize, f64)> = None;
    for (t, &c) in hist.iter().enumerate().take(255) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1).powi(2);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.map(|(t, _)| (t as f64 + 0.5) / 255.0)
}

/// Grows a binary foreground into an alpha mask: 1 on the foreground, then
/// `1 - d / (width + 1)` at chessboard distance `d <= width`, 0 beyond.
pub fn feather(fg: &[bool], w: usize, h: usize, width: usize) -> GrayImage {
    let r = width as isize;
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            if fg[y * w + x] {
                out[y * w + x] = 1.0;
                continue;
            }
            let mut best = usize::MAX;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    if fg[ny as usize * w + nx as usize] {
                        best = best.min(dx.unsigned_abs().max(dy.unsigned_abs()));
                    }
                }
            }
            if best <= width {
                out[y * w + x] = 1.0 - best as f64 / (width + 1) as f64;
            }
        }
    }
    GrayImage::new(w, h, out).expect("mask shape")
}

/// Otsu-thresholded, feathered mask for a generated patch.
///
/// The foreground is the threshold side holding fewer border pixels, so both
/// dark and bright defects on a uniform surround are picked out. Flat
/// patches get a full mask.
pub fn generated_mask(patch: &GrayImage) -> GrayImage {
    let (w, h) = (patch.width(), patch.height());
    let Some(t) = otsu_threshold(patch) else {
        return GrayImage::filled(w, h, 1.0);
    };
    let above: Vec<bool> = patch.data().iter().map(|&v| v > t).collect();
    let (mut border, mut border_above) = (0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                border += 1;
                border_above += usize::from(above[y * w + x]);
            }
        }
    }
    let fg: Vec<bool> = if 2 * border_above > border {
        above.iter().map(|a| !a).collect()
    } else {
        above
    };
    feather(&fg, w, h, FEATHER_WIDTH)
}
