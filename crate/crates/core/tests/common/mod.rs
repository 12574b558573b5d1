#![allow(dead_code)]

use seglab::dataset::Mask;

/// Masks of `side x side` pixels; `fg_total` foreground pixels spread as
/// evenly as possible over the first `count - empty` masks, the last
/// `empty` masks left all background.
pub fn mask_set(count: usize, side: usize, empty: usize, fg_total: usize) -> Vec<Mask> {
    let filled = count - empty;
    let (base, extra) = (fg_total / filled, fg_total % filled);
    (0..count)
        .map(|i| {
            let fg = if i < filled { base + usize::from(i < extra) } else { 0 };
            assert!(fg < side * side, "every mask keeps some background");
            let data = (0..side * side).map(|p| u8::from(p < fg)).collect();
            Mask::new(side, side, data).unwrap()
        })
        .collect()
}

/// Mask sets whose pixel statistics reproduce the published weight rows.
pub fn dermatomyositis_masks() -> Vec<Mask> {
    mask_set(25, 15, 3, 832)
}

pub fn dermofit_masks() -> Vec<Mask> {
    mask_set(11, 12, 0, 481)
}

pub fn isic_masks() -> Vec<Mask> {
    mask_set(17, 16, 0, 879)
}

pub fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}
