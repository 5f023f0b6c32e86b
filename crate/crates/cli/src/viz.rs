use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

/// Fixed color per class index; the last class (background) is black.
pub fn class_color(index: usize, classes: usize) -> Rgb<u8> {
    if index + 1 == classes {
        return Rgb([0, 0, 0]);
    }
    let hue = (index as f32 * 0.618_034).fract() * 6.0;
    let value = if index % 2 == 0 { 1.0 } else { 0.7 };
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let c = |v: f32| (v * value * 255.0).round() as u8;
    Rgb([c(r), c(g), c(b)])
}

/// Image, part map and object map side by side.
pub fn composite(image: &Array3<f32>, parts: &Array2<u16>, part_classes: usize, objects: &Array2<u16>, object_classes: usize) -> RgbImage {
    let (h, w, _) = image.dim();
    let mut out = RgbImage::new(3 * w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (image[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put_pixel(x as u32, y as u32, Rgb([px(0), px(1), px(2)]));
            out.put_pixel((w + x) as u32, y as u32, class_color(parts[[y, x]] as usize, part_classes));
            out.put_pixel((2 * w + x) as u32, y as u32, class_color(objects[[y, x]] as usize, object_classes));
        }
    }
    out
}
