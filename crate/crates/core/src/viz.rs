//! SVG overlays of attended regions on the input raster.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transform::{region_box, PixelRect, TransformParams};

/// Stroke colors by iteration index, cycled when K exceeds the palette.
pub const PALETTE: [&str; 8] = [
    "#00c000", "#e02020", "#2060ff", "#ff9900", "#c000c0", "#00b0b0", "#806000", "#ffffff",
];

/// Fixed-precision number so output bytes do not depend on float printing.
fn num(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Region boxes in image pixels, one per transform.
pub fn region_boxes(transforms: &[TransformParams], img_h: usize, img_w: usize) -> Vec<PixelRect> {
    transforms
        .iter()
        .map(|&p| region_box(p, img_w as f64, img_h as f64))
        .collect()
}

/// Renders a `3×H×W` image in `[0, 1]` with one rectangle per transform.
/// `scale` is the number of SVG units per pixel.
pub fn render_svg(image: &Tensor<f32>, transforms: &[TransformParams], scale: usize) -> Result<String> {
    let (c, h, w) = image.chw()?;
    if c != 3 {
        return Err(Error::dim(format!("expected an RGB image, got shape {:?}", image.shape())));
    }
    if scale == 0 {
        return Err(Error::config("svg scale must be at least 1"));
    }
    let d = image.data();
    let plane = h * w;
    let rgb = |y: usize, x: usize| {
        let p = y * w + x;
        (to_byte(d[p]), to_byte(d[plane + p]), to_byte(d[2 * plane + p]))
    };
    let (sw, sh) = (w * scale, h * scale);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{sw}" height="{sh}" viewBox="0 0 {sw} {sh}" shape-rendering="crispEdges">"#
    );
    s.push_str("<g id=\"image\">\n");
    // Horizontal runs of equal color keep the file small.
    for y in 0..h {
        let mut x = 0;
        while x < w {
            let color = rgb(y, x);
            let mut end = x + 1;
            while end < w && rgb(y, end) == color {
                end += 1;
            }
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{scale}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                x * scale,
                y * scale,
                (end - x) * scale,
                color.0,
                color.1,
                color.2
            );
            x = end;
        }
    }
    s.push_str("</g>\n<g id=\"regions\" fill=\"none\" stroke-width=\"1\">\n");
    let k_scale = scale as f64;
    for (k, r) in region_boxes(transforms, h, w).iter().enumerate() {
        let _ = writeln!(
            s,
            "<rect data-k=\"{}\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" stroke=\"{}\"/>",
            k + 1,
            num(r.x0 * k_scale),
            num(r.y0 * k_scale),
            num(r.width() * k_scale),
            num(r.height() * k_scale),
            PALETTE[k % PALETTE.len()]
        );
    }
    s.push_str("</g>\n</svg>\n");
    Ok(s)
}

pub const TRANSFORMS_HEADER: &str = "k,s_x,s_y,t_x,t_y";

/// One row per region, `k` counting from 1.
pub fn transforms_csv(transforms: &[TransformParams]) -> String {
    let mut s = format!("{TRANSFORMS_HEADER}\n");
    for (k, p) in transforms.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", k + 1, p.s_x, p.s_y, p.t_x, p.t_y);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Tensor<f32> {
        let mut t = Tensor::zeros(&[3, 4, 5]);
        t.data_mut()[0] = 1.0;
        t
    }

    #[test]
    fn identity_regions_cover_image() {
        let svg = render_svg(&image(), &[TransformParams::IDENTITY; 3], 2).unwrap();
        assert_eq!(svg.matches("width=\"10\" height=\"8\" stroke=").count(), 3);
        assert!(svg.contains("fill=\"#ff0000\""));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn rects_stay_inside_viewport() {
        let t = [
            TransformParams::new(3.0, 3.0, 2.0, -2.0),
            TransformParams::new(0.2, 0.4, -0.9, 0.9),
        ];
        for r in region_boxes(&t, 4, 5) {
            assert!(r.x0 >= 0.0 && r.y0 >= 0.0 && r.x1 <= 5.0 && r.y1 <= 4.0, "{r:?}");
        }
    }

    #[test]
    fn number_format() {
        assert_eq!(num(2.0), "2");
        assert_eq!(num(2.5), "2.5");
        assert_eq!(num(1.0 / 3.0), "0.333");
        assert_eq!(num(-0.0001), "0");
    }

    #[test]
    fn csv_rows() {
        let csv = transforms_csv(&[TransformParams::IDENTITY, TransformParams::new(0.5, 0.25, -0.5, 0.0)]);
        assert_eq!(csv, "k,s_x,s_y,t_x,t_y\n1,1,1,0,0\n2,0.5,0.25,-0.5,0\n");
    }

    #[test]
    fn rejects_gray_image() {
        assert!(render_svg(&Tensor::zeros(&[1, 4, 4]), &[], 1).is_err());
    }
}
