//! 8-bit sRGB ⇄ CIE L\*a\*b\* (D65) and the value maps the networks consume.
//!
//! Generator inputs: `L′ = L/50 − 1`, `a′ = a/128`, `b′ = b/128`, all in
//! `[−1, 1]`.

use std::sync::OnceLock;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear sRGB → XYZ, D65 (IEC 61966-2-1).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

pub const L_MAX: f64 = 100.0;
pub const AB_MAX: f64 = 128.0;

const DELTA: f64 = 6.0 / 29.0;

/// Reference white: the XYZ image of linear (1, 1, 1).
fn white() -> [f64; 3] {
    [
        RGB_TO_XYZ[0].iter().sum(),
        RGB_TO_XYZ[1].iter().sum(),
        RGB_TO_XYZ[2].iter().sum(),
    ]
}

fn xyz_to_rgb() -> &'static Matrix3<f64> {
    static INV: OnceLock<Matrix3<f64>> = OnceLock::new();
    INV.get_or_init(|| {
        let m = Matrix3::from_fn(|i, j| RGB_TO_XYZ[i][j]);
        m.try_inverse().expect("sRGB primaries matrix is invertible")
    })
}

fn decode_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0; 256];
        for (i, v) in lut.iter_mut().enumerate() {
            *v = srgb_decode(i as f64 / 255.0);
        }
        lut
    })
}

/// sRGB transfer function, encoded → linear.
pub fn srgb_decode(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB transfer function, linear → encoded.
pub fn srgb_encode(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    if f > DELTA {
        f * f * f
    } else {
        3.0 * DELTA * DELTA * (f - 4.0 / 29.0)
    }
}

/// One 8-bit sRGB triple to `(L, a, b)`.
pub fn rgb_to_lab_pixel(rgb: [u8; 3]) -> [f64; 3] {
    let lut = decode_lut();
    let lin = [lut[rgb[0] as usize], lut[rgb[1] as usize], lut[rgb[2] as usize]];
    let w = white();
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let v = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(v / w[i]);
    }
    [
        (116.0 * f[1] - 16.0).clamp(0.0, L_MAX),
        (500.0 * (f[0] - f[1])).clamp(-AB_MAX, AB_MAX),
        (200.0 * (f[1] - f[2])).clamp(-AB_MAX, AB_MAX),
    ]
}

/// `(L, a, b)` to 8-bit sRGB; the flag is set when any channel had to be
/// clamped into `[0, 255]`.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> ([u8; 3], bool) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = nalgebra::Vector3::new(lab_f_inv(fx) * w[0], lab_f_inv(fy) * w[1], lab_f_inv(fz) * w[2]);
    let lin = xyz_to_rgb() * xyz;
    let mut clipped = false;
    let mut out = [0u8; 3];
    for (o, &l) in out.iter_mut().zip(lin.iter()) {
        let v = srgb_encode(l.max(0.0)) * 255.0;
        if !(-0.5..=255.5).contains(&v) {
            clipped = true;
        }
        *o = v.round().clamp(0.0, 255.0) as u8;
    }
    (out, clipped)
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "RgbImage",
                format!("{height}x{width} needs {} bytes, got {}", height * width * 3, data.len()),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }
}

/// Planar L\*a\*b\* image with `L ∈ [0,100]`, `a, b ∈ [−128,128]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    l: Vec<f32>,
    a: Vec<f32>,
    b: Vec<f32>,
}

impl LabImage {
    pub fn new(height: usize, width: usize, l: Vec<f32>, a: Vec<f32>, b: Vec<f32>) -> Result<Self> {
        let n = height * width;
        if l.len() != n || a.len() != n || b.len() != n {
            return Err(Error::shape("LabImage", format!("planes must hold {n} values")));
        }
        let in_range = |v: &[f32], lo: f32, hi: f32| v.iter().all(|x| (lo..=hi).contains(x));
        if !in_range(&l, 0.0, L_MAX as f32) {
            return Err(Error::arg("LabImage", "L outside [0, 100]"));
        }
        if !in_range(&a, -AB_MAX as f32, AB_MAX as f32) || !in_range(&b, -AB_MAX as f32, AB_MAX as f32) {
            return Err(Error::arg("LabImage", "a/b outside [-128, 128]"));
        }
        Ok(Self { height, width, l, a, b })
    }

    pub fn l(&self) -> &[f32] {
        &self.l
    }

    pub fn a(&self) -> &[f32] {
        &self.a
    }

    pub fn b(&self) -> &[f32] {
        &self.b
    }
}

pub fn srgb_to_lab(img: &RgbImage) -> LabImage {
    let n = img.height * img.width;
    let (mut l, mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in img.data.chunks_exact(3) {
        let lab = rgb_to_lab_pixel([px[0], px[1], px[2]]);
        l.push(lab[0] as f32);
        a.push(lab[1] as f32);
        b.push(lab[2] as f32);
    }
    LabImage {
        height: img.height,
        width: img.width,
        l,
        a,
        b,
    }
}

pub fn lab_to_srgb(img: &LabImage) -> RgbImage {
    lab_to_srgb_counted(img).0
}

/// [`lab_to_srgb`] plus the number of pixels that fell outside the gamut.
pub fn lab_to_srgb_counted(img: &LabImage) -> (RgbImage, usize) {
    let mut data = Vec::with_capacity(img.l.len() * 3);
    let mut clipped = 0;
    for i in 0..img.l.len() {
        let (rgb, c) = lab_to_rgb_pixel([f64::from(img.l[i]), f64::from(img.a[i]), f64::from(img.b[i])]);
        data.extend_from_slice(&rgb);
        clipped += usize::from(c);
    }
    (
        RgbImage {
            height: img.height,
            width: img.width,
            data,
        },
        clipped,
    )
}

/// Generator inputs: `1×H×W` lightness and `2×H×W` chroma, both in `[−1, 1]`.
pub fn normalize_for_generator(img: &LabImage) -> (Tensor, Tensor) {
    let (h, w) = (img.height, img.width);
    let l = img.l.iter().map(|&v| v / 50.0 - 1.0).collect();
    let ab = img
        .a
        .iter()
        .chain(img.b.iter())
        .map(|&v| v / AB_MAX as f32)
        .collect();
    (
        Tensor::from_parts(vec![1, h, w], l),
        Tensor::from_parts(vec![2, h, w], ab),
    )
}

/// Inverse of the lightness map, clamped into `[0, 100]`.
pub fn denormalize_l(v: f32) -> f32 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 50.0).clamp(0.0, L_MAX as f32)
}

/// Chroma planes from a `2×H×W` (or `1×2×H×W`) tensor of normalized values.
/// Values outside `[−1, 1]` are clamped before scaling.
pub fn denormalize_ab(t: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let s = t.shape();
    let ok = match s.len() {
        3 => s[0] == 2,
        4 => s[0] == 1 && s[1] == 2,
        _ => false,
    };
    if !ok {
        return Err(Error::shape("denormalize_ab", format!("expected 2×H×W, got {s:?}")));
    }
    let plane = t.len() / 2;
    let scale = |v: &f32| v.clamp(-1.0, 1.0) * AB_MAX as f32;
    Ok((
        t.data()[..plane].iter().map(scale).collect(),
        t.data()[plane..].iter().map(scale).collect(),
    ))
}

/// Assemble a Lab image from a normalized lightness plane and normalized
/// chroma tensor.
pub fn lab_from_normalized(height: usize, width: usize, l_norm: &[f32], ab: &Tensor) -> Result<LabImage> {
    if l_norm.len() != height * width || ab.len() != 2 * height * width {
        return Err(Error::shape(
            "lab_from_normalized",
            format!("{height}x{width} planes vs L {} / ab {:?}", l_norm.len(), ab.shape()),
        ));
    }
    let (a, b) = denormalize_ab(ab)?;
    let l = l_norm.iter().map(|&v| denormalize_l(v)).collect();
    LabImage::new(height, width, l, a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight-line textbook sRGB → XYZ(D65) → Lab, written independently
    /// of the module code (own constants, no LUT, published white point).
    fn oracle_lab(r: u8, g: u8, b: u8) -> [f64; 3] {
        let lin = |c: u8| {
            let c = c as f64 / 255.0;
            if c <= 0.04045 {
                c / 12.92
            } else {
                ((c + 0.055) / 1.055).powf(2.4)
            }
        };
        let (r, g, b) = (lin(r), lin(g), lin(b));
        let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
        let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
        let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
        let f = |t: f64| {
            if t > 216.0 / 24389.0 {
                t.powf(1.0 / 3.0)
            } else {
                (24389.0 / 27.0 * t + 16.0) / 116.0
            }
        };
        let (fx, fy, fz) = (f(x / 0.95047), f(y / 1.0), f(z / 1.08883));
        [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
    }

    #[test]
    fn oracle_red_reference() {
        let o = oracle_lab(255, 0, 0);
        assert!((o[0] - 53.24).abs() < 0.01 && (o[1] - 80.09).abs() < 0.01 && (o[2] - 67.20).abs() < 0.01, "{o:?}");
    }

    #[test]
    fn known_pixels() {
        let w = rgb_to_lab_pixel([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-9 && w[1].abs() < 0.01 && w[2].abs() < 0.01);
        assert_eq!(rgb_to_lab_pixel([0, 0, 0]), [0.0, 0.0, 0.0]);
        let red = rgb_to_lab_pixel([255, 0, 0]);
        let o = oracle_lab(255, 0, 0);
        for i in 0..3 {
            assert!((red[i] - o[i]).abs() < 1e-4, "{red:?} vs {o:?}");
        }
    }

    #[test]
    fn matches_oracle_on_random_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let p: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
            let got = rgb_to_lab_pixel(p);
            let want = oracle_lab(p[0], p[1], p[2]);
            for i in 0..3 {
                assert!((got[i] - want[i]).abs() < 1e-4, "{p:?}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(lab_to_rgb_pixel([100.0, 0.0, 0.0]).0, [255, 255, 255]);
        let (rgb, _) = lab_to_rgb_pixel([53.24, 80.09, 67.20]);
        assert!(rgb[0] >= 254 && rgb[1] <= 1 && rgb[2] <= 1, "{rgb:?}");
    }

    #[test]
    fn grays_are_achromatic_and_monotone() {
        let mut prev = -1.0;
        for v in 0..=255u8 {
            let lab = rgb_to_lab_pixel([v, v, v]);
            assert!(lab[1].abs() < 0.01 && lab[2].abs() < 0.01, "{v}: {lab:?}");
            assert!(lab[0] > prev);
            prev = lab[0];
            assert_eq!(lab_to_rgb_pixel(lab).0, [v, v, v]);
        }
    }

    #[test]
    fn out_of_gamut_is_counted() {
        let img = LabImage::new(1, 2, vec![50.0, 50.0], vec![0.0, 127.0], vec![0.0, -127.0]).unwrap();
        let (_, clipped) = lab_to_srgb_counted(&img);
        assert_eq!(clipped, 1);
    }

    #[test]
    fn normalization_examples() {
        let img = LabImage::new(1, 3, vec![50.0, 100.0, 25.0], vec![0.0, 128.0, 64.0], vec![0.0, -128.0, 0.0]).unwrap();
        let (l, ab) = normalize_for_generator(&img);
        assert_eq!(l.data(), &[0.0, 1.0, -0.5]);
        assert_eq!(&ab.data()[..3], &[0.0, 1.0, 0.5]);
        assert_eq!(&ab.data()[3..], &[0.0, -1.0, 0.0]);
        let (a, b) = denormalize_ab(&ab).unwrap();
        assert_eq!(a, img.a());
        assert_eq!(b, img.b());
    }

    #[test]
    fn denormalize_clamps() {
        let t = Tensor::new(&[2, 1, 2], vec![0.0, 1.0, 1.5, -3.0]).unwrap();
        let (a, b) = denormalize_ab(&t).unwrap();
        assert_eq!(a, vec![0.0, 128.0]);
        assert_eq!(b, vec![128.0, -128.0]);
        assert!(denormalize_ab(&Tensor::zeros(&[3, 1, 1])).is_err());
    }

    #[test]
    fn lab_image_validates_ranges() {
        assert!(LabImage::new(1, 1, vec![101.0], vec![0.0], vec![0.0]).is_err());
        assert!(LabImage::new(1, 1, vec![50.0], vec![-129.0], vec![0.0]).is_err());
        assert!(LabImage::new(1, 2, vec![50.0], vec![0.0], vec![0.0]).is_err());
    }
}
