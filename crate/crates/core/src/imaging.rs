//! Image encodings of the two sensor streams.
//!
//! Inertial windows become signal images: the six channels are stacked row by
//! row in a fixed 24-row permutation so every pair of channels sits next to
//! each other somewhere, then normalized and resized. Depth frames become
//! sequential front-view images, one per frame.

use alloc::vec::Vec;

use crate::data::{DepthRecording, InertialRecording};
use crate::error::{invalid, Result};
use crate::tensor::Matrix2;

/// Side length of every image fed to the CNNs.
pub const IMAGE_SIZE: usize = 64;
/// Samples per signal-image window.
pub const SIGNAL_WINDOW: usize = 52;

const STACKING: [usize; 24] = [
    1, 2, 3, 4, 5, 6, 1, 3, 5, 2, 4, 6, 1, 4, 2, 5, 3, 6, 1, 5, 2, 6, 1, 6,
];

/// Row order of a signal image as 1-based channel ids.
pub fn stacking_order() -> [usize; 24] {
    STACKING
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Encoding parameters shared by both image builders.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagingConfig {
    pub window: usize,
    /// Fraction of a window shared with the next one, in `[0, 1)`.
    pub overlap: f64,
    pub size: usize,
    pub interpolation: Interpolation,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            window: SIGNAL_WINDOW,
            overlap: 0.5,
            size: IMAGE_SIZE,
            interpolation: Interpolation::Bilinear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalImage {
    pub pixels: Matrix2,
    pub label: u32,
    /// First sample of the window in the source recording.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SFImage {
    pub pixels: Matrix2,
    pub label: u32,
    pub frame_index: usize,
    pub instance: usize,
}

/// Min-max normalization to `[0, 1]`; a constant input maps to all 0.5.
pub fn normalize_unit(m: &Matrix2) -> Matrix2 {
    match m.min_max() {
        Some((lo, hi)) if hi > lo => {
            let inv = 1.0 / (hi - lo);
            m.map(|v| ((v - lo) * inv).clamp(0.0, 1.0))
        }
        _ => m.map(|_| 0.5),
    }
}

/// Bilinear resize with corner-aligned sampling: output corners coincide with
/// input corners.
pub fn resize_bilinear(img: &Matrix2, out_rows: usize, out_cols: usize) -> Result<Matrix2> {
    check_resize(img, out_rows, out_cols)?;
    if img.dims() == (out_rows, out_cols) {
        return Ok(img.clone());
    }
    let ry = axis_scale(img.rows(), out_rows);
    let rx = axis_scale(img.cols(), out_cols);
    Ok(Matrix2::from_fn(out_rows, out_cols, |r, c| {
        let (y0, y1, fy) = axis_taps(r as f64 * ry, img.rows());
        let (x0, x1, fx) = axis_taps(c as f64 * rx, img.cols());
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bottom = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Nearest-neighbour resize on the same corner-aligned grid.
pub fn resize_nearest(img: &Matrix2, out_rows: usize, out_cols: usize) -> Result<Matrix2> {
    check_resize(img, out_rows, out_cols)?;
    let ry = axis_scale(img.rows(), out_rows);
    let rx = axis_scale(img.cols(), out_cols);
    Ok(Matrix2::from_fn(out_rows, out_cols, |r, c| {
        let y = libm::round(r as f64 * ry) as usize;
        let x = libm::round(c as f64 * rx) as usize;
        img.get(y.min(img.rows() - 1), x.min(img.cols() - 1))
    }))
}

pub fn resize(img: &Matrix2, out_rows: usize, out_cols: usize, how: Interpolation) -> Result<Matrix2> {
    match how {
        Interpolation::Bilinear => resize_bilinear(img, out_rows, out_cols),
        Interpolation::Nearest => resize_nearest(img, out_rows, out_cols),
    }
}

fn check_resize(img: &Matrix2, out_rows: usize, out_cols: usize) -> Result<()> {
    if out_rows == 0 || out_cols == 0 {
        return Err(invalid!("resize target {}x{}", out_rows, out_cols));
    }
    if img.rows() == 0 || img.cols() == 0 {
        return Err(invalid!("resize source {}x{}", img.rows(), img.cols()));
    }
    Ok(())
}

fn axis_scale(input: usize, output: usize) -> f64 {
    if output == 1 {
        0.0
    } else {
        (input - 1) as f64 / (output - 1) as f64
    }
}

fn axis_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let lo = (libm::floor(pos) as usize).min(len - 1);
    let hi = (lo + 1).min(len - 1);
    (lo, hi, pos - lo as f64)
}

/// Window start offsets for a sliding window with the given overlap. The
/// step is `round(window · (1 − overlap))`, at least one sample.
pub fn window_starts(len: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if window == 0 {
        return Err(invalid!("window must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(invalid!("overlap must lie in [0, 1), got {}", overlap));
    }
    if len < window {
        return Err(invalid!(
            "recording of {} samples is shorter than the {}-sample window",
            len,
            window
        ));
    }
    let step = (libm::round(window as f64 * (1.0 - overlap)) as usize).max(1);
    Ok((0..=len - window).step_by(step).collect())
}

/// The `24 × window` stack for one window, before normalization.
pub fn signal_stack(r: &InertialRecording, start: usize, window: usize) -> Result<Matrix2> {
    if start + window > r.len() {
        return Err(invalid!(
            "window [{}, {}) exceeds recording length {}",
            start,
            start + window,
            r.len()
        ));
    }
    let seqs = r.sequences();
    let mut data = Vec::with_capacity(STACKING.len() * window);
    for &id in STACKING.iter() {
        data.extend_from_slice(&seqs[id - 1][start..start + window]);
    }
    Matrix2::new(STACKING.len(), window, data)
}

/// Signal images for every window of `r`.
pub fn build_signal_images(r: &InertialRecording, cfg: &ImagingConfig) -> Result<Vec<SignalImage>> {
    window_starts(r.len(), cfg.window, cfg.overlap)?
        .into_iter()
        .map(|start| {
            let stack = normalize_unit(&signal_stack(r, start, cfg.window)?);
            let pixels = resize(&stack, cfg.size, cfg.size, cfg.interpolation)?;
            Ok(SignalImage {
                pixels,
                label: r.label,
                start,
            })
        })
        .collect()
}

/// One front-view image per depth frame.
pub fn build_sfis(d: &DepthRecording, instance: usize, cfg: &ImagingConfig) -> Result<Vec<SFImage>> {
    d.frames()
        .iter()
        .enumerate()
        .map(|(frame_index, f)| {
            let pixels = resize(&normalize_unit(f), cfg.size, cfg.size, cfg.interpolation)?;
            Ok(SFImage {
                pixels,
                label: d.label,
                frame_index,
                instance,
            })
        })
        .collect()
}

const PREWITT_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0], [-1.0, 0.0, 1.0]];
const PREWITT_Y: [[f64; 3]; 3] = [[-1.0, -1.0, -1.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];

/// Prewitt gradient magnitude `√(Gx² + Gy²)`, same size as the input.
/// Borders replicate the nearest pixel so flat regions give zero response
/// everywhere.
pub fn prewitt_magnitude(img: &Matrix2) -> Matrix2 {
    let (rows, cols) = (img.rows() as isize, img.cols() as isize);
    let at = |r: isize, c: isize| img.get(r.clamp(0, rows - 1) as usize, c.clamp(0, cols - 1) as usize);
    Matrix2::from_fn(img.rows(), img.cols(), |r, c| {
        let (mut gx, mut gy) = (0.0, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let v = at(r as isize + i as isize - 1, c as isize + j as isize - 1);
                gx += PREWITT_X[i][j] * v;
                gy += PREWITT_Y[i][j] * v;
            }
        }
        libm::sqrt(gx * gx + gy * gy)
    })
}

/// Prewitt gradient magnitude renormalized to `[0, 1]`.
pub fn prewitt(img: &Matrix2) -> Matrix2 {
    normalize_unit(&prewitt_magnitude(img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn recording(len: usize, f: impl Fn(usize, usize) -> f64) -> InertialRecording {
        let seqs: [Vec<f64>; 6] = core::array::from_fn(|c| (0..len).map(|i| f(c, i)).collect());
        InertialRecording::new(50.0, seqs, 3, 1, 1).unwrap()
    }

    fn rotate(m: &Matrix2) -> Matrix2 {
        Matrix2::from_fn(m.cols(), m.rows(), |r, c| m.get(c, m.cols() - 1 - r))
    }

    #[test]
    fn stacking_order_contract() {
        let order = stacking_order();
        assert_eq!(order.len(), 24);
        assert_eq!(&order[..6], &[1, 2, 3, 4, 5, 6]);
        let digits: Vec<usize> = "123456135246142536152616"
            .bytes()
            .map(|b| (b - b'0') as usize)
            .collect();
        assert_eq!(order.to_vec(), digits);
    }

    #[test]
    fn every_pair_is_adjacent() {
        let order = stacking_order();
        let mut seen = [[false; 7]; 7];
        for w in order.windows(2) {
            seen[w[0]][w[1]] = true;
            seen[w[1]][w[0]] = true;
        }
        let mut pairs = 0;
        for i in 1..=6 {
            for j in i + 1..=6 {
                assert!(seen[i][j], "pair {{{},{}}} never adjacent", i, j);
                pairs += 1;
            }
        }
        assert_eq!(pairs, 15);
    }

    #[test]
    fn stack_rows_follow_order() {
        let r = recording(52, |c, i| (c * 1000 + i) as f64);
        let s = signal_stack(&r, 0, 52).unwrap();
        assert_eq!(s.dims(), (24, 52));
        for (row, &id) in stacking_order().iter().enumerate() {
            assert_eq!(s.get(row, 7), ((id - 1) * 1000 + 7) as f64);
        }
    }

    #[test]
    fn constant_signals_give_half_image() {
        let r = recording(52, |_, _| 1.25);
        let imgs = build_signal_images(&r, &ImagingConfig::default()).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].pixels, Matrix2::filled(64, 64, 0.5));
    }

    #[test]
    fn window_counts() {
        let cfg = ImagingConfig::default();
        let r = recording(52, |c, i| (c + i) as f64);
        assert_eq!(build_signal_images(&r, &cfg).unwrap().len(), 1);
        let r = recording(104, |c, i| (c * i) as f64);
        let imgs = build_signal_images(&r, &cfg).unwrap();
        assert_eq!(imgs.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 26, 52]);
        for img in &imgs {
            assert_eq!(img.pixels.dims(), (64, 64));
            assert!(img.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(img.label, 3);
        }
    }

    #[test]
    fn short_recording_rejected() {
        let r = recording(60, |c, i| (c + i) as f64);
        let cfg = ImagingConfig {
            window: 61,
            ..ImagingConfig::default()
        };
        assert!(build_signal_images(&r, &cfg).is_err());
        assert!(window_starts(10, 5, 1.0).is_err());
    }

    #[test]
    fn sfis_one_per_frame() {
        let frames: Vec<Matrix2> = (0..10)
            .map(|f| Matrix2::from_fn(20, 30, |r, c| (r * c + f) as f64))
            .collect();
        let d = DepthRecording::new(frames, 1, 1, 1).unwrap();
        let sfis = build_sfis(&d, 4, &ImagingConfig::default()).unwrap();
        assert_eq!(sfis.len(), 10);
        for (i, s) in sfis.iter().enumerate() {
            assert_eq!(s.frame_index, i);
            assert_eq!(s.instance, 4);
            assert_eq!(s.pixels.dims(), (64, 64));
            assert!(s.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sfi_zero_frame_and_native_size() {
        let d = DepthRecording::new(vec![Matrix2::zeros(8, 8)], 0, 0, 0).unwrap();
        let s = build_sfis(&d, 0, &ImagingConfig::default()).unwrap();
        assert_eq!(s[0].pixels, Matrix2::filled(64, 64, 0.5));

        let frame = Matrix2::from_fn(64, 64, |r, c| (r * 64 + c) as f64);
        let d = DepthRecording::new(vec![frame.clone()], 0, 0, 0).unwrap();
        let s = build_sfis(&d, 0, &ImagingConfig::default()).unwrap();
        assert_eq!(s[0].pixels, normalize_unit(&frame));
    }

    #[test]
    fn bilinear_examples() {
        let img = Matrix2::from_fn(5, 3, |r, c| (r + 7 * c) as f64);
        assert_eq!(resize_bilinear(&img, 5, 3).unwrap(), img);

        let ramp = Matrix2::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]);
        let up = resize_bilinear(&ramp, 4, 4).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((up.get(r, c) - c as f64 / 3.0).abs() < 1e-15);
            }
        }

        for (rows, cols) in [(1, 1), (3, 8), (13, 5)] {
            let out = resize_bilinear(&Matrix2::filled(rows, cols, 7.0), 9, 4).unwrap();
            assert!(out.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn nearest_resize() {
        let img = Matrix2::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = resize_nearest(&img, 3, 3).unwrap();
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(2, 2), 4.0);
        assert_eq!(out.dims(), (3, 3));
    }

    #[test]
    fn prewitt_constant_is_flat() {
        let m = prewitt_magnitude(&Matrix2::filled(6, 6, 3.0));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prewitt_step_edge() {
        // columns 0..2 dark, 2..5 bright
        let img = Matrix2::from_fn(5, 5, |_, c| if c >= 2 { 1.0 } else { 0.0 });
        let m = prewitt_magnitude(&img);
        // by hand: Gx = sum over 3 rows of (x[c+1] - x[c-1]), Gy = 0
        let expected_cols = [0.0, 3.0, 3.0, 0.0, 0.0];
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m.get(r, c), expected_cols[c]);
            }
        }
        let n = prewitt(&img);
        assert_eq!(n.get(2, 1), 1.0);
        assert_eq!(n.get(2, 4), 0.0);
    }

    #[test]
    fn prewitt_rotation_invariant_magnitude() {
        let img = Matrix2::from_fn(7, 9, |r, c| ((r * 3 + c * c) % 5) as f64);
        let a = rotate(&prewitt_magnitude(&img));
        let b = prewitt_magnitude(&rotate(&img));
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
