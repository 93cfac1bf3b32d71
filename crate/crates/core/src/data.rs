//! Recordings, the synthetic dataset generator and inertial augmentation.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::Matrix2;

/// Minimum inertial length: one signal-image window.
pub const MIN_INERTIAL_LEN: usize = 52;

/// Channel names in storage order.
pub const INERTIAL_CHANNELS: [&str; 6] = ["ax", "ay", "az", "gx", "gy", "gz"];

/// Six synchronized inertial series: acceleration in g, angular velocity in
/// deg/s.
#[derive(Debug, Clone, PartialEq)]
pub struct InertialRecording {
    sample_rate: f64,
    sequences: [Vec<f64>; 6],
    pub label: u32,
    pub subject: u32,
    pub trial: u32,
}

impl InertialRecording {
    pub fn new(
        sample_rate: f64,
        sequences: [Vec<f64>; 6],
        label: u32,
        subject: u32,
        trial: u32,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(invalid!("sample rate must be positive, got {}", sample_rate));
        }
        let len = sequences[0].len();
        if let Some(i) = sequences.iter().position(|s| s.len() != len) {
            return Err(shape_err!(
                "sequence {} has {} samples, sequence 0 has {}",
                i,
                sequences[i].len(),
                len
            ));
        }
        if len < MIN_INERTIAL_LEN {
            return Err(invalid!(
                "inertial recording needs at least {} samples, got {}",
                MIN_INERTIAL_LEN,
                len
            ));
        }
        for (i, s) in sequences.iter().enumerate() {
            if let Some(j) = s.iter().position(|v| !v.is_finite()) {
                return Err(invalid!("non-finite value in sequence {} at sample {}", i, j));
            }
        }
        Ok(Self {
            sample_rate,
            sequences,
            label,
            subject,
            trial,
        })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn sequences(&self) -> &[Vec<f64>; 6] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A depth video, one `rows × cols` map in millimetres per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthRecording {
    rows: usize,
    cols: usize,
    frames: Vec<Matrix2>,
    pub label: u32,
    pub subject: u32,
    pub trial: u32,
}

impl DepthRecording {
    pub fn new(frames: Vec<Matrix2>, label: u32, subject: u32, trial: u32) -> Result<Self> {
        let (rows, cols) = frames
            .first()
            .ok_or_else(|| invalid!("depth recording has no frames"))?
            .dims();
        if rows == 0 || cols == 0 {
            return Err(invalid!("depth frames are {}x{}", rows, cols));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dims() != (rows, cols) {
                return Err(shape_err!(
                    "frame {} is {}x{}, frame 0 is {}x{}",
                    i,
                    f.rows(),
                    f.cols(),
                    rows,
                    cols
                ));
            }
            if f.data().iter().any(|&v| v < 0.0) {
                return Err(invalid!("frame {} has negative depth", i));
            }
        }
        Ok(Self {
            rows,
            cols,
            frames,
            label,
            subject,
            trial,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn frames(&self) -> &[Matrix2] {
        &self.frames
    }

    /// `(rows, cols, frames)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.frames.len())
    }
}

/// One action captured by both sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionInstance {
    pub id: usize,
    pub label: u32,
    pub inertial: InertialRecording,
    pub depth: DepthRecording,
}

impl ActionInstance {
    pub fn new(id: usize, inertial: InertialRecording, depth: DepthRecording) -> Result<Self> {
        if inertial.label != depth.label {
            return Err(invalid!(
                "instance {}: inertial label {} disagrees with depth label {}",
                id,
                inertial.label,
                depth.label
            ));
        }
        Ok(Self {
            id,
            label: inertial.label,
            inertial,
            depth,
        })
    }
}

/// Parameters of [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Noise level relative to the clean template amplitude.
    pub noise: f64,
    pub frames: usize,
    pub depth_size: usize,
    pub inertial_len: usize,
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_classes: 4,
            n_per_class: 40,
            noise: 0.5,
            frames: 4,
            depth_size: 32,
            inertial_len: 104,
            sample_rate: 50.0,
        }
    }
}

const BACKGROUND_MM: f64 = 3000.0;
const BLOB_MM: f64 = 800.0;

/// Class template. Classes factor into a spatial index (where the blob moves
/// in the front view) and a depth-motion index (how fast it oscillates toward
/// the camera). Front-view frames mostly reveal the former, inertial series
/// mostly the latter; each modality leaks a little of the other.
#[derive(Debug, Clone, Copy)]
struct Template {
    center: (f64, f64),
    radius: f64,
    z_freq: f64,
}

impl Template {
    fn for_class(class: usize, n_classes: usize) -> Self {
        let side = (1..).find(|s| s * s >= n_classes).unwrap_or(1);
        let spatial = class % side;
        let depth = class / side;
        let angle = 2.0 * PI * spatial as f64 / side as f64;
        Self {
            center: (0.5 + 0.22 * libm::cos(angle), 0.5 + 0.22 * libm::sin(angle)),
            radius: 0.12 * (1.0 + 0.25 * spatial as f64),
            z_freq: 1.0 + depth as f64,
        }
    }

    /// Position at normalized time `t ∈ [0,1]` (x, y in frame units, z in [−1,1]).
    fn position(&self, t: f64) -> (f64, f64, f64) {
        let a = 2.0 * PI * t;
        (
            self.center.0 + self.radius * libm::cos(a),
            self.center.1 + self.radius * libm::sin(a),
            libm::sin(2.0 * PI * self.z_freq * t),
        )
    }

    /// First and second time derivatives (per unit normalized time).
    fn derivatives(&self, t: f64) -> ([f64; 3], [f64; 3]) {
        let w = 2.0 * PI;
        let wz = 2.0 * PI * self.z_freq;
        let a = w * t;
        let az = wz * t;
        let vel = [
            -self.radius * w * libm::sin(a),
            self.radius * w * libm::cos(a),
            wz * libm::cos(az),
        ];
        let acc = [
            -self.radius * w * w * libm::cos(a),
            -self.radius * w * w * libm::sin(a),
            -wz * wz * libm::sin(az),
        ];
        (vel, acc)
    }
}

fn clean_inertial(tpl: &Template, len: usize) -> [Vec<f64>; 6] {
    let mut seqs: [Vec<f64>; 6] = Default::default();
    for i in 0..len {
        let t = i as f64 / (len - 1) as f64;
        let (vel, acc) = tpl.derivatives(t);
        // accelerations in g-like units, rates in deg/s-like units
        seqs[0].push(acc[0] * 0.25);
        seqs[1].push(acc[1] * 0.25);
        seqs[2].push(acc[2] * 0.02);
        seqs[3].push(vel[2] * 2.0);
        seqs[4].push(vel[0] * 20.0);
        seqs[5].push(vel[1] * 20.0);
    }
    seqs
}

fn render_frame(tpl: &Template, t: f64, size: usize) -> Matrix2 {
    let (x, y, z) = tpl.position(t);
    let r = 0.08 * (1.0 + 0.2 * z);
    let denom = 2.0 * r * r;
    Matrix2::from_fn(size, size, |row, col| {
        let v = (row as f64 + 0.5) / size as f64;
        let u = (col as f64 + 0.5) / size as f64;
        let d2 = (u - x) * (u - x) + (v - y) * (v - y);
        BACKGROUND_MM - BLOB_MM * libm::exp(-d2 / denom)
    })
}

/// Generates a labelled multimodal dataset; a pure function of `cfg`.
///
/// Every instance renders its class template into depth frames (a Gaussian
/// blob moving along the template trajectory) and into six inertial series
/// (the trajectory's derivatives). `noise` scales additive Gaussian noise on
/// both modalities relative to their clean amplitudes; at zero all instances
/// of a class are identical.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<ActionInstance>> {
    if cfg.n_classes < 2 {
        return Err(invalid!("need at least 2 classes, got {}", cfg.n_classes));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(invalid!("noise must be non-negative, got {}", cfg.noise));
    }
    if cfg.frames == 0 || cfg.depth_size == 0 {
        return Err(invalid!("need at least one non-empty depth frame"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(cfg.n_classes * cfg.n_per_class);
    for class in 0..cfg.n_classes {
        let tpl = Template::for_class(class, cfg.n_classes);
        let clean = clean_inertial(&tpl, cfg.inertial_len);
        let frames: Vec<Matrix2> = (0..cfg.frames)
            .map(|f| {
                let t = if cfg.frames == 1 {
                    0.5
                } else {
                    f as f64 / (cfg.frames - 1) as f64
                };
                render_frame(&tpl, t, cfg.depth_size)
            })
            .collect();
        for k in 0..cfg.n_per_class {
            let id = out.len();
            let mut seqs = clean.clone();
            for s in seqs.iter_mut() {
                let amp = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
                for v in s.iter_mut() {
                    *v += cfg.noise * amp * std_normal.sample(&mut rng);
                }
            }
            let noisy_frames: Vec<Matrix2> = frames
                .iter()
                .map(|f| {
                    let data = f
                        .data()
                        .iter()
                        .map(|&v| (v + cfg.noise * 0.25 * BLOB_MM * std_normal.sample(&mut rng)).max(0.0))
                        .collect();
                    Matrix2::new(f.rows(), f.cols(), data)
                })
                .collect::<Result<Vec<_>>>()?;

            let label = class as u32;
            let subject = (k % 8) as u32 + 1;
            let trial = (k / 8) as u32 + 1;
            let inertial = InertialRecording::new(cfg.sample_rate, seqs, label, subject, trial)?;
            let depth = DepthRecording::new(noisy_frames, label, subject, trial)?;
            out.push(ActionInstance::new(id, inertial, depth)?);
        }
    }
    Ok(out)
}

/// Parameters of [`augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub n_jitter: usize,
    pub n_scale: usize,
    /// Standard deviation of additive jitter, in signal units.
    pub jitter_sigma: f64,
    /// Inclusive range of per-channel amplitude factors.
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_jitter: 1,
            n_scale: 1,
            jitter_sigma: 0.05,
            scale_range: (0.7, 1.3),
        }
    }
}

/// Returns the original recording followed by `n_jitter` jittered copies and
/// `n_scale` amplitude-scaled copies. Labels and lengths never change.
pub fn augment(
    r: &InertialRecording,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Vec<InertialRecording>> {
    let (lo, hi) = cfg.scale_range;
    if !(cfg.jitter_sigma >= 0.0 && cfg.jitter_sigma.is_finite()) {
        return Err(invalid!("jitter sigma must be non-negative"));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(invalid!("bad scale range [{}, {}]", lo, hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| invalid!("{}", e))?;
    let factor = Uniform::new_inclusive(lo, hi).map_err(|e| invalid!("{}", e))?;
    let mut out = Vec::with_capacity(1 + cfg.n_jitter + cfg.n_scale);
    out.push(r.clone());
    for _ in 0..cfg.n_jitter {
        let mut copy = r.clone();
        for s in copy.sequences.iter_mut() {
            for v in s.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        out.push(copy);
    }
    for _ in 0..cfg.n_scale {
        let mut copy = r.clone();
        for s in copy.sequences.iter_mut() {
            let f: f64 = rng.sample(factor);
            for v in s.iter_mut() {
                *v *= f;
            }
        }
        out.push(copy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small_cfg(seed: u64, noise: f64) -> SynthConfig {
        SynthConfig {
            seed,
            n_classes: 3,
            n_per_class: 4,
            noise,
            frames: 3,
            depth_size: 12,
            inertial_len: 60,
            sample_rate: 50.0,
        }
    }

    fn recording(len: usize) -> InertialRecording {
        let seqs: [Vec<f64>; 6] =
            core::array::from_fn(|c| (0..len).map(|i| (i * (c + 1)) as f64 * 0.01).collect());
        InertialRecording::new(50.0, seqs, 2, 1, 1).unwrap()
    }

    #[test]
    fn inertial_invariants() {
        let short: [Vec<f64>; 6] = core::array::from_fn(|_| vec![0.0; 51]);
        assert!(InertialRecording::new(50.0, short, 0, 0, 0).is_err());
        let mut ragged: [Vec<f64>; 6] = core::array::from_fn(|_| vec![0.0; 60]);
        ragged[3].pop();
        assert!(InertialRecording::new(50.0, ragged, 0, 0, 0).is_err());
        let ok: [Vec<f64>; 6] = core::array::from_fn(|_| vec![0.0; 52]);
        assert!(InertialRecording::new(0.0, ok.clone(), 0, 0, 0).is_err());
        assert_eq!(InertialRecording::new(50.0, ok, 0, 0, 0).unwrap().len(), 52);
    }

    #[test]
    fn depth_invariants() {
        assert!(DepthRecording::new(vec![], 0, 0, 0).is_err());
        let frames = vec![Matrix2::zeros(2, 2), Matrix2::zeros(2, 3)];
        assert!(DepthRecording::new(frames, 0, 0, 0).is_err());
        let neg = vec![Matrix2::filled(2, 2, -1.0)];
        assert!(DepthRecording::new(neg, 0, 0, 0).is_err());
        let d = DepthRecording::new(vec![Matrix2::zeros(2, 2)], 0, 0, 0).unwrap();
        assert_eq!(d.dims(), (2, 2, 1));
    }

    #[test]
    fn instance_labels_must_agree() {
        let d = DepthRecording::new(vec![Matrix2::zeros(2, 2)], 1, 0, 0).unwrap();
        assert!(ActionInstance::new(0, recording(52), d).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_generate(&small_cfg(7, 0.3)).unwrap();
        let b = synth_generate(&small_cfg(7, 0.3)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small_cfg(8, 0.3)).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.len(), 12);
    }

    #[test]
    fn synth_zero_noise_classes_are_constant() {
        let data = synth_generate(&small_cfg(1, 0.0)).unwrap();
        for class in 0..3u32 {
            let members: Vec<_> = data.iter().filter(|i| i.label == class).collect();
            for m in &members[1..] {
                assert_eq!(m.inertial.sequences(), members[0].inertial.sequences());
            }
        }
        // distinct classes differ
        assert_ne!(data[0].inertial.sequences(), data[4].inertial.sequences());
    }

    #[test]
    fn synth_rejects_bad_config() {
        let mut cfg = small_cfg(0, 0.1);
        cfg.n_classes = 1;
        assert!(synth_generate(&cfg).is_err());
        let mut cfg = small_cfg(0, 0.1);
        cfg.noise = -1.0;
        assert!(synth_generate(&cfg).is_err());
    }

    #[test]
    fn augment_identity_and_counts() {
        let r = recording(64);
        let cfg = AugmentConfig {
            n_jitter: 2,
            n_scale: 3,
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
        };
        let out = augment(&r, &cfg, 5).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|c| *c == r));
    }

    #[test]
    fn augment_preserves_labels_and_lengths() {
        let r = recording(70);
        let out = augment(&r, &AugmentConfig::default(), 9).unwrap();
        assert_eq!(out.len(), 3);
        for c in &out {
            assert_eq!(c.label, r.label);
            assert_eq!(c.len(), r.len());
        }
        assert_ne!(out[1], r);
        assert_ne!(out[2], r);
        assert_eq!(out, augment(&r, &AugmentConfig::default(), 9).unwrap());
    }
}
