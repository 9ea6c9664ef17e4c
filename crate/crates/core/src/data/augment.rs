use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SliceSample;
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElasticParams {
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorAxes {
    /// Flip columns.
    pub horizontal: bool,
    /// Flip rows.
    pub vertical: bool,
}

/// Random transforms applied per slice. Each enabled transform fires with
/// `probability`; ranges are sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub enabled: bool,
    pub probability: f64,
    /// Degrees, counter-clockwise positive.
    pub rotation: Option<[f64; 2]>,
    pub scale: Option<[f64; 2]>,
    pub elastic: Option<ElasticParams>,
    pub gamma: Option<[f64; 2]>,
    pub mirror: Option<MirrorAxes>,
    pub intensity_shift: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            rotation: Some([-15.0, 15.0]),
            scale: Some([0.9, 1.1]),
            elastic: Some(ElasticParams {
                alpha: 100.0,
                sigma: 10.0,
            }),
            gamma: Some([0.8, 1.2]),
            mirror: Some(MirrorAxes {
                horizontal: true,
                vertical: false,
            }),
            intensity_shift: Some([-0.1, 0.1]),
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that leaves samples untouched.
    pub fn identity() -> Self {
        Self {
            enabled: false,
            probability: 0.0,
            rotation: None,
            scale: None,
            elastic: None,
            gamma: None,
            mirror: None,
            intensity_shift: None,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    fn is_identity(&self) -> bool {
        !self.enabled
            || self.probability <= 0.0
            || (self.rotation.is_none()
                && self.scale.is_none()
                && self.elastic.is_none()
                && self.gamma.is_none()
                && self.mirror.is_none()
                && self.intensity_shift.is_none())
    }

    /// Clamps unusable parameters, returning the corrected policy and a note
    /// per correction.
    pub fn sanitized(&self) -> (Self, Vec<String>) {
        let mut p = self.clone();
        let mut notes = Vec::new();
        if !(0.0..=1.0).contains(&p.probability) {
            let clamped = if p.probability.is_nan() { 0.0 } else { p.probability.clamp(0.0, 1.0) };
            notes.push(format!("probability {} clamped to {clamped}", p.probability));
            p.probability = clamped;
        }
        let fix_range = |name: &str, r: &mut Option<[f64; 2]>, min: Option<f64>, notes: &mut Vec<String>| {
            if let Some([lo, hi]) = *r {
                if !lo.is_finite() || !hi.is_finite() {
                    notes.push(format!("{name} range [{lo}, {hi}] is not finite; disabled"));
                    *r = None;
                    return;
                }
                let (mut lo, mut hi) = if lo <= hi { (lo, hi) } else {
                    notes.push(format!("{name} range [{lo}, {hi}] reversed"));
                    (hi, lo)
                };
                if let Some(m) = min {
                    if lo < m {
                        notes.push(format!("{name} lower bound {lo} raised to {m}"));
                        lo = m;
                        hi = hi.max(m);
                    }
                }
                *r = Some([lo, hi]);
            }
        };
        fix_range("rotation", &mut p.rotation, None, &mut notes);
        fix_range("scale", &mut p.scale, Some(1e-3), &mut notes);
        fix_range("gamma", &mut p.gamma, Some(1e-3), &mut notes);
        fix_range("intensity_shift", &mut p.intensity_shift, None, &mut notes);
        if let Some(e) = p.elastic {
            if !(e.sigma > 0.0) || !e.alpha.is_finite() || !e.sigma.is_finite() {
                notes.push(format!("elastic sigma {} / alpha {} unusable; disabled", e.sigma, e.alpha));
                p.elastic = None;
            } else if e.alpha < 0.0 {
                notes.push(format!("elastic alpha {} made positive", e.alpha));
                p.elastic = Some(ElasticParams { alpha: -e.alpha, ..e });
            }
        }
        (p, notes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub sample: SliceSample,
    /// Parameter corrections made before sampling.
    pub adjustments: Vec<String>,
}

/// Applies `policy` to `sample`. The random stream depends only on the
/// policy seed, the volume id and the slice index.
///
/// Geometric transforms move image and mask together (the mask is
/// interpolated and re-thresholded at 0.5); gamma and intensity shift touch
/// the image only.
pub fn augment(sample: &SliceSample, policy: &AugmentationPolicy) -> AugmentOutcome {
    let (policy, adjustments) = policy.sanitized();
    if policy.is_identity() {
        return AugmentOutcome {
            sample: sample.clone(),
            adjustments,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
        &policy.seed.to_le_bytes(),
        sample.volume_id.as_bytes(),
        &(sample.slice_index as u64).to_le_bytes(),
    ]));
    let fires = |rng: &mut ChaCha8Rng| rng.random_bool(policy.probability);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };

    let mut warp = Warp::default();
    if let Some(m) = policy.mirror {
        warp.flip_cols = m.horizontal && fires(&mut rng);
        warp.flip_rows = m.vertical && fires(&mut rng);
    }
    if let Some(r) = policy.rotation {
        if fires(&mut rng) {
            warp.angle = uniform(&mut rng, r).to_radians();
        }
    }
    if let Some(s) = policy.scale {
        if fires(&mut rng) {
            warp.scale = uniform(&mut rng, s);
        }
    }
    let (h, w) = sample.shape();
    if let Some(e) = policy.elastic {
        if fires(&mut rng) {
            warp.displacement = Some((
                elastic_field(&mut rng, h, w, e),
                elastic_field(&mut rng, h, w, e),
            ));
        }
    }
    let gamma = policy.gamma.filter(|_| fires(&mut rng)).map(|g| uniform(&mut rng, g));
    let shift = policy
        .intensity_shift
        .filter(|_| fires(&mut rng))
        .map(|s| uniform(&mut rng, s));

    let (mut image, mask) = if warp.is_identity() {
        (sample.image.clone(), sample.mask.clone())
    } else {
        let mask_f = sample.mask.mapv(f32::from);
        (
            warp.apply(&sample.image),
            warp.apply(&mask_f).mapv(|v| u8::from(v >= 0.5)),
        )
    };
    if let Some(g) = gamma {
        image.mapv_inplace(|v| v.clamp(0.0, 1.0).powf(g as f32));
    }
    if let Some(s) = shift {
        image.mapv_inplace(|v| (v + s as f32).clamp(0.0, 1.0));
    }
    AugmentOutcome {
        sample: SliceSample {
            image,
            mask,
            volume_id: sample.volume_id.clone(),
            slice_index: sample.slice_index,
        },
        adjustments,
    }
}

/// Inverse mapping from output pixels to source coordinates about the
/// image centre.
struct Warp {
    flip_rows: bool,
    flip_cols: bool,
    angle: f64,
    scale: f64,
    displacement: Option<(Array2<f64>, Array2<f64>)>,
}

impl Default for Warp {
    fn default() -> Self {
        Self {
            flip_rows: false,
            flip_cols: false,
            angle: 0.0,
            scale: 1.0,
            displacement: None,
        }
    }
}

impl Warp {
    fn is_identity(&self) -> bool {
        !self.flip_rows && !self.flip_cols && self.angle == 0.0 && self.scale == 1.0 && self.displacement.is_none()
    }

    fn apply(&self, src: &Array2<f32>) -> Array2<f32> {
        let (h, w) = src.dim();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (sin, cos) = self.angle.sin_cos();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut u = y as f64 - cy;
            let mut v = x as f64 - cx;
            if self.flip_rows {
                u = -u;
            }
            if self.flip_cols {
                v = -v;
            }
            let mut su = (cos * u + sin * v) / self.scale + cy;
            let mut sv = (-sin * u + cos * v) / self.scale + cx;
            if let Some((dy, dx)) = &self.displacement {
                su += dy[[y, x]];
                sv += dx[[y, x]];
            }
            bilinear(src, su, sv)
        })
    }
}

/// Bilinear sample with zeros outside the image. Coordinates within 1e-9 of
/// an integer snap to it.
fn bilinear(src: &Array2<f32>, y: f64, x: f64) -> f32 {
    let snap = |c: f64| if (c - c.round()).abs() < 1e-9 { c.round() } else { c };
    let (y, x) = (snap(y), snap(x));
    let (h, w) = src.dim();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            f64::from(src[[yy as usize, xx as usize]])
        }
    };
    let mut acc = at(y0, x0) * (1.0 - fy) * (1.0 - fx);
    if fx > 0.0 {
        acc += at(y0, x0 + 1.0) * (1.0 - fy) * fx;
    }
    if fy > 0.0 {
        acc += at(y0 + 1.0, x0) * fy * (1.0 - fx);
        if fx > 0.0 {
            acc += at(y0 + 1.0, x0 + 1.0) * fy * fx;
        }
    }
    acc as f32
}

/// Uniform noise in [-1, 1], Gaussian-smoothed with `sigma`, scaled by `alpha`.
fn elastic_field(rng: &mut ChaCha8Rng, h: usize, w: usize, e: ElasticParams) -> Array2<f64> {
    let noise = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..=1.0));
    gaussian_blur(&noise, e.sigma) * e.alpha
}

fn gaussian_blur(a: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = a.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * a[[y, clamp(x as isize + k as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| kv * rows[[clamp(y as isize + k as isize - radius, h), x]])
            .sum::<f64>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample(image: Array2<f32>, mask: Array2<u8>) -> SliceSample {
        SliceSample {
            image,
            mask,
            volume_id: "v".into(),
            slice_index: 3,
        }
    }

    fn only(p: AugmentationPolicy) -> AugmentationPolicy {
        AugmentationPolicy {
            enabled: true,
            probability: 1.0,
            ..p
        }
    }

    fn blob(n: usize) -> SliceSample {
        let c = (n as f32 - 1.0) / 2.0;
        let image = Array2::from_shape_fn((n, n), |(y, x)| {
            let d = ((y as f32 - c * 0.7).powi(2) + (x as f32 - c * 1.2).powi(2)).sqrt();
            (1.0 - d / n as f32).clamp(0.0, 1.0)
        });
        let mask = image.mapv(|v| u8::from(v >= 0.8));
        sample(image, mask)
    }

    #[test]
    fn identity_policy_is_noop() {
        let s = blob(16);
        let out = augment(&s, &AugmentationPolicy::identity());
        assert_eq!(out.sample, s);
        let all_off = only(AugmentationPolicy::identity());
        assert_eq!(augment(&s, &all_off).sample, s);
    }

    #[test]
    fn horizontal_mirror_preserves_foreground() {
        let s = blob(20);
        let p = only(AugmentationPolicy {
            mirror: Some(MirrorAxes {
                horizontal: true,
                vertical: false,
            }),
            ..AugmentationPolicy::identity()
        });
        let out = augment(&s, &p).sample;
        assert_eq!(out.foreground(), s.foreground());
        assert_eq!(out.mask[[4, 0]], s.mask[[4, 19]]);
        assert_eq!(out.image[[7, 2]], s.image[[7, 17]]);
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let mask = array![
            [1u8, 1, 0, 0],
            [1, 0, 0, 0],
            [0, 0, 0, 1],
            [0, 0, 0, 0]
        ];
        let image = mask.mapv(f32::from) * 0.5 + Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32 / 100.0);
        let s = sample(image.clone(), mask.clone());
        let p = only(AugmentationPolicy {
            rotation: Some([90.0, 90.0]),
            ..AugmentationPolicy::identity()
        });
        let out = augment(&s, &p).sample;
        let n = 4;
        // counter-clockwise quarter turn: out[i][j] = in[j][n-1-i]
        for i in 0..n {
            for j in 0..n {
                assert_eq!(out.mask[[i, j]], mask[[j, n - 1 - i]]);
                assert!((out.image[[i, j]] - image[[j, n - 1 - i]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let s = blob(32);
        let p = only(AugmentationPolicy {
            seed: 9,
            ..AugmentationPolicy::default()
        });
        assert_eq!(augment(&s, &p), augment(&s, &p));
        let other = augment(&s, &p.with_seed(10)).sample;
        assert_ne!(augment(&s, &p).sample, other);
    }

    #[test]
    fn intensity_transforms_leave_mask_alone() {
        let s = blob(16);
        let p = only(AugmentationPolicy {
            gamma: Some([1.5, 1.5]),
            intensity_shift: Some([0.05, 0.05]),
            ..AugmentationPolicy::identity()
        });
        let out = augment(&s, &p).sample;
        assert_eq!(out.mask, s.mask);
        let expected = (s.image[[5, 5]].powf(1.5) + 0.05).clamp(0.0, 1.0);
        assert!((out.image[[5, 5]] - expected).abs() < 1e-6);
        assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn degenerate_parameters_are_clamped_and_reported() {
        let p = AugmentationPolicy {
            probability: 2.0,
            scale: Some([0.0, -1.0]),
            gamma: Some([1.2, 0.8]),
            elastic: Some(ElasticParams { alpha: 5.0, sigma: 0.0 }),
            ..AugmentationPolicy::default()
        };
        let (fixed, notes) = p.sanitized();
        assert_eq!(fixed.probability, 1.0);
        assert_eq!(fixed.gamma, Some([0.8, 1.2]));
        assert!(fixed.scale.unwrap()[0] > 0.0);
        assert!(fixed.elastic.is_none());
        assert!(notes.len() >= 4);
        let out = augment(&blob(16), &p);
        assert_eq!(out.adjustments, notes);
        assert!(out.sample.image.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn geometric_transforms_keep_alignment() {
        let s = blob(64);
        let p = only(AugmentationPolicy {
            gamma: None,
            intensity_shift: None,
            elastic: Some(ElasticParams { alpha: 20.0, sigma: 6.0 }),
            seed: 4,
            ..AugmentationPolicy::default()
        });
        let out = augment(&s, &p).sample;
        let disagree = out
            .image
            .iter()
            .zip(out.mask.iter())
            .filter(|(v, m)| u8::from(**v >= 0.8) != **m)
            .count();
        assert!(disagree as f64 / (64.0 * 64.0) < 0.02, "{disagree} pixels disagree");
        assert!(out.foreground() > 0);
    }
}
