//! Synthetic event-camera identities.
//!
//! Each identity is an articulated walker (capsule limbs, circular head)
//! whose proportions, gait, and clothing tones come from a per-identity
//! seed. Each camera applies its own scale, horizontal squash (viewpoint),
//! placement, background level, contrast threshold, and noise rate. Events
//! are emitted where the log intensity of the rendered scene crosses the
//! contrast threshold between consecutive render steps, the way a
//! differencing pixel would.

use std::f64::consts::PI;

use cmtc_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::events::{EventRecord, EventStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub identities: usize,
    pub cameras: usize,
    pub clips_per_id_cam: usize,
    pub seed: u64,
    pub width: u16,
    pub height: u16,
    pub clip_len: usize,
    /// Microseconds per frame window.
    pub t_window: u64,
    /// Render steps per window.
    pub substeps: usize,
    /// Multiplier on every identity's gait frequency.
    pub speed_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 8,
            cameras: 2,
            clips_per_id_cam: 4,
            seed: 0,
            width: 32,
            height: 64,
            clip_len: 8,
            t_window: 50_000,
            substeps: 6,
            speed_scale: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(config(format!("need at least 2 identities, got {}", self.identities)));
        }
        if self.cameras < 2 {
            return Err(config(format!("need at least 2 cameras, got {}", self.cameras)));
        }
        if self.clips_per_id_cam == 0 {
            return Err(config("clips_per_id_cam must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(config(format!("sensor {}x{} is too small", self.width, self.height)));
        }
        if self.clip_len < 2 || self.t_window == 0 || self.substeps == 0 {
            return Err(config("clip_len >= 2, t_window > 0 and substeps > 0 are required"));
        }
        if !(self.speed_scale > 0.0 && self.speed_scale.is_finite()) {
            return Err(config("speed_scale must be positive"));
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.clip_len as u64 * self.t_window
    }
}

/// Body proportions are fractions of standing height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub height_ratio: f64,
    pub leg_frac: f64,
    pub torso_frac: f64,
    pub arm_frac: f64,
    pub torso_width: f64,
    pub limb_width: f64,
    pub head_radius: f64,
    pub gait_hz: f64,
    pub stride_amp: f64,
    pub arm_amp: f64,
    pub bob: f64,
    pub upper_tone: f64,
    pub lower_tone: f64,
}

impl IdentityParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            height_ratio: rng.gen_range(0.62..0.92),
            leg_frac: rng.gen_range(0.40..0.54),
            torso_frac: rng.gen_range(0.26..0.36),
            arm_frac: rng.gen_range(0.28..0.44),
            torso_width: rng.gen_range(0.14..0.30),
            limb_width: rng.gen_range(0.035..0.085),
            head_radius: rng.gen_range(0.05..0.08),
            gait_hz: rng.gen_range(1.0..2.6),
            stride_amp: rng.gen_range(0.25..0.65),
            arm_amp: rng.gen_range(0.15..0.7),
            bob: rng.gen_range(0.005..0.03),
            upper_tone: rng.gen_range(0.05..0.95),
            lower_tone: rng.gen_range(0.05..0.95),
        }
    }

    pub fn as_vec(&self) -> [f64; 13] {
        [
            self.height_ratio,
            self.leg_frac,
            self.torso_frac,
            self.arm_frac,
            self.torso_width,
            self.limb_width,
            self.head_radius,
            self.gait_hz,
            self.stride_amp,
            self.arm_amp,
            self.bob,
            self.upper_tone,
            self.lower_tone,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraProfile {
    pub scale: f64,
    /// Horizontal compression from the viewing angle.
    pub squash: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub background: f64,
    /// Log-intensity step per event.
    pub threshold: f64,
    /// Noise events per pixel per second.
    pub noise_rate: f64,
}

impl CameraProfile {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            scale: rng.gen_range(0.85..1.0),
            squash: rng.gen_range(0.75..1.1),
            offset_x: rng.gen_range(-0.08..0.08),
            offset_y: rng.gen_range(-0.03..0.03),
            background: rng.gen_range(0.3..0.7),
            threshold: rng.gen_range(0.12..0.22),
            noise_rate: rng.gen_range(0.5..2.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthClip {
    pub stream: EventStream,
    /// Binary silhouette at the middle of each window, `T x H x W`.
    pub masks: Tensor<f32>,
    pub person_id: u32,
    pub camera_id: u32,
    pub clip_index: u32,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub identities: Vec<IdentityParams>,
    pub cameras: Vec<CameraProfile>,
    pub clips: Vec<SynthClip>,
}

fn mix(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> u64 {
    // splitmix64 over the combined key
    let mut z = seed
        ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ a.wrapping_mul(0xbf58_476d_1ce4_e5b9)
        ^ b.wrapping_mul(0x94d0_49bb_1331_11eb)
        ^ c.wrapping_mul(0xd6e8_feb8_6659_fd93);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn identity_params(seed: u64, person: u32) -> IdentityParams {
    IdentityParams::sample(&mut ChaCha8Rng::seed_from_u64(mix(seed, 1, person as u64, 0, 0)))
}

pub fn camera_profile(seed: u64, camera: u32) -> CameraProfile {
    CameraProfile::sample(&mut ChaCha8Rng::seed_from_u64(mix(seed, 2, camera as u64, 0, 0)))
}

#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    r: f64,
    tone: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let (px, py) = (p.0 - self.a.0, p.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { ((px * dx + py * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (ex, ey) = (px - t * dx, py - t * dy);
        ex * ex + ey * ey <= self.r * self.r
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        (
            self.a.0.min(self.b.0) - self.r,
            self.a.1.min(self.b.1) - self.r,
            self.a.0.max(self.b.0) + self.r,
            self.a.1.max(self.b.1) + self.r,
        )
    }
}

/// Clip-level variation: gait phase and small placement jitter.
#[derive(Debug, Clone, Copy)]
struct ClipJitter {
    phase: f64,
    dx: f64,
    dy: f64,
    speed: f64,
}

struct Scene<'a> {
    id: &'a IdentityParams,
    cam: &'a CameraProfile,
    jitter: ClipJitter,
    width: usize,
    height: usize,
}

const SUPERSAMPLE: usize = 3;

impl Scene<'_> {
    /// Body parts in pixel coordinates (x right, y down), back to front.
    fn parts(&self, t_sec: f64, speed_scale: f64) -> Vec<Capsule> {
        let id = self.id;
        let phase = 2.0 * PI * id.gait_hz * speed_scale * self.jitter.speed * t_sec + self.jitter.phase;
        let h_px = id.height_ratio * self.height as f64 * self.cam.scale;
        let foot_y = self.height as f64 * (0.97 + self.cam.offset_y + self.jitter.dy);
        let cx = self.width as f64 * (0.5 + self.cam.offset_x + self.jitter.dx);
        let sq = self.cam.squash;
        // body units (x forward, y up) -> pixels
        let px = |x: f64, y: f64| (cx + x * h_px * sq, foot_y - y * h_px);

        let bob = id.bob * (2.0 * phase).cos();
        let hip_y = id.leg_frac + bob;
        let neck_y = hip_y + id.torso_frac;
        let head_y = neck_y + id.head_radius * 1.1;
        let seg = id.leg_frac * 0.5;
        let arm_seg = id.arm_frac * 0.5;
        let lw = id.limb_width * h_px * 0.5;

        let leg = |sign: f64| {
            let th = sign * id.stride_amp * phase.sin();
            let knee = (0.0, hip_y);
            let k = (knee.0 + seg * th.sin(), knee.1 - seg * th.cos());
            let flex = 0.8 * id.stride_amp * (0.5 - 0.5 * (phase + sign * PI * 0.5).cos());
            let sh = th - flex;
            let f = (k.0 + seg * sh.sin(), k.1 - seg * sh.cos());
            [
                Capsule { a: px(knee.0, knee.1), b: px(k.0, k.1), r: lw * 1.2, tone: id.lower_tone },
                Capsule { a: px(k.0, k.1), b: px(f.0, f.1), r: lw, tone: id.lower_tone },
            ]
        };
        let arm = |sign: f64| {
            let th = -sign * id.arm_amp * phase.sin();
            let s = (0.0, neck_y - 0.02);
            let e = (s.0 + arm_seg * th.sin(), s.1 - arm_seg * th.cos());
            let fa = th + 0.3 * id.arm_amp * (1.0 + (phase * sign).sin()) * 0.5;
            let w = (e.0 + arm_seg * fa.sin(), e.1 - arm_seg * fa.cos());
            [
                Capsule { a: px(s.0, s.1), b: px(e.0, e.1), r: lw * 0.9, tone: id.upper_tone },
                Capsule { a: px(e.0, e.1), b: px(w.0, w.1), r: lw * 0.8, tone: id.upper_tone },
            ]
        };

        let mut parts = Vec::with_capacity(10);
        parts.extend(leg(-1.0));
        parts.extend(arm(-1.0));
        parts.push(Capsule {
            a: px(0.0, hip_y),
            b: px(0.0, neck_y),
            r: id.torso_width * 0.5 * h_px * sq.max(0.6),
            tone: id.upper_tone,
        });
        parts.push(Capsule {
            a: px(0.0, head_y),
            b: px(0.0, head_y),
            r: id.head_radius * h_px,
            tone: 0.5 * (id.upper_tone + id.lower_tone) * 0.6 + 0.2,
        });
        parts.extend(leg(1.0));
        parts.extend(arm(1.0));
        parts
    }

    /// Returns (intensity, coverage) per pixel.
    fn render(&self, parts: &[Capsule]) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (self.width, self.height);
        let mut intensity = vec![self.cam.background; w * h];
        let mut coverage = vec![0.0; w * h];
        let (x0, y0, x1, y1) = parts.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |acc, p| {
                let b = p.bbox();
                (acc.0.min(b.0), acc.1.min(b.1), acc.2.max(b.2), acc.3.max(b.3))
            },
        );
        let clampi = |v: f64, hi: usize| (v.floor().max(0.0) as usize).min(hi);
        let (xa, xb) = (clampi(x0, w), clampi(x1 + 1.0, w));
        let (ya, yb) = (clampi(y0, h), clampi(y1 + 1.0, h));
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for y in ya..yb {
            for x in xa..xb {
                let (mut acc, mut cov) = (0.0, 0.0);
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let p = (
                            x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64,
                            y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64,
                        );
                        match parts.iter().rev().find(|c| c.contains(p)) {
                            Some(c) => {
                                acc += c.tone;
                                cov += 1.0;
                            }
                            None => acc += self.cam.background,
                        }
                    }
                }
                intensity[y * w + x] = acc / n;
                coverage[y * w + x] = cov / n;
            }
        }
        (intensity, coverage)
    }
}

fn log_intensity(v: f64) -> f64 {
    (v + 0.05).ln()
}

/// Renders one clip. Pure function of its arguments.
pub fn render_clip(
    cfg: &SynthConfig,
    id: &IdentityParams,
    cam: &CameraProfile,
    person: u32,
    camera: u32,
    clip: u32,
) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 3, person as u64, camera as u64, clip as u64));
    let jitter = ClipJitter {
        phase: rng.gen_range(0.0..2.0 * PI),
        dx: rng.gen_range(-0.04..0.04),
        dy: rng.gen_range(-0.015..0.015),
        speed: rng.gen_range(0.95..1.05),
    };
    let (w, h) = (cfg.width as usize, cfg.height as usize);
    let scene = Scene {
        id,
        cam,
        jitter,
        width: w,
        height: h,
    };
    let steps = cfg.clip_len * cfg.substeps;
    let dt = cfg.t_window as f64 / cfg.substeps as f64;
    let at = |s: f64| s * 1e-6;

    let (first, _) = scene.render(&scene.parts(0.0, cfg.speed_scale));
    let mut reference: Vec<f64> = first.iter().map(|&v| log_intensity(v)).collect();
    let mut records = Vec::new();
    for s in 1..=steps {
        let t_prev = (s - 1) as f64 * dt;
        let (img, _) = scene.render(&scene.parts(at(s as f64 * dt), cfg.speed_scale));
        for (i, v) in img.iter().enumerate() {
            let diff = log_intensity(*v) - reference[i];
            let n = (diff.abs() / cam.threshold).floor() as usize;
            if n == 0 {
                continue;
            }
            let p: i8 = if diff > 0.0 { 1 } else { -1 };
            for j in 0..n {
                let t = t_prev + dt * (j + 1) as f64 / (n + 1) as f64;
                records.push(EventRecord {
                    t: t as u64,
                    x: (i % w) as u16,
                    y: (i / w) as u16,
                    p,
                });
            }
            reference[i] += p as f64 * n as f64 * cam.threshold;
        }
    }
    let duration = cfg.duration_us();
    let noise = (cam.noise_rate * (w * h) as f64 * duration as f64 * 1e-6).round() as usize;
    for _ in 0..noise {
        records.push(EventRecord {
            t: rng.gen_range(0..duration),
            x: rng.gen_range(0..cfg.width),
            y: rng.gen_range(0..cfg.height),
            p: if rng.gen_bool(0.5) { 1 } else { -1 },
        });
    }
    let stream = EventStream::new(cfg.width, cfg.height, records)?;

    let mut masks = Vec::with_capacity(cfg.clip_len * w * h);
    for k in 0..cfg.clip_len {
        let t_mid = (k as f64 + 0.5) * cfg.t_window as f64;
        let (_, cov) = scene.render(&scene.parts(at(t_mid), cfg.speed_scale));
        masks.extend(cov.iter().map(|&c| if c >= 0.5 { 1.0f32 } else { 0.0 }));
    }
    Ok(SynthClip {
        stream,
        masks: Tensor::new(vec![cfg.clip_len, h, w], masks)?,
        person_id: person,
        camera_id: camera,
        clip_index: clip,
    })
}

/// Every identity x camera x clip, in that nesting order.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let identities: Vec<_> = (0..cfg.identities as u32).map(|p| identity_params(cfg.seed, p)).collect();
    let cameras: Vec<_> = (0..cfg.cameras as u32).map(|c| camera_profile(cfg.seed, c)).collect();
    let mut clips = Vec::with_capacity(cfg.identities * cfg.cameras * cfg.clips_per_id_cam);
    for (p, id) in identities.iter().enumerate() {
        for (c, cam) in cameras.iter().enumerate() {
            for k in 0..cfg.clips_per_id_cam {
                clips.push(render_clip(cfg, id, cam, p as u32, c as u32, k as u32)?);
            }
        }
    }
    Ok(SynthDataset {
        config: *cfg,
        identities,
        cameras,
        clips,
    })
}
