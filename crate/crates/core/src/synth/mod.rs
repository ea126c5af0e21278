//! Synthetic convective events.
//!
//! Each storm is a 3D Gaussian blob of reflectivity that advects at constant
//! velocity while its peak follows a grow / plateau / decay envelope. Vertical
//! velocity `w` and perturbation temperature `pt` carry the same blob geometry
//! but are drawn where the storm will be `initiation_lead` frames later, scaled
//! by the reflectivity it will have then. Updrafts therefore precede the echo,
//! which is what a nowcaster can learn and a persistence forecast cannot.

mod grid;

pub use grid::{parse_grid, read_grid, write_grid, GridDims, GridSequence, FRAME_INTERVAL_MINUTES, GRID_MAGIC};
pub(crate) use grid::Cursor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NowcastError, Result};

pub const LEVELS: usize = 20;
pub const MAX_DBZ: f64 = 70.0;
/// Raw variables stored in grid files. Time differences are derived downstream.
pub const BASE_VARIABLES: [&str; 3] = ["R", "w", "pt"];
pub const VAR_R: usize = 0;
pub const VAR_W: usize = 1;
pub const VAR_PT: usize = 2;

/// Noise draws are clamped to this many standard deviations.
const NOISE_CLAMP_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub ny: usize,
    pub nx: usize,
    pub levels: usize,
    pub frames: usize,
    pub storms_min: usize,
    pub storms_max: usize,
    pub peak_dbz: [f64; 2],
    /// Horizontal Gaussian scale in pixels (1 km each).
    pub horizontal_scale: [f64; 2],
    pub vertical_center: [f64; 2],
    pub vertical_scale: f64,
    /// Maximum advection speed per axis, pixels per frame.
    pub speed_max: f64,
    pub growth_frames: [f64; 2],
    pub plateau_frames: [f64; 2],
    pub decay_frames: [f64; 2],
    pub initiation_lead: usize,
    pub w_amplitude: [f64; 2],
    pub pt_amplitude: [f64; 2],
    pub noise_dbz: f64,
    pub noise_w: f64,
    pub noise_pt: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            ny: 48,
            nx: 60,
            levels: LEVELS,
            frames: 24,
            storms_min: 4,
            storms_max: 7,
            peak_dbz: [45.0, 65.0],
            horizontal_scale: [3.0, 5.0],
            vertical_center: [4.0, 10.0],
            vertical_scale: 4.0,
            speed_max: 2.5,
            growth_frames: [2.0, 4.0],
            plateau_frames: [2.0, 6.0],
            decay_frames: [2.0, 4.0],
            initiation_lead: 2,
            w_amplitude: [4.5, 8.0],
            pt_amplitude: [1.5, 3.0],
            noise_dbz: 2.0,
            noise_w: 0.3,
            noise_pt: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(NowcastError::Config(m));
        for (name, v) in [("ny", self.ny), ("nx", self.nx)] {
            if v < 18 || v % 6 != 0 {
                return err(format!("{name} must be >= 18 and divisible by 6, got {v}"));
            }
        }
        if self.levels != LEVELS {
            return err(format!("levels must be {LEVELS}, got {}", self.levels));
        }
        if self.frames < 5 {
            return err(format!("frames must be >= 5, got {}", self.frames));
        }
        if !(1..=3).contains(&self.initiation_lead) {
            return err(format!("initiation_lead must be 1, 2 or 3, got {}", self.initiation_lead));
        }
        if self.storms_min > self.storms_max {
            return err("storms_min exceeds storms_max".into());
        }
        let ranges = [
            ("peak_dbz", self.peak_dbz),
            ("horizontal_scale", self.horizontal_scale),
            ("vertical_center", self.vertical_center),
            ("growth_frames", self.growth_frames),
            ("plateau_frames", self.plateau_frames),
            ("decay_frames", self.decay_frames),
            ("w_amplitude", self.w_amplitude),
            ("pt_amplitude", self.pt_amplitude),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return err(format!("{name} must be an ordered non-negative range, got [{lo}, {hi}]"));
            }
        }
        if self.peak_dbz[1] > MAX_DBZ || self.peak_dbz[0] <= 0.0 {
            return err(format!("peak_dbz must lie in (0, {MAX_DBZ}]"));
        }
        if self.horizontal_scale[0] <= 0.0 || self.vertical_scale <= 0.0 {
            return err("blob scales must be positive".into());
        }
        for (name, v) in [
            ("speed_max", self.speed_max),
            ("noise_dbz", self.noise_dbz),
            ("noise_w", self.noise_w),
            ("noise_pt", self.noise_pt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> GridDims {
        GridDims {
            frames: self.frames,
            levels: self.levels,
            ny: self.ny,
            nx: self.nx,
        }
    }
}

/// One synthetic storm. Times are in frames, positions in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Storm {
    /// (y, x) center at frame 0.
    pub origin: (f64, f64),
    /// (dy, dx) per frame.
    pub velocity: (f64, f64),
    pub peak_dbz: f64,
    pub horizontal_scale: f64,
    pub vertical_center: f64,
    pub vertical_scale: f64,
    pub start: f64,
    pub growth: f64,
    pub plateau: f64,
    pub decay: f64,
    pub w_amplitude: f64,
    pub pt_amplitude: f64,
}

impl Storm {
    pub fn center(&self, t: f64) -> (f64, f64) {
        (self.origin.0 + self.velocity.0 * t, self.origin.1 + self.velocity.1 * t)
    }

    /// Envelope in [0, 1]: linear growth, plateau, linear decay.
    pub fn envelope(&self, t: f64) -> f64 {
        let s = t - self.start;
        if s < 0.0 {
            return 0.0;
        }
        if s < self.growth {
            return s / self.growth;
        }
        let s = s - self.growth;
        if s <= self.plateau {
            return 1.0;
        }
        let s = s - self.plateau;
        if s < self.decay {
            1.0 - s / self.decay
        } else {
            0.0
        }
    }

    pub fn intensity(&self, t: f64) -> f64 {
        self.peak_dbz * self.envelope(t)
    }

    fn horizontal(&self, center: (f64, f64), y: f64, x: f64) -> f64 {
        let d2 = (y - center.0).powi(2) + (x - center.1).powi(2);
        (-d2 / (2.0 * self.horizontal_scale.powi(2))).exp()
    }

    fn vertical(&self, z: f64) -> f64 {
        (-(z - self.vertical_center).powi(2) / (2.0 * self.vertical_scale.powi(2))).exp()
    }
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws storm parameters for one event.
pub fn sample_storms(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Storm> {
    let count = rng.random_range(cfg.storms_min..=cfg.storms_max);
    (0..count)
        .map(|_| {
            let growth = uniform(rng, cfg.growth_frames);
            let plateau = uniform(rng, cfg.plateau_frames);
            let decay = uniform(rng, cfg.decay_frames);
            let start = rng.random_range(-(growth + plateau)..(cfg.frames as f64 - 3.0));
            let velocity = if cfg.speed_max > 0.0 {
                (
                    rng.random_range(-cfg.speed_max..=cfg.speed_max),
                    rng.random_range(-cfg.speed_max..=cfg.speed_max),
                )
            } else {
                (0.0, 0.0)
            };
            // Place the storm inside the domain when it reaches its peak.
            let peak_time = start + growth;
            let at_peak = (
                rng.random_range(4.0..(cfg.ny as f64 - 4.0)),
                rng.random_range(4.0..(cfg.nx as f64 - 4.0)),
            );
            Storm {
                origin: (at_peak.0 - velocity.0 * peak_time, at_peak.1 - velocity.1 * peak_time),
                velocity,
                peak_dbz: uniform(rng, cfg.peak_dbz),
                horizontal_scale: uniform(rng, cfg.horizontal_scale),
                vertical_center: uniform(rng, cfg.vertical_center).round(),
                vertical_scale: cfg.vertical_scale,
                start,
                growth,
                plateau,
                decay,
                w_amplitude: uniform(rng, cfg.w_amplitude),
                pt_amplitude: uniform(rng, cfg.pt_amplitude),
            }
        })
        .collect()
}

/// Deterministic synthetic event for `seed`.
pub fn synth_event(cfg: &SynthConfig, seed: u64, event_id: impl Into<String>) -> Result<GridSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let storms = sample_storms(cfg, &mut rng);
    render_event(cfg, &storms, &mut rng, event_id)
}

/// Renders explicit storms onto a fresh grid, adding clamped noise from `rng`.
pub fn render_event(
    cfg: &SynthConfig,
    storms: &[Storm],
    rng: &mut ChaCha8Rng,
    event_id: impl Into<String>,
) -> Result<GridSequence> {
    cfg.validate()?;
    let dims = cfg.dims();
    let nvars = BASE_VARIABLES.len();
    let mut seq = GridSequence::new(
        event_id,
        dims,
        BASE_VARIABLES.iter().map(|s| s.to_string()).collect(),
        vec![0.0; dims.frames * nvars * dims.field_len()],
    )?;
    let lead = cfg.initiation_lead as f64;
    let plane = dims.ny * dims.nx;
    let mut r_plane = vec![0.0f64; plane];
    let mut w_plane = vec![0.0f64; plane];
    let mut pt_plane = vec![0.0f64; plane];
    for t in 0..dims.frames {
        let tf = t as f64;
        let mut r = vec![0.0f64; dims.field_len()];
        let mut w = vec![0.0f64; dims.field_len()];
        let mut pt = vec![0.0f64; dims.field_len()];
        for storm in storms {
            let now = storm.intensity(tf);
            let ahead = storm.intensity(tf + lead) / storm.peak_dbz;
            if now <= 0.0 && ahead <= 0.0 {
                continue;
            }
            let c_now = storm.center(tf);
            let c_ahead = storm.center(tf + lead);
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = y * dims.nx + x;
                    r_plane[i] = now * storm.horizontal(c_now, y as f64, x as f64);
                    let h = ahead * storm.horizontal(c_ahead, y as f64, x as f64);
                    w_plane[i] = storm.w_amplitude * h;
                    pt_plane[i] = storm.pt_amplitude * h;
                }
            }
            for z in 0..dims.levels {
                let vz = storm.vertical(z as f64);
                let base = z * plane;
                for i in 0..plane {
                    let rv = r_plane[i] * vz;
                    if rv > r[base + i] {
                        r[base + i] = rv;
                    }
                    w[base + i] += w_plane[i] * vz;
                    pt[base + i] += pt_plane[i] * vz;
                }
            }
        }
        add_noise(&mut r, cfg.noise_dbz, rng);
        add_noise(&mut w, cfg.noise_w, rng);
        add_noise(&mut pt, cfg.noise_pt, rng);
        for (dst, src) in seq.field_mut(t, VAR_R).iter_mut().zip(&r) {
            *dst = src.clamp(0.0, MAX_DBZ) as f32;
        }
        for (dst, src) in seq.field_mut(t, VAR_W).iter_mut().zip(&w) {
            *dst = *src as f32;
        }
        for (dst, src) in seq.field_mut(t, VAR_PT).iter_mut().zip(&pt) {
            *dst = *src as f32;
        }
    }
    Ok(seq)
}

fn add_noise(field: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked positive");
    let bound = NOISE_CLAMP_SIGMAS * sigma;
    for v in field {
        *v += normal.sample(rng).clamp(-bound, bound);
    }
}
