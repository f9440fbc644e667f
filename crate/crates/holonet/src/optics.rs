//! Inline hologram synthesis and FFT-based angular-spectrum propagation.
//!
//! The scattering model is first-order occlusion: each particle is an opaque
//! disk aperture illuminated by a unit reference wave; per-particle scattered
//! amplitudes propagate independently to the sensor and superpose, so the
//! hologram is I = |1 - sum_k ASM(a_k, dz_k)|^2.

use num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("invalid optics config: {0}")]
    InvalidConfig(String),
    #[error("particle {index} out of bounds: x={x}, y={y}, z_index={z_index}")]
    ParticleOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        z_index: usize,
    },
    #[error("field is {got_ny}x{got_nx}, config wants {ny}x{nx}")]
    DimensionMismatch {
        nx: usize,
        ny: usize,
        got_nx: usize,
        got_ny: usize,
    },
}

/// Recording geometry and sampling of the hologram volume.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    /// Illumination wavelength in meters.
    pub wavelength: f64,
    /// Sensor pixel pitch in meters (also the lateral voxel size).
    pub pixel_pitch: f64,
    pub nx: usize,
    pub ny: usize,
    /// Distance from the sensor to the nearest depth slice, meters.
    pub z_min: f64,
    /// Number of discrete depth slices.
    pub z_count: usize,
    /// Slice spacing in meters (the axial voxel size).
    pub z_step: f64,
    /// Std-dev of optional additive Gaussian intensity noise (0 disables).
    pub noise_sigma: f64,
    /// Embed fields in a 2x zero-padded grid during propagation instead of
    /// relying on the periodic FFT boundary.
    pub zero_pad: bool,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            wavelength: 632e-9,
            pixel_pitch: 10e-6,
            nx: 128,
            ny: 128,
            z_min: 1.0e-3,
            z_count: 128,
            z_step: 10e-6,
            noise_sigma: 0.0,
            zero_pad: false,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<(), OpticsError> {
        let bad = |m: String| Err(OpticsError::InvalidConfig(m));
        if !(self.wavelength > 0.0) {
            return bad(format!("wavelength must be > 0, got {}", self.wavelength));
        }
        if !(self.pixel_pitch > 0.0) {
            return bad(format!("pixel_pitch must be > 0, got {}", self.pixel_pitch));
        }
        if !(self.z_step > 0.0) {
            return bad(format!("z_step must be > 0, got {}", self.z_step));
        }
        if self.nx < 8 || self.ny < 8 {
            return bad(format!("grid must be at least 8x8, got {}x{}", self.ny, self.nx));
        }
        if self.z_count < 2 {
            return bad(format!("z_count must be >= 2, got {}", self.z_count));
        }
        if self.noise_sigma < 0.0 {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    /// Depth of slice `j`: z_min + j * z_step.
    pub fn z_at(&self, j: usize) -> f64 {
        self.z_min + j as f64 * self.z_step
    }

    pub fn z_max(&self) -> f64 {
        self.z_at(self.z_count - 1)
    }

    /// Particles per pixel for a given particle count.
    pub fn ppp(&self, particles: usize) -> f64 {
        particles as f64 / (self.nx * self.ny) as f64
    }
}

/// One particle: continuous lateral position in pixels, depth as a slice
/// index, occlusion diameter in pixels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub z_index: usize,
    pub diameter: f64,
}

/// Ground truth or reconstruction output: a list of particle records.
pub type ParticleField = Vec<Particle>;

/// 2D grid of complex wave amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    nx: usize,
    ny: usize,
    data: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(nx: usize, ny: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), nx * ny);
        Self { nx, ny, data }
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            data: vec![Complex64::new(0.0, 0.0); nx * ny],
        }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.nx + x]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Relative L2 distance to another field of the same size.
    pub fn rel_l2(&self, other: &Self) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        num / other.norm_l2().max(f64::MIN_POSITIVE)
    }
}

/// Recorded interference intensity pattern, all values >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Hologram {
    nx: usize,
    ny: usize,
    data: Vec<f64>,
}

impl Hologram {
    pub fn new(nx: usize, ny: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), nx * ny);
        Self { nx, ny, data }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.nx + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Relative L2 distance to another hologram of the same size.
    pub fn rel_l2(&self, other: &Self) -> f64 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = other.data.iter().map(|v| v * v).sum::<f64>().sqrt();
        num / den.max(f64::MIN_POSITIVE)
    }

    /// Copy with additive Gaussian noise (std `sigma`), clamped at zero.
    pub fn with_noise<R: rand::Rng>(&self, sigma: f64, rng: &mut R) -> Hologram {
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, sigma).expect("sigma >= 0");
        Hologram {
            nx: self.nx,
            ny: self.ny,
            data: self
                .data
                .iter()
                .map(|&v| (v + normal.sample(rng)).max(0.0))
                .collect(),
        }
    }
}

// ------------------------------------------------------------------ FFT core

fn plan(n: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    static PLANS: OnceLock<Mutex<HashMap<(usize, bool), Arc<dyn Fft<f64>>>>> = OnceLock::new();
    let cache = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (n, direction == FftDirection::Forward);
    let mut cache = cache.lock().unwrap();
    cache
        .entry(key)
        .or_insert_with(|| FftPlanner::new().plan_fft(n, direction))
        .clone()
}

fn transpose(src: &[Complex64], nx: usize, ny: usize, dst: &mut [Complex64]) {
    for y in 0..ny {
        for x in 0..nx {
            dst[x * ny + y] = src[y * nx + x];
        }
    }
}

/// In-place unnormalized 2D FFT over a row-major ny x nx buffer.
fn fft2(data: &mut [Complex64], nx: usize, ny: usize, direction: FftDirection) {
    plan(nx, direction).process(data);
    let mut t = vec![Complex64::new(0.0, 0.0); nx * ny];
    transpose(data, nx, ny, &mut t);
    plan(ny, direction).process(&mut t);
    transpose(&t, ny, nx, data);
}

/// Signed FFT frequency index for position `i` of `n` samples.
fn freq_index(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

fn transfer_into(
    nx: usize,
    ny: usize,
    pitch: f64,
    wavelength: f64,
    dz: f64,
    out: &mut [Complex64],
) {
    let inv_lambda_sq = 1.0 / (wavelength * wavelength);
    for iy in 0..ny {
        let fy = freq_index(iy, ny) as f64 / (ny as f64 * pitch);
        for ix in 0..nx {
            let fx = freq_index(ix, nx) as f64 / (nx as f64 * pitch);
            let arg = inv_lambda_sq - fx * fx - fy * fy;
            out[iy * nx + ix] = if arg >= 0.0 {
                Complex64::from_polar(1.0, 2.0 * PI * dz * arg.sqrt())
            } else {
                // evanescent: hard zero cutoff
                Complex64::new(0.0, 0.0)
            };
        }
    }
}

// ----------------------------------------------------------------- operators

/// Angular-spectrum transfer function H(fx, fy) = exp(i 2 pi dz sqrt(1/lambda^2
/// - fx^2 - fy^2)) on the discrete FFT frequency grid, zero in the evanescent
/// region. `dz` may be negative for backward propagation.
pub fn asm_transfer(config: &OpticsConfig, dz: f64) -> Result<ComplexField, OpticsError> {
    config.validate()?;
    let mut field = ComplexField::zeros(config.nx, config.ny);
    transfer_into(
        config.nx,
        config.ny,
        config.pixel_pitch,
        config.wavelength,
        dz,
        field.data_mut(),
    );
    Ok(field)
}

/// Propagate a field by `dz` meters: ifft( H . fft(field) ), normalized so
/// that propagate(f, 0) == f.
pub fn propagate(
    field: &ComplexField,
    config: &OpticsConfig,
    dz: f64,
) -> Result<ComplexField, OpticsError> {
    config.validate()?;
    check_dims(config, field.nx, field.ny)?;
    if config.zero_pad {
        let (px, py) = (2 * config.nx, 2 * config.ny);
        let mut buf = vec![Complex64::new(0.0, 0.0); px * py];
        let (ox, oy) = (config.nx / 2, config.ny / 2);
        for y in 0..config.ny {
            let dst = (y + oy) * px + ox;
            buf[dst..dst + config.nx]
                .copy_from_slice(&field.data()[y * config.nx..(y + 1) * config.nx]);
        }
        propagate_buffer(&mut buf, px, py, config.pixel_pitch, config.wavelength, dz);
        let mut out = ComplexField::zeros(config.nx, config.ny);
        for y in 0..config.ny {
            let src = (y + oy) * px + ox;
            out.data_mut()[y * config.nx..(y + 1) * config.nx]
                .copy_from_slice(&buf[src..src + config.nx]);
        }
        Ok(out)
    } else {
        let mut out = field.clone();
        propagate_buffer(
            out.data_mut(),
            config.nx,
            config.ny,
            config.pixel_pitch,
            config.wavelength,
            dz,
        );
        Ok(out)
    }
}

fn propagate_buffer(buf: &mut [Complex64], nx: usize, ny: usize, pitch: f64, lambda: f64, dz: f64) {
    fft2(buf, nx, ny, FftDirection::Forward);
    let mut h = vec![Complex64::new(0.0, 0.0); nx * ny];
    transfer_into(nx, ny, pitch, lambda, dz, &mut h);
    for (v, t) in buf.iter_mut().zip(&h) {
        *v *= t;
    }
    fft2(buf, nx, ny, FftDirection::Inverse);
    let scale = 1.0 / (nx * ny) as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

fn check_dims(config: &OpticsConfig, nx: usize, ny: usize) -> Result<(), OpticsError> {
    if nx != config.nx || ny != config.ny {
        return Err(OpticsError::DimensionMismatch {
            nx: config.nx,
            ny: config.ny,
            got_nx: nx,
            got_ny: ny,
        });
    }
    Ok(())
}

fn validate_particles(particles: &[Particle], config: &OpticsConfig) -> Result<(), OpticsError> {
    for (index, p) in particles.iter().enumerate() {
        let in_bounds = p.x >= 0.0
            && p.x < config.nx as f64
            && p.y >= 0.0
            && p.y < config.ny as f64
            && p.z_index < config.z_count
            && p.diameter >= 0.0
            && p.x.is_finite()
            && p.y.is_finite()
            && p.diameter.is_finite();
        if !in_bounds {
            return Err(OpticsError::ParticleOutOfBounds {
                index,
                x: p.x,
                y: p.y,
                z_index: p.z_index,
            });
        }
    }
    Ok(())
}

/// Add a rasterized opaque-disk aperture: sub-pixel centers round to the
/// nearest pixel; diameter <= 1 px occupies that single pixel.
fn add_aperture(aperture: &mut [f64], config: &OpticsConfig, p: &Particle) {
    let cx = p.x.round() as i64;
    let cy = p.y.round() as i64;
    let (nx, ny) = (config.nx as i64, config.ny as i64);
    if p.diameter <= 1.0 {
        if (0..nx).contains(&cx) && (0..ny).contains(&cy) {
            aperture[(cy * nx + cx) as usize] += 1.0;
        }
        return;
    }
    let r = p.diameter / 2.0;
    let ri = r.floor() as i64;
    for y in (cy - ri).max(0)..=(cy + ri).min(ny - 1) {
        for x in (cx - ri).max(0)..=(cx + ri).min(nx - 1) {
            let (dx, dy) = ((x - cx) as f64, (y - cy) as f64);
            if dx * dx + dy * dy <= r * r {
                aperture[(y * nx + x) as usize] += 1.0;
            }
        }
    }
}

/// Total scattered amplitude at the sensor: sum over particles of their
/// aperture fields propagated from their depth planes. Particles sharing a
/// depth slice are rasterized together (propagation is linear, so this equals
/// the per-particle sum exactly).
pub fn scattered_amplitude(
    particles: &[Particle],
    config: &OpticsConfig,
) -> Result<ComplexField, OpticsError> {
    config.validate()?;
    validate_particles(particles, config)?;
    let mut by_slice: BTreeMap<usize, Vec<&Particle>> = BTreeMap::new();
    for p in particles {
        by_slice.entry(p.z_index).or_default().push(p);
    }
    let mut total = ComplexField::zeros(config.nx, config.ny);
    for (z_index, group) in by_slice {
        let mut aperture = vec![0.0; config.nx * config.ny];
        for p in group {
            add_aperture(&mut aperture, config, p);
        }
        let field = ComplexField::new(
            config.nx,
            config.ny,
            aperture.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        );
        let propagated = propagate(&field, config, config.z_at(z_index))?;
        for (t, s) in total.data_mut().iter_mut().zip(propagated.data()) {
            *t += s;
        }
    }
    Ok(total)
}

/// Synthesize the inline hologram I = |1 - sum_k ASM(a_k, dz_k)|^2.
/// Deterministic for fixed inputs; noise is applied separately.
pub fn synthesize_hologram(
    particles: &[Particle],
    config: &OpticsConfig,
) -> Result<Hologram, OpticsError> {
    let amplitude = scattered_amplitude(particles, config)?;
    let one = Complex64::new(1.0, 0.0);
    let data = amplitude.data().iter().map(|&a| (one - a).norm_sqr()).collect();
    Ok(Hologram::new(config.nx, config.ny, data))
}
