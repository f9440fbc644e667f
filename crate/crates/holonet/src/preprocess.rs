//! Hologram preprocessing: reconstruct the complex volume and build the
//! 3-channel network input (normalized hologram, depth map, maximum phase
//! projection).

use crate::optics::{propagate, ComplexField, Hologram, OpticsConfig, OpticsError};
use num_complex::Complex64;
use std::f64::consts::PI;

/// How the recorded intensity becomes the sensor-plane amplitude for
/// back-propagation. The raw intensity is the conventional choice for inline
/// holograms; the alternatives are provided for experimentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorFieldMode {
    /// Use the intensity values directly as a real field.
    #[default]
    Raw,
    /// Use sqrt(intensity).
    Sqrt,
    /// Use intensity - 1 (the contrast against the unit reference).
    Contrast,
}

/// Z-stack of reconstructed complex fields; slice j sits at z_min + j*z_step.
#[derive(Debug, Clone)]
pub struct ComplexVolume {
    slices: Vec<ComplexField>,
}

impl ComplexVolume {
    pub fn slices(&self) -> &[ComplexField] {
        &self.slices
    }

    pub fn z_count(&self) -> usize {
        self.slices.len()
    }

    pub fn nx(&self) -> usize {
        self.slices[0].nx()
    }

    pub fn ny(&self) -> usize {
        self.slices[0].ny()
    }
}

/// The 3-channel network input; every value lies in [0, 1].
#[derive(Debug, Clone)]
pub struct InputStack {
    nx: usize,
    ny: usize,
    /// Channel-major layout: [hologram, depth, phase], each ny*nx.
    data: Vec<f32>,
}

impl InputStack {
    pub const CHANNELS: usize = 3;

    pub fn new(nx: usize, ny: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), Self::CHANNELS * nx * ny);
        Self { nx, ny, data }
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.nx * self.ny..(c + 1) * self.nx * self.ny]
    }
}

/// Back-propagate the hologram to every depth slice.
///
/// The sensor field is the hologram mapped through `mode` (default: the raw
/// intensity as a real field); slice j is that field propagated by
/// -(z_min + j*z_step).
pub fn reconstruct_volume(
    holo: &Hologram,
    config: &OpticsConfig,
    mode: SensorFieldMode,
) -> Result<ComplexVolume, OpticsError> {
    config.validate()?;
    let sensor = ComplexField::new(
        holo.nx(),
        holo.ny(),
        holo.data()
            .iter()
            .map(|&v| {
                Complex64::new(
                    match mode {
                        SensorFieldMode::Raw => v,
                        SensorFieldMode::Sqrt => v.sqrt(),
                        SensorFieldMode::Contrast => v - 1.0,
                    },
                    0.0,
                )
            })
            .collect(),
    );
    let slices = (0..config.z_count)
        .map(|j| propagate(&sensor, config, -config.z_at(j)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ComplexVolume { slices })
}

/// Per-pixel depth-slice index maximizing reconstructed intensity
/// u * conj(u); ties break toward the smallest slice index.
pub fn depth_map(volume: &ComplexVolume) -> Vec<usize> {
    let n = volume.nx() * volume.ny();
    let mut best = vec![0usize; n];
    let mut best_val = vec![f64::NEG_INFINITY; n];
    for (j, slice) in volume.slices.iter().enumerate() {
        for (i, c) in slice.data().iter().enumerate() {
            let v = c.norm_sqr();
            if v > best_val[i] {
                best_val[i] = v;
                best[i] = j;
            }
        }
    }
    best
}

/// Per-pixel maximum over slices of the field's phase angle, in (-pi, pi].
pub fn phase_map(volume: &ComplexVolume) -> Vec<f64> {
    let n = volume.nx() * volume.ny();
    let mut best = vec![f64::NEG_INFINITY; n];
    for slice in &volume.slices {
        for (i, c) in slice.data().iter().enumerate() {
            // Complex64::arg returns (-pi, pi]
            let v = c.arg();
            if v > best[i] {
                best[i] = v;
            }
        }
    }
    best
}

/// Build the 3-channel input: min-max normalized hologram, depth map scaled
/// by 1/(z_count-1), phase map mapped linearly from (-pi, pi] to [0, 1].
pub fn assemble_input(
    holo: &Hologram,
    config: &OpticsConfig,
    mode: SensorFieldMode,
) -> Result<InputStack, OpticsError> {
    let volume = reconstruct_volume(holo, config, mode)?;
    let n = holo.nx() * holo.ny();
    let mut data = vec![0.0f32; 3 * n];

    let min = holo.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = holo.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    for (dst, &v) in data[..n].iter_mut().zip(holo.data()) {
        // a constant hologram maps to 0
        *dst = if span > 0.0 { ((v - min) / span) as f32 } else { 0.0 };
    }

    let dmap = depth_map(&volume);
    let denom = (config.z_count - 1) as f64;
    for (dst, &j) in data[n..2 * n].iter_mut().zip(&dmap) {
        *dst = (j as f64 / denom) as f32;
    }

    let pmap = phase_map(&volume);
    for (dst, &p) in data[2 * n..].iter_mut().zip(&pmap) {
        *dst = ((p + PI) / (2.0 * PI)) as f32;
    }

    Ok(InputStack::new(holo.nx(), holo.ny(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::synthesize_hologram;
    use crate::Particle;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> OpticsConfig {
        OpticsConfig {
            nx: 16,
            ny: 16,
            z_count: 8,
            z_step: 40e-6,
            ..OpticsConfig::default()
        }
    }

    fn random_volume(nx: usize, ny: usize, zc: usize, seed: u64) -> ComplexVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexVolume {
            slices: (0..zc)
                .map(|_| {
                    ComplexField::new(
                        nx,
                        ny,
                        (0..nx * ny)
                            .map(|_| {
                                Complex64::new(
                                    rng.random_range(-1.0..1.0),
                                    rng.random_range(-1.0..1.0),
                                )
                            })
                            .collect(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn all_ones_hologram_reconstructs_unit_magnitude() {
        let config = small_config();
        let holo = Hologram::new(config.nx, config.ny, vec![1.0; config.nx * config.ny]);
        let vol = reconstruct_volume(&holo, &config, SensorFieldMode::Raw).unwrap();
        assert_eq!(vol.z_count(), config.z_count);
        for slice in vol.slices() {
            for c in slice.data() {
                assert!((c.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn volume_slices_match_direct_propagate() {
        let config = small_config();
        let holo = synthesize_hologram(
            &[Particle { x: 8.0, y: 8.0, z_index: 3, diameter: 1.0 }],
            &config,
        )
        .unwrap();
        let vol = reconstruct_volume(&holo, &config, SensorFieldMode::Raw).unwrap();
        let sensor = ComplexField::new(
            config.nx,
            config.ny,
            holo.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        );
        for j in [0, 3, 7] {
            let direct = propagate(&sensor, &config, -config.z_at(j)).unwrap();
            assert!(vol.slices()[j].rel_l2(&direct) < 1e-14);
        }
    }

    #[test]
    fn two_slice_volume_has_exactly_two_slices() {
        let config = OpticsConfig { z_count: 2, ..small_config() };
        let holo = Hologram::new(config.nx, config.ny, vec![1.0; config.nx * config.ny]);
        let vol = reconstruct_volume(&holo, &config, SensorFieldMode::Raw).unwrap();
        assert_eq!(vol.z_count(), 2);
    }

    #[test]
    fn depth_map_constructed_argmax_and_ties() {
        let mk = |scale: f64| ComplexField::new(4, 4, vec![Complex64::new(scale, 0.0); 16]);
        // slice 5 uniformly brighter
        let mut slices: Vec<ComplexField> = (0..8).map(|_| mk(1.0)).collect();
        slices[5] = mk(2.0);
        let vol = ComplexVolume { slices };
        assert!(depth_map(&vol).iter().all(|&j| j == 5));
        // all slices identical: tie-break to smallest index
        let vol = ComplexVolume { slices: (0..8).map(|_| mk(1.0)).collect() };
        assert!(depth_map(&vol).iter().all(|&j| j == 0));
    }

    #[test]
    fn depth_map_matches_bruteforce_argmax() {
        let vol = random_volume(4, 4, 8, 21);
        let got = depth_map(&vol);
        for y in 0..4 {
            for x in 0..4 {
                let mut best = 0;
                let mut bv = f64::NEG_INFINITY;
                for j in 0..8 {
                    let v = vol.slices()[j].at(y, x);
                    let m = (v * v.conj()).re;
                    if m > bv {
                        bv = m;
                        best = j;
                    }
                }
                assert_eq!(got[y * 4 + x], best);
            }
        }
    }

    #[test]
    fn phase_map_known_values_and_bruteforce() {
        // all slices real positive -> phase 0
        let ones = ComplexVolume {
            slices: (0..4)
                .map(|_| ComplexField::new(4, 4, vec![Complex64::new(2.0, 0.0); 16]))
                .collect(),
        };
        assert!(phase_map(&ones).iter().all(|&p| p == 0.0));
        // one slice pure imaginary -> pi/2 everywhere
        let mut slices: Vec<ComplexField> = (0..4)
            .map(|_| ComplexField::new(4, 4, vec![Complex64::new(1.0, 0.0); 16]))
            .collect();
        slices[2] = ComplexField::new(4, 4, vec![Complex64::new(0.0, 1.0); 16]);
        let vol = ComplexVolume { slices };
        assert!(phase_map(&vol).iter().all(|&p| (p - PI / 2.0).abs() < 1e-15));
        // random volume vs exhaustive scan
        let vol = random_volume(4, 4, 8, 33);
        let got = phase_map(&vol);
        for y in 0..4 {
            for x in 0..4 {
                let mut best = f64::NEG_INFINITY;
                for j in 0..8 {
                    best = best.max(vol.slices()[j].at(y, x).arg());
                }
                assert_eq!(got[y * 4 + x], best);
            }
        }
    }

    #[test]
    fn depth_map_invariant_to_positive_scaling() {
        let config = small_config();
        let holo = synthesize_hologram(
            &[Particle { x: 4.0, y: 11.0, z_index: 2, diameter: 1.0 }],
            &config,
        )
        .unwrap();
        let scaled = Hologram::new(
            config.nx,
            config.ny,
            holo.data().iter().map(|&v| 3.7 * v).collect(),
        );
        let v1 = reconstruct_volume(&holo, &config, SensorFieldMode::Raw).unwrap();
        let v2 = reconstruct_volume(&scaled, &config, SensorFieldMode::Raw).unwrap();
        assert_eq!(depth_map(&v1), depth_map(&v2));
    }

    #[test]
    fn assemble_input_ranges_and_degenerate_rules() {
        let config = small_config();
        // constant hologram: channel 0 maps to 0 by the min=max rule
        let flat = Hologram::new(config.nx, config.ny, vec![2.0; config.nx * config.ny]);
        let stack = assemble_input(&flat, &config, SensorFieldMode::Raw).unwrap();
        assert!(stack.channel(0).iter().all(|&v| v == 0.0));
        assert!(stack.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

        // real hologram: all channels in [0, 1], channel 1 quantized to
        // multiples of 1/(z_count-1)
        let holo = synthesize_hologram(
            &[
                Particle { x: 3.0, y: 4.0, z_index: 1, diameter: 1.0 },
                Particle { x: 12.0, y: 9.0, z_index: 6, diameter: 1.0 },
            ],
            &config,
        )
        .unwrap();
        let stack = assemble_input(&holo, &config, SensorFieldMode::Raw).unwrap();
        assert!(stack.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let denom = (config.z_count - 1) as f32;
        for &v in stack.channel(1) {
            let steps = v * denom;
            assert!((steps - steps.round()).abs() < 1e-5);
        }
        // channel 0 hits both endpoints under min-max normalization
        let ch0 = stack.channel(0);
        assert!(ch0.iter().cloned().fold(f32::INFINITY, f32::min) == 0.0);
        assert!(ch0.iter().cloned().fold(f32::NEG_INFINITY, f32::max) == 1.0);
    }

    #[test]
    fn input_stack_values_in_unit_interval_randomized() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let holo = Hologram::new(
                config.nx,
                config.ny,
                (0..config.nx * config.ny)
                    .map(|_| rng.random_range(0.0..4.0))
                    .collect(),
            );
            let stack = assemble_input(&holo, &config, SensorFieldMode::Raw).unwrap();
            assert!(stack.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let config = small_config();
        let holo = synthesize_hologram(
            &[Particle { x: 7.0, y: 7.0, z_index: 4, diameter: 1.0 }],
            &config,
        )
        .unwrap();
        let a = assemble_input(&holo, &config, SensorFieldMode::Raw).unwrap();
        let b = assemble_input(&holo, &config, SensorFieldMode::Raw).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
