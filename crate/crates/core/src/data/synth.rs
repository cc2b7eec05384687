//! Seeded multi-camera, multi-dataset generator.
//!
//! Each identity has a latent `z ~ N(0, I_d)`. Camera `c` of dataset `s`
//! renders it as `x = A_c z + b_c + u_s + eps` where `A_c` is a shared base
//! map plus a camera-specific perturbation, `b_c` a camera offset, `u_s` a
//! dataset offset and `eps ~ N(0, noise_sigma^2 I)`.
//!
//! Time is laid out so that every person walks through its cameras one
//! tracklet after the other, while consecutive persons start one time unit
//! apart. A person therefore never co-occurs with itself, and each tracklet
//! overlaps tracklets of several other persons.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{CameraId, Dataset, PersonId, Sample, TrackletId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_datasets: usize,
    pub cameras_per_dataset: usize,
    pub ids_per_dataset: usize,
    pub tracklets_per_id_per_camera: usize,
    pub images_per_tracklet: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub camera_transform_scale: f64,
    pub dataset_shift_scale: f64,
    pub noise_sigma: f64,
    /// Fraction of identities (rounded) seen by at least two cameras.
    pub cross_camera_id_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_datasets: 4,
            cameras_per_dataset: 3,
            ids_per_dataset: 200,
            tracklets_per_id_per_camera: 1,
            images_per_tracklet: 4,
            latent_dim: 8,
            feature_dim: 32,
            camera_transform_scale: 0.45,
            dataset_shift_scale: 0.5,
            noise_sigma: 0.3,
            cross_camera_id_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_datasets", self.num_datasets),
            ("cameras_per_dataset", self.cameras_per_dataset),
            ("ids_per_dataset", self.ids_per_dataset),
            (
                "tracklets_per_id_per_camera",
                self.tracklets_per_id_per_camera,
            ),
            ("images_per_tracklet", self.images_per_tracklet),
            ("latent_dim", self.latent_dim),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(0.0..=1.0).contains(&self.cross_camera_id_fraction) {
            return Err(Error::InvalidConfig(
                "cross_camera_id_fraction must lie in [0, 1]".into(),
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("camera_transform_scale", self.camera_transform_scale),
            ("dataset_shift_scale", self.dataset_shift_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if self.cameras_per_dataset < 2 && self.num_cross_camera_ids() > 0 {
            return Err(Error::InvalidConfig(
                "cross-camera identities need at least two cameras".into(),
            ));
        }
        Ok(())
    }

    pub fn num_cross_camera_ids(&self) -> usize {
        (self.cross_camera_id_fraction * self.ids_per_dataset as f64).round() as usize
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || scale * rng.sample::<f64, _>(StandardNormal))
}

struct CameraModel {
    map: Array2<f64>,
    offset: Array1<f64>,
}

/// Generates `num_datasets` datasets; a pure function of `config`.
///
/// Person and tracklet ids are unique across all returned datasets.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Vec<Dataset>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (f, d) = (config.feature_dim, config.latent_dim);
    let col_scale = 1.0 / (d as f64).sqrt();
    let base = normal_matrix(&mut rng, f, d, col_scale);

    let frames = config.images_per_tracklet;
    let visit_len = frames as f64 + 1.0;
    let mut next_tracklet: TrackletId = 0;
    let mut out = Vec::with_capacity(config.num_datasets);

    for s in 0..config.num_datasets {
        let shift = normal_vector(&mut rng, f, config.dataset_shift_scale);
        let cameras: Vec<CameraModel> = (0..config.cameras_per_dataset)
            .map(|_| CameraModel {
                map: &base
                    + &normal_matrix(&mut rng, f, d, config.camera_transform_scale * col_scale),
                offset: normal_vector(&mut rng, f, config.camera_transform_scale),
            })
            .collect();

        let n_ids = config.ids_per_dataset;
        let mut order: Vec<usize> = (0..n_ids).collect();
        order.shuffle(&mut rng);
        let multi = config.num_cross_camera_ids();
        let mut camera_sets: Vec<Vec<CameraId>> = vec![Vec::new(); n_ids];
        for (rank, &p) in order.iter().enumerate() {
            let mut all: Vec<CameraId> = (0..config.cameras_per_dataset as CameraId).collect();
            all.shuffle(&mut rng);
            let count = if rank < multi {
                rng.random_range(2..=config.cameras_per_dataset)
            } else {
                1
            };
            all.truncate(count);
            camera_sets[p] = all;
        }

        let mut arrival: Vec<usize> = (0..n_ids).collect();
        arrival.shuffle(&mut rng);

        let mut samples = Vec::new();
        for p in 0..n_ids {
            let person_id = (s * n_ids + p) as PersonId;
            let z = normal_vector(&mut rng, d, 1.0);
            let start = arrival[p] as f64;
            let visits = camera_sets[p]
                .iter()
                .flat_map(|&c| std::iter::repeat_n(c, config.tracklets_per_id_per_camera));
            for (v, cam) in visits.enumerate() {
                let model = &cameras[cam as usize];
                let clean = model.map.dot(&z) + &model.offset + &shift;
                let t0 = start + v as f64 * visit_len;
                for i in 0..frames {
                    let noise = normal_vector(&mut rng, f, config.noise_sigma);
                    let x = &clean + &noise;
                    samples.push(Sample {
                        features: x.to_vec(),
                        dataset_id: s as u32,
                        camera_id: cam,
                        person_id: Some(person_id),
                        tracklet_id: next_tracklet,
                        time_start: t0 + i as f64,
                        time_end: t0 + i as f64 + 1.0,
                    });
                }
                next_tracklet += 1;
            }
        }
        out.push(Dataset::new(f, samples)?);
    }
    Ok(out)
}
