//! Synthetic MR-like phantoms: a textured body ellipsoid with one or two
//! bright, softly bounded lesions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_volume, write_volume, VolumeKind};
use crate::loss::make_contour_labels;
use crate::morphology::label_components;
use crate::volume::{Shape, Spacing, Triple, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Triple,
    pub spacing: Spacing,
    /// Body semi-axes in voxels; each case scales them by up to ±`body_jitter`.
    pub body_radii: [f64; 3],
    pub body_jitter: f64,
    pub background: f32,
    pub body_intensity: f32,
    /// Lesion semi-axis ranges in voxels, per axis.
    pub lesion_radii_min: [f64; 3],
    pub lesion_radii_max: [f64; 3],
    pub lesion_offset: [f32; 2],
    /// Logistic edge width in voxels.
    pub boundary_width: f64,
    pub second_lesion_prob: f64,
    pub texture_amplitude: f32,
    pub noise_sigma: f32,
    /// Accepted lesion voxel fraction of the whole volume.
    pub lesion_fraction: [f64; 2],
    pub max_attempts: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 128, 128],
            spacing: [4.0, 1.0, 1.0],
            body_radii: [11.0, 45.0, 45.0],
            body_jitter: 0.03,
            background: 5.0,
            body_intensity: 100.0,
            lesion_radii_min: [1.5, 5.0, 5.0],
            lesion_radii_max: [2.5, 9.0, 9.0],
            lesion_offset: [70.0, 110.0],
            boundary_width: 0.8,
            second_lesion_prob: 0.3,
            texture_amplitude: 12.0,
            noise_sigma: 6.0,
            lesion_fraction: [1e-4, 2e-2],
            max_attempts: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub offset: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Volume,
    pub region: Volume,
    pub contour: Volume,
    pub lesions: Vec<Lesion>,
}

impl Phantom {
    pub fn lesion_fraction(&self) -> f64 {
        self.region.count_nonzero() as f64 / self.region.len() as f64
    }
}

/// Normalized ellipsoidal radius: 1 on the surface.
fn ellipsoid_radius(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>().sqrt()
}

fn case_rng(seed: u64, index: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((index as u64) << 16) | attempt as u64);
    rng
}

fn sample_range(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Lesions inside the body, away from its surface and from each other.
fn place_lesions(spec: &PhantomSpec, body_c: [f64; 3], body_r: [f64; 3], rng: &mut impl Rng) -> Option<Vec<Lesion>> {
    let count = if rng.random_bool(spec.second_lesion_prob.clamp(0.0, 1.0)) { 2 } else { 1 };
    let mut lesions: Vec<Lesion> = Vec::new();
    for _ in 0..count {
        let radii: [f64; 3] = [0, 1, 2].map(|a| sample_range(rng, spec.lesion_radii_min[a], spec.lesion_radii_max[a]));
        // Room left for the lesion center inside the body, in body-normalized units.
        let room = [0, 1, 2].map(|a| 1.0 - (radii[a] + 2.0) / body_r[a]);
        if room.iter().any(|&r| r <= 0.1) {
            return None;
        }
        let center = [0, 1, 2].map(|a| body_c[a] + body_r[a] * room[a] * rng.random_range(-0.7..0.7));
        if ellipsoid_radius(center, body_c, [0, 1, 2].map(|a| body_r[a] * room[a])) > 1.0 {
            return None;
        }
        let apart = lesions.iter().all(|o| {
            let gap: f64 = (0..3).map(|a| ((center[a] - o.center[a]) / (radii[a] + o.radii[a] + 2.0)).powi(2)).sum();
            gap > 1.0
        });
        if !apart {
            return None;
        }
        let offset = sample_range(rng, spec.lesion_offset[0] as f64, spec.lesion_offset[1] as f64) as f32;
        lesions.push(Lesion { center, radii, offset });
    }
    Some(lesions)
}

fn render(spec: &PhantomSpec, body_c: [f64; 3], body_r: [f64; 3], lesions: &[Lesion], rng: &mut impl Rng) -> Phantom {
    let [d, h, w] = spec.dims;
    let shape = Shape::spatial(spec.dims);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let phase: [f64; 3] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let mut image = Vec::with_capacity(shape.len());
    let mut region = Vec::with_capacity(shape.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let rb = ellipsoid_radius(p, body_c, body_r);
                let body = 1.0 / (1.0 + (((rb - 1.0) * body_r[1]) / spec.boundary_width).exp());
                let texture = (p[1] * 0.11 + phase[0]).sin() * (p[2] * 0.09 + phase[1]).cos() + 0.5 * (p[0] * 0.5 + p[2] * 0.05 + phase[2]).sin();
                let mut v = spec.background as f64 + body * (spec.body_intensity as f64 + spec.texture_amplitude as f64 * texture);
                let mut inside = false;
                for l in lesions {
                    let rl = ellipsoid_radius(p, l.center, l.radii);
                    let rmin = l.radii.iter().cloned().fold(f64::INFINITY, f64::min);
                    v += l.offset as f64 / (1.0 + (((rl - 1.0) * rmin) / spec.boundary_width).exp());
                    inside |= rl <= 1.0;
                }
                image.push(v as f32 + noise.sample(rng));
                region.push(inside as u8 as f32);
            }
        }
    }
    let image = Volume::from_vec(shape, image).expect("sized").with_spacing(spec.spacing);
    let region = Volume::from_vec(shape, region).expect("sized").with_spacing(spec.spacing);
    let contour = make_contour_labels(&region).with_spacing(spec.spacing);
    Phantom {
        image,
        region,
        contour,
        lesions: lesions.to_vec(),
    }
}

/// Case `index` of the dataset seeded by `seed`; retries placement with
/// fresh sub-seeds until the lesion constraints hold.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64, index: usize) -> Result<Phantom> {
    let center = spec.dims.map(|n| (n as f64 - 1.0) / 2.0);
    for attempt in 0..spec.max_attempts.max(1) {
        let mut rng = case_rng(seed, index, attempt);
        let body_r = spec.body_radii.map(|r| r * (1.0 + sample_range(&mut rng, -spec.body_jitter, spec.body_jitter)));
        let body_c = [0, 1, 2].map(|a| center[a] + sample_range(&mut rng, -1.0, 1.0));
        let Some(lesions) = place_lesions(spec, body_c, body_r, &mut rng) else {
            continue;
        };
        let phantom = render(spec, body_c, body_r, &lesions, &mut rng);
        let frac = phantom.lesion_fraction();
        let comps = label_components(&phantom.region).components.len();
        if frac >= spec.lesion_fraction[0] && frac <= spec.lesion_fraction[1] && comps == lesions.len() {
            return Ok(phantom);
        }
    }
    Err(Error::Config(format!(
        "could not place lesions for case {index} in {} attempts",
        spec.max_attempts
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub name: String,
    pub lesions: usize,
    pub lesion_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub cases: Vec<CaseEntry>,
}

pub const MANIFEST: &str = "dataset.json";

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

fn case_dir(root: &Path, name: &str) -> PathBuf {
    root.join("cases").join(name)
}

/// Write `n_cases` phantoms plus a manifest under `root`.
pub fn synth(spec: &PhantomSpec, seed: u64, n_cases: usize, root: &Path) -> Result<Manifest> {
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let p = generate_phantom(spec, seed, i)?;
        let name = case_name(i);
        let dir = case_dir(root, &name);
        write_volume(&dir.join("image"), &p.image, VolumeKind::Image)?;
        write_volume(&dir.join("region"), &p.region, VolumeKind::Mask)?;
        write_volume(&dir.join("contour"), &p.contour, VolumeKind::Mask)?;
        cases.push(CaseEntry {
            name,
            lesions: p.lesions.len(),
            lesion_fraction: p.lesion_fraction(),
        });
    }
    let manifest = Manifest {
        seed,
        phantom: spec.clone(),
        cases,
    };
    fs::create_dir_all(root)?;
    fs::write(root.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// One case read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub image: Volume,
    pub region: Volume,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest = serde_json::from_slice(&fs::read(root.join(MANIFEST))?)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.cases.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<Case> {
        let entry = self.manifest.cases.get(index).ok_or(Error::Empty("dataset case"))?;
        let dir = case_dir(&self.root, &entry.name);
        Ok(Case {
            name: entry.name.clone(),
            image: read_volume(&dir.join("image"))?.0,
            region: read_volume(&dir.join("region"))?.0,
        })
    }
}
