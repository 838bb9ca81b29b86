//! Domain-randomized datasets with precomputed rendering sensitivities, and their file format.
//!
//! File layout (little-endian): magic `RISPDATA`, `u32` format version, `u64` manifest length,
//! manifest JSON, `u64` record count, `u64` record stride in floats, the records as `f64`, then a
//! SHA-256 digest of everything before it. A record is
//! `state | observable | psi | image | dI/dpsi_0 | ... | dI/dpsi_8`.

use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::losses::SampleView;
use crate::render::{
    render_with_dpsi, state_to_geometry, PsiRange, RenderParams, SceneGeometry, CHANNELS, IMAGE_LEN, IMAGE_SIZE,
    PSI_DIM, RENDERER_VERSION,
};
use crate::sim::{self, EnvId, ROD_NODES};

const MAGIC: &[u8; 8] = b"RISPDATA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset file")]
    BadMagic,
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset file is truncated")]
    Truncated,
    #[error("dataset checksum mismatch")]
    Checksum,
    #[error("dataset holds {found} data, expected {expected}")]
    EnvMismatch { expected: EnvId, found: EnvId },
    #[error("invalid dataset manifest: {0}")]
    Manifest(String),
}

/// How many distinct rendering configurations a dataset cycles through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KConfigs {
    Fixed(usize),
    /// A new draw for every sample.
    Fresh,
}

impl fmt::Display for KConfigs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KConfigs::Fixed(k) => write!(f, "{k}"),
            KConfigs::Fresh => f.write_str("fresh"),
        }
    }
}

impl FromStr for KConfigs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "fresh" {
            return Ok(KConfigs::Fresh);
        }
        match s.parse::<usize>() {
            Ok(k) if k > 0 => Ok(KConfigs::Fixed(k)),
            _ => Err(format!("k-configs must be a positive integer or `fresh`, got `{s}`")),
        }
    }
}

impl Serialize for KConfigs {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KConfigs {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which rendering distribution the samples were drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub env: EnvId,
    pub n: usize,
    pub k_configs: KConfigs,
    pub seed: u64,
    pub domain: Domain,
    pub source_psi: PsiRange,
    pub target_psi: PsiRange,
    pub renderer_version: String,
}

impl DatasetManifest {
    /// Each target range is either disjoint from or contains its source range.
    pub fn ranges_are_consistent(&self) -> bool {
        (0..PSI_DIM).all(|j| {
            let (sl, sh) = (self.source_psi.lo[j], self.source_psi.hi[j]);
            let (tl, th) = (self.target_psi.lo[j], self.target_psi.hi[j]);
            let disjoint = th <= sl || tl >= sh;
            let wider = tl <= sl && th >= sh;
            disjoint || wider
        })
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable manifest")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSample {
    pub state: Vec<f64>,
    pub obs: Vec<f64>,
    pub psi: RenderParams,
    pub image: Tensor,
    pub jac_psi: Vec<Tensor>,
}

impl RenderSample {
    pub fn render(env: EnvId, state: Vec<f64>, psi: RenderParams) -> Self {
        let (image, jac_psi) = render_with_dpsi(&state_to_geometry(env, &state), &psi);
        Self {
            obs: sim::observe(env, &state),
            state,
            psi,
            image,
            jac_psi,
        }
    }

    pub fn view(&self) -> SampleView<'_> {
        SampleView {
            image: &self.image,
            target: &self.obs,
            jac_psi: &self.jac_psi,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<RenderSample>,
}

/// Whether every blob lies fully inside the camera window.
pub fn fully_visible(geometry: &SceneGeometry) -> bool {
    let c = geometry.camera;
    let half = c.extent / 2.0;
    geometry.blobs.iter().all(|b| {
        (b.center[0] - c.center[0]).abs() + b.radius <= half && (b.center[1] - c.center[1]).abs() + b.radius <= half
    })
}

/// Draws a state from the environment's visible range (velocities are zero; images cannot show them).
pub fn sample_state(env: EnvId, rng: &mut impl Rng) -> Vec<f64> {
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
    loop {
        let s = match env {
            EnvId::Quad2d => vec![
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-0.7..0.7),
                rng.gen_range(-FRAC_PI_2..FRAC_PI_2),
                0.0,
                0.0,
                0.0,
            ],
            EnvId::Bounce => vec![
                rng.gen_range(-0.6..0.6),
                rng.gen_range(-0.05..1.1),
                0.0,
                rng.gen_range(-PI..PI),
                0.0,
            ],
            EnvId::Finger => vec![
                rng.gen_range(-FRAC_PI_4..FRAC_PI_4),
                rng.gen_range(-FRAC_PI_4..FRAC_PI_4),
                0.0,
                0.0,
            ],
            EnvId::Rod => {
                let modes = [
                    rng.gen_range(-0.9..0.3),
                    rng.gen_range(-0.1..0.1),
                    rng.gen_range(-0.1..0.1),
                ];
                let mut s = vec![0.0; 2 * ROD_NODES];
                for (i, y) in s.iter_mut().enumerate().take(ROD_NODES - 1).skip(1) {
                    let u = i as f64 / (ROD_NODES - 1) as f64;
                    *y = modes
                        .iter()
                        .enumerate()
                        .map(|(m, a)| a * ((m + 1) as f64 * PI * u).sin())
                        .sum::<f64>()
                        + rng.gen_range(-0.02..0.02);
                }
                s
            }
        };
        if fully_visible(&state_to_geometry(env, &s)) {
            return s;
        }
    }
}

/// Samples `n` source-domain examples.
pub fn sample_dataset(env: EnvId, n: usize, k_configs: KConfigs, seed: u64) -> Dataset {
    sample_in_domain(env, n, k_configs, seed, Domain::Source, 1)
}

/// Samples `n` examples with a fresh target-domain rendering configuration each.
pub fn sample_target_dataset(env: EnvId, n: usize, seed: u64) -> Dataset {
    sample_in_domain(env, n, KConfigs::Fresh, seed, Domain::Target, 1)
}

/// Sampling with the rendering spread over `jobs` threads; the result does not depend on `jobs`.
pub fn sample_in_domain(env: EnvId, n: usize, k_configs: KConfigs, seed: u64, domain: Domain, jobs: usize) -> Dataset {
    assert!(n > 0, "dataset needs at least one sample");
    if let KConfigs::Fixed(k) = k_configs {
        assert!(k >= 1 && k <= n, "k-configs must lie in 1..=n");
    }
    let range = match domain {
        Domain::Source => PsiRange::source(),
        Domain::Target => PsiRange::target(),
    };
    let mut state_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let states: Vec<Vec<f64>> = (0..n).map(|_| sample_state(env, &mut state_rng)).collect();
    let psis: Vec<RenderParams> = match k_configs {
        KConfigs::Fresh => (0..n).map(|_| range.sample(&mut psi_rng)).collect(),
        KConfigs::Fixed(k) => {
            let pool: Vec<RenderParams> = (0..k).map(|_| range.sample(&mut psi_rng)).collect();
            (0..n).map(|i| pool[i % k]).collect()
        }
    };
    let jobs = jobs.max(1).min(n);
    let chunk = n.div_ceil(jobs);
    let mut samples = Vec::with_capacity(n);
    std::thread::scope(|scope| {
        let handles: Vec<_> = states
            .chunks(chunk)
            .zip(psis.chunks(chunk))
            .map(|(ss, ps)| {
                scope.spawn(move || {
                    ss.iter()
                        .zip(ps)
                        .map(|(s, p)| RenderSample::render(env, s.clone(), *p))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            samples.extend(h.join().expect("render worker panicked"));
        }
    });
    Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            env,
            n,
            k_configs,
            seed,
            domain,
            source_psi: PsiRange::source(),
            target_psi: PsiRange::target(),
            renderer_version: RENDERER_VERSION.to_string(),
        },
        samples,
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(DataError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn record_stride(env: EnvId) -> usize {
    env.state_dim() + env.obs_dim() + PSI_DIM + (1 + PSI_DIM) * IMAGE_LEN
}

impl Dataset {
    pub fn env(&self) -> EnvId {
        self.manifest.env
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic 8:2 split of sample indices into train and test.
    pub fn split_indices(&self, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.len() * 8).div_ceil(10);
        let test = idx.split_off(n_train);
        (idx, test)
    }

    /// Number of distinct rendering configurations present.
    pub fn distinct_psi(&self) -> usize {
        let mut seen: Vec<Vec<u64>> = self
            .samples
            .iter()
            .map(|s| s.psi.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();
        seen.sort();
        seen.dedup();
        seen.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let env = self.env();
        let manifest = serde_json::to_vec(&self.manifest).expect("serializable manifest");
        let stride = record_stride(env);
        let mut out = Vec::with_capacity(64 + manifest.len() + self.len() * stride * 8 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(stride as u64).to_le_bytes());
        let mut put = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for s in &self.samples {
            put(&s.state);
            put(&s.obs);
            put(&s.psi.to_vec());
            put(s.image.data());
            for j in &s.jac_psi {
                put(j.data());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Writes atomically: the file appears under `path` only once complete.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let tmp = path.with_extension("partial");
        {
            let mut f = io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(&self.to_bytes())?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the data belongs to `env`.
    pub fn load_for_env(path: &Path, env: EnvId) -> Result<Self, DataError> {
        let d = Self::load(path)?;
        if d.env() != env {
            return Err(DataError::EnvMismatch {
                expected: env,
                found: d.env(),
            });
        }
        Ok(d)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let mut take = |n: usize| cur.take(n);
        if take(8).map_err(|_| DataError::BadMagic)? != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DataError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let manifest_bytes = take(mlen)?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let stride = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let payload_len = count
            .checked_mul(stride)
            .and_then(|v| v.checked_mul(8))
            .ok_or(DataError::Truncated)?;
        let payload = take(payload_len)?;
        let digest = take(32)?;
        let body_len = bytes.len() - 32;
        if cur.pos != bytes.len() {
            return Err(DataError::Manifest("trailing bytes after the checksum".into()));
        }
        if Sha256::digest(&bytes[..body_len]).as_slice() != digest {
            return Err(DataError::Checksum);
        }
        let manifest: DatasetManifest =
            serde_json::from_slice(manifest_bytes).map_err(|e| DataError::Manifest(e.to_string()))?;
        let env = manifest.env;
        if stride != record_stride(env) || count != manifest.n {
            return Err(DataError::Manifest(format!(
                "record layout ({count} x {stride}) does not match a {env} dataset of {} samples",
                manifest.n
            )));
        }
        let floats: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let image_shape = [CHANNELS, IMAGE_SIZE, IMAGE_SIZE];
        let samples = floats
            .chunks_exact(stride)
            .map(|r| {
                let (state, r) = r.split_at(env.state_dim());
                let (obs, r) = r.split_at(env.obs_dim());
                let (psi, r) = r.split_at(PSI_DIM);
                let (image, r) = r.split_at(IMAGE_LEN);
                RenderSample {
                    state: state.to_vec(),
                    obs: obs.to_vec(),
                    psi: RenderParams::from_slice(psi),
                    image: Tensor::new(image_shape, image.to_vec()),
                    jac_psi: r
                        .chunks_exact(IMAGE_LEN)
                        .map(|j| Tensor::new(image_shape, j.to_vec()))
                        .collect(),
                }
            })
            .collect();
        Ok(Dataset { manifest, samples })
    }
}
