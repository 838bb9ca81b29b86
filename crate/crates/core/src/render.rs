//! Soft differentiable renderer for scenes made of shaded disks.
//!
//! Each body is a set of disks ("blobs"). A blob covers a pixel by a sigmoid of the signed distance
//! to its rim; coverages of overlapping blobs are merged by a Boltzmann-weighted smooth maximum,
//! which also blends the per-blob normals of a hemispherical bump. Pixels are Lambert-shaded with an
//! ambient term, passed through a soft saturation knee and composited over a flat background.
//! Everything is built from tape operations, so images are differentiable in the blob centers and
//! in the rendering parameters.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::sim::{self, EnvId, FINGER_LINKS, QUAD_ARM};

/// Images are `[3, IMAGE_SIZE, IMAGE_SIZE]`, channel-major, values in `[0, 1]`.
pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const IMAGE_LEN: usize = CHANNELS * PIXELS;
pub const PSI_DIM: usize = 9;
/// Bumped whenever rendered pixels change for the same inputs.
pub const RENDERER_VERSION: &str = "blob-1";

/// Elevation of the light above the image plane.
pub const LIGHT_ELEVATION: f64 = 0.9;
/// Sharpness of the smooth maximum over blob coverages.
const MERGE_SHARPNESS: f64 = 12.0;
/// Shaded values above this knee are compressed smoothly towards 1.
const SATURATION_KNEE: f64 = 0.9;
/// Keeps the distance differentiable at a blob center.
const DISTANCE_EPS: f64 = 1e-8;
/// Edge softness in pixels.
const SOFTNESS_PIXELS: f64 = 0.6;

/// A rendered image, `[3, H, W]`.
pub type Image = Tensor;

/// Rendering parameters. Vector order: azimuth, intensity, ambient, albedo (r, g, b),
/// background (r, g, b).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderParams {
    pub azimuth: f64,
    pub intensity: f64,
    pub ambient: f64,
    pub albedo: [f64; 3],
    pub background: [f64; 3],
}

impl RenderParams {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.azimuth, self.intensity, self.ambient];
        v.extend_from_slice(&self.albedo);
        v.extend_from_slice(&self.background);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert_eq!(v.len(), PSI_DIM, "rendering parameters have {PSI_DIM} components");
        Self {
            azimuth: v[0],
            intensity: v[1],
            ambient: v[2],
            albedo: [v[3], v[4], v[5]],
            background: [v[6], v[7], v[8]],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.to_vec())
    }

    /// Midpoint of the source range.
    pub fn nominal() -> Self {
        RenderParams::from_slice(&PsiRange::source().midpoint())
    }
}

/// Box of rendering parameters that samples are drawn from uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsiRange {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl PsiRange {
    /// Parameters seen during training.
    pub fn source() -> Self {
        Self {
            lo: vec![0.0, 0.4, 0.2, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0],
            hi: vec![PI, 0.8, 0.4, 0.9, 0.9, 0.9, 0.25, 0.25, 0.25],
        }
    }

    /// Parameters of the downstream tasks: light from the other half-plane, everything else wider.
    pub fn target() -> Self {
        Self {
            lo: vec![PI, 0.25, 0.15, 0.4, 0.4, 0.4, 0.0, 0.0, 0.0],
            hi: vec![2.0 * PI, 1.0, 0.5, 1.0, 1.0, 1.0, 0.4, 0.4, 0.4],
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn contains(&self, psi: &RenderParams) -> bool {
        psi.to_vec()
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> RenderParams {
        let v: Vec<f64> = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| if b > a { rng.gen_range(a..b) } else { a })
            .collect();
        RenderParams::from_slice(&v)
    }
}

/// Orthographic view of a square world window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub center: [f64; 2],
    pub extent: f64,
}

impl Camera {
    pub fn for_env(env: EnvId) -> Self {
        match env {
            EnvId::Quad2d => Camera {
                center: [0.0, 0.0],
                extent: 2.4,
            },
            EnvId::Bounce => Camera {
                center: [0.0, 0.7],
                extent: 2.0,
            },
            EnvId::Finger => Camera {
                center: [0.0, 0.1],
                extent: 2.0,
            },
            EnvId::Rod => Camera {
                center: [0.0, -0.2],
                extent: 2.6,
            },
        }
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.extent / IMAGE_SIZE as f64
    }

    /// World coordinates of pixel centers, row-major with row 0 at the top.
    pub fn pixel_grid(&self) -> (Tensor, Tensor) {
        let p = self.pixel_pitch();
        let left = self.center[0] - self.extent / 2.0;
        let top = self.center[1] + self.extent / 2.0;
        let mut xs = Vec::with_capacity(PIXELS);
        let mut ys = Vec::with_capacity(PIXELS);
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                xs.push(left + (c as f64 + 0.5) * p);
                ys.push(top - (r as f64 + 0.5) * p);
            }
        }
        (Tensor::vector(xs), Tensor::vector(ys))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Blobs plus the camera looking at them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub camera: Camera,
    pub blobs: Vec<Blob>,
}

/// Blob whose center lives on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BlobVar<'t> {
    pub x: Var<'t>,
    pub y: Var<'t>,
    pub radius: f64,
}

const QUAD_BODY_RADIUS: f64 = 0.16;
/// Rotor blobs differ in size so that `theta` and `theta + pi` look different.
const QUAD_ROTOR_RADII: [f64; 2] = [0.09, 0.14];
pub const BOUNCE_RADIUS: f64 = 0.25;
const BOUNCE_MARKER_RADIUS: f64 = 0.08;
const BOUNCE_MARKER_OFFSET: f64 = BOUNCE_RADIUS + 0.02;
pub const FINGER_BASE: [f64; 2] = [0.0, 0.6];
const FINGER_RADIUS: f64 = 0.12;
const FINGER_TIP_RADIUS: f64 = 0.09;
const ROD_RADIUS: f64 = 0.1;

/// Blob layout of a state, on the tape.
pub fn geometry_var<'t>(env: EnvId, s: Var<'t>) -> Vec<BlobVar<'t>> {
    assert_eq!(s.len(), env.state_dim(), "{env}: state has wrong dimension");
    let blob = |x, y, radius| BlobVar { x, y, radius };
    match env {
        EnvId::Quad2d => {
            let (x, y, th) = (s.at(0), s.at(1), s.at(2));
            let (c, sn) = (th.cos().mul_scalar(QUAD_ARM), th.sin().mul_scalar(QUAD_ARM));
            vec![
                blob(x, y, QUAD_BODY_RADIUS),
                blob(x - c, y - sn, QUAD_ROTOR_RADII[0]),
                blob(x + c, y + sn, QUAD_ROTOR_RADII[1]),
            ]
        }
        EnvId::Bounce => {
            let (x, y, th) = (s.at(0), s.at(1).add_scalar(BOUNCE_RADIUS), s.at(3));
            vec![
                blob(x, y, BOUNCE_RADIUS),
                blob(
                    x + th.cos().mul_scalar(BOUNCE_MARKER_OFFSET),
                    y + th.sin().mul_scalar(BOUNCE_MARKER_OFFSET),
                    BOUNCE_MARKER_RADIUS,
                ),
            ]
        }
        EnvId::Finger => {
            let tape = s.tape();
            let (t1, t12) = (s.at(0), s.at(0) + s.at(1));
            let bx = tape.scalar(FINGER_BASE[0]);
            let by = tape.scalar(FINGER_BASE[1]);
            let ex = bx + t1.sin().mul_scalar(FINGER_LINKS[0]);
            let ey = by + t1.cos().mul_scalar(-FINGER_LINKS[0]);
            let tx = ex + t12.sin().mul_scalar(FINGER_LINKS[1]);
            let ty = ey + t12.cos().mul_scalar(-FINGER_LINKS[1]);
            vec![
                blob(bx, by, FINGER_RADIUS),
                blob(ex, ey, FINGER_RADIUS),
                blob(tx, ty, FINGER_TIP_RADIUS),
            ]
        }
        EnvId::Rod => {
            let tape = s.tape();
            sim::rod_node_x()
                .into_iter()
                .enumerate()
                .map(|(i, x)| blob(tape.scalar(x), s.at(i), ROD_RADIUS))
                .collect()
        }
    }
}

/// Blob layout of a state, as plain values.
pub fn state_to_geometry(env: EnvId, s: &[f64]) -> SceneGeometry {
    let tape = Tape::new();
    let blobs = geometry_var(env, tape.constant(Tensor::vector(s.to_vec())))
        .into_iter()
        .map(|b| Blob {
            center: [b.x.item(), b.y.item()],
            radius: b.radius,
        })
        .collect();
    SceneGeometry {
        camera: Camera::for_env(env),
        blobs,
    }
}

/// `min(x, k) + (1 - k)(1 - exp(-max(x - k, 0) / (1 - k)))`: identity below the knee, C¹, tends to 1.
fn saturate<'t>(x: Var<'t>) -> Var<'t> {
    let k = SATURATION_KNEE;
    let over = x.add_scalar(-k).clamp(0.0, f64::INFINITY);
    let tail = (over.mul_scalar(-1.0 / (1.0 - k)).exp().neg().add_scalar(1.0)).mul_scalar(1.0 - k);
    x.clamp(f64::NEG_INFINITY, k) + tail
}

/// Renders blobs under `psi` (a `[9]` vector) into a `[3, H, W]` image on the tape.
pub fn render_var<'t>(tape: &'t Tape, camera: &Camera, blobs: &[BlobVar<'t>], psi: Var<'t>) -> Var<'t> {
    assert_eq!(psi.len(), PSI_DIM, "rendering parameters have {PSI_DIM} components");
    let n = PIXELS;
    let background: Vec<Var<'t>> = (0..CHANNELS).map(|c| psi.at(6 + c).expand(&[n])).collect();
    if blobs.is_empty() {
        return Var::concat(&background).reshape(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE]);
    }
    let (gx, gy) = camera.pixel_grid();
    let gx = tape.constant(gx);
    let gy = tape.constant(gy);
    let soft = SOFTNESS_PIXELS * camera.pixel_pitch();

    let mut z = None;
    let mut occ = None;
    let mut normal: [Option<Var<'t>>; 3] = [None; 3];
    for b in blobs {
        let dx = gx - b.x.expand(&[n]);
        let dy = gy - b.y.expand(&[n]);
        let dist = (dx.square() + dy.square()).add_scalar(DISTANCE_EPS).sqrt();
        let alpha = dist.neg().add_scalar(b.radius).mul_scalar(1.0 / soft).sigmoid();
        let weight = alpha.mul_scalar(MERGE_SHARPNESS).exp();
        let (qx, qy) = (dx.mul_scalar(1.0 / b.radius), dy.mul_scalar(1.0 / b.radius));
        let inv_len = (qx.square() + qy.square()).add_scalar(1.0).powf(-0.5);
        let parts = [qx * inv_len, qy * inv_len, inv_len];
        let acc = |slot: Option<Var<'t>>, v: Var<'t>| Some(slot.map_or(v, |s| s + v));
        z = acc(z, weight);
        occ = acc(occ, weight * alpha);
        for (slot, p) in normal.iter_mut().zip(parts) {
            *slot = acc(*slot, weight * p);
        }
    }
    let inv_z = z.unwrap().powf(-1.0);
    let occupancy = occ.unwrap() * inv_z;

    let az = psi.at(0);
    let (ce, se) = (LIGHT_ELEVATION.cos(), LIGHT_ELEVATION.sin());
    let light = [az.cos().mul_scalar(ce), az.sin().mul_scalar(ce)];
    let n_dot_l = (normal[0].unwrap().scale_by(light[0]) + normal[1].unwrap().scale_by(light[1])) * inv_z
        + (normal[2].unwrap() * inv_z).mul_scalar(se);
    let diffuse = n_dot_l.clamp(0.0, f64::INFINITY);
    let shade = diffuse.scale_by(psi.at(1)).offset_by(psi.at(2));

    let channels: Vec<Var<'t>> = (0..CHANNELS)
        .map(|c| {
            let lit = saturate(shade.scale_by(psi.at(3 + c)));
            occupancy * (lit - background[c]) + background[c]
        })
        .collect();
    Var::concat(&channels).reshape(&[CHANNELS, IMAGE_SIZE, IMAGE_SIZE])
}

fn geometry_on_tape<'t>(tape: &'t Tape, geometry: &SceneGeometry, leaf: bool) -> (Option<Var<'t>>, Vec<BlobVar<'t>>) {
    let centers: Vec<f64> = geometry.blobs.iter().flat_map(|b| b.center).collect();
    let t = Tensor::vector(centers);
    let v = if leaf { tape.leaf(t) } else { tape.constant(t) };
    let blobs = geometry
        .blobs
        .iter()
        .enumerate()
        .map(|(i, b)| BlobVar {
            x: v.at(2 * i),
            y: v.at(2 * i + 1),
            radius: b.radius,
        })
        .collect();
    (leaf.then_some(v), blobs)
}

pub fn render(geometry: &SceneGeometry, psi: &RenderParams) -> Image {
    let tape = Tape::new();
    let (_, blobs) = geometry_on_tape(&tape, geometry, false);
    let psi = tape.constant(psi.to_tensor());
    (*render_var(&tape, &geometry.camera, &blobs, psi).value()).clone()
}

/// Image of an environment state.
pub fn render_state(env: EnvId, s: &[f64], psi: &RenderParams) -> Image {
    render(&state_to_geometry(env, s), psi)
}

/// Image together with its sensitivities `dI/dpsi_j`, one image per component.
pub fn render_with_dpsi(geometry: &SceneGeometry, psi: &RenderParams) -> (Image, Vec<Image>) {
    let tape = Tape::new();
    let (_, blobs) = geometry_on_tape(&tape, geometry, false);
    let pv = tape.leaf(psi.to_tensor());
    let img = render_var(&tape, &geometry.camera, &blobs, pv);
    let jac = (0..PSI_DIM)
        .map(|j| {
            let e = Tensor::basis([PSI_DIM], j);
            tape.tangent(&[(pv, &e)], img)
        })
        .collect();
    ((*img.value()).clone(), jac)
}

pub fn render_dpsi(geometry: &SceneGeometry, psi: &RenderParams) -> Vec<Image> {
    render_with_dpsi(geometry, psi).1
}

/// Pulls an image-shaped adjoint back to the blob centers, `[(d/dx, d/dy)]` per blob.
pub fn render_vjp_geometry(geometry: &SceneGeometry, psi: &RenderParams, adjoint: &Image) -> Vec<[f64; 2]> {
    if geometry.blobs.is_empty() {
        return Vec::new();
    }
    let tape = Tape::new();
    let (centers, blobs) = geometry_on_tape(&tape, geometry, true);
    let centers = centers.unwrap();
    let img = render_var(&tape, &geometry.camera, &blobs, tape.constant(psi.to_tensor()));
    let g = tape.vjp(&[(img, adjoint)], &[centers]).pop().unwrap();
    g.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Pulls an image-shaped adjoint back to the simulator state.
pub fn render_vjp_state(env: EnvId, s: &[f64], psi: &RenderParams, adjoint: &Image) -> Vec<f64> {
    let tape = Tape::new();
    let sv = tape.leaf(Tensor::vector(s.to_vec()));
    let blobs = geometry_var(env, sv);
    let img = render_var(&tape, &Camera::for_env(env), &blobs, tape.constant(psi.to_tensor()));
    tape.vjp(&[(img, adjoint)], &[sv]).pop().unwrap().into_data()
}

/// Writes a binary PPM (8 bits per channel, values clamped to `[0, 1]`).
pub fn write_ppm(path: &Path, image: &Image) -> io::Result<()> {
    let [c, h, w] = image.shape() else {
        panic!("expected a [3, H, W] image, got {:?}", image.shape());
    };
    assert_eq!(*c, CHANNELS, "expected an RGB image");
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let px = h * w;
    for i in 0..px {
        for ch in 0..CHANNELS {
            let v = image.data()[ch * px + i].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn centered_blob(radius: f64) -> SceneGeometry {
        SceneGeometry {
            camera: Camera::for_env(EnvId::Quad2d),
            blobs: vec![Blob {
                center: [0.0, 0.0],
                radius,
            }],
        }
    }

    fn pixel(img: &Image, c: usize, r: usize, col: usize) -> f64 {
        img.data()[(c * IMAGE_SIZE + r) * IMAGE_SIZE + col]
    }

    #[test]
    fn empty_scene_is_background() {
        let psi = RenderParams::nominal();
        let geom = SceneGeometry {
            camera: Camera::for_env(EnvId::Rod),
            blobs: vec![],
        };
        let img = render(&geom, &psi);
        assert_eq!(img.shape(), &[3, IMAGE_SIZE, IMAGE_SIZE]);
        for c in 0..3 {
            for i in 0..PIXELS {
                assert_eq!(img.data()[c * PIXELS + i], psi.background[c]);
            }
        }
        assert!(render_dpsi(&geom, &psi).iter().all(|j| j.len() == IMAGE_LEN));
    }

    #[test]
    fn unlit_covered_pixel_is_albedo_times_ambient() {
        let mut psi = RenderParams::nominal();
        psi.intensity = 0.0;
        let img = render(&centered_blob(1.3), &psi);
        for c in 0..3 {
            let v = pixel(&img, c, 16, 16);
            assert!((v - psi.albedo[c] * psi.ambient).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn far_pixels_show_background() {
        let psi = RenderParams::nominal();
        let img = render(&centered_blob(0.2), &psi);
        for c in 0..3 {
            assert!((pixel(&img, c, 0, 0) - psi.background[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn one_pixel_translation_shifts_the_image() {
        let psi = RenderParams::nominal();
        let mut geom = centered_blob(0.3);
        geom.blobs.push(Blob {
            center: [0.2, 0.1],
            radius: 0.15,
        });
        let a = render(&geom, &psi);
        let p = geom.camera.pixel_pitch();
        for b in &mut geom.blobs {
            b.center[0] += p;
        }
        let b = render(&geom, &psi);
        for c in 0..3 {
            for r in 0..IMAGE_SIZE {
                for col in 0..IMAGE_SIZE - 1 {
                    let d = (pixel(&a, c, r, col) - pixel(&b, c, r, col + 1)).abs();
                    assert!(d < 1e-9, "pixel ({c},{r},{col}) differs by {d}");
                }
            }
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for env in EnvId::ALL {
            for range in [PsiRange::source(), PsiRange::target()] {
                let psi = range.sample(&mut rng);
                let s: Vec<f64> = (0..env.state_dim()).map(|_| rng.gen_range(-0.4..0.4)).collect();
                let img = render_state(env, &s, &psi);
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn saturation_is_c1_and_bounded() {
        let tape = Tape::new();
        let xs = Tensor::vector(vec![0.0, 0.5, 0.9 - 1e-9, 0.9, 0.9 + 1e-9, 1.5, 40.0]);
        let x = tape.leaf(xs.clone());
        let y = saturate(x);
        let g = tape.backward(y.sum(), &[x]).pop().unwrap();
        let yv = y.value();
        assert_eq!(yv.data()[1], 0.5);
        assert!(yv.data().iter().all(|&v| v <= 1.0));
        assert!((g.data()[2] - g.data()[4]).abs() < 1e-7);
        assert!(g.data()[6] < 1e-12);
    }

    #[test]
    fn psi_ranges_are_nested_or_disjoint() {
        let (s, t) = (PsiRange::source(), PsiRange::target());
        // Azimuth ranges only touch at their boundary; every other range widens.
        assert!(s.hi[0] <= t.lo[0]);
        for j in 1..PSI_DIM {
            assert!(t.lo[j] <= s.lo[j] && t.hi[j] >= s.hi[j]);
        }
    }
}
