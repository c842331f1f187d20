//! Synthetic ray-cast scenes, dataset IO and photometric augmentation.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::geometry::{rodrigues, CameraIntrinsics, PoseSE3};
use crate::parallel::map_indexed;
use crate::{Error, Result};

pub const FRAME_FILES: [&str; 3] = ["frame_0.png", "frame_1.png", "frame_2.png"];
pub const DEPTH_FILE: &str = "gt_depth.pfm";
pub const INTRINSICS_FILE: &str = "intrinsics.json";

/// Smallest fraction of target pixels that must stay in view of each source.
pub const MIN_IN_VIEW: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// Fronto-parallel background at `far` with a rectangle at `near`.
    TwoPlane,
    /// Smooth surface `Z = h(X, Y)` with `near <= h <= far`.
    Heightfield,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-plane" => Ok(Layout::TwoPlane),
            "heightfield" => Ok(Layout::Heightfield),
            _ => Err(Error::InvalidArgument(format!("unknown layout {s:?}"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::TwoPlane => "two-plane",
            Layout::Heightfield => "heightfield",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub layout: Layout,
    pub near: f64,
    pub far: f64,
    pub texture_seed: u64,
    /// Target→source motion for the previous and next frame.
    pub motions: [PoseSE3; 2],
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Foreground rectangle `[x0, y0, x1, y1]` as fractions of the target
    /// image; empty for a single plane.
    pub foreground: [f64; 4],
}

impl SceneSpec {
    /// Randomized scene with the camera moving mostly along its optical axis
    /// plus a small sideways drift.
    pub fn random(layout: Layout, width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = 0.9 * width as f64;
        let intrinsics = CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        };
        let near = rng.gen_range(1.6..2.4);
        let far = rng.gen_range(4.5..6.0);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let base = [
            sign * rng.gen_range(0.0..0.04),
            rng.gen_range(-0.01..0.01),
            -rng.gen_range(0.12..0.2),
        ];
        let motion = |dir: f64, rng: &mut ChaCha8Rng| PoseSE3 {
            axis_angle: [
                rng.gen_range(-0.003..0.003),
                rng.gen_range(-0.003..0.003),
                rng.gen_range(-0.003..0.003),
            ],
            translation: [
                dir * base[0] * rng.gen_range(0.85..1.15),
                dir * base[1],
                dir * base[2],
            ],
        };
        let motions = [motion(-1.0, &mut rng), motion(1.0, &mut rng)];
        let w = rng.gen_range(0.3..0.55);
        let h = rng.gen_range(0.3..0.55);
        let x0 = rng.gen_range(0.08..(0.92 - w));
        let y0 = rng.gen_range(0.08..(0.92 - h));
        Self {
            layout,
            near,
            far,
            texture_seed: rng.gen(),
            motions,
            intrinsics,
            width,
            height,
            foreground: [x0, y0, x0 + w, y0 + h],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("scene resolution must be non-zero".into()));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "scene depth range needs 0 < near < far, got [{}, {}]",
                self.near, self.far
            )));
        }
        for m in &self.motions {
            if m.to_vector().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("camera path has non-finite values".into()));
            }
        }
        Ok(())
    }
}

/// Three consecutive frames `[I_{t-1}, I_t, I_{t+1}]`, each `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub frames: [Tensor; 3],
    /// `[H, W]` depth of the middle frame.
    pub gt_depth: Option<Tensor>,
    pub intrinsics: CameraIntrinsics,
    /// Ground-truth target→source motions when known.
    pub motions: Option<[PoseSE3; 2]>,
}

impl Triplet {
    pub fn target(&self) -> &Tensor {
        &self.frames[1]
    }

    pub fn height(&self) -> usize {
        self.frames[1].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[1].shape()[2]
    }
}

struct Wave {
    freq: [f64; 2],
    phase: f64,
    amp: [f64; 3],
}

struct Texture {
    tint: [f64; 3],
    waves: Vec<Wave>,
}

impl Texture {
    /// Waves with periods between `min_period` and `3 × min_period` world units.
    fn random(rng: &mut ChaCha8Rng, tint: [f64; 3], min_period: f64) -> Self {
        let waves = (0..6)
            .map(|_| {
                let period = min_period * rng.gen_range(1.0..3.0);
                let angle = rng.gen_range(0.0..std::f64::consts::PI);
                let k = std::f64::consts::TAU / period;
                let a = rng.gen_range(0.05..0.1);
                Wave {
                    freq: [k * angle.cos(), k * angle.sin()],
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    amp: [a * rng.gen_range(0.6..1.0), a * rng.gen_range(0.6..1.0), a * rng.gen_range(0.6..1.0)],
                }
            })
            .collect();
        Self { tint, waves }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = [0.0; 3];
        for w in &self.waves {
            let s = (w.freq[0] * x + w.freq[1] * y + w.phase).sin();
            for (ci, a) in c.iter_mut().zip(w.amp) {
                *ci += a * s;
            }
        }
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = (self.tint[i] + c[i]).clamp(0.0, 1.0);
        }
        out
    }
}

struct Surface {
    x: [f64; 3],
    y: [f64; 3],
    phase: [f64; 3],
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    background: Texture,
    foreground: Texture,
    /// Foreground rectangle in world units on the `near` plane.
    rect: [f64; 4],
    surface: Surface,
}

impl<'a> Scene<'a> {
    fn new(spec: &'a SceneSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let k = &spec.intrinsics;
        let px = |d: f64| d / k.fx;
        let cool = [rng.gen_range(0.25..0.4), rng.gen_range(0.35..0.5), rng.gen_range(0.55..0.7)];
        let warm = [rng.gen_range(0.6..0.75), rng.gen_range(0.4..0.55), rng.gen_range(0.2..0.35)];
        let background = Texture::random(&mut rng, cool, 6.0 * px(spec.far));
        let foreground = Texture::random(&mut rng, warm, 6.0 * px(spec.near));
        let f = spec.foreground;
        let (w, h) = (spec.width as f64, spec.height as f64);
        let to_x = |u: f64| (u * w - 0.5 - k.cx) / k.fx * spec.near;
        let to_y = |v: f64| (v * h - 0.5 - k.cy) / k.fy * spec.near;
        let rect = [to_x(f[0]), to_y(f[1]), to_x(f[2]), to_y(f[3])];
        let span = spec.far * w / k.fx;
        let mut wave = || std::f64::consts::TAU / (span * rng.gen_range(0.6..1.4));
        let surface = Surface {
            x: [wave(), wave(), wave()],
            y: [wave(), wave(), wave()],
            phase: [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
        };
        Self {
            spec,
            background,
            foreground,
            rect,
            surface,
        }
    }

    fn height_at(&self, x: f64, y: f64) -> f64 {
        let s = &self.surface;
        let mut v = 0.0;
        for i in 0..3 {
            v += (s.x[i] * x + s.y[i] * y + s.phase[i]).sin();
        }
        let mid = 0.5 * (self.spec.near + self.spec.far);
        let amp = 0.5 * (self.spec.far - self.spec.near);
        mid + amp * v / 3.0
    }

    /// First hit along `origin + s * dir`: `(color, world z)`.
    fn trace(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<([f64; 3], f64)> {
        if dir[2] <= 1e-9 {
            return None;
        }
        let at = |z: f64| {
            let s = (z - origin[2]) / dir[2];
            (origin[0] + s * dir[0], origin[1] + s * dir[1], s)
        };
        match self.spec.layout {
            Layout::TwoPlane => {
                let (x, y, s) = at(self.spec.near);
                let r = self.rect;
                if s > 0.0 && x >= r[0] && x < r[2] && y >= r[1] && y < r[3] {
                    return Some((self.foreground.color(x, y), self.spec.near));
                }
                let (x, y, s) = at(self.spec.far);
                (s > 0.0).then(|| (self.background.color(x, y), self.spec.far))
            }
            Layout::Heightfield => {
                let gap = |z: f64| {
                    let (x, y, _) = at(z);
                    z - self.height_at(x, y)
                };
                let (mut lo, mut hi) = (self.spec.near - 1e-6, self.spec.far + 1e-6);
                if at(lo).2 <= 0.0 {
                    return None;
                }
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if gap(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let z = 0.5 * (lo + hi);
                let (x, y, _) = at(z);
                Some((self.background.color(x, y), z))
            }
        }
    }

    /// Render the view of a camera related to the target by `motion`
    /// (target→camera). Returns the image and, per pixel, the hit z-depth
    /// in the target frame.
    fn render(&self, motion: &PoseSE3) -> (Tensor, Vec<f64>) {
        let (w, h) = (self.spec.width, self.spec.height);
        let k = &self.spec.intrinsics;
        let r = rodrigues(motion.axis_angle);
        let t = motion.translation;
        // camera center and axes in target coordinates: p = Rᵀ (q - t)
        let mut center = [0.0; 3];
        for j in 0..3 {
            center[j] = -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]);
        }
        let mut img = vec![0.0; 3 * h * w];
        let mut depth = vec![f64::INFINITY; h * w];
        for y in 0..h {
            for x in 0..w {
                let ray = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
                let mut dir = [0.0; 3];
                for j in 0..3 {
                    dir[j] = r[0][j] * ray[0] + r[1][j] * ray[1] + r[2][j] * ray[2];
                }
                let i = y * w + x;
                if let Some((c, z)) = self.trace(center, dir) {
                    for ch in 0..3 {
                        img[ch * h * w + i] = c[ch];
                    }
                    depth[i] = z;
                }
            }
        }
        (Tensor::from_parts(vec![3, h, w], img), depth)
    }
}

/// Fraction of target pixels whose 3D point projects inside the source image.
fn in_view_fraction(spec: &SceneSpec, depth: &[f64], motion: &PoseSE3) -> f64 {
    let (w, h) = (spec.width, spec.height);
    let k = &spec.intrinsics;
    let r = rodrigues(motion.axis_angle);
    let t = motion.translation;
    let mut inside = 0usize;
    for y in 0..h {
        for x in 0..w {
            let d = depth[y * w + x];
            if !d.is_finite() {
                continue;
            }
            let p = [(x as f64 - k.cx) / k.fx * d, (y as f64 - k.cy) / k.fy * d, d];
            let q: Vec<f64> = (0..3).map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i]).collect();
            if q[2] <= 0.0 {
                continue;
            }
            let u = k.fx * q[0] / q[2] + k.cx;
            let v = k.fy * q[1] / q[2] + k.cy;
            // the image covers pixel centres ±0.5
            if u >= -0.5 && u <= w as f64 - 0.5 && v >= -0.5 && v <= h as f64 - 0.5 {
                inside += 1;
            }
        }
    }
    inside as f64 / (w * h) as f64
}

pub fn generate_triplet(spec: &SceneSpec) -> Result<Triplet> {
    spec.validate()?;
    let scene = Scene::new(spec);
    let (target, depth) = scene.render(&PoseSE3::identity());
    if depth.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidArgument("scene does not cover the target view".into()));
    }
    for m in &spec.motions {
        let f = in_view_fraction(spec, &depth, m);
        if f < MIN_IN_VIEW {
            return Err(Error::InvalidArgument(format!(
                "camera path leaves only {:.0}% of pixels in view",
                100.0 * f
            )));
        }
    }
    let prev = scene.render(&spec.motions[0]).0;
    let next = scene.render(&spec.motions[1]).0;
    Ok(Triplet {
        frames: [prev, target, next],
        gt_depth: Some(Tensor::from_parts(vec![spec.height, spec.width], depth)),
        intrinsics: spec.intrinsics,
        motions: Some(spec.motions),
    })
}

/// Seed of the `index`-th scene of a dataset generated with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

const SCENE_ATTEMPTS: u64 = 32;

/// Render a random scene, redrawing the camera path when it leaves too much
/// of the target out of view. The first draw uses `seed` itself.
pub fn generate_random(layout: Layout, width: usize, height: usize, seed: u64) -> Result<Triplet> {
    let mut last = None;
    for attempt in 0..SCENE_ATTEMPTS {
        let s = if attempt == 0 { seed } else { scene_seed(seed, attempt as usize) };
        match generate_triplet(&SceneSpec::random(layout, width, height, s)) {
            Ok(t) => return Ok(t),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// `n` random scenes, generated in parallel and returned in index order.
pub fn generate_set(layout: Layout, n: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Triplet>> {
    map_indexed(n, |i| generate_random(layout, width, height, scene_seed(seed, i)))
        .into_iter()
        .collect()
}

// ---------------------------------------------------------------------------
// IO
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let [_, c, h, w] = img.dims4()?;
    if c != 3 {
        return Err(Error::InvalidShape {
            op: "write_png",
            shape: img.shape().to_vec(),
            reason: "expected 3 channels".into(),
        });
    }
    let d = img.data();
    let mut buf = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::save_buffer_with_format(path, &buf, w as u32, h as u32, image::ColorType::Rgb8, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// `[3, H, W]` image in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::new(&[3, h, w], (0..3 * h * w).map(|i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        raw[3 * p + ch] as f64 / 255.0
    }).collect())
}

/// Little-endian single-channel PFM, rows stored bottom to top.
pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<()> {
    let r = depth.rank();
    if r < 2 {
        return Err(Error::InvalidShape {
            op: "write_pfm",
            shape: depth.shape().to_vec(),
            reason: "expected [H, W]".into(),
        });
    }
    let (h, w) = (depth.shape()[r - 2], depth.shape()[r - 1]);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = Vec::with_capacity(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            body.extend_from_slice(&(depth.data()[y * w + x] as f32).to_le_bytes());
        }
    }
    write!(out, "Pf\n{w} {h}\n-1.0\n")
        .and_then(|_| out.write_all(&body))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields.len() < 4 || fields[0] != "Pf" {
        return Err(bad("not a single-channel PFM file"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("truncated"))?;
    if w == 0 || h == 0 || body.len() < 4 * w * h {
        return Err(bad("truncated pixel data"));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    for (i, chunk) in body.chunks_exact(4).take(w * h).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, x) = (i / w, i % w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Tensor::new(&[h, w], data)
}

pub fn save_triplet(dir: &Path, t: &Triplet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (f, name) in t.frames.iter().zip(FRAME_FILES) {
        write_png(&dir.join(name), f)?;
    }
    if let Some(d) = &t.gt_depth {
        write_pfm(&dir.join(DEPTH_FILE), d)?;
    }
    let k = t.intrinsics;
    let meta = IntrinsicsFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: t.width(),
        height: t.height(),
    };
    let path = dir.join(INTRINSICS_FILE);
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_triplet(dir: &Path) -> Result<Triplet> {
    let path = dir.join(INTRINSICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: IntrinsicsFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let intrinsics = CameraIntrinsics::new(meta.fx, meta.fy, meta.cx, meta.cy)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    let mut frames = Vec::with_capacity(3);
    for name in FRAME_FILES {
        let p = dir.join(name);
        let f = read_png(&p)?;
        if f.shape() != [3, meta.height, meta.width] {
            return Err(Error::format(
                &p,
                format!("expected {}x{} pixels, found {:?}", meta.width, meta.height, f.shape()),
            ));
        }
        frames.push(f);
    }
    let dp = dir.join(DEPTH_FILE);
    let gt_depth = if dp.exists() {
        let d = read_pfm(&dp)?;
        if d.shape() != [meta.height, meta.width] {
            return Err(Error::format(&dp, "depth resolution differs from the frames"));
        }
        Some(d)
    } else {
        None
    };
    let frames: [Tensor; 3] = frames.try_into().expect("three frames");
    Ok(Triplet {
        frames,
        gt_depth,
        intrinsics,
        motions: None,
    })
}

/// Triplet folders of a dataset directory in lexicographic order, loaded on
/// demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    entries: Vec<PathBuf>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PathBuf] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Result<Triplet> {
        load_triplet(&self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<Triplet>> + '_ {
        self.entries.iter().map(|p| load_triplet(p))
    }

    /// Load everything, in order.
    pub fn load_all(&self) -> Result<Vec<Triplet>> {
        map_indexed(self.len(), |i| self.get(i)).into_iter().collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut entries = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.is_dir() {
            entries.push(p);
        }
    }
    entries.sort();
    Ok(Dataset {
        root: dir.to_path_buf(),
        entries,
    })
}

/// Folder name of the `i`-th triplet in a generated dataset.
pub fn triplet_dir_name(i: usize) -> String {
    format!("{i:06}")
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    /// Flip with probability 1/2; color jitter with probability 1/2, factors
    /// in `[0.8, 1.2]` and hue shift in `[-0.1, 0.1]`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(0.5);
        let jitter = rng.gen_bool(0.5);
        let brightness = rng.gen_range(0.8..=1.2);
        let contrast = rng.gen_range(0.8..=1.2);
        let saturation = rng.gen_range(0.8..=1.2);
        let hue = rng.gen_range(-0.1..=0.1);
        if !jitter {
            return Self { flip, ..Self::IDENTITY };
        }
        Self {
            flip,
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

fn flip_map(t: &Tensor) -> Tensor {
    let r = t.rank();
    let w = t.shape()[r - 1];
    Tensor::from_fn(t.shape(), |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

fn mirror_pose(p: &PoseSE3) -> PoseSE3 {
    let (w, t) = (p.axis_angle, p.translation);
    PoseSE3 {
        axis_angle: [w[0], -w[1], -w[2]],
        translation: [-t[0], t[1], t[2]],
    }
}

fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast (about `mean_gray`), saturation and hue, in that
/// order, clamping to `[0, 1]` after each step.
fn jitter(img: &Tensor, p: &AugmentParams, mean_gray: f64) -> Tensor {
    let hw = img.len() / 3;
    let d = img.data();
    let mut out = vec![0.0; img.len()];
    for i in 0..hw {
        let mut c = [d[i], d[hw + i], d[2 * hw + i]];
        for v in &mut c {
            *v = (*v * p.brightness).clamp(0.0, 1.0);
        }
        for v in &mut c {
            *v = ((*v - mean_gray) * p.contrast + mean_gray).clamp(0.0, 1.0);
        }
        let g = gray(c[0], c[1], c[2]);
        for v in &mut c {
            *v = ((*v - g) * p.saturation + g).clamp(0.0, 1.0);
        }
        if p.hue != 0.0 {
            let (h, s, v) = rgb_to_hsv(c[0], c[1], c[2]);
            let (r, g, b) = hsv_to_rgb(h + p.hue, s, v);
            c = [r, g, b];
        }
        for ch in 0..3 {
            out[ch * hw + i] = c[ch].clamp(0.0, 1.0);
        }
    }
    Tensor::from_parts(img.shape().to_vec(), out)
}

/// Apply `params` identically to the three frames. Depth is only flipped.
pub fn apply_augmentation(t: &Triplet, params: &AugmentParams) -> Triplet {
    let mut out = t.clone();
    if params.flip {
        for f in &mut out.frames {
            *f = flip_map(f);
        }
        out.gt_depth = out.gt_depth.as_ref().map(flip_map);
        out.intrinsics = t.intrinsics.flipped(t.width());
        out.motions = t.motions.map(|m| [mirror_pose(&m[0]), mirror_pose(&m[1])]);
    }
    if *params != (AugmentParams { flip: params.flip, ..AugmentParams::IDENTITY }) {
        let target = &out.frames[1];
        let hw = target.len() / 3;
        let td = target.data();
        let mean_gray = (0..hw)
            .map(|i| gray(td[i] * params.brightness, td[hw + i] * params.brightness, td[2 * hw + i] * params.brightness).min(1.0))
            .sum::<f64>()
            / hw as f64;
        for f in &mut out.frames {
            *f = jitter(f, params, mean_gray);
        }
    }
    out
}

pub fn augment(t: &Triplet, seed: u64) -> Triplet {
    apply_augmentation(t, &AugmentParams::sample(seed))
}
