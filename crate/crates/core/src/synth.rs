//! Synthetic scenes with labelled structures, exact ground-truth areas and a
//! known attribute SCM.
//!
//! A latent size factor drives every structure area (log-normal around a
//! base fraction of the canvas). A global brightness nuisance, correlated
//! with the size factor but absent from the graph, shifts background and
//! structure intensities; it gives area regressors a mean-intensity shortcut.

use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{AttributeKind, AttributeSpec, AttributeVector, CausalGraph, Observation};
use crate::image::{Image, SoftMask};

pub const SIZE_FACTOR: &str = "size";
pub const MANIFEST: &str = "manifest.json";
pub const ATTRIBUTE_TABLE: &str = "attributes.csv";
const MANIFEST_FORMAT: &str = "dscm-synthetic-dataset";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "family")]
pub enum ShapeFamily {
    Disk,
    /// Vertical semi-axis is `aspect` times the horizontal one.
    Ellipse { aspect: f64 },
    /// Horizontal stadium whose half-length is `aspect` times its radius.
    Capsule { aspect: f64 },
}

/// A placed shape; `scale` is the radius / horizontal semi-axis in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub family: ShapeFamily,
    pub cy: f64,
    pub cx: f64,
    pub scale: f64,
}

impl Shape {
    /// Half extents `(dy, dx)` of the bounding box.
    fn extent(&self) -> (f64, f64) {
        match self.family {
            ShapeFamily::Disk => (self.scale, self.scale),
            ShapeFamily::Ellipse { aspect } => (self.scale * aspect, self.scale),
            ShapeFamily::Capsule { aspect } => (self.scale, self.scale * (1.0 + aspect)),
        }
    }

    /// Whether the pixel centre `(y, x)` lies inside.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        if self.scale <= 0.0 {
            return false;
        }
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.family {
            ShapeFamily::Disk => dy * dy + dx * dx <= self.scale * self.scale,
            ShapeFamily::Ellipse { aspect } => {
                let b = self.scale * aspect;
                (dx / self.scale).powi(2) + (dy / b).powi(2) <= 1.0
            }
            ShapeFamily::Capsule { aspect } => {
                let half = self.scale * aspect;
                let ex = dx.abs() - half;
                let ex = ex.max(0.0);
                ex * ex + dy * dy <= self.scale * self.scale
            }
        }
    }
}

/// Binary mask of `shape` on an `h × w` canvas (pixel centres at `+0.5`).
pub fn rasterize(shape: &Shape, h: usize, w: usize) -> Result<Vec<bool>> {
    let mut out = vec![false; h * w];
    if shape.scale <= 0.0 {
        return Ok(out);
    }
    let (ey, ex) = shape.extent();
    if shape.cy - ey < 0.0 || shape.cx - ex < 0.0 || shape.cy + ey > h as f64 || shape.cx + ex > w as f64 {
        return Err(Error::Config(format!("shape {shape:?} leaves the {h}x{w} canvas")));
    }
    let y0 = (shape.cy - ey).floor().max(0.0) as usize;
    let y1 = ((shape.cy + ey).ceil() as usize).min(h);
    let x0 = (shape.cx - ex).floor().max(0.0) as usize;
    let x1 = ((shape.cx + ex).ceil() as usize).min(w);
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                out[y * w + x] = true;
            }
        }
    }
    Ok(out)
}

fn count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&b| b).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureSpec {
    pub name: String,
    pub shape: ShapeFamily,
    /// Centre as fractions of (height, width).
    pub anchor: (f64, f64),
    /// Uniform centre jitter in pixels (each axis).
    pub jitter: f64,
    /// Intensity range spanned by the brightness nuisance.
    pub intensity: (f64, f64),
    pub texture: f64,
    /// Median area as a fraction of the canvas.
    pub area_fraction: f64,
    /// Coefficient of the size factor on log-area.
    pub size_coef: f64,
    /// Standard deviation of the independent log-area noise.
    pub noise_std: f64,
}

/// `area_to = intercept + slope · area_from + N(0, noise_std²)`, areas in px².
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainEdge {
    pub from: String,
    pub to: String,
    pub slope: f64,
    pub intercept: f64,
    pub noise_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub background: f64,
    pub background_texture: f64,
    /// Correlation between the brightness nuisance and the size factor.
    pub brightness_corr: f64,
    /// Background shift per unit of brightness.
    pub brightness_gain: f64,
    pub structures: Vec<StructureSpec>,
    #[serde(default)]
    pub chain: Option<ChainEdge>,
    pub min_area: f64,
    /// Minimum pixel gap between distinct structures.
    pub min_gap: usize,
    pub max_rejections: usize,
    pub pixel_area: f64,
}

impl SceneSpec {
    /// Two lung-like ellipses and a heart-like disk.
    pub fn three_structures(height: usize, width: usize) -> Self {
        let s = |name: &str, shape, anchor, intensity, area_fraction| StructureSpec {
            name: name.into(),
            shape,
            anchor,
            jitter: 0.5,
            intensity,
            texture: 0.02,
            area_fraction,
            size_coef: 0.12,
            noise_std: 0.12,
        };
        Self {
            height,
            width,
            background: 0.2,
            background_texture: 0.02,
            brightness_corr: 0.5,
            brightness_gain: 0.06,
            structures: vec![
                s("left", ShapeFamily::Ellipse { aspect: 1.6 }, (0.40, 0.28), (0.55, 0.85), 0.09),
                s("right", ShapeFamily::Ellipse { aspect: 1.6 }, (0.40, 0.72), (0.55, 0.85), 0.08),
                s("center", ShapeFamily::Disk, (0.78, 0.5), (0.35, 0.6), 0.05),
            ],
            chain: None,
            min_area: 26.0,
            min_gap: 1,
            max_rejections: 1000,
            pixel_area: 1.0,
        }
    }

    /// A horizontal vessel lumen with a plaque band on its upper wall.
    pub fn vessel(height: usize, width: usize) -> Self {
        let mut spec = Self::three_structures(height, width);
        spec.structures = vec![
            StructureSpec {
                name: "lumen".into(),
                shape: ShapeFamily::Capsule { aspect: 3.0 },
                anchor: (0.62, 0.5),
                jitter: 0.5,
                intensity: (0.6, 0.9),
                texture: 0.03,
                area_fraction: 0.12,
                size_coef: 0.12,
                noise_std: 0.1,
            },
            StructureSpec {
                name: "plaque".into(),
                shape: ShapeFamily::Ellipse { aspect: 0.5 },
                anchor: (0.25, 0.5),
                jitter: 0.5,
                intensity: (0.35, 0.5),
                texture: 0.04,
                area_fraction: 0.04,
                size_coef: 0.12,
                noise_std: 0.15,
            },
        ];
        spec
    }

    pub fn structure_names(&self) -> Vec<String> {
        self.structures.iter().map(|s| s.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.structures.is_empty() {
            return Err(Error::Config("scene has no structures".into()));
        }
        if self.min_area <= 25.0 {
            return Err(Error::Config("minimum structure area must exceed 25 px²".into()));
        }
        for s in &self.structures {
            let (lo, hi) = s.intensity;
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!("intensity band of {} outside [0, 1]", s.name)));
            }
            if s.name == SIZE_FACTOR {
                return Err(Error::Config(format!("structure name `{SIZE_FACTOR}` is reserved")));
            }
        }
        if let Some(c) = &self.chain {
            let names = self.structure_names();
            let fi = names.iter().position(|n| *n == c.from);
            let ti = names.iter().position(|n| *n == c.to);
            match (fi, ti) {
                (Some(f), Some(t)) if f < t => {}
                _ => return Err(Error::Config("chain edge must link an earlier structure to a later one".into())),
            }
        }
        Ok(())
    }

    /// The attribute graph: size factor → every area (or `from → to` for the chain target).
    pub fn graph(&self) -> CausalGraph {
        let unit = if self.pixel_area == 1.0 { "px^2" } else { "unit^2" };
        let mut attrs = vec![AttributeSpec::new(SIZE_FACTOR, AttributeKind::ContinuousReal, "", &[])];
        for s in &self.structures {
            let parents: Vec<&str> = match &self.chain {
                Some(c) if c.to == s.name => vec![c.from.as_str()],
                _ => vec![SIZE_FACTOR],
            };
            attrs.push(AttributeSpec::new(&s.name, AttributeKind::ContinuousPositive, unit, &parents));
        }
        let names = self.structure_names();
        let image_parents: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        CausalGraph::new(attrs, &image_parents)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("spec serialises")))
    }

    fn median_area(&self, s: &StructureSpec) -> f64 {
        s.area_fraction * (self.height * self.width) as f64
    }
}

/// Largest scale at which `family` centred at `(cy, cx)` stays on the canvas.
fn max_scale(family: ShapeFamily, cy: f64, cx: f64, h: usize, w: usize) -> f64 {
    let (room_y, room_x) = (cy.min(h as f64 - cy), cx.min(w as f64 - cx));
    match family {
        ShapeFamily::Disk => room_y.min(room_x),
        ShapeFamily::Ellipse { aspect } => (room_y / aspect).min(room_x),
        ShapeFamily::Capsule { aspect } => room_y.min(room_x / (1.0 + aspect)),
    }
    .max(0.0)
        * (1.0 - 1e-9)
}

/// Shape of `family` centred at `(cy, cx)` whose pixel count is closest to `target`.
pub fn fit_shape(family: ShapeFamily, cy: f64, cx: f64, target: f64, h: usize, w: usize) -> Result<(Shape, Vec<bool>)> {
    let mk = |scale: f64| Shape { family, cy, cx, scale };
    let (mut lo, mut hi) = (0.0f64, max_scale(family, cy, cx, h, w));
    if (count(&rasterize(&mk(hi), h, w)?) as f64) < target {
        return Err(Error::Config(format!(
            "a {family:?} of {target} px does not fit at ({cy}, {cx}) on a {h}x{w} canvas"
        )));
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if (count(&rasterize(&mk(mid), h, w)?) as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let below = rasterize(&mk(lo), h, w)?;
    let above = rasterize(&mk(hi), h, w)?;
    if (target - count(&below) as f64).abs() < (count(&above) as f64 - target).abs() {
        Ok((mk(lo), below))
    } else {
        Ok((mk(hi), above))
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0) as f32
}

fn touches(mask: &[bool], taken: &[bool], h: usize, w: usize, gap: usize) -> bool {
    let g = gap as isize;
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for dy in -g..=g {
                for dx in -g..=g {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && taken[yy as usize * w + xx as usize] {
                        return true;
                    }
                }
            }
        }
    }
    false
}

struct Draw {
    attributes: AttributeVector,
    masks: Vec<Vec<bool>>,
    intensities: Vec<f64>,
    brightness: f64,
}

fn try_draw(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Option<Draw>> {
    let (h, w) = (spec.height, spec.width);
    let size = gaussian(rng);
    let rho = spec.brightness_corr;
    let brightness = rho * size + (1.0 - rho * rho).sqrt() * gaussian(rng);
    let mut attributes = AttributeVector::from_pairs([(SIZE_FACTOR, size)]);
    let mut masks: Vec<Vec<bool>> = Vec::new();
    let mut taken = vec![false; h * w];
    let mut intensities = Vec::new();
    for s in &spec.structures {
        let eps = gaussian(rng);
        let target = match &spec.chain {
            Some(c) if c.to == s.name => c.intercept + c.slope * attributes.get(&c.from)? + c.noise_std * eps,
            _ => spec.median_area(s) * (s.size_coef * size + s.noise_std * eps).exp(),
        };
        let cy = s.anchor.0 * h as f64 + s.jitter * (2.0 * rng.gen::<f64>() - 1.0);
        let cx = s.anchor.1 * w as f64 + s.jitter * (2.0 * rng.gen::<f64>() - 1.0);
        if target < spec.min_area {
            return Ok(None);
        }
        let (_, mask) = match fit_shape(s.shape, cy, cx, target, h, w) {
            Ok(m) => m,
            Err(_) => return Ok(None),
        };
        let area = count(&mask) as f64;
        if area < spec.min_area || touches(&mask, &taken, h, w, spec.min_gap) {
            return Ok(None);
        }
        for (t, m) in taken.iter_mut().zip(&mask) {
            *t |= *m;
        }
        attributes.set(&s.name, area * spec.pixel_area);
        let (lo, hi) = s.intensity;
        let t = 1.0 / (1.0 + (-1.7 * brightness).exp());
        intensities.push(lo + (hi - lo) * t);
        masks.push(mask);
    }
    Ok(Some(Draw {
        attributes,
        masks,
        intensities,
        brightness,
    }))
}

/// One scene: attributes from the SCM, exact masks and a textured image.
pub fn sample_scene(rng: &mut ChaCha8Rng, spec: &SceneSpec, id: &str) -> Result<Observation> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut draw = None;
    for _ in 0..spec.max_rejections.max(1) {
        if let Some(d) = try_draw(spec, rng)? {
            draw = Some(d);
            break;
        }
    }
    let draw = draw.ok_or(Error::RejectionLimit(spec.max_rejections))?;
    let bg = spec.background + spec.brightness_gain * draw.brightness;
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let mut v = bg + spec.background_texture * gaussian(rng);
        for (k, m) in draw.masks.iter().enumerate() {
            if m[i] {
                v = draw.intensities[k] + spec.structures[k].texture * gaussian(rng);
            }
        }
        data.push(quantize(v));
    }
    let grids = draw
        .masks
        .iter()
        .map(|m| Image::new(h, w, m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()))
        .collect();
    Ok(Observation {
        id: id.to_string(),
        image: Image::new(h, w, data),
        attributes: draw.attributes,
        masks: Some(SoftMask::new(spec.structure_names(), grids, spec.pixel_area)?),
    })
}

/// Independent random stream for record `index`.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// `(train, val, test)` sizes: 70% / 10% / remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let val = n / 10;
    (train, val, n - train - val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    pub masks: BTreeMap<String, String>,
    /// SHA-256 of the image file.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub spec: SceneSpec,
    pub spec_hash: String,
    pub seed: u64,
    pub n: usize,
    pub splits: BTreeMap<String, usize>,
    pub graph: CausalGraph,
    pub attribute_table: String,
    pub records: Vec<RecordEntry>,
}

impl Manifest {
    /// SHA-256 of the serialised manifest.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec_pretty(self).expect("manifest serialises")))
    }
}

fn write_png(path: &Path, w: usize, h: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Lossless 16-bit grayscale PNG.
pub fn save_image16(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.data.len() * 2);
    for &v in &image.data {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, image.width, image.height, png::BitDepth::Sixteen, &bytes)
}

fn save_mask(path: &Path, mask: &Image) -> Result<()> {
    let bytes: Vec<u8> = mask.data.iter().map(|&v| if v >= 0.5 { 255 } else { 0 }).collect();
    write_png(path, mask.width, mask.height, png::BitDepth::Eight, &bytes)
}

/// Reads an 8- or 16-bit grayscale PNG into `[0, 1]` intensities.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let bad = |detail: String| Error::Dataset {
        record: path.display().to_string(),
        detail,
    };
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(bad(format!("expected grayscale, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0) as f32)
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as f32 / 255.0).collect(),
        d => return Err(bad(format!("unsupported bit depth {d:?}"))),
    };
    Ok(Image::new(h, w, data))
}

/// Writes `n` scenes under `out` and returns the manifest.
pub fn generate_dataset(n: usize, seed: u64, spec: &SceneSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for dir in ["images", "masks"] {
        let p = out.join(dir);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let (n_train, n_val, n_test) = split_sizes(n);
    let graph = spec.graph();
    let names: Vec<String> = graph.attributes.iter().map(|a| a.name.clone()).collect();
    let mut table = format!("id,split,{}\n", names.join(","));
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("{i:06}");
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let obs = sample_scene(&mut record_rng(seed, i), spec, &id)?;
        let image_rel = format!("images/{id}.png");
        let image_path = out.join(&image_rel);
        save_image16(&image_path, &obs.image)?;
        let mut masks = BTreeMap::new();
        let m = obs.masks.as_ref().expect("synthetic scenes carry masks");
        for (s, grid) in m.structures.iter().zip(&m.grids) {
            let rel = format!("masks/{id}_{s}.png");
            save_mask(&out.join(&rel), grid)?;
            masks.insert(s.clone(), rel);
        }
        table.push_str(&format!("{id},{}", split.name()));
        for a in &names {
            table.push_str(&format!(",{}", obs.attributes.get(a)?));
        }
        table.push('\n');
        records.push(RecordEntry {
            id,
            split,
            image: image_rel,
            masks,
            sha256: crate::checkpoint::file_hash(&image_path)?,
        });
    }
    let table_path = out.join(ATTRIBUTE_TABLE);
    std::fs::write(&table_path, table).map_err(|e| Error::io(&table_path, e))?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        seed,
        n,
        splits: BTreeMap::from([
            ("train".to_string(), n_train),
            ("val".to_string(), n_val),
            ("test".to_string(), n_test),
        ]),
        graph,
        attribute_table: ATTRIBUTE_TABLE.into(),
        records,
    };
    let path = out.join(MANIFEST);
    let bytes = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Observation>,
    pub val: Vec<Observation>,
    pub test: Vec<Observation>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Observation] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Identifier used in reports: the manifest hash.
    pub fn id(&self) -> String {
        self.manifest.hash()
    }

    pub fn find(&self, id: &str) -> Option<&Observation> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .find(|o| o.id == id)
    }
}

fn parse_table(path: &Path) -> Result<BTreeMap<String, AttributeVector>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Dataset {
            record: ATTRIBUTE_TABLE.into(),
            detail: "empty attribute table".into(),
        })?
        .split(',')
        .collect();
    let mut out = BTreeMap::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let id = fields[0].to_string();
        if fields.len() != header.len() {
            return Err(Error::Dataset {
                record: id,
                detail: "attribute row has the wrong number of fields".into(),
            });
        }
        let mut attrs = AttributeVector::default();
        for (name, value) in header.iter().zip(&fields).skip(2) {
            let v: f64 = value.parse().map_err(|_| Error::Dataset {
                record: id.clone(),
                detail: format!("unparsable {name} value `{value}`"),
            })?;
            attrs.set(name, v);
        }
        out.insert(id, attrs);
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Dataset {
        record: MANIFEST.into(),
        detail: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset {
            record: MANIFEST.into(),
            detail: format!("unsupported format {} v{}", manifest.format, manifest.version),
        });
    }
    let table = parse_table(&root.join(&manifest.attribute_table))?;
    let structures = manifest.spec.structure_names();
    let mut ds = Dataset {
        root: root.to_path_buf(),
        manifest: manifest.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for r in &manifest.records {
        let corrupt = |detail: String| Error::Dataset {
            record: r.id.clone(),
            detail,
        };
        let image = load_png(&root.join(&r.image)).map_err(|e| corrupt(e.to_string()))?;
        let mut grids = Vec::with_capacity(structures.len());
        for s in &structures {
            let rel = r.masks.get(s).ok_or_else(|| corrupt(format!("no mask for {s}")))?;
            grids.push(load_png(&root.join(rel)).map_err(|e| corrupt(e.to_string()))?);
        }
        let attributes = table
            .get(&r.id)
            .cloned()
            .ok_or_else(|| corrupt("missing from the attribute table".into()))?;
        let obs = Observation {
            id: r.id.clone(),
            image,
            attributes,
            masks: Some(SoftMask::new(structures.clone(), grids, manifest.spec.pixel_area).map_err(|e| corrupt(e.to_string()))?),
        };
        match r.split {
            Split::Train => ds.train.push(obs),
            Split::Val => ds.val.push(obs),
            Split::Test => ds.test.push(obs),
        }
    }
    Ok(ds)
}

/// Generates scenes in memory without touching disk.
pub fn generate_in_memory(n: usize, seed: u64, spec: &SceneSpec) -> Result<Vec<Observation>> {
    (0..n)
        .map(|i| sample_scene(&mut record_rng(seed, i), spec, &format!("{i:06}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_radius_is_empty() {
        let s = Shape {
            family: ShapeFamily::Disk,
            cy: 8.5,
            cx: 8.5,
            scale: 0.0,
        };
        assert_eq!(count(&rasterize(&s, 16, 16).unwrap()), 0);
    }

    #[test]
    fn out_of_canvas_is_an_error() {
        let s = Shape {
            family: ShapeFamily::Disk,
            cy: 2.0,
            cx: 8.0,
            scale: 5.0,
        };
        assert!(rasterize(&s, 16, 16).is_err());
    }

    #[test]
    fn split_rule() {
        assert_eq!(split_sizes(100), (70, 10, 20));
        assert_eq!(split_sizes(200), (140, 20, 40));
    }

    #[test]
    fn scenes_are_seeded() {
        let spec = SceneSpec::three_structures(32, 32);
        let a = sample_scene(&mut record_rng(7, 3), &spec, "x").unwrap();
        let b = sample_scene(&mut record_rng(7, 3), &spec, "x").unwrap();
        assert_eq!(a, b);
        let c = sample_scene(&mut record_rng(7, 4), &spec, "x").unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn recorded_areas_are_pixel_counts() {
        let spec = SceneSpec::three_structures(32, 32);
        for i in 0..20 {
            let o = sample_scene(&mut record_rng(1, i), &spec, "x").unwrap();
            let m = o.masks.as_ref().unwrap();
            for s in &m.structures {
                let px = m.grid(s).unwrap().data.iter().filter(|&&v| v == 1.0).count() as f64;
                assert_eq!(o.attributes.get(s).unwrap(), px);
            }
        }
    }
}
