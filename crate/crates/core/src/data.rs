//! Seeded two-domain synthetic detection benchmark.
//!
//! Scenes are 64×64 RGB images of geometric shapes (circle, square,
//! triangle by default). The source style draws filled shapes on a flat
//! background; the target style draws hue-shifted outlined shapes on a
//! striped, noisy background. Class identity is carried by hue, so the
//! domain gap is background texture + palette + fill-vs-outline while the
//! label space is shared.
//!
//! On disk a dataset is a directory of binary PPM (P6) images with sidecar
//! text annotations (`class_id cx cy w h`, normalized coordinates) and a
//! `manifest.txt` listing image basenames.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Error;

/// Hue offset applied to target-domain shapes (fraction of the hue wheel).
/// Kept below half the inter-class hue spacing (1/(2K) = 1/6 for the default
/// three classes) so a shifted hue stays closest to its own class's source
/// hue; a larger shift would not shift the palette but permute it.
const TARGET_HUE_SHIFT: f64 = 0.12;
/// Outline thickness of target-domain shapes, in pixels.
const OUTLINE_PX: f64 = 2.0;
/// Per-pixel background noise amplitude of the target style. Together with
/// the stripe contrast this sets the low-level statistics gap between the
/// domains; a detector trained on the flat source background degrades
/// sharply here unless its features are aligned across domains.
const TARGET_NOISE_AMP: f64 = 0.10;
/// Brightness of shape fill (source) and outline (target). The dimmer
/// target outline sits between the stripe extremes, so target objects are
/// separable mainly by chroma rather than by the brightness cue that
/// dominates the source style.
const SOURCE_SHAPE_VAL: f64 = 0.9;
const TARGET_SHAPE_VAL: f64 = 0.72;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// Stable tag used for RNG stream derivation and CLI parsing.
    pub fn tag(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self, Error> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Config(format!("unknown domain {other:?} (want source|target)"))),
        }
    }
}

/// Human-readable name of a class id (ids beyond the built-in shapes get
/// a generic label).
pub fn class_name(class_id: usize) -> String {
    match class_id {
        0 => "circle".into(),
        1 => "square".into(),
        2 => "triangle".into(),
        k => format!("class{k}"),
    }
}

/// Recipe for one domain's scenes; scene content is a pure function of
/// `(spec, index)`.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub domain: Domain,
    pub image_size: usize,
    pub class_count: usize,
    pub class_frequencies: Vec<f64>,
    pub objects_min: usize,
    pub objects_max: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn source(seed: u64) -> Self {
        SceneSpec {
            domain: Domain::Source,
            image_size: 64,
            class_count: 3,
            class_frequencies: vec![1.0 / 3.0; 3],
            objects_min: 1,
            objects_max: 4,
            seed,
        }
    }

    /// Target default carries the class-imbalance setting (0.6, 0.3, 0.1).
    pub fn target(seed: u64) -> Self {
        SceneSpec {
            domain: Domain::Target,
            class_frequencies: vec![0.6, 0.3, 0.1],
            ..SceneSpec::source(seed)
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count {} < 2", self.class_count)));
        }
        if self.class_frequencies.len() != self.class_count {
            return Err(Error::Config(format!(
                "{} class frequencies for {} classes",
                self.class_frequencies.len(),
                self.class_count
            )));
        }
        if self.class_frequencies.iter().any(|&f| f < 0.0) {
            return Err(Error::Config("negative class frequency".into()));
        }
        let sum: f64 = self.class_frequencies.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class frequencies sum to {sum}, want 1")));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config(format!(
                "objects_per_image range {}..{} is empty",
                self.objects_min, self.objects_max
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size {} < 16", self.image_size)));
        }
        Ok(())
    }
}

/// One labeled object: class id and a normalized center-size box inside
/// the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Annotation {
    pub fn validate(&self, class_count: usize) -> Result<(), Error> {
        if self.class_id >= class_count {
            return Err(Error::Invalid(format!(
                "class_id {} out of {class_count} classes",
                self.class_id
            )));
        }
        let (x0, y0, x1, y1) = self.corners();
        if self.w <= 0.0 || self.h <= 0.0 || x0 < -1e-9 || y0 < -1e-9 || x1 > 1.0 + 1e-9 || y1 > 1.0 + 1e-9 {
            return Err(Error::Invalid(format!("box {:?} outside unit square", self)));
        }
        Ok(())
    }

    /// (x0, y0, x1, y1) corner form.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

// ── rendering ────────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct Shape {
    class_id: usize,
    // center and radius in pixel units
    cx: f64,
    cy: f64,
    r: f64,
}

impl Shape {
    /// Signed containment test at a pixel-center point, for the shape
    /// shrunk to radius `r`.
    fn contains(&self, class_id: usize, px: f64, py: f64, r: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        match class_id {
            0 => dx * dx + dy * dy <= r * r,
            1 => dx.abs() <= r && dy.abs() <= r,
            // isoceles triangle: apex (cx, cy-r), base corners (cx±r, cy+r)
            _ => {
                if dy < -r || dy > r {
                    return false;
                }
                let half_width = r * (dy + r) / (2.0 * r);
                dx.abs() <= half_width
            }
        }
    }

    fn covers(&self, px: f64, py: f64, outline: bool) -> bool {
        let inside = self.contains(self.class_id, px, py, self.r);
        if !outline {
            return inside;
        }
        inside && !self.contains(self.class_id, px, py, self.r - OUTLINE_PX)
    }
}

/// HSV (all in [0,1]) to RGB.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn class_hue(class_id: usize, class_count: usize, domain: Domain) -> f64 {
    let base = class_id as f64 / class_count as f64;
    match domain {
        Domain::Source => base,
        Domain::Target => base + TARGET_HUE_SHIFT,
    }
}

/// Render one scene; returns the image as a `[3, S, S]` tensor with values
/// on the exact 8-bit grid (k/255), plus annotations.
pub fn generate_scene(spec: &SceneSpec, index: u64) -> Result<(Tensor, Vec<Annotation>), Error> {
    let (img, anns, _) = generate_scene_with_masks(spec, index)?;
    Ok((img, anns))
}

/// As [`generate_scene`], additionally returning one boolean coverage mask
/// per object (row-major S×S) for rendering-fidelity checks.
pub fn generate_scene_with_masks(
    spec: &SceneSpec,
    index: u64,
) -> Result<(Tensor, Vec<Annotation>, Vec<Vec<bool>>), Error> {
    spec.validate()?;
    if spec.class_frequencies.iter().all(|&f| f == 0.0) {
        return Err(Error::Config("all class frequencies zero".into()));
    }
    let s = spec.image_size;
    let sf = s as f64;
    let mut rng = Rng::scene_stream(spec.seed, spec.domain.tag(), index);

    // background
    let mut img = vec![0.0f64; 3 * s * s];
    match spec.domain {
        Domain::Source => {
            let v = rng.range_f64(0.15, 0.35);
            let tint = rng.range_f64(-0.03, 0.03);
            let bg = [v + tint, v, v - tint];
            for c in 0..3 {
                img[c * s * s..(c + 1) * s * s].fill(bg[c]);
            }
        }
        Domain::Target => {
            let base = rng.range_f64(0.25, 0.45);
            let amp = rng.range_f64(0.20, 0.32);
            let period = rng.range_f64(4.0, 10.0);
            let angle = rng.range_f64(0.0, std::f64::consts::PI);
            let (ca, sa) = (angle.cos(), angle.sin());
            for y in 0..s {
                for x in 0..s {
                    let phase = (x as f64 * ca + y as f64 * sa) * std::f64::consts::TAU / period;
                    let stripe = base + amp * phase.sin();
                    for c in 0..3 {
                        let n = rng.range_f64(-TARGET_NOISE_AMP, TARGET_NOISE_AMP);
                        img[(c * s + y) * s + x] = (stripe + n).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // objects: sampled count, class from frequencies, loose overlap avoidance
    let count = spec.objects_min + rng.below(spec.objects_max - spec.objects_min + 1);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.categorical(&spec.class_frequencies);
        let mut placed = None;
        for attempt in 0..10 {
            let r = rng.range_f64(0.11, 0.55) * sf / 2.0;
            let cx = rng.range_f64(r + 1.0, sf - r - 1.0);
            let cy = rng.range_f64(r + 1.0, sf - r - 1.0);
            let crowded = shapes.iter().any(|o| {
                let d = ((o.cx - cx).powi(2) + (o.cy - cy).powi(2)).sqrt();
                d < 0.8 * (o.r + r)
            });
            if !crowded || attempt == 9 {
                placed = Some(Shape { class_id, cx, cy, r });
                break;
            }
        }
        shapes.push(placed.expect("placement loop always yields a shape"));
    }

    let outline = spec.domain == Domain::Target;
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(shapes.len());
    let mut anns: Vec<Annotation> = Vec::with_capacity(shapes.len());
    for shape in &shapes {
        let hue = class_hue(shape.class_id, spec.class_count, spec.domain);
        let val_base = match spec.domain {
            Domain::Source => SOURCE_SHAPE_VAL,
            Domain::Target => TARGET_SHAPE_VAL,
        };
        let val = val_base + rng.range_f64(-0.05, 0.05);
        let rgb = hsv_to_rgb(hue, 0.85, val);
        let mut mask = vec![false; s * s];
        // later shapes paint over earlier ones; masks track own coverage
        let (mut x0, mut y0, mut x1, mut y1) = (s, s, 0usize, 0usize);
        for y in 0..s {
            for x in 0..s {
                if shape.covers(x as f64 + 0.5, y as f64 + 0.5, outline) {
                    mask[y * s + x] = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                    for c in 0..3 {
                        img[(c * s + y) * s + x] = rgb[c];
                    }
                }
            }
        }
        if x0 >= x1 {
            continue; // nothing rasterized (cannot happen at configured sizes)
        }
        masks.push(mask);
        // annotation box = bounding box of the rendered mask, so labels are
        // tight to what is actually visible (triangles rasterize smaller
        // than their analytic extent near the apex)
        let ann = Annotation {
            class_id: shape.class_id,
            cx: (x0 + x1) as f64 / 2.0 / sf,
            cy: (y0 + y1) as f64 / 2.0 / sf,
            w: (x1 - x0) as f64 / sf,
            h: (y1 - y0) as f64 / sf,
        };
        ann.validate(spec.class_count)?;
        anns.push(ann);
    }

    // snap to the 8-bit grid so the PPM round trip is exact
    for v in &mut img {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
    Ok((Tensor::new(vec![3, s, s], img)?, anns, masks))
}

// ── PPM / annotation / manifest I/O ─────────────────────────────────────

/// Write a `[3, S, S]` tensor in [0,1] as a binary PPM (P6, 8-bit).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<(), Error> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("write_ppm expects [3,H,W], got {:?}", shape)));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let data = img.data();
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: path.display().to_string(), offset, msg: msg.into() }
}

/// Read a binary PPM (P6, 8-bit) into a `[3, H, W]` tensor on the exact
/// 8-bit grid. Malformed input reports the byte offset of the problem.
pub fn read_ppm(path: &Path) -> Result<Tensor, Error> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;

    let mut expect_token = |what: &str| -> Result<(usize, usize), Error> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, start, format!("missing {what}")));
        }
        Ok((start, pos))
    };

    let (s0, e0) = expect_token("magic")?;
    if &bytes[s0..e0] != b"P6" {
        return Err(parse_err(path, s0, "bad magic, want P6"));
    }
    let mut dims = [0usize; 3];
    for (i, what) in ["width", "height", "maxval"].iter().enumerate() {
        let (s, e) = expect_token(what)?;
        let text = std::str::from_utf8(&bytes[s..e]).map_err(|_| parse_err(path, s, "non-ASCII header"))?;
        dims[i] = text
            .parse::<usize>()
            .map_err(|_| parse_err(path, s, format!("bad {what} {text:?}")))?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(parse_err(path, 0, format!("unsupported maxval {maxval}, want 255")));
    }
    if pos >= bytes.len() {
        return Err(parse_err(path, pos, "missing pixel payload"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() - pos < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated pixel payload: want {need} bytes from offset {pos}"),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0f64; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = bytes[pos + 3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data)?)
}

/// Write annotations, one `class_id cx cy w h` line per object.
pub fn write_annotations(path: &Path, anns: &[Annotation]) -> Result<(), Error> {
    let mut out = String::new();
    for a in anns {
        writeln!(out, "{} {} {} {} {}", a.class_id, a.cx, a.cy, a.w, a.h).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a sidecar annotation file; errors carry the byte offset of the
/// offending field.
pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, Error> {
    let text = fs::read_to_string(path)?;
    let mut anns = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut fields = [0.0f64; 5];
        let mut it = trimmed.split_whitespace();
        for (i, slot) in fields.iter_mut().enumerate() {
            let tok = it.next().ok_or_else(|| {
                parse_err(path, line_start, format!("annotation line has {i} fields, want 5"))
            })?;
            let tok_off = line_start + (tok.as_ptr() as usize - line.as_ptr() as usize);
            *slot = tok
                .parse::<f64>()
                .map_err(|_| parse_err(path, tok_off, format!("bad number {tok:?}")))?;
        }
        if let Some(extra) = it.next() {
            let tok_off = line_start + (extra.as_ptr() as usize - line.as_ptr() as usize);
            return Err(parse_err(path, tok_off, "trailing fields on annotation line"));
        }
        if fields[0] < 0.0 || fields[0].fract() != 0.0 {
            return Err(parse_err(path, line_start, format!("bad class id {}", fields[0])));
        }
        anns.push(Annotation {
            class_id: fields[0] as usize,
            cx: fields[1],
            cy: fields[2],
            w: fields[3],
            h: fields[4],
        });
    }
    Ok(anns)
}

/// In-memory dataset: images as `[3,S,S]` tensors with parallel annotation
/// lists, in manifest order.
pub struct Dataset {
    pub names: Vec<String>,
    pub images: Vec<Tensor>,
    pub annotations: Vec<Vec<Annotation>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn scene_name(index: u64) -> String {
    format!("image_{index:06}")
}

/// Generate and write `count` scenes plus the manifest; returns the
/// dataset that was written.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, count: usize) -> Result<Dataset, Error> {
    spec.validate()?;
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(count);
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    let mut manifest = String::new();
    for i in 0..count {
        let (img, anns) = generate_scene(spec, i as u64)?;
        let name = scene_name(i as u64);
        write_ppm(&dir.join(format!("{name}.ppm")), &img)?;
        write_annotations(&dir.join(format!("{name}.txt")), &anns)?;
        writeln!(manifest, "{name}").expect("string write");
        names.push(name);
        images.push(img);
        annotations.push(anns);
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(Dataset { names, images, annotations })
}

/// Load a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, Error> {
    let manifest_path = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())))?;
    let mut names = Vec::new();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for name in manifest.lines().map(str::trim).filter(|l| !l.is_empty()) {
        images.push(read_ppm(&dir.join(format!("{name}.ppm")))?);
        annotations.push(read_annotations(&dir.join(format!("{name}.txt")))?);
        names.push(name.to_string());
    }
    Ok(Dataset { names, images, annotations })
}

/// Write an 8-bit binary PGM (P5) of a single-channel map, min-max
/// normalized; used for attention-map export.
pub fn write_pgm_normalized(path: &Path, map: &[f64], h: usize, w: usize) -> Result<(), Error> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("map length {} != {h}x{w}", map.len())));
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &v in map {
        bytes.push((((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(path, bytes)?;
    Ok(())
}
