//! Four-view study manifests, lesion boxes, image loading and the synthetic
//! phantom generator.
//!
//! A manifest is a CSV file with the header
//! `study_id,lcc_path,lmlo_path,rcc_path,rmlo_path,label,boxes_path`.
//! Relative paths are resolved against the manifest's directory. A boxes
//! file is a JSON object mapping view names to lists of
//! `[x_min, y_min, x_max, y_max]` in source-image pixels.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::imaging::{Image, PixelBox};
use crate::model::View;

pub const MANIFEST_HEADER: &str = "study_id,lcc_path,lmlo_path,rcc_path,rmlo_path,label,boxes_path";
const VIEW_COLUMNS: [&str; 4] = ["lcc_path", "lmlo_path", "rcc_path", "rmlo_path"];

/// Ground-truth lesion rectangle in source-image pixels.
pub type LesionBox = PixelBox;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    /// Indexed by [`View::index`].
    pub view_paths: [PathBuf; 4],
    pub label: u8,
    pub boxes: Option<BTreeMap<View, Vec<LesionBox>>>,
}

impl StudyRecord {
    pub fn path(&self, view: View) -> &Path {
        &self.view_paths[view.index()]
    }

    pub fn boxes_for(&self, view: View) -> &[LesionBox] {
        self.boxes
            .as_ref()
            .and_then(|b| b.get(&view))
            .map_or(&[], Vec::as_slice)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| invalid!("{} is not a file path", path.display()))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_boxes_json(text: &str, origin: &Path) -> Result<BTreeMap<View, Vec<LesionBox>>> {
    let raw: BTreeMap<String, Vec<[i64; 4]>> = serde_json::from_str(text)
        .map_err(|e| invalid!("{}: malformed boxes file: {e}", origin.display()))?;
    let mut out = BTreeMap::new();
    for (name, boxes) in raw {
        let view = View::parse(&name)
            .ok_or_else(|| invalid!("{}: unknown view {name:?}", origin.display()))?;
        let mut list = Vec::with_capacity(boxes.len());
        for [x0, y0, x1, y1] in boxes {
            if x0 < 0 || y0 < 0 || x0 >= x1 || y0 >= y1 {
                return Err(invalid!(
                    "{}: {name} box [{x0}, {y0}, {x1}, {y1}] is not a valid rectangle",
                    origin.display()
                ));
            }
            list.push(PixelBox {
                x_min: x0 as usize,
                y_min: y0 as usize,
                x_max: x1 as usize,
                y_max: y1 as usize,
            });
        }
        out.insert(view, list);
    }
    Ok(out)
}

pub fn boxes_to_json(boxes: &BTreeMap<View, Vec<LesionBox>>) -> String {
    let raw: BTreeMap<&str, Vec<[usize; 4]>> = boxes
        .iter()
        .map(|(v, b)| {
            (
                v.name(),
                b.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect(),
            )
        })
        .collect();
    serde_json::to_string(&raw).expect("boxes serialise")
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<StudyRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |m: String| invalid!("{}: {m}", path.display());
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| bad(format!("missing column {name:?}")))
    };
    let id_col = col("study_id")?;
    let mut view_cols = [0; 4];
    for (i, name) in VIEW_COLUMNS.iter().enumerate() {
        view_cols[i] = col(name)?;
    }
    let label_col = col("label")?;
    let boxes_col = header.iter().position(|c| c == "boxes_path");

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let id = row[id_col].to_string();
        if id.is_empty() {
            return Err(bad("empty study_id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate study_id {id:?}")));
        }
        let label = match &row[label_col] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("study {id:?} has label {other:?}, expected 0 or 1"))),
        };
        let mut view_paths: [PathBuf; 4] = Default::default();
        for (i, &c) in view_cols.iter().enumerate() {
            if row[c].is_empty() {
                return Err(bad(format!("study {id:?} has no {} image", View::ALL[i])));
            }
            view_paths[i] = resolve(base, &row[c]);
        }
        let boxes = match boxes_col.map(|c| &row[c]).filter(|s| !s.is_empty()) {
            None => None,
            Some(b) => {
                let bp = resolve(base, b);
                let text = fs::read_to_string(&bp).map_err(|e| Error::io(&bp, e))?;
                Some(parse_boxes_json(&text, &bp)?)
            }
        };
        records.push(StudyRecord {
            study_id: id,
            view_paths,
            label,
            boxes,
        });
    }
    Ok(records)
}

/// Serialises records with paths relative to `base` where possible.
pub fn manifest_csv(records: &[StudyRecord], base: &Path, boxes_paths: &[Option<PathBuf>]) -> String {
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER.split(',')).expect("in-memory write");
    for (r, b) in records.iter().zip(boxes_paths) {
        let mut row = vec![r.study_id.clone()];
        row.extend(r.view_paths.iter().map(|p| rel(p)));
        row.push(r.label.to_string());
        row.push(b.as_deref().map(rel).unwrap_or_default());
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 manifest")
}

/// Decodes a raster, returning it at its native size in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = if img.color().has_color() {
        let rgb = img.to_rgb32f();
        Image::new(h, w, rgb.into_raw().into_iter().map(f64::from).collect())?
    } else {
        let gray = img.to_luma32f();
        let g: Vec<f64> = gray.into_raw().into_iter().map(f64::from).collect();
        Image::from_gray(h, w, &g)?
    };
    out.clamp_unit();
    Ok(out)
}

/// Reads, replicates gray to RGB and resizes bilinearly to `target`.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Image> {
    Ok(load_image_with_source_size(path, target)?.0)
}

/// Like [`load_image`], also returning the native `(h, w)`.
pub fn load_image_with_source_size(
    path: &Path,
    target: (usize, usize),
) -> Result<(Image, (usize, usize))> {
    let src = read_image(path)?;
    let size = (src.height, src.width);
    let mut out = src.resize_bilinear(target.0, target.1);
    out.clamp_unit();
    Ok((out, size))
}

/// Scales a source-pixel box into a resized frame (outward rounding).
pub fn scale_box(b: &PixelBox, src: (usize, usize), dst: (usize, usize)) -> PixelBox {
    if src == dst {
        return *b;
    }
    let sy = dst.0 as f64 / src.0 as f64;
    let sx = dst.1 as f64 / src.1 as f64;
    PixelBox {
        x_min: (b.x_min as f64 * sx).floor() as usize,
        y_min: (b.y_min as f64 * sy).floor() as usize,
        x_max: ((b.x_max as f64 * sx).ceil() as usize).min(dst.1),
        y_max: ((b.y_max as f64 * sy).ceil() as usize).min(dst.0),
    }
}

/// A study with its images resized to the model input.
#[derive(Clone, Debug)]
pub struct LoadedStudy {
    pub record: StudyRecord,
    pub images: Vec<Image>,
    /// Lesion boxes per view in the resized frame.
    pub boxes: Vec<Vec<PixelBox>>,
}

impl LoadedStudy {
    pub fn has_boxes(&self) -> bool {
        self.record.boxes.is_some()
    }
}

pub fn load_study(record: &StudyRecord, size: (usize, usize)) -> Result<LoadedStudy> {
    let mut images = Vec::with_capacity(4);
    let mut boxes = Vec::with_capacity(4);
    for view in View::ALL {
        let (img, src) = load_image_with_source_size(record.path(view), size)?;
        let mut vb = Vec::new();
        for b in record.boxes_for(view) {
            if b.x_max > src.1 || b.y_max > src.0 {
                return Err(invalid!(
                    "study {}: {view} box {:?} exceeds the {}x{} image",
                    record.study_id,
                    b,
                    src.0,
                    src.1
                ));
            }
            vb.push(scale_box(b, src, size));
        }
        images.push(img);
        boxes.push(vb);
    }
    Ok(LoadedStudy {
        record: record.clone(),
        images,
        boxes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub study_count: usize,
    pub image_size: (usize, usize),
    pub malignant_fraction: f64,
    pub seed: u64,
    pub lesion_intensity: f64,
    pub lesion_radius_range: (usize, usize),
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let (rmin, rmax) = self.lesion_radius_range;
        if self.study_count == 0 {
            return Err(invalid!("study_count must be >= 1"));
        }
        if h == 0 || w == 0 {
            return Err(invalid!("image_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.malignant_fraction) {
            return Err(invalid!(
                "malignant_fraction must lie in [0, 1], got {}",
                self.malignant_fraction
            ));
        }
        if !(self.lesion_intensity > 0.0 && self.lesion_intensity <= 1.0) {
            return Err(invalid!(
                "lesion_intensity must lie in (0, 1], got {}",
                self.lesion_intensity
            ));
        }
        if rmin == 0 || rmin > rmax || 2 * rmax >= h.min(w) {
            return Err(invalid!(
                "lesion_radius_range ({rmin}, {rmax}) needs 1 <= min <= max < min(h, w)/2"
            ));
        }
        Ok(())
    }

    pub fn malignant_count(&self) -> usize {
        (self.malignant_fraction * self.study_count as f64).round() as usize
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    amp: f64,
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let base = rng.gen_range(0.25..0.4);
    let waves: Vec<Wave> = (0..4)
        .map(|_| Wave {
            fy: rng.gen_range(0.3..2.0),
            fx: rng.gen_range(0.3..2.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(0.02..0.06),
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        let y = i as f64 / h as f64;
        for j in 0..w {
            let x = j as f64 / w as f64;
            let v: f64 = waves
                .iter()
                .map(|wv| wv.amp * (std::f64::consts::TAU * (wv.fy * y + wv.fx * x) + wv.phase).cos())
                .sum();
            out[i * w + j] = base + v + rng.gen_range(-0.015..0.015);
        }
    }
    out
}

struct Spot {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: f64,
}

struct Lesion {
    spots: Vec<Spot>,
    bbox: PixelBox,
}

fn make_lesion(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> Lesion {
    let (h, w) = cfg.image_size;
    let r = rng.gen_range(cfg.lesion_radius_range.0..=cfg.lesion_radius_range.1);
    let cy = rng.gen_range(r..h - r);
    let cx = rng.gen_range(r..w - r);
    let n = rng.gen_range(3..=7);
    let rf = r as f64;
    let spots = (0..n)
        .map(|_| {
            let rho = rf * 0.6 * rng.gen::<f64>().sqrt();
            let th = rng.gen_range(0.0..std::f64::consts::TAU);
            Spot {
                cy: cy as f64 + 0.5 + rho * th.sin(),
                cx: cx as f64 + 0.5 + rho * th.cos(),
                sigma: rf * rng.gen_range(0.2..0.35),
                amp: cfg.lesion_intensity * rng.gen_range(0.7..1.0),
            }
        })
        .collect();
    Lesion {
        spots,
        bbox: PixelBox {
            x_min: cx - r,
            y_min: cy - r,
            x_max: cx + r,
            y_max: cy + r,
        },
    }
}

fn add_lesion(img: &mut [f64], w: usize, lesion: &Lesion) {
    let b = &lesion.bbox;
    for i in b.y_min..b.y_max {
        for j in b.x_min..b.x_max {
            let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
            let v: f64 = lesion
                .spots
                .iter()
                .map(|s| {
                    let d2 = (y - s.cy).powi(2) + (x - s.cx).powi(2);
                    s.amp * (-d2 / (2.0 * s.sigma * s.sigma)).exp()
                })
                .sum();
            img[i * w + j] += v;
        }
    }
}

/// Grey level as stored in an 8-bit PNG.
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One phantom view rendered in memory, quantised and converted as a written
/// and reloaded PNG would be,
/// with its lesion box when `with_lesion` is set. Draws from its own
/// `seed` stream, so it does not reproduce a study of `generate_phantoms`.
pub fn phantom_view(cfg: &PhantomConfig, seed: u64, with_lesion: bool) -> Result<(Image, Option<PixelBox>)> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gray = render_background(&mut rng, h, w);
    let bbox = with_lesion.then(|| {
        let lesion = make_lesion(&mut rng, cfg);
        add_lesion(&mut gray, w, &lesion);
        lesion.bbox
    });
    let data = gray
        .iter()
        .flat_map(|&v| [f64::from(f32::from(quantize(v)) / 255.0); 3])
        .collect();
    Ok((Image::new(h, w, data)?, bbox))
}

fn write_png(path: &Path, h: usize, w: usize, gray: &[f64]) -> Result<()> {
    let buf: Vec<u8> = gray.iter().map(|&v| quantize(v)).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size");
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    write_atomic(path, &bytes)
}

/// Writes the phantom studies and returns the manifest path.
pub fn generate_phantoms(cfg: &PhantomConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    let box_dir = out_dir.join("boxes");
    for d in [out_dir, &img_dir, &box_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.study_count).collect();
    order.shuffle(&mut rng);
    let mut malignant = vec![false; cfg.study_count];
    for &i in &order[..cfg.malignant_count()] {
        malignant[i] = true;
    }

    let (h, w) = cfg.image_size;
    let mut records = Vec::with_capacity(cfg.study_count);
    let mut box_paths = Vec::with_capacity(cfg.study_count);
    for (i, &is_malignant) in malignant.iter().enumerate() {
        let id = format!("S{i:04}");
        let mut views: Vec<Vec<f64>> = (0..4).map(|_| render_background(&mut rng, h, w)).collect();
        let mut boxes = BTreeMap::new();
        if is_malignant {
            let lesion = make_lesion(&mut rng, cfg);
            let side = if rng.gen_bool(0.5) {
                [View::Lcc, View::Lmlo]
            } else {
                [View::Rcc, View::Rmlo]
            };
            for v in side {
                add_lesion(&mut views[v.index()], w, &lesion);
                boxes.insert(v, vec![lesion.bbox]);
            }
        }
        let mut view_paths: [PathBuf; 4] = Default::default();
        for v in View::ALL {
            let p = img_dir.join(format!("{id}_{}.png", v.name()));
            write_png(&p, h, w, &views[v.index()])?;
            view_paths[v.index()] = p;
        }
        let bp = if is_malignant {
            let p = box_dir.join(format!("{id}.json"));
            write_atomic(&p, boxes_to_json(&boxes).as_bytes())?;
            Some(p)
        } else {
            None
        };
        box_paths.push(bp);
        records.push(StudyRecord {
            study_id: id,
            view_paths,
            label: is_malignant as u8,
            boxes: is_malignant.then_some(boxes),
        });
    }
    let manifest = out_dir.join("manifest.csv");
    write_atomic(&manifest, manifest_csv(&records, out_dir, &box_paths).as_bytes())?;
    Ok(manifest)
}
