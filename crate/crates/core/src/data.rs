//! Synthetic detection scenes and their on-disk form.
//!
//! A scene is a noisy RGB image with up to four bright geometric shapes
//! (class 0 = circle, class 1 = square) and tight normalized boxes. All
//! geometry is sampled on whole-pixel grids, so box coordinates are exact
//! multiples of 1/size and survive the 6-decimal text format losslessly.
//! Pixel values are quantized to the 8-bit grid at generation time, so the
//! in-memory image and its PPM round-trip are identical.
//!
//! Layout of a persisted dataset:
//!   images/NNNNN.ppm   binary PPM (P6)
//!   labels/NNNNN.txt   one `class_id x1 y1 x2 y2` line per box
//!   index.txt          one `NNNNN split` line per scene

use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::Tensor;

/// Axis-aligned box in normalized [0,1] image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub class_id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const MIN_AREA: f64 = 1e-4;

    pub fn new(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Data(format!(
                "degenerate box [{x1},{y1},{x2},{y2}]"
            )));
        }
        let b = BoundingBox {
            class_id,
            x1,
            y1,
            x2,
            y2,
        };
        if b.area() < Self::MIN_AREA {
            return Err(Error::Data(format!(
                "box area {} below minimum {}",
                b.area(),
                Self::MIN_AREA
            )));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn cx(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn cy(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Generation parameters for one scene family.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub max_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 2,
            max_objects: 4,
        }
    }
}

/// An image (3 x H x W, values on the 8-bit grid in [0,1]) with its boxes.
#[derive(Clone, Debug)]
pub struct LabeledScene {
    pub image: Tensor<f32>,
    pub boxes: Vec<BoundingBox>,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a base seed and a stream index.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Derive an independent per-scene seed from the dataset seed and the index.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    mix_seed(dataset_seed, index as u64)
}

/// Deterministically render one scene from its seed.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> LabeledScene {
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Dark noisy background.
    let base: [i32; 3] = [
        rng.gen_range(20..=90),
        rng.gen_range(20..=90),
        rng.gen_range(20..=90),
    ];
    let amp: i32 = rng.gen_range(5..=30);
    let mut pixels = vec![0u8; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            for (c, &b) in base.iter().enumerate() {
                let v = (b + rng.gen_range(-amp..=amp)).clamp(0, 255);
                pixels[(c * size + y) * size + x] = v as u8;
            }
        }
    }

    // Bright shapes on whole-pixel grids; placements overlapping an existing
    // box by IoU > 0.3 are retried and eventually dropped. Radii lean small
    // so shape discrimination depends on fine-grained features.
    let want = rng.gen_range(0..=spec.max_objects);
    let mut boxes: Vec<BoundingBox> = Vec::new();
    for _ in 0..want {
        for _attempt in 0..10 {
            let class = rng.gen_range(0..spec.num_classes);
            let r = rng.gen_range(3..=9usize);
            let cx = rng.gen_range(r..size - r);
            let cy = rng.gen_range(r..size - r);
            let color: [u8; 3] = [
                rng.gen_range(140..=255),
                rng.gen_range(140..=255),
                rng.gen_range(140..=255),
            ];
            let bb = BoundingBox::new(
                class,
                (cx - r) as f64 / size as f64,
                (cy - r) as f64 / size as f64,
                (cx + r + 1) as f64 / size as f64,
                (cy + r + 1) as f64 / size as f64,
            )
            .expect("grid boxes are never degenerate");
            if boxes.iter().any(|b| iou(b, &bb) > 0.3) {
                continue;
            }
            for y in cy - r..=cy + r {
                for x in cx - r..=cx + r {
                    let inside = match class {
                        0 => {
                            let dx = x as i64 - cx as i64;
                            let dy = y as i64 - cy as i64;
                            dx * dx + dy * dy <= (r * r) as i64
                        }
                        _ => true,
                    };
                    if inside {
                        for (c, &col) in color.iter().enumerate() {
                            pixels[(c * size + y) * size + x] = col;
                        }
                    }
                }
            }
            boxes.push(bb);
            break;
        }
    }

    let data: Vec<f32> = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    LabeledScene {
        image: Tensor::from_vec(&[3, size, size], data).expect("image shape"),
        boxes,
        seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<LabeledScene>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Generate `train + test` scenes; the first `train` are the train split.
pub fn generate_dataset(data_seed: u64, train: usize, test: usize, spec: &SceneSpec) -> Dataset {
    let total = train + test;
    let scenes: Vec<LabeledScene> = (0..total)
        .map(|i| generate_scene(scene_seed(data_seed, i), spec))
        .collect();
    let splits = (0..total)
        .map(|i| if i < train { Split::Train } else { Split::Test })
        .collect();
    Dataset { scenes, splits }
}

/// Write bytes to `path` through a temp file + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Data(format!(
                "expected CHW image, got {:?}",
                image.shape()
            )))
        }
    };
    if c != 3 {
        return Err(Error::Data(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let data = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = (data[(ch * h + y) * w + x] * 255.0).round();
                out.push(v.clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &ppm_bytes(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    // Header: magic, width, height, maxval as whitespace-separated tokens.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{name}: truncated PPM header")));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            Error::Data(format!("{name}: non-ASCII PPM header"))
        })?);
    }
    pos += 1; // single whitespace after maxval
    if tokens[0] != "P6" {
        return Err(Error::Data(format!("{name}: not a binary PPM (P6)")));
    }
    let w: usize = tokens[1]
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad width")))?;
    let h: usize = tokens[2]
        .parse()
        .map_err(|_| Error::Data(format!("{name}: bad height")))?;
    if tokens[3] != "255" {
        return Err(Error::Data(format!("{name}: expected maxval 255")));
    }
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("{name}: truncated pixel data")));
    }
    let mut data = vec![0.0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + c];
                data[(c * h + y) * w + x] = v as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn label_lines(boxes: &[BoundingBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6}\n",
            b.class_id, b.x1, b.y1, b.x2, b.y2
        ));
    }
    s
}

pub fn parse_label_file(path: &Path) -> Result<Vec<BoundingBox>> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse_err = |msg: &str| Error::Parse {
            file: name.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        if parts.len() != 5 {
            return Err(parse_err(&format!(
                "expected `class_id x1 y1 x2 y2`, got {} field(s)",
                parts.len()
            )));
        }
        let class_id: usize = parts[0]
            .parse()
            .map_err(|_| parse_err("class_id is not an integer"))?;
        let mut coords = [0.0f64; 4];
        for (k, p) in parts[1..].iter().enumerate() {
            coords[k] = p
                .parse()
                .map_err(|_| parse_err(&format!("coordinate {} is not a number", k + 1)))?;
        }
        boxes.push(
            BoundingBox::new(class_id, coords[0], coords[1], coords[2], coords[3])
                .map_err(|e| parse_err(&e.to_string()))?,
        );
    }
    Ok(boxes)
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut index = String::new();
    for (i, (scene, split)) in dataset.scenes.iter().zip(&dataset.splits).enumerate() {
        write_ppm(&dir.join(format!("images/{i:05}.ppm")), &scene.image)?;
        write_atomic(
            &dir.join(format!("labels/{i:05}.txt")),
            label_lines(&scene.boxes).as_bytes(),
        )?;
        index.push_str(&format!("{i:05} {split}\n"));
    }
    write_atomic(&dir.join("index.txt"), index.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    let mut scenes = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, split) = line.split_once(' ').ok_or_else(|| Error::Parse {
            file: index_path.display().to_string(),
            line: i + 1,
            msg: "expected `NNNNN split`".into(),
        })?;
        let image = read_ppm(&dir.join(format!("images/{id}.ppm")))?;
        let boxes = parse_label_file(&dir.join(format!("labels/{id}.txt")))?;
        scenes.push(LabeledScene {
            image,
            boxes,
            seed: 0, // generation metadata is not persisted
        });
        splits.push(Split::from_str(split)?);
    }
    Ok(Dataset { scenes, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec::default();
        let a = generate_scene(42, &spec);
        let b = generate_scene(42, &spec);
        assert_eq!(a.image, b.image);
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn object_count_in_range_and_boxes_inside() {
        let spec = SceneSpec::default();
        for seed in 0..50 {
            let s = generate_scene(seed, &spec);
            assert!(s.boxes.len() <= spec.max_objects);
            for b in &s.boxes {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0);
                assert!(b.area() >= BoundingBox::MIN_AREA);
            }
        }
    }

    #[test]
    fn rendered_extent_matches_box() {
        // On the row through a shape's center, lit pixels (brighter than the
        // background cap of 120/255) span the recorded box within one pixel.
        // Both shapes touch the box edges on their axis midlines.
        let spec = SceneSpec::default();
        let mut checked = 0;
        for seed in 0..40u64 {
            let s = generate_scene(seed, &spec);
            if s.boxes.len() != 1 {
                continue;
            }
            let b = s.boxes[0];
            let w = spec.image_size;
            let size = w as f64;
            let cy = ((b.y1 + b.y2) / 2.0 * size) as usize;
            let img = s.image.data();
            let bright = |x: usize| {
                let r = img[cy * w + x];
                let g = img[w * w + cy * w + x];
                let bl = img[2 * w * w + cy * w + x];
                r.max(g).max(bl) > 130.0 / 255.0
            };
            let lit: Vec<usize> = (0..w).filter(|&x| bright(x)).collect();
            let x_lo = *lit.first().unwrap() as f64 / size;
            let x_hi = (*lit.last().unwrap() + 1) as f64 / size;
            let px = 1.0 / size;
            assert!((x_lo - b.x1).abs() <= px + 1e-9, "seed {seed}");
            assert!((x_hi - b.x2).abs() <= px + 1e-9, "seed {seed}");
            checked += 1;
        }
        assert!(checked > 0, "no single-object scene in the probe range");
    }

    #[test]
    fn class_frequencies_balanced() {
        let spec = SceneSpec::default();
        let mut counts = [0usize; 2];
        for seed in 0..500u64 {
            for b in generate_scene(scene_seed(7, seed as usize), &spec).boxes {
                counts[b.class_id] += 1;
            }
        }
        let total = (counts[0] + counts[1]) as f64;
        for c in counts {
            let share = c as f64 / total;
            assert!(
                (share - 0.5).abs() < 0.05,
                "class share off by more than 10%: {counts:?}"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(11, 3, 2, &SceneSpec::default());
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.scenes.len(), 5);
        assert_eq!(back.split_indices(Split::Train), vec![0, 1, 2]);
        for (a, b) in ds.scenes.iter().zip(&back.scenes) {
            assert_eq!(a.image, b.image, "pixel data must round-trip exactly");
            assert_eq!(a.boxes.len(), b.boxes.len());
            for (ba, bb) in a.boxes.iter().zip(&b.boxes) {
                assert_eq!(ba.class_id, bb.class_id);
                for (ca, cb) in [
                    (ba.x1, bb.x1),
                    (ba.y1, bb.y1),
                    (ba.x2, bb.x2),
                    (ba.y2, bb.y2),
                ] {
                    assert!((ca - cb).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        for dir in [&dir_a, &dir_b] {
            let ds = generate_dataset(23, 2, 1, &SceneSpec::default());
            write_dataset(dir.path(), &ds).unwrap();
        }
        for name in ["index.txt", "images/00000.ppm", "labels/00000.txt"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between regenerations");
        }
    }

    #[test]
    fn empty_label_file_means_no_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        fs::write(&p, "").unwrap();
        assert!(parse_label_file(&p).unwrap().is_empty());
    }

    #[test]
    fn corrupt_label_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        fs::write(&p, "a b c\n").unwrap();
        let err = parse_label_file(&p).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other}"),
        }
    }
}
