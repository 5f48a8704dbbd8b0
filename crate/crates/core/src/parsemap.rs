//! Human-parsing feature maps: crop each parsing frame to the detected
//! person, resize, colorize, pick `t` frames and tile them in time order.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Category count of LIP-style parsers.
pub const LIP_CLASSES: usize = 20;

/// Grid of category ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: u32,
    height: u32,
    classes: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: u32, height: u32, classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width as usize * height as usize {
            return Err(Error::shape("label map", format!("{}x{} with {} labels", width, height, labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::LabelOutOfRange { label: bad as usize, classes });
        }
        Ok(Self { width, height, classes, labels })
    }

    pub fn filled(width: u32, height: u32, classes: usize, label: u8) -> Result<Self> {
        Self::new(width, height, classes, vec![label; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, row: u32, col: u32) -> u8 {
        self.labels[(row * self.width + col) as usize]
    }
}

/// Half-open pixel box `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: i64,
    pub y_min: i64,
    pub x_max: i64,
    pub y_max: i64,
}

impl BBox {
    pub fn new(x_min: i64, y_min: i64, x_max: i64, y_max: i64) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::Parse {
                what: "bounding box",
                detail: format!("({x_min},{y_min},{x_max},{y_max}) is empty"),
            });
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(o.x_min),
            y_min: self.y_min.min(o.y_min),
            x_max: self.x_max.max(o.x_max),
            y_max: self.y_max.max(o.y_max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    pub fn colors(&self) -> &[[u8; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub image: RgbImage,
    pub rows: usize,
    pub cols: usize,
    /// `(height, width)` of one tile.
    pub tile: (u32, u32),
}

impl FeatureMap {
    /// Copy of the block at grid position `k` (row-major).
    pub fn tile_at(&self, k: usize) -> RgbImage {
        let (th, tw) = self.tile;
        let (r0, c0) = ((k / self.cols) as u32 * th, (k % self.cols) as u32 * tw);
        RgbImage::from_fn(tw, th, |x, y| *self.image.get_pixel(c0 + x, r0 + y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    TrainRandom { seed: u64 },
    TestUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSelection {
    pub mode: SelectionMode,
    pub count: usize,
}

impl FrameSelection {
    pub fn test(count: usize) -> Self {
        Self { mode: SelectionMode::TestUniform, count }
    }

    pub fn train(count: usize, seed: u64) -> Self {
        Self { mode: SelectionMode::TrainRandom { seed }, count }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub tile_height: u32,
    pub tile_width: u32,
    pub rows: usize,
    pub cols: usize,
}

impl Default for TileLayout {
    /// Nine 160x160 tiles in a 480x480 map.
    fn default() -> Self {
        Self { tile_height: 160, tile_width: 160, rows: 3, cols: 3 }
    }
}

/// Per-factor jitter magnitude; each factor is drawn from `[1 - d, 1 + d]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for PhotometricJitter {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }
}

/// `floor((i + 0.5) * n / t)` for `i in 0..t`, evaluated exactly in integers.
pub fn center_indices(n: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| (2 * i + 1) * n / (2 * t)).collect()
}

pub fn crop_to_bbox(map: &LabelMap, b: &BBox) -> Result<LabelMap> {
    let x0 = b.x_min.max(0);
    let y0 = b.y_min.max(0);
    let x1 = b.x_max.min(map.width as i64);
    let y1 = b.y_max.min(map.height as i64);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::EmptyIntersection);
    }
    let (x0, y0, x1, y1) = (x0 as u32, y0 as u32, x1 as u32, y1 as u32);
    let mut labels = Vec::with_capacity(((x1 - x0) * (y1 - y0)) as usize);
    for r in y0..y1 {
        let row = (r * map.width) as usize;
        labels.extend_from_slice(&map.labels[row + x0 as usize..row + x1 as usize]);
    }
    Ok(LabelMap { width: x1 - x0, height: y1 - y0, classes: map.classes, labels })
}

/// Nearest-neighbour resize sampling source pixel `floor((r + 0.5) * in / out)`.
pub fn resize_nearest(map: &LabelMap, out_h: u32, out_w: u32) -> LabelMap {
    assert!(out_h >= 1 && out_w >= 1, "output extents must be positive");
    let rows = center_indices(map.height as usize, out_h as usize);
    let cols = center_indices(map.width as usize, out_w as usize);
    let mut labels = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        let row = r * map.width as usize;
        labels.extend(cols.iter().map(|&c| map.labels[row + c]));
    }
    LabelMap { width: out_w, height: out_h, classes: map.classes, labels }
}

/// Same sampling rule for RGB images.
pub fn resize_rgb_nearest(img: &RgbImage, out_h: u32, out_w: u32) -> RgbImage {
    let rows = center_indices(img.height() as usize, out_h as usize);
    let cols = center_indices(img.width() as usize, out_w as usize);
    RgbImage::from_fn(out_w, out_h, |x, y| *img.get_pixel(cols[x as usize] as u32, rows[y as usize] as u32))
}

/// Pascal-VOC bit-interleaved palette.
pub fn make_palette(classes: usize) -> Palette {
    assert!((1..=256).contains(&classes), "palette size must be in 1..=256");
    let colors = (0..classes)
        .map(|label| {
            let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
            let mut id = label;
            for j in 0..8 {
                r |= ((id & 1) as u8) << (7 - j);
                g |= (((id >> 1) & 1) as u8) << (7 - j);
                b |= (((id >> 2) & 1) as u8) << (7 - j);
                id >>= 3;
            }
            [r, g, b]
        })
        .collect();
    Palette { colors }
}

pub fn colorize(map: &LabelMap, palette: &Palette) -> Result<RgbImage> {
    let mut buf = Vec::with_capacity(map.labels.len() * 3);
    for &l in &map.labels {
        let c = palette
            .colors
            .get(l as usize)
            .ok_or(Error::LabelOutOfRange { label: l as usize, classes: palette.len() })?;
        buf.extend_from_slice(c);
    }
    Ok(RgbImage::from_raw(map.width, map.height, buf).expect("buffer sized from map"))
}

/// Chronological frame indices: equal-interval centers at test time,
/// seeded draws with replacement (then sorted) at training time.
pub fn select_frames(n: usize, sel: &FrameSelection) -> Vec<usize> {
    assert!(n >= 1, "need at least one frame");
    match sel.mode {
        SelectionMode::TestUniform => center_indices(n, sel.count),
        SelectionMode::TrainRandom { seed } => {
            let mut rng = Rng::new(seed);
            let mut idx: Vec<usize> = (0..sel.count).map(|_| rng.below(n as u64) as usize).collect();
            idx.sort_unstable();
            idx
        }
    }
}

/// Places frame `k` at grid block `(k / cols, k % cols)`; unused blocks stay black.
pub fn tile(frames: &[RgbImage], rows: usize, cols: usize) -> Result<FeatureMap> {
    if frames.len() > rows * cols || frames.is_empty() {
        return Err(Error::GridTooSmall { frames: frames.len(), rows, cols });
    }
    let (tw, th) = frames[0].dimensions();
    for (i, f) in frames.iter().enumerate() {
        if f.dimensions() != (tw, th) {
            return Err(Error::FrameSizeMismatch { index: i, expected: (th, tw), found: (f.height(), f.width()) });
        }
    }
    let mut image = RgbImage::new(tw * cols as u32, th * rows as u32);
    for (k, f) in frames.iter().enumerate() {
        let (r0, c0) = ((k / cols) as u32 * th, (k % cols) as u32 * tw);
        for (x, y, p) in f.enumerate_pixels() {
            image.put_pixel(c0 + x, r0 + y, *p);
        }
    }
    Ok(FeatureMap { image, rows, cols, tile: (th, tw) })
}

fn gray(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness scale, contrast blend towards the mean gray level, saturation
/// blend towards per-pixel gray; clamped to `[0, 255]` after each step.
pub fn apply_photometric(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let (b, c, s) = (brightness as f32, contrast as f32, saturation as f32);
    let clamp = |v: f32| v.clamp(0.0, 255.0);
    let mut px: Vec<[f32; 3]> =
        img.pixels().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32].map(|v| clamp(v * b))).collect();
    if !px.is_empty() {
        let mean = (px.iter().map(|&p| gray(p) as f64).sum::<f64>() / px.len() as f64) as f32;
        for p in &mut px {
            *p = p.map(|v| clamp(mean + c * (v - mean)));
        }
    }
    for p in &mut px {
        let g = gray(*p);
        *p = p.map(|v| clamp(g + s * (v - g)));
    }
    let raw = px.iter().flat_map(|p| p.map(|v| v.round() as u8)).collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions")
}

pub fn augment(img: &RgbImage, jitter: &PhotometricJitter, seed: u64) -> RgbImage {
    let mut rng = Rng::new(seed);
    let mut draw = |d: f64| rng.uniform(1.0 - d, 1.0 + d);
    let b = draw(jitter.brightness);
    let c = draw(jitter.contrast);
    let s = draw(jitter.saturation);
    apply_photometric(img, b, c, s)
}

/// Crop, resize, colorize and tile the selected frames of one sample.
pub fn build_feature_map(
    maps: &[LabelMap],
    boxes: &[Option<BBox>],
    sel: &FrameSelection,
    palette: &Palette,
    layout: &TileLayout,
) -> Result<FeatureMap> {
    if maps.is_empty() {
        return Err(Error::shape("build_feature_map", "no parsing frames"));
    }
    if boxes.len() != maps.len() {
        return Err(Error::LengthMismatch { left: maps.len(), right: boxes.len() });
    }
    let tiles = select_frames(maps.len(), sel)
        .into_iter()
        .map(|i| {
            let cropped = match &boxes[i] {
                Some(b) => crop_to_bbox(&maps[i], b)?,
                None => maps[i].clone(),
            };
            colorize(&resize_nearest(&cropped, layout.tile_height, layout.tile_width), palette)
        })
        .collect::<Result<Vec<_>>>()?;
    tile(&tiles, layout.rows, layout.cols)
}

/// `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = p[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h as usize, w as usize], data).expect("sized from image")
}

// ---------------------------------------------------------------- file formats

fn decode_pnm(bytes: &[u8], magic: &[u8; 2], what: &str) -> Result<DynamicImage> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Image(format!("{what}: expected {} header", String::from_utf8_lossy(magic))));
    }
    let decoder = PnmDecoder::new(Cursor::new(bytes)).map_err(|e| Error::Image(format!("{what}: {e}")))?;
    DynamicImage::from_decoder(decoder).map_err(|e| Error::Image(format!("{what}: {e}")))
}

fn encode_pnm(raw: &[u8], w: u32, h: u32, subtype: PnmSubtype, color: ExtendedColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(raw, w, h, color)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out)
}

/// Binary PGM (P5, maxval 255) whose pixel values are label ids.
pub fn decode_label_map(bytes: &[u8], classes: usize) -> Result<LabelMap> {
    match decode_pnm(bytes, b"P5", "label map")? {
        DynamicImage::ImageLuma8(img) => {
            let (w, h) = img.dimensions();
            LabelMap::new(w, h, classes, img.into_raw())
        }
        _ => Err(Error::Image("label map must be 8-bit".into())),
    }
}

pub fn encode_label_map(map: &LabelMap) -> Result<Vec<u8>> {
    encode_pnm(&map.labels, map.width, map.height, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

pub fn encode_gray(raw: &[u8], width: u32, height: u32) -> Result<Vec<u8>> {
    encode_pnm(raw, width, height, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Binary PPM (P6).
pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    encode_pnm(
        img.as_raw(),
        img.width(),
        img.height(),
        PnmSubtype::Pixmap(SampleEncoding::Binary),
        ExtendedColorType::Rgb8,
    )
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    match decode_pnm(bytes, b"P6", "feature map")? {
        DynamicImage::ImageRgb8(img) => Ok(img),
        _ => Err(Error::Image("feature map must be 8-bit RGB".into())),
    }
}

pub fn read_label_map(path: &Path, classes: usize) -> Result<LabelMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_label_map(&bytes, classes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Frame files `<sample_id>_f<index>.pgm` for `index = 0, 1, ...` until the first gap.
pub fn load_parsing_frames(dir: &Path, sample_id: &str, classes: usize) -> Result<Vec<LabelMap>> {
    let mut maps = Vec::new();
    loop {
        let path = dir.join(format!("{sample_id}_f{}.pgm", maps.len()));
        if !path.exists() {
            break;
        }
        maps.push(read_label_map(&path, classes)?);
    }
    if maps.is_empty() {
        return Err(Error::Parse {
            what: "parsing frames",
            detail: format!("no {sample_id}_f0.pgm in {}", dir.display()),
        });
    }
    Ok(maps)
}

/// Lines `frame x_min y_min x_max y_max` or `frame -`. Several boxes for one
/// frame merge into their union; frames without a line get `None`.
pub fn parse_bbox_file(text: &str, frames: usize) -> Result<Vec<Option<BBox>>> {
    let mut out = vec![None; frames];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |d: &str| Error::Parse { what: "bbox file", detail: format!("line {}: {d}", lineno + 1) };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let frame: usize = fields[0].parse().map_err(|_| bad("bad frame index"))?;
        if frame >= frames {
            return Err(bad(&format!("frame {frame} beyond {frames} parsing frames")));
        }
        match fields[1..] {
            ["-"] => {}
            [a, b, c, d] => {
                let n: Vec<i64> =
                    [a, b, c, d].iter().map(|s| s.parse().map_err(|_| bad("bad coordinate"))).collect::<Result<_>>()?;
                let bx = BBox::new(n[0], n[1], n[2], n[3]).map_err(|_| bad("empty box"))?;
                out[frame] = Some(match out[frame] {
                    Some(prev) => bx.union(&prev),
                    None => bx,
                });
            }
            _ => return Err(bad("expected 4 coordinates or '-'")),
        }
    }
    Ok(out)
}
