//! Flat-color object segmentation: background removal, per-color 8-connected
//! components, Moore-neighbour contours, pixel-mass centroids and nearest
//! palette labels.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Rgb = [u8; 3];

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("image decode error: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, SegmentError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(SegmentError::InvalidInput(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.pixels[y * self.width + x] = c;
    }

    /// Fills the clipped rectangle `[x0, x0+w) x [y0, y0+h)`.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, w: i64, h: i64, c: Rgb) {
        let xa = x0.max(0);
        let ya = y0.max(0);
        let xb = (x0 + w).min(self.width as i64);
        let yb = (y0 + h).min(self.height as i64);
        for y in ya..yb {
            for x in xa..xb {
                self.set(x as usize, y as usize, c);
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SegmentError::Decode(format!("ppm: {m}"));
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P6" {
            return Err(bad("not a binary P6 file"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if max != 255 {
            return Err(bad("only 8-bit maxval supported"));
        }
        pos += 1;
        let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated data"))?;
        let pixels = data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Image::from_pixels(w, h, pixels)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| SegmentError::Decode(e.to_string()))?;
            let flat: Vec<u8> = self.pixels.iter().flatten().copied().collect();
            w.write_image_data(&flat)
                .map_err(|e| SegmentError::Decode(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let err = |e: png::DecodingError| SegmentError::Decode(e.to_string());
        let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| SegmentError::Decode("png too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let data = &buf[..info.buffer_size()];
        let pixels: Vec<Rgb> = match info.color_type {
            png::ColorType::Rgb => data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Rgba => data.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
            png::ColorType::Grayscale => data.iter().map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => data.chunks_exact(2).map(|c| [c[0], c[0], c[0]]).collect(),
            png::ColorType::Indexed => {
                return Err(SegmentError::Decode("unexpanded palette image".into()))
            }
        };
        Image::from_pixels(w, h, pixels)
    }

    /// Reads a PNG or binary PPM, detected from the file signature.
    pub fn load(path: &Path) -> Result<Self> {
        let io = |source| SegmentError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(io)?)
            .read_to_end(&mut bytes)
            .map_err(io)?;
        if bytes.starts_with(b"P6") {
            Image::from_ppm(&bytes)
        } else {
            Image::from_png(&bytes)
        }
    }

    /// Writes PPM when the extension is `.ppm`, PNG otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| SegmentError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            self.to_ppm()
        } else {
            self.to_png()?
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&bytes).map_err(io)?;
        w.flush().map_err(io)
    }

    /// Row-major grayscale intensities `(r + g + b) / 3` scaled to [0, 1].
    pub fn luminance(&self) -> Vec<f32> {
        self.pixels
            .iter()
            .map(|p| (p[0] as f32 + p[1] as f32 + p[2] as f32) / 765.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorObject {
    pub color: Rgb,
    pub area: usize,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [usize; 4],
    pub centroid: [f64; 2],
    pub color_label: String,
    pub contour: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorPalette {
    pub entries: Vec<(Rgb, String)>,
}

impl Default for ColorPalette {
    fn default() -> Self {
        let anchors: [(Rgb, &str); 16] = [
            ([0, 0, 0], "black"),
            ([255, 255, 255], "white"),
            ([128, 128, 128], "gray"),
            ([255, 0, 0], "red"),
            ([0, 255, 0], "green"),
            ([0, 0, 255], "blue"),
            ([255, 255, 0], "yellow"),
            ([0, 255, 255], "cyan"),
            ([255, 0, 255], "magenta"),
            ([255, 165, 0], "orange"),
            ([139, 69, 19], "brown"),
            ([255, 192, 203], "pink"),
            ([128, 0, 128], "purple"),
            ([173, 216, 230], "light-blue"),
            ([0, 100, 0], "dark-green"),
            ([210, 180, 140], "tan"),
        ];
        ColorPalette {
            entries: anchors.iter().map(|(c, l)| (*c, l.to_string())).collect(),
        }
    }
}

impl ColorPalette {
    pub fn new(entries: Vec<(Rgb, String)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(SegmentError::InvalidInput("empty palette".into()));
        }
        for (i, (_, l)) in entries.iter().enumerate() {
            if entries[..i].iter().any(|(_, m)| m == l) {
                return Err(SegmentError::InvalidInput(format!("duplicate label {l}")));
            }
        }
        Ok(ColorPalette { entries })
    }

    pub fn contains(&self, label: &str) -> bool {
        self.entries.iter().any(|(_, l)| l == label)
    }

    /// Label of the nearest anchor in squared RGB distance; ties go to the
    /// earlier entry.
    pub fn nearest(&self, c: Rgb) -> &str {
        let d = |a: Rgb| -> i32 {
            (0..3)
                .map(|i| {
                    let v = a[i] as i32 - c[i] as i32;
                    v * v
                })
                .sum()
        };
        let mut best = 0;
        for i in 1..self.entries.len() {
            if d(self.entries[i].0) < d(self.entries[best].0) {
                best = i;
            }
        }
        &self.entries[best].1
    }
}

pub fn label_colors(objects: &mut [ColorObject], palette: &ColorPalette) {
    for o in objects {
        o.color_label = palette.nearest(o.color).to_string();
    }
}

/// Most frequent exact color; ties go to the smallest triple.
pub fn dominant_background(image: &Image) -> Result<Rgb> {
    let counts = color_counts(image)?;
    Ok(counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(c, _)| *c)
        .expect("non-empty image"))
}

fn color_counts(image: &Image) -> Result<HashMap<Rgb, usize>> {
    if image.pixels.is_empty() {
        return Err(SegmentError::InvalidInput("empty image".into()));
    }
    if image.pixels.len() != image.width * image.height {
        return Err(SegmentError::InvalidInput("pixel count does not match size".into()));
    }
    let mut counts: HashMap<Rgb, usize> = HashMap::new();
    for p in &image.pixels {
        *counts.entry(*p).or_default() += 1;
    }
    Ok(counts)
}

/// Objects plus a per-pixel map of the object index owning each pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub background: Rgb,
    pub objects: Vec<ColorObject>,
    pub owner: Vec<Option<usize>>,
}

pub fn find_color_objects(image: &Image) -> Result<Vec<ColorObject>> {
    Ok(segment_image(image, &ColorPalette::default())?.objects)
}

const NEIGHBOURS: [(i64, i64); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

pub fn segment_image(image: &Image, palette: &ColorPalette) -> Result<Segmentation> {
    let counts = color_counts(image)?;
    let background = dominant_background(image)?;
    let mut order: Vec<(Rgb, usize)> = counts.into_iter().filter(|(c, _)| *c != background).collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let rank: HashMap<Rgb, usize> = order.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();

    let (w, h) = (image.width, image.height);
    let mut comp_id = vec![usize::MAX; w * h];
    // Components per color rank, each in raster order of its first pixel.
    let mut per_color: Vec<Vec<Vec<usize>>> = vec![Vec::new(); order.len()];
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        let c = image.pixels[start];
        if c == background || comp_id[start] != usize::MAX {
            continue;
        }
        let r = rank[&c];
        let id = per_color[r].len();
        let mut pixels = Vec::new();
        comp_id[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (px, py) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in NEIGHBOURS {
                let (nx, ny) = (px + dx, py + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if comp_id[q] == usize::MAX && image.pixels[q] == c {
                    comp_id[q] = id;
                    queue.push_back(q);
                }
            }
        }
        per_color[r].push(pixels);
    }

    let mut objects = Vec::new();
    let mut owner = vec![None; w * h];
    for (r, comps) in per_color.into_iter().enumerate() {
        let color = order[r].0;
        for pixels in comps {
            if pixels.len() <= 1 {
                continue;
            }
            let idx = objects.len();
            for &p in &pixels {
                owner[p] = Some(idx);
            }
            objects.push(describe(&pixels, color, w, &owner, idx, palette));
        }
    }
    Ok(Segmentation {
        background,
        objects,
        owner,
    })
}

fn describe(
    pixels: &[usize],
    color: Rgb,
    width: usize,
    owner: &[Option<usize>],
    idx: usize,
    palette: &ColorPalette,
) -> ColorObject {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let (mut sx, mut sy) = (0u64, 0u64);
    for &p in pixels {
        let (x, y) = (p % width, p / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        sx += x as u64;
        sy += y as u64;
    }
    let n = pixels.len() as f64;
    let start = *pixels.iter().min().expect("non-empty component");
    let height = owner.len() / width;
    ColorObject {
        color,
        area: pixels.len(),
        bbox: [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
        centroid: [sx as f64 / n, sy as f64 / n],
        color_label: palette.nearest(color).to_string(),
        contour: trace_contour(start, width, height, |q| owner[q] == Some(idx)),
    }
}

/// Moore-neighbour boundary trace, clockwise on screen, from the first pixel
/// in raster order. Stops when the walk is back at the start pixel and about
/// to repeat its first move.
fn trace_contour(start: usize, width: usize, height: usize, inside: impl Fn(usize) -> bool) -> Vec<[usize; 2]> {
    let at = |x: i64, y: i64| -> bool {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && inside(y as usize * width + x as usize)
    };
    let dir_of = |dx: i64, dy: i64| NEIGHBOURS.iter().position(|&d| d == (dx, dy)).expect("unit step");
    let step = |p: (i64, i64), back: usize| -> Option<((i64, i64), usize)> {
        for i in 1..=8 {
            let d = (back + i) % 8;
            let q = (p.0 + NEIGHBOURS[d].0, p.1 + NEIGHBOURS[d].1);
            if at(q.0, q.1) {
                let prev = NEIGHBOURS[(d + 7) % 8];
                let b = (p.0 + prev.0, p.1 + prev.1);
                return Some((q, dir_of(b.0 - q.0, b.1 - q.1)));
            }
        }
        None
    };
    let s = ((start % width) as i64, (start / width) as i64);
    let mut contour = vec![[s.0 as usize, s.1 as usize]];
    let Some(first) = step(s, 0) else {
        return contour;
    };
    let (mut p, mut back) = first;
    contour.push([p.0 as usize, p.1 as usize]);
    for _ in 0..4 * width * height + 8 {
        let Some(next) = step(p, back) else { break };
        if p == s && next == first {
            contour.pop();
            break;
        }
        (p, back) = next;
        contour.push([p.0 as usize, p.1 as usize]);
    }
    contour
}

/// Copy of `image` with each object's bounding box outlined.
pub fn draw_overlay(image: &Image, objects: &[ColorObject], outline: Rgb) -> Image {
    let mut out = image.clone();
    for o in objects {
        let [x, y, w, h] = o.bbox;
        for i in x..x + w {
            out.set(i, y, outline);
            out.set(i, y + h - 1, outline);
        }
        for j in y..y + h {
            out.set(x, j, outline);
            out.set(x + w - 1, j, outline);
        }
    }
    out
}
