//! Procedural outpainting benchmark.
//!
//! Each 3x32x32 sprite has a centered 12x12 foreground square in one of six
//! hues and a background drawn from one of six patterns painted in the
//! complementary hue over black. A condition (the foreground alone) admits
//! all six backgrounds, but every training example shows exactly one.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{format_err, Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

pub const SIZE: usize = 32;
pub const CHANNELS: usize = 3;
pub const MASK_LO: usize = 10;
pub const MASK_HI: usize = 22;
pub const NUM_HUES: usize = 6;
pub const NUM_MODES: usize = 6;
pub const SOLID_MODE: usize = 5;
pub const MODE_NAMES: [&str; NUM_MODES] = ["hstripes", "vstripes", "checker", "rings", "diagonal", "solid"];
/// Score assigned to the solid template; patterned templates must
/// correlate more strongly than this to win.
pub const SOLID_SCORE: f64 = 0.25;
pub const MASK_FILE: &str = "mask.pgm";

/// RGB in `[-1, 1]` of hue `h`, stepping 60 degrees around the color wheel
/// at full saturation.
pub fn hue_color(h: usize) -> [f64; 3] {
    const TABLE: [[f64; 3]; NUM_HUES] = [
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [-1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
    ];
    TABLE[h % NUM_HUES]
}

pub fn in_mask(y: usize, x: usize) -> bool {
    (MASK_LO..MASK_HI).contains(&y) && (MASK_LO..MASK_HI).contains(&x)
}

/// Binary pattern value of mode `m` at pixel `(y, x)`.
pub fn pattern_bit(m: usize, y: usize, x: usize) -> bool {
    match m {
        0 => (y / 4) % 2 == 1,
        1 => (x / 4) % 2 == 1,
        2 => (y / 4 + x / 4) % 2 == 1,
        3 => {
            let (dy, dx) = (y as f64 - 15.5, x as f64 - 15.5);
            ((dy * dy + dx * dx).sqrt() / 4.0).floor() as usize % 2 == 1
        }
        4 => ((x + y) / 4) % 2 == 1,
        _ => true,
    }
}

/// `[3, 32, 32]` mask: 1 on the foreground square, 0 elsewhere.
pub fn foreground_mask() -> Tensor {
    let mut m = Tensor::zeros([CHANNELS, SIZE, SIZE]);
    let data = m.data_mut();
    for c in 0..CHANNELS {
        for y in MASK_LO..MASK_HI {
            for x in MASK_LO..MASK_HI {
                data[(c * SIZE + y) * SIZE + x] = 1.0;
            }
        }
    }
    m
}

fn check_indices(h: usize, m: usize) -> Result<()> {
    if h >= NUM_HUES || m >= NUM_MODES {
        return Err(Error::invalid(format!("sprite indices out of range: hue {h}, mode {m}")));
    }
    Ok(())
}

/// Deterministic `[3, 32, 32]` sprite of hue `h` and background mode `m`.
pub fn render_sprite(h: usize, m: usize) -> Result<Tensor> {
    check_indices(h, m)?;
    let fg = hue_color(h);
    let bg = hue_color(h + NUM_HUES / 2);
    let mut img = Tensor::zeros([CHANNELS, SIZE, SIZE]);
    let data = img.data_mut();
    for y in 0..SIZE {
        for x in 0..SIZE {
            let rgb = if in_mask(y, x) {
                fg
            } else if pattern_bit(m, y, x) {
                bg
            } else {
                [-1.0; 3]
            };
            for c in 0..CHANNELS {
                data[(c * SIZE + y) * SIZE + x] = rgb[c];
            }
        }
    }
    Ok(img)
}

/// Foreground-only condition image: the sprite on the mask, 0 elsewhere.
pub fn condition_image(h: usize) -> Result<Tensor> {
    check_indices(h, 0)?;
    let full = render_sprite(h, 0)?;
    let mask = foreground_mask();
    Ok(Tensor::new(full.shape().to_vec(), full.data().iter().zip(mask.data()).map(|(v, m)| v * m).collect())?)
}

fn background_pixels(mask: &Tensor) -> Result<Vec<(usize, usize)>> {
    let plane = match mask.shape() {
        [h, w] if *h == SIZE && *w == SIZE => mask.data(),
        [_, h, w] if *h == SIZE && *w == SIZE => &mask.data()[..SIZE * SIZE],
        other => return Err(Error::shape("sprite mask", other, &[SIZE, SIZE])),
    };
    Ok((0..SIZE * SIZE).filter(|&i| plane[i] == 0.0).map(|i| (i / SIZE, i % SIZE)).collect())
}

fn centered(v: &mut [f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Correlation of the background with each pattern template. The solid
/// template has no variance and gets the fixed score [`SOLID_SCORE`].
pub fn mode_scores(image: &Tensor, mask: &Tensor) -> Result<[f64; NUM_MODES]> {
    if image.shape() != [CHANNELS, SIZE, SIZE] {
        return Err(Error::shape("classify_background_mode", image.shape(), &[CHANNELS, SIZE, SIZE]));
    }
    let pixels = background_pixels(mask)?;
    let d = image.data();
    let mut gray: Vec<f64> = pixels
        .iter()
        .map(|&(y, x)| (0..CHANNELS).map(|c| d[(c * SIZE + y) * SIZE + x]).sum::<f64>() / CHANNELS as f64)
        .collect();
    let gnorm = centered(&mut gray);
    let mut scores = [0.0; NUM_MODES];
    scores[SOLID_MODE] = SOLID_SCORE;
    if gnorm <= 1e-9 * (gray.len() as f64).sqrt() {
        return Ok(scores);
    }
    for (m, score) in scores.iter_mut().enumerate().take(SOLID_MODE) {
        let mut t: Vec<f64> = pixels.iter().map(|&(y, x)| pattern_bit(m, y, x) as u8 as f64).collect();
        let tnorm = centered(&mut t);
        *score = gray.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (gnorm * tnorm);
    }
    Ok(scores)
}

/// Index of the best-matching background template, lowest index on ties.
pub fn classify_background_mode(image: &Tensor, mask: &Tensor) -> Result<usize> {
    let scores = mode_scores(image, mask)?;
    let mut best = 0;
    for (m, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = m;
        }
    }
    Ok(best)
}

/// Observed sprites with their hue and background labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteDataset {
    pub hues: Vec<usize>,
    pub modes: Vec<usize>,
    /// `[n, 3, 32, 32]`.
    pub images: Tensor,
    pub seed: u64,
}

pub fn make_sprite_dataset(n: usize, seed: u64) -> Result<SpriteDataset> {
    if n == 0 {
        return Err(Error::invalid("make_sprite_dataset needs n >= 1"));
    }
    let mut rng = stream(seed, Purpose::Data, 0);
    let mut hues = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        hues.push(rng.gen_range(0..NUM_HUES));
        modes.push(rng.gen_range(0..NUM_MODES));
    }
    let renders = all_renders()?;
    let mut data = Vec::with_capacity(n * CHANNELS * SIZE * SIZE);
    for (&h, &m) in hues.iter().zip(&modes) {
        data.extend_from_slice(renders[h * NUM_MODES + m].data());
    }
    Ok(SpriteDataset {
        hues,
        modes,
        images: Tensor::new([n, CHANNELS, SIZE, SIZE], data)?,
        seed,
    })
}

/// All 36 renders ordered by `(hue, mode)`.
pub fn all_renders() -> Result<Vec<Tensor>> {
    (0..NUM_HUES).flat_map(|h| (0..NUM_MODES).map(move |m| render_sprite(h, m))).collect()
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::shape("encode_ppm", image.shape(), &[CHANNELS, SIZE, SIZE]));
    };
    if c != 3 {
        return Err(Error::shape("encode_ppm", image.shape(), &[CHANNELS, h, w]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            out.extend((0..3).map(|ch| to_byte(d[(ch * h + y) * w + x])));
        }
    }
    Ok(out)
}

fn parse_header<'a>(bytes: &'a [u8], magic: &str, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
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
            return Err(format_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "bad header"))?);
    }
    if fields[0] != magic || fields[3] != "255" {
        return Err(format_err(path, format!("expected binary {magic} with maxval 255")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad dimension `{s}`")));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, body) = parse_header(bytes, "P6", path)?;
    if body.len() != w * h * 3 {
        return Err(format_err(path, format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in body.chunks(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = from_byte(px[ch]);
        }
    }
    Tensor::new([3, h, w], data)
}

pub fn encode_pgm(plane: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| if v > 0.5 { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, body) = parse_header(bytes, "P5", path)?;
    if body.len() != w * h {
        return Err(format_err(path, "pixel count mismatch"));
    }
    Tensor::new([h, w], body.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

impl SpriteDataset {
    pub fn len(&self) -> usize {
        self.hues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hues.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let per = CHANNELS * SIZE * SIZE;
        Tensor::from_parts(vec![CHANNELS, SIZE, SIZE], self.images.data()[i * per..(i + 1) * per].to_vec())
    }

    /// Writes `img_XXXXX.ppm` files, `mask.pgm` and `index.csv` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mask = foreground_mask();
        write_file(&dir.join(MASK_FILE), &encode_pgm(&mask.data()[..SIZE * SIZE], SIZE, SIZE))?;
        let mut index = String::from("id,h,m,maskfile\n");
        for i in 0..self.len() {
            let name = format!("img_{i:05}.ppm");
            write_file(&dir.join(&name), &encode_ppm(&self.image(i))?)?;
            writeln!(index, "{i},{},{},{MASK_FILE}", self.hues[i], self.modes[i]).unwrap();
        }
        write_file(&dir.join("index.csv"), index.as_bytes())
    }

    /// Reads a directory written by [`write_dir`](Self::write_dir).
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.csv");
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("id,h,m,maskfile") {
            return Err(format_err(&index_path, "expected header `id,h,m,maskfile`"));
        }
        let (mut hues, mut modes, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || format_err(&index_path, format!("line {}: malformed row", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let id: usize = f[0].parse().map_err(|_| bad())?;
            let h: usize = f[1].parse().map_err(|_| bad())?;
            let m: usize = f[2].parse().map_err(|_| bad())?;
            check_indices(h, m).map_err(|_| bad())?;
            let img_path = dir.join(format!("img_{id:05}.ppm"));
            let bytes = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let img = decode_ppm(&bytes, &img_path)?;
            if img.shape() != [CHANNELS, SIZE, SIZE] {
                return Err(format_err(&img_path, "sprite must be 32x32"));
            }
            let mask_path = dir.join(f[3]);
            if n == 0 {
                let bytes = std::fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
                let mask = decode_pgm(&bytes, &mask_path)?;
                if mask.data() != &foreground_mask().data()[..SIZE * SIZE] {
                    return Err(format_err(&mask_path, "mask differs from the centered 12x12 square"));
                }
            }
            hues.push(h);
            modes.push(m);
            data.extend_from_slice(img.data());
        }
        if hues.is_empty() {
            return Err(format_err(&index_path, "no rows"));
        }
        Ok(Self {
            images: Tensor::new([hues.len(), CHANNELS, SIZE, SIZE], data)?,
            hues,
            modes,
            seed: 0,
        })
    }
}
