//! Seeded random streams, the synthetic context-shapes dataset, the MSDS
//! binary dataset format, and PGM label-map export.

use std::fs;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor4, IGNORE_LABEL};

/// Named pseudo-random stream: xoshiro256++ whose 256-bit state is four
/// consecutive SplitMix64 outputs seeded with `seed ^ fnv1a64(label)`.
///
/// Derived values:
/// * `next_f64` = `(next_u64 >> 11) * 2^-53`
/// * `below(n)` = high 64 bits of `next_u64 * n`
/// * `normal` = Box–Muller cosine branch on `(1 - next_f64, next_f64)`
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: Xoshiro256PlusPlus,
}

pub const RNG_ALGORITHM: &str = "splitmix64->xoshiro256++";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed ^ fnv1a64(label.as_bytes())),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher–Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `n = 1` image.
    pub image: Tensor4,
    /// `n = 1` label map.
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub resolution: usize,
}

/// Images with per-pixel labels. Metadata is informational and not part of
/// the on-disk format, so equality ignores it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub meta: Option<DatasetMeta>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_classes == other.num_classes && self.samples == other.samples
    }
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, num_classes: usize) -> Result<Self> {
        let ds = Self {
            samples,
            num_classes,
            meta: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(channels, h, w)` shared by every sample.
    pub fn extents(&self) -> Option<(usize, usize, usize)> {
        self.samples
            .first()
            .map(|s| (s.image.c, s.image.h, s.image.w))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > IGNORE_LABEL as usize {
            return Err(Error::InvalidSpec(format!(
                "num_classes {} outside [1, {}]",
                self.num_classes, IGNORE_LABEL
            )));
        }
        let Some((c, h, w)) = self.extents() else {
            return Ok(());
        };
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.dims() != [1, c, h, w] || (s.labels.n, s.labels.h, s.labels.w) != (1, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "sample {i} extents differ from sample 0"
                )));
            }
            s.labels.validate(self.num_classes)?;
        }
        Ok(())
    }

    /// Stacks the selected samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4, LabelMap)> {
        let images: Vec<&Tensor4> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let labels: Vec<&LabelMap> = indices.iter().map(|&i| &self.samples[i].labels).collect();
        Ok((Tensor4::stack(&images)?, LabelMap::stack(&labels)?))
    }
}

pub const CONTEXT_SHAPES: &str = "context-shapes";
pub const CONTEXT_SHAPES_CLASSES: usize = 3;

/// Tunables for [`gen_context_shapes_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextShapesOptions {
    pub resolution: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub channels: usize,
}

/// Synthetic task whose foreground class is decided by global context.
///
/// Each image has a striped background in one of two themes and one to three
/// identical bright squares. A square is class 1 on a theme-0 background and
/// class 2 on a theme-1 background; background is class 0; each square's
/// outer one-pixel ring is labeled 255. A neutral halo surrounds every square
/// so the theme is invisible near it.
pub fn gen_context_shapes(resolution: usize, num_samples: usize, seed: u64) -> Result<Dataset> {
    gen_context_shapes_with(&ContextShapesOptions {
        resolution,
        num_samples,
        seed,
        channels: 1,
    })
}

const SQUARE_LEVEL: f64 = 0.9;
const HALO_LEVEL: f64 = 0.35;
const HALO_WIDTH: usize = 3;
const NOISE_STD: f64 = 0.03;
/// `(base level, stripe amplitude)` per theme.
const THEMES: [(f64, f64); 2] = [(0.1, 0.15), (0.45, 0.15)];

pub fn gen_context_shapes_with(opts: &ContextShapesOptions) -> Result<Dataset> {
    let r = opts.resolution;
    if r == 0 || !r.is_multiple_of(32) {
        return Err(Error::InvalidSpec(format!(
            "resolution {r} must be a positive multiple of 32"
        )));
    }
    if opts.num_samples == 0 {
        return Err(Error::InvalidSpec("num_samples must be at least 1".into()));
    }
    if opts.channels == 0 {
        return Err(Error::InvalidSpec("channels must be at least 1".into()));
    }
    let samples = (0..opts.num_samples)
        .map(|i| context_sample(r, opts.channels, &mut RngStream::new(opts.seed, &format!("{CONTEXT_SHAPES}/{i}"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        num_classes: CONTEXT_SHAPES_CLASSES,
        meta: Some(DatasetMeta {
            generator: CONTEXT_SHAPES.into(),
            seed: opts.seed,
            resolution: r,
        }),
    })
}

#[derive(Debug, Clone, Copy)]
struct Square {
    y: usize,
    x: usize,
    side: usize,
}

impl Square {
    /// Whether the two squares, each grown by `margin`, intersect.
    fn near(&self, other: &Square, margin: usize) -> bool {
        let a0 = (self.y.saturating_sub(margin), self.x.saturating_sub(margin));
        let a1 = (self.y + self.side + margin, self.x + self.side + margin);
        let b0 = (other.y, other.x);
        let b1 = (other.y + other.side, other.x + other.side);
        a0.0 < b1.0 && b0.0 < a1.0 && a0.1 < b1.1 && b0.1 < a1.1
    }

    /// Chebyshev distance from a pixel to the square, 0 inside.
    fn distance(&self, y: usize, x: usize) -> usize {
        let dy = if y < self.y {
            self.y - y
        } else if y >= self.y + self.side {
            y + 1 - (self.y + self.side)
        } else {
            0
        };
        let dx = if x < self.x {
            self.x - x
        } else if x >= self.x + self.side {
            x + 1 - (self.x + self.side)
        } else {
            0
        };
        dy.max(dx)
    }
}

fn context_sample(r: usize, channels: usize, rng: &mut RngStream) -> Result<Sample> {
    let theme = rng.below(2);
    let phase = rng.below(4);
    let min_side = r / 8;
    let max_side = r / 4;
    let wanted = 1 + rng.below(3);
    let mut squares: Vec<Square> = Vec::new();
    for _ in 0..wanted {
        for _attempt in 0..64 {
            let side = min_side + rng.below(max_side - min_side + 1);
            let sq = Square {
                y: rng.below(r - side + 1),
                x: rng.below(r - side + 1),
                side,
            };
            if squares.iter().all(|o| !o.near(&sq, 2 * HALO_WIDTH + 1)) {
                squares.push(sq);
                break;
            }
        }
    }
    let fg_class = 1 + theme as u8;
    let (base, amp) = THEMES[theme];
    let mut image = Tensor4::zeros(1, channels, r, r);
    let mut labels = vec![0u8; r * r];
    for y in 0..r {
        for x in 0..r {
            let d = squares.iter().map(|s| s.distance(y, x)).min().unwrap_or(usize::MAX);
            let level = if d == 0 {
                let sq = squares.iter().find(|s| s.distance(y, x) == 0).unwrap();
                let ring = y == sq.y || x == sq.x || y + 1 == sq.y + sq.side || x + 1 == sq.x + sq.side;
                labels[y * r + x] = if ring { IGNORE_LABEL } else { fg_class };
                SQUARE_LEVEL
            } else if d <= HALO_WIDTH {
                HALO_LEVEL
            } else {
                // theme 0 stripes run horizontally, theme 1 vertically
                let coord = if theme == 0 { y } else { x };
                base + amp * (((coord + phase) / 2) % 2) as f64
            };
            for c in 0..channels {
                let v = level + NOISE_STD * rng.normal();
                // values are stored as f32 on disk; keep them representable
                image.set(0, c, y, x, v as f32 as f64);
            }
        }
    }
    Ok(Sample {
        image,
        labels: LabelMap::new(1, r, r, labels)?,
    })
}

pub const MSDS_MAGIC: [u8; 4] = *b"MSDS";
pub const MSDS_VERSION: u16 = 1;
pub const MSDS_HEADER_LEN: u64 = 18;

/// Exact byte length of an MSDS file with the given header fields.
pub fn msds_len(num_samples: u64, channels: u64, h: u64, w: u64) -> u64 {
    MSDS_HEADER_LEN + num_samples * (channels * h * w * 4 + h * w)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let (c, h, w) = ds.extents().unwrap_or((1, 1, 1));
    let narrow = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::InvalidSpec(format!("{what} {v} exceeds u16")))
    };
    let mut out = Vec::with_capacity(msds_len(ds.len() as u64, c as u64, h as u64, w as u64) as usize);
    out.extend_from_slice(&MSDS_MAGIC);
    out.extend_from_slice(&MSDS_VERSION.to_le_bytes());
    let count = u32::try_from(ds.len()).map_err(|_| Error::InvalidSpec("too many samples".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&narrow(ds.num_classes, "num_classes")?.to_le_bytes());
    out.extend_from_slice(&narrow(c, "channels")?.to_le_bytes());
    out.extend_from_slice(&narrow(h, "height")?.to_le_bytes());
    out.extend_from_slice(&narrow(w, "width")?.to_le_bytes());
    for s in &ds.samples {
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(s.labels.labels());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile {
            expected: MSDS_HEADER_LEN,
            actual,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    if found != MSDS_MAGIC {
        return Err(Error::BadMagic {
            expected: MSDS_MAGIC,
            found,
        });
    }
    if actual < MSDS_HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: MSDS_HEADER_LEN,
            actual,
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let version = u16_at(4);
    if version != MSDS_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let num_classes = u16_at(10) as usize;
    let (c, h, w) = (u16_at(12) as usize, u16_at(14) as usize, u16_at(16) as usize);
    let expected = msds_len(count as u64, c as u64, h as u64, w as u64);
    if expected != actual {
        return Err(Error::TruncatedFile { expected, actual });
    }
    let mut samples = Vec::with_capacity(count);
    let mut off = MSDS_HEADER_LEN as usize;
    for _ in 0..count {
        let pixels = c * h * w;
        let image: Vec<f64> = bytes[off..off + 4 * pixels]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        off += 4 * pixels;
        let labels = bytes[off..off + h * w].to_vec();
        off += h * w;
        samples.push(Sample {
            image: Tensor4::from_vec(1, c, h, w, image)?,
            labels: LabelMap::new(1, h, w, labels)?,
        });
    }
    Dataset::new(samples, num_classes)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

/// Largest class count a PGM export can represent alongside the ignore value.
pub const PGM_MAX_CLASSES: usize = 254;

/// Binary PGM (`P5`, maxval 255): pixel value is the class index, 255 for
/// ignored pixels. Only the first sample of `labels` is rendered.
pub fn render_pgm(labels: &LabelMap, num_classes: usize) -> Result<Vec<u8>> {
    if num_classes > PGM_MAX_CLASSES {
        return Err(Error::InvalidSpec(format!(
            "{num_classes} classes exceed the PGM limit of {PGM_MAX_CLASSES}"
        )));
    }
    labels.validate(num_classes)?;
    let mut out = format!("P5\n{} {}\n255\n", labels.w, labels.h).into_bytes();
    out.extend_from_slice(&labels.labels()[..labels.h * labels.w]);
    Ok(out)
}

pub fn export_label_map(labels: &LabelMap, num_classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_pgm(labels, num_classes)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM with maxval 255 back into a single-sample label map.
pub fn parse_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let mut fields = Vec::with_capacity(4);
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
            return Err(Error::InvalidArgument("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::InvalidArgument(format!(
            "unsupported PGM header {fields:?}"
        )));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad PGM extent {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let raster = bytes.get(pos..pos + w * h).ok_or(Error::TruncatedFile {
        expected: (pos + w * h) as u64,
        actual: bytes.len() as u64,
    })?;
    LabelMap::new(1, h, w, raster.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rng_is_reproducible_and_label_separated() {
        let mut a = RngStream::new(42, "x");
        let mut b = RngStream::new(42, "x");
        let mut c = RngStream::new(42, "y");
        let sa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let sb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let sc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(sa, sb);
        assert_ne!(sa, sc);
    }

    #[test]
    fn rng_matches_reference_xoshiro() {
        // xoshiro256++ seeded from SplitMix64, written out longhand
        fn splitmix(x: &mut u64) -> u64 {
            *x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = *x;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        }
        let seed = 7u64 ^ fnv1a64(b"ref");
        let mut sm = seed;
        let mut s = [splitmix(&mut sm), splitmix(&mut sm), splitmix(&mut sm), splitmix(&mut sm)];
        let mut next = || {
            let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
            let t = s[1] << 17;
            s[2] ^= s[0];
            s[3] ^= s[1];
            s[1] ^= s[2];
            s[0] ^= s[3];
            s[2] ^= t;
            s[3] = s[3].rotate_left(45);
            result
        };
        let mut rng = RngStream::new(7, "ref");
        for _ in 0..16 {
            assert_eq!(rng.next_u64(), next());
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn rng_helpers_stay_in_range() {
        let mut rng = RngStream::new(1, "range");
        for _ in 0..1000 {
            let f = rng.next_f64();
            assert!((0.0..1.0).contains(&f));
            assert!(rng.below(7) < 7);
            assert!(rng.normal().is_finite());
        }
        let mut v: Vec<usize> = (0..20).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn generator_is_deterministic() {
        let a = gen_context_shapes(32, 3, 9).unwrap();
        let b = gen_context_shapes(32, 3, 9).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_ne!(a, gen_context_shapes(32, 3, 10).unwrap());
    }

    #[test]
    fn generator_class_histogram() {
        for seed in 0..5 {
            let ds = gen_context_shapes(64, 16, seed).unwrap();
            for s in &ds.samples {
                let labels = s.labels.labels();
                let bg = labels.iter().filter(|&&l| l == 0).count();
                let fg = labels.iter().filter(|&&l| l == 1 || l == 2).count();
                assert!(fg >= 1);
                assert!(bg * 2 >= labels.len());
                // one foreground class per image
                assert!(!(labels.contains(&1) && labels.contains(&2)));
            }
        }
    }

    #[test]
    fn generator_rejects_bad_resolution() {
        assert!(matches!(gen_context_shapes(60, 1, 0), Err(Error::InvalidSpec(_))));
        assert!(matches!(gen_context_shapes(64, 0, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn generator_supports_three_channels() {
        let ds = gen_context_shapes_with(&ContextShapesOptions {
            resolution: 32,
            num_samples: 2,
            seed: 1,
            channels: 3,
        })
        .unwrap();
        assert_eq!(ds.extents(), Some((3, 32, 32)));
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn msds_round_trip_and_errors() {
        let ds = gen_context_shapes(32, 2, 3).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len() as u64, msds_len(2, 1, 32, 32));
        assert_eq!(&bytes[..4], b"MSDS");
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_dataset(&bad), Err(Error::VersionUnsupported(2))));

        let short = &bytes[..bytes.len() - 1];
        match decode_dataset(short) {
            Err(Error::TruncatedFile { expected, actual }) => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, expected - 1);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::TruncatedFile { .. })));
        assert!(matches!(decode_dataset(&bytes[..10]), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn msds_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.msds");
        let ds = gen_context_shapes(32, 4, 5).unwrap();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert!(matches!(load_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn pgm_rendering() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 255]).unwrap();
        let bytes = render_pgm(&labels, 3).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0x00, 0x01, 0x02, 0xFF]);
        assert_eq!(parse_pgm(&bytes).unwrap(), labels);
        assert!(matches!(render_pgm(&labels, 300), Err(Error::InvalidSpec(_))));
        // tolerant of single-line headers
        let mut alt = b"P5 2 2 255\n".to_vec();
        alt.extend_from_slice(&[0, 1, 2, 255]);
        assert_eq!(parse_pgm(&alt).unwrap(), labels);
    }
}
