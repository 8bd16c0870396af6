//! RGBA rasters and the content-addressed image store.
//!
//! Images never travel inline inside trajectories. Each raster is keyed by
//! the SHA-256 of its dimensions and pixel bytes; on disk a store is a flat
//! directory of `<ref>.png` files.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel buffer has {actual} bytes, expected {expected} for {width}x{height} RGBA")]
    BadBuffer {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("image `{0}` not found in store")]
    Missing(String),
    #[error("png decode: {0}")]
    Decode(String),
    #[error("png encode: {0}")]
    Encode(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// An 8-bit RGBA raster, row-major, no padding.
#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{})", self.width, self.height)
    }
}

impl Raster {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, ImageError> {
        let expected = width as usize * height as usize * 4;
        if pixels.len() != expected {
            return Err(ImageError::BadBuffer {
                width,
                height,
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, rgba: [u8; 4]) -> Self {
        let pixels = rgba.iter().copied().cycle().take(width as usize * height as usize * 4).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 4] {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2], self.pixels[i + 3]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgba: [u8; 4]) {
        let i = (y as usize * self.width as usize + x as usize) * 4;
        self.pixels[i..i + 4].copy_from_slice(&rgba);
    }

    /// Content hash used as the store reference.
    pub fn content_ref(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"rgba8");
        hasher.update(self.width.to_le_bytes());
        hasher.update(self.height.to_le_bytes());
        hasher.update(&self.pixels);
        hex::encode(hasher.finalize())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut out, self.width, self.height);
            encoder.set_color(png::ColorType::Rgba);
            encoder.set_depth(png::BitDepth::Eight);
            let mut writer = encoder.write_header().map_err(|e| ImageError::Encode(e.to_string()))?;
            writer
                .write_image_data(&self.pixels)
                .map_err(|e| ImageError::Encode(e.to_string()))?;
        }
        Ok(out)
    }

    /// Decodes any 8-bit PNG, expanding grayscale/RGB/palette to RGBA.
    pub fn from_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut decoder = png::Decoder::new(Cursor::new(bytes));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| ImageError::Decode(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| ImageError::Decode("image too large".into()))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| ImageError::Decode(e.to_string()))?;
        buf.truncate(info.buffer_size());
        let (w, h) = (info.width, info.height);
        let pixels = match info.color_type {
            png::ColorType::Rgba => buf,
            png::ColorType::Rgb => buf.chunks_exact(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g, 255]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0], c[1]]).collect(),
            png::ColorType::Indexed => return Err(ImageError::Decode("unexpanded palette image".into())),
        };
        Raster::new(w, h, pixels)
    }
}

/// Content-addressed raster store shared by the episodes of a run.
///
/// Inserted images are immutable; inserting the same pixels twice yields the
/// same reference. When backed by a directory every insert is also written
/// as `<ref>.png` and lookups fall back to disk.
#[derive(Debug, Default)]
pub struct ImageStore {
    dir: Option<PathBuf>,
    images: RwLock<HashMap<String, Arc<Raster>>>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open_dir(dir: impl Into<PathBuf>) -> Result<Self, ImageError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| ImageError::Io { path: dir.clone(), source })?;
        Ok(Self {
            dir: Some(dir),
            images: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn insert(&self, raster: Raster) -> Result<String, ImageError> {
        let key = raster.content_ref();
        if self.images.read().unwrap().contains_key(&key) {
            return Ok(key);
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.png"));
            if !path.exists() {
                let tmp = dir.join(format!(".{key}.png.tmp"));
                fs::write(&tmp, raster.to_png()?).map_err(|source| ImageError::Io { path: tmp.clone(), source })?;
                fs::rename(&tmp, &path).map_err(|source| ImageError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
        }
        self.images.write().unwrap().entry(key.clone()).or_insert_with(|| Arc::new(raster));
        Ok(key)
    }

    /// Reads a PNG from an arbitrary path and registers it.
    pub fn import_png(&self, path: &Path) -> Result<String, ImageError> {
        let bytes = fs::read(path).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.insert(Raster::from_png(&bytes)?)
    }

    pub fn get(&self, key: &str) -> Result<Arc<Raster>, ImageError> {
        if let Some(r) = self.images.read().unwrap().get(key) {
            return Ok(r.clone());
        }
        let Some(dir) = &self.dir else {
            return Err(ImageError::Missing(key.to_string()));
        };
        let path = dir.join(format!("{key}.png"));
        let bytes = fs::read(&path).map_err(|_| ImageError::Missing(key.to_string()))?;
        let raster = Arc::new(Raster::from_png(&bytes)?);
        self.images.write().unwrap().insert(key.to_string(), raster.clone());
        Ok(raster)
    }

    pub fn contains(&self, key: &str) -> bool {
        if self.images.read().unwrap().contains_key(key) {
            return true;
        }
        self.dir.as_ref().is_some_and(|d| d.join(format!("{key}.png")).is_file())
    }

    pub fn len(&self) -> usize {
        self.images.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
