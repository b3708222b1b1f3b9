//! Label volumes, per-cell layer masks, and the cell adjacency graph.
//!
//! A [`LabelVolume`] is a dense 3D grid of `u32` instance labels
//! (0 = background) stored z-major, with anisotropy metadata giving the
//! relative voxel pitch along (z, y, x). Every downstream stage reads
//! cells through the [`CellIndex`] built here.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("dims/data-length mismatch: dims {dims:?} imply {expected} voxels, payload has {actual}")]
    LengthMismatch {
        dims: (usize, usize, usize),
        expected: usize,
        actual: usize,
    },
    #[error("unsupported sample type: {0}")]
    UnsupportedSampleType(String),
    #[error("invalid anisotropy {0:?}: components must be strictly positive")]
    InvalidAnisotropy([f64; 3]),
    #[error("unsupported file format for {0}")]
    UnsupportedFormat(String),
    #[error("tiff error: {0}")]
    Tiff(String),
}

/// Dense 3D instance-label grid. `data` is row-major in (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub dims: (usize, usize, usize),
    pub data: Vec<u32>,
    pub anisotropy: [f64; 3],
}

pub const DEFAULT_ANISOTROPY: [f64; 3] = [4.0, 1.0, 1.0];

impl LabelVolume {
    pub fn new(dims: (usize, usize, usize), anisotropy: [f64; 3]) -> Result<Self, VolumeError> {
        if anisotropy.iter().any(|&a| !(a > 0.0)) {
            return Err(VolumeError::InvalidAnisotropy(anisotropy));
        }
        Ok(Self {
            dims,
            data: vec![0; dims.0 * dims.1 * dims.2],
            anisotropy,
        })
    }

    pub fn from_data(
        dims: (usize, usize, usize),
        data: Vec<u32>,
        anisotropy: [f64; 3],
    ) -> Result<Self, VolumeError> {
        let expected = dims.0 * dims.1 * dims.2;
        if data.len() != expected {
            return Err(VolumeError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        if anisotropy.iter().any(|&a| !(a > 0.0)) {
            return Err(VolumeError::InvalidAnisotropy(anisotropy));
        }
        Ok(Self {
            dims,
            data,
            anisotropy,
        })
    }

    #[inline]
    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u32 {
        self.data[self.idx(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, label: u32) {
        let i = self.idx(z, y, x);
        self.data[i] = label;
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Voxel center in physical coordinates (anisotropy-scaled).
    #[inline]
    pub fn physical(&self, z: usize, y: usize, x: usize) -> [f64; 3] {
        [
            z as f64 * self.anisotropy[0],
            y as f64 * self.anisotropy[1],
            x as f64 * self.anisotropy[2],
        ]
    }
}

/// One cell's pixel set on one z-layer. Pixels are (y, x) and kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask2D {
    pub layer: usize,
    pub label: u32,
    pub pixels: Vec<(u32, u32)>,
}

impl Mask2D {
    pub fn new(layer: usize, label: u32, mut pixels: Vec<(u32, u32)>) -> Self {
        pixels.sort_unstable();
        pixels.dedup();
        Self {
            layer,
            label,
            pixels,
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn contains(&self, p: (u32, u32)) -> bool {
        self.pixels.binary_search(&p).is_ok()
    }
}

/// Overlap of two masks in (y, x) projection, layers ignored.
pub fn mask_overlap(a: &Mask2D, b: &Mask2D) -> usize {
    // sorted-merge intersection count
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Intersection pixel set of two masks in (y, x) projection.
pub fn mask_intersection(a: &Mask2D, b: &Mask2D) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.pixels.len() && j < b.pixels.len() {
        match a.pixels[i].cmp(&b.pixels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a.pixels[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Per-cell record: z-extent and one mask per occupied layer.
#[derive(Debug, Clone)]
pub struct CellRecord {
    pub label: u32,
    pub top_layer: usize,
    pub bottom_layer: usize,
    pub masks: BTreeMap<usize, Mask2D>,
    pub voxel_count: usize,
}

impl CellRecord {
    pub fn top_mask(&self) -> &Mask2D {
        &self.masks[&self.top_layer]
    }

    pub fn bottom_mask(&self) -> &Mask2D {
        &self.masks[&self.bottom_layer]
    }

    /// Number of occupied layers (a finalized record normally occupies
    /// every layer in [top, bottom], but holes are representable).
    pub fn layer_count(&self) -> usize {
        self.masks.len()
    }
}

/// Map label -> CellRecord. Immutable after construction.
#[derive(Debug, Clone, Default)]
pub struct CellIndex {
    pub cells: BTreeMap<u32, CellRecord>,
}

impl CellIndex {
    pub fn get(&self, label: u32) -> Option<&CellRecord> {
        self.cells.get(&label)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.cells.keys().copied()
    }
}

/// Cell adjacency under 6-connectivity, with per-edge face-contact counts.
#[derive(Debug, Clone, Default)]
pub struct AdjacencyGraph {
    pub nodes: BTreeSet<u32>,
    /// keyed by (min, max) label pair
    pub edges: BTreeMap<(u32, u32), usize>,
}

impl AdjacencyGraph {
    pub fn contact(&self, a: u32, b: u32) -> usize {
        let key = (a.min(b), a.max(b));
        self.edges.get(&key).copied().unwrap_or(0)
    }

    pub fn are_adjacent(&self, a: u32, b: u32) -> bool {
        self.contact(a, b) > 0
    }

    pub fn neighbors(&self, a: u32) -> Vec<u32> {
        self.edges
            .keys()
            .filter_map(|&(p, q)| {
                if p == a {
                    Some(q)
                } else if q == a {
                    Some(p)
                } else {
                    None
                }
            })
            .collect()
    }
}

/// Build the per-cell layer-mask index. Within one layer a label's pixels
/// form a single Mask2D even if disconnected.
pub fn build_cell_index(volume: &LabelVolume) -> CellIndex {
    let (nz, ny, nx) = volume.dims;
    let mut layer_pixels: HashMap<u32, BTreeMap<usize, Vec<(u32, u32)>>> = HashMap::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let label = volume.get(z, y, x);
                if label == 0 {
                    continue;
                }
                layer_pixels
                    .entry(label)
                    .or_default()
                    .entry(z)
                    .or_default()
                    .push((y as u32, x as u32));
            }
        }
    }
    let mut cells = BTreeMap::new();
    for (label, layers) in layer_pixels {
        let top = *layers.keys().next().unwrap();
        let bottom = *layers.keys().next_back().unwrap();
        let mut masks = BTreeMap::new();
        let mut voxel_count = 0;
        for (z, pixels) in layers {
            voxel_count += pixels.len();
            masks.insert(z, Mask2D::new(z, label, pixels));
        }
        cells.insert(
            label,
            CellRecord {
                label,
                top_layer: top,
                bottom_layer: bottom,
                masks,
                voxel_count,
            },
        );
    }
    CellIndex { cells }
}

/// Face-adjacency graph over nonzero labels.
pub fn build_adjacency(volume: &LabelVolume) -> AdjacencyGraph {
    let (nz, ny, nx) = volume.dims;
    let mut graph = AdjacencyGraph::default();
    let touch = |a: u32, b: u32, graph: &mut AdjacencyGraph| {
        if a != 0 && b != 0 && a != b {
            *graph.edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let v = volume.get(z, y, x);
                if v != 0 {
                    graph.nodes.insert(v);
                }
                // forward neighbors only, so each face pair counts once
                if z + 1 < nz {
                    touch(v, volume.get(z + 1, y, x), &mut graph);
                }
                if y + 1 < ny {
                    touch(v, volume.get(z, y + 1, x), &mut graph);
                }
                if x + 1 < nx {
                    touch(v, volume.get(z, y, x + 1), &mut graph);
                }
            }
        }
    }
    graph
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatHint {
    Auto,
    Raw,
    Tiff,
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    dims: [usize; 3],
    dtype: String,
    anisotropy: [f64; 3],
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn resolve_format(path: &Path, hint: FormatHint) -> Result<FormatHint, VolumeError> {
    match hint {
        FormatHint::Auto => match path.extension().and_then(|e| e.to_str()) {
            Some("lbl") => Ok(FormatHint::Raw),
            Some("tif") | Some("tiff") => Ok(FormatHint::Tiff),
            _ => Err(VolumeError::UnsupportedFormat(path.display().to_string())),
        },
        other => Ok(other),
    }
}

/// Load a label volume from `<name>.lbl` + `<name>.json` or a multi-page
/// TIFF of integer labels. Labels are preserved bit-exactly.
pub fn load_volume(path: &Path, hint: FormatHint) -> Result<LabelVolume, VolumeError> {
    match resolve_format(path, hint)? {
        FormatHint::Raw => load_raw(path),
        FormatHint::Tiff => load_tiff(path),
        FormatHint::Auto => unreachable!(),
    }
}

/// Write a label volume so that `load_volume` reproduces it bit-exactly.
pub fn write_volume(volume: &LabelVolume, path: &Path, hint: FormatHint) -> Result<(), VolumeError> {
    match resolve_format(path, hint)? {
        FormatHint::Raw => write_raw(volume, path),
        FormatHint::Tiff => write_tiff(volume, path),
        FormatHint::Auto => unreachable!(),
    }
}

fn load_raw(path: &Path) -> Result<LabelVolume, VolumeError> {
    let header_text = std::fs::read_to_string(sidecar_path(path))?;
    let header: RawHeader = serde_json::from_str(&header_text)
        .map_err(|e| VolumeError::CorruptHeader(e.to_string()))?;
    if header.dtype != "u32" {
        return Err(VolumeError::UnsupportedSampleType(header.dtype));
    }
    let dims = (header.dims[0], header.dims[1], header.dims[2]);
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(VolumeError::CorruptHeader(format!(
            "payload length {} not a multiple of 4",
            bytes.len()
        )));
    }
    let data: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    LabelVolume::from_data(dims, data, header.anisotropy)
}

fn write_raw(volume: &LabelVolume, path: &Path) -> Result<(), VolumeError> {
    let header = RawHeader {
        dims: [volume.dims.0, volume.dims.1, volume.dims.2],
        dtype: "u32".to_string(),
        anisotropy: volume.anisotropy,
    };
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&header).expect("header serializes"),
    )?;
    let mut w = BufWriter::new(File::create(path)?);
    for v in &volume.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn load_tiff(path: &Path) -> Result<LabelVolume, VolumeError> {
    use tiff::decoder::{Decoder, DecodingResult};
    let file = File::open(path)?;
    let mut decoder = Decoder::new(BufReader::new(file)).map_err(|e| VolumeError::Tiff(e.to_string()))?;
    let mut pages: Vec<Vec<u32>> = Vec::new();
    let (mut ny, mut nx) = (0usize, 0usize);
    loop {
        let (w, h) = decoder
            .dimensions()
            .map_err(|e| VolumeError::Tiff(e.to_string()))?;
        if pages.is_empty() {
            ny = h as usize;
            nx = w as usize;
        } else if (h as usize, w as usize) != (ny, nx) {
            return Err(VolumeError::Tiff("page dimensions vary".into()));
        }
        let img = decoder
            .read_image()
            .map_err(|e| VolumeError::Tiff(e.to_string()))?;
        let page = match img {
            DecodingResult::U8(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(u32::from).collect(),
            DecodingResult::U32(v) => v,
            other => {
                return Err(VolumeError::UnsupportedSampleType(format!("{other:?}")));
            }
        };
        if page.len() != ny * nx {
            return Err(VolumeError::LengthMismatch {
                dims: (pages.len(), ny, nx),
                expected: ny * nx,
                actual: page.len(),
            });
        }
        pages.push(page);
        if !decoder.more_images() {
            break;
        }
        decoder
            .next_image()
            .map_err(|e| VolumeError::Tiff(e.to_string()))?;
    }
    let nz = pages.len();
    let data = pages.concat();
    LabelVolume::from_data((nz, ny, nx), data, DEFAULT_ANISOTROPY)
}

fn write_tiff(volume: &LabelVolume, path: &Path) -> Result<(), VolumeError> {
    use tiff::encoder::{colortype, TiffEncoder};
    let file = File::create(path)?;
    let mut encoder =
        TiffEncoder::new(BufWriter::new(file)).map_err(|e| VolumeError::Tiff(e.to_string()))?;
    let (nz, ny, nx) = volume.dims;
    for z in 0..nz {
        let page = &volume.data[z * ny * nx..(z + 1) * ny * nx];
        encoder
            .write_image::<colortype::Gray32>(nx as u32, ny as u32, page)
            .map_err(|e| VolumeError::Tiff(e.to_string()))?;
    }
    Ok(())
}
