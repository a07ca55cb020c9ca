//! On-disk formats: RTSV1 metadata+raw pairs, RTSC1 checkpoints, PGM slices.
//!
//! An RTSV1 item is `<stem>.rtsv` (UTF-8 `key=value` lines) beside
//! `<stem>.raw` (little-endian body). Floats in metadata are written with
//! Rust's shortest round-trip formatting, so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use monoview_core::motion::DisplacementField;
use monoview_core::projector::{Beam, Geometry, Projection};
use monoview_core::tensor::{ParamStore, Tensor};
use monoview_core::{Grid, Mask, Volume};

pub const VOLUME_MAGIC: &str = "RTSV1";
pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RTSC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Invalid { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn invalid(path: &Path, msg: impl Into<String>) -> FormatError {
    FormatError::Invalid {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Metadata path and body path of an item, given either one or the bare stem.
pub fn item_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("rtsv") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let meta = PathBuf::from(format!("{}.rtsv", stem.display()));
    let raw = PathBuf::from(format!("{}.raw", stem.display()));
    (meta, raw)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io(path))?;
    f.write_all(bytes).map_err(io(path))
}

/// Writes `meta` (ordered keys, checksum appended) and `body`.
fn write_item(path: &Path, meta: &[(&str, String)], body: &[u8]) -> Result<PathBuf> {
    let (meta_path, raw_path) = item_paths(path);
    let mut text = String::new();
    writeln!(text, "magic={VOLUME_MAGIC}").unwrap();
    for (k, v) in meta {
        writeln!(text, "{k}={v}").unwrap();
    }
    writeln!(text, "checksum={:08x}", crc32fast::hash(body)).unwrap();
    write_file(&raw_path, body)?;
    write_file(&meta_path, text.as_bytes())?;
    Ok(meta_path)
}

/// Parsed metadata with checked body.
struct Item {
    path: PathBuf,
    keys: BTreeMap<String, String>,
    body: Vec<u8>,
}

impl Item {
    fn read(path: &Path) -> Result<Item> {
        let (meta_path, raw_path) = item_paths(path);
        let text = fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
        let mut keys = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(&meta_path, format!("line {}: expected key=value", n + 1)))?;
            keys.insert(k.trim().to_string(), v.trim().to_string());
        }
        if keys.get("magic").map(String::as_str) != Some(VOLUME_MAGIC) {
            return Err(invalid(&meta_path, format!("missing magic={VOLUME_MAGIC}")));
        }
        let body = fs::read(&raw_path).map_err(io(&raw_path))?;
        let expected = keys
            .get("checksum")
            .ok_or_else(|| invalid(&meta_path, "missing checksum"))?;
        let actual = format!("{:08x}", crc32fast::hash(&body));
        if !expected.eq_ignore_ascii_case(&actual) {
            return Err(invalid(
                &raw_path,
                format!("checksum mismatch: metadata {expected}, body {actual}"),
            ));
        }
        Ok(Item {
            path: meta_path,
            keys,
            body,
        })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.keys
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| invalid(&self.path, format!("missing key `{key}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, n: usize) -> Result<Vec<T>> {
        let raw = self.get(key)?;
        let v: Vec<T> = raw
            .split(',')
            .map(|s| s.trim().parse::<T>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| invalid(&self.path, format!("cannot parse `{key}={raw}`")))?;
        if v.len() != n {
            return Err(invalid(&self.path, format!("`{key}` needs {n} values, got {}", v.len())));
        }
        Ok(v)
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| invalid(&self.path, format!("cannot parse `{key}={raw}`")))
    }

    fn expect(&self, key: &str, value: &str) -> Result<()> {
        let got = self.get(key)?;
        if got != value {
            return Err(invalid(&self.path, format!("expected {key}={value}, got {key}={got}")));
        }
        Ok(())
    }

    fn grid(&self) -> Result<Grid> {
        let dims: Vec<usize> = self.list("dims", 3)?;
        let spacing: Vec<f64> = self.list("spacing_mm", 3)?;
        let origin: Vec<f64> = match self.keys.get("origin_mm") {
            Some(_) => self.list("origin_mm", 3)?,
            None => {
                let g = Grid::centered([dims[0], dims[1], dims[2]], [spacing[0], spacing[1], spacing[2]])
                    .map_err(|e| invalid(&self.path, e.to_string()))?;
                g.origin.to_vec()
            }
        };
        Grid::new(
            [dims[0], dims[1], dims[2]],
            [spacing[0], spacing[1], spacing[2]],
            [origin[0], origin[1], origin[2]],
        )
        .map_err(|e| invalid(&self.path, e.to_string()))
    }

    fn f32s(&self, n: usize) -> Result<Vec<f32>> {
        self.expect("dtype", "f32le")?;
        if self.body.len() != 4 * n {
            return Err(invalid(
                &self.path,
                format!("body has {} bytes, dims need {}", self.body.len(), 4 * n),
            ));
        }
        Ok(self
            .body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn grid_meta(kind: &str, g: &Grid, dtype: &str) -> Vec<(&'static str, String)> {
    vec![
        ("kind", kind.to_string()),
        ("dims", join(&g.dims)),
        ("spacing_mm", join(&g.spacing)),
        ("origin_mm", join(&g.origin)),
        ("dtype", dtype.to_string()),
        ("order", "z-major".to_string()),
    ]
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<PathBuf> {
    write_item(path, &grid_meta("volume", &vol.grid, "f32le"), &f32_bytes(&vol.data))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let item = Item::read(path)?;
    item.expect("kind", "volume")?;
    let grid = item.grid()?;
    let data = item.f32s(grid.len())?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid(&item.path, "non-finite voxel"));
    }
    Volume::new(grid, data).map_err(|e| invalid(&item.path, e.to_string()))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<PathBuf> {
    write_item(path, &grid_meta("mask", &mask.grid, "u8"), &mask.data)
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let item = Item::read(path)?;
    item.expect("kind", "mask")?;
    item.expect("dtype", "u8")?;
    let grid = item.grid()?;
    if item.body.len() != grid.len() {
        return Err(invalid(
            &item.path,
            format!("body has {} bytes, dims {:?} need {}", item.body.len(), grid.dims, grid.len()),
        ));
    }
    Mask::new(grid, item.body.clone()).map_err(|e| invalid(&item.path, e.to_string()))
}

pub fn save_dvf(path: &Path, dvf: &DisplacementField) -> Result<PathBuf> {
    let mut meta = grid_meta("dvf", &dvf.grid, "f32le");
    meta.push(("components", "3".into()));
    write_item(path, &meta, &f32_bytes(&dvf.data))
}

pub fn load_dvf(path: &Path) -> Result<DisplacementField> {
    let item = Item::read(path)?;
    item.expect("kind", "dvf")?;
    item.expect("components", "3")?;
    let grid = item.grid()?;
    let data = item.f32s(3 * grid.len())?;
    DisplacementField::new(grid, data).map_err(|e| invalid(&item.path, e.to_string()))
}

pub fn save_projection(path: &Path, proj: &Projection) -> Result<PathBuf> {
    let g = &proj.geometry;
    let mut meta = vec![
        ("kind", "projection".to_string()),
        ("dims", join(&g.pixels)),
        ("spacing_mm", join(&g.pitch)),
        ("dtype", "f32le".to_string()),
        ("order", "z-major".to_string()),
        ("angle_deg", g.angle_deg.to_string()),
    ];
    match g.beam {
        Beam::Parallel => meta.push(("beam", "parallel".into())),
        Beam::Cone { sad, sdd } => {
            meta.push(("beam", "cone".into()));
            meta.push(("sad_mm", sad.to_string()));
            meta.push(("sdd_mm", sdd.to_string()));
        }
    }
    write_item(path, &meta, &f32_bytes(&proj.pixels))
}

pub fn load_projection(path: &Path) -> Result<Projection> {
    let item = Item::read(path)?;
    item.expect("kind", "projection")?;
    let dims: Vec<usize> = item.list("dims", 2)?;
    let pitch: Vec<f64> = item.list("spacing_mm", 2)?;
    let beam = match item.get("beam")? {
        "parallel" => Beam::Parallel,
        "cone" => Beam::Cone {
            sad: item.scalar("sad_mm")?,
            sdd: item.scalar("sdd_mm")?,
        },
        other => return Err(invalid(&item.path, format!("unknown beam `{other}`"))),
    };
    let geometry = Geometry {
        angle_deg: item.scalar("angle_deg")?,
        beam,
        pixels: [dims[0], dims[1]],
        pitch: [pitch[0], pitch[1]],
    };
    let data = item.f32s(dims[0] * dims[1])?;
    if data.iter().any(|v| !v.is_finite()) {
        return Err(invalid(&item.path, "non-finite pixel"));
    }
    Projection::new(geometry, data).map_err(|e| invalid(&item.path, e.to_string()))
}

// ---- checkpoints ------------------------------------------------------------

/// Serializes `config_text` and every parameter value in store order.
pub fn encode_checkpoint(config_text: &str, params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
    out.extend_from_slice(config_text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(invalid(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Inverse of [`encode_checkpoint`]: the stored config text and parameters.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(String, ParamStore<f32>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 16 || &bytes[..5] != CHECKPOINT_MAGIC {
        return Err(invalid(path, "not an RTSC1 checkpoint"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(invalid(path, "checkpoint checksum mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: 5,
        path,
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(path, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| invalid(path, "config is not UTF-8"))?;
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| invalid(path, "parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(4 * numel)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| invalid(path, format!("{name}: {e}")))?;
        store.insert(&name, t).map_err(|e| invalid(path, e.to_string()))?;
    }
    if r.pos != body.len() {
        return Err(invalid(path, "trailing bytes after parameters"));
    }
    Ok((config, store))
}

pub fn save_checkpoint(path: &Path, config_text: &str, params: &ParamStore<f32>) -> Result<()> {
    write_file(path, &encode_checkpoint(config_text, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore<f32>)> {
    let bytes = fs::read(path).map_err(io(path))?;
    decode_checkpoint(&bytes, path)
}

// ---- PGM ----------------------------------------------------------------------

/// Binary 8-bit grayscale image, row-major.
pub fn save_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(invalid(path, format!("{width}x{height} image needs {} pixels", width * height)));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    write_file(path, &out)
}

/// Reads a binary PGM back as (width, height, pixels).
pub fn load_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io(path))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(invalid(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(invalid(path, "expected an 8-bit P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| invalid(path, "bad PGM size"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let px = bytes.get(pos..).unwrap_or_default().to_vec();
    if px.len() != w * h {
        return Err(invalid(path, format!("PGM body has {} bytes, expected {}", px.len(), w * h)));
    }
    Ok((w, h, px))
}

/// Maps [0, 1] intensities to 0..=255.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}
