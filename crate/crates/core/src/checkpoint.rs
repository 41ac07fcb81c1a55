//! Binary checkpoints with a JSON sidecar, and the super-feature record.
//!
//! Tensor file layout (little-endian): magic `SFCK`, `u32` version,
//! `u32` tensor count, then per tensor a `u32` name length, UTF-8 name,
//! `u32` rows, `u32` cols and `rows*cols` `f64` values in row-major order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::asmk::Codebook;
use crate::encoder::{ConvEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::lit::{AttentionMatrix, LitConfig, SuperFeatureSet, TemplateBank};
use crate::model::Model;
use crate::params::ParamStore;
use crate::whitening::WhiteningTransform;

const TENSOR_MAGIC: &[u8; 4] = b"SFCK";
const RECORD_MAGIC: &[u8; 4] = b"SFSF";
pub const FORMAT_VERSION: u32 = 1;
pub const VERSION_STRING: &str = concat!("superfeat/", env!("CARGO_PKG_VERSION"));

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| get_f64(r)).collect()
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    if &b != magic {
        return Err(Error::Format(format!("bad magic {b:?}")));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn dim_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))
}

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, Mat)]) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, dim_u32(tensors.len())?)?;
    for (name, m) in tensors {
        put_u32(w, dim_u32(name.len())?)?;
        w.write_all(name.as_bytes())?;
        put_u32(w, dim_u32(m.nrows())?)?;
        put_u32(w, dim_u32(m.ncols())?)?;
        put_f64s(w, m.iter())?;
    }
    Ok(())
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Mat)>> {
    check_magic(r, TENSOR_MAGIC)?;
    let count = get_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = get_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = get_u32(r)? as usize;
        let cols = get_u32(r)? as usize;
        let values = get_f64s(r, rows * cols)?;
        let m = Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, m));
    }
    Ok(out)
}

const CODEBOOK_TENSOR: &str = "codebook.centroids";

/// Stores the centroids as a single-tensor file.
pub fn save_codebook(codebook: &Codebook, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    write_tensors(&mut f, &[(CODEBOOK_TENSOR.to_string(), codebook.centroids.clone())])?;
    f.flush()?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let mut f = std::io::BufReader::new(fs::File::open(path)?);
    let tensors = read_tensors(&mut f)?;
    match tensors.into_iter().find(|(n, _)| n == CODEBOOK_TENSOR) {
        Some((_, centroids)) if centroids.nrows() > 0 => Ok(Codebook { centroids }),
        _ => Err(Error::Format(format!("{} holds no codebook", path.display()))),
    }
}

/// Sidecar describing how to rebuild the model around the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    pub encoder: EncoderConfig,
    pub lit: LitConfig,
    pub encoder_seed: u64,
    pub lit_seed: u64,
    pub stride: usize,
    pub local_dim: usize,
    pub superfeature_dim: usize,
    pub whitened_dim: usize,
    pub epoch: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn whitening_tensors(prefix: &str, w: &WhiteningTransform, out: &mut Vec<(String, Mat)>) {
    out.push((format!("{prefix}.mean"), w.mean.clone().insert_axis(ndarray::Axis(0))));
    out.push((format!("{prefix}.projection"), w.projection.clone()));
}

fn store_tensors(store: &ParamStore, out: &mut Vec<(String, Mat)>) {
    out.extend(store.params().iter().map(|p| (p.name.clone(), p.value.clone())));
}

/// Writes `path` (tensors) and `path.json` (sidecar).
pub fn save_model(model: &Model, path: &Path, epoch: Option<usize>) -> Result<()> {
    let mut tensors = Vec::new();
    store_tensors(&model.encoder.store, &mut tensors);
    store_tensors(&model.bank.store, &mut tensors);
    whitening_tensors("whiten.super", &model.superfeature_whitening, &mut tensors);
    whitening_tensors("whiten.local", &model.local_whitening, &mut tensors);
    let mut bytes = Vec::new();
    write_tensors(&mut bytes, &tensors)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    let meta = CheckpointMeta {
        version: VERSION_STRING.into(),
        encoder: model.encoder.config.clone(),
        lit: model.bank.config.clone(),
        encoder_seed: model.encoder.config.seed,
        lit_seed: model.bank.config.seed,
        stride: model.encoder.total_stride(),
        local_dim: model.encoder.output_dim(),
        superfeature_dim: model.bank.config.dim,
        whitened_dim: model.whitened_dim(),
        epoch,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn take(tensors: &mut Vec<(String, Mat)>, name: &str) -> Result<Mat> {
    let pos = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
    Ok(tensors.remove(pos).1)
}

fn take_store(tensors: &mut Vec<(String, Mat)>, names: &[String]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for name in names {
        store.add(name.clone(), take(tensors, name)?);
    }
    Ok(store)
}

fn take_whitening(tensors: &mut Vec<(String, Mat)>, prefix: &str) -> Result<WhiteningTransform> {
    let mean = take(tensors, &format!("{prefix}.mean"))?;
    let projection = take(tensors, &format!("{prefix}.projection"))?;
    if mean.nrows() != 1 || mean.ncols() != projection.ncols() {
        return Err(Error::Format(format!("{prefix} shapes disagree")));
    }
    Ok(WhiteningTransform {
        mean: Array1::from_iter(mean.iter().copied()),
        projection,
    })
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut tensors = read_tensors(&mut fs::read(path)?.as_slice())?;
    let mut enc_cfg = meta.encoder.clone();
    enc_cfg.seed = meta.encoder_seed;
    let mut lit_cfg = meta.lit.clone();
    lit_cfg.seed = meta.lit_seed;

    let layout = ConvEncoder::new(enc_cfg.clone());
    let names: Vec<String> = layout.store.params().iter().map(|p| p.name.clone()).collect();
    let encoder = ConvEncoder::from_store(enc_cfg, take_store(&mut tensors, &names)?)?;
    let layout = TemplateBank::new(lit_cfg.clone())?;
    let names: Vec<String> = layout.store.params().iter().map(|p| p.name.clone()).collect();
    let bank = TemplateBank::from_store(lit_cfg, take_store(&mut tensors, &names)?)?;
    let superfeature_whitening = take_whitening(&mut tensors, "whiten.super")?;
    let local_whitening = take_whitening(&mut tensors, "whiten.local")?;
    if let Some((name, _)) = tensors.first() {
        return Err(Error::Format(format!("unexpected tensor {name}")));
    }
    Ok((
        Model {
            encoder,
            bank,
            superfeature_whitening,
            local_whitening,
        },
        meta,
    ))
}

/// Layout: magic `SFSF`, `u32` version, `u32` N, `u32` dim, `f64` scale,
/// N strengths, `N x dim` features, `u32` L, `u32` N and the `L x N`
/// attention values.
pub fn write_superfeature_record(w: &mut impl Write, set: &SuperFeatureSet) -> Result<()> {
    w.write_all(RECORD_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    put_u32(w, dim_u32(set.len())?)?;
    put_u32(w, dim_u32(set.dim())?)?;
    put_f64s(w, [set.scale].iter())?;
    put_f64s(w, set.strengths.iter())?;
    put_f64s(w, set.features.iter())?;
    let a = &set.attention.alpha;
    put_u32(w, dim_u32(a.nrows())?)?;
    put_u32(w, dim_u32(a.ncols())?)?;
    put_f64s(w, a.iter())?;
    Ok(())
}

/// Inverse of [`write_superfeature_record`]; the grid is not stored, so it
/// comes back as `(L, 1)`.
pub fn read_superfeature_record(r: &mut impl Read) -> Result<SuperFeatureSet> {
    check_magic(r, RECORD_MAGIC)?;
    let n = get_u32(r)? as usize;
    let dim = get_u32(r)? as usize;
    let scale = get_f64(r)?;
    let strengths = get_f64s(r, n)?;
    let features = Array2::from_shape_vec((n, dim), get_f64s(r, n * dim)?).map_err(|e| Error::Format(e.to_string()))?;
    let l = get_u32(r)? as usize;
    let cols = get_u32(r)? as usize;
    let alpha = Array2::from_shape_vec((l, cols), get_f64s(r, l * cols)?).map_err(|e| Error::Format(e.to_string()))?;
    Ok(SuperFeatureSet {
        features,
        strengths,
        attention: AttentionMatrix { alpha },
        scale,
        grid: (l, 1),
    })
}
