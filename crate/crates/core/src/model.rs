//! Model bundle on disk: `manifest.json` plus one MAT1 blob per matrix.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codebooks::{Codebook, DiagonalGmm};
use crate::embedding::{EmbedKind, TembProjection};
use crate::error::{Error, Result};
use crate::hashing::ItqModel;
use crate::linalg::orthogonality_error;
use crate::pipeline::{PipelineConfig, PipelineModel, Quantizer};
use crate::postprocessing::RnModel;
use crate::preprocessing::PcaModel;
use crate::store::{read_matrix, write_matrix};

pub const FORMAT_VERSION: &str = "convmask-model/1";
pub const MANIFEST_FILE: &str = "manifest.json";
const ORTHOGONALITY_TOLERANCE: f64 = 1e-5;
/// Above this many columns the orthogonality check on load is skipped (it is cubic).
const ORTHOGONALITY_CHECK_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    config: PipelineConfig,
    input_channels: usize,
    embed_dim: usize,
    final_dim: usize,
    bits: Option<usize>,
    blobs: Vec<String>,
}

struct Shapes {
    channels: usize,
    d: usize,
    c: usize,
    embed: usize,
    out: usize,
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter().map(|&v| v as f32));
    }
    out
}

struct BlobWriter<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl BlobWriter<'_> {
    fn matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        self.raw(name, m.nrows(), m.ncols(), &to_row_major(m))
    }

    fn vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        self.raw(name, 1, v.len(), &data)
    }

    fn rows(&mut self, name: &str, rows: usize, cols: usize, v: &[f64]) -> Result<()> {
        let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
        self.raw(name, rows, cols, &data)
    }

    fn raw(&mut self, name: &str, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
        let file = BufWriter::new(File::create(self.dir.join(format!("{name}.mat")))?);
        write_matrix(rows, cols, data, file)?;
        self.names.push(name.to_owned());
        Ok(())
    }
}

/// Writes the bundle into `dir` (created if needed) and returns the manifest path.
pub fn save_model(m: &PipelineModel, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut w = BlobWriter {
        dir,
        names: Vec::new(),
    };
    w.vector("pca_mean", &m.pca.mean)?;
    w.matrix("pca_basis", &m.pca.basis)?;
    w.vector("pca_eigenvalues", &m.pca.eigenvalues)?;
    match &m.quantizer {
        Quantizer::KMeans(c) => w.rows("codebook", c.len(), c.dim(), c.as_flat())?,
        Quantizer::Gmm(g) => {
            w.vector("gmm_weights", &g.weights)?;
            w.rows("gmm_means", g.len(), g.dim, &g.means)?;
            w.rows("gmm_variances", g.len(), g.dim, &g.variances)?;
        }
    }
    if let Some(t) = &m.temb {
        w.vector("temb_mean", &t.mean)?;
        w.matrix("temb_basis", &t.basis)?;
        w.matrix("temb_drop_basis", &t.drop_basis)?;
    }
    w.vector("rn_mean", &m.rn.mean)?;
    w.matrix("rn_rotation", &m.rn.rotation)?;
    w.vector("rn_eigenvalues", &m.rn.eigenvalues)?;
    if let Some(itq) = &m.itq {
        w.vector("itq_mean", &itq.mean)?;
        w.matrix("itq_pca", &itq.pca)?;
        w.matrix("itq_rotation", &itq.rotation)?;
    }

    // RN whitening and epsilon live in the config
    let mut config = m.config.clone();
    config.whiten = m.rn.whiten;
    config.rn_epsilon = m.rn.epsilon;
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_owned(),
        config,
        input_channels: m.input_channels,
        embed_dim: m.embed_dim(),
        final_dim: m.descriptor_dim(),
        bits: m.code_bits(),
        blobs: w.names,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text)?;
    Ok(path)
}

struct BlobReader<'a> {
    dir: &'a Path,
}

impl BlobReader<'_> {
    fn raw(&self, name: &str, expected: (usize, usize)) -> Result<Vec<f32>> {
        let path = self.dir.join(format!("{name}.mat"));
        let file = File::open(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingBlob(name.to_owned()),
            _ => Error::Io(e),
        })?;
        let (rows, cols, data) = read_matrix(BufReader::new(file))?;
        if (rows, cols) != expected {
            return Err(Error::ShapeMismatch {
                name: name.to_owned(),
                expected,
                found: (rows, cols),
            });
        }
        Ok(data)
    }

    fn vector(&self, name: &str, len: usize) -> Result<Vec<f64>> {
        Ok(self
            .raw(name, (1, len))?
            .into_iter()
            .map(f64::from)
            .collect())
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.raw(name, (rows, cols))?;
        Ok(DMatrix::from_row_iterator(
            rows,
            cols,
            data.into_iter().map(f64::from),
        ))
    }

    fn orthonormal(&self, name: &str, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let m = self.matrix(name, rows, cols)?;
        if cols <= ORTHOGONALITY_CHECK_LIMIT {
            let err = orthogonality_error(&m);
            if err > ORTHOGONALITY_TOLERANCE {
                return Err(Error::Manifest(format!(
                    "{name} columns are not orthonormal (max deviation {err:e})"
                )));
            }
        }
        Ok(m)
    }
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<PipelineModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingBlob(MANIFEST_FILE.to_owned()),
        _ => Error::Io(e),
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(FORMAT_VERSION) => {}
        Some(other) => return Err(Error::VersionMismatch(other.to_owned())),
        None => return Err(Error::Manifest("format_version is missing".into())),
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))?;
    let cfg = manifest.config;
    cfg.validate()
        .map_err(|e| Error::Manifest(format!("stored configuration is invalid: {e}")))?;
    let embed = cfg.embed_dim().expect("validated");
    let s = Shapes {
        channels: manifest.input_channels,
        d: cfg.pca_dim,
        c: cfg.codebook_size,
        embed,
        out: cfg.rn_dim.unwrap_or(embed),
    };
    if manifest.embed_dim != s.embed
        || manifest.final_dim != s.out
        || manifest.bits != cfg.hash_bits
    {
        return Err(Error::Manifest(format!(
            "recorded dimensions (D={}, out={}, bits={:?}) disagree with the configuration",
            manifest.embed_dim, manifest.final_dim, manifest.bits
        )));
    }

    let r = BlobReader { dir };
    let pca = PcaModel {
        mean: r.vector("pca_mean", s.channels)?,
        basis: r.orthonormal("pca_basis", s.channels, s.d)?,
        eigenvalues: r.vector("pca_eigenvalues", s.d)?,
    };
    let quantizer = match cfg.embed {
        EmbedKind::Fv => {
            let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            let g = DiagonalGmm {
                dim: s.d,
                weights: r.vector("gmm_weights", s.c)?,
                means: to64(r.raw("gmm_means", (s.c, s.d))?),
                variances: to64(r.raw("gmm_variances", (s.c, s.d))?),
            };
            g.validate()?;
            Quantizer::Gmm(g)
        }
        EmbedKind::Temb | EmbedKind::Vlad => {
            let data = r.raw("codebook", (s.c, s.d))?;
            Quantizer::KMeans(Codebook::new(
                s.d,
                data.into_iter().map(f64::from).collect(),
            )?)
        }
    };
    let temb = if cfg.embed == EmbedKind::Temb {
        let raw = s.d * s.c;
        Some(TembProjection {
            mean: r.vector("temb_mean", raw)?,
            basis: r.orthonormal("temb_basis", raw, raw - cfg.drop)?,
            drop_basis: r.matrix("temb_drop_basis", raw, cfg.drop)?,
        })
    } else {
        None
    };
    let rn = RnModel {
        mean: r.vector("rn_mean", s.embed)?,
        rotation: r.orthonormal("rn_rotation", s.embed, s.out)?,
        eigenvalues: r.vector("rn_eigenvalues", s.out)?,
        whiten: cfg.whiten,
        epsilon: cfg.rn_epsilon,
    };
    let itq = match cfg.hash_bits {
        Some(bits) => Some(ItqModel {
            mean: r.vector("itq_mean", s.out)?,
            pca: r.orthonormal("itq_pca", s.out, bits)?,
            rotation: r.orthonormal("itq_rotation", bits, bits)?,
        }),
        None => None,
    };
    Ok(PipelineModel {
        config: cfg,
        input_channels: s.channels,
        pca,
        quantizer,
        temb,
        rn,
        itq,
    })
}
