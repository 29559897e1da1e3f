//! On-disk dataset layout: `manifest.json` plus little-endian blobs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

use super::{Dataset, GenConfig};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: String,
    pub config: GenConfig,
    pub n: usize,
    pub x_dim: usize,
    pub y_dim: usize,
    pub y_channels: usize,
    pub latent_dim: usize,
    pub splits: [usize; 3],
    pub has_latents: bool,
    /// SHA-1 over x, t, y, u_z and (if present) latents, in that order.
    pub checksum: String,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|a| a.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8], what: &'static str) -> Result<Vec<f32>> {
    if b.len() % 4 != 0 {
        return Err(Error::Parse {
            what,
            offset: b.len() - b.len() % 4,
            reason: "length is not a multiple of 4".into(),
        });
    }
    Ok(b.chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn checksum(blobs: &[&[u8]]) -> String {
    let mut h = Sha1::new();
    for b in blobs {
        h.update(b);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let x = f32_bytes(&ds.x);
    let t = f32_bytes(&ds.t);
    let y = f32_bytes(&ds.y);
    let lat = ds.latents.as_deref().map(f32_bytes);
    let mut blobs: Vec<&[u8]> = vec![&x, &t, &y, &ds.u_z];
    if let Some(l) = &lat {
        blobs.push(l);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        generator: ds.config.generator.name().into(),
        config: ds.config.clone(),
        n: ds.len(),
        x_dim: ds.x_dim,
        y_dim: ds.y_dim,
        y_channels: ds.y_channels,
        latent_dim: ds.latent_dim,
        splits: [ds.config.n_train, ds.config.n_val, ds.config.n_test],
        has_latents: lat.is_some(),
        checksum: checksum(&blobs),
    };
    write(&dir.join("x.f32"), &x)?;
    write(&dir.join("t.f32"), &t)?;
    write(&dir.join("y.f32"), &y)?;
    write(&dir.join("u_z.u8"), &ds.u_z)?;
    if let Some(l) = &lat {
        write(&dir.join("latents.f32"), l)?;
    }
    write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Loads a saved dataset. With `with_latents = false` the latent blob is
/// neither read nor checked, and counterfactual regeneration is unavailable.
pub fn load_dataset(dir: &Path, with_latents: bool) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&read(&mpath)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Config(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let xb = read(&dir.join("x.f32"))?;
    let tb = read(&dir.join("t.f32"))?;
    let yb = read(&dir.join("y.f32"))?;
    let ub = read(&dir.join("u_z.u8"))?;
    let lb = if manifest.has_latents {
        Some(read(&dir.join("latents.f32"))?)
    } else {
        None
    };
    let mut blobs: Vec<&[u8]> = vec![&xb, &tb, &yb, &ub];
    if let Some(l) = &lb {
        blobs.push(l);
    }
    let actual = checksum(&blobs);
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            expected: manifest.checksum,
            actual,
        });
    }
    let sim = manifest.config.simulator()?;
    let n = manifest.n;
    let x = bytes_f32(&xb, "x blob")?;
    let t = bytes_f32(&tb, "t blob")?;
    let y = bytes_f32(&yb, "y blob")?;
    let latents = match (with_latents, lb) {
        (true, Some(l)) => Some(bytes_f32(&l, "latent blob")?),
        (true, None) => return Err(Error::MissingLatents),
        _ => None,
    };
    let shapes_ok = x.len() == n * manifest.x_dim
        && t.len() == n
        && y.len() == n * manifest.y_dim
        && ub.len() == n
        && latents.as_ref().map_or(true, |l| l.len() == n * manifest.latent_dim)
        && sim.x_dim() == manifest.x_dim
        && sim.y_dim() == manifest.y_dim
        && manifest.config.n_total() == n;
    if !shapes_ok {
        return Err(Error::Shape(format!(
            "blob sizes in {} disagree with the manifest",
            dir.display()
        )));
    }
    if let Some(&bad) = ub.iter().find(|&&u| u as usize >= sim.num_classes()) {
        return Err(Error::Config(format!("class index {bad} out of range")));
    }
    Ok(Dataset {
        config: manifest.config,
        x_dim: manifest.x_dim,
        y_dim: manifest.y_dim,
        y_channels: manifest.y_channels,
        latent_dim: manifest.latent_dim,
        x,
        t,
        y,
        u_z: ub,
        latents,
        sim,
    })
}
