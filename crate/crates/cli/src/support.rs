use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use defectforge::augment::ImageBed;
use defectforge::datakit::{save_canonical, DatasetManifest};
use defectforge::gpwgan::GeneratorNet;
use defectforge::raster::GrayImage;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Invalid flags, config values or output clashes; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn required_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| config_error("--out is required for this subcommand"))
}

/// Refuses to overwrite an existing output unless `force` is set.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(config_error(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn normalized(p: &Path) -> Result<PathBuf> {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    let abs = std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// `target` expressed relative to directory `base`.
pub fn relative_path(target: &Path, base: &Path) -> Result<PathBuf> {
    let (t, b) = (normalized(target)?, normalized(base)?);
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut out = PathBuf::new();
    for _ in common..bc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    Ok(out)
}

fn dir_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Rewrites image paths of `m` so they resolve from `new_root`.
pub fn rebase(m: &mut DatasetManifest, new_root: &Path) -> Result<()> {
    let old = m.root.clone().unwrap_or_default();
    for img in &mut m.images {
        let rel = relative_path(&old.join(&img.file), new_root)?;
        img.file = rel.to_string_lossy().replace('\\', "/");
    }
    m.root = Some(new_root.to_path_buf());
    Ok(())
}

/// Saves `m` at `path` with image paths relative to the file's directory.
pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    create_parent(path)?;
    let mut m = m.clone();
    rebase(&mut m, &dir_of(path))?;
    save_canonical(&m, path).with_context(|| format!("writing {}", path.display()))
}

/// Defect-free images of `dir`, in file-name order.
pub fn load_beds(dir: &Path) -> Result<Vec<ImageBed>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(config_error(format!("no PNG beds in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let px = GrayImage::load_png(&p)?;
            Ok(ImageBed {
                pixels: Arc::new(px),
                source_id: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            })
        })
        .collect()
}

/// Parses repeated `class=path` flags and loads each generator.
pub fn load_generators(specs: &[String]) -> Result<BTreeMap<String, GeneratorNet>> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let (class, path) = spec
            .split_once('=')
            .ok_or_else(|| config_error(format!("--generator expects class=path, got `{spec}`")))?;
        let file = File::open(path).with_context(|| format!("opening {path}"))?;
        let gen = GeneratorNet::read_from(file).with_context(|| format!("loading {path}"))?;
        out.insert(class.to_string(), gen);
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunRecord<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a C,
}

/// Writes the run record next to an output: reproducibility metadata with
/// the effective configuration and its hash.
pub fn write_run_record<C: Serialize>(path: &Path, command: &str, seed: u64, config: &C) -> Result<()> {
    let canonical = serde_json::to_string(config)?;
    let record = RunRecord {
        tool: "defectforge",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        config_sha256: format!("{:x}", Sha256::digest(canonical.as_bytes())),
        config,
    };
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out.json` becomes `out.run.json`; a directory gets `run.json` inside.
pub fn run_record_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        out.with_extension("run.json")
    }
}

/// `[section]` of the config file, or an empty table.
pub fn config_section(table: &toml::Table, name: &str) -> toml::Table {
    match table.get(name) {
        Some(toml::Value::Table(t)) => t.clone(),
        _ => toml::Table::new(),
    }
}

pub fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table, what: &str) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| config_error(format!("[{what}]: {e}")))
}
