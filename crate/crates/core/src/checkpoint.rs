//! Checkpoint directories: `manifest.txt`, `config.txt` and one DFT1 file per parameter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::TrainConfig;
use crate::dft1;
use crate::error::{Error, Result};
use crate::model::Dfen;
use crate::params::{fnv1a, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";
const MAGIC: &str = "dfen-checkpoint 1";

/// FNV-1a of the little-endian bytes of every value, as 16 hex digits.
pub fn checksum(t: &Tensor) -> String {
    format!("{:016x}", fnv1a(t.data().iter().flat_map(|v| v.to_le_bytes())))
}

/// Manifest text: header, concat order, then `param <name> <file> <d0>x<d1>.. <checksum>` per tensor.
pub fn manifest(config: &TrainConfig, store: &ParamStore) -> String {
    let mut out = format!("{MAGIC}\n");
    let members = config.model.concat_set.members();
    let order: Vec<&str> = ["f1", "f2", "f3"]
        .into_iter()
        .zip(members)
        .filter_map(|(n, m)| m.then_some(n))
        .collect();
    writeln!(out, "concat_order {}", order.join(" ")).expect("write to string");
    for (_, name, value) in store.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "param {name} {name}.dft1 {} {}", dims.join("x"), checksum(value)).expect("write to string");
    }
    out
}

pub fn save(dir: &Path, config: &TrainConfig, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (_, name, value) in store.iter() {
        dft1::write(&dir.join(format!("{name}.dft1")), value)?;
    }
    let write = |file: &str, text: String| {
        let path = dir.join(file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(CONFIG, config.to_text())?;
    write(MANIFEST, manifest(config, store))
}

/// Rebuilds the model described by the saved config and fills its parameters.
pub fn load(dir: &Path) -> Result<(TrainConfig, Dfen, ParamStore)> {
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    };
    let config = TrainConfig::parse(&read(CONFIG)?)?;
    config.validate()?;
    let mut store = ParamStore::new(config.seed);
    let model = Dfen::new(config.model, &mut store)?;
    let manifest_path = dir.join(MANIFEST);
    let text = read(MANIFEST)?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::load(&manifest_path, "missing checkpoint header"));
    }
    let mut loaded = vec![false; store.len()];
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[..] {
            ["concat_order", ..] => {
                let expected = manifest(&config, &ParamStore::new(0));
                if !expected.lines().any(|l| l == line) {
                    return Err(Error::load(&manifest_path, format!("{line:?} disagrees with the saved config")));
                }
            }
            ["param", name, file, _, sum] => {
                let id = store
                    .id(name)
                    .ok_or_else(|| Error::load(&manifest_path, format!("unknown parameter {name}")))?;
                let tensor = dft1::read(&dir.join(file))?;
                if checksum(&tensor) != sum {
                    return Err(Error::load(dir.join(file), "contents do not match the manifest checksum"));
                }
                store
                    .set(id, tensor)
                    .map_err(|e| Error::load(dir.join(file), e.to_string()))?;
                if std::mem::replace(&mut loaded[id.index()], true) {
                    return Err(Error::load(&manifest_path, format!("{name} listed twice")));
                }
            }
            _ => return Err(Error::load(&manifest_path, format!("bad line {line:?}"))),
        }
    }
    if let Some(missing) = loaded.iter().position(|&l| !l) {
        return Err(Error::load(&manifest_path, format!("{} is missing", store.name(ParamId::from_index(missing)))));
    }
    Ok((config, model, store))
}
