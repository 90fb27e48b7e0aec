use std::path::Path;

use candle_core::DType;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::model::{init_classifier, ClassifierModel, ParamRole, TinyVitConfig};
use crate::error::{Error, Result};
use crate::tensor_file::TensorFile;

const BASE_KIND: &str = "classifier-base";
const LORA_KIND: &str = "classifier-lora";

fn meta_str<'a>(file: &'a TensorFile, key: &str) -> Result<&'a str> {
    file.meta
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::TensorFile(format!("checkpoint header lacks '{key}'")))
}

fn expect_kind(file: &TensorFile, kind: &str) -> Result<()> {
    let found = meta_str(file, "kind")?;
    if found != kind {
        return Err(Error::TensorFile(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

fn assign_from(model: &mut ClassifierModel, file: &TensorFile, roles: &[ParamRole]) -> Result<()> {
    let wanted: Vec<String> = model
        .params()
        .into_iter()
        .filter(|(_, r)| roles.contains(r))
        .map(|(p, _)| p.name.clone())
        .collect();
    for p in model.params_mut() {
        if !wanted.contains(&p.name) {
            continue;
        }
        let rec = file
            .get(&p.name)
            .ok_or_else(|| Error::TensorFile(format!("checkpoint lacks tensor '{}'", p.name)))?;
        p.assign(&rec.tensor)?;
        p.frozen = rec.frozen;
    }
    Ok(())
}

/// Writes every base and head parameter; returns the file's SHA-256.
pub fn save_base(model: &ClassifierModel, path: &Path) -> Result<String> {
    let mut file = TensorFile::new(json!({
        "kind": BASE_KIND,
        "config": model.config,
        "dtype": format!("{:?}", model.dtype()),
    }));
    for (p, role) in model.params() {
        if role != ParamRole::Adapter {
            file.push(p.to_record());
        }
    }
    file.save(path)?;
    file_sha256(path)
}

fn dtype_from_meta(file: &TensorFile) -> Result<DType> {
    match meta_str(file, "dtype")? {
        "F32" => Ok(DType::F32),
        "F64" => Ok(DType::F64),
        other => Err(Error::TensorFile(format!("unsupported dtype {other}"))),
    }
}

pub fn load_base(path: &Path) -> Result<ClassifierModel> {
    let file = TensorFile::load(path)?;
    expect_kind(&file, BASE_KIND)?;
    let config: TinyVitConfig = serde_json::from_value(
        file.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::TensorFile("missing config".into()))?,
    )?;
    let mut model = init_classifier(&config, 0, dtype_from_meta(&file)?)?;
    assign_from(&mut model, &file, &[ParamRole::Base, ParamRole::Head])?;
    Ok(model)
}

/// Writes the adapters and the head. The frozen base is referenced by the
/// hash of its checkpoint file and by a checksum of its values.
pub fn save_lora(model: &ClassifierModel, path: &Path, base_sha256: &str) -> Result<String> {
    let rank = model
        .lora_rank
        .ok_or_else(|| Error::InvalidArgument("model has no adapters to save".into()))?;
    let mut file = TensorFile::new(json!({
        "kind": LORA_KIND,
        "rank": rank,
        "base_sha256": base_sha256,
        "frozen_checksum": model.frozen_checksum()?,
    }));
    for ad in model.adapters() {
        for p in ad.params() {
            file.push(p.to_record().adapter_of(ad.base.clone()));
        }
    }
    for p in model.params_with_role(ParamRole::Head) {
        file.push(p.to_record());
    }
    file.save(path)?;
    file_sha256(path)
}

/// Loads the base checkpoint, attaches adapters and restores the fine-tuned
/// tensors. Fails if the base no longer matches what the adapters were
/// trained on.
pub fn load_lora(base_path: &Path, lora_path: &Path) -> Result<ClassifierModel> {
    let file = TensorFile::load(lora_path)?;
    expect_kind(&file, LORA_KIND)?;
    let base_hash = file_sha256(base_path)?;
    if meta_str(&file, "base_sha256")? != base_hash {
        return Err(Error::TensorFile(format!(
            "{} was trained on a different base than {}",
            lora_path.display(),
            base_path.display()
        )));
    }
    let rank = file
        .meta
        .get("rank")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::TensorFile("missing rank".into()))? as usize;
    let mut model = load_base(base_path)?;
    if !model.is_base_frozen() {
        model.freeze_base();
    }
    model.inject_lora(rank, 0)?;
    assign_from(&mut model, &file, &[ParamRole::Adapter, ParamRole::Head])?;
    if meta_str(&file, "frozen_checksum")? != model.frozen_checksum()? {
        return Err(Error::TensorFile(
            "frozen parameter checksum mismatch".into(),
        ));
    }
    Ok(model)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
