use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{ImageSet, Origin};
use crate::dci::{DciRun, InversionModel, StageLog};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, ParamStore};

fn expect_kind(ck: &Checkpoint, path: &Path, kinds: &[&str]) -> Result<()> {
    if kinds.contains(&ck.kind.as_str()) {
        Ok(())
    } else {
        Err(Error::Checkpoint {
            path: path.to_path_buf(),
            reason: format!("expected a {} checkpoint, found {}", kinds.join(" or "), ck.kind),
        })
    }
}

fn meta_field<T: for<'de> Deserialize<'de>>(ck: &Checkpoint, path: &Path, key: &str) -> Result<T> {
    let v = ck.meta.get(key).cloned().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("metadata lacks {key}"),
    })?;
    serde_json::from_value(v).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("metadata {key}: {e}"),
    })
}

/// A trained network with its architecture and training report.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedNetwork {
    pub kind: String,
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub report: serde_json::Value,
    pub run_id: String,
}

pub fn network_checkpoint(net: &SavedNetwork) -> Checkpoint {
    let mut ck = Checkpoint::new(
        net.kind.clone(),
        json!({ "spec": net.spec, "report": net.report, "run_id": net.run_id }),
    );
    ck.tensors = net.params.to_named();
    ck
}

pub fn save_network(net: &SavedNetwork, path: &Path) -> Result<()> {
    save_checkpoint(&network_checkpoint(net), path)
}

/// Loads a network checkpoint of one of `kinds`.
pub fn load_network(path: &Path, kinds: &[&str]) -> Result<SavedNetwork> {
    let ck = load_checkpoint(path)?;
    expect_kind(&ck, path, kinds)?;
    let spec: NetworkSpec = meta_field(&ck, path, "spec")?;
    let params = ParamStore::from_named(ck.tensors.clone())?;
    params.check(&spec)?;
    Ok(SavedNetwork {
        kind: ck.kind.clone(),
        spec,
        params,
        report: ck.meta.get("report").cloned().unwrap_or(serde_json::Value::Null),
        run_id: meta_field(&ck, path, "run_id")?,
    })
}

/// Training images and an optional validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedDataset {
    pub train: ImageSet,
    pub val: Option<ImageSet>,
    pub run_id: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    origin: Origin,
    train_labels: Vec<usize>,
    val_labels: Option<Vec<usize>>,
    run_id: String,
}

pub fn save_dataset(ds: &SavedDataset, path: &Path) -> Result<()> {
    let meta = DatasetMeta {
        origin: ds.train.origin,
        train_labels: ds.train.labels.clone(),
        val_labels: ds.val.as_ref().map(|v| v.labels.clone()),
        run_id: ds.run_id.clone(),
    };
    let mut ck = Checkpoint::new("dataset", serde_json::to_value(meta)?);
    ck.tensors.insert("train.images".into(), ds.train.images.clone());
    if let Some(v) = &ds.val {
        ck.tensors.insert("val.images".into(), v.images.clone());
    }
    save_checkpoint(&ck, path)
}

pub fn load_dataset(path: &Path) -> Result<SavedDataset> {
    let ck = load_checkpoint(path)?;
    expect_kind(&ck, path, &["dataset"])?;
    let meta: DatasetMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("dataset metadata: {e}"),
    })?;
    let train = ImageSet::new(ck.tensor("train.images")?.clone(), meta.train_labels, meta.origin)?;
    let val = match (ck.tensors.get("val.images"), meta.val_labels) {
        (Some(t), Some(l)) => Some(ImageSet::new(t.clone(), l, meta.origin)?),
        (None, None) => None,
        _ => {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: "validation images and labels must come together".into(),
            })
        }
    };
    Ok(SavedDataset {
        train,
        val,
        run_id: meta.run_id,
    })
}

#[derive(Serialize, Deserialize)]
struct InversionMeta {
    target: NetworkSpec,
    spec: NetworkSpec,
    trained_up_to: usize,
    stages: Vec<StageLog>,
    origins_read: BTreeSet<Origin>,
    run_id: String,
}

pub fn save_inversion(run: &DciRun, run_id: &str, path: &Path) -> Result<()> {
    let meta = InversionMeta {
        target: run.model.target.clone(),
        spec: run.model.spec.clone(),
        trained_up_to: run.model.trained_up_to,
        stages: run.stages.clone(),
        origins_read: run.origins_read.clone(),
        run_id: run_id.into(),
    };
    let mut ck = Checkpoint::new("inversion", serde_json::to_value(meta)?);
    ck.tensors = run.model.params.to_named();
    save_checkpoint(&ck, path)
}

/// The run and the id of the command that wrote it.
pub fn load_inversion(path: &Path) -> Result<(DciRun, String)> {
    let ck = load_checkpoint(path)?;
    expect_kind(&ck, path, &["inversion"])?;
    let meta: InversionMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("inversion metadata: {e}"),
    })?;
    let params = ParamStore::from_named(ck.tensors)?;
    params.check(&meta.spec)?;
    let model = InversionModel {
        target: meta.target,
        spec: meta.spec,
        params,
        trained_up_to: meta.trained_up_to,
    };
    Ok((
        DciRun {
            model,
            stages: meta.stages,
            origins_read: meta.origins_read,
        },
        meta.run_id,
    ))
}
