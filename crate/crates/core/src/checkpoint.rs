//! Versioned JSON checkpoints for trained networks.
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {
//!   "format": "gem-checkpoint",
//!   "version": 1,
//!   "kind": "energy" | "regressor",
//!   "spec": {"n_max": .., "l_node": .., "l_edge": ..},
//!   "shape": {"l_node": .., "l_edge": .., "hidden": .., "layers": .., "time_input": ..},
//!   "calibration": {"v_threshold": .., "data_mean": .., "data_std": ..,
//!                   "noise_mean": .., "noise_std": ..},
//!   "property": null | {"name": .., "offset": .., "scale": ..},
//!   "step": ..,
//!   "tensors": [{"name": .., "rows": .., "cols": .., "data": [row-major]}]
//! }
//! ```
//!
//! Tensors appear in the order given by [`NetShape::layout`]. Readers reject
//! other formats, newer versions and any tensor whose name or shape disagrees
//! with the layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::energy::Calibration;
use crate::error::{GemError, Result};
use crate::graph::GraphSpec;
use crate::network::{InvariantNet, NetShape};

pub const FORMAT: &str = "gem-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Energy,
    Regressor,
}

/// Affine map from network output to property units: `y = offset + scale * out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyMeta {
    pub name: String,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    pub spec: GraphSpec,
    pub shape: NetShape,
    #[serde(default)]
    pub calibration: Calibration,
    #[serde(default)]
    pub property: Option<PropertyMeta>,
    #[serde(default)]
    pub step: usize,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(
        kind: ModelKind,
        spec: GraphSpec,
        net: &InvariantNet,
        calibration: Calibration,
        property: Option<PropertyMeta>,
        step: usize,
    ) -> Self {
        let tensors = net
            .shape()
            .layout()
            .into_iter()
            .zip(net.params())
            .map(|((name, (rows, cols)), p)| Tensor { name, rows, cols, data: p.iter().copied().collect() })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            version: VERSION,
            kind,
            spec,
            shape: *net.shape(),
            calibration,
            property,
            step,
            tensors,
        }
    }

    pub fn network(&self) -> Result<InvariantNet> {
        let layout = self.shape.layout();
        if layout.len() != self.tensors.len() {
            return Err(GemError::Config(format!(
                "checkpoint has {} tensors, layout needs {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, (r, c)), t) in layout.iter().zip(&self.tensors) {
            if &t.name != name || t.rows != *r || t.cols != *c || t.data.len() != r * c {
                return Err(GemError::Config(format!(
                    "tensor {} ({}x{}) does not match expected {name} ({r}x{c})",
                    t.name, t.rows, t.cols
                )));
            }
            let m = Array2::from_shape_vec((*r, *c), t.data.clone())
                .map_err(|e| GemError::Config(format!("tensor {name}: {e}")))?;
            params.push(m);
        }
        InvariantNet::from_params(self.shape, params)
    }
}

pub fn write(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, ck)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)
        .map_err(|e| GemError::Config(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
    if ck.format != FORMAT {
        return Err(GemError::Config(format!("{} is not a {FORMAT} file", path.display())));
    }
    if ck.version > VERSION {
        return Err(GemError::Config(format!(
            "checkpoint version {} is newer than supported version {VERSION}",
            ck.version
        )));
    }
    ck.spec.check()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_future_versions_and_bad_tensors() {
        let spec = GraphSpec::new(3, 2, 2).unwrap();
        let shape = NetShape { l_node: 2, l_edge: 2, hidden: 3, layers: 1, time_input: false };
        let net = InvariantNet::init(shape, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");

        let mut ck = Checkpoint::new(ModelKind::Energy, spec, &net, Calibration::default(), None, 0);
        ck.version = VERSION + 1;
        write(&path, &ck).unwrap();
        assert!(matches!(read(&path), Err(GemError::Config(_))));

        let mut ck = Checkpoint::new(ModelKind::Energy, spec, &net, Calibration::default(), None, 0);
        ck.tensors[3].data.pop();
        assert!(ck.network().is_err());

        std::fs::write(&path, "{\"format\": \"other\"}").unwrap();
        assert!(read(&path).is_err());
    }
}
