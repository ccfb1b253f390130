use std::path::Path;

use xmodal_tensor::Tensor;

use crate::error::{Error, Result};
use crate::xtns::{Container, XtnsData, XtnsEntry};

/// Directed relation `from -> to` labelled `relation`; `to` is counted as a
/// neighbor of `from`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub relation: usize,
}

/// Region or frame features of one input, with an optional relation graph.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub features: Tensor,
    pub edges: Vec<Edge>,
    pub global: Option<Tensor>,
}

impl VisualTokens {
    /// Validates and fills `global` with the column means.
    pub fn new(features: Tensor, edges: Vec<Edge>) -> Result<Self> {
        let [n, d] = *features.shape() else {
            return Err(Error::Format(format!(
                "visual features must be a matrix, got shape {:?}",
                features.shape()
            )));
        };
        if !features.is_finite() {
            return Err(Error::Format("visual features contain non-finite values".into()));
        }
        if let Some(e) = edges.iter().find(|e| e.from >= n || e.to >= n) {
            return Err(Error::Format(format!(
                "edge ({}, {}) has an endpoint outside {n} regions",
                e.from, e.to
            )));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Self {
            features,
            edges,
            global: Some(Tensor::vector(mean)),
        })
    }

    pub fn regions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push(XtnsEntry::f32(
            "features",
            self.features.shape(),
            self.features.data().iter().map(|&x| x as f32).collect(),
        ));
        if !self.edges.is_empty() {
            let flat = self
                .edges
                .iter()
                .flat_map(|e| [e.from as i64, e.to as i64, e.relation as i64])
                .collect();
            c.push(XtnsEntry::i64("edges", &[self.edges.len(), 3], flat));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let entry = c
            .get("features")
            .ok_or_else(|| Error::Format("missing `features` entry".into()))?;
        let XtnsData::F32(values) = &entry.data else {
            return Err(Error::Format("`features` must be f32".into()));
        };
        let shape = entry.shape();
        if shape.len() != 2 || shape.contains(&0) {
            return Err(Error::Format(format!("`features` must be a non-empty matrix, got {shape:?}")));
        }
        let data: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("`features` contains non-finite values".into()));
        }
        let features = Tensor::new(&shape, data)?;
        let mut edges = Vec::new();
        if let Some(e) = c.get("edges") {
            let XtnsData::I64(flat) = &e.data else {
                return Err(Error::Format("`edges` must be i64".into()));
            };
            if e.dims.len() != 2 || e.dims[1] != 3 {
                return Err(Error::Format(format!("`edges` must be [E x 3], got {:?}", e.dims)));
            }
            for t in flat.chunks(3) {
                let conv = |x: i64| {
                    usize::try_from(x).map_err(|_| Error::Format(format!("negative edge field {x}")))
                };
                edges.push(Edge {
                    from: conv(t[0])?,
                    to: conv(t[1])?,
                    relation: conv(t[2])?,
                });
            }
        }
        Self::new(features, edges)
    }
}

pub fn load_visual_features(path: &Path) -> Result<VisualTokens> {
    VisualTokens::from_container(&Container::read(path)?)
}

pub fn save_visual_features(path: &Path, v: &VisualTokens) -> Result<()> {
    v.to_container().write(path)
}
