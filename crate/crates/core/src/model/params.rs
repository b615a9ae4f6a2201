use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Fill, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not learnable parameters.
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn code(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::ConvBias => 1,
            ParamKind::BnScale => 2,
            ParamKind::BnShift => 3,
            ParamKind::RunningMean => 4,
            ParamKind::RunningVar => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::ConvBias,
            2 => ParamKind::BnScale,
            3 => ParamKind::BnShift,
            4 => ParamKind::RunningMean,
            5 => ParamKind::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Kaiming(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

/// Ordered list of every array the network owns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub(crate) fn register(&mut self, path: String, kind: ParamKind, shape: &[usize], init: Init) -> usize {
        debug_assert!(self.specs.iter().all(|s| s.path != path), "duplicate path {path}");
        self.specs.push(ParamSpec {
            path,
            kind,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn learnable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.kind.learnable())
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub path: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ModelParams {
    pub fn initialize<R: Rng + ?Sized>(layout: &ParamLayout, rng: &mut R) -> Result<Self> {
        let entries = layout
            .specs()
            .iter()
            .map(|s| {
                let fill = match s.init {
                    Init::Kaiming(fan_in) => Fill::Kaiming { fan_in },
                    Init::Zeros => Fill::Zeros,
                    Init::Ones => Fill::Constant(1.0),
                };
                Ok(ParamEntry {
                    path: s.path.clone(),
                    kind: s.kind,
                    tensor: Tensor::new(&s.shape, fill, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.path.clone(), i).is_some() {
                return Err(Error::LayoutMismatch(format!("duplicate path {}", e.path)));
            }
        }
        Ok(Self { entries, index })
    }

    /// Checks that paths, kinds and shapes agree with `layout`, in order.
    pub fn validate(&self, layout: &ParamLayout) -> Result<()> {
        if self.entries.len() != layout.specs().len() {
            return Err(Error::LayoutMismatch(format!(
                "expected {} arrays, found {}",
                layout.specs().len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter().zip(layout.specs()) {
            if e.path != s.path || e.kind != s.kind || e.tensor.shape() != s.shape.as_slice() {
                return Err(Error::LayoutMismatch(format!(
                    "{} {:?} {:?} does not match {} {:?} {:?}",
                    e.path,
                    e.kind,
                    e.tensor.shape(),
                    s.path,
                    s.kind,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].tensor
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.index.get(path).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.index.get(path).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn position(&self, path: &str) -> Option<usize> {
        self.index.get(path).copied()
    }

    pub fn learnable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.learnable())
            .map(|e| e.tensor.len())
            .sum()
    }
}
