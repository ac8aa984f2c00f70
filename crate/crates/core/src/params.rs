//! Named parameter storage with freeze groups.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Parameter groups drive the per-stage freeze policies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ParamGroup {
    /// Affine map from raster cells to IMG tokens (the frozen "vision encoder").
    RasterEmbed,
    /// Token table, also used as the tied LM output map.
    TextEmbed,
    FinalNorm,
    /// Backbone attention of the mixed layers.
    BackboneAttn,
    /// Attention and FFN of the deep layers.
    DeepBase,
    /// Text FFN of the mixed layers.
    TextFfn,
    Lora,
    GroupAttn,
    DetQuery,
    LaneQuery,
    DetFfn,
    LaneFfn,
    PlanFfn,
    DetHead,
    LaneHead,
    PlanHead,
    PlanQuery,
    EgoEmbed,
    /// Learned e3d projection (only present in the learned-map mode).
    E3dMap,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 19] = [
        ParamGroup::RasterEmbed,
        ParamGroup::TextEmbed,
        ParamGroup::FinalNorm,
        ParamGroup::BackboneAttn,
        ParamGroup::DeepBase,
        ParamGroup::TextFfn,
        ParamGroup::Lora,
        ParamGroup::GroupAttn,
        ParamGroup::DetQuery,
        ParamGroup::LaneQuery,
        ParamGroup::DetFfn,
        ParamGroup::LaneFfn,
        ParamGroup::PlanFfn,
        ParamGroup::DetHead,
        ParamGroup::LaneHead,
        ParamGroup::PlanHead,
        ParamGroup::PlanQuery,
        ParamGroup::EgoEmbed,
        ParamGroup::E3dMap,
    ];

    /// Groups used only by the perception tasks; these stay fixed during planning adaptation.
    pub const PERCEPTION_EXCLUSIVE: [ParamGroup; 7] = [
        ParamGroup::GroupAttn,
        ParamGroup::DetQuery,
        ParamGroup::LaneQuery,
        ParamGroup::DetFfn,
        ParamGroup::LaneFfn,
        ParamGroup::DetHead,
        ParamGroup::LaneHead,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: every parameter must be present exactly once.
    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.to_string(), id);
        self.params.push(Param { name: name.to_string(), group, value });
        ParamId(id)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.params.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    /// Mask over ids: `true` where the parameter's group is in `groups`.
    pub fn mask_for(&self, groups: &[ParamGroup]) -> Vec<bool> {
        self.params.iter().map(|p| groups.contains(&p.group)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Concatenated little-endian bytes of every parameter in `groups`, in id order.
    pub fn group_bytes(&self, groups: &[ParamGroup]) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.value.to_le_bytes());
        }
        out
    }
}

/// Per-parameter gradient accumulators, `None` where no gradient reached the parameter.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n: usize) -> Self {
        Self { slots: (0..n).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub(crate) fn accumulate_owned(&mut self, id: ParamId, g: Tensor) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Grads) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate_owned(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .slots
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        libm::sqrt(sq)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}
