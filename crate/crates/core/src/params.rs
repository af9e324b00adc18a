use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::Scalar;

/// Ownership class of a parameter tensor; decides trainability and EMA pairing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Head,
    CrossAttention,
    Probe,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::Adapter,
        ParamGroup::Head,
        ParamGroup::CrossAttention,
        ParamGroup::Probe,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Head => "head",
            ParamGroup::CrossAttention => "cross_attention",
            ParamGroup::Probe => "probe",
        }
    }
}

/// A named tensor. All weights are stored as 2-D matrices; vectors are `1×n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    /// Weight decay applies (weight matrices only; not biases, norms or tokens).
    pub decay: bool,
    pub value: Array2<S>,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, group: ParamGroup, decay: bool, value: Array2<S>) -> Self {
        Self {
            name: name.into(),
            group,
            decay,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns parameters.
pub trait Parameterized<S: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>));

    fn params(&self) -> Vec<&Param<S>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }

    fn count_in(&self, group: ParamGroup) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.group == group {
                n += p.len()
            }
        });
        n
    }
}

/// Set of parameter groups that receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Trainable(u8);

impl Trainable {
    pub fn none() -> Self {
        Trainable(0)
    }

    pub fn all() -> Self {
        ParamGroup::ALL.iter().fold(Trainable(0), |t, g| t.with(*g))
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        groups.iter().fold(Trainable(0), |t, g| t.with(*g))
    }

    pub fn with(self, group: ParamGroup) -> Self {
        Trainable(self.0 | group.bit())
    }

    pub fn without(self, group: ParamGroup) -> Self {
        Trainable(self.0 & !group.bit())
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

/// Disjoint split of parameter names into trainable and frozen sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Partition {
    pub trainable: BTreeMap<String, usize>,
    pub frozen: BTreeMap<String, usize>,
}

impl Partition {
    pub fn build<S: Scalar>(modules: &[&dyn Parameterized<S>], trainable: Trainable) -> Self {
        let mut part = Partition::default();
        for m in modules {
            m.visit(&mut |p| {
                let dst = if trainable.contains(p.group) {
                    &mut part.trainable
                } else {
                    &mut part.frozen
                };
                dst.insert(p.name.clone(), p.len());
            });
        }
        part
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.values().sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.values().sum()
    }
}
