//! Op-count tracing for structural checks of the network.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Conv2d,
    Conv3d,
    Shuffle,
    Add,
    Concat,
    MaxPool,
    Upsample,
    Relu,
    Sigmoid,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Shuffle => "shuffle",
            OpKind::Add => "add",
            OpKind::Concat => "concat",
            OpKind::MaxPool => "maxpool",
            OpKind::Upsample => "upsample",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
        };
        f.write_str(s)
    }
}

/// Counts of ops per `(scope, kind)`. Scopes are dotted, e.g. `decoder.s3.tm`.
pub type OpCounts = BTreeMap<(String, OpKind), usize>;

/// Collects op counts when enabled; a disabled tracer records nothing.
#[derive(Debug, Default)]
pub struct Tracer {
    counts: Option<Mutex<OpCounts>>,
}

impl Tracer {
    pub fn enabled() -> Self {
        Self {
            counts: Some(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn disabled() -> Self {
        Self { counts: None }
    }

    pub fn record(&self, scope: &str, op: OpKind) {
        self.record_n(scope, op, 1);
    }

    pub fn record_n(&self, scope: &str, op: OpKind, n: usize) {
        if let Some(m) = &self.counts {
            *m.lock()
                .expect("tracer lock")
                .entry((scope.to_string(), op))
                .or_default() += n;
        }
    }

    pub fn counts(&self) -> OpCounts {
        self.counts
            .as_ref()
            .map(|m| m.lock().expect("tracer lock").clone())
            .unwrap_or_default()
    }

    /// Total count of `op` over scopes starting with `prefix`.
    pub fn total(&self, prefix: &str, op: OpKind) -> usize {
        self.counts()
            .iter()
            .filter(|((s, k), _)| *k == op && s.starts_with(prefix))
            .map(|(_, n)| n)
            .sum()
    }
}
