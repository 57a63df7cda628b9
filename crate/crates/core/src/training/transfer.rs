use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ATTENTION;
use crate::io::Checkpoint;
use crate::sfcn::{DECODER, ENCODER};
use crate::tensor::ParamStore;

/// Transferable parameter groups shared by teacher and student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Encoder,
    Decoder,
    Attention,
}

impl Scope {
    pub fn prefix(self) -> &'static str {
        match self {
            Self::Encoder => ENCODER,
            Self::Decoder => DECODER,
            Self::Attention => ATTENTION,
        }
    }

    /// Encoder and decoder, the groups every transfer copies.
    pub fn default_set() -> Vec<Scope> {
        vec![Self::Encoder, Self::Decoder]
    }

    /// Parses `enc`, `dec`, `att` (or the long names) joined by `+` or `,`.
    pub fn parse_list(s: &str) -> Result<Vec<Scope>> {
        let mut out = Vec::new();
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            let scope = match part {
                "enc" | "encoder" => Self::Encoder,
                "dec" | "decoder" => Self::Decoder,
                "att" | "attention" => Self::Attention,
                other => return Err(Error::InvalidArgument(format!("unknown scope `{other}`"))),
            };
            if !out.contains(&scope) {
                out.push(scope);
            }
        }
        if out.is_empty() {
            return Err(Error::InvalidArgument("empty scope list".into()));
        }
        Ok(out)
    }
}

fn under(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix).is_some_and(|rest| rest.is_empty() || rest.starts_with('.'))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    /// Checkpoint tensors outside the scope or unknown to the student.
    pub skipped: Vec<String>,
}

/// Encoder and decoder, plus attention when every student attention tensor
/// has a same-shaped counterpart in `ck`. Otherwise attention keeps its
/// random initialization.
pub fn default_scope(ck: &Checkpoint, student: &ParamStore<f32>) -> Vec<Scope> {
    let mut scope = Scope::default_set();
    let mut attention = student.iter().filter(|(n, _)| under(n, ATTENTION)).peekable();
    let compatible = attention.peek().is_some()
        && attention.all(|(n, p)| ck.tensors.get(n).is_some_and(|t| t.shape() == p.tensor.shape()));
    if compatible {
        scope.push(Scope::Attention);
    }
    scope
}

/// Copies every scoped student tensor from `ck`, bit for bit. Nothing is
/// modified unless all scoped tensors are present with matching shapes.
pub fn transfer_weights(ck: &Checkpoint, student: &ParamStore<f32>, scope: &[Scope]) -> Result<(ParamStore<f32>, TransferReport)> {
    let in_scope = |n: &str| scope.iter().any(|s| under(n, s.prefix()));
    let mut out = student.clone();
    let mut report = TransferReport::default();
    for (name, p) in out.iter_mut() {
        if !in_scope(name) {
            continue;
        }
        let t = ck.tensors.get(name).ok_or_else(|| Error::Transfer {
            tensor: name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Transfer {
                tensor: name.clone(),
                reason: format!("checkpoint shape {:?}, student shape {:?}", t.shape(), p.tensor.shape()),
            });
        }
        p.tensor = t.clone();
        report.copied.push(name.clone());
    }
    report.skipped = ck
        .tensors
        .keys()
        .filter(|n| !(in_scope(n) && student.get(n).is_some()))
        .cloned()
        .collect();
    Ok((out, report))
}

/// Parameter-name prefixes excluded from optimization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub prefixes: Vec<String>,
}

/// Names of the four freeze configurations of the transfer ablation.
pub const FREEZE_PRESETS: [&str; 4] = ["enc", "enc+att", "enc+att+dec", "enc+dec"];

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn from_scopes(scopes: &[Scope]) -> Self {
        Self {
            prefixes: scopes.iter().map(|s| s.prefix().to_string()).collect(),
        }
    }

    /// One of [`FREEZE_PRESETS`], or `none`.
    pub fn preset(name: &str) -> Result<Self> {
        if name == "none" {
            return Ok(Self::none());
        }
        if !FREEZE_PRESETS.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "unknown freeze set `{name}` (expected one of {FREEZE_PRESETS:?} or none)"
            )));
        }
        Ok(Self::from_scopes(&Scope::parse_list(name)?))
    }

    /// Best configuration of the ablation: encoder and decoder frozen.
    pub fn default_set() -> Self {
        Self::from_scopes(&[Scope::Encoder, Scope::Decoder])
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| under(name, p))
    }

    /// Marks matching parameters frozen and all others trainable.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in &self.prefixes {
            if !store.names().any(|n| under(n, p)) {
                return Err(Error::InvalidArgument(format!("freeze prefix `{p}` matches no parameter")));
            }
        }
        for (name, p) in store.iter_mut() {
            p.trainable = !self.is_frozen(name);
        }
        Ok(())
    }
}
