//! Placement specs as written in configs.
//!
//! ```text
//! all | dominant-only | full-dominant
//! layers:0+2            every projection of layers 0 and 2
//! kinds:down+up         those kinds in every layer
//! <kinds>@<site>        kinds from q,k,v,o,up,gate,down,ffn,attn joined by '+';
//!                       site is dom, first, mid, last or a layer index
//! ```

use std::fmt;

use page_core::lora::PlacementMode;
use page_core::model::{ModelConfig, ModuleId, ProjKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    Dominant,
    First,
    Mid,
    Last,
    Layer(usize),
}

impl Site {
    fn layer(self, n_layers: usize, dominant: Option<ModuleId>) -> Result<usize, String> {
        Ok(match self {
            Site::Dominant => dominant.ok_or("this plan needs a dominant module")?.layer,
            Site::First => 0,
            Site::Mid => n_layers / 2,
            Site::Last => n_layers - 1,
            Site::Layer(l) if l < n_layers => l,
            Site::Layer(l) => return Err(format!("layer {l} does not exist in a {n_layers}-layer model")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanSpec {
    All,
    DominantOnly,
    FullDominant,
    Layers(Vec<usize>),
    Kinds(Vec<ProjKind>),
    At { kinds: Vec<ProjKind>, site: Site },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanError(pub String);

impl fmt::Display for PlanError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PlanError {}

fn parse_kinds(s: &str) -> Result<Vec<ProjKind>, String> {
    let mut out = Vec::new();
    for part in s.split('+') {
        match part {
            "ffn" => out.extend(ProjKind::FFN),
            "attn" => out.extend(ProjKind::ATTENTION),
            other => out.push(other.parse().map_err(|_| format!("unknown projection kind {other:?}"))?),
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

impl PlanSpec {
    pub fn parse(spec: &str) -> Result<Self, PlanError> {
        let err = |msg: String| PlanError(format!("plan {spec:?}: {msg}"));
        let spec_t = spec.trim();
        match spec_t {
            "all" => return Ok(PlanSpec::All),
            "dominant-only" => return Ok(PlanSpec::DominantOnly),
            "full-dominant" => return Ok(PlanSpec::FullDominant),
            "" => return Err(err("empty plan".into())),
            _ => {}
        }
        if let Some(rest) = spec_t.strip_prefix("layers:") {
            let layers = rest
                .split('+')
                .map(|l| l.parse::<usize>().map_err(|_| err(format!("bad layer index {l:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            return Ok(PlanSpec::Layers(layers));
        }
        if let Some(rest) = spec_t.strip_prefix("kinds:") {
            return parse_kinds(rest).map(PlanSpec::Kinds).map_err(err);
        }
        let Some((kinds, site)) = spec_t.split_once('@') else {
            return Err(err("expected all, dominant-only, full-dominant, layers:.., kinds:.. or <kinds>@<site>".into()));
        };
        let kinds = parse_kinds(kinds).map_err(err)?;
        let site = match site {
            "dom" => Site::Dominant,
            "first" => Site::First,
            "mid" => Site::Mid,
            "last" => Site::Last,
            n => Site::Layer(n.parse().map_err(|_| err(format!("unknown site {n:?}")))?),
        };
        Ok(PlanSpec::At { kinds, site })
    }

    /// Whether resolving this plan needs a probe pass first.
    pub fn needs_dominant(&self) -> bool {
        matches!(
            self,
            PlanSpec::DominantOnly | PlanSpec::FullDominant | PlanSpec::At { site: Site::Dominant, .. }
        )
    }

    pub fn resolve(&self, config: &ModelConfig, dominant: Option<ModuleId>) -> Result<PlacementMode, PlanError> {
        let need = || dominant.ok_or_else(|| PlanError("this plan needs a dominant module".into()));
        Ok(match self {
            PlanSpec::All => PlacementMode::All,
            PlanSpec::DominantOnly => PlacementMode::DominantOnly(need()?),
            PlanSpec::FullDominant => PlacementMode::FullWeightDominant(need()?),
            PlanSpec::Layers(ls) => PlacementMode::LayerSubset(ls.clone()),
            PlanSpec::Kinds(ks) => PlacementMode::KindSubset(ks.clone()),
            PlanSpec::At { kinds, site } => {
                let layer = site.layer(config.n_layers, dominant).map_err(PlanError)?;
                PlacementMode::Modules(kinds.iter().map(|&k| ModuleId::new(layer, k)).collect())
            }
        })
    }
}
