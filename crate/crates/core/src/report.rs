//! PAGE report: one record per module, as JSON and as CSV for heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModuleId, ProjKind};
use crate::page::{select_dominant, PageMap};
use crate::probe::SensitivityMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub module: String,
    pub layer: usize,
    pub kind: ProjKind,
    pub s_emp: f64,
    pub d_in: usize,
    pub page: f64,
    pub share_of_total: f64,
    /// Share among modules of the same kind.
    pub share_of_kind: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageReport {
    pub n_samples: usize,
    pub rank: usize,
    pub scale: f64,
    pub restrict_kind: Option<ProjKind>,
    pub dominant: String,
    pub dominant_share_of_total: f64,
    pub dominant_share_of_kind: f64,
    pub modules: Vec<ModuleRecord>,
}

pub const CSV_HEADER: &str = "layer,kind,s_emp,d_in,page,share_of_total,share_of_kind";

impl PageReport {
    pub fn build(
        sens: &SensitivityMap,
        pm: &PageMap,
        d_in: &BTreeMap<ModuleId, usize>,
        restrict_kind: Option<ProjKind>,
    ) -> Result<Self> {
        let total = pm.total();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("PAGE total is zero".into()));
        }
        let mut kind_totals: BTreeMap<ProjKind, f64> = BTreeMap::new();
        for (id, v) in &pm.values {
            *kind_totals.entry(id.kind).or_default() += v;
        }
        let share_of_kind = |id: ModuleId, v: f64| {
            let t = kind_totals[&id.kind];
            if t > 0.0 {
                v / t
            } else {
                0.0
            }
        };
        let modules = pm
            .values
            .iter()
            .map(|(&id, &page)| {
                Ok(ModuleRecord {
                    module: id.to_string(),
                    layer: id.layer,
                    kind: id.kind,
                    s_emp: sens.get(id).ok_or_else(|| Error::MissingModule(id.to_string()))?,
                    d_in: *d_in.get(&id).ok_or_else(|| Error::MissingModule(id.to_string()))?,
                    page,
                    share_of_total: page / total,
                    share_of_kind: share_of_kind(id, page),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dominant = select_dominant(pm, restrict_kind)?;
        let v = pm.values[&dominant];
        Ok(Self {
            n_samples: sens.n_samples,
            rank: pm.rank,
            scale: pm.scale,
            restrict_kind,
            dominant: dominant.to_string(),
            dominant_share_of_total: v / total,
            dominant_share_of_kind: share_of_kind(dominant, v),
            modules,
        })
    }

    pub fn dominant(&self) -> Result<ModuleId> {
        self.dominant.parse()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for m in &self.modules {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.layer, m.kind, m.s_emp, m.d_in, m.page, m.share_of_total, m.share_of_kind
            );
        }
        out
    }
}
