use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier convention recorded in every report.
pub const SCALE_NOTE: &str = "cd and emd are raw per-point means on clouds normalized to [-1,1]^3 \
(cd: squared distances, emd: unsquared); tables report cd x 1e4 and emd x 1e2";

pub const CD_TABLE_SCALE: f64 = 1e4;
pub const EMD_TABLE_SCALE: f64 = 1e2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectMetrics {
    pub cd: f64,
    pub emd: f64,
}

/// Average and per-object CD/EMD, plus the resampling oracle row when
/// available.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub cd: f64,
    pub emd: f64,
    pub per_object: BTreeMap<String, ObjectMetrics>,
    pub scale_note: String,
    /// Resampling baseline; `null` when no pair carries its generating
    /// shape (e.g. ingested data).
    #[serde(default)]
    pub oracle: Option<ObjectMetrics>,
}

impl MetricReport {
    /// Averages per-item results, both overall and grouped by object name.
    pub fn from_items<'a>(items: impl IntoIterator<Item = (&'a str, ObjectMetrics)>) -> Self {
        let mut sums: BTreeMap<String, (ObjectMetrics, usize)> = BTreeMap::new();
        let mut total = ObjectMetrics::default();
        let mut count = 0usize;
        for (name, m) in items {
            let entry = sums.entry(name.to_string()).or_default();
            entry.0.cd += m.cd;
            entry.0.emd += m.emd;
            entry.1 += 1;
            total.cd += m.cd;
            total.emd += m.emd;
            count += 1;
        }
        let per_object = sums
            .into_iter()
            .map(|(k, (s, n))| {
                (
                    k,
                    ObjectMetrics {
                        cd: s.cd / n as f64,
                        emd: s.emd / n as f64,
                    },
                )
            })
            .collect();
        let n = count.max(1) as f64;
        MetricReport {
            cd: total.cd / n,
            emd: total.emd / n,
            per_object,
            scale_note: SCALE_NOTE.to_string(),
            oracle: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("report JSON: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Table rows `(row, cd×1e4, emd×1e2)`: one per object, then `average`,
    /// then `oracle` when present.
    pub fn table_rows(&self) -> Vec<(String, f64, f64)> {
        let mut rows: Vec<(String, f64, f64)> = self
            .per_object
            .iter()
            .map(|(k, m)| (k.clone(), m.cd * CD_TABLE_SCALE, m.emd * EMD_TABLE_SCALE))
            .collect();
        rows.push((
            "average".into(),
            self.cd * CD_TABLE_SCALE,
            self.emd * EMD_TABLE_SCALE,
        ));
        if let Some(o) = &self.oracle {
            rows.push(("oracle".into(), o.cd * CD_TABLE_SCALE, o.emd * EMD_TABLE_SCALE));
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_has_fixed_keys_and_round_trips() {
        let mut r = MetricReport::from_items([
            ("mug", ObjectMetrics { cd: 1.0, emd: 2.0 }),
            ("mug", ObjectMetrics { cd: 3.0, emd: 4.0 }),
            ("box", ObjectMetrics { cd: 5.0, emd: 6.0 }),
        ]);
        r.oracle = Some(ObjectMetrics { cd: 0.1, emd: 0.2 });
        assert_eq!(r.per_object["mug"], ObjectMetrics { cd: 2.0, emd: 3.0 });
        assert_eq!(r.cd, 3.0);
        let value: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let mut keys: Vec<&str> = value.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["cd", "emd", "oracle", "per_object", "scale_note"]);
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.table_rows().last().unwrap().0, "oracle");
    }
}
