//! Canonical record model, JSONL persistence, calibration/test splitting and
//! the fitted-model bundle.
//!
//! One record per line:
//!
//! ```json
//! {"id": "MOT17-11:3:120", "sequence": "MOT17-11", "frame": 120, "model_id": "nano",
//!  "bbox": [10.0, 20.0, 30.0, 60.0], "feature": [0.1, 0.2],
//!  "layer_features": [[0.1], [0.2]], "iou": 0.8, "confidence": 0.7}
//! ```
//!
//! `layer_features`, `iou` and `confidence` are optional. Record ids follow the
//! `<sequence>:<track>:<frame>` convention when splitting by track identity.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aleatoric::DensityModel;
use crate::conformal::CalibrationModel;
use crate::epistemic::EpistemicBundle;
use crate::error::{Error, Result};

/// Axis-aligned box in pixels, `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub sequence: String,
    pub frame: u64,
    pub model_id: String,
    pub bbox: BBox,
    pub feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl FeatureRecord {
    /// Detection-quality label `1 - iou`; larger is worse.
    pub fn conformity(&self) -> Option<f64> {
        self.iou.map(|iou| 1.0 - iou)
    }

    /// Predicted conformity derived from the detector confidence, `1 - confidence`.
    pub fn predicted_conformity(&self) -> Option<f64> {
        self.confidence.map(|c| 1.0 - c)
    }

    /// Track key `<sequence>:<track>` parsed from the id.
    pub fn track_key(&self) -> Option<&str> {
        let (key, _frame) = self.id.rsplit_once(':')?;
        if key.contains(':') {
            Some(key)
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Store(format!("record `{}`: {msg}", self.id)));
        if !(self.bbox.w > 0.0 && self.bbox.h > 0.0) {
            return bad(format!("bbox must have w > 0 and h > 0, got {:?}", self.bbox));
        }
        if self.feature.is_empty() {
            return bad("empty feature vector".into());
        }
        if self.feature.iter().any(|x| !x.is_finite()) {
            return bad("non-finite feature value".into());
        }
        if let Some(iou) = self.iou {
            if !(0.0..=1.0).contains(&iou) {
                return bad(format!("iou {iou} outside [0, 1]"));
            }
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return bad(format!("confidence {c} outside [0, 1]"));
            }
        }
        if let Some(layers) = &self.layer_features {
            if layers.len() < 2 {
                return bad(format!("layer_features needs at least 2 layers, got {}", layers.len()));
            }
            if layers.iter().flatten().any(|x| !x.is_finite()) {
                return bad("non-finite layer feature value".into());
            }
        }
        Ok(())
    }
}

/// An immutable, validated collection of records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    records: Vec<FeatureRecord>,
    dimension: usize,
    layer_dims: Option<Vec<usize>>,
}

impl FeatureStore {
    pub fn from_records(records: Vec<FeatureRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Store("store is empty".into()))?;
        let dimension = first.feature.len();
        let mut layer_dims: Option<Vec<usize>> = None;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Store(format!("duplicate record id `{}`", r.id)));
            }
            if r.feature.len() != dimension {
                return Err(Error::DimensionMismatch {
                    id: r.id.clone(),
                    expected: dimension,
                    found: r.feature.len(),
                });
            }
            if let Some(layers) = &r.layer_features {
                let dims: Vec<usize> = layers.iter().map(Vec::len).collect();
                match &layer_dims {
                    None => layer_dims = Some(dims),
                    Some(expected) if *expected != dims => {
                        return Err(Error::Store(format!(
                            "record `{}`: layer dimensions {dims:?} differ from {expected:?}",
                            r.id
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(FeatureStore {
            records,
            dimension,
            layer_dims,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FeatureRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::Store(format!("{}: no records", path.display())));
        }
        Self::from_records(records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of layers, inferred from the first record carrying layer features.
    pub fn layer_count(&self) -> Option<usize> {
        self.layer_dims.as_ref().map(Vec::len)
    }

    /// True when every record carries layer features.
    pub fn has_layer_features(&self) -> bool {
        self.records.iter().all(|r| r.layer_features.is_some())
    }

    /// The feature vectors in record order; for a calibration store this is the cache
    /// the density and neighbour models are fitted on.
    pub fn features(&self) -> impl Iterator<Item = &[f64]> {
        self.records.iter().map(|r| r.feature.as_slice())
    }

    /// Records whose id is in `ids`, in store order.
    pub fn subset(&self, ids: &HashSet<&str>) -> Result<Self> {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| ids.contains(r.id.as_str()))
            .cloned()
            .collect();
        Self::from_records(records)
    }

    /// Records of one sequence, in store order.
    pub fn sequence(&self, name: &str) -> Result<Self> {
        let records: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.sequence == name)
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::Store(format!("no records for sequence `{name}`")));
        }
        Self::from_records(records)
    }

    pub fn split(&self, spec: &SplitSpec) -> Result<(FeatureStore, FeatureStore)> {
        if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
            return Err(Error::Store(format!(
                "split fraction {} outside (0, 1)",
                spec.fraction
            )));
        }
        let n = self.records.len();
        if n < 2 {
            return Err(Error::Store(format!(
                "cannot populate both partitions from {n} record(s)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let target = ((n as f64) * spec.fraction).ceil() as usize;
        let mut in_cal = vec![false; n];
        match spec.mode {
            SplitMode::ByFraction => {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for &i in order.iter().take(target) {
                    in_cal[i] = true;
                }
            }
            SplitMode::ByTrackIdentity => {
                let mut tracks: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
                for (i, r) in self.records.iter().enumerate() {
                    let key = r.track_key().ok_or_else(|| {
                        Error::Store(format!(
                            "record id `{}` does not follow <sequence>:<track>:<frame>",
                            r.id
                        ))
                    })?;
                    tracks.entry(key).or_default().push(i);
                }
                let mut groups: Vec<Vec<usize>> = tracks.into_values().collect();
                groups.shuffle(&mut rng);
                let mut taken = 0;
                for group in &groups {
                    if taken >= target {
                        break;
                    }
                    taken += group.len();
                    for &i in group {
                        in_cal[i] = true;
                    }
                }
            }
        }
        let (cal, test): (Vec<_>, Vec<_>) = self
            .records
            .iter()
            .cloned()
            .zip(in_cal)
            .partition(|(_, c)| *c);
        if cal.is_empty() || test.is_empty() {
            return Err(Error::Store(
                "split leaves one partition empty (too few records or tracks)".into(),
            ));
        }
        Ok((
            Self::from_records(cal.into_iter().map(|(r, _)| r).collect())?,
            Self::from_records(test.into_iter().map(|(r, _)| r).collect())?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ByTrackIdentity,
    ByFraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::ByTrackIdentity,
            fraction: 0.5,
            seed: 0,
        }
    }
}

pub const BUNDLE_VERSION: u32 = 1;

/// Everything `calibrate` fits, persisted as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub density: DensityModel,
    pub epistemic: EpistemicBundle,
    pub calibration: CalibrationModel,
}

impl ModelBundle {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Bundle(format!("malformed or truncated bundle: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Bundle("bundle is not a JSON object".into()))?;
        let version = obj
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Bundle("missing section `version`".into()))?;
        if version != u64::from(BUNDLE_VERSION) {
            return Err(Error::Bundle(format!(
                "version mismatch: file has {version}, expected {BUNDLE_VERSION}"
            )));
        }
        fn section<T: serde::de::DeserializeOwned>(
            obj: &serde_json::Map<String, serde_json::Value>,
            key: &str,
        ) -> Result<T> {
            let v = obj
                .get(key)
                .ok_or_else(|| Error::Bundle(format!("missing section `{key}`")))?;
            T::deserialize(v).map_err(|e| Error::Bundle(format!("section `{key}`: {e}")))
        }
        Ok(ModelBundle {
            version: BUNDLE_VERSION,
            density: section(obj, "density")?,
            epistemic: section(obj, "epistemic")?,
            calibration: section(obj, "calibration")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(id: &str, feature: Vec<f64>) -> FeatureRecord {
        FeatureRecord {
            id: id.to_string(),
            sequence: "seq".into(),
            frame: 0,
            model_id: "nano".into(),
            bbox: BBox {
                x: 0.0,
                y: 0.0,
                w: 10.0,
                h: 20.0,
            },
            feature,
            layer_features: None,
            iou: Some(0.5),
            confidence: None,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_three_records() {
        let lines: Vec<String> = (0..3)
            .map(|i| serde_json::to_string(&record(&format!("s:{i}:0"), vec![1.0; 4])).unwrap())
            .collect();
        let f = write_lines(&lines);
        let store = FeatureStore::load(f.path()).unwrap();
        assert_eq!(store.len(), 3);
        assert_eq!(store.dimension(), 4);
        assert_eq!(store.layer_count(), None);
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let lines = vec![
            serde_json::to_string(&record("a", vec![1.0; 4])).unwrap(),
            serde_json::to_string(&record("bad-one", vec![1.0; 3])).unwrap(),
        ];
        let f = write_lines(&lines);
        match FeatureStore::load(f.path()) {
            Err(Error::DimensionMismatch { id, expected, found }) => {
                assert_eq!(id, "bad-one");
                assert_eq!((expected, found), (4, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let lines = vec![
            serde_json::to_string(&record("a", vec![1.0])).unwrap(),
            "{not json".to_string(),
        ];
        let f = write_lines(&lines);
        match FeatureStore::load(f.path()) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_lines(&[]);
        assert!(matches!(FeatureStore::load(f.path()), Err(Error::Store(_))));
    }

    #[test]
    fn loads_a_sequence_sized_dump() {
        let lines: Vec<String> = (0..2878)
            .map(|i| {
                serde_json::to_string(&record(&format!("MOT17-11:{}:{}", i / 20, i % 20), vec![0.5; 8]))
                    .unwrap()
            })
            .collect();
        let f = write_lines(&lines);
        assert_eq!(FeatureStore::load(f.path()).unwrap().len(), 2878);
    }

    #[test]
    fn layer_count_inferred_and_checked() {
        let mut a = record("a", vec![1.0]);
        a.layer_features = Some(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let mut b = record("b", vec![1.0]);
        b.layer_features = Some(vec![vec![1.0, 2.0], vec![3.0]]);
        let store = FeatureStore::from_records(vec![a.clone()]).unwrap();
        assert_eq!(store.layer_count(), Some(3));
        assert!(FeatureStore::from_records(vec![a, b]).is_err());
    }

    #[test]
    fn rejects_out_of_range_iou() {
        let mut a = record("a", vec![1.0]);
        a.iou = Some(1.5);
        assert!(FeatureStore::from_records(vec![a]).is_err());
    }

    fn store_of(n: usize, per_track: usize) -> FeatureStore {
        FeatureStore::from_records(
            (0..n)
                .map(|i| record(&format!("seq:{}:{}", i / per_track, i % per_track), vec![i as f64]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn fraction_split_is_repeatable() {
        let store = store_of(10, 1);
        let spec = SplitSpec {
            mode: SplitMode::ByFraction,
            fraction: 0.5,
            seed: 7,
        };
        let (cal, test) = store.split(&spec).unwrap();
        assert_eq!((cal.len(), test.len()), (5, 5));
        let (cal2, test2) = store.split(&spec).unwrap();
        assert_eq!(cal, cal2);
        assert_eq!(test, test2);
    }

    #[test]
    fn single_record_cannot_split() {
        let store = store_of(1, 1);
        let spec = SplitSpec {
            mode: SplitMode::ByFraction,
            fraction: 0.5,
            seed: 0,
        };
        assert!(store.split(&spec).is_err());
    }

    #[test]
    fn invalid_fraction() {
        let store = store_of(10, 1);
        for fraction in [0.0, 1.0, -0.2, 1.3] {
            let spec = SplitSpec {
                mode: SplitMode::ByFraction,
                fraction,
                seed: 0,
            };
            assert!(store.split(&spec).is_err());
        }
    }

    #[test]
    fn track_split_keeps_tracks_whole() {
        let store = store_of(100, 10);
        let spec = SplitSpec {
            mode: SplitMode::ByTrackIdentity,
            fraction: 0.5,
            seed: 3,
        };
        let (cal, test) = store.split(&spec).unwrap();
        let tracks = |s: &FeatureStore| -> HashSet<String> {
            s.records()
                .iter()
                .map(|r| r.track_key().unwrap().to_string())
                .collect()
        };
        let (a, b) = (tracks(&cal), tracks(&test));
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 10);
        assert_eq!(cal.len() + test.len(), 100);
    }

    #[test]
    fn track_split_rejects_bad_ids() {
        let store = FeatureStore::from_records(vec![record("a", vec![0.0]), record("b", vec![1.0])])
            .unwrap();
        assert!(store.split(&SplitSpec::default()).is_err());
    }

    #[test]
    fn bundle_missing_section_is_structured() {
        let err = ModelBundle::from_json(r#"{"version": 1, "density": {}, "epistemic": {}}"#)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("density") || msg.contains("calibration"), "{msg}");
        let err = ModelBundle::from_json(r#"{"version": 1}"#).unwrap_err();
        assert!(err.to_string().contains("missing section `density`"));
        let err = ModelBundle::from_json(r#"{"version": 9}"#).unwrap_err();
        assert!(err.to_string().contains("version mismatch"));
        let err = ModelBundle::from_json(r#"{"version": 1, "dens"#).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    proptest::proptest! {
        #[test]
        fn fraction_split_halves_differ_by_at_most_one(n in 2usize..200, seed in 0u64..1000) {
            let store = store_of(n, 1);
            let spec = SplitSpec { mode: SplitMode::ByFraction, fraction: 0.5, seed };
            let (cal, test) = store.split(&spec).unwrap();
            proptest::prop_assert!(cal.len().abs_diff(test.len()) <= 1);
            proptest::prop_assert_eq!(cal.len() + test.len(), n);
        }

        #[test]
        fn jsonl_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..6), iou in 0.0f64..=1.0) {
            let mut a = record("s:1:1", values.clone());
            a.iou = Some(iou);
            a.layer_features = Some(vec![values.clone(), values]);
            let store = FeatureStore::from_records(vec![a]).unwrap();
            let f = tempfile::NamedTempFile::new().unwrap();
            store.save(f.path()).unwrap();
            let back = FeatureStore::load(f.path()).unwrap();
            proptest::prop_assert_eq!(back, store);
        }
    }
}
