//! Subject manifests, train/dev splitting and MMSE score normalization.
//!
//! A manifest is a CSV file with the header
//! `subject_id,class,mmse,ctd_path,pft_path,sft_path`. Recording paths are kept
//! verbatim and resolved against the manifest's directory when used.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MMSE_MIN: i64 = 0;
pub const MMSE_MAX: i64 = 30;

const HEADER: [&str; 6] = ["subject_id", "class", "mmse", "ctd_path", "pft_path", "sft_path"];

/// The three elicitation tasks recorded for every subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    /// Cookie Theft picture description.
    #[serde(rename = "CTD")]
    Ctd,
    /// Phonemic fluency.
    #[serde(rename = "PFT")]
    Pft,
    /// Semantic fluency.
    #[serde(rename = "SFT")]
    Sft,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Ctd, TaskKind::Pft, TaskKind::Sft];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Ctd => "CTD",
            TaskKind::Pft => "PFT",
            TaskKind::Sft => "SFT",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CTD" => Ok(TaskKind::Ctd),
            "PFT" => Ok(TaskKind::Pft),
            "SFT" => Ok(TaskKind::Sft),
            other => Err(Error::arg(format!("unknown task '{other}'"))),
        }
    }
}

/// Diagnostic group. `Unknown` lets regression-only subjects load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "HC")]
    Hc,
    #[serde(rename = "MCI")]
    Mci,
    Dementia,
    Unknown,
}

impl ClassLabel {
    /// Diagnostic classes in their fixed order; used for tie-breaking everywhere.
    pub const DIAGNOSTIC: [ClassLabel; 3] = [ClassLabel::Hc, ClassLabel::Mci, ClassLabel::Dementia];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Hc => "HC",
            ClassLabel::Mci => "MCI",
            ClassLabel::Dementia => "Dementia",
            ClassLabel::Unknown => "?",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hc" => Ok(ClassLabel::Hc),
            "mci" => Ok(ClassLabel::Mci),
            "dementia" => Ok(ClassLabel::Dementia),
            "?" => Ok(ClassLabel::Unknown),
            _ => Err(Error::Format(format!("unknown class label '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub class_label: ClassLabel,
    pub mmse: Option<i64>,
    pub recordings: BTreeMap<TaskKind, PathBuf>,
}

impl SubjectRecord {
    pub fn recording(&self, task: TaskKind) -> &Path {
        // load_manifest guarantees all three keys
        &self.recordings[&task]
    }
}

/// Min/max of the training MMSE scores; `y_max > y_min`, both finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub y_min: f64,
    pub y_max: f64,
}

impl NormalizationParams {
    pub fn new(y_min: f64, y_max: f64) -> Result<Self> {
        if !y_min.is_finite() || !y_max.is_finite() || y_max <= y_min {
            return Err(Error::DegenerateRange(format!(
                "need finite y_max > y_min, got ({y_min}, {y_max})"
            )));
        }
        Ok(Self { y_min, y_max })
    }

    pub fn span(&self) -> f64 {
        self.y_max - self.y_min
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

/// Parses manifest text. Row numbers in errors count data rows from 1.
pub fn parse_manifest(text: &str) -> Result<Vec<SubjectRecord>> {
    let mut lines = text.split('\n').map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header_line = lines
        .next()
        .filter(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Format("empty manifest".into()))?;
    let header = split_fields(header_line, 0)?;
    let mut column = [0usize; 6];
    for (slot, name) in column.iter_mut().zip(HEADER) {
        *slot = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Format(format!("missing header column '{name}'")))?;
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut row = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let fields = split_fields(line, row)?;
        if fields.len() != header.len() {
            return Err(Error::Format(format!(
                "row {row}: expected {} fields, found {}",
                header.len(),
                fields.len()
            )));
        }
        let get = |i: usize| fields[column[i]].trim();

        let subject_id = get(0).to_string();
        if subject_id.is_empty() {
            return Err(Error::Format(format!("row {row}: empty subject_id")));
        }
        let class_label: ClassLabel = get(1)
            .parse()
            .map_err(|e| Error::Format(format!("row {row}: {e}")))?;
        let mmse = match get(2) {
            "" => None,
            raw => {
                let value: i64 = raw
                    .parse()
                    .map_err(|_| Error::Format(format!("row {row}: mmse '{raw}' is not an integer")))?;
                if !(MMSE_MIN..=MMSE_MAX).contains(&value) {
                    return Err(Error::ScoreRange { value, row });
                }
                Some(value)
            }
        };
        let mut recordings = BTreeMap::new();
        for (task, col) in TaskKind::ALL.into_iter().zip(3..6) {
            let p = get(col);
            if p.is_empty() {
                return Err(Error::Format(format!("row {row}: empty {} path", HEADER[col])));
            }
            recordings.insert(task, PathBuf::from(p));
        }
        if !seen.insert(subject_id.clone()) {
            return Err(Error::DuplicateSubject { subject_id, row });
        }
        records.push(SubjectRecord {
            subject_id,
            class_label,
            mmse,
            recordings,
        });
    }
    Ok(records)
}

fn split_fields(line: &str, row: usize) -> Result<Vec<&str>> {
    if line.contains('"') {
        let at = if row == 0 { "header".to_string() } else { format!("row {row}") };
        return Err(Error::Format(format!("{at}: quoted fields are not supported")));
    }
    Ok(line.split(',').collect())
}

/// Stratified, seeded train/dev partition. Each stratum (class label) sends
/// `round(dev_fraction * n_stratum)` records to dev; both halves keep
/// manifest order.
pub fn split_dataset(
    records: &[SubjectRecord],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::arg(format!("dev_fraction must be in (0, 1), got {dev_fraction}")));
    }
    if records.is_empty() {
        return Err(Error::arg("cannot split an empty record list"));
    }
    let mut strata: BTreeMap<ClassLabel, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.class_label).or_default().push(i);
    }
    let mut rng = rng::seeded(seed);
    let mut in_dev = vec![false; records.len()];
    for members in strata.values() {
        let mut shuffled = members.clone();
        rng::shuffle(&mut rng, &mut shuffled);
        let n_dev = (dev_fraction * members.len() as f64).round() as usize;
        for &i in &shuffled[..n_dev] {
            in_dev[i] = true;
        }
    }
    let (dev, train): (Vec<_>, Vec<_>) = records
        .iter()
        .zip(&in_dev)
        .partition(|(_, &d)| d);
    Ok((
        train.into_iter().map(|(r, _)| r.clone()).collect(),
        dev.into_iter().map(|(r, _)| r.clone()).collect(),
    ))
}

/// Min/max over the train records' MMSE values (records without a score are
/// skipped).
pub fn fit_normalizer(train: &[SubjectRecord]) -> Result<NormalizationParams> {
    let scores: Vec<i64> = train.iter().filter_map(|r| r.mmse).collect();
    let (Some(&lo), Some(&hi)) = (scores.iter().min(), scores.iter().max()) else {
        return Err(Error::DegenerateRange("no mmse scores in training set".into()));
    };
    if lo == hi {
        return Err(Error::DegenerateRange(format!(
            "all training scores equal {lo}; need at least two distinct values"
        )));
    }
    NormalizationParams::new(lo as f64, hi as f64)
}

/// Affine map onto the training range; deliberately not clamped.
pub fn normalize_score(y: f64, params: &NormalizationParams) -> f64 {
    (y - params.y_min) / params.span()
}

pub fn denormalize_score(p_hat: f64, params: &NormalizationParams) -> f64 {
    p_hat * params.span() + params.y_min
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HDR: &str = "subject_id,class,mmse,ctd_path,pft_path,sft_path\n";

    fn record(id: &str, class: ClassLabel, mmse: Option<i64>) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            class_label: class,
            mmse,
            recordings: TaskKind::ALL
                .into_iter()
                .map(|t| (t, PathBuf::from(format!("{id}_{t}.wav"))))
                .collect(),
        }
    }

    #[test]
    fn parses_rows() {
        let recs = parse_manifest(&format!("{HDR}s001,HC,29,a.wav,b.wav,c.wav\r\ns002,MCI,,a.wav,b.wav,c.wav\n")).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].subject_id, "s001");
        assert_eq!(recs[0].class_label, ClassLabel::Hc);
        assert_eq!(recs[0].mmse, Some(29));
        assert_eq!(recs[0].recording(TaskKind::Ctd), Path::new("a.wav"));
        assert_eq!(recs[0].recording(TaskKind::Pft), Path::new("b.wav"));
        assert_eq!(recs[0].recording(TaskKind::Sft), Path::new("c.wav"));
        assert_eq!(recs[1].mmse, None);
    }

    #[test]
    fn question_mark_is_unknown() {
        let recs = parse_manifest(&format!("{HDR}s9,?,12,a,b,c\n")).unwrap();
        assert_eq!(recs[0].class_label, ClassLabel::Unknown);
    }

    #[test]
    fn out_of_range_score_reports_row() {
        let text = format!(
            "{HDR}s001,HC,29,a.wav,b.wav,c.wav\ns002,MCI,,a.wav,b.wav,c.wav\ns003,Dementia,31,a.wav,b.wav,c.wav\n"
        );
        match parse_manifest(&text) {
            Err(Error::ScoreRange { value: 31, row: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let err = parse_manifest("subject_id,class,ctd_path,pft_path,sft_path\n").unwrap_err();
        assert!(err.to_string().contains("'mmse'"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = parse_manifest(&format!("{HDR}s1,HC,1,a,b,c\ns1,HC,2,a,b,c\n")).unwrap_err();
        assert!(matches!(err, Error::DuplicateSubject { row: 2, .. }));
    }

    #[test]
    fn quoted_fields_rejected() {
        let err = parse_manifest(&format!("{HDR}\"s1\",HC,1,a,b,c\n")).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let recs: Vec<_> = (0..10).map(|i| record(&format!("s{i}"), ClassLabel::Hc, Some(i))).collect();
        let (train, dev) = split_dataset(&recs, 0.2, 7).unwrap();
        assert_eq!((train.len(), dev.len()), (8, 2));
        assert_eq!(split_dataset(&recs, 0.2, 7).unwrap(), (train, dev));
    }

    #[test]
    fn split_is_stratified() {
        let mut recs: Vec<_> = (0..4).map(|i| record(&format!("h{i}"), ClassLabel::Hc, None)).collect();
        recs.extend((0..4).map(|i| record(&format!("m{i}"), ClassLabel::Mci, None)));
        let (_, dev) = split_dataset(&recs, 0.5, 1).unwrap();
        let hc = dev.iter().filter(|r| r.class_label == ClassLabel::Hc).count();
        let mci = dev.iter().filter(|r| r.class_label == ClassLabel::Mci).count();
        assert_eq!((hc, mci), (2, 2));
    }

    #[test]
    fn split_seeds_give_valid_partitions() {
        let recs: Vec<_> = (0..20).map(|i| record(&format!("s{i}"), ClassLabel::Mci, None)).collect();
        for seed in [1, 2] {
            let (train, dev) = split_dataset(&recs, 0.3, seed).unwrap();
            assert_eq!(train.len() + dev.len(), 20);
            assert_eq!(dev.len(), 6);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let recs = vec![record("a", ClassLabel::Hc, None)];
        for f in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(split_dataset(&recs, f, 0), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn normalizer_fit() {
        let recs: Vec<_> = [12, 25, 30].iter().map(|&m| record("x", ClassLabel::Hc, Some(m))).collect();
        assert_eq!(fit_normalizer(&recs).unwrap(), NormalizationParams { y_min: 12.0, y_max: 30.0 });
        let full: Vec<_> = [0, 30].iter().map(|&m| record("x", ClassLabel::Hc, Some(m))).collect();
        assert_eq!(fit_normalizer(&full).unwrap(), NormalizationParams { y_min: 0.0, y_max: 30.0 });
        let flat: Vec<_> = [20, 20].iter().map(|&m| record("x", ClassLabel::Hc, Some(m))).collect();
        assert!(matches!(fit_normalizer(&flat), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn normalize_examples() {
        let p = NormalizationParams::new(0.0, 30.0).unwrap();
        assert_eq!(normalize_score(15.0, &p), 0.5);
        assert_eq!(normalize_score(30.0, &p), 1.0);
        let q = NormalizationParams::new(12.0, 30.0).unwrap();
        assert!((normalize_score(10.0, &q) + 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(denormalize_score(0.5, &p), 15.0);
        assert!((denormalize_score(1.1, &p) - 33.0).abs() < 1e-12);
        for y in 0..=30 {
            let y = y as f64;
            assert!((denormalize_score(normalize_score(y, &p), &p) - y).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn round_trip(y in -1e6f64..1e6, lo in -50.0f64..50.0, width in 0.5f64..100.0) {
            let p = NormalizationParams::new(lo, lo + width).unwrap();
            let back = denormalize_score(normalize_score(y, &p), &p);
            prop_assert!((back - y).abs() <= 1e-9 * y.abs().max(1.0));
        }

        #[test]
        fn monotone(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let p = NormalizationParams::new(3.0, 27.0).unwrap();
            if a < b {
                prop_assert!(normalize_score(a, &p) < normalize_score(b, &p));
            }
        }

        #[test]
        fn split_is_partition(n in 1usize..60, frac in 0.05f64..0.95, seed in any::<u64>()) {
            let classes = [ClassLabel::Hc, ClassLabel::Mci, ClassLabel::Dementia, ClassLabel::Unknown];
            let recs: Vec<_> = (0..n).map(|i| record(&format!("s{i}"), classes[i % 4], None)).collect();
            let (train, dev) = split_dataset(&recs, frac, seed).unwrap();
            let mut ids: Vec<_> = train.iter().chain(&dev).map(|r| r.subject_id.clone()).collect();
            ids.sort();
            let mut want: Vec<_> = recs.iter().map(|r| r.subject_id.clone()).collect();
            want.sort();
            prop_assert_eq!(ids, want);
        }
    }

    #[test]
    fn normalizer_ignores_dev() {
        let recs: Vec<_> = (0..20).map(|i| record(&format!("s{i}"), ClassLabel::Hc, Some(i))).collect();
        let (train, mut dev) = split_dataset(&recs, 0.25, 3).unwrap();
        let before = fit_normalizer(&train).unwrap();
        for r in &mut dev {
            r.mmse = Some(0);
        }
        assert_eq!(fit_normalizer(&train).unwrap(), before);
    }
}
