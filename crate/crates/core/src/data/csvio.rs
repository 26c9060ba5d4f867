//! CSV ingestion and byte-stable export.
//!
//! Schemas (header row required):
//!
//! - `hr.csv`: `participant_id,probe_id,timestamp_s,hr_bpm`
//! - `ema.csv`: `participant_id,timestamp_s,rating,scale_max`
//! - `traits.csv`: `participant_id,scale_id,item_index,value,reverse_scored`
//! - `scales.csv`: `scale_id,item_count,item_min,item_max`
//! - `participants.csv` (optional): `participant_id,age`

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{
    Dataset, EmaResponse, HrSample, Participant, Probe, Provenance, ScaleDeclaration, ScaleId,
    TraitItemResponse, DEFAULT_AGE, DEFAULT_CAPTURE_S,
};
use crate::error::{Error, Result};
use crate::preprocess::impute_and_score_traits;

const HR_HEADER: [&str; 4] = ["participant_id", "probe_id", "timestamp_s", "hr_bpm"];
const EMA_HEADER: [&str; 4] = ["participant_id", "timestamp_s", "rating", "scale_max"];
const TRAITS_HEADER: [&str; 5] = [
    "participant_id",
    "scale_id",
    "item_index",
    "value",
    "reverse_scored",
];
const SCALES_HEADER: [&str; 4] = ["scale_id", "item_count", "item_min", "item_max"];
const AGES_HEADER: [&str; 2] = ["participant_id", "age"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub hr: PathBuf,
    pub ema: PathBuf,
    pub traits: PathBuf,
    pub scales: PathBuf,
    pub ages: Option<PathBuf>,
}

impl DatasetPaths {
    /// Conventional file names inside `dir`; `participants.csv` is used when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let ages = dir.join("participants.csv");
        DatasetPaths {
            hr: dir.join("hr.csv"),
            ema: dir.join("ema.csv"),
            traits: dir.join("traits.csv"),
            scales: dir.join("scales.csv"),
            ages: ages.exists().then_some(ages),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    pub capture_s: f64,
    pub default_age: u32,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            capture_s: DEFAULT_CAPTURE_S,
            default_age: DEFAULT_AGE,
        }
    }
}

struct Rows {
    file: String,
    reader: csv::Reader<File>,
}

impl Rows {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let name = path.display().to_string();
        let found = reader.headers()?.clone();
        if found.iter().ne(header.iter().copied()) {
            return Err(Error::MalformedRow {
                file: name,
                line: 1,
                reason: format!("expected header `{}`", header.join(",")),
            });
        }
        Ok(Rows { file: name, reader })
    }

    /// Visits each record with its 1-based line number.
    fn for_each(
        mut self,
        width: usize,
        mut f: impl FnMut(&csv::StringRecord) -> std::result::Result<(), String>,
    ) -> Result<()> {
        for record in self.reader.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.len() != width {
                return Err(Error::MalformedRow {
                    file: self.file.clone(),
                    line,
                    reason: format!("expected {width} fields, found {}", record.len()),
                });
            }
            f(&record).map_err(|reason| Error::MalformedRow {
                file: self.file.clone(),
                line,
                reason,
            })?;
        }
        Ok(())
    }
}

fn field<T: FromStr>(record: &csv::StringRecord, idx: usize, name: &str) -> std::result::Result<T, String> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse()
        .map_err(|_| format!("cannot parse {name} from `{raw}`"))
}

fn finite(value: f64, name: &str) -> std::result::Result<f64, String> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(format!("{name} must be finite"))
    }
}

/// Reads the CSV files into a [`Dataset`], scoring each participant's traits.
pub fn ingest_dataset(paths: &DatasetPaths, opts: IngestOptions) -> Result<Dataset> {
    let mut diagnostics = Vec::new();

    // scales.csv
    let mut scales: Vec<ScaleDeclaration> = Vec::new();
    Rows::open(&paths.scales, &SCALES_HEADER)?.for_each(4, |r| {
        let scale = ScaleId::from_str(r.get(0).unwrap_or("").trim())
            .map_err(|e| e.to_string())?;
        let decl = ScaleDeclaration {
            scale,
            item_count: field(r, 1, "item_count")?,
            item_min: field(r, 2, "item_min")?,
            item_max: field(r, 3, "item_max")?,
        };
        if decl.item_count == 0 || decl.item_min > decl.item_max {
            return Err(format!("invalid declaration for {scale}"));
        }
        if scales.iter().any(|d| d.scale == scale) {
            return Err(format!("scale {scale} declared twice"));
        }
        scales.push(decl);
        Ok(())
    })?;
    scales.sort_by_key(|d| d.scale);

    // traits.csv
    let mut items: BTreeMap<String, Vec<TraitItemResponse>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, ScaleId, usize)> = BTreeSet::new();
    let traits_file = paths.traits.display().to_string();
    let mut trait_error: Option<Error> = None;
    Rows::open(&paths.traits, &TRAITS_HEADER)?.for_each(5, |r| {
        let participant_id = r.get(0).unwrap_or("").trim().to_string();
        if participant_id.is_empty() {
            return Err("empty participant_id".into());
        }
        let scale_raw = r.get(1).unwrap_or("").trim();
        let scale = match ScaleId::from_str(scale_raw) {
            Ok(s) => s,
            Err(e) => {
                trait_error.get_or_insert(e);
                return Ok(());
            }
        };
        let Some(decl) = scales.iter().find(|d| d.scale == scale) else {
            trait_error.get_or_insert(Error::UnknownScale(scale_raw.to_string()));
            return Ok(());
        };
        let item_index: usize = field(r, 2, "item_index")?;
        if item_index == 0 || item_index > decl.item_count {
            return Err(format!("item_index {item_index} outside 1..={}", decl.item_count));
        }
        let raw_value = r.get(3).unwrap_or("").trim();
        let value = if raw_value.is_empty() {
            None
        } else {
            let v: i32 = field(r, 3, "value")?;
            if !decl.contains(v) {
                return Err(format!(
                    "value {v} outside [{}, {}] for {scale}",
                    decl.item_min, decl.item_max
                ));
            }
            Some(v)
        };
        let reverse_scored = match r.get(4).unwrap_or("").trim() {
            "0" => false,
            "1" => true,
            other => return Err(format!("reverse_scored must be 0 or 1, found `{other}`")),
        };
        if !seen.insert((participant_id.clone(), scale, item_index)) {
            trait_error.get_or_insert(Error::DuplicateTraitRow {
                participant: participant_id.clone(),
                scale: scale.to_string(),
                item: item_index,
            });
            return Ok(());
        }
        items.entry(participant_id.clone()).or_default().push(TraitItemResponse {
            participant_id,
            scale,
            item_index,
            value,
            reverse_scored,
        });
        Ok(())
    })?;
    if let Some(e) = trait_error {
        return Err(match e {
            Error::UnknownScale(s) => Error::UnknownScale(format!("{s} (in {traits_file})")),
            other => other,
        });
    }

    // hr.csv
    let mut probes: BTreeMap<String, BTreeMap<String, Vec<(usize, HrSample)>>> = BTreeMap::new();
    Rows::open(&paths.hr, &HR_HEADER)?.for_each(4, |r| {
        let participant_id = r.get(0).unwrap_or("").trim().to_string();
        let probe_id = r.get(1).unwrap_or("").trim().to_string();
        if participant_id.is_empty() || probe_id.is_empty() {
            return Err("empty participant_id or probe_id".into());
        }
        let timestamp = finite(field(r, 2, "timestamp_s")?, "timestamp_s")?;
        let hr = finite(field(r, 3, "hr_bpm")?, "hr_bpm")?;
        if hr <= 0.0 {
            return Err(format!("hr_bpm must be positive, found {hr}"));
        }
        let line = r.position().map_or(0, |p| p.line() as usize);
        probes
            .entry(participant_id)
            .or_default()
            .entry(probe_id)
            .or_default()
            .push((line, HrSample { timestamp, hr }));
        Ok(())
    })?;

    // ema.csv
    let mut emas: BTreeMap<String, Vec<EmaResponse>> = BTreeMap::new();
    Rows::open(&paths.ema, &EMA_HEADER)?.for_each(4, |r| {
        let participant_id = r.get(0).unwrap_or("").trim().to_string();
        if participant_id.is_empty() {
            return Err("empty participant_id".into());
        }
        let timestamp = finite(field(r, 1, "timestamp_s")?, "timestamp_s")?;
        let rating: u32 = field(r, 2, "rating")?;
        let scale_max: u32 = field(r, 3, "scale_max")?;
        let ema = EmaResponse::new(participant_id.clone(), timestamp, rating, scale_max)
            .map_err(|e| e.to_string())?;
        emas.entry(participant_id).or_default().push(ema);
        Ok(())
    })?;

    // participants.csv
    let mut ages: BTreeMap<String, u32> = BTreeMap::new();
    if let Some(path) = &paths.ages {
        Rows::open(path, &AGES_HEADER)?.for_each(2, |r| {
            let participant_id = r.get(0).unwrap_or("").trim().to_string();
            let age: u32 = field(r, 1, "age")?;
            if age == 0 || age >= 220 {
                return Err(format!("age {age} outside (0, 220)"));
            }
            if ages.insert(participant_id.clone(), age).is_some() {
                return Err(format!("duplicate age row for `{participant_id}`"));
            }
            Ok(())
        })?;
    }

    for id in probes.keys().chain(emas.keys()) {
        if !items.contains_key(id) {
            return Err(Error::InvalidInput(format!(
                "participant `{id}` has heart-rate or EMA rows but no trait responses"
            )));
        }
    }

    let hr_file = paths.hr.display().to_string();
    let mut participants = Vec::with_capacity(items.len());
    for (id, mut item_rows) in items {
        item_rows.sort_by_key(|i| (i.scale, i.item_index));
        let traits = match impute_and_score_traits(&id, &item_rows, &scales) {
            Ok(t) => t,
            Err(e) => {
                diagnostics.push(format!("participant `{id}` dropped: {e}"));
                continue;
            }
        };
        let mut participant_probes = Vec::new();
        for (probe_id, mut rows) in probes.remove(&id).unwrap_or_default() {
            rows.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp));
            let probe = Probe {
                probe_id,
                participant_id: id.clone(),
                samples: rows.iter().map(|(_, s)| *s).collect(),
            };
            if let Err(reason) = probe.validate(opts.capture_s) {
                return Err(Error::MalformedRow {
                    file: hr_file.clone(),
                    line: rows.last().map_or(0, |r| r.0),
                    reason,
                });
            }
            participant_probes.push(probe);
        }
        let (age, age_defaulted) = match ages.get(&id) {
            Some(&a) => (a, false),
            None => {
                diagnostics.push(format!(
                    "participant `{id}`: no age supplied, using default {}",
                    opts.default_age
                ));
                (opts.default_age, true)
            }
        };
        let mut participant = Participant {
            id: id.clone(),
            age,
            age_defaulted,
            traits,
            items: item_rows,
            probes: participant_probes,
            emas: emas.remove(&id).unwrap_or_default(),
        };
        canonicalize_participant(&mut participant);
        participants.push(participant);
    }

    let ds = Dataset {
        participants,
        scales,
        provenance: Provenance::Ingested,
        diagnostics,
    };
    ds.validate()?;
    Ok(ds)
}

/// Sorts probes by start time, samples and EMAs by timestamp, items by (scale, index).
pub(crate) fn canonicalize_participant(p: &mut Participant) {
    for probe in &mut p.probes {
        probe.samples.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    p.probes
        .sort_by(|a, b| a.start().total_cmp(&b.start()).then_with(|| a.probe_id.cmp(&b.probe_id)));
    p.emas.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    p.items.sort_by_key(|i| (i.scale, i.item_index));
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Writes the dataset as CSV files in `dir`, sorted by participant then timestamp.
///
/// Floats use the shortest representation that parses back to the same value, so
/// `ingest_dataset(export_dataset(ds))` reproduces the participants exactly.
pub fn export_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<DatasetPaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths {
        hr: dir.join("hr.csv"),
        ema: dir.join("ema.csv"),
        traits: dir.join("traits.csv"),
        scales: dir.join("scales.csv"),
        ages: Some(dir.join("participants.csv")),
    };
    let mut participants: Vec<&Participant> = ds.participants.iter().collect();
    participants.sort_by(|a, b| a.id.cmp(&b.id));

    let mut w = writer(&paths.scales)?;
    w.write_record(SCALES_HEADER)?;
    let mut scales = ds.scales.clone();
    scales.sort_by_key(|d| d.scale);
    for d in &scales {
        w.write_record([
            d.scale.as_str().to_string(),
            d.item_count.to_string(),
            d.item_min.to_string(),
            d.item_max.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&paths.scales, e))?;

    let mut w = writer(&paths.hr)?;
    w.write_record(HR_HEADER)?;
    for p in &participants {
        let mut rows: Vec<(&str, HrSample)> = p
            .probes
            .iter()
            .flat_map(|probe| probe.samples.iter().map(move |s| (probe.probe_id.as_str(), *s)))
            .collect();
        rows.sort_by(|a, b| a.1.timestamp.total_cmp(&b.1.timestamp).then_with(|| a.0.cmp(b.0)));
        for (probe_id, s) in rows {
            w.write_record([
                p.id.as_str(),
                probe_id,
                &s.timestamp.to_string(),
                &s.hr.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.hr, e))?;

    let mut w = writer(&paths.ema)?;
    w.write_record(EMA_HEADER)?;
    for p in &participants {
        let mut emas: Vec<&EmaResponse> = p.emas.iter().collect();
        emas.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        for e in emas {
            w.write_record([
                p.id.as_str(),
                &e.timestamp.to_string(),
                &e.rating.to_string(),
                &e.scale_max.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.ema, e))?;

    let mut w = writer(&paths.traits)?;
    w.write_record(TRAITS_HEADER)?;
    for p in &participants {
        let mut items: Vec<&TraitItemResponse> = p.items.iter().collect();
        items.sort_by_key(|i| (i.scale, i.item_index));
        for i in items {
            w.write_record([
                p.id.as_str(),
                i.scale.as_str(),
                &i.item_index.to_string(),
                &i.value.map(|v| v.to_string()).unwrap_or_default(),
                if i.reverse_scored { "1" } else { "0" },
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&paths.traits, e))?;

    let ages_path = paths.ages.clone().expect("set above");
    let mut w = writer(&ages_path)?;
    w.write_record(AGES_HEADER)?;
    for p in participants.iter().filter(|p| !p.age_defaulted) {
        w.write_record([p.id.as_str(), &p.age.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&ages_path, e))?;

    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_minimal(dir: &Path, ema_rating: u32) -> DatasetPaths {
        fs::write(
            dir.join("scales.csv"),
            "scale_id,item_count,item_min,item_max\nSIAS,2,0,4\n",
        )
        .unwrap();
        fs::write(
            dir.join("traits.csv"),
            "participant_id,scale_id,item_index,value,reverse_scored\np1,SIAS,1,3,0\np1,SIAS,2,,1\n",
        )
        .unwrap();
        let mut hr = String::from("participant_id,probe_id,timestamp_s,hr_bpm\n");
        for k in 0..60 {
            hr.push_str(&format!("p1,probe0,{},{}\n", 1000 + k, 70 + k % 5));
        }
        fs::write(dir.join("hr.csv"), hr).unwrap();
        fs::write(
            dir.join("ema.csv"),
            format!("participant_id,timestamp_s,rating,scale_max\np1,2000,{ema_rating},10\n"),
        )
        .unwrap();
        DatasetPaths::in_dir(dir)
    }

    #[test]
    fn minimal_files_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 4);
        let ds = ingest_dataset(&paths, IngestOptions::default()).unwrap();
        assert_eq!(ds.participants.len(), 1);
        let p = &ds.participants[0];
        assert_eq!(p.probes.len(), 1);
        assert_eq!(p.probes[0].samples.len(), 60);
        assert_eq!(p.emas.len(), 1);
        assert_eq!(p.emas[0].label(), 1);
        assert!(p.age_defaulted);
        assert!(ds.diagnostics.iter().any(|d| d.contains("no age supplied")));
        // single valid item 3 imputes the missing one: 3 + 3
        assert_eq!(p.traits.score(ScaleId::Sias), 6.0);
    }

    #[test]
    fn zero_rating_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 0);
        match ingest_dataset(&paths, IngestOptions::default()) {
            Err(Error::MalformedRow { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("outside"), "{reason}");
            }
            other => panic!("expected malformed row, got {other:?}"),
        }
    }

    #[test]
    fn unknown_scale_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 1);
        fs::write(
            &paths.traits,
            "participant_id,scale_id,item_index,value,reverse_scored\np1,GAD7,1,3,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_dataset(&paths, IngestOptions::default()),
            Err(Error::UnknownScale(_))
        ));
    }

    #[test]
    fn duplicate_trait_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 1);
        fs::write(
            &paths.traits,
            "participant_id,scale_id,item_index,value,reverse_scored\np1,SIAS,1,3,0\np1,SIAS,1,2,0\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_dataset(&paths, IngestOptions::default()),
            Err(Error::DuplicateTraitRow { .. })
        ));
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 1);
        fs::write(&paths.ema, "pid,ts,rating,max\n").unwrap();
        assert!(matches!(
            ingest_dataset(&paths, IngestOptions::default()),
            Err(Error::MalformedRow { line: 1, .. })
        ));
    }

    #[test]
    fn overlong_probe_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_minimal(dir.path(), 1);
        fs::write(
            &paths.hr,
            "participant_id,probe_id,timestamp_s,hr_bpm\np1,a,0,70\np1,a,61,70\n",
        )
        .unwrap();
        assert!(matches!(
            ingest_dataset(&paths, IngestOptions::default()),
            Err(Error::MalformedRow { .. })
        ));
    }

    #[test]
    fn missing_file_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let paths = DatasetPaths::in_dir(dir.path());
        let err = ingest_dataset(&paths, IngestOptions::default()).unwrap_err();
        assert!(err.to_string().contains("scales.csv"), "{err}");
    }
}
