//! On-disk helpers shared by every artifact writer.

use crate::connectivity::{TimeSeries, TumorMask};
use crate::error::{Error, Result};
use crate::layers::AttentionPair;
use crate::loss::LabelTensor;
use crate::model::Task;
use crate::synthdata::{Communities, Schedule, SynthPatient};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())))?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into()
    })
}

/// Reads a whole file, naming it in the error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

const PATIENT_MAGIC: &str = "ELQPAT";
const PATIENT_VERSION: u32 = 1;

/// Human-readable part of a patient file.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientHeader {
    version: u32,
    id: String,
    regions: usize,
    frames: usize,
    bilateral: bool,
    mask: Vec<usize>,
    /// Class ids per region, keyed by task; absent tasks are omitted.
    labels: BTreeMap<Task, Vec<usize>>,
    communities: Communities,
    schedule: Schedule,
}

/// `ELQPAT <version>` and the header length on two text lines, the JSON
/// header, then the `frames x regions` series as little-endian `f64`.
pub fn encode_patient(p: &SynthPatient) -> Result<Vec<u8>> {
    let header = PatientHeader {
        version: PATIENT_VERSION,
        id: p.id.clone(),
        regions: p.regions(),
        frames: p.series.frames(),
        bilateral: p.bilateral,
        mask: p.mask.iter().collect(),
        labels: p
            .labels
            .present()
            .map(|t| (t, p.labels.classes(t).expect("present")))
            .collect(),
        communities: p.communities.clone(),
        schedule: p.schedule.clone(),
    };
    let json = serde_json::to_vec_pretty(&header)?;
    let values = p.series.data().values();
    let mut out = format!("{PATIENT_MAGIC} {PATIENT_VERSION}\n{}\n", json.len()).into_bytes();
    out.reserve(json.len() + 8 * values.len());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_patient(bytes: &[u8]) -> Result<SynthPatient> {
    let bad = |what: String| Error::Format(format!("patient file: {what}"));
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let (magic, len, rest) = match (lines.next(), lines.next(), lines.next()) {
        (Some(m), Some(l), Some(r)) => (m, l, r),
        _ => return Err(bad("missing header lines".into())),
    };
    let magic = std::str::from_utf8(magic).map_err(|_| bad("bad magic".into()))?;
    match magic.split_once(' ') {
        Some((PATIENT_MAGIC, v)) if v.parse() == Ok(PATIENT_VERSION) => {}
        _ => return Err(bad(format!("unsupported header `{magic}`"))),
    }
    let len: usize = std::str::from_utf8(len)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| bad("bad header length".into()))?;
    let json = rest.get(..len).ok_or_else(|| bad("truncated header".into()))?;
    let h: PatientHeader = serde_json::from_slice(json)?;
    let data = &rest[len..];
    if data.len() != 8 * h.frames * h.regions {
        return Err(bad(format!(
            "{} data bytes for {} x {} values",
            data.len(),
            h.frames,
            h.regions
        )));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let series = TimeSeries::new(h.frames, h.regions, values)?;
    let classes = Task::ALL.map(|t| h.labels.get(&t).cloned());
    let labels = LabelTensor::from_classes(h.regions, classes)?;
    let mask = TumorMask::new(h.mask);
    labels.check_mask(&mask)?;
    Ok(SynthPatient {
        id: h.id,
        series,
        mask,
        labels,
        bilateral: h.bilateral,
        communities: h.communities,
        schedule: h.schedule,
    })
}

pub fn save_patient(path: &Path, p: &SynthPatient) -> Result<()> {
    write_atomic(path, &encode_patient(p)?)
}

pub fn load_patient(path: &Path) -> Result<SynthPatient> {
    decode_patient(&read_file(path)?)
}

/// `index.json` of a cohort directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortIndex {
    pub version: u32,
    pub regions: usize,
    pub frames: usize,
    pub patients: Vec<IndexEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub id: String,
    /// Relative to the cohort directory.
    pub file: String,
    pub bilateral: bool,
    pub tasks: Vec<Task>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes every patient under `patients/` and the index last.
pub fn save_cohort(dir: &Path, patients: &[SynthPatient]) -> Result<CohortIndex> {
    let first = patients.first().ok_or(Error::Empty("cohort has no patients"))?;
    let mut entries = Vec::with_capacity(patients.len());
    for p in patients {
        let file = format!("patients/{}.elq", p.id);
        save_patient(&dir.join(&file), p)?;
        entries.push(IndexEntry {
            id: p.id.clone(),
            file,
            bilateral: p.bilateral,
            tasks: p.labels.present().collect(),
        });
    }
    let index = CohortIndex {
        version: PATIENT_VERSION,
        regions: first.regions(),
        frames: first.series.frames(),
        patients: entries,
    };
    write_json(&dir.join(INDEX_FILE), &index)?;
    Ok(index)
}

pub fn load_cohort(dir: &Path) -> Result<Vec<SynthPatient>> {
    let index: CohortIndex = serde_json::from_slice(&read_file(&dir.join(INDEX_FILE))?)?;
    if index.patients.is_empty() {
        return Err(Error::Empty("cohort index lists no patients"));
    }
    index
        .patients
        .iter()
        .map(|e| {
            let p = load_patient(&dir.join(&e.file))?;
            if p.id != e.id || p.regions() != index.regions {
                return Err(Error::Format(format!(
                    "{} does not match its index entry `{}` ({} regions)",
                    e.file, e.id, index.regions
                )));
            }
            Ok(p)
        })
        .collect()
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// One compact JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut bytes = Vec::new();
    for r in records {
        serde_json::to_writer(&mut bytes, r)?;
        bytes.push(b'\n');
    }
    write_atomic(path, &bytes)
}

/// Window index with the language and motor attention, tab separated.
pub fn attention_tsv(attention: &AttentionPair) -> String {
    let mut out = String::from("window\tlanguage\tmotor\n");
    for (t, (l, m)) in attention.language.iter().zip(&attention.motor).enumerate() {
        out.push_str(&format!("{t}\t{l:e}\t{m:e}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_patient, SynthConfig};
    use rand::SeedableRng;

    fn patient(presence: [f64; 4]) -> SynthPatient {
        let cfg = SynthConfig {
            regions: 30,
            frames: 20,
            community_sizes: [3, 2, 2, 2],
            task_presence: presence,
            ..SynthConfig::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        generate_patient(&cfg, "p007", true, &mut rng).unwrap()
    }

    #[test]
    fn patient_round_trip_is_exact() {
        let p = patient([1.0, 0.0, 1.0, 0.0]);
        let bytes = encode_patient(&p).unwrap();
        assert!(bytes.starts_with(b"ELQPAT 1\n"));
        let back = decode_patient(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_patient(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_patient_files_are_rejected() {
        let bytes = encode_patient(&patient([1.0; 4])).unwrap();
        assert!(decode_patient(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_patient(b"ELQPAT 9\n2\n{}").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_patient(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn attention_table_has_one_row_per_window() {
        let a = AttentionPair {
            language: vec![0.25, 0.75],
            motor: vec![0.5, 0.5],
        };
        let tsv = attention_tsv(&a);
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with("window\tlanguage\tmotor\n0\t2.5e-1\t5e-1\n"));
    }
}
