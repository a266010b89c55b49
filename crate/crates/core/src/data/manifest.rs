use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{accent_code, accent_name, normalize_text, DataError, Utterance};

pub const MANIFEST_HEADER: [&str; 5] = ["id", "audio_path", "transcript", "accent", "duration_s"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ManifestOptions {
    /// Keep accent labels outside the sixteen-accent table verbatim instead of
    /// rejecting them (synthetic corpora use their own labels).
    pub any_accent: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: u64,
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccentStats {
    pub accent: String,
    pub count: usize,
    pub hours: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub utterances: Vec<Utterance>,
    pub rejects: Vec<Reject>,
    pub stats: Vec<AccentStats>,
}

fn malformed(path: &Path, line: u64, msg: impl Into<String>) -> DataError {
    DataError::Malformed {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn tsv_reader(file: File) -> csv::Reader<File> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .flexible(true)
        .from_reader(file)
}

/// Parses a tab-separated manifest. Unknown accents and transcripts that
/// normalize to nothing go to `rejects`; structurally broken rows are fatal.
pub fn load_manifest(path: &Path, opts: ManifestOptions) -> Result<Manifest, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = tsv_reader(file);
    let mut out = Manifest::default();
    let mut seen_header = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if !seen_header {
            if rec.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
                return Err(malformed(
                    path,
                    line,
                    format!("expected header `{}`", MANIFEST_HEADER.join("\\t")),
                ));
            }
            seen_header = true;
            continue;
        }
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(malformed(
                path,
                line,
                format!("{} fields (expected {})", rec.len(), MANIFEST_HEADER.len()),
            ));
        }
        let id = rec[0].trim().to_string();
        if id.is_empty() {
            return Err(malformed(path, line, "empty id"));
        }
        let duration_s: f64 = rec[4]
            .trim()
            .parse()
            .ok()
            .filter(|d: &f64| d.is_finite() && *d >= 0.0)
            .ok_or_else(|| malformed(path, line, format!("invalid duration `{}`", &rec[4])))?;
        let label = rec[3].trim();
        let accent = match (accent_code(label), opts.any_accent) {
            (Some(code), _) => code.to_string(),
            (None, true) if !label.is_empty() => label.to_string(),
            _ => {
                out.rejects.push(Reject {
                    line,
                    id,
                    reason: format!("unknown accent `{label}`"),
                });
                continue;
            }
        };
        let transcript = normalize_text(&rec[2]);
        if transcript.is_empty() {
            out.rejects.push(Reject {
                line,
                id,
                reason: "transcript is empty after normalization".into(),
            });
            continue;
        }
        let audio = PathBuf::from(&rec[1]);
        out.utterances.push(Utterance {
            id,
            audio_path: if audio.is_relative() { base.join(audio) } else { audio },
            features: None,
            transcript,
            accent,
            duration_s,
        });
    }
    out.stats = accent_stats(&out.utterances);
    Ok(out)
}

fn display_key(code: &str) -> String {
    accent_name(code).unwrap_or(code).to_lowercase()
}

/// Per-accent counts and hours, ordered by accent display name.
pub fn accent_stats(utts: &[Utterance]) -> Vec<AccentStats> {
    let mut by: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for u in utts {
        let e = by.entry(u.accent.as_str()).or_default();
        e.0 += 1;
        e.1 += u.duration_s;
    }
    let mut v: Vec<AccentStats> = by
        .into_iter()
        .map(|(a, (count, secs))| AccentStats {
            accent: a.to_string(),
            count,
            hours: secs / 3600.0,
        })
        .collect();
    v.sort_by_key(|s| display_key(&s.accent));
    v
}

pub fn format_stats(stats: &[AccentStats]) -> String {
    let mut s = format!("{:<22} {:>10} {:>14}\n", "accent", "# sample", "duration (hr)");
    for a in stats {
        let label = match accent_name(&a.accent) {
            Some(n) => format!("{n} ({})", a.accent),
            None => a.accent.clone(),
        };
        s += &format!("{label:<22} {:>10} {:>14.2}\n", a.count, a.hours);
    }
    let n: usize = stats.iter().map(|a| a.count).sum();
    let h: f64 = stats.iter().map(|a| a.hours).sum();
    s += &format!("{:<22} {n:>10} {h:>14.2}\n", "Total");
    s
}

/// Writes a manifest; audio paths under `base` are written relative to it.
pub fn write_manifest(path: &Path, utts: &[Utterance]) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io(format!("{}: {e}", path.display()));
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{}", MANIFEST_HEADER.join("\t")).map_err(io)?;
    for u in utts {
        let audio = u.audio_path.strip_prefix(base).unwrap_or(&u.audio_path);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            u.id,
            audio.display(),
            u.transcript,
            u.accent,
            u.duration_s
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Converts a CommonVoice `validated.tsv` into a manifest, keeping rows with
/// a known accent. Clips are expected as WAV files in `clips_dir` (same stem
/// as the original clip); durations come from their headers when present.
/// Returns `(rows written, rows skipped)`.
pub fn convert_commonvoice(
    validated: &Path,
    clips_dir: &Path,
    out: &Path,
) -> Result<(usize, usize), DataError> {
    let file =
        File::open(validated).map_err(|e| DataError::Io(format!("{}: {e}", validated.display())))?;
    let mut rdr = tsv_reader(file);
    let mut records = rdr.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| malformed(validated, 1, e.to_string()))?,
        None => return Err(malformed(validated, 1, "missing header")),
    };
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(validated, 1, format!("no `{name}` column")))
    };
    let (c_path, c_sent, c_acc) = (col("path")?, col("sentence")?, col("accent")?);
    let mut utts = Vec::new();
    let mut skipped = 0;
    for rec in records {
        let rec = rec.map_err(|e| {
            malformed(validated, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let need = c_path.max(c_sent).max(c_acc);
        if rec.len() <= need {
            return Err(malformed(validated, line, format!("{} fields", rec.len())));
        }
        let Some(code) = accent_code(&rec[c_acc]).filter(|_| !rec[c_acc].trim().is_empty()) else {
            skipped += 1;
            continue;
        };
        let stem = Path::new(&rec[c_path]).with_extension("wav");
        let wav = clips_dir.join(stem.file_name().unwrap_or_default());
        let duration_s = hound::WavReader::open(&wav)
            .map(|r| r.duration() as f64 / r.spec().sample_rate as f64)
            .unwrap_or(0.0);
        utts.push(Utterance {
            id: Path::new(&rec[c_path])
                .file_stem()
                .map_or_else(|| rec[c_path].to_string(), |s| s.to_string_lossy().into_owned()),
            audio_path: wav,
            features: None,
            transcript: rec[c_sent].replace('\t', " "),
            accent: code.to_string(),
            duration_s,
        });
    }
    write_manifest(out, &utts)?;
    Ok((utts.len(), skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn toy_manifest_counts_and_hours() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.tsv",
            "id\taudio_path\ttranscript\taccent\tduration_s\n\
             a\ta.wav\tHello there!\tbermuda\t1800\n\
             b\tb.wav\tyes\tbe\t900\n\
             c\t/abs/c.wav\tGood \"day\"\tph\t3600\n",
        );
        let m = load_manifest(&p, ManifestOptions::default()).unwrap();
        assert_eq!(m.utterances.len(), 3);
        assert_eq!(m.utterances[0].transcript, "hello there");
        assert_eq!(m.utterances[0].audio_path, dir.path().join("a.wav"));
        assert_eq!(m.utterances[2].audio_path, PathBuf::from("/abs/c.wav"));
        assert_eq!(m.stats.len(), 2);
        assert_eq!((m.stats[0].accent.as_str(), m.stats[0].count), ("be", 2));
        assert!((m.stats[0].hours - 0.75).abs() < 1e-12);
        assert_eq!((m.stats[1].accent.as_str(), m.stats[1].count), ("ph", 1));
        assert!((m.stats[1].hours - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_file_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let m = load_manifest(&write(dir.path(), "e.tsv", ""), ManifestOptions::default()).unwrap();
        assert!(m.utterances.is_empty() && m.stats.is_empty());
        let h = write(dir.path(), "h.tsv", "id\taudio_path\ttranscript\taccent\tduration_s\n");
        assert!(load_manifest(&h, ManifestOptions::default()).unwrap().stats.is_empty());
    }

    #[test]
    fn rejects_are_reported_and_malformed_rows_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "r.tsv",
            "id\taudio_path\ttranscript\taccent\tduration_s\n\
             a\ta.wav\thi\tmartian\t1\n\
             b\tb.wav\t?!\tus\t1\n\
             c\tc.wav\tok\tus\t1\n",
        );
        let m = load_manifest(&p, ManifestOptions::default()).unwrap();
        assert_eq!(m.utterances.len(), 1);
        assert_eq!(m.rejects.len(), 2);
        assert_eq!((m.rejects[0].line, m.rejects[1].line), (2, 3));
        let any = load_manifest(&p, ManifestOptions { any_accent: true }).unwrap();
        assert_eq!(any.utterances.len(), 2);

        let bad = write(
            dir.path(),
            "b.tsv",
            "id\taudio_path\ttranscript\taccent\tduration_s\nx\tx.wav\thi\tus\t1\ny\ty.wav\tus\t2\n",
        );
        let err = load_manifest(&bad, ManifestOptions::default()).unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        let dur = write(
            dir.path(),
            "d.tsv",
            "id\taudio_path\ttranscript\taccent\tduration_s\nx\tx.wav\thi\tus\tlong\n",
        );
        assert!(matches!(
            load_manifest(&dur, ManifestOptions::default()),
            Err(DataError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let u = Utterance {
            id: "u1".into(),
            audio_path: dir.path().join("feats").join("u1.f32"),
            features: None,
            transcript: "it's fine".into(),
            accent: "sg".into(),
            duration_s: 2.5,
        };
        let p = dir.path().join("m.tsv");
        write_manifest(&p, std::slice::from_ref(&u)).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().contains("feats/u1.f32"));
        let back = load_manifest(&p, ManifestOptions::default()).unwrap();
        assert_eq!(back.utterances, vec![u]);
    }

    #[test]
    fn commonvoice_conversion() {
        let dir = tempfile::tempdir().unwrap();
        let v = write(
            dir.path(),
            "validated.tsv",
            "client_id\tpath\tsentence\tup_votes\tdown_votes\tage\tgender\taccent\n\
             c1\tcv_1.mp3\tHello.\t2\t0\t\t\tsouthatlandtic\n\
             c2\tcv_2.mp3\tNo accent\t2\t0\t\t\t\n\
             c3\tcv_3.mp3\tHi there\t2\t0\t\t\tindian\n",
        );
        let out = dir.path().join("m.tsv");
        assert_eq!(convert_commonvoice(&v, dir.path(), &out).unwrap(), (2, 1));
        let m = load_manifest(&out, ManifestOptions::default()).unwrap();
        let accents: Vec<_> = m.utterances.iter().map(|u| u.accent.as_str()).collect();
        assert_eq!(accents, ["sa", "in"]);
        assert_eq!(m.utterances[0].id, "cv_1");
    }
}
