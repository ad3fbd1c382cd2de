use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{Document, DocumentKind, IngestError, Span, Turn};

const DEFAULT_MAX_LABEL_CHARS: usize = 40;

/// Reads a plain-text source file into a [`Document`].
///
/// Recognised `parser_hints`:
/// - `id`: document id (defaults to the file stem)
/// - `corpus_id`
/// - `turns`: `auto` (default) or `off` to skip speaker-turn detection
/// - `max_label_chars`: longest accepted speaker label (default 40)
///
/// Any other hint is copied into the document metadata.
pub fn parse_source(
    path: &Path,
    kind: DocumentKind,
    parser_hints: &HashMap<String, String>,
) -> Result<Document, IngestError> {
    let bytes = std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bytes = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(&bytes);
    let raw = std::str::from_utf8(bytes).map_err(|_| IngestError::Encoding {
        path: path.to_path_buf(),
    })?;

    let id = parser_hints.get("id").cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let detect_turns = parser_hints.get("turns").map(String::as_str) != Some("off");
    let max_label = parser_hints
        .get("max_label_chars")
        .and_then(|v| v.parse().ok())
        .unwrap_or(DEFAULT_MAX_LABEL_CHARS);

    let mut doc = parse_text(raw, &id, kind, detect_turns, max_label).ok_or_else(|| {
        IngestError::EmptyDocument {
            path: path.to_path_buf(),
        }
    })?;
    doc.source_path = path.to_string_lossy().into_owned();
    doc.corpus_id = parser_hints.get("corpus_id").cloned().unwrap_or_default();
    doc.metadata = parser_hints
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "id" | "corpus_id" | "turns" | "max_label_chars"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect::<BTreeMap<_, _>>();
    Ok(doc)
}

/// Builds a document from in-memory text. Returns `None` for whitespace-only
/// input.
pub fn parse_text(
    raw: &str,
    id: &str,
    kind: DocumentKind,
    detect_turns: bool,
    max_label_chars: usize,
) -> Option<Document> {
    let text = raw.trim();
    if text.is_empty() {
        return None;
    }
    let turns = if detect_turns {
        detect_speaker_turns(text, max_label_chars)
    } else {
        None
    };
    Some(Document {
        id: id.to_string(),
        corpus_id: String::new(),
        source_path: String::new(),
        kind,
        text: text.to_string(),
        turns,
        metadata: BTreeMap::new(),
    })
}

/// Returns the speaker label when `line` has the form `SPEAKER: utterance`.
fn speaker_label(line: &str, max_label_chars: usize) -> Option<&str> {
    let colon = line.find(':')?;
    let label = &line[..colon];
    let after = &line[colon + 1..];
    // "http://", "10:30" and the like are not speaker lines.
    if !(after.is_empty() || after.starts_with(char::is_whitespace)) {
        return None;
    }
    let first = label.chars().next()?;
    if !first.is_alphanumeric() || label.chars().count() > max_label_chars {
        return None;
    }
    let ok = label
        .chars()
        .all(|c| c.is_alphanumeric() || matches!(c, ' ' | '_' | '-' | '.' | '\'' | '(' | ')' | '#'));
    ok.then(|| label.trim_end())
}

/// Splits `text` into speaker turns. The text only counts as a transcript
/// when its first line is a speaker line; continuation lines belong to the
/// preceding turn.
fn detect_speaker_turns(text: &str, max_label_chars: usize) -> Option<Vec<Turn>> {
    let mut starts: Vec<(usize, &str)> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\r', '\n']);
        if let Some(label) = speaker_label(body, max_label_chars) {
            starts.push((offset, label));
        } else if starts.is_empty() && !body.trim().is_empty() {
            return None;
        }
        offset += line.len();
    }
    if starts.is_empty() {
        return None;
    }

    let turns = starts
        .iter()
        .enumerate()
        .map(|(i, &(start, label))| {
            let limit = starts.get(i + 1).map_or(text.len(), |&(next, _)| next);
            let end = start + text[start..limit].trim_end().len();
            Turn {
                speaker: label.to_string(),
                span: Span::new(start, end),
            }
        })
        .collect();
    Some(turns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn doc(text: &str) -> Option<Document> {
        parse_text(text, "d", DocumentKind::Other, true, DEFAULT_MAX_LABEL_CHARS)
    }

    #[test]
    fn two_speaker_transcript() {
        let d = doc("A: Hello\nB: Hi there").unwrap();
        let turns = d.turns.unwrap();
        let speakers: Vec<_> = turns.iter().map(|t| t.speaker.as_str()).collect();
        assert_eq!(speakers, ["A", "B"]);
        assert_eq!(&d.text[turns[0].span.range()], "A: Hello");
        assert_eq!(&d.text[turns[1].span.range()], "B: Hi there");
    }

    #[test]
    fn continuation_lines_stay_in_turn() {
        let d = doc("Interviewer: So?\n\nConsultant 3: Well,\nit depends.\n\nInterviewer: Go on").unwrap();
        let turns = d.turns.unwrap();
        assert_eq!(turns.len(), 3);
        assert_eq!(&d.text[turns[1].span.range()], "Consultant 3: Well,\nit depends.");
        assert!(turns.windows(2).all(|w| w[0].span.end <= w[1].span.start));
    }

    #[test]
    fn essay_has_no_turns_and_keeps_text() {
        let text = "Fieldnote, March.\nThe server room was cold; nobody used 2FA.\n";
        let d = doc(text).unwrap();
        assert!(d.turns.is_none());
        assert_eq!(d.text, text.trim());
    }

    #[test]
    fn labels_are_constrained() {
        assert!(doc("See http://example.org for details").unwrap().turns.is_none());
        assert!(doc("At 10:30 we met").unwrap().turns.is_none());
        let long = format!("{}: hi", "x".repeat(41));
        assert!(doc(&long).unwrap().turns.is_none());
        let ok = format!("{}: hi", "x".repeat(40));
        assert!(doc(&ok).unwrap().turns.is_some());
    }

    #[test]
    fn whitespace_only_is_empty() {
        assert!(doc("\n \t").is_none());
    }

    #[test]
    fn file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let hints = HashMap::new();

        let empty = dir.path().join("empty.txt");
        std::fs::write(&empty, "\n \t").unwrap();
        assert!(matches!(
            parse_source(&empty, DocumentKind::Other, &hints),
            Err(IngestError::EmptyDocument { .. })
        ));

        let bad = dir.path().join("bad.txt");
        std::fs::write(&bad, [0x66, 0xff, 0xfe]).unwrap();
        assert!(matches!(
            parse_source(&bad, DocumentKind::Other, &hints),
            Err(IngestError::Encoding { .. })
        ));

        assert!(matches!(
            parse_source(&dir.path().join("missing.txt"), DocumentKind::Other, &hints),
            Err(IngestError::Io { .. })
        ));
    }

    #[test]
    fn bom_is_stripped_and_hints_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("int_01.txt");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(b"\xEF\xBB\xBFA: Hej\nB: Hej hej\n").unwrap();
        let hints = HashMap::from([
            ("corpus_id".to_string(), "add".to_string()),
            ("project".to_string(), "ADD".to_string()),
        ]);
        let d = parse_source(&path, DocumentKind::InterviewTranscript, &hints).unwrap();
        assert_eq!(d.id, "int_01");
        assert_eq!(d.corpus_id, "add");
        assert_eq!(d.text, "A: Hej\nB: Hej hej");
        assert_eq!(d.metadata.get("project").map(String::as_str), Some("ADD"));
        assert_eq!(d.turns.unwrap().len(), 2);
    }
}
