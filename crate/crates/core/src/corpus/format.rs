//! The on-disk question file and its sidecars.
//!
//! ```text
//! <source id>
//!
//! <passage tokens, space separated>
//!
//! <question tokens, containing @placeholder>
//!
//! <answer marker>
//!
//! @entity0:<surface string>
//! @entity1:<surface string>
//! ```
//!
//! Serialization always emits the mapping block (possibly empty) followed by
//! a single newline. Sidecars share the basename: `.sents`, `.deps`, `.pos`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClozeExample, CorpusError, EntityId, Span, Token};
use crate::features::{parse_dep_sidecar, parse_pos_sidecar, Parses, PosTags};
use crate::par;

fn malformed(msg: impl Into<String>) -> CorpusError {
    CorpusError::MalformedFile(msg.into())
}

fn tokenize(block: &str, what: &str) -> Result<Vec<Token>, CorpusError> {
    if block.contains('\n') {
        return Err(malformed(format!("{what} block spans several lines")));
    }
    Ok(block
        .split(' ')
        .filter(|s| !s.is_empty())
        .map(Token::parse)
        .collect())
}

pub fn parse_question_file(bytes: &[u8]) -> Result<ClozeExample, CorpusError> {
    let text = std::str::from_utf8(bytes).map_err(|_| malformed("not valid UTF-8"))?;
    let text = text.replace("\r\n", "\n");
    let text = text.trim_end_matches('\n');
    let blocks: Vec<&str> = text.split("\n\n").collect();
    if !(4..=5).contains(&blocks.len()) {
        return Err(malformed(format!(
            "expected 4 or 5 blank-line separated blocks, found {}",
            blocks.len()
        )));
    }
    let source_id = blocks[0].trim();
    if source_id.contains('\n') {
        return Err(malformed("source id spans several lines"));
    }
    let passage = tokenize(blocks[1], "passage")?;
    let question = tokenize(blocks[2], "question")?;
    let answer: EntityId = blocks[3]
        .trim()
        .parse()
        .map_err(|_| malformed(format!("answer {:?} is not an entity marker", blocks[3])))?;

    let mut entity_strings = BTreeMap::new();
    if let Some(mapping) = blocks.get(4) {
        for line in mapping.lines() {
            let (marker, surface) = line
                .split_once(':')
                .ok_or_else(|| CorpusError::BadEntityMapping(line.to_string()))?;
            let id: EntityId = marker
                .parse()
                .map_err(|_| CorpusError::BadEntityMapping(line.to_string()))?;
            if entity_strings.insert(id, surface.to_string()).is_some() {
                return Err(CorpusError::BadEntityMapping(line.to_string()));
            }
        }
    }

    let example = ClozeExample {
        source_id: source_id.to_string(),
        passage,
        question,
        answer,
        entity_strings,
        sentence_spans: None,
    };
    example.validate()?;
    Ok(example)
}

fn join(tokens: &[Token]) -> String {
    let mut s = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&t.to_string());
    }
    s
}

pub fn serialize_question_file(example: &ClozeExample) -> Vec<u8> {
    let mapping: Vec<String> = example
        .entity_strings
        .iter()
        .map(|(e, s)| format!("{e}:{s}"))
        .collect();
    format!(
        "{}\n\n{}\n\n{}\n\n{}\n\n{}\n",
        example.source_id,
        join(&example.passage),
        join(&example.question),
        example.answer,
        mapping.join("\n")
    )
    .into_bytes()
}

/// Parse a `.sents` sidecar: one `start end` pair per line.
pub fn parse_sentence_sidecar(text: &str, passage_len: usize) -> Result<Vec<Span>, CorpusError> {
    let mut spans = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        let (Some(Ok(start)), Some(Ok(end)), None) = (it.next(), it.next(), it.next()) else {
            return Err(CorpusError::BadSidecar(format!("bad line {line:?}")));
        };
        if start >= end || end > passage_len {
            return Err(CorpusError::BadSidecar(format!(
                "span {start}..{end} outside passage of {passage_len} tokens"
            )));
        }
        spans.push((start, end));
    }
    Ok(spans)
}

/// An example together with whatever sidecars were found next to it.
#[derive(Clone, Debug)]
pub struct LoadedExample {
    pub path: PathBuf,
    pub example: ClozeExample,
    pub parses: Option<Parses>,
    pub pos: Option<PosTags>,
}

fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn read_optional(path: &Path) -> Result<Option<String>, CorpusError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

pub fn load_question_file(path: &Path) -> Result<LoadedExample, CorpusError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut example = parse_question_file(&bytes).map_err(|e| match e {
        CorpusError::MalformedFile(m) => CorpusError::MalformedFile(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(text) = read_optional(&path.with_extension("sents"))? {
        example.sentence_spans = Some(parse_sentence_sidecar(&text, example.passage.len())?);
    }
    let parses = read_optional(&path.with_extension("deps"))?
        .map(|t| parse_dep_sidecar(&t))
        .transpose()
        .map_err(|e| CorpusError::BadSidecar(e.to_string()))?;
    let pos = read_optional(&path.with_extension("pos"))?
        .map(|t| parse_pos_sidecar(&t))
        .transpose()
        .map_err(|e| CorpusError::BadSidecar(e.to_string()))?;
    Ok(LoadedExample { path: path.to_path_buf(), example, parses, pos })
}

/// Load every `*.question` file in `dir`, ordered by file name.
pub fn load_corpus_dir(dir: &Path) -> Result<Vec<LoadedExample>, CorpusError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "question"))
        .collect();
    paths.sort();
    par::map(&paths, |p| load_question_file(p)).into_iter().collect()
}

pub fn write_question_file(path: &Path, example: &ClozeExample) -> Result<(), CorpusError> {
    fs::write(path, serialize_question_file(example)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = "synthetic-1\n\n@entity1 beat @entity2 .\n\n@placeholder beat @entity2\n\n@entity1\n\n\n";

    #[test]
    fn parses_basic_file() {
        let ex = parse_question_file(BASIC.as_bytes()).unwrap();
        assert_eq!(ex.source_id, "synthetic-1");
        assert_eq!(ex.answer, EntityId(1));
        let c: Vec<_> = super::super::candidates(&ex).unwrap().into_iter().collect();
        assert_eq!(c, vec![EntityId(1), EntityId(2)]);
        assert!(ex.entity_strings.is_empty());
        assert_eq!(serialize_question_file(&ex), BASIC.as_bytes());
    }

    #[test]
    fn mapping_lines_are_read() {
        let f = "u\n\n@entity0 and @entity3\n\n@placeholder and @entity3\n\n@entity0\n\n@entity0:Ann Lee\n@entity3:Bob: the builder\n";
        let ex = parse_question_file(f.as_bytes()).unwrap();
        assert_eq!(ex.entity_strings[&EntityId(0)], "Ann Lee");
        assert_eq!(ex.entity_strings[&EntityId(3)], "Bob: the builder");
        assert_eq!(serialize_question_file(&ex), f.as_bytes());
    }

    #[test]
    fn missing_mapping_block_is_accepted() {
        let f = "u\n\n@entity0 x\n\n@placeholder x\n\n@entity0\n";
        let ex = parse_question_file(f.as_bytes()).unwrap();
        assert!(ex.entity_strings.is_empty());
    }

    #[test]
    fn error_paths() {
        let e = |s: &str| parse_question_file(s.as_bytes()).unwrap_err();
        assert!(matches!(e("only\n\ntwo"), CorpusError::MalformedFile(_)));
        assert!(matches!(e("a\n\nb\n\nc\n\nd\n\ne\n\nf"), CorpusError::MalformedFile(_)));
        assert_eq!(
            e("u\n\n@entity1 beat @entity2 .\n\nwho beat @entity2\n\n@entity1\n\n"),
            CorpusError::MissingPlaceholder
        );
        assert_eq!(
            e("u\n\n@entity1 x\n\n@placeholder x\n\n@entity5\n\n"),
            CorpusError::AnswerNotInPassage(EntityId(5))
        );
        assert!(matches!(
            e("u\n\n@entity1 x\n\n@placeholder x\n\n@entity1\n\nentity1 no colon"),
            CorpusError::BadEntityMapping(_)
        ));
        assert!(matches!(
            e("u\n\n@entity1 x\n\n@placeholder x\n\n@entity1\n\n@bogus:Name"),
            CorpusError::BadEntityMapping(_)
        ));
        assert!(matches!(e("u\n\n@entity1 x\n\n@placeholder x\n\nanswer\n\n"), CorpusError::MalformedFile(_)));
        assert!(matches!(parse_question_file(&[0xff, 0xfe]), Err(CorpusError::MalformedFile(_))));
    }

    #[test]
    fn crlf_normalizes() {
        let f = BASIC.replace('\n', "\r\n");
        let ex = parse_question_file(f.as_bytes()).unwrap();
        assert_eq!(serialize_question_file(&ex), BASIC.as_bytes());
    }

    #[test]
    fn sentence_sidecar() {
        assert_eq!(parse_sentence_sidecar("0 3\n3 7\n", 7).unwrap(), vec![(0, 3), (3, 7)]);
        assert!(parse_sentence_sidecar("0 9\n", 7).is_err());
        assert!(parse_sentence_sidecar("2 2\n", 7).is_err());
        assert!(parse_sentence_sidecar("x y\n", 7).is_err());
    }

    #[test]
    fn loads_directory_with_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.question"), BASIC).unwrap();
        fs::write(dir.path().join("a.question"), BASIC.replace("synthetic-1", "first")).unwrap();
        fs::write(dir.path().join("a.sents"), "0 2\n2 4\n").unwrap();
        fs::write(dir.path().join("a.deps"), "-1\tbeat\tnsubj\t@placeholder\n0\tbeat\tnsubj\t@entity1\n").unwrap();
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let loaded = load_corpus_dir(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].example.source_id, "first");
        assert_eq!(loaded[0].example.sentence_spans, Some(vec![(0, 2), (2, 4)]));
        assert!(loaded[0].parses.is_some());
        assert!(loaded[1].parses.is_none());
    }
}
