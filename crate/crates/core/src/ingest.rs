//! Loading VQA-format datasets: a questions file, an annotations file and a
//! newline-delimited answer list, tied together by a small JSON manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{normalize_answer, to_canonical_json, DomainError, ImageRef, VisualQuestionInstance};
use crate::simbench::{coco_image_name, sim_dataset_name, SimWorld, SIM_IMAGE_ROOT};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: parse error at line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        file: String,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("question {0} has no annotations")]
    MissingAnnotation(u64),
    #[error("duplicate question id {question_id} in {file}")]
    DuplicateQuestionId { file: String, question_id: u64 },
    #[error("id list names question {0}, which is not in the questions file")]
    UnknownQuestionId(u64),
    #[error("answer list has no usable entries")]
    EmptyAnswerList,
    #[error("subset size {n} outside 1..={len}")]
    SubsetOutOfRange { n: usize, len: usize },
    #[error("instance {instance_id}: {source}")]
    Invalid {
        instance_id: String,
        source: DomainError,
    },
}

/// Where a dataset's files live. Relative paths resolve against the
/// directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub questions_path: PathBuf,
    pub annotations_path: PathBuf,
    pub answer_list_path: PathBuf,
    /// Path or URL prefix; image file names are appended to it.
    pub image_root: String,
    /// Optional newline-delimited question ids restricting the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_list_path: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let bytes = read(path)?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| json_error(&path.display().to_string(), &bytes, &e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut m.questions_path, &mut m.annotations_path, &mut m.answer_list_path] {
            *p = base.join(&*p);
        }
        if let Some(p) = &mut m.id_list_path {
            *p = base.join(&*p);
        }
        Ok(m)
    }

    /// Every file the dataset is read from, in a fixed order.
    pub fn files(&self) -> Vec<&Path> {
        let mut v = vec![
            self.questions_path.as_path(),
            self.annotations_path.as_path(),
            self.answer_list_path.as_path(),
        ];
        v.extend(self.id_list_path.as_deref());
        v
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_owned(),
        source,
    })
}

fn offset_of(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .split_inclusive(|&b| b == b'\n')
        .take(line - 1)
        .map(<[u8]>::len)
        .sum::<usize>();
    (line_start + column.saturating_sub(1)).min(bytes.len())
}

fn json_error(file: &str, bytes: &[u8], e: &serde_json::Error) -> IngestError {
    IngestError::Parse {
        file: file.to_owned(),
        line: e.line(),
        column: e.column(),
        offset: offset_of(bytes, e.line(), e.column()),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionEntry {
    pub question_id: u64,
    pub image_id: u64,
    pub question: String,
}

#[derive(Deserialize)]
struct QuestionsFile {
    questions: Vec<QuestionEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub question_id: u64,
    pub answers: Vec<AnswerEntry>,
}

#[derive(Deserialize)]
struct AnnotationsFile {
    annotations: Vec<AnnotationEntry>,
}

/// Parses a questions file: `{"questions": [{question_id, image_id, question}, ...]}`.
/// Extra fields are ignored.
pub fn parse_questions(bytes: &[u8]) -> Result<Vec<QuestionEntry>, IngestError> {
    let f: QuestionsFile =
        serde_json::from_slice(bytes).map_err(|e| json_error("questions", bytes, &e))?;
    let mut seen = HashSet::with_capacity(f.questions.len());
    for q in &f.questions {
        if !seen.insert(q.question_id) {
            return Err(IngestError::DuplicateQuestionId {
                file: "questions".into(),
                question_id: q.question_id,
            });
        }
    }
    Ok(f.questions)
}

/// Parses an annotations file into a map from question id to answer strings,
/// keeping multiplicity and order.
pub fn parse_annotations(bytes: &[u8]) -> Result<HashMap<u64, Vec<String>>, IngestError> {
    let f: AnnotationsFile =
        serde_json::from_slice(bytes).map_err(|e| json_error("annotations", bytes, &e))?;
    let mut out = HashMap::with_capacity(f.annotations.len());
    for a in f.annotations {
        let answers = a.answers.into_iter().map(|x| x.answer).collect();
        if out.insert(a.question_id, answers).is_some() {
            return Err(IngestError::DuplicateQuestionId {
                file: "annotations".into(),
                question_id: a.question_id,
            });
        }
    }
    Ok(out)
}

/// Lines with their starting byte offsets; a trailing `\r` is dropped.
fn utf8_lines<'a>(file: &str, bytes: &'a [u8]) -> Result<Vec<(usize, &'a str)>, IngestError> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let offset = e.valid_up_to();
        let before = &bytes[..offset];
        let line = before.iter().filter(|&&b| b == b'\n').count() + 1;
        let column = offset - before.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1) + 1;
        IngestError::Parse {
            file: file.to_owned(),
            line,
            column,
            offset,
            message: "invalid UTF-8".into(),
        }
    })?;
    let mut offset = 0;
    Ok(text
        .split('\n')
        .map(|l| {
            let start = offset;
            offset += l.len() + 1;
            (start, l.strip_suffix('\r').unwrap_or(l))
        })
        .collect())
}

/// Parses a newline-delimited answer list. Entries are normalized and
/// deduplicated keeping the first occurrence; blank entries are skipped.
pub fn parse_answer_list(bytes: &[u8]) -> Result<Vec<String>, IngestError> {
    let mut seen = HashSet::new();
    let out: Vec<String> = utf8_lines("answer list", bytes)?
        .into_iter()
        .map(|(_, l)| normalize_answer(l))
        .filter(|a| !a.is_empty() && seen.insert(a.clone()))
        .collect();
    if out.is_empty() {
        return Err(IngestError::EmptyAnswerList);
    }
    Ok(out)
}

/// Parses a newline-delimited list of question ids.
pub fn parse_id_list(bytes: &[u8]) -> Result<Vec<u64>, IngestError> {
    let mut out = Vec::new();
    for (i, (offset, line)) in utf8_lines("id list", bytes)?.into_iter().enumerate() {
        let t = line.trim();
        if !t.is_empty() {
            let id = t.parse().map_err(|e: std::num::ParseIntError| IngestError::Parse {
                file: "id list".into(),
                line: i + 1,
                column: 1,
                offset,
                message: e.to_string(),
            })?;
            out.push(id);
        }
    }
    Ok(out)
}

fn image_uri(root: &str, image_id: u64) -> String {
    let sep = if root.is_empty() || root.ends_with('/') { "" } else { "/" };
    format!("{root}{sep}{}", coco_image_name(image_id))
}

/// Joins already-parsed parts into instances, in questions-file order.
pub fn assemble(
    name: &str,
    image_root: &str,
    questions: Vec<QuestionEntry>,
    mut annotations: HashMap<u64, Vec<String>>,
    candidates: Vec<String>,
    id_filter: Option<&[u64]>,
) -> Result<Vec<VisualQuestionInstance>, IngestError> {
    let keep: Option<HashSet<u64>> = match id_filter {
        None => None,
        Some(ids) => {
            let known: HashSet<u64> = questions.iter().map(|q| q.question_id).collect();
            if let Some(&missing) = ids.iter().find(|id| !known.contains(id)) {
                return Err(IngestError::UnknownQuestionId(missing));
            }
            Some(ids.iter().copied().collect())
        }
    };
    let mut out = Vec::with_capacity(questions.len());
    for q in questions {
        if keep.as_ref().is_some_and(|k| !k.contains(&q.question_id)) {
            continue;
        }
        let answers = annotations
            .remove(&q.question_id)
            .filter(|a| !a.is_empty())
            .ok_or(IngestError::MissingAnnotation(q.question_id))?;
        let instance_id = format!("{name}/{}", q.question_id);
        let image = ImageRef::new(image_uri(image_root, q.image_id)).map_err(|source| {
            IngestError::Invalid {
                instance_id: instance_id.clone(),
                source,
            }
        })?;
        let instance = VisualQuestionInstance {
            instance_id,
            image,
            question: q.question,
            annotations: answers,
            candidates: candidates.clone(),
        };
        instance.validate().map_err(|source| IngestError::Invalid {
            instance_id: instance.instance_id.clone(),
            source,
        })?;
        out.push(instance);
    }
    Ok(out)
}

pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<VisualQuestionInstance>, IngestError> {
    let questions = parse_questions(&read(&manifest.questions_path)?)?;
    let annotations = parse_annotations(&read(&manifest.annotations_path)?)?;
    let candidates = parse_answer_list(&read(&manifest.answer_list_path)?)?;
    let ids = match &manifest.id_list_path {
        Some(p) => Some(parse_id_list(&read(p)?)?),
        None => None,
    };
    assemble(
        &manifest.name,
        &manifest.image_root,
        questions,
        annotations,
        candidates,
        ids.as_deref(),
    )
}

/// Draws `n` instances without replacement, in draw order. Uses a partial
/// Fisher-Yates shuffle on a ChaCha stream with 64-bit index draws, so the
/// result does not depend on the platform's word size.
pub fn sample_subset<T: Clone>(instances: &[T], n: usize, seed: u64) -> Result<Vec<T>, IngestError> {
    let len = instances.len();
    if n == 0 || n > len {
        return Err(IngestError::SubsetOutOfRange { n, len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = rng.random_range(i as u64..len as u64) as usize;
        idx.swap(i, j);
    }
    Ok(idx[..n].iter().map(|&i| instances[i].clone()).collect())
}

/// Paths written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct WrittenDataset {
    pub manifest: PathBuf,
    pub questions: PathBuf,
    pub annotations: PathBuf,
    pub answer_list: PathBuf,
}

/// Serializes a simulated world in the same formats [`load_dataset`] reads.
pub fn write_dataset(world: &SimWorld, dir: &Path) -> Result<WrittenDataset, IngestError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| IngestError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let json = |v: &serde_json::Value| -> String {
        let mut s = to_canonical_json(v).expect("finite values only");
        s.push('\n');
        s
    };
    let questions: Vec<serde_json::Value> = world
        .instances
        .iter()
        .map(|s| {
            serde_json::json!({
                "image_id": s.image_id,
                "question": s.instance.question,
                "question_id": s.question_id,
            })
        })
        .collect();
    let annotations: Vec<serde_json::Value> = world
        .instances
        .iter()
        .map(|s| {
            let answers: Vec<_> = s
                .instance
                .annotations
                .iter()
                .enumerate()
                .map(|(i, a)| serde_json::json!({ "answer": a, "answer_id": i + 1 }))
                .collect();
            serde_json::json!({
                "answers": answers,
                "image_id": s.image_id,
                "multiple_choice_answer": s.true_answer,
                "question_id": s.question_id,
            })
        })
        .collect();
    let candidates = world
        .instances
        .first()
        .map(|s| s.instance.candidates.clone())
        .unwrap_or_default();

    let out = WrittenDataset {
        manifest: dir.join("manifest.json"),
        questions: dir.join("questions.json"),
        annotations: dir.join("annotations.json"),
        answer_list: dir.join("answers.txt"),
    };
    let manifest = DatasetManifest {
        name: sim_dataset_name(world.regime, world.seed),
        questions_path: "questions.json".into(),
        annotations_path: "annotations.json".into(),
        answer_list_path: "answers.txt".into(),
        image_root: SIM_IMAGE_ROOT.into(),
        id_list_path: None,
    };
    let files: BTreeMap<&Path, String> = BTreeMap::from([
        (out.questions.as_path(), json(&serde_json::json!({ "questions": questions }))),
        (out.annotations.as_path(), json(&serde_json::json!({ "annotations": annotations }))),
        (out.answer_list.as_path(), candidates.iter().map(|c| format!("{c}\n")).collect()),
        (
            out.manifest.as_path(),
            json(&serde_json::to_value(&manifest).expect("manifest serializes")),
        ),
    ]);
    for (path, content) in files {
        std::fs::write(path, content).map_err(io(path))?;
    }
    Ok(out)
}
