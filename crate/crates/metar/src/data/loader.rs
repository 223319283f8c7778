//! Benchmark directory reader and writer.
//!
//! Layout (all names are opaque strings, no normalization):
//! - `train_tasks.json` / `dev_tasks.json` / `test_tasks.json`: JSON object,
//!   relation name → array of `[head, relation, tail]` string triples.
//! - `path_graph`: one background triple per line, `head<TAB>relation<TAB>tail`.
//! - `rel2candidates.json`: relation name → array of candidate entity names.
//! - `e1rel_e2.json`: the string `head-name + relation-name` (direct
//!   concatenation) → array of true tail names, for filtered ranking.
//! - `ent2ids.json` / `rel2ids.json` (optional): name → dense id; when present
//!   they pin id assignment, otherwise ids follow first appearance.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;

use crate::data::{
    BackgroundMode, DatasetBundle, EntityId, RelationId, TaskGroups, Triple, TripleStore,
    Vocabulary,
};
use crate::error::{Error, Result};

fn read_required(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => Err(Error::Io { path: path.to_path_buf(), source: e }),
    }
}

fn json_object(path: &Path, text: &str) -> Result<serde_json::Map<String, serde_json::Value>> {
    serde_json::from_str(text).map_err(|e| Error::MalformedJson {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Task file content with key order preserved.
type RawTasks = Vec<(String, Vec<[String; 3]>)>;

fn parse_task_file(path: &Path, split: &'static str) -> Result<RawTasks> {
    let text = read_required(path)?;
    let map = json_object(path, &text)?;
    if map.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    let mut out = Vec::with_capacity(map.len());
    for (relation, value) in map {
        let triples: Vec<[String; 3]> =
            serde_json::from_value(value).map_err(|e| Error::MalformedJson {
                path: path.to_path_buf(),
                reason: format!("relation {relation:?}: {e}"),
            })?;
        for triple in &triples {
            if triple[1] != relation {
                return Err(Error::MalformedJson {
                    path: path.to_path_buf(),
                    reason: format!(
                        "triple under {relation:?} names relation {:?}",
                        triple[1]
                    ),
                });
            }
        }
        out.push((relation, triples));
    }
    Ok(out)
}

/// Optional id file: JSON object name → id. Ids must form a dense 0-based
/// bijection; the returned vector lists names in id order.
fn parse_id_file(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = read_required(path)?;
    let map = json_object(path, &text)?;
    let n = map.len();
    let mut names: Vec<Option<String>> = vec![None; n];
    for (name, value) in map {
        let id = value.as_u64().ok_or_else(|| Error::MalformedJson {
            path: path.to_path_buf(),
            reason: format!("id for {name:?} is not an unsigned integer"),
        })? as usize;
        if id >= n {
            return Err(Error::MalformedJson {
                path: path.to_path_buf(),
                reason: format!("id {id} for {name:?} outside 0..{n}"),
            });
        }
        if names[id].is_some() {
            return Err(Error::MalformedJson {
                path: path.to_path_buf(),
                reason: format!("id {id} assigned twice"),
            });
        }
        names[id] = Some(name);
    }
    Ok(Some(names.into_iter().map(|n| n.expect("dense by pigeonhole")).collect()))
}

/// Name interner that honors pinned id files.
struct Interner {
    vocab: Vocabulary,
    fixed_entities: bool,
    fixed_relations: bool,
}

impl Interner {
    fn new(
        entity_names: Option<Vec<String>>,
        relation_names: Option<Vec<String>>,
    ) -> Self {
        let mut vocab = Vocabulary::new();
        let fixed_entities = entity_names.is_some();
        let fixed_relations = relation_names.is_some();
        for name in entity_names.into_iter().flatten() {
            vocab.intern_entity(&name);
        }
        for name in relation_names.into_iter().flatten() {
            vocab.intern_relation(&name);
        }
        Self { vocab, fixed_entities, fixed_relations }
    }

    fn entity(&mut self, name: &str, context: &str) -> Result<EntityId> {
        if self.fixed_entities {
            self.vocab.entity_id(name).ok_or_else(|| Error::UnknownName {
                kind: "entity",
                name: name.to_string(),
                context: context.to_string(),
            })
        } else {
            Ok(self.vocab.intern_entity(name))
        }
    }

    fn relation(&mut self, name: &str, context: &str) -> Result<RelationId> {
        if self.fixed_relations {
            self.vocab.relation_id(name).ok_or_else(|| Error::UnknownName {
                kind: "relation",
                name: name.to_string(),
                context: context.to_string(),
            })
        } else {
            Ok(self.vocab.intern_relation(name))
        }
    }
}

fn parse_path_graph(path: &Path, interner: &mut Interner) -> Result<Vec<Triple>> {
    let text = read_required(path)?;
    let context = path.display().to_string();
    let mut triples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (head, relation, tail) =
            match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(h), Some(r), Some(t), None) => (h, r, t),
                _ => {
                    return Err(Error::MalformedLine {
                        path: path.to_path_buf(),
                        line: idx + 1,
                        reason: "expected head<TAB>relation<TAB>tail".to_string(),
                    })
                }
            };
        triples.push(Triple::new(
            interner.entity(head, &context)?,
            interner.relation(relation, &context)?,
            interner.entity(tail, &context)?,
        ));
    }
    Ok(triples)
}

fn intern_tasks(raw: &RawTasks, context: &str, interner: &mut Interner) -> Result<TaskGroups> {
    let mut groups = TaskGroups::new();
    for (relation, triples) in raw {
        let rel_id = interner.relation(relation, context)?;
        let pairs = groups.entry(rel_id).or_default();
        for triple in triples {
            let head = interner.entity(&triple[0], context)?;
            let tail = interner.entity(&triple[2], context)?;
            pairs.push((head, tail));
        }
    }
    Ok(groups)
}

fn check_split_overlap(
    first: (&RawTasks, &'static str),
    second: (&RawTasks, &'static str),
) -> Result<()> {
    let names: HashSet<&str> = first.0.iter().map(|(r, _)| r.as_str()).collect();
    for (relation, _) in second.0 {
        if names.contains(relation.as_str()) {
            return Err(Error::SplitOverlap {
                relation: relation.clone(),
                first: first.1,
                second: second.1,
            });
        }
    }
    Ok(())
}

/// Load a benchmark directory under the given background mode.
///
/// The vocabulary always covers every name in the task files and the
/// background graph; the mode decides only which triples are visible. The
/// returned store holds the union of mode-visible triples plus dev/test
/// triples so negative filtering and filtered ranking see everything known.
pub fn load_benchmark(dir: &Path, mode: BackgroundMode) -> Result<DatasetBundle> {
    let train_path = dir.join("train_tasks.json");
    let dev_path = dir.join("dev_tasks.json");
    let test_path = dir.join("test_tasks.json");
    let graph_path = dir.join("path_graph");
    let cand_path = dir.join("rel2candidates.json");
    let truth_path = dir.join("e1rel_e2.json");

    let raw_train = parse_task_file(&train_path, "train")?;
    let raw_dev = parse_task_file(&dev_path, "dev")?;
    let raw_test = parse_task_file(&test_path, "test")?;

    check_split_overlap((&raw_train, "train"), (&raw_dev, "dev"))?;
    check_split_overlap((&raw_train, "train"), (&raw_test, "test"))?;
    check_split_overlap((&raw_dev, "dev"), (&raw_test, "test"))?;

    let mut interner = Interner::new(
        parse_id_file(&dir.join("ent2ids.json"))?,
        parse_id_file(&dir.join("rel2ids.json"))?,
    );

    let mut train_groups = intern_tasks(&raw_train, "train_tasks.json", &mut interner)?;
    let dev_groups = intern_tasks(&raw_dev, "dev_tasks.json", &mut interner)?;
    let test_groups = intern_tasks(&raw_test, "test_tasks.json", &mut interner)?;
    let graph_triples = parse_path_graph(&graph_path, &mut interner)?;

    // Background handling: InTrain folds the graph into the train pool with
    // per-group dedup, PreTrain keeps it aside for the embedding pretrainer,
    // Discard drops the triples (names stay in the vocabulary).
    let mut background_triples = Vec::new();
    match mode {
        BackgroundMode::InTrain => {
            let mut seen: HashMap<RelationId, HashSet<(EntityId, EntityId)>> = HashMap::new();
            for triple in &graph_triples {
                let pairs = train_groups.entry(triple.relation).or_default();
                let seen_pairs = seen
                    .entry(triple.relation)
                    .or_insert_with(|| pairs.iter().copied().collect());
                if seen_pairs.insert((triple.head, triple.tail)) {
                    pairs.push((triple.head, triple.tail));
                }
            }
        }
        BackgroundMode::PreTrain => background_triples = graph_triples.clone(),
        BackgroundMode::Discard => {}
    }

    let mut store = TripleStore::new();
    for (&relation, pairs) in &train_groups {
        for &(head, tail) in pairs {
            store.insert(Triple::new(head, relation, tail));
        }
    }
    if mode == BackgroundMode::PreTrain {
        for triple in &graph_triples {
            store.insert(*triple);
        }
    }
    for groups in [&dev_groups, &test_groups] {
        for (&relation, pairs) in groups {
            for &(head, tail) in pairs {
                store.insert(Triple::new(head, relation, tail));
            }
        }
    }

    let candidates = parse_candidates(&cand_path, &mut interner)?;
    let filtered_truths = build_filtered_truths(&truth_path, &store, &interner.vocab)?;

    Ok(DatasetBundle {
        vocab: interner.vocab,
        store,
        train_groups,
        dev_groups,
        test_groups,
        background_triples,
        mode,
        candidates,
        filtered_truths,
    })
}

/// Candidate lists may not introduce names; duplicates within a list are
/// dropped, keeping the first occurrence.
fn parse_candidates(
    path: &Path,
    interner: &mut Interner,
) -> Result<HashMap<RelationId, Vec<EntityId>>> {
    let text = read_required(path)?;
    let map = json_object(path, &text)?;
    let context = "rel2candidates.json";
    let mut candidates = HashMap::with_capacity(map.len());
    for (relation, value) in map {
        let rel_id = interner.vocab.relation_id(&relation).ok_or_else(|| Error::UnknownName {
            kind: "relation",
            name: relation.clone(),
            context: context.to_string(),
        })?;
        let names: Vec<String> =
            serde_json::from_value(value).map_err(|e| Error::MalformedJson {
                path: path.to_path_buf(),
                reason: format!("relation {relation:?}: {e}"),
            })?;
        let mut list = Vec::with_capacity(names.len());
        let mut seen = HashSet::with_capacity(names.len());
        for name in &names {
            let id = interner.vocab.entity_id(name).ok_or_else(|| Error::UnknownName {
                kind: "entity",
                name: name.clone(),
                context: context.to_string(),
            })?;
            if seen.insert(id) {
                list.push(id);
            }
        }
        candidates.insert(rel_id, list);
    }
    Ok(candidates)
}

/// Filtered-truth map: store membership plus the extra true tails listed in
/// `e1rel_e2.json`. Keys there are opaque concatenations, so known (head,
/// relation) pairs are probed rather than keys split. Tail names unknown to
/// the vocabulary are skipped; they can never appear among candidates.
fn build_filtered_truths(
    path: &Path,
    store: &TripleStore,
    vocab: &Vocabulary,
) -> Result<HashMap<(EntityId, RelationId), HashSet<EntityId>>> {
    let text = read_required(path)?;
    let map = json_object(path, &text)?;
    let mut extra: HashMap<String, Vec<String>> = HashMap::with_capacity(map.len());
    for (key, value) in map {
        let tails: Vec<String> =
            serde_json::from_value(value).map_err(|e| Error::MalformedJson {
                path: path.to_path_buf(),
                reason: format!("key {key:?}: {e}"),
            })?;
        extra.insert(key, tails);
    }

    let mut truths: HashMap<(EntityId, RelationId), HashSet<EntityId>> = HashMap::new();
    for triple in store.triples() {
        truths
            .entry((triple.head, triple.relation))
            .or_default()
            .insert(triple.tail);
    }
    let keys: Vec<(EntityId, RelationId)> = truths.keys().copied().collect();
    for (head, relation) in keys {
        let probe = format!("{}{}", vocab.entity_name(head), vocab.relation_name(relation));
        if let Some(tails) = extra.get(&probe) {
            let entry = truths.entry((head, relation)).or_default();
            for name in tails {
                if let Some(id) = vocab.entity_id(name) {
                    entry.insert(id);
                }
            }
        }
    }
    Ok(truths)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(std::io::BufWriter::new(file))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer(&mut out, value)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e.into() })?;
    out.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn groups_to_json(groups: &TaskGroups, vocab: &Vocabulary) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (&relation, pairs) in groups {
        let rel_name = vocab.relation_name(relation);
        let triples: Vec<serde_json::Value> = pairs
            .iter()
            .map(|&(head, tail)| {
                serde_json::json!([vocab.entity_name(head), rel_name, vocab.entity_name(tail)])
            })
            .collect();
        map.insert(rel_name.to_string(), serde_json::Value::Array(triples));
    }
    serde_json::Value::Object(map)
}

/// Write a bundle back out in the benchmark directory layout, including id
/// files so a reload reproduces the same ids. The bundle is written as-is:
/// a bundle loaded under InTrain writes its merged train pool.
pub fn write_benchmark_dir(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let vocab = &bundle.vocab;

    write_json(&dir.join("train_tasks.json"), &groups_to_json(&bundle.train_groups, vocab))?;
    write_json(&dir.join("dev_tasks.json"), &groups_to_json(&bundle.dev_groups, vocab))?;
    write_json(&dir.join("test_tasks.json"), &groups_to_json(&bundle.test_groups, vocab))?;

    let graph_path = dir.join("path_graph");
    let mut graph = create(&graph_path)?;
    for triple in &bundle.background_triples {
        writeln!(
            graph,
            "{}\t{}\t{}",
            vocab.entity_name(triple.head),
            vocab.relation_name(triple.relation),
            vocab.entity_name(triple.tail)
        )
        .map_err(|e| Error::Io { path: graph_path.clone(), source: e })?;
    }
    graph.flush().map_err(|e| Error::Io { path: graph_path.clone(), source: e })?;

    let mut cand_map = serde_json::Map::new();
    let mut cand_ids: Vec<RelationId> = bundle.candidates.keys().copied().collect();
    cand_ids.sort_unstable();
    for relation in cand_ids {
        let names: Vec<serde_json::Value> = bundle.candidates[&relation]
            .iter()
            .map(|&e| serde_json::Value::String(vocab.entity_name(e).to_string()))
            .collect();
        cand_map.insert(vocab.relation_name(relation).to_string(), serde_json::Value::Array(names));
    }
    write_json(&dir.join("rel2candidates.json"), &serde_json::Value::Object(cand_map))?;

    let mut truth_map = serde_json::Map::new();
    let mut truth_keys: Vec<(EntityId, RelationId)> =
        bundle.filtered_truths.keys().copied().collect();
    truth_keys.sort_unstable();
    for (head, relation) in truth_keys {
        let mut tails: Vec<EntityId> =
            bundle.filtered_truths[&(head, relation)].iter().copied().collect();
        tails.sort_unstable();
        let names: Vec<serde_json::Value> = tails
            .iter()
            .map(|&t| serde_json::Value::String(vocab.entity_name(t).to_string()))
            .collect();
        truth_map.insert(
            format!("{}{}", vocab.entity_name(head), vocab.relation_name(relation)),
            serde_json::Value::Array(names),
        );
    }
    write_json(&dir.join("e1rel_e2.json"), &serde_json::Value::Object(truth_map))?;

    let mut ent_map = serde_json::Map::new();
    for id in 0..vocab.n_entities() {
        ent_map.insert(vocab.entity_name(id).to_string(), serde_json::json!(id));
    }
    write_json(&dir.join("ent2ids.json"), &serde_json::Value::Object(ent_map))?;

    let mut rel_map = serde_json::Map::new();
    for id in 0..vocab.n_relations() {
        rel_map.insert(vocab.relation_name(id).to_string(), serde_json::json!(id));
    }
    write_json(&dir.join("rel2ids.json"), &serde_json::Value::Object(rel_map))?;

    Ok(())
}
