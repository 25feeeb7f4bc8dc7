//! Text-rich knowledge graphs: loading, validation, filter sets and 1-hop
//! neighbor sampling.
//!
//! Dense ids are assigned in the order entities (and relations) appear in
//! their text files, so embedding-table rows stay put when splits change.
//! Adjacency is built from the train split only.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub usize);

impl EntityId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub raw_id: String,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: RelationId,
    pub raw_id: String,
    pub name: String,
    pub description: String,
}

impl Relation {
    /// Surface name with `_` and `/` turned into spaces, so Freebase-style
    /// ids such as `/film/actor` read as words.
    pub fn display_name(&self) -> String {
        relation_surface(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeDirection {
    Outgoing,
    Incoming,
}

/// One adjacency entry of an entity: the relation and the entity on the
/// other end of a train triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub relation: RelationId,
    pub neighbor: EntityId,
    pub direction: EdgeDirection,
}

#[derive(Debug, Clone, Default)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub entities: PathBuf,
    pub relations: PathBuf,
}

/// Counts printed after loading, in a fixed key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    train: Vec<Triple>,
    valid: Vec<Triple>,
    test: Vec<Triple>,
    #[serde(skip)]
    adjacency: Vec<Vec<Edge>>,
    #[serde(skip)]
    entity_lookup: HashMap<String, EntityId>,
    #[serde(skip)]
    relation_lookup: HashMap<String, RelationId>,
}

/// Raw text record as read from an entity or relation file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub raw_id: String,
    pub name: String,
    pub description: String,
}

impl TextRecord {
    pub fn new(raw_id: impl Into<String>, name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            raw_id: raw_id.into(),
            name: name.into(),
            description: description.into(),
        }
    }
}

impl KnowledgeGraph {
    /// Builds a graph from already-parsed text records and raw-id triples.
    pub fn from_records(
        entities: Vec<TextRecord>,
        relations: Vec<TextRecord>,
        train: &[(String, String, String)],
        valid: &[(String, String, String)],
        test: &[(String, String, String)],
    ) -> Result<Self> {
        let mut entity_lookup = HashMap::with_capacity(entities.len());
        let mut ents = Vec::with_capacity(entities.len());
        for rec in entities {
            let id = EntityId(ents.len());
            let name = normalize_surface(&rec.name);
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("entity {} has an empty name", rec.raw_id)));
            }
            if entity_lookup.insert(rec.raw_id.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate entity id {}", rec.raw_id)));
            }
            ents.push(Entity {
                id,
                raw_id: rec.raw_id,
                name,
                description: normalize_surface(&rec.description),
            });
        }
        let mut relation_lookup = HashMap::with_capacity(relations.len());
        let mut rels = Vec::with_capacity(relations.len());
        for rec in relations {
            let id = RelationId(rels.len());
            let name = normalize_surface(&rec.name);
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("relation {} has an empty name", rec.raw_id)));
            }
            if relation_lookup.insert(rec.raw_id.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate relation id {}", rec.raw_id)));
            }
            rels.push(Relation {
                id,
                raw_id: rec.raw_id,
                name,
                description: normalize_surface(&rec.description),
            });
        }
        let resolve = |rows: &[(String, String, String)]| -> Result<Vec<Triple>> {
            let mut seen = HashSet::with_capacity(rows.len());
            let mut out = Vec::with_capacity(rows.len());
            for (h, r, t) in rows {
                let triple = Triple {
                    head: *entity_lookup.get(h).ok_or_else(|| Error::UnknownEntity(h.clone()))?,
                    relation: *relation_lookup.get(r).ok_or_else(|| Error::UnknownRelation(r.clone()))?,
                    tail: *entity_lookup.get(t).ok_or_else(|| Error::UnknownEntity(t.clone()))?,
                };
                if seen.insert(triple) {
                    out.push(triple);
                }
            }
            Ok(out)
        };
        let train = resolve(train)?;
        let valid = resolve(valid)?;
        let test = resolve(test)?;
        let mut kg = Self {
            entities: ents,
            relations: rels,
            train,
            valid,
            test,
            adjacency: Vec::new(),
            entity_lookup,
            relation_lookup,
        };
        kg.rebuild_indexes();
        Ok(kg)
    }

    /// Loads TSV triples plus entity and relation text files.
    pub fn load(paths: &SplitPaths) -> Result<Self> {
        let entities = read_text_records(&paths.entities)?;
        let relations = read_text_records(&paths.relations)?;
        let train = read_triples(&paths.train)?;
        let valid = match &paths.valid {
            Some(p) => read_triples(p)?,
            None => Vec::new(),
        };
        let test = match &paths.test {
            Some(p) => read_triples(p)?,
            None => Vec::new(),
        };
        let strip = |rows: Vec<(usize, [String; 3])>| -> Vec<(String, String, String)> {
            rows.into_iter().map(|(_, [h, r, t])| (h, r, t)).collect()
        };
        // Resolve per split so unknown ids can be reported with file and line.
        for (path, rows) in [(Some(&paths.train), &train), (paths.valid.as_ref(), &valid), (paths.test.as_ref(), &test)] {
            let Some(path) = path else { continue };
            let known_e: HashSet<&str> = entities.iter().map(|r| r.raw_id.as_str()).collect();
            let known_r: HashSet<&str> = relations.iter().map(|r| r.raw_id.as_str()).collect();
            for (line, [h, r, t]) in rows.iter() {
                for e in [h, t] {
                    if !known_e.contains(e.as_str()) {
                        return Err(Error::malformed(path, *line, format!("unknown entity {e}")));
                    }
                }
                if !known_r.contains(r.as_str()) {
                    return Err(Error::malformed(path, *line, format!("unknown relation {r}")));
                }
            }
        }
        Self::from_records(entities, relations, &strip(train), &strip(valid), &strip(test))
    }

    /// Restores lookup tables and adjacency after deserialization.
    pub fn rebuild_indexes(&mut self) {
        self.entity_lookup = self.entities.iter().map(|e| (e.raw_id.clone(), e.id)).collect();
        self.relation_lookup = self.relations.iter().map(|r| (r.raw_id.clone(), r.id)).collect();
        let mut adjacency = vec![Vec::new(); self.entities.len()];
        for t in &self.train {
            adjacency[t.head.0].push(Edge {
                relation: t.relation,
                neighbor: t.tail,
                direction: EdgeDirection::Outgoing,
            });
            adjacency[t.tail.0].push(Edge {
                relation: t.relation,
                neighbor: t.head,
                direction: EdgeDirection::Incoming,
            });
        }
        for edges in &mut adjacency {
            edges.sort_unstable();
            edges.dedup();
        }
        self.adjacency = adjacency;
    }

    pub fn report(&self) -> LoadReport {
        LoadReport {
            entities: self.entities.len(),
            relations: self.relations.len(),
            train: self.train.len(),
            valid: self.valid.len(),
            test: self.test.len(),
        }
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities.get(id.0).ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn relation(&self, id: RelationId) -> Result<&Relation> {
        self.relations.get(id.0).ok_or_else(|| Error::UnknownRelation(id.to_string()))
    }

    pub fn entity_by_raw(&self, raw: &str) -> Result<EntityId> {
        self.entity_lookup.get(raw).copied().ok_or_else(|| Error::UnknownEntity(raw.to_string()))
    }

    pub fn relation_by_raw(&self, raw: &str) -> Result<RelationId> {
        self.relation_lookup.get(raw).copied().ok_or_else(|| Error::UnknownRelation(raw.to_string()))
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn adjacency(&self, id: EntityId) -> Result<&[Edge]> {
        self.adjacency
            .get(id.0)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownEntity(id.to_string()))
    }

    pub fn check_triple(&self, t: &Triple) -> Result<()> {
        self.entity(t.head)?;
        self.relation(t.relation)?;
        self.entity(t.tail)?;
        Ok(())
    }

    /// Up to `k` distinct adjacency entries of `entity`, sampled uniformly
    /// without replacement. Output follows adjacency order, so it is stable
    /// for a fixed seed.
    pub fn sample_neighbors(&self, entity: EntityId, k: usize, seed: u64) -> Result<Vec<Edge>> {
        let edges = self.adjacency(entity)?;
        if k >= edges.len() {
            return Ok(edges.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, edges.len(), k).into_vec();
        picked.sort_unstable();
        Ok(picked.into_iter().map(|i| edges[i]).collect())
    }

    /// "‹head name› ‹relation name› ‹tail name›" on a single line.
    pub fn verbalize_triple(&self, triple: &Triple) -> Result<String> {
        let h = self.entity(triple.head)?;
        let r = self.relation(triple.relation)?;
        let t = self.entity(triple.tail)?;
        Ok(format!("{} {} {}", h.name, r.display_name(), t.name))
    }

    /// Verbalizes one adjacency entry from the point of view of its owner,
    /// e.g. "color of red" for an outgoing edge, "apple color of" for an
    /// incoming one.
    pub fn verbalize_edge(&self, edge: &Edge) -> Result<String> {
        let r = self.relation(edge.relation)?.display_name();
        let n = &self.entity(edge.neighbor)?.name;
        Ok(match edge.direction {
            EdgeDirection::Outgoing => format!("{r} {n}"),
            EdgeDirection::Incoming => format!("{n} {r}"),
        })
    }

    /// Writes the graph as pretty JSON. Output is a pure function of the
    /// graph contents.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kg: Self = serde_json::from_str(&text)?;
        kg.rebuild_indexes();
        Ok(kg)
    }
}

/// Known-true answers over every split, used for filtered ranking.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
    heads: HashMap<(EntityId, RelationId), BTreeSet<EntityId>>,
}

impl FilterIndex {
    pub fn build(kg: &KnowledgeGraph) -> Self {
        let mut index = Self::default();
        for t in kg.all_triples() {
            index.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
            index.heads.entry((t.tail, t.relation)).or_default().insert(t.head);
        }
        index
    }

    pub fn true_tails(&self, head: EntityId, relation: RelationId) -> Option<&BTreeSet<EntityId>> {
        self.tails.get(&(head, relation))
    }

    pub fn true_heads(&self, tail: EntityId, relation: RelationId) -> Option<&BTreeSet<EntityId>> {
        self.heads.get(&(tail, relation))
    }

    /// Known answers for a query that holds `known` fixed and asks for the
    /// other end in `direction`.
    pub fn known_answers(&self, known: EntityId, relation: RelationId, direction: crate::Direction) -> Option<&BTreeSet<EntityId>> {
        match direction {
            crate::Direction::PredictTail => self.true_tails(known, relation),
            crate::Direction::PredictHead => self.true_heads(known, relation),
        }
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.true_tails(t.head, t.relation).is_some_and(|s| s.contains(&t.tail))
    }
}

/// Collapses whitespace runs (including tabs) to single spaces.
pub fn normalize_surface(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn relation_surface(name: &str) -> String {
    normalize_surface(&name.replace(['_', '/'], " "))
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads "raw_id\tname[\tdescription]" lines. Blank lines are skipped.
pub fn read_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        match cols.as_slice() {
            [id, name] => out.push(TextRecord::new(*id, *name, "")),
            [id, name, desc] => out.push(TextRecord::new(*id, *name, *desc)),
            _ => {
                return Err(Error::malformed(
                    path,
                    i + 1,
                    format!("expected 2 or 3 tab-separated columns, found {}", cols.len()),
                ))
            }
        }
    }
    Ok(out)
}

/// Reads "head\trelation\ttail" lines, keeping 1-based line numbers.
pub fn read_triples(path: &Path) -> Result<Vec<(usize, [String; 3])>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [h, r, t] = cols.as_slice() else {
            return Err(Error::malformed(
                path,
                i + 1,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        };
        out.push((i + 1, [h.to_string(), r.to_string(), t.to_string()]));
    }
    Ok(out)
}
