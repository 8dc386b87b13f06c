//! Semantic branch of the support features: sentence templating for
//! object-action pairs, embedding providers, and the learned projection.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::OaVocabulary;
use crate::error::{Error, Result};
use crate::nnkit::{Graph, Linear, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateMode {
    /// Full sentence naming the action and the object.
    #[default]
    Oa,
    /// The object clause is dropped.
    ActionOnly,
}

/// Sentence describing a pair, e.g. "A person is talking on the phone."
pub fn templatize(pair: usize, vocab: &OaVocabulary, mode: TemplateMode) -> String {
    let p = vocab.pair(pair);
    let action = &vocab.actions()[p.action];
    let mut words = vec!["A", "person", "is", action.gerund.as_str()];
    if let (TemplateMode::Oa, Some(o)) = (mode, p.object) {
        let object = &vocab.objects()[o];
        words.extend(
            [vocab.preposition(pair), object.article.as_str(), object.name.as_str()]
                .into_iter()
                .filter(|w| !w.is_empty()),
        );
    }
    format!("{}.", words.join(" "))
}

/// Fixed table of pair embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub rows: HashMap<usize, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_json(text: &str, vocab: &OaVocabulary) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        let mut rows = HashMap::new();
        for (key, row) in file.entries {
            if row.len() != file.dim {
                return Err(Error::Embedding(format!(
                    "entry `{key}` has width {}, expected {}",
                    row.len(),
                    file.dim
                )));
            }
            rows.insert(vocab.pair_from_key(&key)?, row);
        }
        Ok(Self { dim: file.dim, rows })
    }

    pub fn load(path: &std::path::Path, vocab: &OaVocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, vocab)
    }

    pub fn to_json(&self, vocab: &OaVocabulary) -> String {
        let entries = self.rows.iter().map(|(p, r)| (vocab.pair_key(*p), r.clone())).collect();
        serde_json::to_string(&EmbeddingFile { dim: self.dim, entries }).expect("embeddings serialize")
    }

    /// All vocabulary pairs as an `N_s x dim` matrix.
    pub fn to_matrix(&self, vocab: &OaVocabulary) -> Result<Tensor> {
        let pairs: Vec<usize> = (0..vocab.num_pairs()).collect();
        self.lookup(&pairs, vocab)
    }

    fn lookup(&self, pairs: &[usize], vocab: &OaVocabulary) -> Result<Tensor> {
        let mut data = Vec::with_capacity(pairs.len() * self.dim);
        for p in pairs {
            let row = self
                .rows
                .get(p)
                .ok_or_else(|| Error::Embedding(format!("no table row for pair `{}`", vocab.pair_key(*p))))?;
            data.extend_from_slice(row);
        }
        Ok(Tensor::new(pairs.len(), self.dim, data))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_batch")]
    pub max_batch: usize,
    /// Expected embedding width; the first response fixes it when unset.
    #[serde(default)]
    pub dim: Option<usize>,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_batch() -> usize {
    64
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    embeddings: Vec<Vec<f64>>,
}

/// Client for a text-encoder service (`POST {endpoint}/embed`). Results are
/// cached per sentence, so repeated sentences are only requested once.
#[derive(Debug)]
pub struct RemoteEncoder {
    config: RemoteConfig,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, Vec<f64>>>,
    dim: Mutex<Option<usize>>,
    requests: AtomicUsize,
}

impl RemoteEncoder {
    pub fn new(config: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        Self {
            dim: Mutex::new(config.dim),
            config,
            agent,
            cache: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        }
    }

    /// Number of HTTP requests issued so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn dim(&self) -> Option<usize> {
        *self.dim.lock().expect("dim lock")
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        for chunk in missing.chunks(self.config.max_batch.max(1)) {
            let vectors = self.request(chunk)?;
            let mut cache = self.cache.lock().expect("cache lock");
            for (t, v) in chunk.iter().zip(vectors) {
                cache.insert(t.clone(), v);
            }
        }
        let cache = self.cache.lock().expect("cache lock");
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let url = format!("{}/embed", self.config.endpoint.trim_end_matches('/'));
        self.requests.fetch_add(1, Ordering::SeqCst);
        let response = self
            .agent
            .post(&url)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::Service(format!("{url}: {e}")))?;
        let body: EmbedResponse = response
            .into_body()
            .read_json()
            .map_err(|e| Error::Service(format!("{url}: malformed response: {e}")))?;
        if body.embeddings.len() != texts.len() {
            return Err(Error::Service(format!(
                "{} embeddings returned for {} texts",
                body.embeddings.len(),
                texts.len()
            )));
        }
        let mut dim = self.dim.lock().expect("dim lock");
        let expected = *dim.get_or_insert(body.dim);
        if body.dim != expected || body.embeddings.iter().any(|e| e.len() != expected) {
            return Err(Error::Service(format!(
                "embedding width mismatch: expected {expected}, response declares {}",
                body.dim
            )));
        }
        Ok(body.embeddings)
    }
}

/// Source of frozen pair embeddings.
#[derive(Debug)]
pub enum SemanticProvider {
    /// Indicator over pairs, or over actions in action-only mode.
    OneHot,
    Table(EmbeddingTable),
    Remote(RemoteEncoder),
}

impl SemanticProvider {
    pub fn one_hot() -> Self {
        Self::OneHot
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::OneHot => "one-hot",
            Self::Table(_) => "table",
            Self::Remote(_) => "remote",
        }
    }

    /// `|pairs| x d_e` matrix of embeddings.
    pub fn embed_pairs(&self, pairs: &[usize], vocab: &OaVocabulary, mode: TemplateMode) -> Result<Tensor> {
        match self {
            Self::OneHot => {
                let width = match mode {
                    TemplateMode::Oa => vocab.num_pairs(),
                    TemplateMode::ActionOnly => vocab.num_actions(),
                };
                let mut t = Tensor::zeros(pairs.len(), width);
                for (r, &p) in pairs.iter().enumerate() {
                    if p >= vocab.num_pairs() {
                        return Err(Error::Embedding(format!("pair index {p} out of range")));
                    }
                    let col = match mode {
                        TemplateMode::Oa => p,
                        TemplateMode::ActionOnly => vocab.pair(p).action,
                    };
                    t.set(r, col, 1.0);
                }
                Ok(t)
            }
            Self::Table(table) => table.lookup(pairs, vocab),
            Self::Remote(client) => {
                let texts: Vec<String> = pairs.iter().map(|&p| templatize(p, vocab, mode)).collect();
                let rows = client.embed_texts(&texts)?;
                let dim = client.dim().unwrap_or(0);
                if rows.is_empty() {
                    return Ok(Tensor::zeros(0, dim));
                }
                Ok(Tensor::from_rows(&rows))
            }
        }
    }

    /// Embeddings for every vocabulary pair, as a table.
    pub fn materialize(&self, vocab: &OaVocabulary, mode: TemplateMode) -> Result<EmbeddingTable> {
        let pairs: Vec<usize> = (0..vocab.num_pairs()).collect();
        let m = self.embed_pairs(&pairs, vocab, mode)?;
        Ok(EmbeddingTable {
            dim: m.cols(),
            rows: pairs.into_iter().map(|p| (p, m.row(p).to_vec())).collect(),
        })
    }
}

/// Learned affine map from provider width to model width.
#[derive(Clone, Debug)]
pub struct SemanticProjector {
    pub proj: Linear,
}

impl SemanticProjector {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, embed_dim: usize, d: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), embed_dim, d, rng),
        }
    }

    /// Projects constant `n x d_e` provider rows; gradients stop at the rows.
    pub fn forward(&self, g: &mut Graph, raw: &Tensor) -> Var {
        let x = g.constant(raw.clone());
        self.proj.forward(g, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phone_vocab() -> OaVocabulary {
        serde_json::from_value(serde_json::json!({
            "objects": [{"name": "phone", "article": "the"}, {"name": "pizza"}],
            "actions": [
                {"name": "talk", "gerund": "talking", "preposition": "on"},
                {"name": "eat", "gerund": "eating"},
                {"name": "run", "gerund": "running", "allows_null_object": true}
            ],
            "pairs": [
                {"object": "phone", "action": "talk"},
                {"object": "pizza", "action": "eat"},
                {"object": null, "action": "run"}
            ]
        }))
        .unwrap()
    }

    #[test]
    fn template_sentences() {
        let v = phone_vocab();
        assert_eq!(templatize(0, &v, TemplateMode::Oa), "A person is talking on the phone.");
        assert_eq!(templatize(0, &v, TemplateMode::ActionOnly), "A person is talking.");
        assert_eq!(templatize(1, &v, TemplateMode::Oa), "A person is eating a pizza.");
        assert_eq!(templatize(2, &v, TemplateMode::Oa), "A person is running.");
    }

    #[test]
    fn one_hot_rows() {
        let v = OaVocabulary::default_synthetic();
        let p = SemanticProvider::one_hot();
        let m = p.embed_pairs(&[3], &v, TemplateMode::Oa).unwrap();
        assert_eq!(m.shape(), (1, 14));
        assert_eq!(m.get(0, 3), 1.0);
        assert_eq!(m.data().iter().sum::<f64>(), 1.0);
        let a = p.embed_pairs(&[3, 12], &v, TemplateMode::ActionOnly).unwrap();
        assert_eq!(a.shape(), (2, 5));
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.get(1, 3), 1.0);
    }

    #[test]
    fn table_lookup_and_errors() {
        let v = OaVocabulary::default_synthetic();
        let entries: BTreeMap<String, Vec<f64>> =
            (0..v.num_pairs()).map(|i| (v.pair_key(i), vec![0.1 * i as f64; 3])).collect();
        let text = serde_json::json!({"dim": 3, "entries": entries}).to_string();
        let table = EmbeddingTable::from_json(&text, &v).unwrap();
        let p = SemanticProvider::Table(table.clone());
        let m = p.embed_pairs(&[5, 2], &v, TemplateMode::Oa).unwrap();
        assert_eq!(m.row(0), &[0.1 * 5.0; 3]);
        assert_eq!(m.row(1), &[0.1 * 2.0; 3]);
        assert_eq!(EmbeddingTable::from_json(&table.to_json(&v), &v).unwrap(), table);

        let mut partial = table.clone();
        partial.rows.remove(&4);
        let err = SemanticProvider::Table(partial).embed_pairs(&[4], &v, TemplateMode::Oa);
        assert!(matches!(err, Err(Error::Embedding(_))));
        let bad = serde_json::json!({"dim": 2, "entries": {"phone:hold": [1.0]}}).to_string();
        assert!(EmbeddingTable::from_json(&bad, &v).is_err());
    }

    #[test]
    fn embedding_is_order_equivariant() {
        let v = OaVocabulary::default_synthetic();
        let p = SemanticProvider::one_hot();
        let a = p.embed_pairs(&[1, 7, 4], &v, TemplateMode::Oa).unwrap();
        let b = p.embed_pairs(&[4, 1, 7], &v, TemplateMode::Oa).unwrap();
        assert_eq!(a.row(0), b.row(1));
        assert_eq!(a.row(1), b.row(2));
        assert_eq!(a.row(2), b.row(0));
    }

    #[test]
    fn projection_identity_zero_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let proj = SemanticProjector::new(&mut store, "sem", 4, 4, &mut rng);
        let raw = Tensor::row_vector(vec![0.3, -1.0, 2.0, 0.5]);

        let mut ident = store.clone();
        *ident.get_mut(proj.proj.weight) = Tensor::identity(4);
        let mut g = Graph::new(&ident);
        let y = proj.forward(&mut g, &raw);
        assert_eq!(g.value(y), &raw);

        let mut zero = store.clone();
        zero.get_mut(proj.proj.weight).data_mut().fill(0.0);
        let mut g = Graph::new(&zero);
        let y = proj.forward(&mut g, &raw);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let report = check_gradients(&store, 1e-5, usize::MAX, |g| {
            let y = proj.forward(g, &raw);
            let y = g.mul(y, y);
            g.sum_all(y)
        });
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
