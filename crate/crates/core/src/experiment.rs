//! End-to-end experiment pipeline: configuration, artifact formats and the
//! commands behind the command-line tool.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, bundled_task, compose_corpus, generate_corpus, CorpusError, Submission, Task};
use crate::dsl::{canonical_id, cyclomatic_complexity, modeling_tree, node_ids, Ast, CanonicalId};
use crate::feedback::{
    breakdown_by_category, propagate_and_sweep, select_exemplars, unit_test_probabilities, Averaging, BagOfTrees,
    Breakdown, FeedbackError, KnnEdit, Propagation, SelectionStrategy,
};
use crate::gridworld::{decode_state, GridError, StateLayout, StateVector, WorldSpec, WorldState};
use crate::interpreter::{extract_triples, run, run_unit_tests, HaltReason, HoareTriple, DEFAULT_CAP_PER_SUBTREE, DEFAULT_STEP_LIMIT};
use crate::npm::{
    eval_npm, eval_prediction, smart_init, split_triples, train_joint, CommonBaseline, NpmError, NpmHyper,
    NpmModel, PredictionScore,
};
use crate::numcore::{read_checkpoint, write_checkpoint, NumError};
use crate::treemodels::{predict_feedback, train_feedback, train_rnn_post, Forest, RnnPost, TreeError, TreeHyper, TreeParams};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl ExperimentError {
    /// 1 usage/configuration, 2 data or IO, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 1,
            ExperimentError::Io { .. } | ExperimentError::Data(_) => 2,
            ExperimentError::Numeric(_) => 3,
        }
    }
}

impl From<CorpusError> for ExperimentError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::UnknownTask(_) => ExperimentError::Config(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<NumError> for ExperimentError {
    fn from(e: NumError) -> Self {
        match e {
            NumError::NonFinite(_) | NumError::NotPositiveDefinite => ExperimentError::Numeric(e.to_string()),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<NpmError> for ExperimentError {
    fn from(e: NpmError) -> Self {
        match e {
            NpmError::NonFinite { .. } => ExperimentError::Numeric(e.to_string()),
            NpmError::Num(n) => n.into(),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<TreeError> for ExperimentError {
    fn from(e: TreeError) -> Self {
        match e {
            TreeError::NonFinite { .. } => ExperimentError::Numeric(e.to_string()),
            TreeError::Num(n) => n.into(),
            TreeError::Npm(n) => n.into(),
            _ => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<FeedbackError> for ExperimentError {
    fn from(e: FeedbackError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<GridError> for ExperimentError {
    fn from(e: GridError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

// ---- configuration -------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    pub corpus_size: usize,
    pub seed: u64,
    pub k_budget: usize,
    pub strategy: SelectionStrategy,
    pub averaging: Averaging,
    pub step_limit: usize,
    pub cap_per_subtree: usize,
    pub test_fraction: f64,
    pub compose_size: usize,
    pub out_dir: PathBuf,
    pub npm: NpmHyper,
    pub tree: TreeHyper,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: "maze".into(),
            corpus_size: 2000,
            seed: 0,
            k_budget: 50,
            strategy: SelectionStrategy::KmeansCentroids,
            averaging: Averaging::Micro,
            step_limit: DEFAULT_STEP_LIMIT,
            cap_per_subtree: DEFAULT_CAP_PER_SUBTREE,
            test_fraction: 0.2,
            compose_size: 1000,
            out_dir: PathBuf::from("out"),
            npm: NpmHyper::default(),
            tree: TreeHyper::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the experiment seed into the model hyperparameters.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.npm.seed = seed;
        self.tree.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        bundled_task(&self.task)?;
        self.npm.validate().map_err(ExperimentError::Config)?;
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ExperimentError::Config("test_fraction must be in [0, 1)".into()));
        }
        if self.corpus_size == 0 || self.step_limit == 0 || self.cap_per_subtree == 0 {
            return Err(ExperimentError::Config("corpus_size, step_limit and cap_per_subtree must be positive".into()));
        }
        if self.tree.batch_size == 0 || self.tree.epochs == 0 {
            return Err(ExperimentError::Config("tree batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

// ---- datasets ------------------------------------------------------------------

/// Triples for a set of modeling trees, deduplicated across programs in
/// first-seen order.
pub fn extract_corpus(
    trees: &[Ast],
    worlds: &[(WorldSpec, WorldState)],
    step_limit: usize,
    cap_per_subtree: usize,
) -> Vec<HoareTriple> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for tree in trees {
        for t in extract_triples(tree, worlds, step_limit, cap_per_subtree) {
            if seen.insert(t.key()) {
                out.push(t);
            }
        }
    }
    out
}

/// A loaded corpus with its modeling trees and triples.
pub struct Dataset {
    pub task: Task,
    pub submissions: Vec<Submission>,
    pub trees: Vec<Ast>,
    pub triples: Vec<HoareTriple>,
    pub layout: StateLayout,
}

impl Dataset {
    pub fn build(task: Task, submissions: Vec<Submission>, step_limit: usize, cap: usize) -> Dataset {
        let trees: Vec<Ast> = submissions.iter().map(|s| modeling_tree(&s.program)).collect();
        let worlds = task.worlds();
        let triples = extract_corpus(&trees, &worlds, step_limit, cap);
        let layout = worlds[0].0.layout();
        Dataset { task, submissions, trees, triples, layout }
    }

    /// Generates a fresh corpus for `task`.
    pub fn generate(task: &str, n: usize, seed: u64, step_limit: usize, cap: usize) -> Result<Dataset> {
        let task = bundled_task(task)?;
        let subs = generate_corpus(&task, n, seed)?;
        Ok(Dataset::build(task, subs, step_limit, cap))
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary::of(&self.submissions, &self.triples, self.task.rubric.len())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetSummary {
    pub unique_programs: usize,
    pub submissions: u64,
    pub unique_subtrees: usize,
    pub triples: usize,
    pub unique_states: usize,
    pub annotations: usize,
}

impl DatasetSummary {
    pub fn of(subs: &[Submission], triples: &[HoareTriple], annotations: usize) -> Self {
        let ids: BTreeSet<CanonicalId> = triples.iter().map(|t| t.subtree).collect();
        let states: HashSet<Vec<u8>> = triples.iter().flat_map(|t| [t.pre.to_bits(), t.post.to_bits()]).collect();
        DatasetSummary {
            unique_programs: subs.len(),
            submissions: subs.iter().map(|s| s.frequency).sum(),
            unique_subtrees: ids.len(),
            triples: triples.len(),
            unique_states: states.len(),
            annotations,
        }
    }

    pub fn to_text(&self, task: &str) -> String {
        format!(
            "task\t{task}\nunique programs\t{}\nsubmissions\t{}\nunique subtrees\t{}\ntriples\t{}\nunique states\t{}\nannotations\t{}\n",
            self.unique_programs, self.submissions, self.unique_subtrees, self.triples, self.unique_states, self.annotations
        )
    }
}

/// Header line, then one `world<TAB>pre<TAB>digest<TAB>post` record per
/// triple with base64 bit-packed states.
pub fn write_triples(triples: &[HoareTriple], layout: &StateLayout) -> String {
    let mut out = format!(
        "# d={} layout={} {} {}\n",
        layout.dim(),
        layout.rows,
        layout.cols,
        layout.beeper_max
    );
    for t in triples {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            t.world,
            B64.encode(t.pre.to_bits()),
            t.subtree.to_hex(),
            B64.encode(t.post.to_bits())
        );
    }
    out
}

pub fn read_triples(text: &str) -> Result<(Vec<HoareTriple>, StateLayout)> {
    let bad = |line: usize, msg: &str| ExperimentError::Data(format!("triples line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let nums: Vec<usize> = header
        .trim_start_matches("# d=")
        .replace("layout=", "")
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| bad(1, "malformed header")))
        .collect::<Result<_>>()?;
    let [d, rows, cols, bmax] = nums[..] else {
        return Err(bad(1, "malformed header"));
    };
    let layout = StateLayout::new(rows, cols, u8::try_from(bmax).map_err(|_| bad(1, "beeper max too large"))?);
    if layout.dim() != d {
        return Err(bad(1, "dimension does not match layout"));
    }
    let mut triples = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad(n, "expected 4 fields"));
        }
        let state = |s: &str| -> Result<StateVector> {
            let bytes = B64.decode(s).map_err(|e| bad(n, &e.to_string()))?;
            Ok(StateVector::from_bits(&bytes, d)?)
        };
        triples.push(HoareTriple {
            world: f[0].parse().map_err(|_| bad(n, "bad world index"))?,
            pre: state(f[1])?,
            subtree: f[2].parse().map_err(|e: String| bad(n, &e))?,
            post: state(f[3])?,
        });
    }
    Ok((triples, layout))
}

// ---- postcondition prediction --------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PostModel {
    Npm,
    Npm0,
    Rnn,
    Common,
}

impl PostModel {
    pub fn name(self) -> &'static str {
        match self {
            PostModel::Npm => "npm",
            PostModel::Npm0 => "npm0",
            PostModel::Rnn => "rnn",
            PostModel::Common => "common",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostEval {
    pub model: PostModel,
    pub train: PredictionScore,
    pub test: PredictionScore,
}

/// Train/test triples for postcondition experiments, plus the validation
/// part carved from training for early stopping.
pub struct Splits {
    pub train: Vec<HoareTriple>,
    pub test: Vec<HoareTriple>,
    pub fit: Vec<HoareTriple>,
    pub validation: Vec<HoareTriple>,
}

pub fn make_splits(triples: &[HoareTriple], test_fraction: f64, seed: u64) -> Splits {
    let (train, test) = split_triples(triples, test_fraction, seed);
    let (fit, validation) = split_triples(&train, 0.1, seed.wrapping_add(1));
    Splits { train, test, fit, validation }
}

/// Trained postcondition models.
pub struct PostModels {
    pub npm0: NpmModel<f64>,
    pub npm: Option<NpmModel<f64>>,
    pub rnn: Option<RnnPost<f64>>,
    pub common: CommonBaseline,
}

pub fn train_post_models(
    splits: &Splits,
    layout: &StateLayout,
    forest: &Forest,
    npm_hyper: &NpmHyper,
    tree_hyper: &TreeHyper,
    which: &[PostModel],
) -> Result<PostModels> {
    let (npm0, _) = smart_init::<f64>(&splits.fit, layout, npm_hyper)?;
    let npm = if which.contains(&PostModel::Npm) {
        Some(train_joint(&splits.fit, &splits.validation, npm0.clone(), npm_hyper)?.0)
    } else {
        None
    };
    let rnn = if which.contains(&PostModel::Rnn) {
        Some(train_rnn_post(&splits.fit, forest, &npm0, tree_hyper)?.0)
    } else {
        None
    };
    Ok(PostModels { npm0, npm, rnn, common: CommonBaseline::fit(&splits.train) })
}

pub fn evaluate_post_models(models: &PostModels, splits: &Splits, forest: &Forest, which: &[PostModel]) -> Result<Vec<PostEval>> {
    let layout = &models.npm0.layout;
    let mut out = Vec::new();
    for &model in which {
        let score = |set: &[HoareTriple]| -> Result<PredictionScore> {
            Ok(match model {
                PostModel::Npm0 => eval_npm(&models.npm0, set)?,
                PostModel::Npm => eval_npm(models.npm.as_ref().expect("trained"), set)?,
                PostModel::Rnn => models.rnn.as_ref().expect("trained").eval(forest, set)?,
                PostModel::Common => models.common.eval(set, layout)?,
            })
        };
        out.push(PostEval { model, train: score(&splits.train)?, test: score(&splits.test)? });
    }
    Ok(out)
}

pub fn forest_of(trees: &[Ast]) -> (Forest, Vec<usize>) {
    let mut forest = Forest::new();
    let roots = trees.iter().map(|t| forest.insert(t)).collect();
    (forest, roots)
}

/// Held-out postcondition accuracy for the requested models.
pub fn postcondition_experiment(ds: &Dataset, cfg: &ExperimentConfig, which: &[PostModel]) -> Result<Vec<PostEval>> {
    let splits = make_splits(&ds.triples, cfg.test_fraction, cfg.seed);
    let (forest, _) = forest_of(&ds.trees);
    let models = train_post_models(&splits, &ds.layout, &forest, &cfg.npm, &cfg.tree, which)?;
    evaluate_post_models(&models, &splits, &forest, which)
}

// ---- composability -------------------------------------------------------------

pub const COMPOSE_METHODS: [&str; 5] = ["direct", "product", "npm0_product", "rnn", "common"];

#[derive(Clone, Debug, PartialEq)]
pub struct ComposeRow {
    pub corpus: String,
    pub method: &'static str,
    pub score: PredictionScore,
}

/// Pool programs that finish cleanly on every world.
pub fn composition_pool(trees: &[Ast], worlds: &[(WorldSpec, WorldState)], step_limit: usize) -> Vec<Ast> {
    let mut seen = HashSet::new();
    trees
        .iter()
        .filter(|t| {
            worlds.iter().all(|(spec, start)| {
                let tr = run(t, spec, start, step_limit);
                tr.halted == HaltReason::Finished && !tr.final_state.crashed
            })
        })
        .filter(|t| seen.insert(canonical_id(t)))
        .cloned()
        .collect()
}

/// Scores direct and factored predictions of composed programs' final
/// states. Models train on every triple of the composed programs and of
/// the pool programs run alone.
pub fn compose_experiment(
    pool: &[Ast],
    worlds: &[(WorldSpec, WorldState)],
    parts: usize,
    cfg: &ExperimentConfig,
) -> Result<Vec<ComposeRow>> {
    let corpus_name = format!("compose{parts}");
    if pool.is_empty() {
        return Err(ExperimentError::Data("composition pool is empty".into()));
    }
    let composed = compose_corpus(pool, cfg.compose_size, parts, cfg.seed);
    let mut trees: Vec<Ast> = composed.iter().map(|c| c.program.clone()).collect();
    trees.extend(pool.iter().cloned());
    let triples = extract_corpus(&trees, worlds, cfg.step_limit, cfg.cap_per_subtree);
    let layout = worlds[0].0.layout();
    let (forest, _) = forest_of(&trees);
    let (npm0, _) = smart_init::<f64>(&triples, &layout, &cfg.npm)?;
    let (npm, _) = train_joint(&triples, &[], npm0.clone(), &cfg.npm)?;
    let (rnn, _) = train_rnn_post(&triples, &forest, &npm0, &cfg.tree)?;
    let common = CommonBaseline::fit(&triples);

    // Whole-program triples of the composed programs, tagged with part ids.
    let mut eval: Vec<(HoareTriple, Vec<CanonicalId>)> = Vec::new();
    let mut seen = HashSet::new();
    for c in &composed {
        let part_ids: Vec<CanonicalId> = c.parts.iter().map(canonical_id).collect();
        for w in 0..worlds.len() {
            let t = root_triple(&c.program, worlds, w, cfg.step_limit)?;
            if seen.insert(t.key()) {
                eval.push((t, part_ids.clone()));
            }
        }
    }
    let tests: Vec<HoareTriple> = eval.iter().map(|e| e.0.clone()).collect();
    let parts_of: HashMap<Vec<u8>, &Vec<CanonicalId>> =
        eval.iter().map(|(t, p)| (key_bytes(t), p)).collect();
    let product = |model: &NpmModel<f64>, t: &HoareTriple| -> Option<WorldState> {
        let ids = parts_of.get(&key_bytes(t))?;
        let mut mat = model.embedding(&ids[0])?.clone();
        for id in &ids[1..] {
            mat = model.embedding(id)?.matmul(&mat);
        }
        let dist = model.predict_with(&t.pre.0, &mat).ok()?;
        decode_state(&dist, &layout).ok()
    };
    let mut rows = Vec::new();
    for method in COMPOSE_METHODS {
        let score = match method {
            "direct" => eval_npm(&npm, &tests)?,
            "product" => eval_prediction(|t| product(&npm, t), &tests, &layout)?,
            "npm0_product" => eval_prediction(|t| product(&npm0, t), &tests, &layout)?,
            "rnn" => rnn.eval(&forest, &tests)?,
            _ => common.eval(&tests, &layout)?,
        };
        rows.push(ComposeRow { corpus: corpus_name.clone(), method, score });
    }
    Ok(rows)
}

fn key_bytes(t: &HoareTriple) -> Vec<u8> {
    let (mut a, id, b) = t.key();
    a.extend_from_slice(&id.0);
    a.extend(b);
    a
}

/// The whole-program triple on one world.
fn root_triple(prog: &Ast, worlds: &[(WorldSpec, WorldState)], w: usize, step_limit: usize) -> Result<HoareTriple> {
    let (spec, start) = &worlds[w];
    let tr = run(prog, spec, start, step_limit);
    Ok(HoareTriple {
        pre: crate::gridworld::encode_state(start, spec)?,
        subtree: canonical_id(prog),
        post: crate::gridworld::encode_state(&tr.final_state, spec)?,
        world: w,
    })
}

// ---- feedback propagation ------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeedbackMethod {
    NpmRnn,
    Rnn,
    Bag,
    Knn,
    UnitTest,
}

impl FeedbackMethod {
    pub const ALL: [FeedbackMethod; 5] =
        [FeedbackMethod::NpmRnn, FeedbackMethod::Rnn, FeedbackMethod::Bag, FeedbackMethod::Knn, FeedbackMethod::UnitTest];

    pub fn name(self) -> &'static str {
        match self {
            FeedbackMethod::NpmRnn => "npm_rnn",
            FeedbackMethod::Rnn => "rnn",
            FeedbackMethod::Bag => "bag",
            FeedbackMethod::Knn => "knn",
            FeedbackMethod::UnitTest => "unittest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

/// Everything feedback propagation needs about one corpus.
pub struct FeedbackSetup<'a> {
    pub ds: &'a Dataset,
    pub npm: Option<&'a NpmModel<f64>>,
    /// Tree model width; the NPM's when one is given.
    pub m: usize,
    pub forest: Forest,
    pub roots: Vec<usize>,
    pub labels: Vec<String>,
    pub truth: Vec<Vec<bool>>,
    pub weights: Vec<u64>,
    pub complexity: Vec<usize>,
    pub pass_fraction: Vec<f64>,
    /// Flattened root embedding per program (zeros when unknown).
    pub embeddings: Vec<Vec<f64>>,
    pub post_accuracy: Option<Vec<f64>>,
}

impl<'a> FeedbackSetup<'a> {
    pub fn new(ds: &'a Dataset, npm: Option<&'a NpmModel<f64>>, m: usize) -> Result<Self> {
        let (forest, roots) = forest_of(&ds.trees);
        let labels = ds.task.label_names();
        let truth = ds
            .submissions
            .iter()
            .map(|s| labels.iter().map(|l| s.labels.contains(l)).collect())
            .collect();
        let embeddings = match npm {
            Some(model) => ds
                .trees
                .iter()
                .map(|t| match model.embedding(&canonical_id(t)) {
                    Some(m) => m.as_slice().to_vec(),
                    None => vec![0.0; model.m() * model.m()],
                })
                .collect(),
            None => Vec::new(),
        };
        let post_accuracy = match npm {
            Some(model) => {
                let mut by_id: HashMap<CanonicalId, Vec<HoareTriple>> = HashMap::new();
                for t in &ds.triples {
                    by_id.entry(t.subtree).or_default().push(t.clone());
                }
                let mut acc = Vec::with_capacity(ds.trees.len());
                for t in &ds.trees {
                    let set = by_id.get(&canonical_id(t)).map(Vec::as_slice).unwrap_or(&[]);
                    let s = eval_npm(model, set)?;
                    acc.push(if s.scored > 0 { s.accuracy } else { f64::NAN });
                }
                Some(acc)
            }
            None => None,
        };
        Ok(FeedbackSetup {
            npm,
            m: npm.map_or(m, NpmModel::m),
            roots,
            forest,
            labels,
            truth,
            weights: ds.submissions.iter().map(|s| s.frequency).collect(),
            complexity: ds.submissions.iter().map(|s| cyclomatic_complexity(&s.program)).collect(),
            pass_fraction: ds.trees.iter().map(|t| run_unit_tests(t, &ds.task.tests)).collect(),
            embeddings,
            post_accuracy,
            ds,
        })
    }

    pub fn select(&self, k: usize, strategy: SelectionStrategy, seed: u64) -> Result<Vec<usize>> {
        if strategy == SelectionStrategy::KmeansCentroids && self.npm.is_none() {
            return Err(ExperimentError::Data("k-means selection needs a trained NPM".into()));
        }
        Ok(select_exemplars(&self.weights, &self.embeddings, k, strategy, seed)?)
    }

    /// Probabilities for every program from a model fitted on `exemplars`.
    pub fn predict(&self, method: FeedbackMethod, exemplars: &[usize], hyper: &TreeHyper) -> Result<Vec<Vec<f64>>> {
        let n = self.ds.trees.len();
        Ok(match method {
            FeedbackMethod::NpmRnn | FeedbackMethod::Rnn => {
                let (lookup, m) = match (method, self.npm) {
                    (FeedbackMethod::NpmRnn, Some(model)) => (Some(&model.program_matrices), model.m()),
                    (FeedbackMethod::NpmRnn, None) => {
                        return Err(ExperimentError::Data("npm_rnn needs a trained NPM".into()))
                    }
                    _ => (None, self.m),
                };
                let ex: Vec<(usize, Vec<bool>)> =
                    exemplars.iter().map(|&i| (self.roots[i], self.truth[i].clone())).collect();
                let (params, heads, _) = train_feedback(&ex, self.labels.clone(), &self.forest, m, lookup, hyper)?;
                predict_feedback(&self.forest, &self.roots, &params, &heads, lookup)?
            }
            FeedbackMethod::Bag => {
                let sets: Vec<BTreeSet<CanonicalId>> =
                    self.ds.trees.iter().map(|t| node_ids(t).into_iter().collect()).collect();
                let ex_sets: Vec<BTreeSet<CanonicalId>> = exemplars.iter().map(|&i| sets[i].clone()).collect();
                let ex_truth: Vec<Vec<bool>> = exemplars.iter().map(|&i| self.truth[i].clone()).collect();
                let nb = BagOfTrees::fit(&ex_sets, &ex_truth);
                sets.iter().map(|s| nb.predict(s)).collect()
            }
            FeedbackMethod::Knn => {
                let ex: Vec<(&Ast, CanonicalId, Vec<bool>)> = exemplars
                    .iter()
                    .map(|&i| (&self.ds.submissions[i].program, self.ds.submissions[i].id, self.truth[i].clone()))
                    .collect();
                let mut knn = KnnEdit::new(&ex);
                (0..n).map(|i| knn.predict(&self.ds.submissions[i].program).2).collect()
            }
            FeedbackMethod::UnitTest => {
                self.pass_fraction.iter().map(|&p| unit_test_probabilities(p, &self.labels)).collect()
            }
        })
    }

    /// Fits on the exemplars and scores propagation to every other program.
    pub fn run(
        &self,
        method: FeedbackMethod,
        exemplars: &[usize],
        hyper: &TreeHyper,
        averaging: Averaging,
    ) -> Result<FeedbackOutcome> {
        let probs = self.predict(method, exemplars, hyper)?;
        let chosen: HashSet<usize> = exemplars.iter().copied().collect();
        let rest: Vec<usize> = (0..probs.len()).filter(|i| !chosen.contains(i)).collect();
        let pick = |v: &[Vec<f64>]| rest.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        let p = pick(&probs);
        let t: Vec<Vec<bool>> = rest.iter().map(|&i| self.truth[i].clone()).collect();
        let w: Vec<u64> = rest.iter().map(|&i| self.weights[i]).collect();
        let mass: u64 = exemplars.iter().map(|&i| self.weights[i]).sum();
        let propagation = propagate_and_sweep(&p, &t, &w, mass, averaging);
        let cx: Vec<usize> = rest.iter().map(|&i| self.complexity[i]).collect();
        let acc: Option<Vec<f64>> = self.post_accuracy.as_ref().map(|a| rest.iter().map(|&i| a[i]).collect());
        let breakdown = breakdown_by_category(&p, &t, &w, &self.ds.task, &cx, acc.as_deref());
        Ok(FeedbackOutcome { method, exemplars: exemplars.to_vec(), propagation, breakdown })
    }
}

#[derive(Clone, Debug)]
pub struct FeedbackOutcome {
    pub method: FeedbackMethod,
    pub exemplars: Vec<usize>,
    pub propagation: Propagation,
    pub breakdown: Breakdown,
}

/// NPM trained on every triple of the corpus, for embeddings and injection.
pub fn train_full_npm(ds: &Dataset, hyper: &NpmHyper) -> Result<NpmModel<f64>> {
    let (init, _) = smart_init::<f64>(&ds.triples, &ds.layout, hyper)?;
    Ok(train_joint(&ds.triples, &[], init, hyper)?.0)
}

// ---- commands ------------------------------------------------------------------

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    write_file(&cfg.path("config.toml"), cfg.to_toml().as_bytes())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let task = bundled_task(&cfg.task)?;
    let subs = corpus::read_corpus(&read_text(&cfg.path("corpus.tsv"))?, &read_text(&cfg.path("labels.tsv"))?)?;
    let trees: Vec<Ast> = subs.iter().map(|s| modeling_tree(&s.program)).collect();
    let (triples, layout) = match read_text(&cfg.path("triples.txt")) {
        Ok(text) => read_triples(&text)?,
        Err(_) => {
            let worlds = task.worlds();
            (extract_corpus(&trees, &worlds, cfg.step_limit, cfg.cap_per_subtree), worlds[0].0.layout())
        }
    };
    Ok(Dataset { task, submissions: subs, trees, triples, layout })
}

fn save_npm(path: &Path, model: &NpmModel<f64>) -> Result<()> {
    let mut buf = Vec::new();
    model.save(&mut buf)?;
    write_file(path, &buf)
}

fn load_npm(path: &Path) -> Result<Option<NpmModel<f64>>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(NpmModel::load(&mut bytes.as_slice())?)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(ExperimentError::Io { path: path.to_path_buf(), source }),
    }
}

/// Writes the corpus, labels and rubric.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<()> {
    save_config(cfg)?;
    let task = bundled_task(&cfg.task)?;
    let subs = generate_corpus(&task, cfg.corpus_size, cfg.seed)?;
    write_file(&cfg.path("corpus.tsv"), corpus::write_corpus(&subs).as_bytes())?;
    write_file(&cfg.path("labels.tsv"), corpus::write_labels(&subs).as_bytes())?;
    write_file(&cfg.path("rubric.tsv"), corpus::write_rubric(&task).as_bytes())
}

/// Writes the triples file and the dataset summary.
pub fn cmd_extract(cfg: &ExperimentConfig) -> Result<DatasetSummary> {
    save_config(cfg)?;
    let task = bundled_task(&cfg.task)?;
    let subs = corpus::read_corpus(&read_text(&cfg.path("corpus.tsv"))?, &read_text(&cfg.path("labels.tsv"))?)?;
    let ds = Dataset::build(task, subs, cfg.step_limit, cfg.cap_per_subtree);
    write_file(&cfg.path("triples.txt"), write_triples(&ds.triples, &ds.layout).as_bytes())?;
    let summary = ds.summary();
    write_file(&cfg.path("summary.txt"), summary.to_text(&cfg.task).as_bytes())?;
    Ok(summary)
}

fn curve_csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Trains one postcondition model on the training split and saves it.
pub fn cmd_train(cfg: &ExperimentConfig, model: PostModel) -> Result<()> {
    save_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let splits = make_splits(&ds.triples, cfg.test_fraction, cfg.seed);
    let npm0 = match load_npm(&cfg.path("npm0.ckpt"))? {
        Some(m) => m,
        None => {
            let (m, curve) = smart_init::<f64>(&splits.fit, &ds.layout, &cfg.npm)?;
            save_npm(&cfg.path("npm0.ckpt"), &m)?;
            let rows = curve.iter().enumerate().map(|(e, l)| format!("{e},{l}"));
            write_file(&cfg.path("autoencoder_curve.csv"), curve_csv("epoch,loss", rows).as_bytes())?;
            m
        }
    };
    match model {
        PostModel::Npm0 | PostModel::Common => Ok(()),
        PostModel::Npm => {
            let (m, report) = train_joint(&splits.fit, &splits.validation, npm0, &cfg.npm)?;
            save_npm(&cfg.path("npm.ckpt"), &m)?;
            let rows = report.train_loss.iter().enumerate().map(|(e, l)| {
                format!("{e},{l},{}", report.validation_loss.get(e).map_or(String::new(), f64::to_string))
            });
            write_file(&cfg.path("npm_curve.csv"), curve_csv("epoch,train_loss,validation_loss", rows).as_bytes())
        }
        PostModel::Rnn => {
            let (forest, _) = forest_of(&ds.trees);
            let (rnn, curve) = train_rnn_post(&splits.fit, &forest, &npm0, &cfg.tree)?;
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &rnn.params.to_tensors())?;
            write_file(&cfg.path("rnn.ckpt"), &buf)?;
            let rows = curve.iter().enumerate().map(|(e, l)| format!("{e},{l}"));
            write_file(&cfg.path("rnn_curve.csv"), curve_csv("epoch,loss", rows).as_bytes())
        }
    }
}

/// Scores every available checkpoint and the Common baseline.
pub fn cmd_eval_post(cfg: &ExperimentConfig) -> Result<Vec<PostEval>> {
    save_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let splits = make_splits(&ds.triples, cfg.test_fraction, cfg.seed);
    let (forest, _) = forest_of(&ds.trees);
    let npm0 = load_npm(&cfg.path("npm0.ckpt"))?;
    let npm = load_npm(&cfg.path("npm.ckpt"))?;
    let rnn = match (fs::read(cfg.path("rnn.ckpt")), &npm0) {
        (Ok(bytes), Some(ae)) => {
            let params = TreeParams::from_tensors(&read_checkpoint(&mut bytes.as_slice())?)?;
            Some(RnnPost { params, autoencoder: ae.clone() })
        }
        _ => None,
    };
    let mut which = Vec::new();
    if npm.is_some() {
        which.push(PostModel::Npm);
    }
    if npm0.is_some() {
        which.push(PostModel::Npm0);
    }
    if rnn.is_some() {
        which.push(PostModel::Rnn);
    }
    which.push(PostModel::Common);
    let models = PostModels {
        npm0: match npm0 {
            Some(m) => m,
            None => NpmModel::new(ds.layout.clone(), 1, &mut crate::numcore::rng(0)),
        },
        npm,
        rnn,
        common: CommonBaseline::fit(&splits.train),
    };
    let evals = evaluate_post_models(&models, &splits, &forest, &which)?;
    let rows = evals.iter().map(|e| {
        format!(
            "{},{},{},{},{},{}",
            e.model.name(),
            e.train.accuracy,
            e.test.accuracy,
            e.train.scored,
            e.test.scored,
            e.test.skipped
        )
    });
    write_file(
        &cfg.path("eval_post.csv"),
        curve_csv("model,train_accuracy,test_accuracy,train_scored,test_scored,test_skipped", rows).as_bytes(),
    )?;
    Ok(evals)
}

/// Composability grid for two- and three-part compositions.
pub fn cmd_compose(cfg: &ExperimentConfig) -> Result<Vec<ComposeRow>> {
    save_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let worlds = ds.task.worlds();
    let pool = composition_pool(&ds.trees, &worlds, cfg.step_limit);
    let mut rows = compose_experiment(&pool, &worlds, 2, cfg)?;
    rows.extend(compose_experiment(&pool, &worlds, 3, cfg)?);
    let lines = rows
        .iter()
        .map(|r| format!("{},{},{},{}", r.corpus, r.method, r.score.accuracy, r.score.scored));
    write_file(&cfg.path("compose.csv"), curve_csv("corpus,method,accuracy,scored", lines).as_bytes())?;
    Ok(rows)
}

/// Propagates exemplar labels with one method and writes the curve, the
/// per-label and per-complexity breakdowns and a one-line summary.
pub fn cmd_feedback(cfg: &ExperimentConfig, method: FeedbackMethod) -> Result<FeedbackOutcome> {
    save_config(cfg)?;
    let ds = load_dataset(cfg)?;
    let needs_npm = method == FeedbackMethod::NpmRnn || cfg.strategy == SelectionStrategy::KmeansCentroids;
    let npm = if needs_npm {
        match load_npm(&cfg.path("npm_all.ckpt"))? {
            Some(m) => Some(m),
            None => {
                let m = train_full_npm(&ds, &cfg.npm)?;
                save_npm(&cfg.path("npm_all.ckpt"), &m)?;
                Some(m)
            }
        }
    } else {
        None
    };
    let setup = FeedbackSetup::new(&ds, npm.as_ref(), cfg.npm.m)?;
    let exemplars = setup.select(cfg.k_budget, cfg.strategy, cfg.seed)?;
    let out = setup.run(method, &exemplars, &cfg.tree, cfg.averaging)?;
    let name = method.name();
    let p = &out.propagation;
    let curve = p.curve.points.iter().map(|x| format!("{},{},{}", x.threshold, x.precision, x.recall));
    write_file(&cfg.path(&format!("feedback_{name}_curve.csv")), curve_csv("threshold,precision,recall", curve).as_bytes())?;
    let labels = out.breakdown.labels.iter().map(|l| {
        format!("{},{},{},{},{}", l.label, l.category, l.recall, l.reached, l.positives)
    });
    let cats = out.breakdown.categories.iter().map(|c| {
        format!("{},{},{},{}", c.category, c.mean_recall, c.pooled_recall, c.labels)
    });
    write_file(
        &cfg.path(&format!("feedback_{name}_labels.csv")),
        curve_csv("label,category,recall_at_90,reached,positives", labels).as_bytes(),
    )?;
    write_file(
        &cfg.path(&format!("feedback_{name}_categories.csv")),
        curve_csv("category,mean_recall_at_90,pooled_recall_at_90,labels", cats).as_bytes(),
    )?;
    let bins = out.breakdown.bins.iter().map(|b| {
        format!(
            "{},{},{},{},{},{}",
            b.bin,
            b.programs,
            b.min_complexity,
            b.max_complexity,
            b.recall,
            b.postcondition_accuracy.map_or(String::new(), |a| a.to_string())
        )
    });
    write_file(
        &cfg.path(&format!("feedback_{name}_complexity.csv")),
        curve_csv("bin,programs,min_complexity,max_complexity,recall_at_90,postcondition_accuracy", bins).as_bytes(),
    )?;
    let summary = format!(
        "{name},{},{},{},{},{},{}",
        cfg.strategy,
        cfg.seed,
        cfg.k_budget,
        p.recall,
        p.reached_target,
        p.force_multiplier
    );
    write_file(
        &cfg.path(&format!("feedback_{name}_summary.csv")),
        curve_csv("method,strategy,seed,k,recall_at_90,reached_target,force_multiplier", [summary]).as_bytes(),
    )?;
    Ok(out)
}

/// Collects every report file present in the output directory into
/// `report.txt`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    save_config(cfg)?;
    let mut names: Vec<String> = fs::read_dir(&cfg.out_dir)
        .map_err(|source| ExperimentError::Io { path: cfg.out_dir.clone(), source })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n == "summary.txt" || n == "eval_post.csv" || n == "compose.csv" || n.starts_with("feedback_") && (n.ends_with("_summary.csv") || n.ends_with("_categories.csv")))
        .collect();
    names.sort();
    let mut out = String::new();
    for n in names {
        let _ = writeln!(out, "== {n}");
        out.push_str(&read_text(&cfg.path(&n))?);
        out.push('\n');
    }
    write_file(&cfg.path("report.txt"), out.as_bytes())?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse;

    fn small_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig { corpus_size: 40, out_dir: dir.to_path_buf(), ..Default::default() }.with_seed(3);
        cfg.npm.m = 6;
        cfg.npm.epochs = 3;
        cfg.npm.pretrain_epochs = 3;
        cfg.tree.epochs = 2;
        cfg.k_budget = 5;
        cfg.compose_size = 20;
        cfg
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default().with_seed(9);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = ExperimentConfig::from_toml("task = \"fetch\"\n[npm]\nm = 12\n").unwrap();
        assert_eq!(partial.npm.m, 12);
        assert_eq!(partial.npm.epochs, NpmHyper::default().epochs);
        assert!(ExperimentConfig::from_toml("task = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert_eq!(ExperimentConfig::from_toml("bogus = 1").unwrap_err().exit_code(), 1);
    }

    #[test]
    fn single_move_gives_one_triple_per_world() {
        let mv = parse("move").unwrap();
        let fetch = bundled_task("fetch").unwrap().worlds();
        assert_eq!(extract_corpus(&[mv.clone()], &fetch, 100, 25).len(), 1);
        // Worlds differing only in walls share a start state, so equal
        // observations collapse.
        let worlds = bundled_task("maze").unwrap().worlds();
        let distinct: HashSet<(Vec<u8>, Vec<u8>)> = worlds
            .iter()
            .map(|(spec, start)| {
                let end = run(&mv, spec, start, 100).final_state;
                let enc = |s| crate::gridworld::encode_state(s, spec).unwrap().to_bits();
                (enc(start), enc(&end))
            })
            .collect();
        assert_eq!(extract_corpus(&[mv], &worlds, 100, 25).len(), distinct.len());
    }

    #[test]
    fn triples_file_round_trips() {
        let ds = Dataset::generate("midpoint", 15, 2, 1000, 25).unwrap();
        let text = write_triples(&ds.triples, &ds.layout);
        let (back, layout) = read_triples(&text).unwrap();
        assert_eq!(layout, ds.layout);
        assert_eq!(back, ds.triples);
        assert!(read_triples("# d=3 layout=1 1 0\n").is_err());
        assert!(read_triples(&format!("{}0\tAA\tzz\tAA\n", text.lines().next().unwrap())).is_err());
    }

    #[test]
    fn summary_matches_recount() {
        let ds = Dataset::generate("maze", 30, 4, 1000, 25).unwrap();
        let s = ds.summary();
        let mut ids = Vec::new();
        let mut states = Vec::new();
        for t in &ds.triples {
            if !ids.contains(&t.subtree) {
                ids.push(t.subtree);
            }
            for v in [&t.pre, &t.post] {
                if !states.contains(v) {
                    states.push(v.clone());
                }
            }
        }
        assert_eq!(s.unique_subtrees, ids.len());
        assert_eq!(s.unique_states, states.len());
        assert_eq!(s.triples, ds.triples.len());
        assert_eq!(s.unique_programs, 30);
    }

    #[test]
    fn pipeline_smoke_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        cmd_gen(&cfg).unwrap();
        cmd_extract(&cfg).unwrap();
        for m in [PostModel::Npm0, PostModel::Npm, PostModel::Rnn] {
            cmd_train(&cfg, m).unwrap();
        }
        let evals = cmd_eval_post(&cfg).unwrap();
        assert_eq!(evals.len(), 4);
        for e in &evals {
            assert!((0.0..=1.0).contains(&e.test.accuracy));
        }
        let first = fs::read(cfg.path("eval_post.csv")).unwrap();
        cmd_eval_post(&cfg).unwrap();
        assert_eq!(fs::read(cfg.path("eval_post.csv")).unwrap(), first);
        for m in FeedbackMethod::ALL {
            cmd_feedback(&cfg, m).unwrap();
        }
        let rows = cmd_compose(&cfg).unwrap();
        assert_eq!(rows.len(), 10);
        let report = cmd_report(&cfg).unwrap();
        assert!(report.contains("compose.csv"));
        assert_eq!(ExperimentConfig::load(&cfg.path("config.toml")).unwrap(), cfg);
    }

    #[test]
    fn missing_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let err = cmd_extract(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
