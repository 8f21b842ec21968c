//! Recursive tree models over binarized modeling trees. Every node gets an
//! m×m activation `tanh(Σ W_slot·a_child + b + μ·M_node)`; leaves use a
//! single per-type matrix. With program matrices injected this is the
//! NPM-RNN feedback model; with μ = 0 it is the plain RNN.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{node_ids, Ast, CanonicalId, NodeKind, ATOMS, MAX_REPEAT};
use crate::gridworld::{decode_state, StateVector, WorldState};
use crate::interpreter::HoareTriple;
use crate::npm::{NpmError, NpmModel, PredictionScore};
use crate::numcore::{
    bce_with_logit, block_softmax, cross_entropy, dot, grad_check, read_checkpoint, rng, sigmoid,
    softmax_xent_grad, write_checkpoint, AdagradState, GradCheckReport, Matrix, NumError, ParamGroup, Rng,
    Scalar, TensorSet,
};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("no parameters for node type {0}")]
    MissingParameter(String),
    #[error("subtree {0} is not in the forest")]
    UnknownSubtree(CanonicalId),
    #[error("no training examples")]
    Empty,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Npm(#[from] NpmError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeHyper {
    /// Coefficient of the injected program matrices.
    pub mu: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    /// Distinct subtrees (postcondition training) or trees (feedback
    /// training) per minibatch.
    pub batch_size: usize,
    pub epochs: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TreeHyper {
    fn default() -> Self {
        TreeHyper {
            mu: 1.0,
            lambda: 1e-4,
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 100,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

/// Arity of internal node types in binarized trees.
fn arity(kind: &NodeKind) -> usize {
    match kind {
        NodeKind::Not => 1,
        NodeKind::Seq | NodeKind::Repeat | NodeKind::While | NodeKind::If => 2,
        NodeKind::IfElse => 3,
        _ => 0,
    }
}

/// Every node type a binarized modeling tree can contain.
pub fn node_types() -> Vec<NodeKind> {
    let mut kinds = vec![
        NodeKind::Move,
        NodeKind::TurnLeft,
        NodeKind::TurnRight,
        NodeKind::PutBeeper,
        NodeKind::PickBeeper,
        NodeKind::Empty,
        NodeKind::Seq,
        NodeKind::Repeat,
        NodeKind::While,
        NodeKind::If,
        NodeKind::IfElse,
        NodeKind::Not,
    ];
    kinds.extend(ATOMS.iter().cloned());
    kinds.extend((1..=MAX_REPEAT).map(NodeKind::Num));
    kinds
}

/// Per-type parameter matrices, named `W.<TYPE>.<slot>`, `b.<TYPE>` and
/// `leaf.<TYPE>`, plus the injection coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeParams<T> {
    pub m: usize,
    pub mu: f64,
    names: Vec<String>,
    mats: Vec<Matrix<T>>,
    index: HashMap<String, usize>,
}

/// Which parameters a node type uses.
#[derive(Clone, Debug)]
enum Slots {
    Leaf(usize),
    Internal { weights: Vec<usize>, bias: usize },
}

impl<T: Scalar> TreeParams<T> {
    pub fn new(m: usize, mu: f64, init_scale: f64, r: &mut Rng) -> Self {
        let mut p = TreeParams { m, mu, names: Vec::new(), mats: Vec::new(), index: HashMap::new() };
        for kind in node_types() {
            let tag = kind.tag();
            match arity(&kind) {
                0 => p.push(format!("leaf.{tag}"), Matrix::random(m, m, init_scale, r)),
                n => {
                    for slot in 0..n {
                        p.push(format!("W.{tag}.{slot}"), Matrix::random(m, m, init_scale, r));
                    }
                    p.push(format!("b.{tag}"), Matrix::zeros(m, m));
                }
            }
        }
        p
    }

    fn push(&mut self, name: String, mat: Matrix<T>) {
        self.index.insert(name.clone(), self.mats.len());
        self.names.push(name);
        self.mats.push(mat);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.index.get(name).map(|&i| &self.mats[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        self.index.get(name).map(|&i| &mut self.mats[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    fn slots(&self, kind: &NodeKind) -> Result<Slots, TreeError> {
        let tag = kind.tag();
        let find = |name: String| self.index.get(&name).copied().ok_or(TreeError::MissingParameter(name));
        match arity(kind) {
            0 => Ok(Slots::Leaf(find(format!("leaf.{tag}"))?)),
            n => Ok(Slots::Internal {
                weights: (0..n).map(|s| find(format!("W.{tag}.{s}"))).collect::<Result<_, _>>()?,
                bias: find(format!("b.{tag}"))?,
            }),
        }
    }

    /// Biases are excluded from the weight penalty.
    fn penalized(&self, i: usize) -> bool {
        !self.names[i].starts_with("b.")
    }

    pub fn to_tensors(&self) -> TensorSet<T> {
        let mut set = TensorSet::default();
        for (name, mat) in self.names.iter().zip(&self.mats) {
            set.push_matrix(name.clone(), mat);
        }
        set.push_vector("mu", &[T::lit(self.mu)]);
        set
    }

    pub fn from_tensors(set: &TensorSet<T>) -> Result<Self, TreeError> {
        let mu = set.vector("mu")?.first().map_or(0.0, |x| x.as_f64());
        let mut p = TreeParams { m: 0, mu, names: Vec::new(), mats: Vec::new(), index: HashMap::new() };
        for (name, _, _) in &set.tensors {
            if name.starts_with("W.") || name.starts_with("b.") || name.starts_with("leaf.") {
                let mat = set.matrix(name)?;
                p.m = mat.rows();
                p.push(name.clone(), mat);
            }
        }
        for kind in node_types() {
            p.slots(&kind)?;
        }
        Ok(p)
    }
}

/// Per-label linear heads over the row-major flattened root activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackHeads<T> {
    pub labels: Vec<String>,
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<T>,
}

impl<T: Scalar> FeedbackHeads<T> {
    pub fn new(labels: Vec<String>, m: usize) -> Self {
        let n = labels.len();
        FeedbackHeads { labels, weights: vec![vec![T::zero(); m * m]; n], biases: vec![T::zero(); n] }
    }

    pub fn probabilities(&self, root: &Matrix<T>) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, &c)| sigmoid(dot(w, root.as_slice()) + c).as_f64())
            .collect()
    }
}

/// Hash-consed set of subtrees: identical subtrees share one node, and
/// children always precede parents.
#[derive(Clone, Debug, Default)]
pub struct Forest {
    kinds: Vec<NodeKind>,
    children: Vec<Vec<usize>>,
    ids: Vec<CanonicalId>,
    index: HashMap<CanonicalId, usize>,
}

impl Forest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a binarized tree and returns its root node.
    pub fn insert(&mut self, ast: &Ast) -> usize {
        let ids = node_ids(ast);
        let mut pos = 0;
        self.insert_at(ast, &ids, &mut pos)
    }

    fn insert_at(&mut self, ast: &Ast, ids: &[CanonicalId], pos: &mut usize) -> usize {
        let id = ids[*pos];
        *pos += 1;
        if let Some(&i) = self.index.get(&id) {
            *pos += ast.node_count() - 1;
            return i;
        }
        let kids: Vec<usize> = ast.children.iter().map(|c| self.insert_at(c, ids, pos)).collect();
        let i = self.kinds.len();
        self.kinds.push(ast.kind.clone());
        self.children.push(kids);
        self.ids.push(id);
        self.index.insert(id, i);
        i
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn node(&self, id: &CanonicalId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, node: usize) -> CanonicalId {
        self.ids[node]
    }

    /// The given nodes and all their descendants, ascending.
    fn closure(&self, roots: &[usize]) -> Vec<usize> {
        let mut mark = vec![false; self.len()];
        let mut stack: Vec<usize> = roots.to_vec();
        while let Some(n) = stack.pop() {
            if !mark[n] {
                mark[n] = true;
                stack.extend(&self.children[n]);
            }
        }
        (0..self.len()).filter(|&n| mark[n]).collect()
    }
}

/// Program matrices to inject, keyed by subtree id.
pub type NpmLookup<'a, T> = Option<&'a BTreeMap<CanonicalId, Matrix<T>>>;

/// Activations of a set of forest nodes.
#[derive(Clone, Debug)]
pub struct Activations<T> {
    pub nodes: Vec<usize>,
    values: HashMap<usize, Matrix<T>>,
}

impl<T> Activations<T> {
    pub fn get(&self, node: usize) -> Option<&Matrix<T>> {
        self.values.get(&node)
    }
}

/// Forward pass over `roots` and their descendants. Without a lookup the
/// injection term is dropped entirely.
pub fn tree_forward<T: Scalar>(
    forest: &Forest,
    roots: &[usize],
    params: &TreeParams<T>,
    npm: NpmLookup<T>,
) -> Result<Activations<T>, TreeError> {
    let nodes = forest.closure(roots);
    let mu = T::lit(params.mu);
    let mut values: HashMap<usize, Matrix<T>> = HashMap::with_capacity(nodes.len());
    for &n in &nodes {
        let mut z = match params.slots(&forest.kinds[n])? {
            Slots::Leaf(i) => params.mats[i].clone(),
            Slots::Internal { weights, bias } => {
                let mut z = params.mats[bias].clone();
                for (w, c) in weights.iter().zip(&forest.children[n]) {
                    z.add_scaled(T::one(), &params.mats[*w].matmul(&values[c]));
                }
                z
            }
        };
        if let Some(m) = npm.and_then(|l| l.get(&forest.ids[n])) {
            z.add_scaled(mu, m);
        }
        values.insert(n, z.map(T::tanh));
    }
    Ok(Activations { nodes, values })
}

/// Backpropagation through structure. `upstream` holds loss gradients
/// with respect to node activations; returns one gradient per parameter.
fn tree_backward<T: Scalar>(
    forest: &Forest,
    acts: &Activations<T>,
    params: &TreeParams<T>,
    mut upstream: HashMap<usize, Matrix<T>>,
) -> Result<Vec<Option<Matrix<T>>>, TreeError> {
    let m = params.m;
    let mut grads: Vec<Option<Matrix<T>>> = vec![None; params.mats.len()];
    let acc = |grads: &mut Vec<Option<Matrix<T>>>, i: usize, g: &Matrix<T>| {
        grads[i].get_or_insert_with(|| Matrix::zeros(m, m)).add_scaled(T::one(), g);
    };
    for &n in acts.nodes.iter().rev() {
        let Some(da) = upstream.remove(&n) else { continue };
        let a = &acts.values[&n];
        let mut dz = da;
        for (g, &y) in dz.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *g = *g * (T::one() - y * y);
        }
        match params.slots(&forest.kinds[n])? {
            Slots::Leaf(i) => acc(&mut grads, i, &dz),
            Slots::Internal { weights, bias } => {
                acc(&mut grads, bias, &dz);
                for (w, c) in weights.iter().zip(&forest.children[n]) {
                    acc(&mut grads, *w, &dz.matmul_t(&acts.values[c]));
                    let dc = params.mats[*w].t_matmul(&dz);
                    upstream
                        .entry(*c)
                        .and_modify(|e| e.add_scaled(T::one(), &dc))
                        .or_insert(dc);
                }
            }
        }
    }
    Ok(grads)
}

/// Adds `(λ/2)·‖W‖²` over non-bias parameters; returns the penalty.
fn add_tree_penalty<T: Scalar>(params: &TreeParams<T>, lambda: T, grads: &mut [Option<Matrix<T>>]) -> T {
    let mut pen = T::zero();
    for (i, mat) in params.mats.iter().enumerate() {
        if params.penalized(i) {
            pen = pen + T::lit(0.5) * lambda * mat.frob_sq();
            grads[i]
                .get_or_insert_with(|| Matrix::zeros(params.m, params.m))
                .add_scaled(lambda, mat);
        }
    }
    pen
}

struct TreeOptimizer<T> {
    states: Vec<AdagradState<T>>,
}

impl<T: Scalar> TreeOptimizer<T> {
    fn new(params: &TreeParams<T>, lr: f64) -> Self {
        TreeOptimizer { states: params.mats.iter().map(|m| AdagradState::new(m.as_slice().len(), lr)).collect() }
    }

    fn step(&mut self, params: &mut TreeParams<T>, grads: &[Option<Matrix<T>>]) -> Result<(), TreeError> {
        for ((state, mat), g) in self.states.iter_mut().zip(&mut params.mats).zip(grads) {
            if let Some(g) = g {
                state.step(mat.as_mut_slice(), g.as_slice())?;
            }
        }
        Ok(())
    }
}

// ---- postcondition baseline --------------------------------------------------

/// The RNN postcondition model: root activations act as program matrices
/// between a frozen encoder and decoder.
#[derive(Clone, Debug)]
pub struct RnnPost<T> {
    pub params: TreeParams<T>,
    pub autoencoder: NpmModel<T>,
}

struct PostExample<T> {
    node: usize,
    features: Vec<T>,
    post_hot: Vec<usize>,
}

fn encode_all<T: Scalar>(
    ae: &NpmModel<T>,
    forest: &Forest,
    triples: &[HoareTriple],
) -> Result<Vec<PostExample<T>>, TreeError> {
    triples
        .iter()
        .map(|t| {
            let node = forest.node(&t.subtree).ok_or(TreeError::UnknownSubtree(t.subtree))?;
            let pre: Vec<T> = t.pre.0.iter().map(|&x| T::lit(x)).collect();
            Ok(PostExample { node, features: ae.encode(&pre)?, post_hot: t.post.hot_indices(&ae.layout) })
        })
        .collect()
}

/// Mean prediction cross-entropy over `batch` plus the penalty, with
/// parameter gradients.
fn post_objective<T: Scalar>(
    forest: &Forest,
    ae: &NpmModel<T>,
    params: &TreeParams<T>,
    batch: &[&PostExample<T>],
    lambda: f64,
) -> Result<(T, Vec<Option<Matrix<T>>>), TreeError> {
    let roots: Vec<usize> = batch.iter().map(|e| e.node).collect::<BTreeSet<_>>().into_iter().collect();
    let acts = tree_forward(forest, &roots, params, None)?;
    let blocks = ae.layout.blocks();
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut loss = T::zero();
    let mut upstream: HashMap<usize, Matrix<T>> = HashMap::new();
    for e in batch {
        let a = acts.get(e.node).expect("forward covers batch");
        let h = a.matvec(&e.features);
        let q = block_softmax(&crate::numcore::affine(&ae.w_dec, &h, &ae.b_dec)?, &blocks)?;
        loss = loss + cross_entropy(&q, &blocks, &e.post_hot)?;
        let dh = ae.w_dec.matvec_t(&softmax_xent_grad(&q, &e.post_hot));
        upstream
            .entry(e.node)
            .or_insert_with(|| Matrix::zeros(params.m, params.m))
            .add_outer(scale, &dh, &e.features);
    }
    let mut grads = tree_backward(forest, &acts, params, upstream)?;
    let pen = add_tree_penalty(params, T::lit(lambda), &mut grads);
    Ok((loss * scale + pen, grads))
}

/// Trains tree parameters so that each subtree's root activation predicts
/// its postconditions through the frozen autoencoder. Minibatches group
/// triples by subtree.
pub fn train_rnn_post<T: Scalar>(
    triples: &[HoareTriple],
    forest: &Forest,
    autoencoder: &NpmModel<T>,
    hyper: &TreeHyper,
) -> Result<(RnnPost<T>, Vec<f64>), TreeError> {
    if triples.is_empty() {
        return Err(TreeError::Empty);
    }
    let mut r = rng(hyper.seed);
    let mut params = TreeParams::new(autoencoder.m(), 0.0, hyper.init_scale, &mut r);
    let examples = encode_all(autoencoder, forest, triples)?;
    let mut by_node: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_node.entry(e.node).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_node.into_values().collect();
    let mut opt = TreeOptimizer::new(&params, hyper.learning_rate);
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&PostExample<T>> =
                chunk.iter().flat_map(|&g| groups[g].iter().map(|&i| &examples[i])).collect();
            let (loss, grads) = post_objective(forest, autoencoder, &params, &batch, hyper.lambda)?;
            total += loss.as_f64() * batch.len() as f64;
            opt.step(&mut params, &grads)?;
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(TreeError::NonFinite { epoch });
        }
        curve.push(mean);
    }
    Ok((RnnPost { params, autoencoder: autoencoder.clone() }, curve))
}

impl<T: Scalar> RnnPost<T> {
    pub fn predict_state(&self, forest: &Forest, pre: &StateVector, id: &CanonicalId) -> Result<WorldState, TreeError> {
        let node = forest.node(id).ok_or(TreeError::UnknownSubtree(*id))?;
        let acts = tree_forward(forest, &[node], &self.params, None)?;
        let pre: Vec<T> = pre.0.iter().map(|&x| T::lit(x)).collect();
        let dist = self.autoencoder.predict_with(&pre, acts.get(node).unwrap())?;
        Ok(decode_state(&dist, &self.autoencoder.layout).map_err(NpmError::from)?)
    }

    pub fn eval(&self, forest: &Forest, test: &[HoareTriple]) -> Result<PredictionScore, TreeError> {
        // One shared forward pass for all test subtrees.
        let roots: Vec<usize> = test.iter().filter_map(|t| forest.node(&t.subtree)).collect();
        let acts = tree_forward(forest, &roots, &self.params, None)?;
        let layout = &self.autoencoder.layout;
        Ok(crate::npm::eval_prediction(
            |t| {
                let node = forest.node(&t.subtree)?;
                let pre: Vec<T> = t.pre.0.iter().map(|&x| T::lit(x)).collect();
                let dist = self.autoencoder.predict_with(&pre, acts.get(node)?).ok()?;
                decode_state(&dist, layout).ok()
            },
            test,
            layout,
        )?)
    }
}

// ---- feedback ------------------------------------------------------------------

fn feedback_objective<T: Scalar>(
    forest: &Forest,
    params: &TreeParams<T>,
    heads: &FeedbackHeads<T>,
    examples: &[(usize, Vec<bool>)],
    npm: NpmLookup<T>,
    lambda: f64,
) -> Result<(T, Vec<Option<Matrix<T>>>, FeedbackHeads<T>), TreeError> {
    let roots: Vec<usize> = examples.iter().map(|e| e.0).collect();
    let acts = tree_forward(forest, &roots, params, npm)?;
    let m = params.m;
    let scale = T::one() / T::lit(examples.len() as f64);
    let mut head_grads = FeedbackHeads::new(heads.labels.clone(), m);
    let mut loss = T::zero();
    let mut upstream: HashMap<usize, Matrix<T>> = HashMap::new();
    for (root, truth) in examples {
        let a = acts.get(*root).unwrap();
        let mut da = Matrix::zeros(m, m);
        for (l, &y) in truth.iter().enumerate() {
            let z = dot(&heads.weights[l], a.as_slice()) + heads.biases[l];
            loss = loss + bce_with_logit(z, y);
            let dz = scale * (sigmoid(z) - if y { T::one() } else { T::zero() });
            for (g, &x) in head_grads.weights[l].iter_mut().zip(a.as_slice()) {
                *g = *g + dz * x;
            }
            for (d, &w) in da.as_mut_slice().iter_mut().zip(&heads.weights[l]) {
                *d = *d + dz * w;
            }
            head_grads.biases[l] = head_grads.biases[l] + dz;
        }
        upstream.entry(*root).and_modify(|e| e.add_scaled(T::one(), &da)).or_insert(da);
    }
    let mut grads = tree_backward(forest, &acts, params, upstream)?;
    let lam = T::lit(lambda);
    let mut pen = add_tree_penalty(params, lam, &mut grads);
    for (g, w) in head_grads.weights.iter_mut().zip(&heads.weights) {
        pen = pen + T::lit(0.5) * lam * dot(w, w);
        for (gi, &wi) in g.iter_mut().zip(w) {
            *gi = *gi + lam * wi;
        }
    }
    Ok((loss * scale + pen, grads, head_grads))
}

/// Trains tree parameters and per-label heads on labeled exemplar trees
/// (forest roots). Injected program matrices stay fixed.
pub fn train_feedback<T: Scalar>(
    exemplars: &[(usize, Vec<bool>)],
    labels: Vec<String>,
    forest: &Forest,
    m: usize,
    npm: NpmLookup<T>,
    hyper: &TreeHyper,
) -> Result<(TreeParams<T>, FeedbackHeads<T>, Vec<f64>), TreeError> {
    if exemplars.is_empty() {
        return Err(TreeError::Empty);
    }
    let mut r = rng(hyper.seed);
    let mu = if npm.is_some() { hyper.mu } else { 0.0 };
    let mut params = TreeParams::new(m, mu, hyper.init_scale, &mut r);
    let mut heads = FeedbackHeads::new(labels, m);
    let mut opt = TreeOptimizer::new(&params, hyper.learning_rate);
    let mut head_opt: Vec<AdagradState<T>> =
        heads.weights.iter().map(|w| AdagradState::new(w.len(), hyper.learning_rate)).collect();
    let mut bias_opt = AdagradState::new(heads.biases.len(), hyper.learning_rate);
    let mut curve = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..exemplars.len()).collect();
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<(usize, Vec<bool>)> = chunk.iter().map(|&i| exemplars[i].clone()).collect();
            let (loss, grads, hg) = feedback_objective(forest, &params, &heads, &batch, npm, hyper.lambda)?;
            total += loss.as_f64() * batch.len() as f64;
            opt.step(&mut params, &grads)?;
            for ((st, w), g) in head_opt.iter_mut().zip(&mut heads.weights).zip(&hg.weights) {
                st.step(w, g)?;
            }
            bias_opt.step(&mut heads.biases, &hg.biases)?;
        }
        let mean = total / exemplars.len() as f64;
        if !mean.is_finite() {
            return Err(TreeError::NonFinite { epoch });
        }
        curve.push(mean);
    }
    Ok((params, heads, curve))
}

/// Per-label probabilities for each root, sharing one forward pass.
pub fn predict_feedback<T: Scalar>(
    forest: &Forest,
    roots: &[usize],
    params: &TreeParams<T>,
    heads: &FeedbackHeads<T>,
    npm: NpmLookup<T>,
) -> Result<Vec<Vec<f64>>, TreeError> {
    let npm = if params.mu == 0.0 { None } else { npm };
    let acts = tree_forward(forest, roots, params, npm)?;
    Ok(roots.iter().map(|r| heads.probabilities(acts.get(*r).unwrap())).collect())
}

pub fn save_feedback_model<T: Scalar>(
    w: &mut impl Write,
    params: &TreeParams<T>,
    heads: &FeedbackHeads<T>,
) -> Result<(), TreeError> {
    let mut set = params.to_tensors();
    for ((label, wts), &b) in heads.labels.iter().zip(&heads.weights).zip(&heads.biases) {
        let mut v = wts.clone();
        v.push(b);
        set.push_vector(format!("head.{label}"), &v);
    }
    Ok(write_checkpoint(w, &set)?)
}

pub fn load_feedback_model<T: Scalar>(r: &mut impl Read) -> Result<(TreeParams<T>, FeedbackHeads<T>), TreeError> {
    let set = read_checkpoint(r)?;
    let params = TreeParams::from_tensors(&set)?;
    let mut heads = FeedbackHeads::new(Vec::new(), params.m);
    for (name, _, data) in &set.tensors {
        if let Some(label) = name.strip_prefix("head.") {
            let (w, b) = data.split_at(data.len() - 1);
            heads.labels.push(label.to_string());
            heads.weights.push(w.to_vec());
            heads.biases.push(b[0]);
        }
    }
    Ok((params, heads))
}

// ---- gradient checks ---------------------------------------------------------

fn param_groups<T: Scalar>(params: &TreeParams<T>, grads: &[Option<Matrix<T>>]) -> Vec<ParamGroup<T>> {
    params
        .names
        .iter()
        .zip(&params.mats)
        .zip(grads)
        .map(|((name, mat), g)| ParamGroup {
            name: name.clone(),
            values: mat.as_slice().to_vec(),
            grad: g.as_ref().map_or_else(|| vec![T::zero(); mat.as_slice().len()], |g| g.as_slice().to_vec()),
        })
        .collect()
}

fn load_groups<T: Scalar>(params: &mut TreeParams<T>, groups: &[ParamGroup<T>]) {
    for (mat, g) in params.mats.iter_mut().zip(groups) {
        mat.as_mut_slice().copy_from_slice(&g.values);
    }
}

/// Finite-difference check of the postcondition objective over all
/// triples.
pub fn rnn_post_gradient_check<T: Scalar>(
    params: &TreeParams<T>,
    forest: &Forest,
    autoencoder: &NpmModel<T>,
    triples: &[HoareTriple],
    lambda: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TreeError> {
    let examples = encode_all(autoencoder, forest, triples)?;
    let batch: Vec<&PostExample<T>> = examples.iter().collect();
    let (_, grads) = post_objective(forest, autoencoder, params, &batch, lambda)?;
    let mut groups = param_groups(params, &grads);
    let mut scratch = params.clone();
    let loss = |gs: &[ParamGroup<T>]| {
        load_groups(&mut scratch, gs);
        post_objective(forest, autoencoder, &scratch, &batch, lambda).expect("objective").0
    };
    Ok(grad_check(loss, &mut groups, tolerance, seed))
}

/// Finite-difference check of the feedback objective, heads included.
#[allow(clippy::too_many_arguments)]
pub fn feedback_gradient_check<T: Scalar>(
    params: &TreeParams<T>,
    heads: &FeedbackHeads<T>,
    forest: &Forest,
    examples: &[(usize, Vec<bool>)],
    npm: NpmLookup<T>,
    lambda: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, TreeError> {
    let (_, grads, hg) = feedback_objective(forest, params, heads, examples, npm, lambda)?;
    let mut groups = param_groups(params, &grads);
    let n_tree = groups.len();
    for (l, label) in heads.labels.iter().enumerate() {
        let mut values = heads.weights[l].clone();
        values.push(heads.biases[l]);
        let mut grad = hg.weights[l].clone();
        grad.push(hg.biases[l]);
        groups.push(ParamGroup { name: format!("head.{label}"), values, grad });
    }
    let mut scratch = params.clone();
    let mut scratch_heads = heads.clone();
    let loss = |gs: &[ParamGroup<T>]| {
        load_groups(&mut scratch, &gs[..n_tree]);
        for (l, g) in gs[n_tree..].iter().enumerate() {
            let (w, b) = g.values.split_at(g.values.len() - 1);
            scratch_heads.weights[l].copy_from_slice(w);
            scratch_heads.biases[l] = b[0];
        }
        feedback_objective(forest, &scratch, &scratch_heads, examples, npm, lambda).expect("objective").0
    };
    Ok(grad_check(loss, &mut groups, tolerance, seed))
}
