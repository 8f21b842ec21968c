//! The nonparametric program-embedding model: a shared state encoder and
//! decoder plus one m×m matrix per unique subtree, relating encoded pre- and
//! postconditions linearly.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::CanonicalId;
use crate::gridworld::{decode_state, state_variable_accuracy, GridError, StateLayout, StateVector, WorldState};
use crate::interpreter::HoareTriple;
use crate::numcore::{
    affine, block_softmax, cross_entropy, grad_check, read_checkpoint, ridge_regression, rng,
    softmax_xent_grad, tanh_backward, tanh_elementwise, write_checkpoint, AdagradState, GradCheckReport, Matrix,
    NumError, ParamGroup, Rng, Scalar, TensorSet,
};

#[derive(Debug, Error)]
pub enum NpmError {
    #[error("state has dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("no embedding matrix for subtree {0}")]
    UnknownSubtree(CanonicalId),
    #[error("no training triples")]
    Empty,
    #[error("loss became non-finite at epoch {epoch} (last finite loss {last:?})")]
    NonFinite { epoch: usize, last: Option<f64> },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NpmHyper {
    /// Feature dimension.
    pub m: usize,
    pub lambda: f64,
    pub lambda_ridge: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs of autoencoder pretraining during smart initialization.
    pub pretrain_epochs: usize,
    /// Early-stopping patience in epochs when a validation set is given.
    pub patience: usize,
    /// Include the program matrices in the weight penalty.
    pub regularize_programs: bool,
    pub seed: u64,
}

impl Default for NpmHyper {
    fn default() -> Self {
        NpmHyper {
            m: 30,
            lambda: 1e-5,
            lambda_ridge: 1e-3,
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 200,
            pretrain_epochs: 200,
            patience: 10,
            regularize_programs: true,
            seed: 0,
        }
    }
}

impl NpmHyper {
    pub fn validate(&self) -> Result<(), String> {
        let ok = self.m > 0
            && self.lambda >= 0.0
            && self.lambda_ridge > 0.0
            && self.learning_rate > 0.0
            && self.batch_size > 0;
        if ok {
            Ok(())
        } else {
            Err(format!("invalid hyperparameters {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpmModel<T> {
    pub w_enc: Matrix<T>,
    pub b_enc: Vec<T>,
    pub w_dec: Matrix<T>,
    pub b_dec: Vec<T>,
    pub program_matrices: BTreeMap<CanonicalId, Matrix<T>>,
    pub layout: StateLayout,
}

/// Loss per epoch; validation is empty when no validation set was given.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// A triple with its states converted for training.
#[derive(Clone, Debug)]
struct Prepared<T> {
    pre: Vec<T>,
    pre_hot: Vec<usize>,
    post_hot: Vec<usize>,
    id: CanonicalId,
}

#[derive(Clone, Debug)]
struct Grads<T> {
    w_enc: Matrix<T>,
    b_enc: Vec<T>,
    w_dec: Matrix<T>,
    b_dec: Vec<T>,
    programs: BTreeMap<CanonicalId, Matrix<T>>,
}

fn to_scalar<T: Scalar>(v: &StateVector) -> Vec<T> {
    v.0.iter().map(|&x| T::lit(x)).collect()
}

fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a = *a + alpha * b;
    }
}

impl<T: Scalar> NpmModel<T> {
    /// Glorot-uniform weights, zero biases, no program matrices.
    pub fn new(layout: StateLayout, m: usize, r: &mut Rng) -> Self {
        let d = layout.dim();
        let scale = (6.0 / (d + m) as f64).sqrt();
        NpmModel {
            w_enc: Matrix::random(m, d, scale, r),
            b_enc: vec![T::zero(); m],
            w_dec: Matrix::random(d, m, scale, r),
            b_dec: vec![T::zero(); d],
            program_matrices: BTreeMap::new(),
            layout,
        }
    }

    pub fn m(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn encode(&self, state: &[T]) -> Result<Vec<T>, NpmError> {
        if state.len() != self.dim() {
            return Err(NpmError::Dimension { expected: self.dim(), found: state.len() });
        }
        Ok(tanh_elementwise(&affine(&self.w_enc, state, &self.b_enc)?))
    }

    /// Per-block distributions over the state variables.
    pub fn decode(&self, features: &[T]) -> Result<Vec<T>, NpmError> {
        if features.len() != self.m() {
            return Err(NpmError::Dimension { expected: self.m(), found: features.len() });
        }
        let logits = affine(&self.w_dec, features, &self.b_dec)?;
        Ok(block_softmax(&logits, &self.layout.blocks())?)
    }

    pub fn embedding(&self, id: &CanonicalId) -> Option<&Matrix<T>> {
        self.program_matrices.get(id)
    }

    pub fn predict_post(&self, pre: &[T], id: &CanonicalId) -> Result<Vec<T>, NpmError> {
        let mat = self.embedding(id).ok_or(NpmError::UnknownSubtree(*id))?;
        self.predict_with(pre, mat)
    }

    /// Decodes `mat · encode(pre)`; used for products of program matrices.
    pub fn predict_with(&self, pre: &[T], mat: &Matrix<T>) -> Result<Vec<T>, NpmError> {
        let f = self.encode(pre)?;
        self.decode(&mat.matvec(&f))
    }

    pub fn predict_state(&self, pre: &StateVector, id: &CanonicalId) -> Result<WorldState, NpmError> {
        let dist = self.predict_post(&to_scalar(pre), id)?;
        Ok(decode_state(&dist, &self.layout)?)
    }

    pub fn reconstruct_state(&self, state: &StateVector) -> Result<WorldState, NpmError> {
        let dist = self.decode(&self.encode(&to_scalar(state))?)?;
        Ok(decode_state(&dist, &self.layout)?)
    }

    fn zero_grads(&self) -> Grads<T> {
        Grads {
            w_enc: Matrix::zeros(self.w_enc.rows(), self.w_enc.cols()),
            b_enc: vec![T::zero(); self.b_enc.len()],
            w_dec: Matrix::zeros(self.w_dec.rows(), self.w_dec.cols()),
            b_dec: vec![T::zero(); self.b_dec.len()],
            programs: BTreeMap::new(),
        }
    }

    /// Reconstruction loss of one state, accumulating `scale`·gradient.
    fn auto_term(&self, state: &[T], hot: &[usize], scale: T, g: &mut Grads<T>) -> Result<T, NpmError> {
        let blocks = self.layout.blocks();
        let f = self.encode(state)?;
        let pred = block_softmax(&affine(&self.w_dec, &f, &self.b_dec)?, &blocks)?;
        let loss = cross_entropy(&pred, &blocks, hot)?;
        let dz = softmax_xent_grad(&pred, hot);
        g.w_dec.add_outer(scale, &dz, &f);
        axpy(&mut g.b_dec, scale, &dz);
        let df = self.w_dec.matvec_t(&dz);
        let dh = tanh_backward(&f, &df);
        g.w_enc.add_outer(scale, &dh, state);
        axpy(&mut g.b_enc, scale, &dh);
        Ok(loss)
    }

    /// Prediction plus reconstruction loss of one triple.
    fn triple_term(&self, t: &Prepared<T>, scale: T, g: &mut Grads<T>) -> Result<T, NpmError> {
        let blocks = self.layout.blocks();
        let mat = self.embedding(&t.id).ok_or(NpmError::UnknownSubtree(t.id))?;
        let f = self.encode(&t.pre)?;
        // postcondition path
        let h = mat.matvec(&f);
        let q = block_softmax(&affine(&self.w_dec, &h, &self.b_dec)?, &blocks)?;
        let pred_loss = cross_entropy(&q, &blocks, &t.post_hot)?;
        let dzq = softmax_xent_grad(&q, &t.post_hot);
        g.w_dec.add_outer(scale, &dzq, &h);
        axpy(&mut g.b_dec, scale, &dzq);
        let dh = self.w_dec.matvec_t(&dzq);
        g.programs
            .entry(t.id)
            .or_insert_with(|| Matrix::zeros(mat.rows(), mat.cols()))
            .add_outer(scale, &dh, &f);
        let mut df = mat.matvec_t(&dh);
        // reconstruction path
        let p = block_softmax(&affine(&self.w_dec, &f, &self.b_dec)?, &blocks)?;
        let auto_loss = cross_entropy(&p, &blocks, &t.pre_hot)?;
        let dzp = softmax_xent_grad(&p, &t.pre_hot);
        g.w_dec.add_outer(scale, &dzp, &f);
        axpy(&mut g.b_dec, scale, &dzp);
        axpy(&mut df, T::one(), &self.w_dec.matvec_t(&dzp));
        let dpre = tanh_backward(&f, &df);
        g.w_enc.add_outer(scale, &dpre, &t.pre);
        axpy(&mut g.b_enc, scale, &dpre);
        Ok(pred_loss + auto_loss)
    }

    /// Adds `(λ/2)·‖·‖²` for the encoder/decoder weights and the listed
    /// program matrices, returning the penalty.
    fn add_penalty<'a>(
        &self,
        lambda: T,
        programs: impl Iterator<Item = &'a CanonicalId>,
        g: &mut Grads<T>,
    ) -> T {
        let half = T::lit(0.5) * lambda;
        let mut penalty = half * (self.w_enc.frob_sq() + self.w_dec.frob_sq());
        g.w_enc.add_scaled(lambda, &self.w_enc);
        g.w_dec.add_scaled(lambda, &self.w_dec);
        for id in programs {
            let mat = &self.program_matrices[id];
            penalty = penalty + half * mat.frob_sq();
            g.programs
                .entry(*id)
                .or_insert_with(|| Matrix::zeros(mat.rows(), mat.cols()))
                .add_scaled(lambda, mat);
        }
        penalty
    }

    fn batch_objective(
        &self,
        batch: &[&Prepared<T>],
        lambda: f64,
        regularize_programs: bool,
    ) -> Result<(T, Grads<T>), NpmError> {
        let mut g = self.zero_grads();
        let scale = T::one() / T::lit(batch.len() as f64);
        let mut loss = T::zero();
        for t in batch {
            loss = loss + self.triple_term(t, scale, &mut g)?;
        }
        loss = loss * scale;
        let present: BTreeSet<CanonicalId> = if regularize_programs {
            batch.iter().map(|t| t.id).collect()
        } else {
            BTreeSet::new()
        };
        loss = loss + self.add_penalty(T::lit(lambda), present.iter(), &mut g);
        Ok((loss, g))
    }

    fn data_loss(&self, data: &[Prepared<T>]) -> Result<f64, NpmError> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut g = self.zero_grads();
        let mut total = 0.0;
        for t in data {
            total += self.triple_term(t, T::zero(), &mut g)?.as_f64();
        }
        Ok(total / data.len() as f64)
    }

    /// The full training objective: mean prediction and reconstruction
    /// cross-entropy plus the weight penalty over every parameter matrix.
    pub fn objective(&self, triples: &[HoareTriple], lambda: f64, regularize_programs: bool) -> Result<f64, NpmError> {
        let data = self.prepare(triples)?;
        let ids: Vec<&CanonicalId> = if regularize_programs {
            self.program_matrices.keys().collect()
        } else {
            Vec::new()
        };
        let penalty = self.add_penalty(T::lit(lambda), ids.into_iter(), &mut self.zero_grads());
        Ok(self.data_loss(&data)? + penalty.as_f64())
    }

    fn prepare(&self, triples: &[HoareTriple]) -> Result<Vec<Prepared<T>>, NpmError> {
        triples
            .iter()
            .map(|t| {
                if t.pre.dim() != self.dim() {
                    return Err(NpmError::Dimension { expected: self.dim(), found: t.pre.dim() });
                }
                Ok(Prepared {
                    pre: to_scalar(&t.pre),
                    pre_hot: t.pre.hot_indices(&self.layout),
                    post_hot: t.post.hot_indices(&self.layout),
                    id: t.subtree,
                })
            })
            .collect()
    }

    /// Parameters as named flat groups, program matrices sorted by digest.
    pub fn to_tensors(&self) -> TensorSet<T> {
        let mut set = TensorSet::default();
        set.push_matrix("W_enc", &self.w_enc);
        set.push_vector("b_enc", &self.b_enc);
        set.push_matrix("W_dec", &self.w_dec);
        set.push_vector("b_dec", &self.b_dec);
        for (id, mat) in &self.program_matrices {
            set.push_matrix(format!("M.{id}"), mat);
        }
        let l = &self.layout;
        set.push_vector(
            "layout",
            &[T::lit(l.rows as f64), T::lit(l.cols as f64), T::lit(f64::from(l.beeper_max))],
        );
        set
    }

    pub fn from_tensors(set: &TensorSet<T>) -> Result<Self, NpmError> {
        let lay = set.vector("layout")?;
        if lay.len() != 3 {
            return Err(NumError::Checkpoint("layout needs 3 entries".into()).into());
        }
        let as_usize = |x: T| x.as_f64() as usize;
        let layout = StateLayout::new(as_usize(lay[0]), as_usize(lay[1]), as_usize(lay[2]) as u8);
        let mut program_matrices = BTreeMap::new();
        for (name, _, _) in &set.tensors {
            if let Some(hex) = name.strip_prefix("M.") {
                let id: CanonicalId = hex.parse().map_err(NumError::Checkpoint)?;
                program_matrices.insert(id, set.matrix(name)?);
            }
        }
        let model = NpmModel {
            w_enc: set.matrix("W_enc")?,
            b_enc: set.vector("b_enc")?,
            w_dec: set.matrix("W_dec")?,
            b_dec: set.vector("b_dec")?,
            program_matrices,
            layout,
        };
        if model.dim() != model.layout.dim() || model.w_dec.shape() != (model.dim(), model.m()) {
            return Err(NumError::Checkpoint("inconsistent shapes".into()).into());
        }
        Ok(model)
    }

    pub fn save(&self, w: &mut impl Write) -> Result<(), NpmError> {
        Ok(write_checkpoint(w, &self.to_tensors())?)
    }

    pub fn load(r: &mut impl Read) -> Result<Self, NpmError> {
        Self::from_tensors(&read_checkpoint(r)?)
    }

    fn is_finite(&self) -> bool {
        self.w_enc.is_finite()
            && self.w_dec.is_finite()
            && self.b_enc.iter().chain(&self.b_dec).all(|x| x.is_finite())
            && self.program_matrices.values().all(Matrix::is_finite)
    }
}

/// Adagrad accumulators for every model parameter.
struct Optimizer<T> {
    w_enc: AdagradState<T>,
    b_enc: AdagradState<T>,
    w_dec: AdagradState<T>,
    b_dec: AdagradState<T>,
    programs: BTreeMap<CanonicalId, AdagradState<T>>,
    lr: f64,
}

impl<T: Scalar> Optimizer<T> {
    fn new(model: &NpmModel<T>, lr: f64) -> Self {
        Optimizer {
            w_enc: AdagradState::new(model.w_enc.as_slice().len(), lr),
            b_enc: AdagradState::new(model.b_enc.len(), lr),
            w_dec: AdagradState::new(model.w_dec.as_slice().len(), lr),
            b_dec: AdagradState::new(model.b_dec.len(), lr),
            programs: BTreeMap::new(),
            lr,
        }
    }

    /// Only program matrices with a gradient entry are touched.
    fn step(&mut self, model: &mut NpmModel<T>, g: &Grads<T>) -> Result<(), NpmError> {
        self.w_enc.step(model.w_enc.as_mut_slice(), g.w_enc.as_slice())?;
        self.b_enc.step(&mut model.b_enc, &g.b_enc)?;
        self.w_dec.step(model.w_dec.as_mut_slice(), g.w_dec.as_slice())?;
        self.b_dec.step(&mut model.b_dec, &g.b_dec)?;
        for (id, grad) in &g.programs {
            let mat = model.program_matrices.get_mut(id).expect("gradient for known matrix");
            let lr = self.lr;
            self.programs
                .entry(*id)
                .or_insert_with(|| AdagradState::new(grad.as_slice().len(), lr))
                .step(mat.as_mut_slice(), grad.as_slice())?;
        }
        Ok(())
    }
}

/// Distinct states appearing as pre- or postconditions, in first-seen order.
pub fn unique_states(triples: &[HoareTriple]) -> Vec<StateVector> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for t in triples {
        for s in [&t.pre, &t.post] {
            if seen.insert(s.to_bits()) {
                out.push(s.clone());
            }
        }
    }
    out
}

fn minibatches(n: usize, size: usize, r: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(r);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains the encoder/decoder alone on the given states.
pub fn pretrain_autoencoder<T: Scalar>(
    model: &mut NpmModel<T>,
    states: &[StateVector],
    hyper: &NpmHyper,
    r: &mut Rng,
) -> Result<Vec<f64>, NpmError> {
    let data: Vec<(Vec<T>, Vec<usize>)> = states
        .iter()
        .map(|s| (to_scalar(s), s.hot_indices(&model.layout)))
        .collect();
    let mut opt = Optimizer::new(model, hyper.learning_rate);
    let lambda = T::lit(hyper.lambda);
    let mut curve = Vec::with_capacity(hyper.pretrain_epochs);
    for epoch in 0..hyper.pretrain_epochs {
        let mut total = 0.0;
        for batch in minibatches(data.len(), hyper.batch_size, r) {
            let mut g = model.zero_grads();
            let scale = T::one() / T::lit(batch.len() as f64);
            for &i in &batch {
                total += model.auto_term(&data[i].0, &data[i].1, scale, &mut g)?.as_f64();
            }
            model.add_penalty(lambda, std::iter::empty(), &mut g);
            opt.step(model, &g)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(NpmError::NonFinite { epoch, last: curve.last().copied() });
        }
        curve.push(mean);
    }
    Ok(curve)
}

/// Stacks encodings of each subtree's pre/post states and fits one ridge
/// regression per subtree.
pub fn fit_program_matrices<T: Scalar>(
    model: &mut NpmModel<T>,
    triples: &[HoareTriple],
    lambda_ridge: f64,
) -> Result<(), NpmError> {
    let mut groups: BTreeMap<CanonicalId, Vec<&HoareTriple>> = BTreeMap::new();
    for t in triples {
        groups.entry(t.subtree).or_default().push(t);
    }
    let m = model.m();
    model.program_matrices.clear();
    for (id, group) in groups {
        let (fp, fq) = stacked_encodings(model, &group)?;
        let mat = ridge_regression(&fp, &fq, lambda_ridge)?;
        debug_assert_eq!(mat.shape(), (m, m));
        model.program_matrices.insert(id, mat);
    }
    Ok(())
}

/// Encodings of pre and post states as columns (m×n each).
pub fn stacked_encodings<T: Scalar>(
    model: &NpmModel<T>,
    group: &[&HoareTriple],
) -> Result<(Matrix<T>, Matrix<T>), NpmError> {
    let m = model.m();
    let n = group.len();
    let mut fp = Matrix::zeros(m, n);
    let mut fq = Matrix::zeros(m, n);
    for (j, t) in group.iter().enumerate() {
        let p = model.encode(&to_scalar(&t.pre))?;
        let q = model.encode(&to_scalar(&t.post))?;
        for i in 0..m {
            fp[(i, j)] = p[i];
            fq[(i, j)] = q[i];
        }
    }
    Ok((fp, fq))
}

/// Autoencoder pretraining on every distinct state, then a ridge fit per
/// subtree. The result is the model without joint training.
pub fn smart_init<T: Scalar>(
    triples: &[HoareTriple],
    layout: &StateLayout,
    hyper: &NpmHyper,
) -> Result<(NpmModel<T>, Vec<f64>), NpmError> {
    if triples.is_empty() {
        return Err(NpmError::Empty);
    }
    let mut r = rng(hyper.seed);
    let mut model = NpmModel::new(layout.clone(), hyper.m, &mut r);
    let curve = pretrain_autoencoder(&mut model, &unique_states(triples), hyper, &mut r)?;
    fit_program_matrices(&mut model, triples, hyper.lambda_ridge)?;
    Ok((model, curve))
}

/// Joint minibatch Adagrad on prediction + reconstruction loss. With a
/// validation set, stops after `patience` epochs without improvement and
/// returns the best model seen.
pub fn train_joint<T: Scalar>(
    triples: &[HoareTriple],
    validation: &[HoareTriple],
    init: NpmModel<T>,
    hyper: &NpmHyper,
) -> Result<(NpmModel<T>, TrainReport), NpmError> {
    if triples.is_empty() {
        return Err(NpmError::Empty);
    }
    let mut model = init;
    let data = model.prepare(triples)?;
    if let Some(t) = data.iter().find(|t| !model.program_matrices.contains_key(&t.id)) {
        return Err(NpmError::UnknownSubtree(t.id));
    }
    let val: Vec<Prepared<T>> = model
        .prepare(validation)?
        .into_iter()
        .filter(|t| model.program_matrices.contains_key(&t.id))
        .collect();
    let mut r = rng(hyper.seed ^ 0x6a6f_696e);
    let mut opt = Optimizer::new(&model, hyper.learning_rate);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, NpmModel<T>)> = None;
    let mut since_best = 0;
    for epoch in 0..hyper.epochs {
        let mut total = 0.0;
        for batch in minibatches(data.len(), hyper.batch_size, &mut r) {
            let refs: Vec<&Prepared<T>> = batch.iter().map(|&i| &data[i]).collect();
            let (loss, g) = model.batch_objective(&refs, hyper.lambda, hyper.regularize_programs)?;
            total += loss.as_f64() * refs.len() as f64;
            opt.step(&mut model, &g)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(NpmError::NonFinite { epoch, last: report.train_loss.last().copied() });
        }
        report.train_loss.push(mean);
        if val.is_empty() {
            continue;
        }
        let v = model.data_loss(&val)?;
        report.validation_loss.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            best = Some((v, model.clone()));
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    match best {
        Some((_, m)) => Ok((m, report)),
        None => {
            report.best_epoch = report.train_loss.len().saturating_sub(1);
            Ok((model, report))
        }
    }
}

/// Smart initialization followed by joint training.
pub fn train_npm<T: Scalar>(
    triples: &[HoareTriple],
    validation: &[HoareTriple],
    layout: &StateLayout,
    hyper: &NpmHyper,
) -> Result<(NpmModel<T>, TrainReport), NpmError> {
    let (init, _) = smart_init(triples, layout, hyper)?;
    train_joint(triples, validation, init, hyper)
}

/// Finite-difference check of the full objective's gradient.
pub fn gradient_check<T: Scalar>(
    model: &NpmModel<T>,
    triples: &[HoareTriple],
    lambda: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport, NpmError> {
    let data = model.prepare(triples)?;
    let refs: Vec<&Prepared<T>> = data.iter().collect();
    let (_, g) = model.batch_objective(&refs, lambda, true)?;
    let mut groups = vec![
        ParamGroup { name: "W_enc".into(), values: model.w_enc.as_slice().to_vec(), grad: g.w_enc.as_slice().to_vec() },
        ParamGroup { name: "b_enc".into(), values: model.b_enc.clone(), grad: g.b_enc.clone() },
        ParamGroup { name: "W_dec".into(), values: model.w_dec.as_slice().to_vec(), grad: g.w_dec.as_slice().to_vec() },
        ParamGroup { name: "b_dec".into(), values: model.b_dec.clone(), grad: g.b_dec.clone() },
    ];
    for (id, mat) in &model.program_matrices {
        let grad = g
            .programs
            .get(id)
            .map_or_else(|| vec![T::zero(); mat.as_slice().len()], |m| m.as_slice().to_vec());
        groups.push(ParamGroup { name: format!("M.{id}"), values: mat.as_slice().to_vec(), grad });
    }
    let ids: Vec<CanonicalId> = model.program_matrices.keys().copied().collect();
    let mut scratch = model.clone();
    let loss = |gs: &[ParamGroup<T>]| -> T {
        scratch.w_enc.as_mut_slice().copy_from_slice(&gs[0].values);
        scratch.b_enc.copy_from_slice(&gs[1].values);
        scratch.w_dec.as_mut_slice().copy_from_slice(&gs[2].values);
        scratch.b_dec.copy_from_slice(&gs[3].values);
        for (id, group) in ids.iter().zip(&gs[4..]) {
            scratch
                .program_matrices
                .get_mut(id)
                .unwrap()
                .as_mut_slice()
                .copy_from_slice(&group.values);
        }
        scratch.batch_objective(&refs, lambda, true).expect("objective").0
    };
    Ok(grad_check(loss, &mut groups, tolerance, seed))
}

// ---- evaluation ------------------------------------------------------------

/// Mean state-variable accuracy over the scored triples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PredictionScore {
    pub accuracy: f64,
    pub scored: usize,
    /// Triples the predictor declined (e.g. unseen subtree ids).
    pub skipped: usize,
}

pub fn eval_prediction(
    mut predict: impl FnMut(&HoareTriple) -> Option<WorldState>,
    test: &[HoareTriple],
    layout: &StateLayout,
) -> Result<PredictionScore, NpmError> {
    let mut score = PredictionScore::default();
    let mut total = 0.0;
    for t in test {
        match predict(t) {
            Some(pred) => {
                let actual = decode_state(&t.post.0, layout)?;
                total += state_variable_accuracy(&pred, &actual, layout);
                score.scored += 1;
            }
            None => score.skipped += 1,
        }
    }
    if score.scored > 0 {
        score.accuracy = total / score.scored as f64;
    }
    Ok(score)
}

/// Scores the model on triples whose subtree it knows.
pub fn eval_npm<T: Scalar>(model: &NpmModel<T>, test: &[HoareTriple]) -> Result<PredictionScore, NpmError> {
    eval_prediction(|t| model.predict_state(&t.pre, &t.subtree).ok(), test, &model.layout)
}

/// Predicts the most common postcondition seen with a precondition;
/// unseen preconditions map to themselves.
#[derive(Clone, Debug, Default)]
pub struct CommonBaseline {
    table: HashMap<Vec<u8>, StateVector>,
}

impl CommonBaseline {
    pub fn fit(train: &[HoareTriple]) -> Self {
        // counts[pre][post] = (count, first-seen index)
        let mut counts: HashMap<Vec<u8>, HashMap<Vec<u8>, (usize, usize, &StateVector)>> = HashMap::new();
        for (i, t) in train.iter().enumerate() {
            let e = counts
                .entry(t.pre.to_bits())
                .or_default()
                .entry(t.post.to_bits())
                .or_insert((0, i, &t.post));
            e.0 += 1;
        }
        let table = counts
            .into_iter()
            .map(|(pre, posts)| {
                let best = posts
                    .into_values()
                    .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
                    .expect("non-empty");
                (pre, best.2.clone())
            })
            .collect();
        CommonBaseline { table }
    }

    pub fn predict(&self, pre: &StateVector) -> StateVector {
        self.table.get(&pre.to_bits()).cloned().unwrap_or_else(|| pre.clone())
    }

    pub fn eval(&self, test: &[HoareTriple], layout: &StateLayout) -> Result<PredictionScore, NpmError> {
        eval_prediction(|t| decode_state(&self.predict(&t.pre).0, layout).ok(), test, layout)
    }
}

/// Triple-level split. Each subtree id keeps at least one triple in the
/// training part; the rest go to the test part with a probability chosen
/// so that about `test_fraction` of all triples are held out.
pub fn split_triples(
    triples: &[HoareTriple],
    test_fraction: f64,
    seed: u64,
) -> (Vec<HoareTriple>, Vec<HoareTriple>) {
    let mut r = rng(seed);
    let mut groups: BTreeMap<CanonicalId, Vec<usize>> = BTreeMap::new();
    for (i, t) in triples.iter().enumerate() {
        groups.entry(t.subtree).or_default().push(i);
    }
    let spare = triples.len() - groups.len();
    let p = if spare == 0 {
        0.0
    } else {
        (test_fraction * triples.len() as f64 / spare as f64).min(1.0)
    };
    let mut is_test = vec![false; triples.len()];
    for idx in groups.values_mut() {
        idx.shuffle(&mut r);
        for &i in &idx[1..] {
            is_test[i] = r.gen_bool(p);
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (t, held) in triples.iter().zip(is_test) {
        if held {
            test.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, test)
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub best: NpmHyper,
    pub trials: Vec<(NpmHyper, f64)>,
}

/// Samples `budget` configurations around `base`, trains each on 90% of
/// the triples and scores validation accuracy on the rest.
pub fn random_search(
    triples: &[HoareTriple],
    layout: &StateLayout,
    base: &NpmHyper,
    budget: usize,
    seed: u64,
) -> Result<SearchResult, NpmError> {
    assert!(budget >= 1, "search budget must be positive");
    let (train, val) = split_triples(triples, 0.1, seed);
    let mut r = rng(seed);
    let log_uniform = |r: &mut Rng, lo: f64, hi: f64| (r.gen_range(lo.ln()..=hi.ln())).exp();
    let mut trials = Vec::with_capacity(budget);
    for _ in 0..budget {
        let hyper = NpmHyper {
            m: *[10, 20, 30, 50].choose(&mut r).unwrap(),
            lambda: log_uniform(&mut r, 1e-6, 1e-2),
            learning_rate: log_uniform(&mut r, 0.01, 1.0),
            batch_size: *[16, 32, 64, 128].choose(&mut r).unwrap(),
            ..base.clone()
        };
        let (model, _) = train_npm::<f64>(&train, &val, layout, &hyper)?;
        let score = eval_npm(&model, &val)?.accuracy;
        trials.push((hyper, score));
    }
    let best = trials
        .iter()
        .fold(None::<&(NpmHyper, f64)>, |acc, t| match acc {
            Some(a) if a.1 >= t.1 => Some(a),
            _ => Some(t),
        })
        .unwrap()
        .0
        .clone();
    Ok(SearchResult { best, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{modeling_tree, parse};
    use crate::gridworld::{encode_state, Heading, WorldSpec};
    use crate::interpreter::extract_triples;

    fn corridor_triples(src: &str) -> (Vec<HoareTriple>, StateLayout) {
        let spec = WorldSpec::new(1, 5, 1).unwrap();
        let worlds: Vec<_> = (0..3)
            .map(|c| {
                let mut s = spec.blank_state();
                s.col = c;
                s.heading = Heading::East;
                (spec.clone(), s)
            })
            .collect();
        let prog = modeling_tree(&parse(src).unwrap());
        (extract_triples(&prog, &worlds, 100, 50), spec.layout())
    }

    fn small_hyper(m: usize, epochs: usize) -> NpmHyper {
        NpmHyper { m, epochs, pretrain_epochs: epochs, batch_size: 8, learning_rate: 0.1, ..NpmHyper::default() }
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let layout = StateLayout::new(1, 3, 0);
        let mut model = NpmModel::<f64>::new(layout.clone(), 4, &mut rng(1));
        model.w_enc = Matrix::zeros(4, layout.dim());
        let f = model.encode(&vec![1.0; layout.dim()]).unwrap();
        assert!(f.iter().all(|&x| x == 0.0));
        assert!(matches!(model.encode(&[1.0]), Err(NpmError::Dimension { .. })));
    }

    #[test]
    fn decode_gives_block_distributions() {
        let layout = StateLayout::new(2, 3, 1);
        let model = NpmModel::<f64>::new(layout.clone(), 5, &mut rng(2));
        let out = model.decode(&[0.3, -0.2, 0.9, 0.0, 0.5]).unwrap();
        assert_eq!(out.len(), layout.dim());
        for (off, n) in layout.blocks() {
            let s: f64 = out[off..off + n].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_subtree_is_an_error() {
        let (triples, layout) = corridor_triples("move");
        let (model, _) = smart_init::<f64>(&triples, &layout, &small_hyper(6, 5)).unwrap();
        let other = crate::dsl::canonical_id(&Ast::turn_left());
        assert!(matches!(model.predict_post(&to_scalar(&triples[0].pre), &other), Err(NpmError::UnknownSubtree(_))));
    }

    use crate::dsl::Ast;

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (triples, layout) = corridor_triples("move move turn_left put_beeper");
        let mut model = NpmModel::<f64>::new(layout, 5, &mut rng(3));
        let mut r = rng(4);
        for t in &triples {
            model.program_matrices.entry(t.subtree).or_insert_with(|| Matrix::random(5, 5, 0.5, &mut r));
        }
        let report = gradient_check(&model, &triples, 1e-2, 1e-4, 5).unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn ridge_fit_satisfies_normal_equations() {
        let (triples, layout) = corridor_triples("move turn_left move");
        let hyper = small_hyper(8, 30);
        let (model, _) = smart_init::<f64>(&triples, &layout, &hyper).unwrap();
        for (id, mat) in &model.program_matrices {
            let group: Vec<&HoareTriple> = triples.iter().filter(|t| t.subtree == *id).collect();
            let (fp, fq) = stacked_encodings(&model, &group).unwrap();
            assert!(crate::numcore::ridge_residual(mat, &fp, &fq, hyper.lambda_ridge) < 1e-8);
        }
    }

    #[test]
    fn single_triple_ridge_is_nearly_exact() {
        let (triples, layout) = corridor_triples("move");
        let one = &triples[..1];
        let hyper = NpmHyper { lambda_ridge: 1e-10, ..small_hyper(6, 5) };
        let (model, _) = smart_init::<f64>(one, &layout, &hyper).unwrap();
        let mat = model.embedding(&one[0].subtree).unwrap();
        let fp = model.encode(&to_scalar(&one[0].pre)).unwrap();
        let fq = model.encode(&to_scalar(&one[0].post)).unwrap();
        let pred = mat.matvec(&fp);
        for (a, b) in pred.iter().zip(&fq) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_triple_is_memorized() {
        let (triples, layout) = corridor_triples("move");
        let one = &triples[..1];
        let (model, _) = train_npm::<f64>(one, &[], &layout, &small_hyper(3, 500)).unwrap();
        assert_eq!(eval_npm(&model, one).unwrap().accuracy, 1.0);
    }

    #[test]
    fn identity_matrix_reconstructs() {
        let (triples, layout) = corridor_triples("move move put_beeper");
        let (model, _) = smart_init::<f64>(&triples, &layout, &small_hyper(10, 300)).unwrap();
        let eye = Matrix::identity(10);
        for s in unique_states(&triples) {
            let direct = model.decode(&model.encode(&to_scalar(&s)).unwrap()).unwrap();
            let via = model.predict_with(&to_scalar(&s), &eye).unwrap();
            assert_eq!(direct, via);
            assert_eq!(model.reconstruct_state(&s).unwrap(), decode_state(&s.0, &layout).unwrap());
        }
    }

    #[test]
    fn sparse_updates_leave_absent_matrices() {
        let (mut triples, layout) = corridor_triples("move");
        let (extra, _) = corridor_triples("turn_left");
        triples.extend(extra);
        let (mut model, _) = smart_init::<f64>(&triples, &layout, &small_hyper(6, 10)).unwrap();
        let data = model.prepare(&triples).unwrap();
        let batch: Vec<&Prepared<f64>> = data.iter().filter(|t| t.id == triples[0].subtree).collect();
        let (_, g) = model.batch_objective(&batch, 1e-3, true).unwrap();
        let before = model.clone();
        let mut opt = Optimizer::new(&model, 0.1);
        opt.step(&mut model, &g).unwrap();
        let absent = triples.iter().find(|t| t.subtree != triples[0].subtree).unwrap().subtree;
        assert_eq!(model.embedding(&absent), before.embedding(&absent));
        assert_ne!(model.embedding(&triples[0].subtree), before.embedding(&triples[0].subtree));
    }

    #[test]
    fn joint_training_does_not_undo_consistent_init() {
        let (triples, layout) = corridor_triples("move turn_left");
        let hyper = NpmHyper { lambda: 0.0, learning_rate: 0.01, ..small_hyper(8, 100) };
        let (init, _) = smart_init::<f64>(&triples, &layout, &hyper).unwrap();
        let before = init.objective(&triples, 0.0, true).unwrap();
        let (trained, report) = train_joint(&triples, &[], init, &NpmHyper { epochs: 30, ..hyper }).unwrap();
        let after = trained.objective(&triples, 0.0, true).unwrap();
        assert!(after <= before + 1e-9, "{before} -> {after}");
        assert_eq!(report.train_loss.len(), 30);
    }

    #[test]
    fn common_baseline_rules() {
        let spec = WorldSpec::new(1, 3, 0).unwrap();
        let a = spec.blank_state();
        let mut b = a.clone();
        b.col = 1;
        let (pa, pb) = (encode_state(&a, &spec).unwrap(), encode_state(&b, &spec).unwrap());
        let id1 = crate::dsl::canonical_id(&Ast::mv());
        let id2 = crate::dsl::canonical_id(&Ast::seq(vec![Ast::mv(), Ast::turn_left()]));
        let train = vec![
            HoareTriple { pre: pa.clone(), subtree: id1, post: pb.clone(), world: 0 },
            HoareTriple { pre: pa.clone(), subtree: id2, post: pb.clone(), world: 0 },
        ];
        let base = CommonBaseline::fit(&train);
        assert_eq!(base.predict(&pa), pb);
        assert_eq!(base.predict(&pb), pb);
        let score = base.eval(&train, &spec.layout()).unwrap();
        assert_eq!(score.accuracy, 1.0);
    }

    #[test]
    fn split_keeps_every_test_id_in_train() {
        let (mut triples, _) = corridor_triples("move move turn_left move");
        let (more, _) = corridor_triples("turn_left turn_left put_beeper");
        triples.extend(more);
        let (train, test) = split_triples(&triples, 0.3, 8);
        assert_eq!(train.len() + test.len(), triples.len());
        let ids: BTreeSet<_> = train.iter().map(|t| t.subtree).collect();
        assert!(test.iter().all(|t| ids.contains(&t.subtree)));
        assert!(!test.is_empty());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let (triples, layout) = corridor_triples("move turn_left");
        let (model, _) = smart_init::<f64>(&triples, &layout, &small_hyper(5, 5)).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = NpmModel::<f64>::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back, model);
        for t in &triples {
            let a = model.predict_post(&to_scalar(&t.pre), &t.subtree).unwrap();
            let b = back.predict_post(&to_scalar(&t.pre), &t.subtree).unwrap();
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn random_search_picks_argmax_deterministically() {
        let (triples, layout) = corridor_triples("move move turn_left move put_beeper");
        let base = small_hyper(5, 5);
        let a = random_search(&triples, &layout, &base, 3, 1).unwrap();
        let b = random_search(&triples, &layout, &base, 3, 1).unwrap();
        assert_eq!(a.best, b.best);
        assert!(a.trials.iter().all(|(_, s)| *s <= a.trials.iter().find(|(h, _)| *h == a.best).unwrap().1));
        let one = random_search(&triples, &layout, &base, 1, 2).unwrap();
        assert_eq!(one.best, one.trials[0].0);
    }

    #[test]
    fn f32_model_runs() {
        let (triples, layout) = corridor_triples("move turn_left");
        let (model, _) = train_npm::<f32>(&triples, &[], &layout, &small_hyper(6, 50)).unwrap();
        let acc = eval_npm(&model, &triples).unwrap().accuracy;
        assert!((0.0..=1.0).contains(&acc));
    }
}
