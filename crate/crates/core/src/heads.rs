//! Learnable functions of the model: a shared MLP feature extractor feeding a
//! base-score head and an edge-embedding head, plus the exceptionality and
//! irrelevance functions built on the edge embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths of an MLP, input width first, output width last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("an MLP needs at least two widths, got {widths:?}")));
        }
        if widths.contains(&0) {
            return Err(Error::Config(format!("MLP widths must be positive, got {widths:?}")));
        }
        Ok(Self { widths })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Fully connected ReLU network; no activation after the last layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

impl Mlp {
    /// Kaiming-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in spec.widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            weights.push(Tensor::from_parts(vec![fan_in, fan_out], data));
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Self { spec, weights, biases }
    }

    pub fn from_parameters(spec: MlpSpec, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        let layers = spec.widths.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Format(format!("{layers} layers but {} weights / {} biases", weights.len(), biases.len())));
        }
        for (l, pair) in spec.widths.windows(2).enumerate() {
            if weights[l].shape() != [pair[0], pair[1]] || biases[l].shape() != [pair[1]] {
                return Err(Error::Format(format!(
                    "layer {l}: weight {:?} / bias {:?} do not match widths {pair:?}",
                    weights[l].shape(),
                    biases[l].shape()
                )));
            }
        }
        Ok(Self { spec, weights, biases })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b])
    }

    fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(self.biases.iter()).flat_map(|(w, b)| [w, b])
    }

    fn bind(&self, tape: &mut Tape) -> Result<BoundMlp> {
        let layers = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| Ok((tape.param(w)?, tape.param(b)?)))
            .collect::<Result<_>>()?;
        Ok(BoundMlp { layers, input: self.spec.input() })
    }
}

#[derive(Clone, Debug)]
struct BoundMlp {
    layers: Vec<(Var, Var)>,
    input: usize,
}

impl BoundMlp {
    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.input {
            return Err(Error::dim("mlp", format!("input width {width}, expected {}", self.input)));
        }
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row_broadcast(z, b)?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Widths that determine a model's three networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    /// Extractor layer widths after the input; the last is the feature width.
    pub extractor_widths: Vec<usize>,
    /// Hidden widths shared by the base-score and edge heads.
    pub head_hidden_widths: Vec<usize>,
    pub embedding_dim: usize,
}

impl Architecture {
    fn specs(&self) -> Result<(MlpSpec, MlpSpec, MlpSpec)> {
        if self.extractor_widths.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        let extractor = MlpSpec::new(std::iter::once(self.input_width).chain(self.extractor_widths.iter().copied()).collect())?;
        let feat = extractor.output();
        let head = |out: usize| {
            MlpSpec::new(
                std::iter::once(feat).chain(self.head_hidden_widths.iter().copied()).chain(std::iter::once(out)).collect(),
            )
        };
        Ok((extractor, head(1)?, head(self.embedding_dim)?))
    }
}

/// Parameter bundle for the extractor, base-score head and edge head, plus
/// the sigmoid temperature `alpha` used by exceptionality.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepArguingModel {
    extractor: Mlp,
    base_head: Mlp,
    edge_head: Mlp,
    alpha: f64,
}

impl DeepArguingModel {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, alpha: f64, rng: &mut R) -> Result<Self> {
        let (e, b, w) = arch.specs()?;
        let extractor = Mlp::init(e, rng);
        let base_head = Mlp::init(b, rng);
        let edge_head = Mlp::init(w, rng);
        Self::from_parts(extractor, base_head, edge_head, alpha)
    }

    pub fn from_parts(extractor: Mlp, base_head: Mlp, edge_head: Mlp, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if base_head.spec.output() != 1 {
            return Err(Error::Config("base-score head must end in width 1".into()));
        }
        let feat = extractor.spec.output();
        if base_head.spec.input() != feat || edge_head.spec.input() != feat {
            return Err(Error::Config(format!("heads must take the extractor's {feat} features")));
        }
        let model = Self { extractor, base_head, edge_head, alpha };
        if model.params().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite { op: "model parameters" });
        }
        Ok(model)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn embedding_dim(&self) -> usize {
        self.edge_head.spec.output()
    }

    pub fn input_width(&self) -> usize {
        self.extractor.spec.input()
    }

    pub fn extractor(&self) -> &Mlp {
        &self.extractor
    }

    pub fn base_head(&self) -> &Mlp {
        &self.base_head
    }

    pub fn edge_head(&self) -> &Mlp {
        &self.edge_head
    }

    pub fn extractor_mut(&mut self) -> &mut Mlp {
        &mut self.extractor
    }

    pub fn base_head_mut(&mut self) -> &mut Mlp {
        &mut self.base_head
    }

    pub fn edge_head_mut(&mut self) -> &mut Mlp {
        &mut self.edge_head
    }

    /// All parameter tensors in a fixed order: extractor, base head, edge head.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.extractor.params().chain(self.base_head.params()).chain(self.edge_head.params())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .params_mut()
            .chain(self.base_head.params_mut())
            .chain(self.edge_head.params_mut())
            .collect()
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            extractor: self.extractor.bind(tape)?,
            base_head: self.base_head.bind(tape)?,
            edge_head: self.edge_head.bind(tape)?,
            alpha: self.alpha,
            embedding_dim: self.embedding_dim(),
        })
    }

    /// Copies gradients from a backward sweep into the parameter grad slots.
    pub fn store_grads(&mut self, bound: &BoundModel, grads: &Gradients) {
        let vars: Vec<Var> = bound.vars().collect();
        for (p, v) in self.params_mut().into_iter().zip(vars) {
            match grads.get(v) {
                Some(g) => p.set_grad(g.to_vec()).expect("gradient shape follows parameter shape"),
                None => p.set_grad(vec![0.0; p.len()]).expect("zero gradient"),
            }
        }
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |m, tape, v| m.features(tape, v))
    }

    pub fn base_scores(&self, x: &Tensor) -> Result<Tensor> {
        self.eval(x, |m, tape, v| m.base_score(tape, v))
    }

    pub fn exceptionality(&self, xa: &Tensor, xb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let (a, b) = (tape.constant(xa.clone())?, tape.constant(xb.clone())?);
        let out = bound.exceptionality(&mut tape, a, b)?;
        Ok(tape.value(out).clone())
    }

    pub fn irrelevance(&self, x_new: &Tensor, x_cb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let (a, b) = (tape.constant(x_new.clone())?, tape.constant(x_cb.clone())?);
        let out = bound.irrelevance(&mut tape, a, b)?;
        Ok(tape.value(out).clone())
    }

    fn eval(&self, x: &Tensor, f: impl FnOnce(&BoundModel, &mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let v = tape.constant(x.clone())?;
        let out = f(&bound, &mut tape, v)?;
        Ok(tape.value(out).clone())
    }
}

/// A model whose parameters have been recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    extractor: BoundMlp,
    base_head: BoundMlp,
    edge_head: BoundMlp,
    alpha: f64,
    embedding_dim: usize,
}

impl BoundModel {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.extractor.vars().chain(self.base_head.vars()).chain(self.edge_head.vars())
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.extractor.forward(tape, x)
    }

    /// Base scores in `(0, 1)` for every row of `x`, shape `[m]`.
    pub fn base_score(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.features(tape, x)?;
        let z = self.base_head.forward(tape, h)?;
        let m = tape.value(z).rows();
        let z = tape.reshape(z, vec![m])?;
        tape.sigmoid(z)
    }

    /// Edge-head embeddings `[m×d]`.
    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.features(tape, x)?;
        self.edge_head.forward(tape, h)
    }

    /// Base scores and embeddings from one extractor pass.
    pub fn score_and_embed(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let h = self.features(tape, x)?;
        let z = self.base_head.forward(tape, h)?;
        let m = tape.value(z).rows();
        let z = tape.reshape(z, vec![m])?;
        let scores = tape.sigmoid(z)?;
        let emb = self.edge_head.forward(tape, h)?;
        Ok((scores, emb))
    }

    /// Pairwise one-way soft domination between embeddings:
    /// `W[i][j] = relu(mean_l(2 * sigmoid(alpha * (ea[i,l] - eb[j,l])) - 1))`.
    pub fn exceptionality_from_embeddings(&self, tape: &mut Tape, ea: Var, eb: Var) -> Result<Var> {
        let (m, q) = (tape.value(ea).rows(), tape.value(eb).rows());
        let d = tape.value(ea).cols();
        if d != self.embedding_dim {
            return Err(Error::dim("exceptionality", format!("embedding width {d}, expected {}", self.embedding_dim)));
        }
        let diff = tape.pairwise_sub(ea, eb)?;
        let z = tape.scale(diff, self.alpha)?;
        let s = tape.sigmoid(z)?;
        let s2 = tape.scale(s, 2.0)?;
        let centred = tape.add_scalar(s2, -1.0)?;
        let mean = tape.mean_last_axis(centred)?;
        let mean = tape.reshape(mean, vec![m, q])?;
        tape.relu(mean)
    }

    pub fn exceptionality(&self, tape: &mut Tape, xa: Var, xb: Var) -> Result<Var> {
        let ea = self.embed(tape, xa)?;
        let eb = self.embed(tape, xb)?;
        self.exceptionality_from_embeddings(tape, ea, eb)
    }

    /// `-(1 - exceptionality(x_new, x_cb))`, in `[-1, 0]`.
    pub fn irrelevance_from_embeddings(&self, tape: &mut Tape, e_new: Var, e_cb: Var) -> Result<Var> {
        let w = self.exceptionality_from_embeddings(tape, e_new, e_cb)?;
        tape.add_scalar(w, -1.0)
    }

    pub fn irrelevance(&self, tape: &mut Tape, x_new: Var, x_cb: Var) -> Result<Var> {
        let e_new = self.embed(tape, x_new)?;
        let e_cb = self.embed(tape, x_cb)?;
        self.irrelevance_from_embeddings(tape, e_new, e_cb)
    }
}

pub mod codec {
    //! Binary model container.
    //!
    //! All integers are little-endian `u32`, all reals little-endian `f64`:
    //!
    //! ```text
    //! magic          8 bytes  "DARGMDL\0"
    //! version        u32      currently 1
    //! alpha          f64
    //! mlp_count      u32      always 3: extractor, base head, edge head
    //! per MLP:       u32 width count, then that many u32 widths
    //! tensor_count   u32
    //! per tensor:    u32 rank, rank x u32 dims, product(dims) x f64 values
    //! ```
    //!
    //! Tensors are stored per MLP in layer order, weight (`[in, out]`) then bias.

    use super::*;

    pub const MAGIC: &[u8; 8] = b"DARGMDL\0";
    pub const VERSION: u32 = 1;

    fn put_u32(out: &mut Vec<u8>, v: usize) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    pub fn encode(model: &DeepArguingModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        out.extend_from_slice(&model.alpha.to_le_bytes());
        let mlps = [&model.extractor, &model.base_head, &model.edge_head];
        put_u32(&mut out, mlps.len());
        for m in mlps {
            put_u32(&mut out, m.spec.widths.len());
            for &w in &m.spec.widths {
                put_u32(&mut out, w);
            }
        }
        let tensors: Vec<&Tensor> = model.params().collect();
        put_u32(&mut out, tensors.len());
        for t in tensors {
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
            let end = end.ok_or_else(|| Error::Format(format!("truncated model container at byte {}", self.pos)))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }

        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    /// Parses a container; returns the model and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(DeepArguingModel, usize)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model container (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported model container version {version}")));
        }
        let alpha = r.f64()?;
        let mlp_count = r.u32()?;
        if mlp_count != 3 {
            return Err(Error::Format(format!("expected 3 networks, found {mlp_count}")));
        }
        let mut specs = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u32()?;
            let widths = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            specs.push(MlpSpec::new(widths).map_err(|e| Error::Format(e.to_string()))?);
        }
        let tensor_count = r.u32()?;
        let expected: usize = specs.iter().map(|s| 2 * (s.widths.len() - 1)).sum();
        if tensor_count != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {tensor_count}")));
        }
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut it = tensors.into_iter();
        let mut mlps = Vec::with_capacity(3);
        for spec in specs {
            let layers = spec.widths.len() - 1;
            let (mut ws, mut bs) = (Vec::new(), Vec::new());
            for _ in 0..layers {
                ws.push(it.next().unwrap());
                bs.push(it.next().unwrap());
            }
            mlps.push(Mlp::from_parameters(spec, ws, bs)?);
        }
        let edge = mlps.pop().unwrap();
        let base = mlps.pop().unwrap();
        let extractor = mlps.pop().unwrap();
        let model = DeepArguingModel::from_parts(extractor, base, edge, alpha).map_err(|e| Error::Format(e.to_string()))?;
        Ok((model, r.pos))
    }
}
