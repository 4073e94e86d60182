//! Embedding, arithmetic blocks, pooling head and the plain-transformer baseline.
//!
//! Parameters live in a flat `Vec<Parameter>`; every forward pass binds them to
//! fresh leaf tensors (or constants for inference) and indexes them through a
//! fixed layout. Tokens are numeric features first, then categorical features,
//! each in schema order.

mod attention;
mod check;
mod checkpoint;
mod config;

use amformer_grad::ops::{
    add, gather_rows, gelu, layer_norm, linear, mean_rows, numeric_embed, reshape, vconcat,
};
use amformer_grad::{Parameter, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use attention::{
    additive_stream, attention_weights, combine, dropout, fuse, geometric_mix, min_topk_gap, multiplicative_stream, AttnShape,
    Projections, Query,
};
pub use check::{generic_point, run_gradcheck, GradcheckConfig, GradcheckRow, Probe, MAX_ATTEMPTS, MIN_CHECKED_GRAD, MIN_TOPK_GAP};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{
    count_score_ops, score_ops_per_layer, toggle_name, AmformerConfig, NormPosition, ABLATION_GRID, AUTO_PROMPT_LIMIT,
};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tabular::{Dataset, FeatureSchema, TaskKind};

/// Shape of the model input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub n_numeric: usize,
    pub cardinalities: Vec<usize>,
}

impl InputSpec {
    pub fn from_schema(schema: &FeatureSchema) -> Self {
        Self {
            n_numeric: schema.n_numeric(),
            cardinalities: schema.cardinalities(),
        }
    }

    pub fn numeric(n: usize) -> Self {
        Self {
            n_numeric: n,
            cardinalities: Vec::new(),
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_numeric + self.cardinalities.len()
    }
}

/// Rows of inputs in model layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `size × n_numeric`, row-major.
    pub numeric: Vec<f64>,
    /// `size × n_categorical`, row-major.
    pub categorical: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, rows: &[usize]) -> Self {
        let (nn, nc) = (ds.n_numeric(), ds.schema.cardinalities().len());
        let mut numeric = Vec::with_capacity(rows.len() * nn);
        let mut categorical = Vec::with_capacity(rows.len() * nc);
        for &r in rows {
            numeric.extend_from_slice(&ds.numeric[r * nn..(r + 1) * nn]);
            categorical.extend_from_slice(&ds.categorical[r * nc..(r + 1) * nc]);
        }
        Self {
            size: rows.len(),
            numeric,
            categorical,
        }
    }

    pub fn numeric_only(size: usize, numeric: Vec<f64>) -> Self {
        Self {
            size,
            numeric,
            categorical: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct StreamIdx {
    wq: Option<usize>,
    prompt: Option<usize>,
    wk: usize,
    wv: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    rows_in: usize,
    rows_out: usize,
    ln1: Norm,
    add: Option<StreamIdx>,
    mult: Option<StreamIdx>,
    fuse: Option<usize>,
    ln2: Norm,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    num: Option<Dense>,
    cat: Option<usize>,
    cat_offsets: Vec<usize>,
    layers: Vec<LayerIdx>,
    final_ln: Option<Norm>,
    head: Dense,
}

/// Collects parameters while assigning layout indices.
struct Builder {
    params: Vec<Parameter>,
    rng: Rng,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], data: Vec<f64>) -> usize {
        self.params.push(Parameter::new(name, shape, data).expect("layout shapes are consistent"));
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.push(name, shape, data)
    }

    fn filled(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![v; n])
    }

    /// `[fan_in, fan_out]` weight from `U(±√(1/fan_in))` and a zero bias.
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        let bound = (1.0 / fan_in as f64).sqrt();
        Dense {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: self.filled(format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.filled(format!("{name}.gamma"), &[d], 1.0),
            beta: self.filled(format!("{name}.beta"), &[d], 0.0),
        }
    }

    fn stream(&mut self, name: &str, d: usize, prompt: Option<usize>, shared: Option<usize>) -> StreamIdx {
        let bound = (1.0 / d as f64).sqrt();
        let (wq, prompt) = match (prompt, shared) {
            (None, _) => (Some(self.uniform(format!("{name}.wq"), &[d, d], bound)), None),
            (Some(_), Some(idx)) => (None, Some(idx)),
            (Some(np), None) => (None, Some(self.uniform(format!("{name}.prompt"), &[np, d], 1.0))),
        };
        StreamIdx {
            wq,
            prompt,
            wk: self.uniform(format!("{name}.wk"), &[d, d], bound),
            wv: self.uniform(format!("{name}.wv"), &[d, d], bound),
        }
    }
}

/// Scale of the noise added to the averaging fusion matrix at init.
const FUSE_INIT_NOISE: f64 = 1e-2;

fn build(cfg: &AmformerConfig, input: &InputSpec, seed: u64) -> (Vec<Parameter>, Layout) {
    let d = cfg.d;
    let mut b = Builder {
        params: Vec::new(),
        rng: seeded(seed),
    };
    let emb_bound = (1.0 / d as f64).sqrt();
    let num = (input.n_numeric > 0).then(|| Dense {
        w: b.uniform("embed.num.w".into(), &[input.n_numeric, d], emb_bound),
        b: b.uniform("embed.num.b".into(), &[input.n_numeric, d], emb_bound),
    });
    let total: usize = input.cardinalities.iter().sum();
    let cat = (total > 0).then(|| b.uniform("embed.cat".into(), &[total, d], emb_bound));
    let cat_offsets = input
        .cardinalities
        .iter()
        .scan(0, |acc, &c| {
            let o = *acc;
            *acc += c;
            Some(o)
        })
        .collect();

    let prompts = cfg.resolved_prompts(input.n_tokens());
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, (rows_in, rows_out)) in cfg.layer_rows(input.n_tokens()).into_iter().enumerate() {
        let name = |part: &str| format!("layers.{l}.{part}");
        let np = prompts.get(l).copied();
        let ln1 = b.norm(&name("ln1"), d);
        let shared = match (np, cfg.share_prompts) {
            (Some(np), true) => Some(b.uniform(name("prompt"), &[np, d], 1.0)),
            _ => None,
        };
        let add = cfg.use_additive.then(|| b.stream(&name("add"), d, np, shared));
        let mult = cfg.use_multiplicative.then(|| b.stream(&name("mult"), d, np, shared));
        let fuse = (cfg.use_additive && cfg.use_multiplicative).then(|| {
            let mut w = vec![0.0; rows_out * 2 * rows_out];
            for i in 0..rows_out {
                w[i * 2 * rows_out + i] = 0.5;
                w[i * 2 * rows_out + rows_out + i] = 0.5;
            }
            w.iter_mut()
                .for_each(|v| *v += b.rng.random_range(-FUSE_INIT_NOISE..=FUSE_INIT_NOISE));
            b.push(name("fuse.w"), &[rows_out, 2 * rows_out], w)
        });
        let ln2 = b.norm(&name("ln2"), d);
        let ff1 = b.dense(&name("ff1"), d, cfg.ff_mult * d);
        let ff2 = b.dense(&name("ff2"), cfg.ff_mult * d, d);
        layers.push(LayerIdx {
            rows_in,
            rows_out,
            ln1,
            add,
            mult,
            fuse,
            ln2,
            ff1,
            ff2,
        });
    }
    let final_ln = (cfg.norm == NormPosition::Pre).then(|| b.norm("final_ln", d));
    let head = b.dense("head", d, cfg.task.outputs());
    (
        b.params,
        Layout {
            num,
            cat,
            cat_offsets,
            layers,
            final_ln,
            head,
        },
    )
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: AmformerConfig,
    pub input: InputSpec,
    pub params: Vec<Parameter>,
    layout: Layout,
}

impl Model {
    pub fn new(config: AmformerConfig, input: InputSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        if input.n_tokens() == 0 {
            return Err(Error::Config("model needs at least one input feature".into()));
        }
        if let Some(&c) = input.cardinalities.iter().find(|&&c| c < 2) {
            return Err(Error::Config(format!("categorical cardinality {c} < 2")));
        }
        let (params, layout) = build(&config, &input, seed);
        Ok(Self {
            config,
            input,
            params,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, which must match the layout
    /// implied by `config` and `input` in name, order and shape.
    pub fn from_parts(config: AmformerConfig, input: InputSpec, params: Vec<Parameter>) -> Result<Self> {
        let mut model = Self::new(config, input, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (want, got) in model.params.iter().zip(&params) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected `{}` {:?}, got `{}` {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Gradient-tracking leaves for every parameter, in order.
    pub fn leaves(&self) -> Vec<Tensor> {
        self.params.iter().map(Parameter::leaf).collect()
    }

    pub fn constants(&self) -> Vec<Tensor> {
        self.params.iter().map(Parameter::constant).collect()
    }

    /// Token embeddings `[B, N, d]`.
    pub fn embed(&self, lv: &[Tensor], batch: &Batch) -> Result<Tensor> {
        let (nn, nc) = (self.input.n_numeric, self.input.cardinalities.len());
        if batch.numeric.len() != batch.size * nn || batch.categorical.len() != batch.size * nc {
            return Err(Error::Data(format!(
                "batch of {} rows does not match {nn} numeric and {nc} categorical features",
                batch.size
            )));
        }
        let num = match self.layout.num {
            Some(Dense { w, b }) => {
                let values = Tensor::new(batch.numeric.clone(), &[batch.size, nn])?;
                Some(numeric_embed(&values, &lv[w], &lv[b])?)
            }
            None => None,
        };
        let cat = match self.layout.cat {
            Some(table) => {
                let mut idx = Vec::with_capacity(batch.categorical.len());
                for (t, &v) in batch.categorical.iter().enumerate() {
                    let j = t % nc;
                    let card = self.input.cardinalities[j];
                    if v >= card {
                        return Err(Error::Data(format!(
                            "row {}: categorical feature {j} index {v} >= cardinality {card}",
                            t / nc
                        )));
                    }
                    idx.push(self.layout.cat_offsets[j] + v);
                }
                let rows = gather_rows(&lv[table], &idx)?;
                Some(reshape(&rows, &[batch.size, nc, self.config.d])?)
            }
            None => None,
        };
        Ok(match (num, cat) {
            (Some(a), Some(b)) => vconcat(&a, &b)?,
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => unreachable!("models have at least one feature"),
        })
    }

    fn projections<'a>(&self, lv: &'a [Tensor], s: &StreamIdx) -> Projections<'a> {
        let query = match (s.wq, s.prompt) {
            (Some(wq), _) => Query::Project(&lv[wq]),
            (None, Some(p)) => Query::Prompt(&lv[p]),
            (None, None) => unreachable!("every stream has a query source"),
        };
        Projections {
            query,
            wk: &lv[s.wk],
            wv: &lv[s.wv],
        }
    }

    fn attn_dropout<'r>(&self, mode: Mode, rng: &'r mut Option<&mut Rng>) -> Option<(f64, &'r mut Rng)> {
        match (mode, rng.as_deref_mut()) {
            (Mode::Train, Some(r)) if self.config.attn_dropout > 0.0 => Some((self.config.attn_dropout, r)),
            _ => None,
        }
    }

    /// Fused stream output `[B, rows_out, d]` for the normalized input `h`.
    fn mix(&self, lv: &[Tensor], li: &LayerIdx, h: &Tensor, mode: Mode, rng: &mut Option<&mut Rng>) -> Result<Tensor> {
        let shape = AttnShape {
            heads: self.config.heads,
            k: self.config.k,
        };
        let oa = match &li.add {
            Some(s) => Some(additive_stream(h, &self.projections(lv, s), shape, self.attn_dropout(mode, rng))?),
            None => None,
        };
        let om = match &li.mult {
            Some(s) => Some(multiplicative_stream(
                h,
                &self.projections(lv, s),
                shape,
                self.config.eps,
                self.config.exp_clamp,
                self.attn_dropout(mode, rng),
            )?),
            None => None,
        };
        match (oa, om, li.fuse) {
            (Some(a), Some(m), Some(f)) => fuse(&a, &m, &lv[f]),
            (Some(a), None, _) => Ok(a),
            (None, Some(m), _) => Ok(m),
            _ => unreachable!("validated configs enable a stream"),
        }
    }

    fn ffn(&self, lv: &[Tensor], li: &LayerIdx, h: &Tensor, mode: Mode, rng: &mut Option<&mut Rng>) -> Result<Tensor> {
        let mut a = gelu(&linear(h, &lv[li.ff1.w], Some(&lv[li.ff1.b]))?);
        if let (Mode::Train, Some(r)) = (mode, rng.as_deref_mut()) {
            a = dropout(&a, self.config.ff_dropout, r)?;
        }
        Ok(linear(&a, &lv[li.ff2.w], Some(&lv[li.ff2.b]))?)
    }

    /// One arithmetic block: `[B, rows_in, d] -> [B, rows_out, d]`.
    pub fn block(&self, lv: &[Tensor], layer: usize, x: &Tensor, mode: Mode, mut rng: Option<&mut Rng>) -> Result<Tensor> {
        let li = &self.layout.layers[layer];
        if x.rank() != 3 || x.shape()[1] != li.rows_in || x.shape()[2] != self.config.d {
            return Err(Error::Data(format!(
                "layer {layer} expects [B, {}, {}], got {:?}",
                li.rows_in,
                self.config.d,
                x.shape()
            )));
        }
        let ln = |t: &Tensor, n: Norm| layer_norm(t, &lv[n.gamma], &lv[n.beta]);
        let pre = self.config.norm == NormPosition::Pre;
        let h = if pre { ln(x, li.ln1)? } else { x.clone() };
        let y = self.mix(lv, li, &h, mode, &mut rng)?;
        let mut r = if li.rows_out == li.rows_in { add(x, &y)? } else { y };
        if !pre {
            r = ln(&r, li.ln1)?;
        }
        let h2 = if pre { ln(&r, li.ln2)? } else { r.clone() };
        let out = add(&r, &self.ffn(lv, li, &h2, mode, &mut rng)?)?;
        Ok(if pre { out } else { ln(&out, li.ln2)? })
    }

    /// Logits `[B, C]` for classification or predictions `[B]` for regression.
    ///
    /// `rng` drives dropout and is only consulted in [`Mode::Train`].
    pub fn forward_with(&self, lv: &[Tensor], batch: &Batch, mode: Mode, mut rng: Option<&mut Rng>) -> Result<Tensor> {
        if lv.len() != self.params.len() {
            return Err(Error::Config(format!(
                "forward needs {} parameter tensors, got {}",
                self.params.len(),
                lv.len()
            )));
        }
        if mode == Mode::Train && rng.is_none() && (self.config.ff_dropout > 0.0 || self.config.attn_dropout > 0.0) {
            return Err(Error::Config("training mode with dropout needs an rng".into()));
        }
        let mut x = self.embed(lv, batch)?;
        for l in 0..self.layout.layers.len() {
            x = self.block(lv, l, &x, mode, rng.as_deref_mut())?;
        }
        if let Some(n) = self.layout.final_ln {
            x = layer_norm(&x, &lv[n.gamma], &lv[n.beta])?;
        }
        let pooled = mean_rows(&x)?;
        let out = linear(&pooled, &lv[self.layout.head.w], Some(&lv[self.layout.head.b]))?;
        Ok(match self.config.task {
            TaskKind::Regression => reshape(&out, &[batch.size])?,
            _ => out,
        })
    }

    pub fn forward(&self, batch: &Batch, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.forward_with(&self.leaves(), batch, mode, rng)
    }

    /// Eval-mode outputs without building a gradient graph.
    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        self.forward_with(&self.constants(), batch, Mode::Eval, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: TaskKind) -> AmformerConfig {
        AmformerConfig {
            d: 8,
            layers: 2,
            heads: 2,
            k: 2,
            ..AmformerConfig::desk(task)
        }
    }

    fn batch(b: usize, n: usize, seed: u64) -> Batch {
        let mut rng = seeded(seed);
        Batch::numeric_only(b, (0..b * n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn output_shapes_per_task() {
        let m = Model::new(tiny(TaskKind::Multiclass { classes: 5 }), InputSpec::numeric(4), 1).unwrap();
        assert_eq!(m.predict(&batch(3, 4, 0)).unwrap().shape(), &[3, 5]);
        let r = Model::new(tiny(TaskKind::Regression), InputSpec::numeric(4), 1).unwrap();
        assert_eq!(r.predict(&batch(3, 4, 0)).unwrap().shape(), &[3]);
    }

    #[test]
    fn eval_is_deterministic_train_is_not() {
        let m = Model::new(tiny(TaskKind::Binary), InputSpec::numeric(4), 1).unwrap();
        let b = batch(4, 4, 2);
        assert_eq!(m.predict(&b).unwrap().to_vec(), m.predict(&b).unwrap().to_vec());
        let mut rng = seeded(9);
        let t = m.forward(&b, Mode::Train, Some(&mut rng)).unwrap();
        assert_ne!(t.to_vec(), m.predict(&b).unwrap().to_vec());
        assert!(m.forward(&b, Mode::Train, None).is_err());
    }

    #[test]
    fn prompt_layer_changes_row_count() {
        let cfg = AmformerConfig {
            prompt_schedule: vec![2, 2],
            ..tiny(TaskKind::Binary)
        };
        let m = Model::new(cfg, InputSpec::numeric(8), 1).unwrap();
        let lv = m.constants();
        let x = m.embed(&lv, &batch(3, 8, 0)).unwrap();
        assert_eq!(m.block(&lv, 0, &x, Mode::Eval, None).unwrap().shape(), &[3, 2, 8]);
    }

    #[test]
    fn categorical_tokens_follow_numeric() {
        let input = InputSpec {
            n_numeric: 2,
            cardinalities: vec![3, 4],
        };
        let m = Model::new(tiny(TaskKind::Binary), input, 3).unwrap();
        let lv = m.constants();
        let b = Batch {
            size: 1,
            numeric: vec![0.0, 0.0],
            categorical: vec![2, 1],
        };
        let e = m.embed(&lv, &b).unwrap();
        assert_eq!(e.shape(), &[1, 4, 8]);
        let table = &m.param("embed.cat").unwrap().data;
        assert_eq!(&e.data()[16..24], &table[2 * 8..3 * 8]);
        assert_eq!(&e.data()[24..32], &table[(3 + 1) * 8..(3 + 2) * 8]);
        // zero numeric input embeds to the bias
        assert_eq!(&e.data()[..8], &m.param("embed.num.b").unwrap().data[..8]);
        let bad = Batch {
            categorical: vec![3, 0],
            ..b
        };
        assert!(matches!(m.embed(&lv, &bad), Err(Error::Data(_))));
    }

    #[test]
    fn baseline_is_smaller() {
        let cfg = AmformerConfig::desk(TaskKind::Multiclass { classes: 4 });
        let amf = Model::new(cfg.clone(), InputSpec::numeric(8), 0).unwrap();
        let tf = Model::new(cfg.plain_transformer(8), InputSpec::numeric(8), 0).unwrap();
        assert!(tf.num_params() < amf.num_params());
    }

    #[test]
    fn from_parts_checks_layout() {
        let m = Model::new(tiny(TaskKind::Binary), InputSpec::numeric(4), 1).unwrap();
        let again = Model::from_parts(m.config.clone(), m.input.clone(), m.params.clone()).unwrap();
        assert_eq!(again.params, m.params);
        let mut short = m.params.clone();
        short.pop();
        assert!(Model::from_parts(m.config.clone(), m.input.clone(), short).is_err());
    }
}
