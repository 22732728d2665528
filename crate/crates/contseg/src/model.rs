//! Two-stage set-prediction segmenter.
//!
//! Stage 1 turns `N` learnable positional queries into positional embeddings
//! with a small transformer decoder over a convolutional feature pyramid,
//! then reads a class-agnostic mask proposal and an objectness score off
//! each embedding:
//!
//! ```text
//! E_pos = DecoderBlocks(Q_pos, pyramid)               [N, d]
//! M_i   = sigmoid(Upsample(MLP(e_i) · F_mask))        [H, W], entries in (0,1)
//! s_i   = sigmoid(w_obj · e_i + b_obj)
//! ```
//!
//! Stage 2 recognises classes: a single shared decoder block consumes the
//! pair `(e_i, θ_j)` as queries — `θ_j` is the learnable query of task `j` —
//! with pixel tokens as keys/values, and the block output at the task-query
//! position feeds the task-`j` classifier. Logits of all tasks are
//! concatenated in schedule order, so growing the task list never perturbs
//! earlier logits.
//!
//! All blocks are pre-norm (`x + f(LN x)`) and there is no final norm, so a
//! block with zeroed output projections is exactly the identity — handy for
//! closed-form tests and harmless at this depth.

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kernels;
use crate::params::{init, Binder, ParamSet};
use crate::rng;
use crate::tape::{Arr, Tape, Var};
use crate::{Error, Result};

/// Additive attention bias that zeroes a slot after softmax: `exp` of it
/// underflows to 0.0 in f64, so forbidden slots carry exactly no weight.
const ATTN_FORBID: f64 = -1e30;

/// Architecture hyperparameters. `Default` is the toy configuration used
/// throughout the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d` shared by queries, pixel tokens, and heads.
    pub embed_dim: usize,
    /// Number of positional queries `N` (upper bound on masks per image).
    pub num_queries: usize,
    /// Mask-decoder depth `L`; blocks cross-attend pyramid levels 1..3
    /// round-robin, coarsest first.
    pub num_blocks: usize,
    /// Hidden width of every feed-forward sublayer.
    pub ffn_width: usize,
    /// Input side length; must be a multiple of 16 so the pyramid strides
    /// {16, 8, 4, 4} land on whole pixels.
    pub image_size: usize,
    /// Restrict cross-attention of each decoder block to the foreground of
    /// the block's own intermediate mask prediction. Off by default: plain
    /// cross-attention is sufficient at this scale.
    pub masked_attention: bool,
    /// Layer-norm stabiliser.
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_queries: 20,
            num_blocks: 3,
            ffn_width: 128,
            image_size: 64,
            masked_attention: false,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_queries == 0 || self.num_blocks == 0 {
            return Err(Error::config("embed_dim, num_queries, num_blocks must be positive"));
        }
        if self.ffn_width == 0 {
            return Err(Error::config("ffn_width must be positive"));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::config(format!(
                "image_size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        Ok(())
    }
}

/// How recognition heads grow over steps.
///
/// `PerTask` is the full method: one query and one classifier per step.
/// `SharedQuery` is the naive-finetune baseline: a single query whose
/// classifier grows output rows each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadMode {
    PerTask,
    SharedQuery,
}

/// How a new task query is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskInit {
    /// Fresh Gaussian draw (default).
    Random,
    /// Start from the previous task's query values.
    CopyPrevious,
}

/// Feature pyramid produced by [`Model::encode`]: levels 1..3 (coarse to
/// fine, strides 16/8/4) feed decoder cross-attention; level 4 (stride 4)
/// is the mask-projection feature map. Each entry is `[d, h, w]`.
pub struct PixelLevels {
    pub levels: [Var; 4],
}

/// Stage-1 products for one image. Probabilities are sigmoids of the kept
/// logit nodes so losses can work on logits while inference reads
/// probabilities.
pub struct Stage1 {
    /// Positional embeddings `E_pos`, `[N, d]`.
    pub embeds: Var,
    /// Objectness logits, `[N]`.
    pub score_logits: Var,
    /// Objectness scores `sigmoid(logits)`, `[N]`.
    pub scores: Var,
    /// Mask logits at the mask-feature resolution, `[N, h4, w4]`.
    pub mask_logits_low: Var,
    /// Mask logits bilinearly upsampled to input size, `[N, H, W]`.
    pub mask_logits: Var,
    /// Mask proposals `sigmoid(mask_logits)`, `[N, H, W]`.
    pub masks: Var,
}

/// Per-image key/value projections of the class decoder, computed once and
/// shared by every `(embedding, task)` decode of that image.
pub struct ClassMemory {
    pub keys: Var,
    pub values: Var,
}

/// Recognition outputs for a set of embeddings.
pub struct ClassOutputs {
    /// Decoded task embeddings, `[M, d]` each; one per task in `PerTask`
    /// mode, a single entry in `SharedQuery` mode.
    pub task_embeds: Vec<Var>,
    /// Concatenated class logits `[M, Σ_j |C^j|]`, grouped by task in
    /// schedule order.
    pub logits: Var,
}

pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    fn rng_for(&self, seed: u64, name: &str) -> impl Rng {
        rng::derive(seed, name, 0)
    }

    /// Build encoder, mask-decoder, and shared class-decoder parameters.
    /// Task heads are added separately as steps arrive.
    ///
    /// Every parameter is initialised from a stream derived from
    /// `(seed, name)`, so adding parameters later never shifts the draws of
    /// existing ones.
    pub fn build_params(&self, seed: u64) -> Result<ParamSet> {
        let d = self.cfg.embed_dim;
        let s4 = self.cfg.image_size / 4;
        let mut ps = ParamSet::new();

        let conv = |ps: &mut ParamSet, name: &str, out_c: usize, in_c: usize, k: usize| -> Result<()> {
            let w = init::kaiming_conv(&mut self.rng_for(seed, &format!("{name}.w")), out_c, in_c, k, k);
            ps.insert(format!("{name}.w"), w, true)?;
            ps.insert(format!("{name}.b"), init::zeros(&[out_c]), false)?;
            Ok(())
        };
        conv(&mut ps, "enc.stem", d, 3, 4)?;
        ps.insert(
            "enc.pos",
            init::normal(&mut self.rng_for(seed, "enc.pos"), &[d, s4, s4], 0.02),
            false,
        )?;
        conv(&mut ps, "enc.down1", d, d, 3)?;
        conv(&mut ps, "enc.down2", d, d, 3)?;
        conv(&mut ps, "enc.lat1", d, d, 1)?;
        conv(&mut ps, "enc.lat2", d, d, 1)?;
        conv(&mut ps, "enc.lat3", d, d, 1)?;
        conv(&mut ps, "enc.mask_feat", d, d, 1)?;

        ps.insert(
            "dec.q_pos",
            init::normal(&mut self.rng_for(seed, "dec.q_pos"), &[self.cfg.num_queries, d], 1.0),
            false,
        )?;
        for b in 0..self.cfg.num_blocks {
            self.insert_block(&mut ps, &format!("dec.blk{b}"), seed)?;
        }
        for (i, layer) in ["w1", "w2", "w3"].iter().enumerate() {
            let name = format!("dec.mask_mlp.{layer}");
            ps.insert(&name, init::xavier(&mut self.rng_for(seed, &name), d, d), true)?;
            ps.insert(format!("dec.mask_mlp.b{}", i + 1), init::zeros(&[d]), false)?;
        }
        ps.insert("dec.obj.w", init::xavier(&mut self.rng_for(seed, "dec.obj.w"), 1, d), true)?;
        ps.insert("dec.obj.b", init::zeros(&[1]), false)?;

        self.insert_block(&mut ps, "cls.blk", seed)?;
        Ok(ps)
    }

    /// One pre-norm decoder block: cross-attention, self-attention, FFN.
    ///
    /// Key projections carry no bias: a shared key offset shifts every
    /// attention logit in a row by the same amount, which softmax cancels,
    /// so such a bias could never receive gradient.
    fn insert_block(&self, ps: &mut ParamSet, prefix: &str, seed: u64) -> Result<()> {
        let d = self.cfg.embed_dim;
        let f = self.cfg.ffn_width;
        for part in ["cross", "self"] {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("{prefix}.{part}.{w}");
                ps.insert(&name, init::xavier(&mut self.rng_for(seed, &name), d, d), true)?;
            }
            for b in ["bq", "bv", "bo"] {
                ps.insert(format!("{prefix}.{part}.{b}"), init::zeros(&[d]), false)?;
            }
        }
        for ln in ["ln1", "ln2", "ln3"] {
            ps.insert(format!("{prefix}.{ln}.g"), init::ones(&[d]), false)?;
            ps.insert(format!("{prefix}.{ln}.b"), init::zeros(&[d]), false)?;
        }
        let w1 = format!("{prefix}.ffn.w1");
        ps.insert(&w1, init::xavier(&mut self.rng_for(seed, &w1), f, d), true)?;
        ps.insert(format!("{prefix}.ffn.b1"), init::zeros(&[f]), false)?;
        let w2 = format!("{prefix}.ffn.w2");
        ps.insert(&w2, init::xavier(&mut self.rng_for(seed, &w2), d, f), true)?;
        ps.insert(format!("{prefix}.ffn.b2"), init::zeros(&[d]), false)?;
        Ok(())
    }

    /// Append the head for step `step` (1-based) with `width = |C^step|`
    /// classes. In `PerTask` mode this adds `θ_step` and a fresh classifier;
    /// in `SharedQuery` mode the single classifier grows `width` output rows
    /// (created at step 1). Existing parameter values are never touched.
    pub fn add_task(
        &self,
        ps: &mut ParamSet,
        mode: HeadMode,
        step: usize,
        width: usize,
        task_init: TaskInit,
        seed: u64,
    ) -> Result<()> {
        if step == 0 || width == 0 {
            return Err(Error::config("task step and class width must be positive"));
        }
        let d = self.cfg.embed_dim;
        match mode {
            HeadMode::PerTask => {
                let qname = format!("task{step}.query");
                let q = match task_init {
                    TaskInit::CopyPrevious if step > 1 => {
                        let prev = format!("task{}.query", step - 1);
                        let id = ps
                            .id(&prev)
                            .ok_or_else(|| Error::config(format!("no previous query {prev}")))?;
                        ps.value(id).clone()
                    }
                    _ => init::normal(&mut self.rng_for(seed, &qname), &[1, d], 1.0),
                };
                ps.insert(&qname, q, false)?;
                let wname = format!("task{step}.cls.w");
                ps.insert(&wname, init::xavier(&mut self.rng_for(seed, &wname), width, d), true)?;
                ps.insert(format!("task{step}.cls.b"), init::zeros(&[width]), false)?;
            }
            HeadMode::SharedQuery => {
                if step == 1 {
                    ps.insert(
                        "shared.query",
                        init::normal(&mut self.rng_for(seed, "shared.query"), &[1, d], 1.0),
                        false,
                    )?;
                    ps.insert(
                        "shared.cls.w",
                        init::xavier(&mut self.rng_for(seed, "shared.cls.w.1"), width, d),
                        true,
                    )?;
                    ps.insert("shared.cls.b", init::zeros(&[width]), false)?;
                } else {
                    let new_w =
                        init::xavier(&mut self.rng_for(seed, &format!("shared.cls.w.{step}")), width, d);
                    let wid = ps
                        .id("shared.cls.w")
                        .ok_or_else(|| Error::config("shared head missing; was step 1 added?"))?;
                    let old = ps.value(wid);
                    let rows = old.shape()[0] + width;
                    let mut wvec: Vec<f64> = old.iter().copied().collect();
                    wvec.extend(new_w.iter().copied());
                    *ps.value_mut(wid) = Arr::from_shape_vec(IxDyn(&[rows, d]), wvec)
                        .expect("grown classifier weight is dense row-major");
                    let bid = ps.id("shared.cls.b").expect("bias exists alongside weight");
                    let mut bvec: Vec<f64> = ps.value(bid).iter().copied().collect();
                    bvec.extend(std::iter::repeat_n(0.0, width));
                    *ps.value_mut(bid) = Arr::from_shape_vec(IxDyn(&[rows]), bvec)
                        .expect("grown classifier bias is dense");
                }
            }
        }
        Ok(())
    }

    /// Auxiliary classifier for step `step ≥ 2`: a linear head over
    /// `1 + width` outputs whose slot 0 stands for "any previously learned
    /// class".
    pub fn add_aux_head(&self, ps: &mut ParamSet, step: usize, width: usize, seed: u64) -> Result<()> {
        if step < 2 {
            return Err(Error::config("auxiliary head only exists from step 2 on"));
        }
        let name = format!("aux{step}.w");
        ps.insert(
            &name,
            init::xavier(&mut self.rng_for(seed, &name), 1 + width, self.cfg.embed_dim),
            true,
        )?;
        ps.insert(format!("aux{step}.b"), init::zeros(&[1 + width]), false)?;
        Ok(())
    }

    /// Convolutional pyramid over one image, `[3, H, W]` with
    /// `H = W = image_size`.
    pub fn encode(&self, tape: &mut Tape, bind: &mut Binder<'_>, image: &Array3<f64>) -> Result<PixelLevels> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape(format!(
                "expected image [3, {s}, {s}], got {:?}",
                image.shape()
            )));
        }
        let x = tape.constant(image.clone().into_dyn());
        let stem = self.conv_named(tape, bind, "enc.stem", x, 4, 0);
        let stem = tape.relu(stem);
        let pos = bind.named(tape, "enc.pos");
        let c3 = tape.add(stem, pos);
        let c4 = self.conv_named(tape, bind, "enc.down1", c3, 2, 1);
        let c4 = tape.relu(c4);
        let c5 = self.conv_named(tape, bind, "enc.down2", c4, 2, 1);
        let c5 = tape.relu(c5);

        let p5 = self.conv_named(tape, bind, "enc.lat1", c5, 1, 0);
        let lat4 = self.conv_named(tape, bind, "enc.lat2", c4, 1, 0);
        let (h4, w4) = spatial(tape, c4);
        let up5 = tape.bilinear_up(p5, h4, w4);
        let p4 = tape.add(lat4, up5);
        let lat3 = self.conv_named(tape, bind, "enc.lat3", c3, 1, 0);
        let (h3, w3) = spatial(tape, c3);
        let up4 = tape.bilinear_up(p4, h3, w3);
        let p3 = tape.add(lat3, up4);
        let l4 = self.conv_named(tape, bind, "enc.mask_feat", p3, 1, 0);
        Ok(PixelLevels { levels: [p5, p4, p3, l4] })
    }

    fn conv_named(&self, tape: &mut Tape, bind: &mut Binder<'_>, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let w = bind.named(tape, &format!("{name}.w"));
        let b = bind.named(tape, &format!("{name}.b"));
        tape.conv2d(x, w, b, stride, pad)
    }

    /// Run the mask decoder and both stage-1 heads.
    pub fn stage1(&self, tape: &mut Tape, bind: &mut Binder<'_>, px: &PixelLevels) -> Result<Stage1> {
        let mut x = bind.named(tape, "dec.q_pos");
        for b in 0..self.cfg.num_blocks {
            let lvl = px.levels[b % 3];
            let (lh, lw) = spatial(tape, lvl);
            let tokens = tokens_of(tape, lvl);
            let bias = if self.cfg.masked_attention {
                Some(self.attention_mask_bias(tape, bind, x, px.levels[3], lh, lw))
            } else {
                None
            };
            x = self.block(tape, bind, &format!("dec.blk{b}"), x, Some(tokens), bias);
        }
        let embeds = x;
        let mask_logits_low = self.mask_logits_low(tape, bind, embeds, px.levels[3]);
        let s = self.cfg.image_size;
        let mask_logits = tape.bilinear_up(mask_logits_low, s, s);
        let masks = tape.sigmoid(mask_logits);
        let ow = bind.named(tape, "dec.obj.w");
        let ob = bind.named(tape, "dec.obj.b");
        let sl = tape.linear(embeds, ow, ob);
        let score_logits = tape.reshape(sl, &[self.cfg.num_queries]);
        let scores = tape.sigmoid(score_logits);
        Ok(Stage1 {
            embeds,
            score_logits,
            scores,
            mask_logits_low,
            mask_logits,
            masks,
        })
    }

    /// `MLP(E) · F_mask` on the low-resolution grid: `[rows, h4, w4]`.
    fn mask_logits_low(&self, tape: &mut Tape, bind: &mut Binder<'_>, embeds: Var, l4: Var) -> Var {
        let mut h = embeds;
        for (i, (w, b)) in [("w1", "b1"), ("w2", "b2"), ("w3", "b3")].iter().enumerate() {
            let wv = bind.named(tape, &format!("dec.mask_mlp.{w}"));
            let bv = bind.named(tape, &format!("dec.mask_mlp.{b}"));
            h = tape.linear(h, wv, bv);
            if i < 2 {
                h = tape.relu(h);
            }
        }
        let (h4, w4) = spatial(tape, l4);
        let tokens = tokens_of(tape, l4);
        let tokens_t = tape.transpose(tokens);
        let flat = tape.matmul(h, tokens_t);
        let rows = tape.val(embeds).shape()[0];
        tape.reshape(flat, &[rows, h4, w4])
    }

    /// Foreground-restricted cross-attention bias from the current
    /// intermediate masks, as a constant (the threshold is not
    /// differentiable). Rows whose predicted foreground vanishes at this
    /// resolution fall back to unrestricted attention.
    fn attention_mask_bias(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        x: Var,
        l4: Var,
        lh: usize,
        lw: usize,
    ) -> Arr {
        let low = self.mask_logits_low(tape, bind, x, l4);
        let v = tape.val(low);
        let n = v.shape()[0];
        let (h4, w4) = (v.shape()[1], v.shape()[2]);
        let mut bias = Array2::<f64>::zeros((n, lh * lw));
        for i in 0..n {
            let probs = Array2::from_shape_fn((h4, w4), |(r, c)| kernels::sigmoid(v[[i, r, c]]));
            let coarse = kernels::area_downsample(&probs.view(), lh, lw);
            let mut any = false;
            for (j, &p) in coarse.iter().enumerate() {
                if p > 0.5 {
                    any = true;
                } else {
                    bias[[i, j]] = ATTN_FORBID;
                }
            }
            if !any {
                bias.row_mut(i).fill(0.0);
            }
        }
        bias.into_dyn()
    }

    fn block(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        prefix: &str,
        mut x: Var,
        memory: Option<Var>,
        cross_bias: Option<Arr>,
    ) -> Var {
        if let Some(mem) = memory {
            let h = self.ln(tape, bind, &format!("{prefix}.ln1"), x);
            let a = self.attention(tape, bind, &format!("{prefix}.cross"), h, mem, mem, cross_bias);
            x = tape.add(x, a);
        }
        let h = self.ln(tape, bind, &format!("{prefix}.ln2"), x);
        let a = self.attention(tape, bind, &format!("{prefix}.self"), h, h, h, None);
        x = tape.add(x, a);
        let h = self.ln(tape, bind, &format!("{prefix}.ln3"), x);
        let f = self.ffn(tape, bind, prefix, h);
        tape.add(x, f)
    }

    fn ln(&self, tape: &mut Tape, bind: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
        let g = bind.named(tape, &format!("{prefix}.g"));
        let b = bind.named(tape, &format!("{prefix}.b"));
        tape.layer_norm_rows(x, g, b, self.cfg.ln_eps)
    }

    fn ffn(&self, tape: &mut Tape, bind: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
        let w1 = bind.named(tape, &format!("{prefix}.ffn.w1"));
        let b1 = bind.named(tape, &format!("{prefix}.ffn.b1"));
        let w2 = bind.named(tape, &format!("{prefix}.ffn.w2"));
        let b2 = bind.named(tape, &format!("{prefix}.ffn.b2"));
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    /// Single-head scaled dot-product attention with projected keys/values.
    fn attention(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        prefix: &str,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        bias: Option<Arr>,
    ) -> Var {
        let wq = bind.named(tape, &format!("{prefix}.wq"));
        let bq = bind.named(tape, &format!("{prefix}.bq"));
        let q = tape.linear(q_in, wq, bq);
        let wk = bind.named(tape, &format!("{prefix}.wk"));
        let wkt = tape.transpose(wk);
        let k = tape.matmul(k_in, wkt);
        let wv = bind.named(tape, &format!("{prefix}.wv"));
        let bv = bind.named(tape, &format!("{prefix}.bv"));
        let v = tape.linear(v_in, wv, bv);
        self.attention_core(tape, bind, prefix, q, k, v, bias)
    }

    fn attention_core(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        prefix: &str,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Arr>,
    ) -> Var {
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt);
        let mut logits = tape.scale(logits, 1.0 / (self.cfg.embed_dim as f64).sqrt());
        if let Some(b) = bias {
            let bc = tape.constant(b);
            logits = tape.add(logits, bc);
        }
        let attn = tape.softmax_rows(logits);
        let mixed = tape.matmul(attn, v);
        let wo = bind.named(tape, &format!("{prefix}.wo"));
        let bo = bind.named(tape, &format!("{prefix}.bo"));
        tape.linear(mixed, wo, bo)
    }

    /// Project the class decoder's keys/values from the stride-4 pyramid
    /// level, once per image.
    pub fn class_memory(&self, tape: &mut Tape, bind: &mut Binder<'_>, px: &PixelLevels) -> ClassMemory {
        let tokens = tokens_of(tape, px.levels[2]);
        self.class_memory_from_tokens(tape, bind, tokens)
    }

    /// Same as [`Model::class_memory`] but from an explicit `[P, d]` token
    /// matrix (used to rebuild a frozen model's memory from cached values).
    pub fn class_memory_from_tokens(&self, tape: &mut Tape, bind: &mut Binder<'_>, tokens: Var) -> ClassMemory {
        let wk = bind.named(tape, "cls.blk.cross.wk");
        let wkt = tape.transpose(wk);
        let keys = tape.matmul(tokens, wkt);
        let wv = bind.named(tape, "cls.blk.cross.wv");
        let bv = bind.named(tape, "cls.blk.cross.bv");
        let values = tape.linear(tokens, wv, bv);
        ClassMemory { keys, values }
    }

    /// Decode `M` embedding/task pairs through the shared class-decoder
    /// block and return the task-position outputs, `[M, d]`.
    ///
    /// All pairs run as one batch: cross-attention rows are independent, and
    /// self-attention carries a pair-block bias so tokens of different pairs
    /// never attend to each other.
    pub fn decode_task(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        embeds: Var,
        theta: Var,
        mem: &ClassMemory,
    ) -> Result<Var> {
        let d = self.cfg.embed_dim;
        let eshape = tape.val(embeds).shape().to_vec();
        if eshape.len() != 2 || eshape[1] != d {
            return Err(Error::shape(format!("embeddings must be [M, {d}], got {eshape:?}")));
        }
        let m = eshape[0];
        if m == 0 {
            return Err(Error::shape("decode_task needs at least one embedding"));
        }
        if tape.val(theta).shape() != [1, d] {
            return Err(Error::shape(format!(
                "task query must be [1, {d}], got {:?}",
                tape.val(theta).shape()
            )));
        }
        let ones = tape.constant(Array2::<f64>::ones((m, 1)).into_dyn());
        let theta_rep = tape.matmul(ones, theta);
        let mut x = tape.concat(&[embeds, theta_rep], 0);

        // cross-attention against the precomputed memory
        let h = self.ln(tape, bind, "cls.blk.ln1", x);
        let wq = bind.named(tape, "cls.blk.cross.wq");
        let bq = bind.named(tape, "cls.blk.cross.bq");
        let q = tape.linear(h, wq, bq);
        let a = self.attention_core(tape, bind, "cls.blk.cross", q, mem.keys, mem.values, None);
        x = tape.add(x, a);

        // pair-local self-attention: row r belongs to pair r mod M
        let h = self.ln(tape, bind, "cls.blk.ln2", x);
        let bias = Array2::from_shape_fn((2 * m, 2 * m), |(a, b)| {
            if a % m == b % m {
                0.0
            } else {
                ATTN_FORBID
            }
        })
        .into_dyn();
        let a = self.attention(tape, bind, "cls.blk.self", h, h, h, Some(bias));
        x = tape.add(x, a);

        let h = self.ln(tape, bind, "cls.blk.ln3", x);
        let f = self.ffn(tape, bind, "cls.blk", h);
        x = tape.add(x, f);

        let idx: Vec<usize> = (m..2 * m).collect();
        Ok(tape.select_rows(x, &idx))
    }

    /// Class logits for `embeds` over tasks `1..=widths.len()`, where
    /// `widths[j-1] = |C^j|`. Returns logits `[M, Σ widths]` grouped by
    /// task. An empty embedding set yields an empty `[0, Σ widths]` result.
    pub fn classify(
        &self,
        tape: &mut Tape,
        bind: &mut Binder<'_>,
        embeds: Var,
        mode: HeadMode,
        widths: &[usize],
        mem: &ClassMemory,
    ) -> Result<ClassOutputs> {
        if widths.is_empty() {
            return Err(Error::config("classify needs at least one task"));
        }
        let total: usize = widths.iter().sum();
        let m = tape.val(embeds).shape()[0];
        if m == 0 {
            let logits = tape.constant(Array2::<f64>::zeros((0, total)).into_dyn());
            return Ok(ClassOutputs { task_embeds: vec![], logits });
        }
        match mode {
            HeadMode::PerTask => {
                let mut task_embeds = Vec::with_capacity(widths.len());
                let mut parts = Vec::with_capacity(widths.len());
                for (j, &w) in widths.iter().enumerate() {
                    let step = j + 1;
                    let theta = bind.named(tape, &format!("task{step}.query"));
                    let k = self.decode_task(tape, bind, embeds, theta, mem)?;
                    let cw = bind.named(tape, &format!("task{step}.cls.w"));
                    if tape.val(cw).shape()[0] != w {
                        return Err(Error::shape(format!(
                            "task {step} classifier has {} outputs, schedule expects {w}",
                            tape.val(cw).shape()[0]
                        )));
                    }
                    let cb = bind.named(tape, &format!("task{step}.cls.b"));
                    parts.push(tape.linear(k, cw, cb));
                    task_embeds.push(k);
                }
                let logits = tape.concat(&parts, 1);
                Ok(ClassOutputs { task_embeds, logits })
            }
            HeadMode::SharedQuery => {
                let theta = bind.named(tape, "shared.query");
                let k = self.decode_task(tape, bind, embeds, theta, mem)?;
                let cw = bind.named(tape, "shared.cls.w");
                let have = tape.val(cw).shape()[0];
                if have < total {
                    return Err(Error::shape(format!(
                        "shared classifier has {have} outputs, schedule expects at least {total}"
                    )));
                }
                let cb = bind.named(tape, "shared.cls.b");
                let full = tape.linear(k, cw, cb);
                let logits = if have == total { full } else { tape.slice_cols(full, 0, total) };
                Ok(ClassOutputs { task_embeds: vec![k], logits })
            }
        }
    }

    /// Auxiliary logits `[M, 1 + |C^step|]` for step `step ≥ 2`.
    pub fn aux_logits(&self, tape: &mut Tape, bind: &mut Binder<'_>, embeds: Var, step: usize) -> Result<Var> {
        if step < 2 {
            return Err(Error::config("auxiliary head only exists from step 2 on"));
        }
        let w = bind.named(tape, &format!("aux{step}.w"));
        let b = bind.named(tape, &format!("aux{step}.b"));
        Ok(tape.linear(embeds, w, b))
    }
}

/// `[d, h, w]` feature map to `[h·w, d]` token matrix.
pub fn tokens_of(tape: &mut Tape, level: Var) -> Var {
    let shp = tape.val(level).shape().to_vec();
    let flat = tape.reshape(level, &[shp[0], shp[1] * shp[2]]);
    tape.transpose(flat)
}

fn spatial(tape: &Tape, level: Var) -> (usize, usize) {
    let s = tape.val(level).shape();
    (s[1], s[2])
}

/// Value-space stage-1 snapshot (no graph nodes), for frozen-model caches
/// and evaluation plumbing.
pub struct Stage1Values {
    pub embeds: Array2<f64>,
    pub scores: Array1<f64>,
    pub mask_logits: Array3<f64>,
    pub masks: Array3<f64>,
}

impl Stage1Values {
    pub fn from_tape(tape: &Tape, s1: &Stage1) -> Self {
        let embeds = tape
            .val(s1.embeds)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embeddings are 2-d");
        let scores = tape
            .val(s1.scores)
            .clone()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("scores are 1-d");
        let mask_logits = tape
            .val(s1.mask_logits)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("mask logits are 3-d");
        let masks = tape
            .val(s1.masks)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("masks are 3-d");
        Stage1Values { embeds, scores, mask_logits, masks }
    }
}

/// Convenience: one full stage-1 pass on a fresh tape, returning values only.
pub fn stage1_values(model: &Model, ps: &ParamSet, image: &Array3<f64>) -> Result<Stage1Values> {
    let mut tape = Tape::new();
    let mut bind = Binder::frozen(ps);
    let px = model.encode(&mut tape, &mut bind, image)?;
    let s1 = model.stage1(&mut tape, &mut bind, &px)?;
    Ok(Stage1Values::from_tape(&tape, &s1))
}
