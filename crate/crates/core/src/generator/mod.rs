//! Parameter generator: a transformer over the `[l, s, r, h]` token latent.
//!
//! Each block runs, with pre-RMS-normalization and residual addition around
//! every sub-layer:
//!
//! 1. intra-layer self-attention over the `s·r` tokens of each layer,
//! 2. inter-layer self-attention over the `l` copies of each token position,
//! 3. cross-attention from the latent to the condition tokens,
//! 4. a GELU feed-forward network.
//!
//! Rotary phases for the layer, token and rank index sit on three disjoint
//! feature bands of every head's query/key. Conditions carry no positional
//! signal. Two output heads project the final latent to A-tokens and B-tokens;
//! the B head starts at exactly zero so a fresh generator emits `ΔW = 0`.

mod params;
mod rope;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use params::{ParamSet, ParamVars};
pub use rope::{default_bands, RopeBands};

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{RotaryTable, Tape, Tensor, Var};
use crate::tokenizer::{AdapterLayout, ParamTokens, TokenKind};

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `hidden`.
    pub ffn_mult: usize,
    /// Rotary band widths for (layer, token, rank); `None` splits the head
    /// width into equal even thirds.
    pub rope_bands: Option<[usize; 3]>,
    pub rope_base: f64,
    pub condition_width: usize,
    pub init_std: f64,
    /// Trainable `c×c` map applied to conditions before cross-attention.
    pub condition_projector: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 32,
            heads: 4,
            ffn_mult: 2,
            rope_bands: None,
            rope_base: 10_000.0,
            condition_width: 16,
            init_std: 0.02,
            condition_projector: false,
        }
    }
}

impl GeneratorConfig {
    pub fn head_width(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn bands(&self) -> RopeBands {
        match self.rope_bands {
            Some([l, s, r]) => RopeBands { layer: l, token: s, rank: r },
            None => default_bands(self.head_width()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.hidden == 0 || self.heads == 0 || self.condition_width == 0 {
            return Err(Error::Parameter("generator sizes must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        let b = self.bands();
        if [b.layer, b.token, b.rank].iter().any(|w| w % 2 != 0) {
            return Err(Error::Parameter(format!("rotary bands {:?} must be even", b)));
        }
        if b.layer + b.token + b.rank > self.head_width() {
            return Err(Error::Parameter(format!(
                "rotary bands {:?} exceed head width {}",
                b,
                self.head_width()
            )));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) || !(self.rope_base > 1.0) {
            return Err(Error::Parameter("bad init_std or rope_base".into()));
        }
        Ok(())
    }
}

/// Generator weights plus the layout they emit.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub config: GeneratorConfig,
    pub layout: Arc<AdapterLayout>,
    pub params: ParamSet,
}

fn block_name(i: usize, rest: &str) -> String {
    format!("blocks.{i}.{rest}")
}

pub fn init_generator(config: &GeneratorConfig, layout: Arc<AdapterLayout>, seed: u64) -> Result<GeneratorState> {
    config.validate()?;
    let mut r = rng::seeded(seed, stream::GENERATOR);
    let [l, s, rank, d] = layout.token_shape();
    let (h, c, f, std) = (
        config.hidden,
        config.condition_width,
        config.hidden * config.ffn_mult,
        config.init_std,
    );
    let mut p = ParamSet::new();
    p.insert("embed", Tensor::randn(&[l, s, rank, h], std, &mut r));
    if config.condition_projector {
        p.insert("cond_proj", Tensor::eye(c));
    }
    for i in 0..config.blocks {
        for part in ["intra", "inter"] {
            p.insert(block_name(i, &format!("{part}.norm")), Tensor::ones(&[h]));
            for m in ["wq", "wk", "wv", "wo"] {
                p.insert(block_name(i, &format!("{part}.{m}")), Tensor::randn(&[h, h], std, &mut r));
            }
        }
        p.insert(block_name(i, "cross.norm"), Tensor::ones(&[h]));
        p.insert(block_name(i, "cross.wq"), Tensor::randn(&[h, h], std, &mut r));
        p.insert(block_name(i, "cross.wk"), Tensor::randn(&[c, h], std, &mut r));
        p.insert(block_name(i, "cross.wv"), Tensor::randn(&[c, h], std, &mut r));
        p.insert(block_name(i, "cross.wo"), Tensor::randn(&[h, h], std, &mut r));
        p.insert(block_name(i, "ffn.norm"), Tensor::ones(&[h]));
        p.insert(block_name(i, "ffn.w1"), Tensor::randn(&[h, f], std, &mut r));
        p.insert(block_name(i, "ffn.b1"), Tensor::zeros(&[f]));
        p.insert(block_name(i, "ffn.w2"), Tensor::randn(&[f, h], std, &mut r));
        p.insert(block_name(i, "ffn.b2"), Tensor::zeros(&[h]));
    }
    p.insert("out.norm", Tensor::ones(&[h]));
    p.insert("head_a.w", Tensor::randn(&[h, d], std, &mut r));
    p.insert("head_a.b", Tensor::zeros(&[d]));
    p.insert("head_b.w", Tensor::zeros(&[h, d]));
    p.insert("head_b.b", Tensor::zeros(&[d]));
    Ok(GeneratorState {
        config: config.clone(),
        layout,
        params: p,
    })
}

/// Reorders condition rows by their bit patterns so the generator sees the
/// same input for any permutation of the condition set.
pub fn canonical_conditions(u: &Tensor) -> Tensor {
    let c = u.shape()[1];
    let mut rows: Vec<&[f64]> = u.data().chunks(c).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .map(|v| v.to_bits())
            .cmp(b.iter().map(|v| v.to_bits()))
    });
    Tensor::new(u.shape().to_vec(), rows.concat()).expect("same shape")
}

struct Tables {
    intra: Arc<RotaryTable>,
    inter: Arc<RotaryTable>,
}

impl GeneratorState {
    pub fn scalar_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn tables(&self) -> Tables {
        let [l, s, r, _] = self.layout.token_shape();
        let bands = self.config.bands();
        let (heads, dh, base) = (self.config.heads, self.config.head_width(), self.config.rope_base);
        let intra = rope::table(l * s * r, heads, dh, bands, base, |row| {
            // rows ordered (layer, token, rank)
            (row / (s * r), (row / r) % s, row % r)
        });
        let inter = rope::table(l * s * r, heads, dh, bands, base, |row| {
            // rows ordered (token, rank, layer)
            (row % l, row / (r * l), (row / l) % r)
        });
        Tables {
            intra: Arc::new(intra),
            inter: Arc::new(inter),
        }
    }

    fn check_conditions(&self, u: &Tensor) -> Result<()> {
        let c = self.config.condition_width;
        if u.rank() != 2 || u.shape()[0] == 0 || u.shape()[1] != c {
            return Err(dim_err(
                "generate",
                format!("conditions {:?}, expected [n ≥ 1, {c}]", u.shape()),
            ));
        }
        Ok(())
    }

    /// Multi-head attention. `q: [B, n, h]`, `k, v: [B, m, h]`; rotary tables
    /// (if any) are indexed by rows of `[B·n·H, dh]`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        rot_q: Option<&Arc<RotaryTable>>,
        rot_k: Option<&Arc<RotaryTable>>,
    ) -> Result<Var> {
        let (heads, dh) = (self.config.heads, self.config.head_width());
        let qs = tape.shape(q).to_vec();
        let ks = tape.shape(k).to_vec();
        let (b, n, m) = (qs[0], qs[1], ks[1]);
        let rotate = |tape: &mut Tape, x: Var, rows: usize, table: Option<&Arc<RotaryTable>>| -> Result<Var> {
            match table {
                Some(t) => {
                    let flat = tape.reshape(x, &[rows * heads, dh])?;
                    tape.rotary(flat, t.clone())
                }
                None => Ok(x),
            }
        };
        let q = rotate(tape, q, b * n, rot_q)?;
        let k = rotate(tape, k, b * m, rot_k)?;
        let split = |tape: &mut Tape, x: Var, len: usize| -> Result<Var> {
            let x = tape.reshape(x, &[b, len, heads, dh])?;
            let x = tape.permute(x, &[0, 2, 1, 3])?;
            tape.reshape(x, &[b * heads, len, dh])
        };
        let qh = split(tape, q, n)?;
        let kh = split(tape, k, m)?;
        let vh = split(tape, v, m)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = tape.softmax_rows(scores)?;
        let out = tape.matmul(probs, vh)?;
        let out = tape.reshape(out, &[b, heads, n, dh])?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        tape.reshape(out, &[b, n, heads * dh])
    }

    /// Pre-norm self-attention sub-layer with residual; `x: [B, n, h]`.
    fn self_attention(
        &self,
        tape: &mut Tape,
        p: &ParamVars,
        prefix: &str,
        x: Var,
        table: &Arc<RotaryTable>,
    ) -> Result<Var> {
        let g = |name: &str| p.get(&self.params, &format!("{prefix}.{name}"));
        let n = tape.rms_norm(x, g("norm"), NORM_EPS)?;
        let q = tape.linear(n, g("wq"), None)?;
        let k = tape.linear(n, g("wk"), None)?;
        let v = tape.linear(n, g("wv"), None)?;
        let a = self.attend(tape, q, k, v, Some(table), Some(table))?;
        let o = tape.linear(a, g("wo"), None)?;
        tape.add(x, o)
    }

    fn block(&self, tape: &mut Tape, p: &ParamVars, i: usize, x: Var, cond: Var, tables: &Tables) -> Result<Var> {
        let [l, s, r, _] = self.layout.token_shape();
        let h = self.config.hidden;
        let x = tape.reshape(x, &[l, s * r, h])?;
        let x = self.self_attention(tape, p, &block_name(i, "intra"), x, &tables.intra)?;

        let xt = tape.permute(x, &[1, 0, 2])?;
        let xt = self.self_attention(tape, p, &block_name(i, "inter"), xt, &tables.inter)?;
        let x = tape.permute(xt, &[1, 0, 2])?;

        let g = |name: &str| p.get(&self.params, &block_name(i, name));
        let x = tape.reshape(x, &[1, l * s * r, h])?;
        let n = tape.rms_norm(x, g("cross.norm"), NORM_EPS)?;
        let q = tape.linear(n, g("cross.wq"), None)?;
        let k = tape.linear(cond, g("cross.wk"), None)?;
        let v = tape.linear(cond, g("cross.wv"), None)?;
        let a = self.attend(tape, q, k, v, None, None)?;
        let o = tape.linear(a, g("cross.wo"), None)?;
        let x = tape.add(x, o)?;

        let n = tape.rms_norm(x, g("ffn.norm"), NORM_EPS)?;
        let f = tape.linear(n, g("ffn.w1"), Some(g("ffn.b1")))?;
        let f = tape.gelu(f);
        let o = tape.linear(f, g("ffn.w2"), Some(g("ffn.b2")))?;
        let x = tape.add(x, o)?;
        tape.reshape(x, &[l, s, r, h])
    }

    /// Records the full generation on `tape` and returns the `[l, s, r, d]`
    /// token tensor.
    pub fn generate_on_tape(&self, tape: &mut Tape, p: &ParamVars, conditions: &Tensor) -> Result<Var> {
        self.check_conditions(conditions)?;
        let u = canonical_conditions(conditions);
        let nc = u.shape()[0];
        let c = self.config.condition_width;
        let mut cond = tape.constant(u.reshape(&[1, nc, c])?);
        if self.config.condition_projector {
            cond = tape.linear(cond, p.get(&self.params, "cond_proj"), None)?;
        }
        let tables = self.tables();
        let mut x = p.get(&self.params, "embed");
        for i in 0..self.config.blocks {
            x = self.block(tape, p, i, x, cond, &tables)?;
        }
        let n = tape.rms_norm(x, p.get(&self.params, "out.norm"), NORM_EPS)?;
        let head = |tape: &mut Tape, w: &str, b: &str| {
            tape.linear(n, p.get(&self.params, w), Some(p.get(&self.params, b)))
        };
        let out_a = head(tape, "head_a.w", "head_a.b")?;
        let out_b = head(tape, "head_b.w", "head_b.b")?;
        let mask_a = tape.constant(self.layout.kind_mask(TokenKind::A));
        let mask_b = tape.constant(self.layout.kind_mask(TokenKind::B));
        let a = tape.mul(out_a, mask_a)?;
        let b = tape.mul(out_b, mask_b)?;
        tape.add(a, b)
    }

    pub fn generate(&self, conditions: &Tensor) -> Result<ParamTokens> {
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, false);
        let out = self.generate_on_tape(&mut tape, &p, conditions)?;
        Ok(ParamTokens {
            tensor: tape.value(out).clone(),
            layout: self.layout.clone(),
        })
    }

    /// Output of block `block`'s intra-layer sub-layer applied to `latent`
    /// (`[l, s, r, h]`), before any cross-layer mixing.
    pub fn intra_layer_output(&self, block: usize, latent: &Tensor) -> Result<Tensor> {
        if block >= self.config.blocks {
            return Err(Error::Parameter(format!("block {block} out of range")));
        }
        let [l, s, r, _] = self.layout.token_shape();
        let mut tape = Tape::new();
        let p = self.params.load(&mut tape, false);
        let x = tape.constant(latent.reshape(&[l, s * r, self.config.hidden])?);
        let tables = self.tables();
        let y = self.self_attention(&mut tape, &p, &block_name(block, "intra"), x, &tables.intra)?;
        tape.value(y).reshape(latent.shape())
    }
}
