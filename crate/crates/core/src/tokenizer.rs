//! Rank-anchored parameter tokenization.
//!
//! LoRA pairs `A ∈ R^{d_in×r}`, `B ∈ R^{r×d_out}` are cut along their channel
//! axis into segments of width `d`. Every segment becomes one `r×d` token: A
//! row-blocks are transposed, B column-blocks are taken as is. Per layer the
//! tokens of all modules are concatenated (per module: A tokens, then B tokens)
//! giving a `[layers, s, r, d]` tensor.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModuleSpec {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    A,
    B,
}

/// Provenance of one token within a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTag {
    pub kind: TokenKind,
    pub module: usize,
    pub slice: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterLayout {
    layers: usize,
    modules: Vec<ModuleSpec>,
    rank: usize,
    segment: usize,
    tags: Vec<TokenTag>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds the tokenization plan. `segment_override` replaces the default
/// segment width (gcd of every module dimension) and must divide all of them.
pub fn plan_layout(
    specs: &[ModuleSpec],
    layers: usize,
    rank: usize,
    segment_override: Option<usize>,
) -> Result<AdapterLayout> {
    if specs.is_empty() {
        return Err(Error::Layout("no adapted modules".into()));
    }
    if layers == 0 || rank == 0 {
        return Err(Error::Layout(format!(
            "layers ({layers}) and rank ({rank}) must be positive"
        )));
    }
    if let Some(bad) = specs.iter().find(|m| m.d_in == 0 || m.d_out == 0) {
        return Err(Error::Layout(format!("module `{}` has a zero dimension", bad.name)));
    }
    let common = specs
        .iter()
        .fold(0, |g, m| gcd(gcd(g, m.d_in), m.d_out));
    let segment = match segment_override {
        Some(d) if d == 0 || common % d != 0 => {
            return Err(Error::Layout(format!(
                "segment {d} does not divide every module dimension (gcd {common})"
            )))
        }
        Some(d) => d,
        None => common,
    };
    if segment == 1 {
        log::debug!("segment width is 1; every token is an r×1 column");
    }
    let mut tags = Vec::new();
    for (j, m) in specs.iter().enumerate() {
        for q in 0..m.d_in / segment {
            tags.push(TokenTag {
                kind: TokenKind::A,
                module: j,
                slice: q,
            });
        }
        for q in 0..m.d_out / segment {
            tags.push(TokenTag {
                kind: TokenKind::B,
                module: j,
                slice: q,
            });
        }
    }
    Ok(AdapterLayout {
        layers,
        modules: specs.to_vec(),
        rank,
        segment,
        tags,
    })
}

impl AdapterLayout {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn modules(&self) -> &[ModuleSpec] {
        &self.modules
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Segment width `d`.
    pub fn segment(&self) -> usize {
        self.segment
    }

    /// Tokens per layer (`s`).
    pub fn tokens_per_layer(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    /// A-token count of module `j`.
    pub fn n(&self, j: usize) -> usize {
        self.modules[j].d_in / self.segment
    }

    /// B-token count of module `j`.
    pub fn m(&self, j: usize) -> usize {
        self.modules[j].d_out / self.segment
    }

    /// `[l, s, r, d]`
    pub fn token_shape(&self) -> [usize; 4] {
        [self.layers, self.tags.len(), self.rank, self.segment]
    }

    pub fn token_count(&self) -> usize {
        self.token_shape().iter().product()
    }

    /// Scalar count of every A and B matrix across all layers.
    pub fn adapter_scalar_count(&self) -> usize {
        self.layers
            * self
                .modules
                .iter()
                .map(|m| (m.d_in + m.d_out) * self.rank)
                .sum::<usize>()
    }

    fn token_offset(&self, module: usize, kind: TokenKind) -> usize {
        self.tags
            .iter()
            .position(|t| t.module == module && t.kind == kind)
            .expect("every module has A and B tokens")
    }

    /// Flat token-tensor index of every entry of A (row-major `d_in×r`).
    pub fn a_index(&self, layer: usize, module: usize) -> Vec<usize> {
        let (s, r, d) = (self.tags.len(), self.rank, self.segment);
        let base = self.token_offset(module, TokenKind::A);
        let d_in = self.modules[module].d_in;
        let mut idx = Vec::with_capacity(d_in * r);
        for row in 0..d_in {
            let t = base + row / d;
            for rr in 0..r {
                idx.push(((layer * s + t) * r + rr) * d + row % d);
            }
        }
        idx
    }

    /// Flat token-tensor index of every entry of B (row-major `r×d_out`).
    pub fn b_index(&self, layer: usize, module: usize) -> Vec<usize> {
        let (s, r, d) = (self.tags.len(), self.rank, self.segment);
        let base = self.token_offset(module, TokenKind::B);
        let d_out = self.modules[module].d_out;
        let mut idx = Vec::with_capacity(d_out * r);
        for rr in 0..r {
            for col in 0..d_out {
                let t = base + col / d;
                idx.push(((layer * s + t) * r + rr) * d + col % d);
            }
        }
        idx
    }

    /// 1.0 at positions of A-tagged tokens, 0.0 elsewhere, shaped `[l, s, r, d]`.
    pub fn kind_mask(&self, kind: TokenKind) -> Tensor {
        let [l, s, r, d] = self.token_shape();
        Tensor::from_fn(&[l, s, r, d], |i| {
            let t = (i / (r * d)) % s;
            if self.tags[t].kind == kind {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// One LoRA pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn zeros(d_in: usize, d_out: usize, rank: usize) -> Self {
        Self {
            a: Tensor::zeros(&[d_in, rank]),
            b: Tensor::zeros(&[rank, d_out]),
        }
    }

    /// Dense `A·B`.
    pub fn delta(&self) -> Tensor {
        self.a.matmul(&self.b).expect("lora shapes")
    }
}

/// Adapters for every layer, modules in layout order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub layers: Vec<Vec<LoraPair>>,
}

impl AdapterSet {
    pub fn zeros(layout: &AdapterLayout) -> Self {
        Self {
            layers: (0..layout.layers())
                .map(|_| {
                    layout
                        .modules()
                        .iter()
                        .map(|m| LoraPair::zeros(m.d_in, m.d_out, layout.rank()))
                        .collect()
                })
                .collect(),
        }
    }

    /// Elementwise mean of several sets with identical shapes.
    pub fn mean(sets: &[AdapterSet]) -> Result<AdapterSet> {
        let first = sets
            .first()
            .ok_or_else(|| Error::Parameter("mean of an empty adapter list".into()))?;
        let mut acc = first.clone();
        for set in &sets[1..] {
            for (la, lb) in acc.layers.iter_mut().zip(&set.layers) {
                for (pa, pb) in la.iter_mut().zip(lb) {
                    pa.a = pa.a.add(&pb.a)?;
                    pa.b = pa.b.add(&pb.b)?;
                }
            }
        }
        let k = 1.0 / sets.len() as f64;
        for layer in &mut acc.layers {
            for p in layer {
                p.a = p.a.scale(k);
                p.b = p.b.scale(k);
            }
        }
        Ok(acc)
    }

    /// Flattened concatenation of every A then B, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| p.a.data().iter().chain(p.b.data()).copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTokens {
    pub tensor: Tensor,
    pub layout: Arc<AdapterLayout>,
}

pub fn tokenize(adapters: &AdapterSet, layout: &Arc<AdapterLayout>) -> Result<ParamTokens> {
    if adapters.layers.len() != layout.layers() {
        return Err(Error::Tokenize(format!(
            "{} adapter layers for a {}-layer layout",
            adapters.layers.len(),
            layout.layers()
        )));
    }
    let mut data = vec![0.0; layout.token_count()];
    for (li, layer) in adapters.layers.iter().enumerate() {
        if layer.len() != layout.modules().len() {
            return Err(Error::Tokenize(format!(
                "layer {li}: {} modules, layout has {}",
                layer.len(),
                layout.modules().len()
            )));
        }
        for (j, (pair, spec)) in layer.iter().zip(layout.modules()).enumerate() {
            if pair.a.shape() != [spec.d_in, layout.rank()]
                || pair.b.shape() != [layout.rank(), spec.d_out]
            {
                return Err(Error::Tokenize(format!(
                    "layer {li} module `{}`: A {:?}, B {:?}, expected A [{}, {}], B [{}, {}]",
                    spec.name,
                    pair.a.shape(),
                    pair.b.shape(),
                    spec.d_in,
                    layout.rank(),
                    layout.rank(),
                    spec.d_out
                )));
            }
            for (src, dst) in pair.a.data().iter().zip(layout.a_index(li, j)) {
                data[dst] = *src;
            }
            for (src, dst) in pair.b.data().iter().zip(layout.b_index(li, j)) {
                data[dst] = *src;
            }
        }
    }
    Ok(ParamTokens {
        tensor: Tensor::new(layout.token_shape().to_vec(), data)?,
        layout: layout.clone(),
    })
}

fn check_token_shape(shape: &[usize], layout: &AdapterLayout) -> Result<()> {
    if shape != layout.token_shape() {
        return Err(Error::Tokenize(format!(
            "token tensor {:?} does not match layout {:?}",
            shape,
            layout.token_shape()
        )));
    }
    Ok(())
}

pub fn detokenize(tokens: &ParamTokens) -> Result<AdapterSet> {
    let layout = &tokens.layout;
    check_token_shape(tokens.tensor.shape(), layout)?;
    let src = tokens.tensor.data();
    let layers = (0..layout.layers())
        .map(|li| {
            layout
                .modules()
                .iter()
                .enumerate()
                .map(|(j, spec)| {
                    let a = layout.a_index(li, j).iter().map(|&i| src[i]).collect();
                    let b = layout.b_index(li, j).iter().map(|&i| src[i]).collect();
                    LoraPair {
                        a: Tensor::new(vec![spec.d_in, layout.rank()], a).expect("A shape"),
                        b: Tensor::new(vec![layout.rank(), spec.d_out], b).expect("B shape"),
                    }
                })
                .collect()
        })
        .collect();
    Ok(AdapterSet { layers })
}

/// A and B handles of one module on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
}

/// Differentiable detokenization: gradients on the returned matrices flow
/// back into `tokens`.
pub fn detokenize_on_tape(tape: &mut Tape, tokens: Var, layout: &AdapterLayout) -> Result<Vec<Vec<LoraVars>>> {
    check_token_shape(tape.shape(tokens), layout)?;
    let mut out = Vec::with_capacity(layout.layers());
    for li in 0..layout.layers() {
        let mut layer = Vec::with_capacity(layout.modules().len());
        for (j, spec) in layout.modules().iter().enumerate() {
            let a = tape.gather(tokens, Arc::new(layout.a_index(li, j)), &[spec.d_in, layout.rank()])?;
            let b = tape.gather(tokens, Arc::new(layout.b_index(li, j)), &[layout.rank(), spec.d_out])?;
            layer.push(LoraVars { a, b });
        }
        out.push(layer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_module_arithmetic() {
        let l = plan_layout(&[ModuleSpec::new("w", 4, 6)], 1, 2, None).unwrap();
        assert_eq!(l.segment(), 2);
        assert_eq!((l.n(0), l.m(0), l.tokens_per_layer()), (2, 3, 5));
        assert_eq!(l.token_shape(), [1, 5, 2, 2]);
    }

    #[test]
    fn coprime_dims_degenerate_to_width_one() {
        let l = plan_layout(&[ModuleSpec::new("w", 3, 5)], 1, 2, None).unwrap();
        assert_eq!(l.segment(), 1);
        assert_eq!(l.tokens_per_layer(), 8);
        assert_eq!(l.token_shape(), [1, 8, 2, 1]);
    }

    #[test]
    fn full_scale_shape_with_override() {
        let l = plan_layout(&[ModuleSpec::new("proj", 1536, 1536)], 32, 16, Some(128)).unwrap();
        assert_eq!(l.token_shape(), [32, 24, 16, 128]);
        assert_eq!(l.token_count(), 1_572_864);
        assert_eq!(l.token_count(), l.adapter_scalar_count());
    }

    #[test]
    fn layout_errors() {
        assert!(plan_layout(&[], 1, 2, None).is_err());
        assert!(plan_layout(&[ModuleSpec::new("w", 4, 6)], 1, 2, Some(4)).is_err());
        assert!(plan_layout(&[ModuleSpec::new("w", 4, 6)], 0, 2, None).is_err());
    }

    #[test]
    fn tags_are_a_then_b_per_module() {
        let l = plan_layout(&[ModuleSpec::new("x", 4, 2), ModuleSpec::new("y", 2, 6)], 1, 1, None).unwrap();
        let kinds: Vec<_> = l.tags().iter().map(|t| (t.kind, t.module, t.slice)).collect();
        use TokenKind::*;
        assert_eq!(
            kinds,
            vec![(A, 0, 0), (A, 0, 1), (B, 0, 0), (A, 1, 0), (B, 1, 0), (B, 1, 1), (B, 1, 2)]
        );
    }

    #[test]
    fn zero_adapters_zero_tokens() {
        let l = Arc::new(plan_layout(&[ModuleSpec::new("w", 4, 6)], 2, 2, None).unwrap());
        let t = tokenize(&AdapterSet::zeros(&l), &l).unwrap();
        assert_eq!(t.tensor.abs_sum(), 0.0);
        assert_eq!(detokenize(&t).unwrap(), AdapterSet::zeros(&l));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let l = Arc::new(plan_layout(&[ModuleSpec::new("w", 4, 6)], 1, 2, None).unwrap());
        let mut set = AdapterSet::zeros(&l);
        set.layers[0][0].a = Tensor::zeros(&[4, 3]);
        assert!(matches!(tokenize(&set, &l), Err(Error::Tokenize(_))));
        let bad = ParamTokens {
            tensor: Tensor::zeros(&[1, 4, 2, 2]),
            layout: l,
        };
        assert!(detokenize(&bad).is_err());
    }
}
