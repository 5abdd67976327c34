//! Binary checkpoint container.
//!
//! ```text
//! "HYWU" | version u32 | section count u32
//! per section: name_len u32 | name | offset u64 | length u64
//! payloads at the recorded absolute offsets
//! ```
//!
//! All integers are little-endian. Tensor sections hold `rank u64`, `rank`
//! extents as `u64`, then `f64` payload. The `meta` section is JSON.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState, ParamSet};
use crate::tensor::Tensor;
use crate::tokenizer::{plan_layout, AdapterLayout, AdapterSet, LoraPair, ModuleSpec};

pub const MAGIC: &[u8; 4] = b"HYWU";
pub const VERSION: u32 = 1;
const META: &str = "meta";

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Generator(GeneratorState),
    Adapters {
        layout: Arc<AdapterLayout>,
        set: AdapterSet,
    },
}

#[derive(Serialize, Deserialize)]
struct LayoutMeta {
    layers: usize,
    modules: Vec<ModuleSpec>,
    rank: usize,
    segment: usize,
}

impl LayoutMeta {
    fn of(layout: &AdapterLayout) -> Self {
        Self {
            layers: layout.layers(),
            modules: layout.modules().to_vec(),
            rank: layout.rank(),
            segment: layout.segment(),
        }
    }

    fn plan(&self) -> Result<AdapterLayout> {
        plan_layout(&self.modules, self.layers, self.rank, Some(self.segment))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Meta {
    Generator {
        config: GeneratorConfig,
        layout: LayoutMeta,
        params: Vec<String>,
    },
    Adapters {
        layout: LayoutMeta,
    },
}

fn adapter_section(layer: usize, module: usize, which: &str) -> String {
    format!("adapter/{layer}/{module}/{which}")
}

fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (1 + t.rank() + t.numel()));
    out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
    for e in t.shape() {
        out.extend_from_slice(&(*e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut sections: Vec<(String, Vec<u8>)> = Vec::new();
    let meta = match ckpt {
        Checkpoint::Generator(state) => {
            for (name, t) in state.params.iter() {
                sections.push((format!("param/{name}"), encode_tensor(t)));
            }
            Meta::Generator {
                config: state.config.clone(),
                layout: LayoutMeta::of(&state.layout),
                params: state.params.names().to_vec(),
            }
        }
        Checkpoint::Adapters { layout, set } => {
            for (l, layer) in set.layers.iter().enumerate() {
                for (m, p) in layer.iter().enumerate() {
                    sections.push((adapter_section(l, m, "a"), encode_tensor(&p.a)));
                    sections.push((adapter_section(l, m, "b"), encode_tensor(&p.b)));
                }
            }
            Meta::Adapters {
                layout: LayoutMeta::of(layout),
            }
        }
    };
    sections.insert(0, (META.to_string(), serde_json::to_vec(&meta)?));
    let table_len: usize = sections.iter().map(|(n, _)| 4 + n.len() + 16).sum();
    let mut offset = (12 + table_len) as u64;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (name, body) in &sections {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.extend_from_slice(body);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn fail<T>(offset: usize, detail: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint {
        offset: offset as u64,
        detail: detail.into(),
    })
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len().saturating_sub(self.pos) < n {
            return fail(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

struct Section<'a> {
    name: String,
    start: usize,
    body: &'a [u8],
}

fn decode_tensor(s: &Section) -> Result<Tensor> {
    let mut r = Reader { bytes: s.body, pos: 0 };
    let at = |r: &Reader| s.start + r.pos;
    let rank = r.u64("tensor rank").or_else(|_| fail(at(&r), format!("section `{}` too short for a rank", s.name)))?;
    if rank > 8 {
        return fail(s.start, format!("section `{}` claims rank {rank}", s.name));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let e = r.u64("extent").or_else(|_| fail(at(&r), format!("section `{}` truncated in its extents", s.name)))?;
        shape.push(e as usize);
    }
    let numel = shape.iter().try_fold(1usize, |acc, e| acc.checked_mul(*e));
    let expected = numel.and_then(|n| n.checked_mul(8));
    if expected != Some(s.body.len() - r.pos) {
        return fail(
            at(&r),
            format!(
                "section `{}` holds {} payload bytes for shape {:?}",
                s.name,
                s.body.len() - r.pos,
                shape
            ),
        );
    }
    let data = s.body[r.pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return fail(0, "bad magic, not a HYWU checkpoint");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return fail(4, format!("unsupported format version {version}, expected {VERSION}"));
    }
    let count = r.u32("section count")? as usize;
    let mut sections = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let entry = r.pos;
        let len = r.u32("section name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "section name")?)
            .map_err(|_| Error::Checkpoint {
                offset: (entry + 4) as u64,
                detail: "section name is not UTF-8".into(),
            })?
            .to_string();
        let offset = r.u64("section offset")? as usize;
        let length = r.u64("section length")? as usize;
        match offset.checked_add(length) {
            Some(end) if end <= bytes.len() => sections.push(Section {
                name,
                start: offset,
                body: &bytes[offset..end],
            }),
            _ => {
                return fail(
                    entry,
                    format!("section `{name}` spans {offset}+{length} past end of file ({} bytes)", bytes.len()),
                )
            }
        }
    }
    let find = |name: &str| {
        sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint {
                offset: 12,
                detail: format!("missing section `{name}`"),
            })
    };
    let meta_section = find(META)?;
    let meta: Meta = serde_json::from_slice(meta_section.body).map_err(|e| Error::Checkpoint {
        offset: meta_section.start as u64,
        detail: format!("meta section: {e}"),
    })?;
    match meta {
        Meta::Generator { config, layout, params } => {
            let layout = Arc::new(layout.plan()?);
            let mut set = ParamSet::new();
            for name in params {
                set.insert(name.clone(), decode_tensor(find(&format!("param/{name}"))?)?);
            }
            Ok(Checkpoint::Generator(GeneratorState {
                config,
                layout,
                params: set,
            }))
        }
        Meta::Adapters { layout } => {
            let layout = Arc::new(layout.plan()?);
            let mut set = AdapterSet { layers: Vec::new() };
            for l in 0..layout.layers() {
                let mut row = Vec::new();
                for m in 0..layout.modules().len() {
                    row.push(LoraPair {
                        a: decode_tensor(find(&adapter_section(l, m, "a"))?)?,
                        b: decode_tensor(find(&adapter_section(l, m, "b"))?)?,
                    });
                }
                set.layers.push(row);
            }
            Ok(Checkpoint::Adapters { layout, set })
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::init_generator;
    use crate::rng;

    fn generator() -> GeneratorState {
        let layout = Arc::new(plan_layout(&[ModuleSpec::new("w", 4, 6)], 2, 2, None).unwrap());
        let cfg = GeneratorConfig {
            hidden: 8,
            heads: 2,
            blocks: 1,
            ..GeneratorConfig::default()
        };
        let mut g = init_generator(&cfg, layout, 5).unwrap();
        let mut r = rng::seeded(1, 0);
        for t in g.params.tensors_mut() {
            *t = Tensor::randn(t.shape(), 1.0, &mut r);
        }
        g
    }

    #[test]
    fn generator_round_trip_is_bit_exact() {
        let g = generator();
        let back = decode(&encode(&Checkpoint::Generator(g.clone())).unwrap()).unwrap();
        let Checkpoint::Generator(h) = back else { panic!("kind") };
        assert_eq!(h.params.names(), g.params.names());
        for (a, b) in h.params.tensors().iter().zip(g.params.tensors()) {
            assert!(a.bit_eq(b));
        }
        assert_eq!(h.layout, g.layout);
        assert_eq!(h.config, g.config);
    }

    #[test]
    fn adapters_round_trip() {
        let layout = Arc::new(plan_layout(&[ModuleSpec::new("w", 4, 4)], 1, 2, None).unwrap());
        let mut set = AdapterSet::zeros(&layout);
        set.layers[0][0].a = Tensor::from_fn(&[4, 2], |i| -(i as f64) / 3.0);
        let ck = Checkpoint::Adapters { layout, set };
        assert_eq!(decode(&encode(&ck).unwrap()).unwrap(), ck);
    }

    #[test]
    fn every_truncation_fails_cleanly() {
        let bytes = encode(&Checkpoint::Generator(generator())).unwrap();
        for cut in (0..bytes.len()).step_by(97) {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint { .. })), "cut {cut}");
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = encode(&Checkpoint::Generator(generator())).unwrap();
        bytes[4] = 2;
        match decode(&bytes) {
            Err(Error::Checkpoint { offset, detail }) => {
                assert_eq!(offset, 4);
                assert!(detail.contains("version 2"));
            }
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint { offset: 0, .. })));
    }
}
