//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OMOE" | version u32 | count u32
//! count × { name_len u32 | name utf-8 | rank u32 | dims u64×rank | offset u64 }
//! data: f64 little-endian, row-major, at `offset` bytes from the data start
//! sha256 of every preceding byte (32 bytes)
//! ```
//!
//! Entries are written in name order, so equal contents give equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig, ClassificationHead};
use crate::decomp::{Expert, ExpertKind, ExpertPool, LayerId, Proj, WeightDecomposition};
use crate::error::{Error, Result};
use crate::model::{AdaptedLayer, OmniModel, TrainedFlags};
use crate::numcore::Matrix;
use crate::router::GatingNet;
use crate::synthdata::{FakeMode, SyntheticSample};

pub const MAGIC: &[u8; 4] = b"OMOE";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), Tensor { dims, data });
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix) {
        self.insert(name, vec![m.rows(), m.cols()], m.data().to_vec());
    }

    pub fn insert_vector(&mut self, name: impl Into<String>, v: &[f64]) {
        self.insert(name, vec![v.len()], v.to_vec());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::IncompleteCheckpoint(name.to_string()))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name)?;
        match t.dims[..] {
            [r, c] => Matrix::new(r, c, t.data.clone()),
            _ => Err(Error::CorruptCheckpoint(format!("tensor '{name}' is not rank 2"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name)?;
        if t.dims.len() != 1 {
            return Err(Error::CorruptCheckpoint(format!("tensor '{name}' is not rank 1")));
        }
        Ok(t.data.clone())
    }

    fn usize_vec(&self, name: &str) -> Result<Vec<usize>> {
        self.vector(name)?
            .into_iter()
            .map(|x| {
                if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
                    Ok(x as usize)
                } else {
                    Err(Error::CorruptCheckpoint(format!("'{name}' holds a non-integer {x}")))
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.data.len() as u64;
        }
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::CorruptCheckpoint("file truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::CorruptCheckpoint("content digest mismatch (corrupt or truncated)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::CorruptCheckpoint(format!("tensor '{name}' has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, dims, offset));
        }
        let data = &body[r.pos..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0usize;
        for (name, dims, offset) in table {
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(8))
                .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor '{name}' is too large")))?;
            if offset != expected_offset || offset + n > data.len() {
                return Err(Error::CorruptCheckpoint(format!("tensor '{name}' has a bad offset")));
            }
            let values = data[offset..offset + n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset += n;
            if tensors.insert(name.clone(), Tensor { dims, data: values }).is_some() {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor '{name}'")));
            }
        }
        if expected_offset != data.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint("tensor table truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn put_backbone(c: &mut Container, prefix: &str, b: &Backbone) {
    for (name, m) in b.named_params() {
        c.insert_matrix(format!("{prefix}.{name}"), m);
    }
}

fn get_backbone(c: &Container, prefix: &str, cfg: BackboneConfig) -> Result<Backbone> {
    let mut b = Backbone::new(cfg, 0)?;
    let names: Vec<String> = b.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, slot) in names.iter().zip(b.params_mut()) {
        let m = c.matrix(&format!("{prefix}.{name}"))?;
        if m.shape() != slot.shape() {
            return Err(Error::CorruptCheckpoint(format!("'{prefix}.{name}' has the wrong shape")));
        }
        *slot = m;
    }
    Ok(b)
}

fn put_expert(c: &mut Container, prefix: &str, e: &Expert) {
    c.insert_matrix(format!("{prefix}.u"), &e.u);
    c.insert_vector(format!("{prefix}.sigma"), &e.sigma);
    c.insert_matrix(format!("{prefix}.v"), &e.v);
}

fn get_expert(c: &Container, prefix: &str, kind: ExpertKind) -> Result<Expert> {
    Ok(Expert {
        u: c.matrix(&format!("{prefix}.u"))?,
        sigma: c.vector(&format!("{prefix}.sigma"))?,
        v: c.matrix(&format!("{prefix}.v"))?,
        kind,
        trainable: false,
    })
}

fn put_head(c: &mut Container, prefix: &str, h: &ClassificationHead) {
    c.insert_matrix(format!("{prefix}.weight"), &h.weight);
    c.insert_matrix(format!("{prefix}.bias"), &h.bias);
}

fn get_head(c: &Container, prefix: &str) -> Result<ClassificationHead> {
    Ok(ClassificationHead {
        weight: c.matrix(&format!("{prefix}.weight"))?,
        bias: c.matrix(&format!("{prefix}.bias"))?,
    })
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Serializes every model component.
pub fn model_to_container(m: &OmniModel) -> Container {
    let mut c = Container::new();
    let cfg = m.backbone.cfg;
    c.insert_vector(
        "meta.backbone",
        &[cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.n_blocks, cfg.n_heads, cfg.ffn_dim].map(|x| x as f64),
    );
    let layers: Vec<f64> = m
        .layers
        .keys()
        .flat_map(|l| [l.block as f64, Proj::ALL.iter().position(|&p| p == l.proj).unwrap_or(0) as f64])
        .collect();
    c.insert("meta.layers", vec![m.layers.len(), 2], layers);
    let mut trained = vec![flag(m.trained.universal)];
    trained.extend(m.trained.semantic.iter().map(|&t| flag(t)));
    c.insert_vector("meta.trained", &trained);
    c.insert_vector("meta.router_trained", &[flag(m.router_trained)]);
    put_backbone(&mut c, "backbone", &m.backbone);
    put_backbone(&mut c, "router_encoder", &m.router_encoder);
    for (id, l) in &m.layers {
        let d = &l.decomp;
        c.insert_matrix(format!("{id}.principal"), &d.principal);
        c.insert_matrix(format!("{id}.principal_u"), &d.principal_u);
        c.insert_vector(format!("{id}.principal_sigma"), &d.principal_sigma);
        c.insert_matrix(format!("{id}.principal_v"), &d.principal_v);
        c.insert_matrix(format!("{id}.resid_u"), &d.resid_u);
        c.insert_vector(format!("{id}.resid_sigma"), &d.resid_sigma);
        c.insert_matrix(format!("{id}.resid_v"), &d.resid_v);
        for e in l.pool.iter() {
            put_expert(&mut c, &format!("{id}.{}", e.kind), e);
        }
    }
    c.insert_matrix("router.layer1.weight", &m.router.w1);
    c.insert_matrix("router.layer1.bias", &m.router.b1);
    c.insert_matrix("router.layer2.weight", &m.router.w2);
    c.insert_matrix("router.layer2.bias", &m.router.b2);
    put_head(&mut c, "head", &m.head);
    for (kind, h) in &m.stage1_heads {
        put_head(&mut c, &format!("stage1_head.{kind}"), h);
    }
    c
}

/// Rebuilds a model; any missing tensor is an [`Error::IncompleteCheckpoint`].
pub fn model_from_container(c: &Container) -> Result<OmniModel> {
    let b = c.usize_vec("meta.backbone")?;
    let [image_size, patch_size, embed_dim, n_blocks, n_heads, ffn_dim] = b[..] else {
        return Err(Error::CorruptCheckpoint("meta.backbone must hold 6 values".into()));
    };
    let cfg = BackboneConfig {
        image_size,
        patch_size,
        embed_dim,
        n_blocks,
        n_heads,
        ffn_dim,
    };
    cfg.validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored backbone config is invalid: {e}")))?;
    let backbone = get_backbone(c, "backbone", cfg)?;
    let router_encoder = get_backbone(c, "router_encoder", cfg)?;
    let trained = c.vector("meta.trained")?;
    if trained.is_empty() {
        return Err(Error::CorruptCheckpoint("meta.trained is empty".into()));
    }
    let n_semantic = trained.len() - 1;
    let lt = c.get("meta.layers")?;
    if lt.dims.len() != 2 || lt.dims[1] != 2 {
        return Err(Error::CorruptCheckpoint("meta.layers must be n×2".into()));
    }
    let mut layers = BTreeMap::new();
    for pair in lt.data.chunks_exact(2) {
        let block = pair[0] as usize;
        let proj = *Proj::ALL
            .get(pair[1] as usize)
            .ok_or_else(|| Error::CorruptCheckpoint("bad projection index".into()))?;
        if block >= n_blocks {
            return Err(Error::CorruptCheckpoint(format!("layer block {block} out of range")));
        }
        let id = LayerId { block, proj };
        let principal_sigma = c.vector(&format!("{id}.principal_sigma"))?;
        let resid_sigma = c.vector(&format!("{id}.resid_sigma"))?;
        let decomp = WeightDecomposition {
            layer: id,
            principal: c.matrix(&format!("{id}.principal"))?,
            principal_u: c.matrix(&format!("{id}.principal_u"))?,
            principal_sigma,
            principal_v: c.matrix(&format!("{id}.principal_v"))?,
            resid_u: c.matrix(&format!("{id}.resid_u"))?,
            r: resid_sigma.len(),
            resid_sigma,
            resid_v: c.matrix(&format!("{id}.resid_v"))?,
        };
        let semantic = (0..n_semantic)
            .map(|i| get_expert(c, &format!("{id}.expert{i}"), ExpertKind::Semantic(i)))
            .collect::<Result<Vec<_>>>()?;
        let universal = get_expert(c, &format!("{id}.universal"), ExpertKind::Universal)?;
        layers.insert(
            id,
            AdaptedLayer {
                decomp,
                pool: ExpertPool { semantic, universal },
            },
        );
    }
    let router = GatingNet {
        w1: c.matrix("router.layer1.weight")?,
        b1: c.matrix("router.layer1.bias")?,
        w2: c.matrix("router.layer2.weight")?,
        b2: c.matrix("router.layer2.bias")?,
    };
    if router.n_semantic() != n_semantic {
        return Err(Error::CorruptCheckpoint("router size does not match the expert count".into()));
    }
    let head = get_head(c, "head")?;
    let mut stage1_heads = BTreeMap::new();
    let kinds = std::iter::once(ExpertKind::Universal).chain((0..n_semantic).map(ExpertKind::Semantic));
    for kind in kinds {
        if c.get(&format!("stage1_head.{kind}.weight")).is_ok() {
            stage1_heads.insert(kind, get_head(c, &format!("stage1_head.{kind}"))?);
        }
    }
    Ok(OmniModel {
        backbone,
        router_encoder,
        layers,
        router,
        head,
        stage1_heads,
        trained: TrainedFlags {
            universal: trained[0] != 0.0,
            semantic: trained[1..].iter().map(|&t| t != 0.0).collect(),
        },
        router_trained: c.vector("meta.router_trained")?.first().is_some_and(|&t| t != 0.0),
    })
}

pub fn save_checkpoint(path: &Path, model: &OmniModel) -> Result<()> {
    model_to_container(model).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<OmniModel> {
    model_from_container(&Container::load(path)?)
}

/// Backbone-only checkpoint written by pretraining.
pub fn backbone_to_container(b: &Backbone) -> Container {
    let mut c = Container::new();
    let cfg = b.cfg;
    c.insert_vector(
        "meta.backbone",
        &[cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.n_blocks, cfg.n_heads, cfg.ffn_dim].map(|x| x as f64),
    );
    put_backbone(&mut c, "backbone", b);
    c
}

pub fn backbone_from_container(c: &Container) -> Result<Backbone> {
    let b = c.usize_vec("meta.backbone")?;
    let [image_size, patch_size, embed_dim, n_blocks, n_heads, ffn_dim] = b[..] else {
        return Err(Error::CorruptCheckpoint("meta.backbone must hold 6 values".into()));
    };
    let cfg = BackboneConfig {
        image_size,
        patch_size,
        embed_dim,
        n_blocks,
        n_heads,
        ffn_dim,
    };
    cfg.validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored backbone config is invalid: {e}")))?;
    get_backbone(c, "backbone", cfg)
}

/// True when the container holds a full model rather than a bare backbone.
pub fn is_model(c: &Container) -> bool {
    c.get("meta.trained").is_ok()
}

const FAKE_MODES: [FakeMode; 4] = [FakeMode::None, FakeMode::Semantic, FakeMode::Artifact, FakeMode::Both];

/// Dataset dump: `data.images` (n×pixels), `data.domain` and
/// `data.fake_mode` (0 none, 1 semantic, 2 artifact, 3 both).
pub fn dataset_to_container(samples: &[SyntheticSample]) -> Container {
    let mut c = Container::new();
    let p = samples.first().map_or(0, |s| s.image.len());
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    c.insert("data.images", vec![samples.len(), p], data);
    c.insert_vector("data.domain", &samples.iter().map(|s| s.domain as f64).collect::<Vec<_>>());
    let modes: Vec<f64> = samples
        .iter()
        .map(|s| FAKE_MODES.iter().position(|&m| m == s.fake_mode).unwrap_or(0) as f64)
        .collect();
    c.insert_vector("data.fake_mode", &modes);
    c
}

pub fn dataset_from_container(c: &Container) -> Result<Vec<SyntheticSample>> {
    let images = c.get("data.images")?;
    let [n, p] = images.dims[..] else {
        return Err(Error::CorruptCheckpoint("data.images is not rank 2".into()));
    };
    let domains = c.usize_vec("data.domain")?;
    let modes = c.usize_vec("data.fake_mode")?;
    if domains.len() != n || modes.len() != n {
        return Err(Error::CorruptCheckpoint("dataset tensors disagree on sample count".into()));
    }
    (0..n)
        .map(|i| {
            let fake_mode = *FAKE_MODES
                .get(modes[i])
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad fake mode {}", modes[i])))?;
            Ok(SyntheticSample {
                image: images.data[i * p..(i + 1) * p].to_vec(),
                domain: domains[i],
                label: fake_mode.label(),
                fake_mode,
            })
        })
        .collect()
}
