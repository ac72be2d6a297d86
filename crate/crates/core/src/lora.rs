//! Low-rank adapters `W = W0 + scale * B A` on the FC layers of the backbone.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParamSet};
use crate::error::{Error, Result};
use crate::model::{GruEnhancerParams, ModelDims};

/// Parameter group id of adapter parameters on a tape.
pub const ADAPTER_GROUP: u32 = 1;

pub const SIDECAR_MAGIC: &[u8; 8] = b"SELALORA";
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLayer {
    FcIn,
    FcOut,
}

impl TargetLayer {
    /// `(d, k)`: outputs and inputs of the targeted layer. The backbone
    /// stores the layer as its `k x d` transpose and applies it as `x W`.
    pub fn shape(self, dims: ModelDims) -> (usize, usize) {
        match self {
            TargetLayer::FcIn => (dims.hidden, dims.bands),
            TargetLayer::FcOut => (dims.bands, dims.hidden),
        }
    }

    fn id(self) -> u8 {
        match self {
            TargetLayer::FcIn => 0,
            TargetLayer::FcOut => 1,
        }
    }

    fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(TargetLayer::FcIn),
            1 => Ok(TargetLayer::FcOut),
            other => Err(Error::Unknown {
                kind: "target layer",
                name: other.to_string(),
            }),
        }
    }
}

impl FromStr for TargetLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fc_in" => Ok(TargetLayer::FcIn),
            "fc_out" => Ok(TargetLayer::FcOut),
            other => Err(Error::Unknown {
                kind: "target layer",
                name: other.into(),
            }),
        }
    }
}

impl fmt::Display for TargetLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetLayer::FcIn => "fc_in",
            TargetLayer::FcOut => "fc_out",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub scale: f64,
    pub targets: Vec<TargetLayer>,
}

impl LoraConfig {
    /// Rank 1, scale 64 on both FC layers.
    pub fn reference() -> Self {
        Self {
            rank: 1,
            scale: 64.0,
            targets: vec![TargetLayer::FcIn, TargetLayer::FcOut],
        }
    }

    pub fn validate(&self, dims: ModelDims) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig(
                "adapter config has no target layers".into(),
            ));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(Error::InvalidConfig(
                "duplicate adapter target layer".into(),
            ));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "adapter scale {} is not finite",
                self.scale
            )));
        }
        for &t in &self.targets {
            let (d, k) = t.shape(dims);
            if self.rank == 0 || self.rank > d.min(k) {
                return Err(Error::InvalidConfig(format!(
                    "rank {} invalid for {t} ({d}x{k})",
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// `sum over targets of r (d + k)`.
    pub fn adaptable_count(&self, dims: ModelDims) -> usize {
        self.targets
            .iter()
            .map(|t| {
                let (d, k) = t.shape(dims);
                self.rank * (d + k)
            })
            .sum()
    }
}

/// One adapter pair for a single layer: `A` is `r x k`, `B` is `d x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Matrix,
    pub b: Matrix,
    pub scale: f64,
    pub target: TargetLayer,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }
}

/// The adapters of one scene. Parameters are stored as `[A, B]` per target
/// in config order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    config: LoraConfig,
    dims: ModelDims,
    scene: usize,
    params: ParamSet,
}

impl AdapterSet {
    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn scene(&self) -> usize {
        self.scene
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn adaptable_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub(crate) fn check_dims(&self, dims: ModelDims) -> Result<()> {
        if dims != self.dims {
            return Err(Error::shape(
                "adapters",
                format!("adapters built for {:?}, backbone is {dims:?}", self.dims),
            ));
        }
        Ok(())
    }

    /// Parameter indices of `(A, B)` for a target.
    pub fn indices(&self, target: TargetLayer) -> Result<(usize, usize)> {
        let pos = self
            .config
            .targets
            .iter()
            .position(|&t| t == target)
            .ok_or_else(|| Error::Unknown {
                kind: "adapter target",
                name: target.to_string(),
            })?;
        Ok((2 * pos, 2 * pos + 1))
    }

    pub fn adapter(&self, target: TargetLayer) -> Result<LoraAdapter> {
        let (a, b) = self.indices(target)?;
        Ok(LoraAdapter {
            a: self.params.value(a).clone(),
            b: self.params.value(b).clone(),
            scale: self.config.scale,
            target,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.scene as u64).to_le_bytes());
        out.extend_from_slice(&(self.config.rank as u32).to_le_bytes());
        out.extend_from_slice(&self.config.scale.to_le_bytes());
        out.extend_from_slice(&(self.dims.bands as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims.hidden as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.targets.len() as u32).to_le_bytes());
        for &t in &self.config.targets {
            out.push(t.id());
        }
        for v in self.params.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("adapter sidecar: {m}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != SIDECAR_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != SIDECAR_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let scene = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let rank = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let scale = f64::from_bits(r.u64().ok_or_else(|| bad("truncated header"))?);
        let bands = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let hidden = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let n = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let targets = (0..n)
            .map(|_| {
                r.take(1)
                    .ok_or_else(|| bad("truncated targets"))
                    .and_then(|b| TargetLayer::from_id(b[0]))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = LoraConfig {
            rank,
            scale,
            targets,
        };
        let dims = ModelDims { bands, hidden };
        let mut set = empty_set(&config, dims, scene)?;
        let rest = &bytes[r.pos..];
        if rest.len() != 8 * set.params.scalar_count() {
            return Err(bad("payload length does not match config"));
        }
        let flat: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        set.params.load_flat(&flat)?;
        Ok(set)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn empty_set(config: &LoraConfig, dims: ModelDims, scene: usize) -> Result<AdapterSet> {
    config.validate(dims)?;
    let mut params = ParamSet::new(ADAPTER_GROUP);
    for &t in &config.targets {
        let (d, k) = t.shape(dims);
        params.push(format!("{t}.lora_a"), Array2::zeros((config.rank, k)), true);
        params.push(format!("{t}.lora_b"), Array2::zeros((d, config.rank)), true);
    }
    Ok(AdapterSet {
        config: config.clone(),
        dims,
        scene,
        params,
    })
}

/// Fresh adapters: `A` uniform in `+-1/sqrt(k)`, `B` zero, so the effective
/// weights equal the backbone's at creation.
pub fn init_adapters<R: Rng>(
    config: &LoraConfig,
    dims: ModelDims,
    scene: usize,
    rng: &mut R,
) -> Result<AdapterSet> {
    let mut set = empty_set(config, dims, scene)?;
    for i in 0..config.targets.len() {
        let a = set.params.value_mut(2 * i);
        let bound = 1.0 / (a.ncols() as f64).sqrt();
        a.mapv_inplace(|_| rng.random_range(-bound..bound));
    }
    Ok(set)
}

/// `W0 + scale * B A`.
pub fn effective_weight(w0: &Matrix, adapter: &LoraAdapter) -> Result<Matrix> {
    let (d, k) = w0.dim();
    let r = adapter.a.nrows();
    if adapter.a.dim() != (r, k) || adapter.b.dim() != (d, r) {
        return Err(Error::shape(
            "effective_weight",
            format!(
                "W0 {d}x{k}, B {:?}, A {:?}",
                adapter.b.dim(),
                adapter.a.dim()
            ),
        ));
    }
    Ok(w0 + &(adapter.b.dot(&adapter.a) * adapter.scale))
}

/// A new backbone whose targeted weights are replaced by their effective
/// weights, transposed back to the stored `k x d` layout. The input backbone
/// is not modified.
pub fn merge(base: &GruEnhancerParams, adapters: &AdapterSet) -> Result<GruEnhancerParams> {
    adapters.check_dims(base.dims())?;
    let mut merged = base.clone();
    for &target in &adapters.config().targets {
        let w0 = base.weight(target).t().to_owned();
        let w = effective_weight(&w0, &adapters.adapter(target)?)?;
        *merged.weight_mut(target) = w.reversed_axes();
    }
    Ok(merged)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionMode {
    /// Fresh adapters for the next scene.
    Reset,
    /// Keep the adapted values and move on.
    Carry,
}

/// Adapters for scene `m + 1`.
pub fn transition<R: Rng>(
    adapters: &AdapterSet,
    mode: TransitionMode,
    rng: &mut R,
) -> Result<AdapterSet> {
    let next = adapters.scene + 1;
    match mode {
        TransitionMode::Reset => init_adapters(&adapters.config, adapters.dims, next, rng),
        TransitionMode::Carry => {
            let mut set = adapters.clone();
            set.scene = next;
            set.params.zero_grad();
            Ok(set)
        }
    }
}
