//! Delegator and expert networks, analytic cost accounting, and the on-disk
//! checkpoint bundle.

use std::fs;
use std::ops::Add;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_mlp, save_mlp, write_atomic};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{softmax_rows, Activation, DenseLayer, Mlp};
use crate::seed::rng_for;

pub const SELECTOR_HIDDEN: usize = 100;

/// Widths used by the heterogeneous-expert configuration.
pub const HETEROGENEOUS_SCALES: [f64; 4] = [1.0, 1.5, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub feat_dim: usize,
    /// Hidden widths of the delegator's feature extractor before `feat_dim`.
    pub extractor_hidden: Vec<usize>,
    pub selector_hidden: usize,
    pub expert_hidden: Vec<usize>,
    /// Per-expert multipliers on `expert_hidden`; empty means homogeneous.
    pub expert_width_scales: Vec<f64>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            classes: 8,
            feat_dim: 32,
            extractor_hidden: Vec::new(),
            selector_hidden: SELECTOR_HIDDEN,
            expert_hidden: vec![32, 32],
            expert_width_scales: Vec::new(),
        }
    }
}

impl ArchConfig {
    /// `[input, hidden.., classes]` for expert `k`.
    pub fn expert_dims(&self, k: usize) -> Vec<usize> {
        let scale = self.expert_width_scales.get(k).copied().unwrap_or(1.0);
        std::iter::once(self.input_dim)
            .chain(
                self.expert_hidden
                    .iter()
                    .map(|&h| ((h as f64 * scale).round() as usize).max(1)),
            )
            .chain(std::iter::once(self.classes))
            .collect()
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.feat_dim == 0 || self.selector_hidden == 0 {
            return Err(Error::invalid("architecture dims must be positive"));
        }
        if !self.expert_width_scales.is_empty() && self.expert_width_scales.len() != n_experts {
            return Err(Error::invalid(format!(
                "{} width scales for {n_experts} experts",
                self.expert_width_scales.len()
            )));
        }
        if self.expert_width_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("width scales must be positive"));
        }
        Ok(())
    }
}

/// MLP whose every layer, including the last, is followed by ReLU.
fn relu_stack(dims: &[usize], rng: &mut impl rand::Rng) -> Result<Mlp> {
    let layers = dims
        .windows(2)
        .map(|w| DenseLayer::he(w[0], w[1], Activation::Relu, rng))
        .collect();
    Mlp::new(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delegator {
    pub feature_extractor: Mlp,
    pub task_predictor: Mlp,
    pub expert_selector: Mlp,
    /// Set once the extractor and predictor have been trained and fixed.
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct DelegatorOutput {
    pub class_probs: Matrix,
    pub selection_probs: Matrix,
    pub features: Matrix,
}

impl Delegator {
    pub fn new(arch: &ArchConfig, n_experts: usize, seed: u64) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::invalid("need at least one expert"));
        }
        let mut ext_dims = vec![arch.input_dim];
        ext_dims.extend(&arch.extractor_hidden);
        ext_dims.push(arch.feat_dim);
        let feature_extractor = relu_stack(&ext_dims, &mut rng_for(seed, "delegator/extractor"))?;
        let task_predictor = Mlp::he_init(
            &[arch.feat_dim, arch.classes],
            &mut rng_for(seed, "delegator/predictor"),
        )?;
        let expert_selector = Mlp::he_init(
            &[arch.feat_dim, arch.selector_hidden, n_experts],
            &mut rng_for(seed, "delegator/selector"),
        )?;
        Ok(Self {
            feature_extractor,
            task_predictor,
            expert_selector,
            frozen: false,
        })
    }

    pub fn from_parts(feature_extractor: Mlp, task_predictor: Mlp, expert_selector: Mlp) -> Result<Self> {
        let feat = feature_extractor.output_dim();
        if task_predictor.input_dim() != feat || expert_selector.input_dim() != feat {
            return Err(Error::shape(
                format!("heads reading {feat} features"),
                format!(
                    "predictor {} / selector {}",
                    task_predictor.input_dim(),
                    expert_selector.input_dim()
                ),
            ));
        }
        Ok(Self {
            feature_extractor,
            task_predictor,
            expert_selector,
            frozen: false,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.expert_selector.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.task_predictor.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.feature_extractor.input_dim()
    }

    pub fn features(&self, batch: &Matrix) -> Result<Matrix> {
        self.feature_extractor.predict(batch)
    }

    pub fn forward(&self, batch: &Matrix) -> Result<DelegatorOutput> {
        let features = self.features(batch)?;
        let class_probs = softmax_rows(&self.task_predictor.predict(&features)?);
        let selection_probs = softmax_rows(&self.expert_selector.predict(&features)?);
        Ok(DelegatorOutput {
            class_probs,
            selection_probs,
            features,
        })
    }

    /// Extractor + task predictor, i.e. what runs when routing ignores the selector.
    pub fn predictor_profile(&self) -> CostProfile {
        self.feature_extractor.cost_profile() + self.task_predictor.cost_profile()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub network: Mlp,
}

impl Expert {
    pub fn new(dims: &[usize], seed: u64, index: usize) -> Result<Self> {
        Ok(Self {
            network: Mlp::he_init(dims, &mut rng_for(seed, &format!("expert/{index}")))?,
        })
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.network.predict(batch)?))
    }
}

pub fn delegator_forward(d: &Delegator, batch: &Matrix) -> Result<DelegatorOutput> {
    d.forward(batch)
}

pub fn expert_forward(e: &Expert, batch: &Matrix) -> Result<Matrix> {
    e.forward(batch)
}

/// Per-instance cost. `flops` counts multiply-accumulates; `mac` counts
/// parameter reads plus layer input and output activations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostProfile {
    pub flops: u64,
    pub mac: u64,
    pub params: u64,
}

impl Add for CostProfile {
    type Output = CostProfile;

    fn add(self, o: CostProfile) -> CostProfile {
        CostProfile {
            flops: self.flops + o.flops,
            mac: self.mac + o.mac,
            params: self.params + o.params,
        }
    }
}

impl std::iter::Sum for CostProfile {
    fn sum<I: Iterator<Item = CostProfile>>(iter: I) -> Self {
        iter.fold(CostProfile::default(), Add::add)
    }
}

pub trait Costed {
    fn cost_profile(&self) -> CostProfile;
}

impl Costed for DenseLayer {
    fn cost_profile(&self) -> CostProfile {
        let (i, o) = (self.input_dim() as u64, self.output_dim() as u64);
        let params = o * i + o;
        CostProfile {
            flops: o * i,
            mac: params + i + o,
            params,
        }
    }
}

impl Costed for Mlp {
    fn cost_profile(&self) -> CostProfile {
        self.layers().iter().map(Costed::cost_profile).sum()
    }
}

impl Costed for Delegator {
    fn cost_profile(&self) -> CostProfile {
        self.feature_extractor.cost_profile()
            + self.task_predictor.cost_profile()
            + self.expert_selector.cost_profile()
    }
}

impl Costed for Expert {
    fn cost_profile(&self) -> CostProfile {
        self.network.cost_profile()
    }
}

pub fn cost_profile(component: &impl Costed) -> CostProfile {
    component.cost_profile()
}

/// How non-exited samples reach an expert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Argmax of the expert selector.
    Selector,
    /// Expert chosen by the rough prediction's class group; `groups[c]` is the
    /// expert for class `c`.
    ClassGroups(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    /// Delegator plus experts with early exit.
    Coe { routing: Routing },
    /// Every expert runs; class probabilities are averaged.
    Ensemble,
    /// One expert, no delegator.
    Single,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: BundleKind,
    pub mode: String,
    pub input_dim: usize,
    pub classes: usize,
    pub n_experts: usize,
    pub feat_dim: Option<usize>,
    pub expert_dims: Vec<Vec<usize>>,
    pub seed: u64,
    /// 0 = untrained, 1 = delegator head trained, 2 = joint phase finished.
    pub phase_completed: u8,
}

pub const MANIFEST_FORMAT: u32 = 1;

/// Everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub delegator: Option<Delegator>,
    pub experts: Vec<Expert>,
}

impl Bundle {
    pub fn coe(delegator: Delegator, experts: Vec<Expert>, routing: Routing, mode: &str, seed: u64, phase_completed: u8) -> Result<Self> {
        let b = Self {
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                kind: BundleKind::Coe { routing },
                mode: mode.to_string(),
                input_dim: delegator.input_dim(),
                classes: delegator.classes(),
                n_experts: experts.len(),
                feat_dim: Some(delegator.feature_extractor.output_dim()),
                expert_dims: experts.iter().map(|e| e.network.dims()).collect(),
                seed,
                phase_completed,
            },
            delegator: Some(delegator),
            experts,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn experts_only(kind: BundleKind, experts: Vec<Expert>, mode: &str, seed: u64) -> Result<Self> {
        let first = experts
            .first()
            .ok_or_else(|| Error::invalid("bundle needs at least one expert"))?;
        let b = Self {
            manifest: Manifest {
                format: MANIFEST_FORMAT,
                kind,
                mode: mode.to_string(),
                input_dim: first.network.input_dim(),
                classes: first.network.output_dim(),
                n_experts: experts.len(),
                feat_dim: None,
                expert_dims: experts.iter().map(|e| e.network.dims()).collect(),
                seed,
                phase_completed: 2,
            },
            delegator: None,
            experts,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if self.experts.is_empty() || self.experts.len() != m.n_experts {
            return Err(Error::invalid("expert count does not match manifest"));
        }
        for e in &self.experts {
            if e.network.input_dim() != m.input_dim || e.network.output_dim() != m.classes {
                return Err(Error::invalid("expert dims do not match manifest"));
            }
        }
        match (&m.kind, &self.delegator) {
            (BundleKind::Coe { routing }, Some(d)) => {
                if d.input_dim() != m.input_dim || d.classes() != m.classes {
                    return Err(Error::invalid("delegator dims do not match manifest"));
                }
                match routing {
                    Routing::Selector if d.n_experts() != m.n_experts => {
                        return Err(Error::invalid("selector width does not match expert count"))
                    }
                    Routing::ClassGroups(g) if g.len() != m.classes || g.iter().any(|&k| k >= m.n_experts) => {
                        return Err(Error::invalid("class groups do not cover the classes"))
                    }
                    _ => {}
                }
            }
            (BundleKind::Coe { .. }, None) => {
                return Err(Error::invalid("CoE bundle is missing its delegator"))
            }
            (BundleKind::Single, _) if m.n_experts != 1 => {
                return Err(Error::invalid("single-expert bundle with several experts"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn expert_profiles(&self) -> Vec<CostProfile> {
        self.experts.iter().map(Costed::cost_profile).collect()
    }

    /// Cost of the always-run stage.
    pub fn delegator_profile(&self) -> CostProfile {
        match (&self.manifest.kind, &self.delegator) {
            (BundleKind::Coe { routing: Routing::Selector }, Some(d)) => d.cost_profile(),
            (BundleKind::Coe { routing: Routing::ClassGroups(_) }, Some(d)) => d.predictor_profile(),
            _ => CostProfile::default(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let seed = self.manifest.seed;
        if let Some(d) = &self.delegator {
            save_mlp(&dir.join("extractor.bin"), &d.feature_extractor, seed)?;
            save_mlp(&dir.join("predictor.bin"), &d.task_predictor, seed)?;
            save_mlp(&dir.join("selector.bin"), &d.expert_selector, seed)?;
        }
        for (k, e) in self.experts.iter().enumerate() {
            save_mlp(&dir.join(format!("expert_{k}.bin")), &e.network, seed)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&dir.join("manifest.json"), json.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported manifest format {}", manifest.format)));
        }
        let delegator = match manifest.kind {
            BundleKind::Coe { .. } => {
                let mut d = Delegator::from_parts(
                    load_mlp(&dir.join("extractor.bin"))?.0,
                    load_mlp(&dir.join("predictor.bin"))?.0,
                    load_mlp(&dir.join("selector.bin"))?.0,
                )?;
                d.frozen = manifest.phase_completed >= 1;
                Some(d)
            }
            _ => None,
        };
        let experts = (0..manifest.n_experts)
            .map(|k| {
                load_mlp(&dir.join(format!("expert_{k}.bin"))).map(|(network, _)| Expert { network })
            })
            .collect::<Result<Vec<_>>>()?;
        let b = Self {
            manifest,
            delegator,
            experts,
        };
        b.validate()?;
        Ok(b)
    }
}
