//! The adapted network: frozen backbone, one shared adapter, and the frozen
//! specific adapters of every finished task.

use std::ops::RangeInclusive;
use std::sync::Arc;

use crate::adapters::{AdapterConfig, BlockRole, BlockWeights, SharedAdapter, SpecificAdapter};
use crate::backbone::{AdapterHook, Backbone, Projection};
use crate::diffgraph::{ParamKey, Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Frozen per-task state kept after training.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskAdapters {
    pub specific: SpecificAdapter,
    pub weights: BlockWeights,
    /// Global class ids in local-label order.
    pub classes: Vec<u32>,
}

/// Temporary linear classifier over the current task's classes.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalHead {
    /// `C × d`
    pub weight: Matrix,
    /// `1 × C`
    pub bias: Matrix,
}

impl LocalHead {
    pub fn init(classes: usize, width: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: Matrix::random_normal(classes, width, 1.0 / (width as f64).sqrt(), rng),
            bias: Matrix::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits_on_tape<'a>(&'a self, tape: &mut Tape<'a>, cls: Var, trainable: bool) -> Result<Var> {
        let w = tape.leaf(ParamKey::HeadWeight, &self.weight, trainable);
        let b = tape.leaf(ParamKey::HeadBias, &self.bias, trainable);
        let z = tape.matmul_nt(cls, w)?;
        tape.add_row(z, b)
    }

    /// Plain evaluation on a `d`-vector.
    pub fn logits(&self, cls: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                self.weight
                    .row(c)
                    .iter()
                    .zip(cls)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    + self.bias.get(0, c)
            })
            .collect()
    }
}

/// Which adapter values feed a forward pass and which of them are
/// differentiable.
#[derive(Clone, Copy)]
pub struct Route<'a> {
    pub shared: &'a SharedAdapter,
    pub shared_trainable: bool,
    pub specific: Option<(&'a SpecificAdapter, &'a BlockWeights)>,
    pub specific_trainable: bool,
}

struct RouteHook<'r, 'a> {
    cfg: &'r AdapterConfig,
    route: Route<'a>,
    mu: Option<Var>,
}

impl<'a> AdapterHook<'a> for RouteHook<'_, 'a> {
    fn delta(
        &mut self,
        tape: &mut Tape<'a>,
        block: usize,
        proj: Projection,
        x: Var,
    ) -> Result<Option<Var>> {
        match self.cfg.role(block) {
            BlockRole::Shared => {
                let shared = self.route.shared;
                let pair = shared.pair(block, proj)?;
                let up = tape.leaf(
                    ParamKey::SharedUp { block, proj },
                    &pair.up,
                    self.route.shared_trainable,
                );
                let down = tape.leaf(
                    ParamKey::SharedDown { block, proj },
                    &pair.down,
                    self.route.shared_trainable && shared.down_trainable(),
                );
                Ok(Some(pair.delta_on_tape(tape, x, up, down)?))
            }
            BlockRole::Specific => {
                let Some((adapter, weights)) = self.route.specific else {
                    return Ok(None);
                };
                let task = adapter.task;
                let trainable = self.route.specific_trainable && !adapter.is_frozen();
                let pair = adapter.pair(block, proj)?;
                let up = tape.leaf(ParamKey::SpecificUp { task, block, proj }, &pair.up, trainable);
                let down = tape.leaf(ParamKey::SpecificDown { task, block, proj }, &pair.down, trainable);
                let delta = pair.delta_on_tape(tape, x, up, down)?;
                if !weights.is_learned() {
                    return Ok(Some(delta));
                }
                let mu = match self.mu {
                    Some(mu) => mu,
                    None => {
                        let raw = tape.leaf(
                            ParamKey::BlockWeight { task },
                            weights.raw(),
                            trainable && !weights.is_frozen(),
                        );
                        let mu = tape.softplus(raw);
                        self.mu = Some(mu);
                        mu
                    }
                };
                Ok(Some(tape.scale_by_entry(delta, mu, weights.index_of(block)?)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    backbone: Arc<Backbone>,
    cfg: AdapterConfig,
    shared: SharedAdapter,
    tasks: Vec<TaskAdapters>,
}

impl Model {
    pub fn new(backbone: Arc<Backbone>, cfg: AdapterConfig, rng: &mut SeededRng) -> Result<Self> {
        let shared = SharedAdapter::init(&cfg, backbone.config(), rng)?;
        Ok(Self {
            backbone,
            cfg,
            shared,
            tasks: Vec::new(),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn backbone_arc(&self) -> &Arc<Backbone> {
        &self.backbone
    }

    pub fn adapter_config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn shared(&self) -> &SharedAdapter {
        &self.shared
    }

    pub(crate) fn shared_mut(&mut self) -> &mut SharedAdapter {
        &mut self.shared
    }

    pub fn tasks(&self) -> &[TaskAdapters] {
        &self.tasks
    }

    pub fn task(&self, task: usize) -> Result<&TaskAdapters> {
        task.checked_sub(1)
            .and_then(|i| self.tasks.get(i))
            .ok_or(Error::MissingAdapter(task))
    }

    pub(crate) fn push_task(&mut self, t: TaskAdapters) {
        self.tasks.push(t);
    }

    pub fn num_blocks(&self) -> usize {
        self.backbone.config().num_blocks
    }

    pub fn exit_block(&self) -> usize {
        self.cfg.exit_block(self.num_blocks())
    }

    /// Whether the shared segment is a prefix of the network, so its output
    /// can be computed once and reused for every task.
    pub fn shared_is_prefix(&self) -> bool {
        !self.cfg.flip
    }

    /// Runs `blocks` (1-based, inclusive) starting from `z`; returns the new
    /// token node and the number of blocks that had an adapter applied.
    pub fn run_blocks<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        z: Var,
        blocks: RangeInclusive<usize>,
        route: Route<'a>,
    ) -> Result<(Var, usize)> {
        let mut hook = RouteHook {
            cfg: &self.cfg,
            route,
            mu: None,
        };
        let mut z = z;
        let mut applied = 0;
        for block in blocks {
            let adapted = match self.cfg.role(block) {
                BlockRole::Shared => true,
                BlockRole::Specific => route.specific.is_some(),
            };
            z = self.backbone.block_on_tape(tape, z, block, &mut hook)?;
            applied += usize::from(adapted);
        }
        Ok((z, applied))
    }

    /// Constant-only forward of one image through every block for task
    /// `task` (or with no specific adapters when `None`); returns the
    /// final-norm [CLS] feature.
    pub fn feature(&self, tokens: &Matrix, task: Option<usize>) -> Result<Vec<f64>> {
        let specific = match task {
            Some(t) => {
                let ta = self.task(t)?;
                Some((&ta.specific, &ta.weights))
            }
            None => None,
        };
        let route = Route {
            shared: &self.shared,
            shared_trainable: false,
            specific,
            specific_trainable: false,
        };
        let mut tape = Tape::new();
        let z0 = tape.constant(tokens);
        let (z, _) = self.run_blocks(&mut tape, z0, 1..=self.num_blocks(), route)?;
        let cls = self.backbone.cls_on_tape(&mut tape, z)?;
        Ok(tape.value(cls).data().to_vec())
    }

    /// Frozen hash of everything that must not move once written: backbone,
    /// fixed shared down-projections, and every stored task.
    pub fn frozen_hashes(&self) -> FrozenHashes {
        let bb = self.backbone.config();
        FrozenHashes {
            backbone: self.backbone.content_hash(),
            shared_down: crate::adapters::sha256_hex(&self.shared.down_bytes()),
            tasks: self
                .tasks
                .iter()
                .map(|t| {
                    let bytes = crate::adapters::Checkpoint::encode_specific(
                        &t.specific,
                        &t.weights,
                        &self.cfg,
                        bb,
                    );
                    crate::adapters::Checkpoint::hash_of(&bytes)
                })
                .collect(),
        }
    }

    /// Encoded checkpoint records: the shared adapter, then every task.
    pub fn checkpoint_records(&self) -> Vec<Vec<u8>> {
        let bb = self.backbone.config();
        let mut out = vec![crate::adapters::Checkpoint::encode_shared(&self.shared, &self.cfg, bb)];
        for t in &self.tasks {
            out.push(crate::adapters::Checkpoint::encode_specific(
                &t.specific,
                &t.weights,
                &self.cfg,
                bb,
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrozenHashes {
    pub backbone: String,
    pub shared_down: String,
    pub tasks: Vec<String>,
}
