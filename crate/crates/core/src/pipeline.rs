//! Layer-wise partitioning of a model over a chain of simulated edge nodes.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_noise, NoiseConfig, NoiseMatrix};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::sheath::Detection;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trust {
    Trusted,
    Untrusted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub node_id: usize,
    pub trust: Trust,
    pub layer_names: Vec<String>,
}

/// How layers are grouped onto nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grouping {
    LayersPerNode(usize),
    Explicit(Vec<Vec<String>>),
}

#[derive(Clone, Debug)]
pub struct PartitionPlan {
    model: Arc<ModelSpec>,
    nodes: Vec<NodeDescriptor>,
    ranges: Vec<Range<usize>>,
}

/// Splits `model` into a chain of nodes. Node ids are `0..nodes`, in chain
/// order.
pub fn make_partition(model: Arc<ModelSpec>, grouping: &Grouping, trust: &[Trust]) -> Result<PartitionPlan> {
    let names = model.layer_names();
    let groups: Vec<Vec<String>> = match grouping {
        Grouping::LayersPerNode(0) => return Err(Error::config("layers_per_node must be positive")),
        Grouping::LayersPerNode(k) => names.chunks(*k).map(|c| c.iter().map(|s| s.to_string()).collect()).collect(),
        Grouping::Explicit(groups) => groups.clone(),
    };
    if groups.len() != trust.len() {
        return Err(Error::config(format!("{} trust labels for {} nodes", trust.len(), groups.len())));
    }
    let mut ranges = Vec::with_capacity(groups.len());
    let mut next = 0;
    for (node, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::config(format!("node {node} holds no layers")));
        }
        let start = next;
        for name in group {
            match names.get(next) {
                Some(expected) if expected == name => next += 1,
                Some(expected) => {
                    return Err(Error::config(format!(
                        "node {node}: expected layer {expected:?} next in model order, found {name:?}"
                    )))
                }
                None => return Err(Error::config(format!("node {node}: layer {name:?} is past the end of the model"))),
            }
        }
        ranges.push(start..next);
    }
    if next != names.len() {
        return Err(Error::config(format!("partition does not cover layers {:?}", &names[next..])));
    }
    let nodes = groups
        .into_iter()
        .zip(trust)
        .enumerate()
        .map(|(node_id, (layer_names, &trust))| NodeDescriptor { node_id, trust, layer_names })
        .collect();
    Ok(PartitionPlan { model, nodes, ranges })
}

impl PartitionPlan {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn model_arc(&self) -> &Arc<ModelSpec> {
        &self.model
    }

    pub fn nodes(&self) -> &[NodeDescriptor] {
        &self.nodes
    }

    pub fn node(&self, node_id: usize) -> Result<&NodeDescriptor> {
        self.nodes
            .get(node_id)
            .ok_or_else(|| Error::config(format!("no node {node_id} (plan has {})", self.nodes.len())))
    }

    /// Model layer indices run by `node_id`.
    pub fn layer_range(&self, node_id: usize) -> Result<Range<usize>> {
        self.node(node_id)?;
        Ok(self.ranges[node_id].clone())
    }

    /// The node that runs `layer`.
    pub fn node_of_layer(&self, layer: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.layer_names.iter().any(|l| l == layer))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TamperFlag {
    Clean,
    Noised,
}

/// Output of one node as sent to the next.
#[derive(Clone, Debug)]
pub struct FeatureMapMessage {
    pub producer_node: usize,
    pub layer_name: String,
    pub payload: Tensor,
    /// Ground truth for evaluation only; guards never see it.
    pub tamper_flag: TamperFlag,
}

/// Perturbs the output of one layer on one node.
pub trait Perturbation: Send + Sync {
    fn perturb(&self, fm: &Tensor, sample: u64) -> Result<Tensor>;
}

impl Perturbation for NoiseConfig {
    fn perturb(&self, fm: &Tensor, sample: u64) -> Result<Tensor> {
        apply_noise(fm, &self.for_sample(sample))
    }
}

/// What a guard sees: the received message and the input the producing node
/// consumed, which the guard's node also handled.
pub struct GuardInput<'a> {
    pub producer: &'a NodeDescriptor,
    pub layer_name: &'a str,
    pub payload: &'a Tensor,
    pub upstream_input: &'a Tensor,
}

pub struct GuardVerdict {
    pub detection: Detection,
    /// Replacement payload; `None` forwards the message unchanged.
    pub replacement: Option<Tensor>,
}

/// Intercepts messages on the trusted node that consumes them.
pub trait Guard: Send + Sync {
    fn inspect(&self, input: &GuardInput<'_>) -> Result<GuardVerdict>;
}

#[derive(Default)]
pub struct PipelineHooks {
    attacks: Vec<(usize, String, Arc<dyn Perturbation>)>,
    guards: Vec<(usize, Arc<dyn Guard>)>,
}

impl PipelineHooks {
    pub fn new() -> Self {
        Self::default()
    }

    /// Perturbs `layer`'s output on `node_id`.
    pub fn attack(
        mut self,
        plan: &PartitionPlan,
        node_id: usize,
        layer: &str,
        p: Arc<dyn Perturbation>,
    ) -> Result<Self> {
        let node = plan.node(node_id)?;
        if !node.layer_names.iter().any(|l| l == layer) {
            return Err(Error::config(format!("node {node_id} does not run layer {layer:?}")));
        }
        self.attacks.push((node_id, layer.to_string(), p));
        Ok(self)
    }

    pub fn noise_matrix(mut self, plan: &PartitionPlan, matrix: &NoiseMatrix) -> Result<Self> {
        for e in &matrix.entries {
            e.noise.validate()?;
            self = self.attack(plan, e.node, &e.layer, Arc::new(e.noise.clone()))?;
        }
        Ok(self)
    }

    /// Places a guard on `node_id`; it inspects the message from the node
    /// before it. Only trusted nodes with a predecessor may host one.
    pub fn guard(mut self, plan: &PartitionPlan, node_id: usize, g: Arc<dyn Guard>) -> Result<Self> {
        let node = plan.node(node_id)?;
        if node.trust != Trust::Trusted {
            return Err(Error::config(format!("node {node_id} is untrusted and cannot host a guard")));
        }
        if node_id == 0 {
            return Err(Error::config("node 0 has no upstream message to guard"));
        }
        if self.guards.iter().any(|(n, _)| *n == node_id) {
            return Err(Error::config(format!("node {node_id} already hosts a guard")));
        }
        self.guards.push((node_id, g));
        Ok(self)
    }

    pub fn without_guards(&self) -> Self {
        PipelineHooks { attacks: self.attacks.clone(), guards: Vec::new() }
    }

    pub fn without_attacks(&self) -> Self {
        PipelineHooks { attacks: Vec::new(), guards: self.guards.clone() }
    }

    fn guard_on(&self, node_id: usize) -> Option<&Arc<dyn Guard>> {
        self.guards.iter().find(|(n, _)| *n == node_id).map(|(_, g)| g)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionRecord {
    pub guard_node: usize,
    pub producer_node: usize,
    pub detection: Detection,
    pub replaced: bool,
    /// Ground truth of the inspected message.
    pub tamper_flag: TamperFlag,
}

#[derive(Clone, Debug)]
pub struct PipelineTrace {
    /// One message per node, as sent (after any attack).
    pub messages: Vec<FeatureMapMessage>,
    pub detections: Vec<DetectionRecord>,
    /// What the last node produced, i.e. the model output.
    pub output: Tensor,
}

/// Runs one input through the node chain. `sample` feeds per-sample noise
/// seeds.
pub fn run_pipeline(plan: &PartitionPlan, input: &Tensor, hooks: &PipelineHooks, sample: u64) -> Result<PipelineTrace> {
    let model = plan.model();
    if input.dims() != model.input_shape.as_slice() {
        return Err(Error::shape(format!("model expects input {:?}, got {:?}", model.input_shape, input.dims())));
    }
    let mut messages: Vec<FeatureMapMessage> = Vec::with_capacity(plan.nodes.len());
    let mut detections = Vec::new();
    // What each node consumed, after guarding.
    let mut consumed = input.clone();
    for (node, range) in plan.nodes.iter().zip(&plan.ranges) {
        let id = node.node_id;
        if let (Some(guard), Some(prev)) = (hooks.guard_on(id), messages.last_mut()) {
            let producer = &plan.nodes[prev.producer_node];
            let verdict = guard
                .inspect(&GuardInput {
                    producer,
                    layer_name: &prev.layer_name,
                    payload: &prev.payload,
                    upstream_input: &consumed,
                })
                .map_err(|e| e.at_node(id))?;
            let replaced = verdict.replacement.is_some();
            detections.push(DetectionRecord {
                guard_node: id,
                producer_node: prev.producer_node,
                detection: verdict.detection,
                replaced,
                tamper_flag: prev.tamper_flag,
            });
            consumed = verdict.replacement.unwrap_or_else(|| prev.payload.clone());
        } else if let Some(prev) = messages.last() {
            consumed = prev.payload.clone();
        }

        let mut x = consumed.clone();
        let mut tampered = false;
        for i in range.clone() {
            let layer = &model.layers[i];
            x = layer.forward(&x).map_err(|e| e.at_node(id))?;
            for (_, _, p) in hooks.attacks.iter().filter(|(n, l, _)| *n == id && *l == layer.name) {
                let y = p.perturb(&x, sample).map_err(|e| e.at_node(id))?;
                if y.dims() != x.dims() {
                    let msg = format!("perturbation of {} changed shape {:?} to {:?}", layer.name, x.dims(), y.dims());
                    return Err(Error::shape(msg).at_node(id));
                }
                x = y;
                tampered = true;
            }
        }
        let last_layer = &model.layers[range.end - 1];
        messages.push(FeatureMapMessage {
            producer_node: id,
            layer_name: last_layer.name.clone(),
            payload: x,
            tamper_flag: if tampered { TamperFlag::Noised } else { TamperFlag::Clean },
        });
    }
    let output = messages.last().expect("plan has nodes").payload.clone();
    Ok(PipelineTrace { messages, detections, output })
}

/// Per-sample summary of a pipeline run.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub prediction: usize,
    pub label: usize,
    pub detections: Vec<DetectionRecord>,
    pub tampered: bool,
}

/// Runs every sample of `data` through the pipeline in parallel. Sample `i`
/// uses noise seed `seed ^ i` for every attack.
pub fn run_batch(plan: &PartitionPlan, data: &LabeledDataset, hooks: &PipelineHooks) -> Result<Vec<SampleOutcome>> {
    if data.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let trace = run_pipeline(plan, &data.image(i), hooks, i as u64)?;
            Ok(SampleOutcome {
                prediction: trace.output.argmax(),
                label: data.labels()[i],
                tampered: trace.messages.iter().any(|m| m.tamper_flag == TamperFlag::Noised),
                detections: trace.detections,
            })
        })
        .collect()
}

/// Fraction of samples whose pipeline prediction matches the label.
pub fn classify_batch(plan: &PartitionPlan, data: &LabeledDataset, hooks: &PipelineHooks) -> Result<f64> {
    let outcomes = run_batch(plan, data, hooks)?;
    Ok(accuracy_of(&outcomes))
}

pub fn accuracy_of(outcomes: &[SampleOutcome]) -> f64 {
    outcomes.iter().filter(|o| o.prediction == o.label).count() as f64 / outcomes.len() as f64
}
