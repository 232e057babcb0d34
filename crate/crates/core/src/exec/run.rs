use std::time::Instant;

use super::{plan, ExecError, ExecutionPlan, LayerProfile};
use crate::format::{LayerParams, ModelGraph};
use crate::ops::{self, KernelPath, OpError};
use crate::tensor::{Tensor, TensorView};

/// Reusable per-thread execution state: a plan and its arena.
///
/// The model itself is passed to [`ExecutionContext::run`] by reference, so
/// many contexts can share one read-only graph across threads.
#[derive(Debug, Clone)]
pub struct ExecutionContext {
    plan: ExecutionPlan,
    arena: Vec<Vec<f32>>,
    kernel: KernelPath,
}

impl ExecutionContext {
    pub fn new(graph: &ModelGraph, kernel: KernelPath) -> Result<Self, ExecError> {
        let input = graph.input_shape().ok_or(ExecError::PlanMismatch)?;
        Ok(Self::from_plan(plan(graph, input)?, kernel))
    }

    pub fn from_plan(plan: ExecutionPlan, kernel: KernelPath) -> Self {
        let arena = plan.slot_sizes.iter().map(|&n| vec![0.0; n]).collect();
        ExecutionContext { plan, arena, kernel }
    }

    pub fn plan(&self) -> &ExecutionPlan {
        &self.plan
    }

    pub fn kernel(&self) -> KernelPath {
        self.kernel
    }

    pub fn set_kernel(&mut self, kernel: KernelPath) {
        self.kernel = kernel;
    }

    /// Runs the graph and returns the head tensors in head order, plus one
    /// profile record per executed layer when `profile` is set.
    pub fn run(
        &mut self,
        graph: &ModelGraph,
        input: &Tensor,
        profile: bool,
    ) -> Result<(Vec<Tensor>, Vec<LayerProfile>), ExecError> {
        let plan = &self.plan;
        if graph.layers.len() != plan.order.len()
            || graph.layers.iter().zip(&plan.order).any(|(l, &id)| l.id != id)
        {
            return Err(ExecError::PlanMismatch);
        }
        if input.shape() != plan.input_shape() {
            return Err(ExecError::InputShape {
                expected: plan.input_shape(),
                actual: input.shape(),
            });
        }

        let mut profiles = Vec::with_capacity(if profile { graph.layers.len() } else { 0 });
        for (i, layer) in graph.layers.iter().enumerate().skip(1) {
            let started = profile.then(Instant::now);
            let slot = plan.buffer_assignment[i].expect("non-input layers own a slot");
            let out_shape = plan.shapes[i];
            let mut buffer = std::mem::take(&mut self.arena[slot]);
            let out = &mut buffer[..out_shape.len()];

            let view = |j: usize| -> TensorView<'_> {
                let shape = plan.shapes[j];
                match plan.buffer_assignment[j] {
                    None => input.view(),
                    Some(s) => TensorView::new(shape, &self.arena[s][..shape.len()]),
                }
            };
            let inputs: Vec<TensorView<'_>> = layer
                .inputs
                .iter()
                .map(|id| view(graph.layer_index(*id).expect("validated graph")))
                .collect();
            let result = run_layer(graph, layer.id, &layer.params, &inputs, out, self.kernel);
            drop(inputs);

            let finite = out.iter().all(|v| v.is_finite());
            self.arena[slot] = buffer;
            result.map_err(|source| ExecError::Op {
                layer: layer.id,
                source,
            })?;
            if !finite {
                return Err(ExecError::NonFinite {
                    layer: layer.id,
                    kind: layer.kind().name(),
                });
            }
            if let Some(start) = started {
                profiles.push(LayerProfile {
                    layer: layer.id,
                    kind: layer.kind().name(),
                    wall_us: start.elapsed().as_secs_f64() * 1e6,
                    output_shape: [out_shape.n, out_shape.c, out_shape.h, out_shape.w],
                    bytes_written: out_shape.len() * 4,
                });
            }
        }

        let outputs = plan
            .outputs
            .iter()
            .map(|&i| {
                let shape = plan.shapes[i];
                match plan.buffer_assignment[i] {
                    None => input.clone(),
                    Some(s) => Tensor::from_vec(shape, self.arena[s][..shape.len()].to_vec())
                        .expect("planned shapes are valid"),
                }
            })
            .collect();
        Ok((outputs, profiles))
    }
}

fn run_layer(
    graph: &ModelGraph,
    id: u32,
    params: &LayerParams,
    inputs: &[TensorView<'_>],
    out: &mut [f32],
    kernel: KernelPath,
) -> Result<(), OpError> {
    match params {
        LayerParams::Input { .. } => unreachable!("the input layer is not executed"),
        LayerParams::Conv(p) => {
            let (w, b) = graph
                .conv_weights(id)
                .ok_or_else(|| OpError::InvalidParams("missing conv weights".into()))?;
            let out_shape = ops::conv_output_shape(inputs[0].shape, p)?;
            ops::conv2d_into(inputs[0], w, b, p, out_shape, out, kernel)
        }
        LayerParams::Activate(act) => {
            out.copy_from_slice(inputs[0].data);
            ops::activate_in_place(out, *act);
            Ok(())
        }
        LayerParams::MaxPool { kernel: k, stride } => {
            ops::max_pool_into(inputs[0], *k, *stride, out, kernel)
        }
        LayerParams::Upsample { factor } => ops::upsample_into(inputs[0], *factor, out),
        LayerParams::Concat => ops::concat_into(inputs[0], inputs[1], out),
        LayerParams::Add => ops::add_into(inputs[0], inputs[1], out),
    }
}

/// One-shot execution with a fresh arena.
pub fn execute(
    graph: &ModelGraph,
    plan: &ExecutionPlan,
    input: &Tensor,
    profile: bool,
    kernel: KernelPath,
) -> Result<(Vec<Tensor>, Vec<LayerProfile>), ExecError> {
    ExecutionContext::from_plan(plan.clone(), kernel).run(graph, input, profile)
}

/// Executes every layer into its own freshly allocated tensor through the
/// public operator functions. Used as the oracle for arena execution.
pub fn execute_without_reuse(
    graph: &ModelGraph,
    input: &Tensor,
    kernel: KernelPath,
) -> Result<Vec<Tensor>, ExecError> {
    let info = crate::format::validate(graph)?;
    if info.input_shape() != input.shape() {
        return Err(ExecError::InputShape {
            expected: info.input_shape(),
            actual: input.shape(),
        });
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.layers.len());
    values.push(input.clone());
    for layer in graph.layers.iter().skip(1) {
        let arg = |k: usize| &values[graph.layer_index(layer.inputs[k]).expect("validated graph")];
        let wrap = |source| ExecError::Op {
            layer: layer.id,
            source,
        };
        let out = match &layer.params {
            LayerParams::Input { .. } => unreachable!(),
            LayerParams::Conv(p) => {
                let (w, b) = graph.conv_weights(layer.id).expect("validated graph");
                let (oc, icg, kh, kw) = p.weight_shape(arg(0).shape().c);
                let shape = crate::tensor::Shape::new(oc, icg, kh, kw).map_err(|e| wrap(e.into()))?;
                let w = Tensor::from_vec(shape, w.to_vec()).map_err(|e| wrap(e.into()))?;
                ops::conv2d_with(arg(0), &w, b, p, kernel)
            }
            LayerParams::Activate(act) => ops::activate(arg(0), *act),
            LayerParams::MaxPool { kernel: k, stride } => ops::max_pool_with(arg(0), *k, *stride, kernel),
            LayerParams::Upsample { factor } => ops::upsample_nearest(arg(0), *factor),
            LayerParams::Concat => ops::concat_channels(arg(0), arg(1)),
            LayerParams::Add => ops::add(arg(0), arg(1)),
        }
        .map_err(wrap)?;
        if !out.is_finite() {
            return Err(ExecError::NonFinite {
                layer: layer.id,
                kind: layer.kind().name(),
            });
        }
        values.push(out);
    }
    Ok(info.head_layers.iter().map(|&i| values[i].clone()).collect())
}
