use crate::format::{validate, ModelGraph};
use crate::tensor::Shape;

use super::ExecError;

/// Static schedule for one graph at one input shape.
///
/// Intermediate outputs live in arena slots. A slot is reused once every
/// consumer of its previous occupant has run; head outputs stay live to the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionPlan {
    /// Layer ids in execution order (the layer table is already topological).
    pub order: Vec<u32>,
    /// Output shape per layer, in table order.
    pub shapes: Vec<Shape>,
    /// Arena slot per layer; `None` for the input layer, which reads the caller's tensor.
    pub buffer_assignment: Vec<Option<usize>>,
    /// Capacity of each slot, in elements.
    pub slot_sizes: Vec<usize>,
    /// Table index of the last layer reading each output (`layers.len()` for head outputs).
    pub last_use: Vec<usize>,
    /// Table indices of the head outputs, in head order.
    pub outputs: Vec<usize>,
    /// Total reusable intermediate storage, in bytes.
    pub arena_size: usize,
}

impl ExecutionPlan {
    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    /// Bytes needed if every intermediate output had its own buffer.
    pub fn no_reuse_size(&self) -> usize {
        self.shapes.iter().skip(1).map(|s| s.len() * 4).sum()
    }

    pub fn slot_count(&self) -> usize {
        self.slot_sizes.len()
    }
}

/// Validates `graph`, checks `input_shape` against its declared input and
/// assigns arena slots first-fit over liveness intervals.
pub fn plan(graph: &ModelGraph, input_shape: Shape) -> Result<ExecutionPlan, ExecError> {
    let info = validate(graph)?;
    if info.input_shape() != input_shape {
        return Err(ExecError::InputShape {
            expected: info.input_shape(),
            actual: input_shape,
        });
    }
    let count = graph.layers.len();
    let last_use: Vec<usize> = (0..count)
        .map(|i| {
            if info.head_layers.contains(&i) {
                count
            } else {
                info.consumers[i].iter().copied().max().unwrap_or(i)
            }
        })
        .collect();

    let mut buffer_assignment = vec![None; count];
    let mut slot_sizes: Vec<usize> = Vec::new();
    // Last use of each slot's current occupant.
    let mut busy_until: Vec<usize> = Vec::new();
    for i in 1..count {
        let need = info.shapes[i].len();
        let slot = match busy_until.iter().position(|&until| until < i) {
            Some(s) => {
                slot_sizes[s] = slot_sizes[s].max(need);
                s
            }
            None => {
                slot_sizes.push(need);
                busy_until.push(0);
                slot_sizes.len() - 1
            }
        };
        busy_until[slot] = last_use[i];
        buffer_assignment[i] = Some(slot);
    }

    Ok(ExecutionPlan {
        order: graph.layers.iter().map(|l| l.id).collect(),
        shapes: info.shapes,
        buffer_assignment,
        arena_size: slot_sizes.iter().sum::<usize>() * 4,
        slot_sizes,
        last_use,
        outputs: info.head_layers,
    })
}
