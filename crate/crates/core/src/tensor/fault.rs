//! Fault injection for the gradient-check suite.
//!
//! When a fault is armed, the backward rule of the chosen op scales its
//! input gradient by 1.1. Used to verify that the checker notices a broken
//! rule and names the op.

use std::cell::Cell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FaultOp {
    MatMul = 1,
    Softmax,
    LayerNorm,
    Relu6,
    Sigmoid,
    Conv1dDepthwise,
    Embedding,
    InterpGather,
}

impl FaultOp {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "matmul" => FaultOp::MatMul,
            "softmax" => FaultOp::Softmax,
            "layer_norm" => FaultOp::LayerNorm,
            "relu6" => FaultOp::Relu6,
            "sigmoid" => FaultOp::Sigmoid,
            "conv1d_depthwise" => FaultOp::Conv1dDepthwise,
            "embedding_lookup" => FaultOp::Embedding,
            "interp_gather" => FaultOp::InterpGather,
            _ => return None,
        })
    }
}

thread_local! {
    static ARMED: Cell<u8> = const { Cell::new(0) };
}

/// Arms a fault on the calling thread.
pub fn inject_fault(op: FaultOp) {
    ARMED.with(|a| a.set(op as u8));
}

pub fn clear_fault() {
    ARMED.with(|a| a.set(0));
}

#[inline]
pub(crate) fn factor(op: FaultOp) -> f64 {
    if ARMED.with(|a| a.get()) == op as u8 {
        1.1
    } else {
        1.0
    }
}
