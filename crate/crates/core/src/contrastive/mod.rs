//! Memory banks of past dictionary components and the supervised contrastive
//! losses computed against them.

mod bank;
mod loss;

pub use bank::MemoryBank;
pub use loss::{
    anchor_loss, hard_negatives, loss_logic, loss_within_level, ContrastConfig, ContrastKind, ContrastOutput, HardK,
};
