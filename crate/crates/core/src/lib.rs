//! Character-level Transformer that reads `a+b=` expressions embedded in
//! text and predicts `(a + b) mod 97`, plus the training interventions and
//! evaluation suite used to study how robust that reading is to shifted
//! positions and unseen templates.

pub mod checkpoint;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod rendering;
pub mod rng;
pub mod runner;
pub mod task_data;
pub mod tokenizer;
pub mod training;
