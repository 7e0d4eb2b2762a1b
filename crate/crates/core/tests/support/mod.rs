#![allow(dead_code)]

pub mod evaluation;
pub mod geometry;
pub mod gradients;
pub mod pipeline;
