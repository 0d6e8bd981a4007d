#![allow(dead_code)]

pub mod causality;
pub mod gradients;
