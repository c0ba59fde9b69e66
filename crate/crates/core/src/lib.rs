//! Teacher-student trust semantics distillation for collaborative edge devices.

pub mod config;
pub mod domain;
pub mod matching;
pub mod memory;
pub mod protocol;
pub mod report;
pub mod semantics;
pub mod service;
pub mod simulation;
pub mod student;
pub mod teacher;
