//! Bistatic OFDM sensing simulator for cellular-connected UAVs: echo
//! synthesis, range-Doppler detection, MUSIC direction finding,
//! localization, multi-target tracking and coverage geometry.

pub mod airlink;
pub mod aoa;
pub mod coverage;
pub mod locate;
pub mod mobility;
pub mod pipeline;
pub mod scenario;
pub mod sensefront;
pub mod track;
