//! Simulator and optimization library for RIS-aided vehicular MIMO links.
//!
//! The library covers the full pipeline of a vehicle-mounted transparent-RIS
//! downlink: two-timescale Rician channel synthesis, grouped-pilot cascaded
//! channel estimation, narrowband single-VUE hybrid beamforming, and broadband
//! multi-VUE OFDM resource allocation under Doppler-induced inter-carrier
//! interference. The `experiments` module drives seeded batch runs that emit
//! CSV tables; the `risvcom` binary exposes them as subcommands.

pub mod beamform_nb;
pub mod channel;
pub mod config;
pub mod estimation;
pub mod experiments;
pub mod numerics;
pub mod ofdm_mvue;
pub mod optimizer;
pub mod resource_alloc;
pub mod stats;
