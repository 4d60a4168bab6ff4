//! Training, transporting and evaluating small GANs on 2D synthetic data.
//!
//! The crate is organized around the flow: generate data ([`data`]), train a
//! generator/discriminator pair ([`nn`], [`optim`], [`gan`]), move generated
//! samples along the discriminator field ([`transport`]), and score the
//! result with exact optimal-transport solvers ([`oteval`]). [`tape`] is the
//! reverse-mode differentiation engine underneath; [`reference`] holds
//! independent oracle implementations used by the [`verify`] suites.

pub mod data;
pub mod error;
pub mod gan;
pub mod nn;
pub mod optim;
pub mod oteval;
pub mod reference;
pub mod tape;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Matrix, Tape, Var};
