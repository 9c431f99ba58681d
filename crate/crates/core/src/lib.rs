//! Co-simulation of a proximity contact-tracing app.
//!
//! The crate couples two views of the same system:
//!
//! - [`epidemic`]: a branching-process Monte Carlo of the early outbreak,
//!   where app alerts divide the transmission rate of reached cases.
//! - [`world`]: an agent micro-world in which phones record encrypted
//!   encounters over a simulated radio, infected users unlock alert mode
//!   with a one-time key, and the authority notifies their contacts.
//!
//! [`cipher`], [`device`] and [`authority`] implement the protocol pieces
//! the world drives; [`runner`] is the command-line front end.

pub mod authority;
pub mod cipher;
pub mod config;
pub mod device;
pub mod epidemic;
pub mod report;
pub mod runner;
pub mod world;
