//! Recover the free-energy functional driving an evolving particle
//! population from time-separated snapshots.
//!
//! A population that follows a Wasserstein gradient flow of a free energy
//! (potential + pairwise interaction + entropic diffusion) leaves a trail of
//! marginal distributions `ρ_0, ρ_1, …, ρ_K`. Given only samples of those
//! marginals, this crate fits the energy by playing an adversarial game:
//! transport-map networks solve each implicit (JKO) step for the current
//! energy candidate, while the energy ascends the gap between its optimal
//! step value and the value the observed data attains.
//!
//! The crate is organized around that pipeline:
//!
//! - [`diffcore`] — tape-based reverse-mode differentiation with on-tape
//!   forward tangents, so the log-det-Jacobian entropy term is trainable;
//! - [`nets`] — small MLPs for the potential, interaction kernel and
//!   transport maps;
//! - [`energy`] — the sampled free-energy estimator, nearest-neighbor
//!   entropies and pushforward entropy corrections;
//! - [`dynamics`] — ground-truth generators (SDE simulation and the exact
//!   proximal step) plus the snapshot dataset format;
//! - [`otmetrics`] — exact EMD/W2, Bures-Wasserstein UVP, L2-UVP and
//!   unbiased MMD²;
//! - [`trainer`] — the gradient descent-ascent loop;
//! - [`theory`] — closed-form certification of the recovery bound on
//!   quadratic potentials;
//! - [`cli`] — the `ijko` command-line surface.
//!
//! The guide in `book/` walks through the same material chapter by chapter;
//! its code snippets are compiled as doc-tests.

pub mod cli;
pub mod diffcore;
pub mod dynamics;
pub mod energy;
pub mod nets;
pub mod otmetrics;
pub mod theory;
pub mod trainer;

#[cfg(doctest)]
mod book_snippets;
