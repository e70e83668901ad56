//! Generation of smoothly graded infill microstructures from continuous
//! menus of generating cells, with warped-cell asymptotic homogenization
//! and gradient-based compliance minimization.
//!
//! The toolkit is organized around a topology description function of the
//! form `chi(x) = phi(y(x)/h) - zeta(x)`: a periodic generating function
//! `phi` evaluated through a macroscopically smooth mapping `y(x)`, offset
//! by a level-set indicator `zeta(x)` that selects which member of the
//! cell menu appears near `x`. Mechanics are predicted by solving periodic
//! cell problems warped by the Jacobian of `y`, and the resulting
//! effective tensors drive a homogenized compliance optimization.

pub mod config;
pub mod elasticity;
pub(crate) mod element;
pub mod expr;
pub mod interp;
pub mod linsolve;
pub mod macrofe;
pub mod manifold;
pub mod mapping;
pub mod marching;
pub mod menu;
pub mod microcell;
pub mod mma;
pub mod optimizer;
pub mod sensitivity;
pub mod tdf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid menu: {0}")]
    Menu(String),
    #[error("expression error: {0}")]
    Expr(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("design vector error: {0}")]
    Design(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
