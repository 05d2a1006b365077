//! Numerical spectral geometry of the noncommutative two torus.
//!
//! * [`algebra`]: twisted Fourier series, trace, derivations, conformal data.
//! * [`gns`]: finite sections on the GNS space and their spectra.
//! * [`psido`]: graded classical symbols, composition, residue.
//! * [`heat`]: parametrix terms and heat coefficients.
//! * [`spectral`]: Weyl-law fits and Dixmier-trace estimates.

pub mod algebra;
pub mod error;
pub mod gns;
pub mod heat;
pub mod linalg;
pub mod psido;
pub mod spectral;

pub use algebra::{ConformalData, DeformationAngle, ModuliPoint, NcElement};
pub use error::{Error, Result};
pub use gns::{BasisWindow, FiniteSectionOperator, SpectrumResult};
pub use num_complex::Complex64;
