//! Small numerical building blocks shared by the model modules.

pub mod normal;
pub mod quadrature;
pub mod roots;

pub use normal::{normal_cdf, normal_pdf, q_function, q_inverse};
pub use quadrature::{GaussHermite, PeriodicGrid};
pub use roots::bisect;
