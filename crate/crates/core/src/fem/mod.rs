//! Linear finite elements on simplicial meshes: assembly, constraint maps,
//! sparse LDLᵀ factorization with inertia, and a shift-invert eigensolver.

mod assemble;
mod eigen;
mod factor;
mod locate;
mod mesh;
pub mod meshers;
mod sparse;

pub use assemble::{
    assemble, assemble_on, assemble_subset, gradient_load, integrate, unit_load, Coefficient, FormKind,
};
pub use eigen::{count_below, eig_shift_invert, eig_with_factor, EigOptions, EigenPair};
pub use factor::{Factor, Inertia, SymbolicFactor};
pub use locate::PointLocator;
pub use mesh::{tags, BoundaryMarker, ElementGeometry, SimplicialMesh};
pub use sparse::{CsrPattern, DofMap, SymmetricForm};
