//! Desk-scale partitioned multiphysics engine for rotor-gap evaporative cooling.
//!
//! Two single-physics solvers — an incompressible flow solver with Lagrangian
//! droplet parcels and a transient solid heat-conduction solver — run on
//! separate unstructured triangle meshes and exchange interface data across
//! non-matching grids. Each solver advances to a quasi-steady state under its
//! own stop trigger and on its own clock; the orchestration loop in
//! [`coupling`] passes wall temperatures one way and wall heat fluxes the
//! other. All quantities are in cgs units.

pub mod coupling;
pub mod flow;
pub mod geom;
pub mod heat;
pub mod linsolve;
pub mod mesh;
pub mod particles;
pub mod scenario;
pub mod vtk;

pub use geom::Vec2;
