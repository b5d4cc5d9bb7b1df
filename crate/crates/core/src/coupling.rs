//! Orchestration of the two single-physics codes.
//!
//! Each code is wrapped in a [`CodeAdapter`] and advanced to its own
//! quasi-steady state under a [`StopTrigger`]; the outer loop then exchanges
//! interface data and repeats. The two clocks are deliberately independent:
//! the fast code resumes from its own last state and never sees the time the
//! slow code consumed, which is what makes runs affordable when the
//! timescales are orders of magnitude apart.
//!
//! Interface data crosses non-matching grids through an [`InterfaceMap`]
//! built once per session: temperatures interpolate linearly along the
//! interface curve, fluxes transfer by angular-overlap averaging with a
//! final rescale that conserves the total heat flow to round-off.

use crate::geom::Vec2;
use crate::mesh::SimplexMesh;
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("interface geometry mismatch: node radius deviates by {max_deviation:.3e} cm (tolerance {tolerance:.1e})")]
    InterfaceGeometry {
        max_deviation: f64,
        tolerance: f64,
    },
    #[error("interface tag {0} has no facets")]
    EmptyInterface(u32),
    #[error("interface data length {got} does not match map ({expected})")]
    SampleCountMismatch { got: usize, expected: usize },
    #[error("adapter '{code}' failed: {message}")]
    Adapter { code: String, message: String },
}

/// Stop condition for a code's macro step (and for the outer loop).
///
/// Budget-style triggers (`TimeIncrement`, `StepCount`, `GeometryChange`)
/// fire when the budget is consumed; settling-style triggers
/// (`ResidualDecrease`, `UnknownChange`, `QuasiPeriodic`, `EnergyBalance`)
/// fire when the monitored quantity indicates a quasi-steady state.
#[derive(Clone, Debug, PartialEq)]
pub enum StopTrigger {
    /// Fires once the local clock has advanced by this much (s).
    TimeIncrement(f64),
    StepCount(u64),
    /// Fires when the residual has dropped by this factor from its peak.
    ResidualDecrease(f64),
    /// Fires when the latest field-change norm falls below the threshold.
    UnknownChange(f64),
    /// Fires when the accumulated geometry displacement exceeds the
    /// threshold (cm).
    GeometryChange(f64),
    /// Fires when the monitored scalar repeats over a window: the last
    /// `window` samples match the previous window within the tolerance.
    QuasiPeriodic { window: usize, tolerance: f64 },
    /// Fires when |q_cfd − q_ctd| / |q_ctd| falls below the threshold.
    EnergyBalance(f64),
    /// Fires when any member fires.
    AnyOf(Vec<StopTrigger>),
}

/// What a code reports about its progress inside a macro step.
#[derive(Clone, Debug, Default)]
pub struct ProgressRecord {
    /// Local time consumed in this macro step (s).
    pub elapsed_time: f64,
    pub steps: u64,
    pub residual_history: Vec<f64>,
    /// Latest per-step field-change norm.
    pub change_norm: Option<f64>,
    /// Accumulated geometry displacement (cm); zero for fixed grids.
    pub geometry_displacement: f64,
    /// History of the monitored scalar for quasi-periodic detection.
    pub monitor_history: Vec<f64>,
    /// Latest relative energy-balance defect across the interface.
    pub energy_balance: Option<f64>,
}

/// Pure predicate over a progress record.
pub fn check_trigger(trigger: &StopTrigger, progress: &ProgressRecord) -> bool {
    match trigger {
        StopTrigger::TimeIncrement(budget) => {
            progress.elapsed_time >= budget - 1e-12 * budget.abs()
        }
        StopTrigger::StepCount(n) => progress.steps >= *n,
        StopTrigger::ResidualDecrease(factor) => {
            let peak = progress
                .residual_history
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            match progress.residual_history.last() {
                Some(&last) if peak.is_finite() => last <= peak / factor,
                _ => false,
            }
        }
        StopTrigger::UnknownChange(tol) => progress.change_norm.is_some_and(|c| c <= *tol),
        StopTrigger::GeometryChange(tol) => progress.geometry_displacement >= *tol,
        StopTrigger::QuasiPeriodic { window, tolerance } => {
            let h = &progress.monitor_history;
            if *window == 0 || h.len() < 2 * window {
                return false;
            }
            let n = h.len();
            (n - window..n).all(|i| (h[i] - h[i - window]).abs() <= *tolerance)
        }
        StopTrigger::EnergyBalance(tol) => progress.energy_balance.is_some_and(|e| e <= *tol),
        StopTrigger::AnyOf(list) => list.iter().any(|t| check_trigger(t, progress)),
    }
}

/// Heat flux through the facets of a boundary tag, from the owning element's
/// linear temperature gradient: q = −k ∂T/∂n with n the outward normal
/// (positive = heat leaving the domain). Exact for linear fields.
pub fn compute_wall_heat_flux(
    mesh: &SimplexMesh,
    temperature: &[f64],
    conductivity_per_element: &[f64],
    tag: u32,
) -> Vec<(usize, f64)> {
    mesh.facets_with_tag(tag)
        .map(|(fi, facet)| {
            let e = facet.element;
            let nodes = mesh.elements[e];
            let grads = mesh.shape_gradients(e);
            let grad_t = grads[0] * temperature[nodes[0]]
                + grads[1] * temperature[nodes[1]]
                + grads[2] * temperature[nodes[2]];
            let n = facet.outward_normal(mesh);
            (fi, -conductivity_per_element[e] * grad_t.dot(n))
        })
        .collect()
}

/// One side of the interface: the node chain and facet spans along the
/// common circle, sorted by angle.
#[derive(Clone, Debug)]
pub struct InterfaceSide {
    pub radius: f64,
    /// Interface node ids sorted by angle.
    pub nodes: Vec<usize>,
    pub node_angles: Vec<f64>,
    pub facets: Vec<FacetSpan>,
}

#[derive(Clone, Copy, Debug)]
pub struct FacetSpan {
    /// Index into `mesh.boundary_facets`.
    pub facet: usize,
    /// Chain positions of the two facet nodes.
    pub chain: [usize; 2],
    /// Angular interval [theta0, theta0 + width), width > 0.
    pub theta0: f64,
    pub width: f64,
    pub length: f64,
    pub midpoint_angle: f64,
}

fn wrap_angle(a: f64) -> f64 {
    a.rem_euclid(2.0 * PI)
}

impl InterfaceSide {
    fn build(mesh: &SimplexMesh, tag: u32, tolerance: f64) -> Result<Self, CouplingError> {
        let facet_list: Vec<usize> = mesh.facets_with_tag(tag).map(|(fi, _)| fi).collect();
        if facet_list.is_empty() {
            return Err(CouplingError::EmptyInterface(tag));
        }
        let mut node_ids: Vec<usize> = facet_list
            .iter()
            .flat_map(|&fi| mesh.boundary_facets[fi].nodes)
            .collect();
        node_ids.sort_unstable();
        node_ids.dedup();

        let radius =
            node_ids.iter().map(|&n| mesh.node_coords[n].norm()).sum::<f64>() / node_ids.len() as f64;
        let max_deviation = node_ids
            .iter()
            .map(|&n| (mesh.node_coords[n].norm() - radius).abs())
            .fold(0.0, f64::max);
        if max_deviation > tolerance {
            return Err(CouplingError::InterfaceGeometry {
                max_deviation,
                tolerance,
            });
        }

        let angle_of = |n: usize| wrap_angle(mesh.node_coords[n].y.atan2(mesh.node_coords[n].x));
        let mut nodes_angles: Vec<(usize, f64)> =
            node_ids.iter().map(|&n| (n, angle_of(n))).collect();
        nodes_angles.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        let nodes: Vec<usize> = nodes_angles.iter().map(|&(n, _)| n).collect();
        let node_angles: Vec<f64> = nodes_angles.iter().map(|&(_, a)| a).collect();
        let chain_pos = |n: usize| nodes.iter().position(|&m| m == n).unwrap();

        let mut facets: Vec<FacetSpan> = facet_list
            .iter()
            .map(|&fi| {
                let f = &mesh.boundary_facets[fi];
                let a0 = angle_of(f.nodes[0]);
                let a1 = angle_of(f.nodes[1]);
                // Facet spans are short arcs; orient each one positively.
                let mut width = a1 - a0;
                if width > PI {
                    width -= 2.0 * PI;
                } else if width < -PI {
                    width += 2.0 * PI;
                }
                let (theta0, width, chain) = if width >= 0.0 {
                    (a0, width, [chain_pos(f.nodes[0]), chain_pos(f.nodes[1])])
                } else {
                    (a1, -width, [chain_pos(f.nodes[1]), chain_pos(f.nodes[0])])
                };
                FacetSpan {
                    facet: fi,
                    chain,
                    theta0,
                    width,
                    length: f.length(mesh),
                    midpoint_angle: wrap_angle(theta0 + width / 2.0),
                }
            })
            .collect();
        facets.sort_by(|a, b| a.theta0.partial_cmp(&b.theta0).unwrap());

        Ok(Self {
            radius,
            nodes,
            node_angles,
            facets,
        })
    }

    /// Linear interpolation of per-node values along the chain at an angle.
    pub fn interpolate(&self, nodal: &[f64], theta: f64) -> f64 {
        let theta = wrap_angle(theta);
        let n = self.node_angles.len();
        // Find the chain segment [i, i+1) containing theta (wrapping).
        let next = self
            .node_angles
            .partition_point(|&a| a <= theta)
            .rem_euclid(n);
        let prev = (next + n - 1) % n;
        let a0 = self.node_angles[prev];
        let mut a1 = self.node_angles[next];
        let mut th = theta;
        if a1 <= a0 {
            a1 += 2.0 * PI;
            if th < a0 {
                th += 2.0 * PI;
            }
        }
        let t = if a1 > a0 { (th - a0) / (a1 - a0) } else { 0.0 };
        nodal[prev] * (1.0 - t) + nodal[next] * t
    }

    pub fn total_length(&self) -> f64 {
        self.facets.iter().map(|f| f.length).sum()
    }
}

/// Projection operators between the two interface discretizations.
#[derive(Clone, Debug)]
pub struct InterfaceMap {
    pub fluid: InterfaceSide,
    pub solid: InterfaceSide,
}

/// Transfer direction for [`transfer_field`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Nodal temperatures from the solid chain onto fluid chain nodes.
    SolidToFluid,
    /// Facet fluxes from the fluid chain onto solid facets (conservative).
    FluidToSolid,
}

/// Build the map once per session; both interface curves must lie on a
/// common circle within `tolerance` (cm).
pub fn build_interface_map(
    fluid_mesh: &SimplexMesh,
    fluid_tag: u32,
    solid_mesh: &SimplexMesh,
    solid_tag: u32,
    tolerance: f64,
) -> Result<InterfaceMap, CouplingError> {
    let fluid = InterfaceSide::build(fluid_mesh, fluid_tag, tolerance)?;
    let solid = InterfaceSide::build(solid_mesh, solid_tag, tolerance)?;
    let deviation = (fluid.radius - solid.radius).abs();
    if deviation > tolerance {
        return Err(CouplingError::InterfaceGeometry {
            max_deviation: deviation,
            tolerance,
        });
    }
    Ok(InterfaceMap { fluid, solid })
}

impl InterfaceMap {
    /// Interpolate solid nodal temperatures onto the fluid interface nodes.
    pub fn temperature_to_fluid(&self, solid_nodal: &[f64]) -> Result<Vec<f64>, CouplingError> {
        if solid_nodal.len() != self.solid.nodes.len() {
            return Err(CouplingError::SampleCountMismatch {
                got: solid_nodal.len(),
                expected: self.solid.nodes.len(),
            });
        }
        Ok(self
            .fluid
            .node_angles
            .iter()
            .map(|&theta| self.solid.interpolate(solid_nodal, theta))
            .collect())
    }

    /// Angular-overlap projection of fluid facet fluxes onto solid facets,
    /// rescaled so the total ∮ q dA is conserved to round-off.
    pub fn flux_to_solid(&self, fluid_flux: &[f64]) -> Result<Vec<f64>, CouplingError> {
        if fluid_flux.len() != self.fluid.facets.len() {
            return Err(CouplingError::SampleCountMismatch {
                got: fluid_flux.len(),
                expected: self.fluid.facets.len(),
            });
        }
        let mut out = Vec::with_capacity(self.solid.facets.len());
        for target in &self.solid.facets {
            let mut acc = 0.0;
            for (src, &q) in self.fluid.facets.iter().zip(fluid_flux) {
                acc += q * overlap(target, src);
            }
            out.push(acc / target.width);
        }
        // Conservation rescale: chord lengths of the two polygons differ at
        // O(h²), which the overlap average cannot see.
        let source_integral: f64 = self
            .fluid
            .facets
            .iter()
            .zip(fluid_flux)
            .map(|(f, &q)| q * f.length)
            .sum();
        let target_integral: f64 = self
            .solid
            .facets
            .iter()
            .zip(&out)
            .map(|(f, &q)| q * f.length)
            .sum();
        let magnitude: f64 = self
            .solid
            .facets
            .iter()
            .zip(&out)
            .map(|(f, &q)| (q * f.length).abs())
            .sum();
        if magnitude > 0.0 && target_integral.abs() > 1e-12 * magnitude {
            let scale = source_integral / target_integral;
            for q in &mut out {
                *q *= scale;
            }
        } else {
            // Sign-cancelling profile: conserve by an additive shift instead.
            let total_len = self.solid.total_length();
            let shift = (source_integral - target_integral) / total_len;
            for q in &mut out {
                *q += shift;
            }
        }
        Ok(out)
    }

    /// Spec-shaped entry point dispatching on the transfer direction.
    pub fn transfer_field(
        &self,
        samples: &[f64],
        direction: Direction,
    ) -> Result<Vec<f64>, CouplingError> {
        match direction {
            Direction::SolidToFluid => self.temperature_to_fluid(samples),
            Direction::FluidToSolid => self.flux_to_solid(samples),
        }
    }
}

/// Angular overlap of two facet spans on the circle.
fn overlap(a: &FacetSpan, b: &FacetSpan) -> f64 {
    // Compare on an unwrapped axis; spans are < 2π wide.
    let mut total = 0.0;
    for shift in [-2.0 * PI, 0.0, 2.0 * PI] {
        let lo = (a.theta0).max(b.theta0 + shift);
        let hi = (a.theta0 + a.width).min(b.theta0 + b.width + shift);
        if hi > lo {
            total += hi - lo;
        }
    }
    total
}

/// What a code hands to the session after advancing.
#[derive(Clone, Debug)]
pub struct InterfaceExport {
    /// Temperatures at the code's own interface nodes, chain order.
    pub nodal_temperature: Vec<f64>,
    /// Outgoing heat flux per interface facet (chain order, erg/(cm² s),
    /// positive = heat leaving this domain).
    pub facet_flux_out: Vec<f64>,
}

/// Interface data handed to a code before advancing.
#[derive(Clone, Debug)]
pub enum InterfaceField {
    /// Dirichlet wall temperatures at the code's interface nodes.
    WallTemperature(Vec<f64>),
    /// Incoming heat flux per interface facet (positive heats the receiver).
    HeatFlux(Vec<f64>),
}

/// A single-physics code with import/advance/export operations and its own
/// clock. Exports reflect the state after the most recent advance.
pub trait CodeAdapter {
    fn identity(&self) -> &str;
    fn import(&mut self, data: &InterfaceField) -> Result<(), CouplingError>;
    fn advance(&mut self) -> Result<ProgressRecord, CouplingError>;
    fn export(&self) -> InterfaceExport;
    fn local_time(&self) -> f64;
}

/// One outer-iteration diagnostics row (columns mirror the interface
/// mismatch, the two heat-load views and the per-side extrema).
#[derive(Clone, Copy, Debug)]
pub struct DiagnosticsRow {
    pub iteration: u64,
    /// Σ|T_fluid − T_solid| over fluid-side facet midpoints (K).
    pub sum_abs_dt: f64,
    /// Interface heat load seen by the flow side (erg/s, positive = heat
    /// flowing solid → fluid).
    pub q_cfd: f64,
    /// Interface heat load seen by the solid side (same sign convention).
    pub q_ctd: f64,
    pub tmin_cfd: f64,
    pub tmax_cfd: f64,
    pub tmin_ctd: f64,
    pub tmax_ctd: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CouplingDiagnostics {
    pub rows: Vec<DiagnosticsRow>,
}

impl CouplingDiagnostics {
    pub const CSV_HEADER: &'static str =
        "iter,sum_abs_dT,q_cfd,q_ctd,tmin_cfd,tmax_cfd,tmin_ctd,tmax_ctd";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.rows {
            writeln!(w, "{}", Self::format_row(r))?;
        }
        Ok(())
    }

    pub fn format_row(r: &DiagnosticsRow) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.iteration,
            r.sum_abs_dt,
            r.q_cfd,
            r.q_ctd,
            r.tmin_cfd,
            r.tmax_cfd,
            r.tmin_ctd,
            r.tmax_ctd
        )
    }
}

/// Orchestrator state: the two adapters, the interface map and the
/// accumulated diagnostics.
pub struct Session<F: CodeAdapter, S: CodeAdapter> {
    pub fluid: F,
    pub solid: S,
    pub map: InterfaceMap,
    /// Under-relaxation on the exchanged wall temperature, in (0, 1].
    pub relaxation: f64,
    /// Optional settling trigger for the outer loop.
    pub outer_trigger: Option<StopTrigger>,
    pub diagnostics: CouplingDiagnostics,
    previously_applied: Option<Vec<f64>>,
}

impl<F: CodeAdapter, S: CodeAdapter> Session<F, S> {
    pub fn new(fluid: F, solid: S, map: InterfaceMap) -> Self {
        Self {
            fluid,
            solid,
            map,
            relaxation: 1.0,
            outer_trigger: None,
            diagnostics: CouplingDiagnostics::default(),
            previously_applied: None,
        }
    }

    /// Run up to `outer_iterations` exchange cycles: the fluid imports the
    /// wall temperature, runs to its trigger and exports the wall heat flux;
    /// the solid imports the flux, runs to its trigger and exports the wall
    /// temperature. Diagnostics rows accumulate even if an adapter fails
    /// mid-session; `on_row` fires after each completed iteration.
    pub fn run(
        &mut self,
        outer_iterations: u64,
        mut on_row: Option<&mut dyn FnMut(&DiagnosticsRow)>,
    ) -> Result<(), CouplingError> {
        let mut outer_progress = ProgressRecord::default();
        let mut solid_export = self.solid.export();

        for iteration in 1..=outer_iterations {
            // Wall temperature to the fluid, optionally under-relaxed.
            let incoming = self
                .map
                .temperature_to_fluid(&solid_export.nodal_temperature)?;
            let applied = match (&self.previously_applied, self.relaxation) {
                (Some(prev), omega) if omega < 1.0 => prev
                    .iter()
                    .zip(&incoming)
                    .map(|(p, t)| (1.0 - omega) * p + omega * t)
                    .collect(),
                _ => incoming,
            };
            self.fluid
                .import(&InterfaceField::WallTemperature(applied.clone()))?;
            self.previously_applied = Some(applied);
            self.fluid.advance()?;
            let fluid_export = self.fluid.export();

            // Heat flux to the solid (what leaves the fluid enters the solid
            // with a sign flip).
            let outgoing: Vec<f64> = fluid_export.facet_flux_out.clone();
            let to_solid: Vec<f64> = self
                .map
                .flux_to_solid(&outgoing)?
                .iter()
                .map(|q| -q)
                .collect();
            self.solid.import(&InterfaceField::HeatFlux(to_solid))?;
            self.solid.advance()?;
            solid_export = self.solid.export();

            let row = self.record_diagnostics(iteration, &fluid_export, &solid_export);
            self.diagnostics.rows.push(row);
            if let Some(cb) = on_row.as_deref_mut() {
                cb(&row);
            }

            outer_progress.steps = iteration;
            outer_progress.change_norm = Some(row.sum_abs_dt);
            outer_progress.monitor_history.push(row.sum_abs_dt);
            outer_progress.energy_balance = if row.q_ctd.abs() > 0.0 {
                Some((row.q_cfd - row.q_ctd).abs() / row.q_ctd.abs())
            } else {
                None
            };
            if let Some(trigger) = &self.outer_trigger {
                if check_trigger(trigger, &outer_progress) {
                    break;
                }
            }
        }
        Ok(())
    }

    /// One diagnostics row comparing the two sides' current exports.
    fn record_diagnostics(
        &self,
        iteration: u64,
        fluid_export: &InterfaceExport,
        solid_export: &InterfaceExport,
    ) -> DiagnosticsRow {
        // Temperature mismatch sampled at fluid facet midpoints.
        let mut sum_abs_dt = 0.0;
        for span in &self.map.fluid.facets {
            let t_fluid = 0.5
                * (fluid_export.nodal_temperature[span.chain[0]]
                    + fluid_export.nodal_temperature[span.chain[1]]);
            let t_solid = self
                .map
                .solid
                .interpolate(&solid_export.nodal_temperature, span.midpoint_angle);
            sum_abs_dt += (t_fluid - t_solid).abs();
        }
        // Positive = heat flowing from the solid into the fluid.
        let q_cfd: f64 = self
            .map
            .fluid
            .facets
            .iter()
            .zip(&fluid_export.facet_flux_out)
            .map(|(f, &q)| -q * f.length)
            .sum();
        let q_ctd: f64 = self
            .map
            .solid
            .facets
            .iter()
            .zip(&solid_export.facet_flux_out)
            .map(|(f, &q)| q * f.length)
            .sum();
        let minmax = |v: &[f64]| {
            v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &t| {
                (lo.min(t), hi.max(t))
            })
        };
        let (tmin_cfd, tmax_cfd) = minmax(&fluid_export.nodal_temperature);
        let (tmin_ctd, tmax_ctd) = minmax(&solid_export.nodal_temperature);
        DiagnosticsRow {
            iteration,
            sum_abs_dt,
            q_cfd,
            q_ctd,
            tmin_cfd,
            tmax_cfd,
            tmin_ctd,
            tmax_ctd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_annulus, generate_rectangle, AnnulusSpec};
    use std::cell::RefCell;
    use std::rc::Rc;

    #[test]
    fn budget_triggers_fire_on_consumption() {
        let mut p = ProgressRecord::default();
        p.steps = 499;
        assert!(!check_trigger(&StopTrigger::StepCount(500), &p));
        p.steps = 500;
        assert!(check_trigger(&StopTrigger::StepCount(500), &p));

        p.elapsed_time = 99.9;
        assert!(!check_trigger(&StopTrigger::TimeIncrement(100.0), &p));
        p.elapsed_time = 100.0;
        assert!(check_trigger(&StopTrigger::TimeIncrement(100.0), &p));

        p.geometry_displacement = 0.2;
        assert!(!check_trigger(&StopTrigger::GeometryChange(0.5), &p));
        p.geometry_displacement = 0.5;
        assert!(check_trigger(&StopTrigger::GeometryChange(0.5), &p));
    }

    #[test]
    fn residual_decrease_needs_the_full_factor() {
        let mut p = ProgressRecord::default();
        p.residual_history = vec![1.0, 0.5, 0.1];
        assert!(!check_trigger(&StopTrigger::ResidualDecrease(1e3), &p));
        p.residual_history.push(9.9e-4);
        assert!(check_trigger(&StopTrigger::ResidualDecrease(1e3), &p));
        // Identically zero residual fires immediately.
        let mut z = ProgressRecord::default();
        z.residual_history = vec![0.0];
        assert!(check_trigger(&StopTrigger::ResidualDecrease(1e3), &z));
    }

    #[test]
    fn settling_triggers() {
        let mut p = ProgressRecord::default();
        p.change_norm = Some(2.0);
        assert!(!check_trigger(&StopTrigger::UnknownChange(1.0), &p));
        p.change_norm = Some(0.5);
        assert!(check_trigger(&StopTrigger::UnknownChange(1.0), &p));

        p.energy_balance = Some(0.3);
        assert!(!check_trigger(&StopTrigger::EnergyBalance(0.1), &p));
        p.energy_balance = Some(0.05);
        assert!(check_trigger(&StopTrigger::EnergyBalance(0.1), &p));
    }

    #[test]
    fn quasi_periodic_detects_repeating_window() {
        let mut p = ProgressRecord::default();
        let trigger = StopTrigger::QuasiPeriodic {
            window: 4,
            tolerance: 1e-9,
        };
        // Period-4 signal.
        for i in 0..8 {
            p.monitor_history.push((i % 4) as f64);
        }
        assert!(check_trigger(&trigger, &p));
        // Drifting signal holds.
        let mut q = ProgressRecord::default();
        for i in 0..12 {
            q.monitor_history.push(i as f64);
        }
        assert!(!check_trigger(&trigger, &q));
        // Too little history holds.
        let mut s = ProgressRecord::default();
        s.monitor_history = vec![1.0, 1.0, 1.0];
        assert!(!check_trigger(&trigger, &s));
    }

    #[test]
    fn any_of_composition() {
        let mut p = ProgressRecord::default();
        p.steps = 10;
        let t = StopTrigger::AnyOf(vec![
            StopTrigger::StepCount(500),
            StopTrigger::TimeIncrement(1.0),
        ]);
        assert!(!check_trigger(&t, &p));
        p.elapsed_time = 1.0;
        assert!(check_trigger(&t, &p));
        assert!(!check_trigger(&StopTrigger::AnyOf(vec![]), &p));
    }

    #[test]
    fn wall_heat_flux_uniform_and_linear() {
        let mesh = generate_rectangle(0.0, 0.0, 1.0, 0.5, 8, 4).unwrap();
        let k = vec![2.0; mesh.n_elements()];
        let uniform = vec![300.0; mesh.n_nodes()];
        for (_, q) in compute_wall_heat_flux(&mesh, &uniform, &k, 1) {
            assert_eq!(q, 0.0);
        }
        // T = 300 + 10 y: the outward normal at the south face is (0, -1),
        // so q_out = -k dT/dn = +10k there.
        let linear: Vec<f64> = mesh.node_coords.iter().map(|p| 300.0 + 10.0 * p.y).collect();
        for (_, q) in compute_wall_heat_flux(&mesh, &linear, &k, 1) {
            assert!((q - 20.0).abs() < 1e-10);
        }
        // And leaving through the north face: q_out = -k·10.
        for (_, q) in compute_wall_heat_flux(&mesh, &linear, &k, 3) {
            assert!((q + 20.0).abs() < 1e-10);
        }
    }

    fn map_for(nf: usize, ns: usize) -> InterfaceMap {
        let fluid = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 1, nf)).unwrap();
        let solid = generate_annulus(&AnnulusSpec::new(2.1, 4.0, 1, ns)).unwrap();
        build_interface_map(
            &fluid,
            fluid.tag_id("outer").unwrap(),
            &solid,
            solid.tag_id("inner").unwrap(),
            1e-8,
        )
        .unwrap()
    }

    #[test]
    fn matching_grids_transfer_exactly() {
        let map = map_for(32, 32);
        let temps: Vec<f64> = map
            .solid
            .node_angles
            .iter()
            .map(|&a| 300.0 + 20.0 * a.sin())
            .collect();
        let out = map.temperature_to_fluid(&temps).unwrap();
        for (i, &t) in out.iter().enumerate() {
            let expect = 300.0 + 20.0 * map.fluid.node_angles[i].sin();
            assert!((t - expect).abs() < 1e-9, "node {i}: {t} vs {expect}");
        }
    }

    #[test]
    fn constant_fields_transfer_exactly_both_ways() {
        let map = map_for(64, 24);
        let t = map.temperature_to_fluid(&vec![300.0; map.solid.nodes.len()]).unwrap();
        assert!(t.iter().all(|&x| (x - 300.0).abs() < 1e-12));
        let q = map.flux_to_solid(&vec![7.5; map.fluid.facets.len()]).unwrap();
        // Constant flux stays constant pointwise...
        for &qi in &q {
            assert!((qi - 7.5).abs() < 1e-9);
        }
        // ...and the integral is conserved to round-off.
        let src: f64 = map.fluid.facets.iter().map(|f| 7.5 * f.length).sum();
        let dst: f64 = map.solid.facets.iter().zip(&q).map(|(f, &qi)| qi * f.length).sum();
        assert!((src - dst).abs() <= 1e-12 * src.abs());
    }

    #[test]
    fn linear_angle_field_transfers_at_coarse_grid_accuracy() {
        // Fluid side twice as fine as the solid side.
        let map = map_for(64, 32);
        let temps: Vec<f64> = map.solid.node_angles.to_vec();
        let out = map.temperature_to_fluid(&temps).unwrap();
        let dth_coarse = 2.0 * PI / 32.0;
        for (i, &t) in out.iter().enumerate() {
            let theta = map.fluid.node_angles[i];
            // Skip the seam where the chain value wraps from 2π to 0.
            if theta < dth_coarse || theta > 2.0 * PI - dth_coarse {
                continue;
            }
            assert!(
                (t - theta).abs() <= dth_coarse * dth_coarse,
                "theta {theta}: {t}"
            );
        }
    }

    #[test]
    fn sinusoidal_flux_transfer_conserves_integral() {
        let map = map_for(96, 40);
        let flux: Vec<f64> = map
            .fluid
            .facets
            .iter()
            .map(|f| 1000.0 + 400.0 * f.midpoint_angle.sin())
            .collect();
        let out = map.flux_to_solid(&flux).unwrap();
        let src: f64 = map.fluid.facets.iter().zip(&flux).map(|(f, &q)| q * f.length).sum();
        let dst: f64 = map.solid.facets.iter().zip(&out).map(|(f, &q)| q * f.length).sum();
        assert!(
            (src - dst).abs() <= 1e-12 * src.abs(),
            "integral defect {:.3e}",
            (src - dst).abs() / src.abs()
        );
        // Pointwise second-order agreement with the analytic profile.
        let h = 2.0 * PI / 40.0;
        for (span, &q) in map.solid.facets.iter().zip(&out) {
            let expect = 1000.0 + 400.0 * span.midpoint_angle.sin();
            assert!(
                (q - expect).abs() <= 400.0 * 4.0 * h * h,
                "angle {}: {q} vs {expect}",
                span.midpoint_angle
            );
        }
    }

    #[test]
    fn zero_field_transfers_to_zero() {
        let map = map_for(48, 20);
        let out = map.flux_to_solid(&vec![0.0; map.fluid.facets.len()]).unwrap();
        assert!(out.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn mismatched_interface_radius_is_rejected() {
        let fluid = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 1, 16)).unwrap();
        let solid = generate_annulus(&AnnulusSpec::new(2.2, 4.0, 1, 16)).unwrap();
        let err = build_interface_map(
            &fluid,
            fluid.tag_id("outer").unwrap(),
            &solid,
            solid.tag_id("inner").unwrap(),
            1e-8,
        )
        .unwrap_err();
        assert!(matches!(err, CouplingError::InterfaceGeometry { .. }));
    }

    /// Identity adapter recording its call order.
    struct Stub {
        name: &'static str,
        log: Rc<RefCell<Vec<String>>>,
        nodes: usize,
        facets: usize,
        clock: f64,
    }

    impl CodeAdapter for Stub {
        fn identity(&self) -> &str {
            self.name
        }
        fn import(&mut self, _data: &InterfaceField) -> Result<(), CouplingError> {
            self.log.borrow_mut().push(format!("{}:import", self.name));
            Ok(())
        }
        fn advance(&mut self) -> Result<ProgressRecord, CouplingError> {
            self.log.borrow_mut().push(format!("{}:advance", self.name));
            self.clock += 1.0;
            Ok(ProgressRecord::default())
        }
        fn export(&self) -> InterfaceExport {
            self.log.borrow_mut().push(format!("{}:export", self.name));
            InterfaceExport {
                nodal_temperature: vec![300.0; self.nodes],
                facet_flux_out: vec![0.0; self.facets],
            }
        }
        fn local_time(&self) -> f64 {
            self.clock
        }
    }

    #[test]
    fn session_orders_calls_fluid_then_solid() {
        let map = map_for(16, 16);
        let log = Rc::new(RefCell::new(Vec::new()));
        let fluid = Stub {
            name: "fluid",
            log: log.clone(),
            nodes: map.fluid.nodes.len(),
            facets: map.fluid.facets.len(),
            clock: 0.0,
        };
        let solid = Stub {
            name: "solid",
            log: log.clone(),
            nodes: map.solid.nodes.len(),
            facets: map.solid.facets.len(),
            clock: 0.0,
        };
        let mut session = Session::new(fluid, solid, map);
        session.run(2, None).unwrap();
        let calls = log.borrow().clone();
        let pattern: Vec<&str> = calls.iter().map(|s| s.as_str()).collect();
        assert_eq!(
            pattern,
            vec![
                "solid:export",
                "fluid:import",
                "fluid:advance",
                "fluid:export",
                "solid:import",
                "solid:advance",
                "solid:export",
                "fluid:import",
                "fluid:advance",
                "fluid:export",
                "solid:import",
                "solid:advance",
                "solid:export",
            ]
        );
        assert_eq!(session.diagnostics.rows.len(), 2);
        // Identical constant temperatures on both sides: no mismatch, no load.
        for row in &session.diagnostics.rows {
            assert!(row.sum_abs_dt.abs() < 1e-12);
            assert_eq!(row.q_cfd, 0.0);
            assert_eq!(row.q_ctd, 0.0);
            assert!(row.tmin_cfd <= row.tmax_cfd);
            assert!(row.tmin_ctd <= row.tmax_ctd);
        }
    }

    #[test]
    fn zero_iterations_leaves_empty_diagnostics() {
        let map = map_for(16, 16);
        let log = Rc::new(RefCell::new(Vec::new()));
        let fluid = Stub {
            name: "fluid",
            log: log.clone(),
            nodes: map.fluid.nodes.len(),
            facets: map.fluid.facets.len(),
            clock: 0.0,
        };
        let solid = Stub {
            name: "solid",
            log: log.clone(),
            nodes: map.solid.nodes.len(),
            facets: map.solid.facets.len(),
            clock: 0.0,
        };
        let mut session = Session::new(fluid, solid, map);
        session.run(0, None).unwrap();
        assert!(session.diagnostics.rows.is_empty());
    }

    #[test]
    fn diagnostics_csv_header_is_exact() {
        let mut diag = CouplingDiagnostics::default();
        diag.rows.push(DiagnosticsRow {
            iteration: 1,
            sum_abs_dt: 1.0,
            q_cfd: 2.0,
            q_ctd: 3.0,
            tmin_cfd: 4.0,
            tmax_cfd: 5.0,
            tmin_ctd: 6.0,
            tmax_ctd: 7.0,
        });
        let mut buf = Vec::new();
        diag.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,sum_abs_dT,q_cfd,q_ctd,tmin_cfd,tmax_cfd,tmin_ctd,tmax_ctd\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
