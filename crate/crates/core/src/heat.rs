//! Transient heat conduction in the solid: linear finite elements with a
//! lumped-mass θ-scheme, per-element material properties, volumetric loads
//! and prescribed interface fluxes.

use crate::linsolve::{pcg_solve, SolveError, SolverConfig, SparseSpd};
use crate::mesh::SimplexMesh;
use std::collections::BTreeMap;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeatError {
    #[error("invalid solid properties: {0}")]
    InvalidProps(String),
    #[error("invalid scheme parameters: {0}")]
    InvalidParams(String),
    #[error("boundary tag {0} has no thermal condition")]
    MissingBc(u32),
    #[error("conduction solve failed: {0}")]
    Solve(#[from] SolveError),
}

#[derive(Clone, Copy, Debug)]
pub struct Material {
    pub density: f64,
    pub specific_heat: f64,
    pub conductivity: f64,
}

/// Per-element material assignment over a shared material table.
#[derive(Clone, Debug)]
pub struct SolidProps {
    pub materials: Vec<Material>,
    pub element_material: Vec<usize>,
}

impl SolidProps {
    pub fn uniform(material: Material, n_elements: usize) -> Self {
        Self {
            materials: vec![material],
            element_material: vec![0; n_elements],
        }
    }

    pub fn validate(&self, mesh: &SimplexMesh) -> Result<(), HeatError> {
        if self.element_material.len() != mesh.n_elements() {
            return Err(HeatError::InvalidProps(format!(
                "material map covers {} elements, mesh has {}",
                self.element_material.len(),
                mesh.n_elements()
            )));
        }
        for (i, m) in self.materials.iter().enumerate() {
            if m.density <= 0.0 || m.specific_heat <= 0.0 || m.conductivity <= 0.0 {
                return Err(HeatError::InvalidProps(format!(
                    "material {i} must have positive density, specific heat and conductivity"
                )));
            }
        }
        if let Some(&bad) = self
            .element_material
            .iter()
            .find(|&&m| m >= self.materials.len())
        {
            return Err(HeatError::InvalidProps(format!(
                "element references material {bad} out of range"
            )));
        }
        Ok(())
    }

    pub fn material_of(&self, element: usize) -> &Material {
        &self.materials[self.element_material[element]]
    }

    pub fn conductivity_per_element(&self, mesh: &SimplexMesh) -> Vec<f64> {
        (0..mesh.n_elements())
            .map(|e| self.material_of(e).conductivity)
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeatSchemeParams {
    /// Implicitness factor in [0.5, 1]; 1 is fully implicit, 0.5 is
    /// Crank-Nicolson.
    pub theta: f64,
    pub dt: f64,
}

impl HeatSchemeParams {
    pub fn validate(&self) -> Result<(), HeatError> {
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(HeatError::InvalidParams(format!(
                "theta must be in [0.5, 1], got {}",
                self.theta
            )));
        }
        if !(self.dt > 0.0) {
            return Err(HeatError::InvalidParams(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

impl Default for HeatSchemeParams {
    fn default() -> Self {
        Self {
            theta: 1.0,
            dt: 10.0,
        }
    }
}

/// Thermal condition per boundary tag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ThermalBc {
    FixedTemperature(f64),
    /// Natural zero-flux boundary.
    Insulated,
    /// Prescribed heat flux supplied through `SolidState::interface_flux`
    /// (positive heats the solid).
    CoupledFlux,
}

/// Nodal temperature plus the load terms driving the next step.
#[derive(Clone, Debug)]
pub struct SolidState {
    pub temperature: Vec<f64>,
    /// Volumetric heat source per element (erg / (cm^3 s)).
    pub volumetric_load: Vec<f64>,
    /// Heat flux per boundary facet (erg / (cm^2 s)), applied only on
    /// facets whose tag is [`ThermalBc::CoupledFlux`]; positive heats the
    /// solid.
    pub interface_flux: Vec<f64>,
    pub time: f64,
}

impl SolidState {
    pub fn uniform(mesh: &SimplexMesh, temperature: f64) -> Self {
        Self {
            temperature: vec![temperature; mesh.n_nodes()],
            volumetric_load: vec![0.0; mesh.n_elements()],
            interface_flux: vec![0.0; mesh.boundary_facets.len()],
            time: 0.0,
        }
    }

    pub fn min_max_temperature(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &t in &self.temperature {
            lo = lo.min(t);
            hi = hi.max(t);
        }
        (lo, hi)
    }
}

pub struct StepReport {
    /// Max-norm of the temperature change over the step.
    pub delta_t_norm: f64,
    pub solver_iterations: usize,
}

pub struct HeatSolver {
    pub mesh: Arc<SimplexMesh>,
    pub props: SolidProps,
    pub bcs: BTreeMap<u32, ThermalBc>,
    pub params: HeatSchemeParams,
    pub solver: SolverConfig,
    stiffness: SparseSpd,
    /// Lumped ρ c_p A/3 per node.
    capacity: Vec<f64>,
    dirichlet: Vec<Option<f64>>,
    cached: Option<CachedSystem>,
}

struct CachedSystem {
    dt: f64,
    theta: f64,
    matrix: SparseSpd,
}

impl HeatSolver {
    pub fn new(
        mesh: Arc<SimplexMesh>,
        props: SolidProps,
        bcs: BTreeMap<u32, ThermalBc>,
        params: HeatSchemeParams,
        solver: SolverConfig,
    ) -> Result<Self, HeatError> {
        props.validate(&mesh)?;
        params.validate()?;
        for f in &mesh.boundary_facets {
            if !bcs.contains_key(&f.tag) {
                return Err(HeatError::MissingBc(f.tag));
            }
        }

        let n = mesh.n_nodes();
        let mut triplets = Vec::new();
        let mut capacity = vec![0.0; n];
        for e in 0..mesh.n_elements() {
            let mat = props.material_of(e);
            let area = mesh.element_area(e);
            let grads = mesh.shape_gradients(e);
            let nodes = mesh.elements[e];
            for a in 0..3 {
                capacity[nodes[a]] += mat.density * mat.specific_heat * area / 3.0;
                for b in 0..3 {
                    triplets.push((
                        nodes[a],
                        nodes[b],
                        mat.conductivity * grads[a].dot(grads[b]) * area,
                    ));
                }
            }
        }
        let stiffness = SparseSpd::from_triplets(n, triplets)?;

        let mut dirichlet = vec![None; n];
        for f in &mesh.boundary_facets {
            if let ThermalBc::FixedTemperature(t) = bcs[&f.tag] {
                dirichlet[f.nodes[0]] = Some(t);
                dirichlet[f.nodes[1]] = Some(t);
            }
        }

        Ok(Self {
            mesh,
            props,
            bcs,
            params,
            solver,
            stiffness,
            capacity,
            dirichlet,
            cached: None,
        })
    }

    /// Impose Dirichlet temperatures on the state; call once after creating
    /// the initial state so increments can stay zero on fixed nodes.
    pub fn apply_dirichlet(&self, state: &mut SolidState) {
        for (i, d) in self.dirichlet.iter().enumerate() {
            if let Some(t) = d {
                state.temperature[i] = *t;
            }
        }
    }

    /// Left-hand matrix `diag(C/dt) + theta K` with Dirichlet rows/columns
    /// eliminated, plus the right-hand side for the temperature increment.
    pub fn assemble_system(&self, state: &SolidState) -> (SparseSpd, Vec<f64>) {
        let n = self.mesh.n_nodes();
        let dt = self.params.dt;
        let theta = self.params.theta;

        let mut rhs = vec![0.0; n];
        // Conduction residual -K T.
        let mut kt = vec![0.0; n];
        self.stiffness.mul_vec(&state.temperature, &mut kt);
        for i in 0..n {
            rhs[i] = -kt[i];
        }
        // Volumetric sources.
        for e in 0..self.mesh.n_elements() {
            let s = state.volumetric_load[e];
            if s != 0.0 {
                let contrib = s * self.mesh.element_area(e) / 3.0;
                for &node in &self.mesh.elements[e] {
                    rhs[node] += contrib;
                }
            }
        }
        // Interface flux boundary integrals.
        for (fi, facet) in self.mesh.boundary_facets.iter().enumerate() {
            if self.bcs[&facet.tag] == ThermalBc::CoupledFlux {
                let q = state.interface_flux[fi];
                if q != 0.0 {
                    let half = 0.5 * q * facet.length(&self.mesh);
                    rhs[facet.nodes[0]] += half;
                    rhs[facet.nodes[1]] += half;
                }
            }
        }

        let is_fixed: Vec<bool> = self.dirichlet.iter().map(|d| d.is_some()).collect();
        let mut triplets = Vec::with_capacity(self.stiffness.nnz() + n);
        for (i, cols, vals) in self.stiffness.rows() {
            if is_fixed[i] {
                continue;
            }
            for (&j, &v) in cols.iter().zip(vals) {
                if !is_fixed[j] {
                    triplets.push((i, j, theta * v));
                }
            }
        }
        for i in 0..n {
            if is_fixed[i] {
                triplets.push((i, i, 1.0));
                rhs[i] = 0.0;
            } else {
                triplets.push((i, i, self.capacity[i] / dt));
            }
        }
        let matrix = SparseSpd::from_triplets(n, triplets).expect("theta system is SPD");
        (matrix, rhs)
    }

    /// Advance the solid temperature by one θ-scheme step.
    pub fn advance_step(&mut self, state: &mut SolidState) -> Result<StepReport, HeatError> {
        let rebuild = match &self.cached {
            Some(c) => c.dt != self.params.dt || c.theta != self.params.theta,
            None => true,
        };
        let rhs = if rebuild {
            let (matrix, rhs) = self.assemble_system(state);
            self.cached = Some(CachedSystem {
                dt: self.params.dt,
                theta: self.params.theta,
                matrix,
            });
            rhs
        } else {
            self.assemble_system(state).1
        };
        let matrix = &self.cached.as_ref().unwrap().matrix;
        let guess = vec![0.0; self.mesh.n_nodes()];
        let sol = pcg_solve(matrix, &rhs, &guess, &self.solver)?;
        let mut delta_norm: f64 = 0.0;
        for (t, d) in state.temperature.iter_mut().zip(&sol.x) {
            *t += d;
            delta_norm = delta_norm.max(d.abs());
        }
        state.time += self.params.dt;
        Ok(StepReport {
            delta_t_norm: delta_norm,
            solver_iterations: sol.iterations,
        })
    }

    /// Nodal temperatures on the facets of a boundary tag, for the interface
    /// exchange.
    pub fn surface_temperature(
        &self,
        state: &SolidState,
        tag: u32,
    ) -> Vec<(usize, [usize; 2], [f64; 2])> {
        self.mesh
            .facets_with_tag(tag)
            .map(|(fi, f)| {
                (
                    fi,
                    f.nodes,
                    [
                        state.temperature[f.nodes[0]],
                        state.temperature[f.nodes[1]],
                    ],
                )
            })
            .collect()
    }

    /// Total stored thermal energy (erg per unit depth).
    pub fn stored_energy(&self, state: &SolidState) -> f64 {
        let mut total = 0.0;
        for e in 0..self.mesh.n_elements() {
            let mat = self.props.material_of(e);
            let nodes = self.mesh.elements[e];
            let t_mean = (state.temperature[nodes[0]]
                + state.temperature[nodes[1]]
                + state.temperature[nodes[2]])
                / 3.0;
            total += mat.density * mat.specific_heat * self.mesh.element_area(e) * t_mean;
        }
        total
    }

    /// Total volumetric generation currently applied (erg/s per unit depth).
    pub fn total_generation(&self, state: &SolidState) -> f64 {
        (0..self.mesh.n_elements())
            .map(|e| state.volumetric_load[e] * self.mesh.element_area(e))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_annulus, generate_rectangle, AnnulusSpec, MeshBuilder};
    use crate::Vec2;

    fn steel() -> Material {
        Material {
            density: 7.85,
            specific_heat: 4.2e6,
            conductivity: 5.0e6,
        }
    }

    fn bc_all(mesh: &SimplexMesh, bc: ThermalBc) -> BTreeMap<u32, ThermalBc> {
        let mut map = BTreeMap::new();
        for f in &mesh.boundary_facets {
            map.insert(f.tag, bc);
        }
        map
    }

    #[test]
    fn uniform_state_yields_zero_increment() {
        let mesh = Arc::new(
            MeshBuilder::new(
                vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
                vec![[0, 1, 2]],
            )
            .build()
            .unwrap(),
        );
        let bcs = bc_all(&mesh, ThermalBc::Insulated);
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt: 1.0 },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        let report = solver.advance_step(&mut state).unwrap();
        assert!(report.delta_t_norm < 1e-12);
        for &t in &state.temperature {
            assert!((t - 300.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_load_heats_at_analytic_rate() {
        let mesh = Arc::new(generate_rectangle(0.0, 0.0, 1.0, 1.0, 4, 4).unwrap());
        let bcs = bc_all(&mesh, ThermalBc::Insulated);
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        let dt = 2.0;
        let s = 1.0e7;
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        state.volumetric_load = vec![s; mesh.n_elements()];
        solver.advance_step(&mut state).unwrap();
        let expected = 300.0 + s * dt / (7.85 * 4.2e6);
        for &t in &state.temperature {
            assert!(
                (t - expected).abs() / expected < 1e-10,
                "t = {t}, expected {expected}"
            );
        }
        assert_eq!(state.time, dt);
    }

    #[test]
    fn ten_steps_advance_clock_by_hundred_seconds() {
        let mesh = Arc::new(generate_annulus(&AnnulusSpec::new(2.1, 4.0, 2, 12)).unwrap());
        let bcs = bc_all(&mesh, ThermalBc::Insulated);
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt: 10.0 },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        for _ in 0..10 {
            solver.advance_step(&mut state).unwrap();
        }
        assert!((state.time - 100.0).abs() < 1e-12);
    }

    #[test]
    fn steady_radial_profile_matches_log_solution() {
        let mesh = Arc::new(generate_annulus(&AnnulusSpec::new(2.1, 4.0, 8, 64)).unwrap());
        let mut bcs = BTreeMap::new();
        bcs.insert(mesh.tag_id("inner").unwrap(), ThermalBc::FixedTemperature(400.0));
        bcs.insert(mesh.tag_id("outer").unwrap(), ThermalBc::FixedTemperature(300.0));
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        // One huge implicit step lands on the steady solution directly.
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt: 1e12 },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        solver.apply_dirichlet(&mut state);
        solver.advance_step(&mut state).unwrap();

        let b = (300.0 - 400.0) / (4.0f64 / 2.1).ln();
        let a = 400.0 - b * 2.1f64.ln();
        let mut max_rel: f64 = 0.0;
        for (i, p) in mesh.node_coords.iter().enumerate() {
            let exact = a + b * p.norm().ln();
            max_rel = max_rel.max((state.temperature[i] - exact).abs() / exact.abs());
        }
        assert!(max_rel < 0.01, "radial profile error {max_rel}");
    }

    #[test]
    fn two_material_annulus_matches_piecewise_log_profile() {
        let copper = Material {
            density: 8.94,
            specific_heat: 3.85e6,
            conductivity: 3.85e7,
        };
        let mesh = Arc::new(generate_annulus(&AnnulusSpec::new(2.1, 4.0, 8, 64)).unwrap());
        let r_mid = 2.1 + (4.0 - 2.1) * 0.5;
        let element_material: Vec<usize> = (0..mesh.n_elements())
            .map(|e| if mesh.element_barycenter(e).norm() < r_mid { 0 } else { 1 })
            .collect();
        let props = SolidProps {
            materials: vec![steel(), copper],
            element_material,
        };
        let mut bcs = BTreeMap::new();
        bcs.insert(mesh.tag_id("inner").unwrap(), ThermalBc::FixedTemperature(400.0));
        bcs.insert(mesh.tag_id("outer").unwrap(), ThermalBc::FixedTemperature(300.0));
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt: 1e12 },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        solver.apply_dirichlet(&mut state);
        solver.advance_step(&mut state).unwrap();

        // Heat flow per unit depth q is uniform; piecewise-log profile with
        // continuity at the material interface. The structured mesh puts the
        // interface exactly on a node ring.
        let (k1, k2) = (steel().conductivity, copper.conductivity);
        let (r0, r1) = (2.1f64, 4.0f64);
        // 400 - 300 = q/(2 pi) [ln(rm/r0)/k1 + ln(r1/rm)/k2]
        let q = 100.0 * 2.0 * std::f64::consts::PI
            / ((r_mid / r0).ln() / k1 + (r1 / r_mid).ln() / k2);
        let t_mid = 400.0 - q / (2.0 * std::f64::consts::PI * k1) * (r_mid / r0).ln();
        let exact = |r: f64| {
            if r <= r_mid {
                400.0 - q / (2.0 * std::f64::consts::PI * k1) * (r / r0).ln()
            } else {
                t_mid - q / (2.0 * std::f64::consts::PI * k2) * (r / r_mid).ln()
            }
        };
        let mut max_rel: f64 = 0.0;
        for (i, p) in mesh.node_coords.iter().enumerate() {
            let e = exact(p.norm());
            max_rel = max_rel.max((state.temperature[i] - e).abs() / e.abs());
        }
        assert!(max_rel < 0.01, "two-material profile error {max_rel}");
    }

    #[test]
    fn slab_transient_matches_fourier_series() {
        // Thin strip, fixed end temperatures, insulated sides: effectively
        // 1-D conduction in x.
        let l = 1.0;
        let mesh = Arc::new(generate_rectangle(0.0, 0.0, l, l / 16.0, 64, 1).unwrap());
        let mat = steel();
        let alpha = mat.conductivity / (mat.density * mat.specific_heat);
        let t_final = 0.1 * l * l / alpha;
        let n_steps = 400;
        let mut bcs = BTreeMap::new();
        bcs.insert(mesh.tag_id("west").unwrap(), ThermalBc::FixedTemperature(300.0));
        bcs.insert(mesh.tag_id("east").unwrap(), ThermalBc::FixedTemperature(300.0));
        bcs.insert(mesh.tag_id("south").unwrap(), ThermalBc::Insulated);
        bcs.insert(mesh.tag_id("north").unwrap(), ThermalBc::Insulated);
        let props = SolidProps::uniform(mat, mesh.n_elements());
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams {
                theta: 1.0,
                dt: t_final / n_steps as f64,
            },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 400.0);
        solver.apply_dirichlet(&mut state);
        for _ in 0..n_steps {
            solver.advance_step(&mut state).unwrap();
        }
        // Fourier series for a 100 K step with both ends clamped.
        let series = |x: f64, t: f64| {
            let mut sum = 0.0;
            for n in (1..200).step_by(2) {
                let nf = n as f64;
                let lam = nf * std::f64::consts::PI / l;
                sum += 400.0 / (nf * std::f64::consts::PI)
                    * (lam * x).sin()
                    * (-lam * lam * alpha * t).exp();
            }
            300.0 + sum
        };
        let mut max_rel: f64 = 0.0;
        for (i, p) in mesh.node_coords.iter().enumerate() {
            let exact = series(p.x, t_final);
            max_rel = max_rel.max((state.temperature[i] - exact).abs() / exact);
        }
        assert!(max_rel < 0.02, "slab transient error {max_rel}");
    }

    #[test]
    fn crank_nicolson_is_second_order_in_time() {
        let l = 1.0;
        let mesh = Arc::new(generate_rectangle(0.0, 0.0, l, l / 8.0, 32, 1).unwrap());
        let mat = steel();
        let alpha = mat.conductivity / (mat.density * mat.specific_heat);
        let t_final = 0.05 * l * l / alpha;
        let mut bcs = BTreeMap::new();
        bcs.insert(mesh.tag_id("west").unwrap(), ThermalBc::FixedTemperature(300.0));
        bcs.insert(mesh.tag_id("east").unwrap(), ThermalBc::FixedTemperature(300.0));
        bcs.insert(mesh.tag_id("south").unwrap(), ThermalBc::Insulated);
        bcs.insert(mesh.tag_id("north").unwrap(), ThermalBc::Insulated);
        let props = SolidProps::uniform(mat, mesh.n_elements());

        let run = |n_steps: usize| -> Vec<f64> {
            let mut solver = HeatSolver::new(
                mesh.clone(),
                props.clone(),
                bcs.clone(),
                HeatSchemeParams {
                    theta: 0.5,
                    dt: t_final / n_steps as f64,
                },
                SolverConfig {
                    rel_tolerance: 1e-13,
                    ..SolverConfig::default()
                },
            )
            .unwrap();
            // Smooth single-mode initial condition.
            let mut state = SolidState::uniform(&mesh, 300.0);
            for (i, p) in mesh.node_coords.iter().enumerate() {
                state.temperature[i] =
                    300.0 + 100.0 * (std::f64::consts::PI * p.x / l).sin();
            }
            solver.apply_dirichlet(&mut state);
            for _ in 0..n_steps {
                solver.advance_step(&mut state).unwrap();
            }
            state.temperature
        };

        let coarse = run(8);
        let medium = run(16);
        let fine = run(32);
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let order = (diff(&coarse, &medium) / diff(&medium, &fine)).log2();
        assert!(order >= 1.8, "observed temporal order {order}");
    }

    #[test]
    fn surface_temperature_reports_nodal_values() {
        let mesh = Arc::new(generate_annulus(&AnnulusSpec::new(2.1, 4.0, 2, 16)).unwrap());
        let bcs = bc_all(&mesh, ThermalBc::Insulated);
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        let solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams::default(),
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        for s in solver.surface_temperature(&state, 1) {
            assert_eq!(s.2, [300.0, 300.0]);
        }
        // Linear field reproduces nodal coordinates exactly.
        for (i, p) in mesh.node_coords.iter().enumerate() {
            state.temperature[i] = p.x;
        }
        for (_, nodes, temps) in solver.surface_temperature(&state, 2) {
            assert_eq!(temps[0], mesh.node_coords[nodes[0]].x);
            assert_eq!(temps[1], mesh.node_coords[nodes[1]].x);
        }
    }

    #[test]
    fn theta_one_respects_discrete_max_principle() {
        let mesh = Arc::new(generate_annulus(&AnnulusSpec::new(2.1, 4.0, 4, 32)).unwrap());
        let mut bcs = BTreeMap::new();
        bcs.insert(mesh.tag_id("inner").unwrap(), ThermalBc::FixedTemperature(350.0));
        bcs.insert(mesh.tag_id("outer").unwrap(), ThermalBc::FixedTemperature(300.0));
        let props = SolidProps::uniform(steel(), mesh.n_elements());
        let mut solver = HeatSolver::new(
            mesh.clone(),
            props,
            bcs,
            HeatSchemeParams { theta: 1.0, dt: 5.0 },
            SolverConfig::default(),
        )
        .unwrap();
        let mut state = SolidState::uniform(&mesh, 300.0);
        solver.apply_dirichlet(&mut state);
        for _ in 0..40 {
            solver.advance_step(&mut state).unwrap();
            let (lo, hi) = state.min_max_temperature();
            // 5% slack on the source-implied bounds.
            assert!(lo >= 300.0 - 0.05 * 50.0);
            assert!(hi <= 350.0 + 0.05 * 50.0);
        }
    }
}
