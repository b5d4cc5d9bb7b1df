//! Lagrangian droplet parcels exchanging momentum and heat with the gas.
//!
//! A parcel carries one representative droplet's state plus a multiplicity
//! `N_p`; the governing ODEs are integrated with the same k-stage low-storage
//! Runge-Kutta coefficients as the flow solver, with per-stage limiting so
//! parcel velocity and temperature never cross beyond the local gas values.
//! Transfer back to the gas goes through host-element shape functions, which
//! makes the exchange conservative to round-off.

use crate::flow::FluidProps;
use crate::geom::Vec2;
use crate::mesh::SimplexMesh;
use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

/// Reynolds floor guarding the drag singularity at zero slip.
pub const RE_FLOOR: f64 = 1e-10;
/// Parcels below this diameter (cm) are considered evaporated.
pub const DIAMETER_FLOOR: f64 = 1e-4;

const GOLDEN_RATIO_CONJUGATE: f64 = 0.618_033_988_749_894_9;

#[derive(Clone, Copy, Debug)]
pub struct ParticleProps {
    pub density: f64,
    pub specific_heat: f64,
    pub boiling_temp: f64,
    pub latent_heat: f64,
    /// Radiation coefficient in the film heat exchange; zero by default.
    pub radiation: f64,
}

impl ParticleProps {
    pub fn water() -> Self {
        Self {
            density: 1.0,
            specific_heat: 4.186e7,
            boiling_temp: 373.15,
            latent_heat: 2.26e10,
            radiation: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Parcel {
    pub position: Vec2,
    pub velocity: Vec2,
    pub temperature: f64,
    pub diameter: f64,
    /// Number of physical droplets this parcel represents.
    pub multiplicity: f64,
    pub host_element: usize,
    pub alive: bool,
}

impl Parcel {
    /// Mass of one represented droplet (g).
    pub fn droplet_mass(&self, props: &ParticleProps) -> f64 {
        props.density * std::f64::consts::PI * self.diameter.powi(3) / 6.0
    }
}

/// Continuous injection of fresh parcels along a circle, deterministic via a
/// golden-angle sequence.
#[derive(Clone, Debug)]
pub struct InjectionSpec {
    pub radius: f64,
    /// Parcels per second of fluid time.
    pub rate: f64,
    pub multiplicity: f64,
    pub diameter: f64,
    pub temperature: f64,
    pub tangential_speed: f64,
    pub radial_speed: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ParcelSet {
    pub parcels: Vec<Parcel>,
    pub injection: Option<InjectionSpec>,
    /// Fractional parcel budget carried between steps.
    carry: f64,
    injected: u64,
    /// Parcels dropped because relocation failed even after reflection.
    pub lost: u64,
}

impl ParcelSet {
    pub fn alive_count(&self) -> usize {
        self.parcels.iter().filter(|p| p.alive).count()
    }

    /// Write the snapshot CSV: `id,x,y,u,v,T_p,d,N_p,alive`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "id,x,y,u,v,T_p,d,N_p,alive")?;
        for (i, p) in self.parcels.iter().enumerate() {
            writeln!(
                w,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                i,
                p.position.x,
                p.position.y,
                p.velocity.x,
                p.velocity.y,
                p.temperature,
                p.diameter,
                p.multiplicity,
                u8::from(p.alive)
            )?;
        }
        Ok(())
    }
}

/// Gas state interpolated at a parcel position.
#[derive(Clone, Copy, Debug)]
pub struct FluidSample {
    pub velocity: Vec2,
    pub temperature: f64,
}

/// Slip Reynolds number ρ |v − v_p| d / μ.
pub fn reynolds(gas_density: f64, gas_viscosity: f64, slip_speed: f64, diameter: f64) -> f64 {
    gas_density * slip_speed * diameter / gas_viscosity
}

/// Sphere drag coefficient with the high-Reynolds floor of 0.1; the floor
/// keeps the inviscid limit correct. Zero slip evaluates at [`RE_FLOOR`].
pub fn drag_coefficient(re: f64) -> f64 {
    let re = re.max(RE_FLOOR);
    (24.0 / re * (1.0 + 0.15 * re.powf(0.687))).max(0.1)
}

pub fn prandtl(specific_heat: f64, viscosity: f64, conductivity: f64) -> f64 {
    specific_heat * viscosity / conductivity
}

/// Droplet Nusselt number; the stagnant-gas limit is exactly 2.
pub fn nusselt(pr: f64, re: f64) -> f64 {
    2.0 + 0.459 * pr.powf(0.333) * re.powf(0.55)
}

/// Film heat-transfer coefficient h_f = Nu k / d.
pub fn film_coefficient(conductivity: f64, diameter: f64, nu: f64) -> f64 {
    nu * conductivity / diameter
}

/// Time derivatives of one parcel's velocity, position and temperature.
#[derive(Clone, Copy, Debug, Default)]
pub struct Derivatives {
    pub acceleration: Vec2,
    pub velocity: Vec2,
    pub temperature_rate: f64,
}

/// Right-hand side of the parcel ODE system given the local gas state.
///
/// Velocity relaxes at α_v |v − v_p| with α_v = 3 ρ c_d / (4 ρ_p d);
/// temperature at α_T = 3 k Nu / (2 c_pp ρ_p d²), plus the (normally
/// disabled) radiation exchange.
pub fn parcel_rhs(
    parcel: &Parcel,
    gas: &FluidProps,
    sample: FluidSample,
    props: &ParticleProps,
) -> Derivatives {
    if !parcel.alive || parcel.diameter < DIAMETER_FLOOR {
        return Derivatives::default();
    }
    let d = parcel.diameter;
    let slip = sample.velocity - parcel.velocity;
    let slip_speed = slip.norm();
    let re = reynolds(gas.density, gas.viscosity, slip_speed, d);
    let cd = drag_coefficient(re);
    let alpha_v = 3.0 * gas.density * cd / (4.0 * props.density * d);

    let pr = prandtl(gas.specific_heat, gas.viscosity, gas.conductivity);
    let nu = nusselt(pr, re);
    let mut temperature_rate = 3.0 * gas.conductivity * nu
        / (2.0 * props.specific_heat * props.density * d * d)
        * (sample.temperature - parcel.temperature);
    if props.radiation > 0.0 {
        let droplet_mass = props.density * std::f64::consts::PI * d.powi(3) / 6.0;
        let q_rad = props.radiation
            * (sample.temperature.powi(4) - parcel.temperature.powi(4))
            * std::f64::consts::PI
            * d
            * d
            / 4.0;
        temperature_rate += q_rad / (droplet_mass * props.specific_heat);
    }

    Derivatives {
        acceleration: slip * (alpha_v * slip_speed),
        velocity: parcel.velocity,
        temperature_rate,
    }
}

/// Clamp a proposed velocity so the update never crosses beyond the gas
/// velocity along its own direction.
pub fn limit_velocity(start: Vec2, proposed: Vec2, fluid: Vec2) -> Vec2 {
    let delta = proposed - start;
    let len = delta.norm();
    if len == 0.0 {
        return proposed;
    }
    let dir = delta / len;
    let allowed = (fluid - start).dot(dir).max(0.0);
    if len > allowed {
        start + dir * allowed
    } else {
        proposed
    }
}

/// Clamp a proposed temperature into the interval spanned by the start value
/// and the gas temperature.
pub fn limit_temperature(start: f64, proposed: f64, fluid: f64) -> f64 {
    let (lo, hi) = if start <= fluid {
        (start, fluid)
    } else {
        (fluid, start)
    };
    proposed.clamp(lo, hi)
}

/// Boiling-point evaporation: heat raises the droplet temperature until the
/// boiling point, then converts to mass loss through the latent heat. Returns
/// the energy (erg) spent on evaporation.
pub fn evaporate(parcel: &mut Parcel, heat_in: f64, props: &ParticleProps) -> f64 {
    if !parcel.alive {
        return 0.0;
    }
    let m = parcel.droplet_mass(props);
    if heat_in <= 0.0 {
        // Cooling is purely sensible.
        parcel.temperature += heat_in / (m * props.specific_heat);
        return 0.0;
    }
    let sensible_capacity = m * props.specific_heat * (props.boiling_temp - parcel.temperature);
    if heat_in <= sensible_capacity {
        parcel.temperature += heat_in / (m * props.specific_heat);
        return 0.0;
    }
    parcel.temperature = props.boiling_temp;
    let latent = heat_in - sensible_capacity.max(0.0);
    // ρ_p L d(π d³/6)/dt = -Q  =>  linear decay of d³ under constant heat.
    let d3 = parcel.diameter.powi(3)
        - 6.0 * latent / (std::f64::consts::PI * props.density * props.latent_heat);
    if d3 <= DIAMETER_FLOOR.powi(3) {
        parcel.diameter = 0.0;
        parcel.alive = false;
    } else {
        parcel.diameter = d3.cbrt();
    }
    latent
}

/// Per-step exchange totals, used both for the nodal deposits and for the
/// conservation checks.
#[derive(Clone, Debug)]
pub struct StepTransfer {
    /// Nodal momentum sources (sign already flipped: reaction on the gas).
    pub source_momentum: Vec<Vec2>,
    /// Nodal energy sources (reaction on the gas).
    pub source_energy: Vec<f64>,
    /// Σ N_p m Δv over parcels (momentum gained by the droplets).
    pub parcel_momentum_change: Vec2,
    /// Σ N_p (sensible + latent) energy gained by the droplets.
    pub parcel_energy_change: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WallBehavior {
    Reflect,
    Absorb,
}

pub struct ParticleSolver {
    pub mesh: Arc<SimplexMesh>,
    pub gas: FluidProps,
    pub props: ParticleProps,
    pub stages: usize,
    /// When false, parcels feel the gas but deposit nothing back (oracle mode).
    pub two_way: bool,
    wall_behavior: BTreeMap<u32, WallBehavior>,
}

impl ParticleSolver {
    pub fn new(
        mesh: Arc<SimplexMesh>,
        gas: FluidProps,
        props: ParticleProps,
        stages: usize,
    ) -> Self {
        assert!(stages >= 1);
        let wall_behavior = mesh
            .tags
            .iter()
            .map(|t| (t.id, WallBehavior::Reflect))
            .collect();
        Self {
            mesh,
            gas,
            props,
            stages,
            two_way: true,
            wall_behavior,
        }
    }

    pub fn set_wall_behavior(&mut self, tag: u32, behavior: WallBehavior) {
        self.wall_behavior.insert(tag, behavior);
    }

    fn sample(
        &self,
        element: usize,
        point: Vec2,
        velocity: &[Vec2],
        temperature: &[f64],
    ) -> FluidSample {
        let w = self.mesh.shape_functions(element, point);
        FluidSample {
            velocity: self.mesh.interpolate_vec2(element, &w, velocity),
            temperature: self.mesh.interpolate_scalar(element, &w, temperature),
        }
    }

    /// Advance all parcels one step of `dt`: injection, the k-stage
    /// integrator with limiting and host tracking, boiling/evaporation, wall
    /// interaction and the conservative transfer back to the gas.
    pub fn advance(
        &self,
        set: &mut ParcelSet,
        velocity: &[Vec2],
        temperature: &[f64],
        dt: f64,
    ) -> StepTransfer {
        self.inject(set, dt);

        let n_nodes = self.mesh.n_nodes();
        let mut transfer = StepTransfer {
            source_momentum: vec![Vec2::default(); n_nodes],
            source_energy: vec![0.0; n_nodes],
            parcel_momentum_change: Vec2::default(),
            parcel_energy_change: 0.0,
        };

        for idx in 0..set.parcels.len() {
            let start = set.parcels[idx];
            if !start.alive {
                continue;
            }
            let mass_start = start.droplet_mass(&self.props);

            // Low-storage stages: every stage restarts from the step-start
            // state with the right-hand side at the previous stage.
            let mut stage = start;
            // Final-stage temperature after the gas-value limiter but before
            // the boiling cap; the part above boiling evaporates mass.
            let mut limited_final_temp = start.temperature;
            let boil_cap = self.props.boiling_temp.max(start.temperature);
            for i in 1..=self.stages {
                let alpha = 1.0 / (self.stages + 1 - i) as f64;
                let sample =
                    self.sample(stage.host_element, stage.position, velocity, temperature);
                let rhs = parcel_rhs(&stage, &self.gas, sample, &self.props);

                let mut next = start;
                next.position = start.position + rhs.velocity * (alpha * dt);
                next.velocity = limit_velocity(
                    start.velocity,
                    start.velocity + rhs.acceleration * (alpha * dt),
                    sample.velocity,
                );
                limited_final_temp = limit_temperature(
                    start.temperature,
                    start.temperature + rhs.temperature_rate * (alpha * dt),
                    sample.temperature,
                );
                next.temperature = limited_final_temp.min(boil_cap);
                next.host_element = stage.host_element;
                next.diameter = start.diameter;
                next.alive = true;

                // Track the host; intermediate stage positions that leave the
                // mesh keep the previous valid location for interpolation.
                if i < self.stages {
                    match self.mesh.locate_point(next.host_element, next.position) {
                        Some(host) => next.host_element = host,
                        None => {
                            next.position = stage.position;
                            next.host_element = stage.host_element;
                        }
                    }
                }
                stage = next;
            }

            // Resolve walls on the full step displacement.
            let mut end = stage;
            if self.resolve_walls(&start, &mut end) {
                set.lost += 1;
            }

            // Heat bookkeeping at step granularity: sensible change plus the
            // overshoot past boiling, which evaporates mass.
            let sensible =
                mass_start * self.props.specific_heat * (end.temperature - start.temperature);
            let mut heat_from_gas = sensible;
            if end.alive && limited_final_temp > self.props.boiling_temp {
                let excess = mass_start
                    * self.props.specific_heat
                    * (limited_final_temp - self.props.boiling_temp);
                let mut boiling = end;
                let latent = evaporate(&mut boiling, excess, &self.props);
                end = boiling;
                heat_from_gas += latent;
            }

            let npm = end.multiplicity * mass_start;
            let momentum_gain = (end.velocity - start.velocity) * npm;
            let energy_gain = end.multiplicity * heat_from_gas;
            transfer.parcel_momentum_change += momentum_gain;
            transfer.parcel_energy_change += energy_gain;

            if self.two_way {
                // Deposit the reaction on the host-element nodes.
                let host = if end.alive {
                    end.host_element
                } else {
                    start.host_element
                };
                let pos = if end.alive { end.position } else { start.position };
                let w = self.mesh.shape_functions(host, pos);
                let f_p = momentum_gain / dt;
                let q_p = energy_gain / dt;
                for (k, &node) in self.mesh.elements[host].iter().enumerate() {
                    transfer.source_momentum[node] -= f_p * w[k];
                    transfer.source_energy[node] -= q_p * w[k];
                }
            }

            set.parcels[idx] = end;
        }

        transfer
    }

    fn inject(&self, set: &mut ParcelSet, dt: f64) {
        let Some(spec) = set.injection.clone() else {
            return;
        };
        set.carry += spec.rate * dt;
        while set.carry >= 1.0 {
            set.carry -= 1.0;
            let theta = 2.0 * std::f64::consts::PI
                * ((set.injected as f64 * GOLDEN_RATIO_CONJUGATE) % 1.0);
            set.injected += 1;
            let radial = Vec2::new(theta.cos(), theta.sin());
            let tangential = radial.perp();
            let position = radial * spec.radius;
            match self.mesh.locate_brute(position) {
                Some(host) => set.parcels.push(Parcel {
                    position,
                    velocity: tangential * spec.tangential_speed + radial * spec.radial_speed,
                    temperature: spec.temperature,
                    diameter: spec.diameter,
                    multiplicity: spec.multiplicity,
                    host_element: host,
                    alive: true,
                }),
                None => set.lost += 1,
            }
        }
    }

    /// Re-locate the end-of-step position; parcels crossing a boundary facet
    /// reflect specularly off walls or die on absorbing tags. Returns true if
    /// the parcel had to be dropped because relocation failed.
    fn resolve_walls(&self, start: &Parcel, end: &mut Parcel) -> bool {
        if let Some(host) = self.mesh.locate_point(end.host_element, end.position) {
            end.host_element = host;
            return false;
        }
        let mut from = start.position;
        let mut to = end.position;
        for _ in 0..8 {
            let Some((t, facet_idx)) = self.first_boundary_crossing(from, to) else {
                break;
            };
            let facet = &self.mesh.boundary_facets[facet_idx];
            match self.wall_behavior[&facet.tag] {
                WallBehavior::Absorb => {
                    end.alive = false;
                    return false;
                }
                WallBehavior::Reflect => {
                    let n = facet.outward_normal(&self.mesh);
                    let hit = from + (to - from) * t;
                    let remainder = to - hit;
                    let reflected = remainder - n * (2.0 * remainder.dot(n));
                    end.velocity = end.velocity - n * (2.0 * end.velocity.dot(n));
                    // Nudge inward to avoid re-hitting the same facet.
                    from = hit - n * 1e-12;
                    to = hit + reflected;
                }
            }
            if let Some(host) = self.mesh.locate_brute(to) {
                end.position = to;
                end.host_element = host;
                return false;
            }
        }
        // Relocation failed even after reflections.
        end.alive = false;
        true
    }

    /// Earliest parameter t in (0, 1] where the segment crosses a boundary facet.
    fn first_boundary_crossing(&self, from: Vec2, to: Vec2) -> Option<(f64, usize)> {
        let d = to - from;
        let mut best: Option<(f64, usize)> = None;
        for (fi, facet) in self.mesh.boundary_facets.iter().enumerate() {
            let a = self.mesh.node_coords[facet.nodes[0]];
            let b = self.mesh.node_coords[facet.nodes[1]];
            let e = b - a;
            let denom = d.cross(e);
            if denom.abs() < 1e-300 {
                continue;
            }
            let t = (a - from).cross(e) / denom;
            let s = (a - from).cross(d) / denom;
            if t > 1e-12 && t <= 1.0 + 1e-12 && (-1e-9..=1.0 + 1e-9).contains(&s) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t.min(1.0), fi));
                }
            }
        }
        best
    }

    /// Merge near-identical co-located parcels and split under-resolved ones
    /// toward the target count per populated element. Totals (droplet count,
    /// mass, momentum, energy) are preserved exactly.
    pub fn manage_parcels(&self, set: &mut ParcelSet, target_per_element: usize) {
        let mut by_element: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in set.parcels.iter().enumerate() {
            if p.alive {
                by_element.entry(p.host_element).or_default().push(i);
            }
        }

        let mut to_add: Vec<Parcel> = Vec::new();
        let bucket = |d: f64| (d / DIAMETER_FLOOR).log2().floor() as i64;

        for (&element, indices) in &by_element {
            let mut count = indices.len();
            // Merge pass: near-equal co-located pairs collapse, but never
            // below the representation target.
            if count > target_per_element {
                for i in 0..indices.len() {
                    if count <= target_per_element {
                        break;
                    }
                    let a_idx = indices[i];
                    if !set.parcels[a_idx].alive {
                        continue;
                    }
                    for &b_idx in &indices[i + 1..] {
                        if count <= target_per_element {
                            break;
                        }
                        let (a, b) = (set.parcels[a_idx], set.parcels[b_idx]);
                        if !b.alive {
                            continue;
                        }
                        let speed_scale = a.velocity.norm().max(b.velocity.norm()).max(1e-9);
                        let near = (a.velocity - b.velocity).norm() <= 0.01 * speed_scale
                            && (a.temperature - b.temperature).abs() <= 1.0
                            && bucket(a.diameter) == bucket(b.diameter);
                        if !near {
                            continue;
                        }
                        set.parcels[a_idx] = merge_pair(&a, &b, &self.props);
                        set.parcels[b_idx].alive = false;
                        count -= 1;
                    }
                }
            }
            // Split pass: keep enough parcels per populated element.
            let mut local: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| set.parcels[i].alive)
                .collect();
            while count < target_per_element {
                let Some(&big) = local
                    .iter()
                    .filter(|&&i| set.parcels[i].multiplicity >= 2.0)
                    .max_by(|&&x, &&y| {
                        set.parcels[x]
                            .multiplicity
                            .partial_cmp(&set.parcels[y].multiplicity)
                            .unwrap()
                    })
                else {
                    break;
                };
                let mut half = set.parcels[big];
                half.multiplicity /= 2.0;
                set.parcels[big].multiplicity = half.multiplicity;
                // Offset the new half toward the element barycenter so the
                // pair does not sit on the exact same point.
                let toward = self.mesh.element_barycenter(element) - half.position;
                half.position += toward * 0.3;
                to_add.push(half);
                count += 1;
                if set.parcels[big].multiplicity < 2.0 {
                    local.retain(|&i| i != big);
                }
            }
        }

        set.parcels.extend(to_add);
        set.parcels.retain(|p| p.alive);
    }
}

/// Mass/momentum/energy-weighted merge of two parcels.
fn merge_pair(a: &Parcel, b: &Parcel, props: &ParticleProps) -> Parcel {
    let ma = a.multiplicity * a.droplet_mass(props);
    let mb = b.multiplicity * b.droplet_mass(props);
    let m = ma + mb;
    let multiplicity = a.multiplicity + b.multiplicity;
    // Equivalent diameter preserving total liquid mass.
    let d3 =
        (a.multiplicity * a.diameter.powi(3) + b.multiplicity * b.diameter.powi(3)) / multiplicity;
    Parcel {
        position: (a.position * ma + b.position * mb) / m,
        velocity: (a.velocity * ma + b.velocity * mb) / m,
        temperature: (a.temperature * ma + b.temperature * mb) / m,
        diameter: d3.cbrt(),
        multiplicity,
        host_element: a.host_element,
        alive: true,
    }
}
