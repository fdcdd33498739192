//! Ground-truth plant: a 1D soil column governed by the Richards equation.
//!
//! The column is split into `n_nodes` cells of equal thickness. Cell centers
//! carry the capillary potential `h` (negative when unsaturated). Water enters
//! through the surface face (irrigation plus precipitation), leaves through
//! the bottom face by free drainage, and is extracted by root uptake from the
//! cells inside the rooting depth. Constitutive relations follow the
//! van Genuchten–Mualem model.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower end of the clamping window for `h` [m].
pub const H_MIN: f64 = -1e6;
/// Upper end of the clamping window for `h` [m].
pub const H_MAX: f64 = -1e-8;

/// van Genuchten–Mualem parameters. Defaults are those of a sandy loam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoilParams {
    /// Saturated hydraulic conductivity [m/s].
    pub ks: f64,
    pub theta_s: f64,
    pub theta_r: f64,
    /// [1/m]
    pub alpha: f64,
    pub n: f64,
    /// Informational only; the relations use `1 - 1/n`.
    pub m: f64,
}

impl Default for SoilParams {
    fn default() -> Self {
        Self {
            ks: 1.23e-5,
            theta_s: 0.41,
            theta_r: 0.065,
            alpha: 7.5,
            n: 1.89,
            m: 0.47,
        }
    }
}

impl SoilParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ks > 0.0
            && 0.0 <= self.theta_r
            && self.theta_r < self.theta_s
            && self.theta_s <= 1.0
            && self.alpha > 0.0
            && self.n > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid soil parameters: {self:?}")))
        }
    }

    #[inline]
    fn exponent_m(&self) -> f64 {
        1.0 - 1.0 / self.n
    }

    /// Effective saturation `[1 + (-alpha h)^n]^-(1 - 1/n)`; 1 for `h >= 0`.
    #[inline]
    pub(crate) fn effective_saturation(&self, h: f64) -> f64 {
        if h >= 0.0 {
            return 1.0;
        }
        let xn = (-self.alpha * h).powf(self.n);
        (-self.exponent_m() * xn.ln_1p()).exp()
    }

    #[inline]
    pub(crate) fn theta_unchecked(&self, h: f64) -> f64 {
        self.theta_r + (self.theta_s - self.theta_r) * self.effective_saturation(h)
    }

    #[inline]
    pub(crate) fn conductivity_unchecked(&self, h: f64) -> f64 {
        if h >= 0.0 {
            return self.ks;
        }
        let m = self.exponent_m();
        let xn = (-self.alpha * h).powf(self.n);
        let se = (-m * xn.ln_1p()).exp();
        // 1 - se^(1/m) = 1 / (1 + x^n), which keeps the bracket accurate near saturation
        let w = 1.0 / (1.0 + xn);
        let bracket = -(m * (-w).ln_1p()).exp_m1();
        self.ks * se.sqrt() * bracket * bracket
    }

    #[inline]
    pub(crate) fn capacity_unchecked(&self, h: f64) -> f64 {
        let x = -self.alpha * h;
        let n = self.n;
        (self.theta_s - self.theta_r)
            * self.alpha
            * n
            * self.exponent_m()
            * x.powf(n - 1.0)
            * (1.0 + x.powf(n)).powf(1.0 / n - 2.0)
    }

    /// Capillary capacity `c(h) = d theta / d h` [1/m]. Requires `h < 0`.
    pub fn capillary_capacity(&self, h: f64) -> Result<f64> {
        if !(h < 0.0) {
            return Err(Error::Domain(format!("capillary capacity needs h < 0, got {h}")));
        }
        Ok(self.capacity_unchecked(h))
    }

    /// Unsaturated hydraulic conductivity [m/s]. Requires `h <= 0`.
    pub fn hydraulic_conductivity(&self, h: f64) -> Result<f64> {
        if !(h <= 0.0) {
            return Err(Error::Domain(format!("conductivity needs h <= 0, got {h}")));
        }
        Ok(self.conductivity_unchecked(h))
    }

    /// Volumetric water content from the retention curve [m³/m³]. Requires `h <= 0`.
    pub fn water_content(&self, h: f64) -> Result<f64> {
        if !(h <= 0.0) {
            return Err(Error::Domain(format!("water content needs h <= 0, got {h}")));
        }
        Ok(self.theta_unchecked(h))
    }

    /// Inverse of the retention curve on the open interval `(theta_r, theta_s)`.
    pub fn potential_from_water_content(&self, theta: f64) -> Result<f64> {
        if !(theta > self.theta_r && theta < self.theta_s) {
            return Err(Error::Domain(format!(
                "water content {theta} outside ({}, {})",
                self.theta_r, self.theta_s
            )));
        }
        let se = (theta - self.theta_r) / (self.theta_s - self.theta_r);
        let xn = (-se.ln() / self.exponent_m()).exp_m1();
        Ok(-xn.powf(1.0 / self.n) / self.alpha)
    }

    /// Uniform potential whose gravity-drainage flux `K(h)` equals `flux`.
    pub fn potential_for_conductivity(&self, flux: f64) -> Result<f64> {
        if !(flux > 0.0 && flux < self.ks) {
            return Err(Error::Domain(format!("flux {flux} outside (0, ks)")));
        }
        // K is monotone in h; bisect on log|h|
        let (mut lo, mut hi) = ((1e-8f64).ln(), (1e6f64).ln());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.conductivity_unchecked(-mid.exp()) > flux {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(-(0.5 * (lo + hi)).exp())
    }
}

/// Feddes-type water stress reduction for root uptake.
///
/// Zero when wetter than `h1` (anaerobiosis), ramps to one at `h2`, stays
/// at one down to `h3`, then ramps back to zero at the wilting point `h4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaterStress {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
}

impl Default for WaterStress {
    fn default() -> Self {
        Self {
            h1: -0.01,
            h2: -0.05,
            h3: -4.0,
            h4: -150.0,
        }
    }
}

impl WaterStress {
    pub fn factor(&self, h: f64) -> f64 {
        if h >= self.h1 || h <= self.h4 {
            0.0
        } else if h > self.h2 {
            (self.h1 - h) / (self.h1 - self.h2)
        } else if h >= self.h3 {
            1.0
        } else {
            (h - self.h4) / (self.h3 - self.h4)
        }
    }
}

/// Layout of the discretized column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnGeometry {
    /// [m]
    pub total_depth: f64,
    pub n_nodes: usize,
    /// Rooting depth, negative downwards [m].
    pub z_r: f64,
}

impl Default for ColumnGeometry {
    fn default() -> Self {
        Self {
            total_depth: 0.5,
            n_nodes: 26,
            z_r: -0.13,
        }
    }
}

impl ColumnGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.total_depth > 0.0 && self.n_nodes >= 2 && self.z_r < 0.0 && -self.z_r <= self.total_depth {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid column geometry: {self:?}")))
        }
    }

    pub fn dz(&self) -> f64 {
        self.total_depth / self.n_nodes as f64
    }

    /// Depth of the center of node `k` below the surface [m].
    pub fn node_depth(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dz()
    }

    /// Node whose center is nearest the rooting depth.
    pub fn root_node_index(&self) -> usize {
        let target = self.z_r.abs();
        (0..self.n_nodes)
            .min_by(|&a, &b| {
                let da = (self.node_depth(a) - target).abs();
                let db = (self.node_depth(b) - target).abs();
                da.total_cmp(&db)
            })
            .unwrap_or(0)
    }

    /// Nodes whose centers lie inside the root zone.
    pub fn root_zone_len(&self) -> usize {
        (0..self.n_nodes)
            .take_while(|&k| self.node_depth(k) <= self.z_r.abs() + 1e-12)
            .count()
    }
}

/// Surface weather forcing for one sample interval.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WeatherSample {
    /// Precipitation rate [m/s].
    pub precipitation: f64,
    /// Reference evapotranspiration rate [m/s].
    pub et0: f64,
    /// Crop coefficient.
    pub kc: f64,
}

impl WeatherSample {
    pub fn dry() -> Self {
        Self {
            precipitation: 0.0,
            et0: 0.0,
            kc: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.precipitation >= 0.0 && self.et0 >= 0.0 && self.kc >= 0.0 {
            Ok(())
        } else {
            Err(Error::Domain(format!("negative weather rates: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoilColumnState {
    /// Capillary potential per node, top to bottom [m].
    pub h: Vec<f64>,
    /// Simulation time [s].
    pub t: f64,
}

impl SoilColumnState {
    pub fn uniform(h: f64, n_nodes: usize) -> Self {
        Self {
            h: vec![h; n_nodes],
            t: 0.0,
        }
    }

    fn check(&self, n_nodes: usize) -> Result<()> {
        if self.h.len() != n_nodes {
            return Err(Error::Shape(format!(
                "state has {} nodes, geometry has {n_nodes}",
                self.h.len()
            )));
        }
        if let Some(bad) = self.h.iter().find(|h| !(h.is_finite() && **h < 0.0)) {
            return Err(Error::Domain(format!("state contains h = {bad}")));
        }
        Ok(())
    }
}

/// How the conductivity at a face between two nodes is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceMean {
    #[default]
    Arithmetic,
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    /// First sub-step of every call to [`RichardsModel::step`] [s].
    pub initial_substep: f64,
    /// Sub-steps never grow beyond this [s].
    pub max_substep: f64,
    /// Halving below this aborts the step [s].
    pub min_substep: f64,
    /// Newton convergence threshold on the update of `h` [m].
    pub newton_tol: f64,
    pub max_newton_iters: usize,
    /// Double the sub-step after quickly converging Newton solves.
    pub adaptive: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            initial_substep: 60.0,
            max_substep: 900.0,
            min_substep: 1e-3,
            newton_tol: 1e-8,
            max_newton_iters: 12,
            adaptive: true,
        }
    }
}

impl IntegratorConfig {
    /// Constant sub-step of `substep` seconds, no growth.
    pub fn fixed(substep: f64) -> Self {
        Self {
            initial_substep: substep,
            max_substep: substep,
            adaptive: false,
            ..Self::default()
        }
    }
}

/// Water volumes [m] crossing the column boundaries during a step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FluxTotals {
    pub inflow: f64,
    pub drainage: f64,
    pub transpiration: f64,
}

impl FluxTotals {
    pub fn net(&self) -> f64 {
        self.inflow - self.drainage - self.transpiration
    }

    pub fn gross(&self) -> f64 {
        self.inflow + self.drainage + self.transpiration
    }

    pub fn accumulate(&mut self, other: &FluxTotals) {
        self.inflow += other.inflow;
        self.drainage += other.drainage;
        self.transpiration += other.transpiration;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    pub substeps: usize,
    pub rejected_substeps: usize,
    pub newton_iterations: usize,
    /// Nodes pushed back into the `(H_MIN, H_MAX)` window.
    pub clamps: usize,
    pub fluxes: FluxTotals,
}

/// The discretized Richards equation together with its integrator settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RichardsModel {
    pub soil: SoilParams,
    pub geometry: ColumnGeometry,
    pub stress: WaterStress,
    pub interface_mean: InterfaceMean,
    pub integrator: IntegratorConfig,
}

struct Scratch {
    theta_old: Vec<f64>,
    flux: Vec<f64>,
    sink: Vec<f64>,
    res: Vec<f64>,
    res_pert: Vec<f64>,
    h_pert: Vec<f64>,
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    delta: Vec<f64>,
    cprime: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            theta_old: vec![0.0; n],
            flux: vec![0.0; n + 1],
            sink: vec![0.0; n],
            res: vec![0.0; n],
            res_pert: vec![0.0; n],
            h_pert: vec![0.0; n],
            lower: vec![0.0; n],
            diag: vec![0.0; n],
            upper: vec![0.0; n],
            delta: vec![0.0; n],
            cprime: vec![0.0; n],
        }
    }
}

impl RichardsModel {
    pub fn new(soil: SoilParams, geometry: ColumnGeometry) -> Self {
        Self {
            soil,
            geometry,
            ..Self::default()
        }
    }

    pub fn with_integrator(mut self, integrator: IntegratorConfig) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.geometry.n_nodes
    }

    /// Uniform column holding `theta` at every node.
    pub fn state_from_water_content(&self, theta: f64) -> Result<SoilColumnState> {
        let h = self.soil.potential_from_water_content(theta)?;
        Ok(SoilColumnState::uniform(h, self.n_nodes()))
    }

    /// Uniform column in gravity-drainage equilibrium with a surface flux.
    pub fn steady_state_for_flux(&self, flux: f64) -> Result<SoilColumnState> {
        let h = self.soil.potential_for_conductivity(flux)?;
        Ok(SoilColumnState::uniform(h, self.n_nodes()))
    }

    /// Water content at the rooting depth.
    pub fn measure_output(&self, state: &SoilColumnState) -> f64 {
        let h = state.h[self.geometry.root_node_index()];
        self.soil.theta_unchecked(h.min(0.0))
    }

    /// Stored water in the column [m].
    pub fn storage(&self, state: &SoilColumnState) -> f64 {
        let dz = self.geometry.dz();
        state.h.iter().map(|&h| self.soil.theta_unchecked(h) * dz).sum()
    }

    #[inline]
    fn face_conductivity(&self, ka: f64, kb: f64) -> f64 {
        match self.interface_mean {
            InterfaceMean::Arithmetic => 0.5 * (ka + kb),
            InterfaceMean::Geometric => (ka * kb).sqrt(),
        }
    }

    /// Downward Darcy fluxes at the `n + 1` faces and the per-node sink [1/s].
    fn fluxes(&self, h: &[f64], surface_inflow: f64, weather: &WeatherSample, flux: &mut [f64], sink: &mut [f64]) {
        let n = h.len();
        let dz = self.geometry.dz();
        flux[0] = surface_inflow;
        let mut k_prev = self.soil.conductivity_unchecked(h[0]);
        for k in 1..n {
            let k_here = self.soil.conductivity_unchecked(h[k]);
            let kf = self.face_conductivity(k_prev, k_here);
            // q_down = K (dh/dz + 1) with z pointing up, so dh/dz = (h[k-1] - h[k]) / dz
            flux[k] = kf * ((h[k - 1] - h[k]) / dz + 1.0);
            k_prev = k_here;
        }
        flux[n] = k_prev;

        let demand = weather.kc * weather.et0 / self.geometry.z_r.abs();
        let roots = self.geometry.root_zone_len();
        for (k, s) in sink.iter_mut().enumerate() {
            *s = if k < roots && demand > 0.0 {
                self.stress.factor(h[k]) * demand
            } else {
                0.0
            };
        }
    }

    /// Time derivative of `h` at every node [m/s].
    pub fn rhs(&self, state: &SoilColumnState, irrigation: f64, weather: &WeatherSample) -> Result<Vec<f64>> {
        state.check(self.n_nodes())?;
        if !(irrigation >= 0.0) {
            return Err(Error::Domain(format!("irrigation must be >= 0, got {irrigation}")));
        }
        weather.validate()?;
        let n = self.n_nodes();
        let dz = self.geometry.dz();
        let mut flux = vec![0.0; n + 1];
        let mut sink = vec![0.0; n];
        self.fluxes(&state.h, irrigation + weather.precipitation, weather, &mut flux, &mut sink);
        Ok((0..n)
            .map(|k| ((flux[k] - flux[k + 1]) / dz - sink[k]) / self.soil.capacity_unchecked(state.h[k]))
            .collect())
    }

    /// Advance the column by `dt` seconds under constant forcing.
    pub fn step(&self, state: &SoilColumnState, irrigation: f64, weather: &WeatherSample, dt: f64) -> Result<SoilColumnState> {
        self.step_with_report(state, irrigation, weather, dt).map(|(s, _)| s)
    }

    /// Implicit Euler in mixed (water content) form with Newton iterations on
    /// a tridiagonal Jacobian. Sub-steps halve when Newton fails and double
    /// after easy solves when the integrator is adaptive.
    pub fn step_with_report(
        &self,
        state: &SoilColumnState,
        irrigation: f64,
        weather: &WeatherSample,
        dt: f64,
    ) -> Result<(SoilColumnState, StepReport)> {
        state.check(self.n_nodes())?;
        if !(irrigation >= 0.0) {
            return Err(Error::Domain(format!("irrigation must be >= 0, got {irrigation}")));
        }
        if !(dt >= 0.0) {
            return Err(Error::Domain(format!("dt must be >= 0, got {dt}")));
        }
        weather.validate()?;

        let mut report = StepReport::default();
        let mut h = state.h.clone();
        if dt == 0.0 {
            return Ok((state.clone(), report));
        }

        let cfg = &self.integrator;
        let n = self.n_nodes();
        let mut scratch = Scratch::new(n);
        let mut h_new = vec![0.0; n];
        let inflow = irrigation + weather.precipitation;

        let mut elapsed = 0.0;
        let mut sub = cfg.initial_substep.min(dt);
        while elapsed < dt {
            let this = sub.min(dt - elapsed);
            // avoid a sliver at the end of the interval
            let this = if dt - elapsed - this < 1e-9 * dt { dt - elapsed } else { this };
            match self.implicit_substep(&h, inflow, weather, this, &mut h_new, &mut scratch) {
                Some((iters, fluxes)) => {
                    report.substeps += 1;
                    report.newton_iterations += iters;
                    report.fluxes.accumulate(&fluxes);
                    std::mem::swap(&mut h, &mut h_new);
                    elapsed += this;
                    if cfg.adaptive && iters <= 3 {
                        sub = (sub * 2.0).min(cfg.max_substep);
                    }
                }
                None => {
                    report.rejected_substeps += 1;
                    sub = this * 0.5;
                    if sub < cfg.min_substep {
                        return Err(Error::Integration {
                            t: state.t + elapsed,
                            substep: sub,
                        });
                    }
                }
            }
        }

        for (k, v) in h.iter_mut().enumerate() {
            if *v < H_MIN || *v > H_MAX {
                let clamped = v.clamp(H_MIN, H_MAX);
                warn!("clamped h at node {k} from {v:e} to {clamped:e}");
                *v = clamped;
                report.clamps += 1;
            }
        }

        Ok((SoilColumnState { h, t: state.t + dt }, report))
    }

    fn residual(
        &self,
        h: &[f64],
        inflow: f64,
        weather: &WeatherSample,
        dt: f64,
        theta_old: &[f64],
        flux: &mut [f64],
        sink: &mut [f64],
        out: &mut [f64],
    ) {
        let dz = self.geometry.dz();
        self.fluxes(h, inflow, weather, flux, sink);
        for k in 0..h.len() {
            out[k] = self.soil.theta_unchecked(h[k]) - theta_old[k] - dt * ((flux[k] - flux[k + 1]) / dz - sink[k]);
        }
    }

    /// One implicit Euler sub-step. Returns Newton iterations and boundary
    /// fluxes on success, `None` when Newton does not converge.
    fn implicit_substep(
        &self,
        h_old: &[f64],
        inflow: f64,
        weather: &WeatherSample,
        dt: f64,
        h: &mut [f64],
        s: &mut Scratch,
    ) -> Option<(usize, FluxTotals)> {
        let n = h_old.len();
        let cfg = &self.integrator;
        for k in 0..n {
            s.theta_old[k] = self.soil.theta_unchecked(h_old[k]);
        }
        h.copy_from_slice(h_old);

        for iter in 1..=cfg.max_newton_iters {
            self.residual(h, inflow, weather, dt, &s.theta_old, &mut s.flux, &mut s.sink, &mut s.res);
            if s.res.iter().any(|r| !r.is_finite()) {
                return None;
            }

            // Tridiagonal Jacobian by finite differences, three interleaved colors.
            for color in 0..3 {
                s.h_pert.copy_from_slice(h);
                for k in (color..n).step_by(3) {
                    s.h_pert[k] = h[k] - 1e-7 * h[k].abs().max(1e-3);
                }
                self.residual(&s.h_pert, inflow, weather, dt, &s.theta_old, &mut s.flux, &mut s.sink, &mut s.res_pert);
                for k in (color..n).step_by(3) {
                    let step = s.h_pert[k] - h[k];
                    if k > 0 {
                        s.upper[k - 1] = (s.res_pert[k - 1] - s.res[k - 1]) / step;
                    }
                    s.diag[k] = (s.res_pert[k] - s.res[k]) / step;
                    if k + 1 < n {
                        s.lower[k + 1] = (s.res_pert[k + 1] - s.res[k + 1]) / step;
                    }
                }
            }

            for k in 0..n {
                s.res[k] = -s.res[k];
            }
            if !solve_tridiagonal(&s.lower, &s.diag, &s.upper, &s.res, &mut s.delta, &mut s.cprime) {
                return None;
            }

            let mut max_update: f64 = 0.0;
            for k in 0..n {
                let d = s.delta[k];
                if !d.is_finite() {
                    return None;
                }
                let mut next = h[k] + d;
                if next >= 0.0 {
                    next = 0.5 * h[k];
                }
                if next < H_MIN {
                    next = H_MIN;
                }
                max_update = max_update.max((next - h[k]).abs() / h[k].abs().max(1.0));
                h[k] = next;
            }

            if max_update <= cfg.newton_tol {
                self.fluxes(h, inflow, weather, &mut s.flux, &mut s.sink);
                let dz = self.geometry.dz();
                let fluxes = FluxTotals {
                    inflow: inflow * dt,
                    drainage: s.flux[n] * dt,
                    transpiration: s.sink.iter().sum::<f64>() * dz * dt,
                };
                return Some((iter, fluxes));
            }
        }
        None
    }
}

/// Thomas algorithm. `lower[0]` and `upper[n-1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64], x: &mut [f64], cprime: &mut [f64]) -> bool {
    let n = diag.len();
    let mut denom = diag[0];
    if denom == 0.0 {
        return false;
    }
    cprime[0] = if n > 1 { upper[0] / denom } else { 0.0 };
    x[0] = rhs[0] / denom;
    for k in 1..n {
        denom = diag[k] - lower[k] * cprime[k - 1];
        if denom == 0.0 || !denom.is_finite() {
            return false;
        }
        cprime[k] = if k + 1 < n { upper[k] / denom } else { 0.0 };
        x[k] = (rhs[k] - lower[k] * x[k - 1]) / denom;
    }
    for k in (0..n - 1).rev() {
        x[k] -= cprime[k] * x[k + 1];
    }
    true
}
