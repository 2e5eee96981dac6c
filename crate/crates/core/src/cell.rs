//! The mass-conserving cell and its sequence simulator.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchitectureSpec, InputGate, ModelParams};
use crate::autodiff::Real;
use crate::data::{water_years, ForcingSeries, ScalingStats, DEFAULT_WY_START_MONTH};
use crate::error::{Error, Result};
use crate::gates::{
    bias_correct, constrain_loss, eval_gate, eval_mr_gate, mr_equilibrium, softmax_conductivities, Channel,
    GateSpec,
};
use crate::params::ParameterVector;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    /// Number of times the first complete water year is replayed before the
    /// scored period.
    pub spinup_years: usize,
    pub wy_start_month: u32,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            spinup_years: 3,
            wy_start_month: DEFAULT_WY_START_MONTH,
        }
    }
}

/// Storage of the single cell, mm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    pub x: f64,
}

/// Everything computed in one step. `x` is the state after the step.
#[derive(Debug, Clone, Copy)]
pub struct StepRow<R> {
    pub x: R,
    pub g_out: R,
    pub g_loss: R,
    pub g_loss_con: R,
    /// Remember conductivity before mass relaxation, `1 - G^O - G^Lcon`.
    pub g_rem: R,
    pub g_mr: R,
    pub g_in: R,
    pub o: R,
    pub l: R,
    pub q_mr: R,
    pub u_corrected: R,
    pub u_in: R,
    pub bc_clamp: bool,
    pub state_clamp: bool,
}

/// Parameters resolved once per simulation.
pub(crate) struct Cell<'a, R> {
    arch: &'a ArchitectureSpec,
    p: ModelParams<R>,
    kappa_out: R,
    kappa_loss: R,
    state_stats: ScalingStats,
    pot_stats: ScalingStats,
    mr_eq: Option<(R, R)>,
}

impl<'a, R: Real> Cell<'a, R> {
    pub(crate) fn new(arch: &'a ArchitectureSpec, values: &[R]) -> Result<Self> {
        let p = ModelParams::unpack(arch, values)?;
        let kappa = softmax_conductivities(&[p.c_out, p.c_loss, p.c_rem])?;
        let state_stats = arch.stats("state");
        let pot_stats = arch.stats("pot_loss");
        let mr_eq = match (&arch.mr_gate, &p.mr) {
            (Some(spec), Some(mp)) => Some(mr_equilibrium(spec, mp.c_raw, state_stats.mean, state_stats.std)),
            _ => None,
        };
        Ok(Cell {
            arch,
            kappa_out: kappa[0],
            kappa_loss: kappa[1],
            p,
            state_stats,
            pot_stats,
            mr_eq,
        })
    }

    fn context(&self, spec: &GateSpec, x: R, x_prev: R, d: f64) -> Vec<R> {
        spec.context
            .iter()
            .map(|c| match c {
                Channel::State => (x - self.state_stats.mean) / self.state_stats.std,
                Channel::PrevState => (x_prev - self.state_stats.mean) / self.state_stats.std,
                Channel::PotLoss => R::constant(self.pot_stats.apply(d)),
            })
            .collect()
    }

    /// One explicit daily step from state `x` (previous state `x_prev`).
    pub(crate) fn step(&self, x: R, x_prev: R, u: f64, d: f64, t: usize) -> Result<StepRow<R>> {
        let arch = self.arch;
        let (u_corrected, bc_clamp) = match (&arch.bc_gate, &self.p.bc) {
            (Some(spec), Some(bp)) => bias_correct(spec, bp, u),
            _ => (R::constant(u), false),
        };
        let g_in = match (&arch.input_gate, &self.p.input) {
            (InputGate::Gated(spec), Some(ip)) => {
                eval_gate(spec, ip, R::constant(1.0), &self.context(spec, x, x_prev, d))?
            }
            _ => R::constant(1.0),
        };
        let u_in = g_in * u_corrected;
        let g_out = eval_gate(
            &arch.output_gate,
            &self.p.out,
            self.kappa_out,
            &self.context(&arch.output_gate, x, x_prev, d),
        )?;
        let g_loss = eval_gate(
            &arch.loss_gate,
            &self.p.loss,
            self.kappa_loss,
            &self.context(&arch.loss_gate, x, x_prev, d),
        )?;
        let g_loss_con = if arch.loss_gate.constrained {
            constrain_loss(g_loss, d, x)
        } else {
            g_loss
        };
        let g_rem = (g_out + g_loss_con).rsub(1.0);
        let (g_mr, mut q_mr) = match (&arch.mr_gate, &self.p.mr, self.mr_eq) {
            (Some(spec), Some(mp), Some(eq)) => {
                let scaled = (x - self.state_stats.mean) / self.state_stats.std;
                eval_mr_gate(spec, mp, eq, x, scaled, g_rem)
            }
            _ => (R::constant(0.0), R::constant(0.0)),
        };
        let o = g_out * x;
        let l = if arch.loss_gate.constrained && (g_loss * x).value() > d {
            R::constant(d)
        } else {
            g_loss_con * x
        };
        let mut x_new = x + u_in - o - l - q_mr;
        if !x_new.value().is_finite() {
            return Err(Error::fault_at_step(t, format!("state became {}", x_new.value())));
        }
        let mut state_clamp = false;
        if x_new.value() < 0.0 {
            q_mr = q_mr + x_new;
            x_new = R::constant(0.0);
            state_clamp = true;
        }
        Ok(StepRow {
            x: x_new,
            g_out,
            g_loss,
            g_loss_con,
            g_rem,
            g_mr,
            g_in,
            o,
            l,
            q_mr,
            u_corrected,
            u_in,
            bc_clamp,
            state_clamp,
        })
    }
}

/// Forcing with the spin-up replay prepended, and the number of replayed days.
pub(crate) fn spun_up_forcing(fs: &ForcingSeries, opts: &SimOptions) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    if opts.spinup_years == 0 {
        return Ok((fs.precip().to_vec(), fs.pot_loss().to_vec(), 0));
    }
    let first = water_years(fs.dates(), opts.wy_start_month)
        .into_iter()
        .find(|w| w.complete)
        .ok_or_else(|| Error::InsufficientData("spin-up needs at least one complete water year".into()))?;
    let len = first.end - first.start;
    let n = opts.spinup_years * len + fs.len();
    let mut u = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for _ in 0..opts.spinup_years {
        u.extend_from_slice(&fs.precip()[first.start..first.end]);
        d.extend_from_slice(&fs.pot_loss()[first.start..first.end]);
    }
    u.extend_from_slice(fs.precip());
    d.extend_from_slice(fs.pot_loss());
    Ok((u, d, opts.spinup_years * len))
}

/// Run the cell from `x = 0` over raw forcing; rows before `skip` are
/// simulated but dropped. Returns the state at `skip` and the kept rows.
pub(crate) fn run_cell<R: Real>(
    arch: &ArchitectureSpec,
    values: &[R],
    u: &[f64],
    d: &[f64],
    skip: usize,
) -> Result<(R, Vec<StepRow<R>>)> {
    let cell = Cell::new(arch, values)?;
    let mut x = R::constant(0.0);
    let mut x_prev = x;
    let mut x_start = x;
    let mut rows = Vec::with_capacity(u.len().saturating_sub(skip));
    for t in 0..u.len() {
        if t == skip {
            x_start = x;
        }
        let row = cell.step(x, x_prev, u[t], d[t], t)?;
        x_prev = x;
        x = row.x;
        if t >= skip {
            rows.push(row);
        }
    }
    Ok((x_start, rows))
}

/// Simulate over `fs` with spin-up, generic over the number type so the same
/// code serves plain evaluation and taped training.
pub fn simulate_generic<R: Real>(
    arch: &ArchitectureSpec,
    values: &[R],
    fs: &ForcingSeries,
    opts: &SimOptions,
) -> Result<(R, Vec<StepRow<R>>)> {
    let (u, d, skip) = spun_up_forcing(fs, opts)?;
    run_cell(arch, values, &u, &d, skip).map_err(|e| match e {
        Error::NumericFault { location, message } => Error::NumericFault {
            location: format!("{location} (spin-up length {skip})"),
            message,
        },
        other => other,
    })
}

/// Per-day record of one run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub dates: Vec<NaiveDate>,
    /// State before the first scored step.
    pub x_start: f64,
    /// State at the end of each day.
    pub x: Vec<f64>,
    pub g_out: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub g_loss_con: Vec<f64>,
    pub g_rem: Vec<f64>,
    pub g_mr: Vec<f64>,
    pub g_in: Vec<f64>,
    pub o: Vec<f64>,
    pub l: Vec<f64>,
    pub q_mr: Vec<f64>,
    pub u_corrected: Vec<f64>,
    pub u_in: Vec<f64>,
    pub bc_clamp: Vec<bool>,
    pub state_clamp: Vec<bool>,
}

impl SimulationTrace {
    pub(crate) fn from_rows<R: Real>(dates: &[NaiveDate], x_start: R, rows: &[StepRow<R>]) -> Self {
        let col = |f: fn(&StepRow<R>) -> R| rows.iter().map(|r| f(r).value()).collect::<Vec<f64>>();
        SimulationTrace {
            dates: dates.to_vec(),
            x_start: x_start.value(),
            x: col(|r| r.x),
            g_out: col(|r| r.g_out),
            g_loss: col(|r| r.g_loss),
            g_loss_con: col(|r| r.g_loss_con),
            g_rem: col(|r| r.g_rem),
            g_mr: col(|r| r.g_mr),
            g_in: col(|r| r.g_in),
            o: col(|r| r.o),
            l: col(|r| r.l),
            q_mr: col(|r| r.q_mr),
            u_corrected: col(|r| r.u_corrected),
            u_in: col(|r| r.u_in),
            bc_clamp: rows.iter().map(|r| r.bc_clamp).collect(),
            state_clamp: rows.iter().map(|r| r.state_clamp).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// State at the start of each day.
    pub fn x_before(&self) -> Vec<f64> {
        std::iter::once(self.x_start)
            .chain(self.x.iter().copied())
            .take(self.len())
            .collect()
    }

    pub fn clamp_count(&self) -> usize {
        self.state_clamp.iter().filter(|c| **c).count() + self.bc_clamp.iter().filter(|c| **c).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "date",
            "x",
            "g_out",
            "g_loss",
            "g_loss_con",
            "g_rem",
            "g_mr",
            "g_in",
            "o",
            "l",
            "q_mr",
            "u_corrected",
            "u_in",
            "bc_clamp",
            "state_clamp",
        ])?;
        for i in 0..self.len() {
            let date = self
                .dates
                .get(i)
                .map_or_else(|| i.to_string(), |d| d.format("%Y-%m-%d").to_string());
            let mut rec = vec![date];
            for col in [
                &self.x,
                &self.g_out,
                &self.g_loss,
                &self.g_loss_con,
                &self.g_rem,
                &self.g_mr,
                &self.g_in,
                &self.o,
                &self.l,
                &self.q_mr,
                &self.u_corrected,
                &self.u_in,
            ] {
                rec.push(col[i].to_string());
            }
            rec.push(u8::from(self.bc_clamp[i]).to_string());
            rec.push(u8::from(self.state_clamp[i]).to_string());
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// One step of the cell in plain arithmetic. `prev_x` is the state one step
/// earlier (used only by two-channel contexts).
pub fn step(
    arch: &ArchitectureSpec,
    params: &ParameterVector,
    state: CellState,
    u: f64,
    d: f64,
    prev_x: f64,
) -> Result<(CellState, StepRow<f64>)> {
    let cell = Cell::new(arch, params.values())?;
    let row = cell.step(state.x, prev_x, u, d, 0)?;
    Ok((CellState { x: row.x }, row))
}

/// Full simulation from `x = 0` with spin-up; the trace is aligned to `fs`.
pub fn simulate(
    arch: &ArchitectureSpec,
    params: &ParameterVector,
    fs: &ForcingSeries,
    opts: &SimOptions,
) -> Result<SimulationTrace> {
    params.check_layout(arch)?;
    let (x_start, rows) = simulate_generic(arch, params.values(), fs, opts)?;
    Ok(SimulationTrace::from_rows(fs.dates(), x_start, &rows))
}

/// Cumulative fluxes of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MassLedger {
    pub u_in: f64,
    pub o: f64,
    pub l: f64,
    pub q_mr: f64,
    pub delta_x: f64,
    /// `u_in - o - l - q_mr - delta_x`
    pub residual: f64,
}

impl MassLedger {
    /// `|residual|` relative to total input (absolute when input is below 1).
    pub fn relative_residual(&self) -> f64 {
        self.residual.abs() / self.u_in.abs().max(1.0)
    }
}

pub fn mass_ledger(trace: &SimulationTrace) -> MassLedger {
    if trace.is_empty() {
        return MassLedger::default();
    }
    let u_in: f64 = trace.u_in.iter().sum();
    let o: f64 = trace.o.iter().sum();
    let l: f64 = trace.l.iter().sum();
    let q_mr: f64 = trace.q_mr.iter().sum();
    let delta_x = trace.x[trace.len() - 1] - trace.x_start;
    MassLedger {
        u_in,
        o,
        l,
        q_mr,
        delta_x,
        residual: u_in - o - l - q_mr - delta_x,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;

    fn arch(text: &str) -> ArchitectureSpec {
        ArchitectureSpec::parse(text).unwrap()
    }

    fn forcing(u: Vec<f64>, d: Vec<f64>) -> ForcingSeries {
        let start = NaiveDate::from_ymd_opt(2000, 10, 1).unwrap();
        let dates = (0..u.len()).map(|i| start + Duration::days(i as i64)).collect();
        ForcingSeries::new(dates, u, d, None).unwrap()
    }

    /// Log-conductivities giving kappa = (k_out, k_loss, rest).
    fn logc(k_out: f64, k_loss: f64) -> [f64; 3] {
        [k_out.ln(), k_loss.ln(), (1.0 - k_out - k_loss).ln()]
    }

    #[test]
    fn constant_gates_arithmetic() {
        let a = arch("MC{O=const,L=const}");
        let c = logc(0.1, 0.05);
        let p = ParameterVector::for_arch(&a, c.to_vec()).unwrap();
        let (s, row) = step(&a, &p, CellState { x: 100.0 }, 10.0, 3.0, 100.0).unwrap();
        assert!((row.o - 10.0).abs() < 1e-12);
        assert!((row.l - 5.0).abs() < 1e-12);
        assert!((s.x - 95.0).abs() < 1e-12);
    }

    #[test]
    fn linear_reservoir_decay() {
        let a = arch("MC{O=const,L=const}");
        let k = 0.2;
        let mut c = logc(k, 0.3).to_vec();
        c[1] = -800.0; // loss conductivity underflows to zero
        let p = ParameterVector::for_arch(&a, c.clone()).unwrap();
        let k = softmax_conductivities(&c).unwrap()[0];
        let mut s = CellState { x: 50.0 };
        for t in 1..=30 {
            s = step(&a, &p, s, 0.0, 1.0, s.x).unwrap().0;
            let expect = 50.0 * (1.0 - k).powi(t);
            assert!((s.x - expect).abs() <= 1e-12 * 50.0, "t={t}");
        }
    }

    #[test]
    fn constrained_loss_binds() {
        let a = arch("MC{O=const,L=sig:con}");
        // kappa_L = kappa_R = 1/2 and the sigmoid saturated, so G^L = 0.5
        let mut p = ParameterVector::zeros(&a);
        p.set("out.c", -50.0).unwrap();
        p.set("loss.a", 50.0).unwrap();
        let (_, row) = step(&a, &p, CellState { x: 10.0 }, 0.0, 2.0, 10.0).unwrap();
        assert!((row.g_loss - 0.5).abs() < 1e-12);
        assert!((row.l - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_spinup_single_step_matches_step() {
        let a = arch("MC{O=sig,L=sig}");
        let p = ParameterVector::for_arch(&a, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7]).unwrap();
        let fs = forcing(vec![4.0], vec![2.0]);
        let tr = simulate(&a, &p, &fs, &SimOptions { spinup_years: 0, wy_start_month: 10 }).unwrap();
        let (s, row) = step(&a, &p, CellState::default(), 4.0, 2.0, 0.0).unwrap();
        assert_eq!(tr.x, vec![s.x]);
        assert_eq!(tr.o, vec![row.o]);
    }

    #[test]
    fn ledger_of_empty_trace_is_zero() {
        assert_eq!(mass_ledger(&SimulationTrace::default()), MassLedger::default());
    }

    #[test]
    fn spinup_requires_complete_year() {
        let a = arch("MC{O=const,L=const}");
        let p = ParameterVector::zeros(&a);
        let fs = forcing(vec![1.0; 30], vec![1.0; 30]);
        assert!(matches!(
            simulate(&a, &p, &fs, &SimOptions::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn closed_output_gate_gives_zero_output() {
        let a = arch("MC{O=sig,L=sig}");
        let mut p = ParameterVector::zeros(&a);
        p.set("out.a", -1e4).unwrap();
        let fs = forcing(vec![5.0; 365], vec![2.0; 365]);
        let tr = simulate(&a, &p, &fs, &SimOptions::default()).unwrap();
        assert!(tr.o.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn trace_csv_has_named_columns() {
        let a = arch("MC{O=const,L=const}");
        let p = ParameterVector::zeros(&a);
        let fs = forcing(vec![1.0, 2.0], vec![1.0, 1.0]);
        let tr = simulate(&a, &p, &fs, &SimOptions { spinup_years: 0, wy_start_month: 10 }).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "date,x,g_out,g_loss,g_loss_con,g_rem,g_mr,g_in,o,l,q_mr,u_corrected,u_in,bc_clamp,state_clamp"
        );
        assert!(lines.next().unwrap().starts_with("2000-10-01,"));
    }
}
