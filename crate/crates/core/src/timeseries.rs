//! Time verification, uniform binning and in-window imputation.
//!
//! Bin `k` covers `[start + k·res, start + (k+1)·res)`; the last bin is also
//! closed on the right so an event exactly at the window end is kept. All
//! values written into a sample's grid derive from events inside its window.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::ColumnKind;
use crate::ingest::{AdmissionRow, EventKey, HadmId, IcuStayRow, MedicationRow, StayId};
use crate::time::{Timestamp, SECONDS_PER_HOUR};

/// An interval is usable when it does not run backwards.
pub fn interval_valid(start: Timestamp, end: Timestamp) -> bool {
    start <= end
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct VerificationReport {
    pub admissions_excluded: usize,
    pub stays_excluded: usize,
    pub meds_start_after_stop: usize,
    pub meds_start_after_discharge: usize,
    pub meds_stop_before_admit: usize,
    pub meds_without_valid_stay: usize,
    pub meds_start_clamped: usize,
    pub meds_stop_clamped: usize,
}

impl VerificationReport {
    pub fn merge(&mut self, o: &VerificationReport) {
        self.admissions_excluded += o.admissions_excluded;
        self.stays_excluded += o.stays_excluded;
        self.meds_start_after_stop += o.meds_start_after_stop;
        self.meds_start_after_discharge += o.meds_start_after_discharge;
        self.meds_stop_before_admit += o.meds_stop_before_admit;
        self.meds_without_valid_stay += o.meds_without_valid_stay;
        self.meds_start_clamped += o.meds_start_clamped;
        self.meds_stop_clamped += o.meds_stop_clamped;
    }
}

/// Checks one medication interval against its stay bounds.
///
/// Returns the (possibly clamped) interval, or `None` when the record is
/// excluded. Each action is tallied in `report`.
pub fn verify_medication(
    start: Timestamp,
    stop: Timestamp,
    admit: Timestamp,
    discharge: Timestamp,
    report: &mut VerificationReport,
) -> Option<(Timestamp, Timestamp)> {
    if start > stop {
        report.meds_start_after_stop += 1;
        return None;
    }
    if start > discharge {
        report.meds_start_after_discharge += 1;
        return None;
    }
    if stop < admit {
        // given entirely before the stay; nothing continues into it
        report.meds_stop_before_admit += 1;
        return None;
    }
    let mut s = start;
    let mut e = stop;
    if s < admit {
        s = admit;
        report.meds_start_clamped += 1;
    }
    if e > discharge {
        e = discharge;
        report.meds_stop_clamped += 1;
    }
    Some((s, e))
}

#[derive(Debug, Clone, Default)]
pub struct VerifiedRecords {
    pub admissions: Vec<AdmissionRow>,
    pub stays: Vec<IcuStayRow>,
    pub medications: Vec<MedicationRow>,
    pub report: VerificationReport,
}

/// Drops admissions and stays that end before they start, and verifies
/// medication intervals against the bounds of the admission or stay they
/// belong to. Events of a dropped admission or stay are dropped with it.
pub fn verify_times(
    admissions: &[AdmissionRow],
    stays: &[IcuStayRow],
    medications: &[MedicationRow],
) -> VerifiedRecords {
    let mut report = VerificationReport::default();
    let mut adm_bounds: HashMap<HadmId, (Timestamp, Timestamp)> = HashMap::new();
    let mut kept_adm = Vec::with_capacity(admissions.len());
    for a in admissions {
        if interval_valid(a.admit_time, a.discharge_time) {
            adm_bounds.insert(a.hadm_id, (a.admit_time, a.discharge_time));
            kept_adm.push(a.clone());
        } else {
            report.admissions_excluded += 1;
        }
    }
    let mut stay_bounds: HashMap<StayId, (Timestamp, Timestamp)> = HashMap::new();
    let mut kept_stays = Vec::with_capacity(stays.len());
    for s in stays {
        if interval_valid(s.in_time, s.out_time) && adm_bounds.contains_key(&s.hadm_id) {
            stay_bounds.insert(s.stay_id, (s.in_time, s.out_time));
            kept_stays.push(s.clone());
        } else {
            report.stays_excluded += 1;
        }
    }
    let mut kept_meds = Vec::with_capacity(medications.len());
    for m in medications {
        let bounds = match m.key {
            EventKey::Admission(id) => adm_bounds.get(&id),
            EventKey::Stay(id) => stay_bounds.get(&id),
        };
        let Some(&(lo, hi)) = bounds else {
            report.meds_without_valid_stay += 1;
            continue;
        };
        if let Some((s, e)) = verify_medication(m.start_time, m.stop_time, lo, hi, &mut report) {
            let mut m = m.clone();
            m.start_time = s;
            m.stop_time = e;
            kept_meds.push(m);
        }
    }
    VerifiedRecords {
        admissions: kept_adm,
        stays: kept_stays,
        medications: kept_meds,
        report,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("timeseries.resolution_hours must be positive and a whole number of seconds")]
    Resolution,
    #[error("window of {window_hours} h is not a multiple of the {resolution_hours} h resolution")]
    Uneven { window_hours: u32, resolution_hours: f64 },
}

/// Uniform time grid over an observation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    resolution_secs: i64,
    window_secs: i64,
}

impl GridSpec {
    pub fn new(resolution_hours: f64, window_hours: u32) -> Result<Self, GridError> {
        let exact = resolution_hours * SECONDS_PER_HOUR as f64;
        let resolution_secs = exact.round() as i64;
        if !exact.is_finite() || resolution_secs <= 0 || (exact - resolution_secs as f64).abs() > 1e-6 {
            return Err(GridError::Resolution);
        }
        let window_secs = i64::from(window_hours) * SECONDS_PER_HOUR;
        if window_secs == 0 || window_secs % resolution_secs != 0 {
            return Err(GridError::Uneven {
                window_hours,
                resolution_hours,
            });
        }
        Ok(GridSpec {
            resolution_secs,
            window_secs,
        })
    }

    pub fn n_bins(&self) -> usize {
        (self.window_secs / self.resolution_secs) as usize
    }

    pub fn resolution_secs(&self) -> i64 {
        self.resolution_secs
    }

    pub fn window_secs(&self) -> i64 {
        self.window_secs
    }

    /// Bin holding an offset from the window start, if inside the window.
    pub fn bin_of(&self, offset: i64) -> Option<usize> {
        if offset < 0 || offset > self.window_secs {
            return None;
        }
        Some(((offset / self.resolution_secs) as usize).min(self.n_bins() - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Mean,
    Last,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Imputation {
    ForwardFillMean,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementPoint {
    pub col: usize,
    pub time: Timestamp,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseInterval {
    pub col: usize,
    pub start: Timestamp,
    pub stop: Timestamp,
    /// A missing dose still marks presence but contributes 0.
    pub dose: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcedurePoint {
    pub col: usize,
    pub time: Timestamp,
}

/// Events of one sample, already mapped to registry columns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleEvents {
    pub measurements: Vec<MeasurementPoint>,
    pub medications: Vec<DoseInterval>,
    pub procedures: Vec<ProcedurePoint>,
}

/// Row-major `(n_bins × n_cols)` value grid with its presence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedGrid {
    pub n_bins: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub presence: Vec<u8>,
}

impl BinnedGrid {
    pub fn zeros(n_bins: usize, n_cols: usize) -> Self {
        BinnedGrid {
            n_bins,
            n_cols,
            values: vec![0.0; n_bins * n_cols],
            presence: vec![0; n_bins * n_cols],
        }
    }

    pub fn value(&self, bin: usize, col: usize) -> f64 {
        self.values[bin * self.n_cols + col]
    }

    pub fn present(&self, bin: usize, col: usize) -> bool {
        self.presence[bin * self.n_cols + col] == 1
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.value(b, col)).collect()
    }
}

fn total_order_key(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Places a sample's in-window events on the grid. Events outside
/// `[window_start, window_start + window]` are ignored. The result does not
/// depend on the order of `events`.
pub fn bin_events(
    events: &SampleEvents,
    window_start: Timestamp,
    grid: &GridSpec,
    n_cols: usize,
    aggregation: Aggregation,
) -> BinnedGrid {
    let n_bins = grid.n_bins();
    let mut out = BinnedGrid::zeros(n_bins, n_cols);
    let cell = |bin: usize, col: usize| bin * n_cols + col;

    let mut points: Vec<(usize, usize, Timestamp, f64)> = events
        .measurements
        .iter()
        .filter_map(|m| {
            grid.bin_of(m.time.seconds_since(window_start))
                .map(|b| (cell(b, m.col), b, m.time, m.value))
        })
        .collect();
    points.sort_by_key(|p| (p.0, p.2, total_order_key(p.3)));
    let mut i = 0;
    while i < points.len() {
        let idx = points[i].0;
        let mut j = i;
        while j < points.len() && points[j].0 == idx {
            j += 1;
        }
        let run = &points[i..j];
        let v = match aggregation {
            Aggregation::Mean => run.iter().map(|p| p.3).sum::<f64>() / run.len() as f64,
            // sorted by time then value: the final element is the latest
            Aggregation::Last => run[run.len() - 1].3,
            Aggregation::Max => run.iter().map(|p| p.3).fold(f64::NEG_INFINITY, f64::max),
        };
        out.values[idx] = v;
        out.presence[idx] = 1;
        i = j;
    }

    let mut meds: Vec<&DoseInterval> = events.medications.iter().collect();
    meds.sort_by(|a, b| {
        (a.col, a.start, a.stop, a.dose.map(total_order_key)).cmp(&(
            b.col,
            b.start,
            b.stop,
            b.dose.map(total_order_key),
        ))
    });
    for m in meds {
        let s = m.start.seconds_since(window_start).max(0);
        let e = m.stop.seconds_since(window_start).min(grid.window_secs());
        if m.stop < window_start || s > grid.window_secs() || e < s {
            continue;
        }
        let first = grid.bin_of(s).expect("clipped start in window");
        let last = if e > s {
            // half-open: an interval ending on a bin edge does not touch the next bin
            let res = grid.resolution_secs();
            (((e + res - 1) / res - 1) as usize).clamp(first, n_bins - 1)
        } else {
            first
        };
        for b in first..=last {
            let idx = cell(b, m.col);
            out.values[idx] += m.dose.unwrap_or(0.0);
            out.presence[idx] = 1;
        }
    }

    for p in &events.procedures {
        if let Some(b) = grid.bin_of(p.time.seconds_since(window_start)) {
            let idx = cell(b, p.col);
            out.values[idx] = 1.0;
            out.presence[idx] = 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImputeTally {
    /// Measurement columns with no observation inside the window.
    pub unobserved_features: usize,
    pub imputed_cells: usize,
}

/// Fills missing measurement bins in place. Medication and procedure columns
/// are left as binned.
///
/// `ForwardFillMean` carries the last observed bin forward; bins before the
/// first observation take the mean of the sample's observed bins. Columns
/// without any observation stay 0. `None` leaves missing bins at 0.
pub fn impute(grid: &mut BinnedGrid, kinds: &[ColumnKind], mode: Imputation) -> ImputeTally {
    let mut tally = ImputeTally::default();
    for (col, kind) in kinds.iter().enumerate() {
        if *kind != ColumnKind::Measurement {
            continue;
        }
        let observed: Vec<f64> = (0..grid.n_bins)
            .filter(|&b| grid.present(b, col))
            .map(|b| grid.value(b, col))
            .collect();
        if observed.is_empty() {
            tally.unobserved_features += 1;
            continue;
        }
        if mode == Imputation::None {
            continue;
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let mut carry: Option<f64> = None;
        for b in 0..grid.n_bins {
            let idx = b * grid.n_cols + col;
            if grid.presence[idx] == 1 {
                carry = Some(grid.values[idx]);
            } else {
                grid.values[idx] = carry.unwrap_or(mean);
                tally.imputed_cells += 1;
            }
        }
    }
    tally
}

/// One sample's regularized tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTensor {
    pub n_bins: usize,
    pub n_dynamic: usize,
    /// Row-major `(n_bins × n_dynamic)`.
    pub dynamic: Vec<f64>,
    pub presence: Vec<u8>,
    /// Diagnosis-root indicators.
    pub static_features: Vec<u8>,
    /// Age, gender, ethnicity and insurance encodings.
    pub demographic: Vec<f64>,
}

impl SampleTensor {
    pub fn dynamic_row(&self, bin: usize) -> &[f64] {
        &self.dynamic[bin * self.n_dynamic..(bin + 1) * self.n_dynamic]
    }
}

/// Bins and imputes one sample's dynamic features.
pub fn build_dynamic(
    events: &SampleEvents,
    window_start: Timestamp,
    grid: &GridSpec,
    kinds: &[ColumnKind],
    aggregation: Aggregation,
    imputation: Imputation,
) -> (BinnedGrid, ImputeTally) {
    let mut g = bin_events(events, window_start, grid, kinds.len(), aggregation);
    let tally = impute(&mut g, kinds, imputation);
    (g, tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t0() -> Timestamp {
        Timestamp::from_ymd_hms(2150, 1, 1, 0, 0, 0).unwrap()
    }

    fn at(hours: f64) -> Timestamp {
        t0().plus_seconds((hours * 3600.0) as i64)
    }

    // Brute force: scan every bin and collect events whose offset falls in it.
    fn oracle_mean_bins(points: &[(f64, f64)], res_h: f64, n_bins: usize) -> Vec<Option<f64>> {
        (0..n_bins)
            .map(|k| {
                let lo = k as f64 * res_h;
                let hi = lo + res_h;
                let last = k == n_bins - 1;
                let vals: Vec<f64> = points
                    .iter()
                    .filter(|(t, _)| *t >= lo && (*t < hi || (last && *t <= hi)))
                    .map(|p| p.1)
                    .collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect()
    }

    #[test]
    fn lab_values_average_within_bin() {
        let grid = GridSpec::new(2.0, 6).unwrap();
        let pts = [(0.5, 5.0), (1.5, 7.0)];
        let ev = SampleEvents {
            measurements: pts
                .iter()
                .map(|&(h, v)| MeasurementPoint {
                    col: 0,
                    time: at(h),
                    value: v,
                })
                .collect(),
            ..Default::default()
        };
        let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
        let oracle = oracle_mean_bins(&pts, 2.0, 3);
        assert_eq!(oracle[0], Some(6.0));
        assert_eq!(g.value(0, 0), 6.0);
        assert!(g.present(0, 0));
        assert!(!g.present(1, 0));
    }

    #[test]
    fn binning_matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n_bins = rng.gen_range(1..12);
            let grid = GridSpec::new(2.0, 2 * n_bins as u32).unwrap();
            let pts: Vec<(f64, f64)> = (0..rng.gen_range(0..30))
                .map(|_| {
                    // whole minutes so float offsets are exact
                    let minutes = rng.gen_range(-60..(n_bins as i64 * 120 + 60));
                    (minutes as f64 / 60.0, f64::from(rng.gen_range(-50..50)))
                })
                .collect();
            let ev = SampleEvents {
                measurements: pts
                    .iter()
                    .map(|&(h, v)| MeasurementPoint {
                        col: 0,
                        time: t0().plus_seconds((h * 3600.0).round() as i64),
                        value: v,
                    })
                    .collect(),
                ..Default::default()
            };
            let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
            let oracle = oracle_mean_bins(&pts, 2.0, n_bins);
            for (k, want) in oracle.iter().enumerate() {
                match want {
                    Some(v) => {
                        assert!(g.present(k, 0));
                        assert!((g.value(k, 0) - v).abs() < 1e-9);
                    }
                    None => assert!(!g.present(k, 0)),
                }
            }
        }
    }

    #[test]
    fn medication_dose_fills_overlapping_bins() {
        let grid = GridSpec::new(2.0, 6).unwrap();
        let ev = SampleEvents {
            medications: vec![DoseInterval {
                col: 0,
                start: at(1.0),
                stop: at(5.0),
                dose: Some(10.0),
            }],
            ..Default::default()
        };
        let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
        assert_eq!(g.column(0), vec![10.0, 10.0, 10.0]);
    }

    #[test]
    fn medication_ending_on_bin_edge_and_overlap_sum() {
        let grid = GridSpec::new(2.0, 6).unwrap();
        let ev = SampleEvents {
            medications: vec![
                DoseInterval {
                    col: 0,
                    start: at(1.0),
                    stop: at(4.0),
                    dose: Some(10.0),
                },
                DoseInterval {
                    col: 0,
                    start: at(3.0),
                    stop: at(3.5),
                    dose: Some(2.5),
                },
                DoseInterval {
                    col: 0,
                    start: at(-5.0),
                    stop: at(-1.0),
                    dose: Some(99.0),
                },
            ],
            ..Default::default()
        };
        let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
        assert_eq!(g.column(0), vec![10.0, 12.5, 0.0]);
        assert_eq!(g.presence, vec![1, 1, 0]);
    }

    #[test]
    fn procedure_marks_its_bin() {
        let grid = GridSpec::new(2.0, 6).unwrap();
        let ev = SampleEvents {
            procedures: vec![ProcedurePoint { col: 0, time: at(3.0) }],
            ..Default::default()
        };
        let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
        assert_eq!(g.column(0), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn event_at_window_end_lands_in_last_bin() {
        let grid = GridSpec::new(2.0, 6).unwrap();
        let ev = SampleEvents {
            procedures: vec![
                ProcedurePoint { col: 0, time: at(6.0) },
                ProcedurePoint { col: 0, time: at(6.5) },
            ],
            ..Default::default()
        };
        let g = bin_events(&ev, t0(), &grid, 1, Aggregation::Mean);
        assert_eq!(g.column(0), vec![0.0, 0.0, 1.0]);
    }

    fn grid_from(bins: &[Option<f64>]) -> BinnedGrid {
        let mut g = BinnedGrid::zeros(bins.len(), 1);
        for (k, v) in bins.iter().enumerate() {
            if let Some(v) = v {
                g.values[k] = *v;
                g.presence[k] = 1;
            }
        }
        g
    }

    #[test]
    fn forward_fill_examples() {
        let kinds = [ColumnKind::Measurement];
        let mut g = grid_from(&[Some(5.0), None, None, Some(7.0)]);
        impute(&mut g, &kinds, Imputation::ForwardFillMean);
        assert_eq!(g.column(0), vec![5.0, 5.0, 5.0, 7.0]);

        let mut g = grid_from(&[None, Some(4.0), Some(6.0)]);
        impute(&mut g, &kinds, Imputation::ForwardFillMean);
        assert_eq!(g.column(0), vec![5.0, 4.0, 6.0]);

        let mut g = grid_from(&[Some(5.0), None]);
        impute(&mut g, &kinds, Imputation::None);
        assert_eq!(g.column(0), vec![5.0, 0.0]);

        let mut g = grid_from(&[None, None]);
        let tally = impute(&mut g, &kinds, Imputation::ForwardFillMean);
        assert_eq!(g.column(0), vec![0.0, 0.0]);
        assert_eq!(g.presence, vec![0, 0]);
        assert_eq!(tally.unobserved_features, 1);
    }

    #[test]
    fn medications_are_never_imputed() {
        let mut g = grid_from(&[Some(3.0), None, None]);
        impute(&mut g, &[ColumnKind::Medication], Imputation::ForwardFillMean);
        assert_eq!(g.column(0), vec![3.0, 0.0, 0.0]);
    }

    #[test]
    fn grid_spec_validation() {
        assert_eq!(GridSpec::new(2.0, 48).unwrap().n_bins(), 24);
        assert_eq!(GridSpec::new(0.5, 3).unwrap().n_bins(), 6);
        assert!(GridSpec::new(5.0, 48).is_err());
        assert!(GridSpec::new(0.0, 48).is_err());
        assert!(GridSpec::new(-1.0, 48).is_err());
    }

    #[test]
    fn medication_verification_rules() {
        let admit = at(0.0);
        let disch = at(100.0);
        let mut r = VerificationReport::default();
        assert_eq!(
            verify_medication(at(-2.0), at(10.0), admit, disch, &mut r),
            Some((admit, at(10.0)))
        );
        assert_eq!(r.meds_start_clamped, 1);
        assert_eq!(verify_medication(at(10.0), at(5.0), admit, disch, &mut r), None);
        assert_eq!(r.meds_start_after_stop, 1);
        assert_eq!(verify_medication(at(101.0), at(105.0), admit, disch, &mut r), None);
        assert_eq!(r.meds_start_after_discharge, 1);
        assert_eq!(
            verify_medication(at(90.0), at(120.0), admit, disch, &mut r),
            Some((at(90.0), disch))
        );
        assert_eq!(r.meds_stop_clamped, 1);
        assert_eq!(verify_medication(at(-9.0), at(-3.0), admit, disch, &mut r), None);
        assert_eq!(r.meds_stop_before_admit, 1);
    }

    #[test]
    fn inverted_admission_drops_its_medications() {
        let adm = AdmissionRow {
            hadm_id: 1,
            subject_id: 1,
            admit_time: at(10.0),
            discharge_time: at(0.0),
            death_time: None,
            hospital_expire_flag: false,
            insurance: "Other".into(),
            ethnicity: "WHITE".into(),
        };
        let med = MedicationRow {
            key: EventKey::Admission(1),
            drug_name: "x".into(),
            ndc: None,
            start_time: at(1.0),
            stop_time: at(2.0),
            dose: Some(1.0),
            dose_unit: None,
        };
        let v = verify_times(&[adm], &[], &[med]);
        assert!(v.admissions.is_empty());
        assert!(v.medications.is_empty());
        assert_eq!(v.report.admissions_excluded, 1);
        assert_eq!(v.report.meds_without_valid_stay, 1);
    }
}
