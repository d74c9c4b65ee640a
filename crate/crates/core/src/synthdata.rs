//! Synthetic patients with planted, time-varying networks.
//!
//! Region layout in the left half of the index range: two language sites of
//! equal size, then the finger, foot and tongue communities. Each patient
//! hosts language at one site and a distractor clique at the other. The
//! distractor synchronizes with the motor schedule, so averaged over the scan
//! both sites look alike and only the timing tells them apart. Bilateral
//! patients keep the whole left language community and add right-half
//! homologs of its second half.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectivity::{
    build_dynamic_connectivity, build_static_connectivity, extract_windows, TimeSeries, TumorMask,
    WindowConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::pearson;
use crate::loss::LabelTensor;
use crate::model::{ModelState, Task, BACKGROUND, ELOQUENT, TUMOR};
use crate::seeding::derive_seed;
use crate::training::Example;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub regions: usize,
    pub frames: usize,
    pub patients: usize,
    /// Language, finger, foot, tongue.
    pub task_presence: [f64; 4],
    /// Language, finger, foot, tongue.
    pub community_sizes: [usize; 4],
    /// Plant a motor-locked clique at the unused language site.
    pub distractor: bool,
    pub bilateral_fraction: f64,
    /// Inclusive range of contiguous tumor sizes.
    pub tumor_size: [usize; 2],
    /// Inclusive range of active-interval lengths in frames.
    pub block_frames: [usize; 2],
    pub high_correlation: f64,
    pub low_correlation: f64,
    /// Standard deviation of extra white noise on every region.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            regions: 90,
            frames: 150,
            patients: 56,
            task_presence: [1.0, 0.64, 0.30, 0.70],
            community_sizes: [8, 5, 5, 5],
            distractor: true,
            bilateral_fraction: 5.0 / 56.0,
            tumor_size: [3, 8],
            block_frames: [40, 60],
            high_correlation: 0.7,
            low_correlation: 0.1,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.regions < 4 || self.regions % 2 != 0 {
            return bad(format!("regions must be even and at least 4, got {}", self.regions));
        }
        if self.patients == 0 {
            return bad("patients must be at least 1".into());
        }
        for (task, p) in Task::ALL.iter().zip(self.task_presence) {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("presence probability for {task} is {p}"));
            }
        }
        if self.task_presence.iter().all(|&p| p == 0.0) {
            return bad("at least one task needs a positive presence probability".into());
        }
        if !(0.0..=1.0).contains(&self.bilateral_fraction) {
            return bad(format!("bilateral_fraction {} outside [0, 1]", self.bilateral_fraction));
        }
        if self.community_sizes.iter().any(|&s| s < 2) {
            return bad("every community needs at least 2 regions".into());
        }
        for (name, r) in [("high", self.high_correlation), ("low", self.low_correlation)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} correlation {r} outside [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        let [lo, hi] = self.block_frames;
        if lo == 0 || lo > hi {
            return bad(format!("invalid active-interval range {lo}..={hi}"));
        }
        let [tlo, thi] = self.tumor_size;
        if tlo > thi {
            return bad(format!("invalid tumor size range {tlo}..={thi}"));
        }
        let half = self.regions / 2;
        let [lang, finger, foot, tongue] = self.community_sizes;
        let left = 2 * lang + finger + foot + tongue;
        if left > half {
            return bad(format!(
                "communities need {left} regions but a hemisphere has {half}"
            ));
        }
        // worst case: a bilateral patient also occupies right-half indices
        let free = self.regions - left - lang / 2;
        if thi > free {
            return bad(format!("tumors up to {thi} regions do not fit in {free} free regions"));
        }
        Ok(())
    }

    /// Fixed motor communities, in task order finger, foot, tongue.
    pub fn motor_sites(&self) -> [Vec<usize>; 3] {
        let [lang, finger, foot, tongue] = self.community_sizes;
        let start = 2 * lang;
        [
            (start..start + finger).collect(),
            (start + finger..start + finger + foot).collect(),
            (start + finger + foot..start + finger + foot + tongue).collect(),
        ]
    }

    /// The two candidate language sites.
    pub fn language_sites(&self) -> [Vec<usize>; 2] {
        let lang = self.community_sizes[0];
        [(0..lang).collect(), (lang..2 * lang).collect()]
    }

    /// Patients that carry a bilateral language plant.
    pub fn bilateral_count(&self) -> usize {
        (self.bilateral_fraction * self.patients as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hemisphere {
    Left,
    Right,
}

/// Left for the first half of the index range.
pub fn hemisphere(region: usize, regions: usize) -> Hemisphere {
    if region < regions / 2 {
        Hemisphere::Left
    } else {
        Hemisphere::Right
    }
}

/// Half-open frame intervals during which each system is synchronous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub language: Vec<(usize, usize)>,
    pub motor: Vec<(usize, usize)>,
}

impl Schedule {
    fn active(intervals: &[(usize, usize)], frame: usize) -> bool {
        intervals.iter().any(|&(a, b)| (a..b).contains(&frame))
    }

    pub fn language_active(&self, frame: usize) -> bool {
        Self::active(&self.language, frame)
    }

    pub fn motor_active(&self, frame: usize) -> bool {
        Self::active(&self.motor, frame)
    }

    /// Fraction of each window's frames during which language and motor are
    /// active.
    pub fn window_activity(&self, frames: usize, cfg: &WindowConfig) -> (Vec<f64>, Vec<f64>) {
        let count = cfg.window_count(frames);
        let frac = |f: &dyn Fn(usize) -> bool, t: usize| {
            let start = t * cfg.stride;
            (start..start + cfg.window_length).filter(|&k| f(k)).count() as f64
                / cfg.window_length as f64
        };
        let lang = (0..count).map(|t| frac(&|k| self.language_active(k), t)).collect();
        let motor = (0..count).map(|t| frac(&|k| self.motor_active(k), t)).collect();
        (lang, motor)
    }
}

/// Member regions of every planted community.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Communities {
    pub language: Vec<usize>,
    pub finger: Vec<usize>,
    pub foot: Vec<usize>,
    pub tongue: Vec<usize>,
    pub distractor: Vec<usize>,
}

impl Communities {
    /// The planted eloquent regions of a task.
    pub fn for_task(&self, task: Task) -> &[usize] {
        match task {
            Task::Language => &self.language,
            Task::Finger => &self.finger,
            Task::Foot => &self.foot,
            Task::Tongue => &self.tongue,
        }
    }

    /// Communities with the schedule that drives them.
    fn driven(&self) -> [(&[usize], bool); 5] {
        [
            (&self.language, true),
            (&self.finger, false),
            (&self.foot, false),
            (&self.tongue, false),
            (&self.distractor, false),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPatient {
    pub id: String,
    pub series: TimeSeries,
    pub mask: TumorMask,
    pub labels: LabelTensor,
    pub bilateral: bool,
    pub communities: Communities,
    pub schedule: Schedule,
}

impl SynthPatient {
    pub fn regions(&self) -> usize {
        self.series.regions()
    }

    pub fn hemisphere(&self, region: usize) -> Hemisphere {
        hemisphere(region, self.regions())
    }

    /// Model input for a variant: one matrix per window, or a single static one.
    pub fn example(&self, wcfg: &WindowConfig, state: &ModelState) -> Result<Example> {
        let dc = if state.config().variant.is_dynamic() {
            build_dynamic_connectivity(&self.series, wcfg, &self.mask)?
        } else {
            build_static_connectivity(&self.series, wcfg, &self.mask)?
        };
        Ok(Example {
            id: self.id.clone(),
            input: state.check_input(&dc)?,
            labels: self.labels.clone(),
        })
    }

    /// Mean within-community correlation per window for every task network.
    pub fn synchrony(&self, task: Task, wcfg: &WindowConfig) -> Result<SynchronyTrace> {
        oracle_window_synchrony(&self.series, self.communities.for_task(task), wcfg)
    }
}

/// Frame schedule that alternates language and motor blocks with no overlap.
fn sample_schedule(cfg: &SynthConfig, rng: &mut impl Rng) -> Schedule {
    let [lo, hi] = cfg.block_frames;
    let mut schedule = Schedule {
        language: Vec::new(),
        motor: Vec::new(),
    };
    let mut language = rng.random_bool(0.5);
    // the first block starts partway through so the phase varies
    let mut start = 0;
    let mut end = rng.random_range(1..=hi);
    while start < cfg.frames {
        let stop = end.min(cfg.frames);
        if language {
            schedule.language.push((start, stop));
        } else {
            schedule.motor.push((start, stop));
        }
        language = !language;
        start = stop;
        end = start + rng.random_range(lo..=hi);
    }
    schedule
}

/// One patient. Task presence and the planted layout are drawn from `rng`.
pub fn generate_patient(
    cfg: &SynthConfig,
    id: &str,
    bilateral: bool,
    rng: &mut impl Rng,
) -> Result<SynthPatient> {
    cfg.validate()?;
    let (n, half) = (cfg.regions, cfg.regions / 2);
    let mut present: [bool; 4] = std::array::from_fn(|k| rng.random_bool(cfg.task_presence[k]));
    if !present.iter().any(|&p| p) {
        let best = (0..4)
            .max_by(|&a, &b| cfg.task_presence[a].total_cmp(&cfg.task_presence[b]).then(b.cmp(&a)))
            .expect("four tasks");
        present[best] = true;
    }

    let [site_a, site_b] = cfg.language_sites();
    let (lang_site, other) = if rng.random_bool(0.5) {
        (site_a, site_b)
    } else {
        (site_b, site_a)
    };
    let language: Vec<usize> = if bilateral {
        let keep = lang_site.len().div_ceil(2);
        let homologs: Vec<usize> = lang_site[keep..].iter().map(|&r| r + half).collect();
        lang_site.into_iter().chain(homologs).collect()
    } else {
        lang_site
    };
    let [finger, foot, tongue] = cfg.motor_sites();
    let communities = Communities {
        language,
        finger,
        foot,
        tongue,
        distractor: if cfg.distractor { other } else { Vec::new() },
    };

    let mut occupied = vec![false; n];
    for (members, _) in communities.driven() {
        for &r in members {
            occupied[r] = true;
        }
    }
    // unused language-site indices stay free only when nothing is planted there
    let free: Vec<usize> = (0..n).filter(|&r| !occupied[r]).collect();
    let size = rng.random_range(cfg.tumor_size[0]..=cfg.tumor_size[1]);
    let runs: Vec<usize> = (0..=free.len().saturating_sub(size))
        .filter(|&s| size > 0 && free[s + size - 1] - free[s] == size - 1)
        .collect();
    let tumor: Vec<usize> = match (size, runs.is_empty()) {
        (0, _) => Vec::new(),
        (_, false) => {
            let s = runs[rng.random_range(0..runs.len())];
            free[s..s + size].to_vec()
        }
        // no contiguous run is long enough; fall back to scattered free regions
        (_, true) => {
            let mut pool = free.clone();
            pool.shuffle(rng);
            pool.truncate(size);
            pool.sort_unstable();
            pool
        }
    };
    let mask = TumorMask::new(tumor.iter().copied());

    let schedule = sample_schedule(cfg, rng);
    let (high, low) = (cfg.high_correlation, cfg.low_correlation);
    let mut values = vec![0.0; cfg.frames * n];
    for t in 0..cfg.frames {
        let row = &mut values[t * n..(t + 1) * n];
        for v in row.iter_mut() {
            *v = rng.sample::<f64, _>(StandardNormal);
        }
        for (members, is_language) in communities.driven() {
            let active = if is_language {
                schedule.language_active(t)
            } else {
                schedule.motor_active(t)
            };
            let rho = if active { high } else { low };
            let shared: f64 = rng.sample(StandardNormal);
            for &r in members {
                row[r] = rho.sqrt() * shared + (1.0 - rho).sqrt() * row[r];
            }
        }
        if cfg.noise > 0.0 {
            for v in row.iter_mut() {
                *v += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let series = TimeSeries::new(cfg.frames, n, values)?;

    let classes = std::array::from_fn(|k| {
        present[k].then(|| {
            let mut c = vec![BACKGROUND; n];
            for &r in communities.for_task(Task::ALL[k]) {
                c[r] = ELOQUENT;
            }
            for &r in &tumor {
                c[r] = TUMOR;
            }
            c
        })
    });
    let labels = LabelTensor::from_classes(n, classes)?;
    Ok(SynthPatient {
        id: id.to_string(),
        series,
        mask,
        labels,
        bilateral,
        communities,
        schedule,
    })
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:03}")
}

/// Every patient of the cohort, each from its own derived stream.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<SynthPatient>> {
    cfg.validate()?;
    let mut order: Vec<usize> = (0..cfg.patients).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX)));
    let mut bilateral = vec![false; cfg.patients];
    for &i in &order[..cfg.bilateral_count()] {
        bilateral[i] = true;
    }
    (0..cfg.patients)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, i as u64));
            generate_patient(cfg, &patient_id(i), bilateral[i], &mut rng)
        })
        .collect()
}

/// Per-window mean Pearson correlation over member pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynchronyTrace {
    /// `None` for windows where every pair was excluded.
    pub values: Vec<Option<f64>>,
    /// Pairs skipped over all windows because a member was constant.
    pub excluded_pairs: usize,
}

pub fn oracle_window_synchrony(
    series: &TimeSeries,
    members: &[usize],
    wcfg: &WindowConfig,
) -> Result<SynchronyTrace> {
    if let Some(&r) = members.iter().find(|&&r| r >= series.regions()) {
        return Err(Error::Mask {
            index: r,
            regions: series.regions(),
        });
    }
    let mut excluded_pairs = 0;
    let mut values = Vec::new();
    for win in extract_windows(series, wcfg)? {
        let cols: Vec<Vec<f64>> = members
            .iter()
            .map(|&r| (0..win.frames()).map(|t| win.value(t, r)).collect())
            .collect();
        let mut sum = 0.0;
        let mut count = 0;
        for i in 0..cols.len() {
            for j in i + 1..cols.len() {
                match pearson(&cols[i], &cols[j]) {
                    Some(r) => {
                        sum += r;
                        count += 1;
                    }
                    None => excluded_pairs += 1,
                }
            }
        }
        values.push((count > 0).then(|| sum / count as f64));
    }
    Ok(SynchronyTrace {
        values,
        excluded_pairs,
    })
}
