//! Sliding-window similarity matrices with tumor masking.
//!
//! Each window is z-scored per region, so the Gram matrix scaled by `1/D` is
//! the Pearson correlation `rho`, and the similarity is `exp((rho - 1) / eps)`.
//! Unmasked entries therefore lie in `[exp(-2/eps), 1]` with a unit diagonal.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Region time courses, `frames x regions`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    data: Tensor,
}

impl TimeSeries {
    pub fn new(frames: usize, regions: usize, values: Vec<f64>) -> Result<Self> {
        if regions < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 regions, got {regions}"
            )));
        }
        let data = Tensor::matrix(frames, regions, values)?;
        if !data.is_finite() {
            return Err(Error::Format(
                "time series contains non-finite values".into(),
            ));
        }
        Ok(TimeSeries { data })
    }

    pub fn from_tensor(data: Tensor) -> Result<Self> {
        if data.rank() != 2 {
            return Err(Error::Shape(format!(
                "time series must be frames x regions, got {:?}",
                data.shape()
            )));
        }
        let (f, r) = (data.rows(), data.cols());
        Self::new(f, r, data.into_values())
    }

    pub fn frames(&self) -> usize {
        self.data.rows()
    }

    pub fn regions(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.data.values_mut()
    }

    pub fn value(&self, frame: usize, region: usize) -> f64 {
        self.data.at(frame, region)
    }

    /// Frames `start..start + len` as a new series.
    pub fn segment(&self, start: usize, len: usize) -> Result<TimeSeries> {
        if start + len > self.frames() {
            return Err(Error::InputTooShort {
                frames: self.frames(),
                window: start + len,
            });
        }
        let n = self.regions();
        let v = self.data.values()[start * n..(start + len) * n].to_vec();
        TimeSeries::new(len, n, v)
    }
}

/// Sliding-window settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_length: usize,
    pub stride: usize,
    pub epsilon: f64,
    /// Treat regions that are constant within a window as masked for that
    /// window instead of failing.
    pub degenerate_as_masked: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_length: 45,
            stride: 5,
            epsilon: 1.0,
            degenerate_as_masked: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 {
            return Err(Error::Config(format!(
                "window length must be >= 2, got {}",
                self.window_length
            )));
        }
        if self.stride < 1 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if !(self.epsilon >= 1.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 1, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Number of complete windows in a scan of `frames` frames.
    pub fn window_count(&self, frames: usize) -> usize {
        if frames < self.window_length {
            0
        } else {
            (frames - self.window_length) / self.stride + 1
        }
    }
}

/// Tumor regions whose rows and columns are zeroed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TumorMask {
    regions: BTreeSet<usize>,
}

impl TumorMask {
    pub fn new(regions: impl IntoIterator<Item = usize>) -> Self {
        TumorMask {
            regions: regions.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, region: usize) -> bool {
        self.regions.contains(&region)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.regions.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn validate(&self, regions: usize) -> Result<()> {
        match self.regions.iter().find(|&&r| r >= regions) {
            Some(&index) => Err(Error::Mask { index, regions }),
            None => Ok(()),
        }
    }

    /// Per-region flag vector.
    pub fn flags(&self, regions: usize) -> Vec<bool> {
        let mut f = vec![false; regions];
        for r in self.regions.iter().filter(|&&r| r < regions) {
            f[*r] = true;
        }
        f
    }
}

/// Ordered masked similarity matrices, one per window.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicConnectivity {
    regions: usize,
    matrices: Vec<Tensor>,
}

impl DynamicConnectivity {
    pub fn new(regions: usize, matrices: Vec<Tensor>) -> Result<Self> {
        if matrices.is_empty() {
            return Err(Error::EmptySequence(
                "connectivity needs at least one window",
            ));
        }
        for m in &matrices {
            if m.shape() != [regions, regions] {
                return Err(Error::dim(
                    "dynamic connectivity",
                    m.shape(),
                    &[regions, regions],
                ));
            }
        }
        Ok(DynamicConnectivity { regions, matrices })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn window_count(&self) -> usize {
        self.matrices.len()
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    /// Keeps only the first `windows` matrices.
    pub fn truncated(&self, windows: usize) -> Result<Self> {
        Self::new(
            self.regions,
            self.matrices[..windows.min(self.matrices.len())].to_vec(),
        )
    }
}

/// Splits a scan into left-aligned windows; trailing frames that do not fill a
/// window are dropped.
pub fn extract_windows(ts: &TimeSeries, cfg: &WindowConfig) -> Result<Vec<TimeSeries>> {
    cfg.validate()?;
    if ts.frames() < cfg.window_length {
        return Err(Error::InputTooShort {
            frames: ts.frames(),
            window: cfg.window_length,
        });
    }
    (0..cfg.window_count(ts.frames()))
        .map(|t| ts.segment(t * cfg.stride, cfg.window_length))
        .collect()
}

/// Similarity of every region pair within one window.
pub fn similarity_matrix(window: &TimeSeries, epsilon: f64) -> Result<Tensor> {
    let skip = vec![false; window.regions()];
    similarity_skipping(window, epsilon, &skip)
        .map_err(|region| Error::DegenerateRegion { region, window: 0 })
}

/// Similarity that never reads the columns flagged in `skip`; their rows and
/// columns come out zero. Fails with the first zero-variance region.
fn similarity_skipping(
    window: &TimeSeries,
    epsilon: f64,
    skip: &[bool],
) -> std::result::Result<Tensor, usize> {
    let (d, n) = (window.frames(), window.regions());
    let x = window.data().values();
    // z-scored columns, stored column-major for contiguous dot products
    let mut z = vec![0.0; n * d];
    for j in (0..n).filter(|&j| !skip[j]) {
        let col = &mut z[j * d..(j + 1) * d];
        for (t, v) in col.iter_mut().enumerate() {
            *v = x[t * n + j];
        }
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        if !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs().max(1.0) {
            return Err(j);
        }
        let sd = var.sqrt();
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    let mut w = Tensor::zeros(&[n, n]);
    for i in (0..n).filter(|&i| !skip[i]) {
        w.set(i, i, 1.0);
        let zi = &z[i * d..(i + 1) * d];
        for j in (i + 1..n).filter(|&j| !skip[j]) {
            let zj = &z[j * d..(j + 1) * d];
            let rho =
                (zi.iter().zip(zj).map(|(a, b)| a * b).sum::<f64>() / d as f64).clamp(-1.0, 1.0);
            let s = ((rho - 1.0) / epsilon).exp();
            w.set(i, j, s);
            w.set(j, i, s);
        }
    }
    Ok(w)
}

/// Zeroes the rows and columns of the masked regions, diagonal included.
pub fn apply_tumor_mask(w: &Tensor, mask: &TumorMask) -> Result<Tensor> {
    if w.rank() != 2 || w.rows() != w.cols() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {:?}",
            w.shape()
        )));
    }
    let n = w.rows();
    mask.validate(n)?;
    let mut out = w.detached();
    for r in mask.iter() {
        for k in 0..n {
            out.set(r, k, 0.0);
            out.set(k, r, 0.0);
        }
    }
    Ok(out)
}

/// Masked similarity matrix for every window of the scan.
pub fn build_dynamic_connectivity(
    ts: &TimeSeries,
    cfg: &WindowConfig,
    mask: &TumorMask,
) -> Result<DynamicConnectivity> {
    mask.validate(ts.regions())?;
    let windows = extract_windows(ts, cfg)?;
    let base_skip = mask.flags(ts.regions());
    let mut matrices = Vec::with_capacity(windows.len());
    for (t, win) in windows.iter().enumerate() {
        let mut skip = base_skip.clone();
        let w = loop {
            match similarity_skipping(win, cfg.epsilon, &skip) {
                Ok(w) => break w,
                Err(region) if cfg.degenerate_as_masked => skip[region] = true,
                Err(region) => return Err(Error::DegenerateRegion { region, window: t }),
            }
        };
        matrices.push(w);
    }
    DynamicConnectivity::new(ts.regions(), matrices)
}

/// Single whole-scan similarity matrix.
pub fn build_static_connectivity(
    ts: &TimeSeries,
    cfg: &WindowConfig,
    mask: &TumorMask,
) -> Result<DynamicConnectivity> {
    let whole = WindowConfig {
        window_length: ts.frames(),
        stride: 1,
        ..cfg.clone()
    };
    build_dynamic_connectivity(ts, &whole, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(frames: usize, regions: usize, f: impl Fn(usize, usize) -> f64) -> TimeSeries {
        let mut v = Vec::with_capacity(frames * regions);
        for t in 0..frames {
            for r in 0..regions {
                v.push(f(t, r));
            }
        }
        TimeSeries::new(frames, regions, v).unwrap()
    }

    fn wobble(t: usize, r: usize) -> f64 {
        ((t * 7 + r * 13) as f64 * 0.37).sin() + 0.1 * r as f64 * ((t as f64) * 0.11).cos()
    }

    #[test]
    fn window_counts() {
        let cfg = WindowConfig::default();
        let ts = series(45, 3, wobble);
        assert_eq!(extract_windows(&ts, &cfg).unwrap().len(), 1);
        let ts = series(150, 3, wobble);
        assert_eq!(extract_windows(&ts, &cfg).unwrap().len(), 22);
    }

    #[test]
    fn fifty_frames_give_two_windows() {
        let ts = series(50, 2, |t, r| (t * 10 + r) as f64);
        let w = extract_windows(&ts, &WindowConfig::default()).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].value(0, 0), 0.0);
        assert_eq!(w[0].value(44, 1), 441.0);
        assert_eq!(w[1].value(0, 0), 50.0);
        assert_eq!(w[1].value(44, 1), 491.0);
    }

    #[test]
    fn too_short_is_an_error() {
        let ts = series(44, 2, wobble);
        assert!(matches!(
            extract_windows(&ts, &WindowConfig::default()),
            Err(Error::InputTooShort {
                frames: 44,
                window: 45
            })
        ));
    }

    #[test]
    fn similarity_closed_forms() {
        let ts = series(40, 3, |t, r| {
            let s = ((t as f64) * 0.7).sin() + 0.3 * ((t as f64) * 1.9).cos();
            match r {
                0 | 1 => s,
                _ => -s,
            }
        });
        let w = similarity_matrix(&ts, 1.0).unwrap();
        assert_eq!(w.at(0, 0), 1.0);
        assert!((w.at(0, 1) - 1.0).abs() < 1e-12);
        assert!((w.at(0, 2) - (-2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_names_region() {
        let ts = series(10, 3, |t, r| if r == 1 { 4.0 } else { wobble(t, r) });
        assert!(matches!(
            similarity_matrix(&ts, 1.0),
            Err(Error::DegenerateRegion { region: 1, .. })
        ));
    }

    #[test]
    fn degenerate_opt_in_masks_region() {
        let ts = series(50, 3, |t, r| if r == 1 { 4.0 } else { wobble(t, r) });
        let mut cfg = WindowConfig::default();
        assert!(build_dynamic_connectivity(&ts, &cfg, &TumorMask::empty()).is_err());
        cfg.degenerate_as_masked = true;
        let dc = build_dynamic_connectivity(&ts, &cfg, &TumorMask::empty()).unwrap();
        for w in dc.matrices() {
            assert_eq!(w.at(1, 1), 0.0);
            assert_eq!(w.at(0, 1), 0.0);
            assert_eq!(w.at(0, 0), 1.0);
        }
    }

    #[test]
    fn mask_examples() {
        let ones = Tensor::full(&[3, 3], 1.0);
        assert_eq!(apply_tumor_mask(&ones, &TumorMask::empty()).unwrap(), ones);
        let m = apply_tumor_mask(&ones, &TumorMask::new([0])).unwrap();
        for k in 0..3 {
            assert_eq!(m.at(0, k), 0.0);
            assert_eq!(m.at(k, 0), 0.0);
        }
        for i in 1..3 {
            for j in 1..3 {
                assert_eq!(m.at(i, j), 1.0);
            }
        }
        let again = apply_tumor_mask(&m, &TumorMask::new([0])).unwrap();
        assert_eq!(again, m);
        assert!(matches!(
            apply_tumor_mask(&ones, &TumorMask::new([3])),
            Err(Error::Mask {
                index: 3,
                regions: 3
            })
        ));
    }

    #[test]
    fn stationary_sinusoids_give_identical_windows() {
        // period 45 frames divides every window length exactly, so every
        // window sees whole cycles of the same two lagged sinusoids
        let period = 45.0;
        let ts = series(100, 3, |t, r| {
            let ph = 2.0 * std::f64::consts::PI * t as f64 / period;
            (ph + r as f64 * 0.8).sin()
        });
        let dc =
            build_dynamic_connectivity(&ts, &WindowConfig::default(), &TumorMask::empty()).unwrap();
        let first = &dc.matrices()[0];
        for w in dc.matrices() {
            assert!(w.max_abs_diff(first) < 1e-9);
        }
    }

    #[test]
    fn larger_epsilon_is_entrywise_larger() {
        let ts = series(60, 4, wobble);
        let mut cfg = WindowConfig::default();
        let a = build_dynamic_connectivity(&ts, &cfg, &TumorMask::empty()).unwrap();
        cfg.epsilon = 10.0;
        let b = build_dynamic_connectivity(&ts, &cfg, &TumorMask::empty()).unwrap();
        for (wa, wb) in a.matrices().iter().zip(b.matrices()) {
            for (x, y) in wa.values().iter().zip(wb.values()) {
                assert!(y >= x);
            }
        }
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = WindowConfig {
            epsilon: 0.5,
            ..WindowConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = WindowConfig {
            window_length: 1,
            ..WindowConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
