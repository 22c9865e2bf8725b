//! Multi-scale sliding-window band generator.
//!
//! For each slice width `L` the PSD row is summarised by `B = ⌊(P − L)/G⌋`
//! window means starting every `G` bins. Scales are concatenated in the
//! configured order into `K = Σ B` columns per channel.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::Grid;
use crate::signal::PsdFeatures;
use crate::{Error, FormatError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandGenConfig {
    /// Band slice widths in PSD bins.
    pub window_lengths: Vec<usize>,
    /// Shift between neighbouring slices, in bins.
    pub increment: usize,
}

impl Default for BandGenConfig {
    fn default() -> Self {
        BandGenConfig {
            window_lengths: vec![1, 5, 10, 15, 20],
            increment: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLayout {
    pub window_lengths: Vec<usize>,
    pub increment: usize,
    pub counts: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total_k: usize,
}

impl BandLayout {
    pub fn scales(&self) -> usize {
        self.counts.len()
    }

    /// Columns of scale `i` inside the concatenated axis.
    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i] + self.counts[i]
    }

    /// CSV descriptor: header, one `scale` row per slice width, then a
    /// `total` row carrying K.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,window_len,increment,count,offset\n");
        for i in 0..self.scales() {
            out.push_str(&format!(
                "scale,{},{},{},{}\n",
                self.window_lengths[i], self.increment, self.counts[i], self.offsets[i]
            ));
        }
        out.push_str(&format!("total,,,{},\n", self.total_k));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| {
            Error::Format(FormatError::Validation {
                offset: line as u64,
                message: format!("layout line {line}: {msg}"),
            })
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "kind,window_len,increment,count,offset")) => {}
            _ => return Err(bad(0, "missing header")),
        }
        let mut window_lengths = Vec::new();
        let mut counts = Vec::new();
        let mut increment = None;
        let mut total = None;
        for (ln, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(ln, "expected 5 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(ln, "not an integer"));
            match f[0] {
                "scale" => {
                    window_lengths.push(num(f[1])?);
                    let g = num(f[2])?;
                    if increment.is_some_and(|g0| g0 != g) {
                        return Err(bad(ln, "mixed increments"));
                    }
                    increment = Some(g);
                    counts.push(num(f[3])?);
                }
                "total" => total = Some(num(f[3])?),
                _ => return Err(bad(ln, "unknown row kind")),
            }
        }
        let layout = Self::from_counts(window_lengths, increment.unwrap_or(1), counts)?;
        if total != Some(layout.total_k) {
            return Err(bad(0, "total row does not match the scale counts"));
        }
        Ok(layout)
    }

    /// Layout with explicit per-scale counts, for tests and descriptors.
    pub fn from_counts(window_lengths: Vec<usize>, increment: usize, counts: Vec<usize>) -> Result<Self> {
        if window_lengths.len() != counts.len() || counts.is_empty() {
            return Err(invalid_arg!("layout needs one count per scale"));
        }
        if counts.contains(&0) {
            return Err(invalid_arg!("layout contains an empty scale"));
        }
        let offsets = counts
            .iter()
            .scan(0, |acc, &b| {
                let o = *acc;
                *acc += b;
                Some(o)
            })
            .collect();
        Ok(BandLayout {
            total_k: counts.iter().sum(),
            window_lengths,
            increment,
            counts,
            offsets,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandCombination {
    /// `channels × total_k` band means.
    pub s: Grid,
    pub layout: BandLayout,
}

pub fn band_counts(p: usize, cfg: &BandGenConfig) -> Result<BandLayout> {
    if cfg.increment == 0 {
        return Err(invalid_arg!("band increment must be at least 1"));
    }
    if cfg.window_lengths.is_empty() {
        return Err(invalid_arg!("at least one band slice width is required"));
    }
    let mut counts = Vec::with_capacity(cfg.window_lengths.len());
    for &l in &cfg.window_lengths {
        if l == 0 {
            return Err(invalid_arg!("band slice width must be at least 1"));
        }
        let b = p.saturating_sub(l) / cfg.increment;
        if l >= p || b == 0 {
            return Err(invalid_arg!(
                "slice width {l} over {p} bins with increment {} yields no bands",
                cfg.increment
            ));
        }
        counts.push(b);
    }
    BandLayout::from_counts(cfg.window_lengths.clone(), cfg.increment, counts)
}

/// `out[j] = mean(f_c[j·g .. j·g + l])` for `j < b`.
pub fn slice_scale(f_c: &[f64], l: usize, g: usize, b: usize) -> Vec<f64> {
    assert!(l >= 1 && g >= 1 && (b - 1) * g + l <= f_c.len(), "slice_scale precondition");
    let inv = 1.0 / l as f64;
    (0..b)
        .map(|j| f_c[j * g..j * g + l].iter().sum::<f64>() * inv)
        .collect()
}

pub fn build_combination(psd: &PsdFeatures, cfg: &BandGenConfig) -> Result<BandCombination> {
    let layout = band_counts(psd.bins(), cfg)?;
    let mut s = Grid::zeros(&[psd.channels(), layout.total_k]);
    for c in 0..psd.channels() {
        let row = psd.values.row(c);
        let out = s.row_mut(c);
        for (i, &l) in layout.window_lengths.iter().enumerate() {
            let means = slice_scale(row, l, layout.increment, layout.counts[i]);
            out[layout.block(i)].copy_from_slice(&means);
        }
    }
    Ok(BandCombination { s, layout })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn psd_from(rows: Vec<Vec<f64>>) -> PsdFeatures {
        let p = rows[0].len();
        let c = rows.len();
        PsdFeatures {
            values: Grid::from_vec(&[c, p], rows.concat()).unwrap(),
            freqs_hz: (1..=p).map(|f| f as f64).collect(),
        }
    }

    #[test]
    fn default_counts() {
        let l = band_counts(70, &BandGenConfig::default()).unwrap();
        assert_eq!(l.counts, vec![69, 65, 60, 55, 50]);
        assert_eq!(l.total_k, 299);
        assert_eq!(l.offsets, vec![0, 69, 134, 194, 249]);
        let single = BandGenConfig { window_lengths: vec![1], increment: 1 };
        assert_eq!(band_counts(70, &single).unwrap().counts, vec![69]);
        for w in l.counts.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn degenerate_scales_are_rejected() {
        let cfg = BandGenConfig { window_lengths: vec![70], increment: 1 };
        assert!(band_counts(70, &cfg).is_err());
        let cfg = BandGenConfig { window_lengths: vec![5], increment: 0 };
        assert!(band_counts(70, &cfg).is_err());
        let cfg = BandGenConfig { window_lengths: vec![60], increment: 20 };
        assert!(band_counts(70, &cfg).is_err());
    }

    #[test]
    fn slice_anchors() {
        let ramp: Vec<f64> = (0..70).map(f64::from).collect();
        assert_eq!(slice_scale(&ramp, 1, 1, 69), (0..69).map(f64::from).collect::<Vec<_>>());
        assert!(slice_scale(&[2.5; 30], 7, 3, 7).iter().all(|&v| v == 2.5));
        assert_eq!(slice_scale(&ramp, 2, 2, 3), vec![0.5, 2.5, 4.5]);
    }

    #[test]
    fn constant_psd_gives_constant_combination() {
        let psd = psd_from(vec![vec![0.0; 70], vec![1.25; 70]]);
        let s = build_combination(&psd, &BandGenConfig::default()).unwrap();
        assert_eq!(s.s.shape(), &[2, 299]);
        assert!(s.s.row(0).iter().all(|&v| v == 0.0));
        assert!(s.s.row(1).iter().all(|&v| v == 1.25));
    }

    #[test]
    fn layout_csv_round_trip() {
        let l = band_counts(70, &BandGenConfig::default()).unwrap();
        let csv = l.to_csv();
        assert!(csv.ends_with("total,,,299,\n"));
        assert_eq!(BandLayout::from_csv(&csv).unwrap(), l);
        assert!(BandLayout::from_csv("nope").is_err());
        assert!(BandLayout::from_csv(&csv.replace("total,,,299", "total,,,300")).is_err());
    }
}
