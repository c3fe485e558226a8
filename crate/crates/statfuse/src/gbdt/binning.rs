//! Histogram binning of feature columns. Continuous features get up to 255
//! quantile bins with cut points at midpoints between adjacent training
//! values; categorical features use their level codes directly.

use super::frame::{FeatureColumn, FeatureFrame};

pub const MAX_BINS: usize = 255;

#[derive(Debug, Clone)]
pub enum BinKind {
    /// cuts[b] is the inclusive upper boundary of bin b; the last bin is
    /// unbounded above. bin(x) = #{cuts < x}.
    Numeric { cuts: Vec<f64> },
    Categorical { n_levels: u32 },
}

#[derive(Debug, Clone)]
pub struct BinnedFeature {
    pub kind: BinKind,
    pub bins: Vec<u16>,
    pub n_bins: u16,
}

impl BinnedFeature {
    fn from_numeric(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        let cuts: Vec<f64> = if sorted.len() <= MAX_BINS {
            sorted
                .windows(2)
                .map(|w| midpoint(w[0], w[1]))
                .collect()
        } else {
            // Equal-frequency boundaries over the sorted distinct values.
            let n = sorted.len();
            let mut cuts = Vec::with_capacity(MAX_BINS - 1);
            for b in 1..MAX_BINS {
                let ix = (b * n) / MAX_BINS;
                let ix = ix.clamp(1, n - 1);
                let cut = midpoint(sorted[ix - 1], sorted[ix]);
                if cuts.last() != Some(&cut) {
                    cuts.push(cut);
                }
            }
            cuts
        };
        let n_bins = (cuts.len() + 1) as u16;
        let bins = values
            .iter()
            .map(|&x| cuts.partition_point(|&c| c < x) as u16)
            .collect();
        BinnedFeature {
            kind: BinKind::Numeric { cuts },
            bins,
            n_bins,
        }
    }

    fn from_categorical(codes: &[u32], n_levels: u32) -> Self {
        assert!(n_levels as usize <= u16::MAX as usize, "too many levels");
        BinnedFeature {
            kind: BinKind::Categorical { n_levels },
            bins: codes.iter().map(|&c| c as u16).collect(),
            n_bins: n_levels as u16,
        }
    }

    /// Threshold corresponding to a split that sends bins 0..=b left.
    pub fn threshold_for(&self, b: u16) -> f64 {
        match &self.kind {
            BinKind::Numeric { cuts } => cuts[b as usize],
            BinKind::Categorical { .. } => panic!("threshold on categorical feature"),
        }
    }
}

pub fn bin_frame(frame: &FeatureFrame) -> Vec<BinnedFeature> {
    frame
        .columns
        .iter()
        .map(|col| match col {
            FeatureColumn::Numeric(v) => BinnedFeature::from_numeric(v),
            FeatureColumn::Categorical { codes, n_levels } => {
                BinnedFeature::from_categorical(codes, *n_levels)
            }
        })
        .collect()
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    // Guard against rounding collapsing the midpoint onto b, which would
    // leak b's rows into the lower bin.
    if m >= b {
        a
    } else {
        m
    }
}
