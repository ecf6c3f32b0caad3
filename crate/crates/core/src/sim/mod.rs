//! Synthetic TEM signal generation.
//!
//! Clean transients follow the physical forward model
//! `s(t) = Q1 * sum_{k=1..M} exp(-k^2 * Q2 * t) + B` sampled on a fixed
//! 250 Hz grid (900 points starting at 4 ms). Six corpus flavours exist:
//! the `source` domain (mild Gaussian noise) and five shifted domains
//! (`agn`, `lfi`, `hfi`, `imp`, `cmp`) defined in [`noise`].

pub mod noise;
pub mod store;

pub use noise::{
    add_gaussian_snr, add_impulses, add_sinusoid, apply_noise, compose_cmp, NoiseDraws,
};

use crate::error::{Error, Result};
use crate::rng::{stream, Ns};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

/// Number of samples per signal and the image side it reshapes to.
pub const SIGNAL_LEN: usize = 900;
pub const IMAGE_SIDE: usize = 30;

/// Uniform sampling grid. `t0 > 0` because the multi-term decay model
/// diverges at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n: usize,
    pub dt: f64,
    pub t0: f64,
}

impl TimeGrid {
    /// 900 samples at 250 Hz, first sample at one step (4 ms).
    pub fn standard() -> TimeGrid {
        TimeGrid {
            n: SIGNAL_LEN,
            dt: 1.0 / 250.0,
            t0: 1.0 / 250.0,
        }
    }

    pub fn new(n: usize, dt: f64, t0: f64) -> Result<TimeGrid> {
        if n == 0 || !(dt > 0.0) || !(t0 > 0.0) {
            return Err(Error::invalid(format!(
                "time grid needs n >= 1, dt > 0, t0 > 0 (got n={n}, dt={dt}, t0={t0})"
            )));
        }
        Ok(TimeGrid { n, dt, t0 })
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }
}

/// Parameters of one clean transient (mV / 1-per-second units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalParams {
    pub q1: f64,
    pub q2: f64,
    pub b: f64,
    /// Series truncation; 1 = single exponential.
    pub terms: usize,
}

/// Corpus sampling ranges for [`sample_params`].
pub const Q1_RANGE: (f64, f64) = (100.0, 1500.0);
pub const Q2_RANGE: (f64, f64) = (0.5, 4.0);
pub const B_RANGE: (f64, f64) = (2.0, 6.0);

/// One signal trace in mV on its grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal1D {
    pub samples: Vec<f64>,
    pub grid: TimeGrid,
}

impl Signal1D {
    pub fn new(samples: Vec<f64>, grid: TimeGrid) -> Result<Signal1D> {
        if samples.len() != grid.n {
            return Err(Error::invalid(format!(
                "signal has {} samples but grid expects {}",
                samples.len(),
                grid.n
            )));
        }
        if let Some(v) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("signal contains non-finite value {v}")));
        }
        Ok(Signal1D { samples, grid })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Evaluates the decay model on a grid.
pub fn clean_signal(p: &SignalParams, g: &TimeGrid) -> Result<Signal1D> {
    if !(p.q1.is_finite() && p.q2.is_finite() && p.b.is_finite()) {
        return Err(Error::invalid(format!("non-finite signal parameters {p:?}")));
    }
    if p.terms < 1 {
        return Err(Error::invalid("signal needs at least one series term"));
    }
    let mut samples = Vec::with_capacity(g.n);
    for i in 0..g.n {
        let t = g.time(i);
        let mut acc = 0.0f64;
        for k in 1..=p.terms {
            acc += (-((k * k) as f64) * p.q2 * t).exp();
        }
        samples.push(p.q1 * acc + p.b);
    }
    Signal1D::new(samples, *g)
}

/// Uniform corpus draw of `(Q1, Q2, B)` with a single-term series.
pub fn sample_params(rng: &mut impl Rng) -> SignalParams {
    SignalParams {
        q1: rng.random_range(Q1_RANGE.0..=Q1_RANGE.1),
        q2: rng.random_range(Q2_RANGE.0..=Q2_RANGE.1),
        b: rng.random_range(B_RANGE.0..=B_RANGE.1),
        terms: 1,
    }
}

/// Noise domain of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DomainKind {
    Source,
    Agn,
    Lfi,
    Hfi,
    Imp,
    Cmp,
}

impl DomainKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainKind::Source => "source",
            DomainKind::Agn => "agn",
            DomainKind::Lfi => "lfi",
            DomainKind::Hfi => "hfi",
            DomainKind::Imp => "imp",
            DomainKind::Cmp => "cmp",
        }
    }

    pub fn parse(s: &str) -> Result<DomainKind> {
        Ok(match s {
            "source" => DomainKind::Source,
            "agn" => DomainKind::Agn,
            "lfi" => DomainKind::Lfi,
            "hfi" => DomainKind::Hfi,
            "imp" => DomainKind::Imp,
            "cmp" => DomainKind::Cmp,
            _ => return Err(Error::invalid(format!("unknown domain {s:?}"))),
        })
    }

    pub const ALL: [DomainKind; 6] = [
        DomainKind::Source,
        DomainKind::Agn,
        DomainKind::Lfi,
        DomainKind::Hfi,
        DomainKind::Imp,
        DomainKind::Cmp,
    ];

    /// The five shifted domains (everything but `source`).
    pub const SHIFTED: [DomainKind; 5] = [
        DomainKind::Agn,
        DomainKind::Lfi,
        DomainKind::Hfi,
        DomainKind::Imp,
        DomainKind::Cmp,
    ];
}

/// Sinusoidal interference ranges (amplitude mV, frequency Hz, phase rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToneRange {
    pub amp_mv: (f64, f64),
    pub freq_hz: (f64, f64),
    pub phase: (f64, f64),
}

/// Impulse interference ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpulseRange {
    pub count: (usize, usize),
    pub amp_mv: (f64, f64),
}

/// Which injectors a domain applies and with what ranges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub snr_db: Option<(f64, f64)>,
    pub lfi: Option<ToneRange>,
    pub hfi: Option<ToneRange>,
    pub imp: Option<ImpulseRange>,
}

const LFI_TONE: ToneRange = ToneRange {
    amp_mv: (10.0, 30.0),
    freq_hz: (1.0, 5.0),
    phase: (0.0, std::f64::consts::TAU),
};
const HFI_TONE: ToneRange = ToneRange {
    amp_mv: (10.0, 30.0),
    freq_hz: (10.0, 50.0),
    phase: (0.0, std::f64::consts::TAU),
};
const IMP_RANGE: ImpulseRange = ImpulseRange {
    count: (20, 30),
    amp_mv: (50.0, 70.0),
};

impl DomainSpec {
    /// Default ranges per domain: source 20-25 dB Gaussian; agn 8-10 dB;
    /// lfi 10-30 mV tones at 1-5 Hz; hfi the same at 10-50 Hz; imp 20-30
    /// spikes of 50-70 mV; cmp all four of the shifted kinds in sequence.
    pub fn default_for(kind: DomainKind) -> DomainSpec {
        let mut spec = DomainSpec {
            kind,
            snr_db: None,
            lfi: None,
            hfi: None,
            imp: None,
        };
        match kind {
            DomainKind::Source => spec.snr_db = Some((20.0, 25.0)),
            DomainKind::Agn => spec.snr_db = Some((8.0, 10.0)),
            DomainKind::Lfi => spec.lfi = Some(LFI_TONE),
            DomainKind::Hfi => spec.hfi = Some(HFI_TONE),
            DomainKind::Imp => spec.imp = Some(IMP_RANGE),
            DomainKind::Cmp => {
                spec.snr_db = Some((8.0, 10.0));
                spec.lfi = Some(LFI_TONE);
                spec.hfi = Some(HFI_TONE);
                spec.imp = Some(IMP_RANGE);
            }
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        fn range_ok(lo: f64, hi: f64) -> bool {
            lo.is_finite() && hi.is_finite() && lo <= hi
        }
        if let Some((lo, hi)) = self.snr_db {
            if !range_ok(lo, hi) {
                return Err(Error::invalid(format!("bad SNR range [{lo}, {hi}]")));
            }
        }
        for tone in [self.lfi, self.hfi].into_iter().flatten() {
            if !range_ok(tone.amp_mv.0, tone.amp_mv.1)
                || tone.amp_mv.0 < 0.0
                || !range_ok(tone.freq_hz.0, tone.freq_hz.1)
                || !range_ok(tone.phase.0, tone.phase.1)
            {
                return Err(Error::invalid(format!("bad tone ranges {tone:?}")));
            }
        }
        if let Some(imp) = self.imp {
            if imp.count.0 > imp.count.1 || !range_ok(imp.amp_mv.0, imp.amp_mv.1) {
                return Err(Error::invalid(format!("bad impulse ranges {imp:?}")));
            }
        }
        Ok(())
    }
}

/// Per-sample generation record.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleLog {
    pub params: SignalParams,
    pub draws: NoiseDraws,
}

/// A generated corpus: `n` aligned clean/noisy rows (f32, row-major n x 900)
/// plus the per-sample parameter log. `clean` is optional because field data
/// loaded from disk may not carry ground truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub seed: u64,
    pub grid: TimeGrid,
    pub n: usize,
    pub clean: Option<Vec<f32>>,
    pub noisy: Vec<f32>,
    pub log: Vec<SampleLog>,
}

impl Dataset {
    pub fn noisy_row(&self, i: usize) -> &[f32] {
        &self.noisy[i * self.grid.n..(i + 1) * self.grid.n]
    }

    pub fn clean_row(&self, i: usize) -> Option<&[f32]> {
        self.clean
            .as_ref()
            .map(|c| &c[i * self.grid.n..(i + 1) * self.grid.n])
    }

    /// 10:1 train/test split: indices are shuffled under the dataset's own
    /// seed, then cut contiguously (first 10 parts train, last part test).
    pub fn split_train_test(&self) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut stream(self.seed, Ns::Split, 0));
        let n_test = self.n / 11;
        let cut = self.n - n_test;
        (self.gather(&idx[..cut]), self.gather(&idx[cut..]))
    }

    /// New dataset holding the given rows in the given order.
    pub fn gather(&self, rows: &[usize]) -> Dataset {
        let w = self.grid.n;
        let pick = |m: &Vec<f32>| -> Vec<f32> {
            let mut out = Vec::with_capacity(rows.len() * w);
            for &r in rows {
                out.extend_from_slice(&m[r * w..(r + 1) * w]);
            }
            out
        };
        Dataset {
            spec: self.spec,
            seed: self.seed,
            grid: self.grid,
            n: rows.len(),
            clean: self.clean.as_ref().map(pick),
            noisy: pick(&self.noisy),
            log: rows.iter().map(|&r| self.log[r].clone()).collect(),
        }
    }
}

/// Generates `n` clean/noisy pairs. Every sample draws from its own rng
/// stream keyed by `(seed, index)`, so the result is a pure function of
/// `(spec, n, seed)` no matter how generation is scheduled.
pub fn make_dataset(spec: &DomainSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("make_dataset: n must be >= 1"));
    }
    let grid = TimeGrid::standard();
    let rows: Vec<(Vec<f64>, Vec<f64>, SampleLog)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, Ns::Sample, i as u64);
            let params = sample_params(&mut rng);
            let clean = clean_signal(&params, &grid).expect("corpus params are finite");
            let (noisy, draws) = apply_noise(&clean, spec, &mut rng).expect("valid spec");
            (clean.samples, noisy.samples, SampleLog { params, draws })
        })
        .collect();

    let mut clean = Vec::with_capacity(n * grid.n);
    let mut noisy = Vec::with_capacity(n * grid.n);
    let mut log = Vec::with_capacity(n);
    for (c, y, l) in rows {
        clean.extend(c.iter().map(|&v| v as f32));
        noisy.extend(y.iter().map(|&v| v as f32));
        log.push(l);
    }
    Ok(Dataset {
        spec: *spec,
        seed,
        grid,
        n,
        clean: Some(clean),
        noisy,
        log,
    })
}

/// Row-major square image view of a signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub side: usize,
    pub data: Vec<f64>,
}

impl Image2D {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.side + c]
    }
}

/// Length-900 signal -> 30x30 row-major image (`s[i] -> m[i/30][i%30]`).
pub fn to_image(s: &Signal1D) -> Result<Image2D> {
    if s.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "to_image: need {} samples, got {}",
            IMAGE_SIDE * IMAGE_SIDE,
            s.len()
        )));
    }
    Ok(Image2D {
        side: IMAGE_SIDE,
        data: s.samples.clone(),
    })
}

/// Inverse of [`to_image`]; `from_image(to_image(s)) == s` exactly.
pub fn from_image(m: &Image2D, grid: TimeGrid) -> Result<Signal1D> {
    if m.side * m.side != grid.n || m.data.len() != m.side * m.side {
        return Err(Error::invalid(format!(
            "from_image: {}x{} image does not match grid n={}",
            m.side, m.side, grid.n
        )));
    }
    Signal1D::new(m.data.clone(), grid)
}
